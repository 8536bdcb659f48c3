//! Affine layers and multilayer perceptrons built from tape operations.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// `x · W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    /// Glorot-uniform weight, zero bias, named `{prefix}/weight` and `{prefix}/bias`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert_glorot(
            format!("{prefix}/weight"),
            &[fan_in, fan_out],
            fan_in,
            fan_out,
            rng,
        )?;
        let bias = store.insert_zeros(format!("{prefix}/bias"), &[fan_out])?;
        Ok(Dense { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row_bias(xw, b)
    }
}

/// Applies `layers` in order with ReLU between them; the last layer stays affine.
pub fn mlp_forward(tape: &mut Tape, store: &ParamStore, layers: &[Dense], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, store, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Stack of [`Dense`] layers with the given widths, e.g. `[2, 32, 64]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, widths: &[usize], rng: &mut R) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{prefix}/{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        mlp_forward(tape, store, &self.layers, x)
    }

    /// Sets every weight and bias of the final layer to zero.
    pub fn zero_output(&self, store: &mut ParamStore) {
        if let Some(last) = self.layers.last() {
            store.value_mut(last.weight).data_mut().fill(0.0);
            store.value_mut(last.bias).data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Array;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[2, 4, 3], &mut rng).unwrap();
        for l in &mlp.layers {
            store.value_mut(l.weight).data_mut().fill(0.0);
        }
        store.value_mut(mlp.layers[1].bias).data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        let mut t = Tape::new();
        let x = t.constant(Array::from_rows(&[vec![0.3, 0.9], vec![-4.0, 2.0]]).unwrap()).unwrap();
        let y = mlp.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 3], &mut rng).unwrap();
        *store.value_mut(mlp.layers[0].weight) = Array::identity(3);
        let mut t = Tape::new();
        let input = Array::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap();
        let x = t.constant(input.clone()).unwrap();
        let y = mlp.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y), &input);
    }

    #[test]
    fn glorot_range_respected() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 10, 6, &mut rng).unwrap();
        let bound = crate::glorot_bound(10, 6);
        assert!(store.value(d.weight).data().iter().all(|w| w.abs() <= bound));
        assert!(store.value(d.bias).data().iter().all(|&b| b == 0.0));
    }
}

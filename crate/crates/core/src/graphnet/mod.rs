//! Attention graph network mapping (current, goal) keypoints to a pick × place Q matrix.
//!
//! Node order is `[current_0 .. current_{K-1}, goal_0 .. goal_{K-1}]`. The
//! first `self_layers` layers let each node attend only to nodes of its own
//! frame (itself included); the following `cross_layers` layers let it attend
//! only to the other frame. The global variant attends over all `2K` nodes in
//! every layer.

use std::ops::Range;

use diffcore::nn::Mlp;
use diffcore::{Array, ParamId, ParamStore, Real, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;

/// Namespace of every graph-network parameter name.
pub const PARAM_PREFIX: &str = "graphnet/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Local,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    SelfEdges,
    CrossEdges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnConfig {
    pub keypoints: usize,
    /// Node representation width.
    pub hidden: usize,
    pub self_layers: usize,
    pub cross_layers: usize,
    /// Embedding MLP widths; must start at 2 and end at `hidden`.
    pub embed_widths: Vec<usize>,
    /// Hidden widths of each layer's update MLP between `2·hidden` and `hidden`.
    pub update_hidden: Vec<usize>,
    pub heads: usize,
    pub mode: AttentionMode,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            keypoints: 8,
            hidden: 64,
            self_layers: 2,
            cross_layers: 2,
            embed_widths: vec![2, 32, 64],
            update_hidden: vec![64],
            heads: 1,
            mode: AttentionMode::Local,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.self_layers == 0 || self.cross_layers == 0 {
            return bad("graph network needs at least one self and one cross layer");
        }
        if self.keypoints == 0 || self.hidden == 0 {
            return bad("keypoints and hidden width must be positive");
        }
        if self.embed_widths.first() != Some(&2) || self.embed_widths.last() != Some(&self.hidden) {
            return bad("embedding widths must run from 2 to the hidden width");
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden width must be divisible by the head count");
        }
        Ok(())
    }

    pub fn layer_kinds(&self) -> Vec<EdgeKind> {
        let mut v = vec![EdgeKind::SelfEdges; self.self_layers];
        v.extend(vec![EdgeKind::CrossEdges; self.cross_layers]);
        v
    }
}

/// Attention score evaluations of one layer: `2K²` for local self or cross
/// layers, `(2K)²` for the global variant.
pub fn count_attention_pairs(keypoints: usize, mode: AttentionMode) -> usize {
    match mode {
        AttentionMode::Local => 2 * keypoints * keypoints,
        AttentionMode::Global => 4 * keypoints * keypoints,
    }
}

/// `K × K` action values; row = pick (current keypoint), column = place (goal keypoint).
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix {
    pub k: usize,
    pub values: Vec<f64>,
}

impl QMatrix {
    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != k * k {
            return Err(Error::KeypointMismatch {
                left: values.len(),
                right: k * k,
            });
        }
        Ok(QMatrix { k, values })
    }

    pub fn get(&self, pick: usize, place: usize) -> f64 {
        self.values[pick * self.k + place]
    }

    /// Largest entry; ties resolve to the lowest row-major index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.k, best % self.k)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug)]
struct Head {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    kind: EdgeKind,
    heads: Vec<Head>,
    update: Mlp,
}

#[derive(Clone, Debug)]
pub struct GraphNet {
    config: GnnConfig,
    store: ParamStore,
    embed: Mlp,
    layers: Vec<Layer>,
    pick: ParamId,
    place: ParamId,
}

fn coords(sets: &[&KeypointSet], k: usize) -> Result<Vec<Real>> {
    let mut out = Vec::with_capacity(sets.len() * k * 2);
    for s in sets {
        if s.len() != k {
            return Err(Error::KeypointMismatch { left: s.len(), right: k });
        }
        out.extend(s.points.iter().flat_map(|p| [p[0] as Real, p[1] as Real]));
    }
    Ok(out)
}

fn gather_rows(tape: &mut Tape, x: Var, rows: &[usize], width: usize) -> Result<Var> {
    let flat: Vec<usize> = rows.iter().flat_map(|&r| r * width..(r + 1) * width).collect();
    let g = tape.gather(x, &flat)?;
    Ok(tape.reshape(g, &[rows.len(), width])?)
}

impl GraphNet {
    pub fn new(config: GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = config.hidden;
        let d = n / config.heads;
        let embed = Mlp::new(&mut store, &format!("{PARAM_PREFIX}embed"), &config.embed_widths, &mut rng)?;
        let mut layers = Vec::new();
        for (l, kind) in config.layer_kinds().into_iter().enumerate() {
            let mut heads = Vec::new();
            for h in 0..config.heads {
                let mut proj = |name: &str| {
                    store.insert_glorot(format!("{PARAM_PREFIX}layer{l}/head{h}/{name}"), &[n, d], n, d, &mut rng)
                };
                heads.push(Head {
                    query: proj("query")?,
                    key: proj("key")?,
                    value: proj("value")?,
                });
            }
            let mut widths = vec![2 * n];
            widths.extend(&config.update_hidden);
            widths.push(n);
            let update = Mlp::new(&mut store, &format!("{PARAM_PREFIX}layer{l}/update"), &widths, &mut rng)?;
            layers.push(Layer { kind, heads, update });
        }
        let pick = store.insert_glorot(format!("{PARAM_PREFIX}pick"), &[n, n], n, n, &mut rng)?;
        let place = store.insert_glorot(format!("{PARAM_PREFIX}place"), &[n, n], n, n, &mut rng)?;
        Ok(GraphNet {
            config,
            store,
            embed,
            layers,
            pick,
            place,
        })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zeroes the final layer of every update MLP, making each message-passing layer the identity.
    pub fn zero_updates(&mut self) {
        for l in &self.layers {
            l.update.zero_output(&mut self.store);
        }
    }

    /// Zeroes the final embedding layer so every node embeds to its bias.
    pub fn zero_embedding_weights(&mut self) {
        for d in &self.embed.layers {
            self.store.value_mut(d.weight).data_mut().fill(0.0);
        }
    }

    /// Node embeddings `[B·2K, N]` for a batch of (current, goal) pairs.
    pub fn embed_var(&self, tape: &mut Tape, current: &[&KeypointSet], goal: &[&KeypointSet]) -> Result<Var> {
        if current.len() != goal.len() || current.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let k = self.config.keypoints;
        let mut data = Vec::with_capacity(current.len() * 4 * k);
        for (c, g) in current.iter().zip(goal) {
            data.extend(coords(&[c], k)?);
            data.extend(coords(&[g], k)?);
        }
        let x = tape.constant(Array::new([current.len() * 2 * k, 2], data)?)?;
        Ok(self.embed.forward(tape, &self.store, x)?)
    }

    /// Neighbor ranges of every node for `batch` stacked graphs.
    pub fn neighbor_ranges(&self, kind: EdgeKind, batch: usize) -> Vec<Range<usize>> {
        let k = self.config.keypoints;
        let mut out = Vec::with_capacity(batch * 2 * k);
        for b in 0..batch {
            let base = b * 2 * k;
            let (cur, goal) = (base..base + k, base + k..base + 2 * k);
            for p in 0..2 * k {
                let own_is_cur = p < k;
                out.push(match (self.config.mode, kind, own_is_cur) {
                    (AttentionMode::Global, _, _) => base..base + 2 * k,
                    (_, EdgeKind::SelfEdges, true) | (_, EdgeKind::CrossEdges, false) => cur.clone(),
                    _ => goal.clone(),
                });
            }
        }
        out
    }

    /// One residual message-passing layer: `x + MLP([x ‖ m])`.
    pub fn layer_var(&self, tape: &mut Tape, x: Var, layer: usize, batch: usize) -> Result<(Var, Vec<Var>)> {
        let l = &self.layers[layer];
        let ranges = self.neighbor_ranges(l.kind, batch);
        let mut msg: Option<Var> = None;
        let mut att = Vec::new();
        for h in &l.heads {
            let wq = tape.param(&self.store, h.query);
            let wk = tape.param(&self.store, h.key);
            let wv = tape.param(&self.store, h.value);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let m = tape.attention(q, k, v, ranges.clone())?;
            att.push(m);
            msg = Some(match msg {
                None => m,
                Some(prev) => tape.concat_cols(prev, m)?,
            });
        }
        let msg = msg.expect("at least one head");
        let cat = tape.concat_cols(x, msg)?;
        let upd = l.update.forward(tape, &self.store, cat)?;
        Ok((tape.add(x, upd)?, att))
    }

    /// Node representations after the first `layers` message-passing layers.
    pub fn nodes_var(&self, tape: &mut Tape, current: &[&KeypointSet], goal: &[&KeypointSet], layers: usize) -> Result<Var> {
        let mut x = self.embed_var(tape, current, goal)?;
        for l in 0..layers.min(self.layers.len()) {
            x = self.layer_var(tape, x, l, current.len())?.0;
        }
        Ok(x)
    }

    /// Q matrices `[B·K, K]`: block `b` holds `(P_pick x_i)ᵀ(P_place x_j) / √N`.
    pub fn forward_var(&self, tape: &mut Tape, current: &[&KeypointSet], goal: &[&KeypointSet]) -> Result<Var> {
        let batch = current.len();
        let k = self.config.keypoints;
        let x = self.nodes_var(tape, current, goal, self.layers.len())?;
        let cur_rows: Vec<usize> = (0..batch).flat_map(|b| (0..k).map(move |i| b * 2 * k + i)).collect();
        let goal_rows: Vec<usize> = (0..batch).flat_map(|b| (0..k).map(move |i| b * 2 * k + k + i)).collect();
        let n = self.config.hidden;
        let xc = gather_rows(tape, x, &cur_rows, n)?;
        let xg = gather_rows(tape, x, &goal_rows, n)?;
        let pp = tape.param(&self.store, self.pick);
        let pl = tape.param(&self.store, self.place);
        let a = tape.matmul(xc, pp)?;
        let b = tape.matmul(xg, pl)?;
        let q = tape.bmm_nt(a, b, batch)?;
        Ok(tape.scale(q, 1.0 / (self.config.hidden as Real).sqrt())?)
    }

    pub fn q_values(&self, current: &KeypointSet, goal: &KeypointSet) -> Result<QMatrix> {
        Ok(self.q_values_batch(&[current], &[goal])?.remove(0))
    }

    pub fn q_values_batch(&self, current: &[&KeypointSet], goal: &[&KeypointSet]) -> Result<Vec<QMatrix>> {
        let mut tape = Tape::inference();
        let q = self.forward_var(&mut tape, current, goal)?;
        let k = self.config.keypoints;
        tape.value(q)
            .data()
            .chunks(k * k)
            .map(|c| QMatrix::new(k, c.iter().map(|&v| v as f64).collect()))
            .collect()
    }

    /// Node representations `[2K, N]` after `layers` layers, for inspection.
    pub fn node_embeddings(&self, current: &KeypointSet, goal: &KeypointSet, layers: usize) -> Result<Array> {
        let mut tape = Tape::inference();
        let x = self.nodes_var(&mut tape, &[current], &[goal], layers)?;
        Ok(tape.value(x).clone())
    }

    /// Attention weight rows of every layer and head for one graph.
    pub fn attention_rows(&self, current: &KeypointSet, goal: &KeypointSet) -> Result<Vec<Vec<Vec<Real>>>> {
        let mut tape = Tape::inference();
        let mut x = self.embed_var(&mut tape, &[current], &[goal])?;
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            let (next, att) = self.layer_var(&mut tape, x, l, 1)?;
            for a in att {
                out.push(tape.attention_weights(a).expect("attention node"));
            }
            x = next;
        }
        Ok(out)
    }
}

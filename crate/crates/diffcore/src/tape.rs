use std::collections::HashMap;
use std::ops::Range;

use crate::array::Array;
use crate::error::{DiffError, Result};
use crate::gemm::{gemm, Layout};
use crate::params::{ParamId, ParamStore};
use crate::Real;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// `k / 2` zero cells on every border.
    Same,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BmmNt {
        a: Var,
        b: Var,
        batch: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, Real),
    ScaleCols(Var, Vec<Real>),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    ConcatCols(Var, Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Conv2d(Box<ConvInfo>),
    Attention(Box<AttentionInfo>),
    SumRowGroups {
        x: Var,
        group: usize,
    },
    Gaussian {
        coords: Var,
        h: usize,
        w: usize,
        sigma: Real,
    },
}

#[derive(Clone, Debug)]
struct ConvInfo {
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: ConvGeom,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds image `img` (`c_in*h*w` values) into `[c_in*k*k, ho*wo]` columns.
    fn im2col(&self, img: &[Real], cols: &mut [Real]) {
        let pos = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let out = &mut cols[row * pos..(row + 1) * pos];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            out[oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[Real], img: &mut [Real]) {
        let pos = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * pos..(row + 1) * pos];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            img[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionInfo {
    q: Var,
    k: Var,
    v: Var,
    ranges: Vec<Range<usize>>,
    /// Softmax weights, concatenated over query rows in `ranges` order.
    weights: Vec<Real>,
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Counters collected during one backward sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose gradient was propagated to their inputs.
    pub visited: usize,
}

/// Records forward operations for a single reverse sweep.
///
/// Nodes are appended in evaluation order, so the node vector is already
/// topologically sorted. Every forward result is checked for NaN/Inf.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    inference: bool,
}

fn shape_str(a: &Array) -> String {
    format!("{:?}", a.shape())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that treats parameters as constants; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Self::default()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Input that collects a gradient but is not a stored parameter.
    pub fn variable(&mut self, value: Array) -> Result<Var> {
        let rg = !self.inference;
        self.push(value, Op::Leaf, rg, "variable")
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if self.inference {
            self.nodes.push(Node {
                value,
                op: Op::Leaf,
                requires_grad: false,
            });
            Var(self.nodes.len() - 1)
        } else {
            self.nodes.push(Node {
                value,
                op: Op::Param(id),
                requires_grad: true,
            });
            Var(self.nodes.len() - 1)
        };
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (av.dims2(), bv.dims2()) else {
            return Err(DiffError::shape(
                "matmul",
                format!("{} x {}", shape_str(av), shape_str(bv)),
            ));
        };
        if k != k2 {
            return Err(DiffError::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            Layout::row_major(k),
            bv.data(),
            Layout::row_major(n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(Array::new([m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Block-wise `a_b · b_bᵀ` for `batch` stacked blocks:
    /// `a: [batch*m, d]`, `b: [batch*p, d]` gives `[batch*m, p]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (Some((am, d)), Some((bp, d2))) = (av.dims2(), bv.dims2()) else {
            return Err(DiffError::shape("bmm_nt", "operands must be 2-D"));
        };
        if d != d2 || batch == 0 || am % batch != 0 || bp % batch != 0 {
            return Err(DiffError::shape(
                "bmm_nt",
                format!("{} x {} in {batch} blocks", shape_str(av), shape_str(bv)),
            ));
        }
        let (m, p) = (am / batch, bp / batch);
        let mut out = vec![0.0; batch * m * p];
        for blk in 0..batch {
            gemm(
                m,
                d,
                p,
                &av.data()[blk * m * d..(blk + 1) * m * d],
                Layout::row_major(d),
                &bv.data()[blk * p * d..(blk + 1) * p * d],
                Layout::transposed(d),
                0.0,
                &mut out[blk * m * p..(blk + 1) * m * p],
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(Array::new([batch * m, p], out)?, Op::BmmNt { a, b, batch }, rg, "bmm_nt")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DiffError::shape(op, format!("{} vs {}", shape_str(av), shape_str(bv))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(Real, Real) -> Real) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds `bias: [n]` to every row of `x: [.., n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = *xv.shape().last().expect("arrays have rank >= 1");
        if bv.len() != n {
            return Err(DiffError::shape(
                "add_row_bias",
                format!("{} + {}", shape_str(xv), shape_str(bv)),
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Array::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRowBias(x, bias), rg, "add_row_bias")
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Result<Var> {
        let xv = self.value(x);
        let out = Array::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * s).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg, "scale")
    }

    /// Multiplies column `j` of `x: [.., n]` by `factors[j]`.
    pub fn scale_cols(&mut self, x: Var, factors: &[Real]) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("arrays have rank >= 1");
        if factors.len() != n {
            return Err(DiffError::shape("scale_cols", format!("{} by {}", shape_str(xv), factors.len())));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i % n])
            .collect();
        let out = Array::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::ScaleCols(x, factors.to_vec()), rg, "scale_cols")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Array::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.max(0.0)).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Array::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * v).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg, "square")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Array::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<Real>() / xv.len() as Real;
        let rg = self.rg(&[x]);
        self.push(Array::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(DiffError::shape("softmax", format!("axis {axis} of {}", shape_str(xv))));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let len = xv.shape()[axis];
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(Real::NEG_INFINITY, Real::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        if !src.iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite { op: "softmax" });
        }
        let out = Array::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, outer, len, inner }, rg, "softmax")
    }

    /// `[m, n1] ‖ [m, n2] -> [m, n1 + n2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (Some((m, n1)), Some((m2, n2))) = (av.dims2(), bv.dims2()) else {
            return Err(DiffError::shape("concat_cols", "operands must be 2-D"));
        };
        if m != m2 {
            return Err(DiffError::shape("concat_cols", format!("{m} vs {m2} rows")));
        }
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for r in 0..m {
            data.extend_from_slice(&av.data()[r * n1..(r + 1) * n1]);
            data.extend_from_slice(&bv.data()[r * n2..(r + 1) * n2]);
        }
        let out = Array::new([m, n1 + n2], data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), rg, "concat_cols")
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(DiffError::shape("gather", format!("index {bad} of {}", shape_str(xv))));
        }
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        let out = Array::new([indices.len()], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Gather(x, indices.to_vec()), rg, "gather")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// 2-D convolution (cross-correlation) of `input: [n, c_in, h, w]` (or
    /// `[c_in, h, w]`) with `kernel: [c_out, c_in, k, k]` and optional
    /// `bias: [c_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let iv = self.value(input);
        let kv = self.value(kernel);
        let (batch, c_in, h, w, unbatched) = match iv.shape()[..] {
            [c, h, w] => (1, c, h, w, true),
            [n, c, h, w] => (n, c, h, w, false),
            _ => return Err(DiffError::shape("conv2d", format!("input {}", shape_str(iv)))),
        };
        let [c_out, kc, k, k2] = kv.shape()[..] else {
            return Err(DiffError::shape("conv2d", format!("kernel {}", shape_str(kv))));
        };
        if kc != c_in || k != k2 || k % 2 == 0 || stride == 0 {
            return Err(DiffError::shape(
                "conv2d",
                format!("input {} kernel {} stride {stride}", shape_str(iv), shape_str(kv)),
            ));
        }
        if k > h || k > w {
            return Err(DiffError::shape("conv2d", format!("kernel {k} larger than input {h}x{w}")));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(DiffError::shape("conv2d", "bias length differs from output channels"));
            }
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => k / 2,
        };
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let mut cols = vec![0.0; patch * pos];
        let mut out = vec![0.0; batch * c_out * pos];
        for b in 0..batch {
            geom.im2col(&iv.data()[b * c_in * h * w..(b + 1) * c_in * h * w], &mut cols);
            gemm(
                c_out,
                patch,
                pos,
                kv.data(),
                Layout::row_major(patch),
                &cols,
                Layout::row_major(pos),
                0.0,
                &mut out[b * c_out * pos..(b + 1) * c_out * pos],
            );
        }
        if let Some(bv) = bias {
            let bias_vals = self.value(bv).data();
            for (i, chunk) in out.chunks_mut(pos).enumerate() {
                let bias_val = bias_vals[i % c_out];
                chunk.iter_mut().for_each(|o| *o += bias_val);
            }
        }
        let shape = if unbatched {
            vec![c_out, ho, wo]
        } else {
            vec![batch, c_out, ho, wo]
        };
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let info = ConvInfo {
            input,
            kernel,
            bias,
            geom,
        };
        self.push(Array::new(shape, out)?, Op::Conv2d(Box::new(info)), rg, "conv2d")
    }

    /// Softmax attention where query row `p` attends over key rows `ranges[p]`:
    /// `out_p = Σ_{j ∈ ranges[p]} softmax_j(q_p · k_j) v_j`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, ranges: Vec<Range<usize>>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (Some((nq, d)), Some((nk, d2)), Some((nv, dv))) = (qv.dims2(), kv.dims2(), vv.dims2()) else {
            return Err(DiffError::shape("attention", "operands must be 2-D"));
        };
        if d != d2 || nk != nv || ranges.len() != nq {
            return Err(DiffError::shape(
                "attention",
                format!(
                    "q {} k {} v {} with {} ranges",
                    shape_str(qv),
                    shape_str(kv),
                    shape_str(vv),
                    ranges.len()
                ),
            ));
        }
        if ranges.iter().any(|r| r.is_empty() || r.end > nk) {
            return Err(DiffError::shape("attention", "empty or out-of-range neighbor set"));
        }
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut weights = Vec::with_capacity(ranges.iter().map(|r| r.len()).sum());
        let mut out = vec![0.0; nq * dv];
        let mut scores = Vec::new();
        for (p, r) in ranges.iter().enumerate() {
            let qp = &qd[p * d..(p + 1) * d];
            scores.clear();
            scores.extend(r.clone().map(|j| dot(qp, &kd[j * d..(j + 1) * d])));
            let max = scores.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let row = &mut out[p * dv..(p + 1) * dv];
            for (s, j) in scores.iter().zip(r.clone()) {
                let a = s / total;
                weights.push(a);
                for (o, x) in row.iter_mut().zip(&vd[j * dv..(j + 1) * dv]) {
                    *o += a * x;
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let info = AttentionInfo {
            q,
            k,
            v,
            ranges,
            weights,
        };
        self.push(Array::new([nq, dv], out)?, Op::Attention(Box::new(info)), rg, "attention")
    }

    /// Attention weights of an [`attention`](Self::attention) node, one vector per query row.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Vec<Real>>> {
        let Op::Attention(info) = &self.nodes[v.0].op else {
            return None;
        };
        let mut offset = 0;
        Some(
            info.ranges
                .iter()
                .map(|r| {
                    let w = info.weights[offset..offset + r.len()].to_vec();
                    offset += r.len();
                    w
                })
                .collect(),
        )
    }

    /// Sums consecutive groups of `group` rows: `[m*group, d] -> [m, d]`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let Some((rows, d)) = xv.dims2() else {
            return Err(DiffError::shape("sum_row_groups", "operand must be 2-D"));
        };
        if group == 0 || rows % group != 0 {
            return Err(DiffError::shape("sum_row_groups", format!("{rows} rows in groups of {group}")));
        }
        let m = rows / group;
        let mut out = vec![0.0; m * d];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let dst = &mut out[(r / group) * d..(r / group + 1) * d];
            for (o, v) in dst.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Array::new([m, d], out)?, Op::SumRowGroups { x, group }, rg, "sum_row_groups")
    }

    /// Renders one isotropic Gaussian per row of `coords: [m, 2]` over an
    /// `h x w` lattice whose cell `(r, c)` sits at coordinate `(r, c)`:
    /// `out[i, r*w + c] = exp(-((r - x_i)² + (c - y_i)²) / (2σ²))`.
    pub fn gaussian_maps(&mut self, coords: Var, h: usize, w: usize, sigma: Real) -> Result<Var> {
        let cv = self.value(coords);
        let Some((m, 2)) = cv.dims2() else {
            return Err(DiffError::shape("gaussian_maps", format!("coords {}", shape_str(cv))));
        };
        if !(sigma > 0.0) {
            return Err(DiffError::shape("gaussian_maps", format!("sigma {sigma} must be positive")));
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut out = vec![0.0; m * h * w];
        for i in 0..m {
            let (x, y) = (cv.data()[2 * i], cv.data()[2 * i + 1]);
            let gy: Vec<Real> = (0..w).map(|c| (-(c as Real - y).powi(2) * inv).exp()).collect();
            for r in 0..h {
                let gx = (-(r as Real - x).powi(2) * inv).exp();
                let row = &mut out[(i * h + r) * w..(i * h + r + 1) * w];
                for (o, g) in row.iter_mut().zip(&gy) {
                    *o = gx * g;
                }
            }
        }
        let rg = self.rg(&[coords]);
        self.push(
            Array::new([m, h * w], out)?,
            Op::Gaussian { coords, h, w, sigma },
            rg,
            "gaussian_maps",
        )
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// whatever `params` already holds, so repeated calls accumulate until
    /// [`ParamStore::zero_grads`] or an optimizer step clears them.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<BackwardStats> {
        self.backward_with(loss, params, |_, _| {})
    }

    /// Like [`backward`](Self::backward) and also reports the gradient of
    /// every non-parameter leaf created with [`variable`](Self::variable).
    pub fn backward_with(
        &self,
        loss: Var,
        params: &mut ParamStore,
        mut on_leaf: impl FnMut(Var, &Array),
    ) -> Result<BackwardStats> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut stats = BackwardStats::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(stats);
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::filled(lv.shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            stats.visited += 1;
            self.propagate(Var(idx), g, &mut grads, params, &mut on_leaf);
        }
        Ok(stats)
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Array>], v: Var, f: impl FnOnce(&mut [Real])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn propagate(
        &self,
        node: Var,
        g: Array,
        grads: &mut [Option<Array>],
        params: &mut ParamStore,
        on_leaf: &mut impl FnMut(Var, &Array),
    ) {
        let value = &self.nodes[node.0].value;
        let like = |v: Var, data: Vec<Real>| {
            Array::new(self.nodes[v.0].value.shape().to_vec(), data).expect("gradient shape")
        };
        match &self.nodes[node.0].op {
            Op::Leaf => on_leaf(node, &g),
            Op::Param(id) => params.accumulate_grad(*id, &g),
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("2-D");
                let n = self.value(b).shape()[1];
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::row_major(n), self.value(b).data(), Layout::transposed(n), 0.0, &mut da);
                    self.accumulate(grads, a, like(a, da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), Layout::transposed(k), g.data(), Layout::row_major(n), 0.0, &mut db);
                    self.accumulate(grads, b, like(b, db));
                }
            }
            &Op::BmmNt { a, b, batch } => {
                let (am, d) = self.value(a).dims2().expect("2-D");
                let bp = self.value(b).shape()[0];
                let (m, p) = (am / batch, bp / batch);
                let (ad, bd, gd) = (self.value(a).data(), self.value(b).data(), g.data());
                if self.requires_grad(a) {
                    let mut da = vec![0.0; am * d];
                    for blk in 0..batch {
                        gemm(
                            m, p, d,
                            &gd[blk * m * p..(blk + 1) * m * p], Layout::row_major(p),
                            &bd[blk * p * d..(blk + 1) * p * d], Layout::row_major(d),
                            0.0, &mut da[blk * m * d..(blk + 1) * m * d],
                        );
                    }
                    self.accumulate(grads, a, like(a, da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; bp * d];
                    for blk in 0..batch {
                        gemm(
                            p, m, d,
                            &gd[blk * m * p..(blk + 1) * m * p], Layout::transposed(p),
                            &ad[blk * m * d..(blk + 1) * m * d], Layout::row_major(d),
                            0.0, &mut db[blk * p * d..(blk + 1) * p * d],
                        );
                    }
                    self.accumulate(grads, b, like(b, db));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g);
            }
            &Op::Sub(a, b) => {
                let neg = like(b, g.data().iter().map(|v| -v).collect());
                self.accumulate(grads, a, g);
                self.accumulate(grads, b, neg);
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let da = g.data().iter().zip(bd).map(|(g, y)| g * y).collect();
                let db = g.data().iter().zip(ad).map(|(g, x)| g * x).collect();
                self.accumulate(grads, a, like(a, da));
                self.accumulate(grads, b, like(b, db));
            }
            &Op::AddRowBias(x, bias) => {
                if self.requires_grad(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, bias, like(bias, db));
                }
                self.accumulate(grads, x, g);
            }
            &Op::Scale(x, s) => {
                self.accumulate(grads, x, like(x, g.data().iter().map(|v| v * s).collect()));
            }
            Op::ScaleCols(x, f) => {
                let n = f.len();
                let dx = g.data().iter().enumerate().map(|(i, v)| v * f[i % n]).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            &Op::Relu(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, like(x, dx));
            }
            &Op::Square(x) => {
                let dx = g.data().iter().zip(self.value(x).data()).map(|(g, x)| 2.0 * x * g).collect();
                self.accumulate(grads, x, like(x, dx));
            }
            &Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate_with(grads, x, |d| d.iter_mut().for_each(|o| *o += gv));
            }
            &Op::Mean(x) => {
                let gv = g.data()[0] / self.value(x).len() as Real;
                self.accumulate_with(grads, x, |d| d.iter_mut().for_each(|o| *o += gv));
            }
            &Op::Softmax { x, outer, len, inner } => {
                let (y, gd) = (value.data(), g.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dotp: Real = (0..len).map(|a| y[at(a)] * gd[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (gd[at(a)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, x, like(x, dx));
            }
            &Op::ConcatCols(a, b) => {
                let (m, n1) = self.value(a).dims2().expect("2-D");
                let n2 = self.value(b).shape()[1];
                let n = n1 + n2;
                let gd = g.data();
                self.accumulate_with(grads, a, |d| {
                    for r in 0..m {
                        for c in 0..n1 {
                            d[r * n1 + c] += gd[r * n + c];
                        }
                    }
                });
                self.accumulate_with(grads, b, |d| {
                    for r in 0..m {
                        for c in 0..n2 {
                            d[r * n2 + c] += gd[r * n + n1 + c];
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                self.accumulate_with(grads, *x, |d| {
                    for (&i, gv) in idx.iter().zip(g.data()) {
                        d[i] += gv;
                    }
                });
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.reshaped(shape).expect("same length"));
            }
            Op::Conv2d(info) => self.conv_backward(info, &g, grads),
            Op::Attention(info) => self.attention_backward(info, &g, grads),
            &Op::SumRowGroups { x, group } => {
                let d = g.shape()[1];
                let gd = g.data();
                self.accumulate_with(grads, x, |dx| {
                    for (r, row) in dx.chunks_mut(d).enumerate() {
                        row.iter_mut()
                            .zip(&gd[(r / group) * d..(r / group + 1) * d])
                            .for_each(|(o, v)| *o += v);
                    }
                });
            }
            &Op::Gaussian { coords, h, w, sigma } => {
                let cv = self.value(coords).data();
                let inv_var = 1.0 / (sigma * sigma);
                let mut dc = vec![0.0; cv.len()];
                for i in 0..cv.len() / 2 {
                    let (x, y) = (cv[2 * i], cv[2 * i + 1]);
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for r in 0..h {
                        let base = (i * h + r) * w;
                        for c in 0..w {
                            let t = g.data()[base + c] * value.data()[base + c];
                            sx += t * (r as Real - x);
                            sy += t * (c as Real - y);
                        }
                    }
                    dc[2 * i] = sx * inv_var;
                    dc[2 * i + 1] = sy * inv_var;
                }
                self.accumulate(grads, coords, like(coords, dc));
            }
        }
    }

    fn conv_backward(&self, info: &ConvInfo, g: &Array, grads: &mut [Option<Array>]) {
        let geom = info.geom;
        let (patch, pos) = (geom.patch(), geom.positions());
        let img_len = geom.c_in * geom.h * geom.w;
        let out_len = geom.c_out * pos;
        let iv = self.value(info.input).data();
        let kv = self.value(info.kernel).data();
        let need_k = self.requires_grad(info.kernel);
        let need_i = self.requires_grad(info.input);
        let mut dk = vec![0.0; kv.len()];
        let mut di = vec![0.0; if need_i { iv.len() } else { 0 }];
        let mut cols = vec![0.0; patch * pos];
        let mut dcols = vec![0.0; patch * pos];
        for b in 0..geom.batch {
            let gb = &g.data()[b * out_len..(b + 1) * out_len];
            if need_k {
                geom.im2col(&iv[b * img_len..(b + 1) * img_len], &mut cols);
                gemm(geom.c_out, pos, patch, gb, Layout::row_major(pos), &cols, Layout::transposed(pos), 1.0, &mut dk);
            }
            if need_i {
                gemm(patch, geom.c_out, pos, kv, Layout::transposed(patch), gb, Layout::row_major(pos), 0.0, &mut dcols);
                geom.col2im_add(&dcols, &mut di[b * img_len..(b + 1) * img_len]);
            }
        }
        if need_k {
            let shape = self.value(info.kernel).shape().to_vec();
            self.accumulate(grads, info.kernel, Array::new(shape, dk).expect("kernel shape"));
        }
        if need_i {
            let shape = self.value(info.input).shape().to_vec();
            self.accumulate(grads, info.input, Array::new(shape, di).expect("input shape"));
        }
        if let Some(bias) = info.bias {
            self.accumulate_with(grads, bias, |db| {
                for (i, chunk) in g.data().chunks(pos).enumerate() {
                    db[i % geom.c_out] += chunk.iter().sum::<Real>();
                }
            });
        }
    }

    fn attention_backward(&self, info: &AttentionInfo, g: &Array, grads: &mut [Option<Array>]) {
        let (qd, kd, vd) = (self.value(info.q).data(), self.value(info.k).data(), self.value(info.v).data());
        let d = self.value(info.q).shape()[1];
        let dv = self.value(info.v).shape()[1];
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dvv = vec![0.0; vd.len()];
        let mut offset = 0;
        let mut ds = Vec::new();
        for (p, r) in info.ranges.iter().enumerate() {
            let w = &info.weights[offset..offset + r.len()];
            offset += r.len();
            let gp = &g.data()[p * dv..(p + 1) * dv];
            ds.clear();
            let mut weighted = 0.0;
            for (a, j) in w.iter().zip(r.clone()) {
                let da = dot(gp, &vd[j * dv..(j + 1) * dv]);
                ds.push(da);
                weighted += a * da;
                for (o, gv) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(gp) {
                    *o += a * gv;
                }
            }
            let qp = &qd[p * d..(p + 1) * d];
            for ((a, s), j) in w.iter().zip(ds.iter()).zip(r.clone()) {
                let coeff = a * (s - weighted);
                if coeff == 0.0 {
                    continue;
                }
                let kj = &kd[j * d..(j + 1) * d];
                for (o, kv) in dq[p * d..(p + 1) * d].iter_mut().zip(kj) {
                    *o += coeff * kv;
                }
                for (o, qv) in dk[j * d..(j + 1) * d].iter_mut().zip(qp) {
                    *o += coeff * qv;
                }
            }
        }
        let mk = |v: Var, data: Vec<Real>| Array::new(self.value(v).shape().to_vec(), data).expect("shape");
        self.accumulate(grads, info.q, mk(info.q, dq));
        self.accumulate(grads, info.k, mk(info.k, dk));
        self.accumulate(grads, info.v, mk(info.v, dvv));
    }
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[Real]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut t = Tape::new();
        let m = arr(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let i3 = t.constant(Array::identity(3)).unwrap();
        let mv = t.constant(m.clone()).unwrap();
        let out = t.matmul(i3, mv).unwrap();
        assert_eq!(t.value(out), &m);

        let a = t.constant(arr(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = t.constant(arr(&[2, 1], &[1., 1.])).unwrap();
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros([2, 3])).unwrap();
        let b = t.constant(Array::zeros([2, 3])).unwrap();
        assert!(matches!(t.matmul(a, b), Err(DiffError::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut t = Tape::new();
        let x = t.constant(Array::filled([4], 0.3)).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let x = t.constant(Array::vector(vec![1000.0, 0.0])).unwrap();
        let y = t.softmax(x, 0).unwrap();
        let d = t.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2, 3], &[0., 1., 2., 0., 1., 2.])).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Array::scalar(1e200)).unwrap();
        assert!(matches!(t.square(x), Err(DiffError::NonFinite { op: "square" })));
        let nan = t.constant(Array::vector(vec![Real::NAN, 0.0]));
        assert!(nan.is_err());
    }

    #[test]
    fn square_gradient() {
        let mut ps = ParamStore::new();
        let x = ps.insert("x", Array::scalar(3.0)).unwrap();
        let mut t = Tape::new();
        let xv = t.param(&ps, x);
        let l = t.square(xv).unwrap();
        t.backward(l, &mut ps).unwrap();
        assert_eq!(ps.grad(x).unwrap().data(), &[6.0]);
        // A second sweep accumulates.
        t.backward(l, &mut ps).unwrap();
        assert_eq!(ps.grad(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut ps = ParamStore::new();
        let x = ps.insert("x", Array::vector(vec![0.3, -1.2, 2.0, 0.7])).unwrap();
        let mut t = Tape::new();
        let xv = t.param(&ps, x);
        let s = t.softmax(xv, 0).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l, &mut ps).unwrap();
        assert!(ps.grad(x).unwrap().data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut ps = ParamStore::new();
        let mut t = Tape::new();
        let x = t.variable(Array::zeros([2])).unwrap();
        assert!(matches!(t.backward(x, &mut ps), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        // Diamond: x feeds two branches that rejoin.
        let mut ps = ParamStore::new();
        let x = ps.insert("x", Array::vector(vec![0.5, -0.25])).unwrap();
        let mut t = Tape::new();
        let xv = t.param(&ps, x);
        let a = t.square(xv).unwrap();
        let b = t.scale(xv, 3.0).unwrap();
        let c = t.mul(a, b).unwrap();
        let d = t.add(c, a).unwrap();
        let l = t.sum(d).unwrap();
        let stats = t.backward(l, &mut ps).unwrap();
        assert_eq!(stats.visited, t.len());
        // d/dx of sum(3x^3 + x^2) = 9x^2 + 2x
        let g = ps.grad(x).unwrap().data();
        assert!((g[0] - (9.0 * 0.25 + 1.0)).abs() < 1e-12);
        assert!((g[1] - (9.0 * 0.0625 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_and_averaging() {
        let mut t = Tape::new();
        let img = arr(&[1, 5, 5], &(0..25).map(|v| v as Real).collect::<Vec<_>>());
        let iv = t.constant(img.clone()).unwrap();
        let one = t.constant(Array::filled([1, 1, 1, 1], 1.0)).unwrap();
        let out = t.conv2d(iv, one, None, 1, Padding::Valid).unwrap();
        assert_eq!(t.value(out), &img);

        let flat = t.constant(Array::filled([1, 6, 6], 0.7)).unwrap();
        let avg = t.constant(Array::filled([1, 1, 3, 3], 1.0 / 9.0)).unwrap();
        let out = t.conv2d(flat, avg, None, 1, Padding::Same).unwrap();
        let o = t.value(out);
        assert_eq!(o.shape(), &[1, 6, 6]);
        for r in 1..5 {
            for c in 1..5 {
                assert!((o.data()[r * 6 + c] - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_output_extents() {
        let mut t = Tape::new();
        let img = t.constant(Array::zeros([2, 1, 64, 64])).unwrap();
        let k = t.constant(Array::zeros([16, 1, 3, 3])).unwrap();
        let out = t.conv2d(img, k, None, 2, Padding::Same).unwrap();
        assert_eq!(t.value(out).shape(), &[2, 16, 32, 32]);
        let out = t.conv2d(img, k, None, 1, Padding::Valid).unwrap();
        assert_eq!(t.value(out).shape(), &[2, 16, 62, 62]);
    }

    #[test]
    fn conv_rejects_large_kernel() {
        let mut t = Tape::new();
        let img = t.constant(Array::zeros([1, 3, 3])).unwrap();
        let k = t.constant(Array::zeros([1, 1, 5, 5])).unwrap();
        assert!(t.conv2d(img, k, None, 1, Padding::Same).is_err());
    }

    #[test]
    fn attention_singleton_and_uniform() {
        let mut t = Tape::new();
        let q = t.constant(arr(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let k = t.constant(arr(&[3, 2], &[1., 1., 1., 1., 1., 1.])).unwrap();
        let v = t.constant(arr(&[3, 2], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let m = t.attention(q, k, v, vec![2..3, 0..3]).unwrap();
        assert_eq!(&t.value(m).data()[..2], &[5., 6.]);
        assert!((t.value(m).data()[2] - 3.0).abs() < 1e-12);
        assert!((t.value(m).data()[3] - 4.0).abs() < 1e-12);
        let w = t.attention_weights(m).unwrap();
        assert_eq!(w[0], vec![1.0]);
        assert!((w[1].iter().sum::<Real>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_peak_and_sigma_value() {
        let mut t = Tape::new();
        let c = t.constant(arr(&[1, 2], &[3.0, 4.0])).unwrap();
        let g = t.gaussian_maps(c, 8, 8, 2.0).unwrap();
        let d = t.value(g).data();
        assert_eq!(d[3 * 8 + 4], 1.0);
        assert!((d[5 * 8 + 4] - (-0.5 as Real).exp()).abs() < 1e-12);
        assert!(t.gaussian_maps(c, 8, 8, 0.0).is_err());
    }
}

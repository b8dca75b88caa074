//! Reverse-mode tape.
//!
//! Every differentiable operation appends one node holding the forward
//! value and a backward rule. Nodes only ever reference earlier nodes, so
//! the tape is topologically ordered by construction and `backward` is a
//! single reverse sweep. Tapes are per-forward-pass: build, run backward,
//! read gradients, drop.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Counters accumulated during forward execution.
#[derive(Debug, Default, Clone)]
pub struct Diagnostics {
    /// Softmax slices where every key was masked (result forced to zero).
    pub all_masked_softmax: u64,
    /// Multiply-accumulate count of every matmul recorded, times two.
    pub matmul_flops: u128,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    rule: Rule,
}

enum Rule {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: MmDims,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddConst {
        x: Var,
    },
    Neg {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Ln {
        x: Var,
    },
    Abs {
        x: Var,
    },
    PowConst {
        x: Var,
        e: f64,
    },
    WrapAngle {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inner: usize,
        // per-row (mean, 1/std)
        stats: Vec<(f64, f64)>,
    },
    MaskedSoftmax {
        logits: Var,
        axis: usize,
    },
    MaskedMax {
        x: Var,
        axis: usize,
        // flat index into x for each output element
        arg_flat: Vec<usize>,
    },
    MaskedMean {
        x: Var,
        axis: usize,
        mask: Arc<Vec<f64>>,
        counts: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    GatherRows {
        x: Var,
        row_len: usize,
        idx: Arc<Vec<i64>>,
    },
    ConcatLast {
        a: Var,
        b: Var,
        a_last: usize,
        b_last: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct MmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    diag: Diagnostics,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diag
    }

    /// Total matmul FLOPs recorded so far (2·m·k·n per product).
    pub fn flops(&self) -> u128 {
        self.diag.matmul_flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.nodes[v.0].grad.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    /// Accumulate this var's gradient into `t.grad` (allocating on first
    /// use), implementing the leaf write-back contract.
    pub fn accumulate_grad_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            assert_eq!(t.numel(), g.len(), "grad write-back numel mismatch");
            match &mut t.grad {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, rule: Rule) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. Gradient tracking follows `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, needs, Rule::Leaf)
    }

    /// Record a copy of a parameter tensor as a gradient-tracked leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = true;
        self.push(c, true, Rule::Leaf)
    }

    /// Record a copy of a tensor as a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = false;
        self.push(c, false, Rule::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    // ---- linear algebra ----

    /// Standard batched matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_flags(a, b, false, false)
    }

    /// `a · bᵀ` (attention logits).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_flags(a, b, false, true)
    }

    /// Matrix product with optional transposes on the stored operands.
    /// Leading dims are a shared batch: both sides batched identically, or
    /// one side a plain matrix applied across the other's batch.
    pub fn matmul_flags(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let dims = parse_mm_dims(self.shape(a), self.shape(b), ta, tb)?;
        let out_lead: Vec<usize> = if dims.a_batched {
            self.shape(a)[..self.shape(a).len() - 2].to_vec()
        } else if dims.b_batched {
            self.shape(b)[..self.shape(b).len() - 2].to_vec()
        } else {
            vec![]
        };
        let mut out_shape = out_lead;
        out_shape.push(dims.m);
        out_shape.push(dims.n);

        let out = {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            raw_mm(av, bv, ta, tb, dims)
        };
        self.diag.matmul_flops +=
            2u128 * dims.batch as u128 * dims.m as u128 * dims.k as u128 * dims.n as u128;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("matmul output shape"),
            needs,
            Rule::Matmul { a, b, ta, tb, dims },
        ))
    }

    /// `x · w + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let x2 = if xs.len() == 1 {
            self.reshape(x, &[1, xs[0]])?
        } else {
            x
        };
        let y = self.matmul(x2, w)?;
        let y = self.add(y, bias)?;
        if xs.len() == 1 {
            let n = *self.shape(y).last().unwrap();
            self.reshape(y, &[n])
        } else {
            Ok(y)
        }
    }

    // ---- elementwise / broadcast ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let ta = self.value(a);
            let tb = self.value(b);
            binary_broadcast(ta.shape(), ta.data(), tb.shape(), tb.data(), |x, y| x + y)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            needs,
            Rule::Add { a, b },
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let ta = self.value(a);
            let tb = self.value(b);
            binary_broadcast(ta.shape(), ta.data(), tb.shape(), tb.data(), |x, y| x - y)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            needs,
            Rule::Sub { a, b },
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let ta = self.value(a);
            let tb = self.value(b);
            binary_broadcast(ta.shape(), ta.data(), tb.shape(), tb.data(), |x, y| x * y)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            needs,
            Rule::Mul { a, b },
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.unary_map(x, |t| t * c);
        self.push(v, self.needs(x), Rule::Scale { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.unary_map(x, |t| t + c);
        self.push(v, self.needs(x), Rule::AddConst { x })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, |t| -t);
        self.push(v, self.needs(x), Rule::Neg { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, |t| t.max(0.0));
        self.push(v, self.needs(x), Rule::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, gelu_fwd);
        self.push(v, self.needs(x), Rule::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, sigmoid_f);
        self.push(v, self.needs(x), Rule::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, softplus_f);
        self.push(v, self.needs(x), Rule::Softplus { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, f64::exp);
        self.push(v, self.needs(x), Rule::Exp { x })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, f64::ln);
        self.push(v, self.needs(x), Rule::Ln { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, f64::abs);
        self.push(v, self.needs(x), Rule::Abs { x })
    }

    /// Elementwise `x^e`; caller guarantees non-negative base when `e` is
    /// fractional.
    pub fn pow_const(&mut self, x: Var, e: f64) -> Var {
        let v = self.unary_map(x, |t| t.powf(e));
        self.push(v, self.needs(x), Rule::PowConst { x, e })
    }

    /// Wrap angles into [-π, π); derivative 1 almost everywhere.
    pub fn wrap_angle(&mut self, x: Var) -> Var {
        let v = self.unary_map(x, wrap_angle_f);
        self.push(v, self.needs(x), Rule::WrapAngle { x })
    }

    fn unary_map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    // ---- normalization / masked reductions ----

    /// Layer normalization over the last axis, then affine. `eps` guards
    /// the zero-variance case (and must be positive).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let inner = *xs
            .last()
            .ok_or_else(|| Error::Shape("layer_norm needs at least 1 axis".into()))?;
        if self.shape(gamma) != [inner] || self.shape(beta) != [inner] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} must be [{inner}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).numel() / inner;
        let mut out = vec![0.0; rows * inner];
        let mut stats = Vec::with_capacity(rows);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data().to_vec();
            let bd = self.value(beta).data().to_vec();
            for r in 0..rows {
                let row = &xd[r * inner..(r + 1) * inner];
                let mean = row.iter().sum::<f64>() / inner as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / inner as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                stats.push((mean, rstd));
                for i in 0..inner {
                    out[r * inner + i] = (row[i] - mean) * rstd * gd[i] + bd[i];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(xs, out).unwrap(),
            needs,
            Rule::LayerNorm {
                x,
                gamma,
                beta,
                inner,
                stats,
            },
        ))
    }

    /// Softmax along `axis` restricted to entries where `mask == 1`.
    /// Masked entries get exactly zero weight. Slices with no valid entry
    /// produce all zeros and bump the diagnostics counter instead of NaN.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor, axis: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        check_mask(&shape, mask)?;
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; self.value(logits).numel()];
        let mut dead_slices = 0u64;
        {
            let xd = self.value(logits).data();
            let md = mask.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        if md[at(j)] == 1.0 {
                            mx = mx.max(xd[at(j)]);
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        dead_slices += 1;
                        continue; // leave zeros
                    }
                    let mut denom = 0.0;
                    for j in 0..len {
                        if md[at(j)] == 1.0 {
                            let e = (xd[at(j)] - mx).exp();
                            out[at(j)] = e;
                            denom += e;
                        }
                    }
                    for j in 0..len {
                        out[at(j)] /= denom;
                    }
                }
            }
        }
        self.diag.all_masked_softmax += dead_slices;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(shape, out).unwrap(),
            needs,
            Rule::MaskedSoftmax { logits, axis },
        ))
    }

    /// Per-slice maximum over valid entries along `axis`. Returns the
    /// values and the within-axis argmax (ties to the lowest index, which
    /// is also where the whole gradient goes). Errors if any slice is
    /// fully masked.
    pub fn masked_max(&mut self, x: Var, mask: &Tensor, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        check_mask(&shape, mask)?;
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        let mut arg_axis = vec![0usize; outer * inner];
        let mut arg_flat = vec![0usize; outer * inner];
        {
            let xd = self.value(x).data();
            let md = mask.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_j = usize::MAX;
                    for j in 0..len {
                        let f = (o * len + j) * inner + i;
                        if md[f] == 1.0 && xd[f] > best {
                            best = xd[f];
                            best_j = j;
                        }
                    }
                    if best_j == usize::MAX {
                        return Err(Error::Shape(format!(
                            "masked_max: fully masked slice (outer {o}, inner {i})"
                        )));
                    }
                    let oi = o * inner + i;
                    out[oi] = best;
                    arg_axis[oi] = best_j;
                    arg_flat[oi] = (o * len + best_j) * inner + i;
                }
            }
        }
        let out_shape = drop_axis(&shape, axis);
        let needs = self.needs(x);
        let v = self.push(
            Tensor::new(out_shape, out).unwrap(),
            needs,
            Rule::MaskedMax { x, axis, arg_flat },
        );
        Ok((v, arg_axis))
    }

    /// Mean over valid entries along `axis`. Errors on fully masked
    /// slices.
    pub fn masked_mean(&mut self, x: Var, mask: &Tensor, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_mask(&shape, mask)?;
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        let mut counts = vec![0.0; outer * inner];
        {
            let xd = self.value(x).data();
            let md = mask.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for j in 0..len {
                        let f = (o * len + j) * inner + i;
                        if md[f] == 1.0 {
                            acc += xd[f];
                            cnt += 1.0;
                        }
                    }
                    if cnt == 0.0 {
                        return Err(Error::Shape(format!(
                            "masked_mean: fully masked slice (outer {o}, inner {i})"
                        )));
                    }
                    out[o * inner + i] = acc / cnt;
                    counts[o * inner + i] = cnt;
                }
            }
        }
        let out_shape = drop_axis(&shape, axis);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out).unwrap(),
            needs,
            Rule::MaskedMean {
                x,
                axis,
                mask: Arc::new(mask.data().to_vec()),
                counts,
            },
        ))
    }

    // ---- reductions / reshaping ----

    /// Sum of all elements (scalar of shape `[1]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), self.needs(x), Rule::Sum { x })
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, self.needs(x), Rule::Reshape { x }))
    }

    /// Treat `x` as rows of `row_len` and emit `idx.len()` rows in the
    /// given order, reshaped to `out_shape`. A negative index yields a
    /// zero row. Duplicate indices are allowed (backward accumulates), so
    /// this one primitive covers window partition/merge, nearest-neighbor
    /// upsampling and sparse scatter onto dense grids.
    pub fn gather_rows(
        &mut self,
        x: Var,
        row_len: usize,
        idx: &[i64],
        out_shape: &[usize],
    ) -> Result<Var> {
        let xn = self.value(x).numel();
        if row_len == 0 || xn % row_len != 0 {
            return Err(Error::Shape(format!(
                "gather_rows: {xn} elements not divisible into rows of {row_len}"
            )));
        }
        let n_rows = (xn / row_len) as i64;
        let out_n: usize = out_shape.iter().product();
        if out_n != idx.len() * row_len {
            return Err(Error::Shape(format!(
                "gather_rows: out shape {:?} != {} rows of {row_len}",
                out_shape,
                idx.len()
            )));
        }
        let mut out = vec![0.0; out_n];
        {
            let xd = self.value(x).data();
            for (r, &s) in idx.iter().enumerate() {
                if s >= 0 {
                    if s >= n_rows {
                        return Err(Error::Shape(format!(
                            "gather_rows: index {s} out of {n_rows} rows"
                        )));
                    }
                    let s = s as usize;
                    out[r * row_len..(r + 1) * row_len]
                        .copy_from_slice(&xd[s * row_len..(s + 1) * row_len]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape.to_vec(), out).unwrap(),
            needs,
            Rule::GatherRows {
                x,
                row_len,
                idx: Arc::new(idx.to_vec()),
            },
        ))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!(
                "concat_last: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let a_last = *sa.last().unwrap();
        let b_last = *sb.last().unwrap();
        let rows = self.value(a).numel() / a_last;
        let mut out = vec![0.0; rows * (a_last + b_last)];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * (a_last + b_last)..r * (a_last + b_last) + a_last]
                    .copy_from_slice(&ad[r * a_last..(r + 1) * a_last]);
                out[r * (a_last + b_last) + a_last..(r + 1) * (a_last + b_last)]
                    .copy_from_slice(&bd[r * b_last..(r + 1) * b_last]);
            }
        }
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = a_last + b_last;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(out_shape, out).unwrap(),
            needs,
            Rule::ConcatLast {
                a,
                b,
                a_last,
                b_last,
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Visits each node once in reverse
    /// append order. Each call computes a fresh d(loss)/d(node) and adds
    /// it to the node's stored gradient, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                scratch[i] = None;
                continue;
            }
            let Some(g) = scratch[i].take() else { continue };
            self.propagate(i, &g, &mut scratch);
            match &mut self.nodes[i].grad {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let before = &self.nodes[..i];
        let node = &self.nodes[i];
        match &node.rule {
            Rule::Leaf => {}
            Rule::Matmul { a, b, ta, tb, dims } => {
                backward_matmul(before, scratch, *a, *b, *ta, *tb, *dims, g);
            }
            Rule::Add { a, b } => {
                let out_shape = node.value.shape();
                bcast_accumulate(before, scratch, *a, out_shape, g, 1.0);
                bcast_accumulate(before, scratch, *b, out_shape, g, 1.0);
            }
            Rule::Sub { a, b } => {
                let out_shape = node.value.shape();
                bcast_accumulate(before, scratch, *a, out_shape, g, 1.0);
                bcast_accumulate(before, scratch, *b, out_shape, g, -1.0);
            }
            Rule::Mul { a, b } => {
                let out_shape = node.value.shape().to_vec();
                // d a = g ⊙ b, d b = g ⊙ a (each expanded then reduced)
                let bv = expand_to(&before[b.0].value, &out_shape);
                let ga: Vec<f64> = g.iter().zip(&bv).map(|(x, y)| x * y).collect();
                bcast_accumulate(before, scratch, *a, &out_shape, &ga, 1.0);
                let av = expand_to(&before[a.0].value, &out_shape);
                let gb: Vec<f64> = g.iter().zip(&av).map(|(x, y)| x * y).collect();
                bcast_accumulate(before, scratch, *b, &out_shape, &gb, 1.0);
            }
            Rule::Scale { x, c } => unary_accumulate(before, scratch, *x, g, |_, gi| gi * c),
            Rule::AddConst { x } => unary_accumulate(before, scratch, *x, g, |_, gi| gi),
            Rule::Neg { x } => unary_accumulate(before, scratch, *x, g, |_, gi| -gi),
            Rule::Relu { x } => {
                unary_accumulate(before, scratch, *x, g, |xv, gi| if xv > 0.0 { gi } else { 0.0 })
            }
            Rule::Gelu { x } => {
                unary_accumulate(before, scratch, *x, g, |xv, gi| gi * gelu_grad(xv))
            }
            Rule::Sigmoid { x } => {
                // reuse the forward output: s(1-s)
                let s = node.value.data();
                accumulate_with_output(before, scratch, *x, g, s, |sv, gi| gi * sv * (1.0 - sv));
            }
            Rule::Softplus { x } => {
                unary_accumulate(before, scratch, *x, g, |xv, gi| gi * sigmoid_f(xv))
            }
            Rule::Exp { x } => {
                let e = node.value.data();
                accumulate_with_output(before, scratch, *x, g, e, |ev, gi| gi * ev);
            }
            Rule::Ln { x } => unary_accumulate(before, scratch, *x, g, |xv, gi| gi / xv),
            Rule::Abs { x } => {
                unary_accumulate(before, scratch, *x, g, |xv, gi| gi * xv.signum())
            }
            Rule::PowConst { x, e } => {
                let e = *e;
                unary_accumulate(before, scratch, *x, g, move |xv, gi| {
                    gi * e * xv.powf(e - 1.0)
                })
            }
            Rule::WrapAngle { x } => unary_accumulate(before, scratch, *x, g, |_, gi| gi),
            Rule::LayerNorm {
                x,
                gamma,
                beta,
                inner,
                stats,
            } => {
                backward_layer_norm(before, scratch, *x, *gamma, *beta, *inner, stats, g);
            }
            Rule::MaskedSoftmax { logits, axis } => {
                let shape = node.value.shape().to_vec();
                let p = node.value.data();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let Some(dst) = scratch_slot(scratch, before, *logits) else {
                    return;
                };
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[at(j)] * p[at(j)];
                        }
                        for j in 0..len {
                            dst[at(j)] += p[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Rule::MaskedMax { x, arg_flat, .. } => {
                let Some(dst) = scratch_slot(scratch, before, *x) else {
                    return;
                };
                for (oi, &f) in arg_flat.iter().enumerate() {
                    dst[f] += g[oi];
                }
            }
            Rule::MaskedMean {
                x,
                axis,
                mask,
                counts,
            } => {
                let shape = before[x.0].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let Some(dst) = scratch_slot(scratch, before, *x) else {
                    return;
                };
                for o in 0..outer {
                    for i in 0..inner {
                        let oi = o * inner + i;
                        let share = g[oi] / counts[oi];
                        for j in 0..len {
                            let f = (o * len + j) * inner + i;
                            if mask[f] == 1.0 {
                                dst[f] += share;
                            }
                        }
                    }
                }
            }
            Rule::Sum { x } => {
                let gi = g[0];
                let Some(dst) = scratch_slot(scratch, before, *x) else {
                    return;
                };
                for d in dst.iter_mut() {
                    *d += gi;
                }
            }
            Rule::Reshape { x } => {
                let Some(dst) = scratch_slot(scratch, before, *x) else {
                    return;
                };
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Rule::GatherRows { x, row_len, idx } => {
                let row_len = *row_len;
                let idx = idx.clone();
                let Some(dst) = scratch_slot(scratch, before, *x) else {
                    return;
                };
                for (r, &s) in idx.iter().enumerate() {
                    if s >= 0 {
                        let s = s as usize;
                        let src = &g[r * row_len..(r + 1) * row_len];
                        let d = &mut dst[s * row_len..(s + 1) * row_len];
                        for (dv, sv) in d.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
            }
            Rule::ConcatLast {
                a,
                b,
                a_last,
                b_last,
            } => {
                let (a, b, a_last, b_last) = (*a, *b, *a_last, *b_last);
                let rows = node.value.numel() / (a_last + b_last);
                if let Some(dst) = scratch_slot(scratch, before, a) {
                    for r in 0..rows {
                        let src = &g[r * (a_last + b_last)..r * (a_last + b_last) + a_last];
                        for (d, s) in dst[r * a_last..(r + 1) * a_last].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if let Some(dst) = scratch_slot(scratch, before, b) {
                    for r in 0..rows {
                        let src =
                            &g[r * (a_last + b_last) + a_last..(r + 1) * (a_last + b_last)];
                        for (d, s) in dst[r * b_last..(r + 1) * b_last].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

// ---- helpers ----

/// Mutable scratch-gradient buffer for `v`, or None when `v` does not
/// track gradients.
fn scratch_slot<'a>(
    scratch: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let numel = nodes[v.0].value.numel();
    Some(scratch[v.0].get_or_insert_with(|| vec![0.0; numel]))
}

fn unary_accumulate(
    nodes: &[Node],
    scratch: &mut [Option<Vec<f64>>],
    x: Var,
    g: &[f64],
    f: impl Fn(f64, f64) -> f64,
) {
    let data = nodes[x.0].value.data();
    let Some(dst) = scratch_slot(scratch, nodes, x) else {
        return;
    };
    for i in 0..data.len() {
        dst[i] += f(data[i], g[i]);
    }
}

fn accumulate_with_output(
    nodes: &[Node],
    scratch: &mut [Option<Vec<f64>>],
    x: Var,
    g: &[f64],
    out_vals: &[f64],
    f: impl Fn(f64, f64) -> f64,
) {
    let Some(dst) = scratch_slot(scratch, nodes, x) else {
        return;
    };
    for i in 0..out_vals.len() {
        dst[i] += f(out_vals[i], g[i]);
    }
}

/// Accumulate `scale · g` (shaped like `out_shape`) into `v`'s scratch
/// gradient, reducing over broadcast axes.
fn bcast_accumulate(
    nodes: &[Node],
    scratch: &mut [Option<Vec<f64>>],
    v: Var,
    out_shape: &[usize],
    g: &[f64],
    scale: f64,
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let in_shape = nodes[v.0].value.shape().to_vec();
    let reduced = reduce_to_shape(g, out_shape, &in_shape, scale);
    let dst = scratch_slot(scratch, nodes, v).expect("needs_grad checked");
    for (d, s) in dst.iter_mut().zip(&reduced) {
        *d += s;
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn check_mask(shape: &[usize], mask: &Tensor) -> Result<()> {
    if mask.shape() != shape {
        return Err(Error::Shape(format!(
            "mask shape {:?} must equal operand shape {:?}",
            mask.shape(),
            shape
        )));
    }
    if let Some(bad) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::Contract(format!(
            "mask entries must be exactly 0 or 1, found {bad}"
        )));
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    // ln(1 + e^x), stable on both tails
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn wrap_angle_f(x: f64) -> f64 {
    use std::f64::consts::PI;
    let two_pi = 2.0 * PI;
    let y = x - two_pi * ((x + PI) / two_pi).floor();
    // guard against fp fencepost at +π
    if y >= PI {
        y - two_pi
    } else if y < -PI {
        y + two_pi
    } else {
        y
    }
}

// ---- broadcasting ----

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {a:?} with {b:?} (dim {i}: {da} vs {db})"
            )));
        }
    }
    Ok(out)
}

/// Per-dim strides into a (right-aligned, padded) input for iteration over
/// the output shape; 0 where the input broadcasts.
fn bcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let pad = nd - in_shape.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[pad + i] = acc;
        }
        acc *= in_shape[i];
    }
    strides
}

fn binary_broadcast(
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if a_shape == b_shape {
        let data = a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect();
        return Ok((a_shape.to_vec(), data));
    }
    let out_shape = broadcast_shapes(a_shape, b_shape)?;
    let n: usize = out_shape.iter().product();
    let sa = bcast_strides(a_shape, &out_shape);
    let sb = bcast_strides(b_shape, &out_shape);
    let nd = out_shape.len();
    let mut coord = vec![0usize; nd];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        // odometer increment
        for d in (0..nd).rev() {
            coord[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    Ok((out_shape, out))
}

/// Expand a tensor's data to `out_shape` (for Mul backward).
fn expand_to(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    let n: usize = out_shape.iter().product();
    let s = bcast_strides(t.shape(), out_shape);
    let nd = out_shape.len();
    let mut coord = vec![0usize; nd];
    let mut ix = 0usize;
    let d0 = t.data();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(d0[ix]);
        for d in (0..nd).rev() {
            coord[d] += 1;
            ix += s[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            ix -= s[d] * out_shape[d];
        }
    }
    out
}

/// Sum `scale · g` (shaped `out_shape`) down to `in_shape`.
fn reduce_to_shape(g: &[f64], out_shape: &[usize], in_shape: &[usize], scale: f64) -> Vec<f64> {
    if in_shape == out_shape {
        return g.iter().map(|x| x * scale).collect();
    }
    let in_n: usize = in_shape.iter().product();
    let mut out = vec![0.0; in_n];
    let s = bcast_strides(in_shape, out_shape);
    let nd = out_shape.len();
    let mut coord = vec![0usize; nd];
    let mut ix = 0usize;
    for &gv in g {
        out[ix] += gv * scale;
        for d in (0..nd).rev() {
            coord[d] += 1;
            ix += s[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            ix -= s[d] * out_shape[d];
        }
    }
    out
}

// ---- matmul ----

fn parse_mm_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MmDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape(format!(
            "matmul operands need >= 2 dims, got {a:?} and {b:?}"
        )));
    }
    let (ra, ca) = (a[a.len() - 2], a[a.len() - 1]);
    let (rb, cb) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {a:?} (k={ka}) vs {b:?} (k={kb})"
        )));
    }
    let batch_a: usize = a[..a.len() - 2].iter().product();
    let batch_b: usize = b[..b.len() - 2].iter().product();
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    // Leading dims must match exactly, or one side is a plain matrix
    // shared across the other's batch.
    let (batch, a_batched, b_batched) = if a_lead == b_lead {
        (batch_a, !a_lead.is_empty(), !b_lead.is_empty())
    } else if b_lead.is_empty() {
        (batch_a, true, false)
    } else if a_lead.is_empty() {
        (batch_b, false, true)
    } else {
        return Err(Error::Shape(format!(
            "matmul batch prefixes incompatible: {a:?} vs {b:?}"
        )));
    };
    Ok(MmDims {
        batch,
        m,
        k: ka,
        n,
        a_batched,
        b_batched,
    })
}

const PAR_FLOP_THRESHOLD: usize = 1 << 21;

/// Batched matmul over flat slices. Each output row is accumulated in a
/// fixed sequential order, so results are identical whether or not rayon
/// splits the row loop.
fn raw_mm(a: &[f64], b: &[f64], ta: bool, tb: bool, d: MmDims) -> Vec<f64> {
    let MmDims {
        batch, m, k, n, ..
    } = d;
    let a_sz = if ta { k * m } else { m * k };
    let b_sz = if tb { n * k } else { k * n };
    let mut out = vec![0.0; batch * m * n];
    let work = batch * m * n * k;

    let row_job = |row_chunk: &mut [f64], global_row: usize| {
        let bi = global_row / m;
        let i = global_row % m;
        let a_off = if d.a_batched { bi * a_sz } else { 0 };
        let b_off = if d.b_batched { bi * b_sz } else { 0 };
        let av = &a[a_off..a_off + a_sz];
        let bv = &b[b_off..b_off + b_sz];
        match (ta, tb) {
            (false, false) => {
                // row_i(C) = sum_p A[i,p] * row_p(B)
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (c, bb) in row_chunk.iter_mut().zip(brow) {
                        *c += aip * bb;
                    }
                }
            }
            (false, true) => {
                // C[i,j] = dot(row_i(A), row_j(B))
                let arow = &av[i * k..(i + 1) * k];
                for (j, c) in row_chunk.iter_mut().enumerate() {
                    let brow = &bv[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (x, y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    *c = acc;
                }
            }
            (true, false) => {
                // A stored [k, m]; C[i,:] = sum_p A[p,i] * row_p(B)
                for p in 0..k {
                    let api = av[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (c, bb) in row_chunk.iter_mut().zip(brow) {
                        *c += api * bb;
                    }
                }
            }
            (true, true) => {
                // rare; strided dot
                for (j, c) in row_chunk.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += av[p * m + i] * bv[j * k + p];
                    }
                    *c = acc;
                }
            }
        }
    };

    if work >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, chunk)| row_job(chunk, r));
    } else {
        for (r, chunk) in out.chunks_mut(n).enumerate() {
            row_job(chunk, r);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn backward_matmul(
    nodes: &[Node],
    scratch: &mut [Option<Vec<f64>>],
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    d: MmDims,
    g: &[f64],
) {
    // Effective product C = A_eff · B_eff with dA_eff = g · B_effᵀ and
    // dB_eff = A_effᵀ · g, mapped back through the transpose flags.
    let MmDims {
        batch, m, k, n, ..
    } = d;
    if nodes[a.0].needs_grad {
        let bvals = nodes[b.0].value.data();
        // dA_eff [batch, m, k] = g [batch, m, n] x B_eff^T
        let dims = MmDims {
            batch,
            m,
            k: n,
            n: k,
            a_batched: true,
            b_batched: d.b_batched,
        };
        let da_eff = raw_mm(g, bvals, false, !tb, dims);
        let dst = scratch_slot(scratch, nodes, a).expect("needs_grad checked");
        // stored A is [.., k, m] when ta
        accumulate_batched(dst, &da_eff, batch, m, k, d.a_batched, ta);
    }
    if nodes[b.0].needs_grad {
        let avals = nodes[a.0].value.data();
        // dB_eff [batch, k, n] = A_eff^T x g
        let dims = MmDims {
            batch,
            m: k,
            k: m,
            n,
            a_batched: d.a_batched,
            b_batched: true,
        };
        // A_eff^T: if !ta, stored a is [m,k] and we need TN; if ta, stored
        // a is already [k,m] so plain NN works.
        let db_eff = raw_mm(avals, g, !ta, false, dims);
        let dst = scratch_slot(scratch, nodes, b).expect("needs_grad checked");
        accumulate_batched(dst, &db_eff, batch, k, n, d.b_batched, tb);
    }
}

/// Accumulate per-batch `[r, c]` gradients into a destination that may be
/// unbatched (summed over batch) and/or stored transposed.
fn accumulate_batched(
    dst: &mut [f64],
    src: &[f64],
    batch: usize,
    r: usize,
    c: usize,
    batched: bool,
    transposed: bool,
) {
    for bi in 0..batch {
        let s = &src[bi * r * c..(bi + 1) * r * c];
        let off = if batched { bi * r * c } else { 0 };
        if !transposed {
            for (d, v) in dst[off..off + r * c].iter_mut().zip(s) {
                *d += v;
            }
        } else {
            // dst stores [c, r]
            let dstc = &mut dst[off..off + r * c];
            for i in 0..r {
                for j in 0..c {
                    dstc[j * r + i] += s[i * c + j];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_layer_norm(
    nodes: &[Node],
    scratch: &mut [Option<Vec<f64>>],
    x: Var,
    gamma: Var,
    beta: Var,
    inner: usize,
    stats: &[(f64, f64)],
    g: &[f64],
) {
    let rows = stats.len();
    let xd = nodes[x.0].value.data();
    let gd = nodes[gamma.0].value.data();

    if let Some(db) = scratch_slot(scratch, nodes, beta) {
        for r in 0..rows {
            for i in 0..inner {
                db[i] += g[r * inner + i];
            }
        }
    }
    if let Some(dg) = scratch_slot(scratch, nodes, gamma) {
        for r in 0..rows {
            let (mean, rstd) = stats[r];
            for i in 0..inner {
                let xhat = (xd[r * inner + i] - mean) * rstd;
                dg[i] += g[r * inner + i] * xhat;
            }
        }
    }
    if let Some(dx) = scratch_slot(scratch, nodes, x) {
        for r in 0..rows {
            let (mean, rstd) = stats[r];
            let grow = &g[r * inner..(r + 1) * inner];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for i in 0..inner {
                let xhat = (xd[r * inner + i] - mean) * rstd;
                let dxhat = grow[i] * gd[i];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= inner as f64;
            mean_dxhat_xhat /= inner as f64;
            for i in 0..inner {
                let xhat = (xd[r * inner + i] - mean) * rstd;
                let dxhat = grow[i] * gd[i];
                dx[r * inner + i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
}

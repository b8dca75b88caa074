//! Point-to-voxel encoders.
//!
//! Two families reduce each pillar's point set to a single feature
//! vector: the pooling PointNet (shared FC stack, masked max or mean) and
//! the attention aggregator, where every point is a token and one query
//! per pillar cross-attends over them. The query is either a learned
//! latent vector or the residual form `maxpool(tokens) + latent`.
//!
//! All attention here is pre-norm with GELU MLPs. Masked (padded) point
//! slots never contribute: they are excluded as keys, re-zeroed as
//! values, and empty pillar rows are sliced away before any attention
//! runs.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};
use crate::voxel::FixedVoxelBatch;

// ---- parameter containers ----

/// One affine layer: `w` is `[in, out]`, `b` is `[out]`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut SplitMix64) -> Self {
        LinearParams {
            w: Tensor::randn(&[fan_in, fan_out], std, rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    /// He-style init for relu stacks.
    pub fn init_he(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        LinearParams::init(fan_in, fan_out, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// LayerNorm affine pair.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    pub fn init(d: usize) -> Self {
        NormParams {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const PROJ_INIT_STD: f64 = 0.02;
pub const LATENT_INIT_STD: f64 = 0.02;

/// Pre-norm transformer block: multi-head attention plus a GELU MLP, both
/// residual. Cross-attention blocks reuse `ln1` for query and key/value
/// inputs.
#[derive(Debug, Clone)]
pub struct AttentionBlockParams {
    pub heads: usize,
    pub q_proj: LinearParams,
    pub k_proj: LinearParams,
    pub v_proj: LinearParams,
    pub out_proj: LinearParams,
    pub mlp_in: LinearParams,
    pub mlp_out: LinearParams,
    pub ln1: NormParams,
    pub ln2: NormParams,
    /// Ablation switch: when false the block is attention-only.
    pub include_mlp: bool,
}

impl AttentionBlockParams {
    pub fn init(d: usize, heads: usize, expansion: usize, rng: &mut SplitMix64) -> Result<Self> {
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if expansion < 1 {
            return Err(Error::Config("mlp expansion must be >= 1".into()));
        }
        Ok(AttentionBlockParams {
            heads,
            q_proj: LinearParams::init(d, d, PROJ_INIT_STD, rng),
            k_proj: LinearParams::init(d, d, PROJ_INIT_STD, rng),
            v_proj: LinearParams::init(d, d, PROJ_INIT_STD, rng),
            out_proj: LinearParams::init(d, d, PROJ_INIT_STD, rng),
            mlp_in: LinearParams::init(d, d * expansion, PROJ_INIT_STD, rng),
            mlp_out: LinearParams::init(d * expansion, d, PROJ_INIT_STD, rng),
            ln1: NormParams::init(d),
            ln2: NormParams::init(d),
            include_mlp: true,
        })
    }

    pub fn width(&self) -> usize {
        self.q_proj.w.shape()[0]
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q_proj.visit(&format!("{prefix}.q_proj"), f);
        self.k_proj.visit(&format!("{prefix}.k_proj"), f);
        self.v_proj.visit(&format!("{prefix}.v_proj"), f);
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
        self.mlp_in.visit(&format!("{prefix}.mlp_in"), f);
        self.mlp_out.visit(&format!("{prefix}.mlp_out"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q_proj.visit_mut(&format!("{prefix}.q_proj"), f);
        self.k_proj.visit_mut(&format!("{prefix}.k_proj"), f);
        self.v_proj.visit_mut(&format!("{prefix}.v_proj"), f);
        self.out_proj.visit_mut(&format!("{prefix}.out_proj"), f);
        self.mlp_in.visit_mut(&format!("{prefix}.mlp_in"), f);
        self.mlp_out.visit_mut(&format!("{prefix}.mlp_out"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
    }
}

// ---- tape bindings ----

/// Records the (name, Var) pairs of every parameter leased onto a tape so
/// gradients can be written back by name after backward.
#[derive(Default)]
pub struct ParamBindings {
    pub entries: Vec<(String, Var)>,
}

impl ParamBindings {
    pub fn push(&mut self, name: impl Into<String>, v: Var) {
        self.entries.push((name.into(), v));
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl LinearParams {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> BoundLinear {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        reg.push(format!("{prefix}.w"), w);
        reg.push(format!("{prefix}.b"), b);
        BoundLinear { w, b }
    }
}

#[derive(Clone, Copy)]
pub struct BoundNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl NormParams {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> BoundNorm {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        reg.push(format!("{prefix}.gamma"), gamma);
        reg.push(format!("{prefix}.beta"), beta);
        BoundNorm { gamma, beta }
    }
}

#[derive(Clone, Copy)]
pub struct BoundBlock {
    pub heads: usize,
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub out: BoundLinear,
    pub mlp_in: BoundLinear,
    pub mlp_out: BoundLinear,
    pub ln1: BoundNorm,
    pub ln2: BoundNorm,
    pub include_mlp: bool,
}

impl AttentionBlockParams {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> BoundBlock {
        BoundBlock {
            heads: self.heads,
            q: self.q_proj.bind(tape, reg, &format!("{prefix}.q_proj")),
            k: self.k_proj.bind(tape, reg, &format!("{prefix}.k_proj")),
            v: self.v_proj.bind(tape, reg, &format!("{prefix}.v_proj")),
            out: self.out_proj.bind(tape, reg, &format!("{prefix}.out_proj")),
            mlp_in: self.mlp_in.bind(tape, reg, &format!("{prefix}.mlp_in")),
            mlp_out: self.mlp_out.bind(tape, reg, &format!("{prefix}.mlp_out")),
            ln1: self.ln1.bind(tape, reg, &format!("{prefix}.ln1")),
            ln2: self.ln2.bind(tape, reg, &format!("{prefix}.ln2")),
            include_mlp: self.include_mlp,
        }
    }
}

// ---- attention ----

/// Expand a `[B, P]` point/key mask over a trailing feature axis.
pub fn mask_expand_last(mask: &Tensor, d: usize) -> Tensor {
    let n = mask.numel();
    let mut out = vec![0.0; n * d];
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 1.0 {
            out[i * d..(i + 1) * d].fill(1.0);
        }
    }
    let mut shape = mask.shape().to_vec();
    shape.push(d);
    Tensor::new(shape, out).unwrap()
}

/// Expand a `[B, Tk]` key mask to `[B·heads, Tq, Tk]` attention shape.
fn key_mask_expand(mask: &Tensor, heads: usize, tq: usize) -> Tensor {
    let b = mask.shape()[0];
    let tk = mask.shape()[1];
    let mut out = vec![0.0; b * heads * tq * tk];
    for bi in 0..b {
        let row = &mask.data()[bi * tk..(bi + 1) * tk];
        for h in 0..heads {
            for q in 0..tq {
                let off = ((bi * heads + h) * tq + q) * tk;
                out[off..off + tk].copy_from_slice(row);
            }
        }
    }
    Tensor::new(vec![b * heads, tq, tk], out).unwrap()
}

/// Row permutation that regroups `[B, T, heads·dh]` into `[B·heads, T, dh]`.
fn split_heads_idx(b: usize, t: usize, heads: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(b * heads * t);
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                idx.push(((bi * t + ti) * heads + h) as i64);
            }
        }
    }
    idx
}

/// Inverse of [`split_heads_idx`].
fn merge_heads_idx(b: usize, t: usize, heads: usize) -> Vec<i64> {
    let mut idx = vec![0i64; b * heads * t];
    for (dst, &src) in split_heads_idx(b, t, heads).iter().enumerate() {
        idx[src as usize] = dst as i64;
    }
    idx
}

/// Multi-head scaled dot-product attention with a key padding mask.
///
/// `q` is `[B, Tq, d]`, `k`/`v` are `[B, Tk, d]`, `key_mask` is `[B, Tk]`
/// with 1 marking usable keys. Fully masked rows yield zero context (and
/// bump the softmax diagnostics counter).
pub fn mha_forward(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &Tensor,
    params: &BoundBlock,
) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 {
        return Err(Error::Shape(format!(
            "mha expects [B, T, d] operands, got {qs:?} and {ks:?}"
        )));
    }
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let heads = params.heads;
    if d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    if key_mask.shape() != [b, tk] {
        return Err(Error::Shape(format!(
            "key mask {:?} must be [{b}, {tk}]",
            key_mask.shape()
        )));
    }
    let dh = d / heads;

    let qp = tape.linear(q, params.q.w, params.q.b)?;
    let kp = tape.linear(k, params.k.w, params.k.b)?;
    let vp = tape.linear(v, params.v.w, params.v.b)?;

    let qh = tape.gather_rows(qp, dh, &split_heads_idx(b, tq, heads), &[b * heads, tq, dh])?;
    let kh = tape.gather_rows(kp, dh, &split_heads_idx(b, tk, heads), &[b * heads, tk, dh])?;
    let vh = tape.gather_rows(vp, dh, &split_heads_idx(b, tk, heads), &[b * heads, tk, dh])?;

    let scores = tape.matmul_nt(qh, kh)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let mask3 = key_mask_expand(key_mask, heads, tq);
    let probs = tape.masked_softmax(scaled, &mask3, 2)?;
    let ctx = tape.matmul(probs, vh)?;

    let merged = tape.gather_rows(ctx, dh, &merge_heads_idx(b, tq, heads), &[b, tq, d])?;
    tape.linear(merged, params.out.w, params.out.b)
}

/// Convex combination of value rows under caller-supplied weights:
/// `weights [B, 1, Tk] x values [B, Tk, d] -> [B, 1, d]`.
///
/// This is the aggregation hook that makes the pooling-supersedence
/// claims testable: one-hot weights reproduce row selection, uniform
/// weights reproduce the masked mean.
pub fn weighted_aggregate(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
    let ws = weights.shape();
    let vs = values.shape();
    if ws.len() != 3 || vs.len() != 3 || ws[0] != vs[0] || ws[1] != 1 || ws[2] != vs[1] {
        return Err(Error::Shape(format!(
            "weighted_aggregate expects [B,1,Tk] x [B,Tk,d], got {ws:?} x {vs:?}"
        )));
    }
    let (b, tk, d) = (vs[0], vs[1], vs[2]);
    for bi in 0..b {
        let row = &weights.data()[bi * tk..(bi + 1) * tk];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "weight row {bi} sums to {sum}, expected 1"
            )));
        }
        if row.iter().any(|&w| w < 0.0) {
            return Err(Error::Contract(format!("weight row {bi} has negative entries")));
        }
    }
    let mut out = vec![0.0; b * d];
    for bi in 0..b {
        for t in 0..tk {
            let w = weights.data()[bi * tk + t];
            if w == 0.0 {
                continue;
            }
            let src = &values.data()[(bi * tk + t) * d..(bi * tk + t + 1) * d];
            for (o, s) in out[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    Tensor::new(vec![b, 1, d], out)
}

/// Pre-norm self-attention block over `[B, T, d]` tokens; padded tokens
/// (mask 0) are excluded as keys and re-zeroed on output.
pub fn self_attention_block(
    tape: &mut Tape,
    x: Var,
    token_mask: &Tensor,
    params: &BoundBlock,
) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap();
    let h1 = tape.layer_norm(x, params.ln1.gamma, params.ln1.beta, LAYER_NORM_EPS)?;
    let attn = mha_forward(tape, h1, h1, h1, token_mask, params)?;
    let x1 = tape.add(x, attn)?;
    let x2 = if params.include_mlp {
        let h2 = tape.layer_norm(x1, params.ln2.gamma, params.ln2.beta, LAYER_NORM_EPS)?;
        let m1 = tape.linear(h2, params.mlp_in.w, params.mlp_in.b)?;
        let m2 = tape.gelu(m1);
        let m3 = tape.linear(m2, params.mlp_out.w, params.mlp_out.b)?;
        tape.add(x1, m3)?
    } else {
        x1
    };
    let mask3 = tape.leaf(mask_expand_last(token_mask, d));
    tape.mul(x2, mask3)
}

/// Pre-norm cross-attention block: queries `[B, Tq, d]` attend over
/// tokens `[B, Tk, d]`. The same ln1 affine normalizes both inputs.
pub fn cross_attention_block(
    tape: &mut Tape,
    query: Var,
    tokens: Var,
    key_mask: &Tensor,
    params: &BoundBlock,
) -> Result<Var> {
    let hq = tape.layer_norm(query, params.ln1.gamma, params.ln1.beta, LAYER_NORM_EPS)?;
    let hkv = tape.layer_norm(tokens, params.ln1.gamma, params.ln1.beta, LAYER_NORM_EPS)?;
    let attn = mha_forward(tape, hq, hkv, hkv, key_mask, params)?;
    let x1 = tape.add(query, attn)?;
    if params.include_mlp {
        let h2 = tape.layer_norm(x1, params.ln2.gamma, params.ln2.beta, LAYER_NORM_EPS)?;
        let m1 = tape.linear(h2, params.mlp_in.w, params.mlp_in.b)?;
        let m2 = tape.gelu(m1);
        let m3 = tape.linear(m2, params.mlp_out.w, params.mlp_out.b)?;
        tape.add(x1, m3)
    } else {
        Ok(x1)
    }
}

// ---- PointNet ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    Mean,
}

/// Shared per-point FC stack followed by a symmetric pooling reduction.
#[derive(Debug, Clone)]
pub struct PointNetParams {
    pub fc_layers: Vec<LinearParams>,
    pub aggregation: Aggregation,
}

impl PointNetParams {
    /// `widths` chains from the raw feature dim through each hidden layer.
    pub fn init(f: usize, widths: &[usize], aggregation: Aggregation, rng: &mut SplitMix64) -> Self {
        let mut fc_layers = Vec::new();
        let mut fan_in = f;
        for &w in widths {
            fc_layers.push(LinearParams::init_he(fan_in, w, rng));
            fan_in = w;
        }
        PointNetParams {
            fc_layers,
            aggregation,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc_layers.last().map(|l| l.w.shape()[1]).unwrap_or(0)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.fc_layers.iter().enumerate() {
            l.visit(&format!("{prefix}.fc{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.fc_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.fc{i}"), f);
        }
    }
}

/// Pull the occupied slots of a batch onto the tape as constants:
/// `([n, P, f] features, [n, P] mask)`.
pub fn occupied_slice(tape: &mut Tape, batch: &FixedVoxelBatch) -> (Var, Tensor) {
    let n = batch.num_voxels;
    let p = batch.cap_points();
    let f = batch.feature_dim();
    let feats = Tensor::new(
        vec![n, p, f],
        batch.features.data()[..n * p * f].to_vec(),
    )
    .unwrap();
    let mask = Tensor::new(vec![n, p], batch.mask.data()[..n * p].to_vec()).unwrap();
    (tape.leaf(feats), mask)
}

/// Scatter `[n, d]` occupied-voxel features into the full `[N, d]` slot
/// layout (rows >= n stay zero).
pub fn scatter_occupied(tape: &mut Tape, x: Var, n_occ: usize, slots: usize) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap();
    let idx: Vec<i64> = (0..slots)
        .map(|i| if i < n_occ { i as i64 } else { -1 })
        .collect();
    tape.gather_rows(x, d, &idx, &[slots, d])
}

fn fc_stack(tape: &mut Tape, x: Var, layers: &[BoundLinear]) -> Result<Var> {
    let mut cur = x;
    for l in layers {
        cur = tape.linear(cur, l.w, l.b)?;
        cur = tape.relu(cur);
    }
    Ok(cur)
}

pub struct BoundPointNet {
    pub fc: Vec<BoundLinear>,
    pub aggregation: Aggregation,
}

impl PointNetParams {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> BoundPointNet {
        BoundPointNet {
            fc: self
                .fc_layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(tape, reg, &format!("{prefix}.fc{i}")))
                .collect(),
            aggregation: self.aggregation,
        }
    }
}

/// PointNet encode: shared FC stack on every valid point, masked pooling
/// over the point axis. Output is `[N, d]` with zero rows for unoccupied
/// slots.
pub fn pointnet_encode(
    tape: &mut Tape,
    batch: &FixedVoxelBatch,
    params: &BoundPointNet,
) -> Result<Var> {
    if batch.num_voxels == 0 {
        return Err(Error::Config("pointnet_encode on an empty batch".into()));
    }
    let (feats, mask) = occupied_slice(tape, batch);
    let x = fc_stack(tape, feats, &params.fc)?;
    let d = *tape.shape(x).last().unwrap();
    let mask3t = mask_expand_last(&mask, d);
    let mask3 = tape.leaf(mask3t.clone());
    let x = tape.mul(x, mask3)?;
    let pooled = match params.aggregation {
        Aggregation::Max => tape.masked_max(x, &mask3t, 1)?.0,
        Aggregation::Mean => tape.masked_mean(x, &mask3t, 1)?,
    };
    scatter_occupied(tape, pooled, batch.num_voxels, batch.slots())
}

// ---- PVTransformer ----

/// Depth ladder of the attention encoder: plain FC (pool fallback),
/// FC + point-to-voxel cross-attention, or FC + point self-attention +
/// cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvtDepth {
    Fc,
    FcPv,
    FcPpPv,
}

impl PvtDepth {
    pub fn as_str(&self) -> &'static str {
        match self {
            PvtDepth::Fc => "FC",
            PvtDepth::FcPv => "FC-PV",
            PvtDepth::FcPpPv => "FC-PP-PV",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "FC" => Ok(PvtDepth::Fc),
            "FC-PV" => Ok(PvtDepth::FcPv),
            "FC-PP-PV" => Ok(PvtDepth::FcPpPv),
            _ => Err(Error::Parse(format!("unknown point depth '{s}'"))),
        }
    }
}

/// How the aggregation query is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// The learned latent vector alone.
    Latent,
    /// Max-pooled tokens plus the latent vector.
    Residual,
}

impl QueryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryMode::Latent => "latent",
            QueryMode::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(QueryMode::Latent),
            "residual" => Ok(QueryMode::Residual),
            _ => Err(Error::Parse(format!("unknown query mode '{s}'"))),
        }
    }
}

/// Attention point-to-voxel encoder parameters.
#[derive(Debug, Clone)]
pub struct PvtParams {
    pub fc: LinearParams,
    pub pp_block: Option<AttentionBlockParams>,
    pub pv_block: Option<AttentionBlockParams>,
    /// `[1, d]` learned query seed.
    pub latent_query: Tensor,
    pub depth: PvtDepth,
    pub query_mode: QueryMode,
}

impl PvtParams {
    pub fn init(
        f: usize,
        d: usize,
        heads: usize,
        expansion: usize,
        depth: PvtDepth,
        query_mode: QueryMode,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let fc = LinearParams::init_he(f, d, rng);
        let pp_block = match depth {
            PvtDepth::FcPpPv => Some(AttentionBlockParams::init(d, heads, expansion, rng)?),
            _ => None,
        };
        let pv_block = match depth {
            PvtDepth::Fc => None,
            _ => Some(AttentionBlockParams::init(d, heads, expansion, rng)?),
        };
        let latent_query = Tensor::randn(&[1, d], LATENT_INIT_STD, rng).with_grad();
        Ok(PvtParams {
            fc,
            pp_block,
            pv_block,
            latent_query,
            depth,
            query_mode,
        })
    }

    pub fn width(&self) -> usize {
        self.latent_query.shape()[1]
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc.visit(&format!("{prefix}.fc"), f);
        if let Some(pp) = &self.pp_block {
            pp.visit(&format!("{prefix}.pp"), f);
        }
        if let Some(pv) = &self.pv_block {
            pv.visit(&format!("{prefix}.pv"), f);
        }
        f(&format!("{prefix}.latent_q"), &self.latent_query);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc.visit_mut(&format!("{prefix}.fc"), f);
        if let Some(pp) = &mut self.pp_block {
            pp.visit_mut(&format!("{prefix}.pp"), f);
        }
        if let Some(pv) = &mut self.pv_block {
            pv.visit_mut(&format!("{prefix}.pv"), f);
        }
        f(&format!("{prefix}.latent_q"), &mut self.latent_query);
    }
}

pub struct BoundPvt {
    pub fc: BoundLinear,
    pub pp: Option<BoundBlock>,
    pub pv: Option<BoundBlock>,
    pub latent: Var,
    pub depth: PvtDepth,
    pub query_mode: QueryMode,
}

impl PvtParams {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> BoundPvt {
        let latent = tape.param(&self.latent_query);
        reg.push(format!("{prefix}.latent_q"), latent);
        BoundPvt {
            fc: self.fc.bind(tape, reg, &format!("{prefix}.fc")),
            pp: self
                .pp_block
                .as_ref()
                .map(|b| b.bind(tape, reg, &format!("{prefix}.pp"))),
            pv: self
                .pv_block
                .as_ref()
                .map(|b| b.bind(tape, reg, &format!("{prefix}.pv"))),
            latent,
            depth: self.depth,
            query_mode: self.query_mode,
        }
    }
}

/// Broadcast-add the latent query onto pooled per-voxel features:
/// `[n, 1, d] + [1, d]`.
pub fn residual_query(tape: &mut Tape, pooled: Var, latent: Var) -> Result<Var> {
    let ps = tape.shape(pooled).to_vec();
    let ls = tape.shape(latent).to_vec();
    if ps.last() != ls.last() {
        return Err(Error::Shape(format!(
            "residual query width mismatch: pooled {ps:?} vs latent {ls:?}"
        )));
    }
    tape.add(pooled, latent)
}

/// Attention point-to-voxel encode. `query_mode` must match the params'
/// configured mode. Output is `[N, d]`, zero on unoccupied rows.
pub fn pvt_encode(
    tape: &mut Tape,
    batch: &FixedVoxelBatch,
    params: &BoundPvt,
    query_mode: QueryMode,
) -> Result<Var> {
    if query_mode != params.query_mode {
        return Err(Error::Config(format!(
            "query mode {} requested but params are configured for {}",
            query_mode.as_str(),
            params.query_mode.as_str()
        )));
    }
    if batch.num_voxels == 0 {
        return Err(Error::Config("pvt_encode on an empty batch".into()));
    }
    let n = batch.num_voxels;
    let (feats, mask) = occupied_slice(tape, batch);

    // featurize points, zero the padded slots
    let x = tape.linear(feats, params.fc.w, params.fc.b)?;
    let x = tape.relu(x);
    let d = *tape.shape(x).last().unwrap();
    let mask3t = mask_expand_last(&mask, d);
    let mask3 = tape.leaf(mask3t.clone());
    let mut tokens = tape.mul(x, mask3)?;

    if params.depth == PvtDepth::Fc {
        // definitional fallback: plain masked max pooling
        let pooled = tape.masked_max(tokens, &mask3t, 1)?.0;
        return scatter_occupied(tape, pooled, n, batch.slots());
    }

    if params.depth == PvtDepth::FcPpPv {
        let pp = params
            .pp
            .as_ref()
            .ok_or_else(|| Error::Config("FC-PP-PV params missing the PP block".into()))?;
        tokens = self_attention_block(tape, tokens, &mask, pp)?;
    }

    let pv = params
        .pv
        .as_ref()
        .ok_or_else(|| Error::Config("PV cross-attention params missing".into()))?;

    let query = match query_mode {
        QueryMode::Residual => {
            let latest_mask = mask_expand_last(&mask, d);
            let pooled = tape.masked_max(tokens, &latest_mask, 1)?.0;
            let pooled3 = tape.reshape(pooled, &[n, 1, d])?;
            residual_query(tape, pooled3, params.latent)?
        }
        QueryMode::Latent => {
            let idx = vec![0i64; n];
            tape.gather_rows(params.latent, d, &idx, &[n, 1, d])?
        }
    };

    let voxel = cross_attention_block(tape, query, tokens, &mask, pv)?;
    let flat = tape.reshape(voxel, &[n, d])?;
    scatter_occupied(tape, flat, n, batch.slots())
}

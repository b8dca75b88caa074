//! Dense masked BEV backbone: scatter, windowed attention blocks at a
//! ladder of strides, nearest-neighbor upsample fusion.
//!
//! The windowing is deliberately plain — non-overlapping windows, no
//! shifts, dense tensors with occupancy masks — which is exact and cheap
//! at the grid sizes used here. Every block re-zeroes unoccupied cells,
//! so sparsity is a runtime invariant rather than a storage format.

mod decode;
mod heads;
mod loss;

pub use decode::decode_boxes;
pub use heads::{detection_heads, BoundClassHead, BoundHeads, ClassHeadParams, DetectionOutput, HeadConfig, HeadsParams};
pub use loss::{total_loss, LossBreakdown, LossWeights};

use crate::encoder::{
    self_attention_block, AttentionBlockParams, BoundBlock, BoundLinear, LinearParams,
    ParamBindings,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Dense bird's-eye-view feature map on the tape plus its occupancy.
#[derive(Clone)]
pub struct BevMap {
    /// `[H, W, d]` features.
    pub features: Var,
    /// `[H, W]` occupancy in {0, 1} (plain data, not differentiated).
    pub occupancy: Tensor,
    /// Stride factor relative to the base grid.
    pub scale: usize,
}

impl BevMap {
    pub fn h(&self) -> usize {
        self.occupancy.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.occupancy.shape()[1]
    }
}

/// Place per-voxel features onto a dense `[H, W, d]` grid. `coords` are
/// (ix, iy) cell indices; duplicates are rejected. Backward gathers cell
/// gradients back to the voxel rows.
pub fn scatter_to_bev(
    tape: &mut Tape,
    voxel_features: Var,
    coords: &[[usize; 2]],
    n_occ: usize,
    grid_extent: (usize, usize),
) -> Result<BevMap> {
    let (w, h) = (grid_extent.0, grid_extent.1);
    let d = *tape.shape(voxel_features).last().unwrap();
    let mut idx = vec![-1i64; h * w];
    let mut occupancy = Tensor::zeros(&[h, w]);
    for (slot, c) in coords.iter().take(n_occ).enumerate() {
        let (ix, iy) = (c[0], c[1]);
        if ix >= w || iy >= h {
            return Err(Error::Shape(format!(
                "voxel coord ({ix}, {iy}) outside grid {w}x{h}"
            )));
        }
        let cell = iy * w + ix;
        if idx[cell] != -1 {
            return Err(Error::Shape(format!("duplicate voxel coord ({ix}, {iy})")));
        }
        idx[cell] = slot as i64;
        occupancy.set(&[iy, ix], 1.0);
    }
    let features = tape.gather_rows(voxel_features, d, &idx, &[h, w, d])?;
    Ok(BevMap {
        features,
        occupancy,
        scale: 1,
    })
}

/// Partition metadata shared by `window_partition` / `window_merge`.
#[derive(Debug, Clone, Copy)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub window: usize,
    pub wins_y: usize,
    pub wins_x: usize,
}

impl WindowLayout {
    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn num_windows(&self) -> usize {
        self.wins_y * self.wins_x
    }

    fn partition_idx(&self) -> Vec<i64> {
        let mut idx = Vec::with_capacity(self.num_windows() * self.tokens_per_window());
        for wy in 0..self.wins_y {
            for wx in 0..self.wins_x {
                for r in 0..self.window {
                    for c in 0..self.window {
                        let y = wy * self.window + r;
                        let x = wx * self.window + c;
                        idx.push(if y < self.h && x < self.w {
                            (y * self.w + x) as i64
                        } else {
                            -1 // zero padding outside the map
                        });
                    }
                }
            }
        }
        idx
    }

    fn merge_idx(&self) -> Vec<i64> {
        let mut idx = vec![-1i64; self.h * self.w];
        for (tok, &cell) in self.partition_idx().iter().enumerate() {
            if cell >= 0 {
                idx[cell as usize] = tok as i64;
            }
        }
        idx
    }
}

/// Cut a map into non-overlapping `window x window` token groups
/// (zero-padded past the borders). Returns the tokens
/// `[num_windows, window², d]`, the matching key mask (occupancy with
/// zeros on padding), and the layout needed to merge back.
pub fn window_partition(
    tape: &mut Tape,
    map: &BevMap,
    window: usize,
) -> Result<(Var, Tensor, WindowLayout)> {
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let (h, w) = (map.h(), map.w());
    let d = *tape.shape(map.features).last().unwrap();
    let layout = WindowLayout {
        h,
        w,
        d,
        window,
        wins_y: h.div_ceil(window),
        wins_x: w.div_ceil(window),
    };
    let idx = layout.partition_idx();
    let tokens = tape.gather_rows(
        map.features,
        d,
        &idx,
        &[layout.num_windows(), layout.tokens_per_window(), d],
    )?;
    let mut mask = vec![0.0; idx.len()];
    for (t, &cell) in idx.iter().enumerate() {
        if cell >= 0 {
            mask[t] = map.occupancy.data()[cell as usize];
        }
    }
    let mask = Tensor::new(
        vec![layout.num_windows(), layout.tokens_per_window()],
        mask,
    )
    .unwrap();
    Ok((tokens, mask, layout))
}

/// Exact inverse of [`window_partition`] (padding tokens are dropped).
pub fn window_merge(tape: &mut Tape, tokens: Var, layout: &WindowLayout) -> Result<Var> {
    tape.gather_rows(
        tokens,
        layout.d,
        &layout.merge_idx(),
        &[layout.h, layout.w, layout.d],
    )
}

/// One windowed transformer block: masked self-attention within each
/// window plus the MLP, pre-norm residuals, unoccupied cells re-zeroed.
pub fn swformer_block(
    tape: &mut Tape,
    map: &BevMap,
    params: &BoundBlock,
    window: usize,
) -> Result<BevMap> {
    let (tokens, mask, layout) = window_partition(tape, map, window)?;
    let out = self_attention_block(tape, tokens, &mask, params)?;
    let features = window_merge(tape, out, &layout)?;
    Ok(BevMap {
        features,
        occupancy: map.occupancy.clone(),
        scale: map.scale,
    })
}

/// Coarsen by `factor`: per-channel masked max over each factor² cell
/// group, occupancy OR. Empty coarse cells stay exactly zero.
pub fn downsample(tape: &mut Tape, map: &BevMap, factor: usize) -> Result<BevMap> {
    if !(factor == 2 || factor == 4) {
        return Err(Error::Config(format!("downsample factor must be 2 or 4, got {factor}")));
    }
    let (h, w) = (map.h(), map.w());
    let d = *tape.shape(map.features).last().unwrap();
    let hc = h.div_ceil(factor);
    let wc = w.div_ceil(factor);

    // group fine cells under their coarse cell
    let mut idx = Vec::with_capacity(hc * wc * factor * factor);
    for cy in 0..hc {
        for cx in 0..wc {
            for r in 0..factor {
                for c in 0..factor {
                    let y = cy * factor + r;
                    let x = cx * factor + c;
                    idx.push(if y < h && x < w { (y * w + x) as i64 } else { -1 });
                }
            }
        }
    }
    let f2 = factor * factor;
    let grouped = tape.gather_rows(map.features, d, &idx, &[hc * wc, f2, d])?;

    // occupancy per grouped token
    let mut occ_tok = vec![0.0; hc * wc * f2];
    for (t, &cell) in idx.iter().enumerate() {
        if cell >= 0 {
            occ_tok[t] = map.occupancy.data()[cell as usize];
        }
    }
    let coarse_occ: Vec<f64> = (0..hc * wc)
        .map(|g| {
            if occ_tok[g * f2..(g + 1) * f2].iter().any(|&o| o == 1.0) {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    // masked max over the occupied coarse groups only
    let occupied: Vec<usize> = (0..hc * wc).filter(|&g| coarse_occ[g] == 1.0).collect();
    let pooled_full = if occupied.is_empty() {
        tape.leaf(Tensor::zeros(&[hc, wc, d]))
    } else {
        let sub_idx: Vec<i64> = occupied.iter().map(|&g| g as i64).collect();
        let sub = tape.gather_rows(grouped, f2 * d, &sub_idx, &[occupied.len(), f2, d])?;
        let mut sub_mask = vec![0.0; occupied.len() * f2 * d];
        for (si, &g) in occupied.iter().enumerate() {
            for t in 0..f2 {
                if occ_tok[g * f2 + t] == 1.0 {
                    sub_mask[(si * f2 + t) * d..(si * f2 + t + 1) * d].fill(1.0);
                }
            }
        }
        let sub_mask = Tensor::new(vec![occupied.len(), f2, d], sub_mask).unwrap();
        let (pooled, _) = tape.masked_max(sub, &sub_mask, 1)?;
        // scatter pooled rows back into the dense coarse grid
        let mut back = vec![-1i64; hc * wc];
        for (si, &g) in occupied.iter().enumerate() {
            back[g] = si as i64;
        }
        tape.gather_rows(pooled, d, &back, &[hc, wc, d])?
    };

    Ok(BevMap {
        features: pooled_full,
        occupancy: Tensor::new(vec![hc, wc], coarse_occ).unwrap(),
        scale: map.scale * factor,
    })
}

/// Nearest-neighbor upsample the coarse map onto the fine grid, concat
/// with the fine features and project back to d. Unoccupied fine cells
/// are re-zeroed.
pub fn upsample_fuse(
    tape: &mut Tape,
    coarse: &BevMap,
    fine: &BevMap,
    fuse: &BoundLinear,
) -> Result<BevMap> {
    if coarse.scale % fine.scale != 0 || coarse.scale == fine.scale {
        return Err(Error::Config(format!(
            "cannot fuse scale {} into scale {}",
            coarse.scale, fine.scale
        )));
    }
    let factor = coarse.scale / fine.scale;
    let (h, w) = (fine.h(), fine.w());
    let (wc,) = (coarse.w(),);
    let d = *tape.shape(fine.features).last().unwrap();
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            idx.push(((y / factor) * wc + (x / factor)) as i64);
        }
    }
    let up = tape.gather_rows(coarse.features, d, &idx, &[h, w, d])?;
    let cat = tape.concat_last(up, fine.features)?;
    let fused = tape.linear(cat, fuse.w, fuse.b)?;
    let occ3 = tape.leaf(crate::encoder::mask_expand_last(&fine.occupancy, d));
    let features = tape.mul(fused, occ3)?;
    Ok(BevMap {
        features,
        occupancy: fine.occupancy.clone(),
        scale: fine.scale,
    })
}

/// Single-scale (one stage at stride 1) or the five-stage ladder at
/// strides 1, 2, 4, 16, 32 with top-down fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneMode {
    SingleScale,
    MultiScale,
}

impl BackboneMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneMode::SingleScale => "single_scale",
            BackboneMode::MultiScale => "multi_scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single_scale" => Ok(BackboneMode::SingleScale),
            "multi_scale" => Ok(BackboneMode::MultiScale),
            _ => Err(Error::Parse(format!("unknown backbone mode '{s}'"))),
        }
    }
}

/// Stride factors of the multi-scale ladder.
pub const MULTI_SCALE_STRIDES: [usize; 5] = [1, 2, 4, 16, 32];
/// Downsample factors stepping between adjacent strides.
pub const MULTI_SCALE_FACTORS: [usize; 4] = [2, 2, 4, 2];

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub d: usize,
    pub heads: usize,
    pub mlp_expansion: usize,
    /// Blocks per stage: 5 entries for multi-scale, 1 for single-scale.
    pub blocks_per_scale: Vec<usize>,
    pub window: usize,
    pub mode: BackboneMode,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let expected = match self.mode {
            BackboneMode::SingleScale => 1,
            BackboneMode::MultiScale => 5,
        };
        if self.blocks_per_scale.len() != expected {
            return Err(Error::Config(format!(
                "{} backbone expects {expected} stage sizes, got {}",
                self.mode.as_str(),
                self.blocks_per_scale.len()
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("backbone window must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stages: Vec<Vec<AttentionBlockParams>>,
    /// Top-down fusion projections (2d -> d), coarsest pair first.
    pub fuse: Vec<LinearParams>,
}

impl BackboneParams {
    pub fn init(config: BackboneConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        for &n in &config.blocks_per_scale {
            let mut blocks = Vec::new();
            for _ in 0..n {
                blocks.push(AttentionBlockParams::init(
                    config.d,
                    config.heads,
                    config.mlp_expansion,
                    rng,
                )?);
            }
            stages.push(blocks);
        }
        let fuse = match config.mode {
            BackboneMode::SingleScale => vec![],
            BackboneMode::MultiScale => (0..4)
                .map(|_| LinearParams::init(config.d * 2, config.d, 0.02, rng))
                .collect(),
        };
        Ok(BackboneParams {
            config,
            stages,
            fuse,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                blk.visit(&format!("{prefix}.s{s}.b{b}"), f);
            }
        }
        for (i, l) in self.fuse.iter().enumerate() {
            l.visit(&format!("{prefix}.fuse{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, blk) in blocks.iter_mut().enumerate() {
                blk.visit_mut(&format!("{prefix}.s{s}.b{b}"), f);
            }
        }
        for (i, l) in self.fuse.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.fuse{i}"), f);
        }
    }
}

pub struct BoundBackbone {
    pub stages: Vec<Vec<BoundBlock>>,
    pub fuse: Vec<BoundLinear>,
    pub config: BackboneConfig,
}

impl BackboneParams {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> BoundBackbone {
        BoundBackbone {
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(s, blocks)| {
                    blocks
                        .iter()
                        .enumerate()
                        .map(|(b, blk)| blk.bind(tape, reg, &format!("{prefix}.s{s}.b{b}")))
                        .collect()
                })
                .collect(),
            fuse: self
                .fuse
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(tape, reg, &format!("{prefix}.fuse{i}")))
                .collect(),
            config: self.config.clone(),
        }
    }
}

/// Run the backbone. Returns the maps the heads read, finest first:
/// stride 1 and stride 2 (fused when multi-scale).
pub fn backbone_forward(
    tape: &mut Tape,
    input: &BevMap,
    params: &BoundBackbone,
) -> Result<Vec<BevMap>> {
    let window = params.config.window;
    match params.config.mode {
        BackboneMode::SingleScale => {
            let mut map = input.clone();
            for blk in &params.stages[0] {
                map = swformer_block(tape, &map, blk, window)?;
            }
            let coarse = downsample(tape, &map, 2)?;
            Ok(vec![map, coarse])
        }
        BackboneMode::MultiScale => {
            let mut outs: Vec<BevMap> = Vec::with_capacity(5);
            let mut map = input.clone();
            for (s, blocks) in params.stages.iter().enumerate() {
                if s > 0 {
                    map = downsample(tape, &map, MULTI_SCALE_FACTORS[s - 1])?;
                }
                for blk in blocks {
                    map = swformer_block(tape, &map, blk, window)?;
                }
                outs.push(map.clone());
            }
            // single top-down fusion chain; the fused stride-2 map both
            // feeds the stride-1 fusion and serves the coarse head
            let mut above = outs[4].clone();
            let mut fused_stride2 = None;
            for s in (0..4).rev() {
                above = upsample_fuse(tape, &above, &outs[s], &params.fuse[s])?;
                if above.scale == 2 {
                    fused_stride2 = Some(above.clone());
                }
            }
            let stride2 = fused_stride2.expect("ladder passes stride 2");
            Ok(vec![above, stride2])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ParamBindings;
    use crate::tensor::finite_diff_grad;

    fn demo_map(tape: &mut Tape, h: usize, w: usize, d: usize, seed: u64) -> BevMap {
        let mut rng = SplitMix64::new(seed);
        let mut feats = Tensor::zeros(&[h, w, d]);
        let mut occ = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                if (x + y) % 3 != 0 {
                    occ.set(&[y, x], 1.0);
                    for c in 0..d {
                        feats.set(&[y, x, c], rng.normal());
                    }
                }
            }
        }
        BevMap {
            features: tape.leaf(feats),
            occupancy: occ,
            scale: 1,
        }
    }

    #[test]
    fn scatter_single_voxel() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(&[1, 3], vec![1., 2., 3.]).unwrap());
        let map = scatter_to_bev(&mut tape, v, &[[0, 0]], 1, (4, 4)).unwrap();
        let f = tape.value(map.features);
        assert_eq!(f.shape(), &[4, 4, 3]);
        assert_eq!(f.at(&[0, 0, 1]), 2.0);
        let nonzero = f.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 3);
        assert_eq!(map.occupancy.at(&[0, 0]), 1.0);
    }

    #[test]
    fn scatter_then_gather_round_trips() {
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(3);
        let v0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = tape.leaf(v0.clone());
        let coords = [[1, 0], [2, 3], [0, 2]];
        let map = scatter_to_bev(&mut tape, v, &coords, 3, (4, 4)).unwrap();
        for (slot, c) in coords.iter().enumerate() {
            for k in 0..4 {
                assert_eq!(
                    tape.value(map.features).at(&[c[1], c[0], k]),
                    v0.at(&[slot, k])
                );
            }
        }
    }

    #[test]
    fn scatter_rejects_duplicates() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(scatter_to_bev(&mut tape, v, &[[1, 1], [1, 1]], 2, (4, 4)).is_err());
    }

    #[test]
    fn scatter_gradient_check() {
        let mut rng = SplitMix64::new(4);
        let v0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.param(x);
            let map = scatter_to_bev(&mut tape, v, &[[0, 1], [3, 2]], 2, (4, 4)).unwrap();
            let sq = tape.mul(map.features, map.features).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            (tape.value(loss).data()[0], tape.grad_tensor(v))
        };
        let (_, g) = run(&v0);
        let fd = finite_diff_grad(|x| run(x).0, &v0, 1e-6).unwrap();
        let g = g.unwrap();
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn partition_merge_is_identity() {
        let mut tape = Tape::new();
        let map = demo_map(&mut tape, 6, 6, 4, 9); // 6 not divisible by 4: exercises padding
        let before = tape.value(map.features).clone();
        let (tokens, _, layout) = window_partition(&mut tape, &map, 4).unwrap();
        let back = window_merge(&mut tape, tokens, &layout).unwrap();
        assert_eq!(before.data(), tape.value(back).data());
    }

    #[test]
    fn four_by_four_window_two_gives_four_windows() {
        let mut tape = Tape::new();
        let map = demo_map(&mut tape, 4, 4, 2, 10);
        let (tokens, mask, layout) = window_partition(&mut tape, &map, 2).unwrap();
        assert_eq!(layout.num_windows(), 4);
        assert_eq!(tape.shape(tokens), &[4, 4, 2]);
        assert_eq!(mask.shape(), &[4, 4]);
    }

    #[test]
    fn block_keeps_empty_map_zero() {
        let mut tape = Tape::new();
        let map = BevMap {
            features: tape.leaf(Tensor::zeros(&[4, 4, 8])),
            occupancy: Tensor::zeros(&[4, 4]),
            scale: 1,
        };
        let mut rng = SplitMix64::new(11);
        let blk = AttentionBlockParams::init(8, 2, 2, &mut rng).unwrap();
        let mut reg = ParamBindings::default();
        let bound = blk.bind(&mut tape, &mut reg, "b");
        let out = swformer_block(&mut tape, &map, &bound, 2).unwrap();
        assert!(tape.value(out.features).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_single_token_is_mlp_path() {
        // one occupied cell: attention over a single key is the value
        // projection path; verify against the cross-block on that token
        let mut rng = SplitMix64::new(12);
        let blk = AttentionBlockParams::init(8, 2, 2, &mut rng).unwrap();
        let token = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);

        let mut tape = Tape::new();
        let mut feats = Tensor::zeros(&[4, 4, 8]);
        for c in 0..8 {
            feats.set(&[1, 2, c], token.at(&[0, 0, c]));
        }
        let mut occ = Tensor::zeros(&[4, 4]);
        occ.set(&[1, 2], 1.0);
        let map = BevMap {
            features: tape.leaf(feats),
            occupancy: occ,
            scale: 1,
        };
        let mut reg = ParamBindings::default();
        let bound = blk.bind(&mut tape, &mut reg, "b");
        let out = swformer_block(&mut tape, &map, &bound, 2).unwrap();

        let mut tape2 = Tape::new();
        let mut reg2 = ParamBindings::default();
        let bound2 = blk.bind(&mut tape2, &mut reg2, "b");
        let t = tape2.leaf(token.clone());
        let mask = Tensor::full(&[1, 1], 1.0);
        let expect = crate::encoder::self_attention_block(&mut tape2, t, &mask, &bound2).unwrap();

        for c in 0..8 {
            let a = tape.value(out.features).at(&[1, 2, c]);
            let b = tape2.value(expect).at(&[0, 0, c]);
            assert!((a - b).abs() < 1e-12, "channel {c}: {a} vs {b}");
        }
    }

    #[test]
    fn block_output_independent_of_pad_values() {
        // poke values into unoccupied cells; masked attention + re-zero
        // must erase any influence
        let mut rng = SplitMix64::new(13);
        let blk = AttentionBlockParams::init(8, 2, 2, &mut rng).unwrap();
        let run = |poison: bool| {
            let mut tape = Tape::new();
            let mut map = demo_map(&mut tape, 5, 5, 8, 14); // padding via 5 % 2 != 0
            if poison {
                let mut f = tape.value(map.features).clone();
                for y in 0..5 {
                    for x in 0..5 {
                        if map.occupancy.at(&[y, x]) == 0.0 {
                            for c in 0..8 {
                                f.set(&[y, x, c], 77.7);
                            }
                        }
                    }
                }
                map.features = tape.leaf(f);
            }
            let mut reg = ParamBindings::default();
            let bound = blk.bind(&mut tape, &mut reg, "b");
            let out = swformer_block(&mut tape, &map, &bound, 2).unwrap();
            tape.value(out.features).clone()
        };
        let clean = run(false);
        let poisoned = run(true);
        assert_eq!(clean.data(), poisoned.data());
    }

    #[test]
    fn block_gradient_check_tiny_map() {
        let mut rng = SplitMix64::new(15);
        let blk = AttentionBlockParams::init(8, 2, 2, &mut rng).unwrap();
        let loss_of = |p: &AttentionBlockParams| {
            let mut tape = Tape::new();
            let map = demo_map(&mut tape, 4, 4, 8, 16);
            let mut reg = ParamBindings::default();
            let bound = p.bind(&mut tape, &mut reg, "b");
            let out = swformer_block(&mut tape, &map, &bound, 2).unwrap();
            let sq = tape.mul(out.features, out.features).unwrap();
            let loss = tape.sum(sq);
            tape.value(loss).data()[0]
        };

        let mut tape = Tape::new();
        let map = demo_map(&mut tape, 4, 4, 8, 16);
        let mut reg = ParamBindings::default();
        let bound = blk.bind(&mut tape, &mut reg, "b");
        let out = swformer_block(&mut tape, &map, &bound, 2).unwrap();
        let sq = tape.mul(out.features, out.features).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();

        for (name, var) in &reg.entries {
            let Some(got) = tape.grad_tensor(*var) else {
                panic!("{name} has no grad");
            };
            let mut base = None;
            blk.visit("b", &mut |n, t| {
                if n == name {
                    base = Some(t.clone());
                }
            });
            let base = base.unwrap();
            let fd = finite_diff_grad(
                |x| {
                    let mut probe = blk.clone();
                    probe.visit_mut("b", &mut |n, t| {
                        if n == name {
                            *t = x.clone();
                        }
                    });
                    loss_of(&probe)
                },
                &base,
                1e-5,
            )
            .unwrap();
            for (i, (a, b)) in got.data().iter().zip(fd.data()).enumerate() {
                let denom = a.abs().max(b.abs()).max(1e-3);
                assert!((a - b).abs() / denom < 1e-4, "{name}[{i}]: {a} vs {b}");
            }
        }
    }

    #[test]
    fn downsample_constant_map_stays_constant() {
        let mut tape = Tape::new();
        let map = BevMap {
            features: tape.leaf(Tensor::full(&[4, 4, 3], 2.5)),
            occupancy: Tensor::full(&[4, 4], 1.0),
            scale: 1,
        };
        let coarse = downsample(&mut tape, &map, 2).unwrap();
        assert_eq!(coarse.scale, 2);
        assert!(tape
            .value(coarse.features)
            .data()
            .iter()
            .all(|&v| v == 2.5));
        assert!(coarse.occupancy.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn downsample_occupancy_is_or() {
        let mut tape = Tape::new();
        let mut occ = Tensor::zeros(&[4, 4]);
        occ.set(&[3, 3], 1.0); // single occupied fine cell
        let map = BevMap {
            features: tape.leaf(Tensor::zeros(&[4, 4, 2])),
            occupancy: occ,
            scale: 1,
        };
        let coarse = downsample(&mut tape, &map, 2).unwrap();
        assert_eq!(coarse.occupancy.at(&[1, 1]), 1.0);
        assert_eq!(coarse.occupancy.at(&[0, 0]), 0.0);
    }

    #[test]
    fn downsample_takes_max_over_occupied_only() {
        let mut tape = Tape::new();
        let mut feats = Tensor::zeros(&[2, 2, 1]);
        feats.set(&[0, 0, 0], -3.0);
        feats.set(&[0, 1, 0], 99.0); // unoccupied, must not leak
        let mut occ = Tensor::zeros(&[2, 2]);
        occ.set(&[0, 0], 1.0);
        let map = BevMap {
            features: tape.leaf(feats),
            occupancy: occ,
            scale: 1,
        };
        let coarse = downsample(&mut tape, &map, 2).unwrap();
        assert_eq!(tape.value(coarse.features).at(&[0, 0, 0]), -3.0);
    }

    #[test]
    fn upsample_fuse_shapes_round_trip() {
        let mut tape = Tape::new();
        let fine = demo_map(&mut tape, 6, 6, 4, 17);
        let coarse = downsample(&mut tape, &fine, 2).unwrap();
        let mut rng = SplitMix64::new(18);
        let fuse = LinearParams::init(8, 4, 0.02, &mut rng);
        let mut reg = ParamBindings::default();
        let bound = fuse.bind(&mut tape, &mut reg, "fuse");
        let fused = upsample_fuse(&mut tape, &coarse, &fine, &bound).unwrap();
        assert_eq!(tape.shape(fused.features), tape.shape(fine.features));
        assert_eq!(fused.scale, 1);
        // unoccupied cells stay zero
        for y in 0..6 {
            for x in 0..6 {
                if fine.occupancy.at(&[y, x]) == 0.0 {
                    for c in 0..4 {
                        assert_eq!(tape.value(fused.features).at(&[y, x, c]), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn multi_scale_backbone_runs_on_tiny_grid() {
        let mut rng = SplitMix64::new(19);
        let cfg = BackboneConfig {
            d: 8,
            heads: 2,
            mlp_expansion: 2,
            blocks_per_scale: vec![1, 1, 1, 1, 1],
            window: 2,
            mode: BackboneMode::MultiScale,
        };
        let params = BackboneParams::init(cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let input = demo_map(&mut tape, 8, 8, 8, 20);
        let mut reg = ParamBindings::default();
        let bound = params.bind(&mut tape, &mut reg, "bb");
        let outs = backbone_forward(&mut tape, &input, &bound).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[0].scale, 1);
        assert_eq!(outs[1].scale, 2);
        assert_eq!(tape.shape(outs[0].features), &[8, 8, 8]);
        assert_eq!(tape.shape(outs[1].features), &[4, 4, 8]);
        // zero-preservation survives the whole ladder
        for y in 0..8 {
            for x in 0..8 {
                if input.occupancy.at(&[y, x]) == 0.0 {
                    for c in 0..8 {
                        assert_eq!(tape.value(outs[0].features).at(&[y, x, c]), 0.0);
                    }
                }
            }
        }
    }
}

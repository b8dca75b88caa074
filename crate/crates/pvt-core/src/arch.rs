//! Architecture configuration space: the point-encoder ladder, the voxel
//! backbone/head search domains, uniform sampling, flat-text
//! serialization, and the analytic FLOP/parameter counters.
//!
//! FLOP counting rule: 2·m·k·n per matrix product, attention QKᵀ and AV
//! products included, elementwise/normalization ops excluded. This is the
//! same rule the tape's instrumented counter applies, so analytic and
//! measured counts must agree exactly on any forward pass.

use std::collections::BTreeMap;

use crate::backbone::BackboneMode;
use crate::encoder::{Aggregation, PvtDepth, QueryMode};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, SplitMix64};

// Search domains.
pub const POINT_FC_CHANNELS: [usize; 4] = [128, 192, 256, 320];
pub const POINT_FC_DEPTHS: [usize; 3] = [2, 5, 7];
pub const POINT_PVT_DEPTHS: [PvtDepth; 3] = [PvtDepth::Fc, PvtDepth::FcPv, PvtDepth::FcPpPv];
pub const VOXEL_TFM_CHANNELS: [usize; 3] = [128, 192, 256];
pub const VOXEL_TFM_HEADS: [usize; 3] = [4, 8, 16];
pub const VOXEL_MLP_EXPANSIONS: [usize; 2] = [2, 4];
pub const VOXEL_BLOCK_COUNTS: [usize; 4] = [2, 3, 4, 6];
pub const HEAD_BLOCK_COUNTS: [usize; 4] = [1, 2, 4, 6];
/// Scale tags of the five multi-scale stages (base cell 0.32 m).
pub const SCALE_TAGS: [&str; 5] = ["0p32", "0p64", "1p28", "5p12", "10p24"];

/// The point architecture arm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PointArch {
    /// Shared FC stack + pooling; `fc_channel` is the first-layer width,
    /// later layers run at the output width.
    PointNet {
        fc_channel: usize,
        depth: usize,
        aggregation: Aggregation,
    },
    /// Attention aggregation at the output width.
    Pvt { depth: PvtDepth, query_mode: QueryMode },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneArch {
    pub tfm_channel: usize,
    pub tfm_heads: usize,
    pub mlp_expansion: usize,
    /// 5 stage sizes (multi-scale) or 1 (single-scale).
    pub blocks: Vec<usize>,
    pub mode: BackboneMode,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadArch {
    pub tfm_channel: usize,
    pub tfm_heads: usize,
    pub mlp_expansion: usize,
    pub vehicle_blocks: usize,
    pub pedestrian_blocks: usize,
}

/// One complete architecture draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub point: PointArch,
    /// Output width of the point architecture.
    pub point_out: usize,
    pub point_heads: usize,
    pub point_expansion: usize,
    pub backbone: BackboneArch,
    pub head: HeadArch,
}

impl ArchSpec {
    /// Reference configuration: 2-layer PointNet at width 128 feeding the
    /// multi-scale [2, 3, 2, 3, 2] backbone.
    pub fn reference() -> Self {
        ArchSpec {
            point: PointArch::PointNet {
                fc_channel: 128,
                depth: 2,
                aggregation: Aggregation::Max,
            },
            point_out: 128,
            point_heads: 8,
            point_expansion: 2,
            backbone: BackboneArch {
                tfm_channel: 128,
                tfm_heads: 8,
                mlp_expansion: 2,
                blocks: vec![2, 3, 2, 3, 2],
                mode: BackboneMode::MultiScale,
                window: 4,
            },
            head: HeadArch {
                tfm_channel: 128,
                tfm_heads: 8,
                mlp_expansion: 2,
                vehicle_blocks: 1,
                pedestrian_blocks: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.backbone.mode {
            BackboneMode::SingleScale => 1,
            BackboneMode::MultiScale => 5,
        };
        if self.backbone.blocks.len() != expected {
            return Err(Error::Config(format!(
                "{} backbone expects {expected} stage sizes, got {}",
                self.backbone.mode.as_str(),
                self.backbone.blocks.len()
            )));
        }
        for (name, d, h) in [
            ("point", self.point_out, self.point_heads),
            ("backbone", self.backbone.tfm_channel, self.backbone.tfm_heads),
            ("head", self.head.tfm_channel, self.head.tfm_heads),
        ] {
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::Config(format!(
                    "{name} width {d} not divisible by {h} heads"
                )));
            }
        }
        if let PointArch::PointNet { depth, fc_channel, .. } = &self.point {
            if *depth == 0 || *fc_channel == 0 {
                return Err(Error::Config("pointnet depth/channel must be >= 1".into()));
            }
        }
        if self.backbone.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the voxel parameters lie in the search-table domains.
    pub fn voxel_in_search_domain(&self) -> bool {
        VOXEL_TFM_CHANNELS.contains(&self.backbone.tfm_channel)
            && VOXEL_TFM_HEADS.contains(&self.backbone.tfm_heads)
            && VOXEL_MLP_EXPANSIONS.contains(&self.backbone.mlp_expansion)
            && self.backbone.mode == BackboneMode::MultiScale
            && self.backbone.blocks.len() == 5
            && self
                .backbone
                .blocks
                .iter()
                .all(|b| VOXEL_BLOCK_COUNTS.contains(b))
            && VOXEL_TFM_CHANNELS.contains(&self.head.tfm_channel)
            && VOXEL_TFM_HEADS.contains(&self.head.tfm_heads)
            && VOXEL_MLP_EXPANSIONS.contains(&self.head.mlp_expansion)
            && HEAD_BLOCK_COUNTS.contains(&self.head.vehicle_blocks)
            && HEAD_BLOCK_COUNTS.contains(&self.head.pedestrian_blocks)
    }

    /// PointNet layer widths implied by the point arm.
    pub fn pointnet_widths(&self) -> Option<Vec<usize>> {
        match &self.point {
            PointArch::PointNet { fc_channel, depth, .. } => {
                let mut w = vec![*fc_channel];
                w.extend(std::iter::repeat(self.point_out).take(depth - 1));
                Some(w)
            }
            PointArch::Pvt { .. } => None,
        }
    }

    /// Flat key=value serialization, keys sorted.
    pub fn to_kv(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        match &self.point {
            PointArch::PointNet {
                fc_channel,
                depth,
                aggregation,
            } => {
                kv.insert("point.kind".into(), "pointnet".into());
                kv.insert("point.fc_channel".into(), fc_channel.to_string());
                kv.insert("point.fc_depth".into(), depth.to_string());
                kv.insert(
                    "point.aggregation".into(),
                    match aggregation {
                        Aggregation::Max => "max".into(),
                        Aggregation::Mean => "mean".into(),
                    },
                );
            }
            PointArch::Pvt { depth, query_mode } => {
                kv.insert("point.kind".into(), "pvt".into());
                kv.insert("point.depth".into(), depth.as_str().into());
                kv.insert("point.query_mode".into(), query_mode.as_str().into());
            }
        }
        kv.insert("point.out".into(), self.point_out.to_string());
        kv.insert("point.heads".into(), self.point_heads.to_string());
        kv.insert("point.expansion".into(), self.point_expansion.to_string());
        kv.insert(
            "backbone.mode".into(),
            self.backbone.mode.as_str().to_string(),
        );
        kv.insert(
            "backbone.tfm_channel".into(),
            self.backbone.tfm_channel.to_string(),
        );
        kv.insert(
            "backbone.tfm_heads".into(),
            self.backbone.tfm_heads.to_string(),
        );
        kv.insert(
            "backbone.mlp_expansion".into(),
            self.backbone.mlp_expansion.to_string(),
        );
        kv.insert("backbone.window".into(), self.backbone.window.to_string());
        match self.backbone.mode {
            BackboneMode::SingleScale => {
                kv.insert(
                    "backbone.blocks.single".into(),
                    self.backbone.blocks[0].to_string(),
                );
            }
            BackboneMode::MultiScale => {
                for (tag, b) in SCALE_TAGS.iter().zip(&self.backbone.blocks) {
                    kv.insert(format!("backbone.blocks.{tag}"), b.to_string());
                }
            }
        }
        kv.insert("head.tfm_channel".into(), self.head.tfm_channel.to_string());
        kv.insert("head.tfm_heads".into(), self.head.tfm_heads.to_string());
        kv.insert(
            "head.mlp_expansion".into(),
            self.head.mlp_expansion.to_string(),
        );
        kv.insert(
            "head.vehicle.blocks".into(),
            self.head.vehicle_blocks.to_string(),
        );
        kv.insert(
            "head.pedestrian.blocks".into(),
            self.head.pedestrian_blocks.to_string(),
        );
        kv.iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    /// Parse the [`ArchSpec::to_kv`] format (whitespace lines and `#`
    /// comments ignored).
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got '{line}'")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("missing arch key '{k}'")))
        };
        let get_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad value for '{k}': {e}")))
        };
        let point = match get("point.kind")? {
            "pointnet" => PointArch::PointNet {
                fc_channel: get_usize("point.fc_channel")?,
                depth: get_usize("point.fc_depth")?,
                aggregation: match get("point.aggregation")? {
                    "max" => Aggregation::Max,
                    "mean" => Aggregation::Mean,
                    other => {
                        return Err(Error::Parse(format!("unknown aggregation '{other}'")))
                    }
                },
            },
            "pvt" => PointArch::Pvt {
                depth: PvtDepth::parse(get("point.depth")?)?,
                query_mode: QueryMode::parse(get("point.query_mode")?)?,
            },
            other => return Err(Error::Parse(format!("unknown point kind '{other}'"))),
        };
        let mode = BackboneMode::parse(get("backbone.mode")?)?;
        let blocks = match mode {
            BackboneMode::SingleScale => vec![get_usize("backbone.blocks.single")?],
            BackboneMode::MultiScale => SCALE_TAGS
                .iter()
                .map(|tag| get_usize(&format!("backbone.blocks.{tag}")))
                .collect::<Result<Vec<_>>>()?,
        };
        let spec = ArchSpec {
            point,
            point_out: get_usize("point.out")?,
            point_heads: get_usize("point.heads")?,
            point_expansion: get_usize("point.expansion")?,
            backbone: BackboneArch {
                tfm_channel: get_usize("backbone.tfm_channel")?,
                tfm_heads: get_usize("backbone.tfm_heads")?,
                mlp_expansion: get_usize("backbone.mlp_expansion")?,
                blocks,
                mode,
                window: get_usize("backbone.window")?,
            },
            head: HeadArch {
                tfm_channel: get_usize("head.tfm_channel")?,
                tfm_heads: get_usize("head.tfm_heads")?,
                mlp_expansion: get_usize("head.mlp_expansion")?,
                vehicle_blocks: get_usize("head.vehicle.blocks")?,
                pedestrian_blocks: get_usize("head.pedestrian.blocks")?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Stable FNV-1a hash of the serialized form.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_kv().as_bytes())
    }
}

/// The 15 point-arm variants (4 channels x 3 depths for the FC stack
/// plus the 3-step attention ladder).
pub fn enumerate_point_space() -> Vec<PointArch> {
    let mut out = Vec::with_capacity(15);
    for &c in &POINT_FC_CHANNELS {
        for &d in &POINT_FC_DEPTHS {
            out.push(PointArch::PointNet {
                fc_channel: c,
                depth: d,
                aggregation: Aggregation::Max,
            });
        }
    }
    for &d in &POINT_PVT_DEPTHS {
        out.push(PointArch::Pvt {
            depth: d,
            query_mode: QueryMode::Residual,
        });
    }
    out
}

/// Uniform draw from the point space (base spec otherwise reference).
pub fn sample_point_arch(rng: &mut SplitMix64) -> ArchSpec {
    let variants = enumerate_point_space();
    let point = variants[rng.uniform_usize(0, variants.len() - 1)].clone();
    ArchSpec {
        point,
        ..ArchSpec::reference()
    }
}

/// Uniform draw from the voxel search space (backbone + head dims), with
/// the fixed 2-layer PointNet point arm.
pub fn sample_voxel_arch(rng: &mut SplitMix64) -> ArchSpec {
    let blocks: Vec<usize> = (0..5)
        .map(|_| *rng.choose(&VOXEL_BLOCK_COUNTS))
        .collect();
    ArchSpec {
        point: PointArch::PointNet {
            fc_channel: 128,
            depth: 2,
            aggregation: Aggregation::Max,
        },
        point_out: 128,
        point_heads: 8,
        point_expansion: 2,
        backbone: BackboneArch {
            tfm_channel: *rng.choose(&VOXEL_TFM_CHANNELS),
            tfm_heads: *rng.choose(&VOXEL_TFM_HEADS),
            mlp_expansion: *rng.choose(&VOXEL_MLP_EXPANSIONS),
            blocks,
            mode: BackboneMode::MultiScale,
            window: 4,
        },
        head: HeadArch {
            tfm_channel: *rng.choose(&VOXEL_TFM_CHANNELS),
            tfm_heads: *rng.choose(&VOXEL_TFM_HEADS),
            mlp_expansion: *rng.choose(&VOXEL_MLP_EXPANSIONS),
            vehicle_blocks: *rng.choose(&HEAD_BLOCK_COUNTS),
            pedestrian_blocks: *rng.choose(&HEAD_BLOCK_COUNTS),
        },
    }
}

/// Shape of one scene as the FLOP counter sees it.
#[derive(Debug, Clone, Copy)]
pub struct SceneShape {
    /// Occupied pillars.
    pub n_voxels: usize,
    /// Point cap per pillar (static layout).
    pub cap_points: usize,
    /// Raw per-point feature count.
    pub feat_dim: usize,
    /// Base BEV grid (W, H).
    pub grid: (usize, usize),
}

fn transformer_block_flops(tokens_padded: u128, windows: u128, win_tokens: u128, d: u128, r: u128) -> u128 {
    // q, k, v, out projections
    let proj = 4 * 2 * tokens_padded * d * d;
    // QK^T and AV, once per window
    let attn = 2 * 2 * windows * win_tokens * win_tokens * d;
    // two MLP linears
    let mlp = 2 * 2 * tokens_padded * d * (r * d);
    proj + attn + mlp
}

fn cross_block_flops(n: u128, tk: u128, d: u128, r: u128) -> u128 {
    // q proj on the single query, k/v on the tokens, out proj on the query
    let proj = 2 * n * d * d + 2 * 2 * n * tk * d * d + 2 * n * d * d;
    // scores + AV with Tq = 1
    let attn = 2 * 2 * n * tk * d;
    // MLP on the query token
    let mlp = 2 * 2 * n * d * (r * d);
    proj + attn + mlp
}

/// Padded window geometry of one map.
fn window_geom(h: usize, w: usize, window: usize) -> (u128, u128, u128) {
    let wins = (h.div_ceil(window) * w.div_ceil(window)) as u128;
    let win_tokens = (window * window) as u128;
    (wins * win_tokens, wins, win_tokens)
}

/// Dims of each backbone stage map for a base grid.
pub fn stage_dims(mode: BackboneMode, grid: (usize, usize)) -> Vec<(usize, usize)> {
    let (w, h) = grid;
    match mode {
        BackboneMode::SingleScale => vec![(h, w)],
        BackboneMode::MultiScale => {
            let mut dims = vec![(h, w)];
            for f in crate::backbone::MULTI_SCALE_FACTORS {
                let (ph, pw) = *dims.last().unwrap();
                dims.push((ph.div_ceil(f), pw.div_ceil(f)));
            }
            dims
        }
    }
}

/// Analytic FLOPs of one forward pass on a scene of the given shape.
/// Exactly mirrors the recorded matmuls: 2·m·k·n per product, attention
/// QK/AV included, elementwise and normalization ops excluded.
pub fn count_flops(spec: &ArchSpec, shape: &SceneShape) -> Result<u128> {
    spec.validate()?;
    let n = shape.n_voxels as u128;
    let p = shape.cap_points as u128;
    let f = shape.feat_dim as u128;
    let d_pt = spec.point_out as u128;
    let r_pt = spec.point_expansion as u128;
    let mut flops: u128 = 0;

    // point architecture over n pillars of p padded slots
    match &spec.point {
        PointArch::PointNet { .. } => {
            let widths = spec.pointnet_widths().unwrap();
            let mut fan_in = f;
            for wd in widths {
                flops += 2 * n * p * fan_in * wd as u128;
                fan_in = wd as u128;
            }
        }
        PointArch::Pvt { depth, .. } => {
            flops += 2 * n * p * f * d_pt;
            if *depth == PvtDepth::FcPpPv {
                // self-attention among the p tokens of each pillar
                flops += transformer_block_flops(n * p, n, p, d_pt, r_pt);
            }
            if *depth != PvtDepth::Fc {
                flops += cross_block_flops(n, p, d_pt, r_pt);
            }
        }
    }

    // adapter from point width onto backbone width, applied on the dense
    // stride-1 grid right after scatter
    let d_bb = spec.backbone.tfm_channel as u128;
    if spec.point_out != spec.backbone.tfm_channel {
        let (w0, h0) = shape.grid;
        flops += 2 * (w0 * h0) as u128 * d_pt * d_bb;
    }

    // backbone stages
    let dims = stage_dims(spec.backbone.mode, shape.grid);
    let r_bb = spec.backbone.mlp_expansion as u128;
    for (s, &(h, w)) in dims.iter().enumerate() {
        let (tokens, wins, wt) = window_geom(h, w, spec.backbone.window);
        flops += spec.backbone.blocks[s] as u128
            * transformer_block_flops(tokens, wins, wt, d_bb, r_bb);
    }
    // top-down fusion linears (multi-scale): 2d -> d at each finer scale
    if spec.backbone.mode == BackboneMode::MultiScale {
        for &(h, w) in dims.iter().take(4) {
            flops += 2 * (h * w) as u128 * (2 * d_bb) * d_bb;
        }
    }

    // heads: vehicle at stride 2, pedestrian at stride 1
    let d_hd = spec.head.tfm_channel as u128;
    let r_hd = spec.head.mlp_expansion as u128;
    let (w0, h0) = shape.grid;
    let head_dims = [(h0.div_ceil(2), w0.div_ceil(2)), (h0, w0)];
    let head_blocks = [spec.head.vehicle_blocks, spec.head.pedestrian_blocks];
    for (&(h, w), &blocks) in head_dims.iter().zip(&head_blocks) {
        let cells = (h * w) as u128;
        if spec.backbone.tfm_channel != spec.head.tfm_channel {
            flops += 2 * cells * d_bb * d_hd;
        }
        let (tokens, wins, wt) = window_geom(h, w, spec.backbone.window);
        flops += blocks as u128 * transformer_block_flops(tokens, wins, wt, d_hd, r_hd);
        // heatmap, box, segmentation projections
        flops += 2 * cells * d_hd * (1 + 5 + 1);
    }

    Ok(flops)
}

/// Analytic learnable-parameter count, mirroring the initializers.
pub fn count_params(spec: &ArchSpec, feat_dim: usize) -> Result<u128> {
    spec.validate()?;
    let f = feat_dim as u128;
    let d_pt = spec.point_out as u128;
    let r_pt = spec.point_expansion as u128;
    let lin = |k: u128, n: u128| k * n + n;
    let block = |d: u128, r: u128| {
        // q, k, v, out projections + 2 MLP linears + 2 norm affines
        4 * lin(d, d) + lin(d, r * d) + lin(r * d, d) + 2 * (2 * d)
    };
    let mut total: u128 = 0;
    match &spec.point {
        PointArch::PointNet { .. } => {
            let mut fan_in = f;
            for wd in spec.pointnet_widths().unwrap() {
                total += lin(fan_in, wd as u128);
                fan_in = wd as u128;
            }
        }
        PointArch::Pvt { depth, .. } => {
            total += lin(f, d_pt);
            if *depth == PvtDepth::FcPpPv {
                total += block(d_pt, r_pt);
            }
            if *depth != PvtDepth::Fc {
                total += block(d_pt, r_pt);
            }
            total += d_pt; // latent query
        }
    }
    let d_bb = spec.backbone.tfm_channel as u128;
    if spec.point_out != spec.backbone.tfm_channel {
        total += lin(d_pt, d_bb);
    }
    let r_bb = spec.backbone.mlp_expansion as u128;
    total += spec.backbone.blocks.iter().map(|&b| b as u128).sum::<u128>() * block(d_bb, r_bb);
    if spec.backbone.mode == BackboneMode::MultiScale {
        total += 4 * lin(2 * d_bb, d_bb);
    }
    let d_hd = spec.head.tfm_channel as u128;
    let r_hd = spec.head.mlp_expansion as u128;
    for blocks in [spec.head.vehicle_blocks, spec.head.pedestrian_blocks] {
        if spec.backbone.tfm_channel != spec.head.tfm_channel {
            total += lin(d_bb, d_hd);
        }
        total += blocks as u128 * block(d_hd, r_hd);
        total += lin(d_hd, 1) + lin(d_hd, 5) + lin(d_hd, 1);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_shape() -> SceneShape {
        SceneShape {
            n_voxels: 10,
            cap_points: 8,
            feat_dim: 4,
            grid: (8, 8),
        }
    }

    #[test]
    fn point_space_has_fifteen_variants() {
        let v = enumerate_point_space();
        assert_eq!(v.len(), 15);
        let pn: Vec<_> = v
            .iter()
            .filter_map(|p| match p {
                PointArch::PointNet { fc_channel, depth, .. } => Some((*fc_channel, *depth)),
                _ => None,
            })
            .collect();
        assert_eq!(pn.len(), 12);
        for &c in &POINT_FC_CHANNELS {
            for &d in &POINT_FC_DEPTHS {
                assert!(pn.contains(&(c, d)), "missing pointnet ({c}, {d})");
            }
        }
        let pvt: Vec<_> = v
            .iter()
            .filter_map(|p| match p {
                PointArch::Pvt { depth, .. } => Some(*depth),
                _ => None,
            })
            .collect();
        assert_eq!(pvt, POINT_PVT_DEPTHS.to_vec());
    }

    #[test]
    fn sampling_is_seed_reproducible() {
        let draw = |seed: u64| {
            let mut rng = SplitMix64::derive(seed, "arch");
            (0..5).map(|_| sample_voxel_arch(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn sampled_voxel_archs_stay_in_domain() {
        let mut rng = SplitMix64::new(12);
        for _ in 0..50 {
            let s = sample_voxel_arch(&mut rng);
            assert!(s.voxel_in_search_domain());
            s.validate().unwrap();
        }
    }

    #[test]
    fn kv_round_trip() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..10 {
            let s = sample_voxel_arch(&mut rng);
            let text = s.to_kv();
            let back = ArchSpec::from_kv(&text).unwrap();
            assert_eq!(s, back);
            assert_eq!(s.hash(), back.hash());
        }
        // spec'd key names present
        let s = ArchSpec {
            point: PointArch::Pvt {
                depth: PvtDepth::FcPpPv,
                query_mode: QueryMode::Residual,
            },
            ..ArchSpec::reference()
        };
        let text = s.to_kv();
        assert!(text.contains("backbone.tfm_channel=128"));
        assert!(text.contains("backbone.blocks.0p32=2"));
        assert!(text.contains("head.vehicle.blocks=1"));
        assert!(text.contains("point.depth=FC-PP-PV"));
    }

    #[test]
    fn single_linear_flop_formula() {
        // one linear k=2 -> n=3 on a single token: 2*1*2*3 = 12
        let spec = ArchSpec {
            point: PointArch::PointNet {
                fc_channel: 3,
                depth: 1,
                aggregation: Aggregation::Max,
            },
            point_out: 3,
            point_heads: 1,
            point_expansion: 2,
            backbone: BackboneArch {
                tfm_channel: 3,
                tfm_heads: 1,
                mlp_expansion: 2,
                blocks: vec![0],
                mode: BackboneMode::SingleScale,
                window: 1,
            },
            head: HeadArch {
                tfm_channel: 3,
                tfm_heads: 1,
                mlp_expansion: 2,
                vehicle_blocks: 0,
                pedestrian_blocks: 0,
            },
        };
        let shape = SceneShape {
            n_voxels: 1,
            cap_points: 1,
            feat_dim: 2,
            grid: (1, 1),
        };
        let total = count_flops(&spec, &shape).unwrap();
        // encoder linear (12) + head projections at both strides
        let head_proj = 2 * 2 * 1 * 3 * 7;
        assert_eq!(total, 12 + head_proj);
    }

    #[test]
    fn flops_additive_in_block_count() {
        let shape = tiny_shape();
        let base = ArchSpec::reference();
        let f0 = count_flops(&base, &shape).unwrap();
        let mut plus = base.clone();
        plus.backbone.blocks[2] += 1;
        let f1 = count_flops(&plus, &shape).unwrap();
        let mut plus2 = plus.clone();
        plus2.backbone.blocks[2] += 1;
        let f2 = count_flops(&plus2, &shape).unwrap();
        assert!(f1 > f0);
        assert_eq!(f2 - f1, f1 - f0, "per-block cost must be constant");
    }

    #[test]
    fn flops_and_params_monotone_in_each_dimension() {
        let shape = tiny_shape();
        let base = ArchSpec::reference();
        let f_base = count_flops(&base, &shape).unwrap();
        let p_base = count_params(&base, 4).unwrap();

        let mut variants: Vec<ArchSpec> = Vec::new();
        for &c in &VOXEL_TFM_CHANNELS[1..] {
            let mut s = base.clone();
            s.backbone.tfm_channel = c;
            variants.push(s);
        }
        for &h in &VOXEL_TFM_HEADS[1..] {
            let mut s = base.clone();
            s.backbone.tfm_heads = h;
            variants.push(s);
        }
        for &e in &VOXEL_MLP_EXPANSIONS[1..] {
            let mut s = base.clone();
            s.backbone.mlp_expansion = e;
            variants.push(s);
        }
        for i in 0..5 {
            let mut s = base.clone();
            s.backbone.blocks[i] = 6;
            variants.push(s);
        }
        for &b in &HEAD_BLOCK_COUNTS[1..] {
            let mut s = base.clone();
            s.head.vehicle_blocks = b;
            variants.push(s);
            let mut s = base.clone();
            s.head.pedestrian_blocks = b;
            variants.push(s);
        }
        for v in variants {
            assert!(
                count_flops(&v, &shape).unwrap() >= f_base,
                "flops must not decrease: {v:?}"
            );
            assert!(
                count_params(&v, 4).unwrap() >= p_base,
                "params must not decrease: {v:?}"
            );
        }
    }
}

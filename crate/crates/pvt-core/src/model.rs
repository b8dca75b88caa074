//! Full detector assembly: point encoder -> BEV scatter -> backbone ->
//! per-class heads, with loss computation, decoding and evaluation
//! helpers shared by the training harness and the test suites.

use std::collections::BTreeMap;

use crate::arch::{ArchSpec, PointArch};
use crate::backbone::{
    backbone_forward, decode_boxes, detection_heads, scatter_to_bev, total_loss, BackboneConfig,
    BackboneParams, BevMap, DetectionOutput, HeadConfig, HeadsParams, LossBreakdown, LossWeights,
};
use crate::encoder::{
    pointnet_encode, pvt_encode, BoundLinear, BoundPointNet, BoundPvt, LinearParams,
    ParamBindings, PointNetParams, PvtParams,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scenes::{
    evaluate_ap, generate_scene, heading_mae, rasterize_targets, Box2D, RasterGrid,
    SceneGenConfig, SceneTargets, ScoredBox, NUM_CLASSES,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::voxel::{fixed_voxelize, FixedVoxelBatch, PillarGridConfig, PointCloud};

/// Everything a run needs besides the architecture itself.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub scene: SceneGenConfig,
    pub grid: PillarGridConfig,
    pub loss_weights: LossWeights,
    pub score_threshold: f64,
    pub max_dets: usize,
}

impl PipelineConfig {
    pub fn raster_grid(&self) -> RasterGrid {
        RasterGrid {
            origin_xy: self.grid.origin_xy,
            cell_size: self.grid.voxel_size,
            extent: self.grid.grid_extent,
        }
    }
}

/// Learnable state of one detector.
#[derive(Debug, Clone)]
pub enum PointEncoderParams {
    PointNet(PointNetParams),
    Pvt(PvtParams),
}

#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub spec: ArchSpec,
    pub point: PointEncoderParams,
    /// Maps point width onto backbone width when they differ.
    pub adapter: Option<LinearParams>,
    pub backbone: BackboneParams,
    pub heads: HeadsParams,
    pub feat_dim: usize,
}

impl DetectorParams {
    pub fn init(spec: &ArchSpec, feat_dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::derive(seed, "init");
        let point = match &spec.point {
            PointArch::PointNet { aggregation, .. } => {
                let widths = spec.pointnet_widths().unwrap();
                PointEncoderParams::PointNet(PointNetParams::init(
                    feat_dim,
                    &widths,
                    *aggregation,
                    &mut rng,
                ))
            }
            PointArch::Pvt { depth, query_mode } => PointEncoderParams::Pvt(PvtParams::init(
                feat_dim,
                spec.point_out,
                spec.point_heads,
                spec.point_expansion,
                *depth,
                *query_mode,
                &mut rng,
            )?),
        };
        let adapter = if spec.point_out != spec.backbone.tfm_channel {
            Some(LinearParams::init(
                spec.point_out,
                spec.backbone.tfm_channel,
                0.02,
                &mut rng,
            ))
        } else {
            None
        };
        let backbone = BackboneParams::init(
            BackboneConfig {
                d: spec.backbone.tfm_channel,
                heads: spec.backbone.tfm_heads,
                mlp_expansion: spec.backbone.mlp_expansion,
                blocks_per_scale: spec.backbone.blocks.clone(),
                window: spec.backbone.window,
                mode: spec.backbone.mode,
            },
            &mut rng,
        )?;
        let heads = HeadsParams::init(
            HeadConfig {
                d: spec.head.tfm_channel,
                heads: spec.head.tfm_heads,
                mlp_expansion: spec.head.mlp_expansion,
                vehicle_blocks: spec.head.vehicle_blocks,
                pedestrian_blocks: spec.head.pedestrian_blocks,
                vehicle_stride: 2,
                pedestrian_stride: 1,
                window: spec.backbone.window,
            },
            spec.backbone.tfm_channel,
            &mut rng,
        )?;
        Ok(DetectorParams {
            spec: spec.clone(),
            point,
            adapter,
            backbone,
            heads,
            feat_dim,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.point {
            PointEncoderParams::PointNet(p) => p.visit("pointnet", f),
            PointEncoderParams::Pvt(p) => p.visit("pvt", f),
        }
        if let Some(a) = &self.adapter {
            a.visit("adapter", f);
        }
        self.backbone.visit("backbone", f);
        self.heads.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.point {
            PointEncoderParams::PointNet(p) => p.visit_mut("pointnet", f),
            PointEncoderParams::Pvt(p) => p.visit_mut("pvt", f),
        }
        if let Some(a) = &mut self.adapter {
            a.visit_mut("adapter", f);
        }
        self.backbone.visit_mut("backbone", f);
        self.heads.visit_mut("head", f);
    }

    pub fn param_count(&self) -> u128 {
        let mut n = 0u128;
        self.visit(&mut |_, t| n += t.numel() as u128);
        n
    }

    /// Named snapshot for checkpoints.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        self.visit(&mut |name, t| {
            map.insert(name.to_string(), t.clone());
        });
        map
    }

    /// Load a named snapshot; errors list missing/extra/mismatched keys.
    pub fn load_named(&mut self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut expected = Vec::new();
        self.visit(&mut |name, _| expected.push(name.to_string()));
        let missing: Vec<&String> = expected
            .iter()
            .filter(|n| !snapshot.contains_key(*n))
            .collect();
        let extra: Vec<&String> = snapshot
            .keys()
            .filter(|n| !expected.contains(n))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not match architecture; missing: [{}], unexpected: [{}]",
                missing
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
                extra
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        let mut err = None;
        self.visit_mut(&mut |name, t| {
            let s = &snapshot[name];
            if s.shape() != t.shape() {
                err = Some(Error::Config(format!(
                    "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                )));
            } else {
                let grad_flag = t.requires_grad;
                *t = s.clone();
                t.requires_grad = grad_flag;
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

pub enum BoundPointEncoder {
    PointNet(BoundPointNet),
    Pvt(BoundPvt),
}

pub struct BoundDetector {
    pub point: BoundPointEncoder,
    pub adapter: Option<BoundLinear>,
    pub backbone: crate::backbone::BoundBackbone,
    pub heads: crate::backbone::BoundHeads,
}

impl DetectorParams {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings) -> BoundDetector {
        BoundDetector {
            point: match &self.point {
                PointEncoderParams::PointNet(p) => {
                    BoundPointEncoder::PointNet(p.bind(tape, reg, "pointnet"))
                }
                PointEncoderParams::Pvt(p) => BoundPointEncoder::Pvt(p.bind(tape, reg, "pvt")),
            },
            adapter: self.adapter.as_ref().map(|a| a.bind(tape, reg, "adapter")),
            backbone: self.backbone.bind(tape, reg, "backbone"),
            heads: self.heads.bind(tape, reg, "head"),
        }
    }
}

/// One scene through the whole pipeline: per-class dense predictions.
pub fn detector_forward(
    tape: &mut Tape,
    bound: &BoundDetector,
    params: &DetectorParams,
    batch: &FixedVoxelBatch,
    grid_extent: (usize, usize),
) -> Result<Vec<DetectionOutput>> {
    let voxel_features = match (&bound.point, &params.point) {
        (BoundPointEncoder::PointNet(b), _) => pointnet_encode(tape, batch, b)?,
        (BoundPointEncoder::Pvt(b), PointEncoderParams::Pvt(p)) => {
            pvt_encode(tape, batch, b, p.query_mode)?
        }
        _ => return Err(Error::Config("bound/param point encoder mismatch".into())),
    };
    let mut map = scatter_to_bev(
        tape,
        voxel_features,
        &batch.coords,
        batch.num_voxels,
        grid_extent,
    )?;
    if let Some(a) = &bound.adapter {
        let projected = tape.linear(map.features, a.w, a.b)?;
        let d = *tape.shape(projected).last().unwrap();
        let occ3 = tape.leaf(crate::encoder::mask_expand_last(&map.occupancy, d));
        let features = tape.mul(projected, occ3)?;
        map = BevMap {
            features,
            occupancy: map.occupancy.clone(),
            scale: 1,
        };
    }
    let maps = backbone_forward(tape, &map, &bound.backbone)?;
    detection_heads(tape, &maps, &bound.heads)
}

/// Targets for both head scales of one scene.
pub fn targets_for(boxes: &[Box2D], cfg: &PipelineConfig) -> (SceneTargets, SceneTargets) {
    let fine = rasterize_targets(boxes, &cfg.raster_grid());
    let coarse = rasterize_targets(boxes, &cfg.raster_grid().at_scale(2));
    (fine, coarse)
}

/// Mean loss over a batch of (voxelized scene, targets) pairs on one
/// tape. Targets are ordered (fine, coarse); the vehicle head reads the
/// coarse set, the pedestrian head the fine set.
pub fn batch_loss(
    tape: &mut Tape,
    bound: &BoundDetector,
    params: &DetectorParams,
    scenes: &[(FixedVoxelBatch, SceneTargets, SceneTargets)],
    cfg: &PipelineConfig,
) -> Result<(Var, LossBreakdown)> {
    if scenes.is_empty() {
        return Err(Error::Config("batch_loss on an empty batch".into()));
    }
    let mut acc: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for (batch, fine, coarse) in scenes {
        let outputs = detector_forward(tape, bound, params, batch, cfg.grid.grid_extent)?;
        // outputs are ordered by class: vehicle (stride 2), pedestrian (1)
        let per_scale: Vec<&SceneTargets> = outputs
            .iter()
            .map(|o| if o.scale == 1 { fine } else { coarse })
            .collect();
        let (loss, parts) = total_loss(tape, &outputs, &per_scale, &cfg.loss_weights)?;
        breakdown.heatmap += parts.heatmap;
        breakdown.box_reg += parts.box_reg;
        breakdown.segmentation += parts.segmentation;
        acc = Some(match acc {
            None => loss,
            Some(a) => tape.add(a, loss)?,
        });
    }
    let n = scenes.len() as f64;
    let total = tape.scale(acc.unwrap(), 1.0 / n);
    breakdown.heatmap /= n;
    breakdown.box_reg /= n;
    breakdown.segmentation /= n;
    breakdown.total = tape.value(total).data()[0];
    Ok((total, breakdown))
}

/// Voxelize one generated scene.
pub fn scene_to_batch(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<FixedVoxelBatch> {
    fixed_voxelize(cloud, &cfg.grid)
}

/// Forward + decode for one scene (no gradients needed by callers).
pub fn predict(
    params: &DetectorParams,
    batch: &FixedVoxelBatch,
    cfg: &PipelineConfig,
) -> Result<Vec<(Box2D, f64)>> {
    let mut tape = Tape::new();
    let mut reg = ParamBindings::default();
    let bound = params.bind(&mut tape, &mut reg);
    let outputs = detector_forward(&mut tape, &bound, params, batch, cfg.grid.grid_extent)?;
    let mut dets = Vec::new();
    for (class_id, out) in outputs.iter().enumerate() {
        let grid = cfg.raster_grid().at_scale(out.scale);
        let hm = tape.value(out.heatmap).clone();
        let bx = tape.value(out.box_reg).clone();
        dets.extend(decode_boxes(
            &hm,
            &bx,
            &grid,
            class_id,
            cfg.score_threshold,
            cfg.max_dets,
        ));
    }
    Ok(dets)
}

/// Evaluation summary over a seed range.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub ap_per_class: Vec<f64>,
    pub mean_ap: f64,
    pub heading_mae: Option<f64>,
    pub scenes: usize,
}

/// Generate `eval_scenes` held-out scenes from `seed_base`, run the
/// detector and score toy AP per class.
pub fn evaluate(
    params: &DetectorParams,
    cfg: &PipelineConfig,
    seed_base: u64,
    eval_scenes: usize,
    iou_threshold: f64,
) -> Result<EvalSummary> {
    let mut preds: Vec<ScoredBox> = Vec::new();
    let mut truths: Vec<(usize, Box2D)> = Vec::new();
    for i in 0..eval_scenes {
        let seed = seed_base.wrapping_add(i as u64);
        let (cloud, boxes) = generate_scene(&cfg.scene, seed)?;
        let batch = scene_to_batch(&cloud, cfg)?;
        if batch.num_voxels == 0 {
            continue;
        }
        for b in &boxes {
            truths.push((i, *b));
        }
        for (b, score) in predict(params, &batch, cfg)? {
            preds.push(ScoredBox {
                scene: i,
                b,
                score,
            });
        }
    }
    let mut ap_per_class = Vec::with_capacity(NUM_CLASSES);
    for class_id in 0..NUM_CLASSES {
        let p: Vec<ScoredBox> = preds
            .iter()
            .filter(|s| s.b.class_id == class_id)
            .copied()
            .collect();
        let t: Vec<(usize, Box2D)> = truths
            .iter()
            .filter(|(_, b)| b.class_id == class_id)
            .copied()
            .collect();
        ap_per_class.push(if t.is_empty() {
            0.0
        } else {
            evaluate_ap(&p, &t, iou_threshold)
        });
    }
    let mean_ap = ap_per_class.iter().sum::<f64>() / ap_per_class.len() as f64;
    let mae = heading_mae(&preds, &truths, iou_threshold);
    Ok(EvalSummary {
        ap_per_class,
        mean_ap,
        heading_mae: mae,
        scenes: eval_scenes,
    })
}

//! Center-style detection heads: per-class windowed transformer blocks
//! followed by 1x1 projections to heatmap, box regression and foreground
//! segmentation channels.

use crate::backbone::{swformer_block, BevMap};
use crate::encoder::{AttentionBlockParams, BoundBlock, BoundLinear, LinearParams, ParamBindings};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scenes::NUM_CLASSES;
use crate::tensor::{Tape, Tensor, Var};

/// Sigmoid prior so untrained heatmap/seg logits start near p = 0.1.
const LOGIT_PRIOR: f64 = -2.19;

#[derive(Debug, Clone)]
pub struct HeadConfig {
    pub d: usize,
    pub heads: usize,
    pub mlp_expansion: usize,
    pub vehicle_blocks: usize,
    pub pedestrian_blocks: usize,
    /// Operating stride per class (vehicle coarse, pedestrian fine).
    pub vehicle_stride: usize,
    pub pedestrian_stride: usize,
    pub window: usize,
}

impl HeadConfig {
    pub fn blocks_for(&self, class_id: usize) -> usize {
        if class_id == 0 {
            self.vehicle_blocks
        } else {
            self.pedestrian_blocks
        }
    }

    pub fn stride_for(&self, class_id: usize) -> usize {
        if class_id == 0 {
            self.vehicle_stride
        } else {
            self.pedestrian_stride
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Parameters of one class's head.
#[derive(Debug, Clone)]
pub struct ClassHeadParams {
    /// Projects backbone width onto the head width when they differ.
    pub adapter: Option<LinearParams>,
    pub blocks: Vec<AttentionBlockParams>,
    pub hm: LinearParams,
    pub box_reg: LinearParams,
    pub seg: LinearParams,
}

#[derive(Debug, Clone)]
pub struct HeadsParams {
    pub config: HeadConfig,
    pub per_class: Vec<ClassHeadParams>,
}

impl HeadsParams {
    pub fn init(config: HeadConfig, backbone_d: usize, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut per_class = Vec::with_capacity(NUM_CLASSES);
        for class_id in 0..NUM_CLASSES {
            let adapter = if backbone_d != d {
                Some(LinearParams::init(backbone_d, d, 0.02, rng))
            } else {
                None
            };
            let mut blocks = Vec::new();
            for _ in 0..config.blocks_for(class_id) {
                blocks.push(AttentionBlockParams::init(
                    d,
                    config.heads,
                    config.mlp_expansion,
                    rng,
                )?);
            }
            let mut hm = LinearParams::init(d, 1, 0.02, rng);
            hm.b.data_mut()[0] = LOGIT_PRIOR;
            let box_reg = LinearParams::init(d, 5, 0.02, rng);
            let mut seg = LinearParams::init(d, 1, 0.02, rng);
            seg.b.data_mut()[0] = LOGIT_PRIOR;
            per_class.push(ClassHeadParams {
                adapter,
                blocks,
                hm,
                box_reg,
                seg,
            });
        }
        Ok(HeadsParams { config, per_class })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (c, head) in self.per_class.iter().enumerate() {
            let cls = class_tag(c);
            if let Some(a) = &head.adapter {
                a.visit(&format!("{prefix}.{cls}.adapter"), f);
            }
            for (b, blk) in head.blocks.iter().enumerate() {
                blk.visit(&format!("{prefix}.{cls}.b{b}"), f);
            }
            head.hm.visit(&format!("{prefix}.{cls}.hm"), f);
            head.box_reg.visit(&format!("{prefix}.{cls}.box"), f);
            head.seg.visit(&format!("{prefix}.{cls}.seg"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (c, head) in self.per_class.iter_mut().enumerate() {
            let cls = class_tag(c);
            if let Some(a) = &mut head.adapter {
                a.visit_mut(&format!("{prefix}.{cls}.adapter"), f);
            }
            for (b, blk) in head.blocks.iter_mut().enumerate() {
                blk.visit_mut(&format!("{prefix}.{cls}.b{b}"), f);
            }
            head.hm.visit_mut(&format!("{prefix}.{cls}.hm"), f);
            head.box_reg.visit_mut(&format!("{prefix}.{cls}.box"), f);
            head.seg.visit_mut(&format!("{prefix}.{cls}.seg"), f);
        }
    }
}

fn class_tag(class_id: usize) -> &'static str {
    if class_id == 0 {
        "vehicle"
    } else {
        "pedestrian"
    }
}

pub struct BoundClassHead {
    pub adapter: Option<BoundLinear>,
    pub blocks: Vec<BoundBlock>,
    pub hm: BoundLinear,
    pub box_reg: BoundLinear,
    pub seg: BoundLinear,
}

pub struct BoundHeads {
    pub per_class: Vec<BoundClassHead>,
    pub config: HeadConfig,
}

impl HeadsParams {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> BoundHeads {
        BoundHeads {
            per_class: self
                .per_class
                .iter()
                .enumerate()
                .map(|(c, head)| {
                    let cls = class_tag(c);
                    BoundClassHead {
                        adapter: head
                            .adapter
                            .as_ref()
                            .map(|a| a.bind(tape, reg, &format!("{prefix}.{cls}.adapter"))),
                        blocks: head
                            .blocks
                            .iter()
                            .enumerate()
                            .map(|(b, blk)| {
                                blk.bind(tape, reg, &format!("{prefix}.{cls}.b{b}"))
                            })
                            .collect(),
                        hm: head.hm.bind(tape, reg, &format!("{prefix}.{cls}.hm")),
                        box_reg: head.box_reg.bind(tape, reg, &format!("{prefix}.{cls}.box")),
                        seg: head.seg.bind(tape, reg, &format!("{prefix}.{cls}.seg")),
                    }
                })
                .collect(),
            config: self.config.clone(),
        }
    }
}

/// Dense per-class predictions at the class's operating scale.
pub struct DetectionOutput {
    /// `[H, W]` heatmap logits.
    pub heatmap: Var,
    /// `[H, W, 5]` regression (dx, dy, log w, log l, heading).
    pub box_reg: Var,
    /// `[H, W]` foreground logits.
    pub fg_seg: Var,
    pub scale: usize,
}

/// Run both class heads against the available backbone maps.
pub fn detection_heads(
    tape: &mut Tape,
    maps: &[BevMap],
    heads: &BoundHeads,
) -> Result<Vec<DetectionOutput>> {
    let mut outputs = Vec::with_capacity(heads.per_class.len());
    for (class_id, head) in heads.per_class.iter().enumerate() {
        let stride = heads.config.stride_for(class_id);
        let map = maps
            .iter()
            .find(|m| m.scale == stride)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no backbone map at stride {stride} for class {class_id}"
                ))
            })?;
        let mut cur = map.clone();
        if let Some(a) = &head.adapter {
            let projected = tape.linear(cur.features, a.w, a.b)?;
            // adapters run on dense maps; keep unoccupied cells zero
            let occ3 = tape.leaf(crate::encoder::mask_expand_last(
                &cur.occupancy,
                tape.shape(projected)[2],
            ));
            let projected = tape.mul(projected, occ3)?;
            cur = BevMap {
                features: projected,
                occupancy: cur.occupancy.clone(),
                scale: cur.scale,
            };
        }
        for blk in &head.blocks {
            cur = swformer_block(tape, &cur, blk, heads.config.window)?;
        }
        let (h, w) = (cur.h(), cur.w());
        let hm = tape.linear(cur.features, head.hm.w, head.hm.b)?;
        let heatmap = tape.reshape(hm, &[h, w])?;
        let box_reg = tape.linear(cur.features, head.box_reg.w, head.box_reg.b)?;
        let seg = tape.linear(cur.features, head.seg.w, head.seg.b)?;
        let fg_seg = tape.reshape(seg, &[h, w])?;
        outputs.push(DetectionOutput {
            heatmap,
            box_reg,
            fg_seg,
            scale: stride,
        });
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BevMap;

    fn head_cfg(d: usize) -> HeadConfig {
        HeadConfig {
            d,
            heads: 2,
            mlp_expansion: 2,
            vehicle_blocks: 1,
            pedestrian_blocks: 1,
            vehicle_stride: 2,
            pedestrian_stride: 1,
            window: 2,
        }
    }

    #[test]
    fn zero_map_gives_constant_bias_fields() {
        let mut rng = SplitMix64::new(30);
        let params = HeadsParams::init(head_cfg(8), 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let maps = vec![
            BevMap {
                features: tape.leaf(Tensor::zeros(&[4, 4, 8])),
                occupancy: Tensor::zeros(&[4, 4]),
                scale: 1,
            },
            BevMap {
                features: tape.leaf(Tensor::zeros(&[2, 2, 8])),
                occupancy: Tensor::zeros(&[2, 2]),
                scale: 2,
            },
        ];
        let mut reg = ParamBindings::default();
        let bound = params.bind(&mut tape, &mut reg, "head");
        let outs = detection_heads(&mut tape, &maps, &bound).unwrap();
        // zero features in, so every cell carries exactly the projection bias
        for (c, out) in outs.iter().enumerate() {
            let hm = tape.value(out.heatmap);
            let want = params.per_class[c].hm.b.data()[0];
            assert!(hm.data().iter().all(|&v| v == want));
            let bx = tape.value(out.box_reg);
            for cell in bx.data().chunks(5) {
                for (k, v) in cell.iter().enumerate() {
                    assert_eq!(*v, params.per_class[c].box_reg.b.data()[k]);
                }
            }
        }
    }

    #[test]
    fn parameter_count_scales_with_blocks() {
        let mut rng = SplitMix64::new(31);
        let p1 = HeadsParams::init(head_cfg(8), 8, &mut rng).unwrap();
        let mut rng2 = SplitMix64::new(31);
        let mut cfg2 = head_cfg(8);
        cfg2.vehicle_blocks = 2;
        let p2 = HeadsParams::init(cfg2, 8, &mut rng2).unwrap();
        let count = |p: &HeadsParams| {
            let mut n = 0usize;
            p.visit("head", &mut |_, t| n += t.numel());
            n
        };
        let per_block = {
            let mut rng3 = SplitMix64::new(0);
            let blk = AttentionBlockParams::init(8, 2, 2, &mut rng3).unwrap();
            let mut n = 0usize;
            blk.visit("b", &mut |_, t| n += t.numel());
            n
        };
        assert_eq!(count(&p2) - count(&p1), per_block);
    }

    #[test]
    fn gradient_reaches_backbone_features_through_heads() {
        let mut rng = SplitMix64::new(32);
        let params = HeadsParams::init(head_cfg(8), 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let feats = tape.param(&Tensor::randn(&[4, 4, 8], 1.0, &mut rng));
        let maps = vec![
            BevMap {
                features: feats,
                occupancy: Tensor::full(&[4, 4], 1.0),
                scale: 1,
            },
            BevMap {
                features: tape.leaf(Tensor::zeros(&[2, 2, 8])),
                occupancy: Tensor::zeros(&[2, 2]),
                scale: 2,
            },
        ];
        let mut reg = ParamBindings::default();
        let bound = params.bind(&mut tape, &mut reg, "head");
        let outs = detection_heads(&mut tape, &maps, &bound).unwrap();
        let sq = tape.mul(outs[1].heatmap, outs[1].heatmap).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(feats).expect("gradient flows to the backbone map");
        assert!(g.iter().any(|&v| v != 0.0));
    }
}

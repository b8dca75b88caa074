//! Detection loss: penalty-reduced focal heatmap loss, L1 box regression
//! at center cells (wrapped heading), and foreground BCE, combined as a
//! weighted sum over classes.

use crate::backbone::heads::DetectionOutput;
use crate::error::{Error, Result};
use crate::scenes::SceneTargets;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub heatmap: f64,
    pub box_reg: f64,
    pub segmentation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            heatmap: 1.0,
            box_reg: 1.0,
            segmentation: 1.0,
        }
    }
}

/// Scalar terms of one loss evaluation (values copied off the tape).
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub box_reg: f64,
    pub segmentation: f64,
    pub total: f64,
}

/// Penalty-reduced focal loss on sigmoid logits (α = 2, β = 4),
/// normalized by the peak count.
fn focal_heatmap(tape: &mut Tape, logits: Var, target: &Tensor, n_peaks: usize) -> Result<Var> {
    let y = tape.leaf(target.clone());
    let pos_mask: Tensor = {
        let d: Vec<f64> = target
            .data()
            .iter()
            .map(|&v| if v == 1.0 { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(target.shape().to_vec(), d).unwrap()
    };
    let pos = tape.leaf(pos_mask.clone());
    let neg_mask: Vec<f64> = pos_mask.data().iter().map(|&v| 1.0 - v).collect();
    let neg = tape.leaf(Tensor::new(target.shape().to_vec(), neg_mask).unwrap());

    let p = tape.sigmoid(logits);
    // positive cells: (1 - p)^2 * -log p
    let one_minus_p = tape.neg(p);
    let one_minus_p = tape.add_const(one_minus_p, 1.0);
    let omp2 = tape.mul(one_minus_p, one_minus_p)?;
    let neg_logits = tape.neg(logits);
    let nlog_p = tape.softplus(neg_logits); // -log sigmoid(x)
    let pos_term = tape.mul(omp2, nlog_p)?;
    let pos_term = tape.mul(pos_term, pos)?;

    // negative cells: (1 - y)^4 * p^2 * -log(1 - p)
    let one_minus_y = tape.neg(y);
    let one_minus_y = tape.add_const(one_minus_y, 1.0);
    let omy2 = tape.mul(one_minus_y, one_minus_y)?;
    let omy4 = tape.mul(omy2, omy2)?;
    let p2 = tape.mul(p, p)?;
    let nlog_1mp = tape.softplus(logits); // -log(1 - sigmoid(x))
    let neg_term = tape.mul(omy4, p2)?;
    let neg_term = tape.mul(neg_term, nlog_1mp)?;
    let neg_term = tape.mul(neg_term, neg)?;

    let both = tape.add(pos_term, neg_term)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 1.0 / (n_peaks.max(1) as f64)))
}

/// L1 on the five regression channels at center cells; the heading
/// channel difference is wrapped before the absolute value.
fn box_l1(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    valid: &Tensor,
    n_peaks: usize,
) -> Result<Var> {
    let hw = valid.numel();
    let t = tape.leaf(target.clone());
    let diff = tape.sub(pred, t)?;
    // split heading (channel 4) from the rest
    let flat = tape.reshape(diff, &[hw * 5])?;
    let mut geom_idx = Vec::with_capacity(hw * 4);
    let mut head_idx = Vec::with_capacity(hw);
    for cell in 0..hw {
        for k in 0..4 {
            geom_idx.push((cell * 5 + k) as i64);
        }
        head_idx.push((cell * 5 + 4) as i64);
    }
    let geom = tape.gather_rows(flat, 1, &geom_idx, &[hw, 4])?;
    let head = tape.gather_rows(flat, 1, &head_idx, &[hw])?;

    let geom_mask = {
        let mut d = vec![0.0; hw * 4];
        for (cell, &v) in valid.data().iter().enumerate() {
            if v == 1.0 {
                d[cell * 4..(cell + 1) * 4].fill(1.0);
            }
        }
        Tensor::new(vec![hw, 4], d).unwrap()
    };
    let gm = tape.leaf(geom_mask);
    let geom_abs = tape.abs(geom);
    let geom_masked = tape.mul(geom_abs, gm)?;
    let geom_sum = tape.sum(geom_masked);

    let wrapped = tape.wrap_angle(head);
    let head_abs = tape.abs(wrapped);
    let hm_mask = tape.leaf(Tensor::new(vec![hw], valid.data().to_vec()).unwrap());
    let head_masked = tape.mul(head_abs, hm_mask)?;
    let head_sum = tape.sum(head_masked);

    let total = tape.add(geom_sum, head_sum)?;
    Ok(tape.scale(total, 1.0 / (5.0 * n_peaks.max(1) as f64)))
}

/// Mean binary cross-entropy with logits: `softplus(x) - x·y`.
fn bce_mean(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let y = tape.leaf(target.clone());
    let sp = tape.softplus(logits);
    let xy = tape.mul(logits, y)?;
    let per_cell = tape.sub(sp, xy)?;
    Ok(tape.mean(per_cell))
}

/// Weighted sum of the three loss terms over all classes. Box terms are
/// exactly zero (not NaN) when a class has no center cells.
pub fn total_loss(
    tape: &mut Tape,
    preds: &[DetectionOutput],
    targets_per_scale: &[&SceneTargets],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if preds.len() != targets_per_scale.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} target sets",
            preds.len(),
            targets_per_scale.len()
        )));
    }
    let mut breakdown = LossBreakdown::default();
    let mut acc: Option<Var> = None;
    for (class_id, (pred, targets)) in preds.iter().zip(targets_per_scale).enumerate() {
        let hm_t = &targets.heatmaps[class_id];
        if tape.shape(pred.heatmap) != hm_t.shape() {
            return Err(Error::Shape(format!(
                "class {class_id} heatmap {:?} vs target {:?}",
                tape.shape(pred.heatmap),
                hm_t.shape()
            )));
        }
        let n_peaks = targets.num_peaks[class_id];
        let hm = focal_heatmap(tape, pred.heatmap, hm_t, n_peaks)?;
        let bx = box_l1(
            tape,
            pred.box_reg,
            &targets.box_reg,
            &targets.box_valid[class_id],
            n_peaks,
        )?;
        let sg = bce_mean(tape, pred.fg_seg, &targets.foreground)?;

        breakdown.heatmap += tape.value(hm).data()[0];
        breakdown.box_reg += tape.value(bx).data()[0];
        breakdown.segmentation += tape.value(sg).data()[0];

        let hm_w = tape.scale(hm, weights.heatmap);
        let bx_w = tape.scale(bx, weights.box_reg);
        let sg_w = tape.scale(sg, weights.segmentation);
        let sum1 = tape.add(hm_w, bx_w)?;
        let class_total = tape.add(sum1, sg_w)?;
        acc = Some(match acc {
            None => class_total,
            Some(a) => tape.add(a, class_total)?,
        });
    }
    let total = acc.ok_or_else(|| Error::Config("total_loss needs >= 1 class".into()))?;
    breakdown.total = tape.value(total).data()[0];
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::scenes::{rasterize_targets, Box2D, RasterGrid};
    use crate::tensor::finite_diff_grad;

    fn grid8() -> RasterGrid {
        RasterGrid {
            origin_xy: (-1.28, -1.28),
            cell_size: 0.32,
            extent: (8, 8),
        }
    }

    fn one_box() -> Box2D {
        Box2D {
            cx: 0.1,
            cy: -0.2,
            w: 0.6,
            l: 0.9,
            heading: 0.4,
            class_id: 0,
        }
    }

    /// Predictions assembled directly from tensors (no heads).
    fn preds_from(
        tape: &mut Tape,
        hm: &[Tensor],
        bx: &Tensor,
        fg: &Tensor,
        grad: bool,
    ) -> Vec<DetectionOutput> {
        hm.iter()
            .map(|h| {
                let mut mk = |t: &Tensor| {
                    if grad {
                        tape.param(t)
                    } else {
                        tape.leaf(t.clone())
                    }
                };
                let heatmap = mk(h);
                let box_reg = mk(bx);
                let fg_seg = mk(fg);
                DetectionOutput {
                    heatmap,
                    box_reg,
                    fg_seg,
                    scale: 1,
                }
            })
            .collect()
    }

    #[test]
    fn empty_scene_box_loss_is_exactly_zero() {
        let t = rasterize_targets(&[], &grid8());
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(41);
        let hm = [
            Tensor::randn(&[8, 8], 0.5, &mut rng),
            Tensor::randn(&[8, 8], 0.5, &mut rng),
        ];
        let bx = Tensor::randn(&[8, 8, 5], 0.5, &mut rng);
        let fg = Tensor::randn(&[8, 8], 0.5, &mut rng);
        let preds = preds_from(&mut tape, &hm, &bx, &fg, false);
        let (total, parts) =
            total_loss(&mut tape, &preds, &[&t, &t], &LossWeights::default()).unwrap();
        assert_eq!(parts.box_reg, 0.0);
        assert!(tape.value(total).data()[0].is_finite());
    }

    #[test]
    fn near_perfect_prediction_is_near_lower_bound_and_perturbation_hurts() {
        let boxes = [one_box()];
        let t = rasterize_targets(&boxes, &grid8());
        // logits whose sigmoid approximates the target maps
        let logit = |v: f64| {
            let c = v.clamp(1e-4, 1.0 - 1e-4);
            (c / (1.0 - c)).ln()
        };
        let hm: Vec<Tensor> = t
            .heatmaps
            .iter()
            .map(|h| {
                Tensor::new(
                    h.shape().to_vec(),
                    h.data().iter().map(|&v| logit(v)).collect(),
                )
                .unwrap()
            })
            .collect();
        let fg = Tensor::new(
            t.foreground.shape().to_vec(),
            t.foreground.data().iter().map(|&v| logit(v)).collect(),
        )
        .unwrap();
        let bx = t.box_reg.clone();

        let mut tape = Tape::new();
        let preds = preds_from(&mut tape, &hm, &bx, &fg, false);
        let (_, clean) = total_loss(&mut tape, &preds, &[&t, &t], &LossWeights::default()).unwrap();

        // random perturbations strictly increase the loss
        let mut rng = SplitMix64::new(42);
        for _ in 0..5 {
            let mut tape2 = Tape::new();
            let hm2: Vec<Tensor> = hm
                .iter()
                .map(|h| {
                    let mut c = h.clone();
                    for v in c.data_mut() {
                        *v += rng.normal() * 0.8;
                    }
                    c
                })
                .collect();
            let mut bx2 = bx.clone();
            for v in bx2.data_mut() {
                *v += rng.normal() * 0.4;
            }
            let preds2 = preds_from(&mut tape2, &hm2, &bx2, &fg, false);
            let (_, noisy) =
                total_loss(&mut tape2, &preds2, &[&t, &t], &LossWeights::default()).unwrap();
            assert!(
                noisy.total > clean.total,
                "perturbed {} <= clean {}",
                noisy.total,
                clean.total
            );
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let boxes = [one_box()];
        let t = rasterize_targets(&boxes, &grid8());
        let mut rng = SplitMix64::new(43);
        let hm = [
            Tensor::randn(&[8, 8], 0.7, &mut rng),
            Tensor::randn(&[8, 8], 0.7, &mut rng),
        ];
        let bx = Tensor::randn(&[8, 8, 5], 0.7, &mut rng);
        let fg = Tensor::randn(&[8, 8], 0.7, &mut rng);

        let loss_of = |hm0: &Tensor, bx0: &Tensor, fg0: &Tensor| {
            let mut tape = Tape::new();
            let hms = [hm0.clone(), hm[1].clone()];
            let preds = preds_from(&mut tape, &hms, bx0, fg0, false);
            let (total, _) =
                total_loss(&mut tape, &preds, &[&t, &t], &LossWeights::default()).unwrap();
            tape.value(total).data()[0]
        };

        let mut tape = Tape::new();
        let h0 = tape.param(&hm[0]);
        let h1 = tape.leaf(hm[1].clone());
        let b0 = tape.param(&bx);
        let f0 = tape.param(&fg);
        let preds = vec![
            DetectionOutput {
                heatmap: h0,
                box_reg: b0,
                fg_seg: f0,
                scale: 1,
            },
            DetectionOutput {
                heatmap: h1,
                box_reg: b0,
                fg_seg: f0,
                scale: 1,
            },
        ];
        let (total, _) = total_loss(&mut tape, &preds, &[&t, &t], &LossWeights::default()).unwrap();
        tape.backward(total).unwrap();

        let fd_hm = finite_diff_grad(|x| loss_of(x, &bx, &fg), &hm[0], 1e-5).unwrap();
        let got_hm = tape.grad_tensor(h0).unwrap();
        for (a, b) in got_hm.data().iter().zip(fd_hm.data()) {
            let denom = a.abs().max(b.abs()).max(1e-3);
            assert!((a - b).abs() / denom < 1e-4, "heatmap {a} vs {b}");
        }
        let fd_bx = finite_diff_grad(|x| loss_of(&hm[0], x, &fg), &bx, 1e-5).unwrap();
        let got_bx = tape.grad_tensor(b0).unwrap();
        for (a, b) in got_bx.data().iter().zip(fd_bx.data()) {
            let denom = a.abs().max(b.abs()).max(1e-3);
            assert!((a - b).abs() / denom < 1e-4, "box {a} vs {b}");
        }
    }
}

//! Box decoding from dense head outputs: 3x3 local maxima of the sigmoid
//! heatmap above a score threshold, regression channels applied at each
//! peak.

use crate::scenes::{wrap_angle, Box2D, RasterGrid};
use crate::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decode `[H, W]` heatmap logits + `[H, W, 5]` regression into scored
/// boxes. `grid` must describe the map's own scale. Peaks are cells that
/// are `>=` every 3x3 neighbor (plateau ties decode on both cells; there
/// is no NMS here).
pub fn decode_boxes(
    heatmap_logits: &Tensor,
    box_reg: &Tensor,
    grid: &RasterGrid,
    class_id: usize,
    score_threshold: f64,
    max_dets: usize,
) -> Vec<(Box2D, f64)> {
    let h = heatmap_logits.shape()[0];
    let w = heatmap_logits.shape()[1];
    let mut out: Vec<(Box2D, f64)> = Vec::new();
    for iy in 0..h {
        for ix in 0..w {
            let v = heatmap_logits.at(&[iy, ix]);
            let score = sigmoid(v);
            if score < score_threshold {
                continue;
            }
            let mut is_peak = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if heatmap_logits.at(&[ny as usize, nx as usize]) > v {
                        is_peak = false;
                    }
                }
            }
            if !is_peak {
                continue;
            }
            let (ccx, ccy) = grid.cell_center(ix, iy);
            let dx = box_reg.at(&[iy, ix, 0]);
            let dy = box_reg.at(&[iy, ix, 1]);
            let bw = box_reg.at(&[iy, ix, 2]).exp();
            let bl = box_reg.at(&[iy, ix, 3]).exp();
            let heading = wrap_angle(box_reg.at(&[iy, ix, 4]));
            out.push((
                Box2D {
                    cx: ccx + dx * grid.cell_size,
                    cy: ccy + dy * grid.cell_size,
                    w: bw,
                    l: bl,
                    heading,
                    class_id,
                },
                score,
            ));
        }
    }
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                (a.0.cy, a.0.cx)
                    .partial_cmp(&(b.0.cy, b.0.cx))
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });
    out.truncate(max_dets);
    out
}

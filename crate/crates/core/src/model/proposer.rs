//! Activation-energy part proposer.
//!
//! Each cell of the last feature map gets an energy (L2 norm over channels).
//! Every `window x window` block of cells is scored by the tent-weighted mean
//! of its cell energies, then greedy non-maximum suppression keeps the best
//! non-overlapping windows. Equal scores keep raster-scan order.

use crate::error::{Error, Result};
use crate::geom::PartBox;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposerConfig {
    pub num_parts: usize,
    /// Window side in feature-map cells.
    pub window: usize,
    /// Boxes must overlap strictly less than this IoU.
    pub nms_iou: f64,
}

/// `f3: [C, h, w]` feature map of one image whose cells are `stride` pixels wide.
pub fn propose_parts<T: Scalar>(
    f3: &Tensor<T>,
    stride: usize,
    cfg: &ProposerConfig,
) -> Result<Vec<PartBox>> {
    let s = f3.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "propose_parts",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let win = cfg.window;
    if cfg.num_parts == 0 || win == 0 || win > h || win > w {
        return Err(Error::Proposal(format!(
            "cannot place {} windows of {win} cells on a {h}x{w} map",
            cfg.num_parts
        )));
    }
    let energy: Vec<f64> = (0..h * w)
        .map(|p| {
            (0..c)
                .map(|ch| f3.data()[ch * h * w + p].as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let tent: Vec<f64> = (0..win).map(|i| (i + 1).min(win - i) as f64).collect();
    let norm: f64 = tent.iter().sum::<f64>().powi(2);

    let mut candidates = Vec::with_capacity((h - win + 1) * (w - win + 1));
    for y in 0..=h - win {
        for x in 0..=w - win {
            let mut score = 0.0;
            for dy in 0..win {
                for dx in 0..win {
                    score += tent[dy] * tent[dx] * energy[(y + dy) * w + x + dx];
                }
            }
            candidates.push(PartBox {
                row: y * stride,
                col: x * stride,
                side: win * stride,
                score: score / norm,
            });
        }
    }
    // stable: equal scores stay in scan order
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));

    let pick = |threshold: f64| {
        let mut kept: Vec<PartBox> = Vec::with_capacity(cfg.num_parts);
        for cand in &candidates {
            if kept.iter().all(|k| k.iou(cand) < threshold) {
                kept.push(*cand);
                if kept.len() == cfg.num_parts {
                    break;
                }
            }
        }
        kept
    };
    let kept = pick(cfg.nms_iou);
    if kept.len() == cfg.num_parts {
        return Ok(kept);
    }
    let relaxed = (cfg.nms_iou + 1.0) / 2.0;
    let kept = pick(relaxed);
    if kept.len() == cfg.num_parts {
        return Ok(kept);
    }
    Err(Error::Proposal(format!(
        "only {} of {} windows survive suppression at IoU {relaxed}",
        kept.len(),
        cfg.num_parts
    )))
}

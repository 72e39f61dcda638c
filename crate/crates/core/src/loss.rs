//! Training objective: `λ1·focal + λ2·L1 + λ3·GIoU` with analytic gradients.
//!
//! Boxes are in normalized center form `(cx, cy, w, h)` relative to the
//! search region. The focal term is the penalty-reduced heatmap variant with
//! Gaussian targets (α = 2, β = 4); a plain binary focal loss is available
//! through [`FocalVariant::Binary`].

use serde::{Deserialize, Serialize};

use crate::bbox::CenterBox;
use crate::error::{Error, Result};
use crate::model::HeadOutput;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.0,
            l1: 1.0,
            giou: 14.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.focal, self.l1, self.giou]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FocalVariant {
    #[default]
    PenaltyReduced,
    Binary,
}

/// Gaussian score target on a `side x side` grid, exactly 1 at the center cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTarget {
    pub side: usize,
    pub center: (usize, usize),
    pub map: Vec<f64>,
}

impl ScoreTarget {
    /// Center cell of a normalized box, clamped to the grid.
    pub fn center_cell(gt: &CenterBox, side: usize) -> (usize, usize) {
        let cell = |v: f64| ((v * side as f64).floor().max(0.0) as usize).min(side - 1);
        (cell(gt.cy), cell(gt.cx))
    }

    /// Radius is a quarter of the box's smaller extent in cells (at least one
    /// cell); the Gaussian uses `sigma = (2r + 1) / 6`.
    pub fn gaussian(gt: &CenterBox, side: usize) -> Self {
        let (ci, cj) = Self::center_cell(gt, side);
        let extent = (gt.w.min(gt.h) * side as f64).max(0.0);
        let radius = (extent / 4.0).max(1.0);
        let sigma = (2.0 * radius + 1.0) / 6.0;
        let map = (0..side * side)
            .map(|idx| {
                let (i, j) = ((idx / side) as f64, (idx % side) as f64);
                let d2 = (i - ci as f64).powi(2) + (j - cj as f64).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Self {
            side,
            center: (ci, cj),
            map,
        }
    }
}

/// A scalar loss and its gradient with respect to each input value.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Box-pair loss with gradients for both boxes, ordered `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLoss {
    pub value: f64,
    pub grad_target: [f64; 4],
    pub grad_pred: [f64; 4],
}

pub fn focal_loss(pred: &[f64], target: &ScoreTarget, variant: FocalVariant) -> Result<LossGrad> {
    if pred.len() != target.map.len() {
        return Err(Error::Shape(format!(
            "focal loss: {} predictions for {} targets",
            pred.len(),
            target.map.len()
        )));
    }
    if let Some(p) = pred.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "focal loss needs predictions strictly inside (0,1), got {p}"
        )));
    }
    let a = FOCAL_ALPHA;
    let n_pos = target.map.iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for ((&p, &y), g) in pred.iter().zip(&target.map).zip(grad.iter_mut()) {
        if y == 1.0 {
            let q = 1.0 - p;
            value -= q.powf(a) * p.ln();
            *g = a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p;
        } else {
            let weight = match variant {
                FocalVariant::PenaltyReduced => (1.0 - y).powf(FOCAL_BETA),
                FocalVariant::Binary => 1.0,
            };
            let l = (1.0 - p).ln();
            value -= weight * p.powf(a) * l;
            *g = -weight * (a * p.powf(a - 1.0) * l - p.powf(a) / (1.0 - p));
        }
    }
    grad.iter_mut().for_each(|g| *g /= n_pos);
    Ok(LossGrad {
        value: value / n_pos,
        grad,
    })
}

/// Mean absolute difference of the four components. Subgradient 0 at ties.
pub fn l1_loss(target: &CenterBox, pred: &CenterBox) -> BoxLoss {
    let (t, p) = (target.to_array(), pred.to_array());
    let mut value = 0.0;
    let mut grad_pred = [0.0; 4];
    for i in 0..4 {
        let d = p[i] - t[i];
        value += d.abs();
        grad_pred[i] = if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    BoxLoss {
        value: value / 4.0,
        grad_target: grad_pred.map(|g| -g),
        grad_pred,
    }
}

/// Corner-coordinate gradient accumulators for one box.
#[derive(Default)]
struct CornerGrad {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl CornerGrad {
    /// Chain rule to `(cx, cy, w, h)`.
    fn to_center(&self) -> [f64; 4] {
        [
            self.x1 + self.x2,
            self.y1 + self.y2,
            0.5 * (self.x2 - self.x1),
            0.5 * (self.y2 - self.y1),
        ]
    }
}

/// `1 - GIoU`, in `[0, 2)`, with gradients for both boxes.
pub fn giou_loss(target: &CenterBox, pred: &CenterBox) -> Result<BoxLoss> {
    for (name, b) in [("target", target), ("prediction", pred)] {
        if !(b.w > 0.0 && b.h > 0.0) || !b.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "degenerate {name} box {b:?}"
            )));
        }
    }
    let (ax1, ay1, ax2, ay2) = pred.corners();
    let (bx1, by1, bx2, by2) = target.corners();
    // areas from corners keep identical boxes at exactly zero loss
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let iw_raw = ax2.min(bx2) - ax1.max(bx1);
    let ih_raw = ay2.min(by2) - ay1.max(by1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclose = cw * ch;
    let iou = inter / union;
    let value = (2.0 - iou - union / enclose).max(0.0);

    let d_inter = -(union + inter) / (union * union) + 1.0 / enclose;
    let d_area = inter / (union * union) - 1.0 / enclose;
    let d_enclose = union / (enclose * enclose);

    let mut ga = CornerGrad::default();
    let mut gb = CornerGrad::default();
    // areas
    ga.x2 += d_area * (ay2 - ay1);
    ga.x1 -= d_area * (ay2 - ay1);
    ga.y2 += d_area * (ax2 - ax1);
    ga.y1 -= d_area * (ax2 - ax1);
    gb.x2 += d_area * (by2 - by1);
    gb.x1 -= d_area * (by2 - by1);
    gb.y2 += d_area * (bx2 - bx1);
    gb.y1 -= d_area * (bx2 - bx1);
    // intersection; ties resolved toward the prediction
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let (d_iw, d_ih) = (d_inter * ih, d_inter * iw);
        if ax2 <= bx2 {
            ga.x2 += d_iw
        } else {
            gb.x2 += d_iw
        }
        if ax1 >= bx1 {
            ga.x1 -= d_iw
        } else {
            gb.x1 -= d_iw
        }
        if ay2 <= by2 {
            ga.y2 += d_ih
        } else {
            gb.y2 += d_ih
        }
        if ay1 >= by1 {
            ga.y1 -= d_ih
        } else {
            gb.y1 -= d_ih
        }
    }
    // enclosing box
    let (d_cw, d_ch) = (d_enclose * ch, d_enclose * cw);
    if ax2 >= bx2 {
        ga.x2 += d_cw
    } else {
        gb.x2 += d_cw
    }
    if ax1 <= bx1 {
        ga.x1 -= d_cw
    } else {
        gb.x1 -= d_cw
    }
    if ay2 >= by2 {
        ga.y2 += d_ch
    } else {
        gb.y2 += d_ch
    }
    if ay1 <= by1 {
        ga.y1 -= d_ch
    } else {
        gb.y1 -= d_ch
    }

    Ok(BoxLoss {
        value,
        grad_target: gb.to_center(),
        grad_pred: ga.to_center(),
    })
}

/// IoU of two normalized center boxes (the first term of GIoU).
pub fn center_iou(a: &CenterBox, b: &CenterBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    /// Box read from the head maps at the ground-truth center cell.
    pub decoded: CenterBox,
    pub grad_score: Vec<f64>,
    pub grad_offset: Vec<f64>,
    pub grad_size: Vec<f64>,
}

/// Reads the predicted box at the ground-truth center cell.
pub fn decode_at_cell(head: &HeadOutput, cell: (usize, usize)) -> CenterBox {
    let (i, j) = cell;
    let c = i * head.side + j;
    let side = head.side as f64;
    CenterBox::new(
        (j as f64 + head.offset[2 * c]) / side,
        (i as f64 + head.offset[2 * c + 1]) / side,
        head.size[2 * c],
        head.size[2 * c + 1],
    )
}

/// Weighted sum of the three terms with gradients on the three head maps.
pub fn total_loss(
    head: &HeadOutput,
    gt: &CenterBox,
    weights: &LossWeights,
    variant: FocalVariant,
) -> Result<TotalLoss> {
    weights.validate()?;
    if !(0.0..1.0).contains(&gt.cx) || !(0.0..1.0).contains(&gt.cy) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth center ({}, {}) outside the search region",
            gt.cx, gt.cy
        )));
    }
    let target = ScoreTarget::gaussian(gt, head.side);
    let focal = focal_loss(&head.score, &target, variant)?;
    let decoded = decode_at_cell(head, target.center);
    let l1 = l1_loss(gt, &decoded);
    let giou = giou_loss(gt, &decoded)?;

    let (i, j) = target.center;
    let c = i * head.side + j;
    let side = head.side as f64;
    let box_grad: Vec<f64> = (0..4)
        .map(|k| weights.l1 * l1.grad_pred[k] + weights.giou * giou.grad_pred[k])
        .collect();
    let mut grad_offset = vec![0.0; head.offset.len()];
    let mut grad_size = vec![0.0; head.size.len()];
    grad_offset[2 * c] = box_grad[0] / side;
    grad_offset[2 * c + 1] = box_grad[1] / side;
    grad_size[2 * c] = box_grad[2];
    grad_size[2 * c + 1] = box_grad[3];

    Ok(TotalLoss {
        value: weights.focal * focal.value + weights.l1 * l1.value + weights.giou * giou.value,
        focal: focal.value,
        l1: l1.value,
        giou: giou.value,
        decoded,
        grad_score: focal.grad.iter().map(|g| weights.focal * g).collect(),
        grad_offset,
        grad_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-4;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn focal_perfect_limit() {
        let gt = CenterBox::new(0.53, 0.47, 0.2, 0.2);
        let target = ScoreTarget::gaussian(&gt, 16);
        assert_eq!(target.map.iter().filter(|&&y| y == 1.0).count(), 1);
        let pred: Vec<f64> = target
            .map
            .iter()
            .map(|&y| if y == 1.0 { 1.0 - 1e-12 } else { 1e-12 })
            .collect();
        let l = focal_loss(&pred, &target, FocalVariant::PenaltyReduced).unwrap();
        assert!(l.value < 1e-10, "{}", l.value);
        let mut bad = pred.clone();
        bad[0] = 0.0;
        assert!(focal_loss(&bad, &target, FocalVariant::PenaltyReduced).is_err());
        bad[0] = 1.0;
        assert!(focal_loss(&bad, &target, FocalVariant::Binary).is_err());
    }

    #[test]
    fn focal_symmetry() {
        let target = ScoreTarget {
            side: 2,
            center: (0, 0),
            map: vec![1.0, 0.3, 0.3, 0.0],
        };
        let a = focal_loss(&[0.6, 0.2, 0.7, 0.1], &target, FocalVariant::PenaltyReduced).unwrap();
        let b = focal_loss(&[0.6, 0.7, 0.2, 0.1], &target, FocalVariant::PenaltyReduced).unwrap();
        assert!((a.value - b.value).abs() < 1e-14);
        assert_eq!((a.grad[1], a.grad[2]), (b.grad[2], b.grad[1]));
    }

    #[test]
    fn focal_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in [FocalVariant::PenaltyReduced, FocalVariant::Binary] {
            let gt = CenterBox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), 0.3, 0.25);
            let target = ScoreTarget::gaussian(&gt, 16);
            let pred: Vec<f64> = (0..256).map(|_| rng.gen_range(0.05..0.95)).collect();
            let l = focal_loss(&pred, &target, variant).unwrap();
            for i in 0..256 {
                let mut p = pred.clone();
                p[i] += H;
                let up = focal_loss(&p, &target, variant).unwrap().value;
                p[i] -= 2.0 * H;
                let dn = focal_loss(&p, &target, variant).unwrap().value;
                let fd = (up - dn) / (2.0 * H);
                assert!(
                    rel_err(l.grad[i], fd) < 1e-4,
                    "cell {i}: {} vs {fd}",
                    l.grad[i]
                );
            }
        }
    }

    #[test]
    fn l1_examples() {
        let a = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(l1_loss(&a, &a).value, 0.0);
        assert_eq!(l1_loss(&a, &a).grad_pred, [0.0; 4]);
        let b = CenterBox::new(0.5, 0.5, 0.2, 0.4);
        assert!((l1_loss(&a, &b).value - 0.05).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let a = CenterBox::new(0.31, 0.77, 0.13, 0.29);
        assert_eq!(giou_loss(&a, &a).unwrap().value, 0.0);
        let far = CenterBox::new(1e6, 0.77, 0.13, 0.29);
        let l = giou_loss(&a, &far).unwrap().value;
        assert!(l < 2.0 && l > 2.0 - 1e-5, "{l}");
        assert!(giou_loss(&a, &CenterBox::new(0.5, 0.5, 0.0, 0.1)).is_err());
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> (CenterBox, CenterBox) {
        let b = CenterBox::new(
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.05..0.5),
            rng.gen_range(0.05..0.5),
        );
        let p = CenterBox::new(
            b.cx + rng.gen_range(-0.2..0.2),
            b.cy + rng.gen_range(-0.2..0.2),
            rng.gen_range(0.05..0.5),
            rng.gen_range(0.05..0.5),
        );
        (b, p)
    }

    #[test]
    fn giou_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (b, p) = random_pair(&mut rng);
            let l = giou_loss(&b, &p).unwrap();
            for k in 0..4 {
                let f = |d: f64, which: bool| {
                    let mut bb = b.to_array();
                    let mut pp = p.to_array();
                    if which {
                        pp[k] += d
                    } else {
                        bb[k] += d
                    }
                    giou_loss(&CenterBox::from_array(bb), &CenterBox::from_array(pp))
                        .unwrap()
                        .value
                };
                let fd_p = (f(H, true) - f(-H, true)) / (2.0 * H);
                let fd_b = (f(H, false) - f(-H, false)) / (2.0 * H);
                assert!(
                    rel_err(l.grad_pred[k], fd_p) < 1e-4 || (l.grad_pred[k] - fd_p).abs() < 1e-9
                );
                assert!(
                    rel_err(l.grad_target[k], fd_b) < 1e-4
                        || (l.grad_target[k] - fd_b).abs() < 1e-9
                );
            }
        }
    }

    fn head_from(rng: &mut ChaCha8Rng) -> HeadOutput {
        HeadOutput {
            side: 16,
            score: (0..256).map(|_| rng.gen_range(0.02..0.98)).collect(),
            offset: (0..512).map(|_| rng.gen_range(0.05..0.95)).collect(),
            size: (0..512).map(|_| rng.gen_range(0.05..0.6)).collect(),
        }
    }

    #[test]
    fn total_loss_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = head_from(&mut rng);
        let gt = CenterBox::new(0.4, 0.6, 0.2, 0.3);
        let w = LossWeights::default();
        let base = total_loss(&head, &gt, &w, FocalVariant::PenaltyReduced).unwrap();
        let doubled = total_loss(
            &head,
            &gt,
            &LossWeights { giou: 28.0, ..w },
            FocalVariant::PenaltyReduced,
        )
        .unwrap();
        assert!((doubled.value - base.value - 14.0 * base.giou).abs() < 1e-12);
        assert!((base.value - (base.focal + base.l1 + 14.0 * base.giou)).abs() < 1e-12);
        assert!(total_loss(
            &head,
            &CenterBox::new(1.2, 0.5, 0.1, 0.1),
            &w,
            FocalVariant::PenaltyReduced
        )
        .is_err());
    }

    #[test]
    fn total_loss_on_exact_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = head_from(&mut rng);
        let gt = CenterBox::new((6.0 + 0.25) / 16.0, (8.0 + 0.5) / 16.0, 0.25, 0.375);
        let (i, j) = ScoreTarget::center_cell(&gt, 16);
        let c = i * 16 + j;
        head.offset[2 * c] = 0.25;
        head.offset[2 * c + 1] = 0.5;
        head.size[2 * c] = 0.25;
        head.size[2 * c + 1] = 0.375;
        let l = total_loss(
            &head,
            &gt,
            &LossWeights::default(),
            FocalVariant::PenaltyReduced,
        )
        .unwrap();
        assert_eq!(l.l1, 0.0);
        assert_eq!(l.giou, 0.0);
        assert_eq!(l.value, l.focal);
    }

    proptest! {
        #[test]
        fn giou_bounded_and_translation_invariant(seed in 0u64..2000, dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, p) = random_pair(&mut rng);
            let l = giou_loss(&b, &p).unwrap();
            prop_assert!(l.value >= 0.0 && l.value < 2.0);
            let shift = |x: CenterBox| CenterBox::new(x.cx + dx, x.cy + dy, x.w, x.h);
            let m = giou_loss(&shift(b), &shift(p)).unwrap();
            prop_assert!((l.value - m.value).abs() < 1e-9);
            prop_assert!((l.grad_pred[0] - m.grad_pred[0]).abs() < 1e-6);
            prop_assert!((l.grad_pred[1] - m.grad_pred[1]).abs() < 1e-6);
        }
    }
}

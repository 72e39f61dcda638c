//! Built-in verification suites run by `ceutrack selftest`.
//!
//! Each suite compares the library against an independent reference
//! (central finite differences, naive attention, pixel rasterization, a
//! dense histogram) and reports one [`CheckResult`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bbox::CenterBox;
use crate::error::Result;
use crate::event_io::{EventPoint, EventWindow, Polarity};
use crate::loss::{
    decode_at_cell, focal_loss, giou_loss, l1_loss, total_loss, BoxLoss, FocalVariant, LossWeights,
    ScoreTarget,
};
use crate::model::ops::{Attention, Linear, Matrix};
use crate::model::{
    forward_backbone, tracking_head, BackboneInput, HeadOutput, ModelConfig, ModelParams,
};
use crate::repr::Image;
use crate::voxel::{select_top_k, voxelize, GridSpec, Voxel};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const ATTENTION_TOLERANCE: f64 = 1e-6;
pub const RASTER_TOLERANCE: f64 = 1e-3;
/// Raster cells per pixel in the rasterization oracle.
pub const RASTER_SCALE: f64 = 1000.0;
/// Side of the search region, in pixels, used to scale oracle boxes.
const RASTER_REGION_PX: f64 = 256.0;

/// Denominator floor for relative errors of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

pub type GiouFn = fn(&CenterBox, &CenterBox) -> Result<BoxLoss>;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub worst: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    /// When set, the model used by the gradient suite gets this much uniform
    /// weight noise before its head maps are differentiated.
    pub perturb: Option<f64>,
    pub giou: GiouFn,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            perturb: None,
            giou: giou_loss,
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn check(name: &str, cases: usize, worst: f64, tol: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: worst.is_finite() && worst <= tol,
        cases,
        worst,
        detail,
    }
}

pub fn run_all(opts: &SelftestOptions) -> Vec<CheckResult> {
    let mut out = gradient_suite(opts);
    out.push(attention_suite(opts.seed));
    out.push(raster_suite(opts.seed, 200, opts.giou));
    out.push(histogram_suite(opts.seed, 100));
    out
}

fn fd<F: Fn(f64) -> f64>(f: F) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

fn random_box_pair(rng: &mut ChaCha8Rng) -> (CenterBox, CenterBox) {
    let b = CenterBox::new(
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.05..0.5),
        rng.gen_range(0.05..0.5),
    );
    let p = CenterBox::new(
        b.cx + rng.gen_range(-0.25..0.25),
        b.cy + rng.gen_range(-0.25..0.25),
        rng.gen_range(0.05..0.5),
        rng.gen_range(0.05..0.5),
    );
    (b, p)
}

/// Head maps of a small model, optionally with perturbed weights.
fn model_head(seed: u64, perturb: f64) -> Result<HeadOutput> {
    let config = ModelConfig {
        n_layers: 2,
        ..ModelConfig::toy(8, 2)
    };
    let mut params = ModelParams::init(&config, seed)?;
    params.perturb(seed ^ 0x5eed, perturb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = |side: usize| {
        let data = (0..side * side * 3)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        Image::from_data(side, side, 3, data)
    };
    let input = BackboneInput {
        frame_template: image(config.template_px)?,
        frame_search: image(config.search_px)?,
        voxel_template: select_top_k(&[] as &[Voxel], config.template_k())?,
        voxel_search: select_top_k(&[] as &[Voxel], config.search_k())?,
    };
    tracking_head(&forward_backbone(&input, &params)?, &params.head, &config)
}

/// True when a component or corner of `b` lies within `10 * FD_STEP` of the
/// matching component or any corner of `a`.
fn near_kink(a: &CenterBox, b: &CenterBox) -> bool {
    let margin = 10.0 * FD_STEP;
    let (a4, b4) = (a.to_array(), b.to_array());
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let close = |u: &[f64], v: &[f64]| u.iter().any(|x| v.iter().any(|y| (x - y).abs() < margin));
    (0..4).any(|k| (a4[k] - b4[k]).abs() < margin)
        || close(&[ax1, ax2], &[bx1, bx2])
        || close(&[ay1, ay2], &[by1, by2])
}

fn random_head(rng: &mut ChaCha8Rng, side: usize) -> HeadOutput {
    HeadOutput {
        side,
        score: (0..side * side)
            .map(|_| rng.gen_range(0.02..0.98))
            .collect(),
        offset: (0..2 * side * side)
            .map(|_| rng.gen_range(0.05..0.95))
            .collect(),
        size: (0..2 * side * side)
            .map(|_| rng.gen_range(0.05..0.6))
            .collect(),
    }
}

/// Finite-difference checks of the focal, L1, GIoU and total losses on 100
/// seeded instances each. L1 instances keep every component at least
/// `10 * FD_STEP` away from its kink.
pub fn gradient_suite(opts: &SelftestOptions) -> Vec<CheckResult> {
    const N: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for n in 0..N {
        let variant = if n % 2 == 0 {
            FocalVariant::PenaltyReduced
        } else {
            FocalVariant::Binary
        };
        let gt = CenterBox::new(
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.05..0.5),
            rng.gen_range(0.05..0.5),
        );
        let target = ScoreTarget::gaussian(&gt, 16);
        let pred: Vec<f64> = (0..256).map(|_| rng.gen_range(0.02..0.98)).collect();
        let Ok(l) = focal_loss(&pred, &target, variant) else {
            return vec![check(
                "gradient/focal",
                n,
                f64::NAN,
                0.0,
                "focal loss failed".into(),
            )];
        };
        for _ in 0..8 {
            let i = rng.gen_range(0..256);
            let num = fd(|d| {
                let mut p = pred.clone();
                p[i] += d;
                focal_loss(&p, &target, variant)
                    .map(|l| l.value)
                    .unwrap_or(f64::NAN)
            });
            worst = worst.max(rel_err(l.grad[i], num));
        }
    }
    out.push(check(
        "gradient/focal",
        N,
        worst,
        FD_TOLERANCE,
        "8 random cells per instance".into(),
    ));

    let mut worst = 0.0f64;
    for _ in 0..N {
        let t = CenterBox::new(
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        );
        let mut p = t.to_array();
        for v in p.iter_mut() {
            let delta: f64 = rng.gen_range(10.0 * FD_STEP..0.2);
            *v += if rng.gen_bool(0.5) { delta } else { -delta };
        }
        let p = CenterBox::from_array(p);
        let l = l1_loss(&t, &p);
        for k in 0..4 {
            let shift = |d: f64, which: bool| {
                let (mut a, mut b) = (t.to_array(), p.to_array());
                if which {
                    b[k] += d
                } else {
                    a[k] += d
                }
                l1_loss(&CenterBox::from_array(a), &CenterBox::from_array(b)).value
            };
            worst = worst.max(rel_err(l.grad_pred[k], fd(|d| shift(d, true))));
            worst = worst.max(rel_err(l.grad_target[k], fd(|d| shift(d, false))));
        }
    }
    out.push(check(
        "gradient/l1",
        N,
        worst,
        FD_TOLERANCE,
        "kinks excluded".into(),
    ));

    let mut worst = 0.0f64;
    for _ in 0..N {
        let (b, p) = loop {
            let pair = random_box_pair(&mut rng);
            if !near_kink(&pair.0, &pair.1) {
                break pair;
            }
        };
        let Ok(l) = (opts.giou)(&b, &p) else {
            worst = f64::NAN;
            break;
        };
        for k in 0..4 {
            let shift = |d: f64, which: bool| {
                let (mut a, mut c) = (b.to_array(), p.to_array());
                if which {
                    c[k] += d
                } else {
                    a[k] += d
                }
                (opts.giou)(&CenterBox::from_array(a), &CenterBox::from_array(c))
                    .map(|l| l.value)
                    .unwrap_or(f64::NAN)
            };
            worst = worst.max(rel_err(l.grad_pred[k], fd(|d| shift(d, true))));
            worst = worst.max(rel_err(l.grad_target[k], fd(|d| shift(d, false))));
        }
    }
    out.push(check(
        "gradient/giou",
        N,
        worst,
        FD_TOLERANCE,
        "both boxes".into(),
    ));

    let base_head = match opts.perturb {
        Some(eps) => match model_head(opts.seed, eps) {
            Ok(h) => Some(h),
            Err(e) => {
                return {
                    out.push(check(
                        "gradient/total",
                        0,
                        f64::NAN,
                        0.0,
                        format!("model forward failed: {e}"),
                    ));
                    out
                }
            }
        },
        None => None,
    };
    let weights = LossWeights::default();
    let mut worst = 0.0f64;
    let mut linear = true;
    for _ in 0..N {
        // resample until the decoded box is clear of the L1 and GIoU kinks
        let (head, gt, c) = loop {
            let head = base_head
                .clone()
                .unwrap_or_else(|| random_head(&mut rng, 16));
            let gt = CenterBox::new(
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.1..0.5),
                rng.gen_range(0.1..0.5),
            );
            let cell = ScoreTarget::center_cell(&gt, 16);
            if !near_kink(&gt, &decode_at_cell(&head, cell)) {
                break (head, gt, cell.0 * 16 + cell.1);
            }
        };
        let Ok(l) = total_loss(&head, &gt, &weights, FocalVariant::PenaltyReduced) else {
            worst = f64::NAN;
            break;
        };
        let value = |h: &HeadOutput| {
            total_loss(h, &gt, &weights, FocalVariant::PenaltyReduced)
                .map(|l| l.value)
                .unwrap_or(f64::NAN)
        };
        let mut probes: Vec<(usize, usize)> = (0..4).map(|_| (0, rng.gen_range(0..256))).collect();
        probes.extend([
            (0, c),
            (1, 2 * c),
            (1, 2 * c + 1),
            (2, 2 * c),
            (2, 2 * c + 1),
        ]);
        for (map, i) in probes {
            let num = fd(|d| {
                let mut h = head.clone();
                match map {
                    0 => h.score[i] += d,
                    1 => h.offset[i] += d,
                    _ => h.size[i] += d,
                }
                value(&h)
            });
            let ana = match map {
                0 => l.grad_score[i],
                1 => l.grad_offset[i],
                _ => l.grad_size[i],
            };
            worst = worst.max(rel_err(ana, num));
        }
        let scaled = LossWeights {
            focal: 2.0,
            l1: 3.0,
            giou: 28.0,
        };
        if let Ok(s) = total_loss(&head, &gt, &scaled, FocalVariant::PenaltyReduced) {
            let expect = 2.0 * l.focal + 3.0 * l.l1 + 28.0 * l.giou;
            linear &= (s.focal, s.l1, s.giou) == (l.focal, l.l1, l.giou)
                && (s.value - expect).abs() <= 1e-12 * expect.abs().max(1.0);
        } else {
            linear = false;
        }
    }
    let source = if opts.perturb.is_some() {
        "perturbed model head"
    } else {
        "random head maps"
    };
    let mut total = check(
        "gradient/total",
        N,
        worst,
        FD_TOLERANCE,
        format!("{source}; weight linearity {linear}"),
    );
    total.passed &= linear;
    out.push(total);
    out
}

fn random_linear(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Linear {
    Linear {
        d_in,
        d_out,
        weight: (0..d_in * d_out)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect(),
        bias: (0..d_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Direct triple loop: per head, scores, softmax by max subtraction, weighted sum.
fn naive_attention(att: &Attention, xq: &Matrix, xkv: &Matrix) -> Vec<f64> {
    let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
        (0..l.d_out)
            .map(|o| {
                l.bias[o]
                    + (0..l.d_in)
                        .map(|i| x[i] * l.weight[i * l.d_out + o])
                        .sum::<f64>()
            })
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..xq.rows).map(|i| lin(&att.q, xq.row(i))).collect();
    let k: Vec<Vec<f64>> = (0..xkv.rows).map(|i| lin(&att.k, xkv.row(i))).collect();
    let v: Vec<Vec<f64>> = (0..xkv.rows).map(|i| lin(&att.v, xkv.row(i))).collect();
    let dim = att.q.d_out;
    let dk = dim / att.n_heads;
    let mut out = Vec::with_capacity(xq.rows * dim);
    for qi in &q {
        let mut ctx = vec![0.0; dim];
        for h in 0..att.n_heads {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| {
                    (0..dk)
                        .map(|d| qi[h * dk + d] * kj[h * dk + d])
                        .sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for d in 0..dk {
                    ctx[h * dk + d] += ej / z * v[j][h * dk + d];
                }
            }
        }
        out.extend(lin(&att.proj, &ctx));
    }
    out
}

/// Attention against a naive loop (C = 8, two heads, up to 16 tokens, 20
/// seeds) plus softmax row sums.
pub fn attention_suite(seed: u64) -> CheckResult {
    let mut worst = 0.0f64;
    let mut row_sum_err = 0.0f64;
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        let att = Attention {
            n_heads: 2,
            q: random_linear(&mut rng, 8, 8),
            k: random_linear(&mut rng, 8, 8),
            v: random_linear(&mut rng, 8, 8),
            proj: random_linear(&mut rng, 8, 8),
        };
        let sq = rng.gen_range(1..=16);
        let skv = rng.gen_range(1..=16);
        let xq = random_matrix(&mut rng, sq, 8);
        let xkv = random_matrix(&mut rng, skv, 8);
        let (Ok(got), Ok(w)) = (att.forward(&xq, &xkv), att.weights(&xq, &xkv)) else {
            return check(
                "attention/naive",
                s as usize,
                f64::NAN,
                0.0,
                "forward failed".into(),
            );
        };
        for (a, b) in got.data.iter().zip(naive_attention(&att, &xq, &xkv)) {
            worst = worst.max(rel_err(*a, b));
        }
        for m in &w {
            for i in 0..m.rows {
                row_sum_err = row_sum_err.max((m.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let mut r = check(
        "attention/naive",
        20,
        worst,
        ATTENTION_TOLERANCE,
        format!("max softmax row-sum error {row_sum_err:.2e}"),
    );
    r.passed &= row_sum_err <= ATTENTION_TOLERANCE;
    r
}

/// Rasterized IoU and GIoU of boxes given in pixels: centers of a grid with
/// `RASTER_SCALE` cells per pixel are counted inside each box; the enclosing
/// box uses its exact area.
pub fn raster_iou_giou(a: &CenterBox, b: &CenterBox) -> (f64, f64) {
    let px = |v: f64| (v * RASTER_SCALE - 0.5).ceil() as i64;
    let span = |lo: f64, hi: f64| (px(lo), px(hi));
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let (axa, axb) = span(ax1, ax2);
    let (aya, ayb) = span(ay1, ay2);
    let (bxa, bxb) = span(bx1, bx2);
    let (bya, byb) = span(by1, by2);
    let area_a = ((axb - axa) * (ayb - aya)) as f64;
    let area_b = ((bxb - bxa) * (byb - bya)) as f64;
    let ix = (axb.min(bxb) - axa.max(bxa)).max(0);
    let iy = (ayb.min(byb) - aya.max(bya)).max(0);
    let inter = (ix * iy) as f64;
    let union = area_a + area_b - inter;
    let enclose =
        (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1)) * RASTER_SCALE * RASTER_SCALE;
    let iou = inter / union;
    (iou, iou - (enclose - union) / enclose)
}

/// Analytic GIoU against rasterization on `n` random pairs, plus range and
/// identity checks.
pub fn raster_suite(seed: u64, n: usize, giou: GiouFn) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut in_range = true;
    for _ in 0..n {
        let (b, p) = random_box_pair(&mut rng);
        let (Ok(l), Ok(same)) = (giou(&b, &p), giou(&b, &b)) else {
            return check("giou/raster", 0, f64::NAN, 0.0, "giou failed".into());
        };
        let px = |x: CenterBox| CenterBox::from_array(x.to_array().map(|v| v * RASTER_REGION_PX));
        let (_, g) = raster_iou_giou(&px(b), &px(p));
        worst = worst.max(((1.0 - l.value) - g).abs());
        in_range &= (0.0..2.0).contains(&l.value) && same.value == 0.0;
    }
    let mut r = check(
        "giou/raster",
        n,
        worst,
        RASTER_TOLERANCE,
        format!("range and identity {in_range}"),
    );
    r.passed &= in_range;
    r
}

fn random_window(rng: &mut ChaCha8Rng) -> EventWindow {
    let (w, h) = (rng.gen_range(1..400u16), rng.gen_range(1..300u16));
    let t_start = rng.gen_range(0..1_000_000u64);
    let t_end = t_start + rng.gen_range(1..100_000u64);
    let n = rng.gen_range(0..2000);
    let mut events: Vec<EventPoint> = (0..n)
        .map(|_| EventPoint {
            t: rng.gen_range(t_start..t_end),
            x: rng.gen_range(0..w),
            y: rng.gen_range(0..h),
            p: if rng.gen_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
        })
        .collect();
    events.sort_by_key(|e| e.t);
    EventWindow {
        events,
        t_start,
        t_end,
        sensor_w: w,
        sensor_h: h,
    }
}

/// Voxel counts against a dense histogram on `n` random windows.
pub fn histogram_suite(seed: u64, n: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..n {
        let win = random_window(&mut rng);
        let (m, nn, tau) = (34, 26, 20);
        let grid = GridSpec::new(m, nn, tau, &win);
        let mut hist = vec![0u32; m * nn * tau];
        let dur = (win.t_end - win.t_start) as f64;
        for e in &win.events {
            let x = ((e.x as f64 * m as f64 / win.sensor_w as f64).floor() as usize).min(m - 1);
            let y = ((e.y as f64 * nn as f64 / win.sensor_h as f64).floor() as usize).min(nn - 1);
            let z = (((e.t - win.t_start) as f64 * tau as f64 / dur).floor() as usize).min(tau - 1);
            hist[(z * nn + y) * m + x] += 1;
        }
        let Ok(set) = voxelize(&win, &grid) else {
            mismatches += 1;
            continue;
        };
        let mut got = vec![0u32; m * nn * tau];
        for v in &set.voxels {
            got[(v.cell.z * nn + v.cell.y) * m + v.cell.x] = v.count;
        }
        if got != hist || set.total_count() != win.events.len() as u64 {
            mismatches += 1;
        }
    }
    check(
        "voxel/histogram",
        n,
        mismatches as f64,
        0.0,
        format!("{mismatches} mismatching windows"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        for r in run_all(&SelftestOptions::default()) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn perturbed_model_gradients_pass() {
        let opts = SelftestOptions {
            perturb: Some(0.05),
            seed: 3,
            ..Default::default()
        };
        for r in gradient_suite(&opts) {
            assert!(r.passed, "{r:?}");
        }
    }

    fn tampered_giou(a: &CenterBox, b: &CenterBox) -> Result<BoxLoss> {
        // enclosing-box penalty dropped
        let mut l = giou_loss(a, b)?;
        l.value = 1.0 - crate::loss::center_iou(a, b);
        Ok(l)
    }

    #[test]
    fn tampered_giou_fails_raster() {
        assert!(!raster_suite(0, 200, tampered_giou).passed);
        assert!(raster_suite(0, 200, giou_loss).passed);
    }

    #[test]
    fn raster_oracle_identity() {
        let a = CenterBox::new(0.5, 0.5, 0.2, 0.3);
        let (iou, g) = raster_iou_giou(&a, &a);
        assert_eq!((iou, g), (1.0, 1.0));
    }
}

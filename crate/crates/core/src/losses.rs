//! Training objectives: focal + dice (20:1) with an IoU-regression term, the
//! one-directional point matching loss, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, Point, NUM_MASKS};
use crate::error::{dim_err, Error, Result};
use crate::image::Mask;
use crate::tape::{sigmoid, CustomOp, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const FOCAL_ALPHA: f32 = 0.25;
pub const FOCAL_WEIGHT: f32 = 20.0;
pub const DICE_EPS: f32 = 1.0;

/// Per-step loss values (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f32,
    pub dice: f32,
    pub iou_head: f32,
    pub seg: f32,
    pub pm: f32,
    pub total: f32,
    pub lambda: f32,
}

/// `total = seg + λ·pm` with `seg = 20·focal + dice + iou_head`.
pub fn total_loss(focal: f32, dice: f32, iou_head: f32, pm: f32, lambda: f32) -> LossBreakdown {
    let seg = FOCAL_WEIGHT * focal + dice + iou_head;
    LossBreakdown { focal, dice, iou_head, seg, pm, total: seg + lambda * pm, lambda }
}

impl LossBreakdown {
    /// Mean over samples, term by term.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f32| (items.iter().map(|l| f(l) as f64).sum::<f64>() / n) as f32;
        LossBreakdown {
            focal: avg(|l| l.focal),
            dice: avg(|l| l.dice),
            iou_head: avg(|l| l.iou_head),
            seg: avg(|l| l.seg),
            pm: avg(|l| l.pm),
            total: avg(|l| l.total),
            lambda: items.first().map(|l| l.lambda).unwrap_or(1.0),
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = −softplus(−x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn check_gt(n: usize, gt: &[f32]) -> Result<()> {
    if n != gt.len() {
        return Err(dim_err!("{n} logits vs {} ground-truth pixels", gt.len()));
    }
    Ok(())
}

/// Mean focal loss value, `γ = 2`.
pub fn focal_value(logits: &[f32], gt: &[f32], alpha: f32) -> Result<f32> {
    check_gt(logits.len(), gt)?;
    let x: Vec<f64> = logits.iter().map(|v| *v as f64).collect();
    Ok(focal_f64(&x, gt, alpha as f64) as f32)
}

fn focal_f64(x: &[f64], gt: &[f32], alpha: f64) -> f64 {
    let mut s = 0.0;
    for (xi, g) in x.iter().zip(gt) {
        let (a, z) = if *g > 0.5 { (alpha, *xi) } else { (1.0 - alpha, -*xi) };
        let logp = log_sigmoid(z);
        let q = 1.0 - logp.exp();
        s += -a * q * q * logp;
    }
    s / x.len().max(1) as f64
}

struct FocalOp {
    gt: Vec<f32>,
    alpha: f64,
}

impl<T: Real> CustomOp<T> for FocalOp {
    fn name(&self) -> &'static str {
        "focal"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let n = x.len().max(1) as f64;
        let go = g[0].to_f64() / n;
        let grad = x
            .iter()
            .zip(&self.gt)
            .map(|(xi, gi)| {
                let xi = xi.to_f64();
                let d = if *gi > 0.5 {
                    let p = sigmoid(xi);
                    let lp = log_sigmoid(xi);
                    self.alpha * (1.0 - p).powi(2) * (2.0 * p * lp - (1.0 - p))
                } else {
                    let p = sigmoid(xi);
                    let l1p = log_sigmoid(-xi);
                    (1.0 - self.alpha) * p.powi(2) * (p - 2.0 * (1.0 - p) * l1p)
                };
                T::from_f64(d * go)
            })
            .collect();
        vec![Some(grad)]
    }
}

/// Focal loss of a logit row against a {0,1} target (mean over pixels).
pub fn focal_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &[f32]) -> Result<Var> {
    check_gt(tape.value(logits).len(), gt)?;
    let x: Vec<f64> = tape.value(logits).data().iter().map(|v| v.to_f64()).collect();
    let v = focal_f64(&x, gt, FOCAL_ALPHA as f64);
    let out = Tensor::from_parts(vec![], vec![T::from_f64(v)]);
    Ok(tape.custom(&[logits], out, Box::new(FocalOp { gt: gt.to_vec(), alpha: FOCAL_ALPHA as f64 })))
}

fn dice_parts(x: &[f64], gt: &[f32]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (xi, g) in x.iter().zip(gt) {
        let p = sigmoid(*xi);
        inter += p * *g as f64;
        sum += p + *g as f64;
    }
    (inter, sum)
}

pub fn dice_value(logits: &[f32], gt: &[f32]) -> Result<f32> {
    check_gt(logits.len(), gt)?;
    let x: Vec<f64> = logits.iter().map(|v| *v as f64).collect();
    let (i, s) = dice_parts(&x, gt);
    let e = DICE_EPS as f64;
    Ok((1.0 - (2.0 * i + e) / (s + e)) as f32)
}

struct DiceOp {
    gt: Vec<f32>,
}

impl<T: Real> CustomOp<T> for DiceOp {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x: Vec<f64> = inputs[0].data().iter().map(|v| v.to_f64()).collect();
        let (i, s) = dice_parts(&x, &self.gt);
        let e = DICE_EPS as f64;
        let den = (s + e) * (s + e);
        let go = g[0].to_f64();
        let grad = x
            .iter()
            .zip(&self.gt)
            .map(|(xi, gi)| {
                let p = sigmoid(*xi);
                let dp = -(2.0 * *gi as f64 * (s + e) - (2.0 * i + e)) / den;
                T::from_f64(go * dp * p * (1.0 - p))
            })
            .collect();
        vec![Some(grad)]
    }
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` with `p = σ(logits)`, `ε = 1`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &[f32]) -> Result<Var> {
    check_gt(tape.value(logits).len(), gt)?;
    let x: Vec<f64> = tape.value(logits).data().iter().map(|v| v.to_f64()).collect();
    let (i, s) = dice_parts(&x, gt);
    let e = DICE_EPS as f64;
    let out = Tensor::from_parts(vec![], vec![T::from_f64(1.0 - (2.0 * i + e) / (s + e))]);
    Ok(tape.custom(&[logits], out, Box::new(DiceOp { gt: gt.to_vec() })))
}

/// IoU of the mask thresholded at logit 0 against a {0,1} target; 1 when
/// both are empty.
pub fn logits_iou(logits: &[f32], gt: &[f32]) -> f32 {
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (x, g) in logits.iter().zip(gt) {
        let (a, b) = (*x > 0.0, *g > 0.5);
        inter += (a && b) as usize;
        uni += (a || b) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f32 / uni as f32
    }
}

/// Which of the three candidate masks receives the mask loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSelect {
    Index(usize),
    /// Smallest `20·focal + dice`; the IoU term then covers all heads.
    Argmin,
    /// Highest predicted IoU.
    HighestIou,
}

/// Tape nodes of `L_seg` for one sample.
#[derive(Clone, Copy, Debug)]
pub struct SegTerms {
    pub focal: Var,
    pub dice: Var,
    pub iou_head: Var,
    pub seg: Var,
    pub selected: usize,
}

/// `L_seg` on `3 × HW` logits and `1 × 3` IoU predictions.
pub fn seg_loss<T: Real>(
    tape: &mut Tape<T>,
    mask_logits: Var,
    iou_pred: Var,
    gt: &Mask,
    select: MaskSelect,
) -> Result<SegTerms> {
    let gt_f = gt.as_f32();
    let hw = gt_f.len();
    if tape.value(mask_logits).len() != NUM_MASKS * hw {
        return Err(dim_err!("{} logits for {NUM_MASKS} masks of {hw} px", tape.value(mask_logits).len()));
    }
    let row = |tape: &Tape<T>, m: usize| -> Vec<f32> {
        tape.value(mask_logits).data()[m * hw..(m + 1) * hw].iter().map(|v| v.to_f32()).collect()
    };
    let ious: Vec<f32> = tape.value(iou_pred).data().iter().map(|v| v.to_f32()).collect();
    let selected = match select {
        MaskSelect::Index(i) if i < NUM_MASKS => i,
        MaskSelect::Index(i) => return Err(Error::Contract(format!("mask index {i} out of range"))),
        MaskSelect::HighestIou => argmax(&ious),
        MaskSelect::Argmin => {
            let mut best = 0;
            let mut best_v = f32::INFINITY;
            for m in 0..NUM_MASKS {
                let r = row(tape, m);
                let v = FOCAL_WEIGHT * focal_value(&r, &gt_f, FOCAL_ALPHA)? + dice_value(&r, &gt_f)?;
                if v < best_v {
                    best_v = v;
                    best = m;
                }
            }
            best
        }
    };
    let logits = tape.slice_rows(mask_logits, selected, selected + 1)?;
    let focal = focal_loss(tape, logits, &gt_f)?;
    let dice = dice_loss(tape, logits, &gt_f)?;

    let heads: Vec<usize> = if select == MaskSelect::Argmin { (0..NUM_MASKS).collect() } else { vec![selected] };
    let mut target = vec![0.0f32; NUM_MASKS];
    let mut weight = vec![0.0f32; NUM_MASKS];
    for &m in &heads {
        target[m] = logits_iou(&row(tape, m), &gt_f);
        weight[m] = 1.0 / heads.len() as f32;
    }
    let t = tape.constant(Tensor::new(&[1, NUM_MASKS], target)?.cast());
    let w = tape.constant(Tensor::new(&[1, NUM_MASKS], weight)?.cast());
    let diff = tape.sub(iou_pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, w)?;
    let iou_head = tape.sum(weighted);

    let f20 = tape.scale(focal, FOCAL_WEIGHT);
    let fd = tape.add(f20, dice)?;
    let seg = tape.add(fd, iou_head)?;
    Ok(SegTerms { focal, dice, iou_head, seg, selected })
}

fn nearest(c: &Point, pred: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in pred.iter().enumerate() {
        let d = (c.x as f64 - q.0).powi(2) + (c.y as f64 - q.1).powi(2);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// `(1/K) Σ_k min_j ‖c_k − c̃_j‖²`, from ground truth to prediction only.
pub fn point_matching_value(gt: &[Point], pred: &[Point]) -> Result<f32> {
    if gt.is_empty() || pred.is_empty() {
        return Err(Error::Input("point matching needs non-empty point sets".into()));
    }
    let p: Vec<(f64, f64)> = pred.iter().map(|q| (q.x as f64, q.y as f64)).collect();
    Ok((gt.iter().map(|c| nearest(c, &p).1).sum::<f64>() / gt.len() as f64) as f32)
}

struct ChamferOp {
    gt: Vec<Point>,
}

impl<T: Real> CustomOp<T> for ChamferOp {
    fn name(&self) -> &'static str {
        "point_matching"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let d = inputs[0].data();
        let pred: Vec<(f64, f64)> = d.chunks(2).map(|c| (c[0].to_f64(), c[1].to_f64())).collect();
        let scale = 2.0 * g[0].to_f64() / self.gt.len() as f64;
        let mut grad = vec![T::ZERO; d.len()];
        for c in &self.gt {
            let (j, _) = nearest(c, &pred);
            grad[2 * j] += T::from_f64(scale * (pred[j].0 - c.x as f64));
            grad[2 * j + 1] += T::from_f64(scale * (pred[j].1 - c.y as f64));
        }
        vec![Some(grad)]
    }
}

/// `L_pm(G, G̃)` with `G̃` a `K' × 2` variable. At exact ties the first
/// nearest point receives the subgradient.
pub fn point_matching_loss<T: Real>(tape: &mut Tape<T>, gt: &[Point], pred: Var) -> Result<Var> {
    let v = tape.value(pred);
    if v.cols() != 2 {
        return Err(dim_err!("predicted points must be K×2, got {:?}", v.shape()));
    }
    if gt.is_empty() || v.is_empty() {
        return Err(Error::Input("point matching needs non-empty point sets".into()));
    }
    let p: Vec<(f64, f64)> = v.data().chunks(2).map(|c| (c[0].to_f64(), c[1].to_f64())).collect();
    let val = gt.iter().map(|c| nearest(c, &p).1).sum::<f64>() / gt.len() as f64;
    let out = Tensor::from_parts(vec![], vec![T::from_f64(val)]);
    Ok(tape.custom(&[pred], out, Box::new(ChamferOp { gt: gt.to_vec() })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[(f32, f32)]) -> Vec<Point> {
        v.iter().map(|(x, y)| Point::new(*x, *y)).collect()
    }

    #[test]
    fn point_matching_examples() {
        let g = pts(&[(0.0, 0.0), (2.0, 0.0)]);
        let p = pts(&[(0.0, 0.0)]);
        assert_eq!(point_matching_value(&g, &p).unwrap(), 2.0);
        assert_eq!(point_matching_value(&p, &g).unwrap(), 0.0);
        assert_eq!(point_matching_value(&g, &g).unwrap(), 0.0);
        assert!(matches!(point_matching_value(&[], &p), Err(Error::Input(_))));
    }

    #[test]
    fn focal_single_pixel() {
        let v = focal_value(&[0.0], &[1.0], 0.25).unwrap();
        assert!((v - 0.043322).abs() < 1e-5, "{v}");
        assert!(focal_value(&[40.0, -40.0], &[1.0, 0.0], 0.25).unwrap() < 1e-12);
    }

    #[test]
    fn focal_swap_symmetry() {
        let x = [0.3f32, -1.2, 2.5];
        let g = [1.0f32, 0.0, 1.0];
        let nx: Vec<f32> = x.iter().map(|v| -v).collect();
        let ng: Vec<f32> = g.iter().map(|v| 1.0 - v).collect();
        let a = focal_value(&x, &g, 0.25).unwrap();
        let b = focal_value(&nx, &ng, 0.75).unwrap();
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn dice_examples() {
        let hard = |m: &[bool]| m.iter().map(|b| if *b { 50.0 } else { -50.0 }).collect::<Vec<f32>>();
        let g: Vec<bool> = (0..400).map(|i| i < 100).collect();
        let p: Vec<bool> = (0..400).map(|i| i < 50).collect();
        let gf: Vec<f32> = g.iter().map(|b| *b as u8 as f32).collect();
        let v = dice_value(&hard(&p), &gf).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-2, "{v}");
        assert!(dice_value(&hard(&g), &gf).unwrap() < 1e-6);
        let disjoint: Vec<bool> = (0..400).map(|i| i >= 300).collect();
        assert!((dice_value(&hard(&disjoint), &gf).unwrap() - 1.0).abs() < 1e-2);
        assert!(matches!(dice_value(&[0.0; 3], &gf), Err(Error::Dimension(_))));
    }

    fn three_masks(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Mask) {
        let gt = Mask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (1..5).contains(&y));
        let logits = Tensor::randn(&[3, 64], 2.0, rng);
        let iou = Tensor::new(&[1, 3], vec![0.2, 0.7, 0.4]).unwrap();
        (logits, iou, gt)
    }

    #[test]
    fn seg_is_literal_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, i, gt) = three_masks(&mut rng);
        for sel in [MaskSelect::Index(0), MaskSelect::Index(2), MaskSelect::Argmin, MaskSelect::HighestIou] {
            let mut tape = Tape::new();
            let lv = tape.constant(l.clone());
            let iv = tape.constant(i.clone());
            let s = seg_loss(&mut tape, lv, iv, &gt, sel).unwrap();
            let (f, d, h, sg) = (
                tape.value(s.focal).item(),
                tape.value(s.dice).item(),
                tape.value(s.iou_head).item(),
                tape.value(s.seg).item(),
            );
            assert!((sg - (20.0 * f + d + h)).abs() <= 1e-6 * sg.abs().max(1.0));
            let bd = total_loss(f, d, h, 0.0, 1.0);
            assert!((bd.seg - sg).abs() <= 1e-6 * sg.abs().max(1.0));
        }
        let mut tape = Tape::new();
        let lv = tape.constant(l.clone());
        let iv = tape.constant(i.clone());
        assert!(matches!(seg_loss(&mut tape, lv, iv, &gt, MaskSelect::Index(3)), Err(Error::Contract(_))));
        let s = seg_loss(&mut tape, lv, iv, &gt, MaskSelect::HighestIou).unwrap();
        assert_eq!(s.selected, 1);
    }

    #[test]
    fn argmin_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (l, i, gt) = three_masks(&mut rng);
            let gf = gt.as_f32();
            let vals: Vec<f32> = (0..3)
                .map(|m| {
                    let r = &l.data()[m * 64..(m + 1) * 64];
                    20.0 * focal_value(r, &gf, 0.25).unwrap() + dice_value(r, &gf).unwrap()
                })
                .collect();
            let want = (0..3).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
            let mut tape = Tape::new();
            let lv = tape.constant(l);
            let iv = tape.constant(i);
            assert_eq!(seg_loss(&mut tape, lv, iv, &gt, MaskSelect::Argmin).unwrap().selected, want);
        }
    }

    #[test]
    fn perfect_mask_and_iou_head() {
        let gt = Mask::from_fn(8, 8, |x, _| x < 4);
        let row: Vec<f32> = gt.data.iter().map(|b| if *b { 30.0 } else { -30.0 }).collect();
        let mut all = row.clone();
        all.extend(&row);
        all.extend(&row);
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::new(&[3, 64], all).unwrap());
        let iv = tape.constant(Tensor::new(&[1, 3], vec![1.0, 1.0, 0.5]).unwrap());
        let s = seg_loss(&mut tape, lv, iv, &gt, MaskSelect::Index(0)).unwrap();
        assert!(tape.value(s.seg).item() < 1e-6);
        let s = seg_loss(&mut tape, lv, iv, &gt, MaskSelect::Index(2)).unwrap();
        assert!((tape.value(s.iou_head).item() - 0.25).abs() < 1e-7);
    }

    #[test]
    fn total_examples() {
        let t = total_loss(0.01, 0.3, 0.0, 0.25, 1.0);
        assert!((t.seg - 0.5).abs() < 1e-7 && (t.total - 0.75).abs() < 1e-7);
        assert_eq!(total_loss(0.01, 0.3, 0.0, 0.25, 0.0).total, t.seg);
        let m = LossBreakdown::mean(&[t, t, t]);
        assert!((m.total - t.total).abs() < 1e-7);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[1, 40], 1.5, &mut rng);
        let gt: Vec<f32> = (0..40).map(|i| (i % 3 == 0) as u8 as f32).collect();
        for which in 0..2 {
            let r = finite_diff_check(
                |t, v| if which == 0 { focal_loss(t, v[0], &gt) } else { dice_loss(t, v[0], &gt) },
                std::slice::from_ref(&x),
                FdOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-3, "{which}: {r:?}");
        }
        let g = pts(&[(1.0, 2.0), (4.0, 4.5), (7.0, 1.0), (3.0, 3.0)]);
        let p = Tensor::new(&[3, 2], vec![1.3, 2.2, 5.0, 4.0, 6.1, 0.2]).unwrap();
        let r = finite_diff_check(|t, v| point_matching_loss(t, &g, v[0]), &[p], FdOptions::default()).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}

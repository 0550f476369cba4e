//! Central-difference gradient oracle.
//!
//! Functions are evaluated at `f64`; parameters arrive as `f32` tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    /// max over probes of |analytic − central| / max(1, |central|)
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes discarded because the function is not smooth inside `[x−h, x+h]`
    /// (ReLU kinks, min-selection ties, thresholded targets).
    pub rejected: usize,
}

impl FdReport {
    pub fn merge(&mut self, other: &FdReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.probes += other.probes;
        self.rejected += other.rejected;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub h: f64,
    pub n_probes: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { h: 1e-3, n_probes: 100, seed: 0 }
    }
}

/// Probes whose stencil fails the smoothness screen by more than this are
/// discarded rather than scored.
const SMOOTH_TOL: f64 = 1e-4;

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::default();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares tape gradients of the scalar `f(params)` with central
/// differences at `n_probes` random coordinates per tensor (every
/// coordinate when a tensor is smaller than that).
pub fn finite_diff_check<F>(f: F, params: &[Tensor], opts: FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let params: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();
    let mut tape = Tape::default();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&params)
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::from_parts(p.shape().to_vec(), vec![0.0; p.len()])))
        .collect();
    drop(tape);

    let f0 = eval(&f, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport::default();
    let mut work = params.clone();
    let h = opts.h;

    for (ti, p) in params.iter().enumerate() {
        let n = p.len();
        let coords: Box<dyn Iterator<Item = usize>> = if n <= opts.n_probes {
            Box::new(0..n)
        } else {
            let picks: Vec<usize> = (0..opts.n_probes * 10).map(|_| rng.random_range(0..n)).collect();
            Box::new(picks.into_iter())
        };
        let target = n.min(opts.n_probes);
        let mut accepted = 0;
        for idx in coords {
            if accepted >= target {
                break;
            }
            let x0 = p.data()[idx];
            let mut at = |delta: f64| -> Result<(f64, f64)> {
                work[ti].data_mut()[idx] = x0 + delta;
                let v = eval(&f, &work);
                work[ti].data_mut()[idx] = x0;
                Ok((delta, v?))
            };
            let (dp, fp) = at(h)?;
            let (dm, fm) = at(-h)?;
            let (dp2, fp2) = at(h / 2.0)?;
            let (dm2, fm2) = at(-h / 2.0)?;
            let central = (fp - fm) / (dp - dm);
            let central_half = (fp2 - fm2) / (dp2 - dm2);
            let scale = central.abs().max(1.0);
            // Second differences: h·f'' on smooth stretches, so halving h
            // halves them. A kink of slope jump J inside the stencil breaks
            // either this scaling or the agreement of the two central
            // differences, unless J ≲ 7·SMOOTH_TOL.
            let gap = (fp - 2.0 * f0 + fm) / dp;
            let gap_half = (fp2 - 2.0 * f0 + fm2) / dp2;
            if (central - central_half).abs() > SMOOTH_TOL * scale || (gap - 2.0 * gap_half).abs() > SMOOTH_TOL * scale {
                report.rejected += 1;
                continue;
            }
            let a = analytic[ti].data()[idx];
            let err = (a - central).abs() / scale;
            report.max_rel_error = report.max_rel_error.max(err);
            report.probes += 1;
            accepted += 1;
        }
    }
    Ok(report)
}

// ---- suite ------------------------------------------------------------------

/// Largest relative error a check may report.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: FdReport,
}

impl NamedReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE && self.report.probes > 0
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output entry gets a distinct
/// upstream gradient.
fn weighted(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = rand_t(t.value(y).shape(), seed ^ 0x5eed);
    let r = t.constant(r.cast());
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

fn check<F>(out: &mut Vec<NamedReport>, name: &str, inputs: &[Tensor], opts: FdOptions, f: F) -> Result<()>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = finite_diff_check(f, inputs, opts)?;
    out.push(NamedReport { name: name.to_string(), report });
    Ok(())
}

/// Every differentiable tape primitive and custom loss op.
pub fn primitive_checks(opts: FdOptions) -> Result<Vec<NamedReport>> {
    use crate::image::Mask;
    use crate::nn::Bound;
    use crate::tape::SparseMap;
    use std::rc::Rc;

    let mut out = Vec::new();
    let (a, b) = (rand_t(&[6, 5], 1), rand_t(&[5, 7], 2));
    let bt = rand_t(&[7, 5], 3);
    let x = rand_t(&[6, 5], 4);
    let y = rand_t(&[6, 5], 5);
    let row = rand_t(&[5], 6);

    check(&mut out, "matmul", &[a.clone(), b.clone()], opts, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted(t, y, 10)
    })?;
    check(&mut out, "matmul_nt", &[a.clone(), bt], opts, |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weighted(t, y, 11)
    })?;
    check(&mut out, "transpose", std::slice::from_ref(&a), opts, |t, v| {
        let y = t.transpose(v[0]);
        weighted(t, y, 12)
    })?;
    check(&mut out, "add", &[x.clone(), y.clone()], opts, |t, v| {
        let z = t.add(v[0], v[1])?;
        weighted(t, z, 13)
    })?;
    check(&mut out, "sub", &[x.clone(), y.clone()], opts, |t, v| {
        let z = t.sub(v[0], v[1])?;
        weighted(t, z, 14)
    })?;
    check(&mut out, "mul", &[x.clone(), y.clone()], opts, |t, v| {
        let z = t.mul(v[0], v[1])?;
        weighted(t, z, 15)
    })?;
    check(&mut out, "add_row", &[x.clone(), row.clone()], opts, |t, v| {
        let z = t.add_row(v[0], v[1])?;
        weighted(t, z, 16)
    })?;
    check(&mut out, "scale", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.scale(v[0], -1.7);
        weighted(t, z, 17)
    })?;
    check(&mut out, "add_scalar", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.add_scalar(v[0], 0.3);
        let z = t.mul(z, z)?;
        weighted(t, z, 18)
    })?;
    check(&mut out, "relu", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.relu(v[0]);
        weighted(t, z, 19)
    })?;
    check(&mut out, "sigmoid", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.sigmoid(v[0]);
        weighted(t, z, 20)
    })?;
    check(&mut out, "softmax", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.softmax(v[0]);
        weighted(t, z, 21)
    })?;
    let gain = rand_t(&[5], 7);
    check(&mut out, "layer_norm", &[x.clone(), gain, row.clone()], opts, |t, v| {
        let z = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted(t, z, 22)
    })?;
    check(&mut out, "sum", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.mul(v[0], v[0])?;
        Ok(t.sum(z))
    })?;
    check(&mut out, "mean", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.mul(v[0], v[0])?;
        Ok(t.mean(z))
    })?;
    check(&mut out, "slice_cols", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.slice_cols(v[0], 1, 4)?;
        weighted(t, z, 23)
    })?;
    check(&mut out, "concat_cols", &[x.clone(), a.clone()], opts, |t, v| {
        let z = t.concat_cols(&[v[0], v[1]])?;
        weighted(t, z, 24)
    })?;
    check(&mut out, "slice_rows", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.slice_rows(v[0], 2, 5)?;
        weighted(t, z, 25)
    })?;
    check(&mut out, "concat_rows", &[x.clone(), y.clone()], opts, |t, v| {
        let z = t.concat_rows(&[v[0], v[1]])?;
        weighted(t, z, 26)
    })?;
    check(&mut out, "reshape", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.reshape(v[0], &[5, 6])?;
        weighted(t, z, 27)
    })?;
    let map = Rc::new(SparseMap {
        n_in: 6,
        rows: vec![vec![(0, 0.25), (3, 0.75)], vec![(5, 1.0)], vec![(1, 0.1), (2, 0.2), (4, 0.7)], vec![(0, 0.5), (0, 0.5)]],
    });
    check(&mut out, "sparse_mix", std::slice::from_ref(&x), opts, move |t, v| {
        let z = t.sparse_mix(v[0], map.clone())?;
        weighted(t, z, 28)
    })?;
    check(&mut out, "clamp", std::slice::from_ref(&x), opts, |t, v| {
        let z = t.clamp(v[0], -0.5, 0.8);
        weighted(t, z, 29)
    })?;

    let (wq, wk, wv, wo) = (rand_t(&[5, 8], 30), rand_t(&[5, 8], 31), rand_t(&[5, 8], 32), rand_t(&[8, 5], 33));
    let zb = Tensor::zeros(&[8]);
    let ob = Tensor::zeros(&[5]);
    check(
        &mut out,
        "attention",
        &[x.clone(), y.clone(), wq, wk, wv, wo, zb.clone(), zb.clone(), zb, ob],
        opts,
        |t, v| {
            let names = ["q.w", "k.w", "v.w", "o.w", "q.b", "k.b", "v.b", "o.b"];
            let b = Bound::from_pairs(names.iter().zip(&v[2..]).map(|(n, var)| (format!("a.{n}"), *var)));
            let z = crate::nn::attention(t, &b, "a", v[0], v[1], v[1], 2)?;
            weighted(t, z, 34)
        },
    )?;

    let logits = rand_t(&[64], 40);
    let gt = Mask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (1..7).contains(&y));
    let gtf = gt.as_f32();
    check(&mut out, "focal_loss", std::slice::from_ref(&logits), opts, |t, v| crate::losses::focal_loss(t, v[0], &gtf))?;
    check(&mut out, "dice_loss", std::slice::from_ref(&logits), opts, |t, v| crate::losses::dice_loss(t, v[0], &gtf))?;
    let gt_pts: Vec<crate::backbone::Point> =
        (0..12).map(|i| crate::backbone::Point::new(8.0 + 5.0 * (i as f32 * 0.52).cos(), 8.0 + 4.0 * (i as f32 * 0.52).sin())).collect();
    let pred = Tensor::new(&[9, 2], (0..18).map(|i| 8.0 + ((i * 7) % 11) as f32 * 0.6 - 3.0).collect())?;
    check(&mut out, "point_matching_loss", &[pred], opts, |t, v| {
        crate::losses::point_matching_loss(t, &gt_pts, v[0])
    })?;
    Ok(out)
}

/// The training objective of an adapted model at 16×16, differentiated with
/// respect to every PLM and PMM tensor. `full` adds the backbone decoder and
/// prompt encoder.
pub fn objective_checks(opts: FdOptions, full: bool) -> Result<Vec<NamedReport>> {
    use crate::backbone::{bind_frozen_heads, Backbone, BackboneConfig};
    use crate::image::{GrayImage, Mask};
    use crate::losses::{seg_loss, MaskSelect};
    use crate::nn::{Bound, ParamStore};
    use crate::plm::{forward_adapted_bound, Plm, PlmConfig};
    use crate::pmm::{extract_contour, jitter_points, Pmm, PmmConfig};
    use crate::trainer::point_matching_term;

    let cfg = BackboneConfig::tiny();
    let (size, grid, c) = (cfg.image_size, cfg.grid(), cfg.channels);
    let bb = Backbone::new(cfg)?;
    let plm = Plm::new(PlmConfig::for_channels(c))?;
    let pmm = Pmm::new(PmmConfig { k: 12, ..PmmConfig::for_channels(c) })?;
    let mut params = bb.init(1);
    params.extend(plm.init(2));
    params.extend(pmm.init(3));
    // Zero-initialised output layers would leave upstream tensors with
    // identically zero gradients.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for name in ["plm.mlp.1.w", "plm.mlp.1.b", "pmm.dec.2.w", "pmm.dec.2.b"] {
        let shape = params.get(name)?.shape().to_vec();
        params.insert(name, Tensor::randn(&shape, 0.3, &mut rng));
    }
    let image = GrayImage::new(size, size, (0..size * size).map(|i| ((i * 37) % 101) as f32 / 100.0).collect())?;
    let gt = Mask::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f32 - 7.0, y as f32 - 8.5);
        dx * dx / 20.0 + dy * dy / 12.0 <= 1.0
    });
    let contour = extract_contour(&gt, pmm.cfg.k)?;
    let g_star = jitter_points(&contour, 0.5, size, size, 5);
    let prompt = [crate::backbone::Point::new(7.5, 8.5)];
    let feats = bb.image_features(&params, &image)?;
    let lambda = 1.0f32;

    let objective = |frozen: &ParamStore, names: &[String]| {
        let frozen = frozen.clone();
        let names = names.to_vec();
        let (bb, plm, pmm) = (bb.clone(), plm.clone(), pmm.clone());
        let (gt, contour, g_star, feats) = (gt.clone(), contour.clone(), g_star.clone(), feats.tokens.clone());
        move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let mut b = bind_frozen_heads(&frozen, t);
            b.extend(frozen.subset(crate::plm::NS).bind(t, |_| false));
            b.extend(frozen.subset(crate::pmm::NS).bind(t, |_| false));
            b.extend(Bound::from_pairs(names.iter().cloned().zip(v.iter().copied())));
            let f_i = t.constant(feats.cast());
            let out = forward_adapted_bound(t, &b, &bb, Some(&plm), &frozen, f_i, &prompt)?;
            let seg = seg_loss(t, out.decoder.mask_logits, out.decoder.iou_pred, &gt, MaskSelect::HighestIou)?;
            let pm = point_matching_term(t, &b, &pmm, out.decoder.f_dt, &contour, &g_star, size, grid)?;
            let pm = t.scale(pm, lambda);
            t.add(seg.seg, pm)
        }
    };

    let mut groups = vec![("objective/plm", crate::plm::NS), ("objective/pmm", crate::pmm::NS)];
    if full {
        groups.push(("objective/decoder", "backbone.dec."));
        groups.push(("objective/prompt", "backbone.prompt."));
    }
    let mut out = Vec::new();
    for (label, prefix) in groups {
        let sub = params.subset(prefix);
        let names: Vec<String> = sub.names().cloned().collect();
        let tensors: Vec<Tensor> = sub.iter().map(|(_, t)| t.clone()).collect();
        let f = objective(&params, &names);
        for (i, (name, t)) in names.iter().zip(&tensors).enumerate() {
            // one tensor at a time so each gets its own probe budget
            let others: Vec<Tensor> = tensors.clone();
            let g = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let vars: Vec<Var> = (0..others.len())
                    .map(|j| if j == i { v[0] } else { tape.constant(others[j].cast()) })
                    .collect();
                f(tape, &vars)
            };
            let report = finite_diff_check(g, std::slice::from_ref(t), opts)?;
            out.push(NamedReport { name: format!("{label}:{name}"), report });
        }
    }
    Ok(out)
}

//! Evaluation: IoU, center-prompt mIoU (standard, oracle, refined), the SAM-F
//! blending baseline, prompt-sensitivity maps and heatmap output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{DecoderOutputs, Point, NUM_MASKS};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{center_pixel, GrayImage, Mask};
use crate::nn::ParamStore;
use crate::plm::Segmenter;
use crate::pmm::{refine_mask_twostep, Pmm};
use crate::synth::{encode_pgm, Sample};
use crate::tape::sigmoid;
use crate::tensor::Tensor;

/// `|a ∩ b| / |a ∪ b|`; 1 when both are empty.
pub fn compute_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (x, y) in a.data.iter().zip(&b.data) {
        inter += (*x && *y) as usize;
        uni += (*x || *y) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

/// Pixel centre of the distance-transform maximum.
pub fn center_prompt(mask: &Mask) -> Result<Point> {
    let (x, y) = center_pixel(mask)?;
    Ok(Point::pixel_center(x, y))
}

// ---- SAM-F ------------------------------------------------------------------

pub const SAMF_NAME: &str = "samf.w";
pub const SAMF_STEPS: usize = 500;
pub const SAMF_LR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamFParams {
    pub w1: f64,
    pub w2: f64,
}

/// `w1·M1 + w2·M2 + (1 − w1 − w2)·M3`, clamped to `[0, 1]` after blending.
pub fn samf_blend(w: SamFParams, m: [&[f32]; 3]) -> Result<Vec<f32>> {
    if m[1].len() != m[0].len() || m[2].len() != m[0].len() {
        return Err(crate::error::dim_err!("mask sizes {} / {} / {}", m[0].len(), m[1].len(), m[2].len()));
    }
    let w3 = 1.0 - w.w1 - w.w2;
    Ok((0..m[0].len())
        .map(|i| (w.w1 * m[0][i] as f64 + w.w2 * m[1][i] as f64 + w3 * m[2][i] as f64).clamp(0.0, 1.0) as f32)
        .collect())
}

/// Blend thresholded at 0.5.
pub fn samf_apply(w: SamFParams, m: [&[f32]; 3], width: usize, height: usize) -> Result<Mask> {
    let p = samf_blend(w, m)?;
    Mask::new(width, height, p.iter().map(|v| *v > 0.5).collect())
}

fn probabilities(out: &DecoderOutputs) -> [Vec<f32>; 3] {
    std::array::from_fn(|m| out.mask_logits(m).iter().map(|v| sigmoid(*v)).collect())
}

/// Fits `(w1, w2)` by full-batch gradient descent on the mean dice loss of
/// the clamped blend (the same map `samf_apply` uses), starting from equal
/// weights. Clamped pixels pass no gradient.
pub fn samf_fit_probs(samples: &[([Vec<f32>; 3], Vec<f32>)], steps: usize, lr: f64) -> Result<SamFParams> {
    if samples.is_empty() {
        return Err(Error::Input("SAM-F needs at least one sample".into()));
    }
    let mut w = [1.0 / 3.0, 1.0 / 3.0];
    let n = samples.len() as f64;
    for _ in 0..steps {
        let mut grad = [0.0f64; 2];
        for (m, g) in samples {
            let blend: Vec<f64> = (0..g.len())
                .map(|i| w[0] * m[0][i] as f64 + w[1] * m[1][i] as f64 + (1.0 - w[0] - w[1]) * m[2][i] as f64)
                .collect();
            let inside: Vec<bool> = blend.iter().map(|p| (0.0..=1.0).contains(p)).collect();
            let blend: Vec<f64> = blend.iter().map(|p| p.clamp(0.0, 1.0)).collect();
            let inter: f64 = blend.iter().zip(g).map(|(p, t)| p * *t as f64).sum();
            let s: f64 = blend.iter().sum::<f64>() + g.iter().map(|t| *t as f64).sum::<f64>();
            let den = (s + 1.0) * (s + 1.0);
            for i in (0..g.len()).filter(|i| inside[*i]) {
                let dp = -(2.0 * g[i] as f64 * (s + 1.0) - (2.0 * inter + 1.0)) / den;
                grad[0] += dp * (m[0][i] - m[2][i]) as f64 / n;
                grad[1] += dp * (m[1][i] - m[2][i]) as f64 / n;
            }
        }
        w[0] -= lr * grad[0];
        w[1] -= lr * grad[1];
    }
    Ok(SamFParams { w1: w[0], w2: w[1] })
}

/// Fits SAM-F on center prompts of the frozen backbone and returns a
/// checkpoint carrying the two weights.
pub fn samf_fit(backbone: &Checkpoint, data: &[Sample]) -> Result<(Checkpoint, SamFParams)> {
    let seg = Segmenter { backbone: backbone.backbone()?, plm: None, params: backbone.params.subset(crate::backbone::NS) };
    let mut prepared = Vec::with_capacity(data.len());
    for s in data {
        let out = seg.predict(&s.image, &[center_prompt(&s.mask)?])?;
        prepared.push((probabilities(&out), s.mask.as_f32()));
    }
    let w = samf_fit_probs(&prepared, SAMF_STEPS, SAMF_LR)?;
    let mut ck = backbone.clone();
    ck.params = seg.params.clone();
    ck.params.insert(SAMF_NAME, Tensor::new(&[2], vec![w.w1 as f32, w.w2 as f32])?);
    ck.partition = ck.params.names().map(|n| (n.clone(), if n == SAMF_NAME { crate::checkpoint::Role::Trainable } else { crate::checkpoint::Role::Frozen })).collect();
    Ok((ck, w))
}

fn samf_weights(params: &ParamStore) -> Option<SamFParams> {
    params.get(SAMF_NAME).ok().map(|t| SamFParams { w1: t.data()[0] as f64, w2: t.data()[1] as f64 })
}

// ---- mIoU ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub oracle: bool,
    pub refine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub instance_id: String,
    pub task: String,
    pub standard: f64,
    pub oracle: Option<f64>,
    pub refined: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub count: usize,
    pub standard: f64,
    pub oracle: Option<f64>,
    pub refined: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, TaskScores>,
    pub count: usize,
    pub config_hash: String,
    pub checkpoint_id: String,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    /// Standard mIoU over all samples.
    pub fn miou(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.standard))
    }

    pub fn oracle_miou(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.oracle).collect::<Option<Vec<_>>>().map(|v| mean(v.into_iter()))
    }

    pub fn refined_miou(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.refined).collect::<Option<Vec<_>>>().map(|v| mean(v.into_iter()))
    }

    /// Oracle ≥ standard for every stored sample.
    pub fn oracle_dominates(&self) -> bool {
        self.samples.iter().all(|s| s.oracle.is_none_or(|o| o >= s.standard))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// The mask a model commits to in standard mode: the SAM-F blend when the
/// checkpoint carries weights, otherwise the highest-confidence candidate.
pub fn standard_mask(out: &DecoderOutputs, samf: Option<SamFParams>, size: usize) -> Result<Mask> {
    match samf {
        Some(w) => {
            let p = probabilities(out);
            samf_apply(w, [&p[0], &p[1], &p[2]], size, size)
        }
        None => Ok(Mask::from_logits(size, size, out.mask_logits(out.best_mask()))),
    }
}

/// Refines `mask` with the PMM; empty or degenerate masks pass through.
pub fn refine_or_keep(pmm: &Pmm, params: &ParamStore, mask: &Mask, f_dt: &Tensor, grid: usize) -> Result<Mask> {
    match refine_mask_twostep(pmm, params, mask, f_dt, grid) {
        Ok(m) => Ok(m),
        Err(Error::Input(_)) | Err(Error::Degenerate(_)) => Ok(mask.clone()),
        Err(e) => Err(e),
    }
}

fn config_hash(ck: &Checkpoint, opts: &EvalOptions) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&ck.config).expect("config serializes"));
    h.update(serde_json::to_vec(opts).expect("options serialize"));
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Center-prompt evaluation of `ck` on `data`.
pub fn eval_miou(ck: &Checkpoint, data: &[Sample], opts: EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let seg = ck.segmenter()?;
    let pmm = if opts.refine {
        Some(ck.pmm()?.ok_or_else(|| Error::Config("refinement requested but the checkpoint has no PMM".into()))?)
    } else {
        None
    };
    let samf = samf_weights(&ck.params);
    let size = seg.backbone.cfg.image_size;
    let grid = seg.backbone.cfg.grid();
    let mut samples = Vec::with_capacity(data.len());
    for s in data {
        let out = seg.predict(&s.image, &[center_prompt(&s.mask)?])?;
        let pred = standard_mask(&out, samf, size)?;
        let standard = compute_iou(&pred, &s.mask)?;
        let oracle = if opts.oracle {
            let mut best = standard;
            for m in 0..NUM_MASKS {
                best = best.max(compute_iou(&Mask::from_logits(size, size, out.mask_logits(m)), &s.mask)?);
            }
            Some(best)
        } else {
            None
        };
        let refined = match &pmm {
            Some(p) => Some(compute_iou(&refine_or_keep(p, &ck.params, &pred, &out.f_dt, grid)?, &s.mask)?),
            None => None,
        };
        samples.push(SampleScore { instance_id: s.instance_id.clone(), task: s.task.clone(), standard, oracle, refined });
    }
    let mut tasks = BTreeMap::new();
    let mut labels: Vec<&str> = samples.iter().map(|s| s.task.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    for t in labels {
        let of: Vec<&SampleScore> = samples.iter().filter(|s| s.task == t).collect();
        let opt_mean = |f: fn(&SampleScore) -> Option<f64>| of.iter().map(|s| f(s)).collect::<Option<Vec<_>>>().map(|v| mean(v.into_iter()));
        tasks.insert(
            t.to_string(),
            TaskScores {
                count: of.len(),
                standard: mean(of.iter().map(|s| s.standard)),
                oracle: opt_mean(|s| s.oracle),
                refined: opt_mean(|s| s.refined),
            },
        );
    }
    Ok(EvalReport { tasks, count: samples.len(), config_hash: config_hash(ck, &opts), checkpoint_id: ck.id(), samples })
}

/// Standard-protocol evaluation of one task's adapter on another task's data.
pub fn cross_task_eval(ck: &Checkpoint, data: &[Sample]) -> Result<EvalReport> {
    eval_miou(ck, data, EvalOptions::default())
}

// ---- prompt-sensitivity maps ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUMap {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    /// Row-major IoU per prompt position `(col·stride, row·stride)`.
    pub values: Vec<f32>,
}

impl IoUMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    /// Fraction of prompt positions inside `gt` scoring at least `threshold`.
    pub fn fraction_inside_at_least(&self, gt: &Mask, threshold: f32) -> f64 {
        let mut n = 0usize;
        let mut hit = 0usize;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if gt.get(c * self.stride, r * self.stride) {
                    n += 1;
                    hit += (self.get(r, c) >= threshold) as usize;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    }
}

/// Single-point prompt at every `stride`-th pixel, scored against `gt`.
pub fn iou_map_sweep(seg: &Segmenter, image: &GrayImage, gt: &Mask, stride: usize) -> Result<IoUMap> {
    if stride == 0 {
        return Err(Error::Input("stride must be at least 1".into()));
    }
    if gt.width != image.width || gt.height != image.height {
        return Err(crate::error::dim_err!("image {}×{} vs mask {}×{}", image.width, image.height, gt.width, gt.height));
    }
    let size = seg.backbone.cfg.image_size;
    let feats = seg.image_features(image)?;
    let samf = samf_weights(&seg.params);
    let (rows, cols) = (image.height.div_ceil(stride), image.width.div_ceil(stride));
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let out = seg.predict_with_features(&feats, &[Point::pixel_center(c * stride, r * stride)])?;
            let pred = standard_mask(&out, samf, size)?;
            values.push(compute_iou(&pred, gt)? as f32);
        }
    }
    Ok(IoUMap { rows, cols, stride, values })
}

/// Writes `{prefix}.pgm` (IoU × 255, rounded) and `{prefix}.csv`
/// (`row,col,iou`).
pub fn emit_heatmap(map: &IoUMap, prefix: &Path) -> Result<()> {
    let bytes: Vec<u8> = map.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let pgm = prefix.with_extension("pgm");
    std::fs::write(&pgm, encode_pgm(map.cols, map.rows, &bytes)).map_err(|e| Error::io(pgm.display(), e))?;
    let mut csv = String::from("row,col,iou\n");
    for r in 0..map.rows {
        for c in 0..map.cols {
            let _ = writeln!(csv, "{r},{c},{}", map.get(r, c));
        }
    }
    let path = prefix.with_extension("csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(path.display(), e))
}

/// Rebuilds a map from its CSV side file.
pub fn read_heatmap_csv(path: &Path, stride: usize) -> Result<IoUMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
    let mut cells = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::format(format!("{}:line {}", path.display(), i + 1), format!("expected row,col,iou: {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let r: usize = f[0].parse().map_err(|_| bad())?;
        let c: usize = f[1].parse().map_err(|_| bad())?;
        let v: f32 = f[2].parse().map_err(|_| bad())?;
        cells.push((r, c, v));
    }
    let rows = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let cols = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if cells.len() != rows * cols {
        return Err(Error::format(path.display().to_string(), "CSV does not cover a full grid"));
    }
    let mut values = vec![0.0; rows * cols];
    for (r, c, v) in cells {
        values[r * cols + c] = v;
    }
    Ok(IoUMap { rows, cols, stride, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::decode_pgm;

    fn rect(x0: usize, x1: usize, y0: usize, y1: usize) -> Mask {
        Mask::from_fn(20, 20, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn iou_cases() {
        let a = rect(0, 10, 0, 10);
        assert_eq!(compute_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(compute_iou(&a, &rect(12, 15, 12, 15)).unwrap(), 0.0);
        assert_eq!(compute_iou(&a, &rect(0, 10, 0, 5)).unwrap(), 0.5);
        let e = Mask::empty(20, 20);
        assert_eq!(compute_iou(&e, &e).unwrap(), 1.0);
        assert_eq!(compute_iou(&a, &e).unwrap(), 0.0);
        assert!(matches!(compute_iou(&a, &Mask::empty(3, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn center_prompt_ties_to_smallest_row_then_col() {
        let m = rect(2, 6, 3, 5);
        assert_eq!(center_prompt(&m).unwrap(), Point::pixel_center(2, 3));
        let sq = rect(2, 7, 2, 7);
        assert_eq!(center_prompt(&sq).unwrap(), Point::pixel_center(4, 4));
    }

    #[test]
    fn samf_blend_contracts() {
        let m1 = vec![0.9, 0.1, 0.6];
        let m2 = vec![0.2, 0.3, 0.4];
        let m3 = vec![0.0, 1.0, 0.5];
        assert_eq!(samf_blend(SamFParams { w1: 1.0, w2: 0.0 }, [&m1, &m2, &m3]).unwrap(), m1);
        for (w1, w2) in [(0.2, 0.3), (0.0, 0.0), (0.5, 0.5), (2.0, -3.0)] {
            let b = samf_blend(SamFParams { w1, w2 }, [&m1, &m2, &m3]).unwrap();
            assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let m = samf_apply(SamFParams { w1: 1.0, w2: 0.0 }, [&m1, &m2, &m3], 3, 1).unwrap();
        assert_eq!(m.data, vec![true, false, true]);
    }

    #[test]
    fn samf_fit_finds_exact_head() {
        let mut samples = Vec::new();
        for k in 0..6 {
            let gt: Vec<f32> = (0..64).map(|i| ((i + k) % 5 < 2) as u8 as f32).collect();
            let m2: Vec<f32> = (0..64).map(|i| ((i * 3 + k) % 7) as f32 / 7.0).collect();
            let m3: Vec<f32> = (0..64).map(|i| ((i + 2 * k) % 3 == 0) as u8 as f32).collect();
            samples.push(([gt.clone(), m2, m3], gt));
        }
        let w = samf_fit_probs(&samples, SAMF_STEPS, SAMF_LR).unwrap();
        assert!(w.w1 >= 0.95, "{w:?}");
    }

    #[test]
    fn heatmap_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = IoUMap { rows: 2, cols: 3, stride: 4, values: vec![1.0, 0.0, 0.5, 0.25, 0.123456, 0.9] };
        let prefix = dir.path().join("map");
        emit_heatmap(&map, &prefix).unwrap();
        let (w, h, px) = decode_pgm(&std::fs::read(prefix.with_extension("pgm")).unwrap(), "map").unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px[0], 255);
        assert_eq!(px[1], 0);
        for (p, v) in px.iter().zip(&map.values) {
            assert!((*p as f32 / 255.0 - v).abs() <= 0.5 / 255.0 + 1e-7);
        }
        let back = read_heatmap_csv(&prefix.with_extension("csv"), 4).unwrap();
        assert_eq!(back, map);
        let text = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
        assert_eq!(text.lines().count() - 1, 6);
    }

    #[test]
    fn sweep_dimensions_and_range() {
        let cfg = crate::backbone::BackboneConfig::tiny();
        let bb = crate::backbone::Backbone::new(cfg).unwrap();
        let p = bb.init(2);
        let seg = Segmenter { backbone: bb, plm: None, params: p };
        let img = GrayImage::new(16, 16, (0..256).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let gt = Mask::from_fn(16, 16, |x, y| x > 3 && y > 5);
        let m = iou_map_sweep(&seg, &img, &gt, 3).unwrap();
        assert_eq!((m.rows, m.cols), (6, 6));
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(iou_map_sweep(&seg, &img, &gt, 0).is_err());
    }

    #[test]
    fn perfect_predictor_scores_one() {
        // an injected "model": decoder outputs whose best logits equal the GT
        let gt = rect(3, 12, 4, 9);
        let logits: Vec<f32> = (0..3).flat_map(|_| gt.data.iter().map(|b| if *b { 5.0 } else { -5.0 })).collect();
        let out = DecoderOutputs {
            mask_logits: Tensor::new(&[3, 20, 20], logits).unwrap(),
            low_res_logits: Tensor::zeros(&[3, 1, 1]),
            iou_pred: [0.1, 0.9, 0.3],
            f_dt: Tensor::zeros(&[1, 1, 1]),
        };
        assert_eq!(compute_iou(&standard_mask(&out, None, 20).unwrap(), &gt).unwrap(), 1.0);
    }
}

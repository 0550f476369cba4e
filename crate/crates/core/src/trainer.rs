//! Optimization: center-biased prompts, AdamW with warmup and milestone
//! decay, and the pretraining, adapter and decoder fine-tuning loops.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Point};
use crate::checkpoint::{backbone_id, Checkpoint, ModelConfig};
use crate::error::{Error, Result};
use crate::image::{distance_transform, Mask};
use crate::losses::{point_matching_loss, seg_loss, total_loss, LossBreakdown, MaskSelect};
use crate::nn::{Bound, ParamStore};
use crate::plm::{forward_adapted_bound, Plm, PlmConfig};
use crate::pmm::{extract_contour, gather_point_features, jitter_points, jitter_sigma, Pmm, PmmConfig};
use crate::synth::Sample;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Learning rates used at desk scale (a few thousand samples, ≤ 2000 steps).
pub const DESK_PRETRAIN_LR: f64 = 1e-3;
pub const DESK_ADAPT_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Fractions of `total_steps` at which the rate is multiplied by `gamma`.
    pub milestones: [f64; 2],
    pub gamma: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Weight of the point matching loss. Zero trains the PLM alone.
    pub lambda: f32,
    pub seed: u64,
    /// Jitter σ for boundary points as a fraction of the image diagonal.
    pub jitter: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.01,
            warmup_steps: 250,
            milestones: [0.66667, 0.86666],
            gamma: 0.1,
            total_steps: 1000,
            batch_size: 4,
            lambda: 1.0,
            seed: 0,
            jitter: 0.02,
        }
    }
}

impl TrainConfig {
    fn desk(lr: f64, steps: usize) -> Self {
        Self { lr, total_steps: steps, warmup_steps: 250.min(steps / 4).max(1), ..Self::default() }
    }

    /// Adapter training at desk scale.
    pub fn adapt(steps: usize) -> Self {
        Self::desk(DESK_ADAPT_LR, steps)
    }

    pub fn pretrain(steps: usize) -> Self {
        Self::desk(DESK_PRETRAIN_LR, steps)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lambda(mut self, lambda: f32) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad(format!("warmup {} must be shorter than {} steps", self.warmup_steps, self.total_steps));
        }
        let [a, b] = self.milestones;
        if !(0.0 < a && a < b && b <= 1.0) {
            return bad(format!("milestones {a}, {b} must increase within (0, 1]"));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive; lambda and weight decay non-negative".into());
        }
        Ok(())
    }
}

/// `L_pm` between the GT contour `g` and the boundary transform of the
/// jittered contour `g_star`, on coordinates divided by the image size.
#[allow(clippy::too_many_arguments)]
pub(crate) fn point_matching_term<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    pmm: &Pmm,
    f_dt: Var,
    g: &[Point],
    g_star: &[Point],
    size: usize,
    grid: usize,
) -> Result<Var> {
    let w = gather_point_features(tape, f_dt, g_star, size, grid)?;
    let refined = pmm.boundary_transform(tape, b, w, g_star, size)?;
    let s = size as f32;
    let unit = tape.scale(refined, 1.0 / s);
    let g_unit: Vec<Point> = g.iter().map(|p| Point::new(p.x / s, p.y / s)).collect();
    point_matching_loss(tape, &g_unit, unit)
}

/// Linear warmup, then `gamma` decay at `floor(m·total)` for each milestone.
pub fn lr_at_step(s: usize, cfg: &TrainConfig) -> f32 {
    let mut lr = if s < cfg.warmup_steps { cfg.lr * (s + 1) as f64 / cfg.warmup_steps as f64 } else { cfg.lr };
    for m in cfg.milestones {
        if s >= (m * cfg.total_steps as f64).floor() as usize {
            lr *= cfg.gamma;
        }
    }
    lr as f32
}

// ---- optimizer --------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One decoupled-weight-decay Adam update of the `trainable` tensors.
/// Gradients for other names are ignored; a trainable tensor without a
/// gradient is a contract error.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    trainable: &[String],
    state: &mut OptimizerState,
    lr: f32,
    weight_decay: f64,
) -> Result<()> {
    for name in trainable {
        let g = grads.get(name).ok_or_else(|| Error::Contract(format!("no gradient for trainable tensor {name}")))?;
        let n = params.get(name)?.len();
        if g.len() != n {
            return Err(Error::Contract(format!("gradient for {name} has {} values, tensor has {n}", g.len())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let lr = lr as f64;
    for name in trainable {
        let g = &grads[name];
        let w = params.get_mut(name).expect("checked above").data_mut();
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let m = BETA1 * mo.m[i] as f64 + (1.0 - BETA1) * gi;
            let v = BETA2 * mo.v[i] as f64 + (1.0 - BETA2) * gi * gi;
            mo.m[i] = m as f32;
            mo.v[i] = v as f32;
            let update = (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS) + weight_decay * w[i] as f64;
            w[i] = (w[i] as f64 - lr * update) as f32;
        }
    }
    Ok(())
}

// ---- prompts ----------------------------------------------------------------

/// A foreground pixel drawn with probability proportional to its distance to
/// the nearest background pixel; returned as the pixel centre.
pub fn sample_prompt_rng<R: Rng>(mask: &Mask, rng: &mut R) -> Result<Point> {
    let dt = distance_transform(mask);
    let total: f64 = dt.iter().map(|v| *v as f64).sum();
    if total <= 0.0 {
        return Err(Error::Input("cannot sample a prompt from an empty mask".into()));
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, v) in dt.iter().enumerate() {
        if *v <= 0.0 {
            continue;
        }
        last = i;
        u -= *v as f64;
        if u < 0.0 {
            break;
        }
    }
    Ok(Point::pixel_center(last % mask.width, last / mask.width))
}

pub fn sample_prompt(mask: &Mask, seed: u64) -> Result<Point> {
    sample_prompt_rng(mask, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---- loops ------------------------------------------------------------------

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub lr: f32,
    pub focal: f32,
    pub dice: f32,
    pub iou_head: f32,
    pub pm: f32,
    pub total: f32,
}

impl LogLine {
    fn new(step: usize, lr: f32, l: &LossBreakdown) -> Self {
        Self { step, lr, focal: l.focal, dice: l.dice, iou_head: l.iou_head, pm: l.pm, total: l.total }
    }
}

pub fn write_log(path: &Path, log: &[LogLine]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
    for l in log {
        let line = serde_json::to_string(l).expect("plain numbers");
        writeln!(f, "{line}").map_err(|e| Error::io(path.display(), e))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogLine>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Pretrain,
    Adapt,
    Decoder,
}

struct Run<'a> {
    mode: Mode,
    backbone: &'a Backbone,
    plm: Option<&'a Plm>,
    pmm: Option<&'a Pmm>,
    trainable: Vec<String>,
    select: MaskSelect,
}

impl Run<'_> {
    fn train(&self, params: &mut ParamStore, data: &[Sample], tc: &TrainConfig) -> Result<Vec<LogLine>> {
        tc.validate()?;
        if tc.total_steps > 0 && data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let size = self.backbone.cfg.image_size;
        let grid = self.backbone.cfg.grid();
        let sigma = tc.jitter * jitter_sigma(size, size) / 0.02;
        let set: BTreeSet<&str> = self.trainable.iter().map(String::as_str).collect();
        let mut features: HashMap<String, Tensor> = HashMap::new();
        let mut contours: HashMap<usize, Vec<Point>> = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut state = OptimizerState::default();
        let mut log = Vec::with_capacity(tc.total_steps);
        let inv_n = 1.0 / tc.batch_size as f32;

        for step in 0..tc.total_steps {
            let lr = lr_at_step(step, tc);
            let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut parts = Vec::with_capacity(tc.batch_size);
            let mut ids = Vec::with_capacity(tc.batch_size);
            for _ in 0..tc.batch_size {
                let idx = rng.random_range(0..data.len());
                let sample = &data[idx];
                let prompt = sample_prompt_rng(&sample.mask, &mut rng)?;
                let jitter_seed: u64 = rng.random();
                ids.push(sample.instance_id.clone());

                let mut tape = Tape::new();
                let b = params.bind(&mut tape, |n| set.contains(n));
                let f_i = match self.mode {
                    Mode::Pretrain => self.backbone.encode_image(&mut tape, &b, params, &sample.image)?,
                    Mode::Adapt | Mode::Decoder => {
                        if !features.contains_key(&sample.instance_id) {
                            let f = self.backbone.image_features(params, &sample.image)?;
                            features.insert(sample.instance_id.clone(), f.tokens);
                        }
                        tape.constant(features[&sample.instance_id].clone())
                    }
                };
                let out = forward_adapted_bound(&mut tape, &b, self.backbone, self.plm, params, f_i, &[prompt])?;
                let seg = seg_loss(&mut tape, out.decoder.mask_logits, out.decoder.iou_pred, &sample.mask, self.select)?;
                let mut total = seg.seg;
                let mut pm_value = 0.0;
                if let (Some(pmm), true) = (self.pmm, tc.lambda > 0.0) {
                    if let std::collections::hash_map::Entry::Vacant(e) = contours.entry(idx) {
                        e.insert(extract_contour(&sample.mask, pmm.cfg.k)?);
                    }
                    let g = &contours[&idx];
                    let g_star = jitter_points(g, sigma, size, size, jitter_seed);
                    let pm = point_matching_term(&mut tape, &b, pmm, out.decoder.f_dt, g, &g_star, size, grid)?;
                    pm_value = tape.value(pm).item();
                    let weighted = tape.scale(pm, tc.lambda);
                    total = tape.add(total, weighted)?;
                }
                parts.push(total_loss(
                    tape.value(seg.focal).item(),
                    tape.value(seg.dice).item(),
                    tape.value(seg.iou_head).item(),
                    pm_value,
                    tc.lambda,
                ));
                let scaled = tape.scale(total, inv_n);
                tape.backward(scaled)?;
                for name in &self.trainable {
                    let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; params.get(name).map(|t| t.len()).unwrap_or(0)]);
                    if let Some(g) = tape.grad(b.get(name)?) {
                        for (a, v) in acc.iter_mut().zip(g.data()) {
                            *a += *v;
                        }
                    }
                }
            }
            let l = LossBreakdown::mean(&parts);
            let finite = grads.values().all(|g| g.iter().all(|v| v.is_finite()));
            if !l.total.is_finite() || !finite {
                return Err(Error::NonFinite {
                    step,
                    detail: format!(
                        "lr {lr}, losses {}, finite gradients {finite}, samples {ids:?}",
                        serde_json::to_string(&l).expect("numbers")
                    ),
                });
            }
            adamw_step(params, &grads, &self.trainable, &mut state, lr, tc.weight_decay)?;
            log.push(LogLine::new(step, lr, &l));
        }
        Ok(log)
    }
}

/// Pretrains a backbone from scratch on generic data; the loss covers the
/// best of the three masks plus the IoU head on all of them.
pub fn pretrain_backbone(cfg: &BackboneConfig, data: &[Sample], tc: &TrainConfig) -> Result<TrainOutput> {
    let backbone = Backbone::new(cfg.clone())?;
    let mut params = backbone.init(tc.seed);
    let trainable: Vec<String> = params.names().filter(|n| Backbone::is_pretrainable(n)).cloned().collect();
    let run = Run { mode: Mode::Pretrain, backbone: &backbone, plm: None, pmm: None, trainable, select: MaskSelect::Argmin };
    let log = run.train(&mut params, data, tc)?;
    let mut ck = Checkpoint::from_backbone(cfg.clone(), params);
    ck = Checkpoint::new(ck.config, ck.params, Backbone::is_pretrainable, Some(tc.clone()));
    Ok(TrainOutput { checkpoint: ck, log })
}

/// Trains a PLM (and, when `lambda > 0`, a PMM) on top of a frozen backbone.
pub fn train_adapter(backbone_ck: &Checkpoint, data: &[Sample], tc: &TrainConfig) -> Result<TrainOutput> {
    let backbone = backbone_ck.backbone()?;
    let ch = backbone.cfg.channels;
    let mut params = backbone_ck.params.subset(crate::backbone::NS);
    let plm = Plm::new(PlmConfig::for_channels(ch))?;
    params.extend(plm.init(tc.seed.wrapping_add(1)));
    let pmm = if tc.lambda > 0.0 { Some(Pmm::new(PmmConfig::for_channels(ch))?) } else { None };
    if let Some(p) = &pmm {
        params.extend(p.init(tc.seed.wrapping_add(2)));
    }
    let is_adapter = |n: &str| n.starts_with("plm.") || n.starts_with("pmm.");
    let trainable: Vec<String> = params.names().filter(|n| is_adapter(n)).cloned().collect();
    let run = Run {
        mode: Mode::Adapt,
        backbone: &backbone,
        plm: Some(&plm),
        pmm: pmm.as_ref(),
        trainable,
        select: MaskSelect::HighestIou,
    };
    let log = run.train(&mut params, data, tc)?;
    let config = ModelConfig {
        backbone: backbone.cfg.clone(),
        plm: Some(plm.cfg.clone()),
        pmm: pmm.map(|p| p.cfg),
        backbone_id: backbone_id(&params),
    };
    Ok(TrainOutput { checkpoint: Checkpoint::new(config, params, is_adapter, Some(tc.clone())), log })
}

/// Baseline: trains the mask decoder itself, encoders frozen, no adapters.
pub fn finetune_decoder(backbone_ck: &Checkpoint, data: &[Sample], tc: &TrainConfig) -> Result<TrainOutput> {
    let backbone = backbone_ck.backbone()?;
    let mut params = backbone_ck.params.subset(crate::backbone::NS);
    let trainable: Vec<String> = params.names().filter(|n| Backbone::is_decoder(n)).cloned().collect();
    let run = Run { mode: Mode::Decoder, backbone: &backbone, plm: None, pmm: None, trainable, select: MaskSelect::HighestIou };
    let log = run.train(&mut params, data, tc)?;
    let config = ModelConfig { backbone: backbone.cfg.clone(), plm: None, pmm: None, backbone_id: backbone_id(&params) };
    Ok(TrainOutput { checkpoint: Checkpoint::new(config, params, Backbone::is_decoder, Some(tc.clone())), log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Task, TaskSpec};

    fn paper_cfg(total: usize) -> TrainConfig {
        TrainConfig { total_steps: total, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_probes_are_exact() {
        let c = paper_cfg(3000);
        assert_eq!(lr_at_step(0, &c), 4.0e-8f32);
        assert_eq!(lr_at_step(249, &c), 1.0e-5f32);
        assert_eq!(lr_at_step(2100, &c), 1.0e-6f32);
        assert_eq!(lr_at_step(2700, &c), 1.0e-7f32);
        // milestone boundaries: floor(0.66667·3000) = 2000, floor(0.86666·3000) = 2599
        assert_eq!(lr_at_step(1999, &c), 1.0e-5f32);
        assert_eq!(lr_at_step(2000, &c), 1.0e-6f32);
        assert_eq!(lr_at_step(2598, &c), 1.0e-6f32);
        assert_eq!(lr_at_step(2599, &c), 1.0e-7f32);
    }

    #[test]
    fn config_validation() {
        assert!(paper_cfg(3000).validate().is_ok());
        assert!(paper_cfg(100).validate().is_err());
        assert!(TrainConfig { gamma: 0.0, ..paper_cfg(3000) }.validate().is_err());
        assert!(TrainConfig { milestones: [0.9, 0.5], ..paper_cfg(3000) }.validate().is_err());
        assert!(paper_cfg(0).validate().is_ok());
    }

    #[test]
    fn adamw_hand_values() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![1.0]).unwrap());
        let names = vec!["w".to_string()];
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        let mut st = OptimizerState::default();
        adamw_step(&mut p, &grads, &names, &mut st, 0.1, 0.01).unwrap();
        assert!((p.get("w").unwrap().item() - 0.999).abs() < 1e-7);

        let mut st = OptimizerState::default();
        let mut p2 = ParamStore::new();
        p2.insert("w", Tensor::new(&[1], vec![0.0]).unwrap());
        grads.insert("w".to_string(), vec![0.37]);
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..2000 {
            adamw_step(&mut p2, &grads, &names, &mut st, 0.01, 0.0).unwrap();
            let w = p2.get("w").unwrap().item();
            last = (w - prev).abs();
            prev = w;
        }
        assert!((last - 0.01).abs() <= 0.05 * 0.01, "{last}");
    }

    #[test]
    fn adamw_contracts() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        p.insert("frozen", Tensor::new(&[1], vec![5.0]).unwrap());
        let names = vec!["a".to_string()];
        let mut st = OptimizerState::default();
        let empty = BTreeMap::new();
        assert!(matches!(adamw_step(&mut p, &empty, &names, &mut st, 0.1, 0.0), Err(Error::Contract(_))));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![1.0, 1.0]);
        grads.insert("frozen".to_string(), vec![1e30]);
        adamw_step(&mut p, &grads, &names, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p.get("frozen").unwrap().item(), 5.0);
        assert!(!st.moments.contains_key("frozen"));
        assert_eq!(st.moments["a"].m.len(), 2);
    }

    #[test]
    fn prompt_sampling() {
        let one = Mask::from_fn(9, 9, |x, y| x == 4 && y == 6);
        for s in 0..5 {
            assert_eq!(sample_prompt(&one, s).unwrap(), Point::pixel_center(4, 6));
        }
        assert!(matches!(sample_prompt(&Mask::empty(4, 4), 0), Err(Error::Input(_))));
        let sq = Mask::from_fn(33, 33, |_, _| true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = vec![0usize; 33 * 33];
        for _ in 0..100_000 {
            let p = sample_prompt_rng(&sq, &mut rng).unwrap();
            assert!(sq.get(p.x as usize, p.y as usize));
            counts[p.y as usize * 33 + p.x as usize] += 1;
        }
        let center = counts[16 * 33 + 16];
        let edge_max = (0..33)
            .flat_map(|i| [counts[i], counts[32 * 33 + i], counts[i * 33], counts[i * 33 + 32]])
            .max()
            .unwrap();
        assert!(center > edge_max, "{center} vs {edge_max}");
        // frequencies track the exact distance-transform weights
        let dt = distance_transform(&sq);
        let z: f64 = dt.iter().map(|v| *v as f64).sum();
        let expect = dt[16 * 33 + 16] as f64 / z * 100_000.0;
        assert!((center as f64 - expect).abs() < 5.0 * expect.sqrt(), "{center} vs {expect}");
    }

    /// 16×16 samples for the tiny configuration.
    fn tiny_data(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let img = crate::image::GrayImage::new(16, 16, (0..256).map(|p| ((p * (i + 3)) % 17) as f32 / 17.0).collect()).unwrap();
                let mask = Mask::from_fn(16, 16, |x, y| x >= 3 + i % 3 && x < 11 && (4..12).contains(&y));
                Sample { image: std::sync::Arc::new(img), mask, task: "tiny".into(), instance_id: format!("t{i}") }
            })
            .collect()
    }

    fn tiny_backbone() -> Checkpoint {
        let cfg = BackboneConfig::tiny();
        let p = Backbone::new(cfg.clone()).unwrap().init(1);
        Checkpoint::from_backbone(cfg, p)
    }

    #[test]
    fn adapter_keeps_backbone_frozen() {
        let bb = tiny_backbone();
        let data = tiny_data(6);
        let tc = TrainConfig { total_steps: 12, warmup_steps: 2, batch_size: 2, ..TrainConfig::adapt(12) };
        let out = train_adapter(&bb, &data, &tc).unwrap();
        assert_eq!(out.checkpoint.params.checksum("backbone."), bb.params.checksum("backbone."));
        assert_eq!(out.log.len(), 12);
        assert!(out.checkpoint.params.has_namespace("pmm"));
        assert!(out.checkpoint.trainable_names().iter().all(|n| n.starts_with("plm.") || n.starts_with("pmm.")));
        let again = train_adapter(&bb, &data, &tc).unwrap();
        assert_eq!(again.checkpoint.to_bytes(), out.checkpoint.to_bytes());
    }

    #[test]
    fn zero_steps_is_identity() {
        let bb = tiny_backbone();
        let data = tiny_data(2);
        let tc = TrainConfig { total_steps: 0, ..TrainConfig::adapt(0) };
        let out = train_adapter(&bb, &data, &tc).unwrap();
        let plm = Plm::new(PlmConfig::for_channels(16)).unwrap().init(tc.seed + 1);
        assert_eq!(out.checkpoint.params.subset("plm."), plm);
        let dec = finetune_decoder(&bb, &data, &tc).unwrap();
        assert_eq!(dec.checkpoint.params, bb.params);
    }

    #[test]
    fn decoder_finetune_leaves_encoders() {
        let bb = tiny_backbone();
        let data = tiny_data(4);
        let tc = TrainConfig { total_steps: 5, warmup_steps: 1, batch_size: 2, ..TrainConfig::adapt(5) };
        let out = finetune_decoder(&bb, &data, &tc).unwrap();
        let p = &out.checkpoint.params;
        assert_eq!(p.checksum("backbone.enc."), bb.params.checksum("backbone.enc."));
        assert_eq!(p.checksum("backbone.prompt."), bb.params.checksum("backbone.prompt."));
        assert_ne!(p.checksum("backbone.dec."), bb.params.checksum("backbone.dec."));
    }

    #[test]
    fn pretraining_reduces_loss() {
        let data = tiny_data(8);
        let tc = TrainConfig { total_steps: 60, warmup_steps: 5, batch_size: 2, ..TrainConfig::pretrain(60) };
        let out = pretrain_backbone(&BackboneConfig::tiny(), &data, &tc).unwrap();
        let first: f32 = out.log[..10].iter().map(|l| l.total).sum::<f32>() / 10.0;
        let last: f32 = out.log[50..].iter().map(|l| l.total).sum::<f32>() / 10.0;
        assert!(last < first, "{first} → {last}");
    }

    #[test]
    fn generated_data_trains() {
        // 64×64 data flows through the default configuration
        let data = generate(&TaskSpec::new(Task::Subpart, 3, 1)).unwrap().samples;
        let cfg = BackboneConfig::default();
        let bb = Checkpoint::from_backbone(cfg.clone(), Backbone::new(cfg).unwrap().init(0));
        let tc = TrainConfig { total_steps: 2, warmup_steps: 1, batch_size: 1, ..TrainConfig::adapt(2) };
        let out = train_adapter(&bb, &data, &tc).unwrap();
        assert!(out.log.iter().all(|l| l.total.is_finite() && l.pm > 0.0));
    }
}

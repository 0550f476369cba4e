//! `sama` command-line tool. Every subcommand prints a JSON summary on
//! stdout; failures print `{"error": kind, "message": ...}` on stderr and
//! exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sama::backbone::BackboneConfig;
use sama::checkpoint::Checkpoint;
use sama::eval::{self, EvalOptions};
use sama::gradcheck::{self, FdOptions};
use sama::synth::{self, Sample, Task, TaskSpec};
use sama::trainer::{self, TrainConfig, TrainOutput};
use sama::{Error, Result};

#[derive(Parser)]
#[command(name = "sama", version, about = "Prompt-learning adaptation of a frozen promptable segmenter")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Default,
    Tiny,
}

#[derive(clap::Args)]
struct AdaptArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Weight of the point-matching loss; 0 trains the prompt module alone.
    #[arg(long, default_value_t = 1.0)]
    lambda: f32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step loss log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Mirror every scene horizontally.
        #[arg(long)]
        mirror: bool,
    },
    /// Train a backbone from scratch on the train split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Arch::Default)]
        arch: Arch,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train prompt and point-matching adapters over a frozen backbone.
    Adapt(AdaptArgs),
    /// Baseline: fine-tune the mask decoder instead of adding adapters.
    FinetuneDecoder(AdaptArgs),
    /// Center-prompt mIoU.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        refine: bool,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// IoU for a prompt at every `stride`-th pixel.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        stride: usize,
        /// Writes PREFIX.pgm and PREFIX.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the three-mask blending baseline.
    Samf {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an adapter on another task's data.
    CrossEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Finite-difference check of every primitive and of the adaptation objective.
    Gradcheck {
        /// Also check the backbone decoder and prompt encoder.
        #[arg(long)]
        full: bool,
    },
    /// Two-step boundary refinement of a binary PGM mask.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let all = synth::read_dataset(dir)?;
    let (train, val) = synth::split(&all);
    let picked = match split {
        Split::Train => train,
        Split::Val => val,
        Split::All => all,
    };
    if picked.is_empty() {
        return Err(Error::Input(format!("{}: split has no samples", dir.display())));
    }
    Ok(picked)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let body = serde_json::to_vec_pretty(v).map_err(|e| Error::Contract(format!("report serialization: {e}")))?;
    std::fs::write(path, body).map_err(|e| Error::io(path.display(), e))
}

fn finish_training(out: TrainOutput, path: &Path, log: Option<&Path>) -> Result<Value> {
    out.checkpoint.save(path)?;
    if let Some(p) = log {
        trainer::write_log(p, &out.log)?;
    }
    let last = out.log.last();
    Ok(json!({
        "checkpoint": path.display().to_string(),
        "id": out.checkpoint.id(),
        "steps": out.log.len(),
        "final_total": last.map(|l| l.total),
        "trainable": out.checkpoint.trainable_names().len(),
    }))
}

fn adapt_config(a: &AdaptArgs, lambda: f32) -> TrainConfig {
    let mut tc = TrainConfig::adapt(a.steps).with_seed(a.seed).with_lambda(lambda);
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    tc
}

fn run(cmd: Cmd) -> Result<Value> {
    match cmd {
        Cmd::GenData { task, count, seed, out, mirror } => {
            let mut spec = TaskSpec::new(task, count, seed);
            if mirror {
                spec = spec.mirrored();
            }
            let data = synth::generate(&spec)?;
            let entries = synth::write_dataset(&out, &data.samples)?;
            Ok(json!({
                "task": spec.label(),
                "images": data.samples.iter().map(|s| s.instance_id.as_str()).collect::<std::collections::BTreeSet<_>>().len(),
                "masks": entries.len(),
                "skipped": data.skipped,
            }))
        }
        Cmd::Pretrain { data, steps, out, lr, seed, arch, log } => {
            let samples = load_split(&data, Split::Train)?;
            let mut tc = TrainConfig::pretrain(steps).with_seed(seed);
            if let Some(lr) = lr {
                tc.lr = lr;
            }
            let cfg = match arch {
                Arch::Default => BackboneConfig::default(),
                Arch::Tiny => BackboneConfig::tiny(),
            };
            let r = trainer::pretrain_backbone(&cfg, &samples, &tc)?;
            finish_training(r, &out, log.as_deref())
        }
        Cmd::Adapt(a) => {
            let bb = Checkpoint::load(&a.backbone)?;
            let samples = load_split(&a.data, Split::Train)?;
            let r = trainer::train_adapter(&bb, &samples, &adapt_config(&a, a.lambda))?;
            finish_training(r, &a.out, a.log.as_deref())
        }
        Cmd::FinetuneDecoder(a) => {
            let bb = Checkpoint::load(&a.backbone)?;
            let samples = load_split(&a.data, Split::Train)?;
            let r = trainer::finetune_decoder(&bb, &samples, &adapt_config(&a, 0.0))?;
            finish_training(r, &a.out, a.log.as_deref())
        }
        Cmd::Eval { ckpt, data, oracle, refine, report, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let samples = load_split(&data, split)?;
            let rep = eval::eval_miou(&ck, &samples, EvalOptions { oracle, refine })?;
            write_json(&report, &rep)?;
            Ok(json!({ "miou": rep.miou(), "oracle": rep.oracle_miou(), "refined": rep.refined_miou(), "count": rep.count }))
        }
        Cmd::CrossEval { ckpt, data, report, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let samples = load_split(&data, split)?;
            let rep = eval::cross_task_eval(&ck, &samples)?;
            write_json(&report, &rep)?;
            Ok(json!({ "miou": rep.miou(), "count": rep.count }))
        }
        Cmd::Sweep { ckpt, image, gt, stride, out } => {
            let seg = Checkpoint::load(&ckpt)?.segmenter()?;
            let image = synth::read_image(&image)?;
            let gt = synth::read_mask(&gt)?;
            let map = eval::iou_map_sweep(&seg, &image, &gt, stride)?;
            eval::emit_heatmap(&map, &out)?;
            Ok(json!({
                "rows": map.rows,
                "cols": map.cols,
                "inside_at_least_0.8": map.fraction_inside_at_least(&gt, 0.8),
            }))
        }
        Cmd::Samf { backbone, data, out } => {
            let bb = Checkpoint::load(&backbone)?;
            let samples = load_split(&data, Split::Train)?;
            let (ck, w) = eval::samf_fit(&bb, &samples)?;
            ck.save(&out)?;
            Ok(json!({ "w1": w.w1, "w2": w.w2, "checkpoint": out.display().to_string() }))
        }
        Cmd::Gradcheck { full } => {
            let opts = FdOptions::default();
            let mut all = gradcheck::primitive_checks(opts)?;
            all.extend(gradcheck::objective_checks(opts, full)?);
            let failed: Vec<&str> = all.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            for r in &all {
                println!(
                    "{}",
                    json!({ "check": r.name, "max_rel_error": r.report.max_rel_error, "probes": r.report.probes, "passed": r.passed() })
                );
            }
            if !failed.is_empty() {
                return Err(Error::Contract(format!("gradient checks failed: {}", failed.join(", "))));
            }
            Ok(json!({ "checks": all.len(), "tolerance": gradcheck::TOLERANCE, "passed": true }))
        }
        Cmd::Refine { ckpt, image, mask, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let pmm = ck.pmm()?.ok_or_else(|| Error::Config("checkpoint has no point-matching module".into()))?;
            let seg = ck.segmenter()?;
            let image = synth::read_image(&image)?;
            let mask = synth::read_mask(&mask)?;
            let prompt = eval::center_prompt(&mask)?;
            let pred = seg.predict(&image, &[prompt])?;
            let refined = eval::refine_or_keep(&pmm, &ck.params, &mask, &pred.f_dt, ck.config.backbone.grid())?;
            synth::write_mask(&out, &refined)?;
            Ok(json!({ "area_before": mask.area(), "area_after": refined.area(), "iou_to_input": eval::compute_iou(&mask, &refined)? }))
        }
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim()),
    };
    match run(cli.cmd) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

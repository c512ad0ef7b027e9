//! The run harness: full stage-I and stage-II training loops with metric
//! logging and checkpoints, evaluation, the ablation runner, and the
//! code-size sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{model_arrays, require_compatible_geometry, Checkpoint, RngState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{predict, reconstruct_with_code, SamplingParams};
use crate::models::{image_to_tensor, stack_images, BaseModel, LanguageModel, OracleModel};
use crate::synthdata::{task_io, Example, SceneDataset, Split};
use crate::tasks::{
    decode_logits, encode_label, pixel_accuracy, EncodedLabel, TaskKind, TaskLabel, TaskSpec,
};
use crate::tensor::{Elem, ParamContainer, Tensor};
use crate::training::{
    param_fingerprint, stage1_step, stage2_step, OptimizerState, Stage1Batch, Stage1Options,
    Stage2Batch,
};
use crate::util::{derive_seed, seeded_rng};
use crate::vq::{Codebook, GuidingCode};

/// Abort threshold: this many consecutive non-finite-loss steps ends a run.
const NON_FINITE_STREAK_LIMIT: usize = 10;

// ── metrics log ─────────────────────────────────────────────────────────

/// Append-only metrics log mirrored to a CSV file: one row per (step, split,
/// metric, value), with a fixed header and stable column order.
pub struct MetricsLog {
    rows: Vec<(u64, String, String, f64)>,
    path: Option<PathBuf>,
}

impl MetricsLog {
    pub fn new(path: Option<PathBuf>) -> Result<Self> {
        if let Some(p) = &path {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, "step,split,metric,value\n")?;
        }
        Ok(Self {
            rows: Vec::new(),
            path,
        })
    }

    pub fn append(&mut self, step: u64, split: &str, metric: &str, value: f64) -> Result<()> {
        self.rows.push((step, split.into(), metric.into(), value));
        if let Some(p) = &self.path {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{step},{split},{metric},{value}")?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[(u64, String, String, f64)] {
        &self.rows
    }

    pub fn rows_for(&self, split: &str, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|(_, s, m, _)| s == split && m == metric)
            .map(|(step, _, _, v)| (*step, *v))
            .collect()
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows_for(split, metric).last().map(|&(_, v)| v)
    }
}

// ── batch assembly ──────────────────────────────────────────────────────

fn dataset_for(config: &RunConfig) -> Result<SceneDataset> {
    Ok(SceneDataset::new(
        derive_seed(config.seed, "dataset", 0),
        config.input_size,
        config.task_spec()?,
    ))
}

struct PreparedBatch<T: Elem> {
    images: Tensor<T>,
    labels: Vec<EncodedLabel>,
}

fn prepare_examples<T: Elem>(
    task: &TaskSpec,
    examples: &[Example],
) -> Result<PreparedBatch<T>> {
    let mut images = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let (img, label) = task_io(task, ex);
        images.push(image_to_tensor::<T>(&img));
        labels.push(encode_label(task, &label)?);
    }
    Ok(PreparedBatch {
        images: stack_images(&images)?,
        labels,
    })
}

fn train_batch<T: Elem>(
    ds: &SceneDataset,
    task: &TaskSpec,
    config: &RunConfig,
    step: u64,
) -> Result<PreparedBatch<T>> {
    let b = config.batch_size;
    let examples: Vec<Example> = (0..b)
        .map(|k| {
            let linear = (step - 1) * b as u64 + k as u64;
            let idx = (linear % config.train_examples as u64) as usize;
            let epoch = linear / config.train_examples as u64;
            ds.augmented(idx, epoch)
        })
        .collect();
    prepare_examples(task, &examples)
}

// ── stage I ─────────────────────────────────────────────────────────────

/// Everything a finished stage-I run hands to stage II and to evaluation.
pub struct Stage1Run<T: Elem> {
    pub config: RunConfig,
    pub task: TaskSpec,
    pub oracle: Option<OracleModel<T>>,
    pub base: BaseModel<T>,
    pub metrics: MetricsLog,
    /// Final held-out reconstruction metric (oracle-guided).
    pub eval_metric: f64,
}

/// Oracle-guided reconstruction metric over the held-out split (plus pixel
/// accuracy for panoptic). This is the stage-I quality number.
pub fn evaluate_stage1<T: Elem>(
    config: &RunConfig,
    task: &TaskSpec,
    oracle: Option<&OracleModel<T>>,
    base: &BaseModel<T>,
) -> Result<(f64, Option<f64>)> {
    let ds = dataset_for(config)?;
    let mut metric_sum = 0.0;
    let mut acc_sum = 0.0;
    for i in 0..config.eval_examples {
        let ex = ds.example(Split::Eval, i);
        let (img, label) = task_io(task, &ex);
        let x = image_to_tensor::<T>(&img);
        let pred = match oracle {
            Some(oracle) => {
                let enc = encode_label(task, &label)?;
                let (code, _, _) = oracle.encode(&enc, Some(&x))?;
                reconstruct_with_code(&x, &code, base, &oracle.codebook, task, config.no_image)?
            }
            None => {
                let input = if config.no_image {
                    Tensor::zeros(x.shape())
                } else {
                    x.clone()
                };
                decode_logits(task, &base.forward(&input, None)?)?
            }
        };
        metric_sum += crate::tasks::evaluate_metric(task, &pred, &label)?;
        if let (TaskLabel::Panoptic(p), TaskLabel::Panoptic(g)) = (&pred, &label) {
            acc_sum += pixel_accuracy(p, g);
        }
    }
    let n = config.eval_examples as f64;
    let acc = matches!(task.kind, TaskKind::Panoptic).then_some(acc_sum / n);
    Ok((metric_sum / n, acc))
}

/// Stage-I training: joint optimization of the base model and oracle for the
/// configured budget, with per-step metric rows, periodic held-out
/// evaluation, and a final checkpoint when `out_dir` is given.
pub fn run_stage1<T: Elem>(config: &RunConfig, out_dir: Option<&Path>) -> Result<Stage1Run<T>> {
    config.validate()?;
    let task = config.task_spec()?;
    let model_cfg = config.model_config();
    let ds = dataset_for(config)?;

    let mut oracle = if config.no_oracle {
        None
    } else {
        Some(OracleModel::<T>::init(&model_cfg, &task, derive_seed(config.seed, "init", 1))?)
    };
    let mut base = BaseModel::<T>::init(&model_cfg, &task, derive_seed(config.seed, "init", 2))?;
    let mut opt = OptimizerState::new(config.optimizer_config());
    let schedule = config.stage1_schedule()?;
    let mut rng = seeded_rng(derive_seed(config.seed, "stage1", 0));
    let mut metrics = MetricsLog::new(out_dir.map(|d| d.join("stage1_metrics.csv")))?;

    let options = Stage1Options {
        code_dropout: config.effective_code_dropout(),
        no_image: config.no_image,
    };

    let mut streak = 0usize;
    let mut eval_metric = f64::NAN;
    for step in 1..=config.stage1_steps {
        let batch = train_batch::<T>(&ds, &task, config, step)?;
        let batch = Stage1Batch {
            images: batch.images,
            labels: batch.labels,
        };
        let result = stage1_step(
            &mut base,
            oracle.as_mut(),
            &task,
            &batch,
            &mut opt,
            &schedule,
            step,
            options,
            &mut rng,
        );
        match result {
            Ok(m) => {
                streak = 0;
                metrics.append(step, "train", "loss", m.loss)?;
                metrics.append(step, "train", "reconstruction_loss", m.reconstruction_loss)?;
                if oracle.is_some() {
                    metrics.append(step, "train", "commitment_loss", m.commitment_loss)?;
                    metrics.append(step, "train", "codebook_perplexity", m.codebook_perplexity)?;
                    metrics.append(step, "train", "respawned", m.respawned as f64)?;
                }
                metrics.append(step, "train", "grad_norm", m.grad_norm)?;
                metrics.append(step, "train", "lr", m.lr)?;
            }
            Err(Error::NonFiniteLoss { value, .. }) => {
                streak += 1;
                metrics.append(step, "train", "non_finite_loss", value)?;
                if streak >= NON_FINITE_STREAK_LIMIT {
                    return Err(crate::invalid_arg!(
                        "aborting stage 1: {streak} consecutive non-finite losses at step {step}"
                    ));
                }
                continue;
            }
            Err(e) => return Err(e),
        }

        if step % config.eval_every == 0 || step == config.stage1_steps {
            let (m, acc) = evaluate_stage1(config, &task, oracle.as_ref(), &base)?;
            eval_metric = m;
            metrics.append(step, "eval", task.kind.metric().0, m)?;
            if let Some(acc) = acc {
                metrics.append(step, "eval", "pixel_accuracy", acc)?;
            }
        }
    }

    let run = Stage1Run {
        config: config.clone(),
        task,
        oracle,
        base,
        metrics,
        eval_metric,
    };
    if let Some(dir) = out_dir {
        save_stage1_checkpoint(&run, &opt, &rng, &dir.join("stage1.ckpt"))?;
    }
    Ok(run)
}

fn save_stage1_checkpoint<T: Elem>(
    run: &Stage1Run<T>,
    opt: &OptimizerState<T>,
    rng: &ChaCha8Rng,
    path: &Path,
) -> Result<()> {
    let mut arrays = Vec::new();
    if let Some(oracle) = &run.oracle {
        arrays.extend(model_arrays(oracle));
        arrays.extend(codebook_arrays(&oracle.codebook));
    }
    arrays.extend(model_arrays(&run.base));
    if let Some(oracle) = &run.oracle {
        arrays.extend(opt.moment_arrays(&[oracle as &dyn ParamContainer<T>, &run.base]));
    } else {
        arrays.extend(opt.moment_arrays(&[&run.base as &dyn ParamContainer<T>]));
    }
    Checkpoint {
        config: run.config.clone(),
        stage: "stage1".into(),
        step: run.config.stage1_steps,
        rng: RngState::capture(rng),
        arrays,
    }
    .save(path)
}

fn codebook_arrays<T: Elem>(book: &Codebook<T>) -> Vec<(String, Tensor<T>)> {
    vec![
        ("oracle.codebook.entries".into(), book.entries().clone()),
        ("oracle.codebook.ema_counts".into(), book.ema_counts().clone()),
        ("oracle.codebook.ema_sums".into(), book.ema_sums().clone()),
    ]
}

/// Rebuild stage-I models (oracle, codebook, base) from a checkpoint.
pub fn load_stage1_models<T: Elem>(
    ckpt: &Checkpoint<T>,
) -> Result<(RunConfig, TaskSpec, Option<OracleModel<T>>, BaseModel<T>)> {
    let config = ckpt.config.clone();
    let task = config.task_spec()?;
    let model_cfg = config.model_config();
    let oracle = if config.no_oracle {
        None
    } else {
        let mut oracle =
            OracleModel::<T>::init(&model_cfg, &task, derive_seed(config.seed, "init", 1))?;
        ckpt.load_into(&mut oracle)?;
        oracle.codebook = Codebook::from_arrays(
            ckpt.array("oracle.codebook.entries")?.clone(),
            ckpt.array("oracle.codebook.ema_counts")?.clone(),
            ckpt.array("oracle.codebook.ema_sums")?.clone(),
            model_cfg.dict_momentum,
            crate::training::USAGE_WINDOW,
        )?;
        Some(oracle)
    };
    let mut base = BaseModel::<T>::init(&model_cfg, &task, derive_seed(config.seed, "init", 2))?;
    ckpt.load_into(&mut base)?;
    Ok((config, task, oracle, base))
}

/// Digest over stage-I parameters and codebook arrays; stage II must leave
/// it unchanged.
pub fn stage1_fingerprint<T: Elem>(oracle: Option<&OracleModel<T>>, base: &BaseModel<T>) -> u64 {
    let mut h = match oracle {
        Some(o) => param_fingerprint(&[o as &dyn ParamContainer<T>, base]),
        None => param_fingerprint(&[base as &dyn ParamContainer<T>]),
    };
    if let Some(o) = oracle {
        for (_, t) in codebook_arrays(&o.codebook) {
            for &v in t.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
    }
    h
}

// ── stage II ────────────────────────────────────────────────────────────

pub struct Stage2Run<T: Elem> {
    pub config: RunConfig,
    pub task: TaskSpec,
    pub oracle: OracleModel<T>,
    pub base: BaseModel<T>,
    pub lm: LanguageModel<T>,
    pub metrics: MetricsLog,
    /// Final end-to-end task metric at temperature 0.
    pub eval_metric: f64,
    /// Mean teacher-forced NLL over the final logging window (nats).
    pub final_nll: f64,
}

/// End-to-end evaluation: greedy-sampled code, decode through the base
/// model, task metric against ground truth.
pub fn evaluate_end_to_end<T: Elem>(
    config: &RunConfig,
    task: &TaskSpec,
    base: &BaseModel<T>,
    lm: &LanguageModel<T>,
    codebook: &Codebook<T>,
) -> Result<f64> {
    let ds = dataset_for(config)?;
    let mut sum = 0.0;
    for i in 0..config.eval_examples {
        let ex = ds.example(Split::Eval, i);
        let (img, label) = task_io(task, &ex);
        let x = image_to_tensor::<T>(&img);
        let (pred, _) = predict(
            &x,
            base,
            lm,
            codebook,
            task,
            &SamplingParams::greedy(),
            config.no_image,
        )?;
        sum += crate::tasks::evaluate_metric(task, &pred, &label)?;
    }
    Ok(sum / config.eval_examples as f64)
}

/// Stage-II training: the language model learns to mimic the frozen oracle.
/// Target codes are regenerated from the oracle every epoch so augmentation
/// variety reaches the language model. Takes ownership of the stage-I run;
/// its models move, untouched, into the result.
pub fn run_stage2<T: Elem>(
    config: &RunConfig,
    stage1: Stage1Run<T>,
    out_dir: Option<&Path>,
) -> Result<Stage2Run<T>> {
    config.validate()?;
    require_compatible_geometry(config, &stage1.config)?;
    if config.no_oracle {
        return Err(crate::invalid_arg!(
            "stage 2 is undefined for the no-oracle arm (nothing produces codes)"
        ));
    }
    let oracle = stage1
        .oracle
        .ok_or_else(|| crate::invalid_arg!("stage-1 run has no oracle"))?;
    let base = stage1.base;
    let task = config.task_spec()?;
    let ds = dataset_for(config)?;
    let before = stage1_fingerprint(Some(&oracle), &base);

    let mut lm = LanguageModel::<T>::init(
        &config.model_config(),
        &task,
        !config.non_autoregressive_lm,
        derive_seed(config.seed, "init", 3),
    )?;
    let mut opt = OptimizerState::new(config.optimizer_config());
    let schedule = config.stage2_schedule()?;
    let rng = seeded_rng(derive_seed(config.seed, "stage2", 0));
    let mut metrics = MetricsLog::new(out_dir.map(|d| d.join("stage2_metrics.csv")))?;

    let mut streak = 0usize;
    let mut nll_window = Vec::new();
    for step in 1..=config.stage2_steps {
        let batch = train_batch::<T>(&ds, &task, config, step)?;
        // Clean oracle codes (no dropout) are the stage-II targets.
        let codes = oracle_codes_for_batch(&oracle, &batch)?;
        let s2 = Stage2Batch {
            images: batch.images,
            codes,
        };
        match stage2_step(&mut lm, &s2, &mut opt, &schedule, step) {
            Ok(m) => {
                streak = 0;
                nll_window.push(m.nll);
                if nll_window.len() > 50 {
                    nll_window.remove(0);
                }
                metrics.append(step, "train", "nll", m.nll)?;
                metrics.append(step, "train", "grad_norm", m.grad_norm)?;
                metrics.append(step, "train", "lr", m.lr)?;
            }
            Err(Error::NonFiniteLoss { value, .. }) => {
                streak += 1;
                metrics.append(step, "train", "non_finite_loss", value)?;
                if streak >= NON_FINITE_STREAK_LIMIT {
                    return Err(crate::invalid_arg!(
                        "aborting stage 2: {streak} consecutive non-finite losses at step {step}"
                    ));
                }
                continue;
            }
            Err(e) => return Err(e),
        }
        if step % config.eval_every == 0 || step == config.stage2_steps {
            let m = evaluate_end_to_end(config, &task, &base, &lm, &oracle.codebook)?;
            metrics.append(step, "eval", task.kind.metric().0, m)?;
        }
    }

    let after = stage1_fingerprint(Some(&oracle), &base);
    if before != after {
        return Err(crate::invalid_arg!(
            "stage-1 parameters changed during stage 2 (freeze violated)"
        ));
    }

    let eval_metric = metrics.last("eval", task.kind.metric().0).unwrap_or(f64::NAN);
    let final_nll = nll_window.iter().sum::<f64>() / nll_window.len().max(1) as f64;

    let run = Stage2Run {
        config: config.clone(),
        task,
        oracle,
        base,
        lm,
        metrics,
        eval_metric,
        final_nll,
    };
    if let Some(dir) = out_dir {
        save_stage2_checkpoint(&run, &opt, &rng, &dir.join("stage2.ckpt"))?;
    }
    Ok(run)
}

fn oracle_codes_for_batch<T: Elem>(
    oracle: &OracleModel<T>,
    batch: &PreparedBatch<T>,
) -> Result<Vec<GuidingCode>> {
    let mut tape = crate::tensor::Tape::new();
    let enc = oracle.encode_on_tape(&mut tape, &batch.labels, Some(&batch.images))?;
    Ok(enc.codes)
}

fn save_stage2_checkpoint<T: Elem>(
    run: &Stage2Run<T>,
    opt: &OptimizerState<T>,
    rng: &ChaCha8Rng,
    path: &Path,
) -> Result<()> {
    let mut arrays = model_arrays(&run.oracle);
    arrays.extend(codebook_arrays(&run.oracle.codebook));
    arrays.extend(model_arrays(&run.base));
    arrays.extend(model_arrays(&run.lm));
    arrays.extend(opt.moment_arrays(&[&run.lm as &dyn ParamContainer<T>]));
    Checkpoint {
        config: run.config.clone(),
        stage: "stage2".into(),
        step: run.config.stage2_steps,
        rng: RngState::capture(rng),
        arrays,
    }
    .save(path)
}

impl<T: Elem> Stage1Run<T> {
    /// Rebuild a stage-I run from its checkpoint (for feeding stage II).
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let (config, task, oracle, base) = load_stage1_models(ckpt)?;
        Ok(Self {
            config,
            task,
            oracle,
            base,
            metrics: MetricsLog::new(None)?,
            eval_metric: f64::NAN,
        })
    }
}

/// Rebuild every model from a stage-II checkpoint.
pub fn load_stage2_models<T: Elem>(
    ckpt: &Checkpoint<T>,
) -> Result<(RunConfig, TaskSpec, OracleModel<T>, BaseModel<T>, LanguageModel<T>)> {
    if ckpt.stage != "stage2" {
        return Err(Error::Checkpoint(format!(
            "expected a stage2 checkpoint, found '{}'",
            ckpt.stage
        )));
    }
    let (config, task, oracle, base) = load_stage1_models(ckpt)?;
    let oracle =
        oracle.ok_or_else(|| Error::Checkpoint("stage2 checkpoint lacks an oracle".into()))?;
    let mut lm = LanguageModel::<T>::init(
        &config.model_config(),
        &task,
        !config.non_autoregressive_lm,
        derive_seed(config.seed, "init", 3),
    )?;
    ckpt.load_into(&mut lm)?;
    Ok((config, task, oracle, base, lm))
}

// ── ablations ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub arm: String,
    pub status: String,
    pub stage1_metric: Option<f64>,
    pub stage2_metric: Option<f64>,
    pub stage2_nll: Option<f64>,
}

pub const ABLATION_ARMS: [&str; 5] = [
    "default",
    "no_dropout",
    "no_oracle",
    "non_autoregressive",
    "no_image",
];

pub fn ablation_config(base: &RunConfig, arm: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    match arm {
        "default" => {}
        "no_dropout" => c.no_dropout = true,
        "no_oracle" => c.no_oracle = true,
        "non_autoregressive" => c.non_autoregressive_lm = true,
        "no_image" => c.no_image = true,
        other => return Err(crate::invalid_arg!("unknown ablation arm '{other}'")),
    }
    Ok(c)
}

/// Run every ablation arm with identical budgets and data seed; arms that
/// fail are marked and the rest continue.
pub fn run_ablations<T: Elem>(base: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for arm in ABLATION_ARMS {
        let config = ablation_config(base, arm)?;
        let arm_dir = out_dir.map(|d| d.join(arm));
        let row = run_one_arm::<T>(&config, arm, arm_dir.as_deref());
        rows.push(match row {
            Ok(r) => r,
            Err(e) => AblationRow {
                arm: arm.into(),
                status: format!("failed: {e}"),
                stage1_metric: None,
                stage2_metric: None,
                stage2_nll: None,
            },
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablations.csv"), ablation_csv(&rows))?;
    }
    Ok(rows)
}

fn run_one_arm<T: Elem>(config: &RunConfig, arm: &str, dir: Option<&Path>) -> Result<AblationRow> {
    let stage1 = run_stage1::<T>(config, dir)?;
    let stage1_metric = stage1.eval_metric;
    if config.no_oracle {
        return Ok(AblationRow {
            arm: arm.into(),
            status: "ok".into(),
            stage1_metric: Some(stage1_metric),
            stage2_metric: None,
            stage2_nll: None,
        });
    }
    let stage2 = run_stage2::<T>(config, stage1, dir)?;
    Ok(AblationRow {
        arm: arm.into(),
        status: "ok".into(),
        stage1_metric: Some(stage1_metric),
        stage2_metric: Some(stage2.eval_metric),
        stage2_nll: Some(stage2.final_nll),
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("arm,status,stage1_metric,stage2_metric,stage2_nll\n");
    for r in rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "N/A".into());
        writeln!(
            out,
            "{},{},{},{},{}",
            r.arm,
            r.status.replace(',', ";"),
            fmt(r.stage1_metric),
            fmt(r.stage2_metric),
            fmt(r.stage2_nll)
        )
        .unwrap();
    }
    out
}

// ── code-size sweep ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub code_len: usize,
    pub dict_size: usize,
    pub status: String,
    pub stage1_metric: Option<f64>,
    pub stage2_metric: Option<f64>,
}

/// Cross product of code lengths and dictionary sizes; per-cell failures are
/// recorded and the sweep continues.
pub fn run_code_sweep<T: Elem>(
    base: &RunConfig,
    lengths: &[usize],
    dict_sizes: &[usize],
    with_stage2: bool,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    for &n in lengths {
        if crate::vq::integer_sqrt(n).is_none() {
            return Err(crate::invalid_arg!("sweep code length {n} is not a perfect square"));
        }
    }
    let mut rows = Vec::new();
    for &n in lengths {
        for &dict in dict_sizes {
            let mut config = base.clone();
            config.code_len = n;
            config.dict_size = dict;
            let cell_dir = out_dir.map(|d| d.join(format!("n{n}_N{dict}")));
            let row = (|| -> Result<SweepRow> {
                let stage1 = run_stage1::<T>(&config, cell_dir.as_deref())?;
                let stage1_metric = stage1.eval_metric;
                let stage2_metric = if with_stage2 {
                    Some(run_stage2::<T>(&config, stage1, cell_dir.as_deref())?.eval_metric)
                } else {
                    None
                };
                Ok(SweepRow {
                    code_len: n,
                    dict_size: dict,
                    status: "ok".into(),
                    stage1_metric: Some(stage1_metric),
                    stage2_metric,
                })
            })();
            rows.push(row.unwrap_or_else(|e| SweepRow {
                code_len: n,
                dict_size: dict,
                status: format!("failed: {e}"),
                stage1_metric: None,
                stage2_metric: None,
            }));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("code_len,dict_size,status,stage1_metric,stage2_metric\n");
    for r in rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "N/A".into());
        writeln!(
            out,
            "{},{},{},{},{}",
            r.code_len,
            r.dict_size,
            r.status.replace(',', ";"),
            fmt(r.stage1_metric),
            fmt(r.stage2_metric)
        )
        .unwrap();
    }
    out
}

// ── dataset dump ────────────────────────────────────────────────────────

/// Write the synthetic dataset to disk: one directory per split, one
/// directory per example holding raster files and a metadata record.
pub fn generate_dataset(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let task = config.task_spec()?;
    let ds = dataset_for(config)?;
    for (split, count) in [
        (Split::Train, config.train_examples),
        (Split::Eval, config.eval_examples),
    ] {
        let split_name = match split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        for i in 0..count {
            let spec = ds.scene_spec(split, i);
            let ex = crate::synthdata::render_scene(&spec, config.input_size)?;
            let dir = out_dir.join(split_name).join(format!("{i:06}"));
            std::fs::create_dir_all(&dir)?;

            let frame = crate::viz::frame_from_rgb(&ex.image);
            crate::viz::save_png(&frame, &dir.join("image.png"))?;
            let sem: Vec<u8> = ex.mask.semantic.iter().map(|&v| v as u8).collect();
            crate::viz::save_gray8_png(&sem, ex.mask.height, ex.mask.width, &dir.join("semantic.png"))?;
            let inst: Vec<u8> = ex.mask.instance.iter().map(|&v| v as u8).collect();
            crate::viz::save_gray8_png(&inst, ex.mask.height, ex.mask.width, &dir.join("instance.png"))?;
            // Depth scaled to the full u16 range over [0, max_depth].
            let depth: Vec<u16> = ex
                .depth
                .values
                .iter()
                .map(|&v| ((v as f64 / task.max_depth).clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            crate::viz::save_gray16_png(&depth, ex.depth.height, ex.depth.width, &dir.join("depth.png"))?;
            let meta = serde_json::json!({
                "seed": spec.seed,
                "spec": &spec,
                "max_depth": task.max_depth,
            });
            std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)?)?;
        }
    }
    Ok(())
}

//! Stage-I joint optimization of (base model, oracle) and stage-II language
//! model optimization: optimizer, schedule, gradient clipping, and the two
//! per-step procedures.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{BaseModel, LanguageModel, OracleModel};
use crate::tasks::{task_reconstruction_loss, EncodedLabel, TaskSpec};
use crate::tensor::{Elem, GradMap, ParamContainer, ParamId, Tape, Tensor};
use crate::vq::{codebook_perplexity, commitment_loss, sample_dropout_mask, GuidingCode};

/// Dead-entry detection window, in maintenance steps (maintenance runs every
/// training step).
pub const USAGE_WINDOW: usize = 100;

/// Commitment loss weight.
pub const COMMITMENT_BETA: f64 = 0.25;

/// Respawn noise scale as a fraction of the codebook RMS.
pub const RESPAWN_NOISE_FACTOR: f64 = 1e-3;

// ── learning-rate schedule ──────────────────────────────────────────────

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(crate::invalid_arg!(
                "warmup {warmup_steps} exceeds total steps {total_steps}"
            ));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(crate::invalid_arg!(
                "step {step} out of schedule range [0, {}]",
                self.total_steps
            ));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        let progress = if span == 0 {
            1.0
        } else {
            (step - self.warmup_steps) as f64 / span as f64
        };
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

// ── optimizer ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    /// Cap on the second-moment decay rate; below the cap it follows the
    /// schedule 1 - t^(-0.8), which self-corrects the early bias.
    pub beta2_cap: f64,
    pub grad_clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            weight_decay: 4e-5,
            beta1: 0.9,
            beta2_cap: 0.95,
            grad_clip_norm: 1.0,
        }
    }
}

/// Full (non-factored) second-moment adaptive optimizer with decoupled
/// weight decay. Moment shapes mirror parameter shapes.
pub struct OptimizerState<T> {
    cfg: OptimizerConfig,
    step: u64,
    first: HashMap<ParamId, Tensor<T>>,
    second: HashMap<ParamId, Tensor<T>>,
}

const OPT_EPS: f64 = 1e-8;

impl<T: Elem> OptimizerState<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn beta2_at(&self, step: u64) -> f64 {
        self.cfg.beta2_cap.min(1.0 - (step as f64).powf(-0.8))
    }

    /// Moment tensors as named arrays (checkpoint participation), in the
    /// models' visit order.
    pub fn moment_arrays<M: ParamContainer<T> + ?Sized>(
        &self,
        models: &[&M],
    ) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for model in models {
            model.visit(&mut |p| {
                if let Some(m) = self.first.get(&p.id()) {
                    out.push((format!("opt.m.{}", p.name()), m.clone()));
                }
                if let Some(v) = self.second.get(&p.id()) {
                    out.push((format!("opt.v.{}", p.name()), v.clone()));
                }
            });
        }
        out
    }

    /// Apply one update across every parameter of `models` that has a
    /// gradient. The step counter increases exactly once per call.
    pub fn apply<M: ParamContainer<T> + ?Sized>(
        &mut self,
        models: &mut [&mut M],
        grads: &GradMap<T>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step;
        let beta1 = T::of(self.cfg.beta1);
        let one_m_beta1 = T::one() - beta1;
        let beta2 = T::of(self.beta2_at(t));
        let one_m_beta2 = T::one() - beta2;
        let bias1 = T::of(1.0 / (1.0 - self.cfg.beta1.powi(t as i32)));
        let eps = T::of(OPT_EPS);
        let lr_t = T::of(lr);
        let wd = T::of(self.cfg.weight_decay);
        let (first, second) = (&mut self.first, &mut self.second);
        for model in models {
            model.visit_mut(&mut |p| {
                let Some(g) = grads.get_by_id(p.id()) else { return };
                let m = first
                    .entry(p.id())
                    .or_insert_with(|| Tensor::zeros(p.value.shape()));
                let v = second
                    .entry(p.id())
                    .or_insert_with(|| Tensor::zeros(p.value.shape()));
                let md = m.data_mut();
                let vd = v.data_mut();
                let pd = p.value.data_mut();
                for i in 0..pd.len() {
                    let gi = g.data()[i];
                    md[i] = beta1 * md[i] + one_m_beta1 * gi;
                    vd[i] = beta2 * vd[i] + one_m_beta2 * gi * gi;
                    let update = md[i] * bias1 / (vd[i].sqrt() + eps) + wd * pd[i];
                    pd[i] = pd[i] - lr_t * update;
                }
            });
        }
    }
}

/// If the global L2 norm over all gradients exceeds `max_norm`, scale every
/// gradient by `max_norm / global_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Elem>(grads: &mut GradMap<T>, max_norm: f64) -> Result<f64> {
    if !grads.all_finite() {
        return Err(crate::invalid_arg!("non-finite gradient"));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_all(max_norm / norm);
    }
    Ok(norm)
}

/// Stable FNV-1a digest over parameter names and exact bit patterns; used to
/// assert the stage-I freeze during stage II.
pub fn param_fingerprint<T: Elem, M: ParamContainer<T> + ?Sized>(models: &[&M]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    };
    for m in models {
        m.visit(&mut |p| {
            eat(p.name().as_bytes());
            for &x in p.value.data() {
                eat(&x.to_le_bytes());
            }
        });
    }
    h
}

// ── stage I ─────────────────────────────────────────────────────────────

/// Switches that change what one training step does (the ablation arms).
/// Passing no oracle to `stage1_step` trains the base model directly on
/// (x, y) with no code.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stage1Options {
    /// Zero a random subset of code embeddings before the base model.
    pub code_dropout: bool,
    /// Hide the image from the base model (the oracle still sees it).
    pub no_image: bool,
}

pub struct Stage1Batch<T> {
    /// `[B, H, W, 3]` input images.
    pub images: Tensor<T>,
    pub labels: Vec<EncodedLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Metrics {
    pub loss: f64,
    pub reconstruction_loss: f64,
    pub commitment_loss: f64,
    pub codebook_perplexity: f64,
    pub respawned: usize,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One joint optimization step of (base model, oracle): oracle encoding with
/// straight-through quantization, optional code dropout, reconstruction +
/// commitment loss, backward, global-norm clip, optimizer update, then EMA
/// codebook maintenance and dead-entry respawning. With no oracle the base
/// model trains directly on (x, y).
#[allow(clippy::too_many_arguments)]
pub fn stage1_step<T: Elem>(
    base: &mut BaseModel<T>,
    oracle: Option<&mut OracleModel<T>>,
    task: &TaskSpec,
    batch: &Stage1Batch<T>,
    opt: &mut OptimizerState<T>,
    schedule: &Schedule,
    step: u64,
    options: Stage1Options,
    rng: &mut ChaCha8Rng,
) -> Result<Stage1Metrics> {
    let mut tape = Tape::new();
    let b = batch.labels.len();
    let images_for_base = if options.no_image {
        Tensor::zeros(batch.images.shape())
    } else {
        batch.images.clone()
    };

    let (loss, recon_value, commit_value, encoding) = match &oracle {
        None => {
            let logits = base.forward_on_tape(&mut tape, &images_for_base, None)?;
            let recon = task_reconstruction_loss(&mut tape, task, logits, &batch.labels)?;
            let v = tape.value(recon).scalar_value()?.as_f64();
            (recon, v, 0.0, None)
        }
        Some(oracle) => {
            let enc = oracle.encode_on_tape(&mut tape, &batch.labels, Some(&batch.images))?;
            let n = oracle.config().code_len;
            let code_input = if options.code_dropout {
                let mut mask = Vec::with_capacity(b * n);
                for _ in 0..b {
                    mask.extend(
                        sample_dropout_mask(n, rng)
                            .into_iter()
                            .map(|drop| if drop { T::zero() } else { T::one() }),
                    );
                }
                let mask = tape.constant(Tensor::from_vec(mask, &[b, n, 1])?);
                tape.mul(enc.z_q, mask)?
            } else {
                enc.z_q
            };
            let logits = base.forward_on_tape(&mut tape, &images_for_base, Some(code_input))?;
            let recon = task_reconstruction_loss(&mut tape, task, logits, &batch.labels)?;
            let commit = commitment_loss(&mut tape, enc.z_e, &enc.z_q_value, COMMITMENT_BETA)?;
            let total = tape.add(recon, commit)?;
            let rv = tape.value(recon).scalar_value()?.as_f64();
            let cv = tape.value(commit).scalar_value()?.as_f64();
            (total, rv, cv, Some(enc))
        }
    };

    let loss_value = tape.value(loss).scalar_value()?.as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            value: loss_value,
        });
    }

    let mut grads = tape.backward(loss)?;
    let grad_norm = clip_global_norm(&mut grads, opt.config().grad_clip_norm)?;
    let lr = schedule.lr_at(step)?;

    let (perplexity, respawned) = match (oracle, encoding) {
        (Some(oracle), Some(enc)) => {
            opt.apply(&mut [base as &mut dyn ParamContainer<T>, oracle], &grads, lr);

            let n = oracle.config().code_len;
            let d = oracle.config().codeword_dim;
            let flat_z = enc.z_e_value.reshaped(&[b * n, d])?;
            let flat_code = GuidingCode::new(
                enc.codes.iter().flat_map(|c| c.indices().iter().copied()).collect(),
                oracle.config().dict_size,
            )?;
            oracle.codebook.ema_update(&flat_z, &flat_code)?;
            let noise = RESPAWN_NOISE_FACTOR * oracle.codebook.entries().rms();
            let respawned = oracle.codebook.respawn_dead_entries(noise, rng)?;

            let mut hist = vec![0u64; oracle.config().dict_size];
            for &i in flat_code.indices() {
                hist[i] += 1;
            }
            (codebook_perplexity(&hist)?, respawned.len())
        }
        _ => {
            opt.apply(&mut [base], &grads, lr);
            (0.0, 0)
        }
    };

    Ok(Stage1Metrics {
        loss: loss_value,
        reconstruction_loss: recon_value,
        commitment_loss: commit_value,
        codebook_perplexity: perplexity,
        respawned,
        grad_norm,
        lr,
    })
}

// ── stage II ────────────────────────────────────────────────────────────

pub struct Stage2Batch<T> {
    /// `[B, H, W, 3]` input images.
    pub images: Tensor<T>,
    /// Clean oracle codes (no dropout is applied to stage-II targets).
    pub codes: Vec<GuidingCode>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Metrics {
    /// Teacher-forced mean negative log-likelihood per code position, nats.
    pub nll: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One language-model step: teacher-forced cross-entropy over all code
/// positions. The oracle and base model are not on this tape at all, so
/// their parameters cannot move.
pub fn stage2_step<T: Elem>(
    lm: &mut LanguageModel<T>,
    batch: &Stage2Batch<T>,
    opt: &mut OptimizerState<T>,
    schedule: &Schedule,
    step: u64,
) -> Result<Stage2Metrics> {
    let cfg = *lm.config();
    let mut targets = Vec::with_capacity(batch.codes.len() * cfg.code_len);
    for code in &batch.codes {
        if let Some(&bad) = code.indices().iter().find(|&&i| i >= cfg.dict_size) {
            return Err(crate::invalid_arg!(
                "stage2: code index {bad} out of dictionary range [0, {})",
                cfg.dict_size
            ));
        }
        targets.extend_from_slice(code.indices());
    }
    let mut tape = Tape::new();
    let memory = lm.encode_images(&mut tape, &batch.images)?;
    let logits = lm.teacher_forced_logits(&mut tape, memory, &batch.codes)?;
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    let nll = tape.value(loss).scalar_value()?.as_f64();
    if !nll.is_finite() {
        return Err(Error::NonFiniteLoss { step, value: nll });
    }
    let mut grads = tape.backward(loss)?;
    let grad_norm = clip_global_norm(&mut grads, opt.config().grad_clip_norm)?;
    let lr = schedule.lr_at(step)?;
    opt.apply(&mut [lm], &grads, lr);
    Ok(Stage2Metrics { nll, grad_norm, lr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;
    use crate::util::seeded_rng;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = Schedule::new(4e-4, 100, 1100).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(100).unwrap(), 4e-4);
        // Midpoint of the decay span: cos(pi/2) = 0 -> base/2.
        assert!((s.lr_at(600).unwrap() - 2e-4).abs() < 1e-18);
        assert!(s.lr_at(1100).unwrap().abs() < 1e-18);
        assert!(s.lr_at(1101).is_err());
    }

    #[test]
    fn schedule_rejects_warmup_beyond_total() {
        assert!(Schedule::new(1e-3, 10, 5).is_err());
    }

    #[test]
    fn clip_leaves_small_gradients_unchanged() {
        let mut rng = seeded_rng(1);
        let p = Param::new("p", Tensor::<f64>::randn(&[4], 1.0, &mut rng));
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let m = tape.mean_all(v);
        let sc = tape.scale(m, 0.1);
        let mut grads = tape.backward(sc).unwrap();
        let before = grads.get(&p).unwrap().clone();
        let norm = clip_global_norm(&mut grads, 1.0).unwrap();
        assert!(norm < 1.0);
        assert_eq!(grads.get(&p).unwrap(), &before);
    }

    #[test]
    fn clip_rescales_to_max_norm_preserving_direction() {
        let p = Param::new("p", Tensor::<f64>::from_vec(vec![0.0; 4], &[4]).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&p);
        // Gradient of sum(4x) is [4, 4, 4, 4]... use scale to get norm 4:
        // grad of scale(sum(x), 2) is [2,2,2,2], norm 4.
        let s = tape.sum_all(v);
        let s = tape.scale(s, 2.0);
        let mut grads = tape.backward(s).unwrap();
        assert!((grads.global_norm() - 4.0).abs() < 1e-12);
        let before = grads.get(&p).unwrap().clone();
        let pre = clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((pre - 4.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-6);
        let after = grads.get(&p).unwrap();
        // Direction preserved: after = before / 4 elementwise.
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((a - b / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_rejects_non_finite() {
        let p = Param::new("p", Tensor::<f64>::from_vec(vec![1e308, 1e308], &[2]).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum_all(sq);
        let mut grads = tape.backward(loss).unwrap();
        assert!(clip_global_norm(&mut grads, 1.0).is_err());
    }

    #[test]
    fn beta2_schedule_is_capped() {
        let opt = OptimizerState::<f32>::new(OptimizerConfig::default());
        assert_eq!(opt.beta2_at(1), 0.0);
        assert!(opt.beta2_at(10) < 0.95);
        assert_eq!(opt.beta2_at(100_000), 0.95);
    }

    #[test]
    fn optimizer_moves_parameters_against_gradient() {
        let mut p = Param::new("p", Tensor::<f64>::from_vec(vec![1.0, -2.0], &[2]).unwrap());
        struct One<'a>(&'a mut Param<f64>);
        impl ParamContainer<f64> for One<'_> {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
                f(self.0)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
                f(self.0)
            }
        }
        let mut opt = OptimizerState::new(OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        });
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let before = p.value.clone();
        let mut holder = One(&mut p);
        opt.apply(&mut [&mut holder], &grads, 0.1);
        // Gradient is 2x: both coordinates move toward zero.
        assert!(p.value.data()[0] < before.data()[0]);
        assert!(p.value.data()[1] > before.data()[1]);
    }
}

//! Training phases: two-stage diffusion curriculum, constrained-order
//! trajectory distillation and on-policy step reduction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProgramSample, TokenId, TokenSeq, Vocab, MASK_ID};
use crate::corruption::{EditSchedule, NoiseSchedule};
use crate::denoiser::{Checkpoint, DenoiserParams, ModelConfig};
use crate::objectives::{
    constrained_loss, diff_loss_at, onpolicy_objective, DiffLossConfig, DistillPair, RunningBaseline, Verify,
    DEFAULT_BETA, TIME_EPS,
};
use crate::rng::{stream_rng, streams, DetRng};
use crate::sampler::{encode_prompt, sample_blockwise, BlockPlan, SampleConfig, Trajectory, UnmaskRule};
use crate::{Error, Result};

/// Momentum-free adaptive optimizer: per-parameter RMS normalization with a
/// bias-corrected second-moment estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Rmsprop {
    pub rho: f64,
    pub eps: f64,
    pub step: u64,
    pub v: Vec<f32>,
}

impl Rmsprop {
    pub const DEFAULT_RHO: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            rho: Self::DEFAULT_RHO,
            eps: Self::DEFAULT_EPS,
            step: 0,
            v: vec![0.0; n],
        }
    }

    pub fn from_state(step: u64, v: Vec<f32>) -> Self {
        Self { step, v, ..Self::new(0) }
    }

    pub fn apply(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.step += 1;
        let rho = self.rho as f32;
        let correction = 1.0 - self.rho.powi(self.step.min(i32::MAX as u64) as i32);
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(self.v.iter_mut()) {
            *v = rho * *v + (1.0 - rho) * g * g;
            let denom = ((*v as f64 / correction).sqrt() + self.eps) as f32;
            *p -= (lr as f32) * g / denom;
        }
    }
}

/// Cosine decay from `lr` to zero over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
}

fn clip_global_norm(grad: &mut [f32], max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if norm > max {
            let scale = (max / norm) as f32;
            for g in grad.iter_mut() {
                *g *= scale;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub total_steps: usize,
    /// Fraction of steps trained on the mask term alone.
    pub mask_only_fraction: f64,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub noise: NoiseSchedule,
    pub alpha_max: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            mask_only_fraction: 0.8,
            batch_size: 16,
            learning_rate: 3e-3,
            clip_norm: Some(1.0),
            noise: NoiseSchedule::linear(),
            alpha_max: 0.1,
            log_every: 10,
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.mask_only_fraction > 0.0 && self.mask_only_fraction <= 1.0) {
            return bad("mask_only_fraction must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        EditSchedule::new(self.alpha_max)?;
        Ok(())
    }

    /// First step that trains the edit term.
    pub fn phase_boundary(&self) -> usize {
        (self.total_steps as f64 * self.mask_only_fraction).floor() as usize
    }

    fn loss_config(&self) -> DiffLossConfig {
        DiffLossConfig {
            noise: self.noise,
            edit: EditSchedule {
                alpha_max: self.alpha_max,
            },
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    /// 1 = mask term only, 2 = mask and edit terms.
    pub phase: u8,
    pub loss_total: f64,
    pub loss_edit: f64,
    pub loss_mask: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// Training lattices and prompt lengths for a corpus.
pub fn corpus_lattices(corpus: &[ProgramSample], max_len: usize) -> Result<Vec<(TokenSeq, usize)>> {
    let vocab = Vocab::new();
    corpus
        .iter()
        .map(|s| {
            let seq = s
                .lattice(&vocab, max_len)
                .map_err(|e| Error::InvalidCorpus(format!("{:?}: {e}", s.prompt)))?;
            if s.prompt_len() >= max_len {
                return Err(Error::InvalidCorpus(format!("prompt fills the lattice: {:?}", s.prompt)));
            }
            Ok((seq, s.prompt_len()))
        })
        .collect()
}

/// Two-stage curriculum from a fresh initialization.
pub fn train_tsc(model: &ModelConfig, cfg: &CurriculumConfig, corpus: &[ProgramSample]) -> Result<TrainOutput> {
    train_tsc_from(model, cfg, corpus, None, cfg.total_steps)
}

/// Runs steps `[start, until)` of the curriculum, where `start` is the step
/// stored in `resume` (or 0). Every step draws its randomness from
/// `(seed, step)` alone, so an interrupted run resumes bit-identically.
pub fn train_tsc_from(
    model: &ModelConfig,
    cfg: &CurriculumConfig,
    corpus: &[ProgramSample],
    resume: Option<Checkpoint>,
    until: usize,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidCorpus("empty corpus".into()));
    }
    let data = corpus_lattices(corpus, model.max_len)?;
    let (mut params, mut opt) = match resume {
        Some(ckpt) => {
            if &ckpt.params.config != model {
                return Err(Error::BadCheckpoint("model config differs from checkpoint".into()));
            }
            let n = ckpt.params.len();
            let opt = Rmsprop::from_state(ckpt.step, ckpt.opt_state.unwrap_or_else(|| vec![0.0; n]));
            (ckpt.params, opt)
        }
        None => {
            let p = DenoiserParams::init(model, cfg.seed)?;
            let n = p.len();
            (p, Rmsprop::new(n))
        }
    };
    let loss_cfg = cfg.loss_config();
    let boundary = cfg.phase_boundary();
    let until = until.min(cfg.total_steps);
    let mut log = Vec::new();
    for step in opt.step as usize..until {
        let with_edit = step >= boundary;
        let mut rng = stream_rng(cfg.seed, streams::TRAIN, step as u64);
        let b = cfg.batch_size;
        let u_mask: f64 = rng.random();
        let u_edit: f64 = rng.random();
        let jobs: Vec<(usize, f64, f64, u64)> = (0..b)
            .map(|j| {
                let idx = rng.random_range(0..data.len());
                let strat = |u: f64| TIME_EPS + (1.0 - 2.0 * TIME_EPS) * ((j as f64 + u) / b as f64);
                (idx, strat(u_mask), strat(u_edit), rng.random())
            })
            .collect();
        let results: Vec<Result<_>> = jobs
            .par_iter()
            .map(|&(idx, t_mask, t_edit, seed)| {
                let mut ex_rng = DetRng::seed_from_u64(seed);
                let (x0, p) = &data[idx];
                diff_loss_at(&params, x0, *p, t_mask, with_edit.then_some(t_edit), &loss_cfg, &mut ex_rng, true)
            })
            .collect();
        let mut grad = vec![0.0f32; params.len()];
        let (mut total, mut edit, mut mask) = (0.0, 0.0, 0.0);
        let last_good = || {
            Box::new(Checkpoint {
                params: params.clone(),
                step: step as u64,
                opt_state: Some(opt.v.clone()),
            })
        };
        for r in results {
            let (lb, g) = match r {
                Ok(x) => x,
                Err(Error::NonFiniteActivation(_)) => {
                    return Err(Error::DivergenceDetected {
                        step,
                        last_good: last_good(),
                    })
                }
                Err(e) => return Err(e),
            };
            total += lb.total;
            edit += lb.edit_term;
            mask += lb.mask_term;
            for (a, x) in grad.iter_mut().zip(g.expect("gradient requested")) {
                *a += x;
            }
        }
        let scale = 1.0 / b as f64;
        let (total, edit, mask) = (total * scale, edit * scale, mask * scale);
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergenceDetected {
                step,
                last_good: last_good(),
            });
        }
        for g in &mut grad {
            *g *= scale as f32;
        }
        clip_global_norm(&mut grad, cfg.clip_norm);
        let lr = cosine_lr(cfg.learning_rate, step, cfg.total_steps);
        opt.apply(&mut params.values, &grad, lr);
        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            log.push(TrainLogRow {
                step,
                phase: if with_edit { 2 } else { 1 },
                loss_total: total,
                loss_edit: edit,
                loss_mask: mask,
            });
        }
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            params,
            step: opt.step,
            opt_state: Some(opt.v),
        },
        log,
    })
}

pub const TRAIN_LOG_HEADER: &str = "step,phase,loss_total,loss_edit,loss_mask";
pub const ONPOLICY_LOG_HEADER: &str = "update,mean_steps,pass_rate,speedup_ratio";

pub fn format_train_log(rows: &[TrainLogRow]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            r.step, r.phase, r.loss_total, r.loss_edit, r.loss_mask
        )
        .unwrap();
    }
    s
}

pub fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    fs::write(path, format_train_log(rows))?;
    Ok(())
}

/// Candidate trajectory with its ELBO score.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub trajectory: Trajectory,
    pub elbo_score: f64,
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub sample_index: usize,
    pub candidates: Vec<Candidate>,
    /// Indices into `candidates`, best first.
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryPool {
    pub group_size: usize,
    pub keep_top: usize,
    pub entries: Vec<PoolEntry>,
}

/// Sum over steps of the committed log-probabilities, each step weighted by
/// the ELBO time weight at its start time.
pub fn trajectory_elbo(traj: &Trajectory, schedule: &NoiseSchedule) -> f64 {
    traj.steps
        .iter()
        .map(|s| schedule.weight(s.t) * s.logp.iter().sum::<f64>())
        .sum()
}

/// Indices of the `m` highest scores, ties broken by lower index.
pub fn select_top(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Candidate trajectories per sample, `G`.
    pub group_size: usize,
    /// Trajectories kept per sample, `m`.
    pub keep_top: usize,
    /// Number of corpus samples used to build the pool.
    pub samples: usize,
    pub block_size: usize,
    pub sampler: SampleConfig,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Edit augmentation of the inputs; `None` disables it.
    pub alpha_max: Option<f64>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            keep_top: 2,
            samples: 256,
            block_size: 16,
            sampler: SampleConfig {
                unmask_rule: UnmaskRule::Random,
                ..SampleConfig::default()
            },
            finetune_steps: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            alpha_max: Some(0.1),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.keep_top == 0 || self.keep_top > self.group_size {
            return Err(Error::InvalidConfig("need 1 <= keep_top <= group_size".into()));
        }
        if self.batch_size == 0 || self.block_size == 0 {
            return Err(Error::InvalidConfig("batch_size and block_size must be positive".into()));
        }
        if let Some(a) = self.alpha_max {
            EditSchedule::new(a)?;
        }
        self.sampler.validate()
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub pool: TrajectoryPool,
    pub checkpoint: Checkpoint,
    /// Mean constrained loss of each fine-tuning step.
    pub losses: Vec<f64>,
}

/// Builds the trajectory pool from the first `cfg.samples` corpus entries.
pub fn build_pool(params: &DenoiserParams, corpus: &[ProgramSample], cfg: &DistillConfig) -> Result<TrajectoryPool> {
    cfg.validate()?;
    let vocab = Vocab::new();
    let n = cfg.samples.min(corpus.len());
    let schedule = cfg.sampler.schedule;
    let entries: Vec<Result<PoolEntry>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let prompt = encode_prompt(&vocab, &corpus[i].prompt)?;
            let plan = BlockPlan::new(prompt.len(), params.config.max_len, cfg.block_size)?;
            let mut candidates = Vec::with_capacity(cfg.group_size);
            for g in 0..cfg.group_size {
                let mut rng = stream_rng(cfg.seed, streams::DISTILL, (i * cfg.group_size + g) as u64);
                let trajectory = sample_blockwise(params, &prompt, &plan, &cfg.sampler, &mut rng)?;
                let elbo_score = trajectory_elbo(&trajectory, &schedule);
                candidates.push(Candidate {
                    trajectory,
                    elbo_score,
                });
            }
            let scores: Vec<f64> = candidates.iter().map(|c| c.elbo_score).collect();
            Ok(PoolEntry {
                sample_index: i,
                kept: select_top(&scores, cfg.keep_top),
                candidates,
            })
        })
        .collect();
    Ok(TrajectoryPool {
        group_size: cfg.group_size,
        keep_top: cfg.keep_top,
        entries: entries.into_iter().collect::<Result<_>>()?,
    })
}

/// Fine-tuning pairs from the kept trajectories: every intermediate state
/// paired with the sample's ground-truth lattice.
pub fn pool_pairs(pool: &TrajectoryPool, corpus: &[ProgramSample], max_len: usize) -> Result<Vec<DistillPair>> {
    let vocab = Vocab::new();
    let mut pairs = Vec::new();
    for e in &pool.entries {
        let x0 = corpus[e.sample_index].lattice(&vocab, max_len)?.into_ids();
        for &k in &e.kept {
            let traj = &e.candidates[k].trajectory;
            for state in &traj.states[..traj.states.len() - 1] {
                let mut x_i = traj.prompt.clone();
                x_i.extend_from_slice(state);
                let masked = state.iter().filter(|&&x| x == MASK_ID).count();
                let t = (masked as f64 / state.len() as f64).clamp(TIME_EPS, 1.0 - TIME_EPS);
                pairs.push(DistillPair {
                    x_i,
                    x_0: x0.clone(),
                    prompt_len: traj.prompt.len(),
                    t,
                });
            }
        }
    }
    Ok(pairs)
}

/// Builds the pool and fine-tunes on the constrained-order loss alone.
pub fn distill_trajectories(ckpt: &Checkpoint, corpus: &[ProgramSample], cfg: &DistillConfig) -> Result<DistillOutput> {
    let pool = build_pool(&ckpt.params, corpus, cfg)?;
    let pairs = pool_pairs(&pool, corpus, ckpt.params.config.max_len)?;
    let mut params = ckpt.params.clone();
    let mut opt = Rmsprop::new(params.len());
    let augment = cfg.alpha_max.map(|alpha_max| EditSchedule { alpha_max });
    let mut losses = Vec::with_capacity(cfg.finetune_steps);
    for step in 0..cfg.finetune_steps {
        let mut rng = stream_rng(cfg.seed, streams::DISTILL, (1u64 << 40) + step as u64);
        let jobs: Vec<(usize, u64)> = (0..cfg.batch_size)
            .map(|_| (rng.random_range(0..pairs.len()), rng.random()))
            .collect();
        let results: Vec<Result<(f64, Option<Vec<f32>>)>> = jobs
            .par_iter()
            .map(|&(idx, seed)| {
                let mut ex_rng = DetRng::seed_from_u64(seed);
                constrained_loss(&params, &pairs[idx], augment.as_ref(), &mut ex_rng, true)
            })
            .collect();
        let mut grad = vec![0.0f32; params.len()];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (a, x) in grad.iter_mut().zip(g.expect("gradient requested")) {
                *a += x;
            }
        }
        let scale = 1.0 / cfg.batch_size as f32;
        for g in &mut grad {
            *g *= scale;
        }
        let loss = loss / cfg.batch_size as f64;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        opt.apply(&mut params.values, &grad, cosine_lr(cfg.learning_rate, step, cfg.finetune_steps));
        losses.push(loss);
    }
    Ok(DistillOutput {
        pool,
        checkpoint: Checkpoint::weights_only(params),
        losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnPolicyConfig {
    pub updates: usize,
    pub prompts_per_update: usize,
    /// Verifier reward weight.
    pub beta: f64,
    pub learning_rate: f64,
    pub baseline_decay: f64,
    pub clip_norm: Option<f64>,
    pub block_size: usize,
    /// Per-step unmask fraction targets at the first and last update; the
    /// fraction ramps linearly in between.
    pub start_unmask_fraction: f64,
    pub end_unmask_fraction: f64,
    /// Sampler settings apart from the step budget, which follows the ramp.
    pub sampler: SampleConfig,
    /// Abort when the batch pass rate stays below half its starting value
    /// for this many consecutive updates.
    pub collapse_window: usize,
    pub seed: u64,
}

impl Default for OnPolicyConfig {
    fn default() -> Self {
        Self {
            updates: 100,
            prompts_per_update: 8,
            beta: DEFAULT_BETA,
            learning_rate: 1e-4,
            baseline_decay: 0.9,
            clip_norm: None,
            block_size: 16,
            start_unmask_fraction: 1.0 / 16.0,
            end_unmask_fraction: 0.25,
            sampler: SampleConfig::default(),
            collapse_window: 50,
            seed: 0,
        }
    }
}

impl OnPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(self.start_unmask_fraction) || !frac_ok(self.end_unmask_fraction) {
            return Err(Error::InvalidConfig("unmask fractions must lie in (0, 1]".into()));
        }
        if self.prompts_per_update == 0 || self.block_size == 0 || self.collapse_window == 0 {
            return Err(Error::InvalidConfig(
                "prompts_per_update, block_size and collapse_window must be positive".into(),
            ));
        }
        self.sampler.validate()
    }

    /// Target per-step unmask fraction at `update`.
    pub fn unmask_fraction(&self, update: usize) -> f64 {
        let span = self.updates.saturating_sub(1).max(1) as f64;
        let a = (update as f64 / span).min(1.0);
        self.start_unmask_fraction + (self.end_unmask_fraction - self.start_unmask_fraction) * a
    }

    /// Sampler used at `update`: the step budget realizes the ramped fraction.
    pub fn sampler_at(&self, update: usize) -> SampleConfig {
        let per_step = (self.unmask_fraction(update) * self.block_size as f64).round().max(1.0);
        SampleConfig {
            steps_per_block: (self.block_size as f64 / per_step).ceil() as usize,
            ..self.sampler.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnPolicyRow {
    pub update: usize,
    pub mean_steps: f64,
    pub pass_rate: f64,
    /// Generated tokens per step; the one-token-per-step limit is 1.
    pub speedup_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct OnPolicyOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<OnPolicyRow>,
}

/// REINFORCE on `surrogate - beta * V` with a running-mean baseline, while
/// the per-step unmask fraction ramps up.
pub fn train_onpolicy(
    ckpt: &Checkpoint,
    corpus: &[ProgramSample],
    verifier: &impl Verify,
    cfg: &OnPolicyConfig,
) -> Result<OnPolicyOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidCorpus("empty corpus".into()));
    }
    let vocab = Vocab::new();
    let max_len = ckpt.params.config.max_len;
    let prompts: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|s| encode_prompt(&vocab, &s.prompt))
        .collect::<Result<_>>()?;
    let mut params = ckpt.params.clone();
    let mut opt = Rmsprop::new(params.len());
    let mut baseline = RunningBaseline::new(cfg.baseline_decay);
    let mut log = Vec::with_capacity(cfg.updates);
    let mut start_pass = None;
    let mut below = 0;
    for update in 0..cfg.updates {
        let sampler = cfg.sampler_at(update);
        let mut rng = stream_rng(cfg.seed, streams::ONPOLICY, update as u64);
        let picks: Vec<usize> = (0..cfg.prompts_per_update)
            .map(|_| rng.random_range(0..prompts.len()))
            .collect();
        let base = baseline;
        let samples: Vec<Result<_>> = picks
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let plan = BlockPlan::new(prompts[i].len(), max_len, cfg.block_size)?;
                let mut srng = stream_rng(
                    cfg.seed,
                    streams::ONPOLICY,
                    (1u64 << 40) + (update * cfg.prompts_per_update + j) as u64,
                );
                let s = onpolicy_objective(&params, &prompts[i], &plan, &sampler, verifier, cfg.beta, &base, &mut srng)?;
                Ok((s, plan.window_len()))
            })
            .collect();
        let mut grad = vec![0.0f32; params.len()];
        let (mut steps, mut tokens, mut passed) = (0usize, 0usize, 0usize);
        for r in samples {
            let (s, window) = r?;
            steps += s.trajectory.step_count();
            tokens += window;
            passed += s.reward as usize;
            baseline.update(s.objective);
            for (a, g) in grad.iter_mut().zip(&s.grad) {
                *a += g;
            }
        }
        let n = cfg.prompts_per_update as f64;
        for g in &mut grad {
            *g /= n as f32;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        clip_global_norm(&mut grad, cfg.clip_norm);
        opt.apply(&mut params.values, &grad, cfg.learning_rate);
        let pass_rate = passed as f64 / n;
        log.push(OnPolicyRow {
            update,
            mean_steps: steps as f64 / n,
            pass_rate,
            speedup_ratio: tokens as f64 / steps.max(1) as f64,
        });
        let start = *start_pass.get_or_insert(pass_rate);
        below = if pass_rate < 0.5 * start { below + 1 } else { 0 };
        if below >= cfg.collapse_window {
            return Err(Error::CollapseDetected {
                update,
                pass_rate,
                start,
            });
        }
    }
    let checkpoint = if cfg.updates == 0 {
        ckpt.clone()
    } else {
        Checkpoint {
            params,
            step: ckpt.step,
            opt_state: None,
        }
    };
    Ok(OnPolicyOutput { checkpoint, log })
}

pub fn format_onpolicy_log(rows: &[OnPolicyRow]) -> String {
    let mut s = String::from(ONPOLICY_LOG_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6}",
            r.update, r.mean_steps, r.pass_rate, r.speedup_ratio
        )
        .unwrap();
    }
    s
}

pub fn write_onpolicy_log(path: &Path, rows: &[OnPolicyRow]) -> Result<()> {
    fs::write(path, format_onpolicy_log(rows))?;
    Ok(())
}

/// Parses an on-policy log; a missing or empty file is [`Error::MissingLog`].
pub fn read_onpolicy_log(path: &Path) -> Result<Vec<OnPolicyRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingLog(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim() == ONPOLICY_LOG_HEADER => {}
        _ => return Err(Error::MissingLog(format!("{}: missing header", path.display()))),
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::MissingLog(format!("{}: malformed row {line:?}", path.display()));
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(OnPolicyRow {
            update: f[0].parse().map_err(|_| bad())?,
            mean_steps: f[1].parse().map_err(|_| bad())?,
            pass_rate: f[2].parse().map_err(|_| bad())?,
            speedup_ratio: f[3].parse().map_err(|_| bad())?,
        });
    }
    if rows.is_empty() {
        return Err(Error::MissingLog(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_first_step_is_sign_times_lr() {
        let mut opt = Rmsprop::new(3);
        let mut p = vec![0.0f32; 3];
        opt.apply(&mut p, &[2.0, -0.5, 0.0], 0.1);
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100), 1.0);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100).abs() < 1e-12);
    }

    #[test]
    fn phase_boundary_floor() {
        let cfg = CurriculumConfig {
            total_steps: 2001,
            ..CurriculumConfig::default()
        };
        assert_eq!(cfg.phase_boundary(), 1600);
        let all_mask = CurriculumConfig {
            mask_only_fraction: 1.0,
            ..cfg
        };
        assert_eq!(all_mask.phase_boundary(), 2001);
        let bad = CurriculumConfig {
            mask_only_fraction: 0.0,
            ..CurriculumConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn select_top_breaks_ties_by_index() {
        assert_eq!(select_top(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(select_top(&[-1.0, -1.0], 1), vec![0]);
    }

    #[test]
    fn ramp_reduces_step_budget() {
        let cfg = OnPolicyConfig {
            updates: 11,
            ..OnPolicyConfig::default()
        };
        assert_eq!(cfg.sampler_at(0).steps_per_block, 16);
        assert_eq!(cfg.sampler_at(10).steps_per_block, 4);
        let mut prev = usize::MAX;
        for u in 0..11 {
            let k = cfg.sampler_at(u).steps_per_block;
            assert!(k <= prev);
            prev = k;
        }
    }

    #[test]
    fn onpolicy_log_round_trip() {
        let rows = vec![
            OnPolicyRow {
                update: 0,
                mean_steps: 48.0,
                pass_rate: 0.875,
                speedup_ratio: 1.0,
            },
            OnPolicyRow {
                update: 1,
                mean_steps: 24.0,
                pass_rate: 0.75,
                speedup_ratio: 2.0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("onpolicy.csv");
        write_onpolicy_log(&path, &rows).unwrap();
        assert_eq!(read_onpolicy_log(&path).unwrap(), rows);
        fs::write(&path, format!("{ONPOLICY_LOG_HEADER}\n")).unwrap();
        assert!(matches!(read_onpolicy_log(&path), Err(Error::MissingLog(_))));
    }
}

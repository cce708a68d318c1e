//! Reverse process: parallel unmasking inside blocks, causal order across
//! blocks, with trajectory recording.
//!
//! The generation window is every lattice position after the prompt. It is
//! tiled into blocks of `block_size`. The prompt is encoded together with the
//! first block; once a block is finished it is re-encoded at `t = 0` and
//! committed to the KV cache as part of the first forward of the next block.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bench::BenchRecord;
use crate::corpus::{ProgramSample, TokenId, TokenSeq, Vocab, MASK_ID};
use crate::corruption::NoiseSchedule;
use crate::denoiser::{commit_block, forward_block_causal, forward_segment, DenoiserParams, KvCache, ModelConfig};
use crate::objectives::Verifier;
use crate::rng::{stream_rng, streams};
use crate::{Error, Result};

/// Probability below which a committed token is resampled when revision is on.
pub const REVISION_THRESHOLD: f64 = 0.05;

/// Tiling of the generation window into blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub block_size: usize,
    /// Absolute lattice range of the generation window.
    pub window: Range<usize>,
}

impl BlockPlan {
    pub fn new(prompt_len: usize, max_len: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidConfig("block size must be at least 1".into()));
        }
        if prompt_len >= max_len {
            return Err(Error::SequenceTooLong {
                len: prompt_len + 1,
                max_len,
            });
        }
        Ok(Self {
            block_size,
            window: prompt_len..max_len,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.window.start
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.window_len().div_ceil(self.block_size)
    }

    /// Absolute range of block `n`.
    pub fn block(&self, n: usize) -> Range<usize> {
        let start = self.window.start + n * self.block_size;
        start..(start + self.block_size).min(self.window.end)
    }

    pub fn blocks(&self) -> Vec<Range<usize>> {
        (0..self.num_blocks()).map(|n| self.block(n)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskRule {
    /// Commit the masked positions with the highest maximum probability.
    #[default]
    ConfidenceTopk,
    /// Commit uniformly random masked positions.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Step budget per block, `K_b`.
    pub steps_per_block: usize,
    pub temperature: f64,
    pub unmask_rule: UnmaskRule,
    /// Shapes the per-step unmask fractions; step `j` of `K` runs from
    /// `t = 1 - j/K` to `s = 1 - (j+1)/K`.
    pub schedule: NoiseSchedule,
    pub allow_edit_revision: bool,
    /// Also commit any masked position whose confidence reaches this value,
    /// which can finish a block in fewer than `K_b` steps.
    pub confidence_threshold: Option<f64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps_per_block: 4,
            temperature: 1.0,
            unmask_rule: UnmaskRule::ConfidenceTopk,
            schedule: NoiseSchedule::linear(),
            allow_edit_revision: false,
            confidence_threshold: None,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_block == 0 {
            return Err(Error::InvalidConfig("steps_per_block must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if let Some(c) = self.confidence_threshold {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::InvalidConfig("confidence_threshold must be in (0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Step boundaries `1 = t_0 > t_1 > ... > t_K = 0`.
    pub fn step_times(&self) -> Vec<f64> {
        let k = self.steps_per_block;
        (0..=k).map(|j| 1.0 - j as f64 / k as f64).collect()
    }

    /// Expected fraction of a block unmasked at each step; sums to one.
    pub fn unmask_fractions(&self) -> Vec<f64> {
        self.step_times()
            .windows(2)
            .map(|w| self.schedule.eval(w[0]) - self.schedule.eval(w[1]))
            .collect()
    }
}

/// Number of masked positions to reveal when moving from `t` to `s`, from the
/// mask kernel: each masked position stays masked with probability
/// `gamma_s / gamma_t`.
pub fn unmask_count(masked: usize, s: f64, t: f64, schedule: &NoiseSchedule) -> usize {
    if masked == 0 {
        return 0;
    }
    let gt = schedule.eval(t);
    let gs = schedule.eval(s);
    if s <= 0.0 || gt <= 0.0 {
        return masked;
    }
    let k = (masked as f64 * (gt - gs) / gt).round() as usize;
    k.clamp(1, masked)
}

/// One reverse step inside a block.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub block: usize,
    pub t: f64,
    pub s: f64,
    /// Window-relative positions written at this step (new commits first,
    /// then a revision if any).
    pub positions: Vec<usize>,
    pub tokens: Vec<TokenId>,
    /// Log-probability of each written token under the sampling distribution.
    pub logp: Vec<f64>,
    /// Whether the last entry of `positions` is a revision of a committed token.
    pub revised: bool,
}

/// States `tau[K]..tau[0]` over the generation window, in generation order:
/// `states[0]` is all-mask and the last state is the final sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub plan: BlockPlan,
    pub temperature: f64,
    pub states: Vec<Vec<TokenId>>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn step_count(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_window(&self) -> &[TokenId] {
        self.states.last().expect("trajectory has a start state")
    }

    /// Prompt followed by the final window.
    pub fn final_sequence(&self) -> TokenSeq {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(self.final_window());
        TokenSeq::new(ids)
    }

    pub fn masked_counts(&self) -> Vec<usize> {
        self.states
            .iter()
            .map(|s| s.iter().filter(|&&x| x == MASK_ID).count())
            .collect()
    }

    /// Forward inputs seen by step `i`: tokens, times, block ids and the
    /// absolute range of the active block.
    pub fn step_context(&self, i: usize) -> (Vec<TokenId>, Vec<f64>, Vec<u32>, Range<usize>) {
        let step = &self.steps[i];
        build_context(&self.prompt, &self.states[i], &self.plan, step.block, step.t)
    }
}

/// Inputs of one forward: the prompt and window up to the end of the active
/// block, with per-position times and block ids.
pub fn build_context(
    prompt: &[TokenId],
    window: &[TokenId],
    plan: &BlockPlan,
    block: usize,
    t: f64,
) -> (Vec<TokenId>, Vec<f64>, Vec<u32>, Range<usize>) {
    let active = plan.block(block);
    let p = plan.prompt_len();
    let mut tokens = Vec::with_capacity(active.end);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(&window[..active.end - p]);
    let mut times = Vec::with_capacity(active.end);
    let mut blocks = Vec::with_capacity(active.end);
    for i in 0..active.end {
        // The prompt belongs to block 0.
        let b = if i < p { 0 } else { (i - p) / plan.block_size };
        blocks.push(b as u32);
        times.push(if b == block { t } else { 0.0 });
    }
    (tokens, times, blocks, active)
}

/// Source of denoiser logits for the sampler.
pub trait Denoise {
    fn config(&self) -> &ModelConfig;

    /// Forgets any state from a previous sample.
    fn reset(&mut self);

    /// Logits (`active.len() x vocab`) for the active block, given the full
    /// context up to its end. Every position outside the active block is
    /// final and belongs to an earlier block.
    fn logits(&mut self, tokens: &[TokenId], times: &[f64], blocks: &[u32], active: Range<usize>) -> Result<Vec<f32>>;
}

/// Cached inference: finished blocks are encoded once and reused.
pub struct CachedSession<'a> {
    params: &'a DenoiserParams,
    cache: KvCache<f32>,
}

impl<'a> CachedSession<'a> {
    pub fn new(params: &'a DenoiserParams) -> Self {
        Self {
            params,
            cache: KvCache::new(&params.config),
        }
    }
}

impl Denoise for CachedSession<'_> {
    fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn reset(&mut self) {
        self.cache.clear();
    }

    fn logits(&mut self, tokens: &[TokenId], times: &[f64], blocks: &[u32], active: Range<usize>) -> Result<Vec<f32>> {
        let c = self.cache.committed_len();
        debug_assert!(c <= active.start);
        let base = self.cache.next_block();
        let rel: Vec<u32> = blocks[c..].iter().map(|&b| b - base).collect();
        let out = forward_segment(self.params, &self.cache, &tokens[c..], &times[c..], &rel)?;
        let active_block = blocks[active.start];
        let finished = blocks[c..].iter().take_while(|&&b| b < active_block).count();
        if finished > 0 {
            commit_block(&mut self.cache, &out, finished)?;
        }
        let v = self.params.config.vocab_size;
        let off = active.start - c;
        Ok(out.logits[off * v..(off + active.len()) * v].to_vec())
    }
}

/// Uncached reference: every call recomputes the whole context.
pub struct RecomputeSession<'a> {
    params: &'a DenoiserParams,
}

impl<'a> RecomputeSession<'a> {
    pub fn new(params: &'a DenoiserParams) -> Self {
        Self { params }
    }
}

impl Denoise for RecomputeSession<'_> {
    fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn reset(&mut self) {}

    fn logits(&mut self, tokens: &[TokenId], times: &[f64], blocks: &[u32], active: Range<usize>) -> Result<Vec<f32>> {
        let logits = forward_block_causal(self.params, tokens, times, blocks)?;
        let v = self.params.config.vocab_size;
        Ok(logits[active.start * v..active.end * v].to_vec())
    }
}

/// Tempered distribution of one logit row, in f64.
pub fn tempered_probs(row: &[f32], temperature: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut probs: Vec<f64> = row
        .iter()
        .map(|&z| ((z as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Applies one reverse step to the active block given its logits. Masked
/// positions are ranked by the unmask rule and the top `k` (plus any above
/// the confidence threshold) receive sampled tokens.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<R: Rng + ?Sized>(
    logits: &[f32],
    vocab_size: usize,
    block: &mut [TokenId],
    s: f64,
    t: f64,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    debug_assert!(t > s);
    let masked: Vec<usize> = (0..block.len()).filter(|&i| block[i] == MASK_ID).collect();
    if masked.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let probs: Vec<Vec<f64>> = (0..block.len())
        .map(|i| {
            let mut p = tempered_probs(&logits[i * vocab_size..(i + 1) * vocab_size], cfg.temperature);
            p[MASK_ID as usize] = 0.0;
            p
        })
        .collect();
    let confidence = |i: usize| probs[i].iter().cloned().fold(0.0, f64::max);

    let k = unmask_count(masked.len(), s, t, &cfg.schedule);
    let mut order = masked.clone();
    match cfg.unmask_rule {
        UnmaskRule::ConfidenceTopk => {
            order.sort_by(|&a, &b| confidence(b).total_cmp(&confidence(a)).then(a.cmp(&b)));
        }
        UnmaskRule::Random => order.shuffle(rng),
    }
    let mut chosen: Vec<usize> = order[..k].to_vec();
    if let Some(threshold) = cfg.confidence_threshold {
        chosen.extend(order[k..].iter().filter(|&&i| confidence(i) >= threshold));
    }
    chosen.sort_unstable();

    let mut rec = StepRecord {
        block: 0,
        t,
        s,
        positions: Vec::with_capacity(chosen.len() + 1),
        tokens: Vec::with_capacity(chosen.len() + 1),
        logp: Vec::with_capacity(chosen.len() + 1),
        revised: false,
    };
    for &i in &chosen {
        let tok = sample_index(&probs[i], rng);
        block[i] = tok as TokenId;
        rec.positions.push(i);
        rec.tokens.push(tok as TokenId);
        rec.logp.push(probs[i][tok].ln());
    }

    if cfg.allow_edit_revision {
        let weakest = (0..block.len())
            .filter(|i| block[*i] != MASK_ID && chosen.binary_search(i).is_err())
            .map(|i| (i, probs[i][block[i] as usize]))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((i, p)) = weakest {
            if p < REVISION_THRESHOLD {
                let tok = sample_index(&probs[i], rng);
                block[i] = tok as TokenId;
                rec.positions.push(i);
                rec.tokens.push(tok as TokenId);
                rec.logp.push(probs[i][tok].ln());
                rec.revised = true;
            }
        }
    }
    Ok(rec)
}

/// Generates the window after `prompt` block by block with any denoiser.
pub fn sample_with<D: Denoise, R: Rng + ?Sized>(
    model: &mut D,
    prompt: &[TokenId],
    plan: &BlockPlan,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    let max_len = model.config().max_len;
    let vocab_size = model.config().vocab_size;
    if prompt.len() != plan.prompt_len() || plan.window.end > max_len {
        return Err(Error::SequenceTooLong {
            len: plan.window.end.max(prompt.len()),
            max_len,
        });
    }
    model.reset();
    let p = plan.prompt_len();
    let mut window = vec![MASK_ID; plan.window_len()];
    let mut states = vec![window.clone()];
    let mut steps = Vec::new();
    let times = cfg.step_times();
    for n in 0..plan.num_blocks() {
        let range = plan.block(n);
        let local = range.start - p..range.end - p;
        for w in times.windows(2) {
            let (t, s) = (w[0], w[1]);
            if !window[local.clone()].contains(&MASK_ID) {
                break;
            }
            let (tokens, ctx_times, blocks, active) = build_context(prompt, &window, plan, n, t);
            let logits = model.logits(&tokens, &ctx_times, &blocks, active)?;
            let mut rec = reverse_step(&logits, vocab_size, &mut window[local.clone()], s, t, cfg, rng)?;
            rec.block = n;
            for pos in &mut rec.positions {
                *pos += local.start;
            }
            steps.push(rec);
            states.push(window.clone());
        }
    }
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        plan: plan.clone(),
        temperature: cfg.temperature,
        states,
        steps,
    })
}

/// Cached block-wise sampling with the transformer denoiser.
pub fn sample_blockwise<R: Rng + ?Sized>(
    params: &DenoiserParams,
    prompt: &[TokenId],
    plan: &BlockPlan,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    sample_with(&mut CachedSession::new(params), prompt, plan, cfg, rng)
}

/// Prompt text as lattice ids (no padding).
pub fn encode_prompt(vocab: &Vocab, prompt: &str) -> Result<Vec<TokenId>> {
    Ok(vocab.encode(prompt, prompt.chars().count())?.into_ids())
}

/// Samples one completion per prompt and reports throughput. Each prompt
/// `i` uses its own RNG stream derived from `seed`.
pub fn decode_throughput(
    params: &DenoiserParams,
    prompts: &[ProgramSample],
    block_size: usize,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<BenchRecord> {
    let vocab = Vocab::new();
    let verifier = Verifier::exact();
    let max_len = params.config.max_len;
    let mut encoded = Vec::with_capacity(prompts.len());
    for s in prompts {
        encoded.push(encode_prompt(&vocab, &s.prompt)?);
    }
    let mut session = CachedSession::new(params);
    let mut tokens = 0usize;
    let mut steps = 0usize;
    let mut passed = 0usize;
    let start = Instant::now();
    for (i, prompt) in encoded.iter().enumerate() {
        let plan = BlockPlan::new(prompt.len(), max_len, block_size)?;
        let mut rng = stream_rng(seed, streams::BENCH, i as u64);
        let traj = sample_with(&mut session, prompt, &plan, cfg, &mut rng)?;
        tokens += plan.window_len();
        steps += traj.step_count();
        passed += verifier.score(&traj.final_sequence(), &vocab) as usize;
    }
    let wall = start.elapsed().as_secs_f64();
    let n = prompts.len().max(1) as f64;
    Ok(BenchRecord {
        block_size,
        steps_per_block: cfg.steps_per_block,
        tokens_per_second: tokens as f64 / wall.max(f64::MIN_POSITIVE),
        relative_forward_time: f64::NAN,
        mean_steps: steps as f64 / n,
        pass_rate: passed as f64 / n,
        wall_seconds: wall,
    })
}

//! Training losses and exact estimators.
//!
//! Training examples are lattices whose first `prompt_len` positions are the
//! conditioning prompt. Corruption only touches the generation window after
//! the prompt, and only window positions contribute to the losses.

use rand::Rng;

use crate::corpus::{evaluate_program, TokenId, TokenSeq, Vocab, MASK_ID};
use crate::corruption::{edit_corrupt, levenshtein, mask_corrupt, EditSchedule, NoiseSchedule};
use crate::denoiser::{backward, forward, forward_trace, DenoiserParams};
use crate::sampler::{sample_blockwise, tempered_probs, BlockPlan, SampleConfig, Trajectory};
use crate::{Error, Result};

/// Largest sequence length accepted by the exact enumerations.
pub const MAX_EXACT_LEN: usize = 6;

/// Times are drawn from `[TIME_EPS, 1 - TIME_EPS]`.
pub const TIME_EPS: f64 = 1e-3;

/// Default weight of the verifier reward in the on-policy objective.
pub const DEFAULT_BETA: f64 = 5.0;

/// A bijection over `0..d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidSequence(format!("not a permutation: {order:?}")));
            }
        }
        Ok(Self { order })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            order: (0..d).collect(),
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// All `d!` permutations in lexicographic order.
    pub fn all(d: usize) -> Vec<Permutation> {
        let mut out = Vec::new();
        let mut cur = Vec::with_capacity(d);
        let mut used = vec![false; d];
        fn rec(d: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Permutation>) {
            if cur.len() == d {
                out.push(Permutation { order: cur.clone() });
                return;
            }
            for i in 0..d {
                if !used[i] {
                    used[i] = true;
                    cur.push(i);
                    rec(d, cur, used, out);
                    cur.pop();
                    used[i] = false;
                }
            }
        }
        rec(d, &mut cur, &mut used, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub edit_term: f64,
    pub mask_term: f64,
    pub positions_counted: usize,
}

impl LossBreakdown {
    fn new(edit_term: f64, mask_term: f64, positions_counted: usize) -> Self {
        Self {
            total: edit_term + mask_term,
            edit_term,
            mask_term,
            positions_counted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VerifierMode {
    #[default]
    ExactInterpreter,
}

/// Scores a finished program 1 if it parses and its assertion holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Verifier {
    pub mode: VerifierMode,
}

impl Verifier {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn score_text(&self, text: &str) -> u8 {
        match self.mode {
            VerifierMode::ExactInterpreter => u8::from(evaluate_program(text).is_ok()),
        }
    }

    /// Any mask left in the sequence makes it fail.
    pub fn score(&self, x: &TokenSeq, vocab: &Vocab) -> u8 {
        if x.ids().contains(&vocab.mask_id()) {
            return 0;
        }
        self.score_text(&vocab.decode(x))
    }
}

/// Anything that can score a finished sequence.
pub trait Verify: Sync {
    fn verify(&self, x: &TokenSeq, vocab: &Vocab) -> u8;
}

impl Verify for Verifier {
    fn verify(&self, x: &TokenSeq, vocab: &Vocab) -> u8 {
        self.score(x, vocab)
    }
}

impl<F: Fn(&TokenSeq) -> u8 + Sync> Verify for F {
    fn verify(&self, x: &TokenSeq, _vocab: &Vocab) -> u8 {
        self(x)
    }
}

/// Weighted cross-entropy of `targets` at the given rows of `logits`.
/// Returns the loss and, if requested, its gradient with respect to the
/// logits (accumulated into `dlogits`).
pub fn weighted_ce(
    logits: &[f32],
    vocab_size: usize,
    rows: &[(usize, TokenId)],
    weight: f64,
    mut dlogits: Option<&mut [f32]>,
) -> f64 {
    let mut loss = 0.0;
    for &(r, y) in rows {
        let row = &logits[r * vocab_size..(r + 1) * vocab_size];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        loss += max + z.ln() - row[y as usize] as f64;
        if let Some(d) = dlogits.as_deref_mut() {
            let drow = &mut d[r * vocab_size..(r + 1) * vocab_size];
            for (j, g) in drow.iter_mut().enumerate() {
                let p = (row[j] as f64 - max).exp() / z;
                *g += (weight * (p - f64::from(j == y as usize))) as f32;
            }
        }
    }
    weight * loss
}

/// Mask-term loss for a fixed corrupted input: `weight * sum_i CE(x0[i])`
/// over masked positions of `x_t`.
pub fn masked_term_from_logits(logits: &[f32], vocab_size: usize, x0: &[TokenId], x_t: &[TokenId], weight: f64) -> f64 {
    let rows: Vec<(usize, TokenId)> = (0..x0.len())
        .filter(|&i| x_t[i] == MASK_ID)
        .map(|i| (i, x0[i]))
        .collect();
    weighted_ce(logits, vocab_size, &rows, weight, None)
}

/// Settings of the diffusion loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffLossConfig {
    pub noise: NoiseSchedule,
    pub edit: EditSchedule,
}

impl Default for DiffLossConfig {
    fn default() -> Self {
        Self {
            noise: NoiseSchedule::linear(),
            edit: EditSchedule::default(),
        }
    }
}

fn window_seq(x0: &TokenSeq, prompt_len: usize) -> TokenSeq {
    TokenSeq::new(x0.ids()[prompt_len..].to_vec())
}

fn splice(x0: &TokenSeq, prompt_len: usize, window: &TokenSeq) -> Vec<TokenId> {
    let mut ids = x0.ids()[..prompt_len].to_vec();
    ids.extend_from_slice(window.ids());
    ids
}

struct TermOutput {
    loss: f64,
    positions: usize,
    grad: Option<Vec<f32>>,
}

fn mask_term<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x0: &TokenSeq,
    prompt_len: usize,
    t: f64,
    noise: &NoiseSchedule,
    rng: &mut R,
    with_grad: bool,
) -> Result<TermOutput> {
    let vocab = Vocab::new();
    let c = mask_corrupt(&window_seq(x0, prompt_len), t, noise, &vocab, rng);
    let rows: Vec<(usize, TokenId)> = (0..c.mask_flags.len())
        .filter(|&i| c.mask_flags[i])
        .map(|i| (prompt_len + i, x0.ids()[prompt_len + i]))
        .collect();
    term_on_input(params, &splice(x0, prompt_len, &c.x_t), t, &rows, noise.weight(t), with_grad)
}

fn edit_term<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x0: &TokenSeq,
    prompt_len: usize,
    t: f64,
    edit: &EditSchedule,
    rng: &mut R,
    with_grad: bool,
) -> Result<TermOutput> {
    let vocab = Vocab::new();
    let c = edit_corrupt(&window_seq(x0, prompt_len), t, edit, &vocab, rng);
    let rows: Vec<(usize, TokenId)> = (prompt_len..x0.len())
        .filter(|&i| x0.ids()[i] != vocab.pad_id())
        .map(|i| (i, x0.ids()[i]))
        .collect();
    term_on_input(params, &splice(x0, prompt_len, &c.x_t), t, &rows, 1.0, with_grad)
}

fn term_on_input(
    params: &DenoiserParams,
    input: &[TokenId],
    t: f64,
    rows: &[(usize, TokenId)],
    weight: f64,
    with_grad: bool,
) -> Result<TermOutput> {
    if rows.is_empty() {
        return Ok(TermOutput {
            loss: 0.0,
            positions: 0,
            grad: with_grad.then(|| vec![0.0; params.len()]),
        });
    }
    let v = params.config.vocab_size;
    let times = vec![t; input.len()];
    if !with_grad {
        let logits = forward(params, input, t)?;
        return Ok(TermOutput {
            loss: weighted_ce(&logits, v, rows, weight, None),
            positions: rows.len(),
            grad: None,
        });
    }
    let trace = forward_trace(params, input, &times, None)?;
    let mut dlogits = vec![0.0f32; trace.logits.len()];
    let loss = weighted_ce(&trace.logits, v, rows, weight, Some(&mut dlogits));
    let grad = backward(params, &trace, &dlogits)?;
    Ok(TermOutput {
        loss,
        positions: rows.len(),
        grad: Some(grad),
    })
}

/// Weighted masked cross-entropy at time `t` for one sequence.
pub fn masked_elbo_term<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x0: &TokenSeq,
    prompt_len: usize,
    t: f64,
    noise: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let out = mask_term(params, x0, prompt_len, t, noise, rng, false)?;
    Ok(LossBreakdown::new(0.0, out.loss, out.positions))
}

/// Diffusion loss at explicit times. `t_edit = None` skips the edit term.
/// With `with_grad`, also returns the gradient of `total`.
pub fn diff_loss_at<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x0: &TokenSeq,
    prompt_len: usize,
    t_mask: f64,
    t_edit: Option<f64>,
    cfg: &DiffLossConfig,
    rng: &mut R,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f32>>)> {
    let m = mask_term(params, x0, prompt_len, t_mask, &cfg.noise, rng, with_grad)?;
    let (edit_loss, edit_positions, mut grad) = match t_edit {
        Some(t) => {
            let e = edit_term(params, x0, prompt_len, t, &cfg.edit, rng, with_grad)?;
            (e.loss, e.positions, e.grad)
        }
        None => (0.0, 0, None),
    };
    let grad = match (m.grad, grad.take()) {
        (Some(mut a), Some(b)) => {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            Some(a)
        }
        (a, _) => a,
    };
    Ok((LossBreakdown::new(edit_loss, m.loss, m.positions + edit_positions), grad))
}

/// Both terms with independent uniform times.
pub fn diff_loss<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x0: &TokenSeq,
    prompt_len: usize,
    cfg: &DiffLossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let t_mask = rng.random_range(TIME_EPS..=1.0 - TIME_EPS);
    let t_edit = rng.random_range(TIME_EPS..=1.0 - TIME_EPS);
    Ok(diff_loss_at(params, x0, prompt_len, t_mask, Some(t_edit), cfg, rng, false)?.0)
}

/// Conditional distributions `p(x[pos] = v | revealed set)` for every subset
/// of revealed positions of a length-`d` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    d: usize,
    vocab_size: usize,
    probs: Vec<f64>,
}

impl ProbTable {
    pub fn new(d: usize, vocab_size: usize) -> Result<Self> {
        if d > MAX_EXACT_LEN {
            return Err(Error::TooLong { d, max: MAX_EXACT_LEN });
        }
        Ok(Self {
            d,
            vocab_size,
            probs: vec![0.0; (1 << d) * d * vocab_size],
        })
    }

    /// Random table with each distribution drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(d: usize, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let mut table = Self::new(d, vocab_size)?;
        for dist in table.probs.chunks_exact_mut(vocab_size) {
            for p in dist.iter_mut() {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                *p = -u.ln();
            }
            let total: f64 = dist.iter().sum();
            for p in dist.iter_mut() {
                *p /= total;
            }
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn offset(&self, revealed: usize, pos: usize) -> usize {
        (revealed * self.d + pos) * self.vocab_size
    }

    /// Distribution at `pos` when the positions in bitmask `revealed` are known.
    pub fn dist(&self, revealed: usize, pos: usize) -> &[f64] {
        let o = self.offset(revealed, pos);
        &self.probs[o..o + self.vocab_size]
    }

    pub fn dist_mut(&mut self, revealed: usize, pos: usize) -> &mut [f64] {
        let o = self.offset(revealed, pos);
        &mut self.probs[o..o + self.vocab_size]
    }

    pub fn prob(&self, revealed: usize, pos: usize, token: usize) -> f64 {
        self.dist(revealed, pos)[token]
    }

    /// Same table with positions renamed by `perm` (new position `perm[i]`
    /// plays the role of old position `i`).
    pub fn relabel(&self, perm: &Permutation) -> Self {
        let p = perm.order();
        let mut out = Self {
            d: self.d,
            vocab_size: self.vocab_size,
            probs: vec![0.0; self.probs.len()],
        };
        for revealed in 0..1usize << self.d {
            let mapped = (0..self.d)
                .filter(|&i| revealed >> i & 1 == 1)
                .fold(0, |m, i| m | 1 << p[i]);
            for pos in 0..self.d {
                out.dist_mut(mapped, p[pos]).copy_from_slice(self.dist(revealed, pos));
            }
        }
        out
    }
}

fn check_len(table: &ProbTable, x0: &[usize]) -> Result<()> {
    if x0.len() > MAX_EXACT_LEN {
        return Err(Error::TooLong {
            d: x0.len(),
            max: MAX_EXACT_LEN,
        });
    }
    if x0.len() != table.d {
        return Err(Error::InvalidSequence(format!(
            "sequence length {} does not match table length {}",
            x0.len(),
            table.d
        )));
    }
    Ok(())
}

/// Exact any-order autoregressive negative log-likelihood: the average over
/// all `d!` generation orders of the summed conditional NLLs.
pub fn ao_ar_nll_exact(table: &ProbTable, x0: &[usize]) -> Result<f64> {
    check_len(table, x0)?;
    let perms = Permutation::all(x0.len());
    let mut total = 0.0;
    for perm in &perms {
        let mut revealed = 0usize;
        for &pos in perm.order() {
            total -= table.prob(revealed, pos, x0[pos]).ln();
            revealed |= 1 << pos;
        }
    }
    Ok(total / perms.len() as f64)
}

/// Time-integrated weight of one mask pattern with `m` of `d` positions
/// masked: `int_0^1 gamma'/gamma * gamma^m (1 - gamma)^(d - m) dt`, which
/// equals the Beta function `B(m, d - m + 1) = (m-1)! (d-m)! / d!` for any
/// schedule running from 0 to 1.
pub fn pattern_weight(m: usize, d: usize) -> f64 {
    debug_assert!(m >= 1 && m <= d);
    let lf = |n: usize| (1..=n).map(|k| (k as f64).ln()).sum::<f64>();
    (lf(m - 1) + lf(d - m) - lf(d)).exp()
}

/// Exact mask-diffusion loss: the expectation over `t` and mask patterns of
/// the weighted masked cross-entropy, summed over all `2^d` patterns.
pub fn elbo_exact(table: &ProbTable, x0: &[usize], schedule: &NoiseSchedule) -> Result<f64> {
    check_len(table, x0)?;
    if schedule.eval(0.0) != 0.0 || (schedule.eval(1.0) - 1.0).abs() > 1e-12 {
        return Err(Error::DegenerateTime);
    }
    let d = x0.len();
    let full = (1usize << d) - 1;
    let mut total = 0.0;
    for masked in 1..=full {
        let m = masked.count_ones() as usize;
        let revealed = full & !masked;
        let nll: f64 = (0..d)
            .filter(|&i| masked >> i & 1 == 1)
            .map(|i| -table.prob(revealed, i, x0[i]).ln())
            .sum();
        total += pattern_weight(m, d) * nll;
    }
    Ok(total)
}

/// Builds a [`ProbTable`] for the `d` window positions of `x0` by running the
/// denoiser on every mask pattern. A pattern with `m` masks is evaluated at
/// `t = m / d`.
pub fn prob_table_from_denoiser(params: &DenoiserParams, x0: &TokenSeq, window: std::ops::Range<usize>) -> Result<ProbTable> {
    let d = window.len();
    let v = params.config.vocab_size;
    let mut table = ProbTable::new(d, v)?;
    for revealed in 0..1usize << d {
        let mut ids = x0.ids().to_vec();
        for i in 0..d {
            if revealed >> i & 1 == 0 {
                ids[window.start + i] = MASK_ID;
            }
        }
        let m = d - revealed.count_ones() as usize;
        let logits = forward(params, &ids, m as f64 / d.max(1) as f64)?;
        for i in 0..d {
            let row = &logits[(window.start + i) * v..(window.start + i + 1) * v];
            table.dist_mut(revealed, i).copy_from_slice(&tempered_probs(row, 1.0));
        }
    }
    Ok(table)
}

/// Per-state weight `1 / max(1, #masked)`.
pub fn lambda_weight(x_i: &[TokenId]) -> f64 {
    1.0 / x_i.iter().filter(|&&x| x == MASK_ID).count().max(1) as f64
}

/// One distilled pair: an intermediate state and the final sample, both as
/// full lattices, with the time at which the state was seen.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPair {
    pub x_i: Vec<TokenId>,
    pub x_0: Vec<TokenId>,
    pub prompt_len: usize,
    pub t: f64,
}

/// Constrained-order loss `lambda(x_i) * -log p(x_0 | f(x_i))` over window
/// positions, where `f` applies random edits when `augment` is given.
pub fn constrained_loss<R: Rng + ?Sized>(
    params: &DenoiserParams,
    pair: &DistillPair,
    augment: Option<&EditSchedule>,
    rng: &mut R,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f32>>)> {
    let p = pair.prompt_len;
    let mut input = pair.x_i.clone();
    if let Some(edit) = augment {
        let vocab = Vocab::new();
        let t_edit = rng.random_range(TIME_EPS..=1.0 - TIME_EPS);
        let window = TokenSeq::new(pair.x_i[p..].to_vec());
        let c = edit_corrupt(&window, t_edit, edit, &vocab, rng);
        input[p..].copy_from_slice(c.x_t.ids());
    }
    let rows: Vec<(usize, TokenId)> = (p..pair.x_0.len()).map(|i| (i, pair.x_0[i])).collect();
    let out = term_on_input(params, &input, pair.t, &rows, lambda_weight(&pair.x_i[p..]), with_grad)?;
    Ok((out.loss, out.grad))
}

/// Mean over unordered state pairs of `1 / max(1, d_Lev)`.
pub fn surrogate_from_states(states: &[Vec<TokenId>]) -> f64 {
    let n = states.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 1.0 / levenshtein(&states[i], &states[j]).max(1) as f64;
        }
    }
    total / (n * (n - 1) / 2) as f64
}

pub fn surrogate_step_loss(traj: &Trajectory) -> f64 {
    surrogate_from_states(&traj.states)
}

/// Exponential moving average of past objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningBaseline {
    pub value: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl RunningBaseline {
    pub fn new(decay: f64) -> Self {
        Self {
            value: 0.0,
            decay,
            initialized: false,
        }
    }

    pub fn get(&self) -> f64 {
        if self.initialized {
            self.value
        } else {
            0.0
        }
    }

    pub fn update(&mut self, x: f64) {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * x;
        } else {
            self.value = x;
            self.initialized = true;
        }
    }
}

impl Default for RunningBaseline {
    fn default() -> Self {
        Self::new(0.9)
    }
}

/// Score-function estimate `(objective - baseline) * grad_logp`.
pub fn score_function_gradient(objective: f64, baseline: f64, grad_logp: &[f64]) -> Vec<f64> {
    grad_logp.iter().map(|g| (objective - baseline) * g).collect()
}

/// Gradient of the summed log-probabilities of every token written along the
/// trajectory, scaled by `scale`. Each step is re-run block-causally.
pub fn trajectory_logp_grad(params: &DenoiserParams, traj: &Trajectory, scale: f64) -> Result<Vec<f32>> {
    let v = params.config.vocab_size;
    let tau = traj.temperature;
    let mut grad = vec![0.0f32; params.len()];
    if scale == 0.0 {
        return Ok(grad);
    }
    let p = traj.plan.prompt_len();
    for (i, step) in traj.steps.iter().enumerate() {
        let (tokens, times, blocks, _) = traj.step_context(i);
        let trace = forward_trace(params, &tokens, &times, Some(&blocks))?;
        let mut dlogits = vec![0.0f32; trace.logits.len()];
        for (&pos, &tok) in step.positions.iter().zip(&step.tokens) {
            let r = p + pos;
            let probs = tempered_probs(&trace.logits[r * v..(r + 1) * v], tau);
            for (j, g) in dlogits[r * v..(r + 1) * v].iter_mut().enumerate() {
                *g += (scale * (f64::from(j == tok as usize) - probs[j]) / tau) as f32;
            }
        }
        let g = backward(params, &trace, &dlogits)?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok(grad)
}

/// One on-policy sample.
#[derive(Debug, Clone)]
pub struct OnPolicySample {
    pub trajectory: Trajectory,
    pub reward: u8,
    /// `surrogate - beta * V(tau[0])`; lower is better.
    pub objective: f64,
    /// Score-function estimate of the objective's gradient.
    pub grad: Vec<f32>,
}

/// Samples a trajectory and returns its objective together with the
/// baseline-corrected score-function gradient. The baseline is read, not
/// updated.
#[allow(clippy::too_many_arguments)]
pub fn onpolicy_objective<R: Rng + ?Sized>(
    params: &DenoiserParams,
    prompt: &[TokenId],
    plan: &BlockPlan,
    cfg: &SampleConfig,
    verifier: &impl Verify,
    beta: f64,
    baseline: &RunningBaseline,
    rng: &mut R,
) -> Result<OnPolicySample> {
    let vocab = Vocab::new();
    let trajectory = sample_blockwise(params, prompt, plan, cfg, rng)?;
    let reward = verifier.verify(&trajectory.final_sequence(), &vocab);
    let objective = surrogate_step_loss(&trajectory) - beta * reward as f64;
    let grad = trajectory_logp_grad(params, &trajectory, objective - baseline.get())?;
    Ok(OnPolicySample {
        trajectory,
        reward,
        objective,
        grad,
    })
}

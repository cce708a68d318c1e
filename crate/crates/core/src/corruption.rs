//! Forward corruption processes.
//!
//! Two processes act on the fixed-capacity lattice: independent per-position
//! masking driven by a [`NoiseSchedule`], and a small number of random token
//! edits driven by an [`EditSchedule`]. Edits never change the physical
//! length: inserts shift the suffix right into the pad region and deletes
//! shift it left, back-filling with pad.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSeq, Vocab};
use crate::{Error, Result};

/// Clamp applied to `t` before evaluating the ELBO weight.
pub const WEIGHT_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Marginal masking probability as a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
        }
    }

    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self.kind {
            ScheduleKind::Linear => t,
            ScheduleKind::Cosine => 1.0 - (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self.kind {
            ScheduleKind::Linear => 1.0,
            ScheduleKind::Cosine => FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }

    /// `gamma'(t) / gamma(t)` with `t` clamped to `[eps, 1 - eps]`.
    pub fn weight(&self, t: f64) -> f64 {
        let t = t.clamp(WEIGHT_EPS, 1.0 - WEIGHT_EPS);
        self.deriv(t) / self.eval(t)
    }
}

/// Fraction of lattice length turned into edit operations at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditSchedule {
    pub alpha_max: f64,
}

impl Default for EditSchedule {
    fn default() -> Self {
        Self { alpha_max: 0.1 }
    }
}

impl EditSchedule {
    pub fn new(alpha_max: f64) -> Result<Self> {
        if !(alpha_max > 0.0 && alpha_max <= 0.1) {
            return Err(Error::InvalidConfig(format!(
                "alpha_max must lie in (0, 0.1], got {alpha_max}"
            )));
        }
        Ok(Self { alpha_max })
    }

    /// A schedule that never edits.
    pub fn disabled() -> Self {
        Self { alpha_max: 0.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.alpha_max * t.clamp(0.0, 1.0)
    }

    /// `floor(len * alpha_t)`.
    pub fn num_edits(&self, len: usize, t: f64) -> usize {
        (len as f64 * self.eval(t)).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditKind {
    Substitute,
    Insert,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditOp {
    pub kind: EditKind,
    pub position: usize,
    /// Ignored for deletes.
    pub token: TokenId,
}

impl EditOp {
    /// Applies the edit in place on the lattice.
    pub fn apply(&self, ids: &mut [TokenId], pad_id: TokenId) {
        let p = self.position;
        match self.kind {
            EditKind::Substitute => ids[p] = self.token,
            EditKind::Insert => {
                ids[p..].rotate_right(1);
                ids[p] = self.token;
            }
            EditKind::Delete => {
                ids[p..].rotate_left(1);
                *ids.last_mut().unwrap() = pad_id;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionResult {
    pub x_t: TokenSeq,
    pub t: f64,
    /// Mask process only: which positions were replaced by the mask token.
    pub mask_flags: Vec<bool>,
    /// Edit process only: applied operations, in order.
    pub edit_trace: Vec<EditOp>,
    /// Number of masked positions (mask process) or applied edits (edit process).
    pub k_applied: usize,
}

/// Masks every non-pad position independently with probability `gamma(t)`.
pub fn mask_corrupt<R: Rng + ?Sized>(
    x0: &TokenSeq,
    t: f64,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    rng: &mut R,
) -> CorruptionResult {
    let gamma = schedule.eval(t);
    let mut ids = x0.ids().to_vec();
    let mut mask_flags = vec![false; ids.len()];
    let mut k = 0;
    for (id, flag) in ids.iter_mut().zip(mask_flags.iter_mut()) {
        if *id == vocab.pad_id() {
            continue;
        }
        // Draw for every non-pad position so the stream layout is fixed.
        let u: f64 = rng.random();
        if u < gamma {
            *id = vocab.mask_id();
            *flag = true;
            k += 1;
        }
    }
    CorruptionResult {
        x_t: TokenSeq::new(ids),
        t,
        mask_flags,
        edit_trace: Vec::new(),
        k_applied: k,
    }
}

/// Applies `floor(|x0| * alpha_t)` random edits, where `|x0|` counts non-pad
/// positions. Each edit picks a kind uniformly among those applicable to the
/// current lattice (an insert needs a free pad slot), a uniform position and
/// a uniform real token.
pub fn edit_corrupt<R: Rng + ?Sized>(
    x0: &TokenSeq,
    t: f64,
    schedule: &EditSchedule,
    vocab: &Vocab,
    rng: &mut R,
) -> CorruptionResult {
    let real = vocab.real_tokens();
    let mut ids = x0.ids().to_vec();
    let capacity = ids.len();
    let mut len = x0.content_len(vocab);
    let k = schedule.num_edits(len, t);
    let mut trace = Vec::with_capacity(k);
    for _ in 0..k {
        let mut kinds = Vec::with_capacity(3);
        if len > 0 {
            kinds.push(EditKind::Substitute);
        }
        if len < capacity {
            kinds.push(EditKind::Insert);
        }
        if len > 0 {
            kinds.push(EditKind::Delete);
        }
        let kind = kinds[rng.random_range(0..kinds.len())];
        let op = match kind {
            EditKind::Substitute => EditOp {
                kind,
                position: rng.random_range(0..len),
                token: real[rng.random_range(0..real.len())],
            },
            EditKind::Insert => EditOp {
                kind,
                position: rng.random_range(0..=len),
                token: real[rng.random_range(0..real.len())],
            },
            EditKind::Delete => EditOp {
                kind,
                position: rng.random_range(0..len),
                token: vocab.pad_id(),
            },
        };
        op.apply(&mut ids, vocab.pad_id());
        match kind {
            EditKind::Insert => len += 1,
            EditKind::Delete => len -= 1,
            EditKind::Substitute => {}
        }
        trace.push(op);
    }
    CorruptionResult {
        x_t: TokenSeq::new(ids),
        t,
        mask_flags: Vec::new(),
        edit_trace: trace,
        k_applied: k,
    }
}

/// Unit-cost edit distance by the two-row dynamic program.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between two lattices with trailing pads stripped.
pub fn levenshtein_seq(a: &TokenSeq, b: &TokenSeq, vocab: &Vocab) -> usize {
    levenshtein(a.content(vocab), b.content(vocab))
}

/// Single-position kernel `q(x_t | x_s)` of the mask process for `t > s`.
pub fn transition_prob(
    xs_tok: TokenId,
    xt_tok: TokenId,
    s: f64,
    t: f64,
    schedule: &NoiseSchedule,
    mask_id: TokenId,
) -> Result<f64> {
    debug_assert!(t >= s);
    if xs_tok == mask_id {
        return Ok(if xt_tok == mask_id { 1.0 } else { 0.0 });
    }
    let gs = schedule.eval(s);
    let gt = schedule.eval(t);
    if gs >= 1.0 {
        return Err(Error::DegenerateTime);
    }
    Ok(if xt_tok == xs_tok {
        (1.0 - gt) / (1.0 - gs)
    } else if xt_tok == mask_id {
        (gt - gs) / (1.0 - gs)
    } else {
        0.0
    })
}

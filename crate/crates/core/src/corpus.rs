//! Synthetic arithmetic mini-language used as a machine-checkable corpus.
//!
//! Every sample is a two-line program `x = <expr> ;` / `assert x == <int>`
//! over a character-level vocabulary. The interpreter in this module is the
//! exact verifier used for quality evaluation and on-policy rewards.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::{Error, Result};

pub type TokenId = u32;

/// Id of `[PAD]` in every [`Vocab`].
pub const PAD_ID: TokenId = 0;
/// Id of `[MASK]` in every [`Vocab`].
pub const MASK_ID: TokenId = 1;

pub const PAD_SYMBOL: &str = "[PAD]";
pub const MASK_SYMBOL: &str = "[MASK]";

const CHAR_SYMBOLS: &str = "0123456789+-*()=; aerstx";

/// Character-level vocabulary with two specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    mask_id: TokenId,
    pad_id: TokenId,
    /// Lookup for single-character symbols.
    char_ids: [Option<TokenId>; 128],
}

impl Vocab {
    pub fn new() -> Self {
        let mut tokens = vec![PAD_SYMBOL.to_string(), MASK_SYMBOL.to_string()];
        tokens.extend(CHAR_SYMBOLS.chars().map(|c| c.to_string()));
        let mut char_ids = [None; 128];
        for (id, tok) in tokens.iter().enumerate().skip(2) {
            let c = tok.chars().next().unwrap();
            char_ids[c as usize] = Some(id as TokenId);
        }
        Self {
            tokens,
            mask_id: MASK_ID,
            pad_id: PAD_ID,
            char_ids,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.mask_id || id == self.pad_id
    }

    /// Ids of all non-special tokens, in vocabulary order.
    pub fn real_tokens(&self) -> Vec<TokenId> {
        (0..self.size() as TokenId)
            .filter(|&id| !self.is_special(id))
            .collect()
    }

    pub fn char_id(&self, c: char) -> Option<TokenId> {
        if c.is_ascii() {
            self.char_ids[c as usize]
        } else {
            None
        }
    }

    pub fn space_id(&self) -> TokenId {
        self.char_id(' ').expect("space is in the vocabulary")
    }

    /// Encodes `text` into a sequence of exactly `max_len` ids, padding on the
    /// right. The literal strings `[MASK]` and `[PAD]` map to the specials.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(max_len);
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            let (id, width) = if rest.starts_with(MASK_SYMBOL) {
                (self.mask_id, MASK_SYMBOL.len())
            } else if rest.starts_with(PAD_SYMBOL) {
                (self.pad_id, PAD_SYMBOL.len())
            } else {
                let id = self
                    .char_id(c)
                    .ok_or_else(|| Error::UnknownSymbol(c.to_string()))?;
                (id, c.len_utf8())
            };
            ids.push(id);
            rest = &rest[width..];
        }
        if ids.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max_len,
            });
        }
        ids.resize(max_len, self.pad_id);
        let seq = TokenSeq::new(ids);
        if !seq.is_canonical(self) {
            return Err(Error::InvalidSequence(
                "explicit [PAD] followed by content".into(),
            ));
        }
        Ok(seq)
    }

    /// Renders ids as text, skipping pads and showing masks as `[MASK]`.
    pub fn decode(&self, seq: &TokenSeq) -> String {
        self.decode_with_mask(seq, MASK_SYMBOL)
    }

    /// Like [`Vocab::decode`] with a custom rendering for masks.
    pub fn decode_with_mask(&self, seq: &TokenSeq, mask: &str) -> String {
        let mut out = String::with_capacity(seq.len());
        for &id in seq.ids() {
            if id == self.pad_id {
                continue;
            }
            if id == self.mask_id {
                out.push_str(mask);
            } else {
                out.push_str(self.symbol(id).unwrap_or("?"));
            }
        }
        out
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// A fixed-capacity token sequence over the lattice of one training example.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [TokenId] {
        &mut self.ids
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of positions before the first pad.
    pub fn content_len(&self, vocab: &Vocab) -> usize {
        self.ids
            .iter()
            .position(|&id| id == vocab.pad_id())
            .unwrap_or(self.ids.len())
    }

    /// Content ids with trailing pads stripped.
    pub fn content(&self, vocab: &Vocab) -> &[TokenId] {
        &self.ids[..self.content_len(vocab)]
    }

    pub fn count(&self, id: TokenId) -> usize {
        self.ids.iter().filter(|&&x| x == id).count()
    }

    /// True when everything at or after the first pad is a pad.
    pub fn is_canonical(&self, vocab: &Vocab) -> bool {
        let n = self.content_len(vocab);
        self.ids[n..].iter().all(|&id| id == vocab.pad_id())
            && self.ids.iter().all(|&id| (id as usize) < vocab.size())
    }
}

/// One generated program, split into the conditioning prompt and the
/// completion the model has to produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramSample {
    pub prompt: String,
    pub target: String,
    pub truth_value: i64,
}

impl ProgramSample {
    pub fn text(&self) -> String {
        format!("{} {}", self.prompt, self.target)
    }

    /// Training lattice: prompt and target, right-filled with spaces so that
    /// the model learns where the completion ends.
    pub fn lattice(&self, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
        let mut seq = vocab.encode(&self.text(), max_len)?;
        let space = vocab.space_id();
        for id in seq.ids_mut() {
            if *id == vocab.pad_id() {
                *id = space;
            }
        }
        Ok(seq)
    }

    /// Number of lattice positions taken by the prompt.
    pub fn prompt_len(&self) -> usize {
        self.prompt.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalError {
    Parse(String),
    AssertionFailed { computed: i64, asserted: i64 },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Parse(msg) => write!(f, "parse error: {msg}"),
            EvalError::AssertionFailed { computed, asserted } => {
                write!(f, "assertion failed: x = {computed}, asserted {asserted}")
            }
        }
    }
}

impl std::error::Error for EvalError {}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn err<T>(&self, what: &str) -> std::result::Result<T, EvalError> {
        Err(EvalError::Parse(format!("{what} at byte {}", self.pos)))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos] == b' ' {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, lit: &str) -> std::result::Result<(), EvalError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(lit.as_bytes()) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.err(&format!("expected `{lit}`"))
        }
    }

    fn number(&mut self) -> std::result::Result<i64, EvalError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected integer");
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse::<i64>()
            .or_else(|_| self.err("integer overflow"))
    }

    fn signed_number(&mut self) -> std::result::Result<i64, EvalError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            if !self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
                return self.err("expected digit after sign");
            }
            Ok(-self.number()?)
        } else {
            self.number()
        }
    }

    fn expr(&mut self) -> std::result::Result<i64, EvalError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = acc.checked_add(rhs).map_or_else(|| self.err("overflow"), Ok)?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = acc.checked_sub(rhs).map_or_else(|| self.err("overflow"), Ok)?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> std::result::Result<i64, EvalError> {
        let mut acc = self.atom()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            let rhs = self.atom()?;
            acc = acc.checked_mul(rhs).map_or_else(|| self.err("overflow"), Ok)?;
        }
        Ok(acc)
    }

    fn atom(&mut self) -> std::result::Result<i64, EvalError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let v = self.expr()?;
                self.expect(")")?;
                Ok(v)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            _ => self.err("expected literal or `(`"),
        }
    }
}

/// Runs `x = <expr> ; assert x == <int>` and returns the value of `x` when
/// the assertion holds. Surrounding and trailing spaces are ignored.
pub fn evaluate_program(text: &str) -> std::result::Result<i64, EvalError> {
    let mut p = Parser::new(text);
    p.expect("x")?;
    p.expect("=")?;
    let value = p.expr()?;
    p.expect(";")?;
    p.expect("assert")?;
    if p.src.get(p.pos) != Some(&b' ') {
        return p.err("expected space after `assert`");
    }
    p.expect("x")?;
    p.expect("==")?;
    let asserted = p.signed_number()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return p.err("trailing input");
    }
    if value == asserted {
        Ok(value)
    } else {
        Err(EvalError::AssertionFailed {
            computed: value,
            asserted,
        })
    }
}

/// Probability that a composite node is replaced by a bare literal.
const LITERAL_PROB: f64 = 0.2;

fn gen_expr<R: Rng>(rng: &mut R, depth: u32) -> (String, bool) {
    if depth <= 1 || rng.random::<f64>() < LITERAL_PROB {
        return (rng.random_range(0..=99u32).to_string(), false);
    }
    let op = ['+', '-', '*'][rng.random_range(0..3)];
    let (lhs, lhs_composite) = gen_expr(rng, depth - 1);
    let (rhs, rhs_composite) = gen_expr(rng, depth - 1);
    let wrap = |s: String, composite: bool| if composite { format!("({s})") } else { s };
    (
        format!("{}{op}{}", wrap(lhs, lhs_composite), wrap(rhs, rhs_composite)),
        true,
    )
}

/// Generates `n` programs with expression trees of at most `grammar_depth`
/// levels. Sample `i` depends only on `(seed, i)`.
pub fn gen_corpus(seed: u64, n: usize, grammar_depth: u32) -> Vec<ProgramSample> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, crate::rng::streams::CORPUS, i as u64);
            let (expr, _) = gen_expr(&mut rng, grammar_depth);
            let prompt = format!("x = {expr} ;");
            let truth_value = {
                let mut p = Parser::new(&expr);
                p.expr().expect("generated expressions are well formed")
            };
            ProgramSample {
                prompt,
                target: format!("assert x == {truth_value}"),
                truth_value,
            }
        })
        .collect()
}

pub fn write_corpus(path: &Path, samples: &[ProgramSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        writeln!(f, "{}\t{}\t{}", s.prompt, s.target, s.truth_value)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<ProgramSample>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || Error::InvalidCorpus(format!("line {}: {line:?}", lineno + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let truth_value = fields[2].parse::<i64>().map_err(|_| bad())?;
        out.push(ProgramSample {
            prompt: fields[0].to_string(),
            target: fields[1].to_string(),
            truth_value,
        });
    }
    Ok(out)
}

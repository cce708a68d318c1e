use std::time::Instant;

use super::tensor::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward,
    masked_softmax_rows, COL, ROW,
};
use super::{ModelConfig, Params, Real};
use crate::corpus::{TokenId, MASK_ID};
use crate::{Error, Result};

const TIME_SCALE: f64 = 100.0;

fn time_features<T: Real>(t: f64, out: &mut [T]) {
    let half = out.len() / 2;
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = t * TIME_SCALE * freq;
        out[2 * i] = T::of(a.sin());
        out[2 * i + 1] = T::of(a.cos());
    }
}

/// Activations of one transformer layer kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerTrace<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    y1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    y2: Vec<T>,
    h: Vec<T>,
    g: Vec<T>,
}

/// A recorded forward pass over a whole lattice (no cache).
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    n: usize,
    tokens: Vec<TokenId>,
    feats: Vec<T>,
    visible: Vec<bool>,
    layers: Vec<LayerTrace<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    yf: Vec<T>,
    /// `n x vocab` logits; the mask column is `-inf`.
    pub logits: Vec<T>,
}

impl<T> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Keys and values of a committed prefix, per layer.
#[derive(Debug, Clone)]
pub struct KvCache<T = f32> {
    d: usize,
    max_len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    tokens: Vec<TokenId>,
    times: Vec<f64>,
    blocks: Vec<u32>,
    next_block: u32,
}

impl<T: Real> KvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        let size = config.max_len * config.model_dim;
        Self {
            d: config.model_dim,
            max_len: config.max_len,
            keys: vec![vec![T::zero(); size]; config.layers],
            values: vec![vec![T::zero(); size]; config.layers],
            len: 0,
            tokens: Vec::new(),
            times: Vec::new(),
            blocks: Vec::new(),
            next_block: 0,
        }
    }

    pub fn committed_len(&self) -> usize {
        self.len
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Committed tokens, in position order.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Time at which each committed position was encoded.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Absolute block index of each committed position.
    pub fn blocks(&self) -> &[u32] {
        &self.blocks
    }

    pub fn next_block(&self) -> u32 {
        self.next_block
    }

    pub fn clear(&mut self) {
        self.len = 0;
        self.tokens.clear();
        self.times.clear();
        self.blocks.clear();
        self.next_block = 0;
    }
}

/// Result of running new positions against a cache. Nothing is stored in the
/// cache until [`commit_block`] is called.
#[derive(Debug, Clone)]
pub struct SegmentOutput<T = f32> {
    pub n: usize,
    /// `n x vocab` logits; the mask column is `-inf`.
    pub logits: Vec<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    tokens: Vec<TokenId>,
    times: Vec<f64>,
    blocks: Vec<u32>,
}

struct Recorded<T> {
    feats: Vec<T>,
    visible: Vec<bool>,
    layers: Vec<LayerTrace<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    yf: Vec<T>,
}

struct PassOutput<T> {
    logits: Vec<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    recorded: Option<Recorded<T>>,
}

#[allow(clippy::too_many_arguments)]
fn attend<T: Real>(
    heads: usize,
    d: usize,
    n_q: usize,
    n_k: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    visible: &[bool],
    probs: &mut [T],
    o: &mut [T],
) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let plane = n_q * n_k;
    for h in 0..heads {
        let p = &mut probs[h * plane..(h + 1) * plane];
        let off = h * dh;
        gemm(n_q, dh, n_k, scale, &q[off..], ROW(d), &k[off..], COL(d), T::zero(), p, ROW(n_k));
        masked_softmax_rows(n_k, p, visible);
        gemm(n_q, n_k, dh, T::one(), p, ROW(n_k), &v[off..], ROW(d), T::zero(), &mut o[off..], ROW(d));
    }
}

/// Shared forward over `tokens` placed after the cached prefix (if any).
/// Position `i` sees every cached position and every new position `j` with
/// `blocks[j] <= blocks[i]`.
fn run<T: Real>(
    p: &Params<T>,
    cache: Option<&KvCache<T>>,
    tokens: &[TokenId],
    times: &[f64],
    blocks: &[u32],
    record: bool,
) -> Result<PassOutput<T>> {
    let cfg = &p.config;
    let (d, f, vsz) = (cfg.model_dim, cfg.ff_dim, cfg.vocab_size);
    let n = tokens.len();
    let c = cache.map_or(0, |c| c.len);
    debug_assert_eq!(times.len(), n);
    debug_assert_eq!(blocks.len(), n);
    if c + n > cfg.max_len {
        return Err(Error::CacheOverflow {
            committed: c,
            block: n,
            max_len: cfg.max_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vsz) {
        return Err(Error::InvalidSequence(format!("token id {bad} out of range")));
    }
    let w = &p.values;
    let lay = &p.layout;
    let nk = c + n;

    // Embedding.
    let mut feats = vec![T::zero(); n * d];
    let mut x = vec![T::zero(); n * d];
    let gain = &w[lay.time_gain.clone()];
    for i in 0..n {
        let fi = &mut feats[i * d..(i + 1) * d];
        time_features(times[i], fi);
        let tok = &w[lay.tok_emb.start + tokens[i] as usize * d..][..d];
        let pos = &w[lay.pos_emb.start + (c + i) * d..][..d];
        let xi = &mut x[i * d..(i + 1) * d];
        for j in 0..d {
            xi[j] = tok[j] + pos[j] + gain[j] * fi[j];
        }
    }

    let mut visible = vec![true; n * nk];
    for i in 0..n {
        for j in 0..n {
            visible[i * nk + c + j] = blocks[j] <= blocks[i];
        }
    }

    let mut layers = Vec::new();
    let mut keys_out = Vec::with_capacity(cfg.layers);
    let mut values_out = Vec::with_capacity(cfg.layers);
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let mut y = vec![T::zero(); n * d];
    for (li, s) in lay.layers.iter().enumerate() {
        layer_norm(d, &x, &w[s.ln1_g.clone()], &w[s.ln1_b.clone()], &mut xhat, &mut y, &mut rstd);
        let mut q = vec![T::zero(); n * d];
        let mut kn = vec![T::zero(); n * d];
        let mut vn = vec![T::zero(); n * d];
        linear(n, d, d, &y, &w[s.wq.clone()], &w[s.bq.clone()], &mut q);
        linear(n, d, d, &y, &w[s.wk.clone()], &w[s.bk.clone()], &mut kn);
        linear(n, d, d, &y, &w[s.wv.clone()], &w[s.bv.clone()], &mut vn);
        let mut probs = vec![T::zero(); cfg.heads * n * nk];
        let mut o = vec![T::zero(); n * d];
        match cache {
            Some(cache) if c > 0 => {
                let mut k_all = Vec::with_capacity(nk * d);
                k_all.extend_from_slice(&cache.keys[li][..c * d]);
                k_all.extend_from_slice(&kn);
                let mut v_all = Vec::with_capacity(nk * d);
                v_all.extend_from_slice(&cache.values[li][..c * d]);
                v_all.extend_from_slice(&vn);
                attend(cfg.heads, d, n, nk, &q, &k_all, &v_all, &visible, &mut probs, &mut o);
            }
            _ => attend(cfg.heads, d, n, nk, &q, &kn, &vn, &visible, &mut probs, &mut o),
        }
        let mut a = vec![T::zero(); n * d];
        linear(n, d, d, &o, &w[s.wo.clone()], &w[s.bo.clone()], &mut a);
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += *ai;
        }

        let mut xhat2 = vec![T::zero(); n * d];
        let mut rstd2 = vec![T::zero(); n];
        let mut y2 = vec![T::zero(); n * d];
        layer_norm(d, &x, &w[s.ln2_g.clone()], &w[s.ln2_b.clone()], &mut xhat2, &mut y2, &mut rstd2);
        let mut h = vec![T::zero(); n * f];
        linear(n, d, f, &y2, &w[s.w1.clone()], &w[s.b1.clone()], &mut h);
        let g: Vec<T> = h.iter().map(|&v| gelu(v)).collect();
        let mut m = vec![T::zero(); n * d];
        linear(n, f, d, &g, &w[s.w2.clone()], &w[s.b2.clone()], &mut m);
        for (xi, mi) in x.iter_mut().zip(&m) {
            *xi += *mi;
        }

        if record {
            layers.push(LayerTrace {
                xhat1: xhat.clone(),
                rstd1: rstd.clone(),
                y1: y.clone(),
                q,
                k: kn.clone(),
                v: vn.clone(),
                probs,
                o,
                xhat2,
                rstd2,
                y2,
                h,
                g,
            });
        }
        keys_out.push(kn);
        values_out.push(vn);
    }

    let mut lnf_xhat = vec![T::zero(); n * d];
    let mut lnf_rstd = vec![T::zero(); n];
    let mut yf = vec![T::zero(); n * d];
    layer_norm(d, &x, &w[lay.lnf_g.clone()], &w[lay.lnf_b.clone()], &mut lnf_xhat, &mut yf, &mut lnf_rstd);
    let mut logits = vec![T::zero(); n * vsz];
    linear(n, d, vsz, &yf, &w[lay.w_out.clone()], &w[lay.b_out.clone()], &mut logits);
    for row in logits.chunks_exact_mut(vsz) {
        row[MASK_ID as usize] = T::neg_infinity();
        if row.iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::NonFiniteActivation("logits"));
        }
    }
    Ok(PassOutput {
        logits,
        keys: keys_out,
        values: values_out,
        recorded: record.then_some(Recorded {
            feats,
            visible,
            layers,
            lnf_xhat,
            lnf_rstd,
            yf,
        }),
    })
}

/// Bidirectional forward over a whole lattice at a single time.
pub fn forward<T: Real>(p: &Params<T>, x_t: &[TokenId], t: f64) -> Result<Vec<T>> {
    let n = x_t.len();
    Ok(run(p, None, x_t, &vec![t; n], &vec![0; n], false)?.logits)
}

/// Uncached forward with block-causal attention and per-position times.
/// This is the recompute reference for cached inference.
pub fn forward_block_causal<T: Real>(
    p: &Params<T>,
    tokens: &[TokenId],
    times: &[f64],
    blocks: &[u32],
) -> Result<Vec<T>> {
    Ok(run(p, None, tokens, times, blocks, false)?.logits)
}

/// Recorded forward for training. `blocks = None` means full attention.
pub fn forward_trace<T: Real>(
    p: &Params<T>,
    tokens: &[TokenId],
    times: &[f64],
    blocks: Option<&[u32]>,
) -> Result<ForwardTrace<T>> {
    let n = tokens.len();
    let zeros;
    let blocks = match blocks {
        Some(b) => b,
        None => {
            zeros = vec![0; n];
            &zeros
        }
    };
    let out = run(p, None, tokens, times, blocks, true)?;
    let r = out.recorded.expect("recorded pass");
    Ok(ForwardTrace {
        n,
        tokens: tokens.to_vec(),
        feats: r.feats,
        visible: r.visible,
        layers: r.layers,
        lnf_xhat: r.lnf_xhat,
        lnf_rstd: r.lnf_rstd,
        yf: r.yf,
        logits: out.logits,
    })
}

/// Runs new positions after the cached prefix. `blocks` are relative block
/// indices (non-decreasing) within the segment.
pub fn forward_segment<T: Real>(
    p: &Params<T>,
    cache: &KvCache<T>,
    tokens: &[TokenId],
    times: &[f64],
    blocks: &[u32],
) -> Result<SegmentOutput<T>> {
    let out = run(p, Some(cache), tokens, times, blocks, false)?;
    Ok(SegmentOutput {
        n: tokens.len(),
        logits: out.logits,
        keys: out.keys,
        values: out.values,
        tokens: tokens.to_vec(),
        times: times.to_vec(),
        blocks: blocks.to_vec(),
    })
}

/// One block attending to itself and the cached prefix, all at time `t`.
pub fn forward_cached<T: Real>(
    p: &Params<T>,
    cache: &KvCache<T>,
    block_tokens: &[TokenId],
    t: f64,
) -> Result<SegmentOutput<T>> {
    let n = block_tokens.len();
    forward_segment(p, cache, block_tokens, &vec![t; n], &vec![0; n])
}

/// Appends the first `count` positions of `out` to the cache.
pub fn commit_block<T: Real>(cache: &mut KvCache<T>, out: &SegmentOutput<T>, count: usize) -> Result<()> {
    assert!(count <= out.n);
    if cache.len + count > cache.max_len {
        return Err(Error::CacheOverflow {
            committed: cache.len,
            block: count,
            max_len: cache.max_len,
        });
    }
    let d = cache.d;
    let at = cache.len * d;
    for (li, (k, v)) in out.keys.iter().zip(&out.values).enumerate() {
        cache.keys[li][at..at + count * d].copy_from_slice(&k[..count * d]);
        cache.values[li][at..at + count * d].copy_from_slice(&v[..count * d]);
    }
    cache.len += count;
    cache.tokens.extend_from_slice(&out.tokens[..count]);
    cache.times.extend_from_slice(&out.times[..count]);
    let base = cache.next_block;
    for &b in &out.blocks[..count] {
        cache.blocks.push(base + b);
        cache.next_block = cache.next_block.max(base + b + 1);
    }
    Ok(())
}

/// Exact gradient of a scalar loss with respect to all parameters, given
/// the recorded pass and `dloss/dlogits`. The mask column of `dlogits` is
/// ignored.
pub fn backward<T: Real>(p: &Params<T>, trace: &ForwardTrace<T>, dlogits: &[T]) -> Result<Vec<T>> {
    let cfg = &p.config;
    let (d, f, vsz, heads) = (cfg.model_dim, cfg.ff_dim, cfg.vocab_size, cfg.heads);
    let dh = d / heads;
    let n = trace.n;
    let w = &p.values;
    let lay = &p.layout;
    let mut grad = vec![T::zero(); lay.total];

    let mut dl = dlogits[..n * vsz].to_vec();
    for row in dl.chunks_exact_mut(vsz) {
        row[MASK_ID as usize] = T::zero();
    }

    // Output head and final norm.
    let mut dyf = vec![T::zero(); n * d];
    {
        let (dw, db) = split2(&mut grad, &lay.w_out, &lay.b_out);
        linear_backward(n, d, vsz, &trace.yf, &w[lay.w_out.clone()], &dl, dw, db, Some((&mut dyf, T::zero())));
    }
    let mut dx = vec![T::zero(); n * d];
    {
        let (dg, db) = split2(&mut grad, &lay.lnf_g, &lay.lnf_b);
        layer_norm_backward(d, &trace.lnf_xhat, &trace.lnf_rstd, &w[lay.lnf_g.clone()], &dyf, &mut dx, dg, db);
    }

    let scale = T::of(1.0 / (dh as f64).sqrt());
    for (s, lt) in lay.layers.iter().zip(&trace.layers).rev() {
        // Feed-forward branch: dx is the gradient of the residual stream.
        let mut dg = vec![T::zero(); n * f];
        {
            let (dw, db) = split2(&mut grad, &s.w2, &s.b2);
            linear_backward(n, f, d, &lt.g, &w[s.w2.clone()], &dx, dw, db, Some((&mut dg, T::zero())));
        }
        for (g, &h) in dg.iter_mut().zip(&lt.h) {
            *g *= gelu_grad(h);
        }
        let mut dy2 = vec![T::zero(); n * d];
        {
            let (dw, db) = split2(&mut grad, &s.w1, &s.b1);
            linear_backward(n, d, f, &lt.y2, &w[s.w1.clone()], &dg, dw, db, Some((&mut dy2, T::zero())));
        }
        {
            let (dgn, dbn) = split2(&mut grad, &s.ln2_g, &s.ln2_b);
            layer_norm_backward(d, &lt.xhat2, &lt.rstd2, &w[s.ln2_g.clone()], &dy2, &mut dx, dgn, dbn);
        }

        // Attention branch.
        let mut d_o = vec![T::zero(); n * d];
        {
            let (dw, db) = split2(&mut grad, &s.wo, &s.bo);
            linear_backward(n, d, d, &lt.o, &w[s.wo.clone()], &dx, dw, db, Some((&mut d_o, T::zero())));
        }
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let plane = n * n;
        let mut dp = vec![T::zero(); plane];
        for h in 0..heads {
            let pr = &lt.probs[h * plane..(h + 1) * plane];
            let off = h * dh;
            gemm(n, dh, n, T::one(), &d_o[off..], ROW(d), &lt.v[off..], COL(d), T::zero(), &mut dp, ROW(n));
            gemm(n, n, dh, T::one(), pr, COL(n), &d_o[off..], ROW(d), T::zero(), &mut dv[off..], ROW(d));
            for (drow, prow) in dp.chunks_exact_mut(n).zip(pr.chunks_exact(n)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (dv_, &pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot) * scale;
                }
            }
            gemm(n, n, dh, T::one(), &dp, ROW(n), &lt.k[off..], ROW(d), T::zero(), &mut dq[off..], ROW(d));
            gemm(n, n, dh, T::one(), &dp, COL(n), &lt.q[off..], ROW(d), T::zero(), &mut dk[off..], ROW(d));
        }
        let mut dy1 = vec![T::zero(); n * d];
        for (wr, br, dm) in [(&s.wq, &s.bq, &dq), (&s.wk, &s.bk, &dk), (&s.wv, &s.bv, &dv)] {
            let (dw, db) = split2(&mut grad, wr, br);
            linear_backward(n, d, d, &lt.y1, &w[wr.clone()], dm, dw, db, Some((&mut dy1, T::one())));
        }
        {
            let (dgn, dbn) = split2(&mut grad, &s.ln1_g, &s.ln1_b);
            layer_norm_backward(d, &lt.xhat1, &lt.rstd1, &w[s.ln1_g.clone()], &dy1, &mut dx, dgn, dbn);
        }
    }

    // Embeddings.
    for i in 0..n {
        let dxi = &dx[i * d..(i + 1) * d];
        let tok = lay.tok_emb.start + trace.tokens[i] as usize * d;
        let pos = lay.pos_emb.start + i * d;
        let fi = &trace.feats[i * d..(i + 1) * d];
        for j in 0..d {
            grad[tok + j] += dxi[j];
            grad[pos + j] += dxi[j];
            grad[lay.time_gain.start + j] += dxi[j] * fi[j];
        }
    }
    debug_assert_eq!(trace.visible.len(), n * n);

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(grad)
}

/// Two disjoint mutable sub-slices of the gradient vector.
fn split2<'a, T>(
    v: &'a mut [T],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Median wall time of one cached forward over `block_size` new positions,
/// measured across the given prefixes after warm-up.
pub fn measure_forward_time(
    p: &Params<f32>,
    prefixes: &[Vec<TokenId>],
    block_size: usize,
    reps: usize,
    warmup: usize,
) -> Result<f64> {
    Ok(measure_forward_times(p, prefixes, &[block_size], reps, warmup)?[0])
}

/// Like [`measure_forward_time`] for several block sizes at once. Each round
/// times every size back to back, so load drift affects all of them alike.
pub fn measure_forward_times(
    p: &Params<f32>,
    prefixes: &[Vec<TokenId>],
    block_sizes: &[usize],
    reps: usize,
    warmup: usize,
) -> Result<Vec<f64>> {
    assert!(block_sizes.iter().all(|&b| b >= 1) && !prefixes.is_empty());
    let mut caches = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        let mut cache = KvCache::new(&p.config);
        let n = prefix.len();
        let out = forward_segment(p, &cache, prefix, &vec![0.0; n], &vec![0; n])?;
        commit_block(&mut cache, &out, n)?;
        caches.push(cache);
    }
    let mut samples = vec![Vec::with_capacity(reps); block_sizes.len()];
    for rep in 0..warmup + reps {
        for (&b, times) in block_sizes.iter().zip(samples.iter_mut()) {
            let block = vec![MASK_ID; b];
            let start = Instant::now();
            for cache in &caches {
                let out = forward_cached(p, cache, &block, 1.0)?;
                std::hint::black_box(&out.logits);
            }
            if rep >= warmup {
                times.push(start.elapsed().as_secs_f64() / caches.len() as f64);
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect())
}

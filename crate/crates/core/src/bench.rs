//! Throughput and quality benchmarks with CSV and SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProgramSample, Vocab};
use crate::denoiser::{measure_forward_times, DenoiserParams};
use crate::objectives::Verifier;
use crate::pipeline::{read_onpolicy_log, OnPolicyRow, ONPOLICY_LOG_HEADER};
use crate::rng::{stream_rng, streams};
use crate::sampler::{decode_throughput, encode_prompt, sample_with, BlockPlan, CachedSession, Denoise, SampleConfig};
use crate::{Error, Result};

/// Version tag written at the top of every bench CSV.
pub const CSV_VERSION: &str = "# dlm-bench v1";

pub const BLOCKS_HEADER: &str =
    "block_size,steps_per_block,tokens_per_second,relative_forward_time,speedup_ratio,mean_steps,pass_rate,wall_seconds";

/// One measured decoding configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub block_size: usize,
    pub steps_per_block: usize,
    pub tokens_per_second: f64,
    /// `T(b) / T(1)`; `NaN` when not measured.
    pub relative_forward_time: f64,
    pub mean_steps: f64,
    pub pass_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Tokens committed per reverse step; block `b` gets `ceil(b / p)` steps.
    pub tokens_per_step: usize,
    pub timing_reps: usize,
    pub timing_warmup: usize,
    /// Repetitions of each decoding run; the median wall time is reported.
    pub decode_reps: usize,
    /// Prompts used as cached prefixes when timing single forwards.
    pub timing_prefixes: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            tokens_per_step: 4,
            timing_reps: 30,
            timing_warmup: 5,
            decode_reps: 5,
            timing_prefixes: 8,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn steps_for(&self, block_size: usize) -> usize {
        block_size.div_ceil(self.tokens_per_step.max(1))
    }
}

/// Measures `T(b)` and decoding throughput for every block size. Timing is
/// single-threaded.
pub fn bench_block_sweep(
    params: &DenoiserParams,
    prompts: &[ProgramSample],
    b_values: &[usize],
    cfg: &SweepConfig,
) -> Result<Vec<BenchRecord>> {
    if prompts.len() < 20 {
        return Err(Error::InvalidConfig("the block sweep needs at least 20 prompts".into()));
    }
    if b_values.first() != Some(&1) || b_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("block sizes must be ascending and start at 1".into()));
    }
    if cfg.tokens_per_step == 0 || cfg.timing_reps == 0 || cfg.decode_reps == 0 {
        return Err(Error::InvalidConfig("sweep counts must be positive".into()));
    }
    let vocab = Vocab::new();
    let prefixes: Vec<Vec<_>> = prompts
        .iter()
        .take(cfg.timing_prefixes.max(1))
        .map(|s| encode_prompt(&vocab, &s.prompt))
        .collect::<Result<_>>()?;
    let max_prefix = prefixes.iter().map(Vec::len).max().unwrap_or(0);
    if let Some(&b) = b_values.iter().find(|&&b| max_prefix + b > params.config.max_len) {
        return Err(Error::InvalidConfig(format!("block size {b} does not fit after the prompts")));
    }
    let times = measure_forward_times(params, &prefixes, b_values, cfg.timing_reps, cfg.timing_warmup)?;
    let samplers: Vec<SampleConfig> = b_values
        .iter()
        .map(|&b| SampleConfig {
            steps_per_block: cfg.steps_for(b),
            temperature: cfg.temperature,
            ..SampleConfig::default()
        })
        .collect();
    // Decoding runs are interleaved across block sizes too, so drift hits every size alike.
    let mut runs: Vec<Vec<BenchRecord>> = vec![Vec::with_capacity(cfg.decode_reps); b_values.len()];
    for _ in 0..cfg.decode_reps {
        for ((&b, sample), out) in b_values.iter().zip(&samplers).zip(runs.iter_mut()) {
            out.push(decode_throughput(params, prompts, b, sample, cfg.seed)?);
        }
    }
    let mut records = Vec::with_capacity(b_values.len());
    for (mut reps, &t) in runs.into_iter().zip(&times) {
        reps.sort_by(|a, b| a.wall_seconds.total_cmp(&b.wall_seconds));
        let mut rec = reps.swap_remove(reps.len() / 2);
        rec.relative_forward_time = t / times[0];
        records.push(rec);
    }
    Ok(records)
}

/// Block size with the highest throughput.
pub fn selected_block_size(records: &[BenchRecord]) -> Option<usize> {
    records
        .iter()
        .max_by(|a, b| a.tokens_per_second.total_cmp(&b.tokens_per_second))
        .map(|r| r.block_size)
}

pub fn format_blocks_csv(records: &[BenchRecord]) -> String {
    let base = records
        .iter()
        .find(|r| r.block_size == 1)
        .map_or(f64::NAN, |r| r.tokens_per_second);
    let mut s = format!("{CSV_VERSION}; speedup_ratio = tokens_per_second / tokens_per_second at b=1 (one token per step)\n");
    s.push_str(BLOCKS_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{},{:.3},{:.6},{:.6},{:.3},{:.6},{:.6}",
            r.block_size,
            r.steps_per_block,
            r.tokens_per_second,
            r.relative_forward_time,
            r.tokens_per_second / base,
            r.mean_steps,
            r.pass_rate,
            r.wall_seconds
        )
        .unwrap();
    }
    s
}

/// A polyline chart with one point per `(x, y)`.
pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub points: &'a [(f64, f64)],
}

fn fmt_num(x: f64) -> String {
    format!("{x:.6}")
}

/// Renders a chart as a self-contained SVG. Output depends only on the
/// input values. Every point carries its raw data in `data-x`/`data-y`.
pub fn render_svg(chart: &Chart) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let pts = chart.points;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    y0 = y0.min(0.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, chart.title).unwrap();
    writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom
    )
    .unwrap();
    writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom).unwrap();
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            py(fy) + 4.0,
            fy
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{:.3}</text>"#,
            px(fx),
            h - bottom + 18.0,
            fx
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 8.0, chart.x_label).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        chart.y_label
    )
    .unwrap();
    let line: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, line.join(" ")).unwrap();
    for &(x, y) in pts {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue" data-x="{}" data-y="{}"/>"#,
            px(x),
            py(y),
            fmt_num(x),
            fmt_num(y)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `blocks.csv` and `blocks.svg` (relative forward time against b).
pub fn write_block_sweep(dir: &Path, records: &[BenchRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("blocks.csv"), format_blocks_csv(records))?;
    let points: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.block_size as f64, r.relative_forward_time))
        .collect();
    let svg = render_svg(&Chart {
        title: "Relative forward time T(b)/T(1)",
        x_label: "block size b",
        y_label: "T(b)/T(1)",
        points: &points,
    });
    fs::write(dir.join("blocks.svg"), svg)?;
    Ok(())
}

pub fn format_onpolicy_csv(rows: &[OnPolicyRow]) -> String {
    let mut s = format!("{CSV_VERSION}; speedup_ratio = generated tokens per reverse step (1 = one token per step)\n");
    s.push_str(ONPOLICY_LOG_HEADER);
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

/// Renders the speedup ratio over on-policy updates from a training log,
/// writing `onpolicy.csv` and `onpolicy.svg` into `dir`.
pub fn bench_onpolicy_curve(log: &Path, dir: &Path) -> Result<Vec<OnPolicyRow>> {
    let rows = read_onpolicy_log(log)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("onpolicy.csv"), format_onpolicy_csv(&rows))?;
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.update as f64, r.speedup_ratio)).collect();
    let svg = render_svg(&Chart {
        title: "Speedup ratio during on-policy training",
        x_label: "update",
        y_label: "speedup ratio",
        points: &points,
    });
    fs::write(dir.join("onpolicy.svg"), svg)?;
    Ok(rows)
}

/// Verifier pass rate of one generation per prompt, using a session built
/// per prompt. Prompt `i` samples from its own RNG stream.
pub fn eval_quality_with<D, F>(
    heldout: &[ProgramSample],
    block_size: usize,
    cfg: &SampleConfig,
    seed: u64,
    make: F,
) -> Result<f64>
where
    D: Denoise,
    F: Fn(&ProgramSample) -> D + Sync,
{
    if heldout.is_empty() {
        return Ok(0.0);
    }
    let vocab = Vocab::new();
    let verifier = Verifier::exact();
    let scores: Vec<Result<u8>> = heldout
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut session = make(s);
            let prompt = encode_prompt(&vocab, &s.prompt)?;
            let plan = BlockPlan::new(prompt.len(), session.config().max_len, block_size)?;
            let mut rng = stream_rng(seed, streams::EVAL, i as u64);
            let traj = sample_with(&mut session, &prompt, &plan, cfg, &mut rng)?;
            Ok(verifier.score(&traj.final_sequence(), &vocab))
        })
        .collect();
    let mut passed = 0usize;
    for s in scores {
        passed += s? as usize;
    }
    Ok(passed as f64 / heldout.len() as f64)
}

pub fn eval_quality(
    params: &DenoiserParams,
    heldout: &[ProgramSample],
    block_size: usize,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<f64> {
    eval_quality_with(heldout, block_size, cfg, seed, |_| CachedSession::new(params))
}

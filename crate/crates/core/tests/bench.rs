use std::fs;
use std::ops::Range;

use dlm_core::bench::{
    bench_block_sweep, bench_onpolicy_curve, eval_quality, eval_quality_with, format_blocks_csv, selected_block_size,
    write_block_sweep, SweepConfig, BLOCKS_HEADER, CSV_VERSION,
};
use dlm_core::corpus::{gen_corpus, ProgramSample, TokenId, Vocab};
use dlm_core::denoiser::{ModelConfig, Params};
use dlm_core::pipeline::{write_onpolicy_log, OnPolicyRow};
use dlm_core::sampler::{Denoise, SampleConfig};
use dlm_core::{Error, Result};

struct Teacher {
    config: ModelConfig,
    target: Vec<TokenId>,
}

impl Teacher {
    fn for_sample(config: &ModelConfig, s: &ProgramSample) -> Self {
        Self {
            config: config.clone(),
            target: s.lattice(&Vocab::new(), config.max_len).unwrap().into_ids(),
        }
    }
}

impl Denoise for Teacher {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn reset(&mut self) {}

    fn logits(&mut self, _: &[TokenId], _: &[f64], _: &[u32], active: Range<usize>) -> Result<Vec<f32>> {
        let v = self.config.vocab_size;
        let mut out = vec![-1e9f32; active.len() * v];
        for (r, i) in active.enumerate() {
            out[r * v + self.target[i] as usize] = 0.0;
        }
        Ok(out)
    }
}

fn rows(speedups: &[f64]) -> Vec<OnPolicyRow> {
    speedups
        .iter()
        .enumerate()
        .map(|(i, &s)| OnPolicyRow {
            update: i,
            mean_steps: 48.0 / s,
            pass_rate: 0.9,
            speedup_ratio: s,
        })
        .collect()
}

fn circle_attr(svg: &str, attr: &str) -> Vec<String> {
    svg.lines()
        .filter(|l| l.contains("<circle"))
        .map(|l| {
            let key = format!("{attr}=\"");
            let start = l.find(&key).unwrap() + key.len();
            let end = start + l[start..].find('"').unwrap();
            l[start..end].to_string()
        })
        .collect()
}

#[test]
fn teacher_forced_decoding_always_passes() {
    let config = ModelConfig::default();
    let heldout = gen_corpus(77, 60, 3);
    for (b, k) in [(1, 1), (4, 1), (16, 4), (64, 2)] {
        let cfg = SampleConfig {
            steps_per_block: k,
            ..SampleConfig::default()
        };
        let pass = eval_quality_with(&heldout, b, &cfg, 0, |s| Teacher::for_sample(&config, s)).unwrap();
        assert_eq!(pass, 1.0);
    }
}

#[test]
fn untrained_model_almost_never_passes() {
    let params = Params::<f32>::init(&ModelConfig::default(), 0).unwrap();
    let heldout = gen_corpus(78, 200, 1);
    let cfg = SampleConfig::default();
    let pass = eval_quality(&params, &heldout, 16, &cfg, 1).unwrap();
    assert!(pass < 0.02, "{pass}");
    assert_eq!(eval_quality(&params, &heldout, 16, &cfg, 1).unwrap(), pass);
}

#[test]
fn missing_or_empty_logs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("absent.csv");
    assert!(matches!(bench_onpolicy_curve(&missing, &out), Err(Error::MissingLog(_))));
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert!(matches!(bench_onpolicy_curve(&empty, &out), Err(Error::MissingLog(_))));
    let header_only = dir.path().join("header.csv");
    write_onpolicy_log(&header_only, &[]).unwrap();
    assert!(matches!(bench_onpolicy_curve(&header_only, &out), Err(Error::MissingLog(_))));
}

#[test]
fn onpolicy_curve_is_reproducible_and_keeps_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("onpolicy_log.csv");
    write_onpolicy_log(&log, &rows(&[1.0, 1.25, 1.6, 2.0, 2.75, 3.0])).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    bench_onpolicy_curve(&log, &a).unwrap();
    bench_onpolicy_curve(&log, &b).unwrap();
    for name in ["onpolicy.csv", "onpolicy.svg"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let csv = fs::read_to_string(a.join("onpolicy.csv")).unwrap();
    assert!(csv.starts_with(CSV_VERSION));
    let data: Vec<Vec<&str>> = csv.lines().skip(2).map(|l| l.split(',').collect()).collect();
    let svg = fs::read_to_string(a.join("onpolicy.svg")).unwrap();
    let xs = circle_attr(&svg, "data-x");
    let ys = circle_attr(&svg, "data-y");
    assert_eq!(xs.len(), data.len());
    for idx in [0, data.len() - 1] {
        assert_eq!(xs[idx].parse::<f64>().unwrap(), data[idx][0].parse::<f64>().unwrap());
        assert_eq!(ys[idx], data[idx][3]);
    }
}

#[test]
fn block_sweep_records_every_size() {
    let config = ModelConfig {
        layers: 1,
        model_dim: 16,
        heads: 2,
        ff_dim: 32,
        ..ModelConfig::default()
    };
    let params = Params::<f32>::init(&config, 4).unwrap();
    let prompts = gen_corpus(5, 20, 1);
    let cfg = SweepConfig {
        timing_reps: 3,
        timing_warmup: 1,
        decode_reps: 1,
        timing_prefixes: 2,
        ..SweepConfig::default()
    };
    let bs = [1, 2, 4, 8];
    let records = bench_block_sweep(&params, &prompts, &bs, &cfg).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(records[0].relative_forward_time, 1.0);
    for (r, &b) in records.iter().zip(&bs) {
        assert_eq!(r.block_size, b);
        assert_eq!(r.steps_per_block, cfg.steps_for(b));
        assert!(r.tokens_per_second > 0.0);
        assert!((0.0..=1.0).contains(&r.pass_rate));
    }
    assert!(bs.contains(&selected_block_size(&records).unwrap()));
    let csv = format_blocks_csv(&records);
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with(CSV_VERSION));
    assert_eq!(lines.next().unwrap(), BLOCKS_HEADER);
    assert_eq!(lines.count(), 4);

    let dir = tempfile::tempdir().unwrap();
    write_block_sweep(dir.path(), &records).unwrap();
    assert!(dir.path().join("blocks.csv").exists());
    let svg = fs::read_to_string(dir.path().join("blocks.svg")).unwrap();
    assert_eq!(circle_attr(&svg, "data-x").len(), 4);

    assert!(bench_block_sweep(&params, &prompts[..19], &bs, &cfg).is_err());
    assert!(bench_block_sweep(&params, &prompts, &[2, 4], &cfg).is_err());
    assert!(bench_block_sweep(&params, &prompts, &[1, 4, 2], &cfg).is_err());
}

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dlm_core::bench::{bench_block_sweep, bench_onpolicy_curve, eval_quality, selected_block_size, write_block_sweep};
use dlm_core::corpus::{self, read_corpus, write_corpus, ProgramSample, Vocab};
use dlm_core::denoiser::{read_checkpoint, write_checkpoint};
use dlm_core::objectives::Verifier;
use dlm_core::pipeline::{distill_trajectories, train_onpolicy as run_onpolicy, train_tsc_from, write_onpolicy_log, write_train_log};
use dlm_core::rng::stream_rng;
use dlm_core::sampler::{encode_prompt, sample_blockwise, BlockPlan};
use dlm_core::Error;

use crate::config::RunConfig;
use crate::{BenchArgs, CliError, Common, DecodeFlags, DistillArgs, EvalArgs, GenCorpusArgs, OnPolicyArgs, SampleArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn resolve(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    apply(&mut cfg);
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    cfg.resolve()
}

fn echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn training_corpus(path: Option<&Path>, cfg: &RunConfig) -> Result<Vec<ProgramSample>> {
    Ok(match path {
        Some(p) => read_corpus(p)?,
        None => corpus::gen_corpus(cfg.corpus.seed, cfg.corpus.n, cfg.corpus.depth),
    })
}

fn heldout(path: Option<&Path>, cfg: &RunConfig) -> Result<Vec<ProgramSample>> {
    Ok(match path {
        Some(p) => read_corpus(p)?,
        None => corpus::gen_corpus(cfg.heldout.seed, cfg.heldout.n, cfg.heldout.depth),
    })
}

fn apply_decode(cfg: &mut RunConfig, d: &DecodeFlags) {
    if let Some(b) = d.block_size {
        cfg.sample.block_size = b;
    }
    if let Some(k) = d.steps_per_block {
        cfg.sample.config.steps_per_block = k;
    }
    if let Some(t) = d.temperature {
        cfg.sample.config.temperature = t;
    }
}

pub fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let cfg = resolve(&a.common, |c| {
        if let Some(n) = a.n {
            c.corpus.n = n;
        }
        if let Some(d) = a.depth {
            c.corpus.depth = d;
        }
    })?;
    let samples = corpus::gen_corpus(cfg.corpus.seed, cfg.corpus.n, cfg.corpus.depth);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_corpus(&a.out, &samples)?;
    let mut echo_path = a.out.clone().into_os_string();
    echo_path.push(".config.json");
    fs::write(echo_path, cfg.to_json())?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, |c| {
        if let Some(s) = a.steps {
            c.curriculum.total_steps = s;
        }
        if let Some(b) = a.batch_size {
            c.curriculum.batch_size = b;
        }
        if let Some(lr) = a.learning_rate {
            c.curriculum.learning_rate = lr;
        }
        if let Some(f) = a.mask_only_fraction {
            c.curriculum.mask_only_fraction = f;
        }
    })?;
    let resume = a.resume.as_deref().map(read_checkpoint).transpose()?;
    if let Some(ckpt) = &resume {
        cfg.model = ckpt.params.config.clone();
    }
    let data = training_corpus(a.corpus.as_deref(), &cfg)?;
    echo(&a.out, &cfg)?;
    let total = cfg.curriculum.total_steps;
    match train_tsc_from(&cfg.model, &cfg.curriculum, &data, resume, total) {
        Ok(out) => {
            write_checkpoint(&a.out.join("checkpoint.bin"), &out.checkpoint)?;
            write_train_log(&a.out.join("train_log.csv"), &out.log)?;
            if let Some(last) = out.log.last() {
                println!(
                    "step {} phase {} loss {:.4} (edit {:.4}, mask {:.4})",
                    last.step, last.phase, last.loss_total, last.loss_edit, last.loss_mask
                );
            }
            Ok(())
        }
        Err(Error::DivergenceDetected { step, last_good }) => {
            write_checkpoint(&a.out.join("checkpoint.last_good.bin"), &last_good)?;
            Err(CliError::Runtime(Error::DivergenceDetected { step, last_good }))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn distill(a: DistillArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, |c| {
        if let Some(g) = a.group_size {
            c.distill.group_size = g;
        }
        if let Some(m) = a.keep_top {
            c.distill.keep_top = m;
        }
        if let Some(n) = a.samples {
            c.distill.samples = n;
        }
        if let Some(s) = a.steps {
            c.distill.finetune_steps = s;
        }
    })?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    cfg.model = ckpt.params.config.clone();
    let data = training_corpus(a.corpus.as_deref(), &cfg)?;
    echo(&a.out, &cfg)?;
    let out = distill_trajectories(&ckpt, &data, &cfg.distill)?;
    write_checkpoint(&a.out.join("checkpoint.bin"), &out.checkpoint)?;

    let mut pool = String::from("sample_index,candidate,elbo_score,steps,kept\n");
    for e in &out.pool.entries {
        for (i, c) in e.candidates.iter().enumerate() {
            let kept = u8::from(e.kept.contains(&i));
            writeln!(pool, "{},{i},{:.6},{},{kept}", e.sample_index, c.elbo_score, c.trajectory.step_count()).unwrap();
        }
    }
    fs::write(a.out.join("pool.csv"), pool)?;
    let mut log = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        writeln!(log, "{i},{l:.6}").unwrap();
    }
    fs::write(a.out.join("distill_log.csv"), log)?;
    println!(
        "pool of {} samples x {} candidates; final loss {:.4}",
        out.pool.entries.len(),
        out.pool.group_size,
        out.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn train_onpolicy(a: OnPolicyArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, |c| {
        if let Some(u) = a.updates {
            c.onpolicy.updates = u;
        }
        if let Some(b) = a.beta {
            c.onpolicy.beta = b;
        }
    })?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    cfg.model = ckpt.params.config.clone();
    let data = training_corpus(a.corpus.as_deref(), &cfg)?;
    echo(&a.out, &cfg)?;
    let out = run_onpolicy(&ckpt, &data, &Verifier::exact(), &cfg.onpolicy)?;
    write_checkpoint(&a.out.join("checkpoint.bin"), &out.checkpoint)?;
    write_onpolicy_log(&a.out.join("onpolicy_log.csv"), &out.log)?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!(
            "speedup {:.3} -> {:.3}, pass rate {:.3} -> {:.3}",
            first.speedup_ratio, last.speedup_ratio, first.pass_rate, last.pass_rate
        );
    }
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, |c| {
        apply_decode(c, &a.decode);
        if a.revise {
            c.sample.config.allow_edit_revision = true;
        }
    })?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    cfg.model = ckpt.params.config.clone();
    if let Some(dir) = &a.out {
        echo(dir, &cfg)?;
    }
    let vocab = Vocab::new();
    let prompt = encode_prompt(&vocab, &a.prompt).map_err(|e| CliError::Usage(e.to_string()))?;
    let plan = BlockPlan::new(prompt.len(), cfg.model.max_len, cfg.sample.block_size)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = stream_rng(cfg.sample.seed, dlm_core::rng::streams::EVAL, 0);
    let traj = sample_blockwise(&ckpt.params, &prompt, &plan, &cfg.sample.config, &mut rng)?;
    if a.trace {
        for state in &traj.states {
            let mut ids = prompt.clone();
            ids.extend_from_slice(state);
            let text = vocab.decode_with_mask(&dlm_core::corpus::TokenSeq::new(ids), "_");
            println!("{}", text.trim_end());
        }
        println!("# steps {}", traj.step_count());
    }
    let text = vocab.decode(&traj.final_sequence());
    println!("{}", text.trim_end());
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, |c| {
        if let Some(bs) = &a.sweep_blocks {
            c.bench.block_sizes = bs.clone();
        }
    })?;
    let sweep = a.sweep_blocks.is_some() || (a.checkpoint.is_some() && a.onpolicy_log.is_none());
    if !sweep && a.onpolicy_log.is_none() {
        return Err(CliError::Usage("nothing to do: pass --sweep-blocks with --checkpoint, or --onpolicy-log".into()));
    }
    let ckpt = if sweep {
        let path = a
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage("the block sweep needs --checkpoint".into()))?;
        let ckpt = read_checkpoint(path)?;
        cfg.model = ckpt.params.config.clone();
        Some(ckpt)
    } else {
        None
    };
    echo(&a.out, &cfg)?;
    if let Some(ckpt) = ckpt {
        let prompts = heldout(a.prompts.as_deref(), &cfg)?;
        let records = bench_block_sweep(&ckpt.params, &prompts, &cfg.bench.block_sizes, &cfg.bench.sweep)?;
        write_block_sweep(&a.out, &records)?;
        for r in &records {
            println!(
                "b={:<3} K={:<3} T(b)/T(1)={:.3} tokens/s={:.1} pass={:.3}",
                r.block_size, r.steps_per_block, r.relative_forward_time, r.tokens_per_second, r.pass_rate
            );
        }
        if let Some(b) = selected_block_size(&records) {
            println!("selected b={b}");
        }
    }
    if let Some(log) = &a.onpolicy_log {
        let rows = bench_onpolicy_curve(log, &a.out)?;
        println!("rendered {} on-policy updates", rows.len());
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, |c| apply_decode(c, &a.decode))?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    cfg.model = ckpt.params.config.clone();
    let prompts = heldout(a.heldout.as_deref(), &cfg)?;
    let pass = eval_quality(&ckpt.params, &prompts, cfg.sample.block_size, &cfg.sample.config, cfg.sample.seed)?;
    if let Some(dir) = &a.out {
        echo(dir, &cfg)?;
        let report = serde_json::json!({
            "pass_rate": pass,
            "prompts": prompts.len(),
            "block_size": cfg.sample.block_size,
            "steps_per_block": cfg.sample.config.steps_per_block,
        });
        fs::write(dir.join("eval.json"), format!("{report:#}\n"))?;
    }
    println!("pass_rate {pass:.4} over {} prompts", prompts.len());
    Ok(())
}

use std::fs;
use std::path::Path;

use dlm_core::bench::SweepConfig;
use dlm_core::denoiser::ModelConfig;
use dlm_core::pipeline::{CurriculumConfig, DistillConfig, OnPolicyConfig};
use dlm_core::sampler::SampleConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n: usize,
    pub depth: u32,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { n: 5000, depth: 1, seed: 0 }
    }
}

/// Prompts generated for `eval` and `bench` when no file is given. Use a
/// seed different from the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeldoutSection {
    pub n: usize,
    pub depth: u32,
    pub seed: u64,
}

impl Default for HeldoutSection {
    fn default() -> Self {
        Self {
            n: 200,
            depth: 1,
            seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub block_size: usize,
    pub config: SampleConfig,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            block_size: 16,
            config: SampleConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub block_sizes: Vec<usize>,
    pub sweep: SweepConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            block_sizes: vec![1, 2, 4, 8, 16, 32],
            sweep: SweepConfig::default(),
        }
    }
}

/// Every setting of every subcommand. Layering: built-in defaults, then the
/// `--config` document, then command-line flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every stage.
    pub seed: Option<u64>,
    pub corpus: CorpusSection,
    pub heldout: HeldoutSection,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    pub distill: DistillConfig,
    pub onpolicy: OnPolicyConfig,
    pub sample: SampleSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Applies the global seed and checks every section.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if let Some(s) = self.seed {
            self.corpus.seed = s;
            self.curriculum.seed = s;
            self.distill.seed = s;
            self.onpolicy.seed = s;
            self.sample.seed = s;
            self.bench.sweep.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(format!("invalid configuration: {m}")));
        if self.corpus.n == 0 || self.corpus.depth == 0 || self.heldout.depth == 0 {
            return bad("corpus size and grammar depths must be positive");
        }
        if self.sample.block_size == 0 {
            return bad("sample.block_size must be positive");
        }
        let bs = &self.bench.block_sizes;
        if bs.first() != Some(&1) || bs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("bench.block_sizes must be ascending and start at 1");
        }
        let sw = &self.bench.sweep;
        if sw.tokens_per_step == 0 || sw.timing_reps == 0 || sw.decode_reps == 0 {
            return bad("bench.sweep counts must be positive");
        }
        self.model.validate()?;
        self.curriculum.validate()?;
        self.distill.validate()?;
        self.onpolicy.validate()?;
        self.sample.config.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configs serialize");
        s.push('\n');
        s
    }
}

//! JSON run configurations. Unknown keys are rejected; every field has a
//! default except the paths a command cannot guess.

use std::fs;
use std::path::{Path, PathBuf};

use lgmsep_core::mixsim::MixingKind;
use lgmsep_core::mnmf_solver::NmfKind;
use lgmsep_core::neural::LatentConfig;
use lgmsep_core::signal_io::{ms_to_samples, StftMeta, Window};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| lgmsep_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn require_path(p: &Path, key: &str) -> Result<(), CliError> {
    if p.as_os_str().is_empty() {
        return Err(CliError::Config(format!("`{key}` is required")));
    }
    Ok(())
}

fn positive(x: usize, key: &str) -> Result<(), CliError> {
    if x == 0 {
        return Err(CliError::Config(format!("`{key}` must be positive")));
    }
    Ok(())
}

/// STFT parameters. `frame_len` and `hop` in samples take precedence over
/// `frame_ms` and half-frame hop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub frame_ms: f64,
    pub frame_len: Option<usize>,
    pub hop: Option<usize>,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_ms: 256.0,
            frame_len: None,
            hop: None,
            window: Window::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn from_meta(m: &StftMeta) -> Self {
        StftConfig {
            frame_ms: 0.0,
            frame_len: Some(m.frame_len),
            hop: Some(m.hop),
            window: m.window,
        }
    }

    /// `(frame_len, hop)` at `sample_rate`.
    pub fn resolve(&self, sample_rate: u32) -> Result<(usize, usize), CliError> {
        let frame = self.frame_len.unwrap_or_else(|| ms_to_samples(self.frame_ms, sample_rate));
        let hop = self.hop.unwrap_or(frame / 2);
        if frame < 2 || hop == 0 || hop > frame {
            return Err(CliError::Config(format!("unusable STFT: frame {frame} samples, hop {hop}")));
        }
        Ok((frame, hop))
    }

    pub fn bins(&self, sample_rate: u32) -> Result<usize, CliError> {
        Ok(self.resolve(sample_rate)?.0 / 2 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Optimizer {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Optimizer {
    fn default() -> Self {
        let t = lgmsep_core::neural::TrainConfig::default();
        Optimizer {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
        }
    }
}

/// `lgmsep train`: class-labelled WAVs live in one subdirectory per class
/// under `data_dir`; classes are numbered in sorted directory order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub sample_rate: u32,
    pub stft: StftConfig,
    /// Frames per training example; longer files are cut into segments.
    pub segment_frames: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub optimizer: Optimizer,
    /// Epochs between training-state snapshots.
    pub checkpoint_every: usize,
    /// Continue from `out/train_state.bin` when present.
    pub resume: bool,
    pub seed: u64,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            data_dir: PathBuf::new(),
            out: PathBuf::new(),
            sample_rate: 16000,
            stft: StftConfig::default(),
            segment_frames: 32,
            latent_dim: 16,
            hidden: 128,
            hidden_layers: 2,
            optimizer: Optimizer::default(),
            checkpoint_every: 10,
            resume: true,
            seed: 0,
        }
    }
}

impl TrainRun {
    pub fn validate(&self) -> Result<(), CliError> {
        require_path(&self.data_dir, "data_dir")?;
        require_path(&self.out, "out")?;
        positive(self.sample_rate as usize, "sample_rate")?;
        positive(self.segment_frames, "segment_frames")?;
        positive(self.latent_dim, "latent_dim")?;
        positive(self.hidden, "hidden")?;
        positive(self.optimizer.batch_size, "optimizer.batch_size")?;
        positive(self.checkpoint_every, "checkpoint_every")?;
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(CliError::Config("`optimizer.learning_rate` must be positive".into()));
        }
        self.stft.resolve(self.sample_rate)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "kebab-case")]
pub enum SourceConfig {
    /// Low-rank random NMF spectrograms.
    Nmf { bases: usize },
    /// One preset spectral class per source.
    Classes { classes: Vec<usize> },
}

/// Single-source class examples for `lgmsep train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub classes: Vec<usize>,
    pub examples_per_class: usize,
    pub frames: usize,
}

/// `lgmsep mix`: `count` mixtures written to `out/item_000`, `out/item_001`, …
/// Item `k` uses seed `seed + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixRun {
    pub out: PathBuf,
    pub sources: usize,
    pub channels: usize,
    pub mixing: MixingKind,
    pub gains: Vec<f64>,
    pub max_delay_ms: f64,
    pub bins: usize,
    pub frames: usize,
    pub sample_rate: u32,
    pub source: SourceConfig,
    pub count: usize,
    /// Also write a labelled training corpus to `out/corpus`.
    pub corpus: Option<CorpusConfig>,
    pub seed: u64,
}

impl Default for MixRun {
    fn default() -> Self {
        MixRun {
            out: PathBuf::new(),
            sources: 3,
            channels: 2,
            mixing: MixingKind::AnechoicDelay,
            gains: Vec::new(),
            max_delay_ms: 2.0,
            bins: 129,
            frames: 100,
            sample_rate: 16000,
            source: SourceConfig::Nmf { bases: 4 },
            count: 1,
            corpus: None,
            seed: 0,
        }
    }
}

impl MixRun {
    pub fn validate(&self) -> Result<(), CliError> {
        require_path(&self.out, "out")?;
        positive(self.sources, "sources")?;
        positive(self.channels, "channels")?;
        positive(self.frames, "frames")?;
        positive(self.count, "count")?;
        positive(self.sample_rate as usize, "sample_rate")?;
        if self.bins < 2 {
            return Err(CliError::Config("`bins` must be at least 2".into()));
        }
        match &self.source {
            SourceConfig::Nmf { bases } => positive(*bases, "source.bases")?,
            SourceConfig::Classes { classes } if classes.len() != self.sources => {
                return Err(CliError::Config(format!(
                    "`source.classes` lists {} classes for {} sources",
                    classes.len(),
                    self.sources
                )))
            }
            SourceConfig::Classes { .. } => {}
        }
        if let Some(c) = &self.corpus {
            if c.classes.is_empty() {
                return Err(CliError::Config("`corpus.classes` is empty".into()));
            }
            positive(c.examples_per_class, "corpus.examples_per_class")?;
            positive(c.frames, "corpus.frames")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mnmf1,
    Mnmf2,
    Ilrma,
    Gmvae,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mnmf1 => "mnmf1",
            Method::Mnmf2 => "mnmf2",
            Method::Ilrma => "ilrma",
            Method::Gmvae => "gmvae",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| CliError::Config(format!("unknown method `{s}` (expected mnmf1, mnmf2, ilrma or gmvae)")))
    }
}

/// `lgmsep separate`. `input` is a mixture directory (holding
/// `mixture.wav`) or a directory of such directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparateRun {
    pub input: PathBuf,
    pub out: PathBuf,
    pub method: Method,
    pub sources: usize,
    pub bases: usize,
    /// Defaults to 300 for the NMF-based methods and 100 for gmvae.
    pub iterations: Option<usize>,
    /// Source model inside ILRMA.
    pub ilrma_model: NmfKind,
    /// gmvae only.
    pub weights: Option<PathBuf>,
    /// gmvae only: output directory of an earlier `separate` run whose
    /// checkpoints seed the solver. Without it an MNMF2 warm start is run.
    pub warm_start: Option<PathBuf>,
    pub warm_start_iterations: usize,
    pub latent: LatentConfig,
    /// gmvae only: keep `tr R_j(f)` fixed in spatial updates. `false` runs
    /// the unconstrained update.
    pub fix_spatial_trace: bool,
    /// Defaults to the STFT recorded in the mixture's manifest, else 256 ms.
    pub stft: Option<StftConfig>,
    pub seed: u64,
}

impl Default for SeparateRun {
    fn default() -> Self {
        SeparateRun {
            input: PathBuf::new(),
            out: PathBuf::new(),
            method: Method::Mnmf2,
            sources: 3,
            bases: 8,
            iterations: None,
            ilrma_model: NmfKind::Nmf1,
            weights: None,
            warm_start: None,
            warm_start_iterations: 200,
            latent: LatentConfig::default(),
            fix_spatial_trace: true,
            stft: None,
            seed: 0,
        }
    }
}

impl SeparateRun {
    pub fn iterations(&self) -> usize {
        self.iterations.unwrap_or(match self.method {
            Method::Gmvae => 100,
            _ => 300,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        require_path(&self.input, "input")?;
        require_path(&self.out, "out")?;
        positive(self.sources, "sources")?;
        positive(self.bases, "bases")?;
        if self.method == Method::Gmvae && self.weights.is_none() {
            return Err(CliError::Config("method gmvae needs `weights` from `lgmsep train`".into()));
        }
        if self.method != Method::Gmvae && (self.weights.is_some() || self.warm_start.is_some()) {
            return Err(CliError::Config(format!(
                "`weights` and `warm_start` only apply to gmvae, not {}",
                self.method.name()
            )));
        }
        Ok(())
    }
}

/// `lgmsep eval`: `references` is a `mix` output, `estimates` the matching
/// `separate` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub references: PathBuf,
    pub estimates: PathBuf,
    pub out: PathBuf,
    /// Label for the report; defaults to the method recorded by `separate`.
    pub method: Option<String>,
    pub reference_channel: usize,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            references: PathBuf::new(),
            estimates: PathBuf::new(),
            out: PathBuf::new(),
            method: None,
            reference_channel: 0,
        }
    }
}

impl EvalRun {
    pub fn validate(&self) -> Result<(), CliError> {
        require_path(&self.references, "references")?;
        require_path(&self.estimates, "estimates")?;
        require_path(&self.out, "out")?;
        Ok(())
    }
}

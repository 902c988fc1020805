//! Preprocessor training against the virtual codec and a frozen analyzer,
//! and the baseline that instead fine-tunes the analyzer on compressed clips.
//!
//! The objective per clip is `alpha * (L_D + lambda * L_R) + L_Acc` with
//! `L_D` the MSE between reconstruction and source, `L_R` the estimated bits
//! per pixel and `L_Acc` the analyzer cross-entropy on the reconstruction.

mod guard;
mod loss;
mod state;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub use guard::DivergenceGuard;
pub use loss::{combine, total_loss, Components, ElementGrads, LossContext};
pub use state::TrainState;

use crate::analyzer::AnalyzerError;
use crate::autodiff::AutodiffError;
use crate::codec::CodecError;
use crate::container::ContainerError;
use crate::optim::OptimError;
use crate::preprocessor::PreprocessError;
use crate::video::{LabeledClip, VideoError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("preprocessor training needs a frozen analyzer")]
    AnalyzerNotFrozen,
    #[error("divergence at step {step}: moving-average loss {average:.4} exceeds {threshold:.4}")]
    Diverged { step: u64, average: f64, threshold: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Video(#[from] VideoError),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Train the preprocessor (and entropy model); the analyzer is frozen.
    Preprocessor,
    /// Identity preprocessor; fine-tune the analyzer on compressed clips.
    FinetuneAnalyzer,
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "preprocessor" => Ok(Self::Preprocessor),
            "finetune-analyzer-baseline" => Ok(Self::FinetuneAnalyzer),
            _ => Err(TrainError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Preprocessor => "preprocessor",
            Self::FinetuneAnalyzer => "finetune-analyzer-baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f32,
    pub lambda: f32,
    pub lr: f32,
    /// Learning rate of the entropy-model parameters.
    pub entropy_lr: f32,
    pub fq_min: u32,
    pub fq_max: u32,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub guard_window: usize,
    pub guard_factor: f32,
    /// Clips and fitting steps used to initialize the entropy model from
    /// anchor symbols before the first step.
    pub entropy_init_clips: usize,
    pub entropy_init_steps: usize,
    pub entropy_init_lr: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            lambda: 0.001,
            lr: 1e-4,
            entropy_lr: 1e-3,
            fq_min: 30,
            fq_max: 50,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            mode: TrainMode::Preprocessor,
            checkpoint_every: 500,
            guard_window: 50,
            guard_factor: 10.0,
            entropy_init_clips: 32,
            entropy_init_steps: 300,
            entropy_init_lr: 2e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        for (name, v) in [("lr", self.lr), ("entropy_lr", self.entropy_lr), ("entropy_init_lr", self.entropy_init_lr)] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.fq_min < 4 || self.fq_max > 63 || self.fq_min > self.fq_max {
            return bad(format!("f_q range [{}, {}] must lie within [4, 63]", self.fq_min, self.fq_max));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.guard_window == 0 || !(self.guard_factor > 1.0) {
            return bad("guard window must be positive and the factor above 1".into());
        }
        Ok(())
    }

    /// Quantization factors used to fit the initial entropy model: the range
    /// endpoints and every fifth value in between.
    pub fn fit_grid(&self) -> Vec<f32> {
        let mut g: Vec<f32> = (self.fq_min..=self.fq_max).step_by(5).map(|q| q as f32).collect();
        if g.last() != Some(&(self.fq_max as f32)) {
            g.push(self.fq_max as f32);
        }
        g
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    /// Mean quantization factor over the batch.
    pub f_q: f64,
    pub total: f64,
    pub distortion: f64,
    pub rate: f64,
    pub accuracy: f64,
}

pub const LOG_HEADER: &str = "step,f_q,L,L_D,L_R,L_Acc";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.f_q, self.total, self.distortion, self.rate, self.accuracy
        )
    }
}

/// Runs steps until `state` has completed `until` steps. With `out_dir` the
/// log is kept in `train_log.csv` (rows past the current step are dropped
/// first, so a resumed run continues the log), periodic checkpoints go to
/// `ckpt_NNNNNN.vcmp` and the final state to `final.vcmp`.
pub fn run(
    state: &mut TrainState,
    data: &[LabeledClip],
    until: u64,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>, TrainError> {
    let mut log_file = match out_dir {
        Some(dir) => Some(open_log(dir, state.step())?),
        None => None,
    };
    let mut records = Vec::new();
    while state.step() < until {
        let rec = state.train_step(data)?;
        if let Some((path, f)) = log_file.as_mut() {
            writeln!(f, "{}", rec.csv_row()).map_err(|e| io_err(path, e))?;
        }
        progress(&rec);
        records.push(rec);
        let every = state.config().checkpoint_every;
        if let Some(dir) = out_dir {
            if every > 0 && state.step().is_multiple_of(every) {
                state.save(&dir.join(format!("ckpt_{:06}.vcmp", state.step())))?;
            }
        }
    }
    if state.config().mode == TrainMode::FinetuneAnalyzer && state.step() >= state.config().steps {
        state.finish();
    }
    if let Some(dir) = out_dir {
        state.save(&dir.join("final.vcmp"))?;
    }
    Ok(records)
}

fn open_log(dir: &Path, step: u64) -> Result<(PathBuf, fs::File), TrainError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("train_log.csv");
    let mut keep = vec![LOG_HEADER.to_string()];
    if step > 0 {
        if let Ok(text) = fs::read_to_string(&path) {
            keep.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
                    .map(str::to_string),
            );
        }
    }
    let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    for l in &keep {
        writeln!(f, "{l}").map_err(|e| io_err(&path, e))?;
    }
    Ok((path, f))
}

/// Full training run from scratch: fits the initial entropy model, then runs
/// `cfg.steps` steps.
pub fn train(
    data: &[LabeledClip],
    cfg: &TrainConfig,
    analyzer: crate::analyzer::Analyzer,
    out_dir: Option<&Path>,
    progress: impl FnMut(&StepRecord),
) -> Result<(TrainState, Vec<StepRecord>), TrainError> {
    let mut state = TrainState::new(cfg.clone(), analyzer, data)?;
    let records = run(&mut state, data, cfg.steps, out_dir, progress)?;
    Ok((state, records))
}

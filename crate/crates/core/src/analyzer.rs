//! Small spatio-temporal action classifier used as the downstream task.
//!
//! Three stages of (temporal conv k=3, ReLU, 3x3 conv, ReLU, 2x2 average
//! pool) with 1 -> 8 -> 16 -> 16 channels, global average pooling over time
//! and space, and a linear head to 8 classes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::container::{Container, ContainerError};
use crate::optim::{Adam, OptimError};
use crate::params::{he_uniform, ParamSet};
use crate::video::synth::{CLIP_FRAMES, CLIP_SIZE, NUM_CLASSES};
use crate::video::{LabeledClip, Layout, VideoClip};

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("analyzer expects an {CLIP_FRAMES}x{CLIP_SIZE}x{CLIP_SIZE} luma clip, got {0}")]
    Geometry(String),
    #[error("label {0} outside [0, {NUM_CLASSES})")]
    Label(usize),
    #[error("parameter layout does not match the architecture: {0}")]
    Layout(String),
    #[error("pretraining reached only {accuracy:.3} validation accuracy after {steps} steps")]
    PretrainFailed { accuracy: f64, steps: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

const CHANNELS: [usize; 4] = [1, 8, 16, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct Analyzer {
    params: ParamSet,
    frozen: bool,
}

impl Analyzer {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for s in 0..3 {
            let (ci, co) = (CHANNELS[s], CHANNELS[s + 1]);
            let n = s + 1;
            entries.push((format!("stage{n}.temporal.weight"), he_uniform(&mut rng, &[co, ci, 3], ci * 3)));
            entries.push((format!("stage{n}.temporal.bias"), Tensor::zeros(&[co])));
            entries.push((format!("stage{n}.spatial.weight"), he_uniform(&mut rng, &[co, co, 3, 3], co * 9)));
            entries.push((format!("stage{n}.spatial.bias"), Tensor::zeros(&[co])));
        }
        entries.push(("head.weight".into(), he_uniform(&mut rng, &[NUM_CLASSES, CHANNELS[3]], CHANNELS[3])));
        entries.push(("head.bias".into(), Tensor::zeros(&[NUM_CLASSES])));
        Self {
            params: ParamSet::new(entries),
            frozen: false,
        }
    }

    pub fn from_params(params: ParamSet, frozen: bool) -> Result<Self, AnalyzerError> {
        if !params.same_layout(&Self::init(0).params) {
            return Err(AnalyzerError::Layout(format!("{} tensors", params.len())));
        }
        Ok(Self { params, frozen })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Sections `analyzer/<name>` and `analyzer/frozen`.
    pub fn write_sections(&self, c: &mut Container) -> Result<(), ContainerError> {
        c.push_params("analyzer", &self.params)?;
        c.push_scalar("analyzer/frozen", self.frozen as u8 as f32)
    }

    pub fn read_sections(c: &Container) -> Result<Self, AnalyzerError> {
        let params = c.params("analyzer", &Self::init(0).params)?;
        let frozen = c.scalar("analyzer/frozen")? != 0.0;
        Self::from_params(params, frozen)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), AnalyzerError> {
        let mut c = Container::new();
        self.write_sections(&mut c)?;
        Ok(c.save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AnalyzerError> {
        Self::read_sections(&Container::load(path)?)
    }

    /// Logits `[8]` for a clip `[8, 64, 64]` recorded on `tape`.
    pub fn forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, AnalyzerError> {
        let shape = tape.shape(x).to_vec();
        if shape != [CLIP_FRAMES, CLIP_SIZE, CLIP_SIZE] {
            return Err(AnalyzerError::Geometry(format!("{shape:?}")));
        }
        let mut h = tape.reshape(x, &[CLIP_FRAMES, 1, CLIP_SIZE, CLIP_SIZE])?;
        for s in 0..3 {
            let v = &vars[4 * s..4 * s + 4];
            h = tape.conv_temporal(h, v[0], Some(v[1]))?;
            h = tape.relu(h);
            h = tape.conv2d(h, v[2], Some(v[3]))?;
            h = tape.relu(h);
            h = tape.avg_pool2(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        Ok(tape.linear(pooled, vars[12], vars[13])?)
    }

    pub fn classify(&self, clip: &VideoClip) -> Result<Vec<f32>, AnalyzerError> {
        let x = clip_tensor(clip)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(x);
        let logits = Self::forward(&mut tape, &vars, x)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

fn clip_tensor(clip: &VideoClip) -> Result<Tensor, AnalyzerError> {
    if clip.layout() != Layout::Luma
        || clip.num_frames() != CLIP_FRAMES
        || clip.width() != CLIP_SIZE
        || clip.height() != CLIP_SIZE
    {
        return Err(AnalyzerError::Geometry(format!(
            "{:?} {}x{}x{}",
            clip.layout(),
            clip.num_frames(),
            clip.height(),
            clip.width()
        )));
    }
    Ok(clip.luma_tensor().expect("luma"))
}

/// Cross-entropy of `logits` against `label`.
pub fn accuracy_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var, AnalyzerError> {
    if label >= NUM_CLASSES {
        return Err(AnalyzerError::Label(label));
    }
    Ok(tape.cross_entropy(logits, label)?)
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is among the `k` largest logits (ties broken by index).
pub fn in_top_k(logits: &[f32], label: usize, k: usize) -> bool {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order[..k.min(order.len())].contains(&label)
}

/// Top-1 accuracy over a labeled set.
pub fn evaluate(analyzer: &Analyzer, clips: &[LabeledClip]) -> Result<f64, AnalyzerError> {
    if clips.is_empty() {
        return Err(AnalyzerError::EmptyDataset);
    }
    let correct = clips
        .par_iter()
        .map(|c| analyzer.classify(&c.clip).map(|l| (argmax(&l) == c.label) as usize))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / clips.len() as f64)
}

/// Loss, logits and gradients of one labeled clip.
pub fn clip_gradients(analyzer: &Analyzer, clip: &LabeledClip) -> Result<(f64, Vec<f32>, Vec<Tensor>), AnalyzerError> {
    let mut tape = Tape::new();
    let vars = analyzer.params.bind(&mut tape, true);
    let x = tape.constant(clip_tensor(&clip.clip)?);
    let logits = Analyzer::forward(&mut tape, &vars, x)?;
    let loss = accuracy_loss(&mut tape, logits, clip.label)?;
    let value = tape.value(loss).item() as f64;
    let out = tape.value(logits).data().to_vec();
    let mut grads = tape.backward(loss)?;
    Ok((value, out, vars.iter().map(|v| grads.take(*v).expect("leaf grad")).collect()))
}

/// Sums per-example gradients in index order and divides by the count.
pub fn mean_gradients(per_example: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let n = per_example.len() as f32;
    let mut iter = per_example.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for g in iter {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    acc
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub seed: u64,
    pub lr: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validation accuracy that ends training early.
    pub target_accuracy: f64,
    /// Accuracy below which pretraining is reported as failed.
    pub min_accuracy: f64,
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 2e-3,
            batch_size: 8,
            max_steps: 5000,
            target_accuracy: 0.95,
            min_accuracy: 0.80,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainLog {
    /// Training loss per step.
    pub losses: Vec<f64>,
    /// Batch top-1 accuracy per step.
    pub batch_accuracy: Vec<f64>,
    /// `(step, validation accuracy)` at each evaluation.
    pub validation: Vec<(usize, f64)>,
}

/// Cross-entropy training on clean clips with Adam. Stops once validation
/// accuracy reaches `target_accuracy` or after `max_steps`.
pub fn pretrain(
    train: &[LabeledClip],
    val: &[LabeledClip],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f64, Option<f64>),
) -> Result<(Analyzer, PretrainLog), AnalyzerError> {
    if train.is_empty() || val.is_empty() {
        return Err(AnalyzerError::EmptyDataset);
    }
    let mut analyzer = Analyzer::init(cfg.seed);
    let mut adam = Adam::new(&analyzer.params.sizes());
    let mut log = PretrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut final_acc = 0.0;
    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("non-empty"));
        }
        let results = batch
            .par_iter()
            .map(|&i| {
                let (loss, logits, grads) = clip_gradients(&analyzer, &train[i])?;
                Ok((loss, grads, (argmax(&logits) == train[i].label) as usize))
            })
            .collect::<Result<Vec<_>, AnalyzerError>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
        let acc = results.iter().map(|r| r.2).sum::<usize>() as f64 / batch.len() as f64;
        let grads = mean_gradients(results.into_iter().map(|r| r.1).collect());
        let lrs = vec![Some(cfg.lr); grads.len()];
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params: Vec<&mut Tensor> = analyzer.params.tensors_mut().collect();
        adam.step(&mut params, &grad_refs, &lrs)?;
        log.losses.push(loss);
        log.batch_accuracy.push(acc);

        let last = step + 1 == cfg.max_steps;
        let val_acc = if (step + 1) % cfg.eval_every == 0 || last {
            let a = evaluate(&analyzer, val)?;
            log.validation.push((step + 1, a));
            final_acc = a;
            Some(a)
        } else {
            None
        };
        progress(step + 1, loss, val_acc);
        if val_acc.is_some_and(|a| a >= cfg.target_accuracy) {
            break;
        }
    }
    if final_acc < cfg.min_accuracy {
        return Err(AnalyzerError::PretrainFailed {
            accuracy: final_acc,
            steps: log.losses.len(),
        });
    }
    analyzer.frozen = true;
    Ok((analyzer, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_and_argmax() {
        let l = [0.1, 2.0, 2.0, -1.0];
        assert_eq!(argmax(&l), 1);
        assert!(in_top_k(&l, 2, 2));
        assert!(!in_top_k(&l, 0, 2));
    }

    #[test]
    fn parameter_layout() {
        let a = Analyzer::init(0);
        assert_eq!(a.params().len(), 14);
        assert_eq!(a.params().get("head.weight").unwrap().shape(), &[8, 16]);
        assert!(Analyzer::from_params(a.params().clone(), true).unwrap().is_frozen());
    }
}

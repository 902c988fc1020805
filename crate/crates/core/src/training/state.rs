use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::guard::DivergenceGuard;
use super::loss::{total_loss, LossContext};
use super::{StepRecord, TrainConfig, TrainError, TrainMode};
use crate::analyzer::Analyzer;
use crate::autodiff::Tensor;
use crate::codec::{collect_symbols, EntropyModel, QuantMode, VirtualCodecConfig};
use crate::container::{Container, ContainerError};
use crate::optim::Adam;
use crate::preprocessor::Preprocessor;
use crate::video::{LabeledClip, VideoClip};

/// Everything needed to continue training: the checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    cfg: TrainConfig,
    codec: VirtualCodecConfig,
    preprocessor: Preprocessor,
    entropy: EntropyModel,
    analyzer: Analyzer,
    adam: Adam,
    step: u64,
    guard: DivergenceGuard,
}

/// Stream offset keeping per-step draws apart from other uses of the seed.
const STEP_STREAM: u64 = 1 << 32;

impl TrainState {
    /// Fresh state with the default codec block settings.
    pub fn new(cfg: TrainConfig, analyzer: Analyzer, data: &[LabeledClip]) -> Result<Self, TrainError> {
        Self::with_codec(cfg, VirtualCodecConfig::default(), analyzer, data)
    }

    /// Fresh state: identity preprocessor, entropy model fitted to anchor
    /// symbols of the first `entropy_init_clips` clips. Only the block
    /// settings of `codec` are used; `f_q` and the quantization mode are
    /// drawn per element.
    pub fn with_codec(
        cfg: TrainConfig,
        codec: VirtualCodecConfig,
        mut analyzer: Analyzer,
        data: &[LabeledClip],
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let codec = VirtualCodecConfig {
            f_q: cfg.fq_min as f32,
            quant_mode: QuantMode::Noise,
            ..codec
        };
        codec.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        match cfg.mode {
            TrainMode::Preprocessor if !analyzer.is_frozen() => return Err(TrainError::AnalyzerNotFrozen),
            TrainMode::FinetuneAnalyzer => analyzer.set_frozen(false),
            _ => {}
        }
        let clips: Vec<VideoClip> = data.iter().take(cfg.entropy_init_clips.max(1)).map(|c| c.clip.clone()).collect();
        let mut entropy = EntropyModel::default();
        if cfg.entropy_init_steps > 0 {
            let symbols = collect_symbols(&clips, &codec, &cfg.fit_grid())?;
            entropy.fit(&symbols, cfg.entropy_init_steps, cfg.entropy_init_lr)?;
        }
        let preprocessor = Preprocessor::init(cfg.seed);
        let mut sizes = preprocessor.params().sizes();
        sizes.push(entropy.params().len());
        sizes.extend(analyzer.params().sizes());
        Ok(Self {
            codec,
            guard: DivergenceGuard::new(cfg.guard_window, cfg.guard_factor),
            adam: Adam::new(&sizes),
            step: 0,
            cfg,
            preprocessor,
            entropy,
            analyzer,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn codec(&self) -> &VirtualCodecConfig {
        &self.codec
    }

    pub fn preprocessor(&self) -> &Preprocessor {
        &self.preprocessor
    }

    pub fn entropy(&self) -> &EntropyModel {
        &self.entropy
    }

    pub fn analyzer(&self) -> &Analyzer {
        &self.analyzer
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Freezes the analyzer once baseline fine-tuning has ended.
    pub fn finish(&mut self) {
        self.analyzer.set_frozen(true);
    }

    /// Extends the step budget, e.g. to continue a finished run.
    pub fn set_steps(&mut self, steps: u64) {
        self.cfg.steps = steps;
    }

    /// Loss context for the current parameters.
    pub fn context(&self) -> LossContext<'_> {
        let pre = self.cfg.mode == TrainMode::Preprocessor;
        LossContext {
            cfg: &self.cfg,
            codec: &self.codec,
            preprocessor: pre.then_some(&self.preprocessor),
            entropy: &self.entropy,
            analyzer: &self.analyzer,
            train_preprocessor: pre,
            train_analyzer: !pre,
        }
    }

    /// Clip index, quantization factor and noise seed of every batch element
    /// of step `step` (0-based); a pure function of the seed and step.
    pub fn batch_plan(&self, step: u64, dataset_len: usize) -> Vec<(usize, u32, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(STEP_STREAM + step);
        (0..self.cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..dataset_len);
                let f_q = rng.random_range(self.cfg.fq_min..=self.cfg.fq_max);
                (i, f_q, rng.random::<u64>())
            })
            .collect()
    }

    /// One optimizer step on a batch sampled with replacement from `data`.
    pub fn train_step(&mut self, data: &[LabeledClip]) -> Result<StepRecord, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let plan = self.batch_plan(self.step, data.len());
        let ctx = self.context();
        let results = plan
            .par_iter()
            .map(|&(i, f_q, seed)| total_loss(&ctx, &data[i], f_q, seed, true))
            .collect::<Result<Vec<_>, _>>()?;

        let n = results.len() as f64;
        let mean = |f: fn(&super::Components) -> f64| results.iter().map(|(c, _)| f(c)).sum::<f64>() / n;
        let record = StepRecord {
            step: self.step + 1,
            f_q: plan.iter().map(|p| p.1 as f64).sum::<f64>() / n,
            total: mean(|c| c.total),
            distortion: mean(|c| c.distortion),
            rate: mean(|c| c.rate),
            accuracy: mean(|c| c.accuracy),
        };
        if let Err((average, threshold)) = self.guard.observe(record.total as f32) {
            log::error!("training diverged at step {}: average {average} > {threshold}", record.step);
            return Err(TrainError::Diverged {
                step: record.step,
                average,
                threshold,
            });
        }

        let pre_n = self.preprocessor.params().len();
        let mut grads: Vec<Tensor> = self.preprocessor.params().tensors().map(|t| Tensor::zeros(t.shape())).collect();
        grads.push(Tensor::zeros(self.entropy.params().shape()));
        grads.extend(self.analyzer.params().tensors().map(|t| Tensor::zeros(t.shape())));
        let add = |dst: &mut Tensor, src: &Tensor| dst.data_mut().iter_mut().zip(src.data()).for_each(|(d, s)| *d += s);
        // summed in batch order so the result does not depend on scheduling
        for (_, g) in &results {
            let g = g.as_ref().expect("backward requested");
            for (k, t) in g.preprocessor.iter().flatten().enumerate() {
                add(&mut grads[k], t);
            }
            add(&mut grads[pre_n], &g.entropy);
            for (k, t) in g.analyzer.iter().flatten().enumerate() {
                add(&mut grads[pre_n + 1 + k], t);
            }
        }
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }

        let pre = self.cfg.mode == TrainMode::Preprocessor;
        let mut lrs = vec![pre.then_some(self.cfg.lr); pre_n];
        lrs.push(Some(self.cfg.entropy_lr));
        lrs.extend(vec![(!pre).then_some(self.cfg.lr); self.analyzer.params().len()]);
        let mut params: Vec<&mut Tensor> = self.preprocessor.params_mut().tensors_mut().collect();
        params.push(self.entropy.params_mut());
        params.extend(self.analyzer.params_mut().tensors_mut());
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        self.adam.step(&mut params, &grad_refs, &lrs)?;
        self.step += 1;
        Ok(record)
    }

    pub fn to_container(&self) -> Result<Container, ContainerError> {
        let c = &self.cfg;
        let mut out = Container::new();
        out.push_scalar("config/alpha", c.alpha)?;
        out.push_scalar("config/lambda", c.lambda)?;
        out.push_scalar("config/lr", c.lr)?;
        out.push_scalar("config/entropy_lr", c.entropy_lr)?;
        out.push_scalar("config/fq_min", c.fq_min as f32)?;
        out.push_scalar("config/fq_max", c.fq_max as f32)?;
        out.push_u64("config/steps", c.steps)?;
        out.push_u64("config/batch_size", c.batch_size as u64)?;
        out.push_u64("config/seed", c.seed)?;
        out.push_scalar("config/mode", (c.mode == TrainMode::FinetuneAnalyzer) as u8 as f32)?;
        out.push_u64("config/checkpoint_every", c.checkpoint_every)?;
        out.push_u64("config/guard_window", c.guard_window as u64)?;
        out.push_scalar("config/guard_factor", c.guard_factor)?;
        out.push_u64("config/entropy_init_clips", c.entropy_init_clips as u64)?;
        out.push_u64("config/entropy_init_steps", c.entropy_init_steps as u64)?;
        out.push_scalar("config/entropy_init_lr", c.entropy_init_lr)?;
        out.push_u64("codec/transform_block", self.codec.transform_block as u64)?;
        out.push_u64("codec/pred_block", self.codec.pred_block as u64)?;
        out.push_u64("codec/search_range", self.codec.search_range as u64)?;
        out.push_u64("state/step", self.step)?;
        out.push_params("preprocessor", self.preprocessor.params())?;
        out.push("entropy/params", self.entropy.params().clone())?;
        self.analyzer.write_sections(&mut out)?;
        out.push_u64("adam/t", self.adam.t)?;
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            out.push(format!("adam/m/{i}"), Tensor::new(vec![m.len()], m.clone()).expect("non-empty group"))?;
            out.push(format!("adam/v/{i}"), Tensor::new(vec![v.len()], v.clone()).expect("non-empty group"))?;
        }
        let g = self.guard.to_vec();
        out.push("guard/state", Tensor::new(vec![g.len()], g).expect("non-empty"))?;
        Ok(out)
    }

    pub fn from_container(c: &Container) -> Result<Self, TrainError> {
        let to_usize = |name: &str| -> Result<usize, TrainError> {
            usize::try_from(c.u64(name)?).map_err(|_| TrainError::Config(format!("{name} out of range")))
        };
        let cfg = TrainConfig {
            alpha: c.scalar("config/alpha")?,
            lambda: c.scalar("config/lambda")?,
            lr: c.scalar("config/lr")?,
            entropy_lr: c.scalar("config/entropy_lr")?,
            fq_min: c.scalar("config/fq_min")? as u32,
            fq_max: c.scalar("config/fq_max")? as u32,
            steps: c.u64("config/steps")?,
            batch_size: to_usize("config/batch_size")?,
            seed: c.u64("config/seed")?,
            mode: if c.scalar("config/mode")? != 0.0 {
                TrainMode::FinetuneAnalyzer
            } else {
                TrainMode::Preprocessor
            },
            checkpoint_every: c.u64("config/checkpoint_every")?,
            guard_window: to_usize("config/guard_window")?,
            guard_factor: c.scalar("config/guard_factor")?,
            entropy_init_clips: to_usize("config/entropy_init_clips")?,
            entropy_init_steps: to_usize("config/entropy_init_steps")?,
            entropy_init_lr: c.scalar("config/entropy_init_lr")?,
        };
        cfg.validate()?;
        let codec = VirtualCodecConfig {
            transform_block: to_usize("codec/transform_block")?,
            pred_block: to_usize("codec/pred_block")?,
            search_range: to_usize("codec/search_range")?,
            ..VirtualCodecConfig::with_fq(cfg.fq_min as f32, QuantMode::Noise)
        };
        codec.validate()?;
        let preprocessor = Preprocessor::from_params(c.params("preprocessor", Preprocessor::init(0).params())?)?;
        let entropy = EntropyModel::from_tensor(c.require("entropy/params")?.clone())?;
        let analyzer = Analyzer::read_sections(c)?;

        let mut sizes = preprocessor.params().sizes();
        sizes.push(entropy.params().len());
        sizes.extend(analyzer.params().sizes());
        let mut adam = Adam::new(&sizes);
        adam.t = c.u64("adam/t")?;
        for (i, &n) in sizes.iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let name = format!("adam/{kind}/{i}");
                let t = c.require(&name)?;
                if t.shape() != [n] {
                    return Err(ContainerError::BadSection {
                        name,
                        reason: format!("shape {:?}, expected [{n}]", t.shape()),
                    }
                    .into());
                }
                slot.copy_from_slice(t.data());
            }
        }
        let guard = DivergenceGuard::from_vec(cfg.guard_window, cfg.guard_factor, c.require("guard/state")?.data())
            .ok_or_else(|| ContainerError::BadSection {
                name: "guard/state".into(),
                reason: "inconsistent with guard_window".into(),
            })?;
        Ok(Self {
            step: c.u64("state/step")?,
            cfg,
            codec,
            preprocessor,
            entropy,
            analyzer,
            adam,
            guard,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_container(&Container::load(path)?)
    }
}

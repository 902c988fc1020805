use rayon::prelude::*;

use super::{EvalError, RACurve, RAPoint};
use crate::analyzer::{argmax, in_top_k, Analyzer};
use crate::autodiff::Tensor;
use crate::codec::{virtual_encode, EntropyModel, QuantMode, VirtualCodecConfig, NUM_CHANNELS};
use crate::harness::{Codec, Harness};
use crate::preprocessor::Preprocessor;
use crate::video::synth::NUM_CLASSES;
use crate::video::{LabeledClip, VideoClip};

/// Entropy-model fit used to price the symbols of each virtual-codec point.
pub const EVAL_FIT_STEPS: usize = 600;
pub const EVAL_FIT_LR: f32 = 2e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub top2: f64,
    /// Mean over classes of the per-class top-1 accuracy.
    pub mean_class: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 3] = ["top1", "top2", "mean_class"];

    pub fn from_logits(logits: &[Vec<f32>], labels: &[usize]) -> Self {
        let n = labels.len() as f64;
        let mut per_class = [(0usize, 0usize); NUM_CLASSES];
        let (mut top1, mut top2) = (0usize, 0usize);
        for (l, &y) in logits.iter().zip(labels) {
            let hit = argmax(l) == y;
            top1 += hit as usize;
            top2 += in_top_k(l, y, 2) as usize;
            per_class[y].0 += hit as usize;
            per_class[y].1 += 1;
        }
        let present: Vec<f64> = per_class
            .iter()
            .filter(|(_, total)| *total > 0)
            .map(|&(hit, total)| hit as f64 / total as f64)
            .collect();
        Self {
            top1: top1 as f64 / n,
            top2: top2 as f64 / n,
            mean_class: present.iter().sum::<f64>() / present.len() as f64,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "top1" => Some(self.top1),
            "top2" => Some(self.top2),
            "mean_class" => Some(self.mean_class),
            _ => None,
        }
    }
}

/// Averages over the evaluation set at one quantization setting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointStats {
    pub qp: u32,
    pub bpp: f64,
    pub metrics: Metrics,
}

fn prepare(clips: &[LabeledClip], preprocessor: Option<&Preprocessor>) -> Result<Vec<VideoClip>, EvalError> {
    match preprocessor {
        None => Ok(clips.iter().map(|c| c.clip.clone()).collect()),
        Some(p) => Ok(clips.par_iter().map(|c| p.preprocess(&c.clip)).collect::<Result<Vec<_>, _>>()?),
    }
}

fn classify_all(analyzer: &Analyzer, clips: &[VideoClip]) -> Result<Vec<Vec<f32>>, EvalError> {
    Ok(clips.par_iter().map(|c| analyzer.classify(c)).collect::<Result<Vec<_>, _>>()?)
}

fn concat_symbols(parts: &[&Tensor]) -> Tensor {
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); NUM_CHANNELS];
    for s in parts {
        let n = s.shape()[1];
        for (c, row) in rows.iter_mut().enumerate() {
            row.extend_from_slice(&s.data()[c * n..(c + 1) * n]);
        }
    }
    let n = rows[0].len();
    Tensor::new(vec![NUM_CHANNELS, n], rows.concat()).expect("non-empty symbol set")
}

/// Virtual codec in round mode at every `f_q`, block settings from `base`.
/// The rate of each point comes
/// from an entropy model fitted to that point's own symbols, so both
/// pipelines are priced by the same adaptive procedure.
pub fn measure_virtual(
    clips: &[LabeledClip],
    preprocessor: Option<&Preprocessor>,
    analyzer: &Analyzer,
    base: &VirtualCodecConfig,
    f_qs: &[u32],
) -> Result<Vec<PointStats>, EvalError> {
    if clips.is_empty() {
        return Err(EvalError::Empty);
    }
    let inputs = prepare(clips, preprocessor)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let default_model = EntropyModel::default();
    let mut out = Vec::with_capacity(f_qs.len());
    for &f_q in f_qs {
        let cfg = VirtualCodecConfig {
            f_q: f_q as f32,
            quant_mode: QuantMode::Round,
            ..base.clone()
        };
        let encoded = inputs
            .par_iter()
            .map(|c| virtual_encode(c, &cfg, &default_model, 0))
            .collect::<Result<Vec<_>, _>>()?;
        let mut model = EntropyModel::default();
        let all = concat_symbols(&encoded.iter().map(|r| &r.symbols).collect::<Vec<_>>());
        model.fit(&all, EVAL_FIT_STEPS, EVAL_FIT_LR)?;
        let bits = encoded
            .par_iter()
            .map(|r| model.bits(&r.symbols))
            .collect::<Result<Vec<_>, _>>()?;
        let bpp = encoded
            .iter()
            .zip(&bits)
            .map(|(r, b)| b / r.recon.num_pixels() as f64)
            .sum::<f64>()
            / clips.len() as f64;
        let recon: Vec<VideoClip> = encoded.into_iter().map(|r| r.recon).collect();
        let logits = classify_all(analyzer, &recon)?;
        out.push(PointStats {
            qp: f_q,
            bpp,
            metrics: Metrics::from_logits(&logits, &labels),
        });
    }
    Ok(out)
}

/// Real codec through `harness` at every qp; `label` names the staged
/// inputs.
pub fn measure_real(
    harness: &Harness,
    codec: Codec,
    clips: &[LabeledClip],
    preprocessor: Option<&Preprocessor>,
    analyzer: &Analyzer,
    qps: &[u8],
    label: &str,
) -> Result<Vec<PointStats>, EvalError> {
    if clips.is_empty() {
        return Err(EvalError::Empty);
    }
    harness.check_tools(codec)?;
    let inputs = prepare(clips, preprocessor)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let paths = inputs
        .iter()
        .enumerate()
        .map(|(i, c)| harness.stage_clip(c, &format!("{label}_{i:05}")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(qps.len());
    for &qp in qps {
        let jobs = paths
            .iter()
            .map(|p| harness.job(p, codec, qp))
            .collect::<Result<Vec<_>, _>>()?;
        let results = harness
            .run_jobs(&jobs)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| crate::harness::HarnessError::Job {
                qp,
                source: Box::new(e),
            })?;
        let bpp = results.iter().map(|r| r.bpp).sum::<f64>() / results.len() as f64;
        let decoded: Vec<VideoClip> = results.into_iter().map(|r| r.decoded).collect();
        let logits = classify_all(analyzer, &decoded)?;
        out.push(PointStats {
            qp: qp as u32,
            bpp,
            metrics: Metrics::from_logits(&logits, &labels),
        });
    }
    if !harness.keep {
        for p in &paths {
            std::fs::remove_file(p).map_err(|e| EvalError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
        }
    }
    Ok(out)
}

/// One curve per metric. Rates that do not fall as qp rises are logged.
pub fn measure_curves(method: &str, codec: &str, stats: &[PointStats]) -> Result<Vec<RACurve>, EvalError> {
    let mut by_qp = stats.to_vec();
    by_qp.sort_by_key(|s| s.qp);
    if by_qp.windows(2).any(|w| !(w[1].bpp < w[0].bpp)) {
        log::warn!("{method}/{codec}: bpp is not strictly decreasing in qp");
    }
    Metrics::NAMES
        .iter()
        .map(|&m| {
            let points = stats
                .iter()
                .map(|s| RAPoint {
                    bpp: s.bpp,
                    value: s.metrics.get(m).expect("known metric"),
                    qp: s.qp,
                })
                .collect();
            RACurve::new(method, codec, m, points)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_from_logits() {
        let logits = vec![
            vec![3.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![3.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ];
        // labels 0, 1, 2, 2: hits on samples 0, 2, 3; sample 1 is second best
        let m = Metrics::from_logits(&logits, &[0, 1, 2, 2]);
        assert_eq!(m.top1, 0.75);
        assert_eq!(m.top2, 1.0);
        // classes 0, 1, 2 have accuracies 1, 0, 1
        assert!((m.mean_class - 2.0 / 3.0).abs() < 1e-15);
    }
}

//! Rate-accuracy curves, BD-Rate and report files.

mod bdrate;
mod measure;
mod report;

use thiserror::Error;

pub use bdrate::{bd_rate, monotone_points, Pchip};
pub use measure::{measure_curves, measure_real, measure_virtual, Metrics, PointStats, EVAL_FIT_LR, EVAL_FIT_STEPS};
pub use report::{read_ra_points, write_report, BdRow};

use crate::analyzer::AnalyzerError;
use crate::codec::CodecError;
use crate::harness::HarnessError;
use crate::preprocessor::PreprocessError;
use crate::video::VideoError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("curve {0}: needs at least 4 points")]
    TooFewPoints(String),
    #[error("curve {0}: bpp must be positive and finite")]
    BadRate(String),
    #[error("curve {0}: duplicate bpp values")]
    DuplicateRate(String),
    #[error("metric ranges do not overlap ([{lo}, {hi}])")]
    NoOverlap { lo: f64, hi: f64 },
    #[error("{0}")]
    Degenerate(String),
    #[error("{path}: line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty evaluation set")]
    Empty,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Video(#[from] VideoError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RAPoint {
    pub bpp: f64,
    pub value: f64,
    /// Quantization parameter (or virtual-codec factor) that produced it.
    pub qp: u32,
}

/// A rate-accuracy curve, sorted by bpp.
#[derive(Clone, Debug, PartialEq)]
pub struct RACurve {
    pub method: String,
    pub codec: String,
    pub metric: String,
    points: Vec<RAPoint>,
}

impl RACurve {
    /// Sorts by bpp; requires at least 4 points with distinct positive bpp.
    pub fn new(method: &str, codec: &str, metric: &str, mut points: Vec<RAPoint>) -> Result<Self, EvalError> {
        let name = format!("{method}/{codec}/{metric}");
        if points.len() < 4 {
            return Err(EvalError::TooFewPoints(name));
        }
        if points.iter().any(|p| !(p.bpp > 0.0) || !p.bpp.is_finite()) {
            return Err(EvalError::BadRate(name));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(EvalError::DuplicateRate(name));
        }
        Ok(Self {
            method: method.into(),
            codec: codec.into(),
            metric: metric.into(),
            points,
        })
    }

    pub fn points(&self) -> &[RAPoint] {
        &self.points
    }

    /// Same curve with every bpp multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut c = self.clone();
        c.points.iter_mut().for_each(|p| p.bpp *= s);
        c
    }

    /// Whether the metric rises with bpp at every step.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].value > w[0].value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_validation() {
        let p = |bpp, value| RAPoint { bpp, value, qp: 0 };
        let c = RACurve::new("m", "virtual", "top1", vec![p(0.4, 0.9), p(0.1, 0.5), p(0.2, 0.6), p(0.3, 0.8)]).unwrap();
        assert_eq!(c.points()[0].bpp, 0.1);
        assert!(c.is_monotone());
        assert!(RACurve::new("m", "c", "top1", vec![p(0.1, 0.5); 3]).is_err());
        assert!(RACurve::new("m", "c", "top1", vec![p(0.1, 0.5), p(0.1, 0.6), p(0.2, 0.7), p(0.3, 0.8)]).is_err());
        assert!(RACurve::new("m", "c", "top1", vec![p(0.0, 0.5), p(0.1, 0.6), p(0.2, 0.7), p(0.3, 0.8)]).is_err());
    }
}

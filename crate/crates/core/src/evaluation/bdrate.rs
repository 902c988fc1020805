//! Bjøntegaard delta rate with monotone piecewise-cubic Hermite
//! interpolation of log10(bpp) as a function of the metric.

use super::{EvalError, RACurve};

/// Monotone cubic Hermite interpolant (Fritsch-Carlson slopes).
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

fn three_point_end(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl Pchip {
    /// `x` strictly increasing, at least two knots.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Option<Self> {
        let n = x.len();
        if n < 2 || y.len() != n || x.windows(2).any(|w| !(w[1] > w[0])) {
            return None;
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = m[0];
            d[1] = m[0];
        } else {
            for k in 1..n - 1 {
                if m[k - 1] * m[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            d[0] = three_point_end(h[0], h[1], m[0], m[1]);
            d[n - 1] = three_point_end(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Some(Self { x, y, d })
    }

    fn segment(&self, v: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&k| k <= v) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    /// Cubic coefficients `[c0, c1, c2, c3]` of segment `k` in the local
    /// variable `s = v - x[k]`.
    fn coefficients(&self, k: usize) -> [f64; 4] {
        let h = self.x[k + 1] - self.x[k];
        let (y0, y1, d0, d1) = (self.y[k], self.y[k + 1], self.d[k], self.d[k + 1]);
        let m = (y1 - y0) / h;
        [y0, d0, (3.0 * m - 2.0 * d0 - d1) / h, (d0 + d1 - 2.0 * m) / (h * h)]
    }

    pub fn eval(&self, v: f64) -> f64 {
        let k = self.segment(v);
        let [c0, c1, c2, c3] = self.coefficients(k);
        let s = v - self.x[k];
        c0 + s * (c1 + s * (c2 + s * c3))
    }

    /// Exact integral over `[a, b]` (inside the knot range).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let prim = |c: [f64; 4], s: f64| s * (c[0] + s * (c[1] / 2.0 + s * (c[2] / 3.0 + s * c[3] / 4.0)));
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let lo = a.max(self.x[k]);
            let hi = b.min(self.x[k + 1]);
            if hi > lo {
                let c = self.coefficients(k);
                total += prim(c, hi - self.x[k]) - prim(c, lo - self.x[k]);
            }
        }
        total
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().expect("two knots"))
    }
}

/// Points of `curve` usable as an interpolation abscissa: sorted by bpp,
/// keeping only those whose metric strictly exceeds every kept point below
/// them. Dropped points are logged.
pub fn monotone_points(curve: &RACurve) -> Vec<(f64, f64)> {
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for p in curve.points() {
        if kept.last().is_some_and(|&(m, _)| p.value <= m) {
            log::warn!(
                "{}/{}/{}: dropping qp {} (bpp {}, {} {}) from interpolation: metric not increasing",
                curve.method,
                curve.codec,
                curve.metric,
                p.qp,
                p.bpp,
                curve.metric,
                p.value
            );
            continue;
        }
        kept.push((p.value, p.bpp.log10()));
    }
    kept
}

fn interpolant(curve: &RACurve) -> Result<Pchip, EvalError> {
    let pts = monotone_points(curve);
    if pts.len() < 2 {
        return Err(EvalError::Degenerate(format!(
            "{}: fewer than two points with increasing {}",
            curve.method, curve.metric
        )));
    }
    let (x, y) = pts.into_iter().unzip();
    Ok(Pchip::new(x, y).expect("strictly increasing metric"))
}

/// Average bitrate difference of `test` relative to `anchor` at equal
/// metric, in percent; negative values are savings.
pub fn bd_rate(anchor: &RACurve, test: &RACurve) -> Result<f64, EvalError> {
    let a = interpolant(anchor)?;
    let t = interpolant(test)?;
    let (a0, a1) = a.domain();
    let (t0, t1) = t.domain();
    let (lo, hi) = (a0.max(t0), a1.min(t1));
    if !(hi > lo) {
        return Err(EvalError::NoOverlap { lo, hi });
    }
    let diff = (t.integral(lo, hi) - a.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

use std::collections::VecDeque;

/// Aborts training when the moving average of the loss over `window` steps
/// exceeds `factor` times the average of the first `window` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceGuard {
    window: usize,
    factor: f64,
    initial: Option<f32>,
    recent: VecDeque<f32>,
}

impl DivergenceGuard {
    pub fn new(window: usize, factor: f32) -> Self {
        Self {
            window,
            factor: factor as f64,
            initial: None,
            recent: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn initial(&self) -> Option<f32> {
        self.initial
    }

    fn average(&self) -> f64 {
        self.recent.iter().map(|&v| v as f64).sum::<f64>() / self.recent.len() as f64
    }

    /// Records a loss. Returns `Err((average, threshold))` on divergence; a
    /// non-finite loss always diverges.
    pub fn observe(&mut self, loss: f32) -> Result<(), (f64, f64)> {
        if !loss.is_finite() {
            return Err((loss as f64, self.initial.map_or(f64::NAN, |i| i as f64 * self.factor)));
        }
        self.recent.push_back(loss);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        if self.recent.len() < self.window {
            return Ok(());
        }
        let avg = self.average();
        match self.initial {
            None => {
                self.initial = Some(avg as f32);
                Ok(())
            }
            Some(i) => {
                let threshold = i as f64 * self.factor;
                if avg > threshold {
                    Err((avg, threshold))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// `[has_initial, initial, recent...]` for checkpoints.
    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = vec![self.initial.is_some() as u8 as f32, self.initial.unwrap_or(0.0)];
        v.extend(&self.recent);
        v
    }

    pub fn from_vec(window: usize, factor: f32, v: &[f32]) -> Option<Self> {
        if v.len() < 2 || v.len() - 2 > window {
            return None;
        }
        let mut g = Self::new(window, factor);
        g.initial = (v[0] != 0.0).then_some(v[1]);
        g.recent.extend(&v[2..]);
        Some(g)
    }
}

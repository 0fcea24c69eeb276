//! Learning-rate schedule and quotient regression of validation score curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epochs that must complete before a score prediction is attempted.
pub const DEFAULT_WARMUP_EPOCHS: usize = 20;
pub const DEFAULT_PLATEAU_FRACTION: f64 = 0.95;

/// `base_lr * (1 - epoch / total_epochs)^power`.
pub fn poly_lr(base_lr: f64, epoch: usize, total_epochs: usize, power: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Argument("total_epochs must be positive".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Argument(format!("epoch {epoch} exceeds total_epochs {total_epochs}")));
    }
    Ok(base_lr * (1.0 - epoch as f64 / total_epochs as f64).powf(power))
}

/// `s(x) = (a x + b) / (x + c)` with `c > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuotientModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuotientModel {
    pub fn eval(&self, x: f64) -> f64 {
        (self.a * x + self.b) / (x + self.c)
    }

    pub fn plateau(&self) -> f64 {
        self.a
    }

    /// `s'(x) = (a c - b) / (x + c)^2`, so the sign is that of `a c - b`.
    pub fn is_increasing(&self) -> bool {
        self.c > 0.0 && self.a * self.c - self.b > 0.0
    }

    pub fn sum_squared_residuals(&self, xs: &[f64], ys: &[f64]) -> f64 {
        xs.iter().zip(ys).map(|(&x, &y)| (self.eval(x) - y).powi(2)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub max_score: f64,
    pub target_epoch: f64,
    pub etc_seconds: f64,
}

const C_MIN: f64 = 1e-2;
const C_MAX: f64 = 1e4;
const GRID: usize = 121;

/// Best `(a, b)` for a fixed `c`: the model is linear in them with features
/// `x / (x + c)` and `1 / (x + c)`. Returns the residual too.
fn solve_ab(xs: &[f64], ys: &[f64], c: f64) -> (f64, f64, f64) {
    let (mut suu, mut suv, mut svv, mut suy, mut svy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x / (x + c);
        let v = 1.0 / (x + c);
        suu += u * u;
        suv += u * v;
        svv += v * v;
        suy += u * y;
        svy += v * y;
    }
    let det = suu * svv - suv * suv;
    let (a, b) = if det.abs() > f64::EPSILON * suu * svv {
        ((suy * svv - svy * suv) / det, (svy * suu - suy * suv) / det)
    } else {
        (suy / suu, 0.0)
    };
    let model = QuotientModel { a, b, c };
    (a, b, model.sum_squared_residuals(xs, ys))
}

/// Least-squares fit of a [`QuotientModel`]. `c` is searched on a log grid
/// over `[1e-2, 1e4]` and refined by golden-section search; `(a, b)` are
/// solved exactly for each candidate `c`.
pub fn fit_quotient(epochs: &[f64], scores: &[f64]) -> Result<QuotientModel> {
    if epochs.len() != scores.len() {
        return Err(Error::Argument(format!("{} epochs but {} scores", epochs.len(), scores.len())));
    }
    if epochs.len() < 3 {
        return Err(Error::InsufficientData(format!("quotient fit needs at least 3 points, got {}", epochs.len())));
    }
    if epochs.iter().chain(scores).any(|v| !v.is_finite()) {
        return Err(Error::Argument("epochs and scores must be finite".into()));
    }
    if epochs.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::Argument("all epochs are identical".into()));
    }
    if epochs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("epochs must be strictly increasing".into()));
    }
    if epochs[0] < 0.0 {
        return Err(Error::Argument("epochs must be non-negative".into()));
    }
    if scores.iter().all(|&y| y == scores[0]) {
        return Ok(QuotientModel { a: scores[0], b: scores[0], c: 1.0 });
    }

    let cost = |t: f64| solve_ab(epochs, scores, t.exp()).2;
    let (lo, hi) = (C_MIN.ln(), C_MAX.ln());
    let step = (hi - lo) / (GRID - 1) as f64;
    let best = (0..GRID)
        .map(|i| (i, cost(lo + step * i as f64)))
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .map(|(i, _)| i)
        .expect("non-empty grid");

    // golden-section on log c within the bracketing grid cells
    let mut l = lo + step * best.saturating_sub(1) as f64;
    let mut r = lo + step * (best + 1).min(GRID - 1) as f64;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut m1 = r - g * (r - l);
    let mut m2 = l + g * (r - l);
    let (mut f1, mut f2) = (cost(m1), cost(m2));
    for _ in 0..200 {
        if r - l < 1e-13 {
            break;
        }
        if f1 <= f2 {
            r = m2;
            m2 = m1;
            f2 = f1;
            m1 = r - g * (r - l);
            f1 = cost(m1);
        } else {
            l = m1;
            m1 = m2;
            f1 = f2;
            m2 = l + g * (r - l);
            f2 = cost(m2);
        }
    }
    let c = ((l + r) / 2.0).exp();
    let (a, b, _) = solve_ab(epochs, scores, c);
    Ok(QuotientModel { a, b, c })
}

/// Epoch at which the model climbs `plateau_fraction` of the way from
/// `s(0)` to its plateau, and the remaining time at `mean_epoch_seconds`
/// per epoch. `None` when the model is not increasing.
pub fn predict(
    model: &QuotientModel,
    plateau_fraction: f64,
    current_epoch: f64,
    mean_epoch_seconds: f64,
) -> Result<Option<ScorePrediction>> {
    if !(plateau_fraction > 0.0 && plateau_fraction < 1.0) {
        return Err(Error::Argument(format!("plateau_fraction must be in (0, 1), got {plateau_fraction}")));
    }
    if !(mean_epoch_seconds > 0.0) {
        return Err(Error::Argument(format!("mean_epoch_seconds must be positive, got {mean_epoch_seconds}")));
    }
    if !model.is_increasing() {
        return Ok(None);
    }
    let target_epoch = model.c * plateau_fraction / (1.0 - plateau_fraction);
    Ok(Some(ScorePrediction {
        max_score: model.a,
        target_epoch,
        etc_seconds: (target_epoch - current_epoch).max(0.0) * mean_epoch_seconds,
    }))
}

/// Warm-up gated score forecasting over a growing score history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePredictor {
    pub warmup_epochs: usize,
    pub plateau_fraction: f64,
}

impl Default for ScorePredictor {
    fn default() -> Self {
        Self { warmup_epochs: DEFAULT_WARMUP_EPOCHS, plateau_fraction: DEFAULT_PLATEAU_FRACTION }
    }
}

impl ScorePredictor {
    /// `scores[i]` is the mean validation score after epoch `i + 1`.
    /// Returns `None` during warm-up or when no increasing model fits.
    pub fn estimate(&self, scores: &[f64], epoch_seconds: &[f64]) -> Option<(QuotientModel, ScorePrediction)> {
        if scores.len() < self.warmup_epochs.max(3) {
            return None;
        }
        let xs: Vec<f64> = (1..=scores.len()).map(|e| e as f64).collect();
        let model = match fit_quotient(&xs, scores) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("score prediction unavailable: {e}");
                return None;
            }
        };
        let mean = if epoch_seconds.is_empty() {
            f64::MIN_POSITIVE
        } else {
            (epoch_seconds.iter().sum::<f64>() / epoch_seconds.len() as f64).max(f64::MIN_POSITIVE)
        };
        let prediction = predict(&model, self.plateau_fraction, scores.len() as f64, mean).ok().flatten()?;
        Some((model, prediction))
    }
}

//! Evaluation metrics: mean average cross-entropy, accuracy, macro F1 and a
//! two-sided paired t-test.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Probabilities below this are clamped inside [`mace`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("no records to evaluate")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {n_labels} labels")]
    LabelOutOfRange { label: usize, n_labels: usize },
}

/// Predictions and gold labels for one thread of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreadRecord {
    pub probs: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
}

impl ThreadRecord {
    fn check(&self) -> Result<(), MetricError> {
        if self.probs.len() != self.truth.len() {
            return Err(MetricError::LengthMismatch(self.probs.len(), self.truth.len()));
        }
        if self.truth.is_empty() {
            return Err(MetricError::Empty);
        }
        for (p, &y) in self.probs.iter().zip(&self.truth) {
            if y >= p.len() {
                return Err(MetricError::LabelOutOfRange { label: y, n_labels: p.len() });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mace {
    pub value: f64,
    /// Number of true-label probabilities raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Mean over threads of the per-thread average negative log-likelihood of
/// the true labels. Zero for a perfect predictor.
pub fn mace(records: &[ThreadRecord]) -> Result<Mace, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut clamped = 0;
    let mut total = 0.0;
    for r in records {
        r.check()?;
        let mut nll = 0.0;
        for (p, &y) in r.probs.iter().zip(&r.truth) {
            let mut q = p[y];
            if q < PROB_FLOOR {
                q = PROB_FLOOR;
                clamped += 1;
            }
            nll -= libm::log(q);
        }
        total += nll / r.truth.len() as f64;
    }
    Ok(Mace {
        value: total / records.len() as f64,
        clamped,
    })
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Micro-averaged accuracy over all messages, as a percentage.
pub fn accuracy(records: &[ThreadRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mut right, mut total) = (0usize, 0usize);
    for r in records {
        r.check()?;
        for (p, &y) in r.probs.iter().zip(&r.truth) {
            right += usize::from(argmax(p) == y);
            total += 1;
        }
    }
    Ok(100.0 * right as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
}

/// Per-label F1 averaged over the labels that occur in `truth`, as a
/// percentage. Labels never seen in `truth` are left out of the mean.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    f1_score(pred, truth, F1Average::Macro)
}

pub fn f1_score(pred: &[usize], truth: &[usize], average: F1Average) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    if average == F1Average::Micro {
        let right = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
        return Ok(100.0 * right as f64 / truth.len() as f64);
    }
    let present: BTreeSet<usize> = truth.iter().copied().collect();
    let mut sum = 0.0;
    for &label in &present {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == label && t == label).count() as f64;
        let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == label && t != label).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != label && t == label).count() as f64;
        if tp > 0.0 {
            let precision = tp / (tp + fp);
            let recall = tp / (tp + fn_);
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(100.0 * sum / present.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    /// Differences had zero variance with a nonzero mean.
    pub degenerate_variance: bool,
}

/// Two-sided paired t-test on `a - b`. All-zero differences give `p = 1`;
/// constant nonzero differences give `p = 0` with the degenerate flag.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::Empty);
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                df,
                p_value: 1.0,
                degenerate_variance: false,
            }
        } else {
            TTest {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p_value: 0.0,
                degenerate_variance: true,
            }
        });
    }
    let t = mean / libm::sqrt(var / n as f64);
    Ok(TTest {
        t,
        df,
        p_value: student_t_two_sided(t, df as f64),
        degenerate_variance: false,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by Lentz's continued fraction, using the symmetry relation
/// where the fraction converges slowly.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log(1.0 - x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if libm::fabs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if libm::fabs(del - 1.0) < EPS {
            break;
        }
    }
    h
}

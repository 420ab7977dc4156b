//! Small-sample statistics for the experiment harness: Student-t
//! confidence intervals over trial means and Spearman rank correlation
//! for monotone-trend checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Mean with a symmetric confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (Bessel-corrected).
pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Student-t confidence interval for the mean of `xs` at the given level
/// (e.g. 0.95). A single observation yields a zero-width interval.
pub fn t_confidence_interval(xs: &[f64], confidence: f64) -> Result<MeanCi> {
    if xs.is_empty() {
        return Err(Error::Config("confidence interval of empty sample".into()));
    }
    if !(0.0..1.0).contains(&confidence) {
        return Err(Error::Config(format!(
            "confidence level {confidence} outside (0, 1)"
        )));
    }
    let n = xs.len();
    let m = mean(xs);
    if n == 1 {
        return Ok(MeanCi {
            mean: m,
            half_width: 0.0,
            lo: m,
            hi: m,
            count: 1,
        });
    }
    let dof = (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Config(format!("t-distribution: {e}")))?
        .inverse_cdf(0.5 + confidence / 2.0);
    let half_width = t * sample_std(xs) / (n as f64).sqrt();
    Ok(MeanCi {
        mean: m,
        half_width,
        lo: m - half_width,
        hi: m + half_width,
        count: n,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            actual: y.len(),
            context: "spearman inputs",
        });
    }
    if x.len() < 2 {
        return Err(Error::Config("spearman needs at least two points".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

/// Ranks 1..n with ties assigned the average of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-NaN ranks"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j share the value; average rank is 1-based.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config(
            "correlation undefined for a constant sequence".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

//! Percentile bootstrap intervals, the paired Wilcoxon signed-rank test and
//! Holm step-down correction.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::evaluation::MetricTable;
use crate::models::ModelVariant;
use crate::sampling::SplitMix64;

/// Remaining pairs up to which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 25;

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval of the resampled mean.
pub fn bootstrap_ci(values: &[f64], n_resamples: usize, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::validation("bootstrap of an empty sample"));
    }
    if n_resamples == 0 || !(0.0..1.0).contains(&alpha) {
        return Err(Error::validation("need n_resamples >= 1 and alpha in [0, 1)"));
    }
    let n = values.len();
    let mut rng = SplitMix64::new(seed);
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| values[rng.next_range(0, n as u64 - 1) as usize]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile(&means, alpha / 2.0), quantile(&means, 1.0 - alpha / 2.0));
    // keep degenerate samples exact despite summation rounding
    let (min, max) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    Ok((lo.clamp(min, max), hi.clamp(min, max)))
}

/// Outcome of a signed-rank test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Two-sided p-value.
    pub p: f64,
    /// Sum of the ranks of positive differences.
    pub statistic: f64,
    /// Pairs left after dropping zero differences.
    pub n_used: usize,
    pub exact: bool,
}

/// Midranks (1-based) of `v`.
fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired signed-rank test on `a - b` with zero differences
/// dropped. Exact (ties handled through doubled midranks) up to
/// [`EXACT_MAX_N`] pairs, tie- and continuity-corrected normal
/// approximation beyond.
pub fn wilcoxon_paired(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::validation(format!("paired samples differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::validation("paired test needs at least one pair"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p: 1.0,
            statistic: 0.0,
            n_used: 0,
            exact: true,
        });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
    if n <= EXACT_MAX_N {
        // doubled midranks are integers
        let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = r2.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &r2 {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let t = (2.0 * w_plus).round() as usize;
        let le: f64 = counts[..=t].iter().sum::<f64>() / all;
        let ge: f64 = counts[t..].iter().sum::<f64>() / all;
        return Ok(WilcoxonResult {
            p: (2.0 * le.min(ge)).min(1.0),
            statistic: w_plus,
            n_used: n,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let j = sorted[i..].iter().take_while(|&&x| x == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(WilcoxonResult {
        p: erfc(z / std::f64::consts::SQRT_2).min(1.0),
        statistic: w_plus,
        n_used: n,
        exact: false,
    })
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_adjust(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::validation(format!("p-value {bad} outside [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    Ok(out)
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub condition_type: String,
    pub condition_value: f64,
    pub raw_p: f64,
    pub holm_adjusted_p: f64,
    pub n_pairs_used: usize,
    pub statistic: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub significant: bool,
}

/// What is compared per patient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Dice,
    /// 1 for a Dice of exactly zero, else 0.
    Failure,
}

fn paired_values(
    table: &MetricTable,
    model_a: ModelVariant,
    model_b: ModelVariant,
    condition_type: &str,
    value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = table.dice_by_patient(model_a, condition_type, value);
    let b = table.dice_by_patient(model_b, condition_type, value);
    if a.is_empty() || b.is_empty() {
        let missing = if a.is_empty() { model_a } else { model_b };
        return Err(Error::validation(format!("{missing} has no records at {condition_type}={value}")));
    }
    let only_a: Vec<usize> = a.keys().filter(|k| !b.contains_key(k)).copied().collect();
    let only_b: Vec<usize> = b.keys().filter(|k| !a.contains_key(k)).copied().collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::validation(format!(
            "patient sets differ at {condition_type}={value}: missing for {model_b}: {only_a:?}; missing for {model_a}: {only_b:?}"
        )));
    }
    Ok((a.into_values().collect(), b.into_values().collect()))
}

/// Paired comparison of two models at every condition of a family, with
/// Holm correction across the family.
pub fn compare_models(
    table: &MetricTable,
    model_a: ModelVariant,
    model_b: ModelVariant,
    condition_type: &str,
    family: &[f64],
    outcome: Outcome,
) -> Result<Vec<ComparisonResult>> {
    let mut out = Vec::with_capacity(family.len());
    for &value in family {
        let (mut a, mut b) = paired_values(table, model_a, model_b, condition_type, value)?;
        if outcome == Outcome::Failure {
            for v in a.iter_mut().chain(b.iter_mut()) {
                *v = (*v == 0.0) as u8 as f64;
            }
        }
        let w = wilcoxon_paired(&a, &b)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        out.push(ComparisonResult {
            condition_type: condition_type.to_string(),
            condition_value: value,
            raw_p: w.p,
            holm_adjusted_p: 0.0,
            n_pairs_used: w.n_used,
            statistic: w.statistic,
            mean_a: mean(&a),
            mean_b: mean(&b),
            significant: false,
        });
    }
    let raw: Vec<f64> = out.iter().map(|r| r.raw_p).collect();
    for (r, adj) in out.iter_mut().zip(holm_adjust(&raw)?) {
        r.holm_adjusted_p = adj;
        r.significant = adj < SIGNIFICANCE_LEVEL;
    }
    Ok(out)
}

/// Acceleration factors up to and including `max_r` present for both
/// models.
pub fn acceleration_family(table: &MetricTable, a: ModelVariant, b: ModelVariant, max_r: f64) -> Vec<f64> {
    let kind = "acceleration";
    let other = table.conditions(b, kind);
    table
        .conditions(a, kind)
        .into_iter()
        .filter(|v| *v <= max_r && other.contains(v))
        .collect()
}

pub fn comparisons_to_csv(results: &[ComparisonResult]) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    wr.write_record(["condition", "p_raw", "p_holm", "significant"]).map_err(fmt)?;
    for r in results {
        wr.write_record([
            r.condition_value.to_string(),
            r.raw_p.to_string(),
            r.holm_adjusted_p.to_string(),
            r.significant.to_string(),
        ])
        .map_err(fmt)?;
    }
    String::from_utf8(wr.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn holm_worked_example() {
        let adj = holm_adjust(&[0.01, 0.04, 0.03]).unwrap();
        for (a, e) in adj.iter().zip([0.03, 0.06, 0.06]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(holm_adjust(&[1.5]).is_err());
    }

    #[test]
    fn five_positive_pairs() {
        let r = wilcoxon_paired(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert!((r.p - 0.0625).abs() < 1e-15);
        assert_eq!(r.statistic, 15.0);
    }

    #[test]
    fn large_n_uses_normal_approximation() {
        let a: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 + 0.05).collect();
        let b = vec![0.0; 40];
        let r = wilcoxon_paired(&a, &b).unwrap();
        assert!(!r.exact && r.p < 1e-6);
        // symmetric sample around zero
        let c: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 + i as f64 } else { -(i as f64) }).collect();
        let q = wilcoxon_paired(&c, &b).unwrap();
        assert!(q.p > 0.5);
    }

    #[test]
    fn empty_bootstrap_is_rejected() {
        assert!(bootstrap_ci(&[], 10, 0.05, 0).is_err());
    }
}

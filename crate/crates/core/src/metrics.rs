//! Agreement between model marks and gold marks: confusion matrix,
//! accuracy, macro-F1 and quadratic weighted kappa.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Mark, ProviderId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no labelled pairs")]
    EmptyPairSet,
    #[error("kappa needs at least two classes")]
    SingleClassRange,
    #[error("mark {value} outside 0..{num_classes}")]
    ValueOutOfRange { value: Mark, num_classes: usize },
    #[error("no completed records with a gold mark")]
    NoEvaluableRecords,
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricsError::EmptyPairSet => "empty_pair_set",
            MetricsError::SingleClassRange => "single_class_range",
            MetricsError::ValueOutOfRange { .. } => "value_out_of_range",
            MetricsError::NoEvaluableRecords => "no_evaluable_records",
        }
    }
}

/// `(gold, predicted)` pairs over classes `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPairSet {
    pairs: Vec<(Mark, Mark)>,
    num_classes: usize,
}

impl LabeledPairSet {
    pub fn new(pairs: Vec<(Mark, Mark)>, num_classes: usize) -> Result<Self, MetricsError> {
        for &(g, p) in &pairs {
            for value in [g, p] {
                if value as usize >= num_classes {
                    return Err(MetricsError::ValueOutOfRange { value, num_classes });
                }
            }
        }
        Ok(Self { pairs, num_classes })
    }

    /// Convenience for marks in `[0, max_mark]`.
    pub fn from_lists(gold: &[Mark], predicted: &[Mark], max_mark: Mark) -> Result<Self, MetricsError> {
        assert_eq!(gold.len(), predicted.len(), "gold and predicted lengths differ");
        Self::new(
            gold.iter().copied().zip(predicted.iter().copied()).collect(),
            max_mark as usize + 1,
        )
    }

    pub fn pairs(&self) -> &[(Mark, Mark)] {
        &self.pairs
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `O[i][j]` = number of pairs with gold `i` and prediction `j`.
    pub fn confusion(&self) -> Vec<Vec<u64>> {
        let mut o = vec![vec![0u64; self.num_classes]; self.num_classes];
        for &(g, p) in &self.pairs {
            o[g as usize][p as usize] += 1;
        }
        o
    }

    fn non_empty(&self) -> Result<(), MetricsError> {
        if self.pairs.is_empty() {
            Err(MetricsError::EmptyPairSet)
        } else {
            Ok(())
        }
    }
}

pub fn accuracy(p: &LabeledPairSet) -> Result<f64, MetricsError> {
    p.non_empty()?;
    let hits = p.pairs.iter().filter(|(g, q)| g == q).count();
    Ok(hits as f64 / p.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes that occur in gold or
/// predicted marks. Any 0/0 ratio counts as 0.
///
/// Per-class F1 is `2TP / (row + col)`; the fractions are summed exactly so
/// that only the final division rounds (falls back to floats if the common
/// denominator would overflow).
pub fn macro_f1(p: &LabeledPairSet) -> Result<f64, MetricsError> {
    p.non_empty()?;
    let o = p.confusion();
    let n = p.num_classes;
    let mut fractions = Vec::new();
    for c in 0..n {
        let row: u64 = o[c].iter().sum();
        let col: u64 = (0..n).map(|i| o[i][c]).sum();
        if row == 0 && col == 0 {
            continue;
        }
        fractions.push((2 * o[c][c] as u128, (row + col) as u128));
    }
    let classes = fractions.len() as u128;
    let exact = fractions.iter().try_fold((0u128, 1u128), |(num, den), &(a, b)| {
        let g = gcd(den, b);
        let lcm = (den / g).checked_mul(b)?;
        let num = num.checked_mul(lcm / den)?.checked_add(a.checked_mul(lcm / b)?)?;
        let r = gcd(num, lcm).max(1);
        Some((num / r, lcm / r))
    });
    Ok(match exact.and_then(|(num, den)| Some((num, den.checked_mul(classes)?))) {
        Some((num, den)) => num as f64 / den as f64,
        None => fractions.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / classes as f64,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Cohen's kappa with quadratic weights `(i-j)^2/(N-1)^2`.
///
/// When the expected disagreement is zero (both raters constant on the same
/// class) the result is 1.0 if observed disagreement is also zero, else 0.0.
pub fn qwk(p: &LabeledPairSet) -> Result<f64, MetricsError> {
    p.non_empty()?;
    let n = p.num_classes;
    if n < 2 {
        return Err(MetricsError::SingleClassRange);
    }
    // Both sums are kept as integers scaled by n_pairs * (N-1)^2, so the
    // only rounding happens in the final division.
    let o = p.confusion();
    let total = p.len() as u128;
    let gold: Vec<u128> = o.iter().map(|row| row.iter().sum::<u64>() as u128).collect();
    let pred: Vec<u128> = (0..n).map(|j| (0..n).map(|i| o[i][j]).sum::<u64>() as u128).collect();
    let mut observed: u128 = 0;
    let mut expected: u128 = 0;
    for i in 0..n {
        for j in 0..n {
            let w = (i.abs_diff(j) as u128).pow(2);
            observed += w * o[i][j] as u128 * total;
            expected += w * gold[i] * pred[j];
        }
    }
    if expected == 0 {
        return Ok(if observed == 0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - observed as f64 / expected as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provider_id: ProviderId,
    pub n_pairs: usize,
    pub n_excluded: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub qwk: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn compute(
        provider_id: ProviderId,
        pairs: &LabeledPairSet,
        n_excluded: usize,
    ) -> Result<Self, MetricsError> {
        if pairs.is_empty() {
            return Err(MetricsError::NoEvaluableRecords);
        }
        let qwk = match qwk(pairs) {
            Ok(k) => k,
            // Zero-mark question: every pair is (0, 0), the degenerate
            // convention gives perfect agreement.
            Err(MetricsError::SingleClassRange) => 1.0,
            Err(e) => return Err(e),
        };
        Ok(Self {
            provider_id,
            n_pairs: pairs.len(),
            n_excluded,
            accuracy: accuracy(pairs)?,
            macro_f1: macro_f1(pairs)?,
            qwk,
            confusion: pairs.confusion(),
        })
    }
}

pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("provider_id,n_pairs,n_excluded,accuracy,macro_f1,qwk\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(r.provider_id.as_str()),
            r.n_pairs,
            r.n_excluded,
            r.accuracy,
            r.macro_f1,
            r.qwk
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(gold: &[Mark], pred: &[Mark], max: Mark) -> LabeledPairSet {
        LabeledPairSet::from_lists(gold, pred, max).unwrap()
    }

    #[test]
    fn accuracy_fixtures() {
        assert_eq!(accuracy(&set(&[1, 2], &[1, 2], 2)).unwrap(), 1.0);
        assert_eq!(accuracy(&set(&[0, 1], &[1, 0], 2)).unwrap(), 0.0);
        assert_eq!(accuracy(&set(&[0, 1, 2, 1], &[0, 2, 2, 1], 2)).unwrap(), 0.75);
    }

    #[test]
    fn macro_f1_fixtures() {
        assert_eq!(macro_f1(&set(&[0, 1, 2], &[0, 1, 2], 2)).unwrap(), 1.0);
        // O = [[1,1,0],[0,1,0],[0,0,1]]: F1 = 2/3, 2/3, 1
        let f = macro_f1(&set(&[0, 0, 1, 2], &[0, 1, 1, 2], 2)).unwrap();
        assert_eq!(f, 7.0 / 9.0);
        // class 2 never appears and is excluded
        assert_eq!(macro_f1(&set(&[0, 0], &[1, 1], 2)).unwrap(), 0.0);
    }

    #[test]
    fn qwk_fixtures() {
        assert_eq!(qwk(&set(&[0, 1, 2], &[0, 1, 2], 2)).unwrap(), 1.0);
        assert!((qwk(&set(&[0, 1, 2], &[2, 1, 0], 2)).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(qwk(&set(&[0, 1], &[0, 0], 1)).unwrap(), 0.0);
        // both raters constant on the same class
        assert_eq!(qwk(&set(&[1, 1], &[1, 1], 2)).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let empty = LabeledPairSet::new(vec![], 3).unwrap();
        assert_eq!(accuracy(&empty), Err(MetricsError::EmptyPairSet));
        assert_eq!(macro_f1(&empty), Err(MetricsError::EmptyPairSet));
        assert_eq!(qwk(&empty), Err(MetricsError::EmptyPairSet));
        assert_eq!(
            qwk(&LabeledPairSet::new(vec![(0, 0)], 1).unwrap()),
            Err(MetricsError::SingleClassRange)
        );
        assert!(matches!(
            LabeledPairSet::new(vec![(0, 3)], 3),
            Err(MetricsError::ValueOutOfRange { value: 3, .. })
        ));
    }

    #[test]
    fn report_invariants() {
        let p = set(&[0, 0, 1, 2], &[0, 1, 1, 2], 2);
        let r = MetricsReport::compute("m".into(), &p, 1).unwrap();
        let total: u64 = r.confusion.iter().flatten().sum();
        assert_eq!(total as usize, r.n_pairs);
        let trace: u64 = (0..3).map(|i| r.confusion[i][i]).sum();
        assert_eq!(r.accuracy, trace as f64 / r.n_pairs as f64);
        assert!((r.macro_f1 - 7.0 / 9.0).abs() < 1e-12);
        let csv = reports_to_csv(&[r.clone()]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("provider_id,n_pairs,n_excluded,accuracy,macro_f1,qwk"));
        assert_eq!(lines.next(), Some(format!("m,4,1,0.75,{},{}", r.macro_f1, r.qwk).as_str()));
        assert_eq!(lines.next(), None);
    }
}

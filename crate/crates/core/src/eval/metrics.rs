//! Detection metrics: equal error rate and minimum detection cost.
//!
//! Trials are accepted when `score ≥ threshold`. Operating points are taken
//! at every distinct score, from "reject all" down to "accept all"; tied
//! scores always move together, so no tie order can flatter the result.

use serde::Serialize;

use crate::data::TrialRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    /// Accept scores at or above this; `+∞` rejects everything.
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl CostModel {
    pub fn new(p_target: f64) -> Self {
        CostModel {
            p_target,
            ..CostModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!("p_target must lie in (0, 1), got {}", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.c_miss.is_finite() && self.c_fa.is_finite()) {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        Ok(())
    }

    /// Cost of a point divided by the cost of the best trivial system.
    pub fn normalized_cost(&self, p: &OperatingPoint) -> f64 {
        let miss = self.c_miss * self.p_target;
        let fa = self.c_fa * (1.0 - self.p_target);
        (miss * p.p_miss + fa * p.p_fa) / miss.min(fa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetMetrics {
    pub eer: f64,
    pub min_dcf: f64,
    /// Threshold at which the minimum cost is reached.
    pub min_dcf_threshold: f64,
    pub points: Vec<OperatingPoint>,
}

/// `(score, is_target)` pairs plus target and nontarget counts.
type SplitScores = (Vec<(f64, bool)>, usize, usize);

fn split_scores(trials: &[TrialRecord]) -> Result<SplitScores> {
    let mut scored = Vec::with_capacity(trials.len());
    for t in trials {
        let s = t.score.ok_or_else(|| {
            Error::Metric(format!("trial {} {} is unscored", t.enroll_id, t.test_id))
        })?;
        if !s.is_finite() {
            return Err(Error::Metric(format!(
                "trial {} {} has non-finite score",
                t.enroll_id, t.test_id
            )));
        }
        scored.push((s, t.target));
    }
    let n_tar = scored.iter().filter(|(_, t)| *t).count();
    let n_non = scored.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::Metric(format!(
            "need both target and nontarget trials, got {n_tar} and {n_non}"
        )));
    }
    Ok((scored, n_tar, n_non))
}

/// Operating points ordered from "reject all" to "accept all".
pub fn operating_points(trials: &[TrialRecord]) -> Result<Vec<OperatingPoint>> {
    let (mut scored, n_tar, n_non) = split_scores(trials)?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::with_capacity(scored.len() + 1);
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    let (mut hits, mut false_alarms) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                hits += 1;
            } else {
                false_alarms += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold,
            p_miss: (n_tar - hits) as f64 / n_tar as f64,
            p_fa: false_alarms as f64 / n_non as f64,
        });
    }
    Ok(points)
}

/// Crossing of the miss and false-alarm curves, interpolated linearly
/// between the two operating points that bracket it.
pub fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    let k = points
        .iter()
        .position(|p| p.p_miss <= p.p_fa)
        .expect("accept-all point has p_miss = 0");
    if k == 0 {
        return points[0].p_fa;
    }
    let (a, b) = (points[k - 1], points[k]);
    let d0 = a.p_miss - a.p_fa;
    let d1 = b.p_miss - b.p_fa;
    let alpha = d0 / (d0 - d1);
    a.p_fa + alpha * (b.p_fa - a.p_fa)
}

pub fn compute_eer(trials: &[TrialRecord]) -> Result<f64> {
    Ok(eer_from_points(&operating_points(trials)?))
}

pub fn compute_min_dcf(trials: &[TrialRecord], costs: &CostModel) -> Result<f64> {
    Ok(compute_metrics(trials, costs)?.min_dcf)
}

pub fn compute_metrics(trials: &[TrialRecord], costs: &CostModel) -> Result<DetMetrics> {
    costs.validate()?;
    let points = operating_points(trials)?;
    let (min_dcf, min_dcf_threshold) = points
        .iter()
        .map(|p| (costs.normalized_cost(p), p.threshold))
        .fold((f64::INFINITY, f64::INFINITY), |best, c| if c.0 < best.0 { c } else { best });
    Ok(DetMetrics {
        eer: eer_from_points(&points),
        min_dcf,
        min_dcf_threshold,
        points,
    })
}

/// Operating points as `threshold,p_miss,p_fa` CSV.
pub fn points_csv(points: &[OperatingPoint]) -> String {
    let mut s = String::from("threshold,p_miss,p_fa\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.p_miss, p.p_fa));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trials(targets: &[f64], nontargets: &[f64]) -> Vec<TrialRecord> {
        let mut out = Vec::new();
        for (i, &s) in targets.iter().enumerate() {
            out.push(TrialRecord::new(format!("t{i}"), "x", true).scored(s));
        }
        for (i, &s) in nontargets.iter().enumerate() {
            out.push(TrialRecord::new(format!("n{i}"), "x", false).scored(s));
        }
        out
    }

    /// Sweeps midpoints between distinct scores and finds the crossing by
    /// direct search.
    fn brute_force_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
        let mut all: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
        all.sort_by(|a, b| b.total_cmp(a));
        all.dedup();
        let mut thresholds = vec![all[0] + 1.0];
        thresholds.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        thresholds.push(all[all.len() - 1] - 1.0);
        let rates: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&th| {
                let miss = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
                let fa = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nontargets.len() as f64;
                (miss, fa)
            })
            .collect();
        for w in rates.windows(2) {
            let ((m0, f0), (m1, f1)) = (w[0], w[1]);
            if m0 > f0 && m1 <= f1 {
                let t = (m0 - f0) / ((m0 - f0) - (m1 - f1));
                return f0 + t * (f1 - f0);
            }
        }
        unreachable!("curves always cross")
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&trials(&[3.0, 2.0], &[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(compute_eer(&trials(&[0.0, 1.0], &[2.0, 3.0])).unwrap(), 1.0);
        let eer = compute_eer(&trials(&[0.9, 0.8, 0.7], &[0.75, 0.6, 0.1])).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn min_dcf_examples() {
        let c = CostModel::default();
        assert_eq!(compute_min_dcf(&trials(&[3.0, 2.0], &[1.0, 0.0]), &c).unwrap(), 0.0);
        assert_eq!(compute_min_dcf(&trials(&[0.5; 3], &[0.5; 4]), &c).unwrap(), 1.0);
        assert_eq!(compute_min_dcf(&trials(&[0.9], &[0.95, 0.1]), &c).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(compute_eer(&trials(&[1.0], &[])), Err(Error::Metric(_))));
        assert!(matches!(compute_eer(&trials(&[], &[1.0])), Err(Error::Metric(_))));
        let unscored = vec![TrialRecord::new("a", "b", true), TrialRecord::new("a", "c", false)];
        assert!(compute_eer(&unscored).is_err());
    }

    #[test]
    fn costs_are_checked() {
        let t = trials(&[1.0], &[0.0]);
        assert!(compute_min_dcf(&t, &CostModel::new(0.0)).is_err());
        assert!(compute_min_dcf(&t, &CostModel::new(1.5)).is_err());
    }

    fn monotone(kind: u8, a: f64, b: f64, s: f64) -> f64 {
        match kind % 4 {
            0 => a * s + b,
            1 => (s / (4.0 * a)).exp(),
            2 => s * s * s + a * s,
            _ => (s / (10.0 + 10.0 * a)).tanh(),
        }
    }

    fn int_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec((-20i32..=20).prop_map(f64::from), 1..max_len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn metrics_invariant_under_monotone_maps(
            tar in int_scores(25),
            non in int_scores(25),
            kind in 0u8..4,
            a in 0.1f64..3.0,
            b in -5.0f64..5.0,
            p_target in 0.001f64..0.5,
        ) {
            let c = CostModel::new(p_target);
            let base = compute_metrics(&trials(&tar, &non), &c).unwrap();
            let f = |v: &Vec<f64>| v.iter().map(|&s| monotone(kind, a, b, s)).collect::<Vec<_>>();
            let mapped = compute_metrics(&trials(&f(&tar), &f(&non)), &c).unwrap();
            prop_assert!((base.eer - mapped.eer).abs() < 1e-12);
            prop_assert!((base.min_dcf - mapped.min_dcf).abs() < 1e-12);
        }

        #[test]
        fn eer_matches_brute_force(tar in int_scores(30), non in int_scores(30)) {
            let eer = compute_eer(&trials(&tar, &non)).unwrap();
            prop_assert!((eer - brute_force_eer(&tar, &non)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&eer));
        }

        #[test]
        fn min_dcf_bounds(tar in int_scores(30), non in int_scores(30), p_target in 0.001f64..0.999) {
            let m = compute_min_dcf(&trials(&tar, &non), &CostModel::new(p_target)).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            let separable = tar.iter().cloned().fold(f64::INFINITY, f64::min)
                > non.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(m == 0.0, separable);
        }
    }
}

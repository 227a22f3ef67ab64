//! Confidence thresholding: pick the smallest confidence cut ĉ whose retained
//! training subset reaches a target accuracy ε, then accept a prediction at
//! inference only when its confidence is ≥ ĉ.
//!
//! Acceptance uses ≥ so the least-confident retained calibration stone is
//! itself retained, which makes the construction guarantee exact. Ties at the
//! boundary are retained together: candidate cuts are evaluated over the full
//! set {confidence ≥ ĉ}, never through the middle of a tie group.

use crate::error::{Error, Result};
use crate::types::{CalibrationMode, CalibrationProfile, Prediction};
use std::path::Path;

/// A prediction joined with its correctness against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub prediction: Prediction,
    pub correct: bool,
}

impl ScoredPrediction {
    pub fn from_truth(prediction: Prediction, true_label: usize) -> Self {
        let correct = prediction.label() == true_label;
        ScoredPrediction { prediction, correct }
    }

    pub fn confidence(&self) -> f64 {
        self.prediction.confidence()
    }
}

/// Selects the confidence threshold for target accuracy `epsilon`.
///
/// Sorts ascending by confidence (stable) and scans removal counts k = 0, 1,
/// …; k = 0 keeps everything at ĉ = 0, otherwise ĉ is the smallest retained
/// confidence. Returns `CalibrationInfeasible` when no retained subset — down
/// to the single most-confident item — reaches ε.
pub fn select_threshold(scored: &[ScoredPrediction], epsilon: f64) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::InvalidInput("cannot calibrate on an empty set".into()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a]
            .confidence()
            .partial_cmp(&scored[b].confidence())
            .expect("finite confidences")
    });
    let conf: Vec<f64> = order.iter().map(|&i| scored[i].confidence()).collect();
    let n = scored.len();
    let mut suffix_correct = vec![0usize; n + 1];
    for k in (0..n).rev() {
        suffix_correct[k] = suffix_correct[k + 1] + usize::from(scored[order[k]].correct);
    }

    for k in 0..n {
        if k > 0 && conf[k] == conf[k - 1] {
            // Same threshold as the start of this tie group; already tested.
            continue;
        }
        let retained = n - k;
        let accuracy = suffix_correct[k] as f64 / retained as f64;
        if accuracy >= epsilon {
            return Ok(if k == 0 { 0.0 } else { conf[k] });
        }
    }
    Err(Error::CalibrationInfeasible(format!(
        "no retained subset reaches accuracy {epsilon}"
    )))
}

/// Splits predictions into (accepted, abstained) index lists; accepted means
/// confidence ≥ threshold. A threshold of 0 accepts everything.
pub fn apply_threshold(preds: &[Prediction], threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let mut accepted = Vec::new();
    let mut abstained = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        if p.confidence() >= threshold {
            accepted.push(i);
        } else {
            abstained.push(i);
        }
    }
    (accepted, abstained)
}

/// Builds the operating profile for a mode from training-set predictions:
/// `None` accepts everything; `Mode1`/`Mode2` run threshold selection at
/// their target accuracies.
pub fn make_profile(mode: CalibrationMode, scored: &[ScoredPrediction]) -> Result<CalibrationProfile> {
    let profile = match mode.epsilon() {
        None => CalibrationProfile { mode, epsilon: None, threshold: 0.0 },
        Some(eps) => CalibrationProfile {
            mode,
            epsilon: Some(eps),
            threshold: select_threshold(scored, eps)?,
        },
    };
    profile.validate()?;
    Ok(profile)
}

pub fn save_profile(profile: &CalibrationProfile, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(profile)
        .map_err(|e| Error::InvalidInput(format!("profile serialization failed: {e}")))?;
    std::fs::write(path.as_ref(), json)?;
    Ok(())
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<CalibrationProfile> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let profile: CalibrationProfile = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("profile parse failed: {e}")))?;
    profile.validate()?;
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Task;
    use rand::Rng;

    /// Builds a 2-class scored prediction with the requested confidence.
    pub(crate) fn scored(confidence: f64, correct: bool) -> ScoredPrediction {
        let probs = vec![confidence, 1.0 - confidence];
        let p = Prediction::new(probs, Task::Td).unwrap();
        let true_label = if correct { 0 } else { 1 };
        ScoredPrediction::from_truth(p, true_label)
    }

    /// Exhaustive reference: scan all removal counts, retained set taken as
    /// {confidence ≥ candidate threshold}.
    pub(crate) fn oracle_select(scored_list: &[ScoredPrediction], eps: f64) -> Option<f64> {
        let mut conf_sorted: Vec<f64> = scored_list.iter().map(|s| s.confidence()).collect();
        conf_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for k in 0..scored_list.len() {
            let threshold = if k == 0 { 0.0 } else { conf_sorted[k] };
            let retained: Vec<&ScoredPrediction> = scored_list
                .iter()
                .filter(|s| s.confidence() >= threshold)
                .collect();
            if retained.is_empty() {
                continue;
            }
            let acc = retained.iter().filter(|s| s.correct).count() as f64 / retained.len() as f64;
            if acc >= eps {
                return Some(threshold);
            }
        }
        None
    }

    #[test]
    fn worked_example() {
        // Confidences [0.6,0.7,0.8,0.9,0.95], lowest one wrong, ε = 0.95:
        // full set is 0.8 < ε, dropping the lowest gives 4/4, ĉ = 0.7.
        let list = vec![
            scored(0.6, false),
            scored(0.7, true),
            scored(0.8, true),
            scored(0.9, true),
            scored(0.95, true),
        ];
        let c_hat = select_threshold(&list, 0.95).unwrap();
        assert_eq!(c_hat, 0.7);
        let preds: Vec<Prediction> = list.iter().map(|s| s.prediction.clone()).collect();
        let (accepted, abstained) = apply_threshold(&preds, c_hat);
        assert_eq!(accepted.len(), 4);
        assert_eq!(abstained, vec![0]);
    }

    #[test]
    fn all_correct_accepts_everything() {
        let list: Vec<ScoredPrediction> =
            (0..5).map(|i| scored(0.5 + 0.08 * i as f64, true)).collect();
        assert_eq!(select_threshold(&list, 1.0).unwrap(), 0.0);
        assert_eq!(select_threshold(&list, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn all_wrong_is_infeasible() {
        let list: Vec<ScoredPrediction> =
            (0..4).map(|i| scored(0.6 + 0.1 * i as f64, false)).collect();
        assert!(matches!(
            select_threshold(&list, 0.9),
            Err(Error::CalibrationInfeasible(_))
        ));
    }

    #[test]
    fn threshold_zero_accepts_all_and_high_threshold_abstains_all() {
        let preds: Vec<Prediction> =
            (0..4).map(|i| scored(0.55 + 0.1 * i as f64, true).prediction).collect();
        let (acc, abs) = apply_threshold(&preds, 0.0);
        assert_eq!(acc.len(), 4);
        assert!(abs.is_empty());
        let (acc, abs) = apply_threshold(&preds, 0.951);
        assert!(acc.is_empty());
        assert_eq!(abs.len(), 4);
    }

    #[test]
    fn profile_modes() {
        let perfect: Vec<ScoredPrediction> =
            (0..10).map(|i| scored(0.5 + 0.04 * i as f64, true)).collect();
        let none = make_profile(CalibrationMode::None, &perfect).unwrap();
        assert_eq!(none.threshold, 0.0);
        let m1 = make_profile(CalibrationMode::Mode1, &perfect).unwrap();
        assert_eq!(m1.threshold, 0.0);
        assert_eq!(m1.epsilon, Some(0.98));

        // Mode2's threshold is at least Mode1's on the same list.
        let mixed: Vec<ScoredPrediction> = (0..50)
            .map(|i| scored(0.5 + 0.009 * i as f64, i % 7 != 0))
            .collect();
        let t1 = make_profile(CalibrationMode::Mode1, &mixed).unwrap().threshold;
        let t2 = make_profile(CalibrationMode::Mode2, &mixed).unwrap().threshold;
        assert!(t2 >= t1, "t1={t1} t2={t2}");
    }

    #[test]
    fn ties_at_cut_are_retained_together() {
        // Two items share confidence 0.7; a cut cannot pass between them, so
        // the guarantee is evaluated over both.
        let list = vec![
            scored(0.7, false),
            scored(0.7, true),
            scored(0.9, true),
            scored(0.95, true),
        ];
        let c_hat = select_threshold(&list, 0.95).unwrap();
        // Cutting at 0.7 keeps 3/4 correct = 0.75 < ε; the next clean cut is
        // 0.9 with 2/2.
        assert_eq!(c_hat, 0.9);
        assert_eq!(oracle_select(&list, 0.95), Some(0.9));
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_instances() {
        let mut rng = crate::seeding::rng_for(11, "calibrate-test", 0);
        for case in 0..300 {
            let n = rng.gen_range(1..=40);
            let list: Vec<ScoredPrediction> = (0..n)
                .map(|_| {
                    let c = rng.gen_range(0.5..1.0);
                    let c = if rng.gen_bool(0.3) { (c * 20.0).round() / 20.0 } else { c };
                    scored(c, rng.gen_bool(0.8))
                })
                .collect();
            for eps in [0.7, 0.9, 0.95, 0.99] {
                let got = select_threshold(&list, eps).ok();
                let want = oracle_select(&list, eps);
                assert_eq!(got, want, "case {case}, eps {eps}");
            }
        }
    }

    #[test]
    fn construction_guarantee_holds() {
        let mut rng = crate::seeding::rng_for(13, "calibrate-guarantee", 0);
        for _ in 0..100 {
            let n = rng.gen_range(5..=60);
            let list: Vec<ScoredPrediction> = (0..n)
                .map(|_| scored(rng.gen_range(0.5..1.0), rng.gen_bool(0.75)))
                .collect();
            let eps = 0.9;
            if let Ok(c_hat) = select_threshold(&list, eps) {
                let retained: Vec<&ScoredPrediction> =
                    list.iter().filter(|s| s.confidence() >= c_hat).collect();
                let acc =
                    retained.iter().filter(|s| s.correct).count() as f64 / retained.len() as f64;
                assert!(acc >= eps, "retained accuracy {acc} < {eps}");
            }
        }
    }

    #[test]
    fn epsilon_monotonicity() {
        let mut rng = crate::seeding::rng_for(17, "calibrate-mono", 0);
        for _ in 0..100 {
            let n = rng.gen_range(5..=60);
            let list: Vec<ScoredPrediction> = (0..n)
                .map(|_| scored(rng.gen_range(0.5..1.0), rng.gen_bool(0.8)))
                .collect();
            let lo = select_threshold(&list, 0.85);
            let hi = select_threshold(&list, 0.95);
            if let (Ok(lo), Ok(hi)) = (lo, hi) {
                assert!(lo <= hi, "lo={lo} hi={hi}");
            }
        }
    }

    #[test]
    fn coverage_monotonicity_in_threshold() {
        let preds: Vec<Prediction> = (0..30)
            .map(|i| scored(0.5 + (i as f64) * 0.016, true).prediction)
            .collect();
        let mut prev = usize::MAX;
        for t in [0.0, 0.3, 0.55, 0.7, 0.9, 1.0] {
            let (accepted, _) = apply_threshold(&preds, t);
            assert!(accepted.len() <= prev);
            prev = accepted.len();
        }
    }
}

//! Equal error rate and minimum detection cost from labeled scores.
//!
//! A trial is accepted when its score is `>=` the threshold. Thresholds are
//! swept over every distinct score plus `+∞` (reject everything).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub target_scores: Vec<f64>,
    pub nontarget_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target_scores: Vec<f64>, nontarget_scores: Vec<f64>) -> Self {
        ScoreSet {
            target_scores,
            nontarget_scores,
        }
    }

    fn check(&self) -> Result<()> {
        if self.target_scores.is_empty() || self.nontarget_scores.is_empty() {
            return Err(Error::invalid("metrics need at least one target and one non-target score"));
        }
        if self
            .target_scores
            .iter()
            .chain(&self.nontarget_scores)
            .any(|s| s.is_nan())
        {
            return Err(Error::NonFinite("NaN score".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl DcfParams {
    /// NIST SRE 2008 operating point.
    pub const DCF08: DcfParams = DcfParams {
        c_miss: 10.0,
        c_fa: 1.0,
        p_target: 0.01,
    };
    /// NIST SRE 2010 operating point.
    pub const DCF10: DcfParams = DcfParams {
        c_miss: 1.0,
        c_fa: 1.0,
        p_target: 0.001,
    };

    /// Cost of the better of the two trivial systems (accept all / reject all).
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    fn check(&self) -> Result<()> {
        let ok = self.c_miss > 0.0
            && self.c_fa > 0.0
            && self.p_target > 0.0
            && self.p_target < 1.0
            && self.normalizer() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid detection cost parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Miss and false-alarm rates at every distinct score and at `+∞`, in
/// increasing threshold order.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    scores.check()?;
    let mut tar = scores.target_scores.clone();
    let mut non = scores.nontarget_scores.clone();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut points = Vec::with_capacity(thresholds.len());
    for th in thresholds {
        while below_t < tar.len() && tar[below_t] < th {
            below_t += 1;
        }
        while below_n < non.len() && non[below_n] < th {
            below_n += 1;
        }
        points.push(DetPoint {
            threshold: th,
            p_miss: below_t as f64 / nt,
            p_fa: (non.len() - below_n) as f64 / nn,
        });
    }
    Ok(points)
}

/// Rate where the miss and false-alarm curves cross, interpolating
/// linearly between the two DET points that straddle the crossing.
pub fn eer_from_points(points: &[DetPoint]) -> f64 {
    for (i, p) in points.iter().enumerate() {
        if p.p_miss >= p.p_fa {
            // i > 0 here: the lowest threshold accepts every trial (p_miss 0, p_fa 1)
            if p.p_miss == p.p_fa || i == 0 {
                return p.p_miss;
            }
            let q = points[i - 1];
            let d0 = q.p_miss - q.p_fa;
            let d1 = p.p_miss - p.p_fa;
            let w = d0 / (d0 - d1);
            return q.p_miss + w * (p.p_miss - q.p_miss);
        }
    }
    // the +∞ point always has p_fa = 0 <= p_miss
    unreachable!("DET sweep ends with p_fa = 0")
}

pub fn compute_eer(scores: &ScoreSet) -> Result<f64> {
    Ok(eer_from_points(&det_points(scores)?))
}

pub fn min_dcf_from_points(points: &[DetPoint], params: &DcfParams) -> f64 {
    let best = points
        .iter()
        .map(|p| params.c_miss * p.p_miss * params.p_target + params.c_fa * p.p_fa * (1.0 - params.p_target))
        .fold(f64::INFINITY, f64::min);
    best / params.normalizer()
}

pub fn compute_min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<f64> {
    params.check()?;
    Ok(min_dcf_from_points(&det_points(scores)?, params))
}

/// EER (as a fraction) and the two normalized minimum costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub eer: f64,
    pub dcf08: f64,
    pub dcf10: f64,
}

pub fn evaluate(scores: &ScoreSet) -> Result<ConditionMetrics> {
    let points = det_points(scores)?;
    Ok(ConditionMetrics {
        eer: eer_from_points(&points),
        dcf08: min_dcf_from_points(&points, &DcfParams::DCF08),
        dcf10: min_dcf_from_points(&points, &DcfParams::DCF10),
    })
}

/// Human-readable table, EER in percent.
pub fn format_report(rows: &[(String, ConditionMetrics)]) -> String {
    let mut out = format!("{:<12} {:>8} {:>8} {:>8}\n", "condition", "EER%", "DCF08", "DCF10");
    for (name, m) in rows {
        out.push_str(&format!(
            "{:<12} {:>8.2} {:>8.3} {:>8.3}\n",
            name,
            100.0 * m.eer,
            m.dcf08,
            m.dcf10
        ));
    }
    out
}

/// Machine-readable report: one TOML table per condition with keys
/// `eer` (percent), `dcf08` and `dcf10`.
pub fn format_report_kv(rows: &[(String, ConditionMetrics)]) -> String {
    let table: BTreeMap<&str, ConditionMetrics> = rows
        .iter()
        .map(|(n, m)| {
            (
                n.as_str(),
                ConditionMetrics {
                    eer: 100.0 * m.eer,
                    ..*m
                },
            )
        })
        .collect();
    toml::to_string(&table).expect("metrics serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_set_reaches_zero_zero() {
        let pts = det_points(&ScoreSet::new(vec![1.0], vec![0.0])).unwrap();
        assert!(pts.iter().any(|p| p.p_miss == 0.0 && p.p_fa == 0.0));
    }

    #[test]
    fn identical_scores_never_separate() {
        let pts = det_points(&ScoreSet::new(vec![0.3], vec![0.3])).unwrap();
        assert!(!pts.iter().any(|p| p.p_miss == 0.0 && p.p_fa == 0.0));
    }

    #[test]
    fn det_points_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = ScoreSet::new(
            (0..30).map(|_| rng.random_range(0.0..1.0)).collect(),
            (0..30).map(|_| rng.random_range(-0.5..0.6)).collect(),
        );
        let pts = det_points(&set).unwrap();
        assert!(pts.windows(2).all(|w| w[0].p_miss <= w[1].p_miss && w[0].p_fa >= w[1].p_fa));
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&ScoreSet::new(vec![0.9, 0.8], vec![0.1, 0.2])).unwrap(), 0.0);
        assert_eq!(compute_eer(&ScoreSet::new(vec![0.4], vec![0.6])).unwrap(), 1.0);
        let worked = ScoreSet::new(vec![0.9, 0.8, 0.7, 0.3], vec![0.6, 0.2, 0.1, 0.05]);
        assert_eq!(compute_eer(&worked).unwrap(), 0.25);
        assert!(compute_eer(&ScoreSet::new(vec![], vec![0.1])).is_err());
    }

    #[test]
    fn eer_interpolates_between_straddling_points() {
        // at 0.5: p_miss 0, p_fa 1/2; at 0.6: p_miss 1/2, p_fa 0
        let set = ScoreSet::new(vec![0.5, 0.6], vec![0.5, 0.3]);
        let eer = compute_eer(&set).unwrap();
        let expected = 0.25;
        assert!((eer - expected).abs() < 1e-15);
    }

    #[test]
    fn dcf_examples() {
        let sep = ScoreSet::new(vec![0.9, 0.8], vec![0.1, 0.2]);
        assert_eq!(compute_min_dcf(&sep, &DcfParams::DCF08).unwrap(), 0.0);
        let same = ScoreSet::new(vec![0.5; 3], vec![0.5; 4]);
        assert!((compute_min_dcf(&same, &DcfParams::DCF08).unwrap() - 1.0).abs() < 1e-12);
        let bad = DcfParams {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 1.0,
        };
        assert!(compute_min_dcf(&sep, &bad).is_err());
    }

    #[test]
    fn worked_example_dcf08() {
        // brute force over thresholds {0.05,0.1,0.2,0.3,0.6,0.7,0.8,0.9,∞}:
        // best is threshold 0.7 with p_miss 0.25, p_fa 0 -> 10·0.25·0.01 = 0.025
        let worked = ScoreSet::new(vec![0.9, 0.8, 0.7, 0.3], vec![0.6, 0.2, 0.1, 0.05]);
        let v = compute_min_dcf(&worked, &DcfParams::DCF08).unwrap();
        assert!((v - 0.25).abs() < 1e-12, "{v}");
    }

    #[test]
    fn report_has_three_keys_per_condition() {
        let m = ConditionMetrics {
            eer: 0.125,
            dcf08: 0.5,
            dcf10: 0.75,
        };
        let kv = format_report_kv(&[("all".into(), m)]);
        let parsed: BTreeMap<String, BTreeMap<String, f64>> = toml::from_str(&kv).unwrap();
        let keys: Vec<&str> = parsed["all"].keys().map(String::as_str).collect();
        assert_eq!(keys, ["dcf08", "dcf10", "eer"]);
        assert_eq!(parsed["all"]["eer"], 12.5);
        assert!(format_report(&[("all".into(), m)]).contains("12.50"));
    }

    proptest! {
        #[test]
        fn min_dcf_never_exceeds_one(
            tar in prop::collection::vec(-3.0f64..3.0, 1..40),
            non in prop::collection::vec(-3.0f64..3.0, 1..40),
        ) {
            let set = ScoreSet::new(tar, non);
            for p in [DcfParams::DCF08, DcfParams::DCF10] {
                prop_assert!(compute_min_dcf(&set, &p).unwrap() <= 1.0 + 1e-12);
            }
            let eer = compute_eer(&set).unwrap();
            prop_assert!((0.0..=1.0).contains(&eer));
        }
    }
}

//! Cosine scoring of enrollment/test trials.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::ScoreSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, target: bool) -> Self {
        Trial {
            enroll: enroll.into(),
            test: test.into(),
            target,
        }
    }
}

/// Trials plus the embedding of every id they reference.
#[derive(Debug, Clone, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub embeddings: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine score of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Length-normalized mean of several session embeddings.
pub fn enroll_model(sessions: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = sessions.first().ok_or_else(|| Error::invalid("enrollment without sessions"))?;
    let mut mean = vec![0.0; first.len()];
    for s in sessions {
        if s.len() != mean.len() {
            return Err(Error::shape("enroll_model", &[mean.len()], &[s.len()]));
        }
        let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::invalid("zero session embedding"));
        }
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / n);
    }
    let k = sessions.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// Scores every trial in order. Fails on the first id without an embedding.
pub fn score_trials(set: &TrialSet) -> Result<Vec<ScoredTrial>> {
    let lookup = |id: &str| {
        set.embeddings
            .get(id)
            .ok_or_else(|| Error::MissingId(id.to_string()))
    };
    set.trials
        .iter()
        .map(|t| {
            let score = cosine_score(lookup(&t.enroll)?, lookup(&t.test)?)?;
            Ok(ScoredTrial {
                trial: t.clone(),
                score,
            })
        })
        .collect()
}

/// Splits scored trials into target and non-target scores.
pub fn score_set(scored: &[ScoredTrial]) -> ScoreSet {
    let mut set = ScoreSet::default();
    for s in scored {
        if s.trial.target {
            set.target_scores.push(s.score);
        } else {
            set.nontarget_scores.push(s.score);
        }
    }
    set
}

/// Reads `enroll_id test_id {target|nontarget}` lines.
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |detail: &str| Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("line {}: {detail}", i + 1),
        };
        let [enroll, test, label] = fields[..] else {
            return Err(malformed("expected 3 fields"));
        };
        let target = match label {
            "target" => true,
            "nontarget" => false,
            _ => return Err(malformed("label must be target or nontarget")),
        };
        trials.push(Trial::new(enroll, test, target));
    }
    Ok(trials)
}

pub fn write_trials(trials: &[Trial], path: &Path) -> Result<()> {
    let text: String = trials
        .iter()
        .map(|t| {
            let label = if t.target { "target" } else { "nontarget" };
            format!("{} {} {label}\n", t.enroll, t.test)
        })
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `enroll_id test_id score` lines.
pub fn write_scores(scored: &[ScoredTrial], path: &Path) -> Result<()> {
    let text: String = scored
        .iter()
        .map(|s| format!("{} {} {:?}\n", s.trial.enroll, s.trial.test, s.score))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        let a = [1.0, -2.0, 0.5];
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_score(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
            let d = cosine_score(&sa, &sb).unwrap() - cosine_score(&a, &b).unwrap();
            prop_assert!(d.abs() <= 1e-12);
        }
    }

    #[test]
    fn scoring_examples() {
        let mut set = TrialSet::default();
        assert!(score_trials(&set).unwrap().is_empty());
        set.embeddings.insert("a".into(), vec![0.3, 0.4]);
        set.trials.push(Trial::new("a", "a", true));
        let out = score_trials(&set).unwrap();
        assert!((out[0].score - 1.0).abs() < 1e-15);
        set.trials.push(Trial::new("a", "missing", false));
        match score_trials(&set) {
            Err(Error::MissingId(id)) => assert_eq!(id, "missing"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scores_match_per_trial_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = TrialSet::default();
        for i in 0..20 {
            set.embeddings
                .insert(format!("u{i}"), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        for _ in 0..100 {
            let a = rng.random_range(0..20);
            let b = rng.random_range(0..20);
            set.trials.push(Trial::new(format!("u{a}"), format!("u{b}"), rng.random()));
        }
        let out = score_trials(&set).unwrap();
        for (s, t) in out.iter().zip(&set.trials) {
            assert_eq!(&s.trial, t);
            let (x, y) = (&set.embeddings[&t.enroll], &set.embeddings[&t.test]);
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((s.score - dot / (nx * ny)).abs() < 1e-12);
        }
        assert_eq!(score_trials(&set).unwrap(), out);
    }

    #[test]
    fn enrollment_mean_is_length_normalized() {
        let m = enroll_model(&[vec![3.0, 0.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(m, vec![0.5, 0.5]);
        assert!(enroll_model(&[]).is_err());
    }

    #[test]
    fn trial_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        let trials = vec![Trial::new("m1", "u1", true), Trial::new("m1", "u2", false)];
        write_trials(&trials, &path).unwrap();
        assert_eq!(read_trials(&path).unwrap(), trials);
        fs::write(&path, "m1 u1 maybe\n").unwrap();
        assert!(read_trials(&path).is_err());
    }
}

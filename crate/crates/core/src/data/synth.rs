//! Synthetic text-dependent verification corpus.
//!
//! Every phrase is an ordered list of distinct segment prototypes and comes
//! paired with its mirror: the same segments in reverse order, with the
//! segment durations reversed too. An utterance is the concatenation of its
//! segments' prototype frames plus a per-speaker offset and Gaussian noise,
//! so a phrase and its mirror share the same multiset of noiseless frames and
//! only their temporal order tells them apart.
//!
//! Positions are a smoothed one-hot of the segment slot each frame falls in
//! (first segment of the utterance, second, ...), sampled at the frame's
//! fractional progress through the slot.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::verify::Trial;

const POSITION_WIDTH: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Training speakers.
    pub speakers: usize,
    /// Evaluation speakers, disjoint from the training ones.
    pub eval_speakers: usize,
    /// Total phrases; must be even since phrases come in mirror pairs.
    pub phrases: usize,
    /// Training sessions per (speaker, phrase).
    pub sessions: usize,
    /// Evaluation sessions per (speaker, phrase); the first
    /// `enroll_sessions` form the enrollment model, the rest are tests.
    pub eval_sessions: usize,
    pub enroll_sessions: usize,
    /// Segment inventory size.
    pub segments: usize,
    pub segments_per_phrase: usize,
    pub segment_frames_min: usize,
    pub segment_frames_max: usize,
    /// Frame width `D`.
    pub feature_dim: usize,
    /// Noise standard deviation of training utterances.
    pub noise: f64,
    /// Noise standard deviation of evaluation utterances.
    pub eval_noise: f64,
    /// Standard deviation of the per-speaker offset.
    pub speaker_scale: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            speakers: 4,
            eval_speakers: 4,
            phrases: 8,
            sessions: 5,
            eval_sessions: 5,
            enroll_sessions: 3,
            segments: 12,
            segments_per_phrase: 4,
            segment_frames_min: 3,
            segment_frames_max: 6,
            feature_dim: 16,
            noise: 0.05,
            eval_noise: 0.05,
            speaker_scale: 0.5,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if [self.speakers, self.eval_speakers, self.sessions, self.segments, self.feature_dim]
            .contains(&0)
        {
            return bad("speaker, session, segment and feature counts must be at least 1");
        }
        if self.phrases < 2 || !self.phrases.is_multiple_of(2) {
            return bad("phrases must be a positive even number (mirror pairs)");
        }
        if self.segments_per_phrase < 2 || self.segments_per_phrase > self.segments {
            return bad("segments_per_phrase must lie in 2..=segments");
        }
        if self.segment_frames_min == 0 || self.segment_frames_min > self.segment_frames_max {
            return bad("segment frame range must satisfy 1 <= min <= max");
        }
        if self.enroll_sessions == 0 || self.enroll_sessions >= self.eval_sessions {
            return bad("enroll_sessions must lie in 1..eval_sessions");
        }
        if !(self.noise >= 0.0 && self.eval_noise >= 0.0 && self.speaker_scale >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    /// Position width `P`: one slot per segment of a phrase.
    pub fn position_dim(&self) -> usize {
        self.segments_per_phrase
    }

    /// Training classes are (speaker, phrase) pairs.
    pub fn num_classes(&self) -> usize {
        self.speakers * self.phrases
    }

    pub fn class_of(&self, speaker: usize, phrase: usize) -> usize {
        speaker * self.phrases + phrase
    }

    pub fn mirror_of(phrase: usize) -> usize {
        phrase ^ 1
    }
}

/// Segment prototypes and the segment order of each phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseInventory {
    /// `segments × D`.
    pub prototypes: Tensor,
    pub phrases: Vec<Vec<usize>>,
}

/// Enrollment model built from several sessions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enrollment {
    pub model_id: String,
    pub utterances: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub inventory: PhraseInventory,
    pub train: Vec<FeatureSequence>,
    pub eval: Vec<FeatureSequence>,
    pub enrollments: Vec<Enrollment>,
    /// Named trial lists: `mirror` (targets vs. order-reversed phrase),
    /// `speaker` (targets vs. other speakers) and `all`.
    pub conditions: Vec<(String, Vec<Trial>)>,
}

impl Corpus {
    pub fn condition(&self, name: &str) -> Option<&[Trial]> {
        self.conditions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
    }
}

/// Independent generator for one purpose, derived from the master seed.
fn sub_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    // splitmix64 over the parts
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn narrow(v: f64) -> f64 {
    v as f32 as f64
}

fn utterance_id(speaker: usize, phrase: usize, session: usize) -> String {
    format!("s{speaker:03}_p{phrase:02}_{session:02}")
}

fn model_id(speaker: usize, phrase: usize) -> String {
    format!("m{speaker:03}_p{phrase:02}")
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    inventory: PhraseInventory,
    offsets: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn render(&self, split: u64, speaker: usize, phrase: usize, session: usize, sigma: f64) -> FeatureSequence {
        let spec = self.spec;
        let pair = phrase / 2;
        let mut dur_rng = sub_rng(spec.seed, &[2, split, speaker as u64, pair as u64, session as u64]);
        let mut durations: Vec<usize> = (0..spec.segments_per_phrase)
            .map(|_| dur_rng.random_range(spec.segment_frames_min..=spec.segment_frames_max))
            .collect();
        if phrase % 2 == 1 {
            durations.reverse();
        }
        let segs = &self.inventory.phrases[phrase];
        let total: usize = durations.iter().sum();
        let d = spec.feature_dim;
        let p = spec.position_dim();

        let mut noise_rng = sub_rng(
            spec.seed,
            &[3, split, speaker as u64, phrase as u64, session as u64],
        );
        let normal = Normal::new(0.0, 1.0).unwrap();
        let offset = &self.offsets[speaker];
        let mut frames = Vec::with_capacity(total * d);
        let mut positions = Vec::with_capacity(total * p);
        for (slot, (&seg, &dur)) in segs.iter().zip(&durations).enumerate() {
            let proto = self.inventory.prototypes.row_slice(seg);
            for j in 0..dur {
                for k in 0..d {
                    let n: f64 = normal.sample(&mut noise_rng);
                    frames.push(narrow(proto[k] + offset[k] + sigma * n));
                }
                let center = slot as f64 + (j as f64 + 0.5) / dur as f64 - 0.5;
                let raw: Vec<f64> = (0..p)
                    .map(|i| (-(i as f64 - center).powi(2) / (2.0 * POSITION_WIDTH * POSITION_WIDTH)).exp())
                    .collect();
                let sum: f64 = raw.iter().sum();
                positions.extend(raw.iter().map(|v| narrow(v / sum)));
            }
        }
        FeatureSequence::new(
            utterance_id(speaker, phrase, session),
            speaker,
            phrase,
            Tensor::new(&[total, d], frames).unwrap(),
            Tensor::new(&[total, p], positions).unwrap(),
        )
        .unwrap()
    }
}

/// Generates the training set, the evaluation set, enrollment models and
/// trial lists. A pure function of `spec`.
pub fn gen_synthetic_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut inv_rng = sub_rng(spec.seed, &[0]);
    let proto: Vec<f64> = (0..spec.segments * spec.feature_dim)
        .map(|_| narrow(normal.sample(&mut inv_rng)))
        .collect();
    let prototypes = Tensor::new(&[spec.segments, spec.feature_dim], proto)?;
    let mut phrases = Vec::with_capacity(spec.phrases);
    for _ in 0..spec.phrases / 2 {
        let forward: Vec<usize> = sample(&mut inv_rng, spec.segments, spec.segments_per_phrase).into_vec();
        let mut backward = forward.clone();
        backward.reverse();
        phrases.push(forward);
        phrases.push(backward);
    }

    let total_speakers = spec.speakers + spec.eval_speakers;
    let offsets = (0..total_speakers)
        .map(|s| {
            let mut rng = sub_rng(spec.seed, &[1, s as u64]);
            (0..spec.feature_dim)
                .map(|_| spec.speaker_scale * normal.sample(&mut rng))
                .collect()
        })
        .collect();

    let generator = Generator {
        spec,
        inventory: PhraseInventory { prototypes, phrases },
        offsets,
    };

    let mut train = Vec::with_capacity(spec.num_classes() * spec.sessions);
    for s in 0..spec.speakers {
        for p in 0..spec.phrases {
            for k in 0..spec.sessions {
                train.push(generator.render(0, s, p, k, spec.noise));
            }
        }
    }

    let eval_ids = spec.speakers..total_speakers;
    let mut eval = Vec::new();
    let mut enrollments = Vec::new();
    for s in eval_ids.clone() {
        for p in 0..spec.phrases {
            for k in 0..spec.eval_sessions {
                eval.push(generator.render(1, s, p, k, spec.eval_noise));
            }
            enrollments.push(Enrollment {
                model_id: model_id(s, p),
                utterances: (0..spec.enroll_sessions).map(|k| utterance_id(s, p, k)).collect(),
            });
        }
    }

    let tests = spec.enroll_sessions..spec.eval_sessions;
    let mut targets = Vec::new();
    let mut mirrors = Vec::new();
    let mut others = Vec::new();
    for s in eval_ids.clone() {
        for p in 0..spec.phrases {
            let model = model_id(s, p);
            for k in tests.clone() {
                targets.push(Trial::new(&model, utterance_id(s, p, k), true));
                mirrors.push(Trial::new(&model, utterance_id(s, CorpusSpec::mirror_of(p), k), false));
                for s2 in eval_ids.clone().filter(|&x| x != s) {
                    others.push(Trial::new(&model, utterance_id(s2, p, k), false));
                }
            }
        }
    }
    let join = |a: &[Trial], b: &[Trial]| a.iter().chain(b).cloned().collect::<Vec<_>>();
    let all: Vec<Trial> = targets.iter().chain(&mirrors).chain(&others).cloned().collect();
    let conditions = vec![
        ("all".to_string(), all),
        ("mirror".to_string(), join(&targets, &mirrors)),
        ("speaker".to_string(), join(&targets, &others)),
    ];

    Ok(Corpus {
        spec: spec.clone(),
        inventory: generator.inventory,
        train,
        eval,
        enrollments,
        conditions,
    })
}

//! Teacher–student pieces: Random Erasing, the divergence and the two
//! training losses, and the paired models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokens::TokenLayout;

/// Random Erasing parameters. Areas are fractions of the whole `T × D`
/// matrix; aspect is the rectangle's time/feature ratio relative to the
/// matrix's own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EraseSpec {
    pub probability: f64,
    pub area_min: f64,
    pub area_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub fill: f64,
}

impl Default for EraseSpec {
    fn default() -> Self {
        EraseSpec {
            probability: 0.5,
            area_min: 0.02,
            area_max: 0.2,
            aspect_min: 0.3,
            aspect_max: 3.3,
            fill: 0.0,
        }
    }
}

impl EraseSpec {
    pub fn disabled() -> Self {
        EraseSpec {
            probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = (0.0..=1.0).contains(&self.probability);
        let area_ok = self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max <= 1.0;
        let aspect_ok = self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max && self.aspect_max.is_finite();
        if p_ok && area_ok && aspect_ok && self.fill.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid erase spec {self:?}")))
        }
    }
}

/// Erased rectangle: rows `t0..t0+h`, columns `f0..f0+w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub t0: usize,
    pub h: usize,
    pub f0: usize,
    pub w: usize,
}

/// Draws the rectangle (or `None`) for a `t × d` matrix. Always consumes
/// the same number of random values.
pub fn draw_erase<R: Rng + ?Sized>(t: usize, d: usize, spec: &EraseSpec, rng: &mut R) -> Option<EraseRect> {
    let u_apply: f64 = rng.random();
    let u_area: f64 = rng.random();
    let u_aspect: f64 = rng.random();
    let u_t: f64 = rng.random();
    let u_f: f64 = rng.random();
    if u_apply >= spec.probability {
        return None;
    }
    let area = spec.area_min + (spec.area_max - spec.area_min) * u_area;
    let aspect = spec.aspect_min + (spec.aspect_max - spec.aspect_min) * u_aspect;
    let h = ((area * aspect).sqrt() * t as f64).round().clamp(1.0, t as f64) as usize;
    let w = ((area / aspect).sqrt() * d as f64).round().clamp(1.0, d as f64) as usize;
    let t0 = ((u_t * (t - h + 1) as f64) as usize).min(t - h);
    let f0 = ((u_f * (d - w + 1) as f64) as usize).min(d - w);
    Some(EraseRect { t0, h, f0, w })
}

pub fn random_erase<R: Rng + ?Sized>(seq: &Tensor, spec: &EraseSpec, rng: &mut R) -> Tensor {
    let (t, d) = seq.dims2();
    let mut out = seq.clone();
    if let Some(r) = draw_erase(t, d, spec, rng) {
        let vals = out.values_mut();
        for row in r.t0..r.t0 + r.h {
            vals[row * d + r.f0..row * d + r.f0 + r.w].fill(spec.fill);
        }
    }
    out
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!("{name} is not a probability vector")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Σ p_t (ln p_t − ln max(p_s, 1e-12))`, with `0 ln 0 = 0`.
pub fn kld_loss(p_teacher: &[f64], p_student: &[f64]) -> Result<f64> {
    if p_teacher.len() != p_student.len() {
        return Err(Error::shape("kld_loss", &[p_teacher.len()], &[p_student.len()]));
    }
    check_distribution(p_teacher, "teacher posterior")?;
    check_distribution(p_student, "student posterior")?;
    Ok(p_teacher
        .iter()
        .zip(p_student)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (t.ln() - s.max(1e-12).ln()))
        .sum())
}

/// Mean cross-entropy of the teacher's class-token logits.
pub fn teacher_loss(g: &mut Graph, cls_logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(cls_logits, labels)
}

/// Mean over the batch of `KLD(teacher, softmax(dist)) + CE(cls, label)`.
/// `teacher_posteriors` is a plain tensor, so nothing flows back into the
/// teacher.
pub fn student_loss(
    g: &mut Graph,
    cls_logits: Var,
    dist_logits: Var,
    labels: &[usize],
    teacher_posteriors: &Tensor,
) -> Result<Var> {
    let kld = g.kl_div(teacher_posteriors, dist_logits)?;
    let ce = g.cross_entropy(cls_logits, labels)?;
    g.add(kld, ce)
}

/// Row-wise softmax of a logits matrix, as a detached tensor.
pub fn posteriors(logits: &Tensor) -> Tensor {
    let (b, c) = logits.dims2();
    let mut out = vec![0.0; b * c];
    for (r, row) in out.chunks_exact_mut(c).enumerate() {
        crate::tensor::softmax_slice(logits.row_slice(r), row);
    }
    Tensor::new(&[b, c], out).expect("same shape as logits")
}

/// Teacher and student with identical architecture. Only the student owns
/// a distillation token and head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub teacher: Model,
    pub student: Model,
}

impl ModelPair {
    /// `spec.layout` is overridden: the teacher gets a class token, the
    /// student class and distillation tokens.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let teacher = Model::new(
            ModelSpec {
                layout: TokenLayout::Class,
                ..spec.clone()
            },
            "teacher.",
            rng,
        )?;
        let student = Model::new(
            ModelSpec {
                layout: TokenLayout::ClassDistill,
                ..spec
            },
            "student.",
            rng,
        )?;
        Ok(ModelPair { teacher, student })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn erase_probability_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[10, 8], 1.0, &mut rng);
        assert_eq!(random_erase(&x, &EraseSpec::disabled(), &mut rng), x);
    }

    #[test]
    fn full_erase_fills_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[10, 8], 1.0, &mut rng);
        let spec = EraseSpec {
            probability: 1.0,
            area_min: 1.0,
            area_max: 1.0,
            aspect_min: 1.0,
            aspect_max: 1.0,
            fill: -3.0,
        };
        assert!(random_erase(&x, &spec, &mut rng).values().iter().all(|&v| v == -3.0));
    }

    #[test]
    fn erase_mask_is_deterministic_and_rectangular() {
        let x = Tensor::filled(&[10, 8], 1.0);
        let spec = EraseSpec {
            probability: 1.0,
            ..Default::default()
        };
        let mask = |seed| {
            let out = random_erase(&x, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
            out.values().iter().map(|&v| v == 0.0).collect::<Vec<bool>>()
        };
        assert_eq!(mask(7), mask(7));
        let m = mask(7);
        let cells: Vec<(usize, usize)> = (0..80).filter(|&i| m[i]).map(|i| (i / 8, i % 8)).collect();
        assert!(!cells.is_empty());
        let (t_lo, t_hi) = (cells.iter().map(|c| c.0).min().unwrap(), cells.iter().map(|c| c.0).max().unwrap());
        let (f_lo, f_hi) = (cells.iter().map(|c| c.1).min().unwrap(), cells.iter().map(|c| c.1).max().unwrap());
        assert_eq!(cells.len(), (t_hi - t_lo + 1) * (f_hi - f_lo + 1));
    }

    #[test]
    fn erase_spec_validation() {
        assert!(EraseSpec::default().validate().is_ok());
        let bad = EraseSpec {
            area_max: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EraseSpec {
            probability: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kld_examples() {
        assert!((kld_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-6);
        let v = kld_loss(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-4);
        assert_eq!(kld_loss(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert!(kld_loss(&[1.0], &[0.5, 0.5]).is_err());
        assert!(kld_loss(&[0.7, 0.7], &[0.5, 0.5]).is_err());
        assert!(kld_loss(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kld_nonnegative_and_zero_only_when_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(2..8);
            let p = random_distribution(&mut rng, n);
            let q = random_distribution(&mut rng, n);
            let d = kld_loss(&p, &q).unwrap();
            assert!(d >= 0.0);
            assert_eq!(d == 0.0, p == q);
            assert_eq!(kld_loss(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn teacher_loss_examples() {
        let mut g = Graph::new();
        let sharp = g.constant(Tensor::from_rows(&[[50.0, 0.0, 0.0], [0.0, 0.0, 50.0]]).unwrap());
        let l = teacher_loss(&mut g, sharp, &[0, 2]).unwrap();
        assert!(g.value(l).values()[0] < 1e-20);
        let flat = g.constant(Tensor::zeros(&[2, 4]));
        let l = teacher_loss(&mut g, flat, &[1, 3]).unwrap();
        assert!((g.value(l).values()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(teacher_loss(&mut g, flat, &[4, 0]).is_err());
    }

    #[test]
    fn teacher_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::uniform(&[3, 5], 2.0, &mut rng);
        let err = finite_diff_check_params(|g, v| teacher_loss(g, v[0], &[0, 4, 2]), &[logits], 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn student_loss_vanishes_when_both_terms_do() {
        let mut g = Graph::new();
        let cls = g.constant(Tensor::from_rows(&[[60.0, 0.0], [0.0, 60.0]]).unwrap());
        let dist_vals = Tensor::from_rows(&[[0.3, -0.2], [1.0, 0.5]]).unwrap();
        let teacher = posteriors(&dist_vals);
        let dist = g.constant(dist_vals);
        let l = student_loss(&mut g, cls, dist, &[0, 1], &teacher).unwrap();
        assert!(g.value(l).values()[0].abs() < 1e-12);
    }

    #[test]
    fn student_loss_with_uniform_teacher_and_dist_is_ce() {
        let mut g = Graph::new();
        let cls_vals = Tensor::from_rows(&[[0.1, 0.9, -0.4], [2.0, 0.0, 0.5]]).unwrap();
        let cls = g.constant(cls_vals);
        let dist = g.constant(Tensor::zeros(&[2, 3]));
        let teacher = Tensor::filled(&[2, 3], 1.0 / 3.0);
        let total = student_loss(&mut g, cls, dist, &[1, 2], &teacher).unwrap();
        let ce = g.cross_entropy(cls, &[1, 2]).unwrap();
        assert!((g.value(total).values()[0] - g.value(ce).values()[0]).abs() < 1e-15);
    }

    #[test]
    fn student_loss_is_sum_of_independent_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cls_vals = Tensor::uniform(&[4, 5], 2.0, &mut rng);
        let dist_vals = Tensor::uniform(&[4, 5], 2.0, &mut rng);
        let teacher = posteriors(&Tensor::uniform(&[4, 5], 2.0, &mut rng));
        let labels = [3, 0, 4, 1];
        let mut g = Graph::new();
        let cls = g.constant(cls_vals.clone());
        let dist = g.constant(dist_vals.clone());
        let l = student_loss(&mut g, cls, dist, &labels, &teacher).unwrap();

        let student = posteriors(&dist_vals);
        let mut expected = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            expected += kld_loss(teacher.row_slice(r), student.row_slice(r)).unwrap();
            let row = cls_vals.row_slice(r);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected += lse - row[y];
        }
        expected /= 4.0;
        assert!((g.value(l).values()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn student_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let teacher = posteriors(&Tensor::uniform(&[3, 4], 2.0, &mut rng));
        let inputs = [Tensor::uniform(&[3, 4], 2.0, &mut rng), Tensor::uniform(&[3, 4], 2.0, &mut rng)];
        let err = finite_diff_check_params(
            |g, v| student_loss(g, v[0], v[1], &[0, 3, 1], &teacher),
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

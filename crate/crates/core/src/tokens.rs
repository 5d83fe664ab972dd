//! Class-token matrix, its per-epoch availability schedule, per-example
//! sampling, token attachment and the per-head supervector view of the
//! class-token state.

use rand::Rng;

use crate::encoder::{AttentionRecord, EncoderTrace};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_kernel, Graph, Tensor, Var};

/// `R × d_model` candidate class tokens. Row 0 is the token that survives
/// to the end of training and is used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub id: ParamId,
    pub count: usize,
}

impl TokenMatrix {
    pub fn init<R: Rng + ?Sized>(
        count: usize,
        d_model: usize,
        store: &mut ParamStore,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("token matrix needs at least one row".into()));
        }
        let bound = 1.0 / (d_model as f64).sqrt();
        let id = store.add(name, Tensor::uniform(&[count, d_model], bound, rng));
        Ok(TokenMatrix { id, count })
    }
}

/// Number of available token rows for each epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    alpha: Vec<usize>,
}

impl Schedule {
    pub fn alpha(&self) -> &[usize] {
        &self.alpha
    }

    pub fn epochs(&self) -> usize {
        self.alpha.len()
    }

    /// Available rows in epoch `n` (0-based); epochs past the end keep the
    /// final value.
    pub fn available(&self, epoch: usize) -> usize {
        self.alpha[epoch.min(self.alpha.len() - 1)]
    }
}

/// Linear reduction from `R` available tokens in the first epoch to a single
/// token in the last: `α[n] = max(1, round(R·(N−1−n)/(N−1)))`.
pub fn build_schedule(tokens: usize, epochs: usize) -> Result<Schedule> {
    if tokens == 0 || epochs == 0 {
        return Err(Error::invalid(format!(
            "schedule needs positive counts, got R={tokens}, N={epochs}"
        )));
    }
    if tokens == 1 || epochs == 1 {
        return Ok(Schedule { alpha: vec![1; epochs] });
    }
    let span = (epochs - 1) as f64;
    let mut alpha: Vec<usize> = (0..epochs)
        .map(|n| {
            let a = (tokens as f64 * (epochs - 1 - n) as f64 / span).round() as usize;
            a.clamp(1, tokens)
        })
        .collect();
    alpha[0] = tokens;
    Ok(Schedule { alpha })
}

/// Draws `batch` row indices uniformly from `0..available`.
pub fn sample_tokens<R: Rng + ?Sized>(
    matrix: &TokenMatrix,
    available: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if available == 0 || available > matrix.count {
        return Err(Error::invalid(format!(
            "available token count {available} outside 1..={}",
            matrix.count
        )));
    }
    Ok((0..batch).map(|_| rng.random_range(0..available)).collect())
}

/// Which tokens a model appends to each sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenLayout {
    /// No tokens; the embedding is the temporal mean.
    None,
    Class,
    /// Class token followed by the distillation token.
    ClassDistill,
}

impl TokenLayout {
    pub fn count(self) -> usize {
        match self {
            TokenLayout::None => 0,
            TokenLayout::Class => 1,
            TokenLayout::ClassDistill => 2,
        }
    }
}

/// Appends the class token (and, for [`TokenLayout::ClassDistill`], the
/// distillation token after it) below the last frame.
pub fn attach_tokens(
    g: &mut Graph,
    seq: Var,
    cls: Var,
    dist: Option<Var>,
    layout: TokenLayout,
) -> Result<Var> {
    let width = g.value(seq).cols();
    let check = |g: &Graph, v: Var| {
        let t = g.value(v);
        if t.dims2() != (1, width) {
            Err(Error::shape("attach_tokens", &[g.value(seq).rows(), width], t.shape()))
        } else {
            Ok(())
        }
    };
    check(g, cls)?;
    match (layout, dist) {
        (TokenLayout::Class, None) => g.concat_rows(&[seq, cls]),
        (TokenLayout::ClassDistill, Some(d)) => {
            check(g, d)?;
            g.concat_rows(&[seq, cls, d])
        }
        (TokenLayout::ClassDistill, None) => Err(Error::invalid(
            "student layout requires both a class and a distillation token",
        )),
        (TokenLayout::Class, Some(_)) => Err(Error::invalid(
            "distillation token given for a class-only layout",
        )),
        (TokenLayout::None, _) => Err(Error::invalid("layout without tokens cannot attach")),
    }
}

/// The last `n_tokens` rows of an encoded sequence, in attachment order.
pub fn extract_token_states(g: &mut Graph, encoded: Var, n_tokens: usize) -> Result<Vec<Var>> {
    if !(1..=2).contains(&n_tokens) {
        return Err(Error::invalid(format!("token count must be 1 or 2, got {n_tokens}")));
    }
    let rows = g.value(encoded).rows();
    if rows <= n_tokens {
        return Err(Error::invalid(format!(
            "sequence of {rows} rows is too short for {n_tokens} token(s)"
        )));
    }
    (rows - n_tokens..rows).map(|r| g.slice_rows(encoded, r, 1)).collect()
}

/// Per-head class-token outputs of the last MSA layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervectorView {
    /// `s_h = Σ_t ā_t · V_h[t]` for each head.
    pub head_vectors: Vec<Vec<f64>>,
    /// Head-order concatenation of `head_vectors` (width `d_model`).
    pub supervector: Vec<f64>,
    /// The class-token attention row `ā` of each head.
    pub attention_rows: Vec<Vec<f64>>,
}

/// Builds the supervector view from the last layer of `record`, the value
/// matrices `V_h` of that layer and the row index of the class token.
pub fn supervector_view(
    record: &AttentionRecord,
    values: &[Tensor],
    token_row: usize,
) -> Result<SupervectorView> {
    let last = record
        .last_layer()
        .ok_or_else(|| Error::invalid("attention record has no layers"))?;
    if last.len() != values.len() {
        return Err(Error::invalid(format!(
            "{} attention heads but {} value matrices",
            last.len(),
            values.len()
        )));
    }
    let mut view = SupervectorView {
        head_vectors: Vec::with_capacity(last.len()),
        supervector: Vec::new(),
        attention_rows: Vec::with_capacity(last.len()),
    };
    for (a, v) in last.iter().zip(values) {
        let (rows, cols) = a.dims2();
        if token_row >= rows || v.rows() != cols {
            return Err(Error::shape("supervector_view", a.shape(), v.shape()));
        }
        let row = a.row_slice(token_row);
        let s = matmul_kernel(row, v.values(), 1, cols, v.cols());
        view.supervector.extend_from_slice(&s);
        view.head_vectors.push(s);
        view.attention_rows.push(row.to_vec());
    }
    Ok(view)
}

/// [`supervector_view`] read straight off a recorded forward pass.
pub fn supervector_from_trace(g: &Graph, trace: &EncoderTrace, token_row: usize) -> Result<SupervectorView> {
    let last = trace
        .last()
        .ok_or_else(|| Error::invalid("encoder has no MSA layers"))?;
    let values: Vec<Tensor> = last.values.iter().map(|&v| g.value(v).clone()).collect();
    supervector_view(&trace.attention_record(g), &values, token_row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        assert_eq!(build_schedule(1, 10).unwrap().alpha(), &[1; 10]);
        assert_eq!(build_schedule(4, 4).unwrap().alpha(), &[4, 3, 1, 1]);
        let s = build_schedule(100, 60).unwrap();
        assert_eq!(s.alpha()[0], 100);
        assert_eq!(s.alpha()[59], 1);
        assert!(s.alpha().windows(2).all(|w| w[0] >= w[1]));
        assert!(build_schedule(0, 3).is_err());
        assert!(build_schedule(3, 0).is_err());
    }

    #[test]
    fn schedule_sweep_keeps_contract() {
        for r in [1, 2, 50, 100, 200] {
            for n in [1, 2, 60] {
                let s = build_schedule(r, n).unwrap();
                let a = s.alpha();
                assert_eq!(a.len(), n);
                assert_eq!(*a.last().unwrap(), 1);
                if n > 1 {
                    assert_eq!(a[0], r);
                }
                assert!(a.iter().all(|&x| (1..=r).contains(&x)));
                assert!(a.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    fn matrix(count: usize) -> TokenMatrix {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        TokenMatrix::init(count, 4, &mut store, "tokens", &mut rng).unwrap()
    }

    #[test]
    fn single_available_token_always_index_zero() {
        let m = matrix(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_tokens(&m, 1, 50, &mut rng).unwrap().iter().all(|&i| i == 0));
        assert!(sample_tokens(&m, 0, 5, &mut rng).is_err());
        assert!(sample_tokens(&m, 8, 5, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let m = matrix(9);
        let a = sample_tokens(&m, 9, 100, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let b = sample_tokens(&m, 9, 100, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform_within_three_sigma() {
        let r = 10;
        let m = matrix(r);
        let n = 100_000;
        let idx = sample_tokens(&m, r, n, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let mut counts = vec![0usize; r];
        idx.iter().for_each(|&i| counts[i] += 1);
        let p = 1.0 / r as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{c} vs {mean}±{sigma}");
        }
    }

    #[test]
    fn attach_examples() {
        let mut g = Graph::new();
        let seq = g.constant(Tensor::zeros(&[3, 2]));
        let cls = g.constant(Tensor::row(&[1.0, 2.0]));
        let dist = g.constant(Tensor::row(&[3.0, 4.0]));
        let one = attach_tokens(&mut g, seq, cls, None, TokenLayout::Class).unwrap();
        assert_eq!(g.value(one).rows(), 4);
        assert_eq!(g.value(one).row_slice(3), &[1.0, 2.0]);
        let two = attach_tokens(&mut g, seq, cls, Some(dist), TokenLayout::ClassDistill).unwrap();
        assert_eq!(g.value(two).rows(), 5);
        assert_eq!(g.value(two).row_slice(3), &[1.0, 2.0]);
        assert_eq!(g.value(two).row_slice(4), &[3.0, 4.0]);
        assert!(attach_tokens(&mut g, seq, cls, None, TokenLayout::ClassDistill).is_err());
        let wide = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        assert!(attach_tokens(&mut g, seq, wide, None, TokenLayout::Class).is_err());
    }

    #[test]
    fn extract_examples() {
        let mut g = Graph::new();
        let enc = g.constant(Tensor::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0]]).unwrap());
        let two = extract_token_states(&mut g, enc, 2).unwrap();
        assert_eq!(g.value(two[0]).values(), &[3.0]);
        assert_eq!(g.value(two[1]).values(), &[4.0]);
        let one = extract_token_states(&mut g, enc, 1).unwrap();
        assert_eq!(g.value(one[0]).values(), &[4.0]);
        let short = g.constant(Tensor::from_rows(&[[0.0], [1.0]]).unwrap());
        assert!(extract_token_states(&mut g, short, 2).is_err());
        assert!(extract_token_states(&mut g, enc, 3).is_err());
    }

    #[test]
    fn zero_parameter_round_trip_recovers_tokens() {
        let cfg = EncoderConfig {
            d_model: 4,
            blocks: 2,
            heads: 2,
            d_k: 2,
            memory_size: 4,
            memory_topk: 2,
            frontend_layers: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&cfg, 4, &mut store, "", &mut rng).unwrap();
        for t in store.tensors_mut() {
            t.values_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let seq = g.constant(Tensor::uniform(&[3, 4], 1.0, &mut rng));
        let cls_t = Tensor::row(&[0.1, 0.2, 0.3, 0.4]);
        let dist_t = Tensor::row(&[-0.5, 0.6, -0.7, 0.8]);
        let cls = g.constant(cls_t.clone());
        let dist = g.constant(dist_t.clone());
        let x = attach_tokens(&mut g, seq, cls, Some(dist), TokenLayout::ClassDistill).unwrap();
        let (out, _) = enc.blocks_forward(&mut g, &b, x).unwrap();
        let states = extract_token_states(&mut g, out, 2).unwrap();
        assert_eq!(g.value(states[0]).values(), cls_t.values());
        assert_eq!(g.value(states[1]).values(), dist_t.values());
    }

    #[test]
    fn supervector_reductions() {
        let v = Tensor::from_rows(&[[1.0, 2.0], [3.0, 6.0], [5.0, -1.0]]).unwrap();
        let uniform = Tensor::filled(&[3, 3], 1.0 / 3.0);
        let rec = AttentionRecord { layers: vec![vec![uniform]] };
        let view = supervector_view(&rec, std::slice::from_ref(&v), 2).unwrap();
        let mean = v.mean_rows();
        for (a, b) in view.supervector.iter().zip(mean.values()) {
            assert!((a - b).abs() < 1e-12);
        }

        let one_hot = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let rec = AttentionRecord { layers: vec![vec![one_hot]] };
        let view = supervector_view(&rec, std::slice::from_ref(&v), 2).unwrap();
        assert_eq!(view.supervector, v.row_slice(1));
        assert_eq!(view.attention_rows[0], vec![0.0, 1.0, 0.0]);

        let empty = AttentionRecord { layers: vec![] };
        assert!(supervector_view(&empty, &[], 0).is_err());
    }

    #[test]
    fn supervector_bit_matches_encoder_heads() {
        let cfg = EncoderConfig {
            d_model: 8,
            blocks: 2,
            heads: 4,
            d_k: 2,
            memory_size: 8,
            memory_topk: 3,
            frontend_layers: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&cfg, 8, &mut store, "", &mut rng).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let seq = g.constant(Tensor::uniform(&[5, 8], 1.0, &mut rng));
        let cls = g.constant(Tensor::uniform(&[1, 8], 1.0, &mut rng));
        let x = attach_tokens(&mut g, seq, cls, None, TokenLayout::Class).unwrap();
        let (_, trace) = enc.blocks_forward(&mut g, &b, x).unwrap();
        let view = supervector_from_trace(&g, &trace, 5).unwrap();
        let heads = g.value(trace.last().unwrap().heads);
        assert_eq!(view.supervector.as_slice(), heads.row_slice(5));
    }
}

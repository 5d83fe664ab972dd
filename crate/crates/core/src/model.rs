//! A complete network: encoder, optional token parameters and classifier
//! head(s), all owned by one [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, PositionInjection};
use crate::encoder::{Encoder, EncoderConfig, EncoderTrace};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokens::{attach_tokens, extract_token_states, TokenLayout, TokenMatrix};

/// How an utterance is summarized into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Temporal mean of the encoder output, no tokens.
    Avg,
    /// Sampled class token.
    #[default]
    Cls,
    /// Teacher and student trained together; the student also carries a
    /// distillation token.
    ClsDist,
}

/// Everything needed to build a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub feature_dim: usize,
    pub position_dim: usize,
    pub injection: PositionInjection,
    pub layout: TokenLayout,
    /// Rows of the token matrix (`R`); ignored without tokens.
    pub tokens: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub tokens: Option<TokenMatrix>,
    pub dist_token: Option<ParamId>,
    /// `d_model × classes`, applied to the class-token (or mean) state.
    pub head: ParamId,
    /// `d_model × classes`, applied to the distillation-token state.
    pub dist_head: Option<ParamId>,
}

/// Graph handles from one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub cls_logits: Var,
    pub dist_logits: Option<Var>,
    /// Per-example class-token (or mean) state, `1 × d_model`.
    pub embeddings: Vec<Var>,
}

/// Encoder output for a single utterance, with its trace.
#[derive(Debug)]
pub struct Inspection {
    pub graph: Graph,
    pub trace: EncoderTrace,
    pub encoded: Var,
    /// Row of the class token in the attended sequence, if any.
    pub token_row: Option<usize>,
    pub frames: usize,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, prefix: &str, rng: &mut R) -> Result<Self> {
        if spec.classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let input_dim = spec.injection.input_dim(spec.feature_dim, spec.position_dim)?;
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&spec.encoder, input_dim, &mut store, prefix, rng)?;
        let d = spec.encoder.d_model;
        let tokens = match spec.layout {
            TokenLayout::None => None,
            _ => Some(TokenMatrix::init(spec.tokens, d, &mut store, &format!("{prefix}tokens"), rng)?),
        };
        let bound = 1.0 / (d as f64).sqrt();
        let dist_token = (spec.layout == TokenLayout::ClassDistill)
            .then(|| store.add(format!("{prefix}dist_token"), Tensor::uniform(&[1, d], bound, rng)));
        let head = store.add(format!("{prefix}head"), Tensor::uniform(&[d, spec.classes], bound, rng));
        let dist_head = (spec.layout == TokenLayout::ClassDistill)
            .then(|| store.add(format!("{prefix}dist_head"), Tensor::uniform(&[d, spec.classes], bound, rng)));
        Ok(Model {
            spec,
            store,
            encoder,
            tokens,
            dist_token,
            head,
            dist_head,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        self.spec.layout
    }

    pub fn d_model(&self) -> usize {
        self.spec.encoder.d_model
    }

    /// Frontend input for an utterance (positions injected).
    pub fn input_of(&self, seq: &FeatureSequence) -> Result<Tensor> {
        self.input_from(&seq.frames, &seq.positions)
    }

    pub fn input_from(&self, frames: &Tensor, positions: &Tensor) -> Result<Tensor> {
        if frames.cols() != self.spec.feature_dim || positions.cols() != self.spec.position_dim {
            return Err(Error::shape(
                "model input",
                &[frames.cols(), positions.cols()],
                &[self.spec.feature_dim, self.spec.position_dim],
            ));
        }
        self.spec.injection.combine(frames, positions)
    }

    /// Encodes one prepared input, attaching class token row `token_index`
    /// (and the distillation token for students). Returns the encoded
    /// sequence and its trace.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        input: Var,
        token_index: usize,
    ) -> Result<(Var, EncoderTrace)> {
        let front = self.encoder.frontend_forward(g, bound, input)?;
        let x = match (&self.tokens, self.layout()) {
            (Some(m), layout) => {
                let cls = g.gather_rows(bound.var(m.id), &[token_index])?;
                let dist = self.dist_token.map(|id| bound.var(id));
                attach_tokens(g, front, cls, dist, layout)?
            }
            (None, _) => front,
        };
        self.encoder.blocks_forward(g, bound, x)
    }

    /// Batched forward: one token index per example (ignored for AVG).
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        bound: &Bound,
        inputs: &[Tensor],
        token_indices: &[usize],
    ) -> Result<BatchOutput> {
        if inputs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut cls_states = Vec::with_capacity(inputs.len());
        let mut dist_states = Vec::new();
        for (i, input) in inputs.iter().enumerate() {
            let x = g.constant(input.clone());
            let idx = token_indices.get(i).copied().unwrap_or(0);
            let (out, _) = self.encode(g, bound, x, idx)?;
            match self.layout() {
                TokenLayout::None => cls_states.push(g.mean_rows(out)),
                layout => {
                    let states = extract_token_states(g, out, layout.count())?;
                    cls_states.push(states[0]);
                    if let Some(&d) = states.get(1) {
                        dist_states.push(d);
                    }
                }
            }
        }
        let stacked = g.concat_rows(&cls_states)?;
        let cls_logits = g.matmul(stacked, bound.var(self.head))?;
        let dist_logits = match self.dist_head {
            Some(h) => {
                let stacked = g.concat_rows(&dist_states)?;
                Some(g.matmul(stacked, bound.var(h))?)
            }
            None => None,
        };
        Ok(BatchOutput {
            cls_logits,
            dist_logits,
            embeddings: cls_states,
        })
    }

    /// Forward pass of one utterance with the inference token (row 0), no
    /// sampling and no augmentation.
    pub fn inspect(&self, seq: &FeatureSequence) -> Result<Inspection> {
        let mut graph = Graph::new();
        let bound = self.store.bind(&mut graph);
        let input = graph.constant(self.input_of(seq)?);
        let (encoded, trace) = self.encode(&mut graph, &bound, input, 0)?;
        let frames = seq.len();
        Ok(Inspection {
            graph,
            trace,
            encoded,
            token_row: (self.layout() != TokenLayout::None).then_some(frames),
            frames,
        })
    }

    /// Utterance embedding: the class-token state, or the temporal mean of
    /// the encoder output for AVG models.
    pub fn embed(&self, seq: &FeatureSequence) -> Result<Vec<f64>> {
        let ins = self.inspect(seq)?;
        let out = ins.graph.value(ins.encoded);
        match ins.token_row {
            Some(r) => Ok(out.row_slice(r).to_vec()),
            None => Ok(out.mean_rows().into_values()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec(layout: TokenLayout) -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                d_model: 8,
                blocks: 2,
                heads: 2,
                d_k: 4,
                memory_size: 8,
                memory_topk: 2,
                frontend_layers: 1,
            },
            feature_dim: 5,
            position_dim: 3,
            injection: PositionInjection::Concat,
            layout,
            tokens: 4,
            classes: 3,
        }
    }

    fn seq(rng: &mut ChaCha8Rng, t: usize) -> FeatureSequence {
        FeatureSequence::new(
            "u",
            0,
            0,
            Tensor::uniform(&[t, 5], 1.0, rng),
            Tensor::uniform(&[t, 3], 1.0, rng),
        )
        .unwrap()
    }

    #[test]
    fn zero_parameter_model_returns_class_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(tiny_spec(TokenLayout::Class), "", &mut rng).unwrap();
        let tokens = m.tokens.clone().unwrap();
        let token0 = m.store.get(tokens.id).row_slice(0).to_vec();
        for (i, t) in m.store.tensors_mut().iter_mut().enumerate() {
            if i != tokens.id.index() {
                t.values_mut().fill(0.0);
            }
        }
        let s = seq(&mut rng, 6);
        assert_eq!(m.embed(&s).unwrap(), token0);
    }

    #[test]
    fn avg_of_constant_sequence_with_identity_frontend() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut spec = tiny_spec(TokenLayout::None);
        spec.encoder.frontend_layers = 0;
        spec.feature_dim = 5;
        spec.position_dim = 3;
        let mut m = Model::new(spec, "", &mut rng).unwrap();
        for t in m.store.tensors_mut() {
            t.values_mut().fill(0.0);
        }
        let frame = [0.5, -1.0, 2.0, 0.25, 0.0];
        let pos = [0.1, 0.2, 0.3];
        let s = FeatureSequence::new(
            "c",
            0,
            0,
            Tensor::from_rows(&[frame; 4]).unwrap(),
            Tensor::from_rows(&[pos; 4]).unwrap(),
        )
        .unwrap();
        let e = m.embed(&s).unwrap();
        let expected: Vec<f64> = frame.iter().chain(&pos).copied().collect();
        for (a, b) in e.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::new(tiny_spec(TokenLayout::ClassDistill), "", &mut rng).unwrap();
        let s = seq(&mut rng, 7);
        assert_eq!(m.embed(&s).unwrap(), m.embed(&s).unwrap());
    }

    #[test]
    fn batch_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::new(tiny_spec(TokenLayout::ClassDistill), "", &mut rng).unwrap();
        let inputs: Vec<Tensor> = (0..3).map(|i| m.input_of(&seq(&mut rng, 4 + i)).unwrap()).collect();
        let mut g = Graph::new();
        let b = m.store.bind(&mut g);
        let out = m.forward_batch(&mut g, &b, &inputs, &[0, 3, 1]).unwrap();
        assert_eq!(g.value(out.cls_logits).shape(), &[3, 3]);
        assert_eq!(g.value(out.dist_logits.unwrap()).shape(), &[3, 3]);
        assert!(m.forward_batch(&mut g, &b, &inputs, &[0, 4, 1]).is_err());
    }

    #[test]
    fn wrong_feature_width_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::new(tiny_spec(TokenLayout::Class), "", &mut rng).unwrap();
        let bad = FeatureSequence::new(
            "b",
            0,
            0,
            Tensor::zeros(&[3, 4]),
            Tensor::zeros(&[3, 3]),
        )
        .unwrap();
        assert!(m.embed(&bad).is_err());
    }
}

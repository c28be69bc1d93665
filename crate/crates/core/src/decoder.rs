//! Relational knowledge decoding.
//!
//! From the output states of an injected mention the decoder reconstructs
//! the counterpart entity of the injected triple token by token:
//!
//! ```text
//! h⁰ = LN(σ(pool_span(final states over the mention) · W_o))
//! hⁱ = tanh((δ · h_r ⊙ hⁱ⁻¹) · W_d)
//! ```
//!
//! Each step is scored with a sampled softmax against the tied token
//! embeddings of the true token and the matching tokens of hard negative
//! entities.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, Var};
use crate::corpus::{Mention, TokenId, Vocabulary};
use crate::encoder::{EncoderModel, Init, Initializer, PoolRole, SequenceStates};
use crate::injection::{KgTokens, BRANCH_LN_EPS};
use crate::kg::{KnowledgeGraph, Side, Triple};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub w_out: ParamId,
    pub w_d: ParamId,
    pub delta_d: ParamId,
    pub ln: (ParamId, ParamId),
}

impl DecoderParams {
    pub fn register(model: &mut EncoderModel, init: Init, delta_d: f64) -> Result<Self> {
        if !(delta_d > 0.0 && delta_d.is_finite()) {
            return Err(Error::Config(format!("delta_d must be positive, got {delta_d}")));
        }
        let d = model.config().d_model;
        let mut ini = Initializer::new(init);
        let std = 1.0 / (d as f64).sqrt();
        let store = model.store_mut();
        let w_out = store.register("decode.w_out", ini.normal(d, d, std));
        let w_d = store.register("decode.w_d", ini.normal(d, d, std));
        let delta_d = store.register("decode.delta_d", Mat::filled(1, 1, delta_d));
        let ln = (store.register("decode.ln.gain", ini.constant(1, d, 1.0)), store.register("decode.ln.bias", Mat::zeros(1, d)));
        Ok(Self { w_out, w_d, delta_d, ln })
    }

    pub fn blocks(&self) -> Vec<ParamId> {
        vec![self.w_out, self.w_d, self.delta_d, self.ln.0, self.ln.1]
    }
}

/// What to decode for one injected mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingTarget {
    pub triple: Triple,
    /// Role of the injected mention; the counterpart is decoded.
    pub role: Side,
    pub mention: Mention,
    pub target: Vec<TokenId>,
    /// Negative token ids for each target position; never contain the
    /// true token of that position.
    pub negatives: Vec<Vec<TokenId>>,
}

impl DecodingTarget {
    /// Negative tokens come from the graph's hard negatives for the decoded
    /// side, taking each negative entity's `i`-th token (its last token when
    /// shorter). Positions with no graph negatives fall back to `n` uniform
    /// vocabulary words.
    pub fn build(
        kg: &KnowledgeGraph,
        toks: &KgTokens,
        vocab: &Vocabulary,
        triple: Triple,
        role: Side,
        mention: Mention,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let side = role.opposite();
        let truth_entity = match side {
            Side::Head => triple.head,
            Side::Tail => triple.tail,
        };
        let target = toks.entity(truth_entity).to_vec();
        let neg_entities = kg.sample_negatives(triple.relation, side, truth_entity, n)?;
        let mut negatives = Vec::with_capacity(target.len());
        for (i, &truth) in target.iter().enumerate() {
            let mut negs: Vec<TokenId> = Vec::with_capacity(neg_entities.len());
            for &e in &neg_entities {
                let name = toks.entity(e);
                let t = name[i.min(name.len() - 1)];
                if t != truth && !negs.contains(&t) {
                    negs.push(t);
                }
            }
            if negs.is_empty() && n > 0 {
                negs = uniform_negatives(vocab, truth, n, rng);
            }
            negatives.push(negs);
        }
        Ok(Self { triple, role, mention, target, negatives })
    }
}

/// `n` distinct ordinary words other than `truth` (fewer if the vocabulary
/// is smaller).
pub fn uniform_negatives(vocab: &Vocabulary, truth: TokenId, n: usize, rng: &mut impl Rng) -> Vec<TokenId> {
    let pool: Vec<TokenId> = vocab.word_range().filter(|&t| t != truth).collect();
    let k = n.min(pool.len());
    let mut picked: Vec<TokenId> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// `LN(σ(pool_span(rows of final_states over mention) · W_o))`.
pub fn span_output_on(g: &mut Graph<'_>, model: &EncoderModel, params: &DecoderParams, final_states: Var, mention: &Mention) -> Result<Var> {
    let rows = g.value(final_states).rows();
    if mention.is_empty() || mention.end > rows {
        return Err(Error::Invalid(format!("span {mention:?} invalid for {rows} states")));
    }
    let positions: Vec<usize> = mention.positions().collect();
    let span = g.gather(final_states, &positions);
    let pooled = model.pool_on(g, span, PoolRole::Span);
    let w = g.param(params.w_out);
    let proj = g.matmul(pooled, w);
    let act = g.sigmoid(proj);
    let gain = g.param(params.ln.0);
    let bias = g.param(params.ln.1);
    Ok(g.layer_norm(act, gain, bias, BRANCH_LN_EPS))
}

pub fn span_output_repr(model: &EncoderModel, params: &DecoderParams, states: &SequenceStates, mention: &Mention) -> Result<Mat> {
    let mut g = Graph::new(model.store());
    let fin = g.leaf(states.final_states().clone());
    let v = span_output_on(&mut g, model, params, fin, mention)?;
    Ok(g.value(v).clone())
}

/// `tanh((δ · h_r ⊙ h_prev) · W_d)`.
pub fn decode_step_on(g: &mut Graph<'_>, params: &DecoderParams, h_prev: Var, h_r: Var) -> Var {
    let prod = g.mul(h_r, h_prev);
    let delta = g.param(params.delta_d);
    let scaled = g.scale_by(prod, delta);
    let w = g.param(params.w_d);
    let proj = g.matmul(scaled, w);
    g.tanh(proj)
}

pub fn decode_step(model: &EncoderModel, params: &DecoderParams, h_prev: &Mat, h_r: &Mat) -> Result<Mat> {
    let d = model.config().d_model;
    for v in [h_prev, h_r] {
        if v.shape() != (1, d) {
            return Err(Error::Invalid(format!("decoder input has shape {:?}, expected (1, {d})", v.shape())));
        }
        if !v.is_finite() {
            return Err(Error::Invalid("non-finite decoder input".into()));
        }
    }
    let mut g = Graph::new(model.store());
    let a = g.leaf(h_prev.clone());
    let b = g.leaf(h_r.clone());
    let out = decode_step_on(&mut g, params, a, b);
    Ok(g.value(out).clone())
}

/// `−log[exp f(truth) / (exp f(truth) + Σ_neg exp f(neg))]` with
/// `f(y) = h · E[y] − log Q` and `Q = 1 / |negatives|`. Returns `None` when
/// there are no negatives, in which case the loss is zero.
pub fn sampled_softmax_on(g: &mut Graph<'_>, model: &EncoderModel, h_d: Var, truth: TokenId, negatives: &[TokenId]) -> Result<Option<Var>> {
    if negatives.contains(&truth) {
        return Err(Error::Invalid(format!("true token {truth} listed among negatives")));
    }
    if negatives.is_empty() {
        return Ok(None);
    }
    let mut ids = Vec::with_capacity(negatives.len() + 1);
    ids.push(truth);
    ids.extend_from_slice(negatives);
    let emb = g.param(model.token_embeddings());
    let rows = g.gather(emb, &ids);
    let scores = g.matmul_t(h_d, rows);
    let log_q = -(negatives.len() as f64).ln();
    let correction = g.leaf(Mat::filled(1, ids.len(), -log_q));
    let scores = g.add(scores, correction);
    Ok(Some(g.cross_entropy(scores, &[0])))
}

pub fn sampled_softmax_loss(model: &EncoderModel, h_d: &Mat, truth: TokenId, negatives: &[TokenId]) -> Result<f64> {
    let mut g = Graph::new(model.store());
    let h = g.leaf(h_d.clone());
    Ok(match sampled_softmax_on(&mut g, model, h, truth, negatives)? {
        Some(v) => g.scalar(v),
        None => 0.0,
    })
}

/// One decoding target with its tape inputs.
pub struct DecodeInput<'t> {
    pub target: &'t DecodingTarget,
    pub final_states: Var,
    pub relation: Var,
}

/// Mean over targets of the summed per-token losses. `None` for an empty
/// batch.
pub fn decoding_loss_on(g: &mut Graph<'_>, model: &EncoderModel, params: &DecoderParams, inputs: &[DecodeInput<'_>]) -> Result<Option<Var>> {
    if inputs.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for inp in inputs {
        let t = inp.target;
        if t.target.is_empty() || t.negatives.len() != t.target.len() {
            return Err(Error::Invalid("malformed decoding target".into()));
        }
        let mut h = span_output_on(g, model, params, inp.final_states, &t.mention)?;
        for (&truth, negs) in t.target.iter().zip(&t.negatives) {
            h = decode_step_on(g, params, h, inp.relation);
            if let Some(l) = sampled_softmax_on(g, model, h, truth, negs)? {
                terms.push(l);
            }
        }
    }
    if terms.is_empty() {
        return Ok(Some(g.leaf(Mat::zeros(1, 1))));
    }
    let sum = g.add_n(&terms);
    Ok(Some(g.scale(sum, 1.0 / inputs.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> (EncoderModel, DecoderParams) {
        let cfg = EncoderConfig { d_model: 4, n_layers: 1, n_heads: 1, d_ff: 4, max_len: 6, vocab_size: 9, ..Default::default() };
        let mut m = EncoderModel::new(cfg, Init::Random(11)).unwrap();
        let p = DecoderParams::register(&mut m, Init::Random(12), 1.0).unwrap();
        (m, p)
    }

    #[test]
    fn identity_chain_step() {
        let (mut m, p) = model();
        *m.store_mut().get_mut(p.w_d) = Mat::identity(4);
        let h = Mat::row_vector(vec![0.3, -1.2, 2.0, 0.0]);
        let out = decode_step(&m, &p, &h, &Mat::filled(1, 4, 1.0)).unwrap();
        assert_eq!(out, h.map(f64::tanh));
        let zero = decode_step(&m, &p, &Mat::zeros(1, 4), &h).unwrap();
        assert_eq!(zero, Mat::zeros(1, 4));
        assert!(decode_step(&m, &p, &Mat::filled(1, 4, f64::INFINITY), &h).is_err());
    }

    #[test]
    fn sampled_softmax_spot_values() {
        let (mut m, _) = model();
        let h = Mat::row_vector(vec![0.5, -0.1, 0.7, 1.0]);
        assert_eq!(sampled_softmax_loss(&m, &h, 5, &[]).unwrap(), 0.0);
        let e = m.token_embeddings();
        let row = m.store().get(e).row(5).to_vec();
        m.store_mut().get_mut(e).row_mut(6).copy_from_slice(&row);
        let l = sampled_softmax_loss(&m, &h, 5, &[6]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(sampled_softmax_loss(&m, &h, 5, &[6, 5]).is_err());
    }

    #[test]
    fn zero_output_projection_normalises_to_zero() {
        let (mut m, p) = model();
        *m.store_mut().get_mut(p.w_out) = Mat::zeros(4, 4);
        let states = m.encode(&[5, 6, 7], &[]).unwrap();
        let mention = Mention { entity: crate::kg::EntityId(0), start: 1, end: 3 };
        assert_eq!(span_output_repr(&m, &p, &states, &mention).unwrap(), Mat::zeros(1, 4));
        let bad = Mention { entity: crate::kg::EntityId(0), start: 2, end: 2 };
        assert!(span_output_repr(&m, &p, &states, &bad).is_err());
    }

    #[test]
    fn delta_must_be_positive() {
        let cfg = EncoderConfig { d_model: 4, n_layers: 1, n_heads: 1, d_ff: 4, max_len: 6, vocab_size: 9, ..Default::default() };
        let mut m = EncoderModel::new(cfg, Init::Random(1)).unwrap();
        assert!(DecoderParams::register(&mut m, Init::Random(1), 0.0).is_err());
    }

    #[test]
    fn empty_decode_batch() {
        let (m, p) = model();
        let mut g = Graph::new(m.store());
        assert!(decoding_loss_on(&mut g, &m, &p, &[]).unwrap().is_none());
    }
}

//! A small pre-norm transformer encoder with learned absolute positions,
//! GELU feed-forward blocks, a final layer norm, self-attentive pooling
//! heads and an output projection tied to the token embeddings.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::corpus::{TokenId, PAD};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Epsilon for the encoder's own layer norms.
pub const ENCODER_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Standard deviation of the initial embedding rows.
    #[serde(default = "default_embed_std")]
    pub embed_init_std: f64,
}

fn default_embed_std() -> f64 {
    0.1
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 32, n_layers: 2, n_heads: 4, d_ff: 64, max_len: 32, vocab_size: 0, dropout: 0.0, embed_init_std: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Roles that own a separate self-attentive pooling head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolRole {
    /// Counterpart entity name in a pseudo representation.
    Entity,
    /// Relation name in a pseudo representation.
    Relation,
    /// Entity description text.
    Description,
    /// Output span of an injected mention.
    Span,
}

impl PoolRole {
    pub const ALL: [PoolRole; 4] = [PoolRole::Entity, PoolRole::Relation, PoolRole::Description, PoolRole::Span];

    fn index(self) -> usize {
        match self {
            PoolRole::Entity => 0,
            PoolRole::Relation => 1,
            PoolRole::Description => 2,
            PoolRole::Span => 3,
        }
    }

    fn name(self) -> &'static str {
        ["entity", "relation", "description", "span"][self.index()]
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Initialisation used when building a model.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Random(u64),
    Zeros,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    store: ParamStore,
    tokens: ParamId,
    positions: ParamId,
    layers: Vec<LayerIds>,
    final_norm: (ParamId, ParamId),
    pool: [ParamId; 4],
    encoder_blocks: Vec<ParamId>,
}

/// Hidden states of one sequence: index 0 is the embedding layer, index
/// `n_layers` the final (post-norm) layer. Each matrix is `n × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceStates {
    pub layers: Vec<Mat>,
}

impl SequenceStates {
    pub fn final_states(&self) -> &Mat {
        self.layers.last().expect("at least the embedding layer")
    }
}

/// Tape handles for [`SequenceStates`].
#[derive(Debug, Clone)]
pub struct SequenceVars {
    pub layers: Vec<Var>,
}

impl SequenceVars {
    pub fn final_states(&self) -> Var {
        *self.layers.last().expect("at least the embedding layer")
    }
}

pub(crate) struct Initializer {
    rng: Option<ChaCha8Rng>,
}

impl Initializer {
    pub(crate) fn new(init: Init) -> Self {
        match init {
            Init::Random(seed) => Self { rng: Some(ChaCha8Rng::seed_from_u64(seed)) },
            Init::Zeros => Self { rng: None },
        }
    }

    pub(crate) fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        match &mut self.rng {
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Mat::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
            }
            None => Mat::zeros(rows, cols),
        }
    }

    pub(crate) fn constant(&self, rows: usize, cols: usize, value: f64) -> Mat {
        match self.rng {
            Some(_) => Mat::filled(rows, cols, value),
            None => Mat::zeros(rows, cols),
        }
    }
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut ini = Initializer::new(init);
        let mut store = ParamStore::new();
        let w_std = 1.0 / (d as f64).sqrt();
        let tokens = store.register("embed.tokens", ini.normal(config.vocab_size, d, config.embed_init_std));
        let positions = store.register("embed.positions", ini.normal(config.max_len, d, config.embed_init_std));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let norm = |store: &mut ParamStore, name: &str| {
                (
                    store.register(format!("layer{l}.{name}.gain"), ini.constant(1, d, 1.0)),
                    store.register(format!("layer{l}.{name}.bias"), Mat::zeros(1, d)),
                )
            };
            let ln1 = norm(&mut store, "ln1");
            let ln2 = norm(&mut store, "ln2");
            let mut linear = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| {
                (
                    store.register(format!("layer{l}.{name}.weight"), ini.normal(rows, cols, 1.0 / (rows as f64).sqrt())),
                    store.register(format!("layer{l}.{name}.bias"), Mat::zeros(1, cols)),
                )
            };
            let wq = linear(&mut store, "attn.q", d, d);
            let wk = linear(&mut store, "attn.k", d, d);
            let wv = linear(&mut store, "attn.v", d, d);
            let wo = linear(&mut store, "attn.o", d, d);
            let ff1 = linear(&mut store, "ff.in", d, config.d_ff);
            let ff2 = linear(&mut store, "ff.out", config.d_ff, d);
            layers.push(LayerIds { ln1, wq, wk, wv, wo, ln2, ff1, ff2 });
        }
        let final_norm = (
            store.register("final_norm.gain", ini.constant(1, d, 1.0)),
            store.register("final_norm.bias", Mat::zeros(1, d)),
        );
        let pool = PoolRole::ALL.map(|r| store.register(format!("pool.{}", r.name()), ini.normal(d, 1, w_std)));
        let encoder_blocks = store.ids().collect();
        Ok(Self { config, store, tokens, positions, layers, final_norm, pool, encoder_blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Blocks created by the encoder itself (embeddings, layers, final
    /// norm, pooling heads). Blocks registered later by other components
    /// are not included.
    pub fn encoder_blocks(&self) -> &[ParamId] {
        &self.encoder_blocks
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.tokens
    }

    pub fn position_embeddings(&self) -> ParamId {
        self.positions
    }

    pub fn pool_head(&self, role: PoolRole) -> ParamId {
        self.pool[role.index()]
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Invalid(format!("sequence length {} exceeds max_len {}", tokens.len(), self.config.max_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Invalid(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Rows listed in `overrides` take the
    /// given `1 × d` vector in place of the token embedding; the position
    /// embedding is still added.
    pub fn encode_on(
        &self,
        g: &mut Graph<'_>,
        tokens: &[TokenId],
        overrides: &[(usize, Var)],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<SequenceVars> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.d_model;
        for &(p, v) in overrides {
            if p >= n {
                return Err(Error::Invalid(format!("override position {p} outside sequence of {n}")));
            }
            let val = g.value(v);
            if val.shape() != (1, d) {
                return Err(Error::Invalid(format!("override vector has shape {:?}, expected (1, {d})", val.shape())));
            }
            if !val.is_finite() {
                return Err(Error::Invalid("non-finite override vector".into()));
            }
        }
        let rate = self.config.dropout;
        let drop = |g: &mut Graph<'_>, x: Var, rng: &mut Option<&mut dyn RngCore>| -> Var {
            match rng {
                Some(rng) if rate > 0.0 => {
                    let (r, c) = g.value(x).shape();
                    let keep = 1.0 / (1.0 - rate);
                    let mask = Mat::from_vec(r, c, (0..r * c).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect());
                    let m = g.leaf(mask);
                    g.mul(x, m)
                }
                _ => x,
            }
        };

        let emb = g.param(self.tokens);
        let tok = g.gather(emb, tokens);
        let tok = if overrides.is_empty() { tok } else { g.override_rows(tok, overrides) };
        let pos_table = g.param(self.positions);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(pos_table, &positions);
        let x = g.add(tok, pos);
        let mut x = drop(g, x, &mut dropout);
        let mut layers = vec![x];

        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, ids) in self.layers.iter().enumerate() {
            let h = self.norm(g, x, ids.ln1, ENCODER_LN_EPS);
            let q = linear(g, h, ids.wq);
            let k = linear(g, h, ids.wk);
            let v = linear(g, h, ids.wv);
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for hd in 0..self.config.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh);
                let kh = g.slice_cols(k, hd * dh, dh);
                let vh = g.slice_cols(v, hd * dh, dh);
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s);
                heads.push(g.matmul(a, vh));
            }
            let cat = g.concat_cols(&heads);
            let attn = linear(g, cat, ids.wo);
            let attn = drop(g, attn, &mut dropout);
            x = g.add(x, attn);
            let h2 = self.norm(g, x, ids.ln2, ENCODER_LN_EPS);
            let f = linear(g, h2, ids.ff1);
            let f = g.gelu(f);
            let f = linear(g, f, ids.ff2);
            let f = drop(g, f, &mut dropout);
            x = g.add(x, f);
            if li + 1 < self.layers.len() {
                layers.push(x);
            }
        }
        let out = self.norm(g, x, self.final_norm, ENCODER_LN_EPS);
        layers.push(out);
        debug_assert_eq!(layers.len(), self.config.n_layers + 1);
        Ok(SequenceVars { layers })
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, (gain, bias): (ParamId, ParamId), eps: f64) -> Var {
        let gain = g.param(gain);
        let bias = g.param(bias);
        g.layer_norm(x, gain, bias, eps)
    }

    /// Forward pass without recording gradients for later use.
    pub fn encode(&self, tokens: &[TokenId], overrides: &[(usize, Mat)]) -> Result<SequenceStates> {
        let mut g = Graph::new(&self.store);
        let ov: Vec<(usize, Var)> = overrides.iter().map(|(p, m)| (*p, g.leaf(m.clone()))).collect();
        let vars = self.encode_on(&mut g, tokens, &ov, None)?;
        Ok(SequenceStates { layers: vars.layers.iter().map(|&v| g.value(v).clone()).collect() })
    }

    /// Softmax-weighted sum of the rows of `span` (`n × d`), weights from the
    /// role's scoring vector.
    pub fn pool_on(&self, g: &mut Graph<'_>, span: Var, role: PoolRole) -> Var {
        let w = g.param(self.pool_head(role));
        let scores = g.matmul(span, w);
        let scores = g.transpose(scores);
        let weights = g.softmax_rows(scores);
        g.matmul(weights, span)
    }

    pub fn self_attentive_pool(&self, span_states: &Mat, role: PoolRole) -> Result<Mat> {
        if span_states.rows() == 0 {
            return Err(Error::Invalid("empty span".into()));
        }
        let mut g = Graph::new(&self.store);
        let s = g.leaf(span_states.clone());
        let out = self.pool_on(&mut g, s, role);
        Ok(g.value(out).clone())
    }

    /// Tied output projection: `states · Eᵀ`.
    pub fn logits_on(&self, g: &mut Graph<'_>, states: Var) -> Var {
        let emb = g.param(self.tokens);
        g.matmul_t(states, emb)
    }

    pub fn logits(&self, states: &Mat) -> Mat {
        states.matmul_t(self.store.get(self.tokens))
    }
}

fn linear(g: &mut Graph<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Mean of the final-layer states over non-`[PAD]` positions.
pub fn sentence_repr(states: &SequenceStates, tokens: &[TokenId]) -> Result<Mat> {
    let fin = states.final_states();
    if tokens.len() != fin.rows() {
        return Err(Error::Invalid("token count does not match states".into()));
    }
    let keep: Vec<usize> = tokens.iter().enumerate().filter(|(_, &t)| t != PAD).map(|(i, _)| i).collect();
    if keep.is_empty() {
        return Err(Error::Invalid("sequence is all padding".into()));
    }
    let mut sum = Mat::zeros(1, fin.cols());
    for &r in &keep {
        for (s, v) in sum.row_mut(0).iter_mut().zip(fin.row(r)) {
            *s += v;
        }
    }
    let n = keep.len() as f64;
    Ok(sum.map(|v| v / n))
}

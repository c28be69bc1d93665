//! Pseudo token representations built from relation triples.
//!
//! For a mention that is the head of `(h, r, t)`:
//!
//! ```text
//! h_t   = LN(σ(pool_entity(F(t))   · W_et))
//! h_r   = LN(σ(pool_relation(F(r)) · W_r))
//! pseudo = tanh([h_t − h_r ; pool_description(F(desc(h)))] · W_eh)
//! ```
//!
//! and symmetrically `h_h + h_r` when the mention is the tail. `F` is the
//! shared encoder run on the name tokens alone. The pseudo vector replaces
//! the token embedding at every position of the mention span.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::autograd::{Graph, ParamId, Var};
use crate::corpus::{LinkedSentence, Mention, TokenId, Vocabulary};
use crate::encoder::{EncoderModel, Init, Initializer, PoolRole};
use crate::kg::{EntityId, KnowledgeGraph, Side, Triple};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Layer-norm epsilon for the injection and decoding branches. A constant
/// input then normalises to exactly the bias vector.
pub const BRANCH_LN_EPS: f64 = 1e-12;

static CONSTRUCTIONS: AtomicU64 = AtomicU64::new(0);

/// Number of pseudo representations built by this process so far.
pub fn construction_count() -> u64 {
    CONSTRUCTIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Entity,
    Relation,
}

#[derive(Debug, Clone)]
pub struct InjectionParams {
    pub w_et: ParamId,
    pub w_r: ParamId,
    pub w_eh: ParamId,
    pub ln_et: (ParamId, ParamId),
    pub ln_r: (ParamId, ParamId),
}

impl InjectionParams {
    pub fn register(model: &mut EncoderModel, init: Init) -> Self {
        let d = model.config().d_model;
        let mut ini = Initializer::new(init);
        let std = 1.0 / (d as f64).sqrt();
        let store = model.store_mut();
        let w_et = store.register("inject.w_et", ini.normal(d, d, std));
        let w_r = store.register("inject.w_r", ini.normal(d, d, std));
        let w_eh = store.register("inject.w_eh", ini.normal(2 * d, d, 1.0 / (2.0 * d as f64).sqrt()));
        let ln_et = (store.register("inject.ln_et.gain", ini.constant(1, d, 1.0)), store.register("inject.ln_et.bias", Mat::zeros(1, d)));
        let ln_r = (store.register("inject.ln_r.gain", ini.constant(1, d, 1.0)), store.register("inject.ln_r.bias", Mat::zeros(1, d)));
        Self { w_et, w_r, w_eh, ln_et, ln_r }
    }

    pub fn blocks(&self) -> Vec<ParamId> {
        vec![self.w_et, self.w_r, self.w_eh, self.ln_et.0, self.ln_et.1, self.ln_r.0, self.ln_r.1]
    }
}

/// Token ids of every entity name, relation name and description, resolved
/// once against a vocabulary.
#[derive(Debug, Clone)]
pub struct KgTokens {
    entities: Vec<Vec<TokenId>>,
    relations: Vec<Vec<TokenId>>,
    descriptions: Vec<Option<Vec<TokenId>>>,
}

impl KgTokens {
    pub fn new(kg: &KnowledgeGraph, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut entities = Vec::with_capacity(kg.num_entities());
        let mut descriptions = Vec::with_capacity(kg.num_entities());
        for (e, name) in kg.entity_names() {
            let mut ids = vocab.ids(kg.entity_tokens(e));
            if ids.is_empty() {
                return Err(Error::Invalid(format!("entity {name:?} has no tokens")));
            }
            ids.truncate(max_len);
            entities.push(ids);
            descriptions.push(kg.entity_description(e)?.filter(|d| !d.is_empty()).map(|d| {
                let mut ids = vocab.ids(d);
                ids.truncate(max_len);
                ids
            }));
        }
        let relations = kg
            .relation_names()
            .map(|(r, name)| {
                let mut ids = vocab.ids(kg.relation_tokens(r));
                if ids.is_empty() {
                    return Err(Error::Invalid(format!("relation {name:?} has no tokens")));
                }
                ids.truncate(max_len);
                Ok(ids)
            })
            .collect::<Result<_>>()?;
        Ok(Self { entities, relations, descriptions })
    }

    pub fn entity(&self, e: EntityId) -> &[TokenId] {
        &self.entities[e.index()]
    }

    pub fn relation(&self, r: crate::kg::RelationId) -> &[TokenId] {
        &self.relations[r.index()]
    }

    pub fn description(&self, e: EntityId) -> Option<&[TokenId]> {
        self.descriptions[e.index()].as_deref()
    }
}

/// Tape handles of one pseudo construction. `composed` is `h_t − h_r`
/// (head role) or `h_h + h_r` (tail role).
#[derive(Debug, Clone, Copy)]
pub struct PseudoParts {
    pub counterpart: Var,
    pub relation: Var,
    pub composed: Var,
    pub description: Var,
    pub vector: Var,
}

/// Encodes `tokens` standalone, pools, projects, squashes and normalises.
pub fn component_repr_on(
    g: &mut Graph<'_>,
    model: &EncoderModel,
    params: &InjectionParams,
    tokens: &[TokenId],
    branch: Branch,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    let states = model.encode_on(g, tokens, &[], None)?;
    let (role, w, (gain, bias)) = match branch {
        Branch::Entity => (PoolRole::Entity, params.w_et, params.ln_et),
        Branch::Relation => (PoolRole::Relation, params.w_r, params.ln_r),
    };
    let pooled = model.pool_on(g, states.final_states(), role);
    let w = g.param(w);
    let proj = g.matmul(pooled, w);
    let act = g.sigmoid(proj);
    let gain = g.param(gain);
    let bias = g.param(bias);
    Ok(g.layer_norm(act, gain, bias, BRANCH_LN_EPS))
}

pub fn component_repr(model: &EncoderModel, params: &InjectionParams, tokens: &[TokenId], branch: Branch) -> Result<Mat> {
    let mut g = Graph::new(model.store());
    let v = component_repr_on(&mut g, model, params, tokens, branch)?;
    Ok(g.value(v).clone())
}

/// Builds the pseudo vector for the entity at `role` of `triple`.
pub fn pseudo_on(
    g: &mut Graph<'_>,
    model: &EncoderModel,
    params: &InjectionParams,
    toks: &KgTokens,
    triple: &Triple,
    role: Side,
) -> Result<PseudoParts> {
    CONSTRUCTIONS.fetch_add(1, Ordering::Relaxed);
    let (subject, other) = match role {
        Side::Head => (triple.head, triple.tail),
        Side::Tail => (triple.tail, triple.head),
    };
    let counterpart = component_repr_on(g, model, params, toks.entity(other), Branch::Entity)?;
    let relation = component_repr_on(g, model, params, toks.relation(triple.relation), Branch::Relation)?;
    let composed = match role {
        Side::Head => g.sub(counterpart, relation),
        Side::Tail => g.add(counterpart, relation),
    };
    let description = match toks.description(subject) {
        Some(desc) => {
            let states = model.encode_on(g, desc, &[], None)?;
            model.pool_on(g, states.final_states(), PoolRole::Description)
        }
        None => g.leaf(Mat::zeros(1, model.config().d_model)),
    };
    let cat = g.concat_cols(&[composed, description]);
    let w = g.param(params.w_eh);
    let proj = g.matmul(cat, w);
    let vector = g.tanh(proj);
    Ok(PseudoParts { counterpart, relation, composed, description, vector })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoEmbedding {
    pub mention: Option<Mention>,
    pub vector: Vec<f64>,
    pub source_triple: Triple,
    pub role: Side,
}

fn pseudo_checked(
    model: &EncoderModel,
    params: &InjectionParams,
    kg: &KnowledgeGraph,
    toks: &KgTokens,
    triple: &Triple,
    role: Side,
) -> Result<PseudoEmbedding> {
    if !kg.contains(triple) {
        return Err(Error::Invalid(format!("triple {triple:?} not in the graph")));
    }
    let mut g = Graph::new(model.store());
    let parts = pseudo_on(&mut g, model, params, toks, triple, role)?;
    Ok(PseudoEmbedding { mention: None, vector: g.value(parts.vector).data().to_vec(), source_triple: *triple, role })
}

/// Pseudo representation of `triple.head`.
pub fn pseudo_head(model: &EncoderModel, params: &InjectionParams, kg: &KnowledgeGraph, toks: &KgTokens, triple: &Triple) -> Result<PseudoEmbedding> {
    pseudo_checked(model, params, kg, toks, triple, Side::Head)
}

/// Pseudo representation of `triple.tail`.
pub fn pseudo_tail(model: &EncoderModel, params: &InjectionParams, kg: &KnowledgeGraph, toks: &KgTokens, triple: &Triple) -> Result<PseudoEmbedding> {
    pseudo_checked(model, params, kg, toks, triple, Side::Tail)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Picks one of the entity's triples, uniformly and deterministically per
/// `(entity, sentence_id, seed)`. `None` when the entity has no triples.
pub fn choose_triple(kg: &KnowledgeGraph, entity: EntityId, sentence_id: u64, seed: u64) -> Result<Option<(Triple, Side)>> {
    let triples = kg.incident_triples(entity)?;
    if triples.is_empty() {
        return Ok(None);
    }
    let h = mix(mix(mix(seed ^ 0x9e37_79b9_7f4a_7c15) ^ entity.0 as u64) ^ sentence_id);
    let t = triples[(h % triples.len() as u64) as usize];
    let role = if t.head == entity { Side::Head } else { Side::Tail };
    Ok(Some((t, role)))
}

/// Position → vector map covering every token of every selected mention.
pub fn inject<V: Copy>(sentence: &LinkedSentence, selected: &[(Mention, V)]) -> Result<Vec<(usize, V)>> {
    let mut map: BTreeMap<usize, V> = BTreeMap::new();
    for (m, v) in selected {
        if m.is_empty() || m.end > sentence.tokens.len() {
            return Err(Error::Invalid(format!("mention {m:?} outside the sentence")));
        }
        for p in m.positions() {
            if map.insert(p, *v).is_some() {
                return Err(Error::Invalid(format!("overlapping overrides at position {p}")));
            }
        }
    }
    Ok(map.into_iter().collect())
}

//! Pretraining loop: MLM masking, on-policy long-tail detection, pseudo
//! token injection, relational decoding and the joint objective.
//!
//! A step is split into [`prepare_batch`], which makes every discrete choice
//! (sentences, detection, masks, triples, negatives) against a frozen
//! snapshot of the weights, and [`forward_batch`], which is a pure
//! differentiable function of the parameters given that batch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Gradients, Graph, ParamId, Var};
use crate::corpus::{FrequencyTable, LinkedSentence, Mention, TokenId, Vocabulary, MASK};
use crate::decoder::{decoding_loss_on, DecodeInput, DecodingTarget};
use crate::detector::{detect_all, DetectionConfig, Policy};
use crate::injection::{choose_triple, inject, pseudo_on, KgTokens};
use crate::kg::{KnowledgeGraph, Side, Triple};
use crate::model::DkplmModel;
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lambda1")]
    pub lambda1: f64,
    #[serde(default = "d_mlm_rate")]
    pub mlm_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_negatives")]
    pub n_negatives: usize,
    #[serde(default = "d_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_schedule")]
    pub lr_schedule: LrSchedule,
    /// Global-norm gradient clipping; `None` disables it.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Write `step_<n>.ckpt` every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn d_lambda1() -> f64 {
    0.5
}
fn d_mlm_rate() -> f64 {
    0.15
}
fn d_batch() -> usize {
    8
}
fn d_steps() -> usize {
    500
}
fn d_lr() -> f64 {
    0.05
}
fn d_negatives() -> usize {
    20
}
fn d_optimizer() -> Optimizer {
    Optimizer::Sgd
}
fn d_momentum() -> f64 {
    0.9
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_schedule() -> LrSchedule {
    LrSchedule::Constant
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("lambda1", self.lambda1)?;
        unit("mlm_rate", self.mlm_rate)?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train momentum/beta values must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("train.adam_eps must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("train.grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Masked positions and their original tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSentence {
    pub tokens: Vec<TokenId>,
    pub labels: Vec<(usize, TokenId)>,
}

/// Masks `⌊rate · eligible⌋` positions outside `excluded`: 80% become
/// `[MASK]`, 10% a random ordinary word, 10% stay unchanged.
pub fn mlm_mask(tokens: &[TokenId], rate: f64, rng: &mut impl Rng, excluded: &[Mention], vocab: &Vocabulary) -> MaskedSentence {
    let eligible: Vec<usize> = (0..tokens.len()).filter(|p| !excluded.iter().any(|m| m.positions().contains(p))).collect();
    let k = ((rate.clamp(0.0, 1.0) * eligible.len() as f64).floor() as usize).min(eligible.len());
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
    chosen.sort_unstable();
    let mut out = tokens.to_vec();
    let words = vocab.word_range();
    let mut labels = Vec::with_capacity(k);
    for p in chosen {
        let u: f64 = rng.gen();
        if u < 0.8 {
            out[p] = MASK;
        } else if u < 0.9 && !words.is_empty() {
            out[p] = rng.gen_range(words.clone());
        }
        labels.push((p, tokens[p]));
    }
    MaskedSentence { tokens: out, labels }
}

/// `λ1 · L_MLM + (1 − λ1) · L_De`.
pub fn total_loss(l_mlm: f64, l_de: f64, lambda1: f64) -> Result<f64> {
    if !(l_mlm.is_finite() && l_de.is_finite()) || l_mlm < 0.0 || l_de < 0.0 {
        return Err(Error::Numerical(format!("losses must be finite and non-negative (L_MLM={l_mlm}, L_De={l_de})")));
    }
    Ok(lambda1 * l_mlm + (1.0 - lambda1) * l_de)
}

/// Everything a run needs besides the model.
pub struct TrainData<'a> {
    pub kg: &'a KnowledgeGraph,
    pub vocab: &'a Vocabulary,
    pub toks: &'a KgTokens,
    pub corpus: &'a [LinkedSentence],
    pub freq: &'a FrequencyTable,
    /// Must have `r_freq` resolved.
    pub detection: &'a DetectionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub mention: Mention,
    pub triple: Triple,
    pub role: Side,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub sentence_id: u64,
    pub input: Vec<TokenId>,
    pub labels: Vec<(usize, TokenId)>,
    pub injections: Vec<Injection>,
    /// One per injection, same order.
    pub targets: Vec<DecodingTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
    /// Seeds the dropout masks when the encoder uses dropout.
    pub dropout_seed: u64,
}

impl TrainingBatch {
    pub fn n_injected(&self) -> usize {
        self.items.iter().map(|i| i.injections.len()).sum()
    }

    pub fn n_targets(&self) -> usize {
        self.items.iter().map(|i| i.targets.len()).sum()
    }

    pub fn n_labels(&self) -> usize {
        self.items.iter().map(|i| i.labels.len()).sum()
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Samples sentences and fixes every discrete decision of one step using
/// the current (frozen) weights for detection.
pub fn prepare_batch(model: &DkplmModel, data: &TrainData<'_>, cfg: &TrainConfig, step: usize) -> Result<TrainingBatch> {
    if data.corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let mut rng = step_rng(cfg.seed, step);
    let ids: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..data.corpus.len())).collect();
    let selected: Vec<Vec<Mention>> = if data.detection.policy == Policy::None {
        vec![Vec::new(); ids.len()]
    } else {
        let sentences: Vec<(u64, &LinkedSentence)> = ids.iter().map(|&i| (i as u64, &data.corpus[i])).collect();
        detect_all(&sentences, data.kg, data.freq, &model.encoder, data.detection)?
            .into_iter()
            .map(|r| r.selected().copied().collect())
            .collect()
    };
    let triple_seed = cfg.seed.wrapping_add(step as u64);
    let mut items = Vec::with_capacity(ids.len());
    for (&i, mentions) in ids.iter().zip(selected) {
        let sentence = &data.corpus[i];
        let mut injections = Vec::new();
        for m in mentions {
            if let Some((triple, role)) = choose_triple(data.kg, m.entity, i as u64, triple_seed)? {
                injections.push(Injection { mention: m, triple, role });
            }
        }
        let spans: Vec<Mention> = injections.iter().map(|j| j.mention).collect();
        let masked = mlm_mask(&sentence.tokens, cfg.mlm_rate, &mut rng, &spans, data.vocab);
        let mut targets = Vec::with_capacity(injections.len());
        for j in &injections {
            targets.push(DecodingTarget::build(data.kg, data.toks, data.vocab, j.triple, j.role, j.mention, cfg.n_negatives, &mut rng)?);
        }
        items.push(BatchItem { sentence_id: i as u64, input: masked.tokens, labels: masked.labels, injections, targets });
    }
    Ok(TrainingBatch { items, dropout_seed: rng.gen() })
}

/// Tape handles of one step's objectives.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub mlm: Var,
    pub de: Var,
    pub total: Var,
    pub pseudo_constructed: usize,
}

/// Differentiable forward pass over a prepared batch.
///
/// `L_MLM` is the mean cross-entropy over all masked positions in the batch
/// (0 without labels); `L_De` the mean decoding loss over targets.
pub fn forward_batch(g: &mut Graph<'_>, model: &DkplmModel, data: &TrainData<'_>, batch: &TrainingBatch, lambda1: f64) -> Result<StepLosses> {
    let enc = &model.encoder;
    let mut mlm_terms = Vec::new();
    let mut n_labels = 0usize;
    let mut de_relations = Vec::new();
    let mut de_states = Vec::new();
    let mut pseudo_constructed = 0;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(batch.dropout_seed);
    let use_dropout = enc.config().dropout > 0.0;
    for item in &batch.items {
        for (j, t) in item.injections.iter().zip(&item.targets) {
            if j.mention != t.mention {
                return Err(Error::Invalid("decoding target does not match its injection".into()));
            }
            for &(p, _) in &item.labels {
                if j.mention.positions().contains(&p) {
                    return Err(Error::Invalid(format!("masked position {p} inside an injected span")));
                }
            }
        }
        let mut relations = Vec::with_capacity(item.injections.len());
        let mut selected = Vec::with_capacity(item.injections.len());
        for j in &item.injections {
            let parts = pseudo_on(g, enc, &model.injection, data.toks, &j.triple, j.role)?;
            pseudo_constructed += 1;
            relations.push(parts.relation);
            selected.push((j.mention, parts.vector));
        }
        let sentence = LinkedSentence { tokens: item.input.clone(), mentions: Vec::new() };
        let overrides = inject(&sentence, &selected)?;
        let rng: Option<&mut dyn rand::RngCore> = if use_dropout { Some(&mut drop_rng) } else { None };
        let states = enc.encode_on(g, &item.input, &overrides, rng)?;
        let fin = states.final_states();
        if !item.labels.is_empty() {
            let rows: Vec<usize> = item.labels.iter().map(|&(p, _)| p).collect();
            let targets: Vec<usize> = item.labels.iter().map(|&(_, t)| t).collect();
            let picked = g.gather(fin, &rows);
            let logits = enc.logits_on(g, picked);
            mlm_terms.push(g.cross_entropy(logits, &targets));
            n_labels += rows.len();
        }
        for r in relations {
            de_relations.push(r);
            de_states.push(fin);
        }
    }
    let mlm = if mlm_terms.is_empty() {
        g.leaf(Mat::zeros(1, 1))
    } else {
        let s = g.add_n(&mlm_terms);
        g.scale(s, 1.0 / n_labels as f64)
    };
    let targets: Vec<&DecodingTarget> = batch.items.iter().flat_map(|i| i.targets.iter()).collect();
    let inputs: Vec<DecodeInput<'_>> = targets
        .iter()
        .zip(de_states.iter().zip(&de_relations))
        .map(|(t, (&final_states, &relation))| DecodeInput { target: t, final_states, relation })
        .collect();
    let de = match decoding_loss_on(g, enc, &model.decoder, &inputs)? {
        Some(v) => v,
        None => g.leaf(Mat::zeros(1, 1)),
    };
    let a = g.scale(mlm, lambda1);
    let b = g.scale(de, 1.0 - lambda1);
    let total = g.add(a, b);
    Ok(StepLosses { mlm, de, total, pseudo_constructed })
}

/// Optimizer state over all parameter blocks.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    first: Option<Gradients>,
    second: Option<Gradients>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer) -> Self {
        Self { kind, first: None, second: None, t: 0 }
    }

    pub fn apply(&mut self, model: &mut DkplmModel, grads: &Gradients, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let store = model.store_mut();
        let ids: Vec<ParamId> = store.ids().collect();
        match self.kind {
            Optimizer::Sgd => {
                for id in ids {
                    let g = grads.get(id);
                    for (p, d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * d;
                    }
                }
            }
            Optimizer::Momentum => {
                let vel = self.first.get_or_insert_with(|| Gradients::zeros_like(store));
                for id in ids {
                    let g = grads.get(id);
                    let v = vel.get_mut(id);
                    for ((p, vv), d) in store.get_mut(id).data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = cfg.momentum * *vv + d;
                        *p -= lr * *vv;
                    }
                }
            }
            Optimizer::Adam => {
                let m1 = self.first.get_or_insert_with(|| Gradients::zeros_like(store));
                let m2 = self.second.get_or_insert_with(|| Gradients::zeros_like(store));
                let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
                let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
                for id in ids {
                    let g = grads.get(id);
                    let a = m1.get_mut(id);
                    let b = m2.get_mut(id);
                    for (((p, ma), mb), d) in store.get_mut(id).data_mut().iter_mut().zip(a.data_mut()).zip(b.data_mut()).zip(g.data()) {
                        *ma = cfg.beta1 * *ma + (1.0 - cfg.beta1) * d;
                        *mb = cfg.beta2 * *mb + (1.0 - cfg.beta2) * d * d;
                        *p -= lr * (*ma / c1) / ((*mb / c2).sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
    }
}

/// One metrics line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(rename = "L_MLM")]
    pub l_mlm: f64,
    #[serde(rename = "L_De")]
    pub l_de: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub n_injected: usize,
    pub n_targets: usize,
}

/// Gradients of one prepared batch plus its metrics; `delta_d`'s gradient
/// is zeroed unless it is trainable.
pub fn batch_gradients(
    model: &DkplmModel,
    data: &TrainData<'_>,
    batch: &TrainingBatch,
    lambda1: f64,
    delta_trainable: bool,
) -> Result<(Gradients, f64, f64, f64)> {
    let mut g = Graph::new(model.store());
    let losses = forward_batch(&mut g, model, data, batch, lambda1)?;
    let (l_mlm, l_de) = (g.scalar(losses.mlm), g.scalar(losses.de));
    let l_total = total_loss(l_mlm, l_de, lambda1)?;
    let mut grads = g.param_gradients(losses.total)?;
    if !delta_trainable {
        grads.get_mut(model.decoder.delta_d).scale_assign(0.0);
    }
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok((grads, l_mlm, l_de, l_total))
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn initial(&self) -> PathBuf {
        self.dir.join("initial.ckpt")
    }
    pub fn last_good(&self) -> PathBuf {
        self.dir.join("last_good.ckpt")
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
    pub fn periodic(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step}.ckpt"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Runs `cfg.steps` updates, writing checkpoints and metrics to `out`.
///
/// On a non-finite loss or gradient the run stops, `last_good.ckpt` holds
/// the last finite weights, and a [`Error::Numerical`] is returned.
pub fn train(
    model: &mut DkplmModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    delta_trainable: bool,
    out: &TrainOutputs,
) -> Result<TrainSummary> {
    cfg.validate()?;
    data.detection.validate()?;
    if data.detection.r_freq.is_none() {
        return Err(Error::Config("detection.r_freq must be resolved before training".into()));
    }
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    model.save(&out.initial(), Some(data.vocab))?;
    model.save(&out.last_good(), Some(data.vocab))?;
    let metrics_path = out.metrics();
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = prepare_batch(model, data, cfg, step)?;
        let (mut grads, l_mlm, l_de, l_total) = match batch_gradients(model, data, &batch, cfg.lambda1, delta_trainable) {
            Ok(v) => v,
            Err(e @ Error::Numerical(_)) => {
                log::error!("step {step}: {e}; last good weights kept in {}", out.last_good().display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(c) = cfg.grad_clip {
            let n = grads.global_norm();
            if n > c {
                grads.scale(c / n);
            }
        }
        let lr = match cfg.lr_schedule {
            LrSchedule::Constant => cfg.lr,
            LrSchedule::LinearDecay => cfg.lr * (1.0 - step as f64 / cfg.steps as f64),
        };
        opt.apply(model, &grads, cfg, lr);
        if !model.store().is_finite() {
            let (good, _) = DkplmModel::load(&out.last_good())?;
            *model = good;
            let e = Error::Numerical(format!("non-finite parameters after step {step}"));
            log::error!("{e}; last good weights kept in {}", out.last_good().display());
            return Err(e);
        }
        let m = StepMetrics { step, l_mlm, l_de, l_total, n_injected: batch.n_injected(), n_targets: batch.n_targets() };
        writeln!(log, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&metrics_path, e))?;
        metrics.push(m);
        model.save(&out.last_good(), Some(data.vocab))?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            model.save(&out.periodic(step + 1), Some(data.vocab))?;
        }
    }
    let final_checkpoint = if cfg.steps == 0 { out.initial() } else { out.final_ckpt() };
    if cfg.steps > 0 {
        model.save(&final_checkpoint, Some(data.vocab))?;
    }
    Ok(TrainSummary { metrics, final_checkpoint })
}

/// Mean of `values[end - window .. end]` (clamped at the start).
pub fn windowed_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let end = end.min(values.len());
    let start = end.saturating_sub(window);
    let slice = &values[start..end];
    slice.iter().sum::<f64>() / slice.len().max(1) as f64
}

/// Reads a metrics JSON-lines file.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.display().to_string(), line: i + 1, msg: e.to_string() })
        })
        .collect()
}

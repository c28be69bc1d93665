//! Knowledge-aware long-tail entity detection.
//!
//! Each mention gets `KLT = 1[Freq < r_freq] · SI · KC`, where `SI` is the
//! reciprocal cosine between the sentence representation before and after
//! replacing the mention with `[UHN]`, and `KC` the clamped multi-hop
//! neighbour count in the graph. Mentions with a positive score are
//! candidates; under the long-tail policy those at or below the sentence's
//! candidate average are selected for injection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{FrequencyTable, LinkedSentence, Mention};
use crate::encoder::{sentence_repr, EncoderModel};
use crate::kg::KnowledgeGraph;
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    LongTail,
    HighFrequency,
    All,
    None,
}

impl std::str::FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long_tail" => Ok(Policy::LongTail),
            "high_frequency" => Ok(Policy::HighFrequency),
            "all" => Ok(Policy::All),
            "none" => Ok(Policy::None),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

/// Which side of the candidate average the long-tail policy keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionDirection {
    /// `klt <= average`.
    #[default]
    AtOrBelow,
    /// `klt >= average`.
    AtOrAbove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    /// Frequency threshold; `None` means "use the corpus median", resolved
    /// by [`DetectionConfig::resolve`] before detection runs.
    #[serde(default)]
    pub r_freq: Option<u64>,
    #[serde(default = "d_r_hop")]
    pub r_hop: u32,
    #[serde(default = "d_r_min")]
    pub r_min: u32,
    #[serde(default = "d_r_max")]
    pub r_max: u32,
    #[serde(default = "d_floor")]
    pub cosine_floor: f64,
    #[serde(default = "d_policy")]
    pub policy: Policy,
    #[serde(default)]
    pub selection_direction: SelectionDirection,
}

fn d_r_hop() -> u32 {
    2
}
fn d_r_min() -> u32 {
    1
}
fn d_r_max() -> u32 {
    30
}
fn d_floor() -> f64 {
    1e-6
}
fn d_policy() -> Policy {
    Policy::LongTail
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            r_freq: None,
            r_hop: d_r_hop(),
            r_min: d_r_min(),
            r_max: d_r_max(),
            cosine_floor: d_floor(),
            policy: d_policy(),
            selection_direction: SelectionDirection::default(),
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.r_freq {
            if r < 1 {
                return Err(Error::Config("detection.r_freq must be at least 1".into()));
            }
        }
        if self.r_hop < 1 {
            return Err(Error::Config("detection.r_hop must be at least 1".into()));
        }
        if self.r_min > self.r_max {
            return Err(Error::Config(format!("detection.r_min {} exceeds r_max {}", self.r_min, self.r_max)));
        }
        if !(self.cosine_floor > 0.0) {
            return Err(Error::Config("detection.cosine_floor must be positive".into()));
        }
        Ok(())
    }

    /// Fills a missing `r_freq` with the table's median frequency (at least 1).
    pub fn resolve(&mut self, table: &FrequencyTable) {
        if self.r_freq.is_none() {
            self.r_freq = Some(table.median().unwrap_or(1).max(1));
        }
    }

    fn threshold(&self) -> Result<u64> {
        self.r_freq.ok_or_else(|| Error::Config("detection.r_freq unresolved".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionScore {
    pub mention: Mention,
    pub freq: u64,
    pub si: f64,
    pub kc: u32,
    pub klt: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub sentence_id: u64,
    pub scores: Vec<MentionScore>,
    /// Mean KLT over candidates (`klt > 0`); `None` without candidates.
    pub average_klt: Option<f64>,
}

impl DetectionReport {
    pub fn selected(&self) -> impl Iterator<Item = &Mention> {
        self.scores.iter().filter(|s| s.selected).map(|s| &s.mention)
    }

    /// One JSON-lines record, with entities by name.
    pub fn to_json(&self, kg: &KnowledgeGraph) -> serde_json::Value {
        json!({
            "sentence_id": self.sentence_id,
            "mentions": self.scores.iter().map(|s| json!({
                "entity": kg.entity_name(s.mention.entity),
                "span": [s.mention.start, s.mention.end],
                "freq": s.freq,
                "si": s.si,
                "kc": s.kc,
                "klt": s.klt,
                "selected": s.selected,
            })).collect::<Vec<_>>(),
        })
    }
}

/// `1 / max(cos(h_o, h_rep), floor)`.
pub fn si_from_reprs(h_o: &Mat, h_rep: &Mat, floor: f64) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in h_o.data().iter().zip(h_rep.data()) {
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateRepresentation);
    }
    let cos = dot / denom;
    Ok(1.0 / cos.max(floor))
}

pub fn semantic_importance(model: &EncoderModel, sentence: &LinkedSentence, mention: &Mention, floor: f64) -> Result<f64> {
    let h_o = sentence_repr(&model.encode(&sentence.tokens, &[])?, &sentence.tokens)?;
    replaced_si(model, sentence, mention, &h_o, floor)
}

fn replaced_si(model: &EncoderModel, sentence: &LinkedSentence, mention: &Mention, h_o: &Mat, floor: f64) -> Result<f64> {
    if mention.is_empty() || mention.end > sentence.tokens.len() {
        return Err(Error::Invalid(format!("mention {mention:?} outside the sentence")));
    }
    let replaced = sentence.with_mention_replaced(mention);
    let h_rep = sentence_repr(&model.encode(&replaced, &[])?, &replaced)?;
    si_from_reprs(h_o, &h_rep, floor)
}

pub fn klt_score(freq: u64, si: f64, kc: u32, r_freq: u64) -> f64 {
    if freq < r_freq {
        si * kc as f64
    } else {
        0.0
    }
}

pub fn detect(
    sentence_id: u64,
    sentence: &LinkedSentence,
    kg: &KnowledgeGraph,
    freq: &FrequencyTable,
    model: &EncoderModel,
    cfg: &DetectionConfig,
) -> Result<DetectionReport> {
    let r_freq = cfg.threshold()?;
    if sentence.mentions.is_empty() {
        return Ok(DetectionReport { sentence_id, scores: Vec::new(), average_klt: None });
    }
    let h_o = sentence_repr(&model.encode(&sentence.tokens, &[])?, &sentence.tokens)?;
    let mut scores = Vec::with_capacity(sentence.mentions.len());
    for m in &sentence.mentions {
        let f = freq.get(m.entity);
        let kc = kg.knowledge_connectivity(m.entity, cfg.r_hop, cfg.r_min, cfg.r_max)?;
        let si = replaced_si(model, sentence, m, &h_o, cfg.cosine_floor)?;
        let klt = klt_score(f, si, kc, r_freq);
        scores.push(MentionScore { mention: *m, freq: f, si, kc, klt, selected: false });
    }
    let (sum, count) = scores.iter().filter(|s| s.klt > 0.0).fold((0.0, 0usize), |(s, c), x| (s + x.klt, c + 1));
    let average_klt = (count > 0).then(|| sum / count as f64);
    for s in &mut scores {
        s.selected = match cfg.policy {
            Policy::None => false,
            Policy::All => true,
            Policy::HighFrequency => s.freq >= r_freq,
            Policy::LongTail => match (average_klt, cfg.selection_direction) {
                (Some(avg), SelectionDirection::AtOrBelow) => s.klt > 0.0 && s.klt <= avg,
                (Some(avg), SelectionDirection::AtOrAbove) => s.klt > 0.0 && s.klt >= avg,
                (None, _) => false,
            },
        };
    }
    Ok(DetectionReport { sentence_id, scores, average_klt })
}

/// [`detect`] over many sentences in parallel; output order follows input.
pub fn detect_all(
    sentences: &[(u64, &LinkedSentence)],
    kg: &KnowledgeGraph,
    freq: &FrequencyTable,
    model: &EncoderModel,
    cfg: &DetectionConfig,
) -> Result<Vec<DetectionReport>> {
    sentences.par_iter().map(|&(id, s)| detect(id, s, kg, freq, model, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn si_spot_values() {
        let a = Mat::row_vector(vec![1.0, 0.0]);
        assert_eq!(si_from_reprs(&a, &a, 1e-6).unwrap(), 1.0);
        let b = Mat::row_vector(vec![0.5, 0.75f64.sqrt()]);
        assert!((si_from_reprs(&a, &b, 1e-6).unwrap() - 2.0).abs() < 1e-12);
        let orth = Mat::row_vector(vec![0.0, 3.0]);
        assert!((si_from_reprs(&a, &orth, 1e-6).unwrap() - 1e6).abs() < 1e-3);
        let neg = Mat::row_vector(vec![-1.0, 0.0]);
        assert!((si_from_reprs(&a, &neg, 1e-6).unwrap() - 1e6).abs() < 1e-3);
        assert!(matches!(si_from_reprs(&a, &Mat::zeros(1, 2), 1e-6), Err(Error::DegenerateRepresentation)));
    }

    #[test]
    fn klt_boundary_and_arithmetic() {
        assert_eq!(klt_score(5, 3.0, 4, 5), 0.0);
        assert_eq!(klt_score(0, 2.0, 5, 5), 10.0);
    }

    #[test]
    fn config_validation() {
        let c = DetectionConfig { r_min: 4, r_max: 3, ..Default::default() };
        assert!(c.validate().is_err());
        let c = DetectionConfig { cosine_floor: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        assert!("sideways".parse::<Policy>().is_err());
        let mut c = DetectionConfig::default();
        c.resolve(&FrequencyTable::from_counts([(crate::EntityId(0), 1), (crate::EntityId(1), 4), (crate::EntityId(2), 9)]));
        assert_eq!(c.r_freq, Some(4));
    }

    proptest! {
        #[test]
        fn klt_matches_oracle(freq in 0u64..50, si in 0.01f64..100.0, kc in 0u32..40, r in 1u64..50) {
            let oracle = if freq < r { si * f64::from(kc) } else { 0.0 };
            prop_assert_eq!(klt_score(freq, si, kc, r), oracle);
        }

        #[test]
        fn klt_monotone(freq in 0u64..10, si in 0.5f64..10.0, ds in 0.0f64..5.0, kc in 0u32..30, dk in 0u32..5) {
            let r = 5;
            let base = klt_score(freq, si, kc, r);
            prop_assert!(klt_score(freq, si + ds, kc, r) >= base);
            prop_assert!(klt_score(freq, si, kc + dk, r) >= base);
            if freq >= r {
                prop_assert_eq!(base, 0.0);
            }
        }
    }
}

//! Zero-shot cloze probing with macro-averaged precision at 1.
//!
//! Inference runs the plain encoder: no graph access, no pseudo tokens.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabulary, MASK};
use crate::encoder::EncoderModel;
use crate::{Error, Result};

/// One line of a probe file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub template: String,
    pub answer: String,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClozeQuery {
    pub tokens: Vec<TokenId>,
    pub answer: TokenId,
    pub relation: String,
}

impl ClozeQuery {
    pub fn new(tokens: Vec<TokenId>, answer: TokenId, relation: impl Into<String>) -> Result<Self> {
        let q = Self { tokens, answer, relation: relation.into() };
        q.mask_position()?;
        Ok(q)
    }

    pub fn mask_position(&self) -> Result<usize> {
        let mut it = self.tokens.iter().enumerate().filter(|(_, &t)| t == MASK).map(|(i, _)| i);
        match (it.next(), it.next()) {
            (Some(p), None) => Ok(p),
            (None, _) => Err(Error::Invalid("cloze template has no [MASK]".into())),
            (Some(_), Some(_)) => Err(Error::Invalid("cloze template has more than one [MASK]".into())),
        }
    }

    /// Tokenises a record; the literal `[MASK]` marks the slot and the
    /// answer must be a single in-vocabulary word.
    pub fn from_record(rec: &ProbeRecord, vocab: &Vocabulary) -> Result<Self> {
        let tokens = rec
            .template
            .split_whitespace()
            .map(|w| if w == "[MASK]" { MASK } else { vocab.id(&w.to_lowercase()) })
            .collect();
        let answer_words: Vec<String> = rec.answer.split_whitespace().map(str::to_lowercase).collect();
        let [answer] = answer_words.as_slice() else {
            return Err(Error::Invalid(format!("answer {:?} is not a single token", rec.answer)));
        };
        let answer = vocab.get(answer).ok_or_else(|| Error::Invalid(format!("answer {:?} not in the vocabulary", rec.answer)))?;
        Self::new(tokens, answer, rec.relation.clone())
    }
}

pub fn read_probe_file(path: &Path) -> Result<Vec<ProbeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { path: path.display().to_string(), line: i + 1, msg: e.to_string() }))
        .collect()
}

pub fn write_probe_file(path: &Path, records: &[ProbeRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Whole vocabulary ordered by the `[MASK]`-position logit, descending;
/// ties go to the lower id.
pub fn cloze_predict(model: &EncoderModel, query: &ClozeQuery) -> Result<Vec<TokenId>> {
    let p = query.mask_position()?;
    let states = model.encode(&query.tokens, &[])?;
    let logits = model.logits(&states.final_states().select_rows(&[p]));
    Ok(rank_logits(logits.row(0)))
}

/// Indices sorted by value descending, ties ascending by index.
pub fn rank_logits(logits: &[f64]) -> Vec<TokenId> {
    let mut order: Vec<TokenId> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub per_relation: BTreeMap<String, f64>,
    pub macro_p_at_1: f64,
    /// 1-based rank of each query's answer, in input order.
    #[serde(skip)]
    pub ranks: Vec<usize>,
}

impl ProbeResult {
    pub fn write_ranks_tsv(&self, path: &Path, queries: &[ClozeQuery], vocab: Option<&Vocabulary>) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "query\trelation\tanswer\trank").expect("write to vec");
        for (i, (q, r)) in queries.iter().zip(&self.ranks).enumerate() {
            let answer = vocab.map_or_else(|| q.answer.to_string(), |v| v.token(q.answer).to_string());
            writeln!(out, "{i}\t{}\t{answer}\t{r}", q.relation).expect("write to vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Macro P@1 from per-query ranks and relation tags.
pub fn aggregate(queries: &[ClozeQuery], ranks: Vec<usize>) -> Result<ProbeResult> {
    if queries.is_empty() {
        return Err(Error::Invalid("empty query set".into()));
    }
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (q, &r) in queries.iter().zip(&ranks) {
        let e = groups.entry(q.relation.as_str()).or_default();
        e.0 += usize::from(r == 1);
        e.1 += 1;
    }
    let per_relation: BTreeMap<String, f64> = groups.into_iter().map(|(k, (hit, n))| (k.to_string(), hit as f64 / n as f64)).collect();
    let macro_p_at_1 = per_relation.values().sum::<f64>() / per_relation.len() as f64;
    Ok(ProbeResult { per_relation, macro_p_at_1, ranks })
}

pub fn evaluate(model: &EncoderModel, queries: &[ClozeQuery]) -> Result<ProbeResult> {
    if queries.is_empty() {
        return Err(Error::Invalid("empty query set".into()));
    }
    let ranks = queries
        .par_iter()
        .map(|q| {
            let order = cloze_predict(model, q)?;
            Ok(order.iter().position(|&t| t == q.answer).map_or(order.len() + 1, |p| p + 1))
        })
        .collect::<Result<Vec<usize>>>()?;
    aggregate(queries, ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Init};
    use proptest::prelude::*;

    fn q(rel: &str) -> ClozeQuery {
        ClozeQuery::new(vec![5, 6, MASK], 7, rel).unwrap()
    }

    #[test]
    fn mask_count_is_checked() {
        assert!(ClozeQuery::new(vec![5, 6], 7, "r").is_err());
        assert!(ClozeQuery::new(vec![MASK, 6, MASK], 7, "r").is_err());
    }

    #[test]
    fn ties_rank_by_id() {
        assert_eq!(rank_logits(&[0.0; 5]), vec![0, 1, 2, 3, 4]);
        assert_eq!(rank_logits(&[1.0, 3.0, 3.0, 2.0]), vec![1, 2, 3, 0]);
    }

    #[test]
    fn zero_model_ranks_ascending() {
        let cfg = EncoderConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, max_len: 8, vocab_size: 9, ..Default::default() };
        let m = EncoderModel::new(cfg, Init::Zeros).unwrap();
        assert_eq!(cloze_predict(&m, &q("r")).unwrap(), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn macro_is_unweighted() {
        let qs = vec![q("a"), q("b"), q("b"), q("b")];
        let r = aggregate(&qs, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(r.per_relation["a"], 1.0);
        assert_eq!(r.per_relation["b"], 0.0);
        assert_eq!(r.macro_p_at_1, 0.5);
        assert_eq!(aggregate(&qs, vec![1; 4]).unwrap().macro_p_at_1, 1.0);
        assert_eq!(aggregate(&qs, vec![2; 4]).unwrap().macro_p_at_1, 0.0);
        assert!(aggregate(&[], vec![]).is_err());
    }

    #[test]
    fn records_parse() {
        let v = Vocabulary::from_words(["alpha", "born", "in", "beta"]);
        let rec = ProbeRecord { template: "Alpha born in [MASK]".into(), answer: "beta".into(), relation: "born in".into() };
        let q = ClozeQuery::from_record(&rec, &v).unwrap();
        assert_eq!(q.mask_position().unwrap(), 3);
        assert_eq!(q.answer, v.get("beta").unwrap());
        let bad = ProbeRecord { answer: "beta alpha".into(), ..rec };
        assert!(ClozeQuery::from_record(&bad, &v).is_err());
    }

    proptest! {
        #[test]
        fn macro_invariant_to_order_and_duplication(ranks in proptest::collection::vec((0usize..3, 1usize..4), 1..30), seed in any::<u64>()) {
            let qs: Vec<ClozeQuery> = ranks.iter().map(|(r, _)| q(&format!("r{r}"))).collect();
            let rk: Vec<usize> = ranks.iter().map(|x| x.1).collect();
            let base = aggregate(&qs, rk.clone()).unwrap().macro_p_at_1;

            let mut idx: Vec<usize> = (0..qs.len()).collect();
            let n = idx.len();
            for i in 0..n {
                let j = (seed.wrapping_mul(i as u64 + 7) % n as u64) as usize;
                idx.swap(i, j);
            }
            let pq: Vec<ClozeQuery> = idx.iter().map(|&i| qs[i].clone()).collect();
            let pr: Vec<usize> = idx.iter().map(|&i| rk[i]).collect();
            prop_assert_eq!(aggregate(&pq, pr).unwrap().macro_p_at_1, base);

            let dq: Vec<ClozeQuery> = qs.iter().chain(qs.iter()).cloned().collect();
            let dr: Vec<usize> = rk.iter().chain(rk.iter()).copied().collect();
            prop_assert!((aggregate(&dq, dr).unwrap().macro_p_at_1 - base).abs() < 1e-15);
        }
    }
}

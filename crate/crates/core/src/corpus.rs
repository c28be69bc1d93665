//! Corpus ingestion: vocabulary, dictionary entity linking, entity
//! frequencies and the rank-frequency power-law fit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kg::{name_tokens, EntityId, KnowledgeGraph};
use crate::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const UHN: TokenId = 2;
pub const CLS: TokenId = 3;
pub const UNK: TokenId = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[MASK]", "[UHN]", "[CLS]", "[UNK]"];

/// Word-level vocabulary. Ids 0..=4 are the special tokens in the order
/// `[PAD] [MASK] [UHN] [CLS] [UNK]`; ordinary words follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !w.is_empty() && !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_token_list(tokens).expect("specials are first")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Invalid("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Every word of the corpus (anchors resolved to surface text), the
    /// graph's entity and relation names, and its descriptions.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, kg: &KnowledgeGraph) -> Self {
        let mut words = Vec::new();
        for s in sentences {
            for seg in segments(s) {
                match seg {
                    Segment::Text(t) => words.extend(name_tokens(t)),
                    Segment::Anchor { surface, .. } => words.extend(name_tokens(surface)),
                }
            }
        }
        for (e, _) in kg.entity_names() {
            words.extend(kg.entity_tokens(e).iter().cloned());
            if let Ok(Some(d)) = kg.entity_description(e) {
                words.extend(d.iter().cloned());
            }
        }
        for (r, _) in kg.relation_names() {
            words.extend(kg.relation_tokens(r).iter().cloned());
        }
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Ids of ordinary words, i.e. everything after the specials.
    pub fn word_range(&self) -> std::ops::Range<TokenId> {
        SPECIALS.len()..self.tokens.len()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}").expect("write to vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |msg: &str| Error::Parse { path: path.display().to_string(), line: i + 1, msg: msg.into() };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| parse_err("expected token TAB id"))?;
            let id: usize = id.parse().map_err(|_| parse_err("bad id"))?;
            if id != tokens.len() {
                return Err(parse_err("ids must be dense and ascending"));
            }
            tokens.push(tok.to_string());
        }
        Self::from_token_list(tokens)
    }
}

/// An entity mention over the half-open token range `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &Mention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSentence {
    pub tokens: Vec<TokenId>,
    pub mentions: Vec<Mention>,
}

impl LinkedSentence {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        let mut prev_end = 0;
        let mut sorted = self.mentions.clone();
        sorted.sort_by_key(|m| m.start);
        for m in &sorted {
            if m.start >= m.end || m.end > self.tokens.len() {
                return Err(Error::Invalid(format!("mention {m:?} out of range")));
            }
            if m.start < prev_end {
                return Err(Error::Invalid("overlapping mentions".into()));
            }
            prev_end = m.end;
        }
        Ok(())
    }

    /// Copy with `mention` collapsed to a single `[UHN]` token.
    pub fn with_mention_replaced(&self, mention: &Mention) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.tokens.len() + 1 - mention.len());
        out.extend_from_slice(&self.tokens[..mention.start]);
        out.push(UHN);
        out.extend_from_slice(&self.tokens[mention.end..]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkOutcome {
    pub sentence: LinkedSentence,
    pub truncated: bool,
    /// Anchors whose entity name is not in the graph.
    pub unresolved_anchors: Vec<String>,
}

enum Segment<'a> {
    Text(&'a str),
    Anchor { entity: &'a str, surface: &'a str },
}

/// Splits on `[[entity|surface]]` (or `[[entity]]`) anchors.
fn segments(s: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(open) = rest.find("[[") {
        let Some(close_rel) = rest[open + 2..].find("]]") else { break };
        let close = open + 2 + close_rel;
        if open > 0 {
            out.push(Segment::Text(&rest[..open]));
        }
        let inner = &rest[open + 2..close];
        let (entity, surface) = inner.split_once('|').unwrap_or((inner, inner));
        out.push(Segment::Anchor { entity: entity.trim(), surface });
        rest = &rest[close + 2..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    out
}

/// Greedy longest-match dictionary over lowercased entity-name tokens.
#[derive(Debug, Clone)]
pub struct EntityLinker {
    names: HashMap<Vec<String>, EntityId>,
    max_len: usize,
}

impl EntityLinker {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut names = HashMap::new();
        let mut max_len = 0;
        for (e, _) in kg.entity_names() {
            let toks = kg.entity_tokens(e).to_vec();
            if toks.is_empty() {
                continue;
            }
            max_len = max_len.max(toks.len());
            names.entry(toks).or_insert(e);
        }
        Self { names, max_len }
    }

    /// Mentions as `(entity, start, end)` over `words`.
    pub fn match_words(&self, words: &[String]) -> Vec<(EntityId, usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let longest = self.max_len.min(words.len() - i);
            let hit = (1..=longest).rev().find_map(|len| self.names.get(&words[i..i + len]).map(|&e| (e, len)));
            match hit {
                Some((e, len)) => {
                    out.push((e, i, i + len));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Tokenises and links one raw corpus line, truncating to `max_len`.
    pub fn link(&self, raw: &str, kg: &KnowledgeGraph, vocab: &Vocabulary, max_len: usize) -> Result<LinkOutcome> {
        let mut words: Vec<String> = Vec::new();
        let mut mentions = Vec::new();
        let mut unresolved = Vec::new();
        for seg in segments(raw) {
            match seg {
                Segment::Text(t) => {
                    let toks = name_tokens(t);
                    let base = words.len();
                    for (e, s, end) in self.match_words(&toks) {
                        mentions.push(Mention { entity: e, start: base + s, end: base + end });
                    }
                    words.extend(toks);
                }
                Segment::Anchor { entity, surface } => {
                    let toks = name_tokens(surface);
                    if toks.is_empty() {
                        continue;
                    }
                    let base = words.len();
                    match kg.entity_id(entity) {
                        Some(e) => mentions.push(Mention { entity: e, start: base, end: base + toks.len() }),
                        None => unresolved.push(entity.to_string()),
                    }
                    words.extend(toks);
                }
            }
        }
        if words.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        let truncated = words.len() > max_len;
        if truncated {
            log::warn!("sentence of {} tokens truncated to {max_len}", words.len());
            words.truncate(max_len);
            mentions.retain(|m| m.end <= max_len);
        }
        Ok(LinkOutcome {
            sentence: LinkedSentence { tokens: vocab.ids(&words), mentions },
            truncated,
            unresolved_anchors: unresolved,
        })
    }
}

/// Convenience wrapper building a one-off linker.
pub fn link_entities(raw: &str, kg: &KnowledgeGraph, vocab: &Vocabulary, max_len: usize) -> Result<LinkOutcome> {
    EntityLinker::new(kg).link(raw, kg, vocab, max_len)
}

/// Links every line with one shared linker, preserving order.
pub fn link_corpus(lines: &[String], kg: &KnowledgeGraph, vocab: &Vocabulary, max_len: usize) -> Result<Vec<LinkedSentence>> {
    let linker = EntityLinker::new(kg);
    lines.iter().map(|l| linker.link(l, kg, vocab, max_len).map(|o| o.sentence)).collect()
}

/// Non-empty lines of a corpus file.
pub fn read_corpus_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Mention counts per entity. Entities never mentioned are absent and read
/// as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: BTreeMap<EntityId, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn count<'a>(corpus: impl IntoIterator<Item = &'a LinkedSentence>) -> Result<Self> {
        let mut table = Self::default();
        let mut any = false;
        for s in corpus {
            any = true;
            for m in &s.mentions {
                table.add(m.entity, 1);
            }
        }
        if !any {
            return Err(Error::Invalid("empty corpus".into()));
        }
        Ok(table)
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (EntityId, u64)>) -> Self {
        let mut t = Self::default();
        for (e, c) in counts {
            t.add(e, c);
        }
        t
    }

    fn add(&mut self, e: EntityId, c: u64) {
        if c == 0 {
            return;
        }
        *self.counts.entry(e).or_insert(0) += c;
        self.total += c;
    }

    /// Pointwise sum; associative and commutative.
    pub fn merge(&mut self, other: &FrequencyTable) {
        for (&e, &c) in &other.counts {
            self.add(e, c);
        }
    }

    pub fn get(&self, e: EntityId) -> u64 {
        self.counts.get(&e).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityId, u64)> + '_ {
        self.counts.iter().map(|(&e, &c)| (e, c))
    }

    /// Upper median of the present counts (`sorted[n / 2]`).
    pub fn median(&self) -> Option<u64> {
        let mut v: Vec<u64> = self.counts.values().copied().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_unstable();
        Some(v[v.len() / 2])
    }

    /// `(rank, entity, count)` by descending count, ties by entity id.
    pub fn ranked(&self) -> Vec<(usize, EntityId, u64)> {
        let mut v: Vec<(EntityId, u64)> = self.iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().enumerate().map(|(i, (e, c))| (i + 1, e, c)).collect()
    }

    pub fn write_tsv(&self, path: &Path, kg: &KnowledgeGraph) -> Result<()> {
        let mut out = Vec::new();
        for (e, c) in self.iter() {
            writeln!(out, "{}\t{c}", kg.entity_name(e)).expect("write to vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path, kg: &KnowledgeGraph) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut t = Self::default();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |msg: String| Error::Parse { path: path.display().to_string(), line: i + 1, msg };
            let (name, c) = line.rsplit_once('\t').ok_or_else(|| parse_err("expected entity TAB count".into()))?;
            let e = kg.entity_id(name).ok_or_else(|| parse_err(format!("unknown entity {name:?}")))?;
            let c: u64 = c.parse().map_err(|_| parse_err("bad count".into()))?;
            t.add(e, c);
        }
        Ok(t)
    }
}

/// `Freq(rank) ≈ c / rank^alpha`, fitted by least squares in log-log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    #[serde(rename = "C")]
    pub c: f64,
    pub alpha: f64,
    pub r_squared: f64,
}

impl PowerLawFit {
    /// Ranks `(entity, frequency)` pairs by descending frequency (ties by
    /// entity) and fits `ln f = ln c - alpha ln rank`.
    pub fn fit(points: &[(EntityId, f64)]) -> Result<Self> {
        let mut pts: Vec<(EntityId, f64)> = points.iter().copied().filter(|p| p.1 > 0.0).collect();
        pts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let distinct = pts.windows(2).filter(|w| w[0].1 != w[1].1).count() + usize::from(!pts.is_empty());
        if pts.len() < 2 || distinct < 2 {
            return Err(Error::DegenerateFrequencyTable);
        }
        let xs: Vec<f64> = (1..=pts.len()).map(|r| (r as f64).ln()).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
        Ok(Self { c: intercept.exp(), alpha: -slope, r_squared })
    }

    pub fn fit_table(table: &FrequencyTable) -> Result<Self> {
        let pts: Vec<(EntityId, f64)> = table.iter().map(|(e, c)| (e, c as f64)).collect();
        Self::fit(&pts)
    }

    pub fn predict(&self, rank: usize) -> f64 {
        self.c / (rank as f64).powf(self.alpha)
    }
}

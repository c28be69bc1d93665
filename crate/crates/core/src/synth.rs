//! Synthetic knowledge graph, corpus and cloze probes.
//!
//! Entities belong to latent groups. For each relation, heads of one group
//! mostly point at a few tails from another group, so a held-out fact is
//! predictable from the facts the corpus does state. Entity popularity is
//! Zipf-distributed, giving the corpus a long tail of rarely mentioned
//! entities. 80% of the triples are verbalised in the corpus; the rest
//! become `"<head> <relation> [MASK]"` probes.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{KgBuilder, KnowledgeGraph};
use crate::probe::{write_probe_file, ProbeRecord};
use crate::{Error, Result};

const RELATIONS: [&str; 8] = [
    "born in",
    "works for",
    "allied with",
    "located near",
    "famous for",
    "rival of",
    "student of",
    "made from",
];

const GROUP_WORDS: [&str; 12] =
    ["northern", "ancient", "coastal", "royal", "silent", "golden", "hidden", "frozen", "crimson", "distant", "humble", "iron"];

const KIND_WORDS: [&str; 6] = ["city", "guild", "scholar", "river", "order", "craft"];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ru", "te", "sa", "no", "vi", "da", "ze", "po", "qu", "xe", "ba", "fi", "go", "hu", "ja", "wy", "ce", "lu", "ni", "ro", "ta",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub n_groups: usize,
    /// Typical tails per (relation, head group).
    pub tails_per_group: usize,
    /// Probability a triple follows its group's pattern.
    pub regularity: f64,
    pub holdout: f64,
    /// Corpus sentences per verbalised triple, on average.
    pub sentences_per_triple: f64,
    /// Zipf exponent of entity popularity.
    pub zipf: f64,
    pub descriptions: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_relations: 8,
            n_triples: 600,
            n_groups: 8,
            tails_per_group: 2,
            regularity: 0.85,
            holdout: 0.2,
            sentences_per_triple: 4.0,
            zipf: 1.0,
            descriptions: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub entities: Vec<String>,
    pub triples: Vec<SynthTriple>,
    /// Indices into `triples` verbalised in the corpus.
    pub train: Vec<usize>,
    /// Indices into `triples` held out for probing.
    pub holdout: Vec<usize>,
    pub descriptions: Vec<(String, String)>,
    pub corpus: Vec<String>,
    pub probes: Vec<ProbeRecord>,
}

impl SynthData {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        if cfg.n_relations == 0 || cfg.n_relations > RELATIONS.len() {
            return Err(Error::Config(format!("n_relations must lie in 1..={}", RELATIONS.len())));
        }
        if cfg.n_groups == 0 || cfg.n_entities < cfg.n_groups * cfg.tails_per_group.max(1) {
            return Err(Error::Config("too few entities for the requested groups".into()));
        }
        if !(0.0..1.0).contains(&cfg.holdout) || !(0.0..=1.0).contains(&cfg.regularity) {
            return Err(Error::Config("holdout and regularity must be fractions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let entities = entity_names(cfg.n_entities, &mut rng);
        let group: Vec<usize> = (0..cfg.n_entities).map(|i| i % cfg.n_groups).collect();
        let members: Vec<Vec<usize>> = (0..cfg.n_groups).map(|gi| (0..cfg.n_entities).filter(|&e| group[e] == gi).collect()).collect();

        // Popularity by a random rank order.
        let mut order: Vec<usize> = (0..cfg.n_entities).collect();
        order.shuffle(&mut rng);
        let mut popularity = vec![0.0; cfg.n_entities];
        for (rank, &e) in order.iter().enumerate() {
            popularity[e] = 1.0 / ((rank + 1) as f64).powf(cfg.zipf);
        }

        // typical[r][g]: the few tails heads of group g use for relation r.
        let typical: Vec<Vec<Vec<usize>>> = (0..cfg.n_relations)
            .map(|r| {
                (0..cfg.n_groups)
                    .map(|gi| {
                        let target = &members[(gi + r + 1) % cfg.n_groups];
                        target.choose_multiple(&mut rng, cfg.tails_per_group.min(target.len())).copied().collect()
                    })
                    .collect()
            })
            .collect();

        // Heads are drawn flat so rare entities still own facts.
        let mut seen = BTreeSet::new();
        let mut triples = Vec::with_capacity(cfg.n_triples);
        let mut attempts = 0;
        while triples.len() < cfg.n_triples {
            attempts += 1;
            if attempts > cfg.n_triples * 100 {
                return Err(Error::Config("could not generate enough distinct triples".into()));
            }
            let h = rng.gen_range(0..cfg.n_entities);
            let r = rng.gen_range(0..cfg.n_relations);
            let t = if rng.gen::<f64>() < cfg.regularity {
                *typical[r][group[h]].choose(&mut rng).expect("non-empty")
            } else {
                rng.gen_range(0..cfg.n_entities)
            };
            if t == h || !seen.insert((h, r, t)) {
                continue;
            }
            triples.push((h, r, t));
        }

        let mut idx: Vec<usize> = (0..triples.len()).collect();
        idx.shuffle(&mut rng);
        let n_hold = (cfg.holdout * triples.len() as f64).round() as usize;
        let mut holdout: Vec<usize> = idx[..n_hold].to_vec();
        let mut train: Vec<usize> = idx[n_hold..].to_vec();
        holdout.sort_unstable();
        train.sort_unstable();

        let weights: Vec<f64> = train.iter().map(|&i| popularity[triples[i].0] + popularity[triples[i].2]).collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        let n_sentences = (cfg.sentences_per_triple * train.len() as f64).round() as usize;
        let mut corpus = Vec::with_capacity(n_sentences + train.len());
        // Every training fact is stated at least once.
        for &i in &train {
            corpus.push(verbalise(&entities, triples[i], &mut rng));
        }
        for _ in 0..n_sentences.saturating_sub(train.len()) {
            let i = train[pick.sample(&mut rng)];
            corpus.push(verbalise(&entities, triples[i], &mut rng));
        }

        let descriptions = if cfg.descriptions {
            (0..cfg.n_entities)
                .map(|e| {
                    let g = group[e];
                    let text = format!("a {} {}", GROUP_WORDS[g % GROUP_WORDS.len()], KIND_WORDS[g % KIND_WORDS.len()]);
                    (entities[e].clone(), text)
                })
                .collect()
        } else {
            Vec::new()
        };

        let probes = holdout
            .iter()
            .map(|&i| {
                let (h, r, t) = triples[i];
                ProbeRecord {
                    template: format!("{} {} [MASK]", entities[h], RELATIONS[r]),
                    answer: entities[t].clone(),
                    relation: RELATIONS[r].to_string(),
                }
            })
            .collect();

        let triples = triples
            .into_iter()
            .map(|(h, r, t)| SynthTriple { head: entities[h].clone(), relation: RELATIONS[r].to_string(), tail: entities[t].clone() })
            .collect();
        Ok(Self { entities, triples, train, holdout, descriptions, corpus, probes })
    }

    /// The full graph, held-out triples included.
    pub fn knowledge_graph(&self) -> Result<KnowledgeGraph> {
        let mut b = KgBuilder::new();
        for t in &self.triples {
            b.triple(&t.head, &t.relation, &t.tail);
        }
        for (e, d) in &self.descriptions {
            b.description(e, d);
        }
        b.build()
    }

    /// Writes `triples.tsv`, `descriptions.tsv`, `corpus.txt` and
    /// `probes.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut t = Vec::new();
        for x in &self.triples {
            writeln!(t, "{}\t{}\t{}", x.head, x.relation, x.tail).expect("write to vec");
        }
        let path = dir.join("triples.tsv");
        fs::write(&path, t).map_err(|e| Error::io(&path, e))?;
        let mut d = Vec::new();
        for (e, text) in &self.descriptions {
            writeln!(d, "{e}\t{text}").expect("write to vec");
        }
        let path = dir.join("descriptions.tsv");
        fs::write(&path, d).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("corpus.txt");
        fs::write(&path, self.corpus.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
        write_probe_file(&dir.join("probes.jsonl"), &self.probes)
    }
}

fn entity_names(n: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let name: String = (0..3).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

fn verbalise(entities: &[String], (h, r, t): (usize, usize, usize), rng: &mut impl Rng) -> String {
    let (h, rel, t) = (&entities[h], RELATIONS[r], &entities[t]);
    match rng.gen_range(0..4) {
        0 => format!("{h} {rel} {t}"),
        1 => format!("they say {h} {rel} {t}"),
        2 => format!("{h} is {rel} {t} indeed"),
        _ => format!("records show {h} {rel} {t} long ago"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::ClozeQuery;
    use crate::Vocabulary;

    #[test]
    fn default_shape() {
        let d = SynthData::generate(&SynthConfig::default()).unwrap();
        assert_eq!(d.entities.len(), 200);
        assert_eq!(d.triples.len(), 600);
        assert_eq!(d.holdout.len(), 120);
        assert_eq!(d.train.len() + d.holdout.len(), 600);
        assert_eq!(d.probes.len(), 120);
        let kg = d.knowledge_graph().unwrap();
        assert_eq!(kg.num_relations(), 8);
        let vocab = Vocabulary::build(d.corpus.iter().map(String::as_str), &kg);
        for p in &d.probes {
            ClozeQuery::from_record(p, &vocab).unwrap();
        }
        // Held-out facts are never stated verbatim.
        for &i in &d.holdout {
            let t = &d.triples[i];
            let fact = format!("{} {} {}", t.head, t.relation, t.tail);
            assert!(!d.corpus.iter().any(|s| s.contains(&fact)));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = SynthData::generate(&SynthConfig::default()).unwrap();
        let b = SynthData::generate(&SynthConfig::default()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.triples, b.triples);
    }
}

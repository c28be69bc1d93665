//! Knowledge graph storage and queries.
//!
//! The graph is built once (from TSV files or a [`KgBuilder`]) and is
//! immutable afterwards, so every query takes `&self` and the type is
//! `Sync`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

static QUERIES: AtomicU64 = AtomicU64::new(0);

/// Total number of graph queries issued by this process so far. Used to
/// assert that inference never touches the graph.
pub fn query_count() -> u64 {
    QUERIES.load(Ordering::Relaxed)
}

fn note_query() {
    QUERIES.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Which end of a triple an entity occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    Tail,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Head => Side::Tail,
            Side::Tail => Side::Head,
        }
    }
}

/// Lowercased whitespace tokens of a name or text.
pub fn name_tokens(name: &str) -> Vec<String> {
    name.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Default)]
pub struct KgBuilder {
    entity_names: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_names: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    descriptions: HashMap<EntityId, Vec<String>>,
}

impl KgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = EntityId(self.entity_names.len() as u32);
        self.entity_names.push(name.to_string());
        self.entity_index.insert(name.to_string(), id);
        id
    }

    pub fn relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        let id = RelationId(self.relation_names.len() as u32);
        self.relation_names.push(name.to_string());
        self.relation_index.insert(name.to_string(), id);
        id
    }

    /// Adds a triple; duplicates are ignored. Returns whether it was new.
    pub fn triple(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let t = Triple { head: self.entity(head), relation: self.relation(relation), tail: self.entity(tail) };
        if self.seen.insert(t) {
            self.triples.push(t);
            true
        } else {
            false
        }
    }

    pub fn description(&mut self, entity: &str, text: &str) {
        let id = self.entity(entity);
        self.descriptions.insert(id, name_tokens(text));
    }

    pub fn build(self) -> Result<KnowledgeGraph> {
        if self.entity_names.is_empty() {
            return Err(Error::EmptyKnowledgeGraph);
        }
        let n = self.entity_names.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        let mut neighbors: Vec<Vec<EntityId>> = vec![Vec::new(); n];
        for (i, t) in self.triples.iter().enumerate() {
            out_adj[t.head.index()].push(i);
            in_adj[t.tail.index()].push(i);
            if t.head != t.tail {
                neighbors[t.head.index()].push(t.tail);
                neighbors[t.tail.index()].push(t.head);
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        let entity_tokens = self.entity_names.iter().map(|s| name_tokens(s)).collect();
        let relation_tokens = self.relation_names.iter().map(|s| name_tokens(s)).collect();

        let mut by_relation = vec![(Vec::new(), Vec::new()); self.relation_names.len()];
        for t in &self.triples {
            let (heads, tails) = &mut by_relation[t.relation.index()];
            heads.push(t.head);
            tails.push(t.tail);
        }
        let degree: Vec<usize> = (0..n).map(|i| out_adj[i].len() + in_adj[i].len()).collect();
        let rank = |ids: &mut Vec<EntityId>| {
            ids.sort_unstable();
            ids.dedup();
            ids.sort_by(|a, b| degree[b.index()].cmp(&degree[a.index()]).then(a.cmp(b)));
        };
        for (heads, tails) in &mut by_relation {
            rank(heads);
            rank(tails);
        }

        Ok(KnowledgeGraph {
            entity_names: self.entity_names,
            entity_index: self.entity_index,
            entity_tokens,
            relation_names: self.relation_names,
            relation_index: self.relation_index,
            relation_tokens,
            triples: self.triples,
            out_adj,
            in_adj,
            neighbors,
            descriptions: self.descriptions,
            ranked_participants: by_relation,
        })
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    entity_tokens: Vec<Vec<String>>,
    relation_names: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    relation_tokens: Vec<Vec<String>>,
    triples: Vec<Triple>,
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
    neighbors: Vec<Vec<EntityId>>,
    descriptions: HashMap<EntityId, Vec<String>>,
    /// Per relation: (heads, tails), each sorted by descending degree then id.
    ranked_participants: Vec<(Vec<EntityId>, Vec<EntityId>)>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl KnowledgeGraph {
    /// Loads `head TAB relation TAB tail` lines and, optionally,
    /// `entity TAB description tokens` lines.
    pub fn load(triples_path: &Path, descriptions_path: Option<&Path>) -> Result<Self> {
        let text = read_to_string(triples_path)?;
        let mut b = KgBuilder::new();
        let shown = triples_path.display().to_string();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::Parse {
                    path: shown,
                    line: i + 1,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            b.triple(fields[0].trim(), fields[1].trim(), fields[2].trim());
        }
        if b.triples.is_empty() {
            return Err(Error::EmptyKnowledgeGraph);
        }
        if let Some(dp) = descriptions_path {
            let text = read_to_string(dp)?;
            let shown = dp.display().to_string();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let Some((name, desc)) = line.split_once('\t') else {
                    return Err(Error::Parse { path: shown, line: i + 1, msg: "expected entity TAB description".into() });
                };
                if name.trim().is_empty() {
                    return Err(Error::Parse { path: shown, line: i + 1, msg: "empty entity name".into() });
                }
                b.description(name.trim(), desc);
            }
        }
        b.build()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entity_names[e.index()]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relation_names[r.index()]
    }

    pub fn entity_tokens(&self, e: EntityId) -> &[String] {
        &self.entity_tokens[e.index()]
    }

    pub fn relation_tokens(&self, r: RelationId) -> &[String] {
        &self.relation_tokens[r.index()]
    }

    pub fn entity_names(&self) -> impl Iterator<Item = (EntityId, &str)> {
        self.entity_names.iter().enumerate().map(|(i, s)| (EntityId(i as u32), s.as_str()))
    }

    pub fn relation_names(&self) -> impl Iterator<Item = (RelationId, &str)> {
        self.relation_names.iter().enumerate().map(|(i, s)| (RelationId(i as u32), s.as_str()))
    }

    fn check(&self, e: EntityId) -> Result<()> {
        if e.index() < self.entity_names.len() {
            Ok(())
        } else {
            Err(Error::UnknownEntity(e.to_string()))
        }
    }

    /// Triples with `e` as head.
    pub fn out_edges(&self, e: EntityId) -> impl Iterator<Item = &Triple> {
        self.out_adj[e.index()].iter().map(|&i| &self.triples[i])
    }

    /// Triples with `e` as tail.
    pub fn in_edges(&self, e: EntityId) -> impl Iterator<Item = &Triple> {
        self.in_adj[e.index()].iter().map(|&i| &self.triples[i])
    }

    /// Every triple touching `e`, outgoing first, each in load order.
    pub fn incident_triples(&self, e: EntityId) -> Result<Vec<Triple>> {
        self.check(e)?;
        note_query();
        Ok(self.out_edges(e).chain(self.in_edges(e).filter(|t| t.head != e)).copied().collect())
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.out_adj[e.index()].len() + self.in_adj[e.index()].len()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.out_adj.get(t.head.index()).is_some_and(|adj| adj.iter().any(|&i| self.triples[i] == *t))
    }

    /// Number of distinct entities `e' != e` whose undirected hop distance to
    /// `e` is strictly below `r_hop`.
    pub fn multi_hop_count(&self, e: EntityId, r_hop: u32) -> Result<usize> {
        self.check(e)?;
        if r_hop == 0 {
            return Err(Error::Config("r_hop must be at least 1".into()));
        }
        note_query();
        let max_depth = r_hop - 1;
        let mut dist: HashMap<EntityId, u32> = HashMap::new();
        dist.insert(e, 0);
        let mut queue = VecDeque::from([e]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            if du == max_depth {
                continue;
            }
            for &v in &self.neighbors[u.index()] {
                if let std::collections::hash_map::Entry::Vacant(slot) = dist.entry(v) {
                    slot.insert(du + 1);
                    queue.push_back(v);
                }
            }
        }
        Ok(dist.len() - 1)
    }

    /// Multi-hop neighbour count clamped into `[r_min, r_max]`.
    pub fn knowledge_connectivity(&self, e: EntityId, r_hop: u32, r_min: u32, r_max: u32) -> Result<u32> {
        if r_min > r_max {
            return Err(Error::Config(format!("r_min {r_min} exceeds r_max {r_max}")));
        }
        let n = self.multi_hop_count(e, r_hop)?;
        Ok((n as u64).clamp(r_min as u64, r_max as u64) as u32)
    }

    /// Hard negatives for decoding: up to `n` distinct entities other than
    /// `ground_truth` that occupy `side` of some `relation` triple, highest
    /// degree first, ties by id. Empty when the relation has no other
    /// participant.
    pub fn sample_negatives(&self, relation: RelationId, side: Side, ground_truth: EntityId, n: usize) -> Result<Vec<EntityId>> {
        let Some((heads, tails)) = self.ranked_participants.get(relation.index()) else {
            return Err(Error::UnknownRelation(format!("R{}", relation.0)));
        };
        note_query();
        let pool = match side {
            Side::Head => heads,
            Side::Tail => tails,
        };
        Ok(pool.iter().copied().filter(|&c| c != ground_truth).take(n).collect())
    }

    pub fn entity_description(&self, e: EntityId) -> Result<Option<&[String]>> {
        self.check(e)?;
        note_query();
        Ok(self.descriptions.get(&e).map(Vec::as_slice))
    }

    pub fn write_entity_table(&self, path: &Path) -> Result<()> {
        write_table(path, self.entity_names.iter())
    }

    pub fn write_relation_table(&self, path: &Path) -> Result<()> {
        write_table(path, self.relation_names.iter())
    }
}

fn write_table<'a>(path: &Path, names: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut out = Vec::new();
    for (i, name) in names.enumerate() {
        writeln!(out, "{name}\t{i}").expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

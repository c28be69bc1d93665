#![allow(dead_code)]

use dkplm::corpus::link_corpus;
use dkplm::injection::KgTokens;
use dkplm::synth::{SynthConfig, SynthData};
use dkplm::{EncoderConfig, FrequencyTable, KnowledgeGraph, LinkedSentence, Vocabulary};

pub struct Fixture {
    pub data: SynthData,
    pub kg: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub corpus: Vec<LinkedSentence>,
    pub freq: FrequencyTable,
    pub toks: KgTokens,
}

pub const MAX_LEN: usize = 16;

impl Fixture {
    pub fn small(seed: u64) -> Self {
        let cfg = SynthConfig { n_entities: 30, n_relations: 4, n_triples: 60, n_groups: 3, sentences_per_triple: 1.5, seed, ..Default::default() };
        let data = SynthData::generate(&cfg).unwrap();
        let kg = data.knowledge_graph().unwrap();
        let vocab = Vocabulary::build(data.corpus.iter().map(String::as_str), &kg);
        let corpus = link_corpus(&data.corpus, &kg, &vocab, MAX_LEN).unwrap();
        let freq = FrequencyTable::count(&corpus).unwrap();
        let toks = KgTokens::new(&kg, &vocab, MAX_LEN).unwrap();
        Self { data, kg, vocab, corpus, freq, toks }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_len: MAX_LEN, vocab_size: self.vocab.len(), ..Default::default() }
    }
}

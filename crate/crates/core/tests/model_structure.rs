mod common;

use common::Fixture;
use dkplm::injection::{pseudo_head, pseudo_on, pseudo_tail};
use dkplm::kg::Side;
use dkplm::{DkplmModel, EncoderModel, Graph};

#[test]
fn injection_and_decoding_add_only_their_own_blocks() {
    let fx = Fixture::small(1);
    let bare = EncoderModel::new(fx.encoder(), dkplm::encoder::Init::Random(3)).unwrap();
    let full = DkplmModel::new(fx.encoder(), 3, 1.0).unwrap();
    assert_eq!(full.encoder.encoder_blocks().len(), bare.store().len());
    let bare_names: Vec<&str> = bare.store().blocks().iter().map(|b| b.name.as_str()).collect();
    let extra: Vec<&str> = full.store().blocks()[bare.store().len()..].iter().map(|b| b.name.as_str()).collect();
    let full_prefix: Vec<&str> = full.store().blocks()[..bare.store().len()].iter().map(|b| b.name.as_str()).collect();
    assert_eq!(full_prefix, bare_names);
    assert!(extra.iter().all(|n| n.starts_with("inject.") || n.starts_with("decode.")), "{extra:?}");
    let mut expected: Vec<usize> = full.injection.blocks().iter().chain(&full.decoder.blocks()).map(|id| id.0).collect();
    expected.sort_unstable();
    assert_eq!(expected, (bare.store().len()..full.store().len()).collect::<Vec<_>>());
}

#[test]
fn composition_holds_to_rounding() {
    let fx = Fixture::small(2);
    for seed in 0..50 {
        let m = DkplmModel::new(fx.encoder(), seed, 1.0).unwrap();
        let t = fx.kg.triples()[seed as usize % fx.kg.triples().len()];
        for role in [Side::Head, Side::Tail] {
            let mut g = Graph::new(m.store());
            let p = pseudo_on(&mut g, &m.encoder, &m.injection, &fx.toks, &t, role).unwrap();
            let (c, r, e) = (g.value(p.composed), g.value(p.relation), g.value(p.counterpart));
            let back = match role {
                Side::Head => c.zip_map(r, |a, b| a + b),
                Side::Tail => c.zip_map(r, |a, b| a - b),
            };
            assert!(back.max_abs_diff(e) <= 1e-12, "seed {seed} {role:?}");
        }
    }
}

#[test]
fn pseudo_vectors_are_bounded_and_role_specific() {
    let fx = Fixture::small(3);
    let m = DkplmModel::new(fx.encoder(), 9, 1.0).unwrap();
    for t in fx.kg.triples().iter().take(10) {
        let h = pseudo_head(&m.encoder, &m.injection, &fx.kg, &fx.toks, t).unwrap();
        let tl = pseudo_tail(&m.encoder, &m.injection, &fx.kg, &fx.toks, t).unwrap();
        assert_eq!(h.vector.len(), 8);
        assert!(h.vector.iter().chain(&tl.vector).all(|v| v.abs() < 1.0));
        assert_ne!(h.vector, tl.vector);
        assert_eq!((h.role, tl.role), (Side::Head, Side::Tail));
    }
}

#[test]
fn pseudo_rejects_triples_outside_the_graph() {
    let fx = Fixture::small(4);
    let m = DkplmModel::new(fx.encoder(), 9, 1.0).unwrap();
    let mut t = fx.kg.triples()[0];
    t.tail = t.head;
    assert!(pseudo_head(&m.encoder, &m.injection, &fx.kg, &fx.toks, &t).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let fx = Fixture::small(5);
    let m = DkplmModel::new(fx.encoder(), 21, 0.5).unwrap();
    let bytes = m.to_bytes(Some(&fx.vocab)).unwrap();
    let (back, vocab) = DkplmModel::from_bytes(&bytes).unwrap();
    assert_eq!(vocab.unwrap().tokens(), fx.vocab.tokens());
    assert_eq!(back.to_bytes(Some(&fx.vocab)).unwrap(), bytes);
    let toks = &fx.corpus[0].tokens;
    let a = m.encoder.encode(toks, &[]).unwrap();
    let b = back.encoder.encode(toks, &[]).unwrap();
    assert_eq!(a.final_states(), b.final_states());
}

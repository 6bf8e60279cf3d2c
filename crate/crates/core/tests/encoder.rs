mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use r2m::encoder::{concept_order, filter_concepts, ConceptSet, Vocabulary};
use r2m::numcore::Graph;

fn detections() -> impl Strategy<Value = ConceptSet> {
    prop::collection::btree_map(3usize..40, 0.0f64..=1.0, 0..12)
        .prop_map(|m| ConceptSet::new(m.into_iter().collect()).unwrap())
}

proptest! {
    #[test]
    fn filtering_is_idempotent(d in detections(), dict in prop::collection::hash_set(3usize..40, 0..30), th in 0.0f64..1.0) {
        let once = filter_concepts(&d, &dict, th);
        prop_assert_eq!(filter_concepts(&once, &dict, th), once.clone());
        prop_assert!(once.ids().iter().all(|c| dict.contains(c) && d.contains(*c)));
    }

    #[test]
    fn concept_order_is_a_permutation(d in detections(), seed in any::<u64>()) {
        let order = concept_order(&d, seed);
        prop_assert_eq!(order.clone(), concept_order(&d, seed));
        let mut a = order;
        a.sort();
        let mut b = d.ids();
        if b.is_empty() {
            b.push(Vocabulary::UNK_ID);
        }
        b.sort();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn same_seed_same_vector_and_order_can_matter() {
    let (store, net) = common::small_model(1, 30, 8);
    let cs = ConceptSet::certain([4, 9, 17, 22]).unwrap();
    let enc = |seed| {
        let mut g = Graph::new(&store);
        let v = net.encode(&mut g, &cs, seed).unwrap();
        g.value(v).clone()
    };
    assert_eq!(enc(5), enc(5));
    assert!((0..20).any(|s| enc(s) != enc(0)));
}

#[test]
fn vocabulary_tsv_round_trip() {
    let v = Vocabulary::from_words(["desk", "lamp", "book"]);
    let back = Vocabulary::parse_tsv(&v.to_tsv(), "mem").unwrap();
    assert_eq!(back, v);
    let ids: HashSet<usize> = (0..v.len()).collect();
    assert_eq!(ids.len(), v.len());
    assert_eq!(v.token(Vocabulary::END_ID), Some("<#end>"));
}

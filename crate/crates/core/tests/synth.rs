use std::collections::BTreeMap;

use dsse_core::page::ColumnType;
use dsse_core::synth::{page_seed, Generator, SynthConfig};
use dsse_core::{DocClass, DocumentPage};

fn corpus(seed: u64, n: usize) -> Vec<DocumentPage> {
    let g = Generator::new(SynthConfig::default()).unwrap();
    (0..n).map(|i| g.page(page_seed(seed, i), &format!("{i:06}")).unwrap()).collect()
}

#[test]
fn every_class_shows_up_on_enough_pages() {
    let pages = corpus(0, 200);
    let mut seen: BTreeMap<DocClass, usize> = BTreeMap::new();
    for p in &pages {
        let mut classes: Vec<DocClass> = p.sidecar.elements.iter().filter_map(|e| e.class).collect();
        classes.sort();
        classes.dedup();
        for c in classes {
            *seen.entry(c).or_default() += 1;
        }
    }
    for c in DocClass::ELEMENTS {
        let n = seen.get(&c).copied().unwrap_or(0);
        assert!(n * 20 >= pages.len(), "{c:?} on {n} of {} pages", pages.len());
    }
}

#[test]
fn only_graphics_cross_gutters_and_sentences_sit_in_one_text_box() {
    for p in corpus(1, 60) {
        let sc = &p.sidecar;
        if sc.column_type != Some(ColumnType::Single) {
            for e in &sc.elements {
                let inside = sc.columns.iter().any(|c| e.bbox.x >= c[0] && e.bbox.right() <= c[1]);
                let graphic = matches!(e.class, Some(DocClass::Figure | DocClass::Table));
                assert!(inside || (graphic && e.spans_columns), "{}: {e:?}", sc.page_id);
            }
        }
        for s in &sc.sentences {
            let owners: Vec<_> = sc
                .elements
                .iter()
                .filter(|e| e.class.is_some_and(DocClass::is_text) && e.bbox.contains(&s.bounding_box()))
                .collect();
            assert_eq!(owners.len(), 1, "{}: {:?}", sc.page_id, s.text);
        }
    }
}

#[test]
fn corpus_is_a_function_of_seed_and_config() {
    let (a, b) = (corpus(5, 6), corpus(5, 6));
    assert_eq!(a, b);
    let c = corpus(6, 6);
    assert_ne!(a, c);
    let digests: Vec<_> = a.iter().map(|p| p.sidecar.config_digest.clone()).collect();
    assert!(digests.iter().all(|d| d.is_some() && *d == digests[0]));
}

use std::collections::BTreeMap;

use fd_core::datasets::{generate_synthetic, ingest, SyntheticSpec};

fn hamming(a: &[(usize, usize)], b: &[(usize, usize)]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

#[test]
fn band_attributes_separate_held_out_identities() {
    let tmp = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&SyntheticSpec::default(), tmp.path()).unwrap();
    let code = |path: &str| m.synthetic[path].code.clone();
    let mut per_identity: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
    for r in m.train.iter().chain(&m.query).chain(&m.gallery) {
        let c = per_identity.entry(r.identity).or_insert_with(|| code(&r.path));
        assert_eq!(*c, code(&r.path), "identity {} has two codes", r.identity);
    }
    let mut correct = 0;
    for q in &m.query {
        let best = m
            .gallery
            .iter()
            .filter(|g| !(g.identity == q.identity && g.camera == q.camera))
            .min_by_key(|g| hamming(&code(&q.path), &code(&g.path)))
            .unwrap();
        if best.identity == q.identity {
            correct += 1;
        }
    }
    assert_eq!(correct, m.query.len());
}

#[test]
fn rendered_tree_ingests_to_the_same_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        identities: 8,
        test_identities: 3,
        ..Default::default()
    };
    let m = generate_synthetic(&spec, tmp.path()).unwrap();
    let again = ingest(tmp.path(), &m.name).unwrap();
    assert_eq!(again.train, m.train);
    assert_eq!(again.query, m.query);
    assert_eq!(again.gallery, m.gallery);
    assert_eq!(again.fingerprint, m.fingerprint);
    assert!(again.rejects.is_empty());
    let train_ids: Vec<i64> = m.train.iter().map(|r| r.identity).collect();
    assert!(m.gallery.iter().all(|g| !train_ids.contains(&g.identity)));
}

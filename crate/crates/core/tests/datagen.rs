use std::fs;

use microcor_core::datagen::{
    build_corpus, dataset_checksum, decode_image, load_dataset, render_image, small_config, write_dataset, Attributes, CorpusConfig,
    FamilyKind, Relation, EXAMPLES_FILE, IMAGE_DIM, NOISE_STD,
};
use microcor_core::datagen::vocab;
use microcor_core::models::Tokenizer;
use microcor_core::types::RelationKind;
use microcor_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_attrs(rng: &mut ChaCha8Rng) -> Attributes {
    Attributes {
        category: rng.random_range(0..vocab::CATEGORIES.len()),
        color: rng.random_range(0..vocab::COLORS.len()),
        size: rng.random_range(0..vocab::SIZES.len()),
        stage: rng.random_range(0..vocab::STAGES.len()),
        pattern: rng.random_range(0..vocab::PATTERNS.len()),
    }
}

#[test]
fn block_argmax_decodes_10000_noisy_renders() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for i in 0..10_000u64 {
        let a = random_attrs(&mut rng);
        let x = render_image(&a, i, NOISE_STD);
        assert_eq!(x.len(), IMAGE_DIM);
        assert_eq!(decode_image(&x), a, "render {i}");
    }
}

#[test]
fn renders_are_deterministic_and_color_is_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_attrs(&mut rng);
    assert_eq!(render_image(&a, 77, NOISE_STD), render_image(&a, 77, NOISE_STD));
    let b = Attributes {
        color: (a.color + 1) % vocab::COLORS.len(),
        ..a
    };
    let (xa, xb) = (render_image(&a, 0, 0.0), render_image(&b, 0, 0.0));
    let changed: Vec<usize> = (0..IMAGE_DIM).filter(|&i| xa[i] != xb[i]).collect();
    let color_block: Vec<usize> = (0..vocab::COLORS.len()).map(microcor_core::datagen::FeatureLayout::color).collect();
    assert_eq!(changed.len(), 2);
    assert!(changed.iter().all(|i| color_block.contains(i)));
}

#[test]
fn write_then_load_round_trips() {
    let tok = Tokenizer::micro_cor();
    let corpus = build_corpus(&small_config(5), &tok).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &corpus.documents, &corpus.examples, &tok).unwrap();
    let (docs, examples) = load_dataset(dir.path(), &tok).unwrap();
    assert_eq!(docs, corpus.documents);
    assert_eq!(examples, corpus.examples);
}

#[test]
fn truncated_file_names_the_bad_line() {
    let tok = Tokenizer::micro_cor();
    let corpus = build_corpus(&small_config(5), &tok).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &corpus.documents, &corpus.examples, &tok).unwrap();
    let path = dir.path().join(EXAMPLES_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Keep two full lines and cut the third in half.
    let cut = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
    fs::write(&path, cut).unwrap();
    let err = load_dataset(dir.path(), &tok).unwrap_err();
    match &err {
        Error::Parse { line, .. } => assert_eq!(*line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(err.to_string().contains(":3:"), "{err}");
}

#[test]
fn checksum_is_stable_for_a_fixed_seed() {
    let tok = Tokenizer::micro_cor();
    let mut sums = Vec::new();
    for _ in 0..2 {
        let corpus = build_corpus(&small_config(11), &tok).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &corpus.documents, &corpus.examples, &tok).unwrap();
        sums.push(dataset_checksum(dir.path()).unwrap());
    }
    assert_eq!(sums[0], sums[1]);
    let other = build_corpus(&small_config(12), &tok).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &other.documents, &other.examples, &tok).unwrap();
    assert_ne!(dataset_checksum(dir.path()).unwrap(), sums[0]);
}

#[test]
fn stage_change_on_a_juvenile_gives_its_adult_twin() {
    let tok = Tokenizer::micro_cor();
    let corpus = build_corpus(&CorpusConfig::default(), &tok).unwrap();
    let juvenile = vocab::STAGES.iter().position(|&s| s == "juvenile").unwrap();
    let adult = vocab::STAGES.iter().position(|&s| s == "adult").unwrap();
    let mut checked = 0;
    for e in corpus.examples.iter().filter(|e| e.relation == RelationKind::StageChange) {
        let q = &corpus.entities[e.query_entity];
        let t = &corpus.entities[e.target];
        if q.attrs.stage != juvenile {
            continue;
        }
        assert_eq!(q.family, FamilyKind::Stage);
        assert_eq!((t.group, t.attrs.category, t.attrs.color, t.attrs.size), (q.group, q.attrs.category, q.attrs.color, q.attrs.size));
        assert_eq!(t.attrs.stage, adult);
        assert!(Relation::Stage { to: adult }.holds(q, t));
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn full_scale_counts_and_referential_integrity() {
    let tok = Tokenizer::micro_cor();
    let corpus = build_corpus(&CorpusConfig::default(), &tok).unwrap();
    assert_eq!(corpus.documents.len(), 2048);
    assert_eq!(corpus.train().count(), 4096);
    assert_eq!(corpus.test().count(), 512);
    assert_eq!(corpus.golden().count(), 128);
    for e in &corpus.examples {
        assert!(e.target < corpus.documents.len());
        assert_eq!(corpus.documents[e.target].id, e.target);
    }
}

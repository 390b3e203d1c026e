mod common;

use microcor_core::generator::{
    adapt_entity, generate_with_entities, generate_with_retrieval, generate_without_retrieval, rag_baseline_generate, retrieve_top1,
    train_entity_adapter, EntityAdapter, EntityTrainConfig, EntityView,
};
use microcor_core::models::tokenizer::EOS;
use microcor_core::models::ToyLm;
use microcor_core::retriever::EmbeddingIndex;
use microcor_core::tensor::Tensor;
use microcor_core::types::{EntityDocument, MultimodalQuery};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAX_NEW: usize = 12;

fn trained_xi(f: &common::Fixture, epochs: usize) -> EntityAdapter {
    let mut xi = EntityAdapter::from_lm(&f.lm);
    let train = f.train();
    let data: Vec<_> = train
        .iter()
        .map(|e| (&e.query, &f.corpus.documents[e.target], e.comment.as_slice()))
        .collect();
    let cfg = EntityTrainConfig {
        epochs,
        ..Default::default()
    };
    train_entity_adapter(&mut xi, &f.lm, &data, &cfg).unwrap();
    xi
}

#[test]
fn entity_length_is_tiles_plus_text() {
    let f = common::fixture();
    let xi = EntityAdapter::from_lm(&f.lm);
    let mut doc = f.corpus.documents[0].clone();
    doc.caption.clear();
    doc.metadata.clear();
    assert_eq!(adapt_entity(&xi, &f.lm, &doc).unwrap().rows(), 4);
    doc.caption = f.tok.encode("a small red owl").unwrap();
    doc.metadata = f.tok.encode("in the").unwrap();
    assert_eq!(adapt_entity(&xi, &f.lm, &doc).unwrap().rows(), 10);
}

#[test]
fn fresh_adapter_reproduces_the_native_visual_adapter() {
    let f = common::fixture();
    let xi = EntityAdapter::from_lm(&f.lm);
    for d in f.corpus.documents.iter().take(20) {
        let native = f.lm.visual.apply(&d.features).unwrap();
        let ours = xi.tiles.apply(&d.features).unwrap();
        assert_eq!(native, ours);
        let rows = adapt_entity(&xi, &f.lm, d).unwrap();
        assert_eq!(&rows.data()[..native.numel()], native.data());
    }
}

#[test]
fn committed_length_is_prefix_plus_question_plus_entity() {
    let f = common::fixture();
    let xi = EntityAdapter::from_lm(&f.lm);
    let index = EmbeddingIndex::build(&f.params, &f.corpus.documents).unwrap();
    let test = f.test();
    let queries: Vec<&MultimodalQuery> = test.iter().map(|e| &e.query).collect();
    let states = generate_with_retrieval(&f.lm, &f.params, &xi, &queries, &f.corpus.documents, &index, MAX_NEW).unwrap();
    for (q, s) in queries.iter().zip(&states) {
        let r = s.retrieval.as_ref().unwrap();
        let l_m = adapt_entity(&xi, &f.lm, &f.corpus.documents[r.doc_id]).unwrap().rows();
        assert_eq!(r.position, 4 + q.question.len());
        assert_eq!(s.committed_len, 4 + q.question.len() + l_m);
        assert!(s.emitted.len() <= MAX_NEW);
        assert!(!s.emitted.contains(&EOS));
        assert!(s.emitted.iter().all(|&t| t < f.tok.vocab_size()));
    }
}

#[test]
fn splice_does_not_change_logits_before_it() {
    let f = common::fixture();
    let xi = EntityAdapter::from_lm(&f.lm);
    let q = &f.test()[0].query;
    let prefix = f.lm.prompt_embeddings(&ToyLm::query_pieces(q)).unwrap();
    let entity = adapt_entity(&xi, &f.lm, &f.corpus.documents[3]).unwrap();
    let mut data = prefix.data().to_vec();
    data.extend_from_slice(entity.data());
    let full = Tensor::new(vec![prefix.rows() + entity.rows(), prefix.cols()], data).unwrap();
    let (a, _) = f.lm.lm_forward(&prefix).unwrap();
    let (b, _) = f.lm.lm_forward(&full).unwrap();
    assert_eq!(a.data(), &b.data()[..a.data().len()]);
}

#[test]
fn singleton_index_always_returns_its_document() {
    let f = common::fixture();
    let only: Vec<EntityDocument> = vec![f.corpus.documents[17].clone()];
    let index = EmbeddingIndex::build(&f.params, &only).unwrap();
    let test = f.test();
    let queries: Vec<&MultimodalQuery> = test.iter().map(|e| &e.query).collect();
    for (id, _) in retrieve_top1(&f.lm, &f.params, &queries, &index).unwrap() {
        assert_eq!(id, 17);
    }
}

#[test]
fn generation_is_deterministic_and_rag_shares_the_retriever() {
    let f = common::fixture();
    let xi = EntityAdapter::from_lm(&f.lm);
    let index = EmbeddingIndex::build(&f.params, &f.corpus.documents).unwrap();
    let test = f.test();
    let queries: Vec<&MultimodalQuery> = test.iter().map(|e| &e.query).collect();
    let docs = &f.corpus.documents;
    let a = generate_with_retrieval(&f.lm, &f.params, &xi, &queries, docs, &index, MAX_NEW).unwrap();
    let b = generate_with_retrieval(&f.lm, &f.params, &xi, &queries, docs, &index, MAX_NEW).unwrap();
    assert_eq!(a, b);
    let rag = rag_baseline_generate(&f.lm, &f.tok, &f.params, &queries, docs, &index, MAX_NEW).unwrap();
    let rag_again = rag_baseline_generate(&f.lm, &f.tok, &f.params, &queries, docs, &index, MAX_NEW).unwrap();
    assert_eq!(rag, rag_again);
    for (s, (id, _)) in a.iter().zip(&rag) {
        assert_eq!(s.retrieval.as_ref().unwrap().doc_id, *id);
    }
    let nr = generate_without_retrieval(&f.lm, &queries, MAX_NEW).unwrap();
    assert_eq!(nr, generate_without_retrieval(&f.lm, &queries, MAX_NEW).unwrap());
    assert!(nr.iter().all(|o| o.len() <= MAX_NEW && !o.contains(&EOS)));
}

#[test]
fn entity_training_keeps_frozen_models_byte_identical() {
    let f = common::fixture();
    let lm_before = f.lm.to_checkpoint().sha256();
    let enc_before = f.params.encoder.to_checkpoint().sha256();
    let xi = trained_xi(&f, 2);
    assert_eq!(f.lm.to_checkpoint().sha256(), lm_before);
    assert_eq!(f.params.encoder.to_checkpoint().sha256(), enc_before);
    assert_ne!(xi.to_checkpoint().sha256(), EntityAdapter::from_lm(&f.lm).to_checkpoint().sha256());
}

#[test]
fn entity_training_rejects_an_unfrozen_lm() {
    let f = common::fixture();
    let raw = ToyLm::new(*f.lm.config(), &mut ChaCha8Rng::seed_from_u64(0));
    let mut xi = EntityAdapter::from_lm(&raw);
    let e = f.train()[0];
    let data = [(&e.query, &f.corpus.documents[e.target], e.comment.as_slice())];
    assert!(train_entity_adapter(&mut xi, &raw, &data, &EntityTrainConfig::default()).is_err());
}

#[test]
fn masking_the_entity_changes_the_comment() {
    let f = common::fixture();
    let xi = trained_xi(&f, 3);
    let test = f.test();
    let queries: Vec<&MultimodalQuery> = test.iter().map(|e| &e.query).collect();
    let gold: Vec<&EntityDocument> = test.iter().map(|e| &f.corpus.documents[e.target]).collect();
    let shown = generate_with_entities(&f.lm, &xi, &queries, &gold, EntityView::Adapted, MAX_NEW).unwrap();
    let masked = generate_with_entities(&f.lm, &xi, &queries, &gold, EntityView::Masked, MAX_NEW).unwrap();
    let differ = shown.iter().zip(&masked).filter(|(a, b)| a.emitted != b.emitted).count();
    assert!(differ > 0);
}

mod common;

use microcor_core::retriever::{
    train_retriever_stage1, train_retriever_stage2, EmbeddingIndex, Fusion, RetrievalSet, RetrieverParams, StageConfig, TextChoice,
};
use microcor_core::tensor::dot;
use microcor_core::types::EntityDocument;

fn short(cfg: StageConfig, epochs: usize) -> StageConfig {
    StageConfig {
        epochs,
        batch: 16,
        ..cfg
    }
}

/// Mean cosine between each query's adapted hidden state and its target
/// document embedding.
fn adapter_alignment(p: &RetrieverParams, set: &RetrievalSet<'_>) -> f64 {
    let a = p.adapt_hidden_states(&set.hidden).unwrap();
    let docs: Vec<&EntityDocument> = set.targets.clone();
    let d = p.embed_documents(&docs, TextChoice::Caption).unwrap();
    a.iter().zip(&d).map(|(x, y)| dot(x, y)).sum::<f64>() / a.len() as f64
}

#[test]
fn stage1_moves_only_the_adapter() {
    let f = common::fixture();
    let train = f.train();
    let set = RetrievalSet::new(&f.lm, &train, &f.corpus.documents).unwrap();
    let mut p = f.params.clone();
    let enc_before = p.encoder.to_checkpoint().sha256();
    let beta_before = p.fusion_logit.value().clone();
    let lm_before = f.lm.to_checkpoint().sha256();
    let align_before = adapter_alignment(&p, &set);

    let log = train_retriever_stage1(&mut p, &set, &short(StageConfig::stage1(), 8)).unwrap();

    assert_eq!(p.encoder.to_checkpoint().sha256(), enc_before);
    assert_eq!(p.fusion_logit.value(), &beta_before);
    assert_eq!(f.lm.to_checkpoint().sha256(), lm_before);
    assert!(log.last() < log.first(), "{:?}", log.epoch_losses);
    assert!(adapter_alignment(&p, &set) > align_before);
}

#[test]
fn stage2_unlocks_beta_and_is_deterministic() {
    let f = common::fixture();
    let train = f.train();
    let set = RetrievalSet::new(&f.lm, &train, &f.corpus.documents).unwrap();
    let run = || {
        let mut p = f.params.clone();
        train_retriever_stage1(&mut p, &set, &short(StageConfig::stage1(), 2)).unwrap();
        let log = train_retriever_stage2(&mut p, &set, &short(StageConfig::stage2(), 6)).unwrap();
        (p, log)
    };
    let (a, log) = run();
    let (b, _) = run();
    assert_ne!(a.fusion_logit.value(), f.params.fusion_logit.value());
    assert_ne!(a.encoder.to_checkpoint().sha256(), f.params.encoder.to_checkpoint().sha256());
    assert!(log.last() < log.first());
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn pinned_beta_ablation_never_touches_beta() {
    let f = common::fixture();
    let train = f.train();
    let set = RetrievalSet::new(&f.lm, &train, &f.corpus.documents).unwrap();
    let mut p = f.params.clone();
    let cfg = StageConfig {
        fusion: Fusion::Fixed(0.0),
        ..short(StageConfig::stage2(), 3)
    };
    train_retriever_stage2(&mut p, &set, &cfg).unwrap();
    assert_eq!(p.fusion_logit.value(), f.params.fusion_logit.value());
}

#[test]
fn fused_query_equals_its_endpoints() {
    let f = common::fixture();
    let test = f.test();
    let queries: Vec<_> = test.iter().map(|e| &e.query).collect();
    let hidden = f.lm.hidden_states(&queries).unwrap();
    let p = &f.params;
    assert_eq!(
        p.embed_queries_with_hidden(&queries, &hidden, Fusion::Fixed(0.0)).unwrap(),
        p.encode_queries(&queries).unwrap()
    );
    assert_eq!(
        p.embed_queries_with_hidden(&queries, &hidden, Fusion::Fixed(1.0)).unwrap(),
        p.adapt_hidden_states(&hidden).unwrap()
    );
}

#[test]
fn hidden_states_are_deterministic_and_query_sensitive() {
    let f = common::fixture();
    let q = f.test()[0].query.clone();
    let a = f.lm.extract_hidden_state(&q).unwrap();
    assert_eq!(a, f.lm.extract_hidden_state(&q).unwrap());
    assert_eq!(a.len(), f.lm.config().d_model);
    let mut other = q.clone();
    let last = other.question.len() - 1;
    other.question[last] = if other.question[last] == 10 { 11 } else { 10 };
    assert_ne!(a, f.lm.extract_hidden_state(&other).unwrap());
}

#[test]
fn document_embeddings_ignore_ids_and_depend_on_text_choice() {
    let f = common::fixture();
    let mut doc = f.corpus.documents[5].clone();
    let base = f.params.embed_document(&doc, TextChoice::Caption).unwrap();
    doc.id = 999;
    assert_eq!(f.params.embed_document(&doc, TextChoice::Caption).unwrap(), base);
    doc.comment = Some(f.tok.encode("owl is small red adult plain").unwrap());
    assert_ne!(f.params.embed_document(&doc, TextChoice::Comment).unwrap(), base);
    let index = EmbeddingIndex::build(&f.params, &f.corpus.documents).unwrap();
    assert_eq!(index.embedding_of(5).unwrap(), base.as_slice());
    assert_eq!(index.search(&base, 1).unwrap()[0].0, 5);
}

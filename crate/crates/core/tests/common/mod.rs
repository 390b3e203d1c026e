//! A small, quickly trained pipeline shared by the integration tests.

#![allow(dead_code)]

use microcor_core::datagen::{build_corpus, small_config, Corpus};
use microcor_core::models::{pretrain_toy_lm, DualEncoder, PretrainConfig, Tokenizer, ToyLm, ToyLmConfig};
use microcor_core::retriever::{train_dual_encoder, EncoderTrainConfig, RetrieverParams};
use microcor_core::types::CoRExample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub tok: Tokenizer,
    pub corpus: Corpus,
    pub lm: ToyLm,
    pub params: RetrieverParams,
}

impl Fixture {
    pub fn train(&self) -> Vec<&CoRExample> {
        self.corpus.train().collect()
    }

    pub fn test(&self) -> Vec<&CoRExample> {
        self.corpus.test().collect()
    }
}

pub fn fixture() -> Fixture {
    let tok = Tokenizer::micro_cor();
    let corpus = build_corpus(&small_config(3), &tok).unwrap();
    let mut lm = ToyLm::new(ToyLmConfig::new(tok.vocab_size()), &mut ChaCha8Rng::seed_from_u64(1));
    let train: Vec<CoRExample> = corpus.train().cloned().collect();
    let cfg = PretrainConfig {
        epochs: 4,
        ..Default::default()
    };
    pretrain_toy_lm(&mut lm, &train, &corpus.documents, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut enc = DualEncoder::new(tok.vocab_size(), 32, &mut rng);
    let ecfg = EncoderTrainConfig {
        epochs: 3,
        ..Default::default()
    };
    train_dual_encoder(&mut enc, &corpus.documents, &ecfg).unwrap();
    let params = RetrieverParams::new(lm.config().d_model, enc, &mut rng);
    Fixture { tok, corpus, lm, params }
}

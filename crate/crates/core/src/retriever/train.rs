use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{info_nce, Fusion, RetrieverParams};
use crate::error::{Error, Result};
use crate::models::encoder::{EncodeMode, Item};
use crate::models::lm::{check_finite, TrainLog};
use crate::models::{DualEncoder, ToyLm};
use crate::tensor::{Module, Optimizer, Tape, Tensor, Var};
use crate::types::{CoRExample, EntityDocument, MultimodalQuery, TokenId};

/// Training pairs with LM hidden states computed once up front; the LM is
/// frozen, so they never change.
#[derive(Debug, Clone)]
pub struct RetrievalSet<'d> {
    pub queries: Vec<&'d MultimodalQuery>,
    pub hidden: Vec<Vec<f64>>,
    pub targets: Vec<&'d EntityDocument>,
    pub comments: Vec<&'d [TokenId]>,
}

impl<'d> RetrievalSet<'d> {
    pub fn new(lm: &ToyLm, examples: &[&'d CoRExample], documents: &'d [EntityDocument]) -> Result<Self> {
        let queries: Vec<&MultimodalQuery> = examples.iter().map(|e| &e.query).collect();
        let hidden = lm.hidden_states(&queries)?;
        let mut targets = Vec::with_capacity(examples.len());
        for e in examples {
            targets.push(documents.get(e.target).ok_or(Error::Index {
                what: "documents",
                index: e.target,
                size: documents.len(),
            })?);
        }
        Ok(Self {
            queries,
            hidden,
            targets,
            comments: examples.iter().map(|e| e.comment.as_slice()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Probability of embedding the target with the comment instead of
    /// caption and metadata.
    pub comment_prob: f64,
    pub fusion: Fusion,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch: 64,
            seed: 21,
            comment_prob: 0.0,
            fusion: Fusion::Learned,
        }
    }

    pub fn stage2() -> Self {
        Self {
            epochs: 40,
            lr: 3e-4,
            batch: 64,
            seed: 22,
            comment_prob: 0.5,
            fusion: Fusion::Learned,
        }
    }
}

/// Contrastive loss of one batch: fused queries against their targets
/// (row `i` of `doc_items` is the positive for query `i`).
pub fn retrieval_batch_loss<'a>(
    params: &'a RetrieverParams,
    tape: &mut Tape<'a>,
    hidden: &[&[f64]],
    queries: &[&MultimodalQuery],
    doc_items: &[Item<'_>],
    fusion: Fusion,
) -> Result<Var> {
    let texts: Vec<Vec<TokenId>> = queries.iter().map(|q| q.encoder_text()).collect();
    let q_items: Vec<Item<'_>> = queries
        .iter()
        .zip(&texts)
        .map(|(q, t)| Item {
            text: t,
            image: &q.image,
        })
        .collect();
    let q = match fusion {
        Fusion::Fixed(b) if b == 0.0 => params.encoder.encode_batch(tape, &q_items, EncodeMode::Both)?,
        _ => {
            let d = params.adapter.fc1.d_in();
            let flat: Vec<f64> = hidden.iter().flat_map(|h| h.iter().copied()).collect();
            if flat.len() != d * queries.len() {
                return Err(Error::shape("hidden states", &[flat.len()], &[d * queries.len()]));
            }
            let h = tape.leaf(Tensor::new(vec![queries.len(), d], flat)?);
            let a = params.adapter.forward(tape, h)?;
            match fusion {
                Fusion::Fixed(b) if b == 1.0 => a,
                Fusion::Learned => {
                    let m = params.encoder.encode_batch(tape, &q_items, EncodeMode::Both)?;
                    params.fused_on_tape(tape, a, m)?
                }
                Fusion::Fixed(b) => {
                    let m = params.encoder.encode_batch(tape, &q_items, EncodeMode::Both)?;
                    let a = tape.scale(a, b);
                    let m = tape.scale(m, 1.0 - b);
                    let s = tape.add(a, m)?;
                    tape.l2_normalize_rows(s)
                }
            }
        }
    };
    let d = params.encoder.encode_batch(tape, doc_items, EncodeMode::Both)?;
    let ls = tape.param(&params.encoder.logit_scale);
    info_nce(tape, q, d, ls)
}

fn run_stage(params: &mut RetrieverParams, set: &RetrievalSet<'_>, cfg: &StageConfig, what: &str) -> Result<TrainLog> {
    if set.len() < 2 {
        return Err(Error::contract("retriever training needs at least two examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for batch in order.chunks(cfg.batch.max(2)) {
            if batch.len() < 2 {
                continue;
            }
            let doc_texts: Vec<Vec<TokenId>> = batch
                .iter()
                .map(|&i| {
                    if cfg.comment_prob > 0.0 && rng.random_bool(cfg.comment_prob) {
                        set.comments[i].to_vec()
                    } else {
                        set.targets[i].description()
                    }
                })
                .collect();
            let doc_items: Vec<Item<'_>> = batch
                .iter()
                .zip(&doc_texts)
                .map(|(&i, t)| Item {
                    text: t,
                    image: &set.targets[i].features,
                })
                .collect();
            let hidden: Vec<&[f64]> = batch.iter().map(|&i| set.hidden[i].as_slice()).collect();
            let queries: Vec<&MultimodalQuery> = batch.iter().map(|&i| set.queries[i]).collect();
            let (value, grads) = {
                let mut tape = Tape::new();
                let loss = retrieval_batch_loss(params, &mut tape, &hidden, &queries, &doc_items, cfg.fusion)?;
                let value = tape.value(loss).item();
                check_finite(value, what)?;
                (value, tape.backward(loss)?)
            };
            params.accumulate(&grads);
            opt.step(&mut params.params_with_grad())?;
            params.encoder.clamp_logit_scale();
            total += value;
            batches += 1;
        }
        log.epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(log)
}

/// Stage 1: only the hidden-state adapter learns; β and the encoder stay
/// fixed.
pub fn train_retriever_stage1(params: &mut RetrieverParams, set: &RetrievalSet<'_>, cfg: &StageConfig) -> Result<TrainLog> {
    params.set_requires_grad(false);
    params.adapter.set_requires_grad(true);
    let log = run_stage(params, set, cfg, "stage 1");
    params.set_requires_grad(true);
    log
}

/// Stage 2: adapter, β, encoder and logit scale all learn. With a fixed
/// fusion weight of 0 this trains the encoder-only ablation.
pub fn train_retriever_stage2(params: &mut RetrieverParams, set: &RetrievalSet<'_>, cfg: &StageConfig) -> Result<TrainLog> {
    params.set_requires_grad(true);
    if let Fusion::Fixed(_) = cfg.fusion {
        params.fusion_logit.set_requires_grad(false);
    }
    let log = run_stage(params, set, cfg, "stage 2");
    params.set_requires_grad(true);
    log
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch: 64,
            seed: 31,
        }
    }
}

/// Generic image-text alignment: each document image against its own
/// caption and metadata. No query ever enters this objective.
pub fn train_dual_encoder(enc: &mut DualEncoder, documents: &[EntityDocument], cfg: &EncoderTrainConfig) -> Result<TrainLog> {
    if documents.len() < 2 {
        return Err(Error::contract("encoder training needs at least two documents"));
    }
    let texts: Vec<Vec<TokenId>> = documents.iter().map(|d| d.description()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut order: Vec<usize> = (0..documents.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for batch in order.chunks(cfg.batch.max(2)) {
            if batch.len() < 2 {
                continue;
            }
            let images: Vec<Item<'_>> = batch
                .iter()
                .map(|&i| Item {
                    text: &[],
                    image: &documents[i].features,
                })
                .collect();
            let captions: Vec<Item<'_>> = batch
                .iter()
                .map(|&i| Item {
                    text: &texts[i],
                    image: &[],
                })
                .collect();
            let (value, grads) = {
                let mut tape = Tape::new();
                let a = enc.encode_batch(&mut tape, &images, EncodeMode::ImageOnly)?;
                let b = enc.encode_batch(&mut tape, &captions, EncodeMode::TextOnly)?;
                let ls = tape.param(&enc.logit_scale);
                let loss = info_nce(&mut tape, a, b, ls)?;
                let value = tape.value(loss).item();
                check_finite(value, "encoder")?;
                (value, tape.backward(loss)?)
            };
            enc.accumulate(&grads);
            opt.step(&mut enc.params_with_grad())?;
            enc.clamp_logit_scale();
            total += value;
            batches += 1;
        }
        log.epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(log)
}

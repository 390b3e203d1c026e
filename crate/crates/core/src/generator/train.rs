use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EntityAdapter;
use crate::error::{Error, Result};
use crate::models::lm::{check_finite, sequence_loss, LmSequence, Piece, TrainLog};
use crate::models::tokenizer::EOS;
use crate::models::ToyLm;
use crate::tensor::{Module, Optimizer, Tape, Var};
use crate::types::{EntityDocument, MultimodalQuery, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub struct EntityTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EntityTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch: 32,
            seed: 41,
        }
    }
}

/// Mean cross-entropy of `comment + EOS` given the query and the spliced
/// entity, for a packed batch.
pub fn entity_batch_loss<'a>(
    lm: &'a ToyLm,
    xi: &'a EntityAdapter,
    tape: &mut Tape<'a>,
    queries: &[&MultimodalQuery],
    docs: &[&EntityDocument],
    targets: &[&[TokenId]],
) -> Result<Var> {
    let mut seqs = Vec::with_capacity(queries.len());
    let mut ys = Vec::with_capacity(queries.len());
    for ((q, d), t) in queries.iter().zip(docs).zip(targets) {
        let entity = xi.forward(lm, tape, d)?;
        let l_m = tape.shape(entity)[0];
        let mut prefix = ToyLm::query_pieces(q);
        prefix.push(Piece::Rows(entity));
        let prefix_len = if q.image.is_empty() { 0 } else { lm.config().tiles } + q.question.len() + l_m;
        let s = LmSequence::with_text(prefix, prefix_len, t);
        seqs.push(lm.embed(tape, &s.pieces)?);
        ys.push(s.targets);
    }
    sequence_loss(lm, tape, &seqs, &ys)
}

/// Trains ξ alone on `(query, conditioning document, comment)` triples;
/// the LM must already be frozen.
pub fn train_entity_adapter(
    xi: &mut EntityAdapter,
    lm: &ToyLm,
    data: &[(&MultimodalQuery, &EntityDocument, &[TokenId])],
    cfg: &EntityTrainConfig,
) -> Result<TrainLog> {
    if !lm.is_frozen() {
        return Err(Error::contract("entity adapter training requires a frozen language model"));
    }
    if data.is_empty() {
        return Err(Error::contract("entity adapter training set is empty"));
    }
    let targets: Vec<Vec<TokenId>> = data
        .iter()
        .map(|(_, _, c)| c.iter().copied().chain([EOS]).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for batch in order.chunks(cfg.batch.max(1)) {
            let queries: Vec<&MultimodalQuery> = batch.iter().map(|&i| data[i].0).collect();
            let docs: Vec<&EntityDocument> = batch.iter().map(|&i| data[i].1).collect();
            let ts: Vec<&[TokenId]> = batch.iter().map(|&i| targets[i].as_slice()).collect();
            let (value, grads) = {
                let mut tape = Tape::new();
                let loss = entity_batch_loss(lm, xi, &mut tape, &queries, &docs, &ts)?;
                let value = tape.value(loss).item();
                check_finite(value, "entity adapter")?;
                (value, tape.backward(loss)?)
            };
            xi.accumulate(&grads);
            opt.step(&mut xi.params_with_grad())?;
            total += value;
            batches += 1;
        }
        log.epoch_losses.push(total / batches as f64);
    }
    Ok(log)
}

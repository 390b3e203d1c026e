//! Comment-aware retrieval: an adapted LM hidden state fused with the dual
//! encoder's query embedding, scored against encoder-only document
//! embeddings.

mod index;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::models::encoder::{EncodeMode, Item};
use crate::models::{DualEncoder, ToyLm};
use crate::tensor::{dot, l2_normalize, Linear, Module, Param, Tape, Tensor, Var};
use crate::types::{EntityDocument, MultimodalQuery};

pub use index::{top_k, EmbeddingIndex};
pub use train::{
    train_dual_encoder, train_retriever_stage1, train_retriever_stage2, retrieval_batch_loss, EncoderTrainConfig, RetrievalSet,
    StageConfig,
};

pub const ADAPTER_HIDDEN: usize = 128;

/// FC-GeLU-FC map from an LM hidden state into the retrieval space.
#[derive(Debug, Clone)]
pub struct HiddenStateAdapter {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl HiddenStateAdapter {
    pub fn new<R: Rng + ?Sized>(d_model: usize, embed_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new("ret.adapter.fc1", d_model, ADAPTER_HIDDEN, rng),
            fc2: Linear::new("ret.adapter.fc2", ADAPTER_HIDDEN, embed_dim, rng),
        }
    }

    /// `hidden: B × d_model` to unit rows `B × e`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, hidden: Var) -> Result<Var> {
        let d = self.fc1.d_in();
        if tape.shape(hidden).len() != 2 || tape.value(hidden).cols() != d {
            return Err(Error::shape("hidden state adapter", tape.shape(hidden), &[0, d]));
        }
        let h = self.fc1.forward(tape, hidden)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        Ok(tape.l2_normalize_rows(h))
    }
}

impl Module for HiddenStateAdapter {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Which text a document is embedded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextChoice {
    /// Caption followed by metadata.
    Caption,
    /// Comment-style text, falling back to the caption when absent.
    Comment,
}

/// How β is obtained when embedding queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fusion {
    Learned,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct RetrieverParams {
    pub adapter: HiddenStateAdapter,
    /// β = sigmoid(fusion_logit).
    pub fusion_logit: Param,
    pub encoder: DualEncoder,
}

impl RetrieverParams {
    pub fn new<R: Rng + ?Sized>(d_model: usize, encoder: DualEncoder, rng: &mut R) -> Self {
        Self {
            adapter: HiddenStateAdapter::new(d_model, encoder.embed_dim(), rng),
            fusion_logit: Param::new("ret.fusion_logit", Tensor::scalar(0.0)),
            encoder,
        }
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.fusion_logit.value().item())
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push(
            "ret.config",
            Tensor::vector(vec![self.adapter.fc1.d_in() as f64]),
        );
        ck.extend(Checkpoint::from_module(&self.adapter));
        ck.push(self.fusion_logit.name(), self.fusion_logit.value().clone());
        ck.extend(self.encoder.to_checkpoint());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let d_model = ck.require("ret.config")?.item() as usize;
        let encoder = DualEncoder::from_checkpoint(ck)?;
        let mut p = Self::new(d_model, encoder, &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_into(&mut p.adapter)?;
        *p.fusion_logit.value_mut() = ck.require("ret.fusion_logit")?.clone();
        Ok(p)
    }

    /// SHA-256 of the serialized parameters; stamped into indices.
    pub fn checksum(&self) -> String {
        self.to_checkpoint().sha256()
    }

    /// Adapted hidden states `ψ_LMM(h)` for precomputed states.
    pub fn adapt_hidden_states(&self, hidden: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if hidden.is_empty() {
            return Ok(Vec::new());
        }
        let d = hidden[0].len();
        let mut tape = Tape::new();
        let flat: Vec<f64> = hidden.iter().flatten().copied().collect();
        if flat.len() != d * hidden.len() {
            return Err(Error::shape("hidden states", &[flat.len()], &[d * hidden.len()]));
        }
        let h = tape.leaf(Tensor::new(vec![hidden.len(), d], flat)?);
        let a = self.adapter.forward(&mut tape, h)?;
        let t = tape.value(a);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    pub fn adapt_hidden_state(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        Ok(self.adapt_hidden_states(&[hidden.to_vec()])?.remove(0))
    }

    /// ψ_MM of queries: instruction-tagged question plus query image.
    pub fn encode_queries(&self, queries: &[&MultimodalQuery]) -> Result<Vec<Vec<f64>>> {
        let texts: Vec<Vec<_>> = queries.iter().map(|q| q.encoder_text()).collect();
        let items: Vec<Item<'_>> = queries
            .iter()
            .zip(&texts)
            .map(|(q, t)| Item {
                text: t,
                image: &q.image,
            })
            .collect();
        self.encoder.encode_many(&items, EncodeMode::Both)
    }

    /// Query embeddings from precomputed LM hidden states.
    pub fn embed_queries_with_hidden(&self, queries: &[&MultimodalQuery], hidden: &[Vec<f64>], fusion: Fusion) -> Result<Vec<Vec<f64>>> {
        if queries.len() != hidden.len() {
            return Err(Error::shape("query batch", &[queries.len()], &[hidden.len()]));
        }
        let beta = match fusion {
            Fusion::Learned => self.beta(),
            Fusion::Fixed(b) => b,
        };
        let mm = if beta == 1.0 {
            vec![Vec::new(); queries.len()]
        } else {
            self.encode_queries(queries)?
        };
        let lmm = if beta == 0.0 {
            vec![Vec::new(); queries.len()]
        } else {
            self.adapt_hidden_states(hidden)?
        };
        Ok(lmm.iter().zip(&mm).map(|(a, m)| fuse(a, m, beta)).collect())
    }

    pub fn embed_queries(&self, lm: &ToyLm, queries: &[&MultimodalQuery], fusion: Fusion) -> Result<Vec<Vec<f64>>> {
        let hidden = if fusion == Fusion::Fixed(0.0) {
            vec![Vec::new(); queries.len()]
        } else {
            lm.hidden_states(queries)?
        };
        self.embed_queries_with_hidden(queries, &hidden, fusion)
    }

    pub fn embed_query(&self, lm: &ToyLm, query: &MultimodalQuery) -> Result<Vec<f64>> {
        Ok(self.embed_queries(lm, &[query], Fusion::Learned)?.remove(0))
    }

    pub fn embed_documents(&self, docs: &[&EntityDocument], choice: TextChoice) -> Result<Vec<Vec<f64>>> {
        let texts: Vec<Vec<_>> = docs.iter().map(|d| document_text(d, choice)).collect();
        let items: Vec<Item<'_>> = docs
            .iter()
            .zip(&texts)
            .map(|(d, t)| Item {
                text: t,
                image: &d.features,
            })
            .collect();
        self.encoder.encode_many(&items, EncodeMode::Both)
    }

    pub fn embed_document(&self, doc: &EntityDocument, choice: TextChoice) -> Result<Vec<f64>> {
        Ok(self.embed_documents(&[doc], choice)?.remove(0))
    }

    /// Top-k documents for a query.
    pub fn retrieve(&self, lm: &ToyLm, query: &MultimodalQuery, index: &EmbeddingIndex, k: usize) -> Result<Vec<(usize, f64)>> {
        index.search(&self.embed_query(lm, query)?, k)
    }

    /// Fused query rows on a tape: `normalize(β a + (1 − β) m)`.
    pub(crate) fn fused_on_tape<'a>(&'a self, tape: &mut Tape<'a>, adapted: Var, mm: Var) -> Result<Var> {
        let b = tape.param(&self.fusion_logit);
        let beta = tape.sigmoid(b);
        let one_minus = tape.affine(beta, -1.0, 1.0);
        let a = tape.mul_scalar(adapted, beta)?;
        let m = tape.mul_scalar(mm, one_minus)?;
        let s = tape.add(a, m)?;
        Ok(tape.l2_normalize_rows(s))
    }
}

impl Module for RetrieverParams {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.adapter.params();
        v.push(&self.fusion_logit);
        v.extend(self.encoder.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.adapter.params_mut();
        v.push(&mut self.fusion_logit);
        v.extend(self.encoder.params_mut());
        v
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Text a document is embedded with under `choice`.
pub fn document_text(doc: &EntityDocument, choice: TextChoice) -> Vec<usize> {
    match (choice, &doc.comment) {
        (TextChoice::Comment, Some(c)) if !c.is_empty() => c.clone(),
        _ => doc.description(),
    }
}

/// Convex combination of unit vectors, renormalized. The endpoints return
/// the corresponding component unchanged.
pub fn fuse(adapted: &[f64], mm: &[f64], beta: f64) -> Vec<f64> {
    if beta == 0.0 {
        return mm.to_vec();
    }
    if beta == 1.0 {
        return adapted.to_vec();
    }
    l2_normalize(
        &adapted
            .iter()
            .zip(mm)
            .map(|(a, m)| beta * a + (1.0 - beta) * m)
            .collect::<Vec<_>>(),
    )
}

pub fn score(query: &[f64], doc: &[f64]) -> Result<f64> {
    if query.len() != doc.len() {
        return Err(Error::shape("score", &[query.len()], &[doc.len()]));
    }
    Ok(dot(query, doc))
}

/// Symmetric in-batch contrastive loss on a tape. `log_scale` holds the
/// logarithm of the logit multiplier.
pub fn info_nce<'a>(tape: &mut Tape<'a>, queries: Var, docs: Var, log_scale: Var) -> Result<Var> {
    let b = tape.value(queries).rows();
    if b < 2 {
        return Err(Error::contract(format!("contrastive batch needs at least 2 pairs, got {b}")));
    }
    if tape.shape(queries) != tape.shape(docs) {
        return Err(Error::shape("info_nce", tape.shape(queries), tape.shape(docs)));
    }
    let dt = tape.transpose(docs)?;
    let sims = tape.matmul(queries, dt)?;
    let scale = tape.exp(log_scale);
    let logits = tape.mul_scalar(sims, scale)?;
    let diag: Vec<usize> = (0..b).collect();
    let q2d = tape.cross_entropy(logits, &diag)?;
    let lt = tape.transpose(logits)?;
    let d2q = tape.cross_entropy(lt, &diag)?;
    let sum = tape.add(q2d, d2q)?;
    Ok(tape.scale(sum, 0.5))
}

/// Value of the symmetric contrastive loss with logit multiplier `scale`.
pub fn info_nce_loss(queries: &Tensor, docs: &Tensor, scale: f64) -> Result<f64> {
    if scale <= 0.0 {
        return Err(Error::contract("logit scale must be positive"));
    }
    let mut tape = Tape::new();
    let q = tape.leaf(queries.clone());
    let d = tape.leaf(docs.clone());
    let s = tape.leaf(Tensor::scalar(scale.ln()));
    let l = info_nce(&mut tape, q, d, s)?;
    Ok(tape.value(l).item())
}

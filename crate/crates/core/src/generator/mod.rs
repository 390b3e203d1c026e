//! Retrieval-aware generation: retrieved entities are adapted by a
//! trainable tile adapter and spliced into the frozen LM's input stream.

mod train;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::vocab;
use crate::error::{Error, Result};
use crate::models::lm::Piece;
use crate::models::tokenizer::{BOS, RET};
use crate::models::{TileAdapter, Tokenizer, ToyLm};
use crate::retriever::{EmbeddingIndex, Fusion, RetrieverParams};
use crate::tensor::{Module, Param, Tape, Tensor, Var};
use crate::types::{EntityDocument, MultimodalQuery, TokenId};

pub use train::{entity_batch_loss, train_entity_adapter, EntityTrainConfig};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 16;

/// Maps retrieved image tiles into the LM embedding space (ξ).
#[derive(Debug, Clone)]
pub struct EntityAdapter {
    pub tiles: TileAdapter,
}

impl EntityAdapter {
    /// Starts as an exact copy of the LM's native visual adapter.
    pub fn from_lm(lm: &ToyLm) -> Self {
        let mut tiles = lm.visual.renamed("lm.visual", "xi");
        tiles.set_requires_grad(true);
        Self { tiles }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module(self)
    }

    /// Loads ξ weights into an adapter shaped like `lm`'s visual adapter.
    pub fn from_checkpoint(lm: &ToyLm, ck: &Checkpoint) -> Result<Self> {
        let mut a = Self::from_lm(lm);
        ck.load_into(&mut a)?;
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Entity rows on a tape: adapted tiles, then caption and metadata
    /// token embeddings.
    pub fn forward<'a>(&'a self, lm: &'a ToyLm, tape: &mut Tape<'a>, doc: &EntityDocument) -> Result<Var> {
        let tiles = self.tiles.forward(tape, &doc.features)?;
        let text = doc.description();
        if text.is_empty() {
            return Ok(tiles);
        }
        let words = lm.embed(tape, &[Piece::Tokens(&text)])?;
        tape.concat_rows(&[tiles, words])
    }
}

impl Module for EntityAdapter {
    fn params(&self) -> Vec<&Param> {
        self.tiles.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.tiles.params_mut()
    }
}

/// `l_m × d_model` entity representation without gradients.
pub fn adapt_entity(xi: &EntityAdapter, lm: &ToyLm, doc: &EntityDocument) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = xi.forward(lm, &mut tape, doc)?;
    Ok(tape.value(v).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRecord {
    /// Committed-sequence position at which retrieval fired.
    pub position: usize,
    pub doc_id: usize,
    /// Rank-1 retrieval score; absent when the entity was supplied directly.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState {
    /// Rows fed to the LM before decoding the comment.
    pub committed_len: usize,
    pub emitted: Vec<TokenId>,
    pub retrieval: Option<RetrievalRecord>,
    pub finished: bool,
}

/// Whether the spliced entity is shown to the LM or replaced by zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityView {
    Adapted,
    Masked,
}

fn query_prompt_len(lm: &ToyLm, q: &MultimodalQuery) -> usize {
    let tiles = if q.image.is_empty() { 0 } else { lm.config().tiles };
    tiles + q.question.len()
}

/// `[query image, question, entity]` prompt rows.
fn unicorn_prompt(lm: &ToyLm, xi: &EntityAdapter, q: &MultimodalQuery, doc: &EntityDocument, view: EntityView) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut entity = xi.forward(lm, &mut tape, doc)?;
    if view == EntityView::Masked {
        let shape = tape.shape(entity).to_vec();
        entity = tape.leaf(Tensor::zeros(&shape));
    }
    let mut pieces = ToyLm::query_pieces(q);
    pieces.push(Piece::Rows(entity));
    let x = lm.embed(&mut tape, &pieces)?;
    Ok(tape.value(x).clone())
}

/// Generations conditioned on given documents (retrieved or ground truth).
pub fn generate_with_entities(
    lm: &ToyLm,
    xi: &EntityAdapter,
    queries: &[&MultimodalQuery],
    docs: &[&EntityDocument],
    view: EntityView,
    max_new: usize,
) -> Result<Vec<GenerationState>> {
    if queries.len() != docs.len() {
        return Err(Error::shape("generation batch", &[queries.len()], &[docs.len()]));
    }
    let prompts = queries
        .iter()
        .zip(docs)
        .map(|(q, d)| unicorn_prompt(lm, xi, q, d, view))
        .collect::<Result<Vec<_>>>()?;
    let outputs = lm.generate(&prompts, max_new)?;
    Ok(queries
        .iter()
        .zip(docs)
        .zip(prompts)
        .zip(outputs)
        .map(|(((q, d), p), emitted)| GenerationState {
            committed_len: p.rows(),
            finished: emitted.len() < max_new,
            emitted,
            retrieval: Some(RetrievalRecord {
                position: query_prompt_len(lm, q),
                doc_id: d.id,
                score: None,
            }),
        })
        .collect())
}

/// Full retrieval-aware generation for a batch of queries: the retrieval
/// token is forced first, the top-1 document is retrieved and spliced after
/// the query, then decoding continues greedily.
pub fn generate_with_retrieval(
    lm: &ToyLm,
    retriever: &RetrieverParams,
    xi: &EntityAdapter,
    queries: &[&MultimodalQuery],
    documents: &[EntityDocument],
    index: &EmbeddingIndex,
    max_new: usize,
) -> Result<Vec<GenerationState>> {
    let hits = retrieve_top1(lm, retriever, queries, index)?;
    let docs = hits
        .iter()
        .map(|&(id, _)| document(documents, id))
        .collect::<Result<Vec<_>>>()?;
    let mut states = generate_with_entities(lm, xi, queries, &docs, EntityView::Adapted, max_new)?;
    for (s, (_, score)) in states.iter_mut().zip(hits) {
        if let Some(r) = s.retrieval.as_mut() {
            r.score = Some(score);
        }
    }
    Ok(states)
}

pub fn retrieve_top1(lm: &ToyLm, retriever: &RetrieverParams, queries: &[&MultimodalQuery], index: &EmbeddingIndex) -> Result<Vec<(usize, f64)>> {
    let emb = retriever.embed_queries(lm, queries, Fusion::Learned)?;
    emb.iter()
        .map(|e| Ok(index.search(e, 1)?[0]))
        .collect()
}

pub fn document(documents: &[EntityDocument], id: usize) -> Result<&EntityDocument> {
    documents
        .iter()
        .find(|d| d.id == id)
        .ok_or(Error::Index {
            what: "documents",
            index: id,
            size: documents.len(),
        })
}

/// Static multi-image prompt: query image and question, the retrieval
/// marker, the retrieved image through the native adapter with its caption
/// and metadata, an answer instruction and the start tag.
pub fn rag_prompt(lm: &ToyLm, tokenizer: &Tokenizer, q: &MultimodalQuery, doc: &EntityDocument) -> Result<Tensor> {
    let ret = [RET];
    let text = doc.description();
    let instruction = tokenizer.encode(vocab::ANSWER_INSTRUCTION)?;
    let bos = [BOS];
    let mut pieces = ToyLm::query_pieces(q);
    pieces.extend([
        Piece::Tokens(&ret),
        Piece::Image(&doc.features),
        Piece::Tokens(&text),
        Piece::Tokens(&instruction),
        Piece::Tokens(&bos),
    ]);
    lm.prompt_embeddings(&pieces)
}

/// Retrieval-augmented baseline with a frozen LM and no trained adapter.
pub fn rag_baseline_generate(
    lm: &ToyLm,
    tokenizer: &Tokenizer,
    retriever: &RetrieverParams,
    queries: &[&MultimodalQuery],
    documents: &[EntityDocument],
    index: &EmbeddingIndex,
    max_new: usize,
) -> Result<Vec<(usize, Vec<TokenId>)>> {
    let hits = retrieve_top1(lm, retriever, queries, index)?;
    let prompts = queries
        .iter()
        .zip(&hits)
        .map(|(q, &(id, _))| rag_prompt(lm, tokenizer, q, document(documents, id)?))
        .collect::<Result<Vec<_>>>()?;
    let out = lm.generate(&prompts, max_new)?;
    Ok(hits.into_iter().map(|h| h.0).zip(out).collect())
}

/// Query-only generation: `[query image, question, BOS]`.
pub fn generate_without_retrieval(lm: &ToyLm, queries: &[&MultimodalQuery], max_new: usize) -> Result<Vec<Vec<TokenId>>> {
    let bos = [BOS];
    let prompts = queries
        .iter()
        .map(|q| {
            let mut pieces = ToyLm::query_pieces(q);
            pieces.push(Piece::Tokens(&bos));
            lm.prompt_embeddings(&pieces)
        })
        .collect::<Result<Vec<_>>>()?;
    lm.generate(&prompts, max_new)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub query_id: usize,
    pub retrieved_doc_id: usize,
    pub score: f64,
    pub comment: String,
}

pub fn write_transcript(path: &Path, records: &[TranscriptRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::contract(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

//! Small pre-norm causal transformer with a native visual adapter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenizer::{BOS, EOS};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{LayerNorm, Linear, Module, Optimizer, Param, Segment, Tape, Tensor, Var};
use crate::types::{CoRExample, EntityDocument, MultimodalQuery, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub tiles: usize,
    pub tile_dim: usize,
    pub adapter_hidden: usize,
}

impl ToyLmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 96,
            tiles: 4,
            tile_dim: 8,
            adapter_hidden: 128,
        }
    }

    pub fn image_dim(&self) -> usize {
        self.tiles * self.tile_dim
    }

    fn to_tensor(self) -> Tensor {
        Tensor::vector(
            [
                self.vocab_size,
                self.d_model,
                self.n_layers,
                self.n_heads,
                self.d_ff,
                self.max_seq,
                self.tiles,
                self.tile_dim,
                self.adapter_hidden,
            ]
            .iter()
            .map(|&v| v as f64)
            .collect(),
        )
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
        if v.len() != 9 {
            return Err(Error::Checkpoint("malformed lm.config record".into()));
        }
        Ok(Self {
            vocab_size: v[0],
            d_model: v[1],
            n_layers: v[2],
            n_heads: v[3],
            d_ff: v[4],
            max_seq: v[5],
            tiles: v[6],
            tile_dim: v[7],
            adapter_hidden: v[8],
        })
    }
}

/// LayerNorm-FC-GeLU-FC applied to each image tile independently.
#[derive(Debug, Clone)]
pub struct TileAdapter {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    tiles: usize,
}

impl TileAdapter {
    pub fn new<R: Rng + ?Sized>(name: &str, tiles: usize, tile_dim: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(&format!("{name}.norm"), tile_dim),
            fc1: Linear::new(&format!("{name}.fc1"), tile_dim, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, d_out, rng),
            tiles,
        }
    }

    pub fn tiles(&self) -> usize {
        self.tiles
    }

    pub fn tile_dim(&self) -> usize {
        self.fc1.d_in()
    }

    /// Copy with every parameter renamed from `from` prefix to `to`.
    pub fn renamed(&self, from: &str, to: &str) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            let name = p.name().replacen(from, to, 1);
            p.set_name(name);
        }
        out
    }

    /// `image` is the flat feature vector; returns `tiles × d_out` rows.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, image: &[f64]) -> Result<Var> {
        let expected = self.tiles * self.tile_dim();
        if image.len() != expected {
            return Err(Error::shape("tile adapter", &[image.len()], &[expected]));
        }
        let x = tape.leaf(Tensor::new(vec![self.tiles, self.tile_dim()], image.to_vec())?);
        self.forward_tiles(tape, x)
    }

    pub fn forward_tiles<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let n = self.norm.forward(tape, x)?;
        let h = self.fc1.forward(tape, n)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }

    pub fn apply(&self, image: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, image)?;
        Ok(tape.value(v).clone())
    }
}

impl Module for TileAdapter {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm.params();
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm.params_mut();
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ToyLmConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let mut wo = Linear::new(&format!("{name}.wo"), d, d, rng);
        let mut ff2 = Linear::new(&format!("{name}.ff2"), cfg.d_ff, d, rng);
        // Shrink residual branches so the untrained stack stays near identity.
        let shrink = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        for w in [&mut wo.weight, &mut ff2.weight] {
            w.value_mut().data_mut().iter_mut().for_each(|v| *v *= shrink);
        }
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            wq: Linear::new(&format!("{name}.wq"), d, d, rng),
            wk: Linear::new(&format!("{name}.wk"), d, d, rng),
            wv: Linear::new(&format!("{name}.wv"), d, d, rng),
            wo,
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            ff1: Linear::new(&format!("{name}.ff1"), d, cfg.d_ff, rng),
            ff2,
        }
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let a = self.ln1.forward(tape, x)?;
        let q = self.wq.forward(tape, a)?;
        let k = self.wk.forward(tape, a)?;
        let v = self.wv.forward(tape, a)?;
        let att = tape.causal_attention(q, k, v, heads, segments)?;
        let o = self.wo.forward(tape, att)?;
        let x = tape.add(x, o)?;
        let m = self.ln2.forward(tape, x)?;
        let f = self.ff1.forward(tape, m)?;
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, f)?;
        tape.add(x, f)
    }

    fn modules(&self) -> [&dyn ModuleRef; 8] {
        [&self.ln1, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2, &self.ff1, &self.ff2]
    }
}

// Object-safe view used to flatten nested parameter lists.
trait ModuleRef {
    fn refs(&self) -> Vec<&Param>;
}

impl<M: Module> ModuleRef for M {
    fn refs(&self) -> Vec<&Param> {
        self.params()
    }
}

/// One piece of an LM input sequence.
#[derive(Debug, Clone, Copy)]
pub enum Piece<'s> {
    Tokens(&'s [TokenId]),
    /// Image features routed through the native visual adapter.
    Image(&'s [f64]),
    /// Precomputed `n × d_model` rows already on the tape.
    Rows(Var),
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    cfg: ToyLmConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub visual: TileAdapter,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    frozen: bool,
}

impl ToyLm {
    pub fn new<R: Rng + ?Sized>(cfg: ToyLmConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            tok_emb: Param::new("lm.tok_emb", Tensor::randn(&[cfg.vocab_size, d], 0.5, rng)),
            pos_emb: Param::new("lm.pos_emb", Tensor::randn(&[cfg.max_seq, d], 0.1, rng)),
            visual: TileAdapter::new("lm.visual", cfg.tiles, cfg.tile_dim, cfg.adapter_hidden, d, rng),
            blocks: (0..cfg.n_layers)
                .map(|i| Block::new(&format!("lm.block{i}"), &cfg, rng))
                .collect(),
            ln_f: LayerNorm::new("lm.ln_f", d),
            head: Linear::new("lm.head", d, cfg.vocab_size, rng),
            cfg,
            frozen: false,
        }
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model frozen; its parameters stop receiving gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.set_requires_grad(false);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("lm.config", self.cfg.to_tensor());
        ck.push("lm.frozen", Tensor::scalar(if self.frozen { 1.0 } else { 0.0 }));
        ck.extend(Checkpoint::from_module(self));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ToyLmConfig::from_tensor(ck.require("lm.config")?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lm = Self::new(cfg, &mut rng);
        ck.load_into(&mut lm)?;
        if ck.require("lm.frozen")?.item() != 0.0 {
            lm.freeze();
        }
        Ok(lm)
    }

    /// Embeds a sequence of pieces into `L × d_model` rows.
    pub fn embed<'a>(&'a self, tape: &mut Tape<'a>, pieces: &[Piece<'_>]) -> Result<Var> {
        let mut parts = Vec::with_capacity(pieces.len());
        let mut table = None;
        for piece in pieces {
            match *piece {
                Piece::Tokens(ids) if ids.is_empty() => {}
                Piece::Tokens(ids) => {
                    let t = *table.get_or_insert_with(|| tape.param(&self.tok_emb));
                    parts.push(tape.select_rows(t, ids)?);
                }
                Piece::Image(x) => parts.push(self.visual.forward(tape, x)?),
                Piece::Rows(v) => parts.push(v),
            }
        }
        if parts.is_empty() {
            return Err(Error::contract("empty LM input"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat_rows(&parts)
    }

    /// Runs packed sequences (each `len × d_model`) through the transformer
    /// and returns the final-norm hidden states of all rows with the segment
    /// layout.
    pub fn forward_packed<'a>(&'a self, tape: &mut Tape<'a>, seqs: &[Var]) -> Result<(Var, Vec<Segment>)> {
        let mut segments = Vec::with_capacity(seqs.len());
        let mut pos = Vec::new();
        let mut start = 0;
        for &s in seqs {
            let shape = tape.shape(s);
            if shape.len() != 2 || shape[1] != self.cfg.d_model {
                return Err(Error::shape("lm input", shape, &[0, self.cfg.d_model]));
            }
            let len = shape[0];
            if len > self.cfg.max_seq {
                return Err(Error::Length {
                    len,
                    limit: self.cfg.max_seq,
                });
            }
            segments.push(Segment { start, len });
            pos.extend(0..len);
            start += len;
        }
        if seqs.is_empty() {
            return Err(Error::contract("empty LM batch"));
        }
        let x = if seqs.len() == 1 {
            seqs[0]
        } else {
            tape.concat_rows(seqs)?
        };
        let pe = tape.param(&self.pos_emb);
        let pe = tape.select_rows(pe, &pos)?;
        let mut h = tape.add(x, pe)?;
        for b in &self.blocks {
            h = b.forward(tape, h, self.cfg.n_heads, &segments)?;
        }
        let h = self.ln_f.forward(tape, h)?;
        Ok((h, segments))
    }

    pub fn logits<'a>(&'a self, tape: &mut Tape<'a>, hidden: Var) -> Result<Var> {
        self.head.forward(tape, hidden)
    }

    /// Logits and hidden states for one sequence of arbitrary embeddings.
    pub fn lm_forward(&self, embeddings: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.leaf(embeddings.clone());
        let (h, _) = self.forward_packed(&mut tape, &[x])?;
        let l = self.logits(&mut tape, h)?;
        Ok((tape.value(l).clone(), tape.value(h).clone()))
    }

    /// Image-prefix plus question pieces of a query.
    pub fn query_pieces(query: &MultimodalQuery) -> Vec<Piece<'_>> {
        let mut pieces = Vec::with_capacity(2);
        if !query.image.is_empty() {
            pieces.push(Piece::Image(&query.image));
        }
        pieces.push(Piece::Tokens(&query.question));
        pieces
    }

    /// Final-layer state at the last input position of `query`.
    pub fn extract_hidden_state(&self, query: &MultimodalQuery) -> Result<Vec<f64>> {
        Ok(self.hidden_states(&[query])?.remove(0))
    }

    pub fn hidden_states(&self, queries: &[&MultimodalQuery]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(CHUNK) {
            let mut tape = Tape::new();
            let mut seqs = Vec::with_capacity(chunk.len());
            for q in chunk {
                if q.is_empty() {
                    return Err(Error::contract("hidden state of an empty query"));
                }
                seqs.push(self.embed(&mut tape, &Self::query_pieces(q))?);
            }
            let (h, segs) = self.forward_packed(&mut tape, &seqs)?;
            let hv = tape.value(h);
            for s in segs {
                out.push(hv.row(s.start + s.len - 1).to_vec());
            }
        }
        Ok(out)
    }

    /// Greedy decoding from precomputed prompt embeddings, batched. Stops a
    /// sequence at EOS (not included in the output) or after `max_new`
    /// tokens.
    pub fn generate(&self, prompts: &[Tensor], max_new: usize) -> Result<Vec<Vec<TokenId>>> {
        const CHUNK: usize = 64;
        let d = self.cfg.d_model;
        for p in prompts {
            if p.cols() != d {
                return Err(Error::shape("prompt", p.shape(), &[0, d]));
            }
            if p.rows() + max_new > self.cfg.max_seq {
                return Err(Error::Length {
                    len: p.rows() + max_new,
                    limit: self.cfg.max_seq,
                });
            }
        }
        let table = self.tok_emb.value();
        let mut outputs: Vec<Vec<TokenId>> = vec![Vec::new(); prompts.len()];
        let mut done = vec![max_new == 0; prompts.len()];
        for chunk_start in (0..prompts.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (chunk_start..(chunk_start + CHUNK).min(prompts.len())).collect();
            for _ in 0..max_new {
                let active: Vec<usize> = idx.iter().copied().filter(|&i| !done[i]).collect();
                if active.is_empty() {
                    break;
                }
                let mut tape = Tape::new();
                let mut seqs = Vec::with_capacity(active.len());
                for &i in &active {
                    let mut data = prompts[i].data().to_vec();
                    for &t in &outputs[i] {
                        data.extend_from_slice(table.row(t));
                    }
                    let rows = data.len() / d;
                    seqs.push(tape.leaf(Tensor::new(vec![rows, d], data)?));
                }
                let (h, segs) = self.forward_packed(&mut tape, &seqs)?;
                let last: Vec<usize> = segs.iter().map(|s| s.start + s.len - 1).collect();
                let hl = tape.select_rows(h, &last)?;
                let logits = self.logits(&mut tape, hl)?;
                let lv = tape.value(logits);
                for (r, &i) in active.iter().enumerate() {
                    let tok = argmax(lv.row(r));
                    if tok == EOS {
                        done[i] = true;
                    } else {
                        outputs[i].push(tok);
                        if outputs[i].len() == max_new {
                            done[i] = true;
                        }
                    }
                }
            }
        }
        Ok(outputs)
    }

    /// Prompt embeddings for a piece list, computed without gradients.
    pub fn prompt_embeddings(&self, pieces: &[Piece<'_>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.embed(&mut tape, pieces)?;
        Ok(tape.value(v).clone())
    }

    /// Raw token-table rows for `ids`.
    pub fn token_embeddings(&self, ids: &[TokenId]) -> Result<Tensor> {
        self.prompt_embeddings(&[Piece::Tokens(ids)])
    }
}

/// Lowest index among maximal entries.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Module for ToyLm {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        v.extend(self.visual.params());
        for b in &self.blocks {
            for m in b.modules() {
                v.extend(m.refs());
            }
        }
        v.extend(self.ln_f.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        v.extend(self.visual.params_mut());
        for b in &mut self.blocks {
            v.extend(b.ln1.params_mut());
            v.extend(b.wq.params_mut());
            v.extend(b.wk.params_mut());
            v.extend(b.wv.params_mut());
            v.extend(b.wo.params_mut());
            v.extend(b.ln2.params_mut());
            v.extend(b.ff1.params_mut());
            v.extend(b.ff2.params_mut());
        }
        v.extend(self.ln_f.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// A training sequence: input pieces plus the loss targets, given as
/// `(row predicting, target token)` pairs.
pub struct LmSequence<'s> {
    pub pieces: Vec<Piece<'s>>,
    pub targets: Vec<(usize, TokenId)>,
    len: usize,
}

impl<'s> LmSequence<'s> {
    pub fn new() -> Self {
        Self {
            pieces: Vec::new(),
            targets: Vec::new(),
            len: 0,
        }
    }

    /// `prefix` pieces (`prefix_len` rows) followed by `text`; every text
    /// token after the first position is a next-token target.
    pub fn with_text(prefix: Vec<Piece<'s>>, prefix_len: usize, text: &'s [TokenId]) -> Self {
        let mut s = Self::new();
        s.pieces = prefix;
        s.len = prefix_len;
        s.push_text(text);
        s
    }

    /// Conditioning rows that are never predicted.
    pub fn push_context(&mut self, piece: Piece<'s>, rows: usize) {
        self.pieces.push(piece);
        self.len += rows;
    }

    pub fn push_text(&mut self, text: &'s [TokenId]) {
        for (i, &t) in text.iter().enumerate() {
            if self.len + i > 0 {
                self.targets.push((self.len + i - 1, t));
            }
        }
        self.pieces.push(Piece::Tokens(text));
        self.len += text.len();
    }
}

impl Default for LmSequence<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean next-token cross-entropy over the targets of packed sequences.
pub fn sequence_loss<'a>(lm: &'a ToyLm, tape: &mut Tape<'a>, seqs: &[Var], targets: &[Vec<(usize, TokenId)>]) -> Result<Var> {
    let (h, segs) = lm.forward_packed(tape, seqs)?;
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (s, t) in segs.iter().zip(targets) {
        for &(r, y) in t {
            if r >= s.len {
                return Err(Error::Index {
                    what: "sequence row",
                    index: r,
                    size: s.len,
                });
            }
            rows.push(s.start + r);
            ys.push(y);
        }
    }
    if rows.is_empty() {
        return Err(Error::contract("no loss targets in batch"));
    }
    let hs = tape.select_rows(h, &rows)?;
    let logits = lm.logits(tape, hs)?;
    tape.cross_entropy(logits, &ys)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Fraction of sequences that also show the target image right after
    /// the question, so the model learns to read a second image.
    pub two_image_fraction: f64,
    /// Also train on `[image, caption, metadata, comment, EOS]` document
    /// sequences for every distinct training target.
    pub documents: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-4,
            batch: 32,
            two_image_fraction: 0.25,
            documents: true,
            seed: 11,
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn first(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

pub(crate) fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{what} loss became {loss}")))
    }
}

/// Next-token pretraining on `[image, question, BOS, comment, EOS]`
/// sequences, some with the target image after the question, plus
/// `[image, caption, metadata, comment, EOS]` document sequences; freezes
/// the model afterwards.
pub fn pretrain_toy_lm(lm: &mut ToyLm, examples: &[CoRExample], documents: &[EntityDocument], cfg: &PretrainConfig) -> Result<TrainLog> {
    if examples.is_empty() {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    if lm.is_frozen() {
        return Err(Error::contract("language model is frozen"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let texts: Vec<Vec<TokenId>> = examples
        .iter()
        .map(|e| {
            let mut t = e.query.question.clone();
            t.push(BOS);
            t.extend(&e.comment);
            t.push(EOS);
            t
        })
        .collect();
    let two_image: Vec<bool> = examples
        .iter()
        .map(|_| rng.random_bool(cfg.two_image_fraction))
        .collect();
    for e in examples {
        if e.target >= documents.len() {
            return Err(Error::Index {
                what: "documents",
                index: e.target,
                size: documents.len(),
            });
        }
    }

    // Sequence pool: every example, then one document sequence per
    // distinct target.
    let mut doc_texts: Vec<(usize, Vec<TokenId>)> = Vec::new();
    if cfg.documents {
        let mut seen = std::collections::HashSet::new();
        for e in examples {
            if seen.insert(e.target) {
                let d = &documents[e.target];
                let mut t = d.description();
                t.extend(&e.comment);
                t.push(EOS);
                doc_texts.push((e.target, t));
            }
        }
    }

    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut order: Vec<usize> = (0..examples.len() + doc_texts.len()).collect();
    let tiles = lm.config().tiles;
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch.max(1)) {
            let loss = {
                let mut tape = Tape::new();
                let mut seqs = Vec::with_capacity(batch.len());
                let mut targets_all = Vec::with_capacity(batch.len());
                for &i in batch {
                    let s = if let Some(e) = examples.get(i) {
                        let (question, answer) = texts[i].split_at(e.query.question.len());
                        let mut s = LmSequence::new();
                        s.push_context(Piece::Image(&e.query.image), tiles);
                        s.push_text(question);
                        if two_image[i] {
                            s.push_context(Piece::Image(&documents[e.target].features), tiles);
                        }
                        s.push_text(answer);
                        s
                    } else {
                        let (d, text) = &doc_texts[i - examples.len()];
                        LmSequence::with_text(vec![Piece::Image(&documents[*d].features)], tiles, text)
                    };
                    seqs.push(lm.embed(&mut tape, &s.pieces)?);
                    targets_all.push(s.targets);
                }
                let loss = sequence_loss(lm, &mut tape, &seqs, &targets_all)?;
                let value = tape.value(loss).item();
                check_finite(value, "pretraining")?;
                let grads = tape.backward(loss)?;
                drop(tape);
                lm.accumulate(&grads);
                value
            };
            opt.step(&mut lm.params_with_grad())?;
            total += loss;
            batches += 1;
        }
        log.epoch_losses.push(total / batches as f64);
    }
    lm.freeze();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyLm {
        let mut cfg = ToyLmConfig::new(12);
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.n_heads = 2;
        cfg.max_seq = 10;
        cfg.adapter_hidden = 6;
        ToyLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn logits_rows_match_input_and_rows_are_distributions() {
        let lm = tiny();
        let x = Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let (logits, hidden) = lm.lm_forward(&x).unwrap();
        assert_eq!(logits.shape(), &[5, 12]);
        assert_eq!(hidden.shape(), &[5, 8]);
        let p = logits.softmax_rows();
        for r in 0..5 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_long_is_a_length_error() {
        let lm = tiny();
        let x = Tensor::zeros(&[11, 8]);
        assert!(matches!(lm.lm_forward(&x), Err(Error::Length { len: 11, limit: 10 })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut lm = tiny();
        lm.freeze();
        let ck = lm.to_checkpoint();
        let back = ToyLm::from_checkpoint(&ck).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.to_checkpoint(), ck);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut lm = tiny();
        lm.freeze();
        let mut tape = Tape::new();
        let ids = [1, 2, 3];
        let x = lm.embed(&mut tape, &[Piece::Tokens(&ids)]).unwrap();
        let loss = sequence_loss(&lm, &mut tape, &[x], &[vec![(0, 2), (1, 3)]]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(lm.params().iter().all(|p| g.param(p.id()).is_none()));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

//! CLIP-style dual encoder: an order-blind text tower and a small image
//! tower mapping into a shared unit sphere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, Linear, Module, Param, Tape, Tensor, Var};
use crate::types::TokenId;

pub const EMBED_DIM: usize = 32;
pub const TEXT_HIDDEN: usize = 64;
pub const IMAGE_HIDDEN: usize = 64;
/// Initial logit scale, ln(1/0.07).
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778_4;
pub const LOGIT_SCALE_MAX: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    TextOnly,
    ImageOnly,
    Both,
}

impl EncodeMode {
    fn text(self) -> bool {
        matches!(self, EncodeMode::TextOnly | EncodeMode::Both)
    }

    fn image(self) -> bool {
        matches!(self, EncodeMode::ImageOnly | EncodeMode::Both)
    }
}

/// Text tokens plus image features; either may be empty.
#[derive(Debug, Clone, Copy)]
pub struct Item<'s> {
    pub text: &'s [TokenId],
    pub image: &'s [f64],
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub text_emb: Param,
    pub text_fc: Linear,
    pub image_fc1: Linear,
    pub image_fc2: Linear,
    pub logit_scale: Param,
}

impl DualEncoder {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, image_dim: usize, rng: &mut R) -> Self {
        Self {
            text_emb: Param::new("enc.text_emb", Tensor::randn(&[vocab_size, TEXT_HIDDEN], 1.0, rng)),
            text_fc: Linear::new("enc.text_fc", TEXT_HIDDEN, EMBED_DIM, rng),
            image_fc1: Linear::new("enc.image_fc1", image_dim, IMAGE_HIDDEN, rng),
            image_fc2: Linear::new("enc.image_fc2", IMAGE_HIDDEN, EMBED_DIM, rng),
            logit_scale: Param::new("enc.logit_scale", Tensor::scalar(LOGIT_SCALE_INIT)),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.text_emb.value().rows()
    }

    pub fn image_dim(&self) -> usize {
        self.image_fc1.d_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.text_fc.d_out()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push(
            "enc.config",
            Tensor::vector(vec![self.vocab_size() as f64, self.image_dim() as f64]),
        );
        ck.extend(Checkpoint::from_module(self));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.require("enc.config")?.data().to_vec();
        if cfg.len() != 2 {
            return Err(Error::Checkpoint("malformed enc.config record".into()));
        }
        let mut enc = Self::new(cfg[0] as usize, cfg[1] as usize, &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_into(&mut enc)?;
        Ok(enc)
    }

    /// Keeps the contrastive temperature within CLIP's usual bound.
    pub fn clamp_logit_scale(&mut self) {
        let v = &mut self.logit_scale.value_mut().data_mut()[0];
        *v = v.min(LOGIT_SCALE_MAX);
    }

    /// Batch embedding on a tape: `B × e`, unit rows.
    pub fn encode_batch<'a>(&'a self, tape: &mut Tape<'a>, items: &[Item<'_>], mode: EncodeMode) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::contract("empty encoder batch"));
        }
        let b = items.len();
        let e = self.embed_dim();
        for (i, it) in items.iter().enumerate() {
            let has_text = mode.text() && !it.text.is_empty();
            let has_image = mode.image() && !it.image.is_empty();
            if !has_text && !has_image {
                return Err(Error::contract(format!("item {i} has no modality for {mode:?}")));
            }
        }
        let mut parts = Vec::with_capacity(2);
        if mode.text() {
            let v = self.vocab_size();
            let mut bag = vec![0.0; b * v];
            let mut mask = vec![0.0; b * e];
            for (i, it) in items.iter().enumerate() {
                if it.text.is_empty() {
                    continue;
                }
                let w = 1.0 / it.text.len() as f64;
                for &t in it.text {
                    if t >= v {
                        return Err(Error::Index {
                            what: "vocabulary",
                            index: t,
                            size: v,
                        });
                    }
                    bag[i * v + t] += w;
                }
                mask[i * e..(i + 1) * e].fill(1.0);
            }
            let bag = tape.leaf(Tensor::new(vec![b, v], bag)?);
            let table = tape.param(&self.text_emb);
            let h = tape.matmul(bag, table)?;
            let h = self.text_fc.forward(tape, h)?;
            let h = tape.l2_normalize_rows(h);
            parts.push(self.masked(tape, h, mask)?);
        }
        if mode.image() {
            let d = self.image_dim();
            let mut x = vec![0.0; b * d];
            let mut mask = vec![0.0; b * e];
            for (i, it) in items.iter().enumerate() {
                if it.image.is_empty() {
                    continue;
                }
                if it.image.len() != d {
                    return Err(Error::shape("image tower", &[it.image.len()], &[d]));
                }
                x[i * d..(i + 1) * d].copy_from_slice(it.image);
                mask[i * e..(i + 1) * e].fill(1.0);
            }
            let x = tape.leaf(Tensor::new(vec![b, d], x)?);
            let h = self.image_fc1.forward(tape, x)?;
            let h = tape.gelu(h);
            let h = self.image_fc2.forward(tape, h)?;
            let h = tape.l2_normalize_rows(h);
            parts.push(self.masked(tape, h, mask)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let sum = tape.add(parts[0], parts[1])?;
        let normed = tape.l2_normalize_rows(sum);
        let single: Vec<bool> = items
            .iter()
            .map(|it| it.text.is_empty() || it.image.is_empty())
            .collect();
        if !single.contains(&true) {
            return Ok(normed);
        }
        // A lone modality is already unit norm; pass it through untouched so
        // it equals the tower output exactly.
        let keep: Vec<f64> = single
            .iter()
            .flat_map(|&s| std::iter::repeat_n(if s { 1.0 } else { 0.0 }, e))
            .collect();
        let renorm: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let a = self.masked(tape, normed, renorm)?;
        let b = self.masked(tape, sum, keep)?;
        tape.add(a, b)
    }

    fn masked<'a>(&'a self, tape: &mut Tape<'a>, h: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.iter().all(|&m| m == 1.0) {
            return Ok(h);
        }
        let shape = tape.shape(h).to_vec();
        let m = tape.leaf(Tensor::new(shape, mask)?);
        tape.mul(h, m)
    }

    pub fn encode_many(&self, items: &[Item<'_>], mode: EncodeMode) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(CHUNK) {
            let mut tape = Tape::new();
            let v = self.encode_batch(&mut tape, chunk, mode)?;
            let t = tape.value(v);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Unit-norm ψ_MM embedding; an absent modality contributes zero.
    pub fn encode_multimodal(&self, text: &[TokenId], image: &[f64], mode: EncodeMode) -> Result<Vec<f64>> {
        Ok(self.encode_many(&[Item { text, image }], mode)?.remove(0))
    }

    /// Text tower output (unit norm), or zeros for empty text.
    pub fn text_tower(&self, text: &[TokenId]) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Ok(vec![0.0; self.embed_dim()]);
        }
        self.encode_multimodal(text, &[], EncodeMode::TextOnly)
    }

    /// Image tower output (unit norm), or zeros for absent features.
    pub fn image_tower(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.is_empty() {
            return Ok(vec![0.0; self.embed_dim()]);
        }
        self.encode_multimodal(&[], image, EncodeMode::ImageOnly)
    }

    /// Sum of tower outputs before the final normalization.
    pub fn pre_normalized(&self, text: &[TokenId], image: &[f64]) -> Result<Vec<f64>> {
        let t = self.text_tower(text)?;
        let i = self.image_tower(image)?;
        Ok(t.iter().zip(&i).map(|(a, b)| a + b).collect())
    }
}

impl Module for DualEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.text_emb];
        v.extend(self.text_fc.params());
        v.extend(self.image_fc1.params());
        v.extend(self.image_fc2.params());
        v.push(&self.logit_scale);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.text_emb];
        v.extend(self.text_fc.params_mut());
        v.extend(self.image_fc1.params_mut());
        v.extend(self.image_fc2.params_mut());
        v.push(&mut self.logit_scale);
        v
    }
}

/// Unit-normalized sum, matching the both-mode path.
pub fn combine(text: &[f64], image: &[f64]) -> Vec<f64> {
    l2_normalize(&text.iter().zip(image).map(|(a, b)| a + b).collect::<Vec<_>>())
}

//! Attribute vectors rendered as noisy one-hot image features.
//!
//! Each of the four tiles always carries at least one active block, so every
//! tile the vision adapter sees is informative.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::vocab;
use super::Attributes;

pub const IMAGE_DIM: usize = 32;
pub const TILE_COUNT: usize = 4;
pub const TILE_DIM: usize = IMAGE_DIM / TILE_COUNT;
pub const NOISE_STD: f64 = 0.05;

/// Feature slots of each attribute value, in value order.
pub struct FeatureLayout;

impl FeatureLayout {
    pub fn category(c: usize) -> usize {
        match c {
            0..=4 => c,
            5..=10 => 8 + (c - 5),
            _ => 16 + (c - 11),
        }
    }

    pub fn size(s: usize) -> usize {
        5 + s
    }

    pub fn stage(s: usize) -> usize {
        14 + s
    }

    pub fn pattern(p: usize) -> usize {
        21 + p
    }

    pub fn color(c: usize) -> usize {
        24 + c
    }
}

pub fn render_image(a: &Attributes, seed: u64, noise: f64) -> Vec<f64> {
    let mut x = vec![0.0; IMAGE_DIM];
    for slot in [
        FeatureLayout::category(a.category),
        FeatureLayout::size(a.size),
        FeatureLayout::stage(a.stage),
        FeatureLayout::pattern(a.pattern),
        FeatureLayout::color(a.color),
    ] {
        x[slot] = 1.0;
    }
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).expect("positive noise");
        for v in &mut x {
            *v += normal.sample(&mut rng);
        }
    }
    x
}

fn argmax_over(x: &[f64], n: usize, slot: impl Fn(usize) -> usize) -> usize {
    (0..n)
        .max_by(|&i, &j| x[slot(i)].total_cmp(&x[slot(j)]))
        .expect("non-empty block")
}

/// Block-wise argmax inverse of [`render_image`].
pub fn decode_image(x: &[f64]) -> Attributes {
    Attributes {
        category: argmax_over(x, vocab::CATEGORIES.len(), FeatureLayout::category),
        color: argmax_over(x, vocab::COLORS.len(), FeatureLayout::color),
        size: argmax_over(x, vocab::SIZES.len(), FeatureLayout::size),
        stage: argmax_over(x, vocab::STAGES.len(), FeatureLayout::stage),
        pattern: argmax_over(x, vocab::PATTERNS.len(), FeatureLayout::pattern),
    }
}

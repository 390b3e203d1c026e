pub mod encoder;
pub mod lm;
pub mod tokenizer;

pub use encoder::{DualEncoder, EncodeMode};
pub use lm::{pretrain_toy_lm, Piece, PretrainConfig, TileAdapter, ToyLm, ToyLmConfig, TrainLog};
pub use tokenizer::Tokenizer;

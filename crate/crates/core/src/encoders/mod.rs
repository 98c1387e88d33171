//! Image and text encoders, attention pooling and projection heads.

pub mod heads;
pub mod image;
pub mod layers;
pub mod pool;
pub mod text;

pub use heads::{ProjectionHeads, Temperatures, MAX_INV_TAU};
pub use image::ImageEncoder;
pub use layers::{ConvBlock, Init, Linear, Mlp};
pub use pool::AttentionPool;
pub use text::{tokenize, TextEncoder, Vocab, PAD, UNK};

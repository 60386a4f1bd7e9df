//! Streamlined open-vocabulary human-object interaction detection.
//!
//! A frozen ViT backbone and a frozen text-aligned vision head supply image
//! tokens; a learnable adapter and dual-query decoder localize human-object
//! pairs; interaction queries are bootstrapped through the frozen head,
//! refined by one cross-attention block, and classified by cosine similarity
//! against a text-embedding bank.

pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod head;
pub mod imaging;
pub mod interaction;
pub mod loss;
pub mod matching;
pub mod model;
pub mod optim;
pub mod nn;
pub mod params;
pub mod probe;
pub mod protocol;
pub mod synthetic;
pub mod tensor;
pub mod text_bank;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Mat, Real};

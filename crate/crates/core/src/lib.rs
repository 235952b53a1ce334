//! Personalizing a frozen decoder-only language model with a single soft
//! prefix token projected from a dense user embedding.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod optim;
pub mod prefix;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use data::tokenizer::{ByteTokenizer, TokenId};
pub use data::{Example, LmRecord, PrefRecord};
pub use error::{Error, Result};
pub use eval::{BaselineKind, EvalReport, Metric};
pub use lm::{FrozenLm, LanguageModel, LmConfig};
pub use optim::{AdamW, AdamWConfig};
pub use prefix::{train_e2p, E2pExample, Objective, Projection, TrainConfig};
pub use tensor::{Graph, Tensor, Var};

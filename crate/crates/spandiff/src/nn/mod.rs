//! Minimal f64 neural-network toolkit: tensors, a reverse-mode tape,
//! parameter storage, and an AdamW optimizer. Small enough to audit,
//! deterministic enough to diff two runs bit for bit.

pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{clip_global_norm, AdamW};
pub use params::{uniform, xavier_uniform, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

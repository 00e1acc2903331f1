//! Decoupled cross-attention adapter and its optimizer.

mod attention;
mod optim;

pub use attention::{
    decoupled_cross_attention, dropout_conditions, AdapterBlock, AdapterState, BlockWeights,
    DropEvent,
};
pub use optim::{AdamW, AdamWConfig};

//! Multi-head attention, the shared value-embedding mixture, the layer-local
//! baseline, and incremental decoding.

mod cache;
mod memory;
mod mha;

pub use cache::{KvCache, LayerCache};
pub use memory::{
    mix_values_lave, mix_values_move, retrieve_memory, scaled_gate, GateTensor, LaveParams, LaveSelection,
    RetrievedMemory, Router, StdPath, ValueBank,
};
pub use mha::{
    mha_forward, AttentionLayer, AttentionParams, AttentionVars, LayerMemory, LayerOutput, MemoryVars, SeqShape,
};
pub(crate) use mha::{apply_memory, mix_on_tape};

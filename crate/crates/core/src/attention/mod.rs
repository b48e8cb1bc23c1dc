//! Vanilla and locality-preserved multi-head attention, the class-attention
//! block and the 5 + 1 layer backbone built from them.

mod backbone;
pub mod checkpoint;
mod class_attention;
mod grid;
mod layer;
mod params;
mod trace;

pub use backbone::{collect_traces, Backbone, BackboneConfig, ForwardOutput, TapeForward, SELF_ATTENTION_LAYERS};
pub use class_attention::{class_attention_forward, ClassAttention, ClassAttentionOutput};
pub use grid::PatchGrid;
pub use layer::{
    init_positional_vectors, lpa_map, vanilla_scores, AttentionKind, AttentionLayer, LayerOutput, HEAD_OFFSETS,
    INIT_STD,
};
pub use params::{normal_tensor, xavier_tensor, Bound, ParamId, ParamStore};
pub use trace::AttentionTrace;

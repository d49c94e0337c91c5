//! Recurrent next-token model over the unified vocabulary.

mod config;
mod forward;
mod params;
mod step;

pub use config::{ModelConfig, MoeConfig};
pub use forward::{forward, forward_logits, Forward, LayerRouting, RouterNoise, Stream};
pub use params::{
    effective_weight, Block, Branch, ChannelMix, LayerNorm, Mlp, ModalityProjections, ModelParams, Moe,
    ParamGroup, ParamInfo, ParamKind, Params, Projection, TimeMix, INIT_STD,
};
pub use step::{
    layer_norm, mlp, moe_forward, project, select_top_k, time_mixing_step, token_shift, BlockState,
    RecurrentState, RoutingRecord, Session,
};

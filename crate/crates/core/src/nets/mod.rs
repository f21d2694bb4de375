//! Networks, automatic differentiation and training utilities.

pub mod attention;
pub mod backbone;
pub mod bu;
pub mod checkpoint;
pub mod gradcheck;
pub mod heatmap;
pub mod layers;
pub mod optim;
pub mod prenet;
pub mod tape;
pub mod tensor;
pub mod tokens;

pub use attention::{AttentionState, ChannelAttention, Coam, PositionAttention};
pub use backbone::{Arch, BuNet, CtdNet, CtdSpec, DEFAULT_INSERT_STAGE, OUTPUT_STRIDE};
pub use bu::{decode_bu, BuDecodeConfig, BuMaps};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckModule, GradCheckReport};
pub use heatmap::{decode_heatmaps, heatmap_loss, heatmap_targets, KeypointHeatmaps};
pub use optim::{Adam, AdamConfig};
pub use prenet::PreNet;
pub use tape::{ParamId, ParamStore, Tape, Var};
pub use tensor::{Real, Tensor};
pub use tokens::{TokenEncoder, TokenSequence};

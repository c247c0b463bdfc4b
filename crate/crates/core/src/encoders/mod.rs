//! Online video encoder, frozen target adapters and the momentum branch.

pub mod backbone;
pub mod layers;
pub mod targets;

pub use backbone::{
    clip_rows, ema_update, init_from_inflation, pool_frames, Backbone, EncoderConfig, Head, HeadNet, MomentumNet,
    OnlineCache, OnlineNet, OnlineOutput, OutputGrads, VideoEncoder,
};
pub use layers::{Mode, Param, Scalar};
pub use targets::{
    export_features, FeatureFileAdapter, OracleAdapter, ORACLE_MAX_NOISE, RandomProjectionAdapter, TargetAdapter, TargetSpec,
};

//! Encoder-decoder Transformer whose decoder layers cross-attend to views
//! routed from every encoder layer.
//!
//! Layer `i` of the decoder attends to `integrate(g_i(S), S_N)` where
//! `S = [S_1, ..., S_N]` are the encoder layer outputs, `g_i` is chosen by
//! [`Strategy`] and `integrate` by [`Integration`]. Blocks are post-norm with
//! ReLU feed-forward layers and sinusoidal positions.

mod config;
mod params;
mod transformer;


pub use config::{Integration, ModelConfig, Strategy};
pub use params::{
    count_layout, count_parameters, group_of, layout, names, Init, MultiViewInit, ParamCount, ParamGroup,
    ParamSpec, Params,
};
pub use transformer::{
    positional_encoding, Bound, DecodeHooks, DecoderOutput, Dropout, EncoderViews, ForwardPass, Memory,
    RouteOverride, Seq2Seq, LN_EPS,
};

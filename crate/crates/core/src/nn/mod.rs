//! Normalization, scaled weight standardization, channel attention and the
//! toy model zoo.

mod attention;
mod closed_form;
mod model;
mod norm;
mod sws;

pub use attention::{cbam_block, eca_block, se_block, AttentionConfig, AttentionKind, CbamVars, MlpVars};
pub use closed_form::{gap_closed_form, ClosedFormLayer};
pub use model::{
    build_model, Architecture, BnUpdate, Bound, Forward, Model, ModelSpec, NamedParams, ParamGroup,
    ParamInfo, Probe,
};
pub use norm::{norm_forward, Mode, NormConfig, NormKind, RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use sws::{gamma_for_nonlinearity, sws_standardize, Nonlinearity, SwsParams};

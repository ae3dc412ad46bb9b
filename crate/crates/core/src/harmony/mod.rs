//! Harmonization: per-instance normalization with a learnable polynomial
//! affine map, and the matching restoration applied on the decoder side.

mod layer;
mod params;
mod stages;

pub use layer::{
    affine_on, apply_restoration, harmonize_on, harmony_layer_forward, restore_on, HarmonyVars, LayerMode,
    StatsQueue, TapeStats,
};
pub use params::{HarmonyConfig, HarmonyParams, InstanceStats, DEFAULT_EPS, DEFAULT_J_POLY, MAX_J_POLY};
pub use stages::{
    affine, affine_backward, harmonize, harmonize_backward, harmony_backward, harmony_forward, restore,
    restore_backward, AffineGrads, HarmonyForward, HarmonyGrads, RestoreGrads, DENOMINATOR_FLOOR,
};

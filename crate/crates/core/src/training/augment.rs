//! Scene-level augmentation: one horizontal flip decision and one rotation by
//! a multiple of 90° per scene, applied to every view, reference and depth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{hflip, DepthMap, SceneBatch, View};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "yes")]
    pub hflip: bool,
    #[serde(default = "yes")]
    pub rot90: bool,
}

fn yes() -> bool {
    true
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: true, rot90: true }
    }
}

/// A drawn transform: optional flip, then `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { flip: false, quarter_turns: 0 };

    /// Draws the flip and the rotation in that order, one draw each even when disabled.
    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let turns = rng.random_range(0..4u8);
        Self { flip: cfg.hflip && flip, quarter_turns: if cfg.rot90 { turns } else { 0 } }
    }

    pub fn apply(&self, t: &Tensor<f64>) -> Tensor<f64> {
        let mut out = if self.flip { hflip(t) } else { t.clone() };
        for _ in 0..self.quarter_turns {
            out = rot90(&out);
        }
        out
    }
}

/// Counter-clockwise quarter turn of a `C×H×W` tensor.
pub fn rot90(t: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = t.chw().expect("rank-3 tensor");
    let src = t.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // (y, x) → (w − 1 − x, y) in a W×H grid
                out[(ch * w + (w - 1 - x)) * h + y] = src[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::from_vec(&[c, w, h], out).expect("same element count")
}

/// Applies one transform to every image of the scene.
pub fn apply_transform(batch: &SceneBatch, tf: Transform) -> Result<SceneBatch> {
    let views = batch
        .views
        .iter()
        .map(|v| {
            Ok(View {
                degraded: tf.apply(&v.degraded),
                reference: v.reference.as_ref().map(|r| tf.apply(r)),
                depth: v.depth.as_ref().map(|d| DepthMap::new(tf.apply(d))).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SceneBatch::new(batch.scene_id.clone(), views)
}

pub fn augment(batch: &SceneBatch, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SceneBatch> {
    apply_transform(batch, Transform::draw(cfg, rng))
}

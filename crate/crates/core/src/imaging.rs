//! Physical underwater degradation model, its algebraic inverse, a synthetic
//! scene generator with per-view jitter, and depth providers.
//!
//! Images here live in `[0,1]` I/O space as `3×H×W` `f64` tensors; depth maps
//! are `1×H×W` relative depth in `[0,1]` (0 = camera plane).

use std::ops::Deref;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor<f64>;

/// Transmission below which the inverse model is considered unstable.
pub const MIN_TRANSMISSION: f64 = 1e-4;

/// Per-channel attenuation and ambient light.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterParams {
    pub beta: [f64; 3],
    pub ambient: [f64; 3],
}

impl WaterParams {
    pub fn new(beta: [f64; 3], ambient: [f64; 3]) -> Result<Self> {
        let w = Self { beta, ambient };
        w.validate()?;
        Ok(w)
    }

    /// Checks `beta ∈ (0, 10]` and `ambient ∈ [0, 1]` componentwise.
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.beta.iter().find(|b| !(**b > 0.0 && **b <= 10.0)) {
            return Err(Error::InvalidArgument(format!("attenuation coefficient {b} outside (0, 10]")));
        }
        if let Some(a) = self.ambient.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("ambient light {a} outside [0, 1]")));
        }
        Ok(())
    }

    /// The weaker condition the imaging model itself needs: `beta > 0`, `ambient ∈ [0, 1]`.
    fn check_physical(&self) -> Result<()> {
        if let Some(b) = self.beta.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument(format!("attenuation coefficient {b} must be positive")));
        }
        if let Some(a) = self.ambient.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("ambient light {a} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Relative scene depth, `1×H×W`, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Tensor<f64>);

impl DepthMap {
    pub fn new(t: Tensor<f64>) -> Result<Self> {
        let (c, _, _) = t.chw()?;
        if c != 1 {
            return Err(Error::shape("depth", format!("expected 1×H×W, got {:?}", t.shape())));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("depth value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Result<Self> {
        Self::new(Tensor::full(&[1, h, w], v))
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f64> {
        self.0
    }
}

impl Deref for DepthMap {
    type Target = Tensor<f64>;
    fn deref(&self) -> &Tensor<f64> {
        &self.0
    }
}

/// One image of a scene with its optional ground truth.
#[derive(Clone, Debug)]
pub struct View {
    pub degraded: Image,
    pub reference: Option<Image>,
    pub depth: Option<DepthMap>,
}

/// Related images of one scene, processed jointly.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub scene_id: String,
    pub views: Vec<View>,
}

impl SceneBatch {
    pub fn new(scene_id: impl Into<String>, views: Vec<View>) -> Result<Self> {
        let b = Self { scene_id: scene_id.into(), views };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// `H×W` shared by every view.
    pub fn hw(&self) -> (usize, usize) {
        let s = self.views[0].degraded.shape();
        (s[1], s[2])
    }

    pub fn has_references(&self) -> bool {
        self.views.iter().all(|v| v.reference.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.views.first().ok_or_else(|| Error::Data(format!("scene {} has no views", self.scene_id)))?;
        let (c, h, w) = first.degraded.chw()?;
        if c != 3 {
            return Err(Error::shape("scene", format!("views must be 3×H×W, got {:?}", first.degraded.shape())));
        }
        let with_ref = self.views.iter().filter(|v| v.reference.is_some()).count();
        if with_ref != 0 && with_ref != self.views.len() {
            return Err(Error::Data(format!(
                "scene {}: references present for {with_ref} of {} views",
                self.scene_id,
                self.views.len()
            )));
        }
        for v in &self.views {
            if v.degraded.shape() != [3, h, w] {
                return Err(Error::shape("scene", format!("view {:?} vs {:?}", v.degraded.shape(), [3, h, w])));
            }
            if let Some(r) = &v.reference {
                if r.shape() != [3, h, w] {
                    return Err(Error::shape("scene", format!("reference {:?} vs {:?}", r.shape(), [3, h, w])));
                }
            }
            if let Some(d) = &v.depth {
                if d.hw() != (h, w) {
                    return Err(Error::shape("scene", format!("depth {:?} vs {h}×{w}", d.shape())));
                }
            }
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, img: &Image, depth: &Tensor<f64>) -> Result<(usize, usize)> {
    let (c, h, w) = img.chw()?;
    if c != 3 || depth.shape() != [1, h, w] {
        return Err(Error::shape(op, format!("image {:?} with depth {:?}", img.shape(), depth.shape())));
    }
    if let Some(d) = depth.data().iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::InvalidArgument(format!("{op}: depth value {d} must be finite and non-negative")));
    }
    Ok((h, w))
}

/// `I = J·t + A·(1 − t)` with `t = exp(−β·d)` per channel and pixel.
pub fn degrade(clean: &Image, depth: &Tensor<f64>, water: &WaterParams) -> Result<Image> {
    water.check_physical()?;
    let (h, w) = check_pair("degrade", clean, depth)?;
    let hw = h * w;
    let d = depth.data();
    let mut out = clean.clone();
    for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let (beta, a) = (water.beta[c], water.ambient[c]);
        for (v, &dp) in plane.iter_mut().zip(d) {
            let t = (-beta * dp).exp();
            *v = *v * t + a * (1.0 - t);
        }
    }
    Ok(out)
}

/// Algebraic inverse `J = (I − A·(1 − t)) / t`; rejects transmission below [`MIN_TRANSMISSION`].
pub fn restore_oracle(degraded: &Image, depth: &Tensor<f64>, water: &WaterParams) -> Result<Image> {
    water.check_physical()?;
    let (h, w) = check_pair("restore_oracle", degraded, depth)?;
    let hw = h * w;
    let d = depth.data();
    let mut out = degraded.clone();
    for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let (beta, a) = (water.beta[c], water.ambient[c]);
        for (v, &dp) in plane.iter_mut().zip(d) {
            let t = (-beta * dp).exp();
            if t < MIN_TRANSMISSION {
                return Err(Error::Numerical(format!(
                    "transmission {t:.3e} below {MIN_TRANSMISSION:e} (beta {beta}, depth {dp})"
                )));
            }
            *v = (*v - a * (1.0 - t)) / t;
        }
    }
    Ok(out)
}

/// Per-view variation applied by [`synth_scene`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterSpec {
    /// Relative attenuation jitter: `beta·(1 + U(−x, x))`.
    pub beta_rel: f64,
    /// Additive ambient jitter `U(−x, x)`, clamped to `[0,1]`.
    pub ambient_abs: f64,
    /// Largest fraction of each side removed by the random crop (≤ 0.25).
    pub crop_max: f64,
    /// Probability of a horizontal flip.
    pub hflip_prob: f64,
}

impl JitterSpec {
    pub const NONE: JitterSpec = JitterSpec { beta_rel: 0.0, ambient_abs: 0.0, crop_max: 0.0, hflip_prob: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta_rel)
            && (0.0..=1.0).contains(&self.ambient_abs)
            && (0.0..=0.25).contains(&self.crop_max)
            && (0.0..=1.0).contains(&self.hflip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid jitter spec {self:?}")))
        }
    }
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self { beta_rel: 0.05, ambient_abs: 0.03, crop_max: 0.2, hflip_prob: 0.5 }
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// What was drawn for one synthesized view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub water: WaterParams,
    pub crop: CropBox,
    pub flipped: bool,
}

pub const MAX_VIEWS: usize = 17;

/// Crops `t` (`C×H×W`) and resizes back to `H×W`.
pub fn crop_resize(t: &Tensor<f64>, crop: CropBox) -> Result<Tensor<f64>> {
    let (c, h, w) = t.chw()?;
    if crop.width == 0 || crop.height == 0 || crop.x + crop.width > w || crop.y + crop.height > h {
        return Err(Error::InvalidArgument(format!("crop {crop:?} exceeds source {h}×{w}")));
    }
    let mut cut = Vec::with_capacity(c * crop.width * crop.height);
    for ch in 0..c {
        for y in crop.y..crop.y + crop.height {
            let row = (ch * h + y) * w;
            cut.extend_from_slice(&t.data()[row + crop.x..row + crop.x + crop.width]);
        }
    }
    if crop.width == w && crop.height == h {
        return Tensor::from_vec(&[c, h, w], cut);
    }
    let out = kernels::bilinear_forward(&cut, c, crop.height, crop.width, h, w);
    Tensor::from_vec(&[c, h, w], out)
}

/// Bilinear resize of a `C×H×W` tensor to `C×oh×ow`.
pub fn resize(t: &Tensor<f64>, oh: usize, ow: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = t.chw()?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize to {oh}×{ow}")));
    }
    if (oh, ow) == (h, w) {
        return Ok(t.clone());
    }
    Tensor::from_vec(&[c, oh, ow], kernels::bilinear_forward(t.data(), c, h, w, oh, ow))
}

pub fn hflip(t: &Tensor<f64>) -> Tensor<f64> {
    let (_, _, w) = t.chw().expect("rank-3 tensor");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Generates `n_views` degraded views of one clean scene with per-view water
/// and framing jitter. Deterministic for a fixed `rng` state.
pub fn synth_scene(
    scene_id: &str,
    clean: &Image,
    depth: &DepthMap,
    water: &WaterParams,
    n_views: usize,
    jitter: &JitterSpec,
    rng: &mut impl Rng,
) -> Result<(SceneBatch, Vec<ViewRecord>)> {
    if !(1..=MAX_VIEWS).contains(&n_views) {
        return Err(Error::InvalidArgument(format!("n_views {n_views} outside [1, {MAX_VIEWS}]")));
    }
    water.validate()?;
    jitter.validate()?;
    let (h, w) = check_pair("synth_scene", clean, depth)?;
    let mut views = Vec::with_capacity(n_views);
    let mut records = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let frac = if jitter.crop_max > 0.0 { rng.random_range(0.0..=jitter.crop_max) } else { 0.0 };
        let ch = ((h as f64) * (1.0 - frac)).round().max(1.0) as usize;
        let cw = ((w as f64) * (1.0 - frac)).round().max(1.0) as usize;
        let y = if ch < h { rng.random_range(0..=h - ch) } else { 0 };
        let x = if cw < w { rng.random_range(0..=w - cw) } else { 0 };
        let crop = CropBox { x, y, width: cw, height: ch };
        let flipped = jitter.hflip_prob > 0.0 && rng.random_bool(jitter.hflip_prob);
        let mut beta = water.beta;
        let mut ambient = water.ambient;
        for c in 0..3 {
            if jitter.beta_rel > 0.0 {
                beta[c] *= 1.0 + rng.random_range(-jitter.beta_rel..=jitter.beta_rel);
            }
            beta[c] = beta[c].clamp(1e-3, 10.0);
            if jitter.ambient_abs > 0.0 {
                ambient[c] += rng.random_range(-jitter.ambient_abs..=jitter.ambient_abs);
            }
            ambient[c] = ambient[c].clamp(0.0, 1.0);
        }
        let view_water = WaterParams::new(beta, ambient)?;
        let mut reference = crop_resize(clean, crop)?;
        let mut vdepth = crop_resize(depth, crop)?;
        if flipped {
            reference = hflip(&reference);
            vdepth = hflip(&vdepth);
        }
        // bilinear resampling of values in [0,1] stays in [0,1] up to rounding
        let vdepth = DepthMap::new(vdepth.map(|v| v.clamp(0.0, 1.0)))?;
        let degraded = degrade(&reference, &vdepth, &view_water)?;
        views.push(View { degraded, reference: Some(reference), depth: Some(vdepth) });
        records.push(ViewRecord { water: view_water, crop, flipped });
    }
    Ok((SceneBatch::new(scene_id, views)?, records))
}

/// Procedurally generated clean image and aligned depth map.
///
/// The background recedes from near (bottom) to far (top); a few textured
/// objects sit at nearer, roughly constant depths.
pub fn procedural_scene(h: usize, w: usize, rng: &mut impl Rng) -> Result<(Image, DepthMap)> {
    let mut img = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.9));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.9));
    let far = rng.random_range(0.75..1.0);
    let near = rng.random_range(0.45..0.65);
    for y in 0..h {
        let s = y as f64 / (h.max(2) - 1) as f64;
        for x in 0..w {
            for c in 0..3 {
                img[(c * h + y) * w + x] = top[c] * (1.0 - s) + bottom[c] * s;
            }
            depth[y * w + x] = far * (1.0 - s) + near * s;
        }
    }
    let n_objects = rng.random_range(2..=4);
    for _ in 0..n_objects {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
        let obj_depth = rng.random_range(0.05..0.4);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = rng.random_range(0.12..0.3) * h.min(w) as f64;
        let round = rng.random_bool(0.5);
        let freq = rng.random_range(0.2..0.8);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if round { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= 0.7 * r };
                if !inside {
                    continue;
                }
                let texture = 0.85 + 0.15 * (freq * (x as f64 + 0.5 * y as f64) + phase).sin();
                for c in 0..3 {
                    img[(c * h + y) * w + x] = (color[c] * texture).clamp(0.0, 1.0);
                }
                depth[y * w + x] = obj_depth;
            }
        }
    }
    Ok((Tensor::from_vec(&[3, h, w], img)?, DepthMap::new(Tensor::from_vec(&[1, h, w], depth)?)?))
}

/// Source of the depth map used for region segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthProvider {
    /// The stored synthetic depth.
    #[default]
    GroundTruth,
    /// Min–max normalized, box-smoothed `1 − red`.
    RedChannelPrior,
    /// 0.5 everywhere.
    Constant,
}

impl FromStr for DepthProvider {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(Self::GroundTruth),
            "red_channel_prior" => Ok(Self::RedChannelPrior),
            "constant" => Ok(Self::Constant),
            _ => Err(Error::InvalidArgument(format!("unknown depth provider {s}"))),
        }
    }
}

const BOX_RADIUS: usize = 5;

/// Mean over the `(2r+1)²` window clipped to the image.
fn box_filter(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                s += src[yy * w + x0..=yy * w + x1].iter().sum::<f64>();
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

/// Min–max normalization to `[0,1]`; a constant map becomes all zeros.
pub fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    }
}

/// Depth for `image` (`[0,1]` space) from the chosen provider.
pub fn estimate_depth(image: &Image, provider: DepthProvider, stored: Option<&DepthMap>) -> Result<DepthMap> {
    let (_, h, w) = image.chw()?;
    match provider {
        DepthProvider::GroundTruth => {
            let d = stored.ok_or_else(|| Error::Data("ground-truth depth requested but none is stored".into()))?;
            if d.hw() != (h, w) {
                return Err(Error::shape("estimate_depth", format!("depth {:?} for image {h}×{w}", d.shape())));
            }
            Ok(d.clone())
        }
        DepthProvider::Constant => DepthMap::constant(h, w, 0.5),
        DepthProvider::RedChannelPrior => {
            let inv: Vec<f64> = image.data()[..h * w].iter().map(|r| 1.0 - r).collect();
            let mut d = box_filter(&inv, h, w, BOX_RADIUS);
            min_max_normalize(&mut d);
            DepthMap::new(Tensor::from_vec(&[1, h, w], d)?)
        }
    }
}

//! The two-stage model: per-image internal stage feeding an internal (IIEN)
//! and an external (EIEN) dense-Unet that exchange information at aligned
//! scales, plus every ablation variant.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParamStore, Var};
use crate::drfg::{drfg_forward, Drfg};
use crate::error::{Error, Result};
use crate::imaging::{estimate_depth, DepthProvider, SceneBatch};
use crate::interact::{aggregate_scene, eai, iae, Aggregate, Interaction, InteractionKind, PliResidual};
use crate::nn::{Builder, Conv2d, ConvInRelu, Ctx};
use crate::regionseg::{kmeans_depth, kmeans_gray, KMeansOptions, RegionMasks};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Model variants: the full model and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
    #[default]
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::M0,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::M7,
        Variant::M8,
        Variant::M9,
        Variant::Full,
    ];

    pub fn flags(self) -> Flags {
        use Variant::*;
        let internal_only = Flags {
            use_drfg: true,
            use_external_stage: false,
            use_depth_segmentation: true,
            use_regionwise_paths: true,
            use_graph_branch: true,
            use_eai: false,
            use_iae: false,
            cli_enabled: false,
            pli_enabled: false,
        };
        let full = Flags {
            use_external_stage: true,
            use_eai: true,
            use_iae: true,
            cli_enabled: true,
            pli_enabled: true,
            ..internal_only
        };
        match self {
            M0 => Flags {
                use_drfg: false,
                use_depth_segmentation: false,
                use_regionwise_paths: false,
                use_graph_branch: false,
                ..internal_only
            },
            M1 => internal_only,
            M2 | Full => full,
            M3 => Flags { use_depth_segmentation: false, ..internal_only },
            M4 => Flags { use_regionwise_paths: false, ..internal_only },
            M5 => Flags { use_graph_branch: false, ..internal_only },
            M6 => Flags { use_eai: false, use_iae: false, ..full },
            M7 => Flags { use_iae: false, ..full },
            M8 => Flags { use_eai: false, ..full },
            M9 => Flags { pli_enabled: false, ..full },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            v => write!(f, "{v:?}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?} (expected M0..M9 or full)")))
    }
}

/// Structural switches implied by a variant. `use_eai = false` (or
/// `use_iae = false`) replaces that interaction by concatenation + Conv-IN-ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub use_drfg: bool,
    pub use_external_stage: bool,
    pub use_depth_segmentation: bool,
    pub use_regionwise_paths: bool,
    pub use_graph_branch: bool,
    pub use_eai: bool,
    pub use_iae: bool,
    pub cli_enabled: bool,
    pub pli_enabled: bool,
}

impl Flags {
    fn kind(&self, enabled: bool) -> InteractionKind {
        if !enabled || !self.cli_enabled {
            InteractionKind::FliOnly
        } else if !self.pli_enabled {
            InteractionKind::FliCli
        } else {
            InteractionKind::Full
        }
    }

    pub fn eai_kind(&self) -> InteractionKind {
        self.kind(self.use_eai)
    }

    pub fn iae_kind(&self) -> InteractionKind {
        self.kind(self.use_iae)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
}

fn default_channels() -> usize {
    64
}
fn default_scales() -> usize {
    3
}
fn default_k() -> usize {
    3
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_iter() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_channels")]
    pub base_channels: usize,
    #[serde(default = "default_scales")]
    pub unet_scales: usize,
    #[serde(default = "default_k")]
    pub regions_k: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub depth_provider: DepthProvider,
    #[serde(default)]
    pub pli_residual: PliResidual,
    #[serde(default)]
    pub graph_pool_factor: Option<usize>,
    #[serde(default = "default_tol")]
    pub kmeans_tol: f64,
    #[serde(default = "default_max_iter")]
    pub kmeans_max_iter: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            base_channels: default_channels(),
            unet_scales: default_scales(),
            regions_k: default_k(),
            aggregation: Aggregation::Mean,
            depth_provider: DepthProvider::GroundTruth,
            pli_residual: PliResidual::Fli,
            graph_pool_factor: None,
            kmeans_tol: default_tol(),
            kmeans_max_iter: default_max_iter(),
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn flags(&self) -> Flags {
        self.variant.flags()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels {} below 4", self.base_channels)));
        }
        if self.unet_scales != 3 {
            return Err(Error::Config(format!("unet_scales must be 3, got {}", self.unet_scales)));
        }
        if !(1..=255).contains(&self.regions_k) {
            return Err(Error::Config(format!("regions_k {} outside [1, 255]", self.regions_k)));
        }
        if !(self.kmeans_tol > 0.0) || self.kmeans_max_iter == 0 {
            return Err(Error::Config("kmeans_tol must be positive and kmeans_max_iter non-zero".into()));
        }
        Ok(())
    }

    pub fn kmeans(&self) -> KMeansOptions {
        KMeansOptions { k: self.regions_k, tol: self.kmeans_tol, max_iter: self.kmeans_max_iter }
    }
}

/// Three Conv-IN-ReLU layers with dense connectivity, a 1×1 fusion over all
/// four feature sets and a residual connection.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: [ConvInRelu; 3],
    pub fuse: Conv2d,
}

impl DenseBlock {
    fn new<T: Scalar>(b: &mut Builder<'_, T, ChaCha8Rng>, name: &str, c: usize) -> Self {
        b.scope(name, |b| Self {
            layers: [
                ConvInRelu::new(b, "l0", c, c, 3, 1),
                ConvInRelu::new(b, "l1", 2 * c, c, 3, 1),
                ConvInRelu::new(b, "l2", 3 * c, c, 3, 1),
            ],
            fuse: Conv2d::new(b, "fuse", 4 * c, c, 1, 1, true),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut feats = vec![x];
        for layer in &self.layers {
            let input = if feats.len() == 1 { x } else { cx.graph.concat(&feats)? };
            feats.push(layer.forward(cx, input)?);
        }
        self.fuse.forward(cx, cx.graph.concat(&feats)?)?.add(x)
    }
}

/// Three-scale dense-Unet at constant width.
#[derive(Clone, Debug)]
pub struct DenseUnet {
    pub enc1: DenseBlock,
    pub down1: ConvInRelu,
    pub enc2: DenseBlock,
    pub down2: ConvInRelu,
    pub bottleneck: DenseBlock,
    pub up2: Conv2d,
    pub reduce2: ConvInRelu,
    pub dec2: DenseBlock,
    pub up1: Conv2d,
    pub reduce1: ConvInRelu,
    pub dec1: DenseBlock,
}

impl DenseUnet {
    fn new<T: Scalar>(b: &mut Builder<'_, T, ChaCha8Rng>, name: &str, c: usize) -> Self {
        b.scope(name, |b| Self {
            enc1: DenseBlock::new(b, "enc1", c),
            down1: ConvInRelu::new(b, "down1", c, c, 3, 2),
            enc2: DenseBlock::new(b, "enc2", c),
            down2: ConvInRelu::new(b, "down2", c, c, 3, 2),
            bottleneck: DenseBlock::new(b, "bottleneck", c),
            up2: Conv2d::new(b, "up2", c, c, 1, 1, true),
            reduce2: ConvInRelu::new(b, "reduce2", 2 * c, c, 1, 1),
            dec2: DenseBlock::new(b, "dec2", c),
            up1: Conv2d::new(b, "up1", c, c, 1, 1, true),
            reduce1: ConvInRelu::new(b, "reduce1", 2 * c, c, 1, 1),
            dec1: DenseBlock::new(b, "dec1", c),
        })
    }

    /// Runs stage `s` (0 = enc1 … 4 = dec1) from the previous stage output.
    fn stage<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        s: usize,
        x: Var<'g, T>,
        skips: &[Var<'g, T>],
    ) -> Result<Var<'g, T>> {
        match s {
            0 => self.enc1.forward(cx, x),
            1 => self.enc2.forward(cx, self.down1.forward(cx, x)?),
            2 => self.bottleneck.forward(cx, self.down2.forward(cx, x)?),
            3 => self.dec2.forward(cx, Self::merge(cx, &self.up2, &self.reduce2, x, skips[1])?),
            4 => self.dec1.forward(cx, Self::merge(cx, &self.up1, &self.reduce1, x, skips[0])?),
            _ => unreachable!("dense-Unet has five stages"),
        }
    }

    fn merge<'g, T: Scalar>(
        cx: &Ctx<'g, T>,
        up: &Conv2d,
        reduce: &ConvInRelu,
        x: Var<'g, T>,
        skip: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let s = skip.shape();
        let u = up.forward(cx, x.upsample_bilinear(s[1], s[2])?)?;
        reduce.forward(cx, cx.graph.concat(&[u, skip])?)
    }
}

/// Number of stages where EAI / IAE modules sit.
pub const EAI_POINTS: usize = 5;
pub const IAE_POINTS: usize = 4;

#[derive(Clone, Debug)]
pub struct ExternalStage {
    /// Reduces the per-view internal features to the EIEN input.
    pub input_agg: Aggregate,
    pub eien: DenseUnet,
    pub eai: Vec<Interaction>,
    pub iae: Vec<(Aggregate, Interaction)>,
}

#[derive(Clone, Debug)]
pub struct Architecture {
    /// Plain encoder used instead of the internal stage (M0).
    pub stem: Option<[ConvInRelu; 2]>,
    pub drfg: Option<Drfg>,
    pub iien: DenseUnet,
    pub head: Conv2d,
    pub external: Option<ExternalStage>,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub arch: Architecture,
}

impl<T: Scalar> Model<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }
}

/// Builds a model whose structure follows `config.variant`, with weights drawn from `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let flags = config.flags();
    let c = config.base_channels;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut params, &mut rng);
    let stem = (!flags.use_drfg)
        .then(|| b.scope("stem", |b| [ConvInRelu::new(b, "c0", 3, c, 3, 1), ConvInRelu::new(b, "c1", c, c, 3, 1)]));
    let drfg = flags.use_drfg.then(|| {
        let paths = if flags.use_regionwise_paths { config.regions_k } else { 1 };
        Drfg::new(&mut b, c, paths, flags.use_graph_branch, config.graph_pool_factor)
    });
    let iien = DenseUnet::new(&mut b, "iien", c);
    let head = Conv2d::new(&mut b, "head", c, 3, 3, 1, true);
    let external = flags.use_external_stage.then(|| {
        b.scope("external", |b| ExternalStage {
            input_agg: Aggregate::new(b, "input_agg", c),
            eien: DenseUnet::new(b, "eien", c),
            eai: (0..EAI_POINTS)
                .map(|i| Interaction::new(b, &format!("eai{i}"), c, flags.eai_kind(), config.pli_residual))
                .collect(),
            iae: (0..IAE_POINTS)
                .map(|i| {
                    (
                        Aggregate::new(b, &format!("iae{i}_agg"), c),
                        Interaction::new(b, &format!("iae{i}"), c, flags.iae_kind(), config.pli_residual),
                    )
                })
                .collect(),
        })
    });
    Ok(Model { config: config.clone(), params, arch: Architecture { stem, drfg, iien, head, external } })
}

/// Network-space inputs of one scene: images in `[-1,1]` and region masks.
#[derive(Clone, Debug)]
pub struct SceneInputs<T: Scalar> {
    pub images: Vec<Tensor<T>>,
    pub masks: Vec<RegionMasks>,
}

/// `[0,1]` to `[-1,1]`.
pub fn to_network<T: Scalar>(img: &Tensor<f64>) -> Tensor<T> {
    img.map(|v| 2.0 * v - 1.0).cast()
}

/// `[-1,1]` to `[0,1]`.
pub fn from_network<T: Scalar>(img: &Tensor<T>) -> Tensor<f64> {
    img.cast::<f64>().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Converts views to network space and segments them into regions.
pub fn prepare_scene<T: Scalar>(config: &ModelConfig, batch: &SceneBatch) -> Result<SceneInputs<T>> {
    batch.validate()?;
    let (h, w) = batch.hw();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape("forward_scene", format!("{h}×{w} input is not divisible by 4")));
    }
    let flags = config.flags();
    let mut masks = Vec::with_capacity(batch.len());
    for v in &batch.views {
        let m = if !flags.use_drfg {
            RegionMasks::from_labels(vec![0; h * w], h, w, 1)?
        } else if flags.use_depth_segmentation {
            let depth = estimate_depth(&v.degraded, config.depth_provider, v.depth.as_ref())?;
            kmeans_depth(&depth, &config.kmeans())?
        } else {
            kmeans_gray(&v.degraded, &config.kmeans())?
        };
        masks.push(m);
    }
    Ok(SceneInputs { images: batch.views.iter().map(|v| to_network(&v.degraded)).collect(), masks })
}

/// Enhanced images (network space, `3×H×W` in `[-1,1]`), one per input view.
pub fn forward_inputs<'g, T: Scalar>(
    cx: &Ctx<'g, T>,
    model: &Model<T>,
    inputs: &SceneInputs<T>,
) -> Result<Vec<Var<'g, T>>> {
    let arch = &model.arch;
    let mut feats = Vec::with_capacity(inputs.images.len());
    for (img, masks) in inputs.images.iter().zip(&inputs.masks) {
        let x = cx.graph.input(img.clone());
        let f = match (&arch.drfg, &arch.stem) {
            (Some(d), _) => drfg_forward(cx, d, x, masks)?.fused,
            (None, Some(stem)) => stem[1].forward(cx, stem[0].forward(cx, x)?)?,
            (None, None) => unreachable!("model has either a stem or an internal stage"),
        };
        feats.push(f);
    }

    let n = feats.len();
    let mut internal = feats.clone();
    let mut skips_i: Vec<Vec<Var<'g, T>>> = vec![Vec::new(); n];
    let mut external = match &arch.external {
        Some(ext) => Some(aggregate_scene(cx, &ext.input_agg, &feats)?),
        None => None,
    };
    let mut skips_e = Vec::new();
    for s in 0..EAI_POINTS {
        for i in 0..n {
            internal[i] = arch.iien.stage(cx, s, internal[i], &skips_i[i])?;
        }
        if let (Some(ext), Some(e)) = (&arch.external, external) {
            let e = ext.eien.stage(cx, s, e, &skips_e)?;
            // both directions read the features as they were before this point
            let new_internal = internal.iter().map(|&f| eai(cx, &ext.eai[s], e, f)).collect::<Result<Vec<_>>>()?;
            let new_external = match ext.iae.get(s) {
                Some((agg, m)) => iae(cx, agg, m, &internal, e)?,
                None => e,
            };
            internal = new_internal;
            external = Some(new_external);
        }
        if s < 2 {
            for i in 0..n {
                skips_i[i].push(internal[i]);
            }
            if let Some(e) = external {
                skips_e.push(e);
            }
        }
    }
    internal.into_iter().map(|f| Ok(arch.head.forward(cx, f)?.tanh())).collect()
}

/// Enhances every view of `batch` jointly.
pub fn forward_scene<'g, T: Scalar>(cx: &Ctx<'g, T>, model: &Model<T>, batch: &SceneBatch) -> Result<Vec<Var<'g, T>>> {
    let inputs = prepare_scene(&model.config, batch)?;
    forward_inputs(cx, model, &inputs)
}

/// Inference: enhanced views in `[0,1]`.
pub fn enhance<T: Scalar>(model: &Model<T>, batch: &SceneBatch) -> Result<Vec<Tensor<f64>>> {
    let g = Graph::new();
    let cx = Ctx::new(&g, &model.params);
    Ok(forward_scene(&cx, model, batch)?.iter().map(|o| from_network(&o.value())).collect())
}

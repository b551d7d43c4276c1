//! Content, perceptual and weighted total loss over the views of a scene.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identifier of the perceptual feature extractor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Three stride-2 conv+ReLU stages (3→8→16→32) with weights fixed by a seed.
    #[default]
    FixedRandomPyramid,
    /// A conv stack loaded from a user-supplied JSON file.
    ExternalPretrained,
}

pub const PYRAMID_CHANNELS: [usize; 4] = [3, 8, 16, 32];

/// One frozen conv+ReLU stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenConv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

/// Frozen feature extractor `φ`. Its weights enter the graph as constants,
/// so no gradient ever reaches them.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor<T> {
    pub layers: Vec<FrozenConv<T>>,
}

#[derive(Serialize, Deserialize)]
struct ExternalLayer {
    shape: Vec<usize>,
    weight: Vec<f64>,
    bias: Vec<f64>,
    stride: usize,
}

impl<T: Scalar> Extractor<T> {
    /// Kaiming-uniform 3×3 weights drawn from `seed`, zero biases.
    pub fn fixed_random_pyramid(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = PYRAMID_CHANNELS
            .windows(2)
            .map(|c| {
                let bound = (6.0 / (c[0] * 9) as f64).sqrt();
                FrozenConv {
                    weight: Tensor::uniform(&[c[1], c[0], 3, 3], -bound, bound, &mut rng),
                    bias: Tensor::zeros(&[c[1]]),
                    stride: 2,
                }
            })
            .collect();
        Self { layers }
    }

    /// Reads `[{"shape": [co, ci, k, k], "weight": [...], "bias": [...], "stride": s}, ...]`.
    pub fn load_external(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Vec<ExternalLayer> = serde_json::from_str(&text)?;
        if raw.is_empty() {
            return Err(Error::Data(format!("{}: extractor has no layers", path.display())));
        }
        let mut c_in = 3;
        let mut layers = Vec::new();
        for l in raw {
            if l.shape.len() != 4 || l.shape[1] != c_in || l.shape[2] != l.shape[3] || l.stride == 0 {
                return Err(Error::Data(format!("{}: bad layer shape {:?}", path.display(), l.shape)));
            }
            let weight = Tensor::from_vec(&l.shape, l.weight.into_iter().map(T::c).collect())?;
            let bias = Tensor::from_vec(&[l.shape[0]], l.bias.into_iter().map(T::c).collect())?;
            c_in = l.shape[0];
            layers.push(FrozenConv { weight, bias, stride: l.stride });
        }
        Ok(Self { layers })
    }

    pub fn new(kind: ExtractorKind, seed: u64, weights: Option<&Path>) -> Result<Self> {
        match (kind, weights) {
            (ExtractorKind::FixedRandomPyramid, _) => Ok(Self::fixed_random_pyramid(seed)),
            (ExtractorKind::ExternalPretrained, Some(p)) => Self::load_external(p),
            (ExtractorKind::ExternalPretrained, None) => {
                Err(Error::Config("external_pretrained extractor needs perceptual_weights".into()))
            }
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut h = x;
        for l in &self.layers {
            let k = l.weight.shape()[2];
            h = h.conv2d(g.input(l.weight.clone()), Some(g.input(l.bias.clone())), l.stride, k / 2)?.relu();
        }
        Ok(h)
    }
}

fn check_lists<T: Scalar>(op: &str, a: &[Var<'_, T>], b: &[Var<'_, T>]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("loss", format!("{op}: {} outputs against {} references", a.len(), b.len())));
    }
    Ok(())
}

fn mean_of<'g, T: Scalar>(terms: Vec<Var<'g, T>>) -> Result<Var<'g, T>> {
    let n = terms.len();
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = acc.add(*t)?;
    }
    Ok(acc.scale(T::c(1.0 / n as f64)))
}

/// `(1/N) Σ_n mean|out_n − ref_n|`.
pub fn content_loss<'g, T: Scalar>(outputs: &[Var<'g, T>], refs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    check_lists("content", outputs, refs)?;
    mean_of(outputs.iter().zip(refs).map(|(o, r)| o.l1(*r)).collect::<Result<_>>()?)
}

/// `(1/N) Σ_n mean(φ(out_n) − φ(ref_n))²`.
pub fn perceptual_loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    outputs: &[Var<'g, T>],
    refs: &[Var<'g, T>],
    phi: &Extractor<T>,
) -> Result<Var<'g, T>> {
    check_lists("perceptual", outputs, refs)?;
    let terms =
        outputs.iter().zip(refs).map(|(o, r)| phi.forward(g, *o)?.l2(phi.forward(g, *r)?)).collect::<Result<_>>()?;
    mean_of(terms)
}

/// The three loss terms of one evaluation.
pub struct Losses<'g, T: Scalar> {
    pub content: Var<'g, T>,
    pub perceptual: Var<'g, T>,
    pub total: Var<'g, T>,
}

/// `λ1·L1 + λ2·Lper`. With `λ2 = 0` the perceptual term is not evaluated.
pub fn total_loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    outputs: &[Var<'g, T>],
    refs: &[Var<'g, T>],
    phi: &Extractor<T>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Losses<'g, T>> {
    let content = content_loss(outputs, refs)?;
    if lambda2 == 0.0 {
        return Ok(Losses { content, perceptual: g.scalar(T::zero()), total: content.scale(T::c(lambda1)) });
    }
    let perceptual = perceptual_loss(g, outputs, refs, phi)?;
    let total = content.scale(T::c(lambda1)).add(perceptual.scale(T::c(lambda2)))?;
    Ok(Losses { content, perceptual, total })
}

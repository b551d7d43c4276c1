//! Depth-based region feature guidance: per-region encoder paths with a
//! residual content branch and a pooled graph branch, recombined spatially
//! and fused with a global encoder.

use rand::Rng;

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvInRelu, Ctx, Matrix};
use crate::regionseg::RegionMasks;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest node count chosen automatically.
pub const NODE_TARGET: usize = 256;
/// Hard ceiling on graph nodes.
pub const NODE_LIMIT: usize = 1024;
pub const ADJ_DIM: usize = 16;
pub const HIDDEN_DIM: usize = 32;

/// Learnable matrices of the graph branch.
#[derive(Clone, Debug)]
pub struct GraphBranch {
    pub p1: Matrix,
    pub p2: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl GraphBranch {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c: usize) -> Self {
        b.scope("graph", |b| Self {
            p1: Matrix::new(b, "p1", c, ADJ_DIM),
            p2: Matrix::new(b, "p2", c, ADJ_DIM),
            w1: Matrix::new(b, "w1", c, HIDDEN_DIM),
            w2: Matrix::new(b, "w2", HIDDEN_DIM, c),
        })
    }
}

/// One region encoder path.
#[derive(Clone, Debug)]
pub struct EncoderPath {
    pub initial: [ConvInRelu; 2],
    pub content: [ConvInRelu; 2],
    pub graph: Option<GraphBranch>,
    /// 1×1 convolution matching graph-branch magnitudes to the content branch.
    pub rescale: Option<Conv2d>,
}

impl EncoderPath {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, c: usize, with_graph: bool) -> Self {
        b.scope(name, |b| Self {
            initial: [ConvInRelu::new(b, "init0", 3, c, 3, 1), ConvInRelu::new(b, "init1", c, c, 3, 1)],
            content: [ConvInRelu::new(b, "content0", c, c, 3, 1), ConvInRelu::new(b, "content1", c, c, 3, 1)],
            graph: with_graph.then(|| GraphBranch::new(b, c)),
            rescale: with_graph.then(|| Conv2d::new(b, "rescale", c, c, 1, 1, true)),
        })
    }
}

/// Parameters of the whole internal stage.
#[derive(Clone, Debug)]
pub struct Drfg {
    pub global: [ConvInRelu; 2],
    /// One path per region, or a single path shared by every region.
    pub paths: Vec<EncoderPath>,
    pub fusion: ConvInRelu,
    /// Explicit graph pooling factor; chosen from the input size when absent.
    pub pool_factor: Option<usize>,
}

impl Drfg {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        c: usize,
        n_paths: usize,
        with_graph: bool,
        pool_factor: Option<usize>,
    ) -> Self {
        b.scope("drfg", |b| Self {
            global: [ConvInRelu::new(b, "global0", 3, c, 3, 1), ConvInRelu::new(b, "global1", c, c, 3, 1)],
            paths: (0..n_paths).map(|k| EncoderPath::new(b, &format!("path{k}"), c, with_graph)).collect(),
            fusion: ConvInRelu::new(b, "fusion", 2 * c, c, 1, 1),
            pool_factor,
        })
    }

    /// Path that serves region `k`.
    pub fn path(&self, k: usize) -> &EncoderPath {
        &self.paths[k.min(self.paths.len() - 1)]
    }
}

/// `F_o`: two stacked Conv-IN-ReLU units.
pub fn initial_unit<'g, T: Scalar>(cx: &Ctx<'g, T>, path: &EncoderPath, x: Var<'g, T>) -> Result<Var<'g, T>> {
    path.initial[1].forward(cx, path.initial[0].forward(cx, x)?)
}

/// `F_c = CIR(CIR(F_o)) + F_o`.
pub fn content_branch<'g, T: Scalar>(cx: &Ctx<'g, T>, path: &EncoderPath, f: Var<'g, T>) -> Result<Var<'g, T>> {
    path.content[1].forward(cx, path.content[0].forward(cx, f)?)?.add(f)
}

/// `A = σ((N·P1)(N·P2)ᵀ)` for an `n×C` node matrix.
pub fn build_adjacency<'g, T: Scalar>(nodes: Var<'g, T>, p1: Var<'g, T>, p2: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(nodes.matmul(p1)?.matmul_t(nodes.matmul(p2)?, false, true)?.sigmoid())
}

/// `Â = D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the row sums of `A + I`.
pub fn normalize_adjacency<'g, T: Scalar>(a: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("normalize_adjacency", format!("square matrix required, got {s:?}")));
    }
    let n = s[0];
    let eye = a.graph().input(Tensor::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() }));
    let at = a.add(eye)?;
    let deg = at.sum_axis(1)?;
    at.mul(deg.matmul_t(deg, false, true)?.powf(T::c(-0.5)))
}

/// Pooling factor for an `h×w` map: the explicit one (checked against
/// [`NODE_LIMIT`]) or the smallest common divisor giving at most [`NODE_TARGET`] nodes.
pub fn pool_factor(h: usize, w: usize, explicit: Option<usize>) -> Result<usize> {
    if let Some(s) = explicit {
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::InvalidArgument(format!("graph pooling factor {s} does not divide {h}×{w}")));
        }
        let n = (h / s) * (w / s);
        if n > NODE_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "graph branch would build {n} nodes (limit {NODE_LIMIT}); raise the pooling factor above {s}"
            )));
        }
        return Ok(s);
    }
    (1..=h.min(w))
        .find(|s| h.is_multiple_of(*s) && w.is_multiple_of(*s) && (h / s) * (w / s) <= NODE_TARGET)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no pooling factor divides {h}×{w} down to {NODE_TARGET} nodes; set one explicitly"
            ))
        })
}

/// Two-layer graph propagation over pooled spatial nodes, softmax over
/// channels per node, bilinearly upsampled back to the input size.
pub fn graph_branch<'g, T: Scalar>(
    cx: &Ctx<'g, T>,
    gb: &GraphBranch,
    f: Var<'g, T>,
    factor: Option<usize>,
) -> Result<Var<'g, T>> {
    let s = f.shape();
    let [c, h, w] = s[..] else {
        return Err(Error::shape("graph_branch", format!("expected C×H×W, got {s:?}")));
    };
    let k = pool_factor(h, w, factor)?;
    let pooled = if k == 1 { f } else { f.max_pool(k)?.add(f.avg_pool(k)?)? };
    let (hp, wp) = (h / k, w / k);
    let nodes = pooled.reshape(&[c, hp * wp])?.transpose()?;
    let a_hat = normalize_adjacency(build_adjacency(nodes, cx.p(gb.p1.weight), cx.p(gb.p2.weight))?)?;
    let h1 = a_hat.matmul(gb.w1.forward(cx, nodes)?)?.relu();
    let h2 = a_hat.matmul(gb.w2.forward(cx, h1)?)?;
    let out = h2.softmax(1)?.transpose()?.reshape(&[c, hp, wp])?;
    if k == 1 {
        Ok(out)
    } else {
        out.upsample_bilinear(h, w)
    }
}

/// Content branch plus rescaled graph branch.
pub fn encoder_path<'g, T: Scalar>(
    cx: &Ctx<'g, T>,
    path: &EncoderPath,
    region: Var<'g, T>,
    factor: Option<usize>,
) -> Result<Var<'g, T>> {
    let fo = initial_unit(cx, path, region)?;
    let fc = content_branch(cx, path, fo)?;
    match (&path.graph, &path.rescale) {
        (Some(gb), Some(rs)) => fc.add(rs.forward(cx, graph_branch(cx, gb, fo, factor)?)?),
        _ => Ok(fc),
    }
}

/// Intermediate results of [`drfg_forward`].
pub struct DrfgOutput<'g, T: Scalar> {
    pub global: Var<'g, T>,
    /// `Σ_k F_k ⊙ M_k` before fusion.
    pub regions: Var<'g, T>,
    pub fused: Var<'g, T>,
}

/// Internal-stage representation of one image given its region masks.
pub fn drfg_forward<'g, T: Scalar>(
    cx: &Ctx<'g, T>,
    net: &Drfg,
    image: Var<'g, T>,
    masks: &RegionMasks,
) -> Result<DrfgOutput<'g, T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || (s[1], s[2]) != masks.hw() {
        return Err(Error::shape("drfg", format!("image {s:?} with masks {:?}", masks.hw())));
    }
    let global = net.global[1].forward(cx, net.global[0].forward(cx, image)?)?;
    let mut combined: Option<Var<'g, T>> = None;
    for k in 0..masks.k() {
        if masks.count(k) == 0 {
            continue;
        }
        let m = cx.graph.input(masks.mask::<T>(k));
        let fk = encoder_path(cx, net.path(k), image.mul(m)?, net.pool_factor)?.mul(m)?;
        combined = Some(match combined {
            Some(acc) => acc.add(fk)?,
            None => fk,
        });
    }
    let regions = combined.ok_or_else(|| Error::Data("region masks cover no pixel".into()))?;
    let fused = net.fusion.forward(cx, cx.graph.concat(&[global, regions])?)?;
    Ok(DrfgOutput { global, regions, fused })
}

//! Feature-, channel- and pixel-level interaction between the two external
//! branches, and the scene aggregation that makes the external branch
//! independent of the number and order of views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvInRelu, Ctx};
use crate::scalar::Scalar;

/// Channel reduction of the gating bottlenecks.
pub const GATE_RATIO: usize = 4;

/// Which interaction steps an interaction module applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    /// Feature, channel and pixel level.
    Full,
    /// Feature and channel level.
    FliCli,
    /// Concatenation followed by Conv-IN-ReLU.
    FliOnly,
}

/// Feature added back after the pixel-level gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PliResidual {
    /// `W ⊙ F_cli + F_fli`.
    #[default]
    Fli,
    /// `W ⊙ F_cli + F_cli`.
    Cli,
}

#[derive(Clone, Debug)]
pub struct Cli {
    pub pre: Conv2d,
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Pli {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

/// One EAI or IAE module.
#[derive(Clone, Debug)]
pub struct Interaction {
    pub fli: ConvInRelu,
    pub cli: Option<Cli>,
    pub pli: Option<Pli>,
    pub residual: PliResidual,
}

impl Interaction {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        c: usize,
        kind: InteractionKind,
        residual: PliResidual,
    ) -> Self {
        let r = (c / GATE_RATIO).max(1);
        b.scope(name, |b| Self {
            fli: ConvInRelu::new(b, "fli", 2 * c, c, 3, 1),
            cli: (kind != InteractionKind::FliOnly).then(|| Cli {
                pre: Conv2d::new(b, "cli_pre", c, c, 3, 1, true),
                squeeze: Conv2d::new(b, "cli_squeeze", c, r, 1, 1, true),
                excite: Conv2d::new(b, "cli_excite", r, c, 1, 1, true),
            }),
            pli: (kind == InteractionKind::Full).then(|| Pli {
                reduce: Conv2d::new(b, "pli_reduce", c, r, 1, 1, true),
                expand: Conv2d::new(b, "pli_expand", r, c, 1, 1, true),
            }),
            residual,
        })
    }
}

/// `CIR(concat(first, second))`. Both interaction directions place the
/// external-branch feature first.
pub fn fli<'g, T: Scalar>(
    cx: &Ctx<'g, T>,
    m: &Interaction,
    first: Var<'g, T>,
    second: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let (a, b) = (first.shape(), second.shape());
    if a.len() != 3 || a[1..] != b[1..] {
        return Err(Error::shape("fli", format!("interacting features {a:?} and {b:?} are not aligned")));
    }
    m.fli.forward(cx, cx.graph.concat(&[first, second])?)
}

/// Channel gate `σ(C(R(C(G(ConvReLU(f))))))`, applied as `W ⊙ f + f`.
pub fn cli<'g, T: Scalar>(cx: &Ctx<'g, T>, p: &Cli, f: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = p.pre.forward(cx, f)?.relu().global_avg_pool()?;
    let w = p.excite.forward(cx, p.squeeze.forward(cx, s)?.relu())?.sigmoid();
    f.mul(w)?.add(f)
}

/// Pixel gate `σ(C(R(C(f_cli))))`, applied as `W ⊙ f_cli + residual`.
pub fn pli<'g, T: Scalar>(cx: &Ctx<'g, T>, p: &Pli, f_cli: Var<'g, T>, residual: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = p.expand.forward(cx, p.reduce.forward(cx, f_cli)?.relu())?.sigmoid();
    f_cli.mul(w)?.add(residual)
}

/// Runs the configured interaction steps on `fli(first, second)`.
pub fn interact<'g, T: Scalar>(
    cx: &Ctx<'g, T>,
    m: &Interaction,
    first: Var<'g, T>,
    second: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let f = fli(cx, m, first, second)?;
    let Some(c) = &m.cli else { return Ok(f) };
    let fc = cli(cx, c, f)?;
    let Some(p) = &m.pli else { return Ok(fc) };
    let residual = match m.residual {
        PliResidual::Fli => f,
        PliResidual::Cli => fc,
    };
    pli(cx, p, fc, residual)
}

/// External-assist-internal: updated internal feature of one image.
pub fn eai<'g, T: Scalar>(
    cx: &Ctx<'g, T>,
    m: &Interaction,
    external: Var<'g, T>,
    internal: Var<'g, T>,
) -> Result<Var<'g, T>> {
    interact(cx, m, external, internal)
}

/// Mean over views followed by a 1×1 Conv-IN-ReLU.
#[derive(Clone, Debug)]
pub struct Aggregate {
    pub unit: ConvInRelu,
}

impl Aggregate {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, c: usize) -> Self {
        b.scope(name, |b| Self { unit: ConvInRelu::new(b, "reduce", c, c, 1, 1) })
    }
}

pub fn aggregate_scene<'g, T: Scalar>(cx: &Ctx<'g, T>, agg: &Aggregate, features: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("aggregate_scene: no features".into()));
    }
    agg.unit.forward(cx, cx.graph.mean_stack(features)?)
}

/// Internal-assist-external: updated external feature from all internal ones.
pub fn iae<'g, T: Scalar>(
    cx: &Ctx<'g, T>,
    agg: &Aggregate,
    m: &Interaction,
    internal: &[Var<'g, T>],
    external: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let pooled = aggregate_scene(cx, agg, internal)?;
    interact(cx, m, external, pooled)
}

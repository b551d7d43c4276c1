//! Parameterized layers assembled from the differentiable primitives.

use rand::Rng;

use crate::diff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Instance-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> O) -> O {
        let saved = self.prefix.clone();
        self.prefix = self.full(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = self.full(name);
        self.store.add(full, shape, init, self.rng)
    }
}

/// Forward-time view of a parameter store bound to one graph.
#[derive(Clone, Copy)]
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub params: &'g ParamStore<T>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, params: &'g ParamStore<T>) -> Self {
        Self { graph, params }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.graph.param(self.params, id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k×k` convolution with same-padding (`k/2`), Kaiming-uniform weights and zero bias.
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        b.scope(name, |b| {
            let weight = b.param("weight", &[c_out, c_in, k, k], Init::KaimingUniform { fan_in: c_in * k * k });
            let bias = bias.then(|| b.param("bias", &[c_out], Init::Zeros));
            Self { weight, bias, stride, pad: k / 2 }
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(cx.p(self.weight), self.bias.map(|b| cx.p(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, c: usize) -> Self {
        b.scope(name, |b| Self { gamma: b.param("gamma", &[c], Init::Ones), beta: b.param("beta", &[c], Init::Zeros) })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.instance_norm(cx.p(self.gamma), cx.p(self.beta), NORM_EPS)
    }
}

/// Convolution, instance normalization, ReLU. The convolution carries no bias
/// since normalization removes it.
#[derive(Clone, Debug)]
pub struct ConvInRelu {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

impl ConvInRelu {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            conv: Conv2d::new(b, "conv", c_in, c_out, k, stride, false),
            norm: InstanceNorm::new(b, "norm", c_out),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.norm.forward(cx, self.conv.forward(cx, x)?)?.relu())
    }
}

/// Dense projection matrix `[d_in, d_out]` applied as `x · W`.
#[derive(Clone, Debug)]
pub struct Matrix {
    pub weight: ParamId,
}

impl Matrix {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self { weight: b.param(name, &[d_in, d_out], Init::KaimingUniform { fan_in: d_in }) }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(cx.p(self.weight))
    }
}

//! Reusable layers: linear, convolution, normalization, multi-head
//! attention and the token/feature-map reshaping between them.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{layer_norm, s, Ctx, ParamId, ParamStore, Scalar, Scope, Var};

pub fn normal_init<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| s::<T>(dist.sample(rng)))
}

/// Fully connected layer over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        scope: Scope,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let w = store.register(format!("{name}.weight"), scope, normal_init(rng, &[in_dim, out_dim], std));
        let b = bias.then(|| store.register(format!("{name}.bias"), scope, ArrayD::zeros(IxDyn(&[out_dim]))));
        Self { w, b, in_dim, out_dim }
    }

    /// `[..., in_dim] -> [..., out_dim]`.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let shape = x.shape();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let mut y = x.reshape(&[rows, self.in_dim]).matmul(cx.p(self.w));
        if let Some(b) = self.b {
            y = y + cx.p(b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }
}

/// Square-kernel convolution with stride and padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        scope: Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = store.register(
            format!("{name}.weight"),
            scope,
            normal_init(rng, &[out_ch, in_ch, kernel, kernel], std),
        );
        let b = store.register(format!("{name}.bias"), scope, ArrayD::zeros(IxDyn(&[out_ch])));
        Self { w, b, stride, pad }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(cx.p(self.w), Some(cx.p(self.b)), self.stride, self.pad)
    }
}

/// Affine layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, scope: Scope, dim: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), scope, ArrayD::from_elem(IxDyn(&[dim]), T::one()));
        let beta = store.register(format!("{name}.beta"), scope, ArrayD::zeros(IxDyn(&[dim])));
        Self { gamma, beta }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        layer_norm(x, Some(cx.p(self.gamma)), Some(cx.p(self.beta)), NORM_EPS)
    }
}

/// Batch-independent normalization of `[B,C,H,W]` over the channel axis
/// at each spatial position.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    inner: LayerNorm,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, scope: Scope, channels: usize) -> Self {
        Self {
            inner: LayerNorm::new(store, name, scope, channels),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = x.permute(&[0, 2, 3, 1]);
        self.inner.forward(cx, y).permute(&[0, 3, 1, 2])
    }
}

/// `[B,C,H,W] -> [B, H*W, C]` token view of a feature map.
pub fn map_to_tokens<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let shape = x.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    x.reshape(&[b, c, h * w]).permute(&[0, 2, 1])
}

/// `[B, H*W, C] -> [B,C,H,W]`.
pub fn tokens_to_map<'t, T: Scalar>(x: Var<'t, T>, h: usize, w: usize) -> Var<'t, T> {
    let shape = x.shape();
    let (b, c) = (shape[0], shape[2]);
    x.permute(&[0, 2, 1]).reshape(&[b, c, h, w])
}

/// Multi-head scaled-dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        scope: Scope,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), scope, dim, dim, true),
            wk: Linear::new(store, rng, &format!("{name}.wk"), scope, dim, dim, true),
            wv: Linear::new(store, rng, &format!("{name}.wv"), scope, dim, dim, true),
            wo: Linear::new(store, rng, &format!("{name}.wo"), scope, dim, dim, true),
            heads,
            dim,
        }
    }

    fn split_heads<'t, T: Scalar>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let shape = x.shape();
        let (b, n) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;
        x.reshape(&[b, n, self.heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * self.heads, n, dh])
    }

    /// `queries: [B,Nq,D]`, `keys_values: [B,Nk,D] -> [B,Nq,D]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        queries: Var<'t, T>,
        keys_values: Var<'t, T>,
    ) -> Var<'t, T> {
        let (b, nq) = (queries.shape()[0], queries.shape()[1]);
        let dh = self.dim / self.heads;
        let q = self.split_heads(self.wq.forward(cx, queries));
        let k = self.split_heads(self.wk.forward(cx, keys_values));
        let v = self.split_heads(self.wv.forward(cx, keys_values));
        let scores = q.bmm(k.permute(&[0, 2, 1])).scale(s::<T>(1.0 / (dh as f64).sqrt()));
        let attn = scores.softmax(2);
        let out = attn.bmm(v); // [BH, Nq, dh]
        let merged = out
            .reshape(&[b, self.heads, nq, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, nq, self.dim]);
        self.wo.forward(cx, merged)
    }
}

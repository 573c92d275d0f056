//! Cross-modal fusion: projected visual tokens attend to themselves and to
//! the projected class embeddings through a stack of decoder layers, then
//! map back to the visual width to form the transition feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::layers::{normal_init, Linear, MultiHeadAttention};
use crate::tensor::{concat, Ctx, ParamId, ParamStore, Scalar, Scope, Var};

/// Side length of the learned positional grid; interpolated to the actual
/// stage-4 grid at forward time.
pub const POS_GRID: usize = 8;

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
pub struct CrossModalFusion {
    project_in: Linear,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    project_out: Linear,
    dim: usize,
}

impl CrossModalFusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        visual_dim: usize,
        dim: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let project_in = Linear::new(store, rng, &format!("{name}.project_in"), Scope::Ttg, visual_dim, dim, true);
        let pos = store.register(
            format!("{name}.pos"),
            Scope::Ttg,
            normal_init(rng, &[dim, POS_GRID, POS_GRID], 0.02),
        );
        let layers = (0..layers)
            .map(|l| DecoderLayer {
                self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.layer{l}.self"), Scope::Ttg, dim, heads),
                cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.layer{l}.cross"), Scope::Ttg, dim, heads),
            })
            .collect();
        let project_out = Linear::new(store, rng, &format!("{name}.project_out"), Scope::Ttg, dim, visual_dim, true);
        Self {
            project_in,
            pos,
            layers,
            project_out,
            dim,
        }
    }

    fn positional<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, h: usize, w: usize) -> Var<'t, T> {
        cx.p(self.pos)
            .reshape(&[1, self.dim, POS_GRID, POS_GRID])
            .upsample_bilinear(h, w)
            .reshape(&[1, self.dim, h * w])
            .permute(&[0, 2, 1]) // [1, N, dim]
    }

    /// `tokens: [B, N, visual_dim]` on the `h x w` stage-4 grid, guided by
    /// class embeddings `z: [K, dim]` -> transition feature `[B, N, visual_dim]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        tokens: Var<'t, T>,
        grid: (usize, usize),
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = tokens.shape();
        let (b, n) = (shape[0], shape[1]);
        if n == 0 || b == 0 {
            return Err(Error::Data("cross-modal fusion on zero tokens".into()));
        }
        if grid.0 * grid.1 != n {
            return Err(Error::Shape {
                context: "fusion token grid".into(),
                expected: vec![grid.0 * grid.1],
                found: vec![n],
            });
        }
        let zk = z.shape()[0];
        let z3 = z.reshape(&[1, zk, self.dim]);
        let z_batch = if b == 1 { z3 } else { concat(&vec![z3; b], 0) };

        let mut v = self.project_in.forward(cx, tokens) + self.positional(cx, grid.0, grid.1);
        for layer in &self.layers {
            v = layer.self_attn.forward(cx, v, v) + layer.cross_attn.forward(cx, v, z_batch);
        }
        Ok(self.project_out.forward(cx, v))
    }
}

//! Projection of frozen class embeddings into the fusion space: either a
//! soft mixture of expert projections with a learned gate, or a single
//! linear bypass.

use rand::Rng;

use crate::model::layers::{normal_init, Linear};
use crate::tensor::{layer_norm, Ctx, ParamId, ParamStore, Scalar, Scope, Var};

/// One expert: two-layer nonlinear projection `text_dim -> dim`.
#[derive(Debug, Clone)]
struct Expert {
    fc1: Linear,
    fc2: Linear,
}

impl Expert {
    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.fc2.forward(cx, self.fc1.forward(cx, x).gelu())
    }
}

/// Soft mixture of experts over the class axis.
#[derive(Debug, Clone)]
pub struct AdaptiveSemanticIntegration {
    gate_w: ParamId,
    experts: Vec<Expert>,
}

impl AdaptiveSemanticIntegration {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        text_dim: usize,
        dim: usize,
        num_experts: usize,
    ) -> Self {
        let std = (2.0 / (text_dim + num_experts) as f64).sqrt();
        let gate_w = store.register(
            format!("{name}.gate.weight"),
            Scope::Ttg,
            normal_init(rng, &[text_dim, num_experts], std),
        );
        let experts = (0..num_experts)
            .map(|m| Expert {
                fc1: Linear::new(store, rng, &format!("{name}.expert{m}.fc1"), Scope::Ttg, text_dim, dim, true),
                fc2: Linear::new(store, rng, &format!("{name}.expert{m}.fc2"), Scope::Ttg, dim, dim, true),
            })
            .collect();
        Self { gate_w, experts }
    }

    /// Soft expert weights `[K, M]`; rows sum to one.
    pub fn gate<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, t_class: Var<'t, T>) -> Var<'t, T> {
        layer_norm(t_class, None, None, crate::model::layers::NORM_EPS)
            .matmul(cx.p(self.gate_w))
            .softmax(1)
    }

    /// Soft aggregation `[K, text_dim] -> [K, dim]`.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, t_class: Var<'t, T>) -> Var<'t, T> {
        let alpha = self.gate(cx, t_class);
        let mut acc: Option<Var<'t, T>> = None;
        for (m, expert) in self.experts.iter().enumerate() {
            let weight = alpha.slice_axis(1, m, 1); // [K, 1]
            let term = expert.forward(cx, t_class) * weight;
            acc = Some(match acc {
                Some(a) => a + term,
                None => term,
            });
        }
        acc.expect("at least one expert")
    }

    #[cfg(test)]
    pub(crate) fn expert_outputs_for_test<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        t_class: Var<'t, T>,
    ) -> Vec<ndarray::ArrayD<T>> {
        self.experts.iter().map(|e| e.forward(cx, t_class).value()).collect()
    }
}

/// Ablation arm: a single linear projection in place of the expert mixture.
#[derive(Debug, Clone)]
pub struct BypassProjection {
    proj: Linear,
}

impl BypassProjection {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        text_dim: usize,
        dim: usize,
    ) -> Self {
        Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), Scope::Ttg, text_dim, dim, true),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, t_class: Var<'t, T>) -> Var<'t, T> {
        self.proj.forward(cx, t_class)
    }

    pub fn weight(&self) -> ParamId {
        self.proj.w
    }
}

/// Either projection arm, selected by configuration.
#[derive(Debug, Clone)]
pub enum ClassProjection {
    Asi(AdaptiveSemanticIntegration),
    Bypass(BypassProjection),
}

impl ClassProjection {
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, t_class: Var<'t, T>) -> Var<'t, T> {
        match self {
            ClassProjection::Asi(asi) => asi.forward(cx, t_class),
            ClassProjection::Bypass(b) => b.forward(cx, t_class),
        }
    }
}

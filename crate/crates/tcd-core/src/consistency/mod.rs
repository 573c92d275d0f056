//! Spatio-temporal consistency constraints: cross-temporal feature
//! reconstruction, token labelling and the auxiliary training losses.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::tensor::{s, Scalar, Var};

/// Which reconstruction directions are produced and constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directionality {
    /// Only the phase-2 reconstruction `i1 + d2`.
    OneWayEq1,
    /// Only the phase-1 reconstruction `i2 + d1`.
    OneWayEq2,
    /// Both directions.
    TwoWay,
}

impl Directionality {
    /// Task-dependent default: both directions for SCD, the single
    /// phase-1 reconstruction for BCD.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Scd => Directionality::TwoWay,
            Task::Bcd => Directionality::OneWayEq2,
        }
    }

    pub fn produces_phase2(self) -> bool {
        matches!(self, Directionality::OneWayEq1 | Directionality::TwoWay)
    }

    pub fn produces_phase1(self) -> bool {
        matches!(self, Directionality::OneWayEq2 | Directionality::TwoWay)
    }
}

/// Weights of the auxiliary terms and the contrastive temperature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-token change labels at the stage-4 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLabels {
    /// `+1` unchanged, `-1` changed, one entry per token in row-major order.
    pub y: Vec<i8>,
    pub change_fraction: f64,
}

impl TokenLabels {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Concatenate per-sample labels into one batch-level labelling.
    pub fn concat(parts: &[TokenLabels]) -> TokenLabels {
        let y: Vec<i8> = parts.iter().flat_map(|p| p.y.iter().copied()).collect();
        let changed = y.iter().filter(|&&v| v == -1).count();
        TokenLabels {
            change_fraction: if y.is_empty() { 0.0 } else { changed as f64 / y.len() as f64 },
            y,
        }
    }
}

/// Majority-rule downsampling of a binary change mask to a token grid.
///
/// A token is labelled changed (`-1`) when strictly more than half of the
/// pixels in its patch are changed.
pub fn token_labels_from_mask(mask: &Array2<u8>, grid: (usize, usize)) -> Result<TokenLabels> {
    let (h, w) = (mask.nrows(), mask.ncols());
    let (gh, gw) = grid;
    if gh == 0 || h % gh != 0 {
        return Err(Error::NotDivisible {
            context: "token labels",
            axis: "height",
            value: h,
            by: gh.max(1),
        });
    }
    if gw == 0 || w % gw != 0 {
        return Err(Error::NotDivisible {
            context: "token labels",
            axis: "width",
            value: w,
            by: gw.max(1),
        });
    }
    let (ph, pw) = (h / gh, w / gw);
    let mut y = Vec::with_capacity(gh * gw);
    let mut changed = 0usize;
    for ty in 0..gh {
        for tx in 0..gw {
            let mut count = 0usize;
            for dy in 0..ph {
                for dx in 0..pw {
                    if mask[[ty * ph + dy, tx * pw + dx]] != 0 {
                        count += 1;
                    }
                }
            }
            let frac = count as f64 / (ph * pw) as f64;
            if frac > 0.5 {
                y.push(-1);
                changed += 1;
            } else {
                y.push(1);
            }
        }
    }
    Ok(TokenLabels {
        change_fraction: changed as f64 / y.len() as f64,
        y,
    })
}

/// Cross-temporal reconstructions from transition features.
///
/// `i1 + d2` approximates the phase-2 features and `i2 + d1` the phase-1
/// features; `directionality` selects which of the two are formed.
pub fn reconstruct<'t, T: Scalar>(
    i1: Var<'t, T>,
    i2: Var<'t, T>,
    d1: Option<Var<'t, T>>,
    d2: Option<Var<'t, T>>,
    directionality: Directionality,
) -> Result<(Option<Var<'t, T>>, Option<Var<'t, T>>)> {
    let shape = i1.shape();
    if shape != i2.shape() {
        return Err(Error::Shape {
            context: "reconstruct: phase token grids".into(),
            expected: shape,
            found: i2.shape(),
        });
    }
    let check = |d: &Var<'t, T>| -> Result<()> {
        if d.shape() != shape {
            return Err(Error::Shape {
                context: "reconstruct: transition feature".into(),
                expected: shape.clone(),
                found: d.shape(),
            });
        }
        Ok(())
    };
    let hat2 = if directionality.produces_phase2() {
        let d2 = d2.ok_or_else(|| Error::Config("directionality requires d2".into()))?;
        check(&d2)?;
        Some(i1 + d2)
    } else {
        None
    };
    let hat1 = if directionality.produces_phase1() {
        let d1 = d1.ok_or_else(|| Error::Config("directionality requires d1".into()))?;
        check(&d1)?;
        Some(i2 + d1)
    } else {
        None
    };
    Ok((hat1, hat2))
}

/// Mean pixel-wise cross-entropy of `[B,K,H,W]` logits against `[B,H,W]`
/// integer labels. Pixels equal to `ignore` are excluded; an empty
/// reduction is exactly zero with zero gradient.
pub fn cross_entropy_mean<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &Array3<u8>,
    ignore: Option<u8>,
) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 4, "logits must be [B,K,H,W]");
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.dim() != (b, h, w) {
        return Err(Error::Shape {
            context: "cross entropy labels".into(),
            expected: vec![b, h, w],
            found: labels.shape().to_vec(),
        });
    }

    let mut one_hot = ArrayD::<T>::zeros(IxDyn(&[b, k, h, w]));
    let mut valid = ArrayD::<T>::zeros(IxDyn(&[b, h, w]));
    let mut count = 0usize;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let label = labels[[bi, y, x]];
                if Some(label) == ignore {
                    continue;
                }
                if label as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        label: label as usize,
                        num_classes: k,
                    });
                }
                one_hot[[bi, label as usize, y, x]] = T::one();
                valid[[bi, y, x]] = T::one();
                count += 1;
            }
        }
    }
    let tape = logits.tape();
    if count == 0 {
        return Ok(tape.constant(ArrayD::from_elem(IxDyn(&[]), T::zero())));
    }
    let lse = logits.log_sum_exp(1, false); // [B,H,W]
    let true_logit = (logits * tape.constant(one_hot)).sum_axis(1, false); // [B,H,W]
    let per_pixel = (lse - true_logit) * tape.constant(valid);
    Ok(per_pixel.sum_all().scale(T::one() / s::<T>(count as f64)))
}

/// Binary change-map cross-entropy (mean over all pixels).
pub fn loss_change<'t, T: Scalar>(change_logits: Var<'t, T>, gt: &Array3<u8>) -> Result<Var<'t, T>> {
    let k = change_logits.shape()[1];
    if k != 2 {
        return Err(Error::Shape {
            context: "change logits class axis".into(),
            expected: vec![2],
            found: vec![k],
        });
    }
    cross_entropy_mean(change_logits, gt, None)
}

/// Sum of the per-phase semantic cross-entropies (SCD only).
pub fn loss_sem<'t, T: Scalar>(
    sem_logits_t1: Var<'t, T>,
    sem_logits_t2: Var<'t, T>,
    gt_t1: &Array3<u8>,
    gt_t2: &Array3<u8>,
    ignore: u8,
) -> Result<Var<'t, T>> {
    let a = cross_entropy_mean(sem_logits_t1, gt_t1, Some(ignore))?;
    let b = cross_entropy_mean(sem_logits_t2, gt_t2, Some(ignore))?;
    Ok(a + b)
}

/// Semantic alignment: mean `1 - cos` over unchanged locations of two
/// spatially aligned feature maps `[B,C,h,w]`. The change mask is reduced
/// to the feature grid by the same majority rule as token labels; if no
/// location is unchanged the loss is exactly zero.
pub fn loss_sa<'t, T: Scalar>(
    feat_t1: Var<'t, T>,
    feat_t2: Var<'t, T>,
    change_masks: &[Array2<u8>],
) -> Result<Var<'t, T>> {
    let shape = feat_t1.shape();
    if shape != feat_t2.shape() {
        return Err(Error::Shape {
            context: "semantic alignment features".into(),
            expected: shape,
            found: feat_t2.shape(),
        });
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    assert_eq!(change_masks.len(), b, "one change mask per sample");

    let mut unchanged = ArrayD::<T>::zeros(IxDyn(&[b, h, w]));
    let mut count = 0usize;
    for (bi, mask) in change_masks.iter().enumerate() {
        let labels = token_labels_from_mask(mask, (h, w))?;
        for (i, &y) in labels.y.iter().enumerate() {
            if y == 1 {
                unchanged[[bi, i / w, i % w]] = T::one();
                count += 1;
            }
        }
    }
    let tape = feat_t1.tape();
    if count == 0 {
        return Ok(tape.constant(ArrayD::from_elem(IxDyn(&[]), T::zero())));
    }
    // [B,C,h,w] -> [B,h,w,C] rows over channels
    let cos = feat_t1.permute(&[0, 2, 3, 1]).cosine_rows(feat_t2.permute(&[0, 2, 3, 1]));
    let one_minus = cos.neg().add_scalar(T::one());
    let masked = one_minus * tape.constant(unchanged);
    Ok(masked.sum_all().scale(T::one() / s::<T>(count as f64)))
}

/// Token-level contrastive alignment between original and reconstructed
/// features `[B,L,D]`: each token's positive is its reconstruction at the
/// same position; every reconstructed token in the batch is a candidate.
pub fn loss_recon<'t, T: Scalar>(
    original: Var<'t, T>,
    reconstructed: Var<'t, T>,
    tau: f64,
) -> Result<Var<'t, T>> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let shape = original.shape();
    if shape != reconstructed.shape() {
        return Err(Error::Shape {
            context: "reconstruction contrast".into(),
            expected: shape,
            found: reconstructed.shape(),
        });
    }
    let (rows, d) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 => (shape[0] * shape[1], shape[2]),
        _ => {
            return Err(Error::Shape {
                context: "reconstruction contrast expects [B,L,D] or [L,D]".into(),
                expected: vec![0, 0, 0],
                found: shape,
            })
        }
    };
    if rows == 0 {
        return Err(Error::Data("reconstruction contrast on zero tokens".into()));
    }
    let anchors = original.reshape(&[rows, d]).normalize_rows();
    let candidates = reconstructed.reshape(&[rows, d]).normalize_rows();
    let sims = anchors.matmul(candidates.permute(&[1, 0])).scale(s::<T>(1.0 / tau));
    let lse = sims.log_sum_exp(1, false); // [rows]
    let eye = {
        let mut m = ArrayD::<T>::zeros(IxDyn(&[rows, rows]));
        for i in 0..rows {
            m[[i, i]] = T::one();
        }
        original.tape().constant(m)
    };
    let positives = (sims * eye).sum_axis(1, false); // [rows]
    Ok((lse - positives).mean_all())
}

/// Transition-token constraint: unchanged tokens are pulled together
/// (`1 - cos`), changed tokens are pushed to non-positive cosine
/// (`max(0, cos)`). Mean over all tokens; zero-norm tokens contribute via
/// the `cos = 0` convention.
pub fn loss_trans<'t, T: Scalar>(
    d1: Var<'t, T>,
    d2: Var<'t, T>,
    labels: &TokenLabels,
) -> Result<Var<'t, T>> {
    let shape = d1.shape();
    if shape != d2.shape() {
        return Err(Error::Shape {
            context: "transition constraint".into(),
            expected: shape,
            found: d2.shape(),
        });
    }
    let dim = *shape.last().expect("non-scalar");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    if rows != labels.len() {
        return Err(Error::Shape {
            context: "transition labels".into(),
            expected: vec![rows],
            found: vec![labels.len()],
        });
    }
    let cos = d1.reshape(&[rows, dim]).cosine_rows(d2.reshape(&[rows, dim])); // [rows]
    let mut pos = ArrayD::<T>::zeros(IxDyn(&[rows]));
    let mut neg = ArrayD::<T>::zeros(IxDyn(&[rows]));
    for (i, &y) in labels.y.iter().enumerate() {
        if y == 1 {
            pos[[i]] = T::one();
        } else {
            neg[[i]] = T::one();
        }
    }
    let tape = d1.tape();
    let pulled = cos.neg().add_scalar(T::one()) * tape.constant(pos);
    let pushed = cos.relu() * tape.constant(neg);
    Ok((pulled + pushed).mean_all())
}

/// Identifier of one loss term in a [`LossReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Change,
    Sem,
    Sa,
    Recon,
    Trans,
}

/// Itemised training loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub l_change: f64,
    pub l_sem: f64,
    pub l_sa: f64,
    pub l_recon: f64,
    pub l_trans: f64,
    pub total: f64,
    pub active_terms: BTreeSet<LossTerm>,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_change", self.l_change),
            ("l_sem", self.l_sem),
            ("l_sa", self.l_sa),
            ("l_recon", self.l_recon),
            ("l_trans", self.l_trans),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Pre-weighted loss terms entering the total objective.
pub struct LossParts<'t, T: Scalar> {
    pub change: Var<'t, T>,
    pub sem: Option<Var<'t, T>>,
    pub sa: Option<Var<'t, T>>,
    pub recon: Option<Var<'t, T>>,
    pub trans: Option<Var<'t, T>>,
}

/// Combine the parts into the total objective.
///
/// The mask-supervised term is `change` for BCD and `change + sem + sa`
/// for SCD; the auxiliary terms enter scaled by their lambdas. Terms that
/// are absent — or weighted by an exact zero — contribute nothing to the
/// graph and are left out of `active_terms`.
pub fn loss_total<'t, T: Scalar>(
    parts: LossParts<'t, T>,
    weights: &LossWeights,
    task: Task,
) -> (Var<'t, T>, LossReport) {
    let mut active = BTreeSet::new();
    active.insert(LossTerm::Change);
    let mut total = parts.change;

    let mut l_sem = 0.0;
    let mut l_sa = 0.0;
    if task == Task::Scd {
        if let Some(sem) = parts.sem {
            total = total + sem;
            l_sem = sem.scalar().to_f64();
            active.insert(LossTerm::Sem);
        }
        if let Some(sa) = parts.sa {
            total = total + sa;
            l_sa = sa.scalar().to_f64();
            active.insert(LossTerm::Sa);
        }
    }

    let mut l_recon = 0.0;
    if let Some(recon) = parts.recon {
        l_recon = recon.scalar().to_f64();
        if weights.lambda1 != 0.0 {
            total = total + recon.scale(s::<T>(weights.lambda1));
            active.insert(LossTerm::Recon);
        }
    }
    let mut l_trans = 0.0;
    if let Some(trans) = parts.trans {
        l_trans = trans.scalar().to_f64();
        if weights.lambda2 != 0.0 {
            total = total + trans.scale(s::<T>(weights.lambda2));
            active.insert(LossTerm::Trans);
        }
    }

    let report = LossReport {
        l_change: parts.change.scalar().to_f64(),
        l_sem,
        l_sa,
        l_recon,
        l_trans,
        total: total.scalar().to_f64(),
        active_terms: active,
    };
    (total, report)
}

#[cfg(test)]
mod tests;

//! Tape-based computation graph.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Zip};

use super::store::{ParamId, ParamStore};
use super::{s, Scalar};

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Matmul(usize, usize),
    Bmm(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    SumAxis {
        a: usize,
        axis: usize,
        keep: bool,
    },
    SumAll(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSumExp {
        a: usize,
        axis: usize,
        keep: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    AvgPool2d {
        a: usize,
        k: usize,
    },
    UpsampleBilinear {
        a: usize,
        oh: usize,
        ow: usize,
    },
    NormalizeRows(usize),
    CosineRows(usize, usize),
    Detach(usize),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records one computation graph.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_cache: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
    by_param: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a parameter watched during the forward pass.
    pub fn for_param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.by_param.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Gradient with respect to an arbitrary node (inputs included).
    pub fn for_var(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_cache: RefCell::new(HashMap::new()),
        }
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, requires: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: usize) -> ArrayD<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Differentiable leaf (model inputs under gradient test, loss anchors).
    pub fn input(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Non-differentiable leaf (targets, masks, frozen embeddings).
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false, None)
    }

    /// Watch a parameter; repeated calls return the same node so shared
    /// weights accumulate gradient naturally.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&n) = self.param_cache.borrow().get(&id) {
            return Var { tape: self, id: n };
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true, Some(id));
        self.param_cache.borrow_mut().insert(id, v.id);
        v
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Reverse pass from a scalar node.
    ///
    /// Panics if `loss` is not a single-element tensor.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(ArrayD::from_elem(nodes[loss.id].value.raw_dim(), T::one()));

        for i in (0..=loss.id).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = backward_node(&nodes, i, &g);
            for (parent, contrib) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }

        let by_param = nodes
            .iter()
            .enumerate()
            .filter_map(|(n, node)| node.param.map(|p| (p, n)))
            .collect();
        Gradients { grads, by_param }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> ArrayD<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self) -> T {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "scalar() on shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn unary(self, value: ArrayD<T>, op: Op<T>) -> Var<'t, T> {
        let req = self.tape.requires(self.id);
        self.tape.push(value, op, req, None)
    }

    fn binary(self, other: Var<'t, T>, value: ArrayD<T>, op: Op<T>) -> Var<'t, T> {
        let req = self.tape.requires(self.id) || other.tape.requires(other.id);
        self.tape.push(value, op, req, None)
    }

    pub fn add(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = bin_broadcast(&self.value_ref(), &o.value_ref(), |a, b| a + b);
        self.binary(o, v, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = bin_broadcast(&self.value_ref(), &o.value_ref(), |a, b| a - b);
        self.binary(o, v, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = bin_broadcast(&self.value_ref(), &o.value_ref(), |a, b| a * b);
        self.binary(o, v, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = bin_broadcast(&self.value_ref(), &o.value_ref(), |a, b| a / b);
        self.binary(o, v, Op::Div(self.id, o.id))
    }

    fn value_ref(&self) -> ArrayD<T> {
        self.value()
    }

    pub fn neg(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x + c);
        self.unary(v, Op::AddScalar(self.id, c))
    }

    pub fn exp(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.ln());
        self.unary(v, Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.sqrt());
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn abs(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.abs());
        self.unary(v, Op::Abs(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.max(T::zero()));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn gelu(self) -> Var<'t, T> {
        let v = self.value().mapv(gelu_fwd);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    /// 2-D matrix product.
    pub fn matmul(self, o: Var<'t, T>) -> Var<'t, T> {
        let a = self.value().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = o.value().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let v = a.dot(&b).into_dyn();
        self.binary(o, v, Op::Matmul(self.id, o.id))
    }

    /// Batched 3-D matrix product: `[B,N,K] x [B,K,M] -> [B,N,M]`.
    pub fn bmm(self, o: Var<'t, T>) -> Var<'t, T> {
        let a = self.value().into_dimensionality::<Ix3>().expect("bmm lhs must be 3-D");
        let b = o.value().into_dimensionality::<Ix3>().expect("bmm rhs must be 3-D");
        let (ba, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bb, k2, m) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert_eq!(ba, bb, "bmm batch dims differ");
        assert_eq!(k, k2, "bmm inner dims differ");
        let mut out = ndarray::Array3::<T>::zeros((ba, n, m));
        for i in 0..ba {
            let prod = a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.binary(o, out.into_dyn(), Op::Bmm(self.id, o.id))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let v = self.value().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        self.unary(v, Op::Permute(self.id, axes.to_vec()))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let v = self
            .value()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn sum_axis(self, axis: usize, keep: bool) -> Var<'t, T> {
        let mut v = self.value().sum_axis(Axis(axis));
        if keep {
            v = v.insert_axis(Axis(axis));
        }
        self.unary(v, Op::SumAxis { a: self.id, axis, keep })
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let total: T = self.value().iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), total);
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum_all().scale(T::one() / s::<T>(n as f64))
    }

    pub fn mean_axis(self, axis: usize, keep: bool) -> Var<'t, T> {
        let n = self.shape()[axis];
        self.sum_axis(axis, keep).scale(T::one() / s::<T>(n as f64))
    }

    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let v = self
            .value()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.unary(v, Op::Slice { a: self.id, axis, start, len })
    }

    pub fn softmax(self, axis: usize) -> Var<'t, T> {
        let mut v = self.value();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
            lane.mapv_inplace(|x| (x - m).exp());
            let total: T = lane.iter().copied().sum();
            lane.mapv_inplace(|x| x / total);
        }
        self.unary(v, Op::Softmax { a: self.id, axis })
    }

    pub fn log_sum_exp(self, axis: usize, keep: bool) -> Var<'t, T> {
        let x = self.value();
        let mut out = x.map_axis(Axis(axis), |lane| {
            let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                return m;
            }
            let total: T = lane.iter().map(|&v| (v - m).exp()).sum();
            m + total.ln()
        });
        if keep {
            out = out.insert_axis(Axis(axis));
        }
        self.unary(out, Op::LogSumExp { a: self.id, axis, keep })
    }

    /// 2-D convolution over `[B,C,H,W]` with square kernel, stride and padding.
    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        let x = self.value();
        let wt = w.value();
        let v = conv2d_fwd(&x, &wt, b.map(|b| b.value()).as_ref(), stride, pad);
        let req = self.tape.requires(self.id)
            || w.tape.requires(w.id)
            || b.map(|b| b.tape.requires(b.id)).unwrap_or(false);
        self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
            req,
            None,
        )
    }

    /// Non-overlapping k×k average pooling over `[B,C,H,W]`.
    pub fn avg_pool2d(self, k: usize) -> Var<'t, T> {
        let x = self.value();
        let (bsz, c, h, w) = dims4(&x);
        assert!(h % k == 0 && w % k == 0, "avg_pool2d: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[bsz, c, oh, ow]));
        let inv = T::one() / s::<T>((k * k) as f64);
        for b in 0..bsz {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        for dy in 0..k {
                            for dx in 0..k {
                                acc = acc + x[[b, ch, oy * k + dy, ox * k + dx]];
                            }
                        }
                        out[[b, ch, oy, ox]] = acc * inv;
                    }
                }
            }
        }
        self.unary(out, Op::AvgPool2d { a: self.id, k })
    }

    /// Bilinear resampling of `[B,C,H,W]` to `oh x ow` (align-corners off).
    pub fn upsample_bilinear(self, oh: usize, ow: usize) -> Var<'t, T> {
        let x = self.value();
        let v = upsample_fwd(&x, oh, ow);
        self.unary(v, Op::UpsampleBilinear { a: self.id, oh, ow })
    }

    /// Rows (last axis) scaled to unit norm; all-zero rows stay zero.
    pub fn normalize_rows(self) -> Var<'t, T> {
        let x = self.value();
        let v = map_rows(&x, |row, out| {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                out.fill(T::zero());
            } else {
                for (o, &r) in out.iter_mut().zip(row) {
                    *o = r / n;
                }
            }
        });
        self.unary(v, Op::NormalizeRows(self.id))
    }

    /// Cosine similarity along the last axis; zero-norm rows yield 0.
    ///
    /// The value is clamped to `[-1, 1]` to guard against rounding; the
    /// gradient uses the unclamped expression.
    pub fn cosine_rows(self, o: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = o.value();
        assert_eq!(a.shape(), b.shape(), "cosine_rows shape mismatch");
        let v = cosine_fwd(&a, &b);
        self.binary(o, v, Op::CosineRows(self.id, o.id))
    }

    /// Copy of the value with the graph cut.
    pub fn detach(self) -> Var<'t, T> {
        let v = self.value();
        self.tape.push(v, Op::Detach(self.id), false, None)
    }
}

impl<'t, T: Scalar> std::ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}
impl<'t, T: Scalar> std::ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}
impl<'t, T: Scalar> std::ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}
impl<'t, T: Scalar> std::ops::Div for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(self, rhs)
    }
}
impl<'t, T: Scalar> std::ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

fn backward_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &ArrayD<T>) -> Vec<(usize, ArrayD<T>)> {
    let val = |n: usize| &nodes[n].value;
    match &nodes[i].op {
        Op::Leaf | Op::Detach(_) => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to_shape(g.clone(), val(*a).shape())),
            (*b, reduce_to_shape(g.clone(), val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to_shape(g.clone(), val(*a).shape())),
            (*b, reduce_to_shape(g.mapv(|x| -x), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let ga = bin_broadcast(g, val(*b), |g, b| g * b);
            let gb = bin_broadcast(g, val(*a), |g, a| g * a);
            vec![
                (*a, reduce_to_shape(ga, val(*a).shape())),
                (*b, reduce_to_shape(gb, val(*b).shape())),
            ]
        }
        Op::Div(a, b) => {
            let ga = bin_broadcast(g, val(*b), |g, b| g / b);
            let gb = {
                let num = bin_broadcast(g, val(*a), |g, a| g * a);
                bin_broadcast(&num, val(*b), |n, b| -n / (b * b))
            };
            vec![
                (*a, reduce_to_shape(ga, val(*a).shape())),
                (*b, reduce_to_shape(gb, val(*b).shape())),
            ]
        }
        Op::Neg(a) => vec![(*a, g.mapv(|x| -x))],
        Op::Scale(a, c) => vec![(*a, g.mapv(|x| x * *c))],
        Op::AddScalar(a, _) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, g * &nodes[i].value)],
        Op::Ln(a) => vec![(*a, bin_broadcast(g, val(*a), |g, x| g / x))],
        Op::Sqrt(a) => {
            let y = &nodes[i].value;
            let two = s::<T>(2.0);
            vec![(*a, Zip::from(g).and(y).map_collect(|&g, &y| g / (two * y)))]
        }
        Op::Abs(a) => {
            let x = val(*a);
            vec![(*a, Zip::from(g).and(x).map_collect(|&g, &x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }))]
        }
        Op::Relu(a) => {
            let x = val(*a);
            vec![(*a, Zip::from(g).and(x).map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() }))]
        }
        Op::Gelu(a) => {
            let x = val(*a);
            vec![(*a, Zip::from(g).and(x).map_collect(|&g, &x| g * gelu_bwd(x)))]
        }
        Op::Tanh(a) => {
            let y = &nodes[i].value;
            vec![(*a, Zip::from(g).and(y).map_collect(|&g, &y| g * (T::one() - y * y)))]
        }
        Op::Matmul(a, b) => {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let av = val(*a).view().into_dimensionality::<Ix2>().unwrap();
            let bv = val(*b).view().into_dimensionality::<Ix2>().unwrap();
            let ga = g2.dot(&bv.t()).into_dyn();
            let gb = av.t().dot(&g2).into_dyn();
            vec![(*a, ga), (*b, gb)]
        }
        Op::Bmm(a, b) => {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let av = val(*a).view().into_dimensionality::<Ix3>().unwrap();
            let bv = val(*b).view().into_dimensionality::<Ix3>().unwrap();
            let batch = av.shape()[0];
            let mut ga = ndarray::Array3::<T>::zeros((batch, av.shape()[1], av.shape()[2]));
            let mut gb = ndarray::Array3::<T>::zeros((batch, bv.shape()[1], bv.shape()[2]));
            for n in 0..batch {
                let gi = g3.index_axis(Axis(0), n);
                ga.index_axis_mut(Axis(0), n)
                    .assign(&gi.dot(&bv.index_axis(Axis(0), n).t()));
                gb.index_axis_mut(Axis(0), n)
                    .assign(&av.index_axis(Axis(0), n).t().dot(&gi));
            }
            vec![(*a, ga.into_dyn()), (*b, gb.into_dyn())]
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0usize; axes.len()];
            for (to, &from) in axes.iter().enumerate() {
                inverse[from] = to;
            }
            let ga = g.clone().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned();
            vec![(*a, ga)]
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            vec![(*a, g.clone().into_shape_with_order(IxDyn(&shape)).unwrap())]
        }
        Op::SumAxis { a, axis, keep } => {
            let target = val(*a).shape().to_vec();
            let gk = if *keep {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(*axis))
            };
            let ga = gk.broadcast(IxDyn(&target)).unwrap().to_owned();
            vec![(*a, ga)]
        }
        Op::SumAll(a) => {
            let gs = *g.iter().next().unwrap();
            vec![(*a, ArrayD::from_elem(val(*a).raw_dim(), gs))]
        }
        Op::Concat { parts, axis } => {
            let mut out = Vec::with_capacity(parts.len());
            let mut start = 0usize;
            for &p in parts {
                let len = val(p).shape()[*axis];
                let gp = g
                    .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                    .to_owned();
                out.push((p, gp));
                start += len;
            }
            out
        }
        Op::Slice { a, axis, start, len } => {
            let mut ga = ArrayD::<T>::zeros(val(*a).raw_dim());
            ga.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + *len))
                .assign(g);
            vec![(*a, ga)]
        }
        Op::Softmax { a, axis } => {
            let y = &nodes[i].value;
            let gy = g * y;
            let dot = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
            let dot_b = dot.broadcast(y.raw_dim()).unwrap().to_owned();
            let ga = Zip::from(y)
                .and(g)
                .and(&dot_b)
                .map_collect(|&y, &g, &d| y * (g - d));
            vec![(*a, ga)]
        }
        Op::LogSumExp { a, axis, keep } => {
            let x = val(*a);
            let gk = if *keep {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(*axis))
            };
            let gb = gk.broadcast(x.raw_dim()).unwrap().to_owned();
            // softmax(x) along axis
            let mut sm = x.clone();
            for mut lane in sm.lanes_mut(Axis(*axis)) {
                let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
                lane.mapv_inplace(|v| (v - m).exp());
                let total: T = lane.iter().copied().sum();
                lane.mapv_inplace(|v| v / total);
            }
            vec![(*a, &sm * &gb)]
        }
        Op::Conv2d { x, w, b, stride, pad } => conv2d_bwd(val(*x), val(*w), *b, *x, *w, g, *stride, *pad),
        Op::AvgPool2d { a, k } => {
            let x = val(*a);
            let (bsz, c, h, w) = dims4(x);
            let k = *k;
            let inv = T::one() / s::<T>((k * k) as f64);
            let mut ga = ArrayD::<T>::zeros(x.raw_dim());
            for bi in 0..bsz {
                for ch in 0..c {
                    for oy in 0..h / k {
                        for ox in 0..w / k {
                            let gv = g[[bi, ch, oy, ox]] * inv;
                            for dy in 0..k {
                                for dx in 0..k {
                                    ga[[bi, ch, oy * k + dy, ox * k + dx]] = gv;
                                }
                            }
                        }
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::UpsampleBilinear { a, oh, ow } => {
            let x = val(*a);
            vec![(*a, upsample_bwd(x, g, *oh, *ow))]
        }
        Op::NormalizeRows(a) => {
            let x = val(*a);
            let y = &nodes[i].value;
            let mut ga = ArrayD::<T>::zeros(x.raw_dim());
            let d = x.shape()[x.ndim() - 1];
            let xs = x.as_slice().unwrap();
            let ys = y.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let gas = ga.as_slice_mut().unwrap();
            for r in 0..xs.len() / d {
                let (xr, yr, gr) = (&xs[r * d..(r + 1) * d], &ys[r * d..(r + 1) * d], &gs[r * d..(r + 1) * d]);
                let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n == T::zero() {
                    continue;
                }
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for j in 0..d {
                    gas[r * d + j] = (gr[j] - yr[j] * dot) / n;
                }
            }
            vec![(*a, ga)]
        }
        Op::CosineRows(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let d = av.shape()[av.ndim() - 1];
            let asl = av.as_slice().unwrap();
            let bsl = bv.as_slice().unwrap();
            let gsl = g.as_slice().unwrap();
            let mut ga = vec![T::zero(); asl.len()];
            let mut gb = vec![T::zero(); bsl.len()];
            for r in 0..asl.len() / d {
                let (ar, br) = (&asl[r * d..(r + 1) * d], &bsl[r * d..(r + 1) * d]);
                let na = ar.iter().map(|&v| v * v).sum::<T>().sqrt();
                let nb = br.iter().map(|&v| v * v).sum::<T>().sqrt();
                if na == T::zero() || nb == T::zero() {
                    continue;
                }
                let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
                let c = dot / (na * nb);
                let gr = gsl[r];
                for j in 0..d {
                    ga[r * d + j] = gr * (br[j] / (na * nb) - c * ar[j] / (na * na));
                    gb[r * d + j] = gr * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                }
            }
            vec![
                (*a, ArrayD::from_shape_vec(av.raw_dim(), ga).unwrap()),
                (*b, ArrayD::from_shape_vec(bv.raw_dim(), gb).unwrap()),
            ]
        }
    }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = s::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = s::<T>(0.044715);
    let u = c * (x + a * x * x * x);
    s::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = s::<T>(0.797_884_560_802_865_4);
    let a = s::<T>(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = s::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + s::<T>(3.0) * a * x * x)
}

fn dims4<T: Scalar>(x: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "expected 4-D tensor, got {:?}", sh);
    (sh[0], sh[1], sh[2], sh[3])
}

/// Numpy-style broadcast of a binary elementwise op.
fn bin_broadcast<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    if a.shape() == b.shape() {
        return Zip::from(a).and(b).map_collect(|&x, &y| f(x, y));
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("incompatible broadcast {:?} vs {:?}", a.shape(), b.shape()));
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_to_shape<T: Scalar>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}

fn map_rows<T: Scalar>(x: &ArrayD<T>, f: impl Fn(&[T], &mut [T])) -> ArrayD<T> {
    let d = x.shape()[x.ndim() - 1];
    let xs = x.as_slice().expect("contiguous");
    let mut out = vec![T::zero(); xs.len()];
    for r in 0..xs.len() / d {
        f(&xs[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).unwrap()
}

fn cosine_fwd<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    let d = a.shape()[a.ndim() - 1];
    let asl = a.as_slice().expect("contiguous");
    let bsl = b.as_slice().expect("contiguous");
    let rows = asl.len() / d;
    let mut out = vec![T::zero(); rows];
    for r in 0..rows {
        let (ar, br) = (&asl[r * d..(r + 1) * d], &bsl[r * d..(r + 1) * d]);
        let na = ar.iter().map(|&v| v * v).sum::<T>().sqrt();
        let nb = br.iter().map(|&v| v * v).sum::<T>().sqrt();
        if na == T::zero() || nb == T::zero() {
            continue;
        }
        let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        out[r] = (dot / (na * nb)).min(T::one()).max(-T::one());
    }
    let shape = &a.shape()[..a.ndim() - 1];
    ArrayD::from_shape_vec(IxDyn(shape), out).unwrap()
}

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(
    x: &ndarray::ArrayViewD<'_, T>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<T> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut cols = ndarray::Array2::<T>::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[b, ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_fwd<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let (bsz, c, h, wd) = dims4(x);
    let (o, cw, kh, kw) = dims4(w);
    assert_eq!(c, cw, "conv2d channel mismatch");
    assert_eq!(kh, kw, "conv2d expects square kernels");
    let k = kh;
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let w2 = w.view().into_shape_with_order((o, c * k * k)).unwrap();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[bsz, o, oh, ow]));
    for b in 0..bsz {
        let cols = im2col(&x.view(), b, c, h, wd, k, stride, pad);
        let prod = w2.dot(&cols); // [O, OH*OW]
        let mut out_b = out.index_axis_mut(Axis(0), b);
        let mut out2 = out_b.view_mut().into_shape_with_order((o, oh * ow)).unwrap();
        out2.assign(&prod);
        if let Some(bias) = bias {
            let bias = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for oc in 0..o {
                out2.row_mut(oc).mapv_inplace(|v| v + bias[oc]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias_id: Option<usize>,
    x_id: usize,
    w_id: usize,
    g: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> Vec<(usize, ArrayD<T>)> {
    let (bsz, c, h, wd) = dims4(x);
    let (o, _, k, _) = dims4(w);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let w2 = w.view().into_shape_with_order((o, c * k * k)).unwrap();
    let mut gw = ndarray::Array2::<T>::zeros((o, c * k * k));
    let mut gx = ArrayD::<T>::zeros(x.raw_dim());

    for b in 0..bsz {
        let g_b = g.index_axis(Axis(0), b);
        let g2 = g_b.into_shape_with_order((o, oh * ow)).unwrap();
        let cols = im2col(&x.view(), b, c, h, wd, k, stride, pad);
        gw = gw + g2.dot(&cols.t());
        let gcols = w2.t().dot(&g2); // [C*k*k, OH*OW]
        // col2im scatter-add
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            gx[[b, ch, iy as usize, ix as usize]] =
                                gx[[b, ch, iy as usize, ix as usize]] + gcols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }

    let mut result = vec![
        (x_id, gx),
        (w_id, gw.into_shape_with_order(IxDyn(w.shape())).unwrap()),
    ];
    if let Some(bid) = bias_id {
        let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        result.push((bid, gb.into_dyn()));
    }
    result
}

/// Source coordinate weights for align-corners-off bilinear sampling.
fn bilinear_axis(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = (floor.max(0.0) as usize).min(input - 1);
            let i1 = ((floor + 1.0).max(0.0) as usize).min(input - 1);
            (i0, i1, frac.clamp(0.0, 1.0))
        })
        .collect()
}

fn upsample_fwd<T: Scalar>(x: &ArrayD<T>, oh: usize, ow: usize) -> ArrayD<T> {
    let (bsz, c, h, w) = dims4(x);
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut out = ArrayD::<T>::zeros(IxDyn(&[bsz, c, oh, ow]));
    for b in 0..bsz {
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let wy1 = s::<T>(fy);
                let wy0 = T::one() - wy1;
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let wx1 = s::<T>(fx);
                    let wx0 = T::one() - wx1;
                    out[[b, ch, oy, ox]] = wy0 * wx0 * x[[b, ch, y0, x0]]
                        + wy0 * wx1 * x[[b, ch, y0, x1]]
                        + wy1 * wx0 * x[[b, ch, y1, x0]]
                        + wy1 * wx1 * x[[b, ch, y1, x1]];
                }
            }
        }
    }
    out
}

fn upsample_bwd<T: Scalar>(x: &ArrayD<T>, g: &ArrayD<T>, oh: usize, ow: usize) -> ArrayD<T> {
    let (bsz, c, h, w) = dims4(x);
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut gx = ArrayD::<T>::zeros(x.raw_dim());
    for b in 0..bsz {
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let wy1 = s::<T>(fy);
                let wy0 = T::one() - wy1;
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let wx1 = s::<T>(fx);
                    let wx0 = T::one() - wx1;
                    let gv = g[[b, ch, oy, ox]];
                    gx[[b, ch, y0, x0]] = gx[[b, ch, y0, x0]] + wy0 * wx0 * gv;
                    gx[[b, ch, y0, x1]] = gx[[b, ch, y0, x1]] + wy0 * wx1 * gv;
                    gx[[b, ch, y1, x0]] = gx[[b, ch, y1, x0]] + wy1 * wx0 * gv;
                    gx[[b, ch, y1, x1]] = gx[[b, ch, y1, x1]] + wy1 * wx1 * gv;
                }
            }
        }
    }
    gx
}

/// Concatenate along `axis`.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<ArrayD<T>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<ArrayViewD<'_, T>> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let req = parts.iter().any(|p| tape.requires(p.id));
    tape.push(
        out.as_standard_layout().to_owned(),
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        req,
        None,
    )
}

/// Layer normalization over the last axis with optional affine terms.
pub fn layer_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Option<Var<'t, T>>,
    beta: Option<Var<'t, T>>,
    eps: f64,
) -> Var<'t, T> {
    let axis = x.shape().len() - 1;
    let mean = x.mean_axis(axis, true);
    let centered = x - mean;
    let var = (centered * centered).mean_axis(axis, true);
    let std = var.add_scalar(s::<T>(eps)).sqrt();
    let mut y = centered / std;
    if let Some(g) = gamma {
        y = y * g;
    }
    if let Some(b) = beta {
        y = y + b;
    }
    y
}

//! Reverse-mode automatic differentiation over [`Mat`].
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward`]
//! walks the record once in reverse and accumulates gradients. Model code
//! binds its parameters with [`Tape::param`] and reads their gradients back
//! by name after the pass. The op set is deliberately small: matrix products,
//! elementwise maps, row softmax with an exclusion mask, layer norm, gathers
//! and group reductions, plus fused loss heads.

use crate::mat::{self, Mat};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<S: Scalar> {
    value: Mat<S>,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// A . B^T
    MatmulTb { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Broadcast a 1-by-C row over every row of `a`.
    AddRow { a: Var, row: Var },
    Scale { a: Var, k: S },
    AddConst { a: Var },
    /// Elementwise product with a constant matrix (dropout masks, pair masks).
    MulConst { a: Var, m: Mat<S> },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    /// Row-wise softmax; `allowed` (row-major, same shape) restricts each row
    /// to a subset of positions, the rest are exactly zero in the output.
    SoftmaxRows { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, eps: S },
    L2NormRows { a: Var, eps: S },
    GatherRows { a: Var, ids: Vec<usize> },
    GatherCols { a: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    /// Row g of the output is the mean of `a`'s rows listed in `groups[g]`.
    MeanGroups { a: Var, groups: Vec<Vec<usize>> },
    /// Row g is the elementwise max over `a`'s rows in `groups[g]`;
    /// `argmax[g * cols + c]` remembers the winning source row.
    MaxGroups { a: Var, argmax: Vec<usize> },
    SumAll { a: Var },
    MeanAll { a: Var },
    /// Mean negative log-likelihood of `targets` under row softmax, over rows
    /// with `active` set. `probs` caches the softmax for the backward pass.
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Mat<S>,
    },
    /// Mean binary cross-entropy on logits, optional positive-class weight.
    BceWithLogits {
        logits: Var,
        targets: Mat<S>,
        pos_weight: S,
    },
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, Var)>,
    param_index: std::collections::BTreeMap<String, Var>,
}

pub struct Grads<S> {
    by_node: Vec<Option<Mat<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn of(&self, v: Var) -> Option<&Mat<S>> {
        self.by_node[v.0].as_ref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: std::collections::BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that participates in the forward pass only.
    pub fn constant(&mut self, m: Mat<S>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// A leaf whose gradient is collected under `name` after backward.
    /// Binding the same name again returns the first var, so parameters can
    /// be bound freely at every use site.
    pub fn param(&mut self, name: &str, m: &Mat<S>) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            debug_assert_eq!(self.value(v).shape(), m.shape(), "rebound {name} with new shape");
            return v;
        }
        let v = self.push(m.clone(), Op::Leaf);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = mat::matmul(self.value(a), self.value(b));
        self.push(value, Op::Matmul { a, b })
    }

    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let value = mat::matmul_tb(self.value(a), self.value(b));
        self.push(value, Op::MatmulTb { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), -S::one());
        self.push(value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::Mul { a, b })
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row expects a 1-by-C row");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut value = va.clone();
        for i in 0..value.rows() {
            let r = vr.row(0).to_vec();
            for (o, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(value, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale { a, k })
    }

    pub fn add_const(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddConst { a })
    }

    pub fn mul_const(&mut self, a: Var, m: Mat<S>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), m.shape(), "mul_const shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(m.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::MulConst { a, m })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(mat::gelu);
        self.push(value, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(mat::sigmoid);
        self.push(value, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(value, Op::Relu { a })
    }

    pub fn softmax_rows(&mut self, a: Var, allowed: Option<Vec<bool>>) -> Var {
        let va = self.value(a);
        if let Some(m) = &allowed {
            assert_eq!(m.len(), va.len(), "softmax mask length mismatch");
        }
        let mut value = va.clone();
        let cols = value.cols();
        for i in 0..value.rows() {
            let row_mask = allowed.as_ref().map(|m| &m[i * cols..(i + 1) * cols]);
            mat::softmax_row_masked(value.row_mut(i), row_mask);
        }
        self.push(value, Op::SoftmaxRows { a })
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let eps = S::of(1e-5);
        let (va, vg, vb) = (self.value(a), self.value(gamma), self.value(beta));
        assert_eq!(vg.rows(), 1);
        assert_eq!(vb.rows(), 1);
        assert_eq!(va.cols(), vg.cols());
        assert_eq!(va.cols(), vb.cols());
        let mut value = Mat::zeros(va.rows(), va.cols());
        let mut norm = vec![S::zero(); va.cols()];
        for i in 0..va.rows() {
            mat::layer_norm_row(va.row(i), eps, &mut norm);
            for j in 0..va.cols() {
                *value.at_mut(i, j) = norm[j] * vg.at(0, j) + vb.at(0, j);
            }
        }
        self.push(value, Op::LayerNorm { a, gamma, beta, eps })
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let eps = S::of(1e-8);
        let va = self.value(a);
        let mut value = va.clone();
        for i in 0..value.rows() {
            let n = mat::dot(va.row(i), va.row(i)).sqrt().max(eps);
            for x in value.row_mut(i) {
                *x = *x / n;
            }
        }
        self.push(value, Op::L2NormRows { a, eps })
    }

    pub fn gather_rows(&mut self, a: Var, ids: Vec<usize>) -> Var {
        let va = self.value(a);
        let mut value = Mat::zeros(ids.len(), va.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(va.row(id));
        }
        self.push(value, Op::GatherRows { a, ids })
    }

    pub fn gather_cols(&mut self, a: Var, ids: Vec<usize>) -> Var {
        let va = self.value(a);
        let mut value = Mat::zeros(va.rows(), ids.len());
        for i in 0..va.rows() {
            for (j, &id) in ids.iter().enumerate() {
                *value.at_mut(i, j) = va.at(i, id);
            }
        }
        self.push(value, Op::GatherCols { a, ids })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut value = Mat::zeros(va.rows(), len);
        for i in 0..va.rows() {
            value
                .row_mut(i)
                .copy_from_slice(&va.row(i)[start..start + len]);
        }
        self.push(value, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let vp = self.value(p);
                assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
                let w = vp.cols();
                value.row_mut(i)[off..off + w].copy_from_slice(vp.row(i));
                off += w;
            }
        }
        self.push(value, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut r = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows col mismatch");
            for i in 0..vp.rows() {
                value.row_mut(r).copy_from_slice(vp.row(i));
                r += 1;
            }
        }
        self.push(value, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn mean_groups(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let va = self.value(a);
        let mut value = Mat::zeros(groups.len(), va.cols());
        for (g, group) in groups.iter().enumerate() {
            assert!(!group.is_empty(), "mean_groups with empty group");
            for &r in group {
                let src = va.row(r).to_vec();
                for (o, &x) in value.row_mut(g).iter_mut().zip(&src) {
                    *o += x;
                }
            }
            let inv = S::of(1.0 / group.len() as f64);
            for x in value.row_mut(g) {
                *x = *x * inv;
            }
        }
        self.push(value, Op::MeanGroups { a, groups })
    }

    pub fn max_groups(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut value = Mat::zeros(groups.len(), cols);
        let mut argmax = vec![0usize; groups.len() * cols];
        for (g, group) in groups.iter().enumerate() {
            assert!(!group.is_empty(), "max_groups with empty group");
            for c in 0..cols {
                let mut best = S::neg_infinity();
                let mut best_row = group[0];
                for &r in group {
                    let x = va.at(r, c);
                    if x > best {
                        best = x;
                        best_row = r;
                    }
                }
                *value.at_mut(g, c) = best;
                argmax[g * cols + c] = best_row;
            }
        }
        self.push(value, Op::MaxGroups { a, argmax })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = S::zero();
        for &x in self.value(a).data() {
            acc += x;
        }
        self.push(Mat::scalar(acc), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = S::of(va.len() as f64);
        let mut acc = S::zero();
        for &x in va.data() {
            acc += x;
        }
        self.push(Mat::scalar(acc / n), Op::MeanAll { a })
    }

    /// Mean NLL of `targets[i]` under a softmax over row i, averaged over rows
    /// with `active[i]`; inactive rows contribute nothing.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Vec<usize>, active: Vec<bool>) -> Var {
        let vl = self.value(logits);
        assert_eq!(targets.len(), vl.rows());
        assert_eq!(active.len(), vl.rows());
        let n_active = active.iter().filter(|&&a| a).count();
        assert!(n_active > 0, "cross_entropy_rows with no active rows");
        let mut probs = vl.clone();
        let mut total = S::zero();
        for i in 0..vl.rows() {
            mat::softmax_row_masked(probs.row_mut(i), None);
            if active[i] {
                let p = probs.at(i, targets[i]);
                total += -(p.max(S::of(1e-300))).ln();
            }
        }
        let value = Mat::scalar(total / S::of(n_active as f64));
        self.push(
            value,
            Op::CrossEntropyRows {
                logits,
                targets,
                active,
                probs,
            },
        )
    }

    /// Mean binary cross-entropy over all elements of `logits` against
    /// constant `targets` in [0, 1]; positives weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat<S>, pos_weight: S) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "bce shape mismatch");
        let mut total = S::zero();
        for (&z, &t) in vl.data().iter().zip(targets.data()) {
            total += pos_weight * t * softplus(-z) + (S::one() - t) * softplus(z);
        }
        let value = Mat::scalar(total / S::of(vl.len() as f64));
        self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            },
        )
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; parameter
    /// gradients are read out with [`Tape::param_grads`].
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(
            self.nodes[loss.0].value.shape(),
            (1, 1),
            "backward expects a scalar loss"
        );
        let mut by_node: Vec<Option<Mat<S>>> = vec![None; self.nodes.len()];
        by_node[loss.0] = Some(Mat::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = by_node[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g, &mut by_node);
            by_node[idx] = Some(g);
        }
        Grads { by_node }
    }

    /// Gradients of every bound parameter, zero-filled when a parameter did
    /// not influence the loss.
    pub fn param_grads(&self, grads: &Grads<S>) -> Vec<(String, Mat<S>)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .of(*v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.value(*v).rows(), self.value(*v).cols()));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&self, idx: usize, g: &Mat<S>, by_node: &mut [Option<Mat<S>>]) {
        let add_to = |by_node: &mut [Option<Mat<S>>], v: Var, delta: Mat<S>| {
            match &mut by_node[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let da = mat::matmul_tb(g, self.value(*b));
                let mut db = Mat::zeros(self.value(*a).cols(), g.cols());
                mat::matmul_ta_acc(self.value(*a), g, &mut db, S::one());
                add_to(by_node, *a, da);
                add_to(by_node, *b, db);
            }
            Op::MatmulTb { a, b } => {
                let da = mat::matmul(g, self.value(*b));
                let mut db = Mat::zeros(g.cols(), self.value(*a).cols());
                mat::matmul_ta_acc(g, self.value(*a), &mut db, S::one());
                add_to(by_node, *a, da);
                add_to(by_node, *b, db);
            }
            Op::Add { a, b } => {
                add_to(by_node, *a, g.clone());
                add_to(by_node, *b, g.clone());
            }
            Op::Sub { a, b } => {
                add_to(by_node, *a, g.clone());
                add_to(by_node, *b, g.map(|x| -x));
            }
            Op::Mul { a, b } => {
                let da = hadamard(g, self.value(*b));
                let db = hadamard(g, self.value(*a));
                add_to(by_node, *a, da);
                add_to(by_node, *b, db);
            }
            Op::AddRow { a, row } => {
                add_to(by_node, *a, g.clone());
                let mut dr = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &x) in dr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                add_to(by_node, *row, dr);
            }
            Op::Scale { a, k } => {
                add_to(by_node, *a, g.map(|x| x * *k));
            }
            Op::AddConst { a } => {
                add_to(by_node, *a, g.clone());
            }
            Op::MulConst { a, m } => {
                add_to(by_node, *a, hadamard(g, m));
            }
            Op::Gelu { a } => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gx, &x)| gx * mat::gelu_deriv(x))
                    .collect();
                add_to(by_node, *a, Mat::from_vec(g.rows(), g.cols(), data));
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[idx].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gx, &s)| gx * s * (S::one() - s))
                    .collect();
                add_to(by_node, *a, Mat::from_vec(g.rows(), g.cols(), data));
            }
            Op::Relu { a } => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gx, &x)| if x > S::zero() { gx } else { S::zero() })
                    .collect();
                add_to(by_node, *a, Mat::from_vec(g.rows(), g.cols(), data));
            }
            Op::SoftmaxRows { a } => {
                let y = &self.nodes[idx].value;
                let mut da = Mat::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dotted = mat::dot(g.row(i), y.row(i));
                    for j in 0..g.cols() {
                        *da.at_mut(i, j) = y.at(i, j) * (g.at(i, j) - dotted);
                    }
                }
                add_to(by_node, *a, da);
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let va = self.value(*a);
                let vg = self.value(*gamma);
                let cols = va.cols();
                let n = S::of(cols as f64);
                let mut da = Mat::zeros(va.rows(), cols);
                let mut dgamma = Mat::zeros(1, cols);
                let mut dbeta = Mat::zeros(1, cols);
                let mut xhat = vec![S::zero(); cols];
                for i in 0..va.rows() {
                    mat::layer_norm_row(va.row(i), *eps, &mut xhat);
                    let mut mean = S::zero();
                    let mut var = S::zero();
                    for &x in va.row(i) {
                        mean += x;
                    }
                    mean = mean / n;
                    for &x in va.row(i) {
                        let d = x - mean;
                        var += d * d;
                    }
                    var = var / n;
                    let inv_std = (var + *eps).sqrt().recip();

                    let mut mean_gy = S::zero();
                    let mut mean_gy_xhat = S::zero();
                    for j in 0..cols {
                        let gy = g.at(i, j) * vg.at(0, j);
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat[j];
                        *dgamma.at_mut(0, j) += g.at(i, j) * xhat[j];
                        *dbeta.at_mut(0, j) += g.at(i, j);
                    }
                    mean_gy = mean_gy / n;
                    mean_gy_xhat = mean_gy_xhat / n;
                    for j in 0..cols {
                        let gy = g.at(i, j) * vg.at(0, j);
                        *da.at_mut(i, j) = (gy - mean_gy - xhat[j] * mean_gy_xhat) * inv_std;
                    }
                }
                add_to(by_node, *a, da);
                add_to(by_node, *gamma, dgamma);
                add_to(by_node, *beta, dbeta);
            }
            Op::L2NormRows { a, eps } => {
                let va = self.value(*a);
                let y = &self.nodes[idx].value;
                let mut da = Mat::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let n = mat::dot(va.row(i), va.row(i)).sqrt();
                    if n >= *eps {
                        let gy = mat::dot(g.row(i), y.row(i));
                        for j in 0..va.cols() {
                            *da.at_mut(i, j) = (g.at(i, j) - y.at(i, j) * gy) / n;
                        }
                    } else {
                        for j in 0..va.cols() {
                            *da.at_mut(i, j) = g.at(i, j) / *eps;
                        }
                    }
                }
                add_to(by_node, *a, da);
            }
            Op::GatherRows { a, ids } => {
                let va = self.value(*a);
                let mut da = Mat::zeros(va.rows(), va.cols());
                for (i, &id) in ids.iter().enumerate() {
                    let src = g.row(i).to_vec();
                    for (o, &x) in da.row_mut(id).iter_mut().zip(&src) {
                        *o += x;
                    }
                }
                add_to(by_node, *a, da);
            }
            Op::GatherCols { a, ids } => {
                let va = self.value(*a);
                let mut da = Mat::zeros(va.rows(), va.cols());
                for i in 0..g.rows() {
                    for (j, &id) in ids.iter().enumerate() {
                        *da.at_mut(i, id) += g.at(i, j);
                    }
                }
                add_to(by_node, *a, da);
            }
            Op::SliceCols { a, start } => {
                let va = self.value(*a);
                let mut da = Mat::zeros(va.rows(), va.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        *da.at_mut(i, start + j) = g.at(i, j);
                    }
                }
                add_to(by_node, *a, da);
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Mat::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    add_to(by_node, p, dp);
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut r = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    let mut dp = Mat::zeros(h, g.cols());
                    for i in 0..h {
                        dp.row_mut(i).copy_from_slice(g.row(r + i));
                    }
                    add_to(by_node, p, dp);
                    r += h;
                }
            }
            Op::MeanGroups { a, groups } => {
                let va = self.value(*a);
                let mut da = Mat::zeros(va.rows(), va.cols());
                for (gi, group) in groups.iter().enumerate() {
                    let inv = S::of(1.0 / group.len() as f64);
                    for &r in group {
                        for j in 0..va.cols() {
                            *da.at_mut(r, j) += g.at(gi, j) * inv;
                        }
                    }
                }
                add_to(by_node, *a, da);
            }
            Op::MaxGroups { a, argmax } => {
                let va = self.value(*a);
                let cols = va.cols();
                let mut da = Mat::zeros(va.rows(), cols);
                for gi in 0..g.rows() {
                    for j in 0..cols {
                        let r = argmax[gi * cols + j];
                        *da.at_mut(r, j) += g.at(gi, j);
                    }
                }
                add_to(by_node, *a, da);
            }
            Op::SumAll { a } => {
                let va = self.value(*a);
                let gs = g.item();
                add_to(by_node, *a, Mat::from_fn(va.rows(), va.cols(), |_, _| gs));
            }
            Op::MeanAll { a } => {
                let va = self.value(*a);
                let gs = g.item() / S::of(va.len() as f64);
                add_to(by_node, *a, Mat::from_fn(va.rows(), va.cols(), |_, _| gs));
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                active,
                probs,
            } => {
                let n_active = active.iter().filter(|&&a| a).count();
                let inv = g.item() / S::of(n_active as f64);
                let mut da = Mat::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    if !active[i] {
                        continue;
                    }
                    for j in 0..probs.cols() {
                        let onehot = if j == targets[i] { S::one() } else { S::zero() };
                        *da.at_mut(i, j) = (probs.at(i, j) - onehot) * inv;
                    }
                }
                add_to(by_node, *logits, da);
            }
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            } => {
                let vl = self.value(*logits);
                let inv = g.item() / S::of(vl.len() as f64);
                let data = vl
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| {
                        let s = mat::sigmoid(z);
                        (*pos_weight * t * (s - S::one()) + (S::one() - t) * s) * inv
                    })
                    .collect();
                add_to(by_node, *logits, Mat::from_vec(vl.rows(), vl.cols(), data));
            }
        }
    }
}

#[inline]
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

fn hadamard<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

//! Reverse-mode differentiation over an append-only node list.
//!
//! Every node stores its forward value. Nodes are pushed in evaluation
//! order, so parents always precede children and a single reverse sweep
//! visits each node after all of its consumers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::locality::PriorKind;
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulConst(Var, Vec<T>),
    AddConst(Var),
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// normalized input and per-row reciprocal std
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    TileCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    CosineRows(Var, Var, T),
    Locality {
        sigma: Var,
        dist: Vec<T>,
        kind: PriorKind,
    },
    StraightThrough(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient tape. Build a forward pass with the op methods, then call
/// [`Tape::backward`] once on a scalar output.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the leaves that required them, keyed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / core::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        let value = value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf. Gradients are collected iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a gradient-free leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut value = t;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "{op} expects a 2-D tensor, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_bt")?;
        let (n, k2) = self.mat_dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_bt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMulBt(a, b),
            ng,
            "matmul_bt",
        )
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|&x| x * c).collect())?;
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng, "scale")
    }

    /// `x[rows×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        if vb.len() != n {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(vb.data()).for_each(|(a, &b)| *a += b);
        }
        let t = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        self.push(t, Op::AddRow(x, bias), ng, "add_row")
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        same_shape("mul_const", self.value(x), c)?;
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::MulConst(x, c.data().to_vec()), ng, "mul_const")
    }

    /// Elementwise sum with a constant of identical shape. The constant may
    /// hold large negative entries used as attention masks.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        same_shape("add_const", self.value(x), c)?;
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::AddConst(x), ng, "add_const")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut out = vec![T::zero(); vx.len()];
        kernels::softmax_rows(vx.data(), vx.cols(), &mut out);
        let t = Tensor::new(vx.shape(), out)?;
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng, "softmax")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(
            vx.shape(),
            vx.data().iter().map(|&v| gelu_parts(v).0).collect(),
        )?;
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(
            vx.shape(),
            vx.data()
                .iter()
                .map(|&v| T::one() / (T::one() + (-v).exp()))
                .collect(),
        )?;
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng, "sigmoid")
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::dim(
                "layer_norm",
                vx.shape(),
                self.value(gain).shape(),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_n = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); vx.len()];
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = Vec::with_capacity(vx.rows());
        for (r, row) in vx.data().chunks_exact(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// Selects rows of the `rows × cols` view; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(vx.row(i));
        }
        let t = Tensor::new(&[idx.len(), cols], data)?;
        let ng = self.ng(x);
        self.push(t, Op::GatherRows(x, idx.to_vec()), ng, "gather_rows")
    }

    /// Stacks the `rows × cols` views of every input (equal `cols`).
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        for &v in xs {
            let vv = self.value(v);
            if vv.cols() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(*first).shape(),
                    vv.shape(),
                ));
            }
            data.extend_from_slice(vv.data());
        }
        let rows = data.len() / cols;
        let t = Tensor::new(&[rows, cols], data)?;
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(t, Op::ConcatRows(xs.to_vec()), ng, "concat_rows")
    }

    /// `[m×k] -> [m×(k·reps)]` by repeating each row horizontally.
    pub fn tile_cols(&mut self, x: Var, reps: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, k) = (vx.rows(), vx.cols());
        let mut data = Vec::with_capacity(m * k * reps);
        for r in 0..m {
            for _ in 0..reps {
                data.extend_from_slice(vx.row(r));
            }
        }
        let t = Tensor::new(&[m, k * reps], data)?;
        let ng = self.ng(x);
        self.push(t, Op::TileCols(x, reps), ng, "tile_cols")
    }

    /// Mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        let mut acc = vec![T::zero(); n];
        for r in 0..m {
            acc.iter_mut().zip(vx.row(r)).for_each(|(a, &b)| *a += b);
        }
        let inv = T::one() / T::of(m as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let t = Tensor::new(&[1, n], acc)?;
        let ng = self.ng(x);
        self.push(t, Op::MeanRows(x), ng, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.data().iter().copied().sum::<T>() / T::of(vx.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng, "mean")
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (m, n) = (vl.rows(), vl.cols());
        if targets.len() != m {
            return Err(Error::dim(
                "cross_entropy_rows",
                vl.shape(),
                &[targets.len()],
            ));
        }
        let mut probs = vec![T::zero(); m * n];
        kernels::softmax_rows(vl.data(), n, &mut probs);
        let mut total = T::zero();
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= n {
                return Err(Error::Index {
                    op: "cross_entropy_rows",
                    index: tgt,
                    len: n,
                });
            }
            let row = vl.row(r);
            total += (kernels::log_sum_exp(row) - row[tgt]).max(T::zero());
        }
        let loss = total / T::of(m as f64);
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
            "cross_entropy_rows",
        )
    }

    /// Row-wise cosine similarity: `[m×n], [m×n] -> [m]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        same_shape("cosine_rows", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.cols();
        let out: Vec<T> = va
            .data()
            .chunks_exact(n)
            .zip(vb.data().chunks_exact(n))
            .map(|(x, y)| {
                let na = kernels::dot(x, x).sqrt().max(eps);
                let nb = kernels::dot(y, y).sqrt().max(eps);
                kernels::dot(x, y) / (na * nb)
            })
            .collect();
        let m = out.len();
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(&[m], out)?,
            Op::CosineRows(a, b, eps),
            ng,
            "cosine_rows",
        )
    }

    /// Locality prior values `ψ(d; σ)` for a fixed matrix of distances `dist`
    /// (shape `[m×n]`) and a scalar, differentiable `σ`.
    pub fn locality_prior(&mut self, sigma: Var, dist: &Tensor<T>, kind: PriorKind) -> Result<Var> {
        let s = self.value(sigma).item()?;
        if !(s > T::zero()) {
            return Err(Error::Config(format!("sigma must be positive, got {s}")));
        }
        let data = dist
            .data()
            .iter()
            .map(|&d| kind.eval_distance(d, s))
            .collect();
        let t = Tensor::new(dist.shape(), data)?;
        let ng = self.ng(sigma);
        self.push(
            t,
            Op::Locality {
                sigma,
                dist: dist.data().to_vec(),
                kind,
            },
            ng,
            "locality_prior",
        )
    }

    /// Forward value of `quantized`, gradient routed unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Var) -> Result<Var> {
        same_shape("straight_through", self.value(x), self.value(quantized))?;
        let t = self.value(quantized).clone();
        let ng = self.ng(x);
        self.push(t, Op::StraightThrough(x), ng, "straight_through")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Back-propagates from the scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        // only leaves that asked for gradients keep them
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if !kernels::all_finite(g) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        self.nodes.clear();
        Ok(Grads { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let len = self.value(v).len();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.add_grad(grads, *a, |ga| {
                    let mut tmp = vec![T::zero(); m * k];
                    kernels::matmul_bt(g, bv, m, n, k, &mut tmp);
                    ga.iter_mut().zip(&tmp).for_each(|(x, &y)| *x += y);
                });
                self.add_grad(grads, *b, |gb| kernels::matmul_at_acc(av, g, m, k, n, gb));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.add_grad(grads, *a, |ga| {
                    let mut tmp = vec![T::zero(); m * k];
                    kernels::matmul(g, bv, m, n, k, &mut tmp);
                    ga.iter_mut().zip(&tmp).for_each(|(x, &y)| *x += y);
                });
                self.add_grad(grads, *b, |gb| kernels::matmul_at_acc(g, av, m, n, k, gb));
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
                self.add_grad(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
                self.add_grad(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.add_grad(grads, *a, |ga| {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.add_grad(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c)
                });
            }
            Op::AddRow(x, bias) => {
                let n = self.value(*bias).len();
                self.add_grad(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b)
                });
                self.add_grad(grads, *bias, |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::MulConst(x, c) => {
                self.add_grad(grads, *x, |gx| {
                    for ((a, &gy), &k) in gx.iter_mut().zip(g).zip(c) {
                        *a += gy * k;
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                self.add_grad(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b)
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                self.add_grad(grads, *x, |gx| {
                    for ((gr, yr), dst) in g
                        .chunks_exact(n)
                        .zip(y.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let s = kernels::dot(gr, yr);
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.add_grad(grads, *x, |gx| {
                    for ((a, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gy * gelu_parts(v).1;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.add_grad(grads, *x, |gx| {
                    for ((a, &gy), &s) in gx.iter_mut().zip(g).zip(y) {
                        *a += gy * s * (T::one() - s);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                self.add_grad(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.add_grad(grads, *bias, |gb| {
                    for gr in g.chunks_exact(n) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                });
                let inv_n = T::one() / T::of(n as f64);
                self.add_grad(grads, *x, |gx| {
                    let mut dh = vec![T::zero(); n];
                    for (r, (gr, hr)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..n {
                            dh[j] = gr[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let cols = self.value(*x).cols();
                self.add_grad(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        gx[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).len();
                    let part = &g[offset..offset + len];
                    self.add_grad(grads, v, |gv| {
                        gv.iter_mut().zip(part).for_each(|(a, &b)| *a += b)
                    });
                    offset += len;
                }
            }
            Op::TileCols(x, reps) => {
                let k = self.value(*x).cols();
                let reps = *reps;
                self.add_grad(grads, *x, |gx| {
                    for (r, grow) in g.chunks_exact(k * reps).enumerate() {
                        for chunk in grow.chunks_exact(k) {
                            gx[r * k..(r + 1) * k]
                                .iter_mut()
                                .zip(chunk)
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let (m, n) = (vx.rows(), vx.cols());
                let inv = T::one() / T::of(m as f64);
                self.add_grad(grads, *x, |gx| {
                    for row in gx.chunks_exact_mut(n) {
                        row.iter_mut().zip(g).for_each(|(a, &b)| *a += b * inv);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.add_grad(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g0));
            }
            Op::Mean(x) => {
                let g0 = g[0] / T::of(self.value(*x).len() as f64);
                self.add_grad(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g0));
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let scale = g[0] / T::of(targets.len() as f64);
                self.add_grad(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * n + j] += scale * (probs[r * n + j] - onehot);
                        }
                    }
                });
            }
            Op::CosineRows(a, b, eps) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.cols();
                let eps = *eps;
                // d cos / d a = b/(na nb) - cos * a / na²  (second term only when ‖a‖ > eps)
                let grad_one = |x: &[T], y: &[T], gy: T, out: &mut [T]| {
                    let nx_raw = kernels::dot(x, x).sqrt();
                    let nx = nx_raw.max(eps);
                    let ny = kernels::dot(y, y).sqrt().max(eps);
                    let c = kernels::dot(x, y) / (nx * ny);
                    let active = nx_raw > eps;
                    for j in 0..n {
                        let mut d = y[j] / (nx * ny);
                        if active {
                            d -= c * x[j] / (nx * nx);
                        }
                        out[j] += gy * d;
                    }
                };
                self.add_grad(grads, *a, |ga| {
                    for r in 0..va.rows() {
                        grad_one(va.row(r), vb.row(r), g[r], &mut ga[r * n..(r + 1) * n]);
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for r in 0..va.rows() {
                        grad_one(vb.row(r), va.row(r), g[r], &mut gb[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Locality { sigma, dist, kind } => {
                let s = self.value(*sigma).data()[0];
                let psi = node.value.data();
                let mut acc = T::zero();
                for ((&gy, &p), &d) in g.iter().zip(psi).zip(dist) {
                    acc += gy * kind.dsigma(d, s, p);
                }
                self.add_grad(grads, *sigma, |gs| gs[0] += acc);
            }
        }
        Ok(())
    }
}

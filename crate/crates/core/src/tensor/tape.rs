use super::kernels::{self, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for fault injection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    AddScalar,
    Scale,
    Matmul,
    AddRowBias,
    Conv2d,
    Concat,
    SliceRows,
    Upsample,
    AvgPool,
    GlobalSumPool,
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Sum,
    Mean,
    RowSum,
    Reshape,
    Standardize,
    ChannelAffine,
    GatherRows,
    SpectralDiv,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddScalar,
        OpKind::Scale,
        OpKind::Matmul,
        OpKind::AddRowBias,
        OpKind::Conv2d,
        OpKind::Concat,
        OpKind::SliceRows,
        OpKind::Upsample,
        OpKind::AvgPool,
        OpKind::GlobalSumPool,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Log,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::RowSum,
        OpKind::Reshape,
        OpKind::Standardize,
        OpKind::ChannelAffine,
        OpKind::GatherRows,
        OpKind::SpectralDiv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Scale => "scale",
            OpKind::Matmul => "matmul",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Conv2d => "conv2d",
            OpKind::Concat => "concat",
            OpKind::SliceRows => "slice_rows",
            OpKind::Upsample => "upsample",
            OpKind::AvgPool => "avg_pool",
            OpKind::GlobalSumPool => "global_sum_pool",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowSum => "row_sum",
            OpKind::Reshape => "reshape",
            OpKind::Standardize => "standardize",
            OpKind::ChannelAffine => "channel_affine",
            OpKind::GatherRows => "gather_rows",
            OpKind::SpectralDiv => "spectral_div",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown op {s:?}")))
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Matmul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    },
    Concat(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Upsample(Var),
    AvgPool(Var),
    GlobalSumPool(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log {
        x: Var,
        floor: T,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reshape(Var),
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SpectralDiv {
        w: Var,
        direction: Tensor<T>,
        sigma: T,
        clamped: bool,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Constant => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::Matmul(..) => OpKind::Matmul,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Upsample(..) => OpKind::Upsample,
            Op::AvgPool(..) => OpKind::AvgPool,
            Op::GlobalSumPool(..) => OpKind::GlobalSumPool,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Log { .. } => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::RowSum(..) => OpKind::RowSum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Standardize { .. } => OpKind::Standardize,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SpectralDiv { .. } => OpKind::SpectralDiv,
        })
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive ops in execution order for reverse-mode differentiation.
///
/// A tape is single-owner; build one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or exact zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the backward rule of `kind` (test harness hook).
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    /// Distinct primitive kinds recorded so far, in first-use order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        let mut out = Vec::new();
        for kind in self.nodes.iter().filter_map(|n| n.op.kind()) {
            if !out.contains(&kind) {
                out.push(kind);
            }
        }
        out
    }

    /// Sign of every ReLU input recorded so far. Two evaluations with equal
    /// patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = parents(&op)
                .iter()
                .all(|p| self.nodes[p.0].value.is_finite());
            debug_assert!(
                !inputs_finite,
                "{:?} produced non-finite output from finite inputs",
                op.kind()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.record(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.record(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.record(v, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.record(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.record(v, Op::Scale(a, s))
    }

    /// `1 - a`, the complementary gate.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Matmul(a, b)))
    }

    /// Adds `bias[n]` to every row of `x[b, n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("add_row_bias")?;
        if self.shape(bias) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, &bb) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bb;
            }
        }
        let v = Tensor::new([rows, cols], out)?;
        Ok(self.record(v, Op::AddRowBias(x, bias)))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let v = kernels::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        Ok(self.record(
            v,
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            },
        ))
    }

    /// Concatenation along axis 1 (channels), `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::concat_axis1(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Concat(a, b)))
    }

    /// Rows `start..start+len` along axis 0.
    /// Stacks `a: [m, ...]` and `b: [n, ...]` into `[m + n, ...]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let fa = self.reshape(a, [1, na])?;
        let fb = self.reshape(b, [1, nb])?;
        let flat = self.concat_channels(fa, fb)?;
        let mut shape = sa;
        shape[0] += sb[0];
        self.reshape(flat, shape)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || start + len > t.shape()[0] {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                msg: format!("rows {start}..{} of {:?}", start + len, t.shape()),
            });
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let v = Tensor::new(
            shape,
            t.data()[start * inner..(start + len) * inner].to_vec(),
        )?;
        Ok(self.record(v, Op::SliceRows { x, start }))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let v = kernels::upsample_nearest2x(self.value(x))?;
        Ok(self.record(v, Op::Upsample(x)))
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let v = kernels::avgpool2x(self.value(x))?;
        Ok(self.record(v, Op::AvgPool(x)))
    }

    pub fn global_sum_pool(&mut self, x: Var) -> Result<Var> {
        let v = kernels::global_sum_pool(self.value(x))?;
        Ok(self.record(v, Op::GlobalSumPool(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.record(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.record(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.record(v, Op::Tanh(x))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x).map(|a| a.max(floor).ln());
        self.record(v, Op::Log { x, floor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.record(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.record(v, Op::Mean(x))
    }

    /// Sums each row of `x[b, n]` into `[b, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("row_sum")?;
        let out = self
            .value(x)
            .data()
            .chunks(cols.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        let v = Tensor::new([rows, 1], out)?;
        Ok(self.record(v, Op::RowSum(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(x)))
    }

    /// Per-channel standardization `(x - mean) / sqrt(var + eps)` with batch
    /// statistics. Returns the output and the (mean, biased variance) used.
    pub fn standardize(&mut self, x: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let t = self.value(x);
        let (mean, var) = kernels::channel_moments(t)?;
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let c = t.shape()[1];
        let inner: usize = t.shape()[2..].iter().product();
        let mut out = t.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *o = (*o - mean[ch]) * inv_std[ch];
        }
        let v = Tensor::new(t.shape(), out)?;
        let node = self.record(v, Op::Standardize { x, inv_std });
        Ok((node, mean, var))
    }

    /// `x * scale + shift` per channel. `scale`/`shift` are `[c]` (shared by
    /// the batch) or `[b, c]` (per sample).
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::InvalidShape {
                op: "channel_affine",
                msg: format!("expected [batch, channel, ...], got {:?}", t.shape()),
            });
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        let ps = self.shape(scale).to_vec();
        if (ps != [c] && ps != [b, c]) || self.shape(shift) != ps.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: t.shape().to_vec(),
                rhs: ps,
            });
        }
        let per_sample = ps.len() == 2;
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = t.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            let bc = i / inner;
            let j = if per_sample { bc } else { bc % c };
            *o = *o * sc[j] + sh[j];
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.record(v, Op::ChannelAffine { x, scale, shift }))
    }

    /// Row lookup: `table[ids[i]]` for each `i`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (k, d) = self.value(table).dims2("embed_label")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= k {
                return Err(Error::ClassOutOfRange { id, classes: k });
            }
            out.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::new([ids.len(), d], out)?;
        Ok(self.record(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `w / σ` with `σ = Σ w ⊙ direction` (the `uᵀWv` estimate, with the
    /// singular directions held constant). `σ` is floored at `floor`; below
    /// it the divisor is treated as a constant.
    pub fn spectral_div(&mut self, w: Var, direction: Tensor<T>, floor: T) -> Result<(Var, T)> {
        self.value(w).check_same(&direction, "spectral_normalize")?;
        let raw: T = self
            .value(w)
            .data()
            .iter()
            .zip(direction.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let clamped = raw < floor;
        let sigma = if clamped { floor } else { raw };
        let v = self.value(w).map(|a| a / sigma);
        let node = self.record(
            v,
            Op::SpectralDiv {
                w,
                direction,
                sigma,
                clamped,
            },
        );
        Ok((node, sigma))
    }

    /// Reverse pass from a scalar `loss`, visiting nodes in exact reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || parents(&node.op).is_empty() {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.fault.is_some() && self.fault == node.op.kind() {
                g.scale_in_place(T::of(1.5));
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::Matmul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        val(*b).data(),
                        true,
                        &mut da,
                        false,
                    );
                    acc(*a, Tensor::new([m, k], da)?);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        val(*a).data(),
                        true,
                        g.data(),
                        false,
                        &mut db,
                        false,
                    );
                    acc(*b, Tensor::new([k, n], db)?);
                }
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, g.clone());
                if wants(*bias) {
                    let cols = val(*bias).len();
                    let mut db = vec![T::zero(); cols];
                    for row in g.data().chunks(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, Tensor::new([cols], db)?);
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            } => {
                let (dx, dk, db) = kernels::conv2d_backward(val(*x), val(*kernel), g, *padding)?;
                acc(*x, dx);
                acc(*kernel, dk);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::Concat(a, b) => {
                let (ga, gb) = kernels::split_axis1(g, val(*a).shape()[1])?;
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SliceRows { x, start } => {
                let src = val(*x);
                let inner: usize = src.shape()[1..].iter().product();
                let mut dx = Tensor::zeros(src.shape());
                dx.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::Upsample(x) => acc(*x, kernels::upsample_nearest2x_backward(g)?),
            Op::AvgPool(x) => acc(*x, kernels::avgpool2x_backward(g)?),
            Op::GlobalSumPool(x) => {
                let (_, _, h, w) = val(*x).dims4("global_sum_pool")?;
                acc(*x, kernels::global_sum_pool_backward(g, h, w)?);
            }
            Op::Relu(x) => acc(
                *x,
                g.zip_map(
                    val(*x),
                    "relu",
                    |d, a| if a > T::zero() { d } else { T::zero() },
                )?,
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.zip_map(&node.value, "sigmoid", |d, y| d * y * (T::one() - y))?,
            ),
            Op::Tanh(x) => acc(
                *x,
                g.zip_map(&node.value, "tanh", |d, y| d * (T::one() - y * y))?,
            ),
            Op::Log { x, floor } => acc(
                *x,
                g.zip_map(
                    val(*x),
                    "log",
                    |d, a| if a > *floor { d / a } else { T::zero() },
                )?,
            ),
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = T::of(val(*x).len() as f64);
                acc(*x, Tensor::full(val(*x).shape(), g.item() / n));
            }
            Op::RowSum(x) => {
                let src = val(*x);
                let cols = src.shape()[1];
                let mut dx = Vec::with_capacity(src.len());
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d, cols));
                }
                acc(*x, Tensor::new(src.shape(), dx)?);
            }
            Op::Standardize { x, inv_std } => {
                // dx = inv/N · (N·g − Σg − x̂·Σ(g·x̂)) per channel
                let xhat = &node.value;
                let (b, c) = (xhat.shape()[0], xhat.shape()[1]);
                let inner: usize = xhat.shape()[2..].iter().product();
                let count = T::of((b * inner) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (&d, &xh)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += d;
                    sum_gx[ch] += d * xh;
                }
                let mut dx = Vec::with_capacity(g.len());
                for (i, (&d, &xh)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let ch = (i / inner) % c;
                    dx.push(inv_std[ch] / count * (count * d - sum_g[ch] - xh * sum_gx[ch]));
                }
                acc(*x, Tensor::new(xhat.shape(), dx)?);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let src = val(*x);
                let c = src.shape()[1];
                let inner: usize = src.shape()[2..].iter().product();
                let sc = val(*scale);
                let per_sample = sc.rank() == 2;
                let idx = |i: usize| {
                    if per_sample {
                        i / inner
                    } else {
                        (i / inner) % c
                    }
                };
                if wants(*x) {
                    let dx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| d * sc.data()[idx(i)])
                        .collect();
                    acc(*x, Tensor::new(src.shape(), dx)?);
                }
                let mut dscale = Tensor::zeros(sc.shape());
                let mut dshift = Tensor::zeros(sc.shape());
                for (i, (&d, &a)) in g.data().iter().zip(src.data()).enumerate() {
                    let j = idx(i);
                    dscale.data_mut()[j] += d * a;
                    dshift.data_mut()[j] += d;
                }
                acc(*scale, dscale);
                acc(*shift, dshift);
            }
            Op::GatherRows { table, ids } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut dt = Tensor::zeros(t.shape());
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[id * d + j] += g.data()[row * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::SpectralDiv {
                w,
                direction,
                sigma,
                clamped,
            } => {
                // d(w/σ) = g/σ − (Σ g⊙w)/σ² · direction, σ = Σ w⊙direction
                let wv = val(*w);
                let inv = sigma.recip();
                let mut dw = g.map(|d| d * inv);
                if !clamped {
                    let gw: T = g.data().iter().zip(wv.data()).map(|(&a, &b)| a * b).sum();
                    let coef = gw * inv * inv;
                    for (o, &dir) in dw.data_mut().iter_mut().zip(direction.data()) {
                        *o -= coef * dir;
                    }
                }
                acc(*w, dw);
            }
        }
        Ok(())
    }
}

fn parents<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Concat(a, b) => {
            vec![*a, *b]
        }
        Op::AddRowBias(x, b) => vec![*x, *b],
        Op::AddScalar(a)
        | Op::Scale(a, _)
        | Op::Upsample(a)
        | Op::AvgPool(a)
        | Op::GlobalSumPool(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::RowSum(a)
        | Op::Reshape(a) => vec![*a],
        Op::Log { x, .. } | Op::SliceRows { x, .. } | Op::Standardize { x, .. } => vec![*x],
        Op::Conv2d {
            x, kernel, bias, ..
        } => {
            let mut v = vec![*x, *kernel];
            v.extend(bias);
            v
        }
        Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
        Op::GatherRows { table, .. } => vec![*table],
        Op::SpectralDiv { w, .. } => vec![*w],
    }
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        (T::one() + (-a).exp()).recip()
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

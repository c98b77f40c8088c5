//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward pass needs. Nodes only reference earlier nodes, so the tape is
//! always in topological order and `backward` is a single reverse sweep.

pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where batch norm takes its normalization statistics from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics observed by a batch-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Zero-norm guard for the query-normalized cosine.
pub const COSINE_NORM_FLOOR: f64 = 1e-8;

/// Probability floor inside the log-likelihood.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    ConcatChannels(Var, Var),
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Columns {
        input: Var,
        start: usize,
    },
    Softmax(Var),
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    Film {
        x: Var,
        gamma_z: Var,
        beta_z: Var,
        gamma0: Var,
        beta0: Var,
    },
    RowCosineU {
        query: Var,
        support: Var,
        norms: Vec<T>,
        clamped: Vec<bool>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    AbsSum(Var),
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// Leaves created with [`Tape::param`] receive gradients; `backward` adds into
/// their grad buffers, so repeated calls accumulate.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    clamped_norms: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            clamped_norms: 0,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Number of cosine evaluations whose query norm hit the zero-norm floor.
    pub fn clamped_norms(&self) -> usize {
        self.clamped_norms
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [b, h, w, c] => Ok([b, h, w, c]),
            ref s => Err(shape_err(format!("{what} must be rank 4 [B,H,W,C], got {s:?}"))),
        }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<[usize; 2]> {
        match *self.shape(v) {
            [r, c] => Ok([r, c]),
            ref s => Err(shape_err(format!("{what} must be rank 2, got {s:?}"))),
        }
    }

    fn vector_len(&self, v: Var, what: &str) -> Result<usize> {
        match *self.shape(v) {
            [n] => Ok(n),
            ref s => Err(shape_err(format!("{what} must be rank 1, got {s:?}"))),
        }
    }

    /// 3x3 stride-1 convolution with zero "same" padding.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let [b, h, w, cin] = self.dims4(input, "conv2d input")?;
        let (kcin, cout) = match *self.shape(kernels) {
            [3, 3, kcin, cout] => (kcin, cout),
            ref s => return Err(shape_err(format!("conv2d kernels must be [3,3,Cin,Cout], got {s:?}"))),
        };
        if kcin != cin {
            return Err(shape_err(format!(
                "conv2d channel mismatch: input has {cin} channels, kernels expect {kcin}"
            )));
        }
        if self.vector_len(bias, "conv2d bias")? != cout {
            return Err(shape_err(format!("conv2d bias must have {cout} entries")));
        }
        let geom = ConvGeom {
            batch: b,
            height: h,
            width: w,
            cin,
            cout,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new([b, h, w, cout], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            },
            &[input, kernels, bias],
        )
    }

    /// Per-channel batch normalization over all but the last axis.
    ///
    /// In batch mode the observed statistics are returned so the caller can
    /// fold them into running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(input).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err("batch_norm input must not be a scalar"))?;
        if self.vector_len(gamma, "batch_norm gamma")? != c || self.vector_len(beta, "batch_norm beta")? != c {
            return Err(shape_err(format!("batch_norm affine parameters must have {c} entries")));
        }
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                let (m, v) = kernels::channel_moments(self.value(input).data(), c);
                let observed = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                };
                (m, v, Some(observed))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(format!("running statistics must have {c} entries")));
                }
                (
                    mean.iter().map(|x| x.as_f64()).collect(),
                    var.iter().map(|x| x.as_f64()).collect(),
                    None,
                )
            }
        };
        let (out, xhat, inv_std) = kernels::batch_norm_forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
        );
        let batch_stats = observed.is_some();
        let v = self.push(
            "batch_norm",
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        )?;
        Ok((v, observed))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", value, Op::Relu(input), &[input])
    }

    /// 2x2 max pooling. With `floor_odd` unset, odd spatial extents are an
    /// error; otherwise the trailing row/column is discarded.
    pub fn max_pool_2x2(&mut self, input: Var, floor_odd: bool) -> Result<Var> {
        let [b, h, w, c] = self.dims4(input, "max_pool_2x2 input")?;
        if !floor_odd && (h % 2 != 0 || w % 2 != 0) {
            return Err(shape_err(format!("max_pool_2x2 needs even spatial extents, got {h}x{w}")));
        }
        if h < 2 || w < 2 {
            return Err(shape_err(format!("max_pool_2x2 needs extents of at least 2, got {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool_forward(self.value(input).data(), b, h, w, c);
        let value = Tensor::new([b, h / 2, w / 2, c], out)?;
        self.push("max_pool_2x2", value, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, h, w, c] = self.dims4(input, "global_avg_pool input")?;
        let x = self.value(input).data();
        let scale = 1.0 / (h * w) as f64;
        let mut out = Vec::with_capacity(b * c);
        for img in x.chunks_exact(h * w * c) {
            let mut acc = vec![0.0f64; c];
            for px in img.chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v.as_f64();
                }
            }
            out.extend(acc.into_iter().map(|a| T::of(a * scale)));
        }
        self.push(
            "global_avg_pool",
            Tensor::new([b, c], out)?,
            Op::GlobalAvgPool(input),
            &[input],
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ra, ca] = self.dims2(a, "concat_channels lhs")?;
        let [rb, cb] = self.dims2(b, "concat_channels rhs")?;
        if ra != rb {
            return Err(shape_err(format!("concat_channels batch mismatch: {ra} vs {rb}")));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&xa[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&xb[r * cb..(r + 1) * cb]);
        }
        self.push(
            "concat_channels",
            Tensor::new([ra, ca + cb], out)?,
            Op::ConcatChannels(a, b),
            &[a, b],
        )
    }

    /// `input · weight + bias` for `input: [B, D]`, `weight: [D, E]`, `bias: [E]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [rows, d] = self.dims2(input, "affine input")?;
        let [wd, e] = self.dims2(weight, "affine weight")?;
        if wd != d {
            return Err(shape_err(format!("affine: input has {d} features, weight expects {wd}")));
        }
        if self.vector_len(bias, "affine bias")? != e {
            return Err(shape_err(format!("affine bias must have {e} entries")));
        }
        let mut out = Vec::with_capacity(rows * e);
        for _ in 0..rows {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            false,
            false,
            rows,
            e,
            d,
            T::one(),
            self.value(input).data(),
            self.value(weight).data(),
            T::one(),
            &mut out,
        );
        self.push(
            "affine",
            Tensor::new([rows, e], out)?,
            Op::Affine { input, weight, bias },
            &[input, weight, bias],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.dims2(a, "matmul lhs")?;
        let [kb, n] = self.dims2(b, "matmul rhs")?;
        if k != kb {
            return Err(shape_err(format!("matmul inner dimensions differ: {k} vs {kb}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            n,
            k,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Columns `start..end` of a `[rows, cols]` value.
    pub fn columns(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let [rows, cols] = self.dims2(input, "columns input")?;
        if start > end || end > cols {
            return Err(shape_err(format!("column range {start}..{end} invalid for {cols} columns")));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(rows * (end - start));
        for row in x.chunks_exact(cols) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(
            "columns",
            Tensor::new([rows, end - start], out)?,
            Op::Columns { input, start },
            &[input],
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let [rows, d] = self.dims2(input, "softmax input")?;
        if d == 0 {
            return Err(shape_err("softmax over an empty axis"));
        }
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(input).data().chunks_exact(d) {
            out.extend(softmax_row(row));
        }
        self.push("softmax", Tensor::new([rows, d], out)?, Op::Softmax(input), &[input])
    }

    /// Selects slices along the leading axis: `out[i] = input[index[i]]`.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let n = *shape.first().ok_or_else(|| shape_err("gather_rows on a scalar"))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err(format!("gather_rows index {bad} out of range for {n} rows")));
        }
        let stride: usize = shape[1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(index.len() * stride);
        for &i in index {
            out.extend_from_slice(&x[i * stride..(i + 1) * stride]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        self.push(
            "gather_rows",
            Tensor::new(new_shape, out)?,
            Op::GatherRows {
                input,
                index: index.to_vec(),
            },
            &[input],
        )
    }

    /// Post-multiplied FiLM: `(1 + gamma0·gamma_z) ⊙ x + beta0·beta_z`,
    /// broadcast over the spatial axes.
    pub fn film(&mut self, x: Var, gamma_z: Var, beta_z: Var, gamma0: Var, beta0: Var) -> Result<Var> {
        let [b, h, w, c] = self.dims4(x, "film input")?;
        for (v, what) in [(gamma_z, "gamma_z"), (beta_z, "beta_z")] {
            if self.shape(v) != [b, c] {
                return Err(shape_err(format!("film {what} must be [{b},{c}], got {:?}", self.shape(v))));
            }
        }
        for (v, what) in [(gamma0, "gamma0"), (beta0, "beta0")] {
            if self.vector_len(v, what)? != c {
                return Err(shape_err(format!("film {what} must have {c} entries")));
            }
        }
        let (xv, gz, bz) = (
            self.value(x).data(),
            self.value(gamma_z).data(),
            self.value(beta_z).data(),
        );
        let (g0, b0) = (self.value(gamma0).data(), self.value(beta0).data());
        let mut out = Vec::with_capacity(xv.len());
        for bi in 0..b {
            let scale: Vec<T> = (0..c).map(|ch| T::one() + g0[ch] * gz[bi * c + ch]).collect();
            let shift: Vec<T> = (0..c).map(|ch| b0[ch] * bz[bi * c + ch]).collect();
            for px in xv[bi * h * w * c..(bi + 1) * h * w * c].chunks_exact(c) {
                for ch in 0..c {
                    out.push(scale[ch] * px[ch] + shift[ch]);
                }
            }
        }
        self.push(
            "film",
            Tensor::new([b, h, w, c], out)?,
            Op::Film {
                x,
                gamma_z,
                beta_z,
                gamma0,
                beta0,
            },
            &[x, gamma_z, beta_z, gamma0, beta0],
        )
    }

    /// Row-wise `query·support / max(‖query‖, 1e-8)` for `[P, D]` inputs.
    pub fn row_cosine_u(&mut self, query: Var, support: Var) -> Result<Var> {
        let [p, d] = self.dims2(query, "cosine query")?;
        if self.shape(support) != [p, d] {
            return Err(shape_err(format!(
                "cosine operands differ in shape: {:?} vs {:?}",
                self.shape(query),
                self.shape(support)
            )));
        }
        let (q, s) = (self.value(query).data(), self.value(support).data());
        let mut out = Vec::with_capacity(p);
        let mut norms = Vec::with_capacity(p);
        let mut clamped = Vec::with_capacity(p);
        for (qr, sr) in q.chunks_exact(d).zip(s.chunks_exact(d)) {
            let (value, norm, was_clamped) = cosine_u_parts(qr, sr);
            out.push(value);
            norms.push(norm);
            clamped.push(was_clamped);
        }
        self.clamped_norms += clamped.iter().filter(|&&c| c).count();
        self.push(
            "row_cosine_u",
            Tensor::new([p], out)?,
            Op::RowCosineU {
                query,
                support,
                norms,
                clamped,
            },
            &[query, support],
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).data().iter().map(|x| x.as_f64()).sum();
        self.push("sum", Tensor::scalar(T::of(s)), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).data();
        if x.is_empty() {
            return Err(shape_err("mean of an empty tensor"));
        }
        let s: f64 = x.iter().map(|x| x.as_f64()).sum::<f64>() / x.len() as f64;
        self.push("mean", Tensor::scalar(T::of(s)), Op::Mean(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let value = self.value(input).map(|x| x * factor);
        self.push("scale", value, Op::Scale(input, factor), &[input])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, input: Var, factor: &Tensor<T>) -> Result<Var> {
        if self.shape(input) != factor.shape() {
            return Err(shape_err(format!(
                "mul_const shape mismatch: {:?} vs {:?}",
                self.shape(input),
                factor.shape()
            )));
        }
        let data = self
            .value(input)
            .data()
            .iter()
            .zip(factor.data())
            .map(|(&x, &f)| x * f)
            .collect();
        let value = Tensor::new(self.shape(input).to_vec(), data)?;
        self.push(
            "mul_const",
            value,
            Op::MulConst(input, factor.data().to_vec()),
            &[input],
        )
    }

    /// `Σ|x|`, with subgradient 0 at 0.
    pub fn abs_sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).data().iter().map(|x| x.as_f64().abs()).sum();
        self.push("abs_sum", Tensor::scalar(T::of(s)), Op::AbsSum(input), &[input])
    }

    /// Mean over rows of `-ln(max(probs[r, labels[r]], 1e-12))`.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let [rows, classes] = self.dims2(probs, "nll probabilities")?;
        if labels.len() != rows {
            return Err(shape_err(format!("nll: {rows} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                way: classes,
            });
        }
        let p = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p[r * classes + l].as_f64().max(LOG_PROB_FLOOR).ln())
            .sum();
        self.push(
            "nll",
            Tensor::scalar(T::of(total / rows as f64)),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Back-propagates from a scalar `loss`, adding d(loss)/d(leaf) into the
    /// grad buffer of every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, contribution: Vec<T>| accumulate(&mut adj, nodes, v, contribution);
            match &node.op {
                Op::Leaf => {
                    let slot = &mut self.leaf_grads[i];
                    let delta = Tensor::new(node.value.shape().to_vec(), g)?;
                    match slot {
                        Some(existing) => existing.add_assign(&delta),
                        None => *slot = Some(delta),
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    geom,
                } => {
                    let want = [
                        nodes[input.0].requires_grad,
                        nodes[kernels.0].requires_grad,
                        nodes[bias.0].requires_grad,
                    ];
                    let grads = kernels::conv2d_backward(
                        nodes[input.0].value.data(),
                        nodes[kernels.0].value.data(),
                        &g,
                        geom,
                        want,
                    );
                    if let Some(d) = grads.input {
                        send(*input, d);
                    }
                    if let Some(d) = grads.kernels {
                        send(*kernels, d);
                    }
                    if let Some(d) = grads.bias {
                        send(*bias, d);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let c = inv_std.len();
                    let gamma_v = nodes[gamma.0].value.data();
                    if nodes[gamma.0].requires_grad || nodes[beta.0].requires_grad {
                        let mut dg = vec![0.0f64; c];
                        let mut db = vec![0.0f64; c];
                        for (drow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                dg[ch] += (drow[ch] * hrow[ch]).as_f64();
                                db[ch] += drow[ch].as_f64();
                            }
                        }
                        send(*gamma, dg.into_iter().map(T::of).collect());
                        send(*beta, db.into_iter().map(T::of).collect());
                    }
                    if nodes[input.0].requires_grad {
                        let dx = if *batch_stats {
                            kernels::batch_norm_backward_batch(&g, xhat, gamma_v, inv_std)
                        } else {
                            g.chunks_exact(c)
                                .flat_map(|row| (0..c).map(move |ch| row[ch] * gamma_v[ch] * inv_std[ch]))
                                .collect()
                        };
                        send(*input, dx);
                    }
                }
                Op::Relu(input) => {
                    let x = nodes[input.0].value.data();
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect();
                    send(*input, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![T::zero(); nodes[input.0].value.numel()];
                    for (&d, &idx) in g.iter().zip(argmax) {
                        dx[idx] = dx[idx] + d;
                    }
                    send(*input, dx);
                }
                Op::GlobalAvgPool(input) => {
                    let shape = nodes[input.0].value.shape();
                    let (h, w, c) = (shape[1], shape[2], shape[3]);
                    let scale = T::of(1.0 / (h * w) as f64);
                    let mut dx = Vec::with_capacity(nodes[input.0].value.numel());
                    for row in g.chunks_exact(c) {
                        for _ in 0..h * w {
                            dx.extend(row.iter().map(|&d| d * scale));
                        }
                    }
                    send(*input, dx);
                }
                Op::ConcatChannels(a, b) => {
                    let ca = nodes[a.0].value.shape()[1];
                    let cb = nodes[b.0].value.shape()[1];
                    let mut da = Vec::with_capacity(nodes[a.0].value.numel());
                    let mut db = Vec::with_capacity(nodes[b.0].value.numel());
                    for row in g.chunks_exact(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Affine { input, weight, bias } => {
                    let (rows, d) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
                    let e = nodes[weight.0].value.shape()[1];
                    if nodes[input.0].requires_grad {
                        let mut dx = vec![T::zero(); rows * d];
                        T::gemm(false, true, rows, d, e, T::one(), &g, nodes[weight.0].value.data(), T::zero(), &mut dx);
                        send(*input, dx);
                    }
                    if nodes[weight.0].requires_grad {
                        let mut dw = vec![T::zero(); d * e];
                        T::gemm(true, false, d, e, rows, T::one(), nodes[input.0].value.data(), &g, T::zero(), &mut dw);
                        send(*weight, dw);
                    }
                    if nodes[bias.0].requires_grad {
                        let mut db = vec![T::zero(); e];
                        for row in g.chunks_exact(e) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                        send(*bias, db);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    if nodes[a.0].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(false, true, m, k, n, T::one(), &g, nodes[b.0].value.data(), T::zero(), &mut da);
                        send(*a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(true, false, k, n, m, T::one(), nodes[a.0].value.data(), &g, T::zero(), &mut db);
                        send(*b, db);
                    }
                }
                Op::Columns { input, start } => {
                    let cols = nodes[input.0].value.shape()[1];
                    let width = node.value.shape()[1];
                    let mut dx = vec![T::zero(); nodes[input.0].value.numel()];
                    for (dst, src) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(width.max(1))) {
                        dst[*start..*start + width].copy_from_slice(src);
                    }
                    send(*input, dx);
                }
                Op::Softmax(input) => {
                    let d = node.value.shape()[1];
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks_exact(d).zip(node.value.data().chunks_exact(d)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dot)));
                    }
                    send(*input, dx);
                }
                Op::GatherRows { input, index } => {
                    let numel = nodes[input.0].value.numel();
                    let stride = if index.is_empty() { 0 } else { g.len() / index.len() };
                    let mut dx = vec![T::zero(); numel];
                    for (row, &src) in g.chunks_exact(stride.max(1)).zip(index) {
                        for (acc, &v) in dx[src * stride..(src + 1) * stride].iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    send(*input, dx);
                }
                Op::Film {
                    x,
                    gamma_z,
                    beta_z,
                    gamma0,
                    beta0,
                } => {
                    let shape = nodes[x.0].value.shape();
                    let (b, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
                    let xv = nodes[x.0].value.data();
                    let gz = nodes[gamma_z.0].value.data();
                    let bz = nodes[beta_z.0].value.data();
                    let g0 = nodes[gamma0.0].value.data();
                    let b0 = nodes[beta0.0].value.data();
                    // Per (batch, channel): Σ_hw dy·x and Σ_hw dy.
                    let mut sum_dyx = vec![T::zero(); b * c];
                    let mut sum_dy = vec![T::zero(); b * c];
                    let mut dx = Vec::with_capacity(xv.len());
                    for bi in 0..b {
                        let base = bi * hw * c;
                        for p in 0..hw {
                            for (ch, &g0c) in g0.iter().enumerate() {
                                let idx = base + p * c + ch;
                                let k = bi * c + ch;
                                sum_dyx[k] = sum_dyx[k] + g[idx] * xv[idx];
                                sum_dy[k] = sum_dy[k] + g[idx];
                                dx.push(g[idx] * (T::one() + g0c * gz[k]));
                            }
                        }
                    }
                    send(*x, dx);
                    let dgz: Vec<T> = (0..b * c).map(|k| g0[k % c] * sum_dyx[k]).collect();
                    let dbz: Vec<T> = (0..b * c).map(|k| b0[k % c] * sum_dy[k]).collect();
                    let mut dg0 = vec![T::zero(); c];
                    let mut db0 = vec![T::zero(); c];
                    for k in 0..b * c {
                        dg0[k % c] = dg0[k % c] + gz[k] * sum_dyx[k];
                        db0[k % c] = db0[k % c] + bz[k] * sum_dy[k];
                    }
                    send(*gamma_z, dgz);
                    send(*beta_z, dbz);
                    send(*gamma0, dg0);
                    send(*beta0, db0);
                }
                Op::RowCosineU {
                    query,
                    support,
                    norms,
                    clamped,
                } => {
                    let d = nodes[query.0].value.shape()[1];
                    let q = nodes[query.0].value.data();
                    let s = nodes[support.0].value.data();
                    let mut dq = Vec::with_capacity(q.len());
                    let mut ds = Vec::with_capacity(s.len());
                    for (r, ((qr, sr), &gr)) in q.chunks_exact(d).zip(s.chunks_exact(d)).zip(&g).enumerate() {
                        let n = norms[r];
                        let inv = T::one() / n;
                        ds.extend(qr.iter().map(|&qi| gr * qi * inv));
                        if clamped[r] {
                            dq.extend(sr.iter().map(|&si| gr * si * inv));
                        } else {
                            let dot: T = qr.iter().zip(sr).map(|(&a, &b)| a * b).sum();
                            let k = dot * inv * inv * inv;
                            dq.extend(qr.iter().zip(sr).map(|(&qi, &si)| gr * (si * inv - k * qi)));
                        }
                    }
                    send(*query, dq);
                    send(*support, ds);
                }
                Op::Reshape(input) => send(*input, g),
                Op::Sum(input) => {
                    let n = nodes[input.0].value.numel();
                    send(*input, vec![g[0]; n]);
                }
                Op::Mean(input) => {
                    let n = nodes[input.0].value.numel();
                    send(*input, vec![g[0] / T::of(n as f64); n]);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    send(*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                    send(*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
                Op::Scale(input, factor) => send(*input, g.iter().map(|&d| d * *factor).collect()),
                Op::MulConst(input, factor) => {
                    send(*input, g.iter().zip(factor).map(|(&d, &f)| d * f).collect());
                }
                Op::AbsSum(input) => {
                    let x = nodes[input.0].value.data();
                    let dx = x
                        .iter()
                        .map(|&v| {
                            if v > T::zero() {
                                g[0]
                            } else if v < T::zero() {
                                -g[0]
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    send(*input, dx);
                }
                Op::Nll { probs, labels } => {
                    let classes = nodes[probs.0].value.shape()[1];
                    let p = nodes[probs.0].value.data();
                    let scale = g[0] / T::of(labels.len() as f64);
                    let mut dp = vec![T::zero(); p.len()];
                    for (r, &l) in labels.iter().enumerate() {
                        let v = p[r * classes + l];
                        if v.as_f64() > LOG_PROB_FLOOR {
                            dp[r * classes + l] = -scale / v;
                        }
                    }
                    send(*probs, dp);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, contribution: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contribution) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `(q·s / max(‖q‖, floor), max(‖q‖, floor), clamped)`.
pub fn cosine_u_parts<T: Scalar>(query: &[T], support: &[T]) -> (T, T, bool) {
    let dot: T = query.iter().zip(support).map(|(&a, &b)| a * b).sum();
    let norm = query.iter().map(|&a| a * a).sum::<T>().sqrt();
    let floor = T::of(COSINE_NORM_FLOOR);
    if norm < floor {
        (dot / floor, floor, true)
    } else {
        (dot / norm, norm, false)
    }
}

#[cfg(test)]
mod tests;

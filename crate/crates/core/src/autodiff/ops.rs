//! Forward definitions and backward rules of every graph primitive.

use rand::Rng;

use super::kernels::{conv2d_backward, conv2d_forward, rotation_taps, Conv2dDims};
use super::{bilinear_axis, conv2d_output_dim, Graph, Op, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Floor applied to row norms in [`Graph::l2_normalize_rows`].
pub const L2_NORM_FLOOR: f64 = 1e-12;

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dims2(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected rank 2".into(),
        }),
    }
}

fn dims3(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match s {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected rank 3 (C x H x W)".into(),
        }),
    }
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Broadcast pattern of a binary elementwise op.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(Bcast::Same)
    } else if na == 1 {
        Ok(Bcast::LeftScalar)
    } else if nb == 1 {
        Ok(Bcast::RightScalar)
    } else {
        Err(shape_err(op, a, b))
    }
}

impl<T: Real> Graph<T> {
    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op.name();
        let (ta, tb) = (self.val(a), self.val(b));
        let mode = bcast(name, ta.shape(), tb.shape())?;
        let (shape, data) = match mode {
            Bcast::Same => (
                ta.shape().to_vec(),
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Bcast::LeftScalar => {
                let s = ta.item();
                (
                    tb.shape().to_vec(),
                    tb.data().iter().map(|&y| f(s, y)).collect(),
                )
            }
            Bcast::RightScalar => {
                let s = tb.item();
                (
                    ta.shape().to_vec(),
                    ta.data().iter().map(|&x| f(x, s)).collect(),
                )
            }
        };
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.val(a).data(), self.val(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let out = transpose_raw(self.val(a).data(), m, n);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a))
    }

    /// Elementwise sum; one operand may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product; one operand may be a single-element
    /// tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.val(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.val(a).map(|v| v + c);
        self.push(out, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|v| v.tanh());
        self.push(out, Op::Tanh(a))
    }

    /// Kernel-size-1 convolution over a token sequence:
    /// `y[l, o] = sum_i x[l, i] * w[o, i] + b[o]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, c_in) = dims2("conv1d", self.shape(x))?;
        let (c_out, c_in_w) = dims2("conv1d", self.shape(w))?;
        if c_in != c_in_w {
            return Err(shape_err("conv1d", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [c_out] {
            return Err(shape_err("conv1d", self.shape(w), self.shape(b)));
        }
        let (xd, wd, bd) = (self.val(x).data(), self.val(w).data(), self.val(b).data());
        let mut out = vec![T::zero(); l * c_out];
        for t in 0..l {
            let xr = &xd[t * c_in..(t + 1) * c_in];
            for o in 0..c_out {
                let wr = &wd[o * c_in..(o + 1) * c_in];
                let dot: T = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                out[t * c_out + o] = dot + bd[o];
            }
        }
        self.push(
            Tensor::from_parts(vec![l, c_out], out),
            Op::Conv1d { x, w, b },
        )
    }

    fn conv2d_dims(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Conv2dDims> {
        let (c_in, h, wd) = dims3("conv2d", self.shape(x))?;
        let ws = self.shape(w);
        let [c_out, c_in_w, k, k2] = ws else {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: ws.to_vec(),
                reason: "expected kernel of rank 4".into(),
            });
        };
        let (c_out, k) = (*c_out, *k);
        if *c_in_w != c_in {
            return Err(shape_err("conv2d", self.shape(x), ws));
        }
        if k != *k2 || k % 2 == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: ws.to_vec(),
                reason: "kernel must be square with odd size".into(),
            });
        }
        let (Some(h_out), Some(w_out)) = (
            conv2d_output_dim(h, k, stride, pad),
            conv2d_output_dim(wd, k, stride, pad),
        ) else {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: self.shape(x).to_vec(),
                reason: format!("empty output for kernel {k}, stride {stride}, padding {pad}"),
            });
        };
        Ok(Conv2dDims {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    /// 2-D cross-correlation of a `C_in x H x W` map with a
    /// `C_out x C_in x k x k` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let d = self.conv2d_dims(x, w, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [d.c_out] {
                return Err(shape_err("conv2d", self.shape(w), self.shape(b)));
            }
        }
        let out = conv2d_forward(
            &d,
            self.val(x).data(),
            self.val(w).data(),
            b.map(|b| self.val(b).data()),
        );
        self.push(
            Tensor::from_parts(vec![d.c_out, d.h_out, d.w_out], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Per-channel standardization over the token axis of an `L x C` input.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (l, c) = dims2("instance_norm", self.shape(x))?;
        if l < 2 {
            return Err(TensorError::Degenerate {
                op: "instance_norm",
                reason: format!("needs at least 2 tokens, got {l}"),
            });
        }
        let xd = self.val(x).data();
        let lf = T::lit(l as f64);
        let mut out = vec![T::zero(); l * c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mean = (0..l).map(|t| xd[t * c + ch]).sum::<T>() / lf;
            let var = (0..l)
                .map(|t| {
                    let d = xd[t * c + ch] - mean;
                    d * d
                })
                .sum::<T>()
                / lf;
            let inv = (var + self.norm_eps).sqrt().recip();
            inv_std[ch] = inv;
            for t in 0..l {
                out[t * c + ch] = (xd[t * c + ch] - mean) * inv;
            }
        }
        self.push(
            Tensor::from_parts(vec![l, c], out),
            Op::InstanceNorm { x, inv_std },
        )
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax_lastdim",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax_lastdim",
                shape,
                reason: "empty last axis".into(),
            });
        }
        let mut out = self.val(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat needs at least one input".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.val(p).data()[o * len..(o + 1) * len]);
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let base = self.shape(x).to_vec();
        if axis >= base.len() || start >= end || end > base[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: base,
                reason: format!("range {start}..{end} on axis {axis}"),
            });
        }
        let (outer, len, inner) = axis_split(&base, axis);
        let mut shape = base;
        shape[axis] = end - start;
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            let off = o * len * inner;
            out.extend_from_slice(&xd[off + start * inner..off + end * inner]);
        }
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Bilinear upsampling of a `C x H x W` map by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = dims3("upsample_bilinear", self.shape(x))?;
        if factor == 0 || h == 0 || w == 0 {
            return Err(TensorError::InvalidShape {
                op: "upsample_bilinear",
                shape: self.shape(x).to_vec(),
                reason: format!("factor {factor}"),
            });
        }
        let (ty, tx) = (bilinear_axis::<T>(h, factor), bilinear_axis::<T>(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.val(x).data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    out[(ch * ho + oy) * wo + ox] = wy0
                        * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::Upsample { x, factor },
        )
    }

    /// Mean over the spatial axes of a `C x H x W` map, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3("global_avg_pool", self.shape(x))?;
        let n = T::lit((h * w) as f64);
        let out = self
            .val(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        self.push(Tensor::from_parts(vec![c], out), Op::GlobalAvgPool(x))
    }

    /// Inverted dropout driven by the supplied generator. With `rate == 0`
    /// the input is returned unchanged and nothing is recorded.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.val(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = Tensor::from_parts(
            self.shape(x).to_vec(),
            self.val(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect(),
        );
        self.push(out, Op::Dropout { x, mask })
    }

    /// Mean pixelwise cross-entropy of `2 x H x W` logits against a binary
    /// target (`true` = class 1).
    pub fn cross_entropy_2class(&mut self, logits: Var, target: &[bool]) -> Result<Var> {
        let (c, h, w) = dims3("cross_entropy", self.shape(logits))?;
        if c != 2 || target.len() != h * w {
            return Err(shape_err("cross_entropy", self.shape(logits), &[h * w]));
        }
        let ld = self.val(logits).data();
        let n = h * w;
        let mut probs = vec![T::zero(); 2 * n];
        let mut total = T::zero();
        for p in 0..n {
            let (a, b) = (ld[p], ld[n + p]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            probs[p] = (a - lse).exp();
            probs[n + p] = (b - lse).exp();
            total = total + lse - if target[p] { b } else { a };
        }
        let loss = total / T::lit(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Column sums of an `M x D` matrix, giving `1 x D`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let (m, d) = dims2("sum_axis0", self.shape(x))?;
        let xd = self.val(x).data();
        let out = (0..d)
            .map(|j| (0..m).map(|i| xd[i * d + j]).sum())
            .collect();
        self.push(Tensor::from_parts(vec![1, d], out), Op::SumAxis0(x))
    }

    /// Scales each row of an `M x D` matrix to unit L2 norm (norms are
    /// floored at [`L2_NORM_FLOOR`]).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = dims2("l2_normalize_rows", self.shape(x))?;
        let floor = T::lit(L2_NORM_FLOOR);
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(xd.len());
        let mut norms = Vec::new();
        for row in xd.chunks(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::L2NormRows { x, norms })
    }

    /// Divides each row of an `M x D` matrix by the matching entry of an
    /// `M x 1` column.
    pub fn div_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = dims2("div_col", self.shape(a))?;
        if self.shape(b) != [m, 1] {
            return Err(shape_err("div_col", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let out = (0..m * d).map(|i| ad[i] / bd[i / d]).collect();
        self.push(Tensor::from_parts(vec![m, d], out), Op::DivCol(a, b))
    }

    /// Selects rows of a `V x C` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = dims2("gather_rows", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Contract(format!(
                "row index {bad} out of range for table with {v} rows"
            )));
        }
        let td = self.val(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), c], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Rotates a bank `n x C_out x C_in x k x k` of kernels, kernel `i` by
    /// `theta[i]` radians, with bilinear resampling about the kernel center.
    pub fn rotate_kernels(&mut self, w: Var, theta: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let [n, c_out, c_in, k, k2] = ws[..] else {
            return Err(TensorError::InvalidShape {
                op: "rotate_kernels",
                shape: ws,
                reason: "expected n x C_out x C_in x k x k".into(),
            });
        };
        if k != k2 || k % 2 == 0 {
            return Err(TensorError::Contract(format!(
                "rotate_kernels needs an odd square kernel, got {k}x{k2}"
            )));
        }
        if self.val(theta).numel() != n {
            return Err(shape_err("rotate_kernels", &ws, self.shape(theta)));
        }
        let plane = k * k;
        let per_kernel = c_out * c_in;
        let wd = self.val(w).data();
        let mut out = vec![T::zero(); wd.len()];
        for i in 0..n {
            let taps = rotation_taps(k, self.val(theta).data()[i]);
            for p in 0..per_kernel {
                let base = (i * per_kernel + p) * plane;
                for t in &taps {
                    out[base + t.dst] = out[base + t.dst] + t.weight * wd[base + t.src];
                }
            }
        }
        self.push(Tensor::from_parts(ws, out), Op::RotateKernels { w, theta })
    }

    /// Computes gradient contributions of node `i` to its inputs.
    pub(super) fn backprop(&self, i: usize, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let g = gy.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", self.shape(*a))?;
                let n = self.shape(*b)[1];
                let bt = transpose_raw(self.val(*b).data(), k, n);
                let at = transpose_raw(self.val(*a).data(), m, k);
                vec![
                    (
                        *a,
                        Tensor::from_parts(vec![m, k], matmul_raw(g, &bt, m, n, k)),
                    ),
                    (
                        *b,
                        Tensor::from_parts(vec![k, n], matmul_raw(&at, g, k, m, n)),
                    ),
                ]
            }
            Op::Transpose(a) => {
                let (m, n) = dims2("transpose", self.shape(*a))?;
                vec![(*a, Tensor::from_parts(vec![m, n], transpose_raw(g, n, m)))]
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let ga = self.reduce_bcast(*a, gy, |_| T::one());
                let gb = self.reduce_bcast(*b, gy, |_| sign);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ga = self.reduce_bcast(*a, gy, |j| {
                    if tb.is_scalar() {
                        tb.item()
                    } else {
                        tb.data()[j]
                    }
                });
                let gb = self.reduce_bcast(*b, gy, |j| {
                    if ta.is_scalar() {
                        ta.item()
                    } else {
                        ta.data()[j]
                    }
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, gy.map(|v| v * *c))],
            Op::AddConst(a) => vec![(*a, gy.clone())],
            Op::Reshape(a) => vec![(*a, gy.reshape(self.shape(*a))?)],
            Op::Relu(a) => {
                let x = self.val(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect();
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::Conv1d { x, w, b } => {
                let (l, c_in) = dims2("conv1d", self.shape(*x))?;
                let c_out = self.shape(*w)[0];
                let (xd, wd) = (self.val(*x).data(), self.val(*w).data());
                // dx = gy . w ; dw = gy^T . x
                let dx = matmul_raw(g, wd, l, c_out, c_in);
                let gt = transpose_raw(g, l, c_out);
                let dw = matmul_raw(&gt, xd, c_out, l, c_in);
                let db = (0..c_out)
                    .map(|o| (0..l).map(|t| g[t * c_out + o]).sum())
                    .collect();
                vec![
                    (*x, Tensor::from_parts(vec![l, c_in], dx)),
                    (*w, Tensor::from_parts(vec![c_out, c_in], dw)),
                    (*b, Tensor::from_parts(vec![c_out], db)),
                ]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let d = self.conv2d_dims(*x, *w, *stride, *pad)?;
                let (dx, dw, db) = conv2d_backward(&d, self.val(*x).data(), self.val(*w).data(), g);
                let mut v = vec![
                    (*x, Tensor::from_parts(self.shape(*x).to_vec(), dx)),
                    (*w, Tensor::from_parts(self.shape(*w).to_vec(), dw)),
                ];
                if let Some(b) = b {
                    v.push((*b, Tensor::from_parts(vec![d.c_out], db)));
                }
                v
            }
            Op::InstanceNorm { x, inv_std } => {
                let (l, c) = dims2("instance_norm", y.shape())?;
                let yd = y.data();
                let lf = T::lit(l as f64);
                let mut dx = vec![T::zero(); l * c];
                for ch in 0..c {
                    let sum_g: T = (0..l).map(|t| g[t * c + ch]).sum();
                    let sum_gy: T = (0..l).map(|t| g[t * c + ch] * yd[t * c + ch]).sum();
                    for t in 0..l {
                        let idx = t * c + ch;
                        dx[idx] = inv_std[ch] * (g[idx] - sum_g / lf - yd[idx] * sum_gy / lf);
                    }
                }
                vec![(*x, Tensor::from_parts(vec![l, c], dx))]
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), dx))]
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(y.shape(), *axis);
                let mut grads: Vec<Vec<T>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.val(*p).numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let len = self.shape(*p)[*axis] * inner;
                        grads[pi].extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                parts
                    .iter()
                    .zip(grads)
                    .map(|(p, d)| (*p, Tensor::from_parts(self.shape(*p).to_vec(), d)))
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&xs, *axis);
                let n = y.shape()[*axis];
                let mut dx = vec![T::zero(); xs.iter().product()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    dx[dst..dst + n * inner]
                        .copy_from_slice(&g[o * n * inner..(o + 1) * n * inner]);
                }
                vec![(*x, Tensor::from_parts(xs, dx))]
            }
            Op::Upsample { x, factor } => {
                let (c, h, w) = dims3("upsample_bilinear", self.shape(*x))?;
                let (ty, tx) = (
                    bilinear_axis::<T>(h, *factor),
                    bilinear_axis::<T>(w, *factor),
                );
                let wo = w * factor;
                let ho = h * factor;
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gv = g[(ch * ho + oy) * wo + ox];
                            plane[y0 * w + x0] = plane[y0 * w + x0] + gv * wy0 * wx0;
                            plane[y0 * w + x1] = plane[y0 * w + x1] + gv * wy0 * wx1;
                            plane[y1 * w + x0] = plane[y1 * w + x0] + gv * wy1 * wx0;
                            plane[y1 * w + x1] = plane[y1 * w + x1] + gv * wy1 * wx1;
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(vec![c, h, w], dx))]
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = dims3("global_avg_pool", self.shape(*x))?;
                let n = T::lit((h * w) as f64);
                let dx = (0..c * h * w).map(|i| g[i / (h * w)] / n).collect();
                vec![(*x, Tensor::from_parts(vec![c, h, w], dx))]
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), dx))]
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let n = target.len();
                let scale = g[0] / T::lit(n as f64);
                let mut dx = vec![T::zero(); 2 * n];
                for p in 0..n {
                    let (t0, t1) = if target[p] {
                        (T::zero(), T::one())
                    } else {
                        (T::one(), T::zero())
                    };
                    dx[p] = (probs[p] - t0) * scale;
                    dx[n + p] = (probs[n + p] - t1) * scale;
                }
                vec![(
                    *logits,
                    Tensor::from_parts(self.shape(*logits).to_vec(), dx),
                )]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(self.shape(*x), g[0]))],
            Op::SumAxis0(x) => {
                let (m, d) = dims2("sum_axis0", self.shape(*x))?;
                let dx = (0..m * d).map(|i| g[i % d]).collect();
                vec![(*x, Tensor::from_parts(vec![m, d], dx))]
            }
            Op::L2NormRows { x, norms } => {
                let (_, d) = dims2("l2_normalize_rows", self.shape(*x))?;
                let floor = T::lit(L2_NORM_FLOOR);
                let xd = self.val(*x).data();
                let mut dx = Vec::with_capacity(xd.len());
                for (r, ((yr, gr), xr)) in y
                    .data()
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(xd.chunks(d))
                    .enumerate()
                {
                    let norm = norms[r];
                    let raw_norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw_norm > floor {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| (b - a * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|&b| b / norm));
                    }
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), dx))]
            }
            Op::DivCol(a, b) => {
                let (m, d) = dims2("div_col", self.shape(*a))?;
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let da = (0..m * d).map(|i| g[i] / bd[i / d]).collect();
                let db = (0..m)
                    .map(|r| {
                        let s: T = (0..d).map(|j| g[r * d + j] * ad[r * d + j]).sum();
                        -s / (bd[r] * bd[r])
                    })
                    .collect();
                vec![
                    (*a, Tensor::from_parts(vec![m, d], da)),
                    (*b, Tensor::from_parts(vec![m, 1], db)),
                ]
            }
            Op::GatherRows { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let c = ts[1];
                let mut dt = vec![T::zero(); ts[0] * c];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] = dt[id * c + j] + g[r * c + j];
                    }
                }
                vec![(*table, Tensor::from_parts(ts, dt))]
            }
            Op::RotateKernels { w, theta } => {
                let ws = self.shape(*w).to_vec();
                let (n, k) = (ws[0], ws[3]);
                let plane = k * k;
                let per_kernel = ws[1] * ws[2];
                let wd = self.val(*w).data();
                let mut dw = vec![T::zero(); wd.len()];
                let mut dtheta = vec![T::zero(); n];
                for i in 0..n {
                    let taps = rotation_taps(k, self.val(*theta).data()[i]);
                    for p in 0..per_kernel {
                        let base = (i * per_kernel + p) * plane;
                        for t in &taps {
                            let gv = g[base + t.dst];
                            dw[base + t.src] = dw[base + t.src] + t.weight * gv;
                            dtheta[i] = dtheta[i] + t.dweight * wd[base + t.src] * gv;
                        }
                    }
                }
                vec![
                    (*w, Tensor::from_parts(ws, dw)),
                    (
                        *theta,
                        Tensor::from_parts(self.shape(*theta).to_vec(), dtheta),
                    ),
                ]
            }
        };
        Ok(out)
    }

    /// Gradient of a broadcast binary operand: elementwise `gy * f(j)`,
    /// summed when the operand was a broadcast scalar.
    fn reduce_bcast(&self, operand: Var, gy: &Tensor<T>, f: impl Fn(usize) -> T) -> Tensor<T> {
        let shape = self.shape(operand).to_vec();
        let full: Vec<T> = gy
            .data()
            .iter()
            .enumerate()
            .map(|(j, &g)| g * f(j))
            .collect();
        if shape.iter().product::<usize>() == full.len() {
            Tensor::from_parts(shape, full)
        } else {
            Tensor::from_parts(shape, vec![full.into_iter().sum()])
        }
    }
}

//! Operations recordable on a [`Tape`] and their backward rules.

use super::conv::{self, col2im, gemm, im2col, Window, KERNEL};
use super::{Tape, Var};
use crate::error::{Error, Result};

/// Backward rule for an operation implemented outside this module.
pub trait CustomBackward: Send + Sync {
    /// Returns one entry per input, `None` for inputs that get no gradient.
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op<'a> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        win: Window,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        win: Window,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    L2Normalize {
        input: Var,
        norm: f64,
        eps: f64,
    },
    Softmax(Var),
    Stack(Vec<Var>),
    MaxAxis0 {
        input: Var,
        argmax: Vec<usize>,
    },
    MeanAxis0(Var),
    SumAxis0(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward + 'a>,
    },
}

impl Op<'_> {
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::InstanceNorm { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::MaxAxis0 { input, .. }
            | Op::Permute { input, .. } => vec![*input],
            Op::Relu(x) | Op::Softmax(x) | Op::MeanAxis0(x) | Op::SumAxis0(x) | Op::Sum(x) => {
                vec![*x]
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Stack(xs) => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub fn backward(
        &self,
        tape: &Tape<'_>,
        out: &[f64],
        g: &[f64],
        wanted: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input, weight, win, ..
            } => {
                let x = tape.value(*input);
                let w = tape.value(*weight);
                let c_out = tape.shape(*weight)[0];
                let (rows, ncols) = (win.rows(), win.cols());
                let gx = wanted[0].then(|| {
                    let mut gcols = vec![0.0; rows * ncols];
                    gemm(rows, c_out, ncols, w, true, g, false, 0.0, &mut gcols);
                    let mut gx = vec![0.0; x.len()];
                    col2im(&gcols, win, &mut gx);
                    gx
                });
                let gw = wanted[1].then(|| {
                    let cols = im2col(x, win);
                    let mut gw = vec![0.0; w.len()];
                    gemm(c_out, ncols, rows, g, false, &cols, true, 0.0, &mut gw);
                    gw
                });
                let gb = wanted[2].then(|| channel_sums(g, c_out));
                vec![gx, gw, gb]
            }
            Op::ConvTranspose2d {
                input, weight, win, ..
            } => {
                // Forward was out = col2im(W^T x); `win` describes the
                // convolution that maps the output back onto the input grid.
                let x = tape.value(*input);
                let w = tape.value(*weight);
                let c_in = tape.shape(*weight)[0];
                let (rows, ncols) = (win.rows(), win.cols());
                let gcols = im2col(g, win);
                let gx = wanted[0].then(|| {
                    let mut gx = vec![0.0; x.len()];
                    gemm(c_in, rows, ncols, w, false, &gcols, false, 0.0, &mut gx);
                    gx
                });
                let gw = wanted[1].then(|| {
                    let mut gw = vec![0.0; w.len()];
                    gemm(c_in, ncols, rows, x, false, &gcols, true, 0.0, &mut gw);
                    gw
                });
                let gb = wanted[2].then(|| channel_sums(g, win.channels));
                vec![gx, gw, gb]
            }
            Op::InstanceNorm { inv_std, .. } => {
                let channels = inv_std.len();
                let plane = out.len() / channels;
                let n = plane as f64;
                let mut gx = vec![0.0; out.len()];
                for c in 0..channels {
                    let range = c * plane..(c + 1) * plane;
                    let y = &out[range.clone()];
                    let dy = &g[range.clone()];
                    let sum_dy: f64 = dy.iter().sum();
                    let sum_dy_y: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                    let k = inv_std[c] / n;
                    for ((dst, &yi), &dyi) in gx[range].iter_mut().zip(y).zip(dy) {
                        *dst = k * (n * dyi - sum_dy - yi * sum_dy_y);
                    }
                }
                vec![Some(gx)]
            }
            Op::Relu(x) => {
                let x = tape.value(*x);
                let gx = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![Some(gx)]
            }
            Op::Linear { input, weight, .. } => {
                let x = tape.value(*input);
                let w = tape.value(*weight);
                let (m, n) = (g.len(), x.len());
                let gx = wanted[0].then(|| {
                    let mut gx = vec![0.0; n];
                    gemm(1, m, n, g, false, w, false, 0.0, &mut gx);
                    gx
                });
                let gw = wanted[1].then(|| {
                    let mut gw = vec![0.0; m * n];
                    for (row, &gi) in gw.chunks_exact_mut(n).zip(g) {
                        for (dst, &xj) in row.iter_mut().zip(x) {
                            *dst = gi * xj;
                        }
                    }
                    gw
                });
                let gb = wanted[2].then(|| g.to_vec());
                vec![gx, gw, gb]
            }
            Op::L2Normalize { norm, eps, .. } => {
                let gx = if *norm >= *eps && *norm > 0.0 {
                    let dot: f64 = out.iter().zip(g).map(|(a, b)| a * b).sum();
                    out.iter()
                        .zip(g)
                        .map(|(&yi, &gi)| (gi - yi * dot) / norm)
                        .collect()
                } else {
                    g.iter().map(|gi| gi / eps).collect()
                };
                vec![Some(gx)]
            }
            Op::Softmax(x) => {
                let k = tape.shape(*x)[0];
                let inner = out.len() / k;
                let mut gx = vec![0.0; out.len()];
                for j in 0..inner {
                    let dot: f64 = (0..k).map(|v| out[v * inner + j] * g[v * inner + j]).sum();
                    for v in 0..k {
                        let idx = v * inner + j;
                        gx[idx] = out[idx] * (g[idx] - dot);
                    }
                }
                vec![Some(gx)]
            }
            Op::Stack(xs) => {
                let inner = out.len() / xs.len();
                g.chunks_exact(inner).map(|c| Some(c.to_vec())).collect()
            }
            Op::MaxAxis0 { input, argmax } => {
                let mut gx = vec![0.0; tape.value(*input).len()];
                let inner = argmax.len();
                for (j, &v) in argmax.iter().enumerate() {
                    gx[v * inner + j] = g[j];
                }
                vec![Some(gx)]
            }
            Op::MeanAxis0(x) => {
                let k = tape.shape(*x)[0];
                let scale = 1.0 / k as f64;
                let gx = (0..k).flat_map(|_| g.iter().map(|gi| gi * scale)).collect();
                vec![Some(gx)]
            }
            Op::SumAxis0(x) => {
                let k = tape.shape(*x)[0];
                let gx = (0..k).flat_map(|_| g.iter().copied()).collect();
                vec![Some(gx)]
            }
            Op::Add(_, _) => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let ga = wanted[0].then(|| g.iter().zip(bv).map(|(x, y)| x * y).collect());
                let gb = wanted[1].then(|| g.iter().zip(av).map(|(x, y)| x * y).collect());
                vec![ga, gb]
            }
            Op::Sum(x) => vec![Some(vec![g[0]; tape.value(*x).len()])],
            Op::Permute { input, perm } => {
                let mut gx = vec![0.0; tape.value(*input).len()];
                for (o, &src) in perm.iter().enumerate() {
                    gx[src] += g[o];
                }
                vec![Some(gx)]
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&[f64]> = inputs.iter().map(|v| tape.value(*v)).collect();
                let mut grads = rule.backward(&values, out, g);
                grads.resize(inputs.len(), None);
                grads
            }
        }
    }
}

fn channel_sums(g: &[f64], channels: usize) -> Vec<f64> {
    let plane = g.len() / channels;
    g.chunks_exact(plane).map(|c| c.iter().sum()).collect()
}

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(format!(
            "{what}: expected rank {rank}, got shape {shape:?}"
        )));
    }
    Ok(())
}

impl<'a> Tape<'a> {
    /// Zero-padded 3x3 cross-correlation of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, 3, 3]` weight.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        expect_rank(&xs, 3, "conv2d input")?;
        expect_rank(&ws, 4, "conv2d weight")?;
        if ws[2] != KERNEL || ws[3] != KERNEL {
            return Err(Error::shape(format!("conv2d: kernel must be 3x3, got {ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(Error::shape(format!(
                "conv2d: weight expects {} input channels, input has {}",
                ws[1], xs[0]
            )));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                self.shape(bias),
                ws[0]
            )));
        }
        let (out_h, out_w) = match (
            conv::conv_output_size(xs[1], stride, padding),
            conv::conv_output_size(xs[2], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: input {xs:?} too small for stride {stride}, padding {padding}"
                )))
            }
        };
        let win = Window {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            stride,
            padding,
            out_h,
            out_w,
        };
        let c_out = ws[0];
        let cols = im2col(self.value(input), &win);
        let ncols = win.cols();
        let mut out = vec![0.0; c_out * ncols];
        for (row, &b) in out.chunks_exact_mut(ncols).zip(self.value(bias)) {
            row.fill(b);
        }
        gemm(c_out, win.rows(), ncols, self.value(weight), false, &cols, false, 1.0, &mut out);
        Ok(self.push_op(
            vec![c_out, out_h, out_w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
            },
        ))
    }

    /// Transposed 3x3 convolution, the adjoint of [`Tape::conv2d`] with the
    /// same weight. The weight is `[C_in, C_out, 3, 3]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        expect_rank(&xs, 3, "conv_transpose2d input")?;
        expect_rank(&ws, 4, "conv_transpose2d weight")?;
        if ws[2] != KERNEL || ws[3] != KERNEL {
            return Err(Error::shape(format!(
                "conv_transpose2d: kernel must be 3x3, got {ws:?}"
            )));
        }
        if ws[0] != xs[0] {
            return Err(Error::shape(format!(
                "conv_transpose2d: weight expects {} input channels, input has {}",
                ws[0], xs[0]
            )));
        }
        let c_out = ws[1];
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(format!(
                "conv_transpose2d: bias shape {:?} does not match {c_out} output channels",
                self.shape(bias)
            )));
        }
        let size = |n| conv::conv_transpose_output_size(n, stride, padding, output_padding);
        let (out_h, out_w) = match (size(xs[1]), size(xs[2])) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv_transpose2d: invalid geometry for input {xs:?}, stride {stride}, \
                     padding {padding}, output padding {output_padding}"
                )))
            }
        };
        let win = Window {
            channels: c_out,
            height: out_h,
            width: out_w,
            stride,
            padding,
            out_h: xs[1],
            out_w: xs[2],
        };
        if conv::conv_output_size(out_h, stride, padding) != Some(xs[1])
            || conv::conv_output_size(out_w, stride, padding) != Some(xs[2])
        {
            return Err(Error::shape("conv_transpose2d: geometry is not invertible"));
        }
        let (rows, ncols) = (win.rows(), win.cols());
        let mut cols = vec![0.0; rows * ncols];
        gemm(rows, xs[0], ncols, self.value(weight), true, self.value(input), false, 0.0, &mut cols);
        let plane = out_h * out_w;
        let mut out = vec![0.0; c_out * plane];
        for (chunk, &b) in out.chunks_exact_mut(plane).zip(self.value(bias)) {
            chunk.fill(b);
        }
        col2im(&cols, &win, &mut out);
        Ok(self.push_op(
            vec![c_out, out_h, out_w],
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                win,
            },
        ))
    }

    /// Per-channel normalization to zero mean and unit variance, no affine.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        expect_rank(&shape, 3, "instance_norm input")?;
        let plane = shape[1] * shape[2];
        if plane == 0 {
            return Err(Error::shape("instance_norm: empty spatial extent"));
        }
        let x = self.value(input);
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(shape[0]);
        for (src, dst) in x.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * s;
            }
            inv_std.push(s);
        }
        Ok(self.push_op(shape, out, Op::InstanceNorm { input, inv_std }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        self.push_op(shape, out, Op::Relu(input))
    }

    /// Affine map of the flattened input by a `[M, N]` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = self.value(input).len();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || ws[1] != n {
            return Err(Error::shape(format!(
                "linear: weight {ws:?} incompatible with input of {n} values"
            )));
        }
        let m = ws[0];
        if self.shape(bias) != [m] {
            return Err(Error::shape(format!(
                "linear: bias shape {:?}, expected [{m}]",
                self.shape(bias)
            )));
        }
        let mut out = self.value(bias).to_vec();
        gemm(m, n, 1, self.value(weight), false, self.value(input), false, 1.0, &mut out);
        Ok(self.push_op(
            vec![m],
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// `x / max(||x||, eps)`.
    pub fn l2_normalize(&mut self, input: Var, eps: f64) -> Var {
        let x = self.value(input);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        let out = x.iter().map(|v| v / denom).collect();
        let shape = self.shape(input).to_vec();
        self.push_op(shape, out, Op::L2Normalize { input, norm, eps })
    }

    /// Softmax over the leading axis; for a vector this is the usual softmax.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let k = match shape.first() {
            Some(&k) if k > 0 => k,
            _ => return Err(Error::shape("softmax: needs a nonempty leading axis")),
        };
        let x = self.value(input);
        let inner = x.len() / k;
        let mut out = vec![0.0; x.len()];
        for j in 0..inner {
            let max = (0..k).map(|v| x[v * inner + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in 0..k {
                let e = (x[v * inner + j] - max).exp();
                out[v * inner + j] = e;
                total += e;
            }
            for v in 0..k {
                out[v * inner + j] /= total;
            }
        }
        Ok(self.push_op(shape, out, Op::Softmax(input)))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(first) = inputs.first() else {
            return Err(Error::shape("stack: empty input list"));
        };
        let inner_shape = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(inputs.len() * self.value(*first).len());
        for v in inputs {
            if self.shape(*v) != inner_shape.as_slice() {
                return Err(Error::shape(format!(
                    "stack: shape {:?} differs from {inner_shape:?}",
                    self.shape(*v)
                )));
            }
            out.extend_from_slice(self.value(*v));
        }
        let mut shape = vec![inputs.len()];
        shape.extend(inner_shape);
        Ok(self.push_op(shape, out, Op::Stack(inputs.to_vec())))
    }

    /// Elementwise maximum over the leading axis; ties go to the lowest index.
    pub fn max_axis0(&mut self, input: Var) -> Result<Var> {
        let (k, inner, shape) = self.split_axis0(input)?;
        let x = self.value(input);
        let mut out = x[..inner].to_vec();
        let mut argmax = vec![0usize; inner];
        for v in 1..k {
            for j in 0..inner {
                let candidate = x[v * inner + j];
                if candidate > out[j] {
                    out[j] = candidate;
                    argmax[j] = v;
                }
            }
        }
        Ok(self.push_op(shape, out, Op::MaxAxis0 { input, argmax }))
    }

    pub fn mean_axis0(&mut self, input: Var) -> Result<Var> {
        let (k, inner, shape) = self.split_axis0(input)?;
        let out = reduce_axis0(self.value(input), k, inner)
            .into_iter()
            .map(|s| s / k as f64)
            .collect();
        Ok(self.push_op(shape, out, Op::MeanAxis0(input)))
    }

    pub fn sum_axis0(&mut self, input: Var) -> Result<Var> {
        let (k, inner, shape) = self.split_axis0(input)?;
        let out = reduce_axis0(self.value(input), k, inner);
        Ok(self.push_op(shape, out, Op::SumAxis0(input)))
    }

    fn split_axis0(&self, input: Var) -> Result<(usize, usize, Vec<usize>)> {
        let shape = self.shape(input);
        match shape.first() {
            Some(&k) if k > 0 => Ok((k, self.value(input).len() / k, shape[1..].to_vec())),
            _ => Err(Error::shape("reduction over an empty leading axis")),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, Op::Mul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).iter().sum();
        self.push_op(Vec::new(), vec![total], Op::Sum(input))
    }

    /// Gathers `out[i] = input[perm[i]]` into a tensor of the given shape.
    pub fn permute(&mut self, input: Var, shape: Vec<usize>, perm: Vec<usize>) -> Result<Var> {
        let x = self.value(input);
        if perm.len() != shape.iter().product::<usize>() || perm.iter().any(|&p| p >= x.len()) {
            return Err(Error::shape("permute: index map does not fit the input"));
        }
        let out = perm.iter().map(|&p| x[p]).collect();
        Ok(self.push_op(shape, out, Op::Permute { input, perm }))
    }

    /// Records an externally computed value with its backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        rule: Box<dyn CustomBackward + 'a>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("custom: value does not match shape"));
        }
        Ok(self.push_op(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        ))
    }
}

fn reduce_axis0(x: &[f64], k: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for v in 0..k {
        for (o, xi) in out.iter_mut().zip(&x[v * inner..(v + 1) * inner]) {
            *o += xi;
        }
    }
    out
}

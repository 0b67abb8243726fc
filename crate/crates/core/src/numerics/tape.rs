//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! Every operator appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid topological
//! order because inputs always precede their consumers.

use std::fmt;

use super::conv::{self, ConvGeom};
use super::fft;
use super::{NumericsError, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2,
    Upsample2,
    Relu,
    Concat,
    Norm,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Log,
    Sum,
    Mean,
    Softmax,
    Rfft2,
    Irfft2,
    CrossEntropy,
    SoftDice,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 19] = [
        OpKind::Conv2d,
        OpKind::MaxPool2,
        OpKind::Upsample2,
        OpKind::Relu,
        OpKind::Concat,
        OpKind::Norm,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Log,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::Rfft2,
        OpKind::Irfft2,
        OpKind::CrossEntropy,
        OpKind::SoftDice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::Relu => "relu",
            OpKind::Concat => "concat",
            OpKind::Norm => "norm",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::Rfft2 => "rfft2",
            OpKind::Irfft2 => "irfft2",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SoftDice => "soft_dice",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<S> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        per_instance: bool,
        batch_stats: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        k: S,
    },
    AddScalar {
        a: usize,
    },
    Log {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Softmax {
        x: usize,
    },
    Rfft2 {
        x: usize,
    },
    Irfft2 {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<S>,
        targets: Vec<u8>,
        counted: Vec<bool>,
        count: usize,
    },
    SoftDice {
        p: usize,
        onehot_sums: Vec<S>,
        targets: Vec<u8>,
        eps: S,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::Relu { .. } => OpKind::Relu,
            Op::Concat { .. } => OpKind::Concat,
            Op::Norm { .. } => OpKind::Norm,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Log { .. } => OpKind::Log,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Rfft2 { .. } => OpKind::Rfft2,
            Op::Irfft2 { .. } => OpKind::Irfft2,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SoftDice { .. } => OpKind::SoftDice,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Mean and biased variance per channel from a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Gradients of a scalar with respect to every node that influences it.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros if it did not influence the output.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<S> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
    fault: Option<OpKind>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> NumericsError {
    NumericsError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

pub(crate) fn softmax_forward<S: Real>(x: &[S], out: &mut [S], n: usize, c: usize, hw: usize) {
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let mut m = S::neg_infinity();
            for ch in 0..c {
                m = m.max(x[base + ch * hw + i]);
            }
            let mut z = S::zero();
            for ch in 0..c {
                let e = (x[base + ch * hw + i] - m).exp();
                out[base + ch * hw + i] = e;
                z = z + e;
            }
            for ch in 0..c {
                out[base + ch * hw + i] = out[base + ch * hw + i] / z;
            }
        }
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of `kind` by a factor of 1.5. Used only to
    /// confirm that gradient checks catch a wrong rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, cin, h, w) = self.value(x).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(invalid("conv2d", &ws, "kernel must be square with odd size"));
        }
        if stride == 0 {
            return Err(invalid("conv2d", &ws, "stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d", &ws, self.shape(b)));
            }
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let (sh, sw) = (h + 2 * padding - k, w + 2 * padding - k);
        if sh % stride != 0 || sw % stride != 0 {
            return Err(invalid(
                "conv2d",
                &xs,
                format!("padded extent minus kernel not divisible by stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            pad: padding,
            stride,
            ho: sh / stride + 1,
            wo: sw / stride + 1,
        };
        let mut out = vec![S::zero(); n * cout * geom.ho * geom.wo];
        conv::forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: weight.0,
                b: bias.map(|b| b.0),
                geom,
            },
        ))
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2")?;
        if h % 2 != 0 {
            return Err(invalid("max_pool2", self.shape(x), format!("height {h} is odd")));
        }
        if w % 2 != 0 {
            return Err(invalid("max_pool2", self.shape(x), format!("width {w} is odd")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * i + di) * w + 2 * j + dj;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + i * wo + j;
                    out[o] = plane[best];
                    argmax[o] = (p * h * w + best) as u32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x: x.0, argmax }))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample2")?;
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![S::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[p * ho * wo + i * wo + j] = src[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample2 { x: x.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(S::zero()));
        self.push(value, Op::Relu { x: x.0 })
    }

    /// Channel-wise concatenation of N×Ci×H×W tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Invalid("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4("concat")?;
        let mut ctotal = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(mismatch("concat", self.shape(first), self.shape(p)));
            }
            ctotal += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctotal * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![n, ctotal, h, w], out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|v| v.0).collect(),
            },
        ))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4(op)?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch(op, self.shape(x), self.shape(p)));
            }
        }
        Ok((n, c, h * w))
    }

    /// Batch normalization using the statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.check_affine("batch_norm", x, gamma, beta)?;
        let (var, stats) = self.norm_with_batch_stats(x, gamma, beta, eps, n, c, hw, false)?;
        Ok((var, stats))
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, hw) = self.check_affine("instance_norm", x, gamma, beta)?;
        if hw < 2 {
            return Err(invalid("instance_norm", self.shape(x), "needs at least 2 pixels"));
        }
        Ok(self.norm_with_batch_stats(x, gamma, beta, eps, n, c, hw, true)?.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_with_batch_stats(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        n: usize,
        c: usize,
        hw: usize,
        per_instance: bool,
    ) -> Result<(Var, BatchStats)> {
        let groups = if per_instance { n * c } else { c };
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![S::zero(); src.len()];
        let mut out = vec![S::zero(); src.len()];
        let mut inv_std = vec![S::zero(); groups];
        let mut means = vec![0.0; groups];
        let mut vars = vec![0.0; groups];
        let starts = norm_group_starts(n, c, hw, per_instance);
        let count = starts[0].len() * hw;
        for (gi, spans) in starts.iter().enumerate() {
            let ch = gi % c;
            let mut mean = S::zero();
            for &s in spans {
                mean = mean + src[s..s + hw].iter().copied().sum::<S>();
            }
            mean = mean / S::lit(count as f64);
            let mut var = S::zero();
            for &s in spans {
                for &v in &src[s..s + hw] {
                    var = var + (v - mean) * (v - mean);
                }
            }
            var = var / S::lit(count as f64);
            let istd = S::one() / (var + S::lit(eps)).sqrt();
            inv_std[gi] = istd;
            means[gi] = mean.as_f64();
            vars[gi] = var.as_f64();
            for &s in spans {
                for i in s..s + hw {
                    xhat[i] = (src[i] - mean) * istd;
                    out[i] = xhat[i] * g[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let var = self.push(
            value,
            Op::Norm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                per_instance,
                batch_stats: true,
            },
        );
        Ok((
            var,
            BatchStats {
                mean: means,
                var: vars,
                count,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = self.check_affine("batch_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch("batch_norm", self.shape(x), &[mean.len()]));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let inv_std: Vec<S> = var.iter().map(|&v| S::lit(1.0 / (v + eps).sqrt())).collect();
        let mut xhat = vec![S::zero(); src.len()];
        let mut out = vec![S::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let m = S::lit(mean[ch]);
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    xhat[i] = (src[i] - m) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Norm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                per_instance: false,
                batch_stats: false,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).map(|v| v * k);
        self.push(value, Op::Scale { a: a.0, k })
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).map(|v| v + k);
        self.push(value, Op::AddScalar { a: a.0 })
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= S::zero()) {
            return Err(NumericsError::NonFinite { op: "log" });
        }
        let value = self.value(a).map(|v| v.ln());
        Ok(self.push(value, Op::Log { a: a.0 }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / S::lit(t.len() as f64));
        self.push(value, Op::Mean { a: a.0 })
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let value = super::softmax_channels(self.value(x))?;
        Ok(self.push(value, Op::Softmax { x: x.0 }))
    }

    /// Real 2-D FFT; output is the half spectrum packed as N×2C×H×(W/2+1)
    /// with real and imaginary parts interleaved per channel.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("rfft2")?;
        fft::check_extent("rfft2", self.shape(x), h, w)?;
        let out = fft::rfft2_interleaved(self.value(x).data(), n, c, h, w);
        let value = Tensor::new(vec![n, 2 * c, h, w / 2 + 1], out)?;
        Ok(self.push(value, Op::Rfft2 { x: x.0 }))
    }

    /// Inverse of [`Tape::rfft2`] back to width `out_width`.
    pub fn irfft2(&mut self, x: Var, out_width: usize) -> Result<Var> {
        let (n, c2, h, wf) = self.value(x).dims4("irfft2")?;
        if c2 % 2 != 0 {
            return Err(invalid("irfft2", self.shape(x), "channel count must be even"));
        }
        if out_width / 2 + 1 != wf {
            return Err(invalid(
                "irfft2",
                self.shape(x),
                format!("half-spectrum width {wf} incompatible with output width {out_width}"),
            ));
        }
        fft::check_extent("irfft2", self.shape(x), h, out_width)?;
        let out = fft::irfft2_interleaved(self.value(x).data(), n, c2 / 2, h, out_width);
        let value = Tensor::new(vec![n, c2 / 2, h, out_width], out)?;
        Ok(self.push(value, Op::Irfft2 { x: x.0 }))
    }

    /// Mean of `-log softmax(logits)[target]` over pixels whose target is not
    /// `ignore`. Zero (with zero gradient) when no pixel is counted.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], ignore: Option<u8>) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4("cross_entropy")?;
        let hw = h * w;
        if targets.len() != n * hw {
            return Err(mismatch("cross_entropy", self.shape(logits), &[n, h, w]));
        }
        let x = self.value(logits).data();
        let mut probs = vec![S::zero(); x.len()];
        softmax_forward(x, &mut probs, n, c, hw);
        let mut counted = vec![false; targets.len()];
        let mut total = S::zero();
        let mut count = 0usize;
        for b in 0..n {
            let base = b * c * hw;
            for i in 0..hw {
                let t = targets[b * hw + i];
                if Some(t) == ignore {
                    continue;
                }
                if t as usize >= c {
                    return Err(NumericsError::Invalid(format!(
                        "cross_entropy: target {t} out of range for {c} classes"
                    )));
                }
                let mut m = S::neg_infinity();
                for ch in 0..c {
                    m = m.max(x[base + ch * hw + i]);
                }
                let mut z = S::zero();
                for ch in 0..c {
                    z = z + (x[base + ch * hw + i] - m).exp();
                }
                total = total + (m + z.ln() - x[base + t as usize * hw + i]);
                counted[b * hw + i] = true;
                count += 1;
            }
        }
        let loss = if count == 0 {
            S::zero()
        } else {
            total / S::lit(count as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                counted,
                count,
            },
        ))
    }

    /// `1 - mean_{n,c} (2Σ p·g + eps) / (Σ p + Σ g + eps)` with `g` the
    /// one-hot encoding of `targets`; sums run over the pixels of each image.
    pub fn soft_dice(&mut self, probs: Var, targets: &[u8], eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(probs).dims4("soft_dice")?;
        let hw = h * w;
        if targets.len() != n * hw {
            return Err(mismatch("soft_dice", self.shape(probs), &[n, h, w]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(NumericsError::Invalid(format!(
                "soft_dice: target {t} out of range for {c} classes"
            )));
        }
        let p = self.value(probs).data();
        let eps = S::lit(eps);
        let mut onehot_sums = vec![S::zero(); n * c];
        let mut acc = S::zero();
        for b in 0..n {
            for ch in 0..c {
                let (mut inter, mut psum, mut gsum) = (S::zero(), S::zero(), S::zero());
                for i in 0..hw {
                    let pv = p[(b * c + ch) * hw + i];
                    psum = psum + pv;
                    if targets[b * hw + i] as usize == ch {
                        inter = inter + pv;
                        gsum = gsum + S::one();
                    }
                }
                onehot_sums[b * c + ch] = gsum;
                acc = acc + (S::lit(2.0) * inter + eps) / (psum + gsum + eps);
            }
        }
        let loss = S::one() - acc / S::lit((n * c) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                p: probs.0,
                onehot_sums,
                targets: targets.to_vec(),
                eps,
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return Err(invalid("backward", self.shape(root), "root must be a scalar"));
        }
        let seed = Tensor::full(self.shape(root), S::one());
        self.backward_with(root, seed)
    }

    /// Reverse pass from `root` with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if seed.shape() != self.shape(root) {
            return Err(mismatch("backward", self.shape(root), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let contributions = self.node_backward(node, &g);
            grads[id] = Some(g);
            let faulty = self.fault == Some(node.op.kind());
            for (input, mut delta) in contributions {
                if faulty {
                    delta.iter_mut().for_each(|d| *d = *d * S::lit(1.5));
                }
                match &mut grads[input] {
                    Some(existing) => existing
                        .data_mut()
                        .iter_mut()
                        .zip(&delta)
                        .for_each(|(e, d)| *e = *e + *d),
                    slot @ None => {
                        let shape = self.nodes[input].value.shape().to_vec();
                        *slot = Some(Tensor::new(shape, delta)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<S>, g: &Tensor<S>) -> Vec<(usize, Vec<S>)> {
        let gd = g.data();
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = vec![S::zero(); val(*x).len()];
                let mut dw = vec![S::zero(); val(*w).len()];
                let mut db = b.map(|_| vec![S::zero(); geom.cout]);
                conv::backward(
                    geom,
                    val(*x),
                    val(*w),
                    gd,
                    Some(&mut dx),
                    Some(&mut dw),
                    db.as_deref_mut(),
                );
                let mut out = vec![(*x, dx), (*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![S::zero(); val(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] = dx[src as usize] + gd[o];
                }
                vec![(*x, dx)]
            }
            Op::Upsample2 { x } => {
                let shape = self.nodes[*x].value.shape();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![S::zero(); val(*x).len()];
                for p in 0..shape[0] * shape[1] {
                    for i in 0..ho {
                        for j in 0..wo {
                            let d = &mut dx[p * h * w + (i / 2) * w + j / 2];
                            *d = *d + gd[p * ho * wo + i * wo + j];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Relu { x } => {
                let dx = val(*x)
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > S::zero() { d } else { S::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Concat { parts } => {
                let shape = g.shape();
                let (n, hw) = (shape[0], shape[2] * shape[3]);
                let ctotal = shape[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = self.nodes[p].value.shape()[1];
                    let mut dx = Vec::with_capacity(n * pc * hw);
                    for b in 0..n {
                        let start = (b * ctotal + offset) * hw;
                        dx.extend_from_slice(&gd[start..start + pc * hw]);
                    }
                    offset += pc;
                    out.push((p, dx));
                }
                out
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_instance,
                batch_stats,
            } => {
                let shape = g.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let gam = val(*gamma);
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = vec![S::zero(); gd.len()];
                let starts = norm_group_starts(n, c, hw, *per_instance);
                for (gi, spans) in starts.iter().enumerate() {
                    let ch = gi % c;
                    let istd = if *batch_stats || *per_instance {
                        inv_std[gi]
                    } else {
                        inv_std[ch]
                    };
                    let (mut sum_d, mut sum_dx) = (S::zero(), S::zero());
                    for &s in spans {
                        for i in s..s + hw {
                            dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gd[i];
                            let dxhat = gd[i] * gam[ch];
                            sum_d = sum_d + dxhat;
                            sum_dx = sum_dx + dxhat * xhat[i];
                        }
                    }
                    let m = S::lit((spans.len() * hw) as f64);
                    for &s in spans {
                        for i in s..s + hw {
                            let dxhat = gd[i] * gam[ch];
                            dx[i] = if *batch_stats {
                                istd * (dxhat - sum_d / m - xhat[i] * sum_dx / m)
                            } else {
                                istd * dxhat
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Add { a, b } => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
            Op::Sub { a, b } => vec![(*a, gd.to_vec()), (*b, gd.iter().map(|&d| -d).collect())],
            Op::Mul { a, b } => {
                let da = gd.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect();
                let db = gd.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { a, k } => vec![(*a, gd.iter().map(|&d| d * *k).collect())],
            Op::AddScalar { a } => vec![(*a, gd.to_vec())],
            Op::Log { a } => vec![(*a, gd.iter().zip(val(*a)).map(|(&d, &x)| d / x).collect())],
            Op::Sum { a } => vec![(*a, vec![gd[0]; val(*a).len()])],
            Op::Mean { a } => {
                let len = val(*a).len();
                vec![(*a, vec![gd[0] / S::lit(len as f64); len])]
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let shape = g.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut dx = vec![S::zero(); y.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for i in 0..hw {
                        let mut dot = S::zero();
                        for ch in 0..c {
                            dot = dot + gd[base + ch * hw + i] * y[base + ch * hw + i];
                        }
                        for ch in 0..c {
                            let j = base + ch * hw + i;
                            dx[j] = y[j] * (gd[j] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Rfft2 { x } => {
                let s = self.nodes[*x].value.shape();
                let dx = fft::rfft2_adjoint(gd, s[0] * s[1], s[2], s[3]);
                vec![(*x, dx)]
            }
            Op::Irfft2 { x } => {
                let s = g.shape();
                let dx = fft::irfft2_adjoint(gd, s[0] * s[1], s[2], s[3]);
                vec![(*x, dx)]
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                counted,
                count,
            } => {
                let mut dx = vec![S::zero(); probs.len()];
                if *count > 0 {
                    let shape = self.nodes[*logits].value.shape();
                    let (c, hw) = (shape[1], shape[2] * shape[3]);
                    let scale = gd[0] / S::lit(*count as f64);
                    for (pix, &on) in counted.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let (b, i) = (pix / hw, pix % hw);
                        for ch in 0..c {
                            let j = (b * c + ch) * hw + i;
                            let hot = if targets[pix] as usize == ch {
                                S::one()
                            } else {
                                S::zero()
                            };
                            dx[j] = (probs[j] - hot) * scale;
                        }
                    }
                }
                vec![(*logits, dx)]
            }
            Op::SoftDice {
                p,
                onehot_sums,
                targets,
                eps,
            } => {
                let pv = val(*p);
                let shape = self.nodes[*p].value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let two = S::lit(2.0);
                let outer = -gd[0] / S::lit((n * c) as f64);
                let mut dx = vec![S::zero(); pv.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let mut inter = S::zero();
                        let mut psum = S::zero();
                        for i in 0..hw {
                            psum = psum + pv[off + i];
                            if targets[b * hw + i] as usize == ch {
                                inter = inter + pv[off + i];
                            }
                        }
                        let den = psum + onehot_sums[b * c + ch] + *eps;
                        let num = two * inter + *eps;
                        for i in 0..hw {
                            let gi = if targets[b * hw + i] as usize == ch {
                                S::one()
                            } else {
                                S::zero()
                            };
                            dx[off + i] = outer * (two * gi * den - num) / (den * den);
                        }
                    }
                }
                vec![(*p, dx)]
            }
        }
    }
}

/// Start offsets of the spans forming each normalization group. Batch norm
/// groups by channel across the batch, instance norm by (sample, channel).
fn norm_group_starts(n: usize, c: usize, hw: usize, per_instance: bool) -> Vec<Vec<usize>> {
    if per_instance {
        (0..n * c).map(|g| vec![g * hw]).collect()
    } else {
        (0..c).map(|ch| (0..n).map(|b| (b * c + ch) * hw).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_ones_window_sums() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_and_bias_broadcast() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64).sin()).collect();
        let x = tape.leaf(t(&[2, 3, 4, 5], &data));
        let mut wid = vec![0.0; 9];
        for c in 0..3 {
            wid[c * 3 + c] = 1.0;
        }
        let w = tape.leaf(t(&[3, 3, 1, 1], &wid));
        let y = tape.conv2d(x, w, None, 0, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        let z = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        let w2 = tape.leaf(Tensor::full(&[2, 2, 3, 3], 0.7));
        let b2 = tape.leaf(t(&[2], &[1.5, -2.0]));
        let y2 = tape.conv2d(z, w2, Some(b2), 1, 1).unwrap();
        let v = tape.value(y2).data();
        assert!(v[..9].iter().all(|&a| a == 1.5));
        assert!(v[9..].iter().all(|&a| a == -2.0));
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 8, 8]") && err.contains("[4, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.conv2d(x, w, None, 0, 1).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(t(&[1, 2, 1, 3], &[0.0, 9f64.ln(), 1000.0, 0.0, 0.0, 0.0]));
        let p = tape.softmax_channels(l).unwrap();
        let v = tape.value(p).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[3] - 0.5).abs() < 1e-12);
        assert!((v[1] - 0.9).abs() < 1e-12 && (v[4] - 0.1).abs() < 1e-12);
        assert_eq!((v[2], v[5]), (1.0, 0.0));
    }

    #[test]
    fn max_pool_names_odd_dimension() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 5]));
        let err = tape.max_pool2(x).unwrap_err().to_string();
        assert!(err.contains("width 5"), "{err}");
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn cross_entropy_ignores_masked_pixels() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(t(&[1, 2, 1, 2], &[0.3, -1.0, 0.7, 2.0]));
        let ce = tape.cross_entropy(l, &[2, 1], Some(2)).unwrap();
        let g = tape.backward(ce).unwrap();
        let gl = g.get(l).unwrap().data();
        assert_eq!((gl[0], gl[2]), (0.0, 0.0));
        assert!(gl[1] != 0.0);
    }

    #[test]
    fn op_names_roundtrip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}

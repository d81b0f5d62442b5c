//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends one node to the [`Tape`] holding its forward value and
//! whatever context the backward rule needs. Nodes only reference earlier
//! nodes, so one reverse sweep over the node list is a valid topological
//! order for backpropagation.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Square,
    /// `log(max(x, 1e-6))`.
    LogEps,
    Relu,
    Exp,
}

pub const LOG_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-map running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(maps: usize) -> Self {
        Self {
            mean: vec![0.0; maps],
            var: vec![1.0; maps],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulTn { w: Var, x: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddConst { x: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumLastAxis { x: Var },
    SoftmaxRows { x: Var },
    Pointwise { x: Var, f: Pointwise },
    Conv1d(Box<ConvCtx>),
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    BatchNorm(Box<BnCtx>),
    AvgPool { x: Var, k: usize, stride: usize },
    Dropout { x: Var, mask: Vec<f64> },
    Dense { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct ConvCtx {
    x: Var,
    w: Var,
    stride: usize,
    dilation: usize,
    pad_left: usize,
}

#[derive(Debug)]
struct BnCtx {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// Number of nodes processed by the reverse sweep.
    pub visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` is not reachable from the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_dims(op: &'static str, t: &Tensor, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::shape(
            op,
            format!("expected {ndim}-D input, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a · b` for `a: [m×p]` and `b: [p×q]` or batched `b: [B×p×q]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_dims("matmul", av, 2)?;
        let (m, p) = (av.shape()[0], av.shape()[1]);
        let (batch, p2, q, out_shape) = match bv.shape() {
            &[p2, q] => (1, p2, q, vec![m, q]),
            &[bs, p2, q] => (bs, p2, q, vec![bs, m, q]),
            s => return Err(Error::shape("matmul", format!("rhs shape {s:?}"))),
        };
        if p != p2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; batch * m * q];
        let (ad, bd) = (av.data(), bv.data());
        for bi in 0..batch {
            let bb = &bd[bi * p * q..(bi + 1) * p * q];
            let ob = &mut out[bi * m * q..(bi + 1) * m * q];
            for i in 0..m {
                let orow = &mut ob[i * q..(i + 1) * q];
                for kk in 0..p {
                    let aik = ad[i * p + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    for (o, &bv) in orow.iter_mut().zip(&bb[kk * q..(kk + 1) * q]) {
                        *o += aik * bv;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b }, ng))
    }

    /// Batched `Wᵀ·X`: `w: [N×K]` (shared) or `[B×N×K]`, `x: [B×N×F]` → `[B×K×F]`.
    pub fn matmul_tn(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        check_dims("matmul_tn", xv, 3)?;
        let (bsz, n, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (wb, wn, k) = match wv.shape() {
            &[wn, k] => (1, wn, k),
            &[wb, wn, k] => (wb, wn, k),
            s => return Err(Error::shape("matmul_tn", format!("weight shape {s:?}"))),
        };
        if wn != n || (wb != 1 && wb != bsz) || (wv.ndim() == 3 && wb != bsz) {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?}ᵀ x {:?}", wv.shape(), xv.shape()),
            ));
        }
        let mut out = vec![0.0; bsz * k * f];
        let (wd, xd) = (wv.data(), xv.data());
        let per_sample = wv.ndim() == 3;
        for b in 0..bsz {
            let wm = if per_sample {
                &wd[b * n * k..(b + 1) * n * k]
            } else {
                wd
            };
            let xm = &xd[b * n * f..(b + 1) * n * f];
            let om = &mut out[b * k * f..(b + 1) * k * f];
            for ni in 0..n {
                let xrow = &xm[ni * f..(ni + 1) * f];
                for ki in 0..k {
                    let c = wm[ni * k + ki];
                    if c == 0.0 {
                        continue;
                    }
                    for (o, &xv) in om[ki * f..(ki + 1) * f].iter_mut().zip(xrow) {
                        *o += c * xv;
                    }
                }
            }
        }
        let ng = self.ng(w) || self.ng(x);
        Ok(self.push(Tensor::new(&[bsz, k, f], out)?, Op::MatMulTn { w, x }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_dims("transpose", xv, 2)?;
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let out = Tensor::from_fn(&[n, m], |i| xv.at2(i % m, i / m));
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose { x }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    /// `x + c` where `x` is broadcast over the leading dims of the constant `c`.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        let cs = c.shape();
        if cs.len() < xs.len() || &cs[cs.len() - xs.len()..] != xs {
            return Err(Error::shape("add_const", format!("{xs:?} + {cs:?}")));
        }
        let n = xv.numel();
        let data = c
            .data()
            .iter()
            .enumerate()
            .map(|(i, &cv)| cv + xv.data()[i % n])
            .collect();
        let out = Tensor::new(cs, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::AddConst { x }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, c }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar { x }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng)
    }

    /// Sum over the last axis; `[.., n] → [..]`.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        let n = *shape.last().unwrap();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let data = xv.data().chunks(n).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SumLastAxis { x }, ng))
    }

    /// Softmax over the second-to-last axis, i.e. down each column of a
    /// `[.., N, K]` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(Error::shape("softmax_rows", format!("{:?}", xv.shape())));
        }
        let s = xv.shape();
        let (n, k) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = xv.data().to_vec();
        for block in out.chunks_mut(n * k) {
            softmax_columns_inplace(block, n, k);
        }
        let out = Tensor::new(s, out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SoftmaxRows { x }, ng))
    }

    pub fn pointwise(&mut self, x: Var, f: Pointwise) -> Var {
        let out = self.value(x).map(|v| match f {
            Pointwise::Square => v * v,
            Pointwise::LogEps => (if v < LOG_EPS { LOG_EPS } else { v }).ln(),
            Pointwise::Relu => if v < 0.0 { 0.0 } else { v },
            Pointwise::Exp => v.exp(),
        });
        let ng = self.ng(x);
        self.push(out, Op::Pointwise { x, f }, ng)
    }

    /// 1-D convolution (cross-correlation, no bias) of `x: [B×C_in×T]` with
    /// `w: [C_out×C_in×k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::NonPositiveStride(stride));
        }
        if dilation == 0 {
            return Err(Error::InvalidInput("dilation must be >= 1".into()));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        check_dims("conv1d", xv, 3)?;
        check_dims("conv1d", wv, 3)?;
        let (bsz, cin, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, cin2, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if cin != cin2 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?} vs kernels {:?}", xv.shape(), wv.shape()),
            ));
        }
        let span = dilation * (k - 1);
        let (pad_left, t_pad) = match padding {
            Padding::Same => (span / 2, t + span),
            Padding::Valid => (0, t),
        };
        if span + 1 > t_pad {
            return Err(Error::shape(
                "conv1d",
                format!("kernel extent {} exceeds padded length {t_pad}", span + 1),
            ));
        }
        let t_out = (t_pad - span - 1) / stride + 1;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; bsz * cout * t_out];
        for b in 0..bsz {
            for o in 0..cout {
                let orow = &mut out[(b * cout + o) * t_out..(b * cout + o + 1) * t_out];
                for i in 0..cin {
                    let xrow = &xd[(b * cin + i) * t..(b * cin + i + 1) * t];
                    for kk in 0..k {
                        let wv = wd[(o * cin + i) * k + kk];
                        let (lo, hi) = tap_range(kk * dilation, pad_left, stride, t, t_out);
                        let off = kk * dilation;
                        for (to, ov) in orow.iter_mut().enumerate().take(hi).skip(lo) {
                            *ov += wv * xrow[to * stride + off - pad_left];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[bsz, cout, t_out], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            out,
            Op::Conv1d(Box::new(ConvCtx {
                x,
                w,
                stride,
                dilation,
                pad_left,
            })),
            ng,
        ))
    }

    /// Concatenate 3-D tensors along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        check_dims("concat", self.value(parts[0]), 3)?;
        let (bsz, t) = (first[0], first[2]);
        let mut chans = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 3 || s[0] != bsz || s[2] != t {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            chans += s[1];
        }
        let mut out = Vec::with_capacity(bsz * chans * t);
        for b in 0..bsz {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * t..(b + 1) * c * t]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::new(&[bsz, chans, t], out)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    /// Batch normalization of `x: [B×M×L]` with statistics per map `m` taken
    /// over the batch and length axes.
    ///
    /// `gamma`/`beta` have `G` entries with `M % G == 0`; map `m` uses entry
    /// `m % G`. In train mode the batch statistics also update `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let xv = self.value(x);
        check_dims("batch_norm", xv, 3)?;
        let (bsz, maps, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let groups = self.value(gamma).numel();
        if groups == 0
            || maps % groups != 0
            || self.value(beta).numel() != groups
            || running.mean.len() != maps
        {
            return Err(Error::shape(
                "batch_norm",
                format!("{maps} maps with {groups} affine groups"),
            ));
        }
        let count = bsz * len;
        let train = mode == Mode::Train;
        if train && count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let xd = xv.data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; maps];
            let mut var = vec![0.0; maps];
            for (m, (mu, vr)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                let mut s = 0.0;
                for b in 0..bsz {
                    s += xd[(b * maps + m) * len..(b * maps + m + 1) * len]
                        .iter()
                        .sum::<f64>();
                }
                *mu = s / count as f64;
                let mut ss = 0.0;
                for b in 0..bsz {
                    ss += xd[(b * maps + m) * len..(b * maps + m + 1) * len]
                        .iter()
                        .map(|v| (v - *mu).powi(2))
                        .sum::<f64>();
                }
                *vr = ss / count as f64;
            }
            let unbias = count as f64 / (count - 1) as f64;
            for m in 0..maps {
                running.mean[m] = (1.0 - BN_MOMENTUM) * running.mean[m] + BN_MOMENTUM * mean[m];
                running.var[m] =
                    (1.0 - BN_MOMENTUM) * running.var[m] + BN_MOMENTUM * var[m] * unbias;
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..bsz {
            for m in 0..maps {
                let g = m % groups;
                for l in 0..len {
                    let idx = (b * maps + m) * len + l;
                    let h = (xd[idx] - mean[m]) * inv_std[m];
                    xhat[idx] = h;
                    out[idx] = gd[g] * h + bd[g];
                }
            }
        }
        let out = Tensor::new(&[bsz, maps, len], out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::BatchNorm(Box::new(BnCtx {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            })),
            ng,
        ))
    }

    /// Valid average pooling over the last axis of `x: [B×C×T]`.
    pub fn avg_pool1d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::NonPositiveStride(stride));
        }
        let xv = self.value(x);
        check_dims("avg_pool1d", xv, 3)?;
        let (bsz, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if k == 0 || k > t {
            return Err(Error::shape("avg_pool1d", format!("window {k} > length {t}")));
        }
        let t_out = (t - k) / stride + 1;
        let inv = 1.0 / k as f64;
        let mut out = Vec::with_capacity(bsz * c * t_out);
        for row in xv.data().chunks(t) {
            for j in 0..t_out {
                out.push(row[j * stride..j * stride + k].iter().sum::<f64>() * inv);
            }
        }
        let out = Tensor::new(&[bsz, c, t_out], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::AvgPool { x, k, stride }, ng))
    }

    /// Inverted dropout. `keep` decides survival per unit; survivors are
    /// scaled by `1/(1-p)`. Eval mode or `p == 0` is the identity.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("dropout rate {p} not in [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return self.reshape(x, &self.value(x).shape().to_vec());
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Affine map `x·wᵀ + b` for `x: [B×in]`, `w: [out×in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        check_dims("dense", xv, 2)?;
        check_dims("dense", wv, 2)?;
        let (bsz, din) = (xv.shape()[0], xv.shape()[1]);
        let (dout, din2) = (wv.shape()[0], wv.shape()[1]);
        if din != din2 || bv.numel() != dout {
            return Err(Error::shape(
                "dense",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(bsz * dout);
        for xr in xv.data().chunks(din) {
            for (o, wr) in wv.data().chunks(din).enumerate() {
                out.push(bv.data()[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let out = Tensor::new(&[bsz, dout], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Dense { x, w, b }, ng))
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_dims("softmax_cross_entropy", lv, 2)?;
        let (bsz, nc) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != bsz {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{bsz} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= nc) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: nc,
            });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(nc).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / bsz as f64),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.len() {
            return Err(Error::shape(
                "mse",
                format!("{} predictions vs {} targets", pv.numel(), target.len()),
            ));
        }
        let loss = pv
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / target.len() as f64;
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Backpropagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            visited += 1;
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, p) = (av.shape()[0], av.shape()[1]);
                let q = *bv.shape().last().unwrap();
                let batch = bv.numel() / (p * q);
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * p];
                    for bi in 0..batch {
                        let bb = &bv.data()[bi * p * q..(bi + 1) * p * q];
                        let gb = &gd[bi * m * q..(bi + 1) * m * q];
                        for i in 0..m {
                            for kk in 0..p {
                                ga[i * p + kk] += gb[i * q..(i + 1) * q]
                                    .iter()
                                    .zip(&bb[kk * q..(kk + 1) * q])
                                    .map(|(x, y)| x * y)
                                    .sum::<f64>();
                            }
                        }
                    }
                    accumulate(grads, *a, av.shape(), ga);
                }
                if self.ng(*b) {
                    let mut gbt = vec![0.0; bv.numel()];
                    for bi in 0..batch {
                        let gb = &gd[bi * m * q..(bi + 1) * m * q];
                        let out = &mut gbt[bi * p * q..(bi + 1) * p * q];
                        for i in 0..m {
                            for kk in 0..p {
                                let aik = av.data()[i * p + kk];
                                for (o, &gv) in
                                    out[kk * q..(kk + 1) * q].iter_mut().zip(&gb[i * q..(i + 1) * q])
                                {
                                    *o += aik * gv;
                                }
                            }
                        }
                    }
                    accumulate(grads, *b, bv.shape(), gbt);
                }
            }
            Op::MatMulTn { w, x } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let (bsz, n, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let k = *wv.shape().last().unwrap();
                let per_sample = wv.ndim() == 3;
                let mut gw = vec![0.0; wv.numel()];
                let mut gx = vec![0.0; xv.numel()];
                for b in 0..bsz {
                    let woff = if per_sample { b * n * k } else { 0 };
                    let xm = &xv.data()[b * n * f..(b + 1) * n * f];
                    let gm = &gd[b * k * f..(b + 1) * k * f];
                    for ni in 0..n {
                        let xrow = &xm[ni * f..(ni + 1) * f];
                        for ki in 0..k {
                            let grow = &gm[ki * f..(ki + 1) * f];
                            gw[woff + ni * k + ki] +=
                                xrow.iter().zip(grow).map(|(a, c)| a * c).sum::<f64>();
                            let c = wv.data()[woff + ni * k + ki];
                            for (o, &gv) in gx[b * n * f + ni * f..b * n * f + (ni + 1) * f]
                                .iter_mut()
                                .zip(grow)
                            {
                                *o += c * gv;
                            }
                        }
                    }
                }
                if self.ng(*w) {
                    accumulate(grads, *w, wv.shape(), gw);
                }
                if self.ng(*x) {
                    accumulate(grads, *x, xv.shape(), gx);
                }
            }
            Op::Transpose { x } => {
                let s = self.value(*x).shape();
                let (m, n) = (s[0], s[1]);
                let gx = (0..m * n).map(|i| gd[(i % n) * m + i / n]).collect();
                accumulate(grads, *x, s, gx);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        accumulate(grads, v, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, av.shape(), ga);
                }
                if self.ng(*b) {
                    let gb = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, bv.shape(), gb);
                }
            }
            Op::AddConst { x } => {
                let xv = self.value(*x);
                let n = xv.numel();
                let mut gx = vec![0.0; n];
                for (i, &v) in gd.iter().enumerate() {
                    gx[i % n] += v;
                }
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, g.shape(), gd.iter().map(|v| v * c).collect());
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                accumulate(grads, *x, self.value(*x).shape(), gd.to_vec());
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![gd[0]; xv.numel()]);
            }
            Op::Mean { x } => {
                let xv = self.value(*x);
                let v = gd[0] / xv.numel() as f64;
                accumulate(grads, *x, xv.shape(), vec![v; xv.numel()]);
            }
            Op::SumLastAxis { x } => {
                let xv = self.value(*x);
                let n = *xv.shape().last().unwrap();
                let gx = (0..xv.numel()).map(|i| gd[i / n]).collect();
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::SoftmaxRows { x } => {
                let y = &node.value;
                let s = y.shape();
                let (n, k) = (s[s.len() - 2], s[s.len() - 1]);
                let mut gx = vec![0.0; y.numel()];
                for (blk, (yb, gb)) in y.data().chunks(n * k).zip(gd.chunks(n * k)).enumerate() {
                    for c in 0..k {
                        let dot: f64 = (0..n).map(|r| yb[r * k + c] * gb[r * k + c]).sum();
                        for r in 0..n {
                            gx[blk * n * k + r * k + c] = yb[r * k + c] * (gb[r * k + c] - dot);
                        }
                    }
                }
                accumulate(grads, *x, s, gx);
            }
            Op::Pointwise { x, f } => {
                let xv = self.value(*x);
                let gx = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gd)
                    .map(|((&xi, &yi), &gi)| {
                        gi * match f {
                            Pointwise::Square => 2.0 * xi,
                            Pointwise::LogEps => {
                                if xi > LOG_EPS {
                                    1.0 / xi
                                } else {
                                    0.0
                                }
                            }
                            Pointwise::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Pointwise::Exp => yi,
                        }
                    })
                    .collect();
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::Conv1d(ctx) => self.backprop_conv(ctx, node, gd, grads),
            Op::Concat { parts } => {
                let s = node.value.shape();
                let (bsz, total, t) = (s[0], s[1], s[2]);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let c = ps[1];
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(bsz * c * t);
                        for b in 0..bsz {
                            let start = (b * total + offset) * t;
                            gp.extend_from_slice(&gd[start..start + c * t]);
                        }
                        accumulate(grads, p, &ps, gp);
                    }
                    offset += c;
                }
            }
            Op::BatchNorm(ctx) => self.backprop_bn(ctx, gd, grads),
            Op::AvgPool { x, k, stride } => {
                let xv = self.value(*x);
                let t = *xv.shape().last().unwrap();
                let t_out = *node.value.shape().last().unwrap();
                let inv = 1.0 / *k as f64;
                let mut gx = vec![0.0; xv.numel()];
                for (row, grow) in gx.chunks_mut(t).zip(gd.chunks(t_out)) {
                    for (j, &gv) in grow.iter().enumerate() {
                        for v in &mut row[j * stride..j * stride + k] {
                            *v += gv * inv;
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::Dropout { x, mask } => {
                let gx = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *x, self.value(*x).shape(), gx);
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (xv.shape()[1], wv.shape()[0]);
                if self.ng(*x) {
                    let mut gx = vec![0.0; xv.numel()];
                    for (gxr, gr) in gx.chunks_mut(din).zip(gd.chunks(dout)) {
                        for (o, wr) in wv.data().chunks(din).enumerate() {
                            for (a, &wv) in gxr.iter_mut().zip(wr) {
                                *a += gr[o] * wv;
                            }
                        }
                    }
                    accumulate(grads, *x, xv.shape(), gx);
                }
                if self.ng(*w) {
                    let mut gw = vec![0.0; wv.numel()];
                    for (xr, gr) in xv.data().chunks(din).zip(gd.chunks(dout)) {
                        for (o, gwr) in gw.chunks_mut(din).enumerate() {
                            for (a, &xv) in gwr.iter_mut().zip(xr) {
                                *a += gr[o] * xv;
                            }
                        }
                    }
                    accumulate(grads, *w, wv.shape(), gw);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; dout];
                    for gr in gd.chunks(dout) {
                        for (a, v) in gb.iter_mut().zip(gr) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *b, &[dout], gb);
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let nc = lv.shape()[1];
                let scale = gd[0] / labels.len() as f64;
                let mut gl = probs.clone();
                for (row, &y) in gl.chunks_mut(nc).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, lv.shape(), gl);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let c = 2.0 * gd[0] / target.len() as f64;
                let gp = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| c * (p - t))
                    .collect();
                accumulate(grads, *pred, pv.shape(), gp);
            }
        }
    }

    fn backprop_conv(&self, ctx: &ConvCtx, node: &Node, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.value(ctx.x), self.value(ctx.w));
        let (bsz, cin, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        let t_out = node.value.shape()[2];
        let (need_x, need_w) = (self.ng(ctx.x), self.ng(ctx.w));
        let mut gx = vec![0.0; if need_x { xv.numel() } else { 0 }];
        let mut gw = vec![0.0; if need_w { wv.numel() } else { 0 }];
        for b in 0..bsz {
            for o in 0..cout {
                let grow = &gd[(b * cout + o) * t_out..(b * cout + o + 1) * t_out];
                for i in 0..cin {
                    let xoff = (b * cin + i) * t;
                    for kk in 0..k {
                        let off = kk * ctx.dilation;
                        let (lo, hi) = tap_range(off, ctx.pad_left, ctx.stride, t, t_out);
                        let widx = (o * cin + i) * k + kk;
                        if need_w {
                            let mut acc = 0.0;
                            for (to, gv) in grow.iter().enumerate().take(hi).skip(lo) {
                                acc += gv * xv.data()[xoff + to * ctx.stride + off - ctx.pad_left];
                            }
                            gw[widx] += acc;
                        }
                        if need_x {
                            let wval = wv.data()[widx];
                            for (to, gv) in grow.iter().enumerate().take(hi).skip(lo) {
                                gx[xoff + to * ctx.stride + off - ctx.pad_left] += wval * gv;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(grads, ctx.x, xv.shape(), gx);
        }
        if need_w {
            accumulate(grads, ctx.w, wv.shape(), gw);
        }
    }

    fn backprop_bn(&self, ctx: &BnCtx, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let xv = self.value(ctx.x);
        let (bsz, maps, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let gamma = self.value(ctx.gamma).data();
        let groups = gamma.len();
        let count = (bsz * len) as f64;
        let mut ggamma = vec![0.0; groups];
        let mut gbeta = vec![0.0; groups];
        let mut gx = vec![0.0; xv.numel()];
        for m in 0..maps {
            let gi = m % groups;
            let idx = |b: usize, l: usize| (b * maps + m) * len + l;
            let (mut sg, mut sgh) = (0.0, 0.0);
            for b in 0..bsz {
                for l in 0..len {
                    let i = idx(b, l);
                    sg += gd[i];
                    sgh += gd[i] * ctx.xhat[i];
                }
            }
            ggamma[gi] += sgh;
            gbeta[gi] += sg;
            let (gm, is) = (gamma[gi], ctx.inv_std[m]);
            for b in 0..bsz {
                for l in 0..len {
                    let i = idx(b, l);
                    gx[i] = if ctx.train {
                        gm * is * (gd[i] - sg / count - ctx.xhat[i] * sgh / count)
                    } else {
                        gm * is * gd[i]
                    };
                }
            }
        }
        if self.ng(ctx.x) {
            accumulate(grads, ctx.x, xv.shape(), gx);
        }
        if self.ng(ctx.gamma) {
            accumulate(grads, ctx.gamma, &[groups], ggamma);
        }
        if self.ng(ctx.beta) {
            accumulate(grads, ctx.beta, &[groups], gbeta);
        }
    }
}

/// Output positions `[lo, hi)` whose tap at offset `off` lands inside the
/// unpadded input.
fn tap_range(off: usize, pad_left: usize, stride: usize, t: usize, t_out: usize) -> (usize, usize) {
    // input index = to * stride + off - pad_left, must be in [0, t)
    let lo = if pad_left > off {
        (pad_left - off).div_ceil(stride)
    } else {
        0
    };
    let hi = if t + pad_left > off {
        ((t + pad_left - off - 1) / stride + 1).min(t_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape, g).expect("gradient shape"));
        }
    }
}

/// Column-wise softmax of a row-major `n×k` block.
pub(crate) fn softmax_columns_inplace(block: &mut [f64], n: usize, k: usize) {
    for c in 0..k {
        let mx = (0..n)
            .map(|r| block[r * k + c])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in 0..n {
            let e = (block[r * k + c] - mx).exp();
            block[r * k + c] = e;
            z += e;
        }
        for r in 0..n {
            block[r * k + c] /= z;
        }
    }
}

//! Recording graph of tensor operations with reverse-mode gradients.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only. Every op appends a node
//! holding its value; [`Graph::backward`] walks the nodes in reverse and
//! returns gradients for parameters and inputs. Batch-norm running-stat
//! updates computed in training mode are queued on the graph and applied by
//! the caller with [`ParamStore::apply_stat_updates`].

use std::collections::HashMap;

use crate::conv::{conv2d_backward, conv2d_forward, conv_macs, ConvSpec};
use crate::error::{shape_err, Error, Result};
use crate::mask::{ClassMask, IGNORE};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{store, Dims, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Average over width: (B, C, H, W) -> (B, C, H, 1).
    Horizontal,
    /// Average over height: (B, C, H, W) -> (B, C, 1, W).
    Vertical,
}

/// Parameter ids of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    Bias {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    ConcatChannels(Vec<Var>),
    DirPool {
        x: Var,
        axis: PoolAxis,
    },
    TransposeHw(Var),
    ConcatHeight(Vec<Var>),
    SliceHeight {
        x: Var,
        start: usize,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Scale(Var, f64),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        count: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
    ScaleGrad(Var, f64),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s, T: Scalar = f32> {
    store: &'s ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
    macs: u64,
}

/// Gradients produced by [`Graph::backward`], in `f64`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Dims>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<Tensor<f64>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.dims[v.0], g.clone()).expect("gradient dims"))
    }

    /// `(parameter, gradient)` pairs for every trainable parameter reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_deref().map(|g| (id, g)))
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *dst = Some(g),
    }
}

/// Per-axis bilinear sampling table under the half-pixel convention.
fn bilinear_table(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
            macs: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    /// Multiply-accumulates performed by convolutions recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Batch-norm running statistics computed in training mode.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "op #{} produced a non-finite value",
                self.nodes.len()
            )));
        }
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

    fn f64s(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.to_f64_vec()
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, true)
    }

    /// Input leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, false)
    }

    /// Leaf for a stored parameter; each parameter enters the graph once.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xd, wd) = (self.dims(x), self.dims(w));
        let (y, yd) = conv2d_forward(&self.f64s(x), xd, &self.f64s(w), wd, &spec)?;
        self.macs += conv_macs(xd, wd, yd);
        let ng = self.ng(x) || self.ng(w);
        self.push(store(yd, y), Op::Conv { x, w, spec }, ng)
    }

    /// Adds a per-channel bias of dims (1, C, 1, 1).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xd, bd) = (self.dims(x), self.dims(b));
        if bd != [1, xd[1], 1, 1] {
            return shape_err(format!("bias {:?} does not fit input {:?}", bd, xd));
        }
        let bv = self.f64s(b);
        let plane = xd[2] * xd[3];
        let mut y = self.f64s(x);
        for (i, v) in y.iter_mut().enumerate() {
            *v += bv[(i / plane) % xd[1]];
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(store(xd, y), Op::Bias { x, b }, ng)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BnParams) -> Result<Var> {
        let xd = self.dims(x);
        let c = xd[1];
        let gamma = self.param(bn.gamma)?;
        let beta = self.param(bn.beta)?;
        if self.dims(gamma)[1] != c || self.dims(beta)[1] != c {
            return shape_err(format!(
                "batch norm expects {} channels, parameters have {}",
                self.dims(gamma)[1],
                c
            ));
        }
        let xv = self.f64s(x);
        let gv = self.f64s(gamma);
        let bv = self.f64s(beta);
        let plane = xd[2] * xd[3];
        let n = xd[0] * plane;
        let (mean, inv_std, batch_stats) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..xd[0] {
                        let o = (b * c + ch) * plane;
                        s += xv[o..o + plane].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut sq = 0.0;
                    for b in 0..xd[0] {
                        let o = (b * c + ch) * plane;
                        sq += xv[o..o + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / n as f64;
                }
                let rm = self.store.value(bn.running_mean).to_f64_vec();
                let rv = self.store.value(bn.running_var).to_f64_vec();
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let new_mean: Vec<f64> = (0..c)
                    .map(|i| (1.0 - BN_MOMENTUM) * rm[i] + BN_MOMENTUM * mean[i])
                    .collect();
                let new_var: Vec<f64> = (0..c)
                    .map(|i| (1.0 - BN_MOMENTUM) * rv[i] + BN_MOMENTUM * var[i] * unbias)
                    .collect();
                self.stat_updates
                    .push((bn.running_mean, store([1, c, 1, 1], new_mean)));
                self.stat_updates
                    .push((bn.running_var, store([1, c, 1, 1], new_var)));
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv, true)
            }
            Mode::Eval => {
                let mean = self.store.value(bn.running_mean).to_f64_vec();
                let inv = self
                    .store
                    .value(bn.running_var)
                    .to_f64_vec()
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                (mean, inv, false)
            }
        };
        let mut y = xv;
        for (i, v) in y.iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = gv[ch] * (*v - mean[ch]) * inv_std[ch] + bv[ch];
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            store(xd, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Bilinear upsampling by an integer factor, half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Config("upsampling factor must be >= 1".into()));
        }
        let xd = self.dims(x);
        let (h, w) = (xd[2], xd[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = bilinear_table(h, factor);
        let tx = bilinear_table(w, factor);
        let xv = self.f64s(x);
        let mut y = vec![0.0; xd[0] * xd[1] * oh * ow];
        for (plane, out) in xv.chunks(h * w).zip(y.chunks_mut(oh * ow)) {
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = (1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                    let bot = (1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                    out[oy * ow + ox] = (1.0 - ly) * top + ly * bot;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            store([xd[0], xd[1], oh, ow], y),
            Op::Upsample { x, factor },
            ng,
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.dims(p),
            None => return shape_err("concat of zero tensors"),
        };
        let mut channels = 0;
        for &p in parts {
            let d = self.dims(p);
            if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
                return shape_err(format!(
                    "concat parts disagree on batch/spatial dims: {:?} vs {:?}",
                    d, first
                ));
            }
            channels += d[1];
        }
        let plane = first[2] * first[3];
        let mut y = Vec::with_capacity(first[0] * channels * plane);
        for b in 0..first[0] {
            for &p in parts {
                let t = self.value(p);
                let per = t.channels() * plane;
                y.extend(t.data()[b * per..(b + 1) * per].iter().map(|v| v.to_f64()));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            store([first[0], channels, first[2], first[3]], y),
            Op::ConcatChannels(parts.to_vec()),
            ng,
        )
    }

    pub fn directional_avg_pool(&mut self, x: Var, axis: PoolAxis) -> Result<Var> {
        let xd = self.dims(x);
        let (h, w) = (xd[2], xd[3]);
        let xv = self.f64s(x);
        let (out_dims, y) = match axis {
            PoolAxis::Horizontal => {
                let y: Vec<f64> = xv
                    .chunks(w)
                    .map(|row| row.iter().sum::<f64>() / w as f64)
                    .collect();
                ([xd[0], xd[1], h, 1], y)
            }
            PoolAxis::Vertical => {
                let mut y = Vec::with_capacity(xd[0] * xd[1] * w);
                for plane in xv.chunks(h * w) {
                    for col in 0..w {
                        let s: f64 = (0..h).map(|r| plane[r * w + col]).sum();
                        y.push(s / h as f64);
                    }
                }
                ([xd[0], xd[1], 1, w], y)
            }
        };
        let ng = self.ng(x);
        self.push(store(out_dims, y), Op::DirPool { x, axis }, ng)
    }

    /// Swaps the height and width axes.
    pub fn transpose_hw(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x);
        let (h, w) = (xd[2], xd[3]);
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(xv.len());
        for plane in xv.chunks(h * w) {
            for c in 0..w {
                for r in 0..h {
                    y.push(plane[r * w + c]);
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new([xd[0], xd[1], w, h], y)?;
        self.push(t, Op::TransposeHw(x), ng)
    }

    /// Concatenates along the height axis.
    pub fn concat_height(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.dims(p),
            None => return shape_err("concat of zero tensors"),
        };
        let mut height = 0;
        for &p in parts {
            let d = self.dims(p);
            if d[0] != first[0] || d[1] != first[1] || d[3] != first[3] {
                return shape_err(format!("height concat mismatch: {:?} vs {:?}", d, first));
            }
            height += d[2];
        }
        let w = first[3];
        let mut y = Vec::with_capacity(first[0] * first[1] * height * w);
        for bc in 0..first[0] * first[1] {
            for &p in parts {
                let t = self.value(p);
                let per = t.height() * w;
                y.extend_from_slice(&t.data()[bc * per..(bc + 1) * per]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::new([first[0], first[1], height, w], y)?;
        self.push(t, Op::ConcatHeight(parts.to_vec()), ng)
    }

    /// Rows `[start, start + len)`.
    pub fn slice_height(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xd = self.dims(x);
        if start + len > xd[2] || len == 0 {
            return shape_err(format!(
                "row slice [{}, {}) outside height {}",
                start,
                start + len,
                xd[2]
            ));
        }
        let w = xd[3];
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(xd[0] * xd[1] * len * w);
        for plane in xv.chunks(xd[2] * w) {
            y.extend_from_slice(&plane[start * w..(start + len) * w]);
        }
        let ng = self.ng(x);
        let t = Tensor::new([xd[0], xd[1], len, w], y)?;
        self.push(t, Op::SliceHeight { x, start }, ng)
    }

    /// Elementwise product; `b` broadcasts along any axis where it has extent 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        for i in 0..4 {
            if bd[i] != ad[i] && bd[i] != 1 {
                return shape_err(format!("cannot broadcast {:?} onto {:?}", bd, ad));
            }
        }
        let av = self.f64s(a);
        let bv = self.f64s(b);
        let mut y = av;
        let mut i = 0;
        for n in 0..ad[0] {
            for c in 0..ad[1] {
                for r in 0..ad[2] {
                    for q in 0..ad[3] {
                        y[i] *= bv[broadcast_index(bd, n, c, r, q)];
                        i += 1;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(store(ad, y), Op::Mul { a, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad != bd {
            return shape_err(format!("cannot add {:?} and {:?}", ad, bd));
        }
        let y: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, z)| x.to_f64() + z.to_f64())
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(store(ad, y), Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    /// Identity in the forward pass; multiplies the gradient by `factor` on the
    /// way back. Used to build negative controls for gradient checking.
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x).clone();
        let ng = self.ng(x);
        self.push(t, Op::ScaleGrad(x, factor), ng)
    }

    /// Mean over non-ignore pixels of `-log softmax(logits)[target]`, as a
    /// (1, 1, 1, 1) tensor. Zero when no pixel is labeled.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[ClassMask]) -> Result<Var> {
        let ld = self.dims(logits);
        let (b, k, h, w) = (ld[0], ld[1], ld[2], ld[3]);
        if targets.len() != b {
            return shape_err(format!("{} targets for batch of {}", targets.len(), b));
        }
        let mut labels = Vec::with_capacity(b * h * w);
        for t in targets {
            if t.height() != h || t.width() != w {
                return shape_err(format!(
                    "target {}x{} does not match logits {}x{}",
                    t.height(),
                    t.width(),
                    h,
                    w
                ));
            }
            t.validate(k)?;
            labels.extend_from_slice(t.labels());
        }
        let lv = self.f64s(logits);
        let plane = h * w;
        let mut total = 0.0;
        let mut count = 0;
        for n in 0..b {
            for p in 0..plane {
                let t = labels[n * plane + p];
                if t == IGNORE {
                    continue;
                }
                let at = |c: usize| lv[(n * k + c) * plane + p];
                let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
                total += lse - at(t as usize);
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        self.push(
            store([1, 1, 1, 1], vec![loss]),
            Op::CrossEntropy {
                logits,
                labels,
                count,
            },
            ng,
        )
    }

    /// `sum_i w_i * s_i` over scalar (1, 1, 1, 1) nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, wt) in terms {
            if self.dims(v) != [1, 1, 1, 1] {
                return shape_err(format!("weighted_sum term has dims {:?}", self.dims(v)));
            }
            s += wt * self.value(v).data()[0].to_f64();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(
            store([1, 1, 1, 1], vec![s]),
            Op::WeightedSum(terms.to_vec()),
            ng,
        )
    }

    /// Reverse pass from `output` seeded with `seed` (dims of `output`).
    pub fn backward(&self, output: Var, seed: &Tensor<f64>) -> Result<Gradients> {
        if seed.dims() != self.dims(output) {
            return shape_err(format!(
                "seed {:?} does not match output {:?}",
                seed.dims(),
                self.dims(output)
            ));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(seed.to_f64_vec());
        let mut params = Vec::new();
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    params.push((*id, i));
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, spec } => {
                    let need_dx = self.ng(*x);
                    let (dx, dw) = conv2d_backward(
                        &self.f64s(*x),
                        self.dims(*x),
                        &self.f64s(*w),
                        self.dims(*w),
                        spec,
                        &g,
                        need_dx,
                    )?;
                    if need_dx {
                        add_into(&mut grads[x.0], dx);
                    }
                    if self.ng(*w) {
                        add_into(&mut grads[w.0], dw);
                    }
                }
                Op::Bias { x, b } => {
                    let xd = self.dims(*x);
                    let plane = xd[2] * xd[3];
                    if self.ng(*b) {
                        let mut db = vec![0.0; xd[1]];
                        for (j, chunk) in g.chunks(plane).enumerate() {
                            db[j % xd[1]] += chunk.iter().sum::<f64>();
                        }
                        add_into(&mut grads[b.0], db);
                    }
                    if self.ng(*x) {
                        add_into(&mut grads[x.0], g);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let xd = self.dims(*x);
                    let c = xd[1];
                    let plane = xd[2] * xd[3];
                    let cnt = (xd[0] * plane) as f64;
                    let xv = self.f64s(*x);
                    let gv = self.f64s(*gamma);
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for (j, (xs, gs)) in xv.chunks(plane).zip(g.chunks(plane)).enumerate() {
                        let ch = j % c;
                        for (xe, ge) in xs.iter().zip(gs) {
                            sum_dy[ch] += ge;
                            sum_dy_xhat[ch] += ge * (xe - mean[ch]) * inv_std[ch];
                        }
                    }
                    if self.ng(*x) {
                        let mut dx = vec![0.0; xv.len()];
                        for (j, ((xs, gs), ds)) in xv
                            .chunks(plane)
                            .zip(g.chunks(plane))
                            .zip(dx.chunks_mut(plane))
                            .enumerate()
                        {
                            let ch = j % c;
                            let scale = gv[ch] * inv_std[ch];
                            for ((xe, ge), de) in xs.iter().zip(gs).zip(ds.iter_mut()) {
                                *de = if *batch_stats {
                                    let xhat = (xe - mean[ch]) * inv_std[ch];
                                    scale * (ge - sum_dy[ch] / cnt - xhat * sum_dy_xhat[ch] / cnt)
                                } else {
                                    scale * ge
                                };
                            }
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                    if self.ng(*gamma) {
                        add_into(&mut grads[gamma.0], sum_dy_xhat);
                    }
                    if self.ng(*beta) {
                        add_into(&mut grads[beta.0], sum_dy);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(ge, xe)| if xe.to_f64() > 0.0 { *ge } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    // Derivative from the pre-activation so 32-bit rounding of
                    // the stored output does not leak into the gradient.
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(ge, xe)| {
                            let s = 1.0 / (1.0 + (-xe.to_f64()).exp());
                            ge * s * (1.0 - s)
                        })
                        .collect();
                    add_into(&mut grads[x.0], dx);
                }
                Op::Upsample { x, factor } => {
                    let xd = self.dims(*x);
                    let (h, w) = (xd[2], xd[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let ty = bilinear_table(h, *factor);
                    let tx = bilinear_table(w, *factor);
                    let mut dx = vec![0.0; xd.iter().product()];
                    for (dp, up) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let u = up[oy * ow + ox];
                                dp[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * u;
                                dp[y0 * w + x1] += (1.0 - ly) * lx * u;
                                dp[y1 * w + x0] += ly * (1.0 - lx) * u;
                                dp[y1 * w + x1] += ly * lx * u;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::ConcatChannels(parts) => {
                    let od = node.value.dims();
                    let plane = od[2] * od[3];
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.dims(p)[1];
                        if self.ng(p) {
                            let mut dp = Vec::with_capacity(od[0] * pc * plane);
                            for b in 0..od[0] {
                                let s = (b * od[1] + offset) * plane;
                                dp.extend_from_slice(&g[s..s + pc * plane]);
                            }
                            add_into(&mut grads[p.0], dp);
                        }
                        offset += pc;
                    }
                }
                Op::DirPool { x, axis } => {
                    let xd = self.dims(*x);
                    let (h, w) = (xd[2], xd[3]);
                    let mut dx = vec![0.0; xd.iter().product()];
                    for (j, plane) in dx.chunks_mut(h * w).enumerate() {
                        for r in 0..h {
                            for q in 0..w {
                                plane[r * w + q] = match axis {
                                    PoolAxis::Horizontal => g[j * h + r] / w as f64,
                                    PoolAxis::Vertical => g[j * w + q] / h as f64,
                                };
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::TransposeHw(x) => {
                    let xd = self.dims(*x);
                    let (h, w) = (xd[2], xd[3]);
                    let mut dx = vec![0.0; g.len()];
                    for (dp, up) in dx.chunks_mut(h * w).zip(g.chunks(h * w)) {
                        for r in 0..h {
                            for q in 0..w {
                                dp[r * w + q] = up[q * h + r];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::ConcatHeight(parts) => {
                    let od = node.value.dims();
                    let w = od[3];
                    let mut row = 0;
                    for &p in parts {
                        let ph = self.dims(p)[2];
                        if self.ng(p) {
                            let mut dp = Vec::with_capacity(od[0] * od[1] * ph * w);
                            for plane in g.chunks(od[2] * w) {
                                dp.extend_from_slice(&plane[row * w..(row + ph) * w]);
                            }
                            add_into(&mut grads[p.0], dp);
                        }
                        row += ph;
                    }
                }
                Op::SliceHeight { x, start } => {
                    let xd = self.dims(*x);
                    let od = node.value.dims();
                    let w = xd[3];
                    let mut dx = vec![0.0; xd.iter().product()];
                    for (dp, up) in dx.chunks_mut(xd[2] * w).zip(g.chunks(od[2] * w)) {
                        dp[start * w..(start + od[2]) * w].copy_from_slice(up);
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::Mul { a, b } => {
                    let ad = self.dims(*a);
                    let bd = self.dims(*b);
                    let av = self.f64s(*a);
                    let bv = self.f64s(*b);
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    let mut i = 0;
                    for n in 0..ad[0] {
                        for c in 0..ad[1] {
                            for r in 0..ad[2] {
                                for q in 0..ad[3] {
                                    let j = broadcast_index(bd, n, c, r, q);
                                    da[i] = g[i] * bv[j];
                                    db[j] += g[i] * av[i];
                                    i += 1;
                                }
                            }
                        }
                    }
                    if self.ng(*a) {
                        add_into(&mut grads[a.0], da);
                    }
                    if self.ng(*b) {
                        add_into(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if self.ng(*b) {
                        add_into(&mut grads[b.0], g);
                    }
                }
                Op::Scale(x, s) | Op::ScaleGrad(x, s) => {
                    add_into(&mut grads[x.0], g.iter().map(|v| v * s).collect());
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    count,
                } => {
                    let ld = self.dims(*logits);
                    let (b, k) = (ld[0], ld[1]);
                    let plane = ld[2] * ld[3];
                    let lv = self.f64s(*logits);
                    let mut dl = vec![0.0; lv.len()];
                    if *count > 0 {
                        let scale = g[0] / *count as f64;
                        for n in 0..b {
                            for p in 0..plane {
                                let t = labels[n * plane + p];
                                if t == IGNORE {
                                    continue;
                                }
                                let idx = |c: usize| (n * k + c) * plane + p;
                                let m = (0..k).map(|c| lv[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                                let z: f64 = (0..k).map(|c| (lv[idx(c)] - m).exp()).sum();
                                for c in 0..k {
                                    let prob = (lv[idx(c)] - m).exp() / z;
                                    let onehot = if c == t as usize { 1.0 } else { 0.0 };
                                    dl[idx(c)] = scale * (prob - onehot);
                                }
                            }
                        }
                    }
                    add_into(&mut grads[logits.0], dl);
                }
                Op::WeightedSum(terms) => {
                    for &(v, wt) in terms {
                        if self.ng(v) {
                            add_into(&mut grads[v.0], vec![wt * g[0]]);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            dims: self.nodes[..n].iter().map(|nd| nd.value.dims()).collect(),
            params,
        })
    }
}

#[inline]
fn broadcast_index(bd: Dims, n: usize, c: usize, r: usize, q: usize) -> usize {
    let n = if bd[0] == 1 { 0 } else { n };
    let c = if bd[1] == 1 { 0 } else { c };
    let r = if bd[2] == 1 { 0 } else { r };
    let q = if bd[3] == 1 { 0 } else { q };
    ((n * bd[1] + c) * bd[2] + r) * bd[3] + q
}

impl<T: Scalar> ParamStore<T> {
    /// Adds every parameter gradient in `grads` to the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.accumulate_grad(id, g);
        }
    }

    /// Writes batch-norm running statistics queued during a training forward.
    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            self.get_mut(id).value = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::add_batch_norm;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(dims: Dims, v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn delta_through_dilated_all_ones_kernel() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g
            .input(Tensor::from_fn([1, 1, 9, 9], |[_, _, y, x]| (y == 4 && x == 4) as u8 as f64))
            .unwrap();
        let w = g.input(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w, ConvSpec::depthwise(1, 3, 3)).unwrap();
        let out = g.value(y);
        assert_eq!(out.dims(), [1, 1, 9, 9]);
        for r in 0..9 {
            for c in 0..9 {
                let expect = [1, 4, 7].contains(&r) && [1, 4, 7].contains(&c);
                assert_eq!(out.at(0, 0, r, c), expect as u8 as f64, "({r},{c})");
            }
        }
        assert_eq!(out.sum(), 9.0);
    }

    #[test]
    fn identity_pointwise_and_strided_size() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = Tensor::<f64>::uniform([1, 1, 3, 3], 1.0, &mut rng);
        let x = g.input(xt.clone()).unwrap();
        let w = g.input(Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        let y = g.conv2d(x, w, ConvSpec::pointwise()).unwrap();
        assert_eq!(g.value(y), &xt);

        let x2 = g.input(Tensor::zeros([1, 2, 4, 4])).unwrap();
        let w2 = g.input(Tensor::zeros([3, 2, 3, 3])).unwrap();
        let y2 = g.conv2d(x2, w2, ConvSpec::same(3, 2, 1, 1)).unwrap();
        assert_eq!(g.dims(y2), [1, 3, 2, 2]);
    }

    #[test]
    fn zero_upstream_gives_zero_conv_gradients() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.input(Tensor::uniform([1, 2, 5, 5], 1.0, &mut rng)).unwrap();
        let w = g.input(Tensor::uniform([2, 2, 3, 3], 1.0, &mut rng)).unwrap();
        let y = g.conv2d(x, w, ConvSpec::same(3, 1, 2, 1)).unwrap();
        let grads = g.backward(y, &Tensor::zeros(g.dims(y))).unwrap();
        assert_eq!(grads.wrt(x).unwrap().max_abs(), 0.0);
        assert_eq!(grads.wrt(w).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn pointwise_kernel_gradient_is_channel_inner_product() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = Tensor::<f64>::uniform([2, 3, 4, 5], 1.0, &mut rng);
        let x = g.input(xt.clone()).unwrap();
        let w = g.input(Tensor::uniform([2, 3, 1, 1], 1.0, &mut rng)).unwrap();
        let y = g.conv2d(x, w, ConvSpec::pointwise()).unwrap();
        let up = Tensor::<f64>::uniform(g.dims(y), 1.0, &mut rng);
        let gw = g.backward(y, &up).unwrap().wrt(w).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let mut dot = 0.0;
                for b in 0..2 {
                    for r in 0..4 {
                        for c in 0..5 {
                            dot += xt.at(b, i, r, c) * up.at(b, o, r, c);
                        }
                    }
                }
                assert!((gw.at(o, i, 0, 0) - dot).abs() < 1e-12);
            }
        }
    }

    fn bn_store(c: usize) -> (ParamStore<f64>, BnParams) {
        let mut s = ParamStore::new();
        let bn = add_batch_norm(&mut s, "bn", c);
        (s, bn)
    }

    #[test]
    fn train_batch_norm_standardizes() {
        let (store, bn) = bn_store(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g
            .input(Tensor::<f64>::uniform([2, 3, 5, 5], 1.0, &mut rng).map(|v| 3.0 * v + 2.0))
            .unwrap();
        let y = g.batch_norm(x, &bn).unwrap();
        let out = g.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| (0..25).map(move |p| (b, p)))
                .map(|(b, p)| out.at(b, ch, p / 5, p % 5))
                .collect();
            let m = vals.iter().sum::<f64>() / 50.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert_eq!(g.take_stat_updates().len(), 2);
    }

    #[test]
    fn constant_channel_normalizes_to_beta() {
        let (mut store, bn) = bn_store(1);
        store.set_value(bn.beta, Tensor::full([1, 1, 1, 1], 0.3)).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::full([2, 1, 3, 3], 7.0)).unwrap();
        let y = g.batch_norm(x, &bn).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let (mut store, bn) = bn_store(2);
        store.set_value(bn.gamma, t64([1, 2, 1, 1], &[2.0, 0.5])).unwrap();
        store.set_value(bn.beta, t64([1, 2, 1, 1], &[0.1, -1.0])).unwrap();
        store.set_value(bn.running_mean, t64([1, 2, 1, 1], &[1.0, -2.0])).unwrap();
        store.set_value(bn.running_var, t64([1, 2, 1, 1], &[4.0, 0.25])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = Tensor::<f64>::uniform([1, 2, 3, 3], 2.0, &mut rng);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(xt.clone()).unwrap();
        let y = g.batch_norm(x, &bn).unwrap();
        let (gm, bt, m, v) = ([2.0, 0.5], [0.1, -1.0], [1.0, -2.0], [4.0, 0.25]);
        for ch in 0..2 {
            for p in 0..9 {
                let xv = xt.at(0, ch, p / 3, p % 3);
                let expect = gm[ch] * (xv - m[ch]) / (v[ch] + 1e-5f64).sqrt() + bt[ch];
                assert!((g.value(y).at(0, ch, p / 3, p % 3) - expect).abs() < 1e-12);
            }
        }
        assert!(g.take_stat_updates().is_empty());
    }

    #[test]
    fn batch_norm_rejects_channel_mismatch() {
        let (store, bn) = bn_store(2);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::zeros([1, 3, 2, 2])).unwrap();
        assert!(matches!(g.batch_norm(x, &bn), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_activations() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(t64([1, 1, 1, 2], &[-2.0, 0.0])).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0]);
        assert_eq!(g.value(s).data()[1], 0.5);
        let gs = g.backward(s, &t64([1, 1, 1, 2], &[0.0, 1.0])).unwrap();
        assert_eq!(gs.wrt(x).unwrap().data()[1], 0.25);
    }

    #[test]
    fn bilinear_upsampling_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let c = g.input(Tensor::full([1, 2, 3, 2], 1.5)).unwrap();
        let cu = g.upsample_bilinear(c, 4).unwrap();
        assert_eq!(g.dims(cu), [1, 2, 12, 8]);
        assert!(g.value(cu).data().iter().all(|&v| v == 1.5));

        let x = g.input(t64([1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0])).unwrap();
        let y = g.upsample_bilinear(x, 2).unwrap();
        // Hand interpolation with sample points at (o + 0.5) / 2 - 0.5.
        let expect = [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ];
        for r in 0..4 {
            for q in 0..4 {
                assert!((g.value(y).at(0, 0, r, q) - expect[r][q]).abs() < 1e-15);
            }
        }
        assert!(g.upsample_bilinear(x, 0).is_err());
    }

    #[test]
    fn directional_pool_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(t64([1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap();
        let h = g.directional_avg_pool(x, PoolAxis::Horizontal).unwrap();
        let v = g.directional_avg_pool(x, PoolAxis::Vertical).unwrap();
        assert_eq!(g.dims(h), [1, 1, 2, 1]);
        assert_eq!(g.value(h).data(), &[2.0, 6.0]);
        assert_eq!(g.dims(v), [1, 1, 1, 2]);
        assert_eq!(g.value(v).data(), &[3.0, 5.0]);
        let k = g.input(Tensor::full([2, 3, 4, 5], -0.75)).unwrap();
        for axis in [PoolAxis::Horizontal, PoolAxis::Vertical] {
            let p = g.directional_avg_pool(k, axis).unwrap();
            assert!(g.value(p).data().iter().all(|&v| v == -0.75));
        }
    }

    #[test]
    fn concat_routes_gradient_slices_back() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = g.input(Tensor::uniform([2, 2, 3, 3], 1.0, &mut rng)).unwrap();
        let b = g.input(Tensor::uniform([2, 3, 3, 3], 1.0, &mut rng)).unwrap();
        let single = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let y = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.dims(y), [2, 5, 3, 3]);
        let up = Tensor::<f64>::uniform([2, 5, 3, 3], 1.0, &mut rng);
        let grads = g.backward(y, &up).unwrap();
        let (ga, gb) = (grads.wrt(a).unwrap(), grads.wrt(b).unwrap());
        for n in 0..2 {
            for c in 0..5 {
                for p in 0..9 {
                    let got = if c < 2 {
                        ga.at(n, c, p / 3, p % 3)
                    } else {
                        gb.at(n, c - 2, p / 3, p % 3)
                    };
                    assert_eq!(got, up.at(n, c, p / 3, p % 3));
                }
            }
        }
        let bad = g.input(Tensor::zeros([2, 1, 4, 3])).unwrap();
        assert!(g.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let z = g.input(Tensor::zeros([1, 6, 2, 2])).unwrap();
        let m = ClassMask::from_fn(2, 2, |y, x| (y * 2 + x) as u8);
        let l = g.cross_entropy(z, std::slice::from_ref(&m)).unwrap();
        assert!((g.value(l).data()[0] - 6f64.ln()).abs() < 1e-12);

        let conf = g
            .input(Tensor::from_fn([1, 6, 2, 2], |[_, c, y, x]| {
                if c == y * 2 + x {
                    1000.0
                } else {
                    0.0
                }
            }))
            .unwrap();
        let l = g.cross_entropy(conf, std::slice::from_ref(&m)).unwrap();
        assert!(g.value(l).data()[0] < 1e-12);

        let l = g.cross_entropy(z, &[ClassMask::filled(2, 2, IGNORE)]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        assert!(matches!(
            g.cross_entropy(z, &[ClassMask::filled(2, 2, 6)]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::full([1, 1, 1, 1], 1e300)).unwrap();
        assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite(_))));
    }

    fn conv_case() -> impl Strategy<Value = (Dims, Dims, ConvSpec, u64)> {
        (1usize..3, 1usize..4, 3usize..8, 3usize..8, 0usize..3, 1usize..3, 1usize..3, any::<u64>())
            .prop_flat_map(|(b, cin, h, w, kind, stride, dil, seed)| {
                let (cout, k, spec) = match kind {
                    0 => (2, 1, ConvSpec::pointwise()),
                    1 => (cin, 3, ConvSpec::depthwise(cin, 3, dil)),
                    _ => (2, 3, ConvSpec::same(3, stride, dil, 1)),
                };
                let kin = if kind == 1 { 1 } else { cin };
                Just(([b, cin, h, w], [cout, kin, k, k], spec, seed))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conv_is_linear_in_its_input((xd, wd, spec, seed) in conv_case(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform(xd, 1.0, &mut rng).to_f64_vec();
            let y = Tensor::<f64>::uniform(xd, 1.0, &mut rng).to_f64_vec();
            let w = Tensor::<f64>::uniform(wd, 1.0, &mut rng).to_f64_vec();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (cm, _) = conv2d_forward(&mix, xd, &w, wd, &spec).unwrap();
            let (cx, _) = conv2d_forward(&x, xd, &w, wd, &spec).unwrap();
            let (cy, _) = conv2d_forward(&y, xd, &w, wd, &spec).unwrap();
            let scale = cm.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..cm.len() {
                prop_assert!((cm[i] - (a * cx[i] + b * cy[i])).abs() <= 1e-5 * scale);
            }
        }

        #[test]
        fn depthwise_unit_kernel_is_identity(b in 1usize..3, c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform([b, c, h, w], 1.0, &mut rng).to_f64_vec();
            let k = vec![1.0; c];
            let spec = ConvSpec { groups: c, ..ConvSpec::pointwise() };
            let (y, d) = conv2d_forward(&x, [b, c, h, w], &k, [c, 1, 1, 1], &spec).unwrap();
            prop_assert_eq!(d, [b, c, h, w]);
            prop_assert_eq!(y, x);
        }

        #[test]
        fn concat_then_slice_is_lossless(c1 in 1usize..4, c2 in 1usize..4, h1 in 1usize..4, h2 in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store, Mode::Eval);
            let a = g.input(Tensor::uniform([1, c1, h1, 3], 1.0, &mut rng)).unwrap();
            let b = g.input(Tensor::uniform([1, c1, h2, 3], 1.0, &mut rng)).unwrap();
            let cat = g.concat_height(&[a, b]).unwrap();
            let sa = g.slice_height(cat, 0, h1).unwrap();
            let sb = g.slice_height(cat, h1, h2).unwrap();
            prop_assert_eq!(g.value(sa), g.value(a));
            prop_assert_eq!(g.value(sb), g.value(b));
            let d = g.input(Tensor::uniform([1, c2, h1, 3], 1.0, &mut rng)).unwrap();
            let cc = g.concat_channels(&[a, d]).unwrap();
            let v = g.value(cc).clone();
            let va = g.value(a).clone();
            let vd = g.value(d).clone();
            for c in 0..c1 + c2 {
                for r in 0..h1 {
                    for q in 0..3 {
                        let src = if c < c1 { va.at(0, c, r, q) } else { vd.at(0, c - c1, r, q) };
                        prop_assert_eq!(v.at(0, c, r, q), src);
                    }
                }
            }
        }

        #[test]
        fn pools_of_constant_rows_and_columns_are_exact(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = Tensor::<f64>::uniform([1, 1, h, 1], 1.0, &mut rng);
            let cols = Tensor::<f64>::uniform([1, 1, 1, w], 1.0, &mut rng);
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store, Mode::Eval);
            let xr = g.input(Tensor::from_fn([1, 1, h, w], |[_, _, y, _]| rows.at(0, 0, y, 0))).unwrap();
            let xc = g.input(Tensor::from_fn([1, 1, h, w], |[_, _, _, x]| cols.at(0, 0, 0, x))).unwrap();
            let ph = g.directional_avg_pool(xr, PoolAxis::Horizontal).unwrap();
            let pv = g.directional_avg_pool(xc, PoolAxis::Vertical).unwrap();
            for y in 0..h {
                prop_assert!((g.value(ph).at(0, 0, y, 0) - rows.at(0, 0, y, 0)).abs() <= 1e-15);
            }
            for x in 0..w {
                prop_assert!((g.value(pv).at(0, 0, 0, x) - cols.at(0, 0, 0, x)).abs() <= 1e-15);
            }
        }
    }
}

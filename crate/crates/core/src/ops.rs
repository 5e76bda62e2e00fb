//! Linear layer operations: dense matrix product, valid strided
//! convolution and non-overlapping average pooling.
//!
//! Every kernel has a dense form and an event-driven form. Both accumulate
//! each output in ascending input-index order in `f64`, so for the same
//! nonzero inputs they produce bit-identical results. The event form only
//! touches outputs reachable from nonzero inputs.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{num_elements, Element, SparseEvents, Tensor};

/// Multiply-accumulate bookkeeping for one layer (or an aggregate).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub macs_total: u64,
    pub macs_nonzero: u64,
    /// State additions performed by sigma integration. Not part of the
    /// operation-sparsity ratio.
    pub adds_state: u64,
}

impl OpCounter {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn merge(&mut self, other: &OpCounter) {
        self.macs_total += other.macs_total;
        self.macs_nonzero += other.macs_nonzero;
        self.adds_state += other.adds_state;
    }

    /// Fraction of MACs whose activation operand was zero.
    pub fn operation_sparsity(&self) -> Result<f64> {
        if self.macs_total == 0 {
            return Err(Error::Domain("operation sparsity undefined with zero total MACs".into()));
        }
        Ok(1.0 - self.macs_nonzero as f64 / self.macs_total as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LinearOp {
    Dense,
    Conv2d { stride: usize },
    AvgPool { window: usize },
}

/// A linear op bound to concrete input and weight shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OpGeometry {
    op: LinearOp,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    // conv / pool geometry, unused for dense
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl OpGeometry {
    /// `weight_shape` is `[out, in]` for dense, `[kh, kw, cin, cout]` for
    /// conv2d and ignored for average pooling.
    pub fn new(op: LinearOp, weight_shape: Option<&[usize]>, in_shape: &[usize]) -> Result<Self> {
        let mut g = OpGeometry {
            op,
            in_shape: in_shape.to_vec(),
            out_shape: Vec::new(),
            h: 0,
            w: 0,
            cin: 0,
            kh: 0,
            kw: 0,
            cout: 0,
            stride: 1,
            oh: 0,
            ow: 0,
        };
        match op {
            LinearOp::Dense => {
                let Some(&[out, inp]) = weight_shape else {
                    return dim_err(format!("dense weight must be [out, in], got {weight_shape:?}"));
                };
                if num_elements(in_shape) != inp {
                    return dim_err(format!("dense layer expects {inp} inputs, got shape {in_shape:?}"));
                }
                g.cin = inp;
                g.cout = out;
                g.out_shape = vec![out];
            }
            LinearOp::Conv2d { stride } => {
                let Some(&[kh, kw, wcin, cout]) = weight_shape else {
                    return dim_err(format!("conv2d weight must be [kh, kw, cin, cout], got {weight_shape:?}"));
                };
                let &[h, w, cin] = in_shape else {
                    return dim_err(format!("conv2d input must be [h, w, c], got {in_shape:?}"));
                };
                if stride == 0 {
                    return dim_err("conv2d stride must be positive");
                }
                if wcin != cin {
                    return dim_err(format!("conv2d weight has {wcin} input channels, input has {cin}"));
                }
                if kh > h || kw > w {
                    return dim_err(format!("kernel {kh}x{kw} larger than input {h}x{w}"));
                }
                g.h = h;
                g.w = w;
                g.cin = cin;
                g.kh = kh;
                g.kw = kw;
                g.cout = cout;
                g.stride = stride;
                g.oh = (h - kh) / stride + 1;
                g.ow = (w - kw) / stride + 1;
                g.out_shape = vec![g.oh, g.ow, cout];
            }
            LinearOp::AvgPool { window } => {
                let &[h, w, c] = in_shape else {
                    return dim_err(format!("avg_pool2d input must be [h, w, c], got {in_shape:?}"));
                };
                if window == 0 || h % window != 0 || w % window != 0 {
                    return dim_err(format!("pool window {window} does not divide {h}x{w}"));
                }
                g.h = h;
                g.w = w;
                g.cin = c;
                g.cout = c;
                g.kh = window;
                g.kw = window;
                g.stride = window;
                g.oh = h / window;
                g.ow = w / window;
                g.out_shape = vec![g.oh, g.ow, c];
            }
        }
        Ok(g)
    }

    pub fn op(&self) -> LinearOp {
        self.op
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_len(&self) -> usize {
        num_elements(&self.in_shape)
    }

    pub fn out_len(&self) -> usize {
        num_elements(&self.out_shape)
    }

    pub fn weight_len(&self) -> usize {
        match self.op {
            LinearOp::Dense => self.cin * self.cout,
            LinearOp::Conv2d { .. } => self.kh * self.kw * self.cin * self.cout,
            LinearOp::AvgPool { .. } => 0,
        }
    }

    /// MACs the dense form of this op costs per invocation.
    pub fn total_macs(&self) -> u64 {
        match self.op {
            LinearOp::Dense => (self.cin * self.cout) as u64,
            LinearOp::Conv2d { .. } => (self.oh * self.ow * self.cout * self.kh * self.kw * self.cin) as u64,
            LinearOp::AvgPool { .. } => self.in_len() as u64,
        }
    }

    fn covering(&self, i: usize, k: usize, n_out: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        // (output coordinate, kernel offset) pairs along one spatial axis
        let s = self.stride;
        (0..k).filter_map(move |kk| {
            if i < kk || !(i - kk).is_multiple_of(s) {
                return None;
            }
            let o = (i - kk) / s;
            (o < n_out).then_some((o, kk))
        })
    }

    /// MACs a single nonzero value at input index `idx` triggers.
    pub fn fanout_at(&self, idx: usize) -> u64 {
        match self.op {
            LinearOp::Dense => self.cout as u64,
            LinearOp::Conv2d { .. } => {
                let iy = idx / (self.w * self.cin);
                let ix = (idx / self.cin) % self.w;
                let ny = self.covering(iy, self.kh, self.oh).count();
                let nx = self.covering(ix, self.kw, self.ow).count();
                (ny * nx * self.cout) as u64
            }
            LinearOp::AvgPool { .. } => 1,
        }
    }

    /// Nominal downstream MACs per nonzero input away from borders.
    pub fn nominal_fanout(&self) -> f64 {
        match self.op {
            LinearOp::Dense => self.cout as f64,
            LinearOp::Conv2d { stride } => (self.kh * self.kw * self.cout) as f64 / (stride * stride) as f64,
            LinearOp::AvgPool { .. } => 1.0,
        }
    }

    fn check_weight(&self, w: &[f32]) -> Result<()> {
        if w.len() != self.weight_len() {
            return dim_err(format!("weight has {} values, op needs {}", w.len(), self.weight_len()));
        }
        Ok(())
    }

    /// `acc += op(x)` for a dense input.
    pub fn accumulate_dense<E: Element>(
        &self,
        w: &[f32],
        x: &[E],
        acc: &mut [f64],
        counter: &mut OpCounter,
    ) -> Result<()> {
        self.check_weight(w)?;
        if x.len() != self.in_len() || acc.len() != self.out_len() {
            return dim_err(format!(
                "op expects {} inputs / {} outputs, got {} / {}",
                self.in_len(),
                self.out_len(),
                x.len(),
                acc.len()
            ));
        }
        let x: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
        counter.macs_total += self.total_macs();
        match self.op {
            LinearOp::Dense => {
                let nnz = x.iter().filter(|&&v| v != 0.0).count() as u64;
                counter.macs_nonzero += nnz * self.cout as u64;
                for (o, out) in acc.iter_mut().enumerate() {
                    let row = &w[o * self.cin..(o + 1) * self.cin];
                    let mut s = 0.0f64;
                    for (&wi, &xi) in row.iter().zip(&x) {
                        s += wi as f64 * xi;
                    }
                    *out += s;
                }
            }
            LinearOp::Conv2d { .. } => {
                let mut nz = 0u64;
                let mut sums = vec![0.0f64; self.cout];
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        sums.iter_mut().for_each(|s| *s = 0.0);
                        for ky in 0..self.kh {
                            let iy = oy * self.stride + ky;
                            for kx in 0..self.kw {
                                let ix = ox * self.stride + kx;
                                let base = (iy * self.w + ix) * self.cin;
                                for ci in 0..self.cin {
                                    let xv = x[base + ci];
                                    if xv != 0.0 {
                                        nz += 1;
                                    }
                                    let wrow = &w[((ky * self.kw + kx) * self.cin + ci) * self.cout..][..self.cout];
                                    for (s, &wv) in sums.iter_mut().zip(wrow) {
                                        *s += wv as f64 * xv;
                                    }
                                }
                            }
                        }
                        let out = &mut acc[(oy * self.ow + ox) * self.cout..][..self.cout];
                        for (a, s) in out.iter_mut().zip(&sums) {
                            *a += s;
                        }
                    }
                }
                counter.macs_nonzero += nz * self.cout as u64;
            }
            LinearOp::AvgPool { .. } => {
                let inv = 1.0 / (self.kh * self.kw) as f64;
                counter.macs_nonzero += x.iter().filter(|&&v| v != 0.0).count() as u64;
                let c = self.cin;
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        for ch in 0..c {
                            let mut s = 0.0f64;
                            for dy in 0..self.kh {
                                for dx in 0..self.kw {
                                    let iy = oy * self.kh + dy;
                                    let ix = ox * self.kw + dx;
                                    s += x[(iy * self.w + ix) * c + ch] * inv;
                                }
                            }
                            acc[(oy * self.ow + ox) * c + ch] += s;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// `acc += op(densify(events))`, touching only what the events reach.
    ///
    /// The per-output sums are formed in a scratch buffer first so that the
    /// rounding matches [`OpGeometry::accumulate_dense`] exactly.
    pub fn accumulate_events<E: Element>(
        &self,
        w: &[f32],
        events: &[(usize, E)],
        acc: &mut [f64],
        counter: &mut OpCounter,
    ) -> Result<()> {
        self.check_weight(w)?;
        if acc.len() != self.out_len() {
            return dim_err(format!("op produces {} outputs, accumulator has {}", self.out_len(), acc.len()));
        }
        if let Some(&(last, _)) = events.last() {
            if last >= self.in_len() {
                return dim_err(format!("event index {last} exceeds input size {}", self.in_len()));
            }
        }
        counter.macs_total += self.total_macs();
        if events.is_empty() {
            return Ok(());
        }
        let mut sums = vec![0.0f64; self.out_len()];
        match self.op {
            LinearOp::Dense => {
                counter.macs_nonzero += (events.len() * self.cout) as u64;
                for (o, s) in sums.iter_mut().enumerate() {
                    let row = &w[o * self.cin..(o + 1) * self.cin];
                    for &(i, v) in events {
                        *s += row[i] as f64 * v.to_f64();
                    }
                }
            }
            LinearOp::Conv2d { .. } => {
                for &(idx, v) in events {
                    let v = v.to_f64();
                    let iy = idx / (self.w * self.cin);
                    let ix = (idx / self.cin) % self.w;
                    let ci = idx % self.cin;
                    for (oy, ky) in self.covering(iy, self.kh, self.oh) {
                        for (ox, kx) in self.covering(ix, self.kw, self.ow) {
                            counter.macs_nonzero += self.cout as u64;
                            let wrow = &w[((ky * self.kw + kx) * self.cin + ci) * self.cout..][..self.cout];
                            let out = &mut sums[(oy * self.ow + ox) * self.cout..][..self.cout];
                            for (s, &wv) in out.iter_mut().zip(wrow) {
                                *s += wv as f64 * v;
                            }
                        }
                    }
                }
            }
            LinearOp::AvgPool { .. } => {
                let inv = 1.0 / (self.kh * self.kw) as f64;
                counter.macs_nonzero += events.len() as u64;
                let c = self.cin;
                for &(idx, v) in events {
                    let iy = idx / (self.w * c);
                    let ix = (idx / c) % self.w;
                    let ch = idx % c;
                    let o = ((iy / self.kh) * self.ow + ix / self.kw) * c + ch;
                    sums[o] += v.to_f64() * inv;
                }
            }
        }
        for (a, s) in acc.iter_mut().zip(&sums) {
            *a += s;
        }
        Ok(())
    }

    /// Gradients of `sum(grad_out * op(x))` with respect to the weights
    /// (accumulated into `grad_w`) and the input (returned).
    pub fn backward(&self, w: &[f32], x: &[f64], grad_out: &[f64], grad_w: &mut [f64]) -> Result<Vec<f64>> {
        self.check_weight(w)?;
        if x.len() != self.in_len() || grad_out.len() != self.out_len() || grad_w.len() != w.len() {
            return dim_err("backward buffer sizes do not match the op geometry");
        }
        let mut gx = vec![0.0f64; self.in_len()];
        match self.op {
            LinearOp::Dense => {
                for (o, &g) in grad_out.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = &w[o * self.cin..(o + 1) * self.cin];
                    let grow = &mut grad_w[o * self.cin..(o + 1) * self.cin];
                    for i in 0..self.cin {
                        grow[i] += g * x[i];
                        gx[i] += row[i] as f64 * g;
                    }
                }
            }
            LinearOp::Conv2d { .. } => {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let g = &grad_out[(oy * self.ow + ox) * self.cout..][..self.cout];
                        if g.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        for ky in 0..self.kh {
                            let iy = oy * self.stride + ky;
                            for kx in 0..self.kw {
                                let ix = ox * self.stride + kx;
                                let base = (iy * self.w + ix) * self.cin;
                                for ci in 0..self.cin {
                                    let xv = x[base + ci];
                                    let woff = ((ky * self.kw + kx) * self.cin + ci) * self.cout;
                                    let wrow = &w[woff..][..self.cout];
                                    let gwrow = &mut grad_w[woff..][..self.cout];
                                    let mut s = 0.0;
                                    for co in 0..self.cout {
                                        gwrow[co] += g[co] * xv;
                                        s += wrow[co] as f64 * g[co];
                                    }
                                    gx[base + ci] += s;
                                }
                            }
                        }
                    }
                }
            }
            LinearOp::AvgPool { .. } => {
                let inv = 1.0 / (self.kh * self.kw) as f64;
                let c = self.cin;
                for (idx, g) in gx.iter_mut().enumerate() {
                    let iy = idx / (self.w * c);
                    let ix = (idx / c) % self.w;
                    let ch = idx % c;
                    *g = grad_out[((iy / self.kh) * self.ow + ix / self.kw) * c + ch] * inv;
                }
            }
        }
        Ok(gx)
    }
}

fn weight_shape_for(op: LinearOp, w: Option<&Tensor>) -> Result<Option<&[usize]>> {
    match (op, w) {
        (LinearOp::AvgPool { .. }, _) => Ok(None),
        (_, Some(w)) => Ok(Some(w.shape())),
        (_, None) => dim_err("dense and conv2d ops need a weight tensor"),
    }
}

/// Dense application of any linear op; `y = g(W, x)`.
pub fn linear_apply<E: Element>(
    w: Option<&Tensor>,
    x: &Tensor<E>,
    op: LinearOp,
    counter: &mut OpCounter,
) -> Result<Tensor<E>> {
    let geom = OpGeometry::new(op, weight_shape_for(op, w)?, x.shape())?;
    let mut acc = vec![0.0f64; geom.out_len()];
    let wdata = w.map(|w| w.data()).unwrap_or(&[]);
    geom.accumulate_dense(wdata, x.data(), &mut acc, counter)?;
    Tensor::new(geom.out_shape().to_vec(), acc.into_iter().map(E::from_f64).collect())
}

/// `y[o] = sum_i W[o, i] * x[i]` for `W: [out, in]`.
pub fn dense_linear<E: Element>(w: &Tensor, x: &Tensor<E>, counter: &mut OpCounter) -> Result<Tensor<E>> {
    if w.shape().len() != 2 || w.shape()[1] != x.len() {
        return dim_err(format!("dense weight {:?} cannot multiply input of length {}", w.shape(), x.len()));
    }
    linear_apply(Some(w), x, LinearOp::Dense, counter)
}

/// Valid cross-correlation of `X: [h, w, cin]` with `W: [kh, kw, cin, cout]`.
pub fn conv2d<E: Element>(w: &Tensor, x: &Tensor<E>, stride: usize, counter: &mut OpCounter) -> Result<Tensor<E>> {
    linear_apply(Some(w), x, LinearOp::Conv2d { stride }, counter)
}

/// Non-overlapping mean over `window x window` blocks of `X: [h, w, c]`.
pub fn avg_pool2d<E: Element>(x: &Tensor<E>, window: usize) -> Result<Tensor<E>> {
    linear_apply(None, x, LinearOp::AvgPool { window }, &mut OpCounter::default())
}

/// `g(W, densify(dx))`, doing and counting work only for nonzero events.
pub fn sparse_linear_apply<E: Element>(
    w: Option<&Tensor>,
    dx: &SparseEvents<E>,
    op: LinearOp,
    counter: &mut OpCounter,
) -> Result<Tensor<E>> {
    let geom = OpGeometry::new(op, weight_shape_for(op, w)?, dx.shape())?;
    let mut acc = vec![0.0f64; geom.out_len()];
    let wdata = w.map(|w| w.data()).unwrap_or(&[]);
    geom.accumulate_events(wdata, dx.entries(), &mut acc, counter)?;
    Tensor::new(geom.out_shape().to_vec(), acc.into_iter().map(E::from_f64).collect())
}

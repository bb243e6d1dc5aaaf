//! Cross-scale pixel-to-region relation operator.
//!
//! A low-level map `x` supplies one query per pixel; the upsampled high-level
//! map `z` supplies keys and values over a `k x k` (optionally dilated) window
//! centred at the same location. Each window position gets the logit
//! `q_i . k_j + f_p(p_j)`, the logits are normalised over the window and the
//! output is the weighted sum of the values.
//!
//! Projections are applied per pixel before window extraction, so taps that
//! fall outside the map contribute a zero key and a zero value; their logit is
//! the positional term alone.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use crate::autograd::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, gemm};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Softmax,
    /// Raw logits used directly as aggregation weights.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RseConfig {
    pub channels: usize,
    pub reduction: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub value_channels: usize,
    pub normalization: Normalization,
    /// Divide dot products by `sqrt(channels / reduction)`.
    pub scale_logits: bool,
}

impl RseConfig {
    /// `k = 7`, dilation 1, `d = 2`, `Cv = C`, softmax weights.
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            reduction: 2,
            kernel: 7,
            dilation: 1,
            value_channels: channels,
            normalization: Normalization::Softmax,
            scale_logits: false,
        }
    }

    pub fn with_window(mut self, kernel: usize, dilation: usize) -> Self {
        self.kernel = kernel;
        self.dilation = dilation;
        self
    }

    pub fn with_reduction(mut self, reduction: usize) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn qk_channels(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn window_len(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn effective_extent(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || c % 2 != 0 {
            return Err(Error::InvalidArgument(format!("relation channels must be even and > 0, got {c}")));
        }
        if self.reduction == 0 || c % self.reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {c} not divisible by reduction factor {}",
                self.reduction
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be >= 1".into()));
        }
        if self.value_channels == 0 {
            return Err(Error::InvalidArgument("value channels must be >= 1".into()));
        }
        Ok(())
    }

    fn dot_scale(&self) -> f64 {
        if self.scale_logits {
            1.0 / (self.qk_channels() as f64).sqrt()
        } else {
            1.0
        }
    }

    /// `(dy, dx)` of every window position in row-major window order.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.kernel / 2) as isize;
        let d = self.dilation as isize;
        (-r..=r).flat_map(|a| (-r..=r).map(move |b| (a * d, b * d))).collect()
    }

    /// Learnable scalars: `f_q`, `f_k`, `f_v`, `f_p` including biases.
    pub fn param_count(&self) -> usize {
        let (c, cq, cv) = (self.channels, self.qk_channels(), self.value_channels);
        2 * (c * cq + cq) + (c * cv + cv) + (c + 1)
    }
}

/// Learnable transforms of one relation operator. Weight matrices map input
/// channels (rows) to output channels (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct RseParams {
    pub config: RseConfig,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wp: Tensor,
    pub bp: Tensor,
}

pub const PARAM_NAMES: [&str; 8] = ["wq", "bq", "wk", "bk", "wv", "bv", "wp", "bp"];

impl RseParams {
    pub fn zeros(config: RseConfig) -> Result<Self> {
        config.validate()?;
        let (c, cq, cv) = (config.channels, config.qk_channels(), config.value_channels);
        Ok(Self {
            wq: Tensor::zeros(&[c, cq]),
            bq: Tensor::zeros(&[cq]),
            wk: Tensor::zeros(&[c, cq]),
            bk: Tensor::zeros(&[cq]),
            wv: Tensor::zeros(&[c, cv]),
            bv: Tensor::zeros(&[cv]),
            wp: Tensor::zeros(&[c, 1]),
            bp: Tensor::zeros(&[1]),
            config,
        })
    }

    /// Fan-in scaled normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: RseConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let std = (1.0 / p.config.channels as f64).sqrt();
        p.wq = Tensor::randn(p.wq.shape(), std, rng);
        p.wk = Tensor::randn(p.wk.shape(), std, rng);
        p.wv = Tensor::randn(p.wv.shape(), std, rng);
        p.wp = Tensor::randn(p.wp.shape(), std, rng);
        Ok(p)
    }

    /// Random weights and biases, for tests.
    pub fn random<R: Rng + ?Sized>(config: RseConfig, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for t in p.tensors_mut() {
            *t = Tensor::randn(t.shape(), std, rng);
        }
        Ok(p)
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wp, &self.bp]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wp,
            &mut self.bp,
        ]
    }

    /// Registers every transform on the tape.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> RseVars {
        let v = self.tensors().map(|t| tape.leaf(t.clone(), requires_grad));
        RseVars { config: self.config.clone(), params: v }
    }
}

/// Tape handles for the eight transforms of [`RseParams`], in [`PARAM_NAMES`] order.
#[derive(Debug, Clone)]
pub struct RseVars {
    pub config: RseConfig,
    pub params: [Var; 8],
}

// ── Relative positions ────────────────────────────────────────────────────

/// `[k, k, C]` map: channels `0..C/2` hold the normalised row offset of each
/// window position, channels `C/2..C` the column offset.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMap {
    pub map: Tensor,
}

impl PositionMap {
    pub fn kernel(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.map.shape()[2]
    }

    /// Channel vector at window position `j` (row-major).
    pub fn entry(&self, j: usize) -> &[f64] {
        let c = self.channels();
        &self.map.data()[j * c..(j + 1) * c]
    }
}

/// Offsets `{-k/2..k/2} * dilation`, divided by `(k/2) * dilation` so every
/// map spans exactly `[-1, 1]`. A `1 x 1` window gives the zero map.
pub fn relative_position_map(kernel: usize, dilation: usize, channels: usize) -> Result<PositionMap> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {kernel}")));
    }
    if channels % 2 != 0 || channels == 0 {
        return Err(Error::InvalidArgument(format!("position channels must be even, got {channels}")));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be >= 1".into()));
    }
    let r = (kernel / 2) as isize;
    let norm = (r as usize * dilation).max(1) as f64;
    let half = channels / 2;
    let mut data = Vec::with_capacity(kernel * kernel * channels);
    for a in -r..=r {
        for b in -r..=r {
            let row = (a * dilation as isize) as f64 / norm;
            let col = (b * dilation as isize) as f64 / norm;
            data.extend(std::iter::repeat_n(row, half));
            data.extend(std::iter::repeat_n(col, half));
        }
    }
    Ok(PositionMap { map: Tensor::new(vec![kernel, kernel, channels], data)? })
}

/// Scalar positional logit `f_p(p_j)` of every window position.
pub fn positional_logits(pos: &PositionMap, wp: &Tensor, bp: &Tensor) -> Result<Vec<f64>> {
    let c = pos.channels();
    if wp.shape() != [c, 1] || bp.shape() != [1] {
        return Err(Error::ShapeMismatch { left: vec![c, 1], right: wp.shape().to_vec() });
    }
    let k2 = pos.kernel() * pos.kernel();
    Ok((0..k2)
        .map(|j| pos.entry(j).iter().zip(wp.data()).map(|(p, w)| p * w).sum::<f64>() + bp.data()[0])
        .collect())
}

// ── Per-pixel building blocks ─────────────────────────────────────────────

/// The `k x k x C` window of batch item `batch` of `z` centred at `(row, col)`,
/// sampled every `dilation` pixels; out-of-map samples are zero.
pub fn extract_window(
    z: &Tensor,
    batch: usize,
    (row, col): (usize, usize),
    kernel: usize,
    dilation: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = z.dims4()?;
    if batch >= b || row >= h || col >= w {
        return Err(Error::IndexOutOfRange { index: vec![batch, row, col], extent: vec![b, h, w] });
    }
    let r = (kernel / 2) as isize;
    let d = dilation as isize;
    let mut out = Vec::with_capacity(kernel * kernel * c);
    for a in -r..=r {
        for bb in -r..=r {
            let y = row as isize + a * d;
            let x = col as isize + bb * d;
            let inside = y >= 0 && y < h as isize && x >= 0 && x < w as isize;
            for ch in 0..c {
                out.push(if inside { z.at4(batch, ch, y as usize, x as usize) } else { 0.0 });
            }
        }
    }
    Tensor::new(vec![kernel, kernel, c], out)
}

/// `logits[a, b] = dot_scale * (q . keys[a, b]) + f_p(p[a, b])`, shape `[k, k, 1]`.
pub fn relation_logits(
    query: &Tensor,
    keys: &Tensor,
    pos: &PositionMap,
    wp: &Tensor,
    bp: &Tensor,
    dot_scale: f64,
) -> Result<Tensor> {
    let (kh, kw, ck) = match keys.shape() {
        &[a, b, c] => (a, b, c),
        s => return Err(Error::InvalidShape { shape: s.to_vec(), reason: "keys must be [k, k, C]".into() }),
    };
    if query.shape() != [ck] {
        return Err(Error::ShapeMismatch { left: query.shape().to_vec(), right: keys.shape().to_vec() });
    }
    if pos.kernel() != kh || kh != kw {
        return Err(Error::ShapeMismatch { left: pos.map.shape().to_vec(), right: keys.shape().to_vec() });
    }
    let pl = positional_logits(pos, wp, bp)?;
    let q = query.data();
    let out: Vec<f64> = keys
        .data()
        .chunks(ck)
        .zip(&pl)
        .map(|(key, p)| dot_scale * key.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() + p)
        .collect();
    Tensor::new(vec![kh, kw, 1], out)
}

/// Normalises `[k, k, 1]` logits into aggregation weights.
pub fn aggregation_weights(logits: &Tensor, normalization: Normalization) -> Tensor {
    let mut w = logits.data().to_vec();
    if normalization == Normalization::Softmax {
        softmax_in_place(&mut w);
    }
    Tensor::new(logits.shape().to_vec(), w).expect("same shape")
}

/// `sum_j weights[j] * values[j]` for `[k, k, 1]` weights and `[k, k, Cv]` values.
pub fn aggregate(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
    let cv = *values.shape().last().unwrap();
    if weights.len() * cv != values.len() {
        return Err(Error::ShapeMismatch { left: weights.shape().to_vec(), right: values.shape().to_vec() });
    }
    let mut out = vec![0.0; cv];
    for (w, v) in weights.data().iter().zip(values.data().chunks(cv)) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Tensor::new(vec![cv], out)
}

// ── Vectorised operator ───────────────────────────────────────────────────

#[derive(Debug)]
pub struct RseSaved {
    config: RseConfig,
    dims: (usize, usize, usize),
    x_px: Vec<f64>,
    z_px: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    weights: Vec<f64>,
    pos: PositionMap,
}

static EXTENT_WARNED: AtomicBool = AtomicBool::new(false);

fn check_inputs(x: &Tensor, z: &Tensor, params: &[&Tensor; 8], config: &RseConfig) -> Result<()> {
    config.validate()?;
    if x.shape() != z.shape() {
        return Err(Error::ShapeMismatch { left: x.shape().to_vec(), right: z.shape().to_vec() });
    }
    let (_, c, h, w) = x.dims4()?;
    if c != config.channels {
        return Err(Error::InvalidArgument(format!("input has {c} channels, operator expects {}", config.channels)));
    }
    let (cq, cv) = (config.qk_channels(), config.value_channels);
    let want: [&[usize]; 8] = [&[c, cq], &[cq], &[c, cq], &[cq], &[c, cv], &[cv], &[c, 1], &[1]];
    for (t, s) in params.iter().zip(want) {
        if t.shape() != s {
            return Err(Error::ShapeMismatch { left: t.shape().to_vec(), right: s.to_vec() });
        }
    }
    if config.effective_extent() > h.min(w) && !EXTENT_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!(
            "relation window extent {} exceeds map size {h}x{w}; border taps are zero-padded",
            config.effective_extent()
        );
    }
    Ok(())
}

/// Pixel-major linear projection `px . w + b`.
fn project(px: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(rows, cin, cout, px, false, w.data(), false, &mut out, 1.0);
    out
}

fn forward_kernel(x: &Tensor, z: &Tensor, params: [&Tensor; 8], config: &RseConfig) -> Result<(Tensor, RseSaved)> {
    check_inputs(x, z, &params, config)?;
    let [wq, bq, wk, bk, wv, bv, wp, bp] = params;
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let rows = b * hw;
    let (cq, cv) = (config.qk_channels(), config.value_channels);
    let x_px = kernels::nchw_to_pixels(x.data(), b, c, hw);
    let z_px = kernels::nchw_to_pixels(z.data(), b, c, hw);
    let q = project(&x_px, rows, wq, bq);
    let k = project(&z_px, rows, wk, bk);
    let v = project(&z_px, rows, wv, bv);
    let pos = relative_position_map(config.kernel, config.dilation, c)?;
    let pos_logits = positional_logits(&pos, wp, bp)?;
    let offsets = config.offsets();
    let k2 = offsets.len();
    let scale = config.dot_scale();

    let mut weights = vec![0.0; rows * k2];
    let mut out_px = vec![0.0; rows * cv];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let i = (bi * h + y) * w + xx;
                let qi = &q[i * cq..(i + 1) * cq];
                let wrow = &mut weights[i * k2..(i + 1) * k2];
                for (j, &(dy, dx)) in offsets.iter().enumerate() {
                    let mut logit = pos_logits[j];
                    if let Some(src) = tap(bi, y, xx, dy, dx, h, w) {
                        let kj = &k[src * cq..(src + 1) * cq];
                        logit += scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    wrow[j] = logit;
                }
                if config.normalization == Normalization::Softmax {
                    softmax_in_place(wrow);
                }
                let oi = &mut out_px[i * cv..(i + 1) * cv];
                for (j, &(dy, dx)) in offsets.iter().enumerate() {
                    if let Some(src) = tap(bi, y, xx, dy, dx, h, w) {
                        let wj = wrow[j];
                        for (o, vv) in oi.iter_mut().zip(&v[src * cv..(src + 1) * cv]) {
                            *o += wj * vv;
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![b, cv, h, w], kernels::pixels_to_nchw(&out_px, b, cv, hw))?;
    let saved = RseSaved { config: config.clone(), dims: (b, h, w), x_px, z_px, q, k, v, weights, pos };
    Ok((out, saved))
}

#[inline]
fn tap(b: usize, y: usize, x: usize, dy: isize, dx: isize, h: usize, w: usize) -> Option<usize> {
    let sy = y as isize + dy;
    let sx = x as isize + dx;
    (sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize).then(|| (b * h + sy as usize) * w + sx as usize)
}

/// Input gradients for `[x, z, wq, bq, wk, bk, wv, bv, wp, bp]`.
pub(crate) fn backward_kernel(values: &[&Tensor], saved: &RseSaved, g: &Tensor) -> Result<Vec<Tensor>> {
    let cfg = &saved.config;
    let (b, h, w) = saved.dims;
    let hw = h * w;
    let rows = b * hw;
    let c = cfg.channels;
    let (cq, cv) = (cfg.qk_channels(), cfg.value_channels);
    let offsets = cfg.offsets();
    let k2 = offsets.len();
    let scale = cfg.dot_scale();
    let g_px = kernels::nchw_to_pixels(g.data(), b, cv, hw);

    let mut dq = vec![0.0; rows * cq];
    let mut dk = vec![0.0; rows * cq];
    let mut dv = vec![0.0; rows * cv];
    let mut dpos = vec![0.0; k2];
    let mut dweights = vec![0.0; k2];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let i = (bi * h + y) * w + xx;
                let gi = &g_px[i * cv..(i + 1) * cv];
                let wrow = &saved.weights[i * k2..(i + 1) * k2];
                for (j, &(dy, dx)) in offsets.iter().enumerate() {
                    dweights[j] = 0.0;
                    if let Some(src) = tap(bi, y, xx, dy, dx, h, w) {
                        let vj = &saved.v[src * cv..(src + 1) * cv];
                        dweights[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        for (d, gv) in dv[src * cv..(src + 1) * cv].iter_mut().zip(gi) {
                            *d += wrow[j] * gv;
                        }
                    }
                }
                if cfg.normalization == Normalization::Softmax {
                    let dot: f64 = wrow.iter().zip(&dweights).map(|(a, b)| a * b).sum();
                    for j in 0..k2 {
                        dweights[j] = wrow[j] * (dweights[j] - dot);
                    }
                }
                // dweights now holds d(loss)/d(logit).
                for (j, &(dy, dx)) in offsets.iter().enumerate() {
                    let dl = dweights[j];
                    dpos[j] += dl;
                    if let Some(src) = tap(bi, y, xx, dy, dx, h, w) {
                        let s = scale * dl;
                        for ch in 0..cq {
                            dq[i * cq + ch] += s * saved.k[src * cq + ch];
                            dk[src * cq + ch] += s * saved.q[i * cq + ch];
                        }
                    }
                }
            }
        }
    }

    let (wq, wk, wv) = (values[2], values[4], values[6]);
    let mut dx_px = vec![0.0; rows * c];
    gemm(rows, cq, c, &dq, false, wq.data(), true, &mut dx_px, 0.0);
    let mut dz_px = vec![0.0; rows * c];
    gemm(rows, cq, c, &dk, false, wk.data(), true, &mut dz_px, 0.0);
    gemm(rows, cv, c, &dv, false, wv.data(), true, &mut dz_px, 1.0);

    let weight_grad = |px: &[f64], d: &[f64], cout: usize| {
        let mut dw = vec![0.0; c * cout];
        gemm(c, rows, cout, px, true, d, false, &mut dw, 0.0);
        dw
    };
    let bias_grad = |d: &[f64], cout: usize| {
        let mut db = vec![0.0; cout];
        for r in d.chunks(cout) {
            db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        db
    };
    let mut dwp = vec![0.0; c];
    for (j, &dpj) in dpos.iter().enumerate() {
        for (d, p) in dwp.iter_mut().zip(saved.pos.entry(j)) {
            *d += dpj * p;
        }
    }

    Ok(vec![
        Tensor::new(vec![b, c, h, w], kernels::pixels_to_nchw(&dx_px, b, c, hw))?,
        Tensor::new(vec![b, c, h, w], kernels::pixels_to_nchw(&dz_px, b, c, hw))?,
        Tensor::new(vec![c, cq], weight_grad(&saved.x_px, &dq, cq))?,
        Tensor::new(vec![cq], bias_grad(&dq, cq))?,
        Tensor::new(vec![c, cq], weight_grad(&saved.z_px, &dk, cq))?,
        Tensor::new(vec![cq], bias_grad(&dk, cq))?,
        Tensor::new(vec![c, cv], weight_grad(&saved.z_px, &dv, cv))?,
        Tensor::new(vec![cv], bias_grad(&dv, cv))?,
        Tensor::new(vec![c, 1], dwp)?,
        Tensor::new(vec![1], vec![dpos.iter().sum()])?,
    ])
}

/// Relational context of `x` gathered from `z`, recorded on the tape.
/// Output is `[B, Cv, H, W]`.
pub fn rse_forward(tape: &mut Tape, x: Var, z: Var, params: &RseVars) -> Result<Var> {
    let p = params.params.map(|v| tape.value(v));
    let (out, saved) = forward_kernel(tape.value(x), tape.value(z), p, &params.config)?;
    let [a, b, c, d, e, f, g, h] = params.params;
    Ok(tape.push_rse(out, [x, z, a, b, c, d, e, f, g, h], saved))
}

/// [`rse_forward`] without a tape.
pub fn rse_apply(x: &Tensor, z: &Tensor, params: &RseParams) -> Result<Tensor> {
    Ok(forward_kernel(x, z, params.tensors(), &params.config)?.0)
}

/// Per-pixel aggregation weights, `[B, H, W, k*k]` flattened row-major.
pub fn rse_weights(x: &Tensor, z: &Tensor, params: &RseParams) -> Result<Vec<f64>> {
    Ok(forward_kernel(x, z, params.tensors(), &params.config)?.1.weights)
}

/// Query and key maps of an operator, both `[B, C/d, H, W]`.
pub fn query_key_maps(x: &Tensor, z: &Tensor, params: &RseParams) -> Result<(Tensor, Tensor)> {
    let (_, saved) = forward_kernel(x, z, params.tensors(), &params.config)?;
    let (b, h, w) = saved.dims;
    let cq = params.config.qk_channels();
    Ok((
        Tensor::new(vec![b, cq, h, w], kernels::pixels_to_nchw(&saved.q, b, cq, h * w))?,
        Tensor::new(vec![b, cq, h, w], kernels::pixels_to_nchw(&saved.k, b, cq, h * w))?,
    ))
}

// ── Reference ─────────────────────────────────────────────────────────────

/// Straight per-pixel evaluation with explicit loops and no shared buffers;
/// the oracle for [`rse_forward`].
pub fn rse_forward_reference(x: &Tensor, z: &Tensor, params: &RseParams) -> Result<Tensor> {
    let cfg = &params.config;
    check_inputs(x, z, &params.tensors(), cfg)?;
    let (b, c, h, w) = x.dims4()?;
    let (cq, cv) = (cfg.qk_channels(), cfg.value_channels);
    let linear = |src: &Tensor, bi: usize, y: usize, xx: usize, wt: &Tensor, bias: &Tensor, cout: usize| {
        (0..cout)
            .map(|o| {
                let mut acc = bias.data()[o];
                for ci in 0..c {
                    acc += src.at4(bi, ci, y, xx) * wt.data()[ci * cout + o];
                }
                acc
            })
            .collect::<Vec<f64>>()
    };
    let mut key_map = vec![0.0; b * cq * h * w];
    let mut value_map = vec![0.0; b * cv * h * w];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let kv = linear(z, bi, y, xx, &params.wk, &params.bk, cq);
                for (o, val) in kv.into_iter().enumerate() {
                    key_map[((bi * cq + o) * h + y) * w + xx] = val;
                }
                let vv = linear(z, bi, y, xx, &params.wv, &params.bv, cv);
                for (o, val) in vv.into_iter().enumerate() {
                    value_map[((bi * cv + o) * h + y) * w + xx] = val;
                }
            }
        }
    }
    let key_map = Tensor::new(vec![b, cq, h, w], key_map)?;
    let value_map = Tensor::new(vec![b, cv, h, w], value_map)?;
    let pos = relative_position_map(cfg.kernel, cfg.dilation, c)?;

    let mut out = vec![0.0; b * cv * h * w];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let q = Tensor::new(vec![cq], linear(x, bi, y, xx, &params.wq, &params.bq, cq))?;
                let keys = extract_window(&key_map, bi, (y, xx), cfg.kernel, cfg.dilation)?;
                let values = extract_window(&value_map, bi, (y, xx), cfg.kernel, cfg.dilation)?;
                let logits = relation_logits(&q, &keys, &pos, &params.wp, &params.bp, cfg.dot_scale())?;
                let weights = aggregation_weights(&logits, cfg.normalization);
                let zi = aggregate(&weights, &values)?;
                for (o, val) in zi.data().iter().enumerate() {
                    out[((bi * cv + o) * h + y) * w + xx] = *val;
                }
            }
        }
    }
    Tensor::new(vec![b, cv, h, w], out)
}

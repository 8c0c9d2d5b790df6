//! Differentiable kernels with hand-written backward passes, and RMSProp.
//!
//! All parameters are stored as 2-D `f64` matrices (biases are `1 x n`), so a
//! layer exposes its parameters and gradients as equally ordered lists.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform init in `+-sqrt(1/fan_in)`.
pub fn init_uniform<R: Rng>(rng: &mut R, fan_in: usize, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Row-wise log-softmax; stable for large inputs and shift invariant.
pub fn log_softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Affine map `y = xW + b` over rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`
    pub w: Array2<f64>,
    /// `1 x out`
    pub b: Array2<f64>,
}

impl Dense {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            w: init_uniform(rng, input, input, output),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "dense layer expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.w) + &self.b)
    }

    /// Returns `(grad_x, [grad_w, grad_b])`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let grad_x = grad_out.dot(&self.w.t());
        let grad_w = x.t().dot(&grad_out);
        let grad_b = grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        (grad_x, vec![grad_w, grad_b])
    }

    pub fn params(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![("w", &self.w), ("b", &self.b)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Extracts the `ph x pw` neighbourhood of every pixel (zero padded) as one row
/// per pixel, rows ordered row-major over the image.
pub fn image_patches(img: ArrayView2<'_, f64>, ph: usize, pw: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oy, ox) = (ph / 2, pw / 2);
    let mut out = Array2::zeros((h * w, ph * pw));
    for r in 0..h {
        for c in 0..w {
            let mut row = out.row_mut(r * w + c);
            for dy in 0..ph {
                let y = r as isize + dy as isize - oy as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..pw {
                    let x = c as isize + dx as isize - ox as isize;
                    if x >= 0 && x < w as isize {
                        row[dy * pw + dx] = img[[y as usize, x as usize]];
                    }
                }
            }
        }
    }
    out
}

/// Pointwise feature lift: one dense layer shared by every pixel, applied to
/// the pixel's local patch, followed by ReLU. Produces a `d x h x w` map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLift {
    pub dense: Dense,
    pub patch_height: usize,
    pub patch_width: usize,
}

/// Saved activations of [`PatchLift::forward`].
#[derive(Debug, Clone)]
pub struct PatchLiftCache {
    patches: Array2<f64>,
    pre: Array2<f64>,
    height: usize,
    width: usize,
}

impl PatchLift {
    pub fn new<R: Rng>(patch_height: usize, patch_width: usize, channels: usize, rng: &mut R) -> Self {
        PatchLift {
            dense: Dense::new(patch_height * patch_width, channels, rng),
            patch_height,
            patch_width,
        }
    }

    pub fn channels(&self) -> usize {
        self.dense.output_dim()
    }

    pub fn forward(&self, img: ArrayView2<'_, f64>) -> Result<(Array3<f64>, PatchLiftCache)> {
        let (h, w) = img.dim();
        if h == 0 || w == 0 {
            return Err(Error::Contract("empty image".into()));
        }
        let patches = image_patches(img, self.patch_height, self.patch_width);
        let pre = self.dense.forward(patches.view())?;
        let act = pre.mapv(|v| v.max(0.0));
        let map = act
            .into_shape_with_order((h, w, self.channels()))
            .expect("h*w rows")
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned();
        Ok((
            map,
            PatchLiftCache {
                patches,
                pre,
                height: h,
                width: w,
            },
        ))
    }

    /// Parameter gradients `[grad_w, grad_b]` given the gradient of the map.
    pub fn backward(&self, cache: &PatchLiftCache, grad_map: ArrayView3<'_, f64>) -> Vec<Array2<f64>> {
        let d = self.channels();
        let mut grad_pre = grad_map
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cache.height * cache.width, d))
            .expect("d*h*w elements");
        ndarray::Zip::from(&mut grad_pre)
            .and(&cache.pre)
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        let (_, grads) = self.dense.backward(cache.patches.view(), grad_pre.view());
        grads
    }

    pub fn params(&self) -> Vec<(&'static str, &Array2<f64>)> {
        self.dense.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.dense.params_mut()
    }
}

/// Max over the height axis of a `d x h x w` map; returns a `w x d` sequence
/// and the winning row of every output (first row on ties).
pub fn column_max_pool(f: ArrayView3<'_, f64>) -> Result<(Array2<f64>, Array2<usize>)> {
    let (d, h, w) = f.dim();
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::Contract("column max-pool of an empty feature map".into()));
    }
    let mut out = Array2::zeros((w, d));
    let mut arg = Array2::zeros((w, d));
    for c in 0..d {
        for t in 0..w {
            let mut best = f[[c, 0, t]];
            let mut best_r = 0;
            for r in 1..h {
                let v = f[[c, r, t]];
                if v > best {
                    best = v;
                    best_r = r;
                }
            }
            out[[t, c]] = best;
            arg[[t, c]] = best_r;
        }
    }
    Ok((out, arg))
}

pub fn column_max_pool_backward(argmax: &Array2<usize>, grad_out: ArrayView2<'_, f64>, height: usize) -> Array3<f64> {
    let (w, d) = argmax.dim();
    let mut g = Array3::zeros((d, height, w));
    for t in 0..w {
        for c in 0..d {
            g[[c, argmax[[t, c]], t]] += grad_out[[t, c]];
        }
    }
    g
}

/// Non-overlapping max-pool along time with window `k`; trailing frames that
/// do not fill a window are dropped. Returns the output and the source frame
/// of every element (first on ties).
pub fn time_max_pool(x: ArrayView2<'_, f64>, k: usize) -> (Array2<f64>, Array2<usize>) {
    let (len, d) = x.dim();
    let out_len = len / k;
    let mut out = Array2::zeros((out_len, d));
    let mut arg = Array2::zeros((out_len, d));
    for t in 0..out_len {
        for c in 0..d {
            let mut best = x[[t * k, c]];
            let mut best_i = t * k;
            for i in t * k + 1..t * k + k {
                if x[[i, c]] > best {
                    best = x[[i, c]];
                    best_i = i;
                }
            }
            out[[t, c]] = best;
            arg[[t, c]] = best_i;
        }
    }
    (out, arg)
}

pub fn time_max_pool_backward(argmax: &Array2<usize>, grad_out: ArrayView2<'_, f64>, input_len: usize) -> Array2<f64> {
    let (out_len, d) = argmax.dim();
    let mut g = Array2::zeros((input_len, d));
    for t in 0..out_len {
        for c in 0..d {
            g[[argmax[[t, c]], c]] += grad_out[[t, c]];
        }
    }
    g
}

/// Concatenates each frame with its `(k-1)/2` neighbours on both sides,
/// zero padded at the edges.
pub fn frame_stack(x: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("frame stacking window must be odd, got {k}")));
    }
    let (len, d) = x.dim();
    let half = (k / 2) as isize;
    let mut out = Array2::zeros((len, k * d));
    for t in 0..len {
        for o in 0..k {
            let src = t as isize + o as isize - half;
            if src >= 0 && (src as usize) < len {
                out.slice_mut(s![t, o * d..(o + 1) * d]).assign(&x.row(src as usize));
            }
        }
    }
    Ok(out)
}

pub fn frame_stack_backward(grad_out: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    let len = grad_out.nrows();
    let d = grad_out.ncols() / k;
    let half = (k / 2) as isize;
    let mut g = Array2::zeros((len, d));
    for t in 0..len {
        for o in 0..k {
            let src = t as isize + o as isize - half;
            if src >= 0 && (src as usize) < len {
                let mut row = g.row_mut(src as usize);
                row += &grad_out.slice(s![t, o * d..(o + 1) * d]);
            }
        }
    }
    g
}

/// One direction of an Elman recurrence `h_t = tanh(x_t Wx + h_prev Wh + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnDirection {
    /// `in x hidden`
    pub wx: Array2<f64>,
    /// `hidden x hidden`
    pub wh: Array2<f64>,
    /// `1 x hidden`
    pub b: Array2<f64>,
}

impl RnnDirection {
    fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        RnnDirection {
            wx: init_uniform(rng, input, input, hidden),
            wh: init_uniform(rng, hidden, hidden, hidden),
            b: Array2::zeros((1, hidden)),
        }
    }

    fn hidden(&self) -> usize {
        self.wh.nrows()
    }

    /// Hidden states in natural time order; `reverse` runs from the last frame.
    fn forward(&self, x: ArrayView2<'_, f64>, reverse: bool) -> Array2<f64> {
        let len = x.nrows();
        let mut h = x.dot(&self.wx) + &self.b;
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            if step > 0 {
                let prev = if reverse { t + 1 } else { t - 1 };
                let rec = h.row(prev).dot(&self.wh);
                let mut row = h.row_mut(t);
                row += &rec;
            }
            h.row_mut(t).mapv_inplace(f64::tanh);
        }
        h
    }

    /// Backprop through time. `grad_h` is the gradient on every hidden state.
    fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        h: &Array2<f64>,
        grad_h: ArrayView2<'_, f64>,
        reverse: bool,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let len = x.nrows();
        let hidden = self.hidden();
        let mut grad_pre = Array2::zeros((len, hidden));
        // previous hidden state fed into each step (zeros for the first step)
        let mut h_prev = Array2::zeros((len, hidden));
        let mut carry = ndarray::Array1::<f64>::zeros(hidden);
        for step in (0..len).rev() {
            let t = if reverse { len - 1 - step } else { step };
            let mut da = grad_h.row(t).to_owned() + &carry;
            da.zip_mut_with(&h.row(t), |g, &ht| *g *= 1.0 - ht * ht);
            if step > 0 {
                let prev = if reverse { t + 1 } else { t - 1 };
                h_prev.row_mut(t).assign(&h.row(prev));
                carry = self.wh.dot(&da);
            }
            grad_pre.row_mut(t).assign(&da);
        }
        let grad_x = grad_pre.dot(&self.wx.t());
        let grad_wx = x.t().dot(&grad_pre);
        let grad_wh = h_prev.t().dot(&grad_pre);
        let grad_b = grad_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        (grad_x, vec![grad_wx, grad_wh, grad_b])
    }
}

/// Bidirectional tanh recurrence; output rows are `[forward_h, backward_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiRnn {
    pub fwd: RnnDirection,
    pub bwd: RnnDirection,
}

#[derive(Debug, Clone)]
pub struct BiRnnCache {
    input: Array2<f64>,
    h_fwd: Array2<f64>,
    h_bwd: Array2<f64>,
}

impl BiRnn {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        BiRnn {
            fwd: RnnDirection::new(input, hidden, rng),
            bwd: RnnDirection::new(input, hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.wx.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, BiRnnCache)> {
        if x.nrows() == 0 {
            return Err(Error::Contract("recurrent layer needs at least one frame".into()));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "recurrent layer expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let h_fwd = self.fwd.forward(x, false);
        let h_bwd = self.bwd.forward(x, true);
        let out = ndarray::concatenate(Axis(1), &[h_fwd.view(), h_bwd.view()]).expect("equal lengths");
        Ok((
            out,
            BiRnnCache {
                input: x.to_owned(),
                h_fwd,
                h_bwd,
            },
        ))
    }

    /// Returns `(grad_x, grads)` with grads ordered as [`BiRnn::params`].
    pub fn backward(&self, cache: &BiRnnCache, grad_out: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let hidden = self.hidden();
        let (gx_f, mut grads) = self.fwd.backward(
            cache.input.view(),
            &cache.h_fwd,
            grad_out.slice(s![.., ..hidden]),
            false,
        );
        let (gx_b, grads_b) = self.bwd.backward(
            cache.input.view(),
            &cache.h_bwd,
            grad_out.slice(s![.., hidden..]),
            true,
        );
        grads.extend(grads_b);
        (gx_f + gx_b, grads)
    }

    pub fn params(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("fwd.wx", &self.fwd.wx),
            ("fwd.wh", &self.fwd.wh),
            ("fwd.b", &self.fwd.b),
            ("bwd.wx", &self.bwd.wx),
            ("bwd.wh", &self.bwd.wh),
            ("bwd.b", &self.bwd.b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.fwd.wx,
            &mut self.fwd.wh,
            &mut self.fwd.b,
            &mut self.bwd.wx,
            &mut self.bwd.wh,
            &mut self.bwd.b,
        ]
    }
}

/// RMSProp with one squared-gradient accumulator per parameter matrix.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
    accum: Vec<Array2<f64>>,
}

impl RmsProp {
    pub const DEFAULT_RHO: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        RmsProp {
            rho: Self::DEFAULT_RHO,
            eps: Self::DEFAULT_EPS,
            accum: params.into_iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Array2<f64>] {
        &self.accum
    }

    /// `s <- rho s + (1-rho) g^2; theta <- theta - lr g / (sqrt(s) + eps)`.
    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>], lr: f64) -> Result<()> {
        if params.len() != self.accum.len() || grads.len() != self.accum.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.accum.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.raw_dim() != self.accum[i].raw_dim() {
                return Err(Error::Contract(format!("gradient {i} has shape {:?}", g.shape())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {i}")));
            }
        }
        let (rho, eps) = (self.rho, self.eps);
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.accum) {
            ndarray::Zip::from(p).and(g).and(s).for_each(|p, &g, s| {
                *s = rho * *s + (1.0 - rho) * g * g;
                *p -= lr * g / (s.sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// One named tensor in a checkpoint: shape plus flat row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        TensorRecord {
            shape: m.shape().to_vec(),
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] if r * c == self.data.len() => Ok(Array2::from_shape_vec((r, c), self.data.clone()).expect("checked")),
            _ => Err(Error::Contract(format!(
                "tensor record of shape {:?} holds {} values",
                self.shape,
                self.data.len()
            ))),
        }
    }
}

/// Parameters keyed by dotted path, e.g. `encoder.0.fwd.wx`.
pub type ParamRecords = BTreeMap<String, TensorRecord>;

/// Copies records into `params`, requiring identical names and shapes.
pub fn load_records(records: &ParamRecords, params: Vec<(String, &mut Array2<f64>)>) -> Result<()> {
    if records.len() != params.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} tensors, model expects {}",
            records.len(),
            params.len()
        )));
    }
    for (name, p) in params {
        let rec = records
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("checkpoint is missing tensor {name}")))?;
        let m = rec.to_matrix()?;
        if m.raw_dim() != p.raw_dim() {
            return Err(Error::Contract(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                m.shape(),
                p.shape()
            )));
        }
        *p = m;
    }
    Ok(())
}

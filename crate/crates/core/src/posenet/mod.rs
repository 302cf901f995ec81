//! Convolutional pose regressor ("PoseNet") with hand-written reverse-mode
//! gradients.
//!
//! Layers are strided valid convolutions with ReLU, followed by dense layers
//! (ReLU on all but the last). Activations are kept position-major
//! (`[batch·positions, channels]`) so convolutions become one GEMM over an
//! im2col buffer. Outputs are regressed in normalized units, `(y - mid) /
//! half` per label range, and de-normalized on the way out.

mod checkpoint;
mod scalar;
mod train;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
};
pub use scalar::Scalar;
pub use train::{evaluate, evaluate_on, train, EvalReport, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::data::Range;
use crate::rng;
use crate::tactsim::TactileImage;
use scalar::{give, matmul, take, View};

/// Samples per gradient work unit. Fixed so the reduction order, and hence
/// every parameter bit, is independent of the thread count.
pub const CHUNK: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("input is {got_w}×{got_h}, model expects {want_w}×{want_h}")]
    Shape {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("empty {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_height: usize,
    pub input_width: usize,
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    /// Apply [`adaptive_threshold`] to every input image.
    #[serde(default)]
    pub binarize: bool,
}

impl Architecture {
    /// Three 3×3 stride-2 convolutions (16, 32, 32 filters), dense 64, dense 2.
    pub fn standard(height: usize, width: usize) -> Self {
        let conv = |filters| ConvSpec {
            filters,
            kernel: 3,
            stride: 2,
        };
        Architecture {
            input_height: height,
            input_width: width,
            conv: vec![conv(16), conv(32), conv(32)],
            hidden: vec![64],
            outputs: 2,
            binarize: false,
        }
    }

    pub fn parameter_count(&self) -> Result<usize, NetError> {
        Ok(self.layers()?.last().map(|l| l.end()).unwrap_or(0))
    }

    fn layers(&self) -> Result<Vec<Layer>, NetError> {
        let bad = |m: String| Err(NetError::Architecture(m));
        if self.outputs == 0 {
            return bad("outputs must be > 0".into());
        }
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, 1usize);
        if h == 0 || w == 0 {
            return bad("input size must be > 0".into());
        }
        let mut off = 0;
        let mut layers = Vec::new();
        for (i, s) in self.conv.iter().enumerate() {
            if s.filters == 0 || s.kernel == 0 || s.stride == 0 {
                return bad(format!("conv {i}: filters, kernel and stride must be > 0"));
            }
            if s.kernel > h || s.kernel > w {
                return bad(format!("conv {i}: {0}×{0} kernel on a {w}×{h} input", s.kernel));
            }
            let oh = (h - s.kernel) / s.stride + 1;
            let ow = (w - s.kernel) / s.stride + 1;
            let k = s.kernel * s.kernel * c;
            layers.push(Layer::Conv {
                in_h: h,
                in_w: w,
                in_c: c,
                out_h: oh,
                out_w: ow,
                out_c: s.filters,
                kernel: s.kernel,
                stride: s.stride,
                w_off: off,
                b_off: off + k * s.filters,
            });
            off += k * s.filters + s.filters;
            (h, w, c) = (oh, ow, s.filters);
        }
        let mut inp = h * w * c;
        let sizes: Vec<usize> = self.hidden.iter().copied().chain([self.outputs]).collect();
        for (i, &out) in sizes.iter().enumerate() {
            if out == 0 {
                return bad(format!("dense {i}: width must be > 0"));
            }
            layers.push(Layer::Dense {
                inp,
                out,
                w_off: off,
                b_off: off + inp * out,
                relu: i + 1 < sizes.len(),
            });
            off += inp * out + out;
            inp = out;
        }
        Ok(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Conv {
        in_h: usize,
        in_w: usize,
        in_c: usize,
        out_h: usize,
        out_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        w_off: usize,
        b_off: usize,
    },
    Dense {
        inp: usize,
        out: usize,
        w_off: usize,
        b_off: usize,
        relu: bool,
    },
}

impl Layer {
    fn end(&self) -> usize {
        match *self {
            Layer::Conv { b_off, out_c, .. } => b_off + out_c,
            Layer::Dense { b_off, out, .. } => b_off + out,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv { in_c, kernel, .. } => kernel * kernel * in_c,
            Layer::Dense { inp, .. } => inp,
        }
    }

    fn weight_len(&self) -> usize {
        match *self {
            Layer::Conv { w_off, b_off, .. } | Layer::Dense { w_off, b_off, .. } => b_off - w_off,
        }
    }
}

/// Affine map between native label units and the network's `[-1, 1]` range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mid: f64,
    pub half: f64,
}

impl Normalizer {
    pub fn from_range(r: &Range) -> Self {
        let half = 0.5 * r.width();
        Normalizer {
            mid: r.mid(),
            half: if half > 0.0 { half } else { 1.0 },
        }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mid) / self.half
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.half + self.mid
    }
}

/// Intermediate values kept from a forward pass for the backward pass.
struct Trace<T> {
    /// Input of each layer (`acts[0]` is the network input).
    acts: Vec<Vec<T>>,
    /// im2col buffers of the convolution layers.
    cols: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet<T: Scalar = f32> {
    arch: Architecture,
    layers: Vec<Layer>,
    params: Vec<T>,
    norm: Vec<Normalizer>,
}

impl<T: Scalar> PoseNet<T> {
    /// Fresh model with seeded uniform fan-in initialisation and zero biases.
    pub fn new(arch: Architecture, ranges: &[Range], seed: u64) -> Result<Self, NetError> {
        let layers = arch.layers()?;
        if ranges.len() != arch.outputs {
            return Err(NetError::Architecture(format!(
                "{} label ranges for {} outputs",
                ranges.len(),
                arch.outputs
            )));
        }
        let mut params = vec![T::ZERO; layers.last().map(|l| l.end()).unwrap_or(0)];
        let mut r = rng::derived(seed, "init");
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            let gain = if i == last { 3.0 } else { 6.0 };
            let bound = (gain / l.fan_in() as f64).sqrt();
            let (Layer::Conv { w_off, .. } | Layer::Dense { w_off, .. }) = *l;
            for p in &mut params[w_off..w_off + l.weight_len()] {
                *p = T::from_f64(rng::uniform(&mut r, -bound, bound));
            }
        }
        Ok(PoseNet {
            layers,
            arch,
            params,
            norm: ranges.iter().map(Normalizer::from_range).collect(),
        })
    }

    pub(crate) fn from_parts(arch: Architecture, norm: Vec<Normalizer>, params: Vec<T>) -> Result<Self, NetError> {
        let layers = arch.layers()?;
        let want = layers.last().map(|l| l.end()).unwrap_or(0);
        if params.len() != want || norm.len() != arch.outputs {
            return Err(NetError::Architecture(format!(
                "{} parameters for an architecture needing {want}",
                params.len()
            )));
        }
        Ok(PoseNet {
            layers,
            arch,
            params,
            norm,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn normalizers(&self) -> &[Normalizer] {
        &self.norm
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// `true` for every parameter that is a weight rather than a bias.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for l in &self.layers {
            let (Layer::Conv { w_off, b_off, .. } | Layer::Dense { w_off, b_off, .. }) = *l;
            mask[w_off..b_off].fill(true);
        }
        mask
    }

    /// Weights (`inputs × outputs`, row-major) and biases of the final layer.
    pub fn output_layer_mut(&mut self) -> (&mut [T], &mut [T]) {
        let Some(Layer::Dense { w_off, b_off, out, .. }) = self.layers.last().copied() else {
            unreachable!("the last layer is dense")
        };
        let (head, tail) = self.params.split_at_mut(b_off);
        (&mut head[w_off..], &mut tail[..out])
    }

    /// Converts to another element type (parameters rounded as needed).
    pub fn cast<U: Scalar>(&self) -> PoseNet<U> {
        PoseNet {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.to_f64())).collect(),
            norm: self.norm.clone(),
        }
    }

    fn check_image(&self, img: &TactileImage) -> Result<(), NetError> {
        if img.width() != self.arch.input_width || img.height() != self.arch.input_height {
            return Err(NetError::Shape {
                want_w: self.arch.input_width,
                want_h: self.arch.input_height,
                got_w: img.width(),
                got_h: img.height(),
            });
        }
        Ok(())
    }

    /// Stacked network inputs for `imgs`.
    fn inputs(&self, imgs: &[&TactileImage]) -> Result<Vec<T>, NetError> {
        let n = self.arch.input_width * self.arch.input_height;
        let mut x = take(imgs.len() * n);
        for (img, dst) in imgs.iter().zip(x.chunks_mut(n)) {
            self.check_image(img)?;
            let bin;
            let src = if self.arch.binarize {
                bin = adaptive_threshold(img, ADAPTIVE_WINDOW, ADAPTIVE_OFFSET);
                bin.pixels()
            } else {
                img.pixels()
            };
            for (d, &p) in dst.iter_mut().zip(src) {
                *d = T::from_f64(p as f64);
            }
        }
        Ok(x)
    }

    /// Pose prediction in native units (offset mm, angle degrees).
    pub fn forward(&self, img: &TactileImage) -> Result<Vec<f64>, NetError> {
        Ok(self.predict_batch(&[img])?.remove(0))
    }

    /// Predictions for many images, computed in [`CHUNK`]-sized pieces.
    pub fn predict_batch(&self, imgs: &[&TactileImage]) -> Result<Vec<Vec<f64>>, NetError> {
        for img in imgs {
            self.check_image(img)?;
        }
        let chunks: Vec<&[&TactileImage]> = imgs.chunks(CHUNK).collect();
        let outs = crate::par::map_slice(&chunks, |chunk| {
            let x = self.inputs(chunk).expect("shapes checked");
            let out = self.forward_raw(x, chunk.len(), false).0;
            let rows: Vec<Vec<f64>> = out
                .chunks(self.arch.outputs)
                .map(|row| row.iter().zip(&self.norm).map(|(z, n)| n.denormalize(z.to_f64())).collect())
                .collect();
            give(out);
            rows
        });
        Ok(outs.into_iter().flatten().collect())
    }

    /// Forward pass on `batch` stacked inputs; returns normalized outputs
    /// (`batch × outputs`) and, if `keep`, the trace for backprop.
    fn forward_raw(&self, input: Vec<T>, batch: usize, keep: bool) -> (Vec<T>, Option<Trace<T>>) {
        let layers = &self.layers;
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(layers.len() + 1);
        let mut cols_all = Vec::new();
        let mut x = input;
        for l in layers {
            let y = match *l {
                Layer::Conv {
                    in_h,
                    in_w,
                    in_c,
                    out_h,
                    out_w,
                    out_c,
                    kernel,
                    stride,
                    w_off,
                    b_off,
                } => {
                    let k = kernel * kernel * in_c;
                    let rows = batch * out_h * out_w;
                    let cols = im2col(&x, batch, in_h, in_w, in_c, out_h, out_w, kernel, stride);
                    let mut y = take(rows * out_c);
                    let bias = &self.params[b_off..b_off + out_c];
                    for row in y.chunks_mut(out_c) {
                        row.copy_from_slice(bias);
                    }
                    let w = &self.params[w_off..b_off];
                    matmul(View::new(&cols, rows, k), View::new(w, k, out_c), T::ONE, &mut y);
                    relu(&mut y);
                    if keep {
                        cols_all.push(cols);
                    } else {
                        give(cols);
                    }
                    y
                }
                Layer::Dense {
                    inp,
                    out,
                    w_off,
                    b_off,
                    relu: act,
                } => {
                    let mut y = take(batch * out);
                    let bias = &self.params[b_off..b_off + out];
                    for row in y.chunks_mut(out) {
                        row.copy_from_slice(bias);
                    }
                    let w = &self.params[w_off..b_off];
                    matmul(View::new(&x, batch, inp), View::new(w, inp, out), T::ONE, &mut y);
                    if act {
                        relu(&mut y);
                    }
                    y
                }
            };
            let prev = std::mem::replace(&mut x, y);
            if keep {
                acts.push(prev);
            } else {
                give(prev);
            }
        }
        if keep {
            (
                x,
                Some(Trace {
                    acts,
                    cols: cols_all,
                }),
            )
        } else {
            (x, None)
        }
    }

    /// Accumulates into `grad` the gradient for output sensitivities `d_out`.
    fn backward_raw(&self, trace: Trace<T>, batch: usize, d_out: Vec<T>, grad: &mut [T]) {
        let layers = &self.layers;
        let mut dy = d_out;
        let mut conv_idx = trace.cols.len();
        for (li, l) in layers.iter().enumerate().rev() {
            let x = &trace.acts[li];
            match *l {
                Layer::Dense { inp, out, w_off, b_off, .. } => {
                    {
                        let (gw, gb) = grad[w_off..b_off + out].split_at_mut(b_off - w_off);
                        matmul(View::new(x, batch, inp).t(), View::new(&dy, batch, out), T::ONE, gw);
                        for row in dy.chunks(out) {
                            for (g, d) in gb.iter_mut().zip(row) {
                                *g += *d;
                            }
                        }
                    }
                    if li == 0 {
                        break;
                    }
                    let mut dx = take(batch * inp);
                    let w = &self.params[w_off..b_off];
                    matmul(View::new(&dy, batch, out), View::new(w, inp, out).t(), T::ZERO, &mut dx);
                    relu_mask(&mut dx, x);
                    give(std::mem::replace(&mut dy, dx));
                }
                Layer::Conv {
                    in_h,
                    in_w,
                    in_c,
                    out_h,
                    out_w,
                    out_c,
                    kernel,
                    stride,
                    w_off,
                    b_off,
                } => {
                    conv_idx -= 1;
                    let cols = &trace.cols[conv_idx];
                    let k = kernel * kernel * in_c;
                    let rows = batch * out_h * out_w;
                    {
                        let (gw, gb) = grad[w_off..b_off + out_c].split_at_mut(b_off - w_off);
                        matmul(View::new(cols, rows, k).t(), View::new(&dy, rows, out_c), T::ONE, gw);
                        for row in dy.chunks(out_c) {
                            for (g, d) in gb.iter_mut().zip(row) {
                                *g += *d;
                            }
                        }
                    }
                    if li == 0 {
                        break;
                    }
                    let mut dcols = take(rows * k);
                    let w = &self.params[w_off..b_off];
                    matmul(View::new(&dy, rows, out_c), View::new(w, k, out_c).t(), T::ZERO, &mut dcols);
                    let mut dx = col2im(&dcols, batch, in_h, in_w, in_c, out_h, out_w, kernel, stride);
                    give(dcols);
                    relu_mask(&mut dx, x);
                    give(std::mem::replace(&mut dy, dx));
                }
            }
        }
        give(dy);
        trace.acts.into_iter().chain(trace.cols).for_each(give);
    }

    /// Sum of squared normalized errors over `batch` samples and, into
    /// `grad`, the gradient of `scale ×` that sum.
    fn chunk_gradient(&self, input: Vec<T>, targets: &[f64], batch: usize, scale: f64, grad: &mut [T]) -> f64 {
        let (out, trace) = self.forward_raw(input, batch, true);
        let mut sq = 0.0;
        let d_out: Vec<T> = out
            .iter()
            .zip(targets)
            .map(|(o, t)| {
                let e = o.to_f64() - t;
                sq += e * e;
                T::from_f64(2.0 * scale * e)
            })
            .collect();
        give(out);
        self.backward_raw(trace.expect("kept"), batch, d_out, grad);
        sq
    }

    fn normalized_targets(&self, labels: &[&[f64]]) -> Vec<f64> {
        labels
            .iter()
            .flat_map(|l| l.iter().zip(&self.norm).map(|(y, n)| n.normalize(*y)))
            .collect()
    }

    /// Mean-squared-error loss (normalized units) and its gradient with
    /// respect to every parameter, for one batch of `(image, label)` pairs.
    ///
    /// The batch is split into [`CHUNK`]-sized pieces whose gradients are
    /// summed in order, so the result does not depend on scheduling.
    pub fn loss_and_gradient(&self, batch: &[(&TactileImage, &[f64])]) -> Result<(f64, Vec<T>), NetError> {
        if batch.is_empty() {
            return Err(NetError::Empty("batch"));
        }
        for (img, _) in batch {
            self.check_image(img)?;
        }
        let scale = 1.0 / (batch.len() * self.arch.outputs) as f64;
        let pieces: Vec<&[(&TactileImage, &[f64])]> = batch.chunks(CHUNK).collect();
        let parts = crate::par::map_slice(&pieces, |piece| {
            let imgs: Vec<&TactileImage> = piece.iter().map(|(i, _)| *i).collect();
            let labels: Vec<&[f64]> = piece.iter().map(|(_, l)| *l).collect();
            let x = self.inputs(&imgs).expect("shapes checked");
            let t = self.normalized_targets(&labels);
            let mut g = take(self.params.len());
            let sq = self.chunk_gradient(x, &t, piece.len(), scale, &mut g);
            (sq, g)
        });
        let mut total = vec![T::ZERO; self.params.len()];
        let mut sq = 0.0;
        for (s, g) in parts {
            sq += s;
            for (a, b) in total.iter_mut().zip(&g) {
                *a += *b;
            }
            give(g);
        }
        Ok((sq * scale, total))
    }

    /// Mean-squared-error loss (normalized units) without gradients.
    pub fn loss(&self, batch: &[(&TactileImage, &[f64])]) -> Result<f64, NetError> {
        if batch.is_empty() {
            return Err(NetError::Empty("batch"));
        }
        let imgs: Vec<&TactileImage> = batch.iter().map(|(i, _)| *i).collect();
        let preds = self.predict_batch(&imgs)?;
        let mut sq = 0.0;
        for (p, (_, l)) in preds.iter().zip(batch) {
            for ((y, t), n) in p.iter().zip(l.iter()).zip(&self.norm) {
                let e = n.normalize(*y) - n.normalize(*t);
                sq += e * e;
            }
        }
        Ok(sq / (batch.len() * self.arch.outputs) as f64)
    }
}

// Both loops are written as selects rather than branches: activations are
// about half negative, and mispredictions dominated the cost.
fn relu<T: Scalar>(v: &mut [T]) {
    for x in v {
        *x = if *x > T::ZERO { *x } else { T::ZERO };
    }
}

/// Zeroes sensitivities where the forward activation was clamped.
fn relu_mask<T: Scalar>(d: &mut [T], act: &[T]) {
    for (g, a) in d.iter_mut().zip(act) {
        *g = if *a > T::ZERO { *g } else { T::ZERO };
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
) -> Vec<T> {
    let k = kernel * kernel * c;
    let mut cols = take(batch * oh * ow * k);
    let mut row = 0;
    for b in 0..batch {
        let base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..kernel {
                    let src = base + ((oy * stride + ky) * w + ox * stride) * c;
                    let len = kernel * c;
                    // Rows are short for the first layer; a plain loop beats memcpy calls.
                    for (d, s) in dst[ky * len..(ky + 1) * len].iter_mut().zip(&x[src..src + len]) {
                        *d = *s;
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
) -> Vec<T> {
    let k = kernel * kernel * c;
    let mut x = take(batch * h * w * c);
    let mut row = 0;
    for b in 0..batch {
        let base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &cols[row * k..(row + 1) * k];
                for ky in 0..kernel {
                    let dst = base + ((oy * stride + ky) * w + ox * stride) * c;
                    let len = kernel * c;
                    for (d, s) in x[dst..dst + len].iter_mut().zip(&src[ky * len..(ky + 1) * len]) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
    x
}

pub const ADAPTIVE_WINDOW: usize = 11;
pub const ADAPTIVE_OFFSET: f32 = 0.02;

/// Binarizes against the local mean: a pixel maps to 1 when it exceeds the
/// mean of its `window × window` neighbourhood (clipped at the border)
/// minus `offset`, else 0.
pub fn adaptive_threshold(img: &TactileImage, window: usize, offset: f32) -> TactileImage {
    let (w, h) = (img.width(), img.height());
    let p = img.pixels();
    // Summed-area table with a zero border.
    let mut sat = vec![0f64; (w + 1) * (h + 1)];
    for r in 0..h {
        let mut run = 0f64;
        for c in 0..w {
            run += p[r * w + c] as f64;
            sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + run;
        }
    }
    let half = window / 2;
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(h));
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(w));
            let sum = sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0]
                + sat[r0 * (w + 1) + c0];
            let mean = sum / ((r1 - r0) * (c1 - c0)) as f64;
            out.push(if p[r * w + c] as f64 > mean - offset as f64 { 1.0 } else { 0.0 });
        }
    }
    TactileImage::from_pixels(w, h, out).expect("binary pixels")
}

#[cfg(test)]
mod tests;

//! Core numeric operations: convolution, pointwise maps, pooling, the
//! bottleneck MLP, bilinear sampling, offset-driven deformable sampling,
//! and the finite-difference gradient checker.
//!
//! Each operation exists twice: a validated value-level function returning
//! `Result` (the form the naive reference implementations are checked
//! against), and a `Tape` method recording the backward pass. Both share
//! the same forward kernels.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView3, IxDyn};

use crate::error::{CodafError, Result};
use crate::tape::{sigmoid_stable, view2, view4, Tape, Var};
use crate::tensor::{all_finite, Scalar};

// ---- validated value types -------------------------------------------------

/// Rank-4 feature tensor [B, C, H, W] with finite entries.
#[derive(Debug, Clone)]
pub struct FeatureMap<F: Scalar>(Array4<F>);

impl<F: Scalar> FeatureMap<F> {
    pub fn new(a: Array4<F>) -> Result<Self> {
        if a.shape().iter().any(|&d| d == 0) {
            return Err(CodafError::shape(format!("feature map has empty axis: {:?}", a.shape())));
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(CodafError::numeric("feature map contains non-finite values".to_string()));
        }
        Ok(FeatureMap(a))
    }

    pub fn array(&self) -> &Array4<F> {
        &self.0
    }

    pub fn into_array(self) -> Array4<F> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dim();
        (d.0, d.1, d.2, d.3)
    }
}

/// Single-channel spatial weighting in [0, 1]: [B, 1, H, W].
#[derive(Debug, Clone)]
pub struct AttentionMap<F: Scalar>(Array4<F>);

impl<F: Scalar> AttentionMap<F> {
    pub fn new(a: Array4<F>) -> Result<Self> {
        if a.dim().1 != 1 {
            return Err(CodafError::shape(format!(
                "attention map must have one channel, got {}",
                a.dim().1
            )));
        }
        if !a.iter().all(|&v| v.is_finite() && v >= F::zero() && v <= F::one()) {
            return Err(CodafError::numeric("attention values must lie in [0, 1]".to_string()));
        }
        Ok(AttentionMap(a))
    }

    pub fn array(&self) -> &Array4<F> {
        &self.0
    }

    pub fn into_array(self) -> Array4<F> {
        self.0
    }
}

/// Convolution parameters: weights [Cout, Cin, k, k] and bias [Cout].
#[derive(Debug, Clone)]
pub struct KernelWeights<F: Scalar> {
    pub weights: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> KernelWeights<F> {
    pub fn new(weights: Array4<F>, bias: Array1<F>) -> Result<Self> {
        let d = weights.dim();
        if d.2 != d.3 {
            return Err(CodafError::shape(format!("kernel must be square, got {}x{}", d.2, d.3)));
        }
        if bias.len() != d.0 {
            return Err(CodafError::shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                d.0
            )));
        }
        if !all_finite(&weights.clone().into_dyn()) || !bias.iter().all(|v| v.is_finite()) {
            return Err(CodafError::numeric("kernel weights must be finite".to_string()));
        }
        Ok(KernelWeights { weights, bias })
    }

    pub fn ksize(&self) -> usize {
        self.weights.dim().2
    }
}

/// Two-layer bottleneck MLP parameters: C -> C/r -> C.
#[derive(Debug, Clone)]
pub struct MlpParams<F: Scalar> {
    pub w1: Array2<F>, // [C/r, C]
    pub b1: Array1<F>,
    pub w2: Array2<F>, // [C, C/r]
    pub b2: Array1<F>,
}

impl<F: Scalar> MlpParams<F> {
    pub fn new(w1: Array2<F>, b1: Array1<F>, w2: Array2<F>, b2: Array1<F>) -> Result<Self> {
        let (h, c) = w1.dim();
        if h == 0 || c == 0 {
            return Err(CodafError::shape("mlp layer has zero width".to_string()));
        }
        if b1.len() != h || w2.dim() != (c, h) || b2.len() != c {
            return Err(CodafError::shape(format!(
                "mlp shapes inconsistent: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                w1.dim(),
                b1.len(),
                w2.dim(),
                b2.len()
            )));
        }
        Ok(MlpParams { w1, b1, w2, b2 })
    }
}

/// Offsets driving deformable sampling. `base` is the shared per-position
/// shift (dy, dx); `residual` refines each of the K kernel taps; and
/// `modulation` scales each tap's contribution in [0, 1].
#[derive(Debug, Clone)]
pub struct OffsetBundle<F: Scalar> {
    pub base: Array4<F>,       // [B, 2, H, W]
    pub residual: Array4<F>,   // [B, 2K, H, W]
    pub modulation: Array4<F>, // [B, K, H, W]
}

impl<F: Scalar> OffsetBundle<F> {
    pub fn new(base: Array4<F>, residual: Array4<F>, modulation: Array4<F>) -> Result<Self> {
        let (b, c2, h, w) = base.dim();
        if c2 != 2 {
            return Err(CodafError::shape(format!("base offset needs 2 channels, got {c2}")));
        }
        let k = modulation.dim().1;
        if residual.dim() != (b, 2 * k, h, w) || modulation.dim() != (b, k, h, w) {
            return Err(CodafError::shape(format!(
                "offset bundle inconsistent: base {:?}, residual {:?}, modulation {:?}",
                base.dim(),
                residual.dim(),
                modulation.dim()
            )));
        }
        if !modulation.iter().all(|&v| v >= F::zero() && v <= F::one()) {
            return Err(CodafError::numeric("modulation must lie in [0, 1]".to_string()));
        }
        Ok(OffsetBundle { base, residual, modulation })
    }

    /// Identity bundle: zero shifts, modulation one (sampling reduces to
    /// plain convolution).
    pub fn identity(b: usize, k_taps: usize, h: usize, w: usize) -> Self {
        OffsetBundle {
            base: Array4::zeros((b, 2, h, w)),
            residual: Array4::zeros((b, 2 * k_taps, h, w)),
            modulation: Array4::from_elem((b, k_taps, h, w), F::one()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

// ---- shared forward kernels -------------------------------------------------

pub(crate) fn conv_out_dim(h: usize, k: usize, pad: usize, stride: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold one image [C,H,W] into columns [C*k*k, OH*OW] with zero padding.
pub(crate) fn im2col<F: Scalar>(
    x: &ArrayView3<'_, F>,
    k: usize,
    pad: usize,
    stride: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, k, pad, stride);
    let ow = conv_out_dim(w, k, pad, stride);
    let mut cols = Array2::<F>::zeros((c * k * k, oh * ow));
    for cin in 0..c {
        let plane = x.slice(s![cin, .., ..]);
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (cin * k + ky) * k + kx;
                let mut row = cols.row_mut(row_idx);
                let rs = row.as_slice_mut().expect("row of standard-layout array");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = plane.row(iy as usize);
                    let ps = prow.as_slice().expect("contiguous plane row");
                    if stride == 1 {
                        // ox + kx - pad in [0, w)
                        let ox0 = pad.saturating_sub(kx);
                        let ox1 = (w + pad - kx).min(ow);
                        if ox0 < ox1 {
                            let ix0 = ox0 + kx - pad;
                            rs[oy * ow + ox0..oy * ow + ox1]
                                .copy_from_slice(&ps[ix0..ix0 + (ox1 - ox0)]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                rs[oy * ow + ox] = ps[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input image (transpose of `im2col`).
pub(crate) fn col2im<F: Scalar>(
    dcols: &ArrayView2<'_, F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> ndarray::Array3<F> {
    let oh = conv_out_dim(h, k, pad, stride);
    let ow = conv_out_dim(w, k, pad, stride);
    let mut dx = ndarray::Array3::<F>::zeros((c, h, w));
    for cin in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = dcols.row((cin * k + ky) * k + kx);
                let rs = row.as_slice().expect("contiguous row");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[[cin, iy as usize, ix as usize]] =
                                dx[[cin, iy as usize, ix as usize]] + rs[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Batched convolution forward. Returns output and per-item columns for
/// reuse in the backward pass.
fn conv_forward<F: Scalar>(
    x: &ArrayView3<'_, F>,
    wmat: &ArrayView2<'_, F>,
    bias: &Array1<F>,
    k: usize,
    pad: usize,
    stride: usize,
) -> (Array2<F>, Array2<F>) {
    let cols = im2col(x, k, pad, stride);
    let mut y = Array2::<F>::zeros((wmat.nrows(), cols.ncols()));
    general_mat_mul(F::one(), wmat, &cols.view(), F::zero(), &mut y);
    for (mut row, &b) in y.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    (y, cols)
}

/// Bilinear read with zero padding outside the image. Returns the value
/// and its derivatives with respect to the (y, x) coordinates.
#[inline]
pub(crate) fn bilinear_read_grad<F: Scalar>(
    plane: &ArrayView2<'_, F>,
    y: F,
    x: F,
) -> (F, F, F) {
    let (h, w) = plane.dim();
    let y0f = y.floor();
    let x0f = x.floor();
    let dy = y - y0f;
    let dx = x - x0f;
    let y0 = y0f.as_f64() as isize;
    let x0 = x0f.as_f64() as isize;
    let read = |yy: isize, xx: isize| -> F {
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            plane[[yy as usize, xx as usize]]
        } else {
            F::zero()
        }
    };
    let p00 = read(y0, x0);
    let p01 = read(y0, x0 + 1);
    let p10 = read(y0 + 1, x0);
    let p11 = read(y0 + 1, x0 + 1);
    let one = F::one();
    let v = (one - dy) * ((one - dx) * p00 + dx * p01) + dy * ((one - dx) * p10 + dx * p11);
    let dvdy = (one - dx) * (p10 - p00) + dx * (p11 - p01);
    let dvdx = (one - dy) * (p01 - p00) + dy * (p11 - p10);
    (v, dvdy, dvdx)
}

/// Scatter a gradient onto the four corners around (y, x).
#[inline]
fn bilinear_scatter<F: Scalar>(plane: &mut ndarray::ArrayViewMut2<'_, F>, y: F, x: F, g: F) {
    let (h, w) = plane.dim();
    let y0f = y.floor();
    let x0f = x.floor();
    let dy = y - y0f;
    let dx = x - x0f;
    let y0 = y0f.as_f64() as isize;
    let x0 = x0f.as_f64() as isize;
    let one = F::one();
    let mut add = |yy: isize, xx: isize, wgt: F| {
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            let p = &mut plane[[yy as usize, xx as usize]];
            *p = *p + g * wgt;
        }
    };
    add(y0, x0, (one - dy) * (one - dx));
    add(y0, x0 + 1, (one - dy) * dx);
    add(y0 + 1, x0, dy * (one - dx));
    add(y0 + 1, x0 + 1, dy * dx);
}

/// Deformable sampling columns for one image. Returns raw (unmodulated)
/// columns [Cin*K, H*W]; sampling position for tap kk at cell (i,j) is
/// (i, j) + kernel grid + base + per-tap residual.
fn deform_cols<F: Scalar>(
    x: &ArrayView3<'_, F>,
    base: &ArrayView3<'_, F>,
    residual: &ArrayView3<'_, F>,
    k: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let kk_total = k * k;
    let r = (k as isize - 1) / 2;
    let mut cols = Array2::<F>::zeros((c * kk_total, h * w));
    for kk in 0..kk_total {
        let gy = F::from_f64(((kk / k) as isize - r) as f64);
        let gx = F::from_f64(((kk % k) as isize - r) as f64);
        for i in 0..h {
            for j in 0..w {
                let col = i * w + j;
                let sy = F::from_f64(i as f64) + gy + base[[0, i, j]] + residual[[2 * kk, i, j]];
                let sx =
                    F::from_f64(j as f64) + gx + base[[1, i, j]] + residual[[2 * kk + 1, i, j]];
                for cin in 0..c {
                    let plane = x.slice(s![cin, .., ..]);
                    let (v, _, _) = bilinear_read_grad(&plane, sy, sx);
                    cols[[cin * kk_total + kk, col]] = v;
                }
            }
        }
    }
    cols
}

/// Multiply raw columns by per-tap modulation in place.
fn modulate_cols<F: Scalar>(cols: &mut Array2<F>, modulation: &ArrayView3<'_, F>, c: usize) {
    let (k_taps, h, w) = modulation.dim();
    for cin in 0..c {
        for kk in 0..k_taps {
            let mut row = cols.row_mut(cin * k_taps + kk);
            let rs = row.as_slice_mut().expect("contiguous row");
            for i in 0..h {
                for j in 0..w {
                    rs[i * w + j] = rs[i * w + j] * modulation[[kk, i, j]];
                }
            }
        }
    }
}

// ---- value-level API ---------------------------------------------------------

/// Same-size 2-D convolution when `padding == k/2`; general zero-padded
/// stride-1 convolution otherwise.
pub fn conv2d<F: Scalar>(
    x: &FeatureMap<F>,
    w: &KernelWeights<F>,
    padding: usize,
) -> Result<FeatureMap<F>> {
    let (b, c, h, wd) = x.dims();
    let (cout, cin, k, _) = w.weights.dim();
    if cin != c {
        return Err(CodafError::shape(format!(
            "conv2d: input has {c} channels, kernel expects {cin}"
        )));
    }
    if h + 2 * padding < k || wd + 2 * padding < k {
        return Err(CodafError::shape(format!(
            "conv2d: kernel {k} larger than padded input {h}x{wd} (pad {padding})"
        )));
    }
    let oh = conv_out_dim(h, k, padding, 1);
    let ow = conv_out_dim(wd, k, padding, 1);
    let wmat = w
        .weights
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut y = Array4::<F>::zeros((b, cout, oh, ow));
    for bb in 0..b {
        let xv = x.array().slice(s![bb, .., .., ..]);
        let (y2, _) = conv_forward(&xv, &wmat.view(), &w.bias, k, padding, 1);
        let y4 = y2.to_shape((cout, oh, ow)).expect("output reshape");
        y.slice_mut(s![bb, .., .., ..]).assign(&y4);
    }
    FeatureMap::new(y)
}

/// Elementwise sigmoid or ReLU.
pub fn pointwise<F: Scalar>(x: &FeatureMap<F>, f: Pointwise) -> FeatureMap<F> {
    let y = match f {
        Pointwise::Sigmoid => x.array().mapv(sigmoid_stable),
        Pointwise::Relu => x.array().mapv(|v| if v > F::zero() { v } else { F::zero() }),
    };
    FeatureMap(y)
}

/// Softmax across the channel axis at every spatial location.
pub fn softmax_over_channels<F: Scalar>(x: &FeatureMap<F>) -> FeatureMap<F> {
    let (b, c, h, w) = x.dims();
    let xv = x.array();
    let mut y = Array4::<F>::zeros((b, c, h, w));
    for bb in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut m = F::neg_infinity();
                for cc in 0..c {
                    m = m.max(xv[[bb, cc, i, j]]);
                }
                let mut z = F::zero();
                for cc in 0..c {
                    let e = (xv[[bb, cc, i, j]] - m).exp();
                    y[[bb, cc, i, j]] = e;
                    z = z + e;
                }
                for cc in 0..c {
                    y[[bb, cc, i, j]] = y[[bb, cc, i, j]] / z;
                }
            }
        }
    }
    FeatureMap(y)
}

/// Global average or max pool to [B, C, 1, 1].
pub fn global_pool<F: Scalar>(x: &FeatureMap<F>, mode: PoolMode) -> FeatureMap<F> {
    let (b, c, h, w) = x.dims();
    let xv = x.array();
    let mut y = Array4::<F>::zeros((b, c, 1, 1));
    for bb in 0..b {
        for cc in 0..c {
            let plane = xv.slice(s![bb, cc, .., ..]);
            y[[bb, cc, 0, 0]] = match mode {
                PoolMode::Avg => {
                    plane.iter().copied().sum::<F>() * F::from_f64(1.0 / (h * w) as f64)
                }
                PoolMode::Max => plane.iter().copied().fold(F::neg_infinity(), F::max),
            };
        }
    }
    FeatureMap(y)
}

/// Bottleneck MLP on pooled channel vectors: linear -> ReLU -> linear.
pub fn mlp_bottleneck<F: Scalar>(x: &Array2<F>, p: &MlpParams<F>) -> Result<Array2<F>> {
    let (_, c) = x.dim();
    if p.w1.dim().1 != c {
        return Err(CodafError::shape(format!(
            "mlp_bottleneck: input width {c}, w1 expects {}",
            p.w1.dim().1
        )));
    }
    let mut h = x.dot(&p.w1.t());
    for mut row in h.rows_mut() {
        for (v, &b) in row.iter_mut().zip(p.b1.iter()) {
            *v = if *v + b > F::zero() { *v + b } else { F::zero() };
        }
    }
    let mut y = h.dot(&p.w2.t());
    for mut row in y.rows_mut() {
        for (v, &b) in row.iter_mut().zip(p.b2.iter()) {
            *v = *v + b;
        }
    }
    Ok(y)
}

/// Sample `x` at absolute fractional coordinates [B, 2, Ho, Wo] (row 0 is
/// y, row 1 is x). Out-of-bounds reads are zero.
pub fn bilinear_sample<F: Scalar>(
    x: &FeatureMap<F>,
    coords: &Array4<F>,
) -> Result<FeatureMap<F>> {
    let (b, c, _, _) = x.dims();
    let (bc, two, oh, ow) = coords.dim();
    if bc != b || two != 2 {
        return Err(CodafError::shape(format!(
            "bilinear_sample: coords {:?} incompatible with batch {b}",
            coords.dim()
        )));
    }
    if !all_finite(&coords.clone().into_dyn()) {
        return Err(CodafError::numeric("bilinear_sample: non-finite coordinates".to_string()));
    }
    let mut y = Array4::<F>::zeros((b, c, oh, ow));
    for bb in 0..b {
        for cc in 0..c {
            let plane = x.array().slice(s![bb, cc, .., ..]);
            for i in 0..oh {
                for j in 0..ow {
                    let (v, _, _) = bilinear_read_grad(
                        &plane,
                        coords[[bb, 0, i, j]],
                        coords[[bb, 1, i, j]],
                    );
                    y[[bb, cc, i, j]] = v;
                }
            }
        }
    }
    FeatureMap::new(y)
}

/// Offset-driven modulated sampling: a k x k convolution whose taps read
/// the input at per-position shifted, per-tap refined locations, each tap
/// scaled by its modulation weight.
pub fn deformable_sample<F: Scalar>(
    x: &FeatureMap<F>,
    w: &KernelWeights<F>,
    off: &OffsetBundle<F>,
) -> Result<FeatureMap<F>> {
    let (b, c, h, wd) = x.dims();
    let (cout, cin, k, _) = w.weights.dim();
    if cin != c {
        return Err(CodafError::shape(format!(
            "deformable_sample: input has {c} channels, kernel expects {cin}"
        )));
    }
    if k % 2 == 0 {
        return Err(CodafError::shape(format!("deformable_sample: kernel size {k} must be odd")));
    }
    let k_taps = k * k;
    if off.base.dim() != (b, 2, h, wd) || off.modulation.dim().1 != k_taps {
        return Err(CodafError::shape(format!(
            "deformable_sample: offsets {:?}/{:?} do not match input {:?} with {k_taps} taps",
            off.base.dim(),
            off.modulation.dim(),
            x.array().dim()
        )));
    }
    let wmat = w
        .weights
        .to_shape((cout, cin * k_taps))
        .expect("weight reshape")
        .to_owned();
    let mut y = Array4::<F>::zeros((b, cout, h, wd));
    for bb in 0..b {
        let xv = x.array().slice(s![bb, .., .., ..]);
        let basev = off.base.slice(s![bb, .., .., ..]);
        let resv = off.residual.slice(s![bb, .., .., ..]);
        let modv = off.modulation.slice(s![bb, .., .., ..]);
        let mut cols = deform_cols(&xv, &basev, &resv, k);
        modulate_cols(&mut cols, &modv, c);
        let mut y2 = Array2::<F>::zeros((cout, h * wd));
        general_mat_mul(F::one(), &wmat.view(), &cols.view(), F::zero(), &mut y2);
        for (mut row, &bv) in y2.rows_mut().into_iter().zip(w.bias.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        let y3 = y2.to_shape((cout, h, wd)).expect("output reshape");
        y.slice_mut(s![bb, .., .., ..]).assign(&y3);
    }
    FeatureMap::new(y)
}

// ---- tape operations ----------------------------------------------------------

impl<F: Scalar> Tape<F> {
    /// Zero-padded 2-D convolution with stride; weights [Cout,Cin,k,k],
    /// bias [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize, stride: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be rank 4");
        assert_eq!(ws.len(), 4, "conv2d weights must be rank 4");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: {} vs {}", xs[1], ws[1]);
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(self.value(b).len(), cout, "conv2d bias length");
        let oh = conv_out_dim(h, k, pad, stride);
        let ow = conv_out_dim(wd, k, pad, stride);

        let wmat = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank 4")
            .to_shape((cout, c * k * k))
            .expect("weight reshape")
            .to_owned();
        let bias = Array1::from_iter(self.value(b).iter().copied());

        let mut y = ArrayD::<F>::zeros(IxDyn(&[bn, cout, oh, ow]));
        let mut saved_cols: Vec<Array2<F>> = Vec::with_capacity(bn);
        {
            let xv = view4(self.value(x));
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
            for bb in 0..bn {
                let xi = xv.slice(s![bb, .., .., ..]);
                let (y2, cols) = conv_forward(&xi, &wmat.view(), &bias, k, pad, stride);
                let y3 = y2.to_shape((cout, oh, ow)).expect("output reshape");
                yv.slice_mut(s![bb, .., .., ..]).assign(&y3);
                saved_cols.push(cols);
            }
        }

        let req = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let (xi, wi, bi) = (x.0, w.0, b.0);
        let back = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = view4(g);
                let mut dw = Array2::<F>::zeros((cout, c * k * k));
                let mut db = Array1::<F>::zeros(cout);
                let mut dx = ArrayD::<F>::zeros(vals[xi].raw_dim());
                let mut dxv =
                    dx.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                let wmat2 = vals[wi]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("rank 4")
                    .to_shape((cout, c * k * k))
                    .expect("weight reshape")
                    .to_owned();
                for bb in 0..bn {
                    let gb = gv
                        .slice(s![bb, .., .., ..])
                        .to_shape((cout, oh * ow))
                        .expect("grad reshape")
                        .to_owned();
                    general_mat_mul(
                        F::one(),
                        &gb.view(),
                        &saved_cols[bb].t(),
                        F::one(),
                        &mut dw.view_mut(),
                    );
                    for (cc, row) in gb.rows().into_iter().enumerate() {
                        db[cc] = db[cc] + row.iter().copied().sum::<F>();
                    }
                    let mut dcols = Array2::<F>::zeros((c * k * k, oh * ow));
                    general_mat_mul(
                        F::one(),
                        &wmat2.t(),
                        &gb.view(),
                        F::zero(),
                        &mut dcols.view_mut(),
                    );
                    let dxi = col2im(&dcols.view(), c, h, wd, k, pad, stride);
                    dxv.slice_mut(s![bb, .., .., ..]).assign(&dxi);
                }
                let dw4 = dw
                    .to_shape((cout, c, k, k))
                    .expect("grad reshape")
                    .to_owned()
                    .into_dyn();
                vec![(xi, dx), (wi, dw4), (bi, db.into_dyn())]
            }) as Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>) -> Vec<(usize, ArrayD<F>)>>
        });
        self.push_external(y, req, back)
    }

    /// Dense layer: x [N,Cin] * w [Cout,Cin]^T + b -> [N,Cout].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear {xs:?} x {ws:?}");
        assert_eq!(self.value(b).len(), ws[0], "linear bias length");
        let xv = view2(self.value(x));
        let wv = view2(self.value(w));
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            for (v, bb) in row.iter_mut().zip(self.value(b).iter()) {
                *v = *v + *bb;
            }
        }
        let req =
            self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let (xi, wi, bi) = (x.0, w.0, b.0);
        let back = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = view2(g);
                let xv = view2(&vals[xi]);
                let wv = view2(&vals[wi]);
                let gx = gv.dot(&wv).into_dyn();
                let gw = gv.t().dot(&xv).into_dyn();
                let mut gb = Array1::<F>::zeros(wv.nrows());
                for row in gv.rows() {
                    for (acc, &v) in gb.iter_mut().zip(row.iter()) {
                        *acc = *acc + v;
                    }
                }
                vec![(xi, gx), (wi, gw), (bi, gb.into_dyn())]
            }) as Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>) -> Vec<(usize, ArrayD<F>)>>
        });
        self.push_external(y.into_dyn(), req, back)
    }

    /// Channel softmax on a rank-4 map.
    pub fn softmax_c(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "softmax_c wants rank 4, got {s:?}");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = view4(self.value(x));
        let mut y = ArrayD::<F>::zeros(IxDyn(&s));
        {
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
            for bb in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let mut m = F::neg_infinity();
                        for cc in 0..c {
                            m = m.max(xv[[bb, cc, i, j]]);
                        }
                        let mut z = F::zero();
                        for cc in 0..c {
                            let e = (xv[[bb, cc, i, j]] - m).exp();
                            yv[[bb, cc, i, j]] = e;
                            z = z + e;
                        }
                        for cc in 0..c {
                            yv[[bb, cc, i, j]] = yv[[bb, cc, i, j]] / z;
                        }
                    }
                }
            }
        }
        let req = self.requires_grad(x);
        let xi = x.0;
        let yi = self.peek_next_idx();
        let back = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let yv = view4(&vals[yi]);
                let gv = view4(g);
                let mut gx = ArrayD::<F>::zeros(vals[xi].raw_dim());
                let mut gxv =
                    gx.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                for bb in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            let mut dot = F::zero();
                            for cc in 0..c {
                                dot = dot + gv[[bb, cc, i, j]] * yv[[bb, cc, i, j]];
                            }
                            for cc in 0..c {
                                gxv[[bb, cc, i, j]] =
                                    yv[[bb, cc, i, j]] * (gv[[bb, cc, i, j]] - dot);
                            }
                        }
                    }
                }
                vec![(xi, gx)]
            }) as Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>) -> Vec<(usize, ArrayD<F>)>>
        });
        self.push_external(y, req, back)
    }

    /// Bilinear sampling of x [B,C,H,W] at absolute coordinates
    /// [B,2,Ho,Wo]; differentiable in both input and coordinates.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let cs = self.value(coords).shape().to_vec();
        assert_eq!(xs.len(), 4, "bilinear_sample input must be rank 4");
        assert!(cs.len() == 4 && cs[0] == xs[0] && cs[1] == 2, "coords {cs:?} for input {xs:?}");
        let (b, c) = (xs[0], xs[1]);
        let (oh, ow) = (cs[2], cs[3]);
        let xv = view4(self.value(x));
        let cv = view4(self.value(coords));
        let mut y = ArrayD::<F>::zeros(IxDyn(&[b, c, oh, ow]));
        {
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
            for bb in 0..b {
                for cc in 0..c {
                    let plane = xv.slice(s![bb, cc, .., ..]);
                    for i in 0..oh {
                        for j in 0..ow {
                            let (v, _, _) = bilinear_read_grad(
                                &plane,
                                cv[[bb, 0, i, j]],
                                cv[[bb, 1, i, j]],
                            );
                            yv[[bb, cc, i, j]] = v;
                        }
                    }
                }
            }
        }
        let req = self.requires_grad(x) || self.requires_grad(coords);
        let (xi, ci) = (x.0, coords.0);
        let back = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let xv = view4(&vals[xi]);
                let cv = view4(&vals[ci]);
                let gv = view4(g);
                let mut dx = ArrayD::<F>::zeros(vals[xi].raw_dim());
                let mut dc = ArrayD::<F>::zeros(vals[ci].raw_dim());
                {
                    let mut dxv =
                        dx.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                    let mut dcv =
                        dc.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                    for bb in 0..b {
                        for i in 0..oh {
                            for j in 0..ow {
                                let sy = cv[[bb, 0, i, j]];
                                let sx = cv[[bb, 1, i, j]];
                                let mut gy = F::zero();
                                let mut gx = F::zero();
                                for cc in 0..c {
                                    let go = gv[[bb, cc, i, j]];
                                    let plane = xv.slice(s![bb, cc, .., ..]);
                                    let (_, dvdy, dvdx) = bilinear_read_grad(&plane, sy, sx);
                                    gy = gy + go * dvdy;
                                    gx = gx + go * dvdx;
                                    let mut dplane = dxv.slice_mut(s![bb, cc, .., ..]);
                                    bilinear_scatter(&mut dplane, sy, sx, go);
                                }
                                dcv[[bb, 0, i, j]] = gy;
                                dcv[[bb, 1, i, j]] = gx;
                            }
                        }
                    }
                }
                vec![(xi, dx), (ci, dc)]
            }) as Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>) -> Vec<(usize, ArrayD<F>)>>
        });
        self.push_external(y, req, back)
    }

    /// Deformable sampling: kernel taps read x at grid + base + residual,
    /// scaled by modulation. Differentiable in all six inputs.
    pub fn deformable_sample(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        base: Var,
        residual: Var,
        modulation: Var,
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "deformable_sample channel mismatch");
        assert_eq!(ws[2], ws[3], "deformable_sample kernel must be square");
        assert_eq!(k % 2, 1, "deformable_sample kernel must be odd");
        let k_taps = k * k;
        assert_eq!(self.value(base).shape(), &[bn, 2, h, wd], "base shape");
        assert_eq!(self.value(residual).shape(), &[bn, 2 * k_taps, h, wd], "residual shape");
        assert_eq!(self.value(modulation).shape(), &[bn, k_taps, h, wd], "modulation shape");

        let wmat = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank 4")
            .to_shape((cout, c * k_taps))
            .expect("weight reshape")
            .to_owned();
        let bias = Array1::from_iter(self.value(b).iter().copied());

        let mut y = ArrayD::<F>::zeros(IxDyn(&[bn, cout, h, wd]));
        let mut saved_raw: Vec<Array2<F>> = Vec::with_capacity(bn);
        {
            let xv = view4(self.value(x));
            let basev = view4(self.value(base));
            let resv = view4(self.value(residual));
            let modv = view4(self.value(modulation));
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
            for bb in 0..bn {
                let xi = xv.slice(s![bb, .., .., ..]);
                let bv = basev.slice(s![bb, .., .., ..]);
                let rv = resv.slice(s![bb, .., .., ..]);
                let mv = modv.slice(s![bb, .., .., ..]);
                let raw = deform_cols(&xi, &bv, &rv, k);
                let mut cols = raw.clone();
                modulate_cols(&mut cols, &mv, c);
                let mut y2 = Array2::<F>::zeros((cout, h * wd));
                general_mat_mul(F::one(), &wmat.view(), &cols.view(), F::zero(), &mut y2);
                for (mut row, &bv2) in y2.rows_mut().into_iter().zip(bias.iter()) {
                    row.mapv_inplace(|v| v + bv2);
                }
                let y3 = y2.to_shape((cout, h, wd)).expect("output reshape");
                yv.slice_mut(s![bb, .., .., ..]).assign(&y3);
                saved_raw.push(raw);
            }
        }

        let req = [x, w, b, base, residual, modulation]
            .iter()
            .any(|&v| self.requires_grad(v));
        let (xi, wi, bi, basei, resi, modi) =
            (x.0, w.0, b.0, base.0, residual.0, modulation.0);
        let back = req.then(|| {
            Box::new(move |vals: &[ArrayD<F>], g: &ArrayD<F>| {
                let gv = view4(g);
                let xv = view4(&vals[xi]);
                let basev = view4(&vals[basei]);
                let resv = view4(&vals[resi]);
                let modv = view4(&vals[modi]);
                let wmat2 = vals[wi]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("rank 4")
                    .to_shape((cout, c * k_taps))
                    .expect("weight reshape")
                    .to_owned();
                let r_half = (k as isize - 1) / 2;

                let mut dw = Array2::<F>::zeros((cout, c * k_taps));
                let mut db = Array1::<F>::zeros(cout);
                let mut dx = ArrayD::<F>::zeros(vals[xi].raw_dim());
                let mut dbase = ArrayD::<F>::zeros(vals[basei].raw_dim());
                let mut dres = ArrayD::<F>::zeros(vals[resi].raw_dim());
                let mut dmod = ArrayD::<F>::zeros(vals[modi].raw_dim());
                {
                    let mut dxv =
                        dx.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                    let mut dbasev = dbase
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix4>()
                        .expect("rank 4");
                    let mut dresv = dres
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix4>()
                        .expect("rank 4");
                    let mut dmodv = dmod
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix4>()
                        .expect("rank 4");

                    for bb in 0..bn {
                        let gb = gv
                            .slice(s![bb, .., .., ..])
                            .to_shape((cout, h * wd))
                            .expect("grad reshape")
                            .to_owned();
                        // dW uses modulated columns; rebuild them from raw.
                        let mut cols = saved_raw[bb].clone();
                        modulate_cols(&mut cols, &modv.slice(s![bb, .., .., ..]), c);
                        general_mat_mul(
                            F::one(),
                            &gb.view(),
                            &cols.t(),
                            F::one(),
                            &mut dw.view_mut(),
                        );
                        for (cc, row) in gb.rows().into_iter().enumerate() {
                            db[cc] = db[cc] + row.iter().copied().sum::<F>();
                        }
                        // dSmod[cin*K+kk, p] = (W^T g)[row, p]
                        let mut dsmod = Array2::<F>::zeros((c * k_taps, h * wd));
                        general_mat_mul(
                            F::one(),
                            &wmat2.t(),
                            &gb.view(),
                            F::zero(),
                            &mut dsmod.view_mut(),
                        );
                        let raw = &saved_raw[bb];
                        for kk in 0..k_taps {
                            let gy_off = F::from_f64(((kk / k) as isize - r_half) as f64);
                            let gx_off = F::from_f64(((kk % k) as isize - r_half) as f64);
                            for i in 0..h {
                                for j in 0..wd {
                                    let col = i * wd + j;
                                    let m = modv[[bb, kk, i, j]];
                                    let sy = F::from_f64(i as f64)
                                        + gy_off
                                        + basev[[bb, 0, i, j]]
                                        + resv[[bb, 2 * kk, i, j]];
                                    let sx = F::from_f64(j as f64)
                                        + gx_off
                                        + basev[[bb, 1, i, j]]
                                        + resv[[bb, 2 * kk + 1, i, j]];
                                    let mut dm = F::zero();
                                    let mut dsy = F::zero();
                                    let mut dsx = F::zero();
                                    for cin in 0..c {
                                        let row = cin * k_taps + kk;
                                        let up = dsmod[[row, col]];
                                        dm = dm + up * raw[[row, col]];
                                        let ds = up * m;
                                        let plane = xv.slice(s![bb, cin, .., ..]);
                                        let (_, dvdy, dvdx) =
                                            bilinear_read_grad(&plane, sy, sx);
                                        dsy = dsy + ds * dvdy;
                                        dsx = dsx + ds * dvdx;
                                        let mut dplane = dxv.slice_mut(s![bb, cin, .., ..]);
                                        bilinear_scatter(&mut dplane, sy, sx, ds);
                                    }
                                    dmodv[[bb, kk, i, j]] = dm;
                                    dresv[[bb, 2 * kk, i, j]] = dsy;
                                    dresv[[bb, 2 * kk + 1, i, j]] = dsx;
                                    dbasev[[bb, 0, i, j]] = dbasev[[bb, 0, i, j]] + dsy;
                                    dbasev[[bb, 1, i, j]] = dbasev[[bb, 1, i, j]] + dsx;
                                }
                            }
                        }
                    }
                }
                let dw4 = dw
                    .to_shape((cout, c, k, k))
                    .expect("grad reshape")
                    .to_owned()
                    .into_dyn();
                vec![
                    (xi, dx),
                    (wi, dw4),
                    (bi, db.into_dyn()),
                    (basei, dbase),
                    (resi, dres),
                    (modi, dmod),
                ]
            }) as Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>) -> Vec<(usize, ArrayD<F>)>>
        });
        self.push_external(y, req, back)
    }
}

// ---- gradient checking ----------------------------------------------------------

/// Per-input result of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub input: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn lines(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "  {}: max rel err {:.3e} over {} elements",
                    e.input, e.max_rel_err, e.checked
                )
            })
            .collect()
    }
}

/// Compare tape gradients of a scalar function against central finite
/// differences.
///
/// The relative error per element is |a - n| / max(|a|, |n|, floor) where
/// the floor absorbs finite-difference noise on near-zero gradients; it
/// scales with the output magnitude since forward rounding is what limits
/// the comparison. Float32 checks use a coarse floor, float64 a tight one.
pub fn grad_check<F: Scalar>(
    build: &dyn Fn(&mut Tape<F>, &[Var]) -> Var,
    inputs: &[ArrayD<F>],
    names: &[&str],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if inputs.is_empty() || inputs.len() != names.len() {
        return Err(CodafError::config(format!(
            "grad_check: {} inputs but {} names",
            inputs.len(),
            names.len()
        )));
    }
    for (a, n) in inputs.iter().zip(names) {
        if a.len() > 512 {
            return Err(CodafError::config(format!(
                "grad_check input {n} too large for finite differences: {:?}",
                a.shape()
            )));
        }
    }

    // Analytic gradients.
    let mut tape: Tape<F> = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let root = build(&mut tape, &vars);
    if tape.value(root).len() != 1 {
        return Err(CodafError::shape("grad_check root must be scalar".to_string()));
    }
    let f0 = tape.scalar(root);
    if !f0.is_finite() {
        return Err(CodafError::numeric("grad_check: non-finite forward value".to_string()));
    }
    let grads = tape.backward(root);
    let analytic: Vec<ArrayD<F>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| grads.get(v).cloned().unwrap_or_else(|| ArrayD::zeros(a.raw_dim())))
        .collect();

    let eval = |pts: &[ArrayD<F>]| -> f64 {
        let mut t: Tape<F> = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|a| t.leaf(a.clone(), false)).collect();
        let r = build(&mut t, &vs);
        t.scalar(r)
    };

    // Noise floor for the relative-error denominator.
    let coarse = std::mem::size_of::<F>() == 4;
    let base_floor = if coarse { 5e-2 } else { 1e-5 };
    let floor = base_floor * f0.abs().max(1.0);

    let mut entries = Vec::with_capacity(inputs.len());
    let mut work: Vec<ArrayD<F>> = inputs.to_vec();
    for (idx, name) in names.iter().enumerate() {
        let n = work[idx].len();
        let mut max_rel = 0.0f64;
        for e in 0..n {
            let orig = work[idx].as_slice_mut().expect("standard layout")[e];
            let h = F::from_f64(step);
            work[idx].as_slice_mut().expect("standard layout")[e] = orig + h;
            let fp = eval(&work);
            work[idx].as_slice_mut().expect("standard layout")[e] = orig - h;
            let fm = eval(&work);
            work[idx].as_slice_mut().expect("standard layout")[e] = orig;
            let num = (fp - fm) / (2.0 * step);
            let ana = analytic[idx].as_slice().expect("standard layout")[e].as_f64();
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        entries.push(GradCheckEntry { input: name.to_string(), max_rel_err: max_rel, checked: n });
    }
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_err, tolerance: tol, pass: max_rel_err <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{naive_conv, naive_deformable_sample};
    use crate::tensor::{rand_uniform, randn};
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv2d_tape_value_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: ArrayD<f64> = randn(&mut rng, &[2, 3, 5, 6]);
        let w: ArrayD<f64> = randn(&mut rng, &[4, 3, 3, 3]);
        let b: ArrayD<f64> = randn(&mut rng, &[4]);
        let mut tape: Tape<f64> = Tape::new();
        let (xv, wv, bv) =
            (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
        let y = tape.conv2d(xv, wv, bv, 1, 1);
        let want = naive_conv(
            &x.into_dimensionality().unwrap(),
            &w.into_dimensionality().unwrap(),
            &b.into_dimensionality().unwrap(),
            1,
        );
        let got = tape.value(y).clone();
        assert!(
            max_abs_diff(&got, &want.into_dyn()) < 1e-12,
            "conv2d disagrees with the direct-loop reference"
        );
    }

    #[test]
    fn conv2d_stride_two_subsamples_the_stride_one_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: ArrayD<f64> = randn(&mut rng, &[1, 2, 7, 7]);
        let w: ArrayD<f64> = randn(&mut rng, &[3, 2, 3, 3]);
        let b: ArrayD<f64> = randn(&mut rng, &[3]);
        let mut tape: Tape<f64> = Tape::new();
        let (xv, wv, bv) =
            (tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
        let y1 = tape.conv2d(xv, wv, bv, 1, 1);
        let y2 = tape.conv2d(xv, wv, bv, 1, 2);
        let full = tape.value(y1).clone();
        let half = tape.value(y2).clone();
        assert_eq!(half.shape(), &[1, 3, 4, 4], "stride-2 output grid");
        for co in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let a = half[IxDyn(&[0, co, i, j])];
                    let e = full[IxDyn(&[0, co, 2 * i, 2 * j])];
                    assert!((a - e).abs() < 1e-12, "strided output is a subsample");
                }
            }
        }
    }

    #[test]
    fn deformable_value_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: ArrayD<f64> = randn(&mut rng, &[2, 3, 6, 5]);
        let w: ArrayD<f64> = randn(&mut rng, &[4, 3, 3, 3]);
        let b: ArrayD<f64> = randn(&mut rng, &[4]);
        let base: ArrayD<f64> = rand_uniform(&mut rng, &[2, 2, 6, 5], -2.0, 2.0);
        let res: ArrayD<f64> = rand_uniform(&mut rng, &[2, 18, 6, 5], -1.0, 1.0);
        let m: ArrayD<f64> = rand_uniform(&mut rng, &[2, 9, 6, 5], 0.0, 1.0);
        let fm = FeatureMap::new(x.clone().into_dimensionality().unwrap()).unwrap();
        let kw = KernelWeights::new(
            w.clone().into_dimensionality().unwrap(),
            b.clone().into_dimensionality().unwrap(),
        )
        .unwrap();
        let off = OffsetBundle::new(
            base.clone().into_dimensionality().unwrap(),
            res.clone().into_dimensionality().unwrap(),
            m.clone().into_dimensionality().unwrap(),
        )
        .unwrap();
        let got = deformable_sample(&fm, &kw, &off).unwrap().into_array().into_dyn();
        let want = naive_deformable_sample(
            &x.into_dimensionality().unwrap(),
            &w.into_dimensionality().unwrap(),
            &b.into_dimensionality().unwrap(),
            &base.into_dimensionality().unwrap(),
            &res.into_dimensionality().unwrap(),
            &m.into_dimensionality().unwrap(),
        );
        assert!(
            max_abs_diff(&got, &want.into_dyn()) < 1e-12,
            "column-based sampler disagrees with the per-tap reference"
        );
    }

    #[test]
    fn deformable_identity_bundle_matches_conv_values_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x: ArrayD<f64> = randn(&mut rng, &[1, 2, 5, 5]);
        let w: ArrayD<f64> = randn(&mut rng, &[3, 2, 3, 3]);
        let b: ArrayD<f64> = randn(&mut rng, &[3]);
        let idb = OffsetBundle::<f64>::identity(1, 9, 5, 5);

        let mut t1: Tape<f64> = Tape::new();
        let (x1, w1, b1) =
            (t1.leaf(x.clone(), true), t1.leaf(w.clone(), true), t1.leaf(b.clone(), true));
        let y1 = t1.conv2d(x1, w1, b1, 1, 1);
        let r1 = t1.mean_all(y1);
        let g1 = t1.backward(r1);

        let mut t2: Tape<f64> = Tape::new();
        let (x2, w2, b2) = (t2.leaf(x, true), t2.leaf(w, true), t2.leaf(b, true));
        let base = t2.leaf(idb.base.clone().into_dyn(), false);
        let res = t2.leaf(idb.residual.clone().into_dyn(), false);
        let m = t2.leaf(idb.modulation.clone().into_dyn(), false);
        let y2 = t2.deformable_sample(x2, w2, b2, base, res, m);
        let r2 = t2.mean_all(y2);
        let fwd_gap = max_abs_diff(t1.value(y1), t2.value(y2));
        assert!(fwd_gap < 1e-10, "identity offsets reduce to plain convolution, gap {fwd_gap}");
        let g2 = t2.backward(r2);
        for (a, b, name) in [(x1, x2, "input"), (w1, w2, "weights"), (b1, b2, "bias")] {
            let gap = max_abs_diff(g1.get(a).unwrap(), g2.get(b).unwrap());
            assert!(gap < 1e-10, "{name} gradient differs between conv and identity-offset path: {gap}");
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for &(k, pad, stride) in &[(3usize, 1usize, 1usize), (3, 1, 2), (1, 0, 1), (3, 0, 1)] {
            let x: ArrayD<f64> = randn(&mut rng, &[2, 6, 5]);
            let x3 = x.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
            let cols = im2col(&x3.view(), k, pad, stride);
            let cvec: ArrayD<f64> = randn(&mut rng, &[cols.dim().0, cols.dim().1]);
            let c2 = cvec.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            let lhs: f64 = cols.iter().zip(c2.iter()).map(|(a, b)| a * b).sum();
            let folded = col2im(&c2.view(), 2, 6, 5, k, pad, stride);
            let rhs: f64 = x3.iter().zip(folded.iter()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "im2col/col2im adjoint identity failed for k={k} pad={pad} stride={stride}"
            );
        }
    }

    #[test]
    fn bilinear_sample_hand_values() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fm = FeatureMap::new(x).unwrap();
        let mk = |y: f64, xc: f64| {
            Array4::from_shape_vec((1, 2, 1, 1), vec![y, xc]).unwrap()
        };
        let cases = [
            ((0.5, 0.5), 2.5),
            ((0.0, 1.0), 2.0),
            ((1.0, 0.0), 3.0),
            ((-0.5, -0.5), 0.25),
            ((-1.0, -1.0), 0.0),
            ((5.0, 5.0), 0.0),
        ];
        for ((cy, cx), want) in cases {
            let y = bilinear_sample(&fm, &mk(cy, cx)).unwrap();
            let got = y.array()[[0, 0, 0, 0]];
            assert!(
                (got - want).abs() < 1e-12,
                "bilinear value at ({cy},{cx}): got {got}, want {want}"
            );
        }
    }

    #[test]
    fn grad_check_passes_for_conv_sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x: ArrayD<f64> = randn(&mut rng, &[1, 2, 4, 4]);
        let w: ArrayD<f64> = randn(&mut rng, &[3, 2, 3, 3]);
        let b: ArrayD<f64> = randn(&mut rng, &[3]);
        let report = grad_check(
            &|t: &mut Tape<f64>, vs: &[Var]| {
                let y = t.conv2d(vs[0], vs[1], vs[2], 1, 1);
                let s = t.sigmoid(y);
                t.mean_all(s)
            },
            &[x, w, b],
            &["input", "weights", "bias"],
            f64::fd_step(),
            f64::grad_tol(),
        )
        .unwrap();
        assert!(report.pass, "conv chain gradients:\n{}", report.lines().join("\n"));
    }

    #[test]
    fn grad_check_passes_for_bilinear_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: ArrayD<f64> = randn(&mut rng, &[1, 2, 4, 4]);
        // Fractional parts stay in [0.25, 0.75]: a finite-difference probe
        // must not cross the integer lattice where the interpolant kinks.
        let mut coords = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 3, 3]));
        for i in 0..3 {
            for j in 0..3 {
                let jit: ArrayD<f64> = rand_uniform(&mut rng, &[2], 0.25, 0.75);
                coords[IxDyn(&[0, 0, i, j])] = i as f64 + jit[IxDyn(&[0])];
                coords[IxDyn(&[0, 1, i, j])] = j as f64 + jit[IxDyn(&[1])];
            }
        }
        let report = grad_check(
            &|t: &mut Tape<f64>, vs: &[Var]| {
                let y = t.bilinear_sample(vs[0], vs[1]);
                let s = t.sigmoid(y);
                t.mean_all(s)
            },
            &[x, coords],
            &["input", "coords"],
            f64::fd_step(),
            f64::grad_tol(),
        )
        .unwrap();
        assert!(report.pass, "bilinear gradients:\n{}", report.lines().join("\n"));
    }

    #[test]
    fn grad_check_passes_for_deformable_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x: ArrayD<f64> = randn(&mut rng, &[1, 2, 5, 5]);
        let w: ArrayD<f64> = randn(&mut rng, &[2, 2, 3, 3]);
        let b: ArrayD<f64> = randn(&mut rng, &[2]);
        // Sampled positions land well inside bilinear cells (see above).
        let base: ArrayD<f64> = rand_uniform(&mut rng, &[1, 2, 5, 5], 0.20, 0.30);
        let res: ArrayD<f64> = rand_uniform(&mut rng, &[1, 18, 5, 5], 0.05, 0.15);
        let m: ArrayD<f64> = rand_uniform(&mut rng, &[1, 9, 5, 5], 0.2, 0.8);
        let report = grad_check(
            &|t: &mut Tape<f64>, vs: &[Var]| {
                let y = t.deformable_sample(vs[0], vs[1], vs[2], vs[3], vs[4], vs[5]);
                let s = t.sigmoid(y);
                t.mean_all(s)
            },
            &[x, w, b, base, res, m],
            &["input", "weights", "bias", "base", "residual", "modulation"],
            f64::fd_step(),
            f64::grad_tol(),
        )
        .unwrap();
        assert!(report.pass, "deformable gradients:\n{}", report.lines().join("\n"));
    }

    #[test]
    fn grad_check_reports_failure_beyond_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x: ArrayD<f64> = randn(&mut rng, &[4]);
        let report = grad_check(
            &|t: &mut Tape<f64>, vs: &[Var]| {
                let s = t.sigmoid(vs[0]);
                t.mean_all(s)
            },
            &[x],
            &["x"],
            f64::fd_step(),
            0.0,
        )
        .unwrap();
        assert!(!report.pass, "zero tolerance must flag finite-difference noise");
    }

    #[test]
    fn softmax_c_normalizes_and_grads_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x: ArrayD<f64> = randn(&mut rng, &[1, 3, 2, 2]);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = tape.softmax_c(xv);
        let yv = tape.value(y);
        for i in 0..2 {
            for j in 0..2 {
                let s: f64 = (0..3).map(|c| yv[IxDyn(&[0, c, i, j])]).sum();
                assert!((s - 1.0).abs() < 1e-12, "softmax channels sum to one, got {s}");
            }
        }
        let mix: ArrayD<f64> = randn(&mut rng, &[1, 3, 2, 2]);
        let report = grad_check(
            &|t: &mut Tape<f64>, vs: &[Var]| {
                let sm = t.softmax_c(vs[0]);
                let c = t.constant(mix.clone());
                let p = t.mul(sm, c);
                t.mean_all(p)
            },
            &[x],
            &["logits"],
            f64::fd_step(),
            f64::grad_tol(),
        )
        .unwrap();
        assert!(report.pass, "softmax gradients:\n{}", report.lines().join("\n"));
    }

    #[test]
    fn validated_types_reject_malformed_input() {
        let bad = Array4::from_elem((1, 1, 2, 2), f64::NAN);
        assert!(FeatureMap::new(bad).is_err(), "feature maps must be finite");
        let over = Array4::from_elem((1, 1, 2, 2), 1.5);
        assert!(AttentionMap::new(over).is_err(), "attention values live in [0,1]");
        let w = Array4::<f64>::zeros((2, 2, 3, 2));
        assert!(
            KernelWeights::new(w, Array1::zeros(2)).is_err(),
            "kernels must be square"
        );
        let x = FeatureMap::new(Array4::<f64>::zeros((1, 3, 4, 4))).unwrap();
        let kw = KernelWeights::new(Array4::<f64>::zeros((2, 2, 3, 3)), Array1::zeros(2)).unwrap();
        assert!(conv2d(&x, &kw, 1).is_err(), "channel mismatch is a shape error");
    }
}

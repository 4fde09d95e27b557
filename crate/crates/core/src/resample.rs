//! Classical separable resamplers: bicubic, nearest, Gaussian blur and
//! non-overlapping average pooling.
//!
//! Every resampler is expressed as a pair of [`AxisPlan`]s (sparse row
//! operators, one per axis). That representation also gives the exact
//! adjoint, which the network uses to back-propagate through its bicubic
//! image-space skip connection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Scalar, Tensor};

/// Cubic-convolution parameter.
pub const CUBIC_A: f64 = -0.5;

/// Positive rational resize factor `num / den`, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ratio {
    num: u32,
    den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Scale(format!("{num}/{den} is not positive")));
        }
        let g = gcd(num, den);
        Ok(Ratio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn integer(k: u32) -> Self {
        Ratio::new(k, 1).expect("positive integer")
    }

    pub fn reciprocal_of(k: u32) -> Self {
        Ratio::new(1, k).expect("positive integer")
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn recip(&self) -> Self {
        Ratio {
            num: self.den,
            den: self.num,
        }
    }

    /// Output length for an input of length `n`: `round(n * scale)`,
    /// required to be exact when shrinking.
    pub fn apply(&self, n: usize) -> Result<usize> {
        let prod = n as u64 * self.num as u64;
        let den = self.den as u64;
        if self.num < self.den {
            if !prod.is_multiple_of(den) {
                return Err(Error::Shape(format!(
                    "length {n} times {self} is not an integer"
                )));
            }
            return Ok((prod / den) as usize);
        }
        let out = (prod + den / 2) / den;
        if out == 0 {
            return Err(Error::Shape(format!("length {n} times {self} is empty")));
        }
        Ok(out as usize)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = Error;

    /// Accepts `"2"`, `"1/2"` and decimal fractions of integers such as `"0.5"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Scale(format!("cannot parse scale {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Ratio::new(n, d);
        }
        if let Ok(k) = s.parse::<u32>() {
            return Ratio::new(k, 1);
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(bad());
        }
        if v < 1.0 {
            let k = (1.0 / v).round();
            if (1.0 / k - v).abs() < 1e-9 {
                return Ratio::new(1, k as u32);
            }
        } else if (v - v.round()).abs() < 1e-9 {
            return Ratio::new(v.round() as u32, 1);
        }
        Err(bad())
    }
}

/// Sparse linear map from a length-`in_len` signal to a length-`out_len` one.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisPlan {
    in_len: usize,
    out_len: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl AxisPlan {
    fn build(
        in_len: usize,
        out_len: usize,
        mut taps: impl FnMut(usize, &mut Vec<(usize, f64)>),
    ) -> Self {
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        let mut scratch = Vec::new();
        offsets.push(0);
        for o in 0..out_len {
            scratch.clear();
            taps(o, &mut scratch);
            for &(i, w) in &scratch {
                debug_assert!(i < in_len);
                index.push(i);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        AxisPlan {
            in_len,
            out_len,
            offsets,
            index,
            weight,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    /// Taps `(source index, weight)` of output sample `o`.
    pub fn taps(&self, o: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[o]..self.offsets[o + 1];
        self.index[r.clone()]
            .iter()
            .copied()
            .zip(self.weight[r].iter().copied())
    }

    /// Cubic convolution with pixel-center alignment and clamped edges.
    /// When shrinking, the kernel is stretched by `1/scale` (antialiasing).
    pub fn bicubic(in_len: usize, scale: Ratio) -> Result<Self> {
        let out_len = scale.apply(in_len)?;
        let s = scale.as_f64();
        let stretch = if s < 1.0 { s } else { 1.0 };
        let support = 2.0 / stretch;
        Ok(Self::build(in_len, out_len, |o, taps| {
            let u = (o as f64 + 0.5) / s - 0.5;
            let first = (u - support).floor() as i64;
            let last = (u + support).ceil() as i64;
            let mut total = 0.0;
            for j in first..=last {
                let w = stretch * cubic_kernel((u - j as f64) * stretch);
                if w != 0.0 {
                    taps.push((clamp_index(j, in_len), w));
                    total += w;
                }
            }
            for t in taps.iter_mut() {
                t.1 /= total;
            }
            merge_duplicate_taps(taps);
        }))
    }

    /// Nearest sample under the same coordinate mapping as [`AxisPlan::bicubic`].
    pub fn nearest(in_len: usize, scale: Ratio) -> Result<Self> {
        let out_len = scale.apply(in_len)?;
        let s = scale.as_f64();
        Ok(Self::build(in_len, out_len, |o, taps| {
            let u = (o as f64 + 0.5) / s - 0.5;
            taps.push((clamp_index((u + 0.5).floor() as i64, in_len), 1.0));
        }))
    }

    /// Normalized Gaussian of radius `ceil(3 sigma)` with reflect padding.
    pub fn gaussian(len: usize, sigma: f64) -> Result<Self> {
        let kernel = gaussian_kernel(sigma)?;
        let radius = (kernel.len() / 2) as i64;
        Ok(Self::build(len, len, |o, taps| {
            for (t, &w) in kernel.iter().enumerate() {
                let j = o as i64 + t as i64 - radius;
                taps.push((reflect_index(j, len), w));
            }
            merge_duplicate_taps(taps);
        }))
    }

    /// Mean of consecutive non-overlapping windows of `window` samples.
    pub fn box_pool(in_len: usize, window: usize) -> Result<Self> {
        if window == 0 || !in_len.is_multiple_of(window) {
            return Err(Error::Shape(format!(
                "length {in_len} not divisible by pooling window {window}"
            )));
        }
        let w = 1.0 / window as f64;
        Ok(Self::build(in_len, in_len / window, |o, taps| {
            for i in 0..window {
                taps.push((o * window + i, w));
            }
        }))
    }
}

fn merge_duplicate_taps(taps: &mut Vec<(usize, f64)>) {
    taps.sort_by_key(|t| t.0);
    taps.dedup_by(|next, kept| {
        if next.0 == kept.0 {
            kept.1 += next.1;
            true
        } else {
            false
        }
    });
}

#[inline]
fn clamp_index(j: i64, len: usize) -> usize {
    j.clamp(0, len as i64 - 1) as usize
}

/// Mirror without repeating the edge sample: -1 -> 1, len -> len - 2.
fn reflect_index(j: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let m = j.rem_euclid(period);
    (if m < len as i64 { m } else { period - m }) as usize
}

/// Keys' cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized 1-D Gaussian taps, `2 * ceil(3 sigma) + 1` long.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// A separable 2-D linear operator: rows are mapped by `vertical`, columns by
/// `horizontal`.
#[derive(Debug, Clone, PartialEq)]
pub struct Separable {
    pub vertical: AxisPlan,
    pub horizontal: AxisPlan,
}

impl Separable {
    pub fn bicubic(height: usize, width: usize, scale: Ratio) -> Result<Self> {
        Ok(Separable {
            vertical: AxisPlan::bicubic(height, scale)?,
            horizontal: AxisPlan::bicubic(width, scale)?,
        })
    }

    pub fn nearest(height: usize, width: usize, scale: Ratio) -> Result<Self> {
        Ok(Separable {
            vertical: AxisPlan::nearest(height, scale)?,
            horizontal: AxisPlan::nearest(width, scale)?,
        })
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.vertical.out_len, self.horizontal.out_len)
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.vertical.in_len, self.horizontal.in_len)
    }

    /// Applies the operator to one `in_h x in_w` plane, accumulating into `out`.
    pub fn apply_plane<T: Scalar>(&self, src: &[T], out: &mut [T]) {
        let (ih, iw) = self.in_dims();
        let (oh, ow) = self.out_dims();
        debug_assert_eq!(src.len(), ih * iw);
        debug_assert_eq!(out.len(), oh * ow);
        let mut tmp = vec![T::zero(); ih * ow];
        for y in 0..ih {
            let row = &src[y * iw..(y + 1) * iw];
            let trow = &mut tmp[y * ow..(y + 1) * ow];
            for (x, t) in trow.iter_mut().enumerate() {
                *t = self
                    .horizontal
                    .taps(x)
                    .map(|(i, w)| row[i] * T::from_f64_lossy(w))
                    .sum();
            }
        }
        for y in 0..oh {
            let orow = &mut out[y * ow..(y + 1) * ow];
            for (i, w) in self.vertical.taps(y) {
                let w = T::from_f64_lossy(w);
                let trow = &tmp[i * ow..(i + 1) * ow];
                for (o, &t) in orow.iter_mut().zip(trow) {
                    *o += w * t;
                }
            }
        }
    }

    /// Adjoint of [`Separable::apply_plane`]: scatters `grad` (output sized)
    /// back onto an input-sized plane, accumulating.
    pub fn adjoint_plane<T: Scalar>(&self, grad: &[T], out: &mut [T]) {
        let (ih, iw) = self.in_dims();
        let (oh, ow) = self.out_dims();
        debug_assert_eq!(grad.len(), oh * ow);
        debug_assert_eq!(out.len(), ih * iw);
        let mut tmp = vec![T::zero(); ih * ow];
        for y in 0..oh {
            let grow = &grad[y * ow..(y + 1) * ow];
            for (i, w) in self.vertical.taps(y) {
                let w = T::from_f64_lossy(w);
                let trow = &mut tmp[i * ow..(i + 1) * ow];
                for (t, &g) in trow.iter_mut().zip(grow) {
                    *t += w * g;
                }
            }
        }
        for y in 0..ih {
            let trow = &tmp[y * ow..(y + 1) * ow];
            let orow = &mut out[y * iw..(y + 1) * iw];
            for (x, &t) in trow.iter().enumerate() {
                for (i, w) in self.horizontal.taps(x) {
                    orow[i] += t * T::from_f64_lossy(w);
                }
            }
        }
    }

    pub fn apply_tensor<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (oh, ow) = self.out_dims();
        let mut out = Tensor::zeros(x.channels, oh, ow);
        let (n_in, n_out) = (x.plane_len(), oh * ow);
        for c in 0..x.channels {
            self.apply_plane(
                &x.data[c * n_in..(c + 1) * n_in],
                &mut out.data[c * n_out..(c + 1) * n_out],
            );
        }
        out
    }

    pub fn adjoint_tensor<T: Scalar>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let (ih, iw) = self.in_dims();
        let mut out = Tensor::zeros(grad.channels, ih, iw);
        let (n_in, n_out) = (ih * iw, grad.plane_len());
        for c in 0..grad.channels {
            self.adjoint_plane(
                &grad.data[c * n_out..(c + 1) * n_out],
                &mut out.data[c * n_in..(c + 1) * n_in],
            );
        }
        out
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let (oh, ow) = self.out_dims();
        let n_in = img.height() * img.width();
        let mut data = vec![0.0; img.channels() * oh * ow];
        for c in 0..img.channels() {
            self.apply_plane(
                &img.data()[c * n_in..(c + 1) * n_in],
                &mut data[c * oh * ow..(c + 1) * oh * ow],
            );
        }
        Image::new(oh, ow, img.channels(), data).expect("resampled image shape")
    }
}

/// Bicubic resize by `scale`.
pub fn bicubic_resize(img: &Image, scale: Ratio) -> Result<Image> {
    Ok(Separable::bicubic(img.height(), img.width(), scale)?.apply_image(img))
}

/// Nearest-neighbour resize by `scale`.
pub fn nearest_resize(img: &Image, scale: Ratio) -> Result<Image> {
    Ok(Separable::nearest(img.height(), img.width(), scale)?.apply_image(img))
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let op = Separable {
        vertical: AxisPlan::gaussian(img.height(), sigma)?,
        horizontal: AxisPlan::gaussian(img.width(), sigma)?,
    };
    Ok(op.apply_image(img))
}

/// Non-overlapping mean pooling. Only `window == stride` is supported.
pub fn avg_pool(img: &Image, window: usize, stride: usize) -> Result<Image> {
    if window != stride {
        return Err(Error::InvalidArgument(format!(
            "pooling window {window} must equal stride {stride}"
        )));
    }
    let mut out = Vec::new();
    let (h, w) = (img.height(), img.width());
    for c in 0..img.channels() {
        out.extend(avg_pool_plane(img.plane(c), h, w, (window, window))?);
    }
    Image::new(h / window, w / window, img.channels(), out)
}

/// Mean pooling of one `h x w` plane with non-overlapping `wy x wx` blocks.
pub fn avg_pool_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    (wy, wx): (usize, usize),
) -> Result<Vec<T>> {
    if wy == 0 || wx == 0 || !h.is_multiple_of(wy) || !w.is_multiple_of(wx) {
        return Err(Error::Shape(format!(
            "{h}x{w} not divisible by pooling window {wy}x{wx}"
        )));
    }
    let (oh, ow) = (h / wy, w / wx);
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..h {
        let orow = &mut out[(y / wy) * ow..(y / wy + 1) * ow];
        for (x, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
            orow[x / wx] += v;
        }
    }
    let norm = T::from_f64_lossy(1.0 / (wy * wx) as f64);
    for v in &mut out {
        *v *= norm;
    }
    Ok(out)
}

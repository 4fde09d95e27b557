//! Forward and backward kernels for the network's operator set:
//! 3x3 same-padded convolution, ReLU and pixel (un)shuffle.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Scalar, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Lays out the 3x3 neighbourhoods of `x` as a `(C*9) x (H*W)` matrix.
pub fn im2col<T: Scalar>(x: &Tensor<T>, cols: &mut Vec<T>) {
    let (c, h, w) = x.shape();
    let hw = h * w;
    cols.clear();
    cols.resize(c * TAPS * hw, T::zero());
    for ci in 0..c {
        let plane = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let out = &mut dst[y * w..(y + 1) * w];
                    match kx {
                        0 => out[1..].copy_from_slice(&src[..w - 1]),
                        1 => out.copy_from_slice(src),
                        _ => out[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: sums column entries back onto the image grid.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s = &src[y * w..(y + 1) * w];
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &s[1..]),
                        1 => (&mut dst[..], s),
                        _ => (&mut dst[1..], &s[..w - 1]),
                    };
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
    out
}

/// Weights of a 3x3 convolution: `weight` is `cout x cin x 3 x 3`, `bias` is `cout`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Conv {
            cin,
            cout,
            weight: vec![T::zero(); cout * cin * TAPS],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * TAPS
    }

    /// Zero-padded, stride-1 convolution.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let hw = x.plane_len();
        let mut cols = Vec::new();
        im2col(x, &mut cols);
        let mut y = Tensor::zeros(self.cout, x.height, x.width);
        for (co, chunk) in y.data.chunks_mut(hw).enumerate() {
            chunk.fill(self.bias[co]);
        }
        gemm(
            self.cout,
            self.cin * TAPS,
            hw,
            &self.weight,
            Layout::Normal,
            &cols,
            Layout::Normal,
            T::one(),
            &mut y.data,
        );
        y
    }

    /// Accumulates weight and bias gradients into `grad` and returns the
    /// input gradient when `want_input` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: &mut Conv<T>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(dy.channels, self.cout, "conv output gradient channels");
        let hw = x.plane_len();
        let k = self.cin * TAPS;
        let mut cols = Vec::new();
        im2col(x, &mut cols);
        gemm(
            self.cout,
            hw,
            k,
            &dy.data,
            Layout::Normal,
            &cols,
            Layout::Transposed,
            T::one(),
            &mut grad.weight,
        );
        for (co, chunk) in dy.data.chunks(hw).enumerate() {
            grad.bias[co] += chunk.iter().copied().sum::<T>();
        }
        if !want_input {
            return None;
        }
        gemm(
            k,
            self.cout,
            hw,
            &self.weight,
            Layout::Transposed,
            &dy.data,
            Layout::Normal,
            T::zero(),
            &mut cols,
        );
        Some(col2im(&cols, self.cin, x.height, x.width))
    }
}

pub fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the ReLU output `activated` was not positive.
pub fn relu_backward_in_place<T: Scalar>(activated: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// `C*s^2 x H x W -> C x sH x sW`; channel `c*s^2 + dy*s + dx` fills offset `(dy, dx)`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let s2 = s * s;
    if s == 0 || !x.channels.is_multiple_of(s2) {
        return Err(Error::Shape(format!(
            "pixel shuffle by {s} needs channels divisible by {s2}, got {}",
            x.channels
        )));
    }
    let (c, h, w) = (x.channels / s2, x.height, x.width);
    let (oh, ow) = (h * s, w * s);
    let mut out = Tensor::zeros(c, oh, ow);
    for co in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let src = &x.data[(co * s2 + dy * s + dx) * h * w..][..h * w];
                for y in 0..h {
                    let orow = &mut out.data[(co * oh + y * s + dy) * ow..][..ow];
                    for (xx, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                        orow[xx * s + dx] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]: `C x H x W -> C*s^2 x H/s x W/s`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 || !x.height.is_multiple_of(s) || !x.width.is_multiple_of(s) {
        return Err(Error::Shape(format!(
            "pixel unshuffle by {s} needs dims divisible by {s}, got {}x{}",
            x.height, x.width
        )));
    }
    let s2 = s * s;
    let (c, h, w) = (x.channels, x.height / s, x.width / s);
    let (ih, iw) = (x.height, x.width);
    let mut out = Tensor::zeros(c * s2, h, w);
    for ci in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let dst = &mut out.data[(ci * s2 + dy * s + dx) * h * w..][..h * w];
                for y in 0..h {
                    let irow = &x.data[(ci * ih + y * s + dy) * iw..][..iw];
                    for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                        *d = irow[xx * s + dx];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_vec(
            c,
            h,
            w,
            (0..c * h * w).map(|_| rng.uniform() - 0.5).collect(),
        )
    }

    /// Direct-definition convolution oracle.
    fn conv_naive(conv: &Conv<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (h, w) = (x.height, x.width);
        let mut y = Tensor::zeros(conv.cout, h, w);
        for co in 0..conv.cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = conv.bias[co];
                    for ci in 0..conv.cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[((co * conv.cin + ci) * 3 + ky) * 3 + kx]
                                    * x.at(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    y.data[(co * h + yy) * w + xx] = acc;
                }
            }
        }
        y
    }

    fn random_conv(cin: usize, cout: usize, rng: &mut Rng) -> Conv<f64> {
        let mut c = Conv::zeros(cin, cout);
        c.weight.iter_mut().for_each(|v| *v = rng.uniform() - 0.5);
        c.bias.iter_mut().for_each(|v| *v = rng.uniform() - 0.5);
        c
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = Rng::new(3);
        let conv = random_conv(3, 5, &mut rng);
        let x = random_tensor(3, 6, 7, &mut rng);
        let got = conv.forward(&x);
        let want = conv_naive(&conv, &x);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_single_column_image() {
        let mut rng = Rng::new(4);
        let conv = random_conv(2, 2, &mut rng);
        let x = random_tensor(2, 5, 1, &mut rng);
        let got = conv.forward(&x);
        let want = conv_naive(&conv, &x);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let conv = random_conv(2, 3, &mut rng);
        let x = random_tensor(2, 4, 5, &mut rng);
        let probe = random_tensor(3, 4, 5, &mut rng);
        let objective = |c: &Conv<f64>, x: &Tensor<f64>| -> f64 {
            conv_naive(c, x)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grad = Conv::zeros(2, 3);
        let dx = conv.backward(&x, &probe, &mut grad, true).unwrap();
        let eps = 1e-6;
        for i in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[i] += eps;
            let mut m = conv.clone();
            m.weight[i] -= eps;
            let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.weight[i]).abs() < 1e-7, "weight {i}");
        }
        for i in 0..3 {
            let mut p = conv.clone();
            p.bias[i] += eps;
            let mut m = conv.clone();
            m.bias[i] -= eps;
            let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.bias[i]).abs() < 1e-7);
        }
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            let fd = (objective(&conv, &p) - objective(&conv, &m)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-7, "input {i}");
        }
    }

    #[test]
    fn shuffle_examples() {
        let x = Tensor::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), (1, 2, 2));
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        let z = Tensor::<f64>::zeros(3, 48, 48);
        assert_eq!(pixel_unshuffle(&z, 4).unwrap().shape(), (48, 12, 12));
        assert!(pixel_unshuffle(&Tensor::<f64>::zeros(3, 47, 48), 2).is_err());
        assert!(pixel_shuffle(&Tensor::<f64>::zeros(3, 2, 2), 2).is_err());
        let mut rng = Rng::new(1);
        let t = random_tensor(3, 4, 4, &mut rng);
        assert_eq!(pixel_shuffle(&t, 1).unwrap(), t);
    }

    #[test]
    fn shuffle_index_rule() {
        let (c, s, h, w) = (2, 3, 2, 2);
        let x = Tensor::from_vec(
            c * s * s,
            h,
            w,
            (0..c * s * s * h * w).map(|i| i as f64).collect(),
        );
        let y = pixel_shuffle(&x, s).unwrap();
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    for dy in 0..s {
                        for dx in 0..s {
                            assert_eq!(
                                y.at(ch, s * yy + dy, s * xx + dx),
                                x.at(ch * s * s + dy * s + dx, yy, xx)
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shuffle_pair_is_exhaustive_bijection() {
        for s in 2..=4 {
            let (c, h, w) = (2, 2 * s, 3 * s);
            let x = Tensor::from_vec(c, h, w, (0..c * h * w).map(|i| i as f64).collect());
            let u = pixel_unshuffle(&x, s).unwrap();
            let mut seen = u.data.clone();
            seen.sort_by(f64::total_cmp);
            assert_eq!(seen, x.data);
            assert_eq!(pixel_shuffle(&u, s).unwrap(), x);
        }
    }

    #[test]
    fn relu_gradient_masks() {
        let mut x = Tensor::from_vec(1, 1, 4, vec![-1.0, 0.0, 2.0, 3.0]);
        relu_in_place(&mut x);
        assert_eq!(x.data, vec![0.0, 0.0, 2.0, 3.0]);
        let mut g = Tensor::from_vec(1, 1, 4, vec![1.0; 4]);
        relu_backward_in_place(&x, &mut g);
        assert_eq!(g.data, vec![0.0, 0.0, 1.0, 1.0]);
    }
}

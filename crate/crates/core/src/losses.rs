//! Self-supervised objectives: chain consistency and pooled colour preservation.
//!
//! Every L1 distance is the mean absolute difference over all elements. The
//! kink at zero takes subgradient 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::resample::avg_pool_plane;
use crate::tensor::{Scalar, Tensor};

/// Base pooling window applied to the low-resolution input.
pub const COLOR_POOL: usize = 4;

/// Loss components of one scale condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleLoss {
    pub scale: u32,
    pub l_cons: f64,
    pub l_color: f64,
}

/// Loss summary of a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cons: f64,
    pub l_color: f64,
    pub l_total: f64,
    pub lambda_color: f64,
    /// Per-scale breakdown; sums to `l_cons` / `l_color`.
    pub per_scale: Vec<ScaleLoss>,
}

impl LossReport {
    pub fn from_scales(per_scale: Vec<ScaleLoss>, lambda_color: f64) -> Self {
        let l_cons = per_scale.iter().map(|s| s.l_cons).sum();
        let l_color = per_scale.iter().map(|s| s.l_color).sum();
        LossReport {
            l_cons,
            l_color,
            l_total: total_loss(l_cons, l_color, lambda_color),
            lambda_color,
            per_scale,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_total.is_finite() && self.l_cons.is_finite() && self.l_color.is_finite()
    }
}

/// `l_cons + lambda_color * l_color`.
pub fn total_loss(l_cons: f64, l_color: f64, lambda_color: f64) -> f64 {
    l_cons + lambda_color * l_color
}

#[inline]
fn sign<T: Scalar>(d: T) -> T {
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute difference of two equally sized buffers, and optionally its
/// gradient with respect to `a` scaled by `weight`.
pub fn l1_mean<T: Scalar>(a: &[T], b: &[T], weight: Option<T>) -> (f64, Option<Vec<T>>) {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let loss = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .sum::<f64>()
        / n as f64;
    let grad = weight.map(|w| {
        let w = w / T::from_usize(n).expect("length fits");
        a.iter().zip(b).map(|(&x, &y)| w * sign(x - y)).collect()
    });
    (loss, grad)
}

/// Pooling window as `(rows, columns)`.
pub type Window = (usize, usize);

/// Channel-wise mean pooling of a tensor.
pub fn pool_tensor<T: Scalar>(x: &Tensor<T>, window: Window) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(x.data.len() / (window.0 * window.1).max(1));
    let n = x.plane_len();
    for c in 0..x.channels {
        data.extend(avg_pool_plane(
            &x.data[c * n..(c + 1) * n],
            x.height,
            x.width,
            window,
        )?);
    }
    Ok(Tensor::from_vec(
        x.channels,
        x.height / window.0,
        x.width / window.1,
        data,
    ))
}

/// `mean |P(a, window) - target|` and, when `weight` is given, its gradient
/// with respect to `a` (scaled by `weight`).
pub fn pooled_l1<T: Scalar>(
    a: &Tensor<T>,
    window: Window,
    target: &Tensor<T>,
    weight: Option<T>,
) -> Result<(f64, Option<Tensor<T>>)> {
    let pooled = pool_tensor(a, window)?;
    if pooled.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "pooled {:?} vs target {:?}",
            pooled.shape(),
            target.shape()
        )));
    }
    let (loss, g) = l1_mean(&pooled.data, &target.data, weight);
    let grad = g.map(|g| {
        // Each pooled value spreads evenly over its window.
        let (wy, wx) = window;
        let spread = T::from_f64_lossy(1.0 / (wy * wx) as f64);
        let (ph, pw) = (pooled.height, pooled.width);
        let mut out = Tensor::zeros(a.channels, a.height, a.width);
        for c in 0..a.channels {
            for y in 0..a.height {
                let grow = &g[(c * ph + y / wy) * pw..][..pw];
                let orow = &mut out.data[(c * a.height + y) * a.width..][..a.width];
                for (x, o) in orow.iter_mut().enumerate() {
                    *o = grow[x / wx] * spread;
                }
            }
        }
        out
    });
    Ok((loss, grad))
}

/// Pooled grid length along an axis whose smaller image has length `m`:
/// `m / 4` when 4 divides `m`, else the largest divisor of `m` not above
/// `m / 4`, and 1 for `m < 4`.
pub fn color_grid(m: usize) -> usize {
    if m.is_multiple_of(COLOR_POOL) {
        return m / COLOR_POOL;
    }
    (1..=m / COLOR_POOL)
        .rev()
        .find(|g| m.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Pooling windows of the two colour terms for an `h x w` input at scale `s`.
///
/// When `4s` divides the input this is `P(x_s, 4s)` vs `P(x, 4)` and
/// `P(x_inv, 4)` vs `P(x, 4s)`. Otherwise windows grow per axis until both
/// images of a term pool to the same integer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorPlan {
    pub scale: u32,
    /// Windows on `x_s` and on `x`.
    pub up: (Window, Window),
    /// Windows on `x_inv` and on `x`.
    pub down: (Window, Window),
}

impl ColorPlan {
    pub fn new(height: usize, width: usize, s: u32) -> Result<Self> {
        if s < 2 {
            return Err(Error::Scale(format!(
                "colour loss needs an integer scale >= 2, got {s}"
            )));
        }
        let k = s as usize;
        if height == 0 || width == 0 || !height.is_multiple_of(k) || !width.is_multiple_of(k) {
            return Err(Error::Shape(format!(
                "{height}x{width} input is not divisible by {s}"
            )));
        }
        let block = |h: usize, w: usize| (h / color_grid(h), w / color_grid(w));
        let (fy, fx) = block(height, width);
        let (cy, cx) = block(height / k, width / k);
        Ok(ColorPlan {
            scale: s,
            up: ((fy * k, fx * k), (fy, fx)),
            down: ((cy, cx), (cy * k, cx * k)),
        })
    }
}

/// Pooled versions of the input that the colour loss compares against.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorTargets<T> {
    pub plan: ColorPlan,
    /// `x` pooled for the up term.
    pub fine: Tensor<T>,
    /// `x` pooled for the down term.
    pub coarse: Tensor<T>,
}

pub fn color_targets<T: Scalar>(x: &Tensor<T>, s: u32) -> Result<ColorTargets<T>> {
    let plan = ColorPlan::new(x.height, x.width, s)?;
    Ok(ColorTargets {
        plan,
        fine: pool_tensor(x, plan.up.1)?,
        coarse: pool_tensor(x, plan.down.1)?,
    })
}

fn check_same(a: &Image, b: &Image, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// `mean|x_hat - x| + mean|x_check - x|`.
pub fn consistency_loss(x_hat: &Image, x_check: &Image, x: &Image) -> Result<f64> {
    check_same(x_hat, x, "consistency x_hat")?;
    check_same(x_check, x, "consistency x_check")?;
    Ok(l1_mean(x_hat.data(), x.data(), None).0 + l1_mean(x_check.data(), x.data(), None).0)
}

/// Colour loss for integer scale `s`:
/// `mean|P(x_s, 4s) - P(x, 4)| + mean|P(x_inv, 4) - P(x, 4s)|`, with the
/// windows of [`ColorPlan`].
pub fn color_loss(x_s: &Image, x_inv: &Image, x: &Image, s: u32) -> Result<f64> {
    let t = color_targets::<f64>(&Tensor::from_image(x), s)?;
    let (up, _) = pooled_l1(&Tensor::from_image(x_s), t.plan.up.0, &t.fine, None)?;
    let (down, _) = pooled_l1(&Tensor::from_image(x_inv), t.plan.down.0, &t.coarse, None)?;
    Ok(up + down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::nearest_resize;
    use crate::rng::Rng;
    use crate::Ratio;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.uniform()).unwrap()
    }

    fn shifted(img: &Image, d: f64) -> Image {
        Image::new(
            img.height(),
            img.width(),
            img.channels(),
            img.data().iter().map(|v| v + d).collect(),
        )
        .unwrap()
    }

    #[test]
    fn consistency_examples() {
        let x = random_image(4, 4, 1);
        assert_eq!(consistency_loss(&x, &x, &x).unwrap(), 0.0);
        let v = consistency_loss(&shifted(&x, 0.1), &x, &x).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        assert!(consistency_loss(&random_image(4, 2, 1), &x, &x).is_err());
    }

    #[test]
    fn consistency_matches_summation_oracle() {
        let (a, b, x) = (
            random_image(4, 4, 2),
            random_image(4, 4, 3),
            random_image(4, 4, 4),
        );
        let mut sa = 0.0;
        let mut sb = 0.0;
        for c in 0..3 {
            for y in 0..4 {
                for xx in 0..4 {
                    sa += (a.get(c, y, xx) - x.get(c, y, xx)).abs();
                    sb += (b.get(c, y, xx) - x.get(c, y, xx)).abs();
                }
            }
        }
        let want = sa / 48.0 + sb / 48.0;
        assert!((consistency_loss(&a, &b, &x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn color_examples() {
        let x = Image::filled(48, 48, 3, 0.3).unwrap();
        let xs = Image::filled(96, 96, 3, 0.3).unwrap();
        let xi = Image::filled(24, 24, 3, 0.3).unwrap();
        assert!(color_loss(&xs, &xi, &x, 2).unwrap().abs() < 1e-12);
        let d = |h| Image::filled(h, h, 3, 0.25).unwrap();
        assert_eq!(color_loss(&d(96), &d(24), &d(48), 2).unwrap(), 0.0);

        let t = color_targets(&Tensor::<f64>::from_image(&x), 2).unwrap();
        assert_eq!((t.fine.height, t.fine.width), (12, 12));
        assert_eq!((t.coarse.height, t.coarse.width), (6, 6));

        assert!(color_loss(&xs, &xi, &Image::filled(44, 44, 3, 0.3).unwrap(), 2).is_err());
        assert!(color_loss(&xs, &xi, &Image::filled(47, 48, 3, 0.3).unwrap(), 2).is_err());
        assert!(color_loss(&xs, &xi, &x, 1).is_err());
        assert!(color_loss(&xi, &xs, &x, 2).is_err());
    }

    #[test]
    fn checkerboard_first_term_vanishes() {
        let x = Image::from_fn(8, 8, 3, |_, y, x| ((x + y) % 2) as f64).unwrap();
        let xs = nearest_resize(&x, Ratio::integer(2)).unwrap();
        let targets = color_targets(&Tensor::<f64>::from_image(&x), 2).unwrap();
        assert_eq!(targets.plan.up.0, (8, 8));
        let (first, _) = pooled_l1(&Tensor::from_image(&xs), (8, 8), &targets.fine, None).unwrap();
        assert_eq!(first, 0.0);
    }

    #[test]
    fn color_plan_windows() {
        let nominal = ColorPlan::new(48, 48, 2).unwrap();
        assert_eq!(nominal.up, ((8, 8), (4, 4)));
        assert_eq!(nominal.down, ((4, 4), (8, 8)));
        // 48 / 8 = 6 is not a multiple of 4: the down term pools to one value.
        let p = ColorPlan::new(48, 48, 8).unwrap();
        assert_eq!(p.up, ((32, 32), (4, 4)));
        assert_eq!(p.down, ((6, 6), (48, 48)));
        let p = ColorPlan::new(24, 36, 2).unwrap();
        assert_eq!(p.up, ((8, 8), (4, 4)));
        assert_eq!(p.down, ((4, 6), (8, 12)));
        assert_eq!(color_grid(6), 1);
        assert_eq!(color_grid(18), 3);
        assert_eq!(color_grid(3), 1);
        assert!(ColorPlan::new(48, 48, 5).is_err());
        assert!(ColorPlan::new(48, 48, 1).is_err());
    }

    #[test]
    fn rectangular_windows_reach_a_common_grid() {
        let x = random_image(48, 48, 5);
        let xs = random_image(384, 384, 6);
        let xi = random_image(6, 6, 7);
        let mut want_up = 0.0;
        for c in 0..3 {
            for gy in 0..12 {
                for gx in 0..12 {
                    let mean = |img: &Image, b: usize| {
                        let mut s = 0.0;
                        for y in 0..b {
                            for xx in 0..b {
                                s += img.get(c, gy * b + y, gx * b + xx);
                            }
                        }
                        s / (b * b) as f64
                    };
                    want_up += (mean(&xs, 32) - mean(&x, 4)).abs();
                }
            }
        }
        want_up /= 432.0;
        let mut want_down = 0.0;
        for c in 0..3 {
            let m = |img: &Image| img.plane(c).iter().sum::<f64>() / img.plane(c).len() as f64;
            want_down += (m(&xi) - m(&x)).abs();
        }
        want_down /= 3.0;
        let got = color_loss(&xs, &xi, &x, 8).unwrap();
        assert!((got - want_up - want_down).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert!((total_loss(1.0, 0.5, 0.2) - 1.1).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.0, 3.0), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.2), 0.0);
    }

    #[test]
    fn report_adds_up() {
        let r = LossReport::from_scales(
            vec![
                ScaleLoss {
                    scale: 2,
                    l_cons: 0.5,
                    l_color: 0.25,
                },
                ScaleLoss {
                    scale: 4,
                    l_cons: 0.125,
                    l_color: 1.0,
                },
            ],
            0.2,
        );
        assert_eq!(r.l_cons, 0.625);
        assert_eq!(r.l_color, 1.25);
        assert_eq!(r.l_total, 0.625 + 0.2 * 1.25);
    }

    #[test]
    fn l1_gradient_matches_finite_differences_and_kink() {
        let a = vec![0.3, -0.2, 0.5, 0.1];
        let b = vec![0.1, 0.1, 0.5, 0.4];
        let (_, g) = l1_mean(&a, &b, Some(2.0));
        let g = g.unwrap();
        assert_eq!(g, vec![0.5, -0.5, 0.0, -0.5]);
        let eps = 1e-7;
        for i in [0, 1, 3] {
            let mut p = a.clone();
            p[i] += eps;
            let mut m = a.clone();
            m[i] -= eps;
            let fd = 2.0 * (l1_mean(&p, &b, None).0 - l1_mean(&m, &b, None).0) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pooled_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let a = Tensor::from_vec(3, 8, 8, (0..192).map(|_| rng.uniform()).collect());
        let t = Tensor::from_vec(3, 2, 2, (0..12).map(|_| rng.uniform()).collect());
        let (_, g) = pooled_l1(&a, (4, 4), &t, Some(1.0)).unwrap();
        let g = g.unwrap();
        let eps = 1e-7;
        for i in [0, 37, 100, 191] {
            let mut p = a.clone();
            p.data[i] += eps;
            let mut m = a.clone();
            m.data[i] -= eps;
            let fd = (pooled_l1(&p, (4, 4), &t, None).unwrap().0
                - pooled_l1(&m, (4, 4), &t, None).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g.data[i]).abs() < 1e-6, "{i}: {fd} vs {}", g.data[i]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn losses_nonnegative_and_symmetric(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
                let (a, b, x) = (random_image(8, 8, s1), random_image(8, 8, s2), random_image(8, 8, s3));
                let ab = consistency_loss(&a, &b, &x).unwrap();
                let ba = consistency_loss(&b, &a, &x).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(ab, ba);
                let xs = random_image(16, 16, s1 ^ 7);
                let xi = random_image(4, 4, s2 ^ 7);
                prop_assert!(color_loss(&xs, &xi, &x, 2).unwrap() >= 0.0);
            }

            #[test]
            fn color_loss_ignores_order_within_blocks(seed in 0u64..1000) {
                // Reverse every 4x4 block of x, the matching 8x8 blocks of x_s
                // and 4x4 blocks of x_inv (one pooled value each).
                let x = random_image(16, 16, seed);
                let xs = random_image(32, 32, seed + 1);
                let xi = random_image(8, 8, seed + 2);
                let permute = |img: &Image, b: usize| {
                    Image::from_fn(img.height(), img.width(), 3, |c, y, xx| {
                        let (by, bx) = (y / b * b, xx / b * b);
                        img.get(c, by + (b - 1 - (y - by)), bx + (b - 1 - (xx - bx)))
                    })
                    .unwrap()
                };
                let base = color_loss(&xs, &xi, &x, 2).unwrap();
                let moved = color_loss(&permute(&xs, 8), &permute(&xi, 4), &permute(&x, 4), 2).unwrap();
                prop_assert!((base - moved).abs() < 1e-12);
            }
        }
    }
}

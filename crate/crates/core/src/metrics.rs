//! Image-quality metrics, error maps and TSV reports.
//!
//! Values are compared on the 0..255 scale after clamping to `[0, 1]`.
//! `Mode::Y` evaluates the BT.601 luma channel only.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{to_luminance, Image};

const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Y,
    Rgb,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "y" => Ok(Mode::Y),
            "rgb" => Ok(Mode::Rgb),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric mode {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Y => "y",
            Mode::Rgb => "rgb",
        })
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "images differ: {}x{}x{} vs {}x{}x{}",
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

/// Shaves the border, clamps, optionally converts to luma and rescales to 0..255.
fn prepare(img: &Image, mode: Mode, shave: usize) -> Result<Image> {
    let (h, w) = img.dims();
    if 2 * shave >= h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "shave {shave} leaves nothing of a {h}x{w} image"
        )));
    }
    let cropped = img
        .crop(shave, shave, h - 2 * shave, w - 2 * shave)?
        .clamped();
    let mut out = match mode {
        Mode::Y if cropped.channels() == 3 => to_luminance(&cropped)?,
        _ => cropped,
    };
    for v in out.data_mut() {
        *v *= PEAK;
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Image, b: &Image, mode: Mode, shave: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (pa, pb) = (prepare(a, mode, shave)?, prepare(b, mode, shave)?);
    let n = pa.data().len() as f64;
    let mse = pa
        .data()
        .iter()
        .zip(pb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean structural similarity over all valid 11x11 Gaussian windows (and
/// over channels in RGB mode).
pub fn ssim(a: &Image, b: &Image, mode: Mode, shave: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (pa, pb) = (prepare(a, mode, shave)?, prepare(b, mode, shave)?);
    let (h, w) = pa.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c = pa.channels();
    let sum: f64 = (0..c)
        .map(|ch| ssim_plane(pa.plane(ch), pb.plane(ch), h, w))
        .sum();
    Ok(sum / c as f64)
}

/// Mean absolute error on the 0..255 scale (no clamping).
pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n
        * PEAK)
}

/// Entry `i` of the 256-entry error colormap, as RGB in `[0, 1]`.
///
/// With `t = i / 255` the channels are `clamp(1.5 - |4t - c|, 0, 1)` for
/// `c = 3, 2, 1` (red, green, blue): dark blue at 0, through cyan, yellow
/// and red, to dark red at 255.
pub fn colormap(i: u8) -> [f64; 3] {
    let t = f64::from(i) / 255.0;
    let ch = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Colormap index per pixel: `round(255 * d / max d)` where `d` is the
/// channel-mean absolute difference. All zeros when the images are equal.
pub fn error_indices(a: &Image, b: &Image) -> Result<Vec<u8>> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    let c = a.channels();
    let d: Vec<f64> = (0..h * w)
        .map(|i| {
            (0..c)
                .map(|ch| (a.plane(ch)[i] - b.plane(ch)[i]).abs())
                .sum::<f64>()
                / c as f64
        })
        .collect();
    let max = d.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(vec![0; h * w]);
    }
    Ok(d.iter().map(|v| (255.0 * v / max).round() as u8).collect())
}

/// Heat-map of `|a - b|` through [`colormap`].
pub fn error_map(a: &Image, b: &Image) -> Result<Image> {
    let idx = error_indices(a, b)?;
    let (h, w) = a.dims();
    let mut data = vec![0.0; 3 * h * w];
    for (i, &k) in idx.iter().enumerate() {
        let rgb = colormap(k);
        for c in 0..3 {
            data[c * h * w + i] = rgb[c];
        }
    }
    Image::new(h, w, 3, data)
}

/// Formats a metric value; infinities print as `inf`.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// One evaluated (image, scale, method) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub image: String,
    pub scale: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// Tab-separated report with a header line and a trailing mean row.
pub fn report_tsv(rows: &[ReportRow]) -> String {
    let mut out = String::from("image\tscale\tmethod\tpsnr\tssim\tmae\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.image,
            r.scale,
            r.method,
            format_value(r.psnr),
            format_value(r.ssim),
            format_value(r.mae)
        );
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "mean\t-\t-\t{}\t{}\t{}",
            format_value(mean(|r| r.psnr)),
            format_value(mean(|r| r.ssim)),
            format_value(mean(|r| r.mae))
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.uniform()).unwrap()
    }

    /// SSIM computed window by window with a 2-D kernel and two-pass moments.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let g: Vec<f64> = (0..11)
            .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
            .collect();
        let mut k2 = [[0.0; 11]; 11];
        let mut norm = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                k2[i][j] = g[i] * g[j];
                norm += k2[i][j];
            }
        }
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let (h, w) = a.dims();
        let mut total = 0.0;
        let mut count = 0.0;
        for ch in 0..a.channels() {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let at = |im: &Image, i: usize, j: usize| im.get(ch, y + i, x + j) * 255.0;
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            ma += k2[i][j] / norm * at(a, i, j);
                            mb += k2[i][j] / norm * at(b, i, j);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k2[i][j] / norm;
                            let (da, db) = (at(a, i, j) - ma, at(b, i, j) - mb);
                            va += wgt * da * da;
                            vb += wgt * db * db;
                            cov += wgt * da * db;
                        }
                    }
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(16, 16, 3, 1);
        assert_eq!(psnr(&a, &a, Mode::Y, 0).unwrap(), f64::INFINITY);
        // Offsetting every channel by 16/255 * 256/219.859 shifts luma by exactly 16/255.
        let luma_gain = (65.738 + 129.057 + 25.064) / 256.0;
        let x = Image::filled(8, 8, 3, 0.3).unwrap();
        let y = Image::filled(8, 8, 3, 0.3 + 16.0 / 255.0 / luma_gain).unwrap();
        let want = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&x, &y, Mode::Y, 0).unwrap() - want).abs() < 1e-9);
        assert!((want - 24.0484).abs() < 1e-4);
        let rgb = Image::filled(8, 8, 3, 0.3 + 16.0 / 255.0).unwrap();
        assert!((psnr(&x, &rgb, Mode::Rgb, 2).unwrap() - want).abs() < 1e-9);
        assert!(psnr(&x, &Image::filled(8, 9, 3, 0.0).unwrap(), Mode::Y, 0).is_err());
        assert!(psnr(&x, &y, Mode::Y, 4).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = random_image(24, 24, 3, 2);
        let mut rng = Rng::new(9);
        let noise: Vec<f64> = (0..a.data().len()).map(|_| rng.uniform() - 0.5).collect();
        let noisy = |amp: f64| {
            let data = a
                .data()
                .iter()
                .zip(&noise)
                .map(|(v, n)| v + amp * n)
                .collect();
            Image::new(24, 24, 3, data).unwrap()
        };
        let p: Vec<f64> = [0.01, 0.02, 0.04]
            .iter()
            .map(|&amp| psnr(&a.clamped(), &noisy(amp).clamped(), Mode::Rgb, 0).unwrap())
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        for seed in 0..3 {
            let a = random_image(32, 32, 3, seed);
            let b = random_image(32, 32, 3, seed + 100);
            let got = ssim(&a, &b, Mode::Rgb, 0).unwrap();
            assert!((got - ssim_oracle(&a, &b)).abs() < 1e-9);
        }
        let a = random_image(32, 32, 3, 7);
        assert_eq!(ssim(&a, &a, Mode::Y, 0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constants_case() {
        let a = Image::filled(16, 16, 3, 0.0).unwrap();
        let b = Image::filled(16, 16, 3, 1.0).unwrap();
        let c1 = (0.01f64 * 255.0).powi(2);
        let want = c1 / (255.0 * 255.0 + c1);
        assert!((ssim(&a, &b, Mode::Rgb, 0).unwrap() - want).abs() < 1e-15);
        assert!(ssim(&a, &b, Mode::Rgb, 3).is_err());
    }

    #[test]
    fn mae_examples() {
        let a = random_image(4, 4, 3, 3);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let data = a.data().iter().map(|v| v + 0.1).collect();
        let b = Image::new(4, 4, 3, data).unwrap();
        assert!((mae(&a, &b).unwrap() - 25.5).abs() < 1e-9);
        let c = random_image(4, 4, 3, 4);
        let mut sum = 0.0;
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    sum += (a.get(ch, y, x) - c.get(ch, y, x)).abs();
                }
            }
        }
        assert!((mae(&a, &c).unwrap() - sum / 48.0 * 255.0).abs() < 1e-12);
    }

    #[test]
    fn error_map_examples() {
        let a = random_image(6, 6, 3, 5);
        let map = error_map(&a, &a).unwrap();
        let c0 = colormap(0);
        for ch in 0..3 {
            assert!(map.plane(ch).iter().all(|&v| v == c0[ch]));
        }
        let mut b = a.clone();
        b.set(0, 2, 3, a.get(0, 2, 3) + 0.5);
        b.set(1, 4, 4, a.get(1, 4, 4) + 0.2);
        let idx = error_indices(&a, &b).unwrap();
        assert_eq!(idx[2 * 6 + 3], 255);
        assert_eq!(idx[4 * 6 + 4], 102);
        let map = error_map(&a, &b).unwrap();
        let top = colormap(255);
        assert_eq!([map.get(0, 2, 3), map.get(1, 2, 3), map.get(2, 2, 3)], top);
        assert_eq!(colormap(0), [0.0, 0.0, 0.5]);
    }

    #[test]
    fn report_format() {
        let rows = vec![
            ReportRow {
                image: "a".into(),
                scale: "2".into(),
                method: "bicubic".into(),
                psnr: f64::INFINITY,
                ssim: 1.0,
                mae: 0.0,
            },
            ReportRow {
                image: "b".into(),
                scale: "2".into(),
                method: "bicubic".into(),
                psnr: 30.0,
                ssim: 0.5,
                mae: 2.0,
            },
        ];
        let tsv = report_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "image\tscale\tmethod\tpsnr\tssim\tmae");
        assert_eq!(lines[1], "a\t2\tbicubic\tinf\t1.0000\t0.0000");
        assert_eq!(lines[3], "mean\t-\t-\tinf\t0.7500\t1.0000");
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..500) {
            let a = random_image(12, 12, 3, seed);
            let b = random_image(12, 12, 3, seed + 1000);
            prop_assert_eq!(psnr(&a, &b, Mode::Y, 0).unwrap(), psnr(&b, &a, Mode::Y, 0).unwrap());
            prop_assert!((ssim(&a, &b, Mode::Rgb, 0).unwrap() - ssim(&b, &a, Mode::Rgb, 0).unwrap()).abs() < 1e-12);
            prop_assert!((mae(&a, &b).unwrap() - mae(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn error_index_is_monotone(seed in 0u64..500) {
            let a = random_image(5, 5, 3, seed);
            let b = random_image(5, 5, 3, seed + 7);
            let idx = error_indices(&a, &b).unwrap();
            let d: Vec<f64> = (0..25)
                .map(|i| (0..3).map(|c| (a.plane(c)[i] - b.plane(c)[i]).abs()).sum::<f64>())
                .collect();
            for i in 0..25 {
                for j in 0..25 {
                    if d[i] > d[j] {
                        prop_assert!(idx[i] >= idx[j]);
                    }
                }
            }
        }
    }
}

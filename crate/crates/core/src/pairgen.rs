//! Paired training data from the learned down-sampler.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{save_image, Image};
use crate::net::{forward, ModelParameters, ScaleCondition};
use crate::parallel::{map_ordered, Execution};
use crate::tensor::Scalar;

/// Default stem template; `{n}` becomes the 1-based pair index, zero-padded to four digits.
pub const DEFAULT_TEMPLATE: &str = "{n}";

/// Center-crops `img` to dimensions divisible by `s`, warning when pixels are dropped.
pub fn crop_divisible(img: &Image, s: u32) -> Result<Image> {
    let cropped = img.crop_to_multiple(s as usize)?;
    if cropped.dims() != img.dims() {
        log::warn!(
            "{}x{} is not divisible by {s}; center-cropping to {}x{}",
            img.height(),
            img.width(),
            cropped.height(),
            cropped.width()
        );
    }
    Ok(cropped)
}

fn downsample_pairs<T: Scalar>(
    params: &ModelParameters<T>,
    images: &[Image],
    s: u32,
    exec: Execution,
) -> Result<Vec<(Image, Image)>> {
    if s < 2 {
        return Err(Error::Scale(format!("pair scale must be >= 2, got {s}")));
    }
    map_ordered(exec, images, |_, img| {
        let hi = crop_divisible(img, s)?;
        let lo = forward(params, &hi, ScaleCondition::Down(s))?;
        Ok((lo, hi))
    })
    .into_iter()
    .collect()
}

/// `(f(x | 1/s), x)` for every LR image `x`.
pub fn generate_llr_lr<T: Scalar>(
    params: &ModelParameters<T>,
    lr_images: &[Image],
    s: u32,
    exec: Execution,
) -> Result<Vec<(Image, Image)>> {
    downsample_pairs(params, lr_images, s, exec)
}

/// `(f(y | 1/s), y)` for every HR image `y`.
pub fn generate_lr_hr<T: Scalar>(
    params: &ModelParameters<T>,
    hr_images: &[Image],
    s: u32,
    exec: Execution,
) -> Result<Vec<(Image, Image)>> {
    downsample_pairs(params, hr_images, s, exec)
}

/// Expands a stem template for the 1-based index `n`.
pub fn stem_for(template: &str, n: usize) -> String {
    template.replace("{n}", &format!("{n:04}"))
}

/// Writes `dir/LR/<stem>.png`, `dir/HR/<stem>.png` and `dir/manifest.tsv`
/// (`stem`, `lr_dims`, `hr_dims`, `scale`; dims as `HxW`, no header).
/// Returns the manifest path.
pub fn export_dataset(
    pairs: &[(Image, Image)],
    dir: impl AsRef<Path>,
    template: &str,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let stems: Vec<String> = (1..=pairs.len()).map(|n| stem_for(template, n)).collect();
    let mut seen = HashSet::new();
    for stem in &stems {
        if stem.is_empty() || stem.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!(
                "invalid file stem {stem:?}"
            )));
        }
        if !seen.insert(stem) {
            return Err(Error::InvalidArgument(format!(
                "naming template {template:?} maps two pairs to {stem:?}"
            )));
        }
    }
    let mut manifest = String::new();
    for ((lo, hi), stem) in pairs.iter().zip(&stems) {
        let (lh, lw) = lo.dims();
        let (hh, hw) = hi.dims();
        if lh == 0 || hh % lh != 0 || hw % lw != 0 || hh / lh != hw / lw {
            return Err(Error::Shape(format!(
                "pair {stem}: {lh}x{lw} and {hh}x{hw} are not related by an integer scale"
            )));
        }
        let _ = writeln!(manifest, "{stem}\t{lh}x{lw}\t{hh}x{hw}\t{}", hh / lh);
    }
    for sub in ["LR", "HR"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for ((lo, hi), stem) in pairs.iter().zip(&stems) {
        save_image(lo, dir.join("LR").join(format!("{stem}.png")))?;
        save_image(hi, dir.join("HR").join(format!("{stem}.png")))?;
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{load_image, quantize_u8};
    use crate::net::ModelConfig;
    use crate::resample::{bicubic_resize, Ratio};
    use crate::rng::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.uniform()).unwrap()
    }

    fn tiny() -> ModelParameters<f32> {
        let cfg = ModelConfig {
            n_resblocks: 1,
            n_channels: 4,
            ..ModelConfig::default()
        };
        ModelParameters::init(&cfg, 1).unwrap()
    }

    #[test]
    fn pair_shapes() {
        let pairs = generate_llr_lr(
            &tiny(),
            &[random_image(96, 96, 1)],
            2,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(pairs[0].0.dims(), (48, 48));
        assert_eq!(pairs[0].1.dims(), (96, 96));
        let pairs = generate_lr_hr(
            &tiny(),
            &[random_image(99, 98, 1)],
            2,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(pairs[0].0.dims(), (49, 49));
        assert_eq!(pairs[0].1.dims(), (98, 98));
        assert!(generate_lr_hr(&tiny(), &[], 2, Execution::Sequential)
            .unwrap()
            .is_empty());
        assert!(
            generate_lr_hr(&tiny(), &[random_image(8, 8, 1)], 4, Execution::Sequential).is_err()
        );
    }

    #[test]
    fn bicubic_stub_gives_bicubic_downsample() {
        let zero = tiny().zeros_like();
        let x = random_image(32, 32, 3);
        let pairs =
            generate_llr_lr(&zero, std::slice::from_ref(&x), 2, Execution::Parallel).unwrap();
        let want = bicubic_resize(&x, Ratio::reciprocal_of(2)).unwrap();
        for (a, b) in pairs[0].0.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn export_layout_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let pairs: Vec<_> = (0..3)
            .map(|i| (random_image(4, 6, i), random_image(8, 12, i + 10)))
            .collect();
        let manifest = export_dataset(&pairs, dir.path(), DEFAULT_TEMPLATE).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        assert_eq!(
            text,
            "0001\t4x6\t8x12\t2\n0002\t4x6\t8x12\t2\n0003\t4x6\t8x12\t2\n"
        );
        let count = |sub: &str| fs::read_dir(dir.path().join(sub)).unwrap().count();
        assert_eq!(count("LR") + count("HR"), 6);

        let snapshot = |p: &Path| fs::read(p).unwrap();
        let lr1 = dir.path().join("LR/0002.png");
        let before = snapshot(&lr1);
        export_dataset(&pairs, dir.path(), DEFAULT_TEMPLATE).unwrap();
        assert_eq!(snapshot(&lr1), before);

        let back = load_image(&lr1).unwrap();
        for (a, b) in back.data().iter().zip(pairs[1].0.data()) {
            assert_eq!(*a, f64::from(quantize_u8(*b)) / 255.0);
        }
    }

    #[test]
    fn export_rejects_collisions() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![(random_image(4, 4, 0), random_image(8, 8, 1)); 2];
        assert!(export_dataset(&pairs, dir.path(), "same").is_err());
        assert!(export_dataset(&pairs, dir.path(), "img_{n}").is_ok());
        assert!(dir.path().join("LR/img_0002.png").exists());
    }
}

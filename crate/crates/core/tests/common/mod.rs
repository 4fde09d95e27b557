//! Procedural texture-rich test images shared by the integration tests.

#![allow(dead_code)]

use icfsr::{Image, Rng};

/// Side length of the generated high-resolution images.
pub const SIZE: usize = 256;
const SUPERSAMPLE: usize = 4;

/// Renders `f(u, v) -> rgb` on a `size x size` grid with 4x4 supersampling,
/// where `u, v` are the row/column positions in pixel units.
fn render(size: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> Image {
    let mut data = vec![0.0; 3 * size * size];
    let plane = size * size;
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let v = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let c = f(u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                data[k * plane + y * size + x] = acc[k] / n;
            }
        }
    }
    Image::new(size, size, 3, data).unwrap()
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [
        rng.uniform_in(0.05, 0.95),
        rng.uniform_in(0.05, 0.95),
        rng.uniform_in(0.05, 0.95),
    ]
}

/// Occluding random discs and rectangles with power-law sizes.
pub fn dead_leaves(size: usize, seed: u64) -> Image {
    enum Shape {
        Disc {
            cy: f64,
            cx: f64,
            r: f64,
        },
        Rect {
            cy: f64,
            cx: f64,
            hy: f64,
            hx: f64,
            cos: f64,
            sin: f64,
        },
    }
    let mut rng = Rng::new(seed);
    let s = size as f64;
    let mut shapes = Vec::new();
    for _ in 0..180 {
        let r = 4.0 * (1.0 - rng.uniform() * 0.97).powf(-0.9);
        let (cy, cx) = (
            rng.uniform_in(-10.0, s + 10.0),
            rng.uniform_in(-10.0, s + 10.0),
        );
        let shape = if rng.uniform() < 0.5 {
            Shape::Disc {
                cy,
                cx,
                r: r.min(s / 3.0),
            }
        } else {
            let a = rng.uniform_in(0.0, std::f64::consts::PI);
            Shape::Rect {
                cy,
                cx,
                hy: r.min(s / 3.0),
                hx: (r * rng.uniform_in(0.3, 1.0)).min(s / 3.0),
                cos: a.cos(),
                sin: a.sin(),
            }
        };
        shapes.push((shape, random_color(&mut rng)));
    }
    let background = random_color(&mut rng);
    render(size, |u, v| {
        // Last shape drawn is on top.
        for (shape, color) in shapes.iter().rev() {
            let inside = match *shape {
                Shape::Disc { cy, cx, r } => (u - cy).powi(2) + (v - cx).powi(2) <= r * r,
                Shape::Rect {
                    cy,
                    cx,
                    hy,
                    hx,
                    cos,
                    sin,
                } => {
                    let (dy, dx) = (u - cy, v - cx);
                    let (a, b) = (dy * cos + dx * sin, -dy * sin + dx * cos);
                    a.abs() <= hy && b.abs() <= hx
                }
            };
            if inside {
                return *color;
            }
        }
        background
    })
}

/// Voronoi cells with flat colours separated by thin dark borders.
pub fn voronoi(size: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    let s = size as f64;
    let sites: Vec<(f64, f64, [f64; 3])> = (0..70)
        .map(|_| {
            (
                rng.uniform_in(0.0, s),
                rng.uniform_in(0.0, s),
                random_color(&mut rng),
            )
        })
        .collect();
    render(size, |u, v| {
        let (mut best, mut second, mut color) = (f64::MAX, f64::MAX, [0.0; 3]);
        for &(y, x, c) in &sites {
            let d = ((u - y).powi(2) + (v - x).powi(2)).sqrt();
            if d < best {
                second = best;
                best = d;
                color = c;
            } else if d < second {
                second = d;
            }
        }
        if second - best < 1.6 {
            [0.08, 0.07, 0.1]
        } else {
            color
        }
    })
}

/// Binary gratings at several orientations and periods, composited in colour.
pub fn gratings(size: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    let base = rng.uniform_in(0.0, std::f64::consts::PI);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|i| {
            let a = base + i as f64 * std::f64::consts::FRAC_PI_3 + rng.uniform_in(-0.2, 0.2);
            let period = rng.uniform_in(9.0, 22.0);
            (a.cos(), a.sin(), period, rng.uniform_in(0.0, 1.0))
        })
        .collect();
    let palette: Vec<[f64; 3]> = (0..8).map(|_| random_color(&mut rng)).collect();
    render(size, |u, v| {
        let mut idx = 0;
        for (bit, &(c, s, period, phase)) in waves.iter().enumerate() {
            let t = (u * c + v * s) / period + phase;
            if t - t.floor() < 0.5 {
                idx |= 1 << bit;
            }
        }
        palette[idx]
    })
}

/// The three high-resolution test images with their names.
pub fn texture_images() -> Vec<(&'static str, Image)> {
    vec![
        ("dead_leaves", dead_leaves(SIZE, 11)),
        ("voronoi", voronoi(SIZE, 12)),
        ("gratings", gratings(SIZE, 13)),
    ]
}

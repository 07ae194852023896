//! Procedurally rendered handwritten-style digits, used when no IDX image
//! file is supplied, and area-averaging downsampling.
//!
//! Each digit is a handful of polyline strokes in the unit square. A random
//! affine jitter (rotation, scale, shear, shift) and stroke width are drawn
//! per image, and pixels are shaded by their distance to the nearest stroke
//! with a one-pixel anti-aliased edge.

use std::f64::consts::TAU;
use std::path::Path;

use abnn::data::{load_idx, write_idx_images};
use abnn::Tensor;
use rand::Rng;

use crate::error::{CliError, Result};

/// Side length of rendered images, matching the usual digit datasets.
pub const RENDER_SIZE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Stroke {
    (0..=20)
        .map(|k| {
            let t = TAU * k as f64 / 20.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn strokes(digit: u8) -> Vec<Stroke> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.2, 0.32)],
        1 => vec![vec![(0.4, 0.28), (0.52, 0.18), (0.52, 0.82)]],
        2 => vec![vec![(0.3, 0.32), (0.38, 0.2), (0.55, 0.17), (0.68, 0.25), (0.68, 0.4), (0.3, 0.82), (0.72, 0.82)]],
        3 => vec![vec![(0.3, 0.2), (0.65, 0.2), (0.5, 0.45), (0.68, 0.58), (0.65, 0.75), (0.5, 0.83), (0.3, 0.78)]],
        4 => vec![vec![(0.6, 0.82), (0.6, 0.18), (0.28, 0.6), (0.75, 0.6)]],
        5 => vec![vec![(0.7, 0.18), (0.35, 0.18), (0.33, 0.45), (0.55, 0.42), (0.7, 0.55), (0.68, 0.72), (0.5, 0.83), (0.3, 0.78)]],
        6 => vec![vec![(0.65, 0.18), (0.42, 0.35), (0.32, 0.6), (0.38, 0.8), (0.58, 0.82), (0.68, 0.66), (0.55, 0.52), (0.35, 0.6)]],
        7 => vec![vec![(0.28, 0.18), (0.72, 0.18), (0.45, 0.82)]],
        8 => vec![ellipse(0.5, 0.32, 0.15, 0.14), ellipse(0.5, 0.66, 0.18, 0.17)],
        _ => vec![ellipse(0.5, 0.35, 0.16, 0.16), vec![(0.66, 0.35), (0.6, 0.82)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// One `RENDER_SIZE²` image of `digit` with values in `[0, 1]`.
pub fn render_digit<R: Rng + ?Sized>(digit: u8, rng: &mut R) -> Tensor<f64> {
    let n = RENDER_SIZE as f64;
    let theta: f64 = rng.random_range(-0.25..0.25);
    let scale: f64 = rng.random_range(0.85..1.1);
    let shear: f64 = rng.random_range(-0.2..0.2);
    let shift = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let width: f64 = rng.random_range(1.6..2.6);
    let (c, s) = (theta.cos(), theta.sin());
    let place = |(x, y): (f64, f64)| {
        let (u, v) = (x - 0.5 + shear * (y - 0.5), y - 0.5);
        let (u, v) = (scale * (c * u - s * v), scale * (s * u + c * v));
        ((u + 0.5 + shift.0) * n, (v + 0.5 + shift.1) * n)
    };
    let segs: Vec<((f64, f64), (f64, f64))> = strokes(digit)
        .into_iter()
        .flat_map(|st| {
            let pts: Vec<(f64, f64)> = st.into_iter().map(place).collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let mut img = Tensor::zeros(&[RENDER_SIZE, RENDER_SIZE]);
    for i in 0..RENDER_SIZE {
        for j in 0..RENDER_SIZE {
            let p = (j as f64 + 0.5, i as f64 + 0.5);
            let d = segs.iter().map(|&(a, b)| segment_distance(p, a, b)).fold(f64::INFINITY, f64::min);
            img[[i, j]] = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

/// `count` digits cycling through 0–9.
pub fn render_digits<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<Tensor<f64>> {
    (0..count).map(|k| render_digit((k % 10) as u8, rng)).collect()
}

/// Renders `count` digits into an IDX image file at `path` and reads them
/// back, so synthetic images go through the same 8-bit quantisation as real
/// ones.
pub fn synthetic_idx<R: Rng + ?Sized>(path: &Path, count: usize, rng: &mut R) -> Result<Vec<Tensor<f64>>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_idx_images(path, &render_digits(count, rng))?;
    Ok(load_idx(path)?)
}

/// Area-averaging resize to `size × size`: every output pixel is the mean of
/// the input area it covers (plain mean pooling for integer factors).
pub fn downsample(img: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let (h, w) = img.dims2("downsample")?;
    if size == 0 || size > h || size > w {
        return Err(CliError::Config(format!("cannot downsample {h}x{w} to {size}x{size}")));
    }
    // fraction of input cell `k` covered by output cell `o` along one axis
    let weights = |len: usize| -> Vec<Vec<(usize, f64)>> {
        let step = len as f64 / size as f64;
        (0..size)
            .map(|o| {
                let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
                (lo.floor() as usize..(hi.ceil() as usize).min(len))
                    .map(|k| (k, (hi.min(k as f64 + 1.0) - lo.max(k as f64)) / step))
                    .filter(|&(_, wgt)| wgt > 0.0)
                    .collect()
            })
            .collect()
    };
    let (wr, wc) = (weights(h), weights(w));
    let mut out = Tensor::zeros(&[size, size]);
    for (oi, rows) in wr.iter().enumerate() {
        for (oj, cols) in wc.iter().enumerate() {
            out[[oi, oj]] = rows
                .iter()
                .flat_map(|&(i, a)| cols.iter().map(move |&(j, b)| (i, j, a * b)))
                .map(|(i, j, wgt)| wgt * img[[i, j]])
                .sum();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn digits_have_ink_and_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 0..10 {
            let img = render_digit(d, &mut rng);
            let ink = img.data().iter().filter(|&&v| v > 0.5).count();
            assert!((30..400).contains(&ink), "digit {d}: {ink} inked pixels");
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            // borders stay blank
            assert!((0..RENDER_SIZE).all(|k| img[[0, k]] == 0.0 && img[[k, 0]] == 0.0));
        }
    }

    #[test]
    fn idx_round_trip_quantises_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.idx");
        let imgs = synthetic_idx(&path, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(imgs.len(), 4);
        for v in imgs[2].data() {
            let b = v * 255.0;
            assert!((b - b.round()).abs() < 1e-9);
        }
        let again = synthetic_idx(&path, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(imgs, again);
    }

    #[test]
    fn downsample_preserves_mean_and_pools_integer_factors() {
        let img = Tensor::from_f64(vec![4, 4], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let pooled = downsample(&img, 2).unwrap();
        assert_eq!(pooled.data(), &[2.5, 4.5, 10.5, 12.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = render_digit(5, &mut rng);
        let small = downsample(&d, 16).unwrap();
        let mean = |t: &Tensor<f64>| t.sum() / t.len() as f64;
        assert!((mean(&d) - mean(&small)).abs() < 1e-12);
    }
}

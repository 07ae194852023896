use rand::Rng;

use super::task::Task;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A masked image and its flattened regression task.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTask<T> {
    /// `[H, W]` pixel values (binarised when requested).
    pub image: Tensor<T>,
    /// Row-major; `true` marks an observed (context) pixel.
    pub mask: Vec<bool>,
    /// One row per pixel: `x ∈ [-1, 1]²`, `y` the pixel value, mask attached.
    pub task: Task<T>,
}

impl<T: Scalar> ImageTask<T> {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn context_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Location of pixel `(i, j)` with the boundary pixels at `±1`.
pub fn pixel_coordinate(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    (
        -1.0 + 2.0 * i as f64 / (h - 1) as f64,
        -1.0 + 2.0 * j as f64 / (w - 1) as f64,
    )
}

/// Unmasks each pixel independently with probability `p`.
pub fn make_image_task<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    p: f64,
    binarise: bool,
    rng: &mut R,
) -> Result<ImageTask<T>> {
    let (h, w) = image.dims2("make_image_task")?;
    if h < 2 || w < 2 {
        return Err(Error::Contract(format!(
            "image of {h}x{w} has no coordinate map; both sides must exceed 1"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("mask probability {p} outside [0, 1]")));
    }
    let image = if binarise {
        image.map(|v| if v >= T::lit(0.5) { T::one() } else { T::zero() })
    } else {
        image.clone()
    };
    let mask: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < p).collect();
    let mut xs = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        for j in 0..w {
            let (a, b) = pixel_coordinate(i, j, h, w);
            xs.push(a);
            xs.push(b);
        }
    }
    let task = Task::new(
        Tensor::from_f64(vec![h * w, 2], &xs)?,
        image.reshape(&[h * w, 1])?,
        Some(mask.clone()),
    )?;
    Ok(ImageTask { image, mask, task })
}

/// Fills masked pixels with the inverse-squared-distance weighted mean of
/// the four nearest observed pixels (grid distance, ties broken by index).
pub fn linear_interp_baseline<T: Scalar>(task: &ImageTask<T>) -> Result<Tensor<T>> {
    const K: usize = 4;
    let (h, w) = (task.height(), task.width());
    let observed: Vec<usize> = (0..h * w).filter(|&k| task.mask[k]).collect();
    if observed.is_empty() {
        return Err(Error::Data("interpolation needs at least one unmasked pixel".into()));
    }
    let src = task.image.data();
    let mut out = task.image.clone();
    for k in 0..h * w {
        if task.mask[k] {
            continue;
        }
        let (i, j) = ((k / w) as f64, (k % w) as f64);
        let mut near: Vec<(f64, usize)> = observed
            .iter()
            .map(|&o| {
                let (oi, oj) = ((o / w) as f64, (o % w) as f64);
                ((oi - i).powi(2) + (oj - j).powi(2), o)
            })
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut num, mut den) = (0.0, 0.0);
        for &(d2, o) in near.iter().take(K) {
            let wt = 1.0 / d2;
            num += wt * src[o].as_f64();
            den += wt;
        }
        out.data_mut()[k] = T::lit(num / den);
    }
    Ok(out)
}

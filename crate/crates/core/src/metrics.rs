//! Pose and image similarity metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, PlanePose, GRID_HALF_EXTENT};
use crate::volume::Image;

/// SSIM window side (pixels, stride 1).
pub const SSIM_WINDOW: usize = 8;
/// `(0.01·L)²` with dynamic range `L = 1`.
pub const SSIM_C1: f64 = 0.01 * 0.01;
/// `(0.03·L)²` with dynamic range `L = 1`.
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean distance between corresponding reference points; divided by the
/// grid half-extent when `normalize` is set.
pub fn euclidean_distance(pred: &PlanePose, truth: &PlanePose, normalize: bool) -> f64 {
    let (a, b) = (pred.points(), truth.points());
    let d = (0..3)
        .map(|k| geom::norm(geom::sub(a[k], b[k])))
        .sum::<f64>()
        / 3.0;
    if normalize {
        d / GRID_HALF_EXTENT
    } else {
        d
    }
}

/// Angle in `[0, π]` between the oriented plane normals. Evaluated as
/// `atan2(|a×b|, a·b)`, which equals `arccos(a·b)` for unit vectors but stays
/// accurate near 0 and π, so identical planes give exactly 0.
pub fn plane_angle(pred: &PlanePose, truth: &PlanePose) -> Result<f64> {
    let (a, b) = (geom::plane_normal(pred)?, geom::plane_normal(truth)?);
    Ok(geom::norm(geom::cross(a, b)).atan2(geom::dot(a, b)))
}

/// Mean squared difference over the 9 coordinates, in voxel².
pub fn mse_points(pred: &PlanePose, truth: &PlanePose) -> f64 {
    let (a, b) = (pred.to_array(), truth.to_array());
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / 9.0
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "images {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Mean, variance and covariance of two equal-length slices (population).
fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (ma, mb, va / n, vb / n, cov / n)
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Global normalized cross-correlation; 0 when either image is constant.
pub fn ncc(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    if is_constant(&a.data) || is_constant(&b.data) {
        return Ok(0.0);
    }
    let (_, _, va, vb, cov) = moments(&a.data, &b.data);
    let denom = (va * vb).sqrt();
    Ok((cov / denom).clamp(-1.0, 1.0))
}

/// Mean SSIM over all 8x8 windows at stride 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let w = SSIM_WINDOW;
    if a.height < w || a.width < w {
        return Err(Error::InvalidInput(format!(
            "ssim needs images of at least {w}x{w}, got {}x{}",
            a.height, a.width
        )));
    }
    let mut wa = vec![0.0; w * w];
    let mut wb = vec![0.0; w * w];
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=a.height - w {
        for c in 0..=a.width - w {
            for i in 0..w {
                let row = (r + i) * a.width + c;
                wa[i * w..(i + 1) * w].copy_from_slice(&a.data[row..row + w]);
                wb[i * w..(i + 1) * w].copy_from_slice(&b.data[row..row + w]);
            }
            let (ma, mb, va, vb, cov) = moments(&wa, &wb);
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// All five metrics for one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub ed: f64,
    pub ed_norm: f64,
    pub pa: f64,
    pub mse: f64,
    pub ncc: f64,
    pub ssim: f64,
}

/// Pose metrics between `pred` and `truth`, image metrics between the
/// images sampled at each.
pub fn slice_metrics(
    pred: &PlanePose,
    truth: &PlanePose,
    pred_image: &Image,
    truth_image: &Image,
) -> Result<SliceMetrics> {
    Ok(SliceMetrics {
        ed: euclidean_distance(pred, truth, false),
        ed_norm: euclidean_distance(pred, truth, true),
        pa: plane_angle(pred, truth)?,
        mse: mse_points(pred, truth),
        ncc: ncc(pred_image, truth_image)?,
        ssim: ssim(pred_image, truth_image)?,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Image::new(h, w, data).unwrap()
    }

    fn textured() -> Image {
        img(12, 10, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0)
    }

    #[test]
    fn ed_examples() {
        let p = PlanePose::canonical();
        assert_eq!(euclidean_distance(&p, &p, false), 0.0);
        let mut q = p;
        q.br[0] += 3.0;
        q.br[1] += 4.0;
        assert_eq!(euclidean_distance(&q, &p, false), 5.0 / 3.0);
        assert_eq!(euclidean_distance(&q, &p, true), 5.0 / 3.0 / 80.0);
    }

    #[test]
    fn pa_of_quarter_turn_about_in_plane_axis() {
        let p = PlanePose::canonical();
        // Rotate by π/2 about the x axis: y -> z.
        let q = PlanePose {
            c: [0.0; 3],
            br: [80.0, 0.0, -80.0],
            bl: [-80.0, 0.0, -80.0],
        };
        assert!((plane_angle(&q, &p).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(plane_angle(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn mse_unit_offset() {
        let p = PlanePose::canonical();
        let mut q = p;
        q.c[2] += 1.0;
        assert_eq!(mse_points(&q, &p), 1.0 / 9.0);
    }

    #[test]
    fn ncc_examples() {
        let a = textured();
        assert_eq!(ncc(&a, &a).unwrap(), 1.0);
        let affine = img(12, 10, |r, c| 2.0 * a.at(r, c) + 0.1);
        assert!((ncc(&a, &affine).unwrap() - 1.0).abs() < 1e-12);
        let neg = img(12, 10, |r, c| -a.at(r, c));
        assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = img(12, 10, |_, _| 0.4);
        assert_eq!(ncc(&a, &flat).unwrap(), 0.0);
    }

    #[test]
    fn ssim_examples() {
        let a = textured();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let flat = img(9, 9, |_, _| 0.3);
        assert_eq!(ssim(&flat, &flat).unwrap(), 1.0);
        assert!(ssim(&img(7, 9, |_, _| 0.0), &img(7, 9, |_, _| 0.0)).is_err());
        assert!(ssim(&a, &flat).is_err());
    }

    #[test]
    fn mean_std_of_constant_has_zero_spread() {
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }
}

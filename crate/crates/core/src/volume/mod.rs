//! Volumes, trilinear slice extraction and the augmentation pipeline that
//! turns a volume into self-labelled training slices.

mod augment;
pub mod io;
mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{apply_transform, PlanePose, SimTransform, Vec3, GRID_HALF_EXTENT};

pub use augment::{
    apply_intensity, augment_intensity, make_batch, random_transform, AugmentConfig,
};
pub use phantom::generate_phantom;

/// Isotropic voxel size assigned to generated and loaded volumes.
pub const DEFAULT_SPACING_MM: f64 = 0.6;

/// Dense scalar grid stored z-major: index `(z * H + y) * W + x`.
///
/// Points are addressed in voxel units relative to the volume midpoint, so
/// `(0, 0, 0)` sits at index `((D-1)/2, (H-1)/2, (W-1)/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: f64,
    data: Vec<f64>,
}

/// A 2D grayscale image, row-major, row 0 at the top (`+v` side of the grid).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Augmentation parameters that produced a [`SliceImage`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub transform: SimTransform,
    pub contrast: f64,
    pub brightness: f64,
}

/// A sampled slice together with its ground-truth pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub image: Image,
    pub pose: PlanePose,
    pub aug: AugRecord,
}

/// The square sampling grid `[-h, h]²` and its pixel resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub half_extent: f64,
    pub resolution: usize,
}

impl Default for SliceGrid {
    fn default() -> Self {
        Self {
            half_extent: GRID_HALF_EXTENT,
            resolution: 160,
        }
    }
}

impl SliceGrid {
    pub fn new(half_extent: f64, resolution: usize) -> Result<Self> {
        let g = Self {
            half_extent,
            resolution,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::InvalidConfig(format!(
                "slice resolution {} must be >= 2",
                self.resolution
            )));
        }
        if !(self.half_extent > 0.0) || !self.half_extent.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid half-extent {} must be positive",
                self.half_extent
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        2.0 * self.half_extent / self.resolution as f64
    }

    /// Grid coordinate of pixel column `col` (pixel centers).
    pub fn u(&self, col: usize) -> f64 {
        -self.half_extent + (col as f64 + 0.5) * self.step()
    }

    /// Grid coordinate of pixel row `row`; rows run from `+h` down to `-h`.
    pub fn v(&self, row: usize) -> f64 {
        self.half_extent - (row as f64 + 0.5) * self.step()
    }

    pub fn canonical(&self) -> PlanePose {
        PlanePose::canonical_with(self.half_extent)
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "volume dims {dims:?} must be > 0"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "volume contains non-finite voxels".into(),
            ));
        }
        Ok(Self {
            dims,
            spacing: DEFAULT_SPACING_MM,
            data,
        })
    }

    /// `(D, H, W)`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn voxel(&self, z: usize, y: usize, x: usize) -> f64 {
        let [_, h, w] = self.dims;
        self.data[(z * h + y) * w + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Trilinear interpolation at a volume-centered point; zero outside.
    pub fn sample(&self, p: Vec3) -> f64 {
        let [d, h, w] = self.dims;
        let fx = p[0] + (w as f64 - 1.0) * 0.5;
        let fy = p[1] + (h as f64 - 1.0) * 0.5;
        let fz = p[2] + (d as f64 - 1.0) * 0.5;
        // Negated comparisons also reject NaN.
        if !(fx >= 0.0 && fx <= (w - 1) as f64)
            || !(fy >= 0.0 && fy <= (h - 1) as f64)
            || !(fz >= 0.0 && fz <= (d - 1) as f64)
        {
            return 0.0;
        }
        let (x0, y0, z0) = (fx as usize, fy as usize, fz as usize);
        let (x1, y1, z1) = (
            (x0 + 1).min(w - 1),
            (y0 + 1).min(h - 1),
            (z0 + 1).min(d - 1),
        );
        let (tx, ty, tz) = (fx - x0 as f64, fy - y0 as f64, fz - z0 as f64);

        let at = |z: usize, y: usize, x: usize| self.data[(z * h + y) * w + x];
        let c00 = at(z0, y0, x0) * (1.0 - tx) + at(z0, y0, x1) * tx;
        let c10 = at(z0, y1, x0) * (1.0 - tx) + at(z0, y1, x1) * tx;
        let c01 = at(z1, y0, x0) * (1.0 - tx) + at(z1, y0, x1) * tx;
        let c11 = at(z1, y1, x0) * (1.0 - tx) + at(z1, y1, x1) * tx;
        let c0 = c00 * (1.0 - ty) + c10 * ty;
        let c1 = c01 * (1.0 - ty) + c11 * ty;
        c0 * (1.0 - tz) + c1 * tz
    }
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn nonzero_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != 0.0).count() as f64 / self.data.len() as f64
    }
}

/// Samples the grid lifted into the volume by `x`; the returned pose is
/// `apply_transform(x, canonical)`.
pub fn sample_slice(v: &Volume, x: &SimTransform, grid: SliceGrid) -> Result<SliceImage> {
    grid.validate()?;
    let pose = apply_transform(x, &grid.canonical())?;
    let rot = x.rotation.to_matrix()?;
    let n = grid.resolution;
    let mut data = Vec::with_capacity(n * n);
    for row in 0..n {
        let vv = grid.v(row);
        for col in 0..n {
            let p = x.map_point(&rot, [grid.u(col), vv, 0.0]);
            data.push(v.sample(p));
        }
    }
    Ok(SliceImage {
        image: Image {
            height: n,
            width: n,
            data,
        },
        pose,
        aug: AugRecord {
            transform: *x,
            contrast: 1.0,
            brightness: 0.0,
        },
    })
}

/// Samples the plane spanned by an arbitrary pose (used to render images at
/// predicted poses, which need not be rigid).
pub fn sample_pose(v: &Volume, pose: &PlanePose, grid: SliceGrid) -> Result<Image> {
    grid.validate()?;
    if !pose.is_finite() {
        return Err(Error::InvalidInput(
            "pose has non-finite coordinates".into(),
        ));
    }
    let (o, ex, ey) = pose.frame(grid.half_extent);
    let n = grid.resolution;
    let mut data = Vec::with_capacity(n * n);
    for row in 0..n {
        let vv = grid.v(row);
        for col in 0..n {
            let u = grid.u(col);
            let p = [
                o[0] + u * ex[0] + vv * ey[0],
                o[1] + u * ex[1] + vv * ey[1],
                o[2] + u * ex[2] + vv * ey[2],
            ];
            data.push(v.sample(p));
        }
    }
    Ok(Image {
        height: n,
        width: n,
        data,
    })
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_slice, SliceGrid, SliceImage, Volume};
use crate::error::{Error, Result};
use crate::geom::{EulerAngles, RotationParam, SimTransform};

/// Ranges for the random pose and intensity augmentation. Angles are in
/// radians; rotations about x and y share a symmetric range, as does z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rot_xy: f64,
    pub rot_z: f64,
    pub trans_z: (f64, f64),
    pub scale: (f64, f64),
    pub contrast: (f64, f64),
    pub brightness: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rot_xy: 20f64.to_radians(),
            rot_z: 90f64.to_radians(),
            trans_z: (-40.0, 60.0),
            scale: (0.75, 1.8),
            contrast: (0.8, 1.2),
            brightness: (-0.1, 0.1),
        }
    }
}

impl AugmentConfig {
    /// Every range collapsed: identity pose, untouched intensities.
    pub fn none() -> Self {
        Self {
            rot_xy: 0.0,
            rot_z: 0.0,
            trans_z: (0.0, 0.0),
            scale: (1.0, 1.0),
            contrast: (1.0, 1.0),
            brightness: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} range ({lo}, {hi}) is not ordered"
                )))
            }
        };
        if !(self.rot_xy >= 0.0 && self.rot_z >= 0.0) {
            return Err(Error::InvalidConfig("rotation ranges must be >= 0".into()));
        }
        ordered("trans_z", self.trans_z)?;
        ordered("scale", self.scale)?;
        ordered("contrast", self.contrast)?;
        ordered("brightness", self.brightness)?;
        if !(self.scale.0 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scale lower bound {} must be > 0",
                self.scale.0
            )));
        }
        Ok(())
    }
}

/// Uniform draw on `[lo, hi]`; returns `lo` exactly for an empty range.
fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws `(rx, ry, rz, t_z, s)` uniformly; in-plane translation stays zero.
pub fn random_transform<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> SimTransform {
    let rx = uniform(rng, -cfg.rot_xy, cfg.rot_xy);
    let ry = uniform(rng, -cfg.rot_xy, cfg.rot_xy);
    let rz = uniform(rng, -cfg.rot_z, cfg.rot_z);
    let tz = uniform(rng, cfg.trans_z.0, cfg.trans_z.1);
    let s = uniform(rng, cfg.scale.0, cfg.scale.1);
    SimTransform {
        rotation: RotationParam::Euler(EulerAngles { rx, ry, rz }),
        t: [0.0, 0.0, tz],
        s,
    }
}

/// Pixelwise `a·x + b` clamped to `[0, 1]`; the pose is untouched.
pub fn apply_intensity(s: &SliceImage, contrast: f64, brightness: f64) -> SliceImage {
    let mut out = s.clone();
    for v in out.image.data.iter_mut() {
        *v = (contrast * *v + brightness).clamp(0.0, 1.0);
    }
    out.aug.contrast = contrast;
    out.aug.brightness = brightness;
    out
}

pub fn augment_intensity<R: Rng + ?Sized>(
    s: &SliceImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> SliceImage {
    let a = uniform(rng, cfg.contrast.0, cfg.contrast.1);
    let b = uniform(rng, cfg.brightness.0, cfg.brightness.1);
    apply_intensity(s, a, b)
}

/// `n` independent draws of pose → slice → intensity augmentation.
pub fn make_batch<R: Rng + ?Sized>(
    v: &Volume,
    n: usize,
    cfg: &AugmentConfig,
    grid: SliceGrid,
    rng: &mut R,
) -> Result<Vec<SliceImage>> {
    if n == 0 {
        return Err(Error::InvalidInput("batch size must be >= 1".into()));
    }
    cfg.validate()?;
    (0..n)
        .map(|_| {
            let x = random_transform(rng, cfg);
            let slice = sample_slice(v, &x, grid)?;
            Ok(augment_intensity(&slice, cfg, rng))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geom::{apply_transform, PlanePose};
    use crate::volume::Image;

    #[test]
    fn zero_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_transform(&mut rng, &AugmentConfig::none());
        assert_eq!(x.t, [0.0; 3]);
        assert_eq!(x.s, 1.0);
        let pose = apply_transform(&x, &PlanePose::canonical()).unwrap();
        assert_eq!(pose, PlanePose::canonical());
    }

    #[test]
    fn draws_respect_bounds() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let x = random_transform(&mut rng, &cfg);
            let RotationParam::Euler(e) = x.rotation else {
                unreachable!()
            };
            assert!(e.rx.abs() <= cfg.rot_xy && e.ry.abs() <= cfg.rot_xy);
            assert!(e.rz.abs() <= cfg.rot_z);
            assert!((cfg.trans_z.0..=cfg.trans_z.1).contains(&x.t[2]));
            assert!((cfg.scale.0..=cfg.scale.1).contains(&x.s));
            assert_eq!((x.t[0], x.t[1]), (0.0, 0.0));
        }
    }

    fn slice_of(data: Vec<f64>) -> SliceImage {
        SliceImage {
            image: Image::new(1, data.len(), data).unwrap(),
            pose: PlanePose::canonical(),
            aug: crate::volume::AugRecord {
                transform: SimTransform::identity(),
                contrast: 1.0,
                brightness: 0.0,
            },
        }
    }

    #[test]
    fn intensity_examples() {
        let s = slice_of(vec![0.0, 0.25, 0.5, 1.0]);
        assert_eq!(apply_intensity(&s, 1.0, 0.0).image, s.image);
        let flat = apply_intensity(&s, 0.0, 0.3);
        assert!(flat.image.data.iter().all(|&v| v == 0.3));
        let over = apply_intensity(&s, 0.0, 1.7);
        assert!(over.image.data.iter().all(|&v| v == 1.0));
        let fixed = apply_intensity(&s, 1.5, -0.2);
        for (got, want) in fixed.image.data.iter().zip([0.0, 0.175, 0.55, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(fixed.pose, s.pose);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = AugmentConfig {
            scale: (0.0, 1.0),
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            trans_z: (5.0, -5.0),
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

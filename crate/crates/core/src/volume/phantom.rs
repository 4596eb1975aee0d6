use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Volume;
use crate::error::{Error, Result};

/// `(center, radii, intensity)` in units of half the smallest volume side.
/// Shared by every seed so that all phantoms live in one aligned atlas
/// space; seeds only jitter the template and the texture.
const STRUCTURES: [([f64; 3], [f64; 3], f64); 8] = [
    ([0.00, 0.05, 0.00], [0.025, 0.62, 0.50], 0.62),
    ([-0.22, 0.18, 0.12], [0.10, 0.32, 0.14], 0.08),
    ([0.24, 0.10, 0.02], [0.12, 0.24, 0.10], 0.15),
    ([0.12, -0.34, -0.18], [0.22, 0.12, 0.16], 0.78),
    ([-0.05, -0.58, -0.32], [0.30, 0.14, 0.18], 0.55),
    ([-0.12, 0.52, 0.30], [0.16, 0.10, 0.14], 0.22),
    ([0.40, -0.05, 0.35], [0.10, 0.10, 0.10], 0.95),
    ([-0.45, -0.20, -0.30], [0.12, 0.18, 0.08], 0.70),
];

const HEAD_RADII: [f64; 3] = [0.88, 0.80, 0.72];
const SKULL_INNER: f64 = 0.93;
const SKULL_VALUE: f64 = 0.85;
const TISSUE_VALUE: f64 = 0.40;
const WAVES: usize = 8;
const WAVE_AMPLITUDE: f64 = 0.03;
const MIN_INSIDE: f64 = 0.02;

struct Ellipsoid {
    center: [f64; 3],
    inv_radii: [f64; 3],
    value: f64,
}

impl Ellipsoid {
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| {
                let d = (p[i] - self.center[i]) * self.inv_radii[i];
                d * d
            })
            .sum()
    }
}

/// Deterministic head-like phantom: a skull shell around soft tissue with
/// eight internal structures and a seeded band-limited texture. Intensities
/// lie in `[0, 1]`; everything outside the head is exactly zero.
pub fn generate_phantom(seed: u64, dims: [usize; 3]) -> Result<Volume> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::InvalidConfig(format!(
            "phantom dims {dims:?} must be >= 16 per axis"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();

    let head_radii = HEAD_RADII.map(|r| r * jitter(0.97, 1.03));
    let head = Ellipsoid {
        center: [0.0; 3],
        inv_radii: head_radii.map(|r| 1.0 / r),
        value: TISSUE_VALUE,
    };
    let structures: Vec<Ellipsoid> = STRUCTURES
        .iter()
        .map(|&(c, r, v)| Ellipsoid {
            center: c.map(|ci| ci + jitter(-0.02, 0.02)),
            inv_radii: r.map(|ri| 1.0 / (ri * jitter(0.94, 1.06))),
            value: v + jitter(-0.04, 0.04),
        })
        .collect();

    // Plane waves cos(2π k·p + φ), evaluated separably per axis.
    let waves: Vec<([f64; 3], f64)> = (0..WAVES)
        .map(|_| {
            let k = [jitter(-4.0, 4.0), jitter(-4.0, 4.0), jitter(-4.0, 4.0)];
            (k, jitter(0.0, TAU))
        })
        .collect();

    let [d, h, w] = dims;
    let unit = (d.min(h).min(w) as f64) * 0.5;
    let coord = |i: usize, n: usize| (i as f64 - (n as f64 - 1.0) * 0.5) / unit;
    let table = |axis: usize, n: usize| -> Vec<Vec<(f64, f64)>> {
        waves
            .iter()
            .map(|(k, phase)| {
                (0..n)
                    .map(|i| {
                        let mut a = TAU * k[axis] * coord(i, n);
                        if axis == 0 {
                            a += phase;
                        }
                        (a.cos(), a.sin())
                    })
                    .collect()
            })
            .collect()
    };
    let (tx, ty, tz) = (table(0, w), table(1, h), table(2, d));

    let mut data = vec![0.0; d * h * w];
    let mut yz = [(0.0, 0.0); WAVES];
    for z in 0..d {
        let pz = coord(z, d);
        for y in 0..h {
            let py = coord(y, h);
            for (j, slot) in yz.iter_mut().enumerate() {
                let (a, b) = (ty[j][y], tz[j][z]);
                *slot = (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
            }
            let row = &mut data[(z * h + y) * w..(z * h + y + 1) * w];
            for (x, out) in row.iter_mut().enumerate() {
                let p = [coord(x, w), py, pz];
                let rho2 = head.rho2(p);
                if rho2 > 1.0 {
                    continue;
                }
                let mut base = if rho2 >= SKULL_INNER * SKULL_INNER {
                    SKULL_VALUE
                } else {
                    TISSUE_VALUE
                };
                if rho2 < SKULL_INNER * SKULL_INNER {
                    for s in &structures {
                        if s.rho2(p) <= 1.0 {
                            base = s.value;
                        }
                    }
                }
                let mut texture = 0.0;
                for (j, &(c, s)) in yz.iter().enumerate() {
                    let a = tx[j][x];
                    texture += a.0 * c - a.1 * s;
                }
                *out = (base + WAVE_AMPLITUDE * texture).clamp(MIN_INSIDE, 1.0);
            }
        }
    }
    Volume::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(3, [24, 20, 16]).unwrap();
        let b = generate_phantom(3, [24, 20, 16]).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(4, [24, 20, 16]).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn intensities_in_unit_range_and_zero_outside() {
        let v = generate_phantom(1, [32, 32, 32]).unwrap();
        assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(v.voxel(0, 0, 0), 0.0);
        assert!(v.voxel(16, 16, 16) > 0.0);
    }

    #[test]
    fn rejects_small_dims() {
        assert!(matches!(
            generate_phantom(0, [15, 32, 32]),
            Err(Error::InvalidConfig(_))
        ));
    }
}

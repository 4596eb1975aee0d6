//! Fusion of several pose predictions into one Gaussian: the QAERTS head
//! average, deep-ensemble mixtures and MC-dropout passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PlanePose;
use crate::net::{HeadKind, Model};
use crate::volume::Image;

/// One head's pose (voxels) and coordinate-wise variance (voxel²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPrediction {
    pub kind: HeadKind,
    pub pose: PlanePose,
    pub variance: Option<[f64; 9]>,
}

/// Final prediction for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: PlanePose,
    pub variance: Option<[f64; 9]>,
    pub heads: Vec<HeadPrediction>,
}

/// Heads plus their coordinate-wise averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub heads: Vec<HeadPrediction>,
    pub fused_mean: PlanePose,
    pub fused_var: [f64; 9],
}

/// Elementwise arithmetic mean: sequential sum, then one division. Training
/// and inference both average through this function.
pub fn mean_elementwise(parts: &[&[f64]]) -> Vec<f64> {
    let n = parts.len() as f64;
    let mut acc = parts[0].to_vec();
    for p in &parts[1..] {
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= n;
    }
    acc
}

/// Averages head poses and head variances coordinate-wise.
pub fn fuse_qaerts(heads: &[HeadPrediction]) -> Result<EnsemblePrediction> {
    if heads.is_empty() {
        return Err(Error::InvalidInput("fusion needs at least one head".into()));
    }
    let poses: Vec<[f64; 9]> = heads.iter().map(|h| h.pose.to_array()).collect();
    let vars = heads
        .iter()
        .map(|h| {
            h.variance.ok_or_else(|| Error::Head {
                head: h.kind.name(),
                source: Box::new(Error::InvalidVariance("head has no variance output".into())),
            })
        })
        .collect::<Result<Vec<[f64; 9]>>>()?;
    let p: Vec<&[f64]> = poses.iter().map(|x| x.as_slice()).collect();
    let v: Vec<&[f64]> = vars.iter().map(|x| x.as_slice()).collect();
    let mean: [f64; 9] = mean_elementwise(&p).try_into().unwrap();
    let var: [f64; 9] = mean_elementwise(&v).try_into().unwrap();
    Ok(EnsemblePrediction {
        heads: heads.to_vec(),
        fused_mean: PlanePose::from_array(&mean),
        fused_var: var,
    })
}

/// Moments of an equally weighted Gaussian mixture.
///
/// `μ* = mean μ_m` and `σ*² = mean(σ_m² + μ_m²) − μ*²`, evaluated in the
/// equivalent form `mean σ_m² + mean (μ_m − μ*)²`, which is never negative
/// and leaves a single member unchanged.
pub fn mixture_moments(members: &[([f64; 9], [f64; 9])]) -> Result<([f64; 9], [f64; 9])> {
    if members.is_empty() {
        return Err(Error::InvalidInput("mixture of zero members".into()));
    }
    let mus: Vec<&[f64]> = members.iter().map(|m| m.0.as_slice()).collect();
    let vars: Vec<&[f64]> = members.iter().map(|m| m.1.as_slice()).collect();
    let mu: [f64; 9] = mean_elementwise(&mus).try_into().unwrap();
    let mean_var = mean_elementwise(&vars);
    let spreads: Vec<[f64; 9]> = members
        .iter()
        .map(|m| std::array::from_fn(|i| (m.0[i] - mu[i]) * (m.0[i] - mu[i])))
        .collect();
    let sp: Vec<&[f64]> = spreads.iter().map(|x| x.as_slice()).collect();
    let spread = mean_elementwise(&sp);
    let var = std::array::from_fn(|i| (mean_var[i] + spread[i]).max(0.0));
    Ok((mu, var))
}

/// Deep-ensemble inference: one deterministic pass per member, mixed.
pub fn de_predict(models: &[Model], images: &[&Image]) -> Result<Vec<Prediction>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidInput("ensemble has no members".into()))?;
    for (k, m) in models.iter().enumerate() {
        if m.method() != first.method() || m.config() != first.config() {
            return Err(Error::EnsembleMismatch(format!(
                "member {k} ({}) differs from member 0 ({})",
                m.method(),
                first.method()
            )));
        }
    }
    let runs = models
        .iter()
        .map(|m| m.predict(images))
        .collect::<Result<Vec<_>>>()?;
    combine(runs, images.len(), true)
}

/// MC-dropout inference: `passes` stochastic passes per image. Every image
/// restarts the dropout stream from `seed`, so a prediction depends only on
/// the image itself. The reported variance is the spread of the pass means.
pub fn mcd_predict(
    model: &Model,
    images: &[&Image],
    passes: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let rate = model.config().dropout;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "mc dropout needs a rate in (0, 1), model has {rate}"
        )));
    }
    if passes == 0 {
        return Err(Error::InvalidConfig(
            "mc dropout needs at least one pass".into(),
        ));
    }
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let runs = (0..passes)
            .map(|_| model.predict_with(&[*img], Some(&mut rng)))
            .collect::<Result<Vec<_>>>()?;
        out.extend(combine(runs, 1, false)?);
    }
    Ok(out)
}

/// Mixes per-run predictions image by image. Member variances are included
/// only when `with_member_var` is set.
fn combine(runs: Vec<Vec<Prediction>>, n: usize, with_member_var: bool) -> Result<Vec<Prediction>> {
    (0..n)
        .map(|i| {
            let members = runs
                .iter()
                .map(|run| {
                    let p = &run[i];
                    let var = match (with_member_var, p.variance) {
                        (false, _) => [0.0; 9],
                        (true, Some(v)) => v,
                        (true, None) => {
                            return Err(Error::InvalidVariance(
                                "ensemble member has no variance".into(),
                            ))
                        }
                    };
                    Ok((p.mean.to_array(), var))
                })
                .collect::<Result<Vec<_>>>()?;
            let (mu, var) = mixture_moments(&members)?;
            Ok(Prediction {
                mean: PlanePose::from_array(&mu),
                variance: Some(var),
                heads: runs
                    .iter()
                    .flat_map(|run| run[i].heads.iter().copied())
                    .collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(kind: HeadKind, base: f64, var: f64) -> HeadPrediction {
        HeadPrediction {
            kind,
            pose: PlanePose::from_array(&[base; 9]),
            variance: Some([var; 9]),
        }
    }

    #[test]
    fn identical_heads_fuse_to_themselves() {
        let h = HeadPrediction {
            kind: HeadKind::Direct,
            pose: PlanePose::canonical(),
            variance: Some([0.3, 1.0, 2.0, 0.1, 5.0, 7.0, 0.2, 0.4, 9.0]),
        };
        let heads = vec![h; 5];
        let f = fuse_qaerts(&heads).unwrap();
        assert_eq!(f.fused_mean, h.pose);
        assert_eq!(f.fused_var, h.variance.unwrap());
    }

    #[test]
    fn poses_zero_to_four_average_to_two() {
        let heads: Vec<_> = HeadKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| head(k, i as f64, 1.0))
            .collect();
        let f = fuse_qaerts(&heads).unwrap();
        assert_eq!(f.fused_mean.to_array(), [2.0; 9]);
    }

    #[test]
    fn single_member_mixture_is_unchanged() {
        let mu = [1.5, -2.0, 3.25, 0.0, 7.0, -0.5, 80.0, -80.0, 0.1];
        let var = [0.2, 1.0, 3.0, 0.0, 2.5, 9.0, 0.01, 4.0, 6.0];
        assert_eq!(mixture_moments(&[(mu, var)]).unwrap(), (mu, var));
    }

    #[test]
    fn symmetric_point_masses_have_unit_variance() {
        let (mu, var) = mixture_moments(&[([1.0; 9], [0.0; 9]), ([-1.0; 9], [0.0; 9])]).unwrap();
        assert_eq!(mu, [0.0; 9]);
        assert_eq!(var, [1.0; 9]);
    }

    #[test]
    fn fusion_requires_variances() {
        let mut h = head(HeadKind::Euler, 0.0, 1.0);
        h.variance = None;
        assert!(matches!(
            fuse_qaerts(&[h]),
            Err(Error::Head { head: "euler", .. })
        ));
    }
}

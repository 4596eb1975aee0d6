//! Property-based invariants for geometry, metrics and fusion.

use planepose_core::ensemble::{fuse_qaerts, mixture_moments};
use planepose_core::geom::{
    apply_transform, axisangle_to_matrix, euler_to_matrix, norm, orthonormalize, plane_normal,
    quat_to_matrix, sub, AxisAngle, EulerAngles, Quaternion, RotationParam, SimTransform,
};
use planepose_core::metrics::{euclidean_distance, mse_points, ncc, plane_angle, ssim};
use planepose_core::volume::Image;
use planepose_core::{HeadKind, HeadPrediction, PlanePose};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn quaternion() -> impl Strategy<Value = Quaternion> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("usable norm", |q| {
            q.iter().map(|x| x * x).sum::<f64>() > 1e-4
        })
        .prop_map(|[w, x, y, z]| Quaternion { w, x, y, z })
}

fn euler() -> impl Strategy<Value = EulerAngles> {
    let a = -std::f64::consts::PI..std::f64::consts::PI;
    (a.clone(), a.clone(), a).prop_map(|(rx, ry, rz)| EulerAngles { rx, ry, rz })
}

fn transform() -> impl Strategy<Value = SimTransform> {
    (euler(), prop::array::uniform3(-50.0f64..50.0), 0.5f64..2.0).prop_map(|(e, t, s)| {
        SimTransform {
            rotation: RotationParam::Euler(e),
            t,
            s,
        }
    })
}

fn pose() -> impl Strategy<Value = PlanePose> {
    transform().prop_map(|x| apply_transform(&x, &PlanePose::canonical()).unwrap())
}

fn image() -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, 12 * 12).prop_map(|d| Image::new(12, 12, d).unwrap())
}

proptest! {
    #[test]
    fn quaternion_sign_is_irrelevant(q in quaternion()) {
        let neg = Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        let (a, b) = (quat_to_matrix(q).unwrap(), quat_to_matrix(neg).unwrap());
        prop_assert!(a.frobenius_distance(&b) < 1e-12);
        prop_assert!(a.orthonormality_error() < TOL);
        prop_assert!((a.determinant() - 1.0).abs() < TOL);
    }

    #[test]
    fn every_parameterization_yields_a_rotation(
        e in euler(),
        r in prop::array::uniform3(-2.0f64..2.0),
        raw in prop::array::uniform9(-1.0f64..1.0),
    ) {
        let mut mats = vec![euler_to_matrix(e).unwrap(), axisangle_to_matrix(AxisAngle { r }).unwrap()];
        if let Ok(m) = orthonormalize(&raw) {
            mats.push(m);
        }
        for m in mats {
            prop_assert!(m.orthonormality_error() < TOL);
            prop_assert!((m.determinant() - 1.0).abs() < TOL);
        }
    }

    #[test]
    fn orthonormalize_is_idempotent(raw in prop::array::uniform9(-1.0f64..1.0)) {
        if let Ok(m) = orthonormalize(&raw) {
            let again = orthonormalize(&m.to_raw9()).unwrap();
            prop_assert!(m.frobenius_distance(&again) < TOL);
        }
    }

    #[test]
    fn transform_scales_distances_by_s(x in transform()) {
        let c = PlanePose::canonical();
        let p = apply_transform(&x, &c).unwrap();
        let (a, b) = (c.points(), p.points());
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let before = norm(sub(a[i], a[j]));
            let after = norm(sub(b[i], b[j]));
            prop_assert!((after - x.s * before).abs() < TOL * before.max(1.0));
        }
    }

    #[test]
    fn normal_ignores_scale_and_translation(p in pose(), s in 0.1f64..10.0, t in prop::array::uniform3(-100.0f64..100.0)) {
        let moved = PlanePose::from_array(&std::array::from_fn(|i| s * p.to_array()[i] + t[i % 3]));
        let (a, b) = (plane_normal(&p).unwrap(), plane_normal(&moved).unwrap());
        prop_assert!(norm(sub(a, b)) < TOL);
    }

    #[test]
    fn pose_metrics_are_symmetric_and_zero_on_the_diagonal(a in pose(), b in pose()) {
        prop_assert_eq!(euclidean_distance(&a, &b, false), euclidean_distance(&b, &a, false));
        prop_assert_eq!(mse_points(&a, &b), mse_points(&b, &a));
        prop_assert!((plane_angle(&a, &b).unwrap() - plane_angle(&b, &a).unwrap()).abs() < 1e-12);
        let pa = plane_angle(&a, &b).unwrap();
        prop_assert!((0.0..=std::f64::consts::PI).contains(&pa));
        prop_assert_eq!(euclidean_distance(&a, &a, false), 0.0);
        prop_assert_eq!(plane_angle(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn image_metrics_are_symmetric_and_bounded(a in image(), b in image()) {
        let (n1, n2) = (ncc(&a, &b).unwrap(), ncc(&b, &a).unwrap());
        prop_assert!((n1 - n2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&n1));
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s1));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ncc_ignores_positive_affine_maps(a in image(), k in 0.1f64..5.0, c in -1.0f64..1.0) {
        let b = Image::new(12, 12, a.data.iter().map(|x| k * x + c).collect()).unwrap();
        prop_assert!((ncc(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn head_fusion_is_permutation_invariant(
        poses in prop::collection::vec(prop::array::uniform9(-100.0f64..100.0), 5),
        vars in prop::collection::vec(prop::array::uniform9(0.01f64..100.0), 5),
        rot in 0usize..5,
    ) {
        let heads: Vec<HeadPrediction> = HeadKind::ALL
            .iter()
            .zip(poses.iter().zip(&vars))
            .map(|(&kind, (p, v))| HeadPrediction { kind, pose: PlanePose::from_array(p), variance: Some(*v) })
            .collect();
        let mut turned = heads.clone();
        turned.rotate_left(rot);
        let (f, g) = (fuse_qaerts(&heads).unwrap(), fuse_qaerts(&turned).unwrap());
        for k in 0..9 {
            prop_assert!((f.fused_mean.to_array()[k] - g.fused_mean.to_array()[k]).abs() < 1e-9);
            prop_assert!((f.fused_var[k] - g.fused_var[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_is_permutation_invariant_and_non_negative(
        members in prop::collection::vec((prop::array::uniform9(-5.0f64..5.0), prop::array::uniform9(0.0f64..2.0)), 1..7),
        rot in 0usize..7,
    ) {
        let (mu, var) = mixture_moments(&members).unwrap();
        let mut turned = members.clone();
        turned.rotate_left(rot % members.len());
        let (mu2, var2) = mixture_moments(&turned).unwrap();
        for k in 0..9 {
            prop_assert!(var[k] >= 0.0);
            prop_assert!((mu[k] - mu2[k]).abs() < 1e-12);
            prop_assert!((var[k] - var2[k]).abs() < 1e-12);
            // Mixing never reports less spread than the average member.
            let mean_var = members.iter().map(|m| m.1[k]).sum::<f64>() / members.len() as f64;
            prop_assert!(var[k] >= mean_var - 1e-12);
        }
    }
}

#![allow(dead_code)]

use holonav_core::{RigidTransform, UnitQuaternion, Vec3};
use rand::Rng;

pub fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_vec<R: Rng>(rng: &mut R, half: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> UnitQuaternion {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    UnitQuaternion::from_axis_angle(random_unit(rng), angle).unwrap()
}

pub fn random_transform<R: Rng>(rng: &mut R, translation_half: f64) -> RigidTransform {
    RigidTransform::new(random_rotation(rng), random_vec(rng, translation_half))
}

/// Points in a `half`-sized cube, redrawn until the triangle formed by
/// the first three has every side and height above `half / 10`.
pub fn random_points<R: Rng>(rng: &mut R, n: usize, half: f64) -> Vec<Vec3> {
    loop {
        let pts: Vec<Vec3> = (0..n).map(|_| random_vec(rng, half)).collect();
        let (a, b, c) = (pts[0], pts[1], pts[2]);
        let area2 = (b - a).cross(&(c - a)).norm();
        let longest = (b - a).norm().max((c - a).norm()).max((c - b).norm());
        if longest > half / 10.0 && area2 / longest > half / 10.0 {
            return pts;
        }
    }
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, sigma: f64) -> Vec3 {
    use rand_distr::StandardNormal;
    Vec3::new(
        rng.sample::<f64, _>(StandardNormal) * sigma,
        rng.sample::<f64, _>(StandardNormal) * sigma,
        rng.sample::<f64, _>(StandardNormal) * sigma,
    )
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)).sqrt()
}

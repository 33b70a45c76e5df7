//! Pivot calibration of the tracked pointer.
//!
//! While the tip rests in a fixed divot, every tracker pose `(R_i, t_i)`
//! satisfies `R_i·tip + t_i = pivot`. Stacking `[R_i | −I]·(tip; pivot) = −t_i`
//! gives a 3N×6 least-squares system, solved by QR; the ratio of its extreme
//! singular values flags motion that leaves a direction unconstrained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform, Vec3};
use crate::registration::rms;

/// Above this condition number the solve is refused.
pub const MAX_SOLVABLE_CONDITION: f64 = 1e6;
pub const DEFAULT_MAX_RESIDUAL_MM: f64 = 0.5;
pub const DEFAULT_MAX_CONDITION: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PivotSolution {
    /// Tip position in the pointer-tracker frame.
    pub tip_offset: Vec3,
    pub pivot_world: Point3,
    pub residual_rms: f64,
    pub condition: f64,
}

pub fn pivot_calibrate(poses: &[RigidTransform]) -> Result<PivotSolution> {
    if poses.len() < 3 {
        return Err(Error::invalid(format!(
            "pivot calibration needs at least 3 poses, got {}",
            poses.len()
        )));
    }
    let rows = 3 * poses.len();
    let mut a = DMatrix::<f64>::zeros(rows, 6);
    let mut b = DVector::<f64>::zeros(rows);
    for (n, pose) in poses.iter().enumerate() {
        let r = pose.rotation_matrix();
        let t = pose.translation().to_array();
        for row in 0..3 {
            for col in 0..3 {
                a[(3 * n + row, col)] = r[(row, col)];
            }
            a[(3 * n + row, 3 + row)] = -1.0;
            b[3 * n + row] = -t[row];
        }
    }

    let singular = a.singular_values();
    let s_max = singular.max();
    let s_min = singular.min();
    let condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if !(condition <= MAX_SOLVABLE_CONDITION) {
        return Err(Error::UnobservableMotion {
            condition,
            limit: MAX_SOLVABLE_CONDITION,
        });
    }
    // The SVD solve loses several digits on this system; QR does not.
    let qr = a.qr();
    let x = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * &b))
        .ok_or_else(|| Error::DegenerateConfiguration("singular pivot system".into()))?;
    let tip_offset = Vec3::new(x[0], x[1], x[2]);
    let pivot_world = Vec3::new(x[3], x[4], x[5]);
    let residuals: Vec<f64> = poses
        .iter()
        .map(|p| p.apply_point(tip_offset).distance(&pivot_world))
        .collect();
    Ok(PivotSolution {
        tip_offset,
        pivot_world,
        residual_rms: rms(&residuals),
        condition,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityViolation {
    Residual,
    Condition,
}

impl QualityViolation {
    pub fn as_str(&self) -> &'static str {
        match self {
            QualityViolation::Residual => "residual",
            QualityViolation::Condition => "condition",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub accepted: bool,
    pub reasons: Vec<QualityViolation>,
}

pub fn calibration_quality(sol: &PivotSolution, max_residual: f64, max_condition: f64) -> QualityVerdict {
    let mut reasons = Vec::new();
    if !(sol.residual_rms <= max_residual) {
        reasons.push(QualityViolation::Residual);
    }
    if !(sol.condition <= max_condition) {
        reasons.push(QualityViolation::Condition);
    }
    QualityVerdict {
        accepted: reasons.is_empty(),
        reasons,
    }
}

/// Tracker poses for a pointer with tip `tip_offset` pivoting about
/// `pivot_world`, one per supplied rotation.
pub fn pivot_poses(
    pivot_world: Point3,
    tip_offset: Vec3,
    rotations: impl IntoIterator<Item = crate::geometry::UnitQuaternion>,
) -> Vec<RigidTransform> {
    rotations
        .into_iter()
        .map(|q| {
            let t = pivot_world - q.rotate(tip_offset);
            RigidTransform::new(q, t)
        })
        .collect()
}

//! Point-based rigid registration between the CT (patient) frame and the
//! tracking (world) frame.
//!
//! The fit is the closed-form SVD solution on centred point sets with the
//! reflection case folded back onto a proper rotation. Unlabelled
//! detections are paired by exhaustive search for small sets and by
//! distance-signature pruning above that.

use nalgebra::{Matrix3, Matrix3xX, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameConfig;
use crate::geometry::{Point3, RigidTransform, Vec3};

/// Relative singular-value floor below which a point set counts as collinear.
pub const DEGENERACY_RATIO: f64 = 1e-9;
/// Largest set size searched exhaustively (8! = 40320 fits).
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 8;
/// Largest set size `match_correspondences` accepts.
pub const MAX_MATCH_SIZE: usize = 10;
/// Pairwise-distance agreement required by signature pruning, mm.
pub const SIGNATURE_TOLERANCE_MM: f64 = 1.0;
/// FRE difference below which two pairings are considered tied, mm.
const FRE_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fiducial {
    pub label: String,
    pub position: Point3,
}

/// Ordered, labelled points in one named coordinate frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiducialSet {
    pub frame: String,
    pub fiducials: Vec<Fiducial>,
}

impl FiducialSet {
    /// Labels points `F1`, `F2`, ... in order.
    pub fn from_points(frame: impl Into<String>, points: impl IntoIterator<Item = Point3>) -> Self {
        FiducialSet {
            frame: frame.into(),
            fiducials: points
                .into_iter()
                .enumerate()
                .map(|(i, position)| Fiducial {
                    label: format!("F{}", i + 1),
                    position,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.fiducials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fiducials.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.fiducials.iter().map(|f| f.position).collect()
    }

    /// Maps every point through `t`, keeping labels, and renames the frame.
    pub fn transformed(&self, t: &RigidTransform, frame: impl Into<String>) -> FiducialSet {
        FiducialSet {
            frame: frame.into(),
            fiducials: self
                .fiducials
                .iter()
                .map(|f| Fiducial {
                    label: f.label.clone(),
                    position: t.apply_point(f.position),
                })
                .collect(),
        }
    }
}

/// Source/target sets with `pairing[i]` the target index matched to source `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondences {
    source: FiducialSet,
    target: FiducialSet,
    pairing: Vec<usize>,
}

impl Correspondences {
    pub fn new(source: FiducialSet, target: FiducialSet, pairing: Vec<usize>) -> Result<Self> {
        let n = source.len();
        if target.len() != n {
            return Err(Error::invalid(format!(
                "source has {n} points but target has {}",
                target.len()
            )));
        }
        if n < 3 {
            return Err(Error::invalid(format!("need at least 3 fiducials, got {n}")));
        }
        if pairing.len() != n {
            return Err(Error::invalid("pairing length differs from point count"));
        }
        let mut seen = vec![false; n];
        for &j in &pairing {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::invalid(format!("pairing {pairing:?} is not a bijection")));
            }
        }
        Ok(Correspondences {
            source,
            target,
            pairing,
        })
    }

    /// Pairs points in index order.
    pub fn in_order(source: FiducialSet, target: FiducialSet) -> Result<Self> {
        let n = source.len();
        Correspondences::new(source, target, (0..n).collect())
    }

    pub fn source(&self) -> &FiducialSet {
        &self.source
    }

    pub fn target(&self) -> &FiducialSet {
        &self.target
    }

    pub fn pairing(&self) -> &[usize] {
        &self.pairing
    }

    /// Target points reordered to line up with the source.
    pub fn paired_target_points(&self) -> Vec<Point3> {
        self.pairing
            .iter()
            .map(|&j| self.target.fiducials[j].position)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub world_from_patient: RigidTransform,
    pub fre_rms: f64,
    pub per_point_residuals: Vec<f64>,
}

impl RegistrationResult {
    fn from_fit(transform: RigidTransform, source: &[Point3], target: &[Point3]) -> Self {
        let per_point_residuals: Vec<f64> = source
            .iter()
            .zip(target)
            .map(|(s, t)| transform.apply_point(*s).distance(t))
            .collect();
        RegistrationResult {
            world_from_patient: transform,
            fre_rms: rms(&per_point_residuals),
            per_point_residuals,
        }
    }
}

pub(crate) fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn fit_rigid(corr: &Correspondences) -> Result<RegistrationResult> {
    fit_points(&corr.source.positions(), &corr.paired_target_points())
}

/// Least-squares rigid fit of `target[i] ≈ T · source[i]`.
pub fn fit_points(source: &[Point3], target: &[Point3]) -> Result<RegistrationResult> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "source has {} points but target has {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 fiducials, got {}",
            source.len()
        )));
    }
    if let Some(bad) = source.iter().chain(target).find(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("non-finite point {bad:?}")));
    }
    check_not_collinear(source)?;
    let transform = kabsch(source, target);
    Ok(RegistrationResult::from_fit(transform, source, target))
}

/// Singular values of the centred 3×N matrix, descending.
fn centred_singular_values(points: &[Point3]) -> [f64; 3] {
    let c = Vec3::centroid(points).unwrap_or_default();
    let m = Matrix3xX::from_iterator(
        points.len(),
        points.iter().flat_map(|p| (*p - c).to_array()),
    );
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.resize(3, 0.0);
    s.sort_by(|a, b| b.total_cmp(a));
    [s[0], s[1], s[2]]
}

/// A set spans at least a plane when its second singular value is not
/// negligible; three points are always coplanar, so the third is not used.
fn check_not_collinear(points: &[Point3]) -> Result<()> {
    let [largest, middle, _] = centred_singular_values(points);
    if largest == 0.0 || middle <= DEGENERACY_RATIO * largest {
        return Err(Error::DegenerateConfiguration(format!(
            "points are collinear or coincident (singular values {largest:.3e}, {middle:.3e})"
        )));
    }
    Ok(())
}

fn cross_covariance(source: &[Point3], target: &[Point3]) -> (Matrix3<f64>, Vec3, Vec3) {
    let cs = Vec3::centroid(source).unwrap_or_default();
    let ct = Vec3::centroid(target).unwrap_or_default();
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (*s - cs).to_na() * (*t - ct).to_na().transpose();
    }
    (h, cs, ct)
}

fn kabsch(source: &[Point3], target: &[Point3]) -> RigidTransform {
    let (h, cs, ct) = cross_covariance(source, target);
    let rotation = proper_rotation_from_covariance(&h);
    let t = RigidTransform::from_matrix_translation(&rotation, Vec3::ZERO);
    let translation = ct - t.apply_vector(cs);
    RigidTransform::new(t.rotation(), translation)
}

/// `R = V·D·Uᵀ` with `D` flipping the weakest singular direction when the
/// unconstrained optimum would be a reflection.
fn proper_rotation_from_covariance(h: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*h, true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let weakest = svd.singular_values.imin();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(weakest, weakest)] = -1.0;
    }
    v * d * u.transpose()
}

/// Pairing of `source` onto `target` that minimizes the fitted FRE.
///
/// Sets of up to 8 points are searched exhaustively in lexicographic
/// order; larger sets only visit pairings whose pairwise distances agree
/// within [`SIGNATURE_TOLERANCE_MM`]. Among tied pairings the
/// lexicographically smallest wins.
pub fn match_correspondences(source: &FiducialSet, target: &FiducialSet) -> Result<Correspondences> {
    let n = source.len();
    if target.len() != n {
        return Err(Error::invalid(format!(
            "cannot match {n} source fiducials against {} targets",
            target.len()
        )));
    }
    if !(3..=MAX_MATCH_SIZE).contains(&n) {
        return Err(Error::invalid(format!(
            "matching supports 3..={MAX_MATCH_SIZE} fiducials, got {n}"
        )));
    }
    let src = source.positions();
    let tgt = target.positions();
    check_not_collinear(&src)?;

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut consider = |perm: &[usize]| {
        let paired: Vec<Point3> = perm.iter().map(|&j| tgt[j]).collect();
        let fre = rms_after_fit(&src, &paired);
        match &best {
            Some((b, _)) if fre >= b - FRE_TIE_TOLERANCE => {}
            _ => best = Some((fre, perm.to_vec())),
        }
    };

    if n <= EXHAUSTIVE_MATCH_LIMIT {
        let mut perm: Vec<usize> = (0..n).collect();
        loop {
            consider(&perm);
            if !next_permutation(&mut perm) {
                break;
            }
        }
    } else {
        for perm in signature_consistent_pairings(&src, &tgt, SIGNATURE_TOLERANCE_MM) {
            consider(&perm);
        }
    }

    let (_, pairing) = best.ok_or_else(|| {
        Error::DegenerateConfiguration(format!(
            "no pairing has pairwise distances consistent within {SIGNATURE_TOLERANCE_MM} mm"
        ))
    })?;
    Correspondences::new(source.clone(), target.clone(), pairing)
}

fn rms_after_fit(source: &[Point3], target: &[Point3]) -> f64 {
    let t = kabsch(source, target);
    let sq: f64 = source
        .iter()
        .zip(target)
        .map(|(s, q)| (t.apply_point(*s) - *q).norm_squared())
        .sum();
    (sq / source.len() as f64).sqrt()
}

/// Advances to the next lexicographic permutation; false after the last.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = p.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = p.iter().rposition(|&x| x > p[i]).expect("pivot has a successor");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

fn distance_matrix(points: &[Point3]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| points.iter().map(|b| a.distance(b)).collect())
        .collect()
}

/// Complete pairings, in lexicographic order, whose per-point sorted
/// distance signatures and pairwise distances all agree within `tol`.
fn signature_consistent_pairings(source: &[Point3], target: &[Point3], tol: f64) -> Vec<Vec<usize>> {
    let n = source.len();
    let ds = distance_matrix(source);
    let dt = distance_matrix(target);
    let signature = |d: &Vec<Vec<f64>>, i: usize| {
        let mut s: Vec<f64> = d[i].iter().enumerate().filter(|&(k, _)| k != i).map(|(_, v)| *v).collect();
        s.sort_by(f64::total_cmp);
        s
    };
    let sig_s: Vec<Vec<f64>> = (0..n).map(|i| signature(&ds, i)).collect();
    let sig_t: Vec<Vec<f64>> = (0..n).map(|j| signature(&dt, j)).collect();
    let candidates: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| sig_s[i].iter().zip(&sig_t[j]).all(|(a, b)| (a - b).abs() <= tol))
                .collect()
        })
        .collect();

    let mut out = Vec::new();
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    extend_pairing(&candidates, &ds, &dt, tol, &mut perm, &mut used, &mut out);
    out
}

fn extend_pairing(
    candidates: &[Vec<usize>],
    ds: &[Vec<f64>],
    dt: &[Vec<f64>],
    tol: f64,
    perm: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<Vec<usize>>,
) {
    let i = perm.len();
    if i == candidates.len() {
        out.push(perm.clone());
        return;
    }
    for &j in &candidates[i] {
        if used[j] {
            continue;
        }
        let consistent = perm
            .iter()
            .enumerate()
            .all(|(k, &pk)| (ds[i][k] - dt[j][pk]).abs() <= tol);
        if !consistent {
            continue;
        }
        used[j] = true;
        perm.push(j);
        extend_pairing(candidates, ds, dt, tol, perm, used, out);
        perm.pop();
        used[j] = false;
    }
}

/// Target registration error: distance between the mapped target and its
/// true world position.
pub fn tre(result: &RegistrationResult, target_point_patient: Point3, true_point_world: Point3) -> f64 {
    result
        .world_from_patient
        .apply_point(target_point_patient)
        .distance(&true_point_world)
}

/// Registration through the removable tracked marker.
///
/// The CT detections (patient frame) are matched and fitted against the
/// frame's own fiducial layout, giving `frame_from_patient`; the tracked
/// marker pose then carries the frame into the world:
/// `world_from_patient = world_from_marker ∘ marker_from_frame ∘ frame_from_patient`.
/// Residuals in the result are those of the CT fit.
pub fn register_via_frame_marker(
    ct_frame_fiducials: &FiducialSet,
    frame_marker_pose_world: &RigidTransform,
    frame_geometry: &FrameConfig,
) -> Result<RegistrationResult> {
    let corr = match_correspondences(ct_frame_fiducials, &frame_geometry.fiducials_frame)?;
    let fit = fit_rigid(&corr)?;
    let frame_from_patient = fit.world_from_patient;
    let world_from_patient = frame_marker_pose_world
        .compose(&frame_geometry.marker_from_frame)
        .compose(&frame_from_patient);
    Ok(RegistrationResult {
        world_from_patient,
        ..fit
    })
}

mod common;

use holonav_core::volume::{
    detect_fiducials, synthesize_phantom, DetectedFiducial, Ellipsoid, Grid, Intensities, PhantomSpec, VoxelVolume,
    DEFAULT_THRESHOLD, TUMOR_HU,
};
use holonav_core::Vec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn detect(v: &VoxelVolume) -> Vec<DetectedFiducial> {
    detect_fiducials(v, DEFAULT_THRESHOLD, 1, 100_000)
}

#[test]
fn tumor_volume_matches_ellipsoid() {
    let spec = PhantomSpec {
        fiducial_centers: Vec::new(),
        ..PhantomSpec::default()
    };
    let grid = Grid::default_head();
    let v = synthesize_phantom(&spec, grid).unwrap();
    let voxel = grid.spacing.x * grid.spacing.y * grid.spacing.z;
    let expected = 4.0 / 3.0 * std::f64::consts::PI * 35.0 * 30.0 * 30.0 / voxel;
    let got = v.count_at_least(TUMOR_HU) as f64;
    assert!((got - expected).abs() / expected < 0.05, "{got} voxels vs {expected}");
}

#[test]
fn default_phantom_has_six_components() {
    let spec = PhantomSpec::default();
    let v = synthesize_phantom(&spec, Grid::default_head()).unwrap();
    let found = detect(&v);
    assert_eq!(found.len(), 6);
    for c in &spec.fiducial_centers {
        let nearest = found.iter().map(|f| f.centroid.distance(c)).fold(f64::INFINITY, f64::min);
        assert!(nearest < 0.75, "{c:?} nearest {nearest}");
    }
}

#[test]
fn synthesis_is_deterministic() {
    let a = synthesize_phantom(&PhantomSpec::default(), Grid::default_head()).unwrap();
    let b = synthesize_phantom(&PhantomSpec::default(), Grid::default_head()).unwrap();
    assert_eq!(a, b);
}

/// Six well-separated fiducials in a random anisotropic grid with 1–2 mm
/// spacing, plus a tumour.
fn random_phantom(rng: &mut ChaCha8Rng) -> (PhantomSpec, Grid) {
    let spacing = Vec3::new(rng.random_range(1.0..2.0), rng.random_range(1.0..2.0), rng.random_range(1.0..2.0));
    let grid = Grid {
        dims: [
            (120.0 / spacing.x) as usize,
            (120.0 / spacing.y) as usize,
            (120.0 / spacing.z) as usize,
        ],
        spacing,
        origin: Vec3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)),
    };
    let (lo, hi) = grid.centre_bounds();
    let r = 3.0;
    let mut centres: Vec<Vec3> = Vec::new();
    while centres.len() < 6 {
        let c = Vec3::new(
            rng.random_range(lo.x + r + 1.0..hi.x - r - 1.0),
            rng.random_range(lo.y + r + 1.0..hi.y - r - 1.0),
            rng.random_range(lo.z + r + 1.0..hi.z - r - 1.0),
        );
        if centres.iter().all(|o| o.distance(&c) >= 4.0 * r + 2.0) {
            centres.push(c);
        }
    }
    let spec = PhantomSpec {
        tumor: Some(Ellipsoid {
            center: (lo + hi) / 2.0,
            semi_axes: Vec3::new(20.0, 15.0, 15.0),
        }),
        fiducial_centers: centres,
        fiducial_radius: r,
        intensities: Intensities::default(),
    };
    (spec, grid)
}

#[test]
fn randomized_phantoms_full_recall_no_spurious() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for trial in 0..100 {
        let (spec, grid) = random_phantom(&mut rng);
        let v = synthesize_phantom(&spec, grid).unwrap();
        let found = detect(&v);
        assert_eq!(found.len(), spec.fiducial_centers.len(), "trial {trial}");
        let tol = 0.5 * grid.spacing.max_component();
        for c in &spec.fiducial_centers {
            let matches = found.iter().filter(|f| f.centroid.distance(c) <= tol).count();
            assert_eq!(matches, 1, "trial {trial}: centre {c:?}");
        }
    }
}

#[test]
fn detection_is_translation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (spec, grid) = random_phantom(&mut rng);
    let v = synthesize_phantom(&spec, grid).unwrap();
    let delta = Vec3::new(12.5, -7.25, 100.0);
    let a = detect(&v);
    let b = detect(&v.shifted(delta));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x.centroid + delta).distance(&y.centroid) < 1e-9);
        assert_eq!(x.voxel_count, y.voxel_count);
    }
}

#[test]
fn file_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vol.hnav");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = Grid {
        dims: [8, 8, 8],
        spacing: Vec3::new(0.5, 0.75, 1.25),
        origin: Vec3::new(-3.0, 2.0, 1.0 / 3.0),
    };
    let data: Vec<i16> = (0..512).map(|_| rng.random()).collect();
    let v = VoxelVolume::new(grid, data).unwrap();
    v.write(&path).unwrap();
    let back = VoxelVolume::read(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(std::fs::read(&path).unwrap(), v.to_bytes());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn voxel_mapping_inverts(i in 0usize..40, j in 0usize..30, k in 0usize..20,
                             sx in 0.3..3.0f64, sy in 0.3..3.0f64, sz in 0.3..3.0f64,
                             ox in -500.0..500.0f64) {
        let grid = Grid { dims: [40, 30, 20], spacing: Vec3::new(sx, sy, sz), origin: Vec3::new(ox, -ox, 0.5 * ox) };
        let v = VoxelVolume::filled(grid, 0).unwrap();
        let p = v.voxel_to_patient([i, j, k]).unwrap();
        let back = v.patient_to_voxel(p);
        prop_assert!((back[0] - i as f64).abs() < 1e-9);
        prop_assert!((back[1] - j as f64).abs() < 1e-9);
        prop_assert!((back[2] - k as f64).abs() < 1e-9);
    }

    #[test]
    fn synthesize_then_detect_counts_match(seed in any::<u64>(), n in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut spec, grid) = random_phantom(&mut rng);
        spec.fiducial_centers.truncate(n);
        let v = synthesize_phantom(&spec, grid).unwrap();
        prop_assert_eq!(detect(&v).len(), n);
    }
}

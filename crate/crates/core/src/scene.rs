//! A simulated operating room: a phantom head wearing the frame, placed in
//! the tracked room, with a tracked pointer. Ties the imaging, tracking,
//! calibration and registration stages into one pipeline.

use rand::Rng;

use crate::calibration::{pivot_calibrate, pivot_poses, PivotSolution};
use crate::error::{Error, Result};
use crate::frame::{FrameConfig, FrameState};
use crate::geometry::{Point3, RigidTransform, UnitQuaternion, Vec3};
use crate::registration::{register_via_frame_marker, FiducialSet, RegistrationResult};
use crate::tracking::{sample_pose, NoiseModel, RoomConfig, TrackerId, TrackingSample};
use crate::volume::{
    detect_fiducials, synthesize_phantom, Grid, PhantomSpec, VoxelVolume, DEFAULT_MAX_VOXELS, DEFAULT_MIN_VOXELS,
    DEFAULT_THRESHOLD,
};

/// Pointer shaft length from tracker origin to tip along local −z, mm.
pub const POINTER_SHAFT_MM: f64 = 150.0;

#[derive(Clone, Debug)]
pub struct Scene {
    pub room: RoomConfig,
    pub frame: FrameState,
    /// How the frame sits on the head.
    pub frame_from_patient: RigidTransform,
    /// Where the frame (and head) sits in the room.
    pub world_from_frame: RigidTransform,
    /// Tumour and other anatomy; fiducials are derived from the frame.
    pub anatomy: PhantomSpec,
    pub grid: Grid,
    pub noise: NoiseModel,
    pub pointer_tip: Vec3,
    /// Divot used for pivot calibration, world frame.
    pub pivot_world: Point3,
}

impl Default for Scene {
    /// Head at the room centre on the table, frame mounted square, marker
    /// attached.
    fn default() -> Self {
        let room = RoomConfig::default_room();
        let centre = room.centre();
        Scene {
            frame: FrameState::new(FrameConfig::default())
                .and_then(|f| f.attach_marker())
                .expect("default frame is valid"),
            frame_from_patient: RigidTransform::IDENTITY,
            world_from_frame: RigidTransform::from_translation(centre),
            anatomy: PhantomSpec {
                fiducial_centers: Vec::new(),
                ..PhantomSpec::default()
            },
            grid: Grid::default_head(),
            noise: NoiseModel::default(),
            pointer_tip: Vec3::new(0.0, 0.0, -POINTER_SHAFT_MM),
            pivot_world: centre + Vec3::new(300.0, 0.0, 0.0),
            room,
        }
    }
}

impl Scene {
    /// Default scene with the frame mounted slightly askew (up to 5° and
    /// 3 mm) and the head moved up to 0.5 m and rotated freely about the
    /// vertical.
    pub fn randomized<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut scene = Scene::default();
        let small_axis = random_unit(rng);
        scene.frame_from_patient = RigidTransform::new(
            UnitQuaternion::from_axis_angle(small_axis, rng.random_range(-5f64..5.0).to_radians())
                .expect("unit axis"),
            Vec3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        );
        let yaw = UnitQuaternion::from_axis_angle(Vec3::Z, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            .expect("unit axis");
        let shift = Vec3::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), 0.0);
        scene.world_from_frame = RigidTransform::new(yaw, scene.room.centre() + shift);
        scene
    }

    pub fn true_world_from_patient(&self) -> RigidTransform {
        self.world_from_frame.compose(&self.frame_from_patient)
    }

    /// Noise-free pose of the frame marker in the world.
    pub fn true_marker_pose_world(&self) -> Result<RigidTransform> {
        Ok(self.world_from_frame.compose(&self.frame.marker_from_frame()?.inverse()))
    }

    pub fn tumor_centre_patient(&self) -> Option<Point3> {
        self.anatomy.tumor.map(|t| t.center)
    }

    /// Anatomy plus the frame fiducials as they appear in the patient frame.
    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            fiducial_centers: self.frame.ct_fiducials_patient(&self.frame_from_patient).positions(),
            ..self.anatomy.clone()
        }
    }

    pub fn synthesize_ct(&self) -> Result<VoxelVolume> {
        synthesize_phantom(&self.phantom_spec(), self.grid)
    }

    pub fn detect_ct_fiducials(&self, ct: &VoxelVolume) -> FiducialSet {
        let found = detect_fiducials(ct, DEFAULT_THRESHOLD, DEFAULT_MIN_VOXELS, DEFAULT_MAX_VOXELS);
        FiducialSet::from_points("patient", found.iter().map(|d| d.centroid))
    }

    pub fn track_marker<R: Rng + ?Sized>(&self, time: f64, rng: &mut R) -> Result<TrackingSample> {
        let truth = self.true_marker_pose_world()?;
        Ok(sample_pose(&self.room, TrackerId::FrameMarker, time, &truth, &self.noise, rng))
    }

    /// Registration through the tracked frame marker, using one noisy
    /// marker sample.
    pub fn register<R: Rng + ?Sized>(&self, ct_fiducials: &FiducialSet, rng: &mut R) -> Result<RegistrationResult> {
        let sample = self.track_marker(0.0, rng)?;
        let marker_pose = sample
            .pose
            .ok_or_else(|| Error::state("frame marker not visible to any station"))?;
        register_via_frame_marker(ct_fiducials, &marker_pose, &self.frame.config)
    }

    /// `count` tracked pointer poses pivoting in the divot with tilts up to
    /// 40° from vertical; dropouts are skipped.
    pub fn pivot_samples<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<RigidTransform> {
        let truth = pivot_poses(self.pivot_world, self.pointer_tip, (0..count).map(|_| random_tilt(rng, 40f64.to_radians())));
        truth
            .iter()
            .enumerate()
            .filter_map(|(i, p)| sample_pose(&self.room, TrackerId::Pointer, i as f64 / 30.0, p, &self.noise, rng).pose)
            .collect()
    }

    pub fn calibrate_pointer<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<PivotSolution> {
        pivot_calibrate(&self.pivot_samples(count, rng))
    }

    /// Glasses hovering over the table at `time`: a slow 0.5 m circle at
    /// head height, looking down at the patient.
    pub fn glasses_pose(&self, time: f64) -> RigidTransform {
        let head = self.world_from_frame.translation();
        let a = 0.2 * time;
        let eye = head + Vec3::new(500.0 * a.cos(), 500.0 * a.sin(), 600.0);
        let look = UnitQuaternion::from_axis_angle(Vec3::new(-a.sin(), a.cos(), 0.0), 0.7).expect("unit axis");
        RigidTransform::new(look, eye)
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
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

/// Random spin about the shaft followed by a tilt of up to `max_tilt`.
fn random_tilt<R: Rng + ?Sized>(rng: &mut R, max_tilt: f64) -> UnitQuaternion {
    let spin = UnitQuaternion::from_axis_angle(Vec3::Z, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        .expect("unit axis");
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = UnitQuaternion::from_axis_angle(Vec3::new(dir.cos(), dir.sin(), 0.0), rng.random_range(0.0..max_tilt))
        .expect("unit axis");
    tilt.mul(&spin)
}

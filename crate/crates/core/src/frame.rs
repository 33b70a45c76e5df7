//! The adjustable patient headset: three anchor points with stepped
//! adjustment, CT-visible fiducials in frame coordinates, and a removable
//! tracked-marker mount.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform, Vec3};
use crate::registration::FiducialSet;

pub const STEP_MM: f64 = 1.0;
pub const MAX_STEPS: u32 = 40;
pub const CONFIG_VERSION: u32 = 1;

/// Six fiducials, deliberately without symmetry so matching has a unique
/// best pairing.
pub const DEFAULT_FIDUCIALS_FRAME: [[f64; 3]; 6] = [
    [0.0, 98.0, -12.0],
    [-82.0, 14.0, -6.0],
    [80.0, 6.0, -4.0],
    [-48.0, 66.0, 58.0],
    [57.0, 52.0, 47.0],
    [12.0, -38.0, 92.0],
];

/// Anchor points (nose bridge, left ear canal, right ear canal) at zero
/// adjustment, frame coordinates.
const BASE_ANCHORS: [[f64; 3]; 3] = [[0.0, 95.0, 0.0], [-75.0, 0.0, 0.0], [75.0, 0.0, 0.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adjustment {
    NoseBridge = 0,
    LeftEar = 1,
    RightEar = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameConfig {
    /// Nose-bridge extension, left ear, right ear, in whole steps.
    pub adjustment_steps: [u32; 3],
    pub ear_screw_locked: [bool; 2],
    pub fiducials_frame: FiducialSet,
    pub marker_from_frame: RigidTransform,
    /// Per-axis standard deviation of the mount position on reattachment, mm.
    pub repeatability_sigma_mm: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        let frame_from_marker = RigidTransform::from_axis_angle(
            Vec3::X,
            30f64.to_radians(),
            Vec3::new(15.0, 110.0, 75.0),
        )
        .expect("constant axis");
        FrameConfig {
            adjustment_steps: [0; 3],
            ear_screw_locked: [false; 2],
            fiducials_frame: FiducialSet::from_points(
                "frame",
                DEFAULT_FIDUCIALS_FRAME.iter().map(|p| Vec3::from(*p)),
            ),
            marker_from_frame: frame_from_marker.inverse(),
            repeatability_sigma_mm: 0.0,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.adjustment_steps.iter().find(|&&s| s > MAX_STEPS) {
            return Err(Error::invalid(format!(
                "adjustment step {s} outside mechanical range 0..={MAX_STEPS}"
            )));
        }
        if self.fiducials_frame.len() < 3 {
            return Err(Error::invalid("frame needs at least 3 fiducials"));
        }
        // Reuses the registration degeneracy test on the layout itself.
        let pts = self.fiducials_frame.positions();
        crate::registration::fit_points(&pts, &pts)?;
        if !(self.repeatability_sigma_mm >= 0.0 && self.repeatability_sigma_mm.is_finite()) {
            return Err(Error::invalid("repeatability sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// Anchor points in frame coordinates, derived from the step counts.
    pub fn anchor_points(&self) -> [Point3; 3] {
        let [nose, left, right] = self.adjustment_steps.map(|s| s as f64 * STEP_MM);
        [
            Vec3::from(BASE_ANCHORS[0]) + Vec3::new(0.0, nose, 0.0),
            Vec3::from(BASE_ANCHORS[1]) + Vec3::new(-left, 0.0, 0.0),
            Vec3::from(BASE_ANCHORS[2]) + Vec3::new(right, 0.0, 0.0),
        ]
    }
}

/// Rounds to the nearest whole step, exact halves toward zero.
pub fn quantize_steps(requested_mm: f64) -> Result<u32> {
    if !requested_mm.is_finite() {
        return Err(Error::invalid("non-finite adjustment"));
    }
    let steps = requested_mm / STEP_MM;
    let mag = steps.abs();
    let whole = if mag - mag.floor() > 0.5 { mag.ceil() } else { mag.floor() };
    let q = whole.copysign(steps);
    if !(0.0..=MAX_STEPS as f64).contains(&q) {
        return Err(Error::invalid(format!(
            "adjustment {requested_mm} mm quantizes to {q} steps, outside 0..={MAX_STEPS}"
        )));
    }
    Ok(q as u32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameState {
    pub config: FrameConfig,
    marker_attached: bool,
    /// Deviation of the physical mount from its nominal seat for the
    /// current attachment.
    mount_offset: RigidTransform,
}

impl FrameState {
    pub fn new(config: FrameConfig) -> Result<Self> {
        config.validate()?;
        Ok(FrameState {
            config,
            marker_attached: false,
            mount_offset: RigidTransform::IDENTITY,
        })
    }

    pub fn marker_attached(&self) -> bool {
        self.marker_attached
    }

    pub fn set_adjustment(&self, requested_mm: [f64; 3]) -> Result<FrameState> {
        let mut steps = [0u32; 3];
        for (dst, v) in steps.iter_mut().zip(requested_mm) {
            *dst = quantize_steps(v)?;
        }
        let mut next = self.clone();
        next.config.adjustment_steps = steps;
        Ok(next)
    }

    /// Ear-screw locks carry no geometric effect.
    pub fn set_ear_screws(&self, locked: [bool; 2]) -> FrameState {
        let mut next = self.clone();
        next.config.ear_screw_locked = locked;
        next
    }

    /// Reattaches on the kinematic seat, exactly.
    pub fn attach_marker(&self) -> Result<FrameState> {
        self.attach_with_offset(RigidTransform::IDENTITY)
    }

    /// Reattaches with Gaussian seat error of the configured sigma.
    pub fn attach_marker_with_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FrameState> {
        let sigma = self.config.repeatability_sigma_mm;
        if sigma == 0.0 {
            return self.attach_marker();
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let offset = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        self.attach_with_offset(RigidTransform::from_translation(offset))
    }

    fn attach_with_offset(&self, offset: RigidTransform) -> Result<FrameState> {
        if self.marker_attached {
            return Err(Error::state("marker is already attached"));
        }
        Ok(FrameState {
            config: self.config.clone(),
            marker_attached: true,
            mount_offset: offset,
        })
    }

    pub fn detach_marker(&self) -> Result<FrameState> {
        if !self.marker_attached {
            return Err(Error::state("marker is already detached"));
        }
        Ok(FrameState {
            config: self.config.clone(),
            marker_attached: false,
            mount_offset: RigidTransform::IDENTITY,
        })
    }

    /// Actual marker pose relative to the frame for the current attachment.
    pub fn marker_from_frame(&self) -> Result<RigidTransform> {
        if !self.marker_attached {
            return Err(Error::state("marker pose queried while detached"));
        }
        Ok(self.mount_offset.compose(&self.config.marker_from_frame))
    }

    /// Frame fiducials in patient (CT) coordinates for a given mounting.
    pub fn ct_fiducials_patient(&self, frame_from_patient: &RigidTransform) -> FiducialSet {
        self.config
            .fiducials_frame
            .transformed(&frame_from_patient.inverse(), "patient")
    }

    pub fn save_config(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = FrameConfigFile::from(&self.config);
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Loads a saved configuration; the marker starts detached.
    pub fn restore_config(path: impl AsRef<Path>) -> Result<FrameState> {
        let text = fs::read_to_string(path)?;
        let file: FrameConfigFile =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("frame config: {e}")))?;
        let config = file.into_config()?;
        FrameState::new(config).map_err(|e| match e {
            Error::InvalidArgument(m) | Error::DegenerateConfiguration(m) => Error::Format(m),
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NoiseSettings {
    repeatability_sigma_mm: f64,
}

/// On-disk JSON layout of a frame configuration.
#[derive(Serialize, Deserialize)]
struct FrameConfigFile {
    version: u32,
    adjustment_steps: [u32; 3],
    ear_screw_locked: [bool; 2],
    fiducials: FiducialSet,
    marker_from_frame: RigidTransform,
    noise: NoiseSettings,
}

impl From<&FrameConfig> for FrameConfigFile {
    fn from(c: &FrameConfig) -> Self {
        FrameConfigFile {
            version: CONFIG_VERSION,
            adjustment_steps: c.adjustment_steps,
            ear_screw_locked: c.ear_screw_locked,
            fiducials: c.fiducials_frame.clone(),
            marker_from_frame: c.marker_from_frame,
            noise: NoiseSettings {
                repeatability_sigma_mm: c.repeatability_sigma_mm,
            },
        }
    }
}

impl FrameConfigFile {
    fn into_config(self) -> Result<FrameConfig> {
        if self.version != CONFIG_VERSION {
            return Err(Error::format(format!(
                "frame config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        Ok(FrameConfig {
            adjustment_steps: self.adjustment_steps,
            ear_screw_locked: self.ear_screw_locked,
            fiducials_frame: self.fiducials,
            marker_from_frame: self.marker_from_frame,
            repeatability_sigma_mm: self.noise.repeatability_sigma_mm,
        })
    }
}

//! Simulated hardware behind the service: fills in the data a bare
//! workflow command needs (volume, detections, tip offset, registration)
//! and produces the tracker stream.

use holonav_core::calibration::{calibration_quality, DEFAULT_MAX_CONDITION, DEFAULT_MAX_RESIDUAL_MM};
use holonav_core::registration::RegistrationResult;
use holonav_core::scene::Scene;
use holonav_core::session::{Command, LogEntry, Rejection, Session};
use holonav_core::tracking::{sample_pose, TrackerId};
use holonav_core::volume::VoxelVolume;
use holonav_core::{RigidTransform, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::protocol::{SceneInfo, TrackingPayload};

pub const PHANTOM_SOURCE: &str = "phantom:default";
pub const CALIBRATION_POSES: usize = 100;

pub struct Pipeline {
    scene: Scene,
    rng: ChaCha8Rng,
    volume: Option<VoxelVolume>,
}

impl Pipeline {
    pub fn new(scene: Scene, seed: u64) -> Self {
        Pipeline {
            scene,
            rng: ChaCha8Rng::seed_from_u64(seed),
            volume: None,
        }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn scene_info(&self) -> SceneInfo {
        let g = &self.scene.grid;
        let last = |i: usize| (g.dims[i].max(1) - 1) as f64;
        let hi = g.origin + Vec3::new(last(0), last(1), last(2)).component_mul(&g.spacing);
        let anchors = self.scene.frame.config.anchor_points();
        SceneInfo {
            volume_bounds: [g.origin, hi],
            tumor: self.scene.anatomy.tumor,
            anchor_points_world: anchors.map(|p| self.scene.world_from_frame.apply_point(p)),
            pivot_world: self.scene.pivot_world,
        }
    }

    fn volume_for(&mut self, source: &str) -> Result<&VoxelVolume, String> {
        if self.volume.is_none() {
            let v = if source == PHANTOM_SOURCE {
                self.scene.synthesize_ct()
            } else {
                VoxelVolume::read(source)
            };
            self.volume = Some(v.map_err(|e| format!("cannot load {source}: {e}"))?);
        }
        Ok(self.volume.as_ref().expect("just set"))
    }

    /// Turns a client command into the log entry that applies it. Bare
    /// workflow commands are completed from the simulated scene; commands
    /// that already carry their data are taken as given.
    pub fn prepare(&mut self, session: &Session, cmd: Command, timestamp: f64) -> Result<LogEntry, Rejection> {
        let reject = |reason: String| Rejection {
            state: session.state(),
            command: cmd.name().to_string(),
            reason,
        };
        // State check first so a misplaced command costs nothing.
        let probe = match &cmd {
            Command::Register { registration: None } => Command::register(RegistrationResult {
                world_from_patient: RigidTransform::IDENTITY,
                fre_rms: 0.0,
                per_point_residuals: Vec::new(),
            }),
            other => other.clone(),
        };
        session.plan_command(probe, timestamp)?;

        let full = match &cmd {
            Command::LoadVolume { source } => {
                let source = if source.is_empty() { PHANTOM_SOURCE.to_string() } else { source.clone() };
                self.volume = None;
                self.volume_for(&source).map_err(reject)?;
                Command::LoadVolume { source }
            }
            Command::DetectFiducials { fiducials: None } => {
                let source = session.snapshot().volume_source.clone().unwrap_or_default();
                let volume = self.volume_for(&source).map_err(reject)?.clone();
                let found = self.scene.detect_ct_fiducials(&volume);
                if found.len() < 3 {
                    return Err(reject(format!("detected {} fiducials, need at least 3", found.len())));
                }
                Command::DetectFiducials { fiducials: Some(found) }
            }
            Command::Calibrate { tip_offset: None } => {
                let sol = self
                    .scene
                    .calibrate_pointer(CALIBRATION_POSES, &mut self.rng)
                    .map_err(|e| reject(e.to_string()))?;
                let verdict = calibration_quality(&sol, DEFAULT_MAX_RESIDUAL_MM, DEFAULT_MAX_CONDITION);
                if !verdict.accepted {
                    let why: Vec<&str> = verdict.reasons.iter().map(|r| r.as_str()).collect();
                    return Err(reject(format!("calibration failed quality checks: {}", why.join(", "))));
                }
                Command::Calibrate {
                    tip_offset: Some(sol.tip_offset),
                }
            }
            Command::Register { registration: None } => {
                let fiducials = session
                    .snapshot()
                    .fiducials
                    .clone()
                    .ok_or_else(|| reject("no detected fiducials to register".into()))?;
                let r = self
                    .scene
                    .register(&fiducials, &mut self.rng)
                    .map_err(|e| reject(e.to_string()))?;
                Command::register(r)
            }
            Command::Reset => {
                self.volume = None;
                Command::Reset
            }
            other => other.clone(),
        };
        session.plan_command(full, timestamp)
    }

    /// One sample per tracker at `time` seconds into the run.
    pub fn tracking(&mut self, session: &Session, time: f64) -> Vec<TrackingPayload> {
        let scene = &self.scene;
        let glasses = scene.glasses_pose(time);
        let tumour = scene.tumor_centre_patient().unwrap_or(Vec3::ZERO);
        let a = 0.5 * time;
        let tip = scene
            .true_world_from_patient()
            .apply_point(tumour + Vec3::new(40.0 * a.cos(), 40.0 * a.sin(), 0.0));
        let pointer = RigidTransform::from_translation(tip - scene.pointer_tip);
        let marker = scene.true_marker_pose_world().ok();

        let mut out = Vec::with_capacity(3);
        let mut push = |id: TrackerId, truth: &RigidTransform, rng: &mut ChaCha8Rng| {
            let sample = sample_pose(&scene.room, id, time, truth, &scene.noise, rng);
            let view_from_patient = match (id, &sample.pose) {
                (TrackerId::Glasses, Some(p)) => session.compute_overlay(p).ok(),
                _ => None,
            };
            out.push(TrackingPayload {
                sample,
                view_from_patient,
            });
        };
        push(TrackerId::Glasses, &glasses, &mut self.rng);
        push(TrackerId::Pointer, &pointer, &mut self.rng);
        if let Some(m) = marker {
            push(TrackerId::FrameMarker, &m, &mut self.rng);
        }
        out
    }
}

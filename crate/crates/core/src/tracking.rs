//! Simulated room-scale tracking: base stations with cone-shaped fields of
//! view, axis-aligned occluders, and per-sample Gaussian noise whose
//! standard deviation shrinks as `1/√k` with the number `k` of stations in
//! view. A sample seen by no station is a dropout.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform, UnitQuaternion, Vec3};

pub const MAX_STATIONS: usize = 4;
pub const DEFAULT_FOV_HALF_ANGLE_DEG: f64 = 60.0;
pub const DEFAULT_MAX_RANGE_MM: f64 = 7000.0;
pub const DEFAULT_RATE_HZ: f64 = 30.0;
const STATION_HEIGHT_MM: f64 = 2500.0;
/// Point the default stations aim at: room centre, table height.
const ROOM_AIM_HEIGHT_MM: f64 = 1000.0;

pub type StationId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub id: StationId,
    pub pose_world: RigidTransform,
    /// Half-angle of the view cone about the station's local −z axis.
    pub fov_half_angle: f64,
    pub max_range: f64,
}

impl BaseStation {
    /// Station at `position` whose view axis points at `target`.
    pub fn aimed_at(id: StationId, position: Point3, target: Point3) -> Result<Self> {
        let forward = (target - position)
            .normalized()
            .ok_or_else(|| Error::invalid("station target coincides with its position"))?;
        let z = -forward;
        let x = Vec3::Z
            .cross(&z)
            .normalized()
            .or_else(|| Vec3::Y.cross(&z).normalized())
            .expect("z is a unit vector");
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x.to_na(), y.to_na(), z.to_na()]);
        Ok(BaseStation {
            id,
            pose_world: RigidTransform::from_matrix_translation(&rotation, position),
            fov_half_angle: DEFAULT_FOV_HALF_ANGLE_DEG.to_radians(),
            max_range: DEFAULT_MAX_RANGE_MM,
        })
    }

    pub fn position(&self) -> Point3 {
        self.pose_world.translation()
    }

    pub fn view_axis(&self) -> Vec3 {
        self.pose_world.apply_vector(-Vec3::Z)
    }

    /// Inside the cone and within range; ignores occlusion.
    pub fn covers(&self, p: Point3) -> bool {
        let d = p - self.position();
        let dist = d.norm();
        if dist > self.max_range {
            return false;
        }
        if dist == 0.0 {
            return true;
        }
        let cos = d.dot(&self.view_axis()) / dist;
        cos >= self.fov_half_angle.cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(a: Point3, b: Point3) -> Self {
        Aabb {
            min: Vec3::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)),
            max: Vec3::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)),
        }
    }

    pub fn contains(&self, p: Point3) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    /// Slab test: does the closed segment `a → b` touch the box?
    pub fn intersects_segment(&self, a: Point3, b: Point3) -> bool {
        let d = b - a;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for (o, dir, lo, hi) in [
            (a.x, d.x, self.min.x, self.max.x),
            (a.y, d.y, self.min.y, self.max.y),
            (a.z, d.z, self.min.z, self.max.z),
        ] {
            if dir == 0.0 {
                if o < lo || o > hi {
                    return false;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo - o) / dir, (hi - o) / dir);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomConfig {
    pub stations: Vec<BaseStation>,
    /// Floor extent (x, y) in metres; the floor spans `[0, extent]` in mm.
    pub extent_m: [f64; 2],
    #[serde(default)]
    pub occluders: Vec<Aabb>,
}

impl RoomConfig {
    /// 6 × 6 m room with four stations at the upper corners, 2.5 m high,
    /// each aimed at the room centre at table height.
    pub fn default_room() -> Self {
        let extent_m = [6.0, 6.0];
        let (w, d) = (extent_m[0] * 1000.0, extent_m[1] * 1000.0);
        let centre = Vec3::new(w / 2.0, d / 2.0, ROOM_AIM_HEIGHT_MM);
        let corners = [(0.0, 0.0), (w, 0.0), (w, d), (0.0, d)];
        let stations = corners
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                BaseStation::aimed_at(i as StationId, Vec3::new(x, y, STATION_HEIGHT_MM), centre)
                    .expect("corner differs from centre")
            })
            .collect();
        RoomConfig {
            stations,
            extent_m,
            occluders: Vec::new(),
        }
    }

    pub fn centre(&self) -> Point3 {
        Vec3::new(self.extent_m[0] * 500.0, self.extent_m[1] * 500.0, ROOM_AIM_HEIGHT_MM)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stations.len();
        if !(1..=MAX_STATIONS).contains(&n) {
            return Err(Error::invalid(format!("room needs 1..={MAX_STATIONS} stations, got {n}")));
        }
        let ids: BTreeSet<_> = self.stations.iter().map(|s| s.id).collect();
        if ids.len() != n {
            return Err(Error::invalid("station ids must be unique"));
        }
        for s in &self.stations {
            if !(s.fov_half_angle > 0.0 && s.fov_half_angle < std::f64::consts::FRAC_PI_2) {
                return Err(Error::invalid(format!("station {} fov half-angle out of (0, π/2)", s.id)));
            }
            if !(s.max_range > 0.0) {
                return Err(Error::invalid(format!("station {} range must be positive", s.id)));
            }
        }
        if !(self.extent_m.iter().all(|e| *e > 0.0 && e.is_finite())) {
            return Err(Error::invalid("room extent must be positive"));
        }
        Ok(())
    }

    pub fn without_station(&self, id: StationId) -> RoomConfig {
        let mut r = self.clone();
        r.stations.retain(|s| s.id != id);
        r
    }

    /// Stations whose cone and range contain the sensor and whose line of
    /// sight crosses no occluder.
    pub fn visible_stations(&self, sensor: Point3) -> BTreeSet<StationId> {
        self.stations
            .iter()
            .filter(|s| s.covers(sensor))
            .filter(|s| !self.occluders.iter().any(|o| o.intersects_segment(s.position(), sensor)))
            .map(|s| s.id)
            .collect()
    }

    /// Fraction of a floor-parallel grid at `height_mm` seen by at least one
    /// station.
    pub fn coverage_fraction(&self, height_mm: f64, step_mm: f64) -> f64 {
        let nx = (self.extent_m[0] * 1000.0 / step_mm).floor() as usize + 1;
        let ny = (self.extent_m[1] * 1000.0 / step_mm).floor() as usize + 1;
        let mut seen = 0usize;
        for i in 0..nx {
            for j in 0..ny {
                let p = Vec3::new(i as f64 * step_mm, j as f64 * step_mm, height_mm);
                if !self.visible_stations(p).is_empty() {
                    seen += 1;
                }
            }
        }
        seen as f64 / (nx * ny) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerId {
    Glasses,
    Pointer,
    /// The removable marker on the patient frame.
    FrameMarker,
}

/// Single-station noise; effective values divide by `√k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_pos_mm: f64,
    pub sigma_rot_rad: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            sigma_pos_mm: 0.5,
            sigma_rot_rad: 1e-3,
        }
    }
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        sigma_pos_mm: 0.0,
        sigma_rot_rad: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s >= 0.0 && s.is_finite();
        if ok(self.sigma_pos_mm) && ok(self.sigma_rot_rad) {
            Ok(())
        } else {
            Err(Error::invalid("noise sigmas must be finite and >= 0"))
        }
    }
}

/// One tracker report. `pose` and `position_sigma` are absent exactly when
/// no station saw the tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingSample {
    pub time: f64,
    pub tracker_id: TrackerId,
    pub pose: Option<RigidTransform>,
    pub visible_station_ids: BTreeSet<StationId>,
    pub position_sigma: Option<f64>,
}

impl TrackingSample {
    pub fn is_dropout(&self) -> bool {
        self.pose.is_none()
    }
}

/// Samples one noisy observation of `true_pose`, drawing exactly six
/// standard normals whenever at least one station is in view.
pub fn sample_pose<R: Rng + ?Sized>(
    room: &RoomConfig,
    tracker_id: TrackerId,
    time: f64,
    true_pose: &RigidTransform,
    noise: &NoiseModel,
    rng: &mut R,
) -> TrackingSample {
    let visible = room.visible_stations(true_pose.translation());
    let k = visible.len();
    if k == 0 {
        return TrackingSample {
            time,
            tracker_id,
            pose: None,
            visible_station_ids: visible,
            position_sigma: None,
        };
    }
    let scale = 1.0 / (k as f64).sqrt();
    let sigma_pos = noise.sigma_pos_mm * scale;
    let sigma_rot = noise.sigma_rot_rad * scale;
    let mut draw = || -> Vec3 {
        Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        )
    };
    let dp = draw();
    let dr = draw();

    let mut pose = *true_pose;
    if sigma_rot > 0.0 {
        let q = UnitQuaternion::from_rotation_vector(dr * sigma_rot);
        pose = RigidTransform::new(q.mul(&pose.rotation()), pose.translation());
    }
    if sigma_pos > 0.0 {
        pose = RigidTransform::new(pose.rotation(), pose.translation() + dp * sigma_pos);
    }
    TrackingSample {
        time,
        tracker_id,
        pose: Some(pose),
        visible_station_ids: visible,
        position_sigma: Some(sigma_pos),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub time: f64,
    pub pose: RigidTransform,
}

/// Interpolated pose at `time`, clamped to the ends of the waypoint list.
/// Waypoints must be sorted by strictly increasing time.
pub fn interpolate_waypoints(waypoints: &[Waypoint], time: f64) -> RigidTransform {
    let seg = waypoints.partition_point(|w| w.time <= time);
    if seg == 0 {
        return waypoints[0].pose;
    }
    if seg >= waypoints.len() {
        return waypoints[waypoints.len() - 1].pose;
    }
    let (a, b) = (&waypoints[seg - 1], &waypoints[seg]);
    let s = (time - a.time) / (b.time - a.time);
    a.pose.interpolate(&b.pose, s)
}

/// Fixed-rate samples along a timed path, deterministic in `seed`.
pub fn simulate_trajectory(
    room: &RoomConfig,
    waypoints: &[Waypoint],
    rate_hz: f64,
    tracker_id: TrackerId,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<TrackingSample>> {
    room.validate()?;
    noise.validate()?;
    if waypoints.len() < 2 {
        return Err(Error::invalid("trajectory needs at least 2 waypoints"));
    }
    if let Some(w) = waypoints.windows(2).find(|w| !(w[1].time > w[0].time)) {
        return Err(Error::invalid(format!(
            "waypoint times must strictly increase ({} then {})",
            w[0].time, w[1].time
        )));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let t0 = waypoints[0].time;
    let t1 = waypoints[waypoints.len() - 1].time;
    let count = ((t1 - t0) * rate_hz + 1e-9).floor() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|n| {
            let t = t0 + n as f64 / rate_hz;
            let pose = interpolate_waypoints(waypoints, t);
            sample_pose(room, tracker_id, t, &pose, noise, &mut rng)
        })
        .collect())
}

/// Scenario file: room (default stations unless given), occluders, path,
/// noise and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub stations: Option<Vec<BaseStation>>,
    #[serde(default)]
    pub extent_m: Option<[f64; 2]>,
    #[serde(default)]
    pub occluders: Vec<Aabb>,
    #[serde(default = "default_tracker")]
    pub tracker: TrackerId,
    pub waypoints: Vec<Waypoint>,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
}

fn default_tracker() -> TrackerId {
    TrackerId::Pointer
}

fn default_rate() -> f64 {
    DEFAULT_RATE_HZ
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("scenario: {e}")))
    }

    pub fn room(&self) -> Result<RoomConfig> {
        let mut room = RoomConfig::default_room();
        if let Some(stations) = &self.stations {
            room.stations = stations.clone();
        }
        if let Some(extent) = self.extent_m {
            room.extent_m = extent;
        }
        room.occluders = self.occluders.clone();
        room.validate()?;
        Ok(room)
    }

    pub fn run(&self) -> Result<Vec<TrackingSample>> {
        simulate_trajectory(&self.room()?, &self.waypoints, self.rate_hz, self.tracker, &self.noise, self.seed)
    }
}

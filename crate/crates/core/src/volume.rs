//! Voxel volumes standing in for CT data: phantom synthesis, persistence,
//! and detection of contrast-enhanced fiducial markers.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::DEFAULT_FIDUCIALS_FRAME;
use crate::geometry::{Point3, Vec3};

pub const MAGIC: &[u8; 4] = b"HNAV";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 3 * 8 + 3 * 8;

pub const BACKGROUND_HU: i16 = 0;
pub const TUMOR_HU: i16 = 300;
pub const FIDUCIAL_HU: i16 = 3000;
pub const DEFAULT_THRESHOLD: i16 = 1000;
pub const DEFAULT_MIN_VOXELS: usize = 3;
pub const DEFAULT_MAX_VOXELS: usize = 5000;

/// Sampling grid: voxel counts, mm per voxel, and the patient-frame
/// position of the centre of voxel (0, 0, 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Point3,
}

impl Grid {
    /// 240 mm cube at 1.5 mm, centred on the patient origin.
    pub fn default_head() -> Self {
        Grid::centred([160; 3], Vec3::new(1.5, 1.5, 1.5))
    }

    /// Grid whose voxel centres are symmetric about the patient origin.
    pub fn centred(dims: [usize; 3], spacing: Vec3) -> Self {
        let half = |n: usize, s: f64| -0.5 * (n as f64 - 1.0) * s;
        Grid {
            dims,
            spacing,
            origin: Vec3::new(
                half(dims[0], spacing.x),
                half(dims[1], spacing.y),
                half(dims[2], spacing.z),
            ),
        }
    }

    fn validate(&self) -> Result<()> {
        for (axis, n) in ["x", "y", "z"].iter().zip(self.dims) {
            if n == 0 {
                return Err(Error::invalid(format!("dims.{axis} must be positive")));
            }
        }
        self.dims
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::invalid("dims product overflows"))?;
        for (axis, s) in ["x", "y", "z"].iter().zip(self.spacing.to_array()) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("spacing.{axis} must be positive, got {s}")));
            }
        }
        if !self.origin.is_finite() {
            return Err(Error::invalid("origin must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patient-frame centres of the first and last voxel along each axis.
    pub fn centre_bounds(&self) -> (Point3, Point3) {
        let last = Vec3::new(
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        );
        (self.origin, self.origin + last.component_mul(&self.spacing))
    }

    fn index_coords(&self, p: Point3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.x / self.spacing.x, d.y / self.spacing.y, d.z / self.spacing.z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVolume {
    grid: Grid,
    /// x-fastest intensities.
    intensities: Vec<i16>,
}

impl VoxelVolume {
    pub fn new(grid: Grid, intensities: Vec<i16>) -> Result<Self> {
        grid.validate()?;
        if intensities.len() != grid.len() {
            return Err(Error::invalid(format!(
                "{} intensities for {:?} grid",
                intensities.len(),
                grid.dims
            )));
        }
        Ok(VoxelVolume { grid, intensities })
    }

    pub fn filled(grid: Grid, value: i16) -> Result<Self> {
        grid.validate()?;
        Ok(VoxelVolume {
            intensities: vec![value; grid.len()],
            grid,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.grid.spacing
    }

    pub fn origin(&self) -> Point3 {
        self.grid.origin
    }

    pub fn intensities(&self) -> &[i16] {
        &self.intensities
    }

    /// Same voxels, origin moved by `delta`.
    pub fn shifted(&self, delta: Vec3) -> VoxelVolume {
        let mut v = self.clone();
        v.grid.origin += delta;
        v
    }

    #[inline]
    fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid.dims[0] * (j + self.grid.dims[1] * k)
    }

    pub fn get(&self, ijk: [usize; 3]) -> Option<i16> {
        let [nx, ny, nz] = self.grid.dims;
        (ijk[0] < nx && ijk[1] < ny && ijk[2] < nz).then(|| self.intensities[self.flat(ijk[0], ijk[1], ijk[2])])
    }

    pub fn voxel_to_patient(&self, ijk: [usize; 3]) -> Result<Point3> {
        let dims = self.grid.dims;
        if ijk.iter().zip(dims).any(|(&i, n)| i >= n) {
            return Err(Error::invalid(format!("voxel {ijk:?} outside dims {dims:?}")));
        }
        let idx = Vec3::new(ijk[0] as f64, ijk[1] as f64, ijk[2] as f64);
        Ok(self.grid.origin + idx.component_mul(&self.grid.spacing))
    }

    /// Continuous voxel coordinates of a patient-frame point.
    pub fn patient_to_voxel(&self, p: Point3) -> [f64; 3] {
        self.grid.index_coords(p).to_array()
    }

    pub fn count_at_least(&self, threshold: i16) -> usize {
        self.intensities.iter().filter(|&&v| v >= threshold).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.intensities.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for n in self.grid.dims {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.grid.spacing.to_array().into_iter().chain(self.grid.origin.to_array()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.intensities {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("bad magic"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 3];
        for (d, name) in dims.iter_mut().zip(["dims.x", "dims.y", "dims.z"]) {
            let n = r.u32(name)?;
            if n == 0 {
                return Err(Error::format(format!("{name} must be positive")));
            }
            *d = n as usize;
        }
        let mut count = 1usize;
        for (n, name) in dims.iter().zip(["dims.x", "dims.y", "dims.z"]) {
            count = count
                .checked_mul(*n)
                .filter(|c| c.checked_mul(2).is_some())
                .ok_or_else(|| Error::format(format!("dim overflow at {name}")))?;
        }
        let mut spacing = [0.0; 3];
        for (s, name) in spacing.iter_mut().zip(["spacing.x", "spacing.y", "spacing.z"]) {
            *s = r.f64(name)?;
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::format(format!("{name} must be positive, got {s}")));
            }
        }
        let mut origin = [0.0; 3];
        for (o, name) in origin.iter_mut().zip(["origin.x", "origin.y", "origin.z"]) {
            *o = r.f64(name)?;
            if !o.is_finite() {
                return Err(Error::format(format!("{name} is not finite")));
            }
        }
        let raw = r.take(count * 2, "intensities")?;
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after intensities",
                bytes.len() - r.pos
            )));
        }
        let intensities = raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(VoxelVolume {
            grid: Grid {
                dims,
                spacing: spacing.into(),
                origin: origin.into(),
            },
            intensities,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        VoxelVolume::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("unexpected end of data reading {field}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Point3,
    /// Semi-axes along x, y, z in mm.
    pub semi_axes: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub background: i16,
    pub tumor: i16,
    pub fiducial: i16,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            background: BACKGROUND_HU,
            tumor: TUMOR_HU,
            fiducial: FIDUCIAL_HU,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub tumor: Option<Ellipsoid>,
    pub fiducial_centers: Vec<Point3>,
    pub fiducial_radius: f64,
    #[serde(default)]
    pub intensities: Intensities,
}

impl Default for PhantomSpec {
    /// A 70 × 60 × 60 mm tumour in the left frontal region plus the six
    /// default frame fiducials (identity mounting), radius 3 mm.
    fn default() -> Self {
        PhantomSpec {
            tumor: Some(Ellipsoid {
                center: Vec3::new(-25.0, 30.0, 20.0),
                semi_axes: Vec3::new(35.0, 30.0, 30.0),
            }),
            fiducial_centers: DEFAULT_FIDUCIALS_FRAME.iter().map(|p| Vec3::from(*p)).collect(),
            fiducial_radius: 3.0,
            intensities: Intensities::default(),
        }
    }
}

impl PhantomSpec {
    pub fn empty() -> Self {
        PhantomSpec {
            tumor: None,
            fiducial_centers: Vec::new(),
            fiducial_radius: 3.0,
            intensities: Intensities::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.fiducial_radius;
        if !self.fiducial_centers.is_empty() && !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("fiducial radius must be positive, got {r}")));
        }
        if let Some(t) = &self.tumor {
            let s = t.semi_axes;
            if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0 && s.is_finite() && t.center.is_finite()) {
                return Err(Error::invalid("tumor semi-axes must be positive and finite"));
            }
        }
        for (i, a) in self.fiducial_centers.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::invalid(format!("fiducial {i} is not finite")));
            }
            for (j, b) in self.fiducial_centers.iter().enumerate().skip(i + 1) {
                if a.distance(b) < 4.0 * r {
                    return Err(Error::invalid(format!(
                        "fiducials {i} and {j} are closer than 4 radii"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Voxel intensity = fiducial inside any fiducial sphere, else tumour
/// inside the ellipsoid, else background (tested at voxel centres).
pub fn synthesize_phantom(spec: &PhantomSpec, grid: Grid) -> Result<VoxelVolume> {
    spec.validate()?;
    let mut vol = VoxelVolume::filled(grid, spec.intensities.background)?;
    let (lo, hi) = grid.centre_bounds();
    let r = spec.fiducial_radius;
    for (i, c) in spec.fiducial_centers.iter().enumerate() {
        let inside = (c.x - r >= lo.x && c.x + r <= hi.x)
            && (c.y - r >= lo.y && c.y + r <= hi.y)
            && (c.z - r >= lo.z && c.z + r <= hi.z);
        if !inside {
            return Err(Error::invalid(format!(
                "fiducial {i} at {c:?} (radius {r}) is not fully inside the volume"
            )));
        }
    }

    if let Some(t) = &spec.tumor {
        let s = t.semi_axes;
        paint_box(&mut vol, t.center, s, spec.intensities.tumor, |d| {
            (d.x / s.x).powi(2) + (d.y / s.y).powi(2) + (d.z / s.z).powi(2) <= 1.0
        });
    }
    for c in &spec.fiducial_centers {
        let r2 = r * r;
        paint_box(&mut vol, *c, Vec3::new(r, r, r), spec.intensities.fiducial, |d| {
            d.norm_squared() <= r2
        });
    }
    Ok(vol)
}

/// Sets `value` on voxels within the bounding box `center ± half` whose
/// offset from `center` satisfies `inside`.
fn paint_box(vol: &mut VoxelVolume, center: Point3, half: Vec3, value: i16, inside: impl Fn(Vec3) -> bool) {
    let g = vol.grid;
    let lo = g.index_coords(center - half);
    let hi = g.index_coords(center + half);
    let range = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let a = lo.ceil().max(0.0);
        let b = hi.floor().min(n as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    };
    let (Some((i0, i1)), Some((j0, j1)), Some((k0, k1))) = (
        range(lo.x, hi.x, g.dims[0]),
        range(lo.y, hi.y, g.dims[1]),
        range(lo.z, hi.z, g.dims[2]),
    ) else {
        return;
    };
    for k in k0..=k1 {
        let z = g.origin.z + k as f64 * g.spacing.z - center.z;
        for j in j0..=j1 {
            let y = g.origin.y + j as f64 * g.spacing.y - center.y;
            for i in i0..=i1 {
                let x = g.origin.x + i as f64 * g.spacing.x - center.x;
                if inside(Vec3::new(x, y, z)) {
                    let idx = vol.flat(i, j, k);
                    vol.intensities[idx] = value;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedFiducial {
    pub centroid: Point3,
    pub voxel_count: usize,
    pub peak_intensity: i16,
}

/// One detection per 26-connected component of voxels `>= threshold` whose
/// size lies in `[min_voxels, max_voxels]`.
///
/// Centroids are intensity-weighted means of voxel centres. Output is
/// sorted by descending voxel count, then lexicographically by centroid.
pub fn detect_fiducials(
    v: &VoxelVolume,
    threshold: i16,
    min_voxels: usize,
    max_voxels: usize,
) -> Vec<DetectedFiducial> {
    let [nx, ny, nz] = v.grid.dims;
    let mut visited = vec![false; v.intensities.len()];
    let mut queue = VecDeque::new();
    let mut found = Vec::new();

    for start in 0..v.intensities.len() {
        if visited[start] || v.intensities[start] < threshold {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);

        let mut acc = ComponentAccumulator::default();
        while let Some(idx) = queue.pop_front() {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            acc.add([i, j, k], v.intensities[idx]);

            for dk in -1i64..=1 {
                let kk = k as i64 + dk;
                if kk < 0 || kk >= nz as i64 {
                    continue;
                }
                for dj in -1i64..=1 {
                    let jj = j as i64 + dj;
                    if jj < 0 || jj >= ny as i64 {
                        continue;
                    }
                    for di in -1i64..=1 {
                        let ii = i as i64 + di;
                        if ii < 0 || ii >= nx as i64 {
                            continue;
                        }
                        let n = v.flat(ii as usize, jj as usize, kk as usize);
                        if !visited[n] && v.intensities[n] >= threshold {
                            visited[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }

        if (min_voxels..=max_voxels).contains(&acc.count) {
            found.push(acc.finish(&v.grid));
        }
    }

    found.sort_by(|a, b| {
        b.voxel_count
            .cmp(&a.voxel_count)
            .then(a.centroid.x.total_cmp(&b.centroid.x))
            .then(a.centroid.y.total_cmp(&b.centroid.y))
            .then(a.centroid.z.total_cmp(&b.centroid.z))
    });
    found
}

#[derive(Default)]
struct ComponentAccumulator {
    count: usize,
    peak: i16,
    weight: f64,
    weighted: [f64; 3],
    unweighted: [f64; 3],
}

impl ComponentAccumulator {
    fn add(&mut self, ijk: [usize; 3], value: i16) {
        if self.count == 0 || value > self.peak {
            self.peak = value;
        }
        self.count += 1;
        let w = value as f64;
        self.weight += w;
        for a in 0..3 {
            self.weighted[a] += w * ijk[a] as f64;
            self.unweighted[a] += ijk[a] as f64;
        }
    }

    fn finish(&self, grid: &Grid) -> DetectedFiducial {
        // Non-positive total weight only happens with thresholds <= 0;
        // fall back to the plain mean there.
        let idx = if self.weight > 0.0 {
            self.weighted.map(|s| s / self.weight)
        } else {
            self.unweighted.map(|s| s / self.count as f64)
        };
        DetectedFiducial {
            centroid: grid.origin + Vec3::from(idx).component_mul(&grid.spacing),
            voxel_count: self.count,
            peak_intensity: self.peak,
        }
    }
}

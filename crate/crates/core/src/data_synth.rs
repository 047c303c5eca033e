//! Synthetic LiDAR-like scenes and the `.fsds` scene file format.
//!
//! Objects are oriented boxes standing on the ground plane `z = 0`. Only the
//! faces visible from the sensor get points, so a box's interior, and the
//! center of any large box, stays empty. Point density falls with
//! the squared distance to the sensor. The total point count is a fixed
//! budget, independent of the perception range.
//!
//! # File format
//!
//! All values little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"FSDS"` |
//! | version | `u32` (= 1) |
//! | point count | `u32` |
//! | box count | `u32` |
//! | range_m | `f32` |
//! | seed | `u64` |
//! | points | count × (x, y, z, intensity) as `f32` |
//! | boxes | count × (cx, cy, cz, l, w, h, yaw) as `f32`, class as `u16` |

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{FsdError, Result};
use crate::geometry::{bev_intersection_area, point_in_box, Box3D, PointCloud};

pub const MAGIC: &[u8; 4] = b"FSDS";
pub const FORMAT_VERSION: u32 = 1;
pub const NUM_CLASSES: usize = 4;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 8;
const POINT_LEN: usize = 16;
const BOX_LEN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle = 0,
    LargeVehicle = 1,
    Pedestrian = 2,
    Cyclist = 3,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; NUM_CLASSES] = [
        ObjectClass::Vehicle,
        ObjectClass::LargeVehicle,
        ObjectClass::Pedestrian,
        ObjectClass::Cyclist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::LargeVehicle => "large_vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }

    pub fn is_vehicle_like(self) -> bool {
        matches!(self, ObjectClass::Vehicle | ObjectClass::LargeVehicle)
    }

    /// Uniform sampling ranges for (l, w, h), meters.
    fn size_ranges(self) -> [(f64, f64); 3] {
        match self {
            ObjectClass::Vehicle => [(3.8, 5.2), (1.7, 2.1), (1.4, 1.8)],
            ObjectClass::LargeVehicle => [(8.0, 20.0), (2.4, 2.6), (3.0, 3.8)],
            ObjectClass::Pedestrian => [(0.5, 0.9), (0.5, 0.9), (1.6, 1.9)],
            ObjectClass::Cyclist => [(1.6, 1.9), (0.6, 0.8), (1.6, 1.8)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: Box3D,
    pub class: ObjectClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub pc: PointCloud,
    pub gt: Vec<GtObject>,
    pub range_m: f64,
    pub seed: u64,
}

impl Scene {
    /// Index of the first ground-truth box containing each point.
    pub fn point_box_labels(&self) -> Vec<Option<usize>> {
        self.pc
            .coords
            .iter()
            .map(|&p| self.gt.iter().position(|g| point_in_box(p, &g.bbox)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.pc.validate()?;
        for g in &self.gt {
            g.bbox.validate()?;
        }
        Ok(())
    }
}

#[inline]
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_box(b: &Box3D) -> Box3D {
    Box3D {
        cx: q32(b.cx),
        cy: q32(b.cy),
        cz: q32(b.cz),
        l: q32(b.l),
        w: q32(b.w),
        h: q32(b.h),
        yaw: q32(b.yaw),
    }
}

/// Derives a per-scene seed from a base seed, a split tag and an index.
pub fn scene_seed(base: u64, split: &str, index: usize) -> u64 {
    let tag = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    let mut z = base ^ tag ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Face {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    normal: [f64; 3],
    area: f64,
}

/// Faces of `b` visible from a sensor at `(0, 0, sensor_h)`.
fn visible_faces(b: &Box3D, sensor_h: f64) -> Vec<Face> {
    let (hl, hw, hh) = (0.5 * b.l, 0.5 * b.w, 0.5 * b.h);
    let (s, c) = b.yaw.sin_cos();
    let rot = |x: f64, y: f64| [c * x - s * y, s * x + c * y];
    let world = |x: f64, y: f64, z: f64| {
        let r = rot(x, y);
        [b.cx + r[0], b.cy + r[1], b.cz + z]
    };
    let mut faces = Vec::with_capacity(3);
    // four sides: (local normal, local origin corner, u extent along local axis)
    let sides = [
        ([1.0, 0.0], world(hl, -hw, -hh), rot(0.0, b.w), b.w),
        ([-1.0, 0.0], world(-hl, -hw, -hh), rot(0.0, b.w), b.w),
        ([0.0, 1.0], world(-hl, hw, -hh), rot(b.l, 0.0), b.l),
        ([0.0, -1.0], world(-hl, -hw, -hh), rot(b.l, 0.0), b.l),
    ];
    for (n_local, origin, u, len) in sides {
        let n = rot(n_local[0], n_local[1]);
        // face center
        let fc = [origin[0] + 0.5 * u[0], origin[1] + 0.5 * u[1]];
        let to_sensor = [-fc[0], -fc[1]];
        if n[0] * to_sensor[0] + n[1] * to_sensor[1] > 0.0 {
            faces.push(Face {
                origin,
                u: [u[0], u[1], 0.0],
                v: [0.0, 0.0, b.h],
                normal: [n[0], n[1], 0.0],
                area: len * b.h,
            });
        }
    }
    if sensor_h > b.z_max() {
        let l = rot(b.l, 0.0);
        let w = rot(0.0, b.w);
        faces.push(Face {
            origin: world(-hl, -hw, hh),
            u: [l[0], l[1], 0.0],
            v: [w[0], w[1], 0.0],
            normal: [0.0, 0.0, 1.0],
            area: b.l * b.w,
        });
    }
    faces
}

fn sample_class<R: Rng>(rng: &mut R, mix: &[f64; 4]) -> ObjectClass {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in mix.iter().enumerate() {
        if u < w {
            return ObjectClass::ALL[i];
        }
        u -= w;
    }
    ObjectClass::Cyclist
}

/// Largest-remainder split of `total` proportional to `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

/// Statistics reported alongside a generated scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerateStats {
    pub requested_objects: usize,
    pub placed_objects: usize,
}

/// Generates a scene with the given half-range and seed.
pub fn generate(cfg: &DataConfig, range_m: f64, seed: u64, id: impl Into<String>) -> Result<Scene> {
    generate_with_stats(cfg, range_m, seed, id).map(|(s, _)| s)
}

pub fn generate_with_stats(
    cfg: &DataConfig,
    range_m: f64,
    seed: u64,
    id: impl Into<String>,
) -> Result<(Scene, GenerateStats)> {
    if cfg.point_budget == 0 {
        return Err(FsdError::contract("point budget must be positive"));
    }
    if !(range_m > 0.0) {
        return Err(FsdError::contract("range must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = (2.0 * range_m) * (2.0 * range_m);
    let expected = cfg.objects_per_1000m2 * area / 1000.0;
    let requested = ((expected * rng.random_range(0.75..1.25)).round() as usize).clamp(1, cfg.max_objects.max(1));

    // place boxes without BEV overlap (with a gap) inside the range
    let mut gt: Vec<GtObject> = Vec::with_capacity(requested);
    for _ in 0..requested {
        let class = sample_class(&mut rng, &cfg.class_mix);
        let [lr, wr, hr] = class.size_ranges();
        let l = rng.random_range(lr.0..=lr.1);
        let w = rng.random_range(wr.0..=wr.1);
        let h = rng.random_range(hr.0..=hr.1);
        for _attempt in 0..50 {
            // stay clear of ±π so f32 rounding keeps yaw in (−π, π]
            let yaw = rng.random_range(-PI + 1e-3..PI - 1e-3);
            let cx = rng.random_range(-range_m..range_m);
            let cy = rng.random_range(-range_m..range_m);
            if cx.hypot(cy) < 4.0 + 0.5 * l {
                continue;
            }
            let Ok(b) = Box3D::new([cx, cy, 0.5 * h], [l, w, h], yaw) else {
                continue;
            };
            let b = quantize_box(&b);
            let [x0, y0, x1, y1] = b.bev_bounds();
            if x0 < -range_m || y0 < -range_m || x1 > range_m || y1 > range_m {
                continue;
            }
            let grown = b.enlarged(0.6);
            if gt
                .iter()
                .any(|o| bev_intersection_area(&grown, &o.bbox.enlarged(0.6)) > 0.0)
            {
                continue;
            }
            gt.push(GtObject { bbox: b, class });
            break;
        }
    }

    let budget = cfg.point_budget;
    let faces: Vec<Vec<Face>> = gt.iter().map(|o| visible_faces(&o.bbox, cfg.sensor_height)).collect();
    let mut object_budget = if gt.is_empty() {
        0
    } else {
        ((budget as f64 * cfg.object_fraction).round() as usize).min(budget)
    };
    let weights: Vec<f64> = gt
        .iter()
        .zip(&faces)
        .map(|(o, fs)| {
            let d = o.bbox.cx.hypot(o.bbox.cy).max(5.0);
            fs.iter().map(|f| f.area).sum::<f64>() / (d * d)
        })
        .collect();
    let floor = if gt.is_empty() {
        0
    } else {
        cfg.min_points_per_object.min(object_budget / gt.len())
    };
    object_budget = object_budget.max(gt.len().min(budget));
    let floor = floor.max(usize::from(object_budget >= gt.len()));
    let mut per_object = apportion(object_budget - floor * gt.len(), &weights);
    per_object.iter_mut().for_each(|c| *c += floor);

    let mut coords: Vec<[f64; 3]> = Vec::with_capacity(budget);
    let mut intensity: Vec<f64> = Vec::with_capacity(budget);
    for ((o, fs), &count) in gt.iter().zip(&faces).zip(&per_object) {
        let areas: Vec<f64> = fs.iter().map(|f| f.area).collect();
        let per_face = apportion(count, &areas);
        for (f, &k) in fs.iter().zip(&per_face) {
            for _ in 0..k {
                let a = rng.random_range(0.0..=1.0);
                let b = rng.random_range(0.0..=1.0);
                let inward = 0.01 + rng.random_range(0.0..0.03);
                let mut p = [0.0; 3];
                for d in 0..3 {
                    p[d] = f.origin[d] + a * f.u[d] + b * f.v[d] - inward * f.normal[d];
                }
                // keep the sample strictly inside after f32 rounding
                let local = o.bbox.to_local(p);
                let clamp = |v: f64, half: f64| v.clamp(-half + 0.005, half - 0.005);
                let local = [
                    clamp(local[0], 0.5 * o.bbox.l),
                    clamp(local[1], 0.5 * o.bbox.w),
                    clamp(local[2], 0.5 * o.bbox.h),
                ];
                let p = o.bbox.to_world(local).map(q32);
                coords.push(p);
                intensity.push(q32(rng.random_range(0.2..1.0)));
            }
        }
    }

    // ground and clutter fill the rest of the budget
    let rest = budget - coords.len();
    let clutter_n = (rest as f64 * cfg.clutter_fraction).round() as usize;
    let ground_n = rest - clutter_n;
    let outside_boxes = |p: [f64; 3]| gt.iter().all(|o| !point_in_box(p, &o.bbox.enlarged(0.15)));
    let r_min = 2.0f64;
    let r_max = range_m * std::f64::consts::SQRT_2;
    let mut made = 0;
    while made < ground_n {
        let theta = rng.random_range(-PI..PI);
        let r = r_min * (r_max / r_min).powf(rng.random_range(0.0..1.0));
        let p = [r * theta.cos(), r * theta.sin(), rng.random_range(-0.05..0.05)];
        if p[0].abs() > range_m || p[1].abs() > range_m || !outside_boxes(p) {
            continue;
        }
        coords.push(p.map(q32));
        intensity.push(q32(rng.random_range(0.0..0.4)));
        made += 1;
    }
    // clutter: thin poles and low bushes scattered like the ground
    let mut made = 0;
    while made < clutter_n {
        let theta = rng.random_range(-PI..PI);
        let r = r_min * (r_max / r_min).powf(rng.random_range(0.0..1.0));
        let base = [r * theta.cos(), r * theta.sin()];
        let pole = rng.random_bool(0.5);
        let (height, radius) = if pole {
            (rng.random_range(1.5..4.0), 0.15)
        } else {
            (rng.random_range(0.3..1.0), 0.8)
        };
        let k = rng.random_range(3..=10).min(clutter_n - made);
        for _ in 0..k {
            let a = rng.random_range(-PI..PI);
            let rr = radius * rng.random_range(0.0f64..1.0).sqrt();
            let p = [
                base[0] + rr * a.cos(),
                base[1] + rr * a.sin(),
                rng.random_range(0.0..height),
            ];
            if p[0].abs() > range_m || p[1].abs() > range_m || !outside_boxes(p) {
                continue;
            }
            coords.push(p.map(q32));
            intensity.push(q32(rng.random_range(0.0..0.6)));
            made += 1;
        }
    }

    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.shuffle(&mut rng);
    let coords: Vec<[f64; 3]> = order.iter().map(|&i| coords[i]).collect();
    let intensity: Vec<f64> = order.iter().map(|&i| intensity[i]).collect();

    let pc = PointCloud::with_intensity(coords, intensity)?;
    // every kept box must own at least one point
    let mut has_point = vec![false; gt.len()];
    for &p in &pc.coords {
        for (k, o) in gt.iter().enumerate() {
            if !has_point[k] && point_in_box(p, &o.bbox) {
                has_point[k] = true;
            }
        }
    }
    let mut k = 0;
    gt.retain(|_| {
        k += 1;
        has_point[k - 1]
    });
    let stats = GenerateStats {
        requested_objects: requested,
        placed_objects: gt.len(),
    };
    Ok((
        Scene {
            id: id.into(),
            pc,
            gt,
            range_m: q32(range_m),
            seed,
        },
        stats,
    ))
}

/// Serializes a scene to the `.fsds` byte layout.
pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let n = scene.pc.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * POINT_LEN + scene.gt.len() * BOX_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(scene.gt.len() as u32).to_le_bytes());
    out.extend_from_slice(&(scene.range_m as f32).to_le_bytes());
    out.extend_from_slice(&scene.seed.to_le_bytes());
    for (i, p) in scene.pc.coords.iter().enumerate() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(scene.pc.intensity_at(i) as f32).to_le_bytes());
    }
    for g in &scene.gt {
        let b = &g.bbox;
        for v in [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(g.class as u16).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(FsdError::format(
                self.path,
                format!("truncated file: needed {end} bytes, have {}", self.buf.len()),
            ));
        }
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take()?) as f64)
    }
}

/// Parses `.fsds` bytes. `path` and `id` label errors and the scene.
pub fn decode_scene(bytes: &[u8], path: &Path, id: impl Into<String>) -> Result<Scene> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    let magic: [u8; 4] = r.take()?;
    if &magic != MAGIC {
        return Err(FsdError::format(path, "bad magic, not an FSDS scene"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FsdError::format(
            path,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let range_m = r.f32()?;
    let seed = u64::from_le_bytes(r.take()?);
    let expected = HEADER_LEN + n * POINT_LEN + m * BOX_LEN;
    if bytes.len() < expected {
        return Err(FsdError::format(
            path,
            format!("truncated file: header promises {expected} bytes, have {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(FsdError::format(path, "trailing bytes after last box record"));
    }
    let mut coords = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.f32()?, r.f32()?, r.f32()?]);
        intensity.push(r.f32()?);
    }
    let mut gt = Vec::with_capacity(m);
    for _ in 0..m {
        let v: Vec<f64> = (0..7).map(|_| r.f32()).collect::<Result<_>>()?;
        let class_id = u16::from_le_bytes(r.take()?);
        let class = ObjectClass::from_index(class_id as usize)
            .ok_or_else(|| FsdError::format(path, format!("unknown class id {class_id}")))?;
        let bbox = Box3D {
            cx: v[0],
            cy: v[1],
            cz: v[2],
            l: v[3],
            w: v[4],
            h: v[5],
            yaw: v[6],
        };
        bbox.validate().map_err(|e| FsdError::format(path, e.to_string()))?;
        gt.push(GtObject { bbox, class });
    }
    let pc = PointCloud::with_intensity(coords, intensity)?;
    pc.validate().map_err(|e| FsdError::format(path, e.to_string()))?;
    Ok(Scene {
        id: id.into(),
        pc,
        gt,
        range_m,
        seed,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| FsdError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| FsdError::io(path, e))?;
    f.write_all(&encode_scene(scene)).map_err(|e| FsdError::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| FsdError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_scene(&bytes, path, id)
}

/// `<root>/<split>/<scene_id>.fsds`
pub fn scene_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join(split).join(format!("{id}.fsds"))
}

/// Generates `count` scenes of a split; scene `i` is named `{i:06}`.
pub fn generate_split(cfg: &DataConfig, base_seed: u64, split: &str, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate(cfg, cfg.range_m, scene_seed(base_seed, split, i), format!("{i:06}")))
        .collect()
}

/// Loads every `.fsds` file of a split, sorted by file name.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Scene>> {
    let dir = root.join(split);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| FsdError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fsds"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig::default()
    }

    #[test]
    fn budget_is_respected() {
        let mut c = cfg();
        c.point_budget = 1000;
        let s = generate(&c, 25.0, 1, "a").unwrap();
        assert!(s.pc.len() <= 1000);
        assert_eq!(s.pc.len(), 1000);
    }

    #[test]
    fn all_points_within_range_and_boxes_valid() {
        let s = generate(&cfg(), 30.0, 5, "a").unwrap();
        assert!(s.pc.coords.iter().all(|p| p[0].abs() <= 30.0 && p[1].abs() <= 30.0));
        s.validate().unwrap();
        let labels = s.point_box_labels();
        for k in 0..s.gt.len() {
            assert!(labels.contains(&Some(k)), "box {k} has no point");
        }
    }

    #[test]
    fn faces_only_sampling_leaves_center_empty() {
        let mut c = cfg();
        c.class_mix = [0.0, 1.0, 0.0, 0.0];
        c.point_budget = 4000;
        c.object_fraction = 0.9;
        let s = generate(&c, 30.0, 2, "big").unwrap();
        let mut checked = 0;
        for g in s.gt.iter().filter(|g| g.bbox.l >= 12.0) {
            // a core box around the center, well away from every face
            let core = Box3D {
                l: g.bbox.l - 2.0,
                w: g.bbox.w - 1.0,
                h: g.bbox.h - 1.0,
                ..g.bbox
            };
            assert!(s.pc.coords.iter().all(|&p| !point_in_box(p, &core)));
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn scene_bytes_are_reproducible() {
        let a = encode_scene(&generate(&cfg(), 25.0, 9, "x").unwrap());
        let b = encode_scene(&generate(&cfg(), 25.0, 9, "x").unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn decode_rejects_bad_input() {
        let s = generate(&cfg(), 25.0, 4, "x").unwrap();
        let bytes = encode_scene(&s);
        let p = Path::new("t.fsds");
        assert!(decode_scene(&bytes[..bytes.len() - 3], p, "x").is_err());
        let mut v = bytes.clone();
        v[4] = 9;
        let err = decode_scene(&v, p, "x").unwrap_err();
        assert!(err.to_string().contains("version"));
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(decode_scene(&v, p, "x").is_err());
        assert!(decode_scene(&bytes[..10], p, "x").is_err());
    }

    #[test]
    fn empty_scene_roundtrip() {
        let s = Scene {
            id: "e".into(),
            pc: PointCloud::with_intensity(vec![], vec![]).unwrap(),
            gt: vec![],
            range_m: 10.0,
            seed: 0,
        };
        let back = decode_scene(&encode_scene(&s), Path::new("e"), "e").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn apportion_sums_exactly() {
        let v = apportion(10, &[1.0, 1.0, 1.0]);
        assert_eq!(v.iter().sum::<usize>(), 10);
        assert_eq!(apportion(5, &[]), Vec::<usize>::new());
    }
}

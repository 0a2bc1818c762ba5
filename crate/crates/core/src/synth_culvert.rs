//! Ray-cast renderer for a capped, value-noise textured tube seen by a
//! pinhole camera carrying its own light. Ground-truth poses and depth come
//! for free, which makes it the reference fixture for the rest of the crate.
//!
//! Camera frame: x right, y down, z forward. Pose rotations map camera to
//! world; the tube axis is world z.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::image_io::{save_png, FrameSequence, GrayImage, ImageIoError};
use crate::sim3_align::{write_poses, AlignError, Pose, PoseId};

const DEPTH_MAGIC: &[u8; 4] = b"CDEP";
const OCTAVE_WEIGHTS: [f64; 3] = [0.55, 0.3, 0.15];
const CONTRAST_GAIN: f64 = 2.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Poses(#[from] AlignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad depth file: {0}")]
    DepthFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Wall,
    StartCap,
    EndCap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub point: Vector3<f64>,
    /// Points back into the tube.
    pub normal: Vector3<f64>,
    pub distance: f64,
    pub surface: Surface,
}

/// Nearest forward hit of a ray starting inside the tube `x²+y² < r²,
/// 0 < z < length`; `None` only for a zero direction.
pub fn ray_cylinder_intersect(origin: Vector3<f64>, direction: Vector3<f64>, radius: f64, length: f64) -> Option<Hit> {
    let mut best: Option<(f64, Surface)> = None;
    let a = direction.x * direction.x + direction.y * direction.y;
    if a > 0.0 {
        let b = 2.0 * (origin.x * direction.x + origin.y * direction.y);
        let c = origin.x * origin.x + origin.y * origin.y - radius * radius;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let t = if q != 0.0 { (q / a).max(c / q) } else { (-c / a).sqrt() };
        if t > 0.0 {
            best = Some((t, Surface::Wall));
        }
    }
    let cap = if direction.z > 0.0 {
        Some(((length - origin.z) / direction.z, Surface::EndCap))
    } else if direction.z < 0.0 {
        Some((-origin.z / direction.z, Surface::StartCap))
    } else {
        None
    };
    if let Some((t, s)) = cap {
        if t > 0.0 && best.is_none_or(|(tw, _)| t < tw) {
            best = Some((t, s));
        }
    }
    let (t, surface) = best?;
    let point = origin + direction * t;
    let normal = match surface {
        Surface::Wall => Vector3::new(-point.x, -point.y, 0.0) / radius,
        Surface::StartCap => Vector3::z(),
        Surface::EndCap => -Vector3::z(),
    };
    Some(Hit { point, normal, distance: t, surface })
}

fn lattice_hash(seed: u64, octave: u64, i: i64, j: i64) -> f64 {
    let mut z = seed
        ^ octave.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (i as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (j as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise on a lattice; `period_u` wraps the first coordinate.
fn value_noise(seed: u64, octave: u64, su: f64, sv: f64, period_u: Option<i64>) -> f64 {
    let (i0, j0) = (su.floor(), sv.floor());
    let (fu, fv) = (smooth(su - i0), smooth(sv - j0));
    let (i0, j0) = (i0 as i64, j0 as i64);
    let wrap = |i: i64| period_u.map_or(i, |p| i.rem_euclid(p));
    let v00 = lattice_hash(seed, octave, wrap(i0), j0);
    let v10 = lattice_hash(seed, octave, wrap(i0 + 1), j0);
    let v01 = lattice_hash(seed, octave, wrap(i0), j0 + 1);
    let v11 = lattice_hash(seed, octave, wrap(i0 + 1), j0 + 1);
    let top = v00 + (v10 - v00) * fu;
    let bottom = v01 + (v11 - v01) * fu;
    top + (bottom - top) * fv
}

fn stretch(v: f64) -> f64 {
    (0.5 + (v - 0.5) * CONTRAST_GAIN).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub radius: f64,
    pub length: f64,
    pub texture_seed: u64,
    /// Noise cycles per meter along the wall.
    pub texture_scale: f64,
    /// Shading is `clamp(1 / (light_falloff * d²), 0, 1)`.
    pub light_falloff: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub trajectory: Vec<Pose>,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(self.radius > 0.0 && self.length > 0.0) {
            return bad(format!("radius {} and length {} must be positive", self.radius, self.length));
        }
        if !(self.texture_scale > 0.0 && self.light_falloff > 0.0 && self.focal > 0.0) {
            return bad("texture_scale, light_falloff and focal must be positive".into());
        }
        if self.width < 32 || self.height < 32 {
            return bad(format!("image {}x{} below 32x32", self.width, self.height));
        }
        if self.trajectory.is_empty() {
            return bad("empty trajectory".into());
        }
        for p in &self.trajectory {
            let c = p.center;
            if c.x * c.x + c.y * c.y >= self.radius * self.radius || c.z <= 0.0 || c.z >= self.length {
                return bad(format!("camera {} at {:?} is outside the tube", p.id, c.as_slice()));
            }
        }
        Ok(())
    }

    fn wall_cells(&self) -> i64 {
        ((TAU * self.radius * self.texture_scale).round() as i64).max(1)
    }

    /// Texture in [0, 1] at wall angle `u` (radians) and axial position `z`.
    pub fn wall_texture(&self, u: f64, z: f64) -> f64 {
        let cells = self.wall_cells();
        let su = (u / TAU).rem_euclid(1.0);
        let mut v = 0.0;
        for (o, w) in OCTAVE_WEIGHTS.iter().enumerate() {
            let k = 1i64 << o;
            let p = cells * k;
            v += w * value_noise(self.texture_seed, o as u64, su * p as f64, z * self.texture_scale * k as f64, Some(p));
        }
        stretch(v)
    }

    fn cap_texture(&self, x: f64, y: f64, end: bool) -> f64 {
        let seed = self.texture_seed ^ if end { 0xE11D } else { 0x5747 };
        let mut v = 0.0;
        for (o, w) in OCTAVE_WEIGHTS.iter().enumerate() {
            let f = self.texture_scale * (1u64 << o) as f64;
            v += w * value_noise(seed, o as u64, x * f, y * f, None);
        }
        stretch(v)
    }

    pub fn principal_point(&self) -> [f64; 2] {
        [(self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0]
    }

    /// Unit world-space ray through pixel `(x, y)`.
    pub fn pixel_ray(&self, pose: &Pose, x: f64, y: f64) -> Vector3<f64> {
        let [cx, cy] = self.principal_point();
        (pose.rotation * Vector3::new((x - cx) / self.focal, (y - cy) / self.focal, 1.0)).normalize()
    }

    /// Pixel position of a world point, `None` behind the camera.
    pub fn project(&self, pose: &Pose, point: &Vector3<f64>) -> Option<[f64; 2]> {
        let pc = pose.rotation.transpose() * (point - pose.center);
        if pc.z <= 0.0 {
            return None;
        }
        let [cx, cy] = self.principal_point();
        Some([self.focal * pc.x / pc.z + cx, self.focal * pc.y / pc.z + cy])
    }

    /// Shaded intensity in [0, 1] and hit for one pixel.
    pub fn shade_pixel(&self, pose: &Pose, x: usize, y: usize) -> (f64, Hit) {
        let ray = self.pixel_ray(pose, x as f64, y as f64);
        let hit = ray_cylinder_intersect(pose.center, ray, self.radius, self.length).expect("ray from inside a capped tube always hits");
        let tex = match hit.surface {
            Surface::Wall => self.wall_texture(hit.point.y.atan2(hit.point.x), hit.point.z),
            Surface::StartCap => self.cap_texture(hit.point.x, hit.point.y, false),
            Surface::EndCap => self.cap_texture(hit.point.x, hit.point.y, true),
        };
        let light = (1.0 / (self.light_falloff * hit.distance * hit.distance)).clamp(0.0, 1.0);
        (tex * light, hit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Ray length in meters, row-major.
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub frames: FrameSequence,
    pub poses: Vec<Pose>,
    pub depth_maps: Vec<DepthMap>,
}

pub fn render_frame(config: &SceneConfig, pose: &Pose) -> (GrayImage, DepthMap) {
    let (w, h) = (config.width, config.height);
    let mut pixels = vec![0u8; w * h];
    let mut depth = vec![0f32; w * h];
    pixels
        .par_chunks_mut(w)
        .zip(depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, drow))| {
            for x in 0..w {
                let (v, hit) = config.shade_pixel(pose, x, y);
                row[x] = (v * 255.0).round() as u8;
                drow[x] = hit.distance as f32;
            }
        });
    let image = GrayImage::new(w, h, pixels).expect("buffer sized from config");
    (image, DepthMap { width: w, height: h, values: depth })
}

pub fn render_scene(config: &SceneConfig) -> Result<RenderedScene, SynthError> {
    config.validate()?;
    if config.trajectory.len() < 2 {
        return Err(SynthError::InvalidConfig("a sequence needs at least two poses".into()));
    }
    let (images, depth_maps): (Vec<_>, Vec<_>) = config.trajectory.iter().map(|p| render_frame(config, p)).unzip();
    let frames = FrameSequence::from_images(images, format!("synthetic seed {}", config.texture_seed))?;
    Ok(RenderedScene {
        frames,
        poses: config.trajectory.clone(),
        depth_maps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Dolly,
    Pan,
    Tilt,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dolly" => Ok(Preset::Dolly),
            "pan" => Ok(Preset::Pan),
            "tilt" => Ok(Preset::Tilt),
            other => Err(format!("unknown preset `{other}` (dolly, pan, tilt)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryParams {
    pub start_z: f64,
    /// Forward travel per frame (m).
    pub step: f64,
    /// Per-frame yaw (pan) or yaw+pitch (tilt), degrees.
    pub turn_step_deg: f64,
    /// Per-frame rotation about the viewing axis, degrees.
    pub roll_step_deg: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            start_z: 1.0,
            step: 0.1,
            turn_step_deg: 1.0,
            roll_step_deg: 0.0,
        }
    }
}

pub fn preset_trajectory(preset: Preset, frames: usize, params: &TrajectoryParams) -> Vec<Pose> {
    (0..frames)
        .map(|k| {
            let kf = k as f64;
            let turn = (params.turn_step_deg * kf).to_radians();
            let (yaw, pitch) = match preset {
                Preset::Dolly => (0.0, 0.0),
                Preset::Pan => (turn, 0.0),
                Preset::Tilt => (turn, turn),
            };
            let roll = (params.roll_step_deg * kf).to_radians();
            let rotation: Matrix3<f64> = *(Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
                * Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch)
                * Rotation3::from_axis_angle(&Vector3::z_axis(), roll))
            .matrix();
            Pose {
                id: PoseId::Index(k as u64),
                rotation,
                center: Vector3::new(0.0, 0.0, params.start_z + params.step * kf),
            }
        })
        .collect()
}

pub fn write_depth(depth: &DepthMap, path: &Path) -> Result<(), SynthError> {
    let mut out = Vec::with_capacity(12 + 4 * depth.values.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for v in &depth.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthMap, SynthError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(SynthError::DepthFormat("missing header".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (width, height) = (word(4), word(8));
    if bytes.len() != 12 + 4 * width * height {
        return Err(SynthError::DepthFormat(format!("{} bytes for {width}x{height}", bytes.len())));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(DepthMap { width, height, values })
}

/// `frame_XXXX.png`, `poses.json` and optionally `depth_XXXX.bin`.
pub fn write_scene(scene: &RenderedScene, dir: &Path, with_depth: bool) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    for frame in scene.frames.frames() {
        save_png(frame.image(), &dir.join(format!("frame_{:04}.png", frame.index())))?;
    }
    write_poses(&scene.poses, &dir.join("poses.json"))?;
    if with_depth {
        for (k, d) in scene.depth_maps.iter().enumerate() {
            write_depth(d, &dir.join(format!("depth_{k:04}.bin")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::detect_keypoints;
    use crate::image_io::Frame;

    fn config(frames: usize, preset: Preset, step: f64) -> SceneConfig {
        SceneConfig {
            radius: 1.0,
            length: 20.0,
            texture_seed: 7,
            texture_scale: 4.0,
            light_falloff: 0.05,
            width: 96,
            height: 72,
            focal: 80.0,
            trajectory: preset_trajectory(preset, frames, &TrajectoryParams { step, ..Default::default() }),
        }
    }

    #[test]
    fn intersection_examples() {
        let h = ray_cylinder_intersect(Vector3::new(0.0, 0.0, 3.0), Vector3::x(), 2.0, 10.0).unwrap();
        assert_eq!(h.surface, Surface::Wall);
        assert!((h.point - Vector3::new(2.0, 0.0, 3.0)).norm() < 1e-12);
        assert!((h.distance - 2.0).abs() < 1e-12);
        assert!((h.normal - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);

        let h = ray_cylinder_intersect(Vector3::new(0.0, 0.0, 4.0), Vector3::z(), 2.0, 10.0).unwrap();
        assert_eq!(h.surface, Surface::EndCap);
        assert!((h.point.z - 10.0).abs() < 1e-12 && (h.distance - 6.0).abs() < 1e-12);

        let h = ray_cylinder_intersect(Vector3::new(1.0, 0.0, 5.0), Vector3::x(), 2.0, 10.0).unwrap();
        assert!((h.point - Vector3::new(2.0, 0.0, 5.0)).norm() < 1e-12);
        assert!((h.distance - 1.0).abs() < 1e-12);

        let h = ray_cylinder_intersect(Vector3::new(0.0, 0.0, 4.0), -Vector3::z(), 2.0, 10.0).unwrap();
        assert_eq!(h.surface, Surface::StartCap);
        assert!((h.distance - 4.0).abs() < 1e-12);
        assert!(ray_cylinder_intersect(Vector3::new(0.0, 0.0, 4.0), Vector3::zeros(), 2.0, 10.0).is_none());
    }

    #[test]
    fn wall_hits_lie_on_the_cylinder() {
        let cfg = config(2, Preset::Tilt, 0.1);
        for pose in &cfg.trajectory {
            for y in (0..cfg.height).step_by(5) {
                for x in (0..cfg.width).step_by(5) {
                    let (_, hit) = cfg.shade_pixel(pose, x, y);
                    assert!(hit.distance > 0.0);
                    if hit.surface == Surface::Wall {
                        let r2 = hit.point.x * hit.point.x + hit.point.y * hit.point.y;
                        assert!((r2 - 1.0).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn texture_is_seamless() {
        let cfg = config(2, Preset::Dolly, 0.1);
        for k in 0..50 {
            let z = 0.37 + 0.11 * k as f64;
            let a = cfg.wall_texture(1e-9, z);
            let b = cfg.wall_texture(TAU - 1e-9, z);
            assert!((a - b).abs() < 1e-6, "seam at z={z}: {a} vs {b}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = config(3, Preset::Pan, 0.1);
        let a = render_scene(&cfg).unwrap();
        let b = render_scene(&cfg).unwrap();
        for (fa, fb) in a.frames.frames().iter().zip(b.frames.frames()) {
            assert_eq!(fa.pixels(), fb.pixels());
        }
        assert_eq!(a.depth_maps, b.depth_maps);
        assert!(a.depth_maps.iter().all(|d| d.values.iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn stronger_falloff_darkens() {
        let mut cfg = config(2, Preset::Dolly, 0.1);
        let (dim, bright) = {
            let a = render_frame(&cfg, &cfg.trajectory[0]).0;
            cfg.light_falloff = 0.2;
            (render_frame(&cfg, &cfg.trajectory[0]).0, a)
        };
        assert!(dim.pixels().iter().zip(bright.pixels()).all(|(d, b)| d <= b));
        assert!(dim.mean() < bright.mean());
    }

    #[test]
    fn texture_has_corners() {
        let cfg = config(2, Preset::Dolly, 0.1);
        let (img, _) = render_frame(&cfg, &cfg.trajectory[0]);
        let kps = detect_keypoints(&Frame::new(0, img).unwrap(), 500, 20);
        assert!(kps.len() >= 30, "only {} keypoints", kps.len());
    }

    #[test]
    fn frame_difference_grows_with_step() {
        let diff = |step: f64| {
            let s = render_scene(&config(2, Preset::Dolly, step)).unwrap();
            let (a, b) = (s.frames.frames()[0].pixels(), s.frames.frames()[1].pixels());
            a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs()).sum::<f64>()
        };
        let (d1, d2, d3) = (diff(0.02), diff(0.08), diff(0.3));
        assert!(d1 < d2 && d2 < d3, "{d1} {d2} {d3}");
    }

    #[test]
    fn projection_inverts_pixel_rays() {
        let cfg = config(3, Preset::Tilt, 0.2);
        let pose = &cfg.trajectory[2];
        for (x, y) in [(0usize, 0usize), (10, 60), (47, 35), (95, 71)] {
            let (_, hit) = cfg.shade_pixel(pose, x, y);
            let p = cfg.project(pose, &hit.point).unwrap();
            assert!((p[0] - x as f64).abs() < 1e-9 && (p[1] - y as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = config(2, Preset::Dolly, 0.1);
        cfg.trajectory[1].center.x = 1.5;
        assert!(matches!(render_scene(&cfg), Err(SynthError::InvalidConfig(_))));
        let mut cfg = config(2, Preset::Dolly, 0.1);
        cfg.focal = 0.0;
        assert!(matches!(render_scene(&cfg), Err(SynthError::InvalidConfig(_))));
        let mut cfg = config(2, Preset::Dolly, 0.1);
        cfg.trajectory[0].center.z = 20.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn depth_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap { width: 3, height: 2, values: vec![1.0, 2.5, 3.0, 0.25, 9.0, 1e-3] };
        let path = dir.path().join("d.bin");
        write_depth(&d, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CDEP");
        assert_eq!(bytes.len(), 12 + 24);
        assert_eq!(read_depth(&path).unwrap(), d);
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(read_depth(&path).is_err());
    }

    #[test]
    fn presets_parse() {
        assert_eq!("pan".parse::<Preset>().unwrap(), Preset::Pan);
        assert!("zoom".parse::<Preset>().is_err());
        let t = preset_trajectory(Preset::Tilt, 4, &TrajectoryParams::default());
        assert!(t.iter().all(|p| crate::sim3_align::is_rotation(&p.rotation, 1e-12)));
        assert!((t[3].center.z - 1.3).abs() < 1e-12);
    }
}

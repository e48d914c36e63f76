//! Procedural scenes made of Gaussian primitives, their 36-view renders and the
//! per-view perturbations used to build inconsistent multi-view priors.

use std::f64::consts::PI;
use std::path::Path;

use gencycle_render::{render, CameraPose, GaussianCloud, RenderSettings};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ftc::{FtcTensor, TensorFile};
use crate::{rng, Error, Result};

pub const NUM_VIEWS: usize = 36;
pub const NUM_INPUT: usize = 4;
pub const NUM_SUPERVISION: usize = 8;
pub const ORBIT_RADIUS: f64 = 1.5;
pub const FOV_DEG: f64 = 49.1;
pub const BACKGROUND: [f64; 3] = [1.0; 3];
const GAUSSIANS_PER_PRIMITIVE: usize = 24;
/// Every Gaussian mean lies within this distance of the origin.
pub const SCENE_RADIUS: f64 = 0.6;

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.7, 0.2],
    [0.15, 0.3, 0.85],
    [0.9, 0.8, 0.1],
    [0.75, 0.2, 0.75],
    [0.1, 0.75, 0.8],
];
pub const SHAPE_NAMES: [&str; 3] = ["blob", "ellipsoid", "ring"];
/// Token ids: 0 is NULL, then the colors, then the shapes.
pub const VOCAB_SIZE: usize = 1 + COLOR_NAMES.len() + SHAPE_NAMES.len();

pub fn color_token(color: usize) -> u32 {
    1 + color as u32
}

pub fn shape_token(shape: usize) -> u32 {
    1 + COLOR_NAMES.len() as u32 + shape as u32
}

/// Looks up a token by its attribute name (`red`, `ring`, ...).
pub fn token_by_name(name: &str) -> Result<u32> {
    if let Some(i) = COLOR_NAMES.iter().position(|&c| c == name) {
        return Ok(color_token(i));
    }
    if let Some(i) = SHAPE_NAMES.iter().position(|&s| s == name) {
        return Ok(shape_token(i));
    }
    Err(Error::UnknownToken(name.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: usize,
    pub color: usize,
    pub center: [f64; 3],
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    /// Sorted, deduplicated color and shape tokens.
    pub fn tokens(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.primitives.iter().flat_map(|p| [color_token(p.color), shape_token(p.shape)]).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn caption(&self) -> String {
        let parts: Vec<String> =
            self.primitives.iter().map(|p| format!("{} {}", COLOR_NAMES[p.color], SHAPE_NAMES[p.shape])).collect();
        parts.join(", ")
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Rotation3<f64> {
    let axis = nalgebra::Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = nalgebra::Unit::try_new(axis, 1e-6).unwrap_or(nalgebra::Vector3::z_axis());
    nalgebra::Rotation3::from_axis_angle(&axis, rng.random_range(0.0..2.0 * PI))
}

fn unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&random_rotation(rng));
    [q.w, q.i, q.j, q.k]
}

/// Deterministic random scene: 1–5 primitives of 24 Gaussians each.
pub fn generate_scene(seed: u64) -> (SceneSpec, GaussianCloud) {
    let mut rng = rng::stream(seed, "scene");
    let count = rng.random_range(1..=5);
    let mut primitives = Vec::with_capacity(count);
    let mut cloud = GaussianCloud::with_capacity(count * GAUSSIANS_PER_PRIMITIVE);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..count {
        let shape = rng.random_range(0..SHAPE_NAMES.len());
        let color = rng.random_range(0..PALETTE.len());
        let r = rng.random_range(0.0..0.3f64).cbrt() * 0.3 / 0.3f64.cbrt();
        let dir = nalgebra::Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        let dir = dir.try_normalize(1e-9).unwrap_or(nalgebra::Vector3::x());
        let center = dir * r;
        let size: f64 = rng.random_range(0.12..0.25);
        let rot = random_rotation(&mut rng);
        for k in 0..GAUSSIANS_PER_PRIMITIVE {
            let local = match shape {
                0 => {
                    let v: [f64; 3] = std::array::from_fn(|_| normal.sample(&mut rng).clamp(-2.0, 2.0) * 0.4 * size);
                    nalgebra::Vector3::from(v)
                }
                1 => {
                    let v = nalgebra::Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
                    let v = v.try_normalize(1e-9).unwrap_or(nalgebra::Vector3::x());
                    nalgebra::Vector3::new(v.x * size, v.y * 0.6 * size, v.z * 0.4 * size)
                }
                _ => {
                    let a = 2.0 * PI * (k as f64 + rng.random_range(0.0..0.5)) / GAUSSIANS_PER_PRIMITIVE as f64;
                    nalgebra::Vector3::new(a.cos() * size, a.sin() * size, 0.0)
                }
            };
            let mut p = center + rot * local;
            if p.norm() > SCENE_RADIUS {
                p *= SCENE_RADIUS / p.norm();
            }
            let base = PALETTE[color];
            let c: [f64; 3] = std::array::from_fn(|i| (base[i] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
            let s: [f64; 3] = std::array::from_fn(|_| size * rng.random_range(0.25..0.45));
            cloud.push([p.x, p.y, p.z], s, unit_quaternion(&mut rng), rng.random_range(0.8..0.95), c);
        }
        primitives.push(Primitive { shape, color, center: [center.x, center.y, center.z], size });
    }
    (SceneSpec { seed, primitives }, cloud)
}

/// Azimuth/elevation of one orbit camera, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitPose {
    pub azimuth: f64,
    pub elevation: f64,
}

impl OrbitPose {
    pub fn camera(&self, size: usize) -> CameraPose {
        CameraPose::orbit(ORBIT_RADIUS, self.azimuth, self.elevation, FOV_DEG, size, size)
            .expect("orbit cameras are valid")
    }
}

/// Four input poses near the equator, 90° apart up to ±15° jitter, then 32 more with
/// elevation in [-5°, 30°], and 8 supervision indices drawn from those 32.
pub fn sample_poses(seed: u64) -> (Vec<OrbitPose>, Vec<usize>) {
    let mut rng = rng::stream(seed, "poses");
    let a0 = rng.random_range(0.0..360.0);
    let mut poses = Vec::with_capacity(NUM_VIEWS);
    for k in 0..NUM_INPUT {
        poses.push(OrbitPose {
            azimuth: (a0 + 90.0 * k as f64 + rng.random_range(-15.0..15.0)).rem_euclid(360.0),
            elevation: rng.random_range(-5.0..5.0),
        });
    }
    for _ in NUM_INPUT..NUM_VIEWS {
        poses.push(OrbitPose { azimuth: rng.random_range(0.0..360.0), elevation: rng.random_range(-5.0..30.0) });
    }
    let mut sup: Vec<usize> =
        sample(&mut rng, NUM_VIEWS - NUM_INPUT, NUM_SUPERVISION).into_iter().map(|i| i + NUM_INPUT).collect();
    sup.sort_unstable();
    (poses, sup)
}

/// Rendered views of one scene. Views `0..4` are the inputs; view 0 is the condition image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub size: usize,
    pub poses: Vec<OrbitPose>,
    pub supervision: Vec<usize>,
    /// `H x W x 3` per view.
    pub images: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
    pub depths: Vec<Vec<f64>>,
}

impl ViewSet {
    pub fn camera(&self, view: usize) -> CameraPose {
        self.poses[view].camera(self.size)
    }

    pub fn cameras(&self, views: &[usize]) -> Vec<CameraPose> {
        views.iter().map(|&v| self.camera(v)).collect()
    }

    pub fn input_views(&self) -> Vec<usize> {
        (0..NUM_INPUT).collect()
    }

    /// Inputs followed by the supervision views.
    pub fn training_views(&self) -> Vec<usize> {
        let mut v = self.input_views();
        v.extend(&self.supervision);
        v
    }

    /// Every view that is not an input.
    pub fn held_out_views(&self) -> Vec<usize> {
        (NUM_INPUT..self.poses.len()).collect()
    }
}

pub fn render_viewset(cloud: &GaussianCloud, seed: u64, size: usize) -> ViewSet {
    let (poses, supervision) = sample_poses(seed);
    let mut images = Vec::with_capacity(NUM_VIEWS);
    let mut masks = Vec::with_capacity(NUM_VIEWS);
    let mut depths = Vec::with_capacity(NUM_VIEWS);
    for pose in &poses {
        let out = render(cloud, &pose.camera(size), BACKGROUND, &RenderSettings::default());
        images.push(out.image);
        masks.push(out.alpha);
        depths.push(out.depth);
    }
    ViewSet { size, poses, supervision, images, masks, depths }
}

/// A scene as stored on disk.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub spec: SceneSpec,
    pub cloud: GaussianCloud,
    pub views: ViewSet,
}

impl SceneData {
    pub fn generate(seed: u64, size: usize) -> Self {
        let (spec, cloud) = generate_scene(seed);
        let views = render_viewset(&cloud, seed, size);
        Self { spec, cloud, views }
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.spec.tokens()
    }

    fn meta_text(&self) -> String {
        let mut s = String::new();
        s += &format!("seed={}\nsize={}\n", self.spec.seed, self.views.size);
        s += &format!("tokens={}\n", join(&self.spec.tokens()));
        s += &format!("caption={}\n", self.spec.caption());
        for (i, p) in self.spec.primitives.iter().enumerate() {
            s += &format!(
                "primitive.{i}={} {} {:?} {:?} {:?} {:?}\n",
                SHAPE_NAMES[p.shape], COLOR_NAMES[p.color], p.center[0], p.center[1], p.center[2], p.size
            );
        }
        s += &format!("radius={ORBIT_RADIUS:?}\nfov_deg={FOV_DEG:?}\n");
        s += &format!("input={}\n", join(&self.views.input_views()));
        s += &format!("supervision={}\n", join(&self.views.supervision));
        for (i, p) in self.views.poses.iter().enumerate() {
            s += &format!("camera.{i}={:?} {:?}\n", p.azimuth, p.elevation);
        }
        s
    }

    /// Writes `views.ftc`, `meta.txt` and, optionally, `view_XX.png` files into `dir`.
    pub fn save(&self, dir: &Path, png: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let n = self.views.size;
        let mut f = TensorFile::new();
        let cat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
        f.insert("images", FtcTensor::from_f64(vec![NUM_VIEWS, n, n, 3], &cat(&self.views.images))?);
        f.insert("masks", FtcTensor::from_f64(vec![NUM_VIEWS, n, n], &cat(&self.views.masks))?);
        f.insert("depths", FtcTensor::from_f64(vec![NUM_VIEWS, n, n], &cat(&self.views.depths))?);
        f.insert("cloud", FtcTensor::from_f64(vec![self.cloud.len(), gencycle_render::PACKED_STRIDE], &self.cloud.to_packed())?);
        f.save(dir.join("views.ftc"))?;
        std::fs::write(dir.join("meta.txt"), self.meta_text())?;
        if png {
            for (i, img) in self.views.images.iter().enumerate() {
                crate::imageio::write_png(&dir.join(format!("view_{i:02}.png")), img, n, n)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = std::fs::read_to_string(dir.join("meta.txt"))?;
        let kv: std::collections::BTreeMap<&str, &str> = meta.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Container(format!("meta.txt lacks `{k}`")));
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| Error::Container(format!("bad number `{s}`")));
        let seed: u64 = get("seed")?.parse().map_err(|_| Error::Container("bad seed".into()))?;
        let size: usize = get("size")?.parse().map_err(|_| Error::Container("bad size".into()))?;
        let mut primitives = Vec::new();
        for i in 0.. {
            let Some(line) = kv.get(format!("primitive.{i}").as_str()) else { break };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(Error::Container(format!("bad primitive line `{line}`")));
            }
            primitives.push(Primitive {
                shape: SHAPE_NAMES.iter().position(|&s| s == parts[0]).ok_or_else(|| Error::Container("bad shape".into()))?,
                color: COLOR_NAMES.iter().position(|&c| c == parts[1]).ok_or_else(|| Error::Container("bad color".into()))?,
                center: [parse_f(parts[2])?, parse_f(parts[3])?, parse_f(parts[4])?],
                size: parse_f(parts[5])?,
            });
        }
        let mut poses = Vec::with_capacity(NUM_VIEWS);
        for i in 0..NUM_VIEWS {
            let line = get(&format!("camera.{i}"))?;
            let (a, e) = line.split_once(' ').ok_or_else(|| Error::Container(format!("bad camera line `{line}`")))?;
            poses.push(OrbitPose { azimuth: parse_f(a)?, elevation: parse_f(e)? });
        }
        let supervision = get("supervision")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| Error::Container("bad supervision list".into())))
            .collect::<Result<Vec<_>>>()?;

        let f = TensorFile::load(dir.join("views.ftc"))?;
        let split = |name: &str, per: usize| -> Result<Vec<Vec<f64>>> {
            let t = f.require(name)?;
            if t.data.len() != NUM_VIEWS * per {
                return Err(Error::Container(format!("`{name}` has {} values, expected {}", t.data.len(), NUM_VIEWS * per)));
            }
            Ok(t.to_f64().chunks(per).map(|c| c.to_vec()).collect())
        };
        let images = split("images", size * size * 3)?;
        let masks = split("masks", size * size)?;
        let depths = split("depths", size * size)?;
        let cloud = GaussianCloud::from_packed(&f.require("cloud")?.to_f64())?;
        Ok(Self {
            spec: SceneSpec { seed, primitives },
            cloud,
            views: ViewSet { size, poses, supervision, images, masks, depths },
        })
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Magnitudes of the per-view perturbations. All zero is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerturbConfig {
    /// Standard deviation of the hue rotation about the gray axis, in turns.
    pub hue_sigma: f64,
    pub brightness_sigma: f64,
    /// Amplitude of the sinusoidal displacement field, in pixels.
    pub warp_px: f64,
    pub texture_sigma: f64,
    /// View left untouched.
    pub exempt: Option<usize>,
}

impl PerturbConfig {
    pub fn is_identity(&self) -> bool {
        self.hue_sigma == 0.0 && self.brightness_sigma == 0.0 && self.warp_px == 0.0 && self.texture_sigma == 0.0
    }
}

fn rotate_hue(img: &mut [f64], angle: f64) {
    // Rodrigues rotation of RGB about (1, 1, 1) / √3.
    let (s, c) = angle.sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    for px in img.chunks_mut(3) {
        let v = [px[0], px[1], px[2]];
        let dot = k * (v[0] + v[1] + v[2]);
        let cross = [k * (v[2] - v[1]), k * (v[0] - v[2]), k * (v[1] - v[0])];
        for i in 0..3 {
            px[i] = v[i] * c + cross[i] * s + k * dot * (1.0 - c);
        }
    }
}

fn warp(img: &[f64], size: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta = rng.random_range(0.0..2.0 * PI);
    let (fx, fy) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let n = size as f64;
    let mut out = vec![0.0; img.len()];
    for row in 0..size {
        for col in 0..size {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let dx = amplitude * theta.cos() * (2.0 * PI * fy * y / n + px).sin();
            let dy = amplitude * theta.sin() * (2.0 * PI * fx * x / n + py).sin();
            let c = sample_bilinear(img, size, x + dx, y + dy);
            out[(row * size + col) * 3..][..3].copy_from_slice(&c);
        }
    }
    out
}

fn sample_bilinear(img: &[f64], size: usize, u: f64, v: f64) -> [f64; 3] {
    let max = (size - 1) as f64;
    let (x, y) = ((u - 0.5).clamp(0.0, max), (v - 0.5).clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    std::array::from_fn(|c| {
        let p = |r: usize, q: usize| img[(r * size + q) * 3 + c];
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    })
}

/// Independently perturbs each `size x size x 3` view: hue rotation, brightness shift,
/// smooth warp and per-pixel noise, then clamps to `[0, 1]`.
pub fn perturb_views(views: &[Vec<f64>], size: usize, cfg: &PerturbConfig, seed: u64) -> Vec<Vec<f64>> {
    if cfg.is_identity() {
        return views.to_vec();
    }
    views
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if cfg.exempt == Some(i) {
                return img.clone();
            }
            let mut rng = rng::stream(seed, &format!("perturb.{i}"));
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut out = img.clone();
            if cfg.hue_sigma > 0.0 {
                rotate_hue(&mut out, 2.0 * PI * cfg.hue_sigma * normal.sample(&mut rng));
            }
            if cfg.brightness_sigma > 0.0 {
                let b = cfg.brightness_sigma * normal.sample(&mut rng);
                out.iter_mut().for_each(|v| *v += b);
            }
            if cfg.warp_px > 0.0 {
                out = warp(&out, size, cfg.warp_px, &mut rng);
            }
            if cfg.texture_sigma > 0.0 {
                out.iter_mut().for_each(|v| *v += cfg.texture_sigma * normal.sample(&mut rng));
            }
            out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            out
        })
        .collect()
}

//! Schematic side-view vehicles whose identity lives in their geometry.
//!
//! Each identity is a distinct combination of discrete levels for body length,
//! body height, wheel radius, wheel inset, cabin length, cabin offset, cabin
//! height and lamp height. Body colour comes from a small shared palette, so
//! colour alone never identifies a vehicle. Every image then applies a random
//! similarity transform (scale 0.8 to 1.2, rotation within ±10°, translation),
//! background clutter that includes wheel-like discs, a per-camera gain and
//! Gaussian noise. Cameras 2 and 3 see the vehicle mirrored.
//!
//! Wheel and lamp centres are recorded as landmarks in output pixel
//! coordinates.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::manifest::{Landmark, Manifest, Record, Split};
use crate::data::pnm::Raster;
use crate::error::{Error, Result};

pub const CAMERAS: usize = 4;
pub const LANDMARK_NAMES: [&str; 4] = ["wheel_front", "wheel_rear", "lamp_front", "lamp_rear"];

const BODY_LEN: [f64; 3] = [28.0, 33.0, 38.0];
const BODY_H: [f64; 3] = [8.0, 10.5, 13.0];
const WHEEL_R: [f64; 3] = [3.0, 4.0, 5.0];
const WHEEL_INSET: [f64; 3] = [5.0, 7.5, 10.0];
const CABIN_LEN: [f64; 3] = [0.35, 0.5, 0.65];
const CABIN_OFF: [f64; 3] = [-0.15, 0.0, 0.15];
const CABIN_H: [f64; 2] = [5.0, 8.0];
const LAMP_H: [f64; 2] = [0.25, 0.65];
const LEVELS: [usize; 8] = [3, 3, 3, 3, 3, 3, 2, 2];

const PALETTE: [[f64; 3]; 4] = [
    [0.75, 0.15, 0.15],
    [0.15, 0.30, 0.75],
    [0.85, 0.85, 0.80],
    [0.20, 0.50, 0.25],
];
const TIRE: [f64; 3] = [0.08, 0.08, 0.08];
const HUB: [f64; 3] = [0.6, 0.6, 0.6];
const WINDOW: [f64; 3] = [0.2, 0.25, 0.35];
const LAMP_FRONT: [f64; 3] = [1.0, 0.95, 0.55];
const LAMP_REAR: [f64; 3] = [1.0, 0.45, 0.0];
const CAMERA_GAIN: [[f64; 3]; CAMERAS] = [
    [1.0, 1.0, 1.0],
    [0.8, 0.82, 0.9],
    [1.1, 1.05, 0.95],
    [0.9, 0.95, 1.05],
];

/// Geometry and colour of one identity, in vehicle units (≈ pixels at scale 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    pub body_len: f64,
    pub body_h: f64,
    pub wheel_r: f64,
    pub wheel_inset: f64,
    /// Fraction of the body length.
    pub cabin_len: f64,
    /// Cabin centre offset as a fraction of the body length.
    pub cabin_off: f64,
    pub cabin_h: f64,
    /// Lamp height as a fraction of the body height.
    pub lamp_h: f64,
    pub color: usize,
}

impl ShapeParams {
    fn from_levels(l: [usize; 8], color: usize) -> Self {
        Self {
            body_len: BODY_LEN[l[0]],
            body_h: BODY_H[l[1]],
            wheel_r: WHEEL_R[l[2]],
            wheel_inset: WHEEL_INSET[l[3]],
            cabin_len: CABIN_LEN[l[4]],
            cabin_off: CABIN_OFF[l[5]],
            cabin_h: CABIN_H[l[6]],
            lamp_h: LAMP_H[l[7]],
            color,
        }
    }

    /// Geometric parameters, each divided by the spacing of its levels.
    pub fn normalized(&self) -> [f64; 8] {
        [
            self.body_len / 5.0,
            self.body_h / 2.5,
            self.wheel_r / 1.0,
            self.wheel_inset / 2.5,
            self.cabin_len / 0.15,
            self.cabin_off / 0.15,
            self.cabin_h / 3.0,
            self.lamp_h / 0.4,
        ]
    }

    /// Largest per-parameter gap in units of level spacing.
    pub fn separation(&self, other: &ShapeParams) -> f64 {
        self.normalized()
            .iter()
            .zip(other.normalized())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Vertical centre of the vehicle's extent.
    fn center_y(&self) -> f64 {
        (self.body_h + self.cabin_h - self.wheel_r) / 2.0
    }

    fn wheel_x(&self) -> f64 {
        self.body_len / 2.0 - self.wheel_inset
    }

    /// Canonical landmark positions `(x, y)`, y up, front towards +x.
    fn landmarks(&self) -> [(f64, f64); 4] {
        let lamp_y = self.lamp_h * self.body_h;
        let lamp_x = self.body_len / 2.0 - 1.5;
        [
            (self.wheel_x(), 0.0),
            (-self.wheel_x(), 0.0),
            (lamp_x, lamp_y),
            (-lamp_x, lamp_y),
        ]
    }

    /// Colour at canonical point `(x, y)`, if the vehicle covers it.
    fn color_at(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let wx = self.wheel_x();
        for cx in [wx, -wx] {
            let d2 = (x - cx).powi(2) + y * y;
            if d2 <= self.wheel_r.powi(2) {
                return Some(if d2 <= (self.wheel_r * 0.4).powi(2) { HUB } else { TIRE });
            }
        }
        let (fx, ly) = self.landmarks()[2];
        for (cx, col) in [(fx, LAMP_FRONT), (-fx, LAMP_REAR)] {
            if (x - cx).abs() <= 1.5 && (y - ly).abs() <= 1.5 {
                return Some(col);
            }
        }
        let half = self.body_len / 2.0;
        if x.abs() <= half && (0.0..=self.body_h).contains(&y) {
            return Some(PALETTE[self.color]);
        }
        let cl = self.cabin_len * self.body_len / 2.0;
        let co = self.cabin_off * self.body_len;
        let top = self.body_h + self.cabin_h;
        if (x - co).abs() <= cl && y > self.body_h && y <= top {
            let window = (x - co).abs() <= cl - 1.5 && y > self.body_h + 1.0 && y <= top - 1.0;
            return Some(if window { WINDOW } else { PALETTE[self.color] });
        }
        None
    }
}

/// Per-image nuisance parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Nuisance {
    pub translate: (f64, f64),
    pub scale: f64,
    /// Radians, counter-clockwise.
    pub angle: f64,
    pub mirrored: bool,
    pub noise: f64,
}

struct Placement<'a> {
    shape: &'a ShapeParams,
    n: &'a Nuisance,
    side: f64,
}

impl Placement<'_> {
    fn to_image(&self, x: f64, y: f64) -> (f64, f64) {
        let f = if self.n.mirrored { -1.0 } else { 1.0 };
        let (x, y) = (f * x, y - self.shape.center_y());
        let (s, c) = self.n.angle.sin_cos();
        let (xr, yr) = (x * c - y * s, x * s + y * c);
        let u = self.side / 2.0 + self.n.translate.0 - self.n.scale * yr;
        let v = self.side / 2.0 + self.n.translate.1 + self.n.scale * xr;
        (u, v)
    }

    fn to_vehicle(&self, u: f64, v: f64) -> (f64, f64) {
        let yr = -(u - self.side / 2.0 - self.n.translate.0) / self.n.scale;
        let xr = (v - self.side / 2.0 - self.n.translate.1) / self.n.scale;
        let (s, c) = self.n.angle.sin_cos();
        let (x, y) = (xr * c + yr * s, -xr * s + yr * c);
        let f = if self.n.mirrored { -1.0 } else { 1.0 };
        (f * x, y + self.shape.center_y())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_ids: usize,
    pub test_ids: usize,
    pub per_id: usize,
    pub side: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// `train_ids` training identities plus `max(2, train_ids / 4)` held-out ones.
    pub fn new(train_ids: usize, per_id: usize, seed: u64) -> Self {
        Self {
            train_ids,
            test_ids: (train_ids / 4).max(2),
            per_id,
            side: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_ids + self.test_ids < 2 {
            return Err(Error::invalid("generate_synthetic", "need at least two identities"));
        }
        if self.train_ids == 1 {
            return Err(Error::invalid("generate_synthetic", "need zero or at least two training identities"));
        }
        if self.per_id == 0 {
            return Err(Error::invalid("generate_synthetic", "need at least one image per identity"));
        }
        if self.test_ids > 0 && self.per_id < 3 {
            return Err(Error::invalid(
                "generate_synthetic",
                format!("held-out identities need at least 3 images each, got {}", self.per_id),
            ));
        }
        if self.side < 48 || self.side % 8 != 0 {
            return Err(Error::invalid(
                "generate_synthetic",
                format!("side {} must be a multiple of 8 and at least 48", self.side),
            ));
        }
        Ok(())
    }
}

/// Distinct geometry for `n` identities.
pub fn identity_shapes(n: usize, seed: u64) -> Result<Vec<ShapeParams>> {
    let combos: usize = LEVELS.iter().product();
    if n > combos {
        return Err(Error::invalid(
            "generate_synthetic",
            format!("at most {combos} distinct identities, asked for {n}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1d);
    let picks = sample(&mut rng, combos, n).into_vec();
    Ok(picks
        .into_iter()
        .map(|mut code| {
            let mut l = [0usize; 8];
            for (slot, &levels) in l.iter_mut().zip(&LEVELS) {
                *slot = code % levels;
                code /= levels;
            }
            ShapeParams::from_levels(l, rng.gen_range(0..PALETTE.len()))
        })
        .collect())
}

fn paint(img: &mut [f64], side: usize, u0: f64, v0: f64, size: f64, disc: bool, color: [f64; 3]) {
    let lo = |c: f64| (c - size).floor().max(0.0) as usize;
    let hi = |c: f64| ((c + size).ceil() as usize).min(side);
    for u in lo(u0)..hi(u0) {
        for v in lo(v0)..hi(v0) {
            let (du, dv) = (u as f64 + 0.5 - u0, v as f64 + 0.5 - v0);
            let inside = if disc {
                du * du + dv * dv <= size * size
            } else {
                du.abs() <= size && dv.abs() <= size * 0.7
            };
            if inside {
                for ch in 0..3 {
                    img[(u * side + v) * 3 + ch] = color[ch];
                }
            }
        }
    }
}

/// Renders one image and its landmarks in pixel coordinates.
pub fn render(shape: &ShapeParams, n: &Nuisance, camera: usize, side: usize, rng: &mut impl Rng) -> (Raster, Vec<Landmark>) {
    let mut img = vec![0.0; side * side * 3];
    let base: f64 = rng.gen_range(0.3..0.6);
    let tilt: f64 = rng.gen_range(-0.15..0.15);
    let jitter: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    for u in 0..side {
        let g = base + tilt * (u as f64 / side as f64 - 0.5);
        for v in 0..side {
            for ch in 0..3 {
                img[(u * side + v) * 3 + ch] = g + jitter[ch];
            }
        }
    }
    let clutter = rng.gen_range(3..=7);
    for _ in 0..clutter {
        let (u0, v0) = (rng.gen_range(0.0..side as f64), rng.gen_range(0.0..side as f64));
        let size = rng.gen_range(2.0..6.0);
        let disc = rng.gen_bool(0.5);
        let color = match rng.gen_range(0..4) {
            0 => TIRE,
            1 => PALETTE[rng.gen_range(0..PALETTE.len())],
            _ => [rng.gen(), rng.gen(), rng.gen()],
        };
        paint(&mut img, side, u0, v0, size, disc, color);
    }
    let place = Placement {
        shape,
        n,
        side: side as f64,
    };
    for u in 0..side {
        for v in 0..side {
            let (x, y) = place.to_vehicle(u as f64 + 0.5, v as f64 + 0.5);
            if let Some(c) = shape.color_at(x, y) {
                img[(u * side + v) * 3..(u * side + v) * 3 + 3].copy_from_slice(&c);
            }
        }
    }
    let noise = Normal::new(0.0, n.noise.max(1e-12)).unwrap();
    let gain = CAMERA_GAIN[camera % CAMERAS];
    let pixels = img
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = x * gain[i % 3] + if n.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            (y.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    let landmarks = shape
        .landmarks()
        .iter()
        .zip(LANDMARK_NAMES)
        .map(|(&(x, y), name)| {
            let (u, v) = place.to_image(x, y);
            Landmark {
                name: name.to_string(),
                u,
                v,
            }
        })
        .collect();
    (Raster::new(side, side, 3, pixels).unwrap(), landmarks)
}

fn draw_nuisance(rng: &mut impl Rng, camera: usize) -> Nuisance {
    Nuisance {
        translate: (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
        scale: rng.gen_range(0.8..1.2),
        angle: rng.gen_range(-10f64..10.0).to_radians(),
        mirrored: camera >= 2,
        noise: 0.03,
    }
}

/// Renders the whole dataset in memory. Record paths are `images/NNNNNN.ppm`.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<(Raster, Record)>> {
    cfg.validate()?;
    let n_ids = cfg.train_ids + cfg.test_ids;
    let shapes = identity_shapes(n_ids, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(n_ids * cfg.per_id);
    for (id, shape) in shapes.iter().enumerate() {
        for j in 0..cfg.per_id {
            let camera = j % CAMERAS;
            let side = cfg.side as f64;
            let (raster, landmarks) = loop {
                let n = draw_nuisance(&mut rng, camera);
                let (r, lm) = render(shape, &n, camera, cfg.side, &mut rng);
                if lm.iter().all(|l| (0.0..side).contains(&l.u) && (0.0..side).contains(&l.v)) {
                    break (r, lm);
                }
            };
            let split = if id < cfg.train_ids {
                Split::Train
            } else if j < 2 {
                Split::Query
            } else {
                Split::Gallery
            };
            out.push((
                raster,
                Record {
                    path: format!("images/{:06}.ppm", out.len()),
                    identity: id,
                    camera,
                    track: id * CAMERAS + camera,
                    split,
                    landmarks,
                },
            ));
        }
    }
    Ok(out)
}

/// Writes `images/*.ppm` and `manifest.tsv` under `dir`.
pub fn generate_synthetic(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Manifest> {
    let dir = dir.as_ref();
    let items = synthesize(cfg)?;
    std::fs::create_dir_all(dir.join("images"))?;
    let mut manifest = Manifest::default();
    for (raster, record) in items {
        raster.save(dir.join(&record.path))?;
        manifest.records.push(record);
    }
    manifest.validate()?;
    manifest.save(dir.join("manifest.tsv"))?;
    Ok(manifest)
}

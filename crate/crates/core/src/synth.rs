//! Seeded synthetic segmentation tasks and their on-disk format (binary PGM
//! plus a JSON-lines manifest).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Point;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};
use crate::pmm::rasterize_polygon;

pub const NOISE_SIGMA: f32 = 0.05;
pub const COMPOSITE_RATE: f64 = 0.3;
pub const MIN_AREA: usize = 16;
const MAX_TRIES: usize = 100;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Generic,
    Subpart,
    Banner,
    Plate,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Generic, Task::Subpart, Task::Banner, Task::Plate];

    pub fn name(self) -> &'static str {
        match self {
            Task::Generic => "generic",
            Task::Subpart => "subpart",
            Task::Banner => "banner",
            Task::Plate => "plate",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Task::Generic => 0x9e37_79b9,
            Task::Subpart => 0x85eb_ca6b,
            Task::Banner => 0xc2b2_ae35,
            Task::Plate => 0x27d4_eb2f,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown task {s:?} (expected generic, subpart, banner or plate)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    /// Flip every sample left-right (a mirrored variant of the task).
    pub mirror: bool,
}

impl TaskSpec {
    pub fn new(task: Task, count: usize, seed: u64) -> Self {
        Self { task, image_size: 64, count, seed, mirror: false }
    }

    pub fn mirrored(mut self) -> Self {
        self.mirror = true;
        self
    }

    /// Task label written to the manifest.
    pub fn label(&self) -> String {
        if self.mirror {
            format!("{}-mirror", self.task)
        } else {
            self.task.to_string()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Arc<GrayImage>,
    pub mask: Mask,
    pub task: String,
    /// Identifies the source image; samples that share an image share it.
    pub instance_id: String,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Objects behind the emitted samples, and how many were part/whole
    /// composites.
    pub objects: usize,
    pub composites: usize,
    /// One line per skipped placement.
    pub skipped: Vec<String>,
}

impl Dataset {
    pub fn composite_fraction(&self) -> f64 {
        self.composites as f64 / self.objects.max(1) as f64
    }
}

// ---- drawing ----------------------------------------------------------------

fn disk(size: usize, cx: f32, cy: f32, r: f32) -> Mask {
    Mask::from_fn(size, size, |x, y| (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2) <= r * r)
}

fn ellipse(size: usize, cx: f32, cy: f32, a: f32, b: f32, theta: f32) -> Mask {
    let (s, c) = theta.sin_cos();
    Mask::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

fn polygon(size: usize, pts: &[Point]) -> Option<Mask> {
    rasterize_polygon(pts, size, size).ok()
}

/// Corners of a `w × h` rectangle centred at `(cx, cy)`, rotated by `theta`.
fn rect_corners(cx: f32, cy: f32, w: f32, h: f32, theta: f32) -> Vec<Point> {
    let (s, c) = theta.sin_cos();
    [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
        .iter()
        .map(|(u, v)| {
            let (x, y) = (u * w, v * h);
            Point::new(cx + c * x - s * y, cy + s * x + c * y)
        })
        .collect()
}

fn paint(img: &mut GrayImage, m: &Mask, v: f32) {
    for (d, on) in img.data.iter_mut().zip(&m.data) {
        if *on {
            *d = v;
        }
    }
}

fn and(a: &Mask, b: &Mask) -> Mask {
    Mask { width: a.width, height: a.height, data: a.data.iter().zip(&b.data).map(|(x, y)| *x && *y).collect() }
}

fn intersects(a: &Mask, b: &Mask) -> bool {
    a.data.iter().zip(&b.data).any(|(x, y)| *x && *y)
}

fn dilate(m: &Mask, r: usize) -> Mask {
    let (w, h) = (m.width as isize, m.height as isize);
    let r = r as isize;
    Mask::from_fn(m.width, m.height, |x, y| {
        let (x, y) = (x as isize, y as isize);
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (u, v) = (x + dx, y + dy);
                u >= 0 && v >= 0 && u < w && v < h && m.get(u as usize, v as usize)
            })
        })
    })
}

/// `inner` lies inside `outer` with at least one pixel of margin.
fn strictly_inside(inner: &Mask, outer: &Mask) -> bool {
    let (w, h) = (inner.width, inner.height);
    (0..h).all(|y| {
        (0..w).all(|x| {
            !inner.get(x, y)
                || (x > 0 && y > 0 && x + 1 < w && y + 1 < h)
                    && outer.get(x, y)
                    && outer.get(x - 1, y)
                    && outer.get(x + 1, y)
                    && outer.get(x, y - 1)
                    && outer.get(x, y + 1)
        })
    })
}

fn single_component(m: &Mask, min_area: usize) -> bool {
    m.area() >= min_area && m.components().len() == 1
}

/// A gray level at least `gap` away from every value in `avoid`.
fn contrasting<R: Rng>(rng: &mut R, avoid: &[f32], gap: f32) -> f32 {
    for _ in 0..MAX_TRIES {
        let g: f32 = rng.random_range(0.0..=1.0);
        if avoid.iter().all(|a| (g - a).abs() >= gap) {
            return g;
        }
    }
    // Both ends cannot be blocked at once for gap ≤ 0.5.
    let a = avoid.iter().copied().fold(0.5f32, |m, v| if (v - 0.5).abs() > (m - 0.5).abs() { v } else { m });
    if a > 0.5 {
        0.0
    } else {
        1.0
    }
}

/// Adds Gaussian noise, clamps to `[0, 1]` and quantizes to 8 bits so that
/// files round-trip exactly.
fn finish<R: Rng>(img: &mut GrayImage, rng: &mut R) {
    let n = Normal::new(0.0f32, NOISE_SIGMA).expect("positive sigma");
    for v in img.data.iter_mut() {
        *v = quantize((*v + n.sample(rng)).clamp(0.0, 1.0));
    }
}

fn quantize(v: f32) -> f32 {
    to_byte(v) as f32 / 255.0
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn clutter<R: Rng>(img: &mut GrayImage, rng: &mut R) {
    let s = img.width;
    let sf = s as f32;
    for _ in 0..rng.random_range(3..=7) {
        let g = rng.random_range(0.0..=1.0);
        let m = match rng.random_range(0..3) {
            0 => disk(s, rng.random_range(0.0..sf), rng.random_range(0.0..sf), rng.random_range(2.0..7.0)),
            1 => {
                let c = rect_corners(
                    rng.random_range(0.0..sf),
                    rng.random_range(0.0..sf),
                    rng.random_range(3.0..14.0),
                    rng.random_range(3.0..14.0),
                    rng.random_range(0.0..3.2),
                );
                polygon(s, &c).unwrap_or_else(|| Mask::empty(s, s))
            }
            _ => {
                let c = rect_corners(
                    rng.random_range(0.0..sf),
                    rng.random_range(0.0..sf),
                    rng.random_range(16.0..40.0),
                    rng.random_range(1.0..2.5),
                    rng.random_range(0.0..3.2),
                );
                polygon(s, &c).unwrap_or_else(|| Mask::empty(s, s))
            }
        };
        paint(img, &m, g);
    }
}

// ---- generic ----------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    r: f32,
    theta: f32,
    aspect: f32,
    /// Triangle vertex radii, as fractions of `r`.
    tri: [f32; 3],
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, cx: f32, cy: f32, r: f32) -> Self {
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Rect,
            _ => ShapeKind::Triangle,
        };
        Shape {
            kind,
            cx,
            cy,
            r,
            theta: rng.random_range(0.0..std::f32::consts::PI),
            aspect: rng.random_range(0.6..1.0),
            tri: [rng.random_range(0.8..1.0), rng.random_range(0.8..1.0), rng.random_range(0.8..1.0)],
        }
    }

    fn mask(&self, size: usize) -> Mask {
        match self.kind {
            ShapeKind::Disk => disk(size, self.cx, self.cy, self.r),
            ShapeKind::Rect => {
                let side = self.r * std::f32::consts::SQRT_2;
                let c = rect_corners(self.cx, self.cy, side, side * self.aspect, self.theta);
                polygon(size, &c).unwrap_or_else(|| Mask::empty(size, size))
            }
            ShapeKind::Triangle => {
                let step = 2.0 * std::f32::consts::PI / 3.0;
                let c: Vec<Point> = (0..3)
                    .map(|i| {
                        let a = self.theta + step * i as f32;
                        let rr = self.r * self.tri[i];
                        Point::new(self.cx + rr * a.cos(), self.cy + rr * a.sin())
                    })
                    .collect();
                polygon(size, &c).unwrap_or_else(|| Mask::empty(size, size))
            }
        }
    }
}

struct Object {
    whole: Mask,
    part: Option<Mask>,
}

fn place_object<R: Rng>(rng: &mut R, size: usize, occupied: &Mask, composite: bool) -> Option<Object> {
    let sf = size as f32;
    for _ in 0..MAX_TRIES {
        let r: f32 = if composite { rng.random_range(10.0..16.0) } else { rng.random_range(5.0..15.0) };
        let cx = rng.random_range(r * 0.7..sf - r * 0.7);
        let cy = rng.random_range(r * 0.7..sf - r * 0.7);
        let outer = Shape::random(rng, cx, cy, r);
        let whole = outer.mask(size);
        if !single_component(&whole, MIN_AREA) || intersects(&dilate(&whole, 2), occupied) {
            continue;
        }
        if !composite {
            return Some(Object { whole, part: None });
        }
        for _ in 0..MAX_TRIES {
            let ri = r * rng.random_range(0.3..0.5);
            let off = r * 0.25;
            let (ix, iy) = (cx + rng.random_range(-off..off), cy + rng.random_range(-off..off));
            let inner = Shape::random(rng, ix, iy, ri);
            let part = inner.mask(size);
            if single_component(&part, MIN_AREA) && strictly_inside(&part, &whole) && part.area() * 2 <= whole.area() {
                return Some(Object { whole, part: Some(part) });
            }
        }
    }
    None
}

// ---- per-image generators ---------------------------------------------------

/// One generated image with its target masks. Test-visible layout data rides
/// along in `corners` and `marks`.
struct Scene {
    image: GrayImage,
    masks: Vec<Mask>,
    objects: usize,
    composites: usize,
    skipped: Vec<String>,
    corners: Vec<Point>,
    marks: usize,
}

impl Scene {
    fn new(image: GrayImage) -> Self {
        Scene { image, masks: vec![], objects: 0, composites: 0, skipped: vec![], corners: vec![], marks: 0 }
    }
}

fn generic_scene<R: Rng>(rng: &mut R, size: usize) -> Scene {
    let bg: f32 = rng.random_range(0.0..=1.0);
    let mut scene = Scene::new(GrayImage::filled(size, size, bg));
    let mut occupied = Mask::empty(size, size);
    let n = rng.random_range(1..=4);
    for o in 0..n {
        let composite = rng.random_bool(COMPOSITE_RATE);
        let Some(obj) = place_object(rng, size, &occupied, composite) else {
            scene.skipped.push(format!("object {o}: no feasible placement after {MAX_TRIES} tries"));
            continue;
        };
        let g = contrasting(rng, &[bg], 0.25);
        paint(&mut scene.image, &obj.whole, g);
        for (d, on) in occupied.data.iter_mut().zip(&obj.whole.data) {
            *d |= *on;
        }
        scene.objects += 1;
        scene.masks.push(obj.whole);
        if let Some(part) = obj.part {
            let gi = contrasting(rng, &[g, bg], 0.25);
            paint(&mut scene.image, &part, gi);
            scene.composites += 1;
            scene.masks.push(part);
        }
    }
    finish(&mut scene.image, rng);
    scene
}

fn subpart_scene<R: Rng>(rng: &mut R, size: usize) -> Option<Scene> {
    let sf = size as f32;
    let bg: f32 = rng.random_range(0.0..=1.0);
    let mut img = GrayImage::filled(size, size, bg);
    clutter(&mut img, rng);
    for _ in 0..MAX_TRIES {
        let a = rng.random_range(0.32..0.42) * sf;
        let b = rng.random_range(0.24..0.32) * sf;
        let theta = rng.random_range(-0.4..0.4f32);
        let (cx, cy) = (sf / 2.0 + rng.random_range(-3.0..3.0), sf / 2.0 + rng.random_range(-3.0..3.0));
        let outer = ellipse(size, cx, cy, a, b, theta);
        let ratio: f32 = rng.random_range(0.07..0.2);
        let r = (ratio * a * b).sqrt();
        let (s, c) = theta.sin_cos();
        // Inner disk sits on the left half of the ellipse, the stripe below it.
        let u = -rng.random_range(0.2..0.45) * a;
        let v = rng.random_range(-0.3..0.1) * b;
        let inner = disk(size, cx + c * u - s * v, cy + s * u + c * v, r);
        let ratio_px = inner.area() as f32 / outer.area().max(1) as f32;
        if !strictly_inside(&inner, &outer) || !(0.05..=0.25).contains(&ratio_px) || inner.area() < MIN_AREA {
            continue;
        }
        let su = rng.random_range(-0.1..0.3) * a;
        let sv = rng.random_range(0.45..0.65) * b;
        let stripe_c = rect_corners(cx + c * su - s * sv, cy + s * su + c * sv, 0.9 * a, rng.random_range(3.0..5.0), theta);
        let Some(stripe) = polygon(size, &stripe_c) else { continue };
        let stripe = and(&stripe, &outer);
        if intersects(&dilate(&stripe, 1), &inner) {
            continue;
        }
        let go = contrasting(rng, &[bg], 0.3);
        let sign = if go > 0.5 { -1.0 } else { 1.0 };
        let gi = go + sign * rng.random_range(0.08..0.14);
        let gs = go + sign * rng.random_range(0.06..0.12);
        paint(&mut img, &outer, go);
        paint(&mut img, &stripe, gs);
        paint(&mut img, &inner, gi);
        finish(&mut img, rng);
        let mut scene = Scene::new(img);
        scene.objects = 1;
        scene.composites = 1;
        scene.masks.push(inner);
        return Some(scene);
    }
    None
}

fn banner_scene<R: Rng>(rng: &mut R, size: usize) -> Option<Scene> {
    let sf = size as f32;
    let bg: f32 = rng.random_range(0.0..=1.0);
    let mut img = GrayImage::filled(size, size, bg);
    clutter(&mut img, rng);
    for _ in 0..MAX_TRIES {
        let (w, h) = (rng.random_range(0.4..0.62) * sf, rng.random_range(0.22..0.34) * sf);
        let theta = rng.random_range(-0.5..0.5f32);
        let shear = rng.random_range(-0.2..0.2f32);
        let (sx, sy) = (rng.random_range(0.9..1.1f32), rng.random_range(0.9..1.1f32));
        let (tx, ty) = (rng.random_range(0.3..0.7) * sf, rng.random_range(0.3..0.7) * sf);
        let (s, c) = theta.sin_cos();
        let affine = |u: f32, v: f32| {
            let (x, y) = (sx * u + shear * v, sy * v);
            Point::new(tx + c * x - s * y, ty + s * x + c * y)
        };
        let corners: Vec<Point> =
            [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)].iter().map(|(u, v)| affine(u * w, v * h)).collect();
        let Some(gt) = polygon(size, &corners) else { continue };
        if (gt.area() as f64) < 0.9 * quad_area(&corners) || !single_component(&gt, MIN_AREA) {
            continue;
        }
        let gb = contrasting(rng, &[bg], 0.3);
        paint(&mut img, &gt, gb);
        let n_marks = rng.random_range(3..=6);
        let mut marks = 0;
        for _ in 0..MAX_TRIES {
            if marks == n_marks {
                break;
            }
            let (mw, mh) = (rng.random_range(0.06..0.18) * w, rng.random_range(0.2..0.5) * h);
            let (mu, mv) = (
                rng.random_range(-0.5 * w + mw / 2.0 + 2.0..0.5 * w - mw / 2.0 - 2.0),
                rng.random_range(-0.5 * h + mh / 2.0 + 2.0..0.5 * h - mh / 2.0 - 2.0),
            );
            let local = rect_corners(mu, mv, mw, mh, rng.random_range(-0.3..0.3));
            let pts: Vec<Point> = local.iter().map(|p| affine(p.x, p.y)).collect();
            let Some(m) = polygon(size, &pts) else { continue };
            let m = and(&m, &gt);
            if m.area() < 4 {
                continue;
            }
            paint(&mut img, &m, contrasting(rng, &[gb], 0.35));
            marks += 1;
        }
        if marks < 3 {
            continue;
        }
        finish(&mut img, rng);
        let mut scene = Scene::new(img);
        scene.objects = 1;
        scene.masks.push(gt);
        scene.corners = corners;
        scene.marks = marks;
        return Some(scene);
    }
    None
}

fn quad_area(p: &[Point]) -> f64 {
    let n = p.len();
    (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a.x as f64 * b.y as f64 - b.x as f64 * a.y as f64
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

fn plate_scene<R: Rng>(rng: &mut R, size: usize) -> Option<Scene> {
    let sf = size as f32;
    let bg: f32 = rng.random_range(0.3..=1.0);
    let mut img = GrayImage::filled(size, size, bg);
    clutter(&mut img, rng);
    for _ in 0..MAX_TRIES {
        let theta = rng.random_range(-0.15..0.15f32);
        let (vw, vh) = (rng.random_range(0.55..0.8) * sf, rng.random_range(0.32..0.48) * sf);
        let (vx, vy) = (sf / 2.0 + rng.random_range(-4.0..4.0), sf / 2.0 + rng.random_range(-4.0..4.0));
        let vehicle_c = rect_corners(vx, vy, vw, vh, theta);
        let Some(vehicle) = polygon(size, &vehicle_c) else { continue };
        let (pw, ph) = (rng.random_range(10.0..16.0f32), rng.random_range(5.0..8.0f32));
        let (s, c) = theta.sin_cos();
        let (u, v) = (rng.random_range(-0.25..0.25) * vw, rng.random_range(0.1..0.3) * vh);
        let corners = rect_corners(vx + c * u - s * v, vy + s * u + c * v, pw, ph, theta);
        let Some(gt) = polygon(size, &corners) else { continue };
        if !strictly_inside(&gt, &vehicle) || !single_component(&gt, MIN_AREA) {
            continue;
        }
        let gv = rng.random_range(0.02..0.25);
        let gp = rng.random_range(0.8..1.0);
        paint(&mut img, &vehicle, gv);
        paint(&mut img, &gt, gp);
        // glyph strokes on the plate
        let n = rng.random_range(2..=4);
        for k in 0..n {
            let gu = u - pw * 0.35 + pw * 0.7 * (k as f32 + 0.5) / n as f32;
            let g = rect_corners(vx + c * gu - s * v, vy + s * gu + c * v, 1.2, ph * 0.55, theta);
            if let Some(m) = polygon(size, &g) {
                paint(&mut img, &and(&m, &gt), gv + 0.1);
            }
        }
        finish(&mut img, rng);
        let mut scene = Scene::new(img);
        scene.objects = 1;
        scene.masks.push(gt);
        scene.corners = corners;
        return Some(scene);
    }
    None
}

fn scene_for(spec: &TaskSpec, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ spec.task.salt());
    rng.set_stream(index);
    let size = spec.image_size;
    let scene = match spec.task {
        Task::Generic => Some(generic_scene(&mut rng, size)),
        Task::Subpart => subpart_scene(&mut rng, size),
        Task::Banner => banner_scene(&mut rng, size),
        Task::Plate => plate_scene(&mut rng, size),
    };
    scene.unwrap_or_else(|| {
        let mut s = Scene::new(GrayImage::filled(size, size, 0.0));
        s.skipped.push(format!("{}: no feasible layout after {MAX_TRIES} tries", spec.task));
        s
    })
}

/// Generates `spec.count` samples. Images whose layout is infeasible are
/// skipped and logged in `Dataset::skipped`.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    if spec.count == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    if spec.image_size < 16 {
        return Err(Error::Config(format!("image size {} is too small", spec.image_size)));
    }
    let mut ds = Dataset::default();
    let mut index = 0u64;
    while ds.samples.len() < spec.count {
        if index as usize > spec.count.saturating_mul(20) + 1000 {
            return Err(Error::Degenerate(format!("{}: too many infeasible layouts", spec.task)));
        }
        let scene = scene_for(spec, index);
        let id = format!("{}-{}-{:05}", spec.label(), spec.seed, index);
        index += 1;
        ds.skipped.extend(scene.skipped.iter().map(|s| format!("{id}: {s}")));
        if scene.masks.is_empty() {
            continue;
        }
        let room = spec.count - ds.samples.len();
        if scene.masks.len() > room {
            // A truncated image contributes only the samples that fit; its
            // object counts are left out.
        } else {
            ds.objects += scene.objects;
            ds.composites += scene.composites;
        }
        let image = Arc::new(if spec.mirror { scene.image.flip_horizontal() } else { scene.image });
        for m in scene.masks.into_iter().take(room) {
            let mask = if spec.mirror { m.flip_horizontal() } else { m };
            ds.samples.push(Sample { image: image.clone(), mask, task: spec.label(), instance_id: id.clone() });
        }
    }
    Ok(ds)
}

// ---- split ------------------------------------------------------------------

/// 80:20 train/val membership from a hash of the instance id.
pub fn is_train(instance_id: &str) -> bool {
    let h = Sha256::digest(instance_id.as_bytes());
    let v = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
    v % 100 < 80
}

pub fn split(samples: &[Sample]) -> (Vec<Sample>, Vec<Sample>) {
    samples.iter().cloned().partition(|s| is_train(&s.instance_id))
}

// ---- PGM --------------------------------------------------------------------

pub fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

/// Parses binary PGM (P5, maxval ≤ 255). Header errors carry a line number.
pub fn decode_pgm(buf: &[u8], name: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut line = 1;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b'\n') => {
                    line += 1;
                    pos += 1;
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(format!("{name}:line {line}"), "truncated PGM header"));
        }
        fields.push((String::from_utf8_lossy(&buf[start..pos]).into_owned(), line));
    }
    if fields[0].0 != "P5" {
        return Err(Error::format(format!("{name}:line {}", fields[0].1), format!("expected P5 magic, found {:?}", fields[0].0)));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .0
            .parse()
            .map_err(|_| Error::format(format!("{name}:line {}", fields[i].1), format!("bad header field {:?}", fields[i].0)))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("{name}:line {}", fields[3].1), format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte ends the header
    pos += 1;
    let need = w * h;
    if buf.len() < pos + need {
        return Err(Error::format(
            format!("{name}:line {line}"),
            format!("raster truncated: {} of {need} bytes", buf.len().saturating_sub(pos)),
        ));
    }
    Ok((w, h, buf[pos..pos + need].to_vec()))
}

pub fn image_to_pgm(img: &GrayImage) -> Vec<u8> {
    let bytes: Vec<u8> = img.data.iter().map(|v| to_byte(*v)).collect();
    encode_pgm(img.width, img.height, &bytes)
}

pub fn mask_to_pgm(m: &Mask) -> Vec<u8> {
    let bytes: Vec<u8> = m.data.iter().map(|b| if *b { 255 } else { 0 }).collect();
    encode_pgm(m.width, m.height, &bytes)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display(), e))
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    let (w, h, b) = decode_pgm(&read_file(path)?, &path.display().to_string())?;
    GrayImage::new(w, h, b.iter().map(|v| *v as f32 / 255.0).collect())
}

/// Reads a mask; every value must be 0 or 255.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let name = path.display().to_string();
    let (w, h, b) = decode_pgm(&read_file(path)?, &name)?;
    if let Some(i) = b.iter().position(|v| *v != 0 && *v != 255) {
        return Err(Error::format(
            format!("{name}:pixel ({}, {})", i % w.max(1), i / w.max(1)),
            format!("mask value {} is not 0 or 255", b[i]),
        ));
    }
    Mask::new(w, h, b.iter().map(|v| *v == 255).collect())
}

pub fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    write_file(path, &image_to_pgm(img))
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write_file(path, &mask_to_pgm(m))
}

// ---- manifest ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub task: String,
    pub instance_id: String,
}

/// Writes `images/*.pgm`, `masks/*.pgm` and the manifest under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<ManifestEntry>> {
    let io = |e: std::io::Error| Error::io(dir.display(), e);
    fs::create_dir_all(dir.join("images")).map_err(io)?;
    fs::create_dir_all(dir.join("masks")).map_err(io)?;
    let mut written = HashSet::new();
    let mut per_instance: HashMap<&str, usize> = HashMap::new();
    let mut entries = Vec::with_capacity(samples.len());
    let mut manifest = Vec::new();
    for s in samples {
        let image = format!("images/{}.pgm", s.instance_id);
        if written.insert(s.instance_id.as_str()) {
            write_image(&dir.join(&image), &s.image)?;
        }
        let k = per_instance.entry(s.instance_id.as_str()).or_insert(0);
        let mask = format!("masks/{}_{}.pgm", s.instance_id, k);
        *k += 1;
        write_mask(&dir.join(&mask), &s.mask)?;
        let e = ManifestEntry { image, mask, task: s.task.clone(), instance_id: s.instance_id.clone() };
        manifest.extend(serde_json::to_string(&e).expect("plain strings").into_bytes());
        manifest.push(b'\n');
        entries.push(e);
    }
    let mut f = fs::File::create(dir.join(MANIFEST)).map_err(io)?;
    f.write_all(&manifest).map_err(io)?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let f = fs::File::open(&path).map_err(|e| Error::io(path.display(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|err| Error::format(format!("{}:line {}", path.display(), i + 1), err.to_string()))?;
        out.push(e);
    }
    Ok(out)
}

/// Loads every sample listed in the manifest, checking that image and mask
/// sizes agree and that masks are binary and non-empty.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let entries = read_manifest(dir)?;
    let mut images: HashMap<String, Arc<GrayImage>> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let image = match images.get(&e.image) {
            Some(img) => img.clone(),
            None => {
                let img = Arc::new(read_image(&dir.join(&e.image))?);
                images.insert(e.image.clone(), img.clone());
                img
            }
        };
        let mask = read_mask(&dir.join(&e.mask))?;
        let loc = || format!("{}:line {}", dir.join(MANIFEST).display(), i + 1);
        if mask.width != image.width || mask.height != image.height {
            return Err(Error::format(
                loc(),
                format!("mask {}×{} vs image {}×{}", mask.width, mask.height, image.width, image.height),
            ));
        }
        if mask.is_empty() {
            return Err(Error::format(loc(), "empty mask"));
        }
        out.push(Sample { image, mask, task: e.task.clone(), instance_id: e.instance_id.clone() });
    }
    Ok(out)
}

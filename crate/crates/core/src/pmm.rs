//! Point matching module: boundary points, feature gathering, the boundary
//! transformer and polygon rasterization.

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{bilinear_taps, Point};
use crate::error::{dim_err, Error, Result};
use crate::image::Mask;
use crate::nn::{self, Bound, ParamStore};
use crate::tape::{SparseMap, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const NS: &str = "pmm";
pub const DEFAULT_K: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmmConfig {
    /// Channels of `f_DT`.
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub decoder_hidden: usize,
    pub k: usize,
}

impl PmmConfig {
    pub fn for_channels(c: usize) -> Self {
        Self { channels: c, dim: 32, heads: 4, mlp_hidden: 64, blocks: 3, decoder_hidden: 32, k: DEFAULT_K }
    }
}

impl Default for PmmConfig {
    fn default() -> Self {
        Self::for_channels(64)
    }
}

// ---- contours ---------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Edge {
    /// Between samples (i, j) and (i+1, j) of the padded grid.
    H(usize, usize),
    /// Between samples (i, j) and (i, j+1).
    V(usize, usize),
}

impl Edge {
    /// Padded sample (i, j) sits at pixel centre (i − 0.5, j − 0.5).
    fn point(self) -> (f64, f64) {
        match self {
            Edge::H(i, j) => (i as f64, j as f64 - 0.5),
            Edge::V(i, j) => (i as f64 - 0.5, j as f64),
        }
    }
}

/// Closed marching-squares loops of a binary mask (iso-level halfway between
/// pixel centres). Diagonal-only contacts are kept apart (4-connectivity).
fn marching_squares(mask: &Mask) -> Vec<Vec<(f64, f64)>> {
    let (w, h) = (mask.width, mask.height);
    let sample = |i: usize, j: usize| i >= 1 && j >= 1 && i <= w && j <= h && mask.get(i - 1, j - 1);
    let mut adj: HashMap<Edge, Vec<Edge>> = HashMap::new();
    let mut link = |a: Edge, b: Edge| {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    };
    for j in 0..=h {
        for i in 0..=w {
            let case = (sample(i, j) as u8) << 3
                | (sample(i + 1, j) as u8) << 2
                | (sample(i + 1, j + 1) as u8) << 1
                | sample(i, j + 1) as u8;
            let top = Edge::H(i, j);
            let bottom = Edge::H(i, j + 1);
            let left = Edge::V(i, j);
            let right = Edge::V(i + 1, j);
            match case {
                1 | 14 => link(left, bottom),
                2 | 13 => link(bottom, right),
                3 | 12 => link(left, right),
                4 | 11 => link(top, right),
                6 | 9 => link(top, bottom),
                7 | 8 => link(top, left),
                5 => {
                    link(top, right);
                    link(left, bottom);
                }
                10 => {
                    link(top, left);
                    link(right, bottom);
                }
                _ => {}
            }
        }
    }
    let mut starts: Vec<Edge> = adj.keys().copied().collect();
    starts.sort_by_key(|e| match *e {
        Edge::H(i, j) => (j, i, 0),
        Edge::V(i, j) => (j, i, 1),
    });
    let mut seen: HashMap<Edge, bool> = HashMap::new();
    let mut loops = Vec::new();
    for s in starts {
        if seen.contains_key(&s) {
            continue;
        }
        let mut lp = vec![s.point()];
        seen.insert(s, true);
        let mut prev = s;
        let mut cur = adj[&s][0];
        while cur != s {
            seen.insert(cur, true);
            lp.push(cur.point());
            let n = &adj[&cur];
            let next = if n[0] == prev { n[1] } else { n[0] };
            prev = cur;
            cur = next;
        }
        loops.push(lp);
    }
    loops
}

fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    a / 2.0
}

/// `K` boundary points of the mask's largest connected component, spaced
/// uniformly by arc length along the marching-squares contour. The first
/// point is the contour vertex with the smallest `(y, x)`; the orientation
/// has positive shoelace area in image coordinates (clockwise on screen).
pub fn extract_contour(mask: &Mask, k: usize) -> Result<Vec<Point>> {
    if k == 0 {
        return Err(Error::Input("contour needs K ≥ 1 points".into()));
    }
    let Some(comp) = mask.largest_component() else {
        return Err(Error::Input("cannot extract a contour from an empty mask".into()));
    };
    if comp.area() < 4 {
        return Err(Error::Degenerate(format!("foreground of {} px is too small for a contour", comp.area())));
    }
    let mut poly = marching_squares(&comp)
        .into_iter()
        .max_by(|a, b| signed_area(a).abs().total_cmp(&signed_area(b).abs()))
        .expect("non-empty component has a boundary");
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    let start = (0..poly.len())
        .min_by(|&a, &b| (poly[a].1, poly[a].0).partial_cmp(&(poly[b].1, poly[b].0)).unwrap())
        .unwrap();
    poly.rotate_left(start);
    Ok(resample_closed(&poly, k))
}

fn resample_closed(poly: &[(f64, f64)], k: usize) -> Vec<Point> {
    let n = poly.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        cum.push(cum[i] + ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt());
    }
    let total = cum[n];
    let mut out = Vec::with_capacity(k);
    let mut seg = 0;
    for s in 0..k {
        let t = total * s as f64 / k as f64;
        while seg + 1 < n && cum[seg + 1] <= t {
            seg += 1;
        }
        let (a, b) = (poly[seg], poly[(seg + 1) % n]);
        let len = cum[seg + 1] - cum[seg];
        let f = if len > 0.0 { (t - cum[seg]) / len } else { 0.0 };
        out.push(Point::new((a.0 + f * (b.0 - a.0)) as f32, (a.1 + f * (b.1 - a.1)) as f32));
    }
    out
}

/// Default jitter: 2% of the image diagonal.
pub fn jitter_sigma(width: usize, height: usize) -> f32 {
    0.02 * ((width * width + height * height) as f32).sqrt()
}

/// Adds i.i.d. `N(0, σ²)` noise to every coordinate and clamps to
/// `[0, width] × [0, height]`.
pub fn jitter_points(points: &[Point], sigma: f32, width: usize, height: usize, seed: u64) -> Vec<Point> {
    if sigma <= 0.0 {
        return points.iter().map(|p| clamp_point(*p, width, height)).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, sigma).expect("finite sigma");
    points
        .iter()
        .map(|p| {
            let q = Point::new(p.x + n.sample(&mut rng), p.y + n.sample(&mut rng));
            clamp_point(q, width, height)
        })
        .collect()
}

fn clamp_point(p: Point, width: usize, height: usize) -> Point {
    Point::new(p.x.clamp(0.0, width as f32), p.y.clamp(0.0, height as f32))
}

// ---- features ---------------------------------------------------------------

/// Bilinear read weights of `f_DT` (a `grid × grid` token map) at each point.
pub fn gather_map(points: &[Point], image_size: usize, grid: usize) -> SparseMap {
    let s = grid as f32 / image_size as f32;
    let rows = points.iter().map(|p| bilinear_taps(p.x * s - 0.5, p.y * s - 0.5, grid, grid)).collect();
    SparseMap { n_in: grid * grid, rows }
}

/// `W = c(f_DT, G*)`: `K × (C + 2)`, the gathered channels followed by the
/// normalized point coordinates. Differentiable in `f_dt`.
pub fn gather_point_features<T: Real>(
    tape: &mut Tape<T>,
    f_dt: Var,
    points: &[Point],
    image_size: usize,
    grid: usize,
) -> Result<Var> {
    if tape.value(f_dt).rows() != grid * grid {
        return Err(dim_err!("f_DT has {} tokens, expected {}", tape.value(f_dt).rows(), grid * grid));
    }
    let feats = tape.sparse_mix(f_dt, Rc::new(gather_map(points, image_size, grid)))?;
    let s = image_size as f32;
    let coords: Vec<f32> = points.iter().flat_map(|p| [p.x / s, p.y / s]).collect();
    let coords = tape.constant(Tensor::new(&[points.len(), 2], coords)?.cast());
    tape.concat_cols(&[feats, coords])
}

// ---- boundary transformer ---------------------------------------------------

#[derive(Clone, Debug)]
pub struct Pmm {
    pub cfg: PmmConfig,
}

impl Pmm {
    pub fn new(cfg: PmmConfig) -> Result<Self> {
        if cfg.heads == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("PMM width {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        if cfg.k < 3 {
            return Err(Error::Config("PMM needs K ≥ 3".into()));
        }
        Ok(Self { cfg })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        nn::init_linear(&mut s, &mut rng, "pmm.in", c.channels + 2, c.dim);
        for i in 0..c.blocks {
            let p = format!("pmm.blk.{i}");
            nn::init_layer_norm(&mut s, &format!("{p}.ln1"), c.dim);
            nn::init_attention(&mut s, &mut rng, &format!("{p}.attn"), c.dim, c.dim);
            nn::init_layer_norm(&mut s, &format!("{p}.ln2"), c.dim);
            nn::init_mlp(&mut s, &mut rng, &format!("{p}.mlp"), &[c.dim, c.mlp_hidden, c.dim]);
        }
        nn::init_linear(&mut s, &mut rng, "pmm.dec.0", c.dim, c.decoder_hidden);
        nn::init_linear(&mut s, &mut rng, "pmm.dec.1", c.decoder_hidden, c.decoder_hidden);
        nn::init_linear_zero(&mut s, "pmm.dec.2", c.decoder_hidden, 2);
        s
    }

    /// `G̃ = clamp(G* + φ(W))` as a `K × 2` variable of `(x, y)` rows.
    pub fn boundary_transform<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        w: Var,
        g_star: &[Point],
        image_size: usize,
    ) -> Result<Var> {
        let (rows, cols) = (tape.value(w).rows(), tape.value(w).cols());
        if rows != g_star.len() {
            return Err(dim_err!("{rows} feature rows for {} points", g_star.len()));
        }
        if cols != self.cfg.channels + 2 {
            return Err(dim_err!("PMM expects {} feature columns, got {cols}", self.cfg.channels + 2));
        }
        let mut h = nn::linear(tape, b, "pmm.in", w)?;
        for i in 0..self.cfg.blocks {
            let p = format!("pmm.blk.{i}");
            let x = nn::layer_norm(tape, b, &format!("{p}.ln1"), h)?;
            let a = nn::attention(tape, b, &format!("{p}.attn"), x, x, x, self.cfg.heads)?;
            h = tape.add(h, a)?;
            let x = nn::layer_norm(tape, b, &format!("{p}.ln2"), h)?;
            let m = nn::mlp(tape, b, &format!("{p}.mlp"), x, 2)?;
            h = tape.add(h, m)?;
        }
        let offsets = nn::mlp(tape, b, "pmm.dec", h, 3)?;
        let base = tape.constant(points_tensor(g_star).cast());
        let moved = tape.add(base, offsets)?;
        Ok(tape.clamp(moved, 0.0, image_size as f32))
    }

    /// Refines points without gradients.
    pub fn refine_points(&self, params: &ParamStore, f_dt: &Tensor, points: &[Point], image_size: usize, grid: usize) -> Result<Vec<Point>> {
        let mut tape = Tape::new();
        let b = params.subset("pmm.").bind(&mut tape, |_| false);
        let f = tape.constant(f_dt.clone().reshape(&[grid * grid, self.cfg.channels])?);
        let w = gather_point_features(&mut tape, f, points, image_size, grid)?;
        let g = self.boundary_transform(&mut tape, &b, w, points, image_size)?;
        Ok(tensor_points(tape.value(g)))
    }

    pub fn param_count(params: &ParamStore) -> usize {
        params.count("pmm.")
    }
}

pub fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::new(&[points.len(), 2], points.iter().flat_map(|p| [p.x, p.y]).collect()).expect("K×2")
}

pub fn tensor_points(t: &Tensor) -> Vec<Point> {
    t.data().chunks(2).map(|c| Point::new(c[0], c[1])).collect()
}

// ---- rasterization ----------------------------------------------------------

/// Even-odd fill of the closed polygon; a pixel is set when its centre lies
/// inside.
pub fn rasterize_polygon(points: &[Point], width: usize, height: usize) -> Result<Mask> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("polygon with {} points", points.len())));
    }
    let poly: Vec<(f64, f64)> = points.iter().map(|p| (p.x as f64, p.y as f64)).collect();
    if signed_area(&poly).abs() < 1e-9 {
        return Err(Error::Degenerate("polygon has zero area (collinear points)".into()));
    }
    let mut mask = Mask::empty(width, height);
    let n = poly.len();
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a.1 > yc) != (b.1 > yc) {
                xs.push(a.0 + (yc - a.1) / (b.1 - a.1) * (b.0 - a.0));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            // centres x + 0.5 in (pair[0], pair[1]]
            let lo = (pair[0] - 0.5).floor() + 1.0;
            let hi = (pair[1] - 0.5).floor();
            let lo = lo.max(0.0) as i64;
            let hi = hi.min(width as f64 - 1.0) as i64;
            for x in lo..=hi {
                mask.set(x as usize, y, true);
            }
        }
    }
    Ok(mask)
}

/// Contour extraction → feature gathering → boundary transform →
/// rasterization. `f_dt` is `grid × grid × C` (or `grid² × C`).
pub fn refine_mask_twostep(pmm: &Pmm, params: &ParamStore, mask: &Mask, f_dt: &Tensor, grid: usize) -> Result<Mask> {
    let g = extract_contour(mask, pmm.cfg.k)?;
    let refined = pmm.refine_points(params, f_dt, &g, mask.width, grid)?;
    rasterize_polygon(&refined, mask.width, mask.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdOptions};

    fn square(lo: usize, hi: usize) -> Mask {
        Mask::from_fn(64, 64, |x, y| x >= lo && x < hi && y >= lo && y < hi)
    }

    fn disk(cx: f32, cy: f32, r: f32) -> Mask {
        Mask::from_fn(64, 64, |x, y| (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2) <= r * r)
    }

    fn iou(a: &Mask, b: &Mask) -> f64 {
        let i = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
        let u = a.data.iter().zip(&b.data).filter(|(x, y)| **x || **y).count();
        i as f64 / u as f64
    }

    /// Arc-length position of a point projected onto the square's perimeter
    /// walked clockwise from the top-left corner.
    fn square_arc(p: Point, lo: f32, hi: f32) -> f32 {
        let side = hi - lo;
        let (dx, dy) = (p.x - lo, p.y - lo);
        let d = [dy.abs(), (hi - p.x).abs(), (hi - p.y).abs(), dx.abs()];
        let e = (0..4).min_by(|a, b| d[*a].total_cmp(&d[*b])).unwrap();
        match e {
            0 => dx.clamp(0.0, side),
            1 => side + dy.clamp(0.0, side),
            2 => 2.0 * side + (hi - p.x).clamp(0.0, side),
            _ => 3.0 * side + (hi - p.y).clamp(0.0, side),
        }
    }

    #[test]
    fn square_contour_is_on_perimeter_and_evenly_spaced() {
        let pts = extract_contour(&square(16, 48), 32).unwrap();
        assert_eq!(pts.len(), 32);
        for p in &pts {
            let d = [(p.x - 16.0).abs(), (p.x - 48.0).abs(), (p.y - 16.0).abs(), (p.y - 48.0).abs()];
            assert!(d.iter().cloned().fold(f32::MAX, f32::min) <= 0.5, "{p:?}");
        }
        let per = 128.0;
        for i in 0..32 {
            let a = square_arc(pts[i], 16.0, 48.0);
            let b = square_arc(pts[(i + 1) % 32], 16.0, 48.0);
            let gap = (b - a).rem_euclid(per);
            assert!((gap - per / 32.0).abs() <= 0.51, "gap {gap} at {i}");
        }
        // starts at the smallest (y, x)
        assert!(pts.iter().all(|p| (p.y, p.x) >= (pts[0].y, pts[0].x)));
    }

    #[test]
    fn k4_on_square_is_quarter_spaced() {
        let pts = extract_contour(&square(16, 48), 4).unwrap();
        for i in 0..4 {
            let a = square_arc(pts[i], 16.0, 48.0);
            let b = square_arc(pts[(i + 1) % 4], 16.0, 48.0);
            assert!(((b - a).rem_euclid(128.0) - 32.0).abs() <= 0.51);
        }
    }

    #[test]
    fn disk_contour_radius() {
        let pts = extract_contour(&disk(32.0, 32.0, 20.0), 32).unwrap();
        for p in pts {
            let r = ((p.x - 32.0).powi(2) + (p.y - 32.0).powi(2)).sqrt();
            assert!((r - 20.0).abs() <= 1.0, "r = {r}");
        }
    }

    #[test]
    fn contour_errors() {
        assert!(matches!(extract_contour(&Mask::empty(8, 8), 32), Err(Error::Input(_))));
        let m = Mask::from_fn(8, 8, |x, y| y == 2 && (x == 1 || x == 2 || x == 3));
        assert!(matches!(extract_contour(&m, 32), Err(Error::Degenerate(_))));
    }

    #[test]
    fn contour_uses_largest_component() {
        let m = Mask::from_fn(64, 64, |x, y| (x < 4 && y < 4) || ((30..50).contains(&x) && (30..50).contains(&y)));
        let pts = extract_contour(&m, 16).unwrap();
        assert!(pts.iter().all(|p| p.x >= 29.0 && p.y >= 29.0));
    }

    #[test]
    fn round_trip_square_and_disk() {
        for m in [square(16, 48), square(5, 12), disk(32.0, 32.0, 20.0), disk(20.0, 40.0, 6.0)] {
            let r = rasterize_polygon(&extract_contour(&m, 32).unwrap(), 64, 64).unwrap();
            assert!(iou(&m, &r) >= 0.95, "{}", iou(&m, &r));
        }
    }

    #[test]
    fn rasterize_square_area() {
        let pts = [Point::new(16.0, 16.0), Point::new(48.0, 16.0), Point::new(48.0, 48.0), Point::new(16.0, 48.0)];
        let m = rasterize_polygon(&pts, 64, 64).unwrap();
        assert_eq!(m.area(), 1024);
        assert!(matches!(rasterize_polygon(&pts[..2], 64, 64), Err(Error::Degenerate(_))));
        let line = [Point::new(1.0, 1.0), Point::new(2.0, 2.0), Point::new(5.0, 5.0)];
        assert!(matches!(rasterize_polygon(&line, 64, 64), Err(Error::Degenerate(_))));
    }

    #[test]
    fn jitter_contracts() {
        let pts = [Point::new(0.0, 0.0), Point::new(30.0, 12.5)];
        assert_eq!(jitter_points(&pts, 0.0, 64, 64, 3), pts.to_vec());
        let j = jitter_points(&pts, 5.0, 64, 64, 3);
        assert!(j[0].x >= 0.0 && j[0].y >= 0.0);
        assert_eq!(j, jitter_points(&pts, 5.0, 64, 64, 3));
        let many = vec![Point::new(32.0, 32.0); 10_000];
        let j = jitter_points(&many, 1.0, 64, 64, 11);
        let n = j.len() as f64;
        let mean = j.iter().map(|p| p.x as f64).sum::<f64>() / n;
        let sd = (j.iter().map(|p| (p.x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.9..=1.1).contains(&sd), "{sd}");
        assert!((jitter_sigma(64, 64) - 1.8102).abs() < 1e-3);
    }

    #[test]
    fn gather_exact_on_grid_and_mean_between() {
        let f = Tensor::new(&[16, 3], (0..48).map(|v| v as f32).collect()).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        // 16×16 image, 4×4 grid: cell (r=1, c=2) centre is at (10, 6)
        let pts = [Point::new(10.0, 6.0), Point::new(8.0, 8.0)];
        let w = gather_point_features(&mut tape, fv, &pts, 16, 4).unwrap();
        let w = tape.value(w);
        assert_eq!(w.shape(), &[2, 5]);
        assert_eq!(&w.data()[0..3], &f.data()[6 * 3..6 * 3 + 3]);
        assert_eq!(&w.data()[3..5], &[10.0 / 16.0, 6.0 / 16.0]);
        for ch in 0..3 {
            let mean = [5usize, 6, 9, 10].iter().map(|c| f.data()[c * 3 + ch]).sum::<f32>() / 4.0;
            assert!((w.data()[5 + ch] - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn default_shape_and_identity_at_init() {
        let pmm = Pmm::new(PmmConfig::default()).unwrap();
        let p = pmm.init(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::randn(&[64, 64], 1.0, &mut rng);
        let pts = extract_contour(&disk(30.0, 28.0, 15.0), 32).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let w = gather_point_features(&mut tape, fv, &pts, 64, 8).unwrap();
        assert_eq!(tape.value(w).shape(), &[32, 66]);
        let refined = pmm.refine_points(&p, &f, &pts, 64, 8).unwrap();
        assert_eq!(refined, pts);
    }

    #[test]
    fn untrained_twostep_is_near_identity() {
        let pmm = Pmm::new(PmmConfig::default()).unwrap();
        let p = pmm.init(0);
        let f = Tensor::zeros(&[8, 8, 64]);
        let m = disk(30.0, 33.0, 12.0);
        let r = refine_mask_twostep(&pmm, &p, &m, &f, 8).unwrap();
        assert!(iou(&m, &r) >= 0.9);
        assert!(matches!(refine_mask_twostep(&pmm, &p, &Mask::empty(64, 64), &f, 8), Err(Error::Input(_))));
    }

    #[test]
    fn refined_points_are_clamped() {
        let pmm = Pmm::new(PmmConfig::for_channels(4)).unwrap();
        let mut p = pmm.init(0);
        p.insert("pmm.dec.2.b", Tensor::new(&[2], vec![500.0, -500.0]).unwrap());
        let pts = extract_contour(&square(2, 10), 8).unwrap();
        let r = pmm.refine_points(&p, &Tensor::zeros(&[4, 4]), &pts, 16, 2).unwrap();
        assert!(r.iter().all(|q| q.x == 16.0 && q.y == 0.0));
    }

    #[test]
    fn transform_gradients_match_finite_differences() {
        let cfg = PmmConfig { channels: 4, dim: 8, heads: 2, mlp_hidden: 8, blocks: 3, decoder_hidden: 8, k: 6 };
        let pmm = Pmm::new(cfg).unwrap();
        let mut p = pmm.init(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        p.insert("pmm.dec.2.w", Tensor::randn(&[8, 2], 0.5, &mut rng));
        let f = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let pts: Vec<Point> = (0..6).map(|i| Point::new(3.0 + i as f32, 8.0 - i as f32 * 0.7)).collect();
        let names: Vec<String> = p.names().cloned().collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let r = finite_diff_check(
            |t, v| {
                let b = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                let fv = t.constant(f.cast());
                let w = gather_point_features(t, fv, &pts, 16, 2)?;
                let g = pmm.boundary_transform(t, &b, w, &pts, 16)?;
                let target = t.constant(points_tensor(&pts).cast());
                let d = t.sub(g, target)?;
                let sq = t.mul(d, d)?;
                Ok(t.mean(sq))
            },
            &tensors,
            FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn k_mismatch_is_dimension_error() {
        let pmm = Pmm::new(PmmConfig::for_channels(4)).unwrap();
        let p = pmm.init(0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false);
        let w = tape.constant(Tensor::zeros(&[5, 6]));
        let pts = vec![Point::new(1.0, 1.0); 4];
        assert!(matches!(pmm.boundary_transform(&mut tape, &b, w, &pts, 16), Err(Error::Dimension(_))));
    }
}

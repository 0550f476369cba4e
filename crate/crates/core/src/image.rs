//! Grayscale images, binary masks and the distance transform.

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(dim_err!("{width}×{height} image with {} pixels", data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = self.data[y * self.width + self.width - 1 - x];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(dim_err!("{width}×{height} mask with {} pixels", data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Thresholds logits at 0 (probability 0.5).
    pub fn from_logits(width: usize, height: usize, logits: &[f32]) -> Self {
        Self { width, height, data: logits.iter().map(|v| *v > 0.0).collect() }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        Mask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// 4-connected components, largest first (ties broken by first pixel in
    /// row-major order).
    pub fn components(&self) -> Vec<Mask> {
        let (w, h) = (self.width, self.height);
        let mut label = vec![usize::MAX; w * h];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for start in 0..w * h {
            if !self.data[start] || label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut pixels = vec![start];
            label[start] = id;
            let mut i = 0;
            while i < pixels.len() {
                let p = pixels[i];
                i += 1;
                let (x, y) = (p % w, p / w);
                let mut visit = |q: usize| {
                    if self.data[q] && label[q] == usize::MAX {
                        label[q] = id;
                        pixels.push(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
            }
            comps.push(pixels);
        }
        let mut order: Vec<usize> = (0..comps.len()).collect();
        order.sort_by(|a, b| comps[*b].len().cmp(&comps[*a].len()).then(a.cmp(b)));
        order
            .into_iter()
            .map(|i| {
                let mut m = Mask::empty(w, h);
                for &p in &comps[i] {
                    m.data[p] = true;
                }
                m
            })
            .collect()
    }

    pub fn largest_component(&self) -> Option<Mask> {
        self.components().into_iter().next()
    }

    pub fn check_same_shape(&self, other: &Mask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(dim_err!(
                "mask {}×{} vs {}×{}",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        Ok(())
    }
}

/// Euclidean distance from each foreground pixel centre to the nearest
/// background pixel centre; pixels outside the image count as background.
/// Background pixels get 0.
pub fn distance_transform(mask: &Mask) -> Vec<f32> {
    // Exact squared EDT (Felzenszwalb–Huttenlocher) on a one-pixel padded grid.
    let (w, h) = (mask.width + 2, mask.height + 2);
    let inf = 1e20f64;
    let mut f = vec![inf; w * h];
    for y in 0..h {
        for x in 0..w {
            let inside = x >= 1 && y >= 1 && x <= mask.width && y <= mask.height && mask.get(x - 1, y - 1);
            if !inside {
                f[y * w + x] = 0.0;
            }
        }
    }
    let mut buf = vec![0.0; w.max(h)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = f[y * w + x];
        }
        let d = edt_1d(&buf[..h]);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        let d = edt_1d(&f[y * w..(y + 1) * w]);
        f[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    let mut out = vec![0.0; mask.width * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            out[y * mask.width + x] = f[(y + 1) * w + x + 1].sqrt() as f32;
        }
    }
    out
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Foreground pixel with maximal distance-transform value; ties resolve to
/// the lexicographically smallest `(y, x)`.
pub fn center_pixel(mask: &Mask) -> Result<(usize, usize)> {
    if mask.is_empty() {
        return Err(Error::Input("empty mask has no centre".into()));
    }
    let dt = distance_transform(mask);
    let mut best = 0;
    for i in 1..dt.len() {
        if dt[i] > dt[best] {
            best = i;
        }
    }
    Ok((best % mask.width, best / mask.width))
}

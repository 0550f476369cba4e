//! Frozen miniature promptable segmenter: `m = D(E_I(x), E_P(p))`.
//!
//! The image encoder patchifies the image, adds a Fourier grid encoding and
//! runs a few pre-norm transformer blocks. The prompt encoder maps each point
//! through a frozen random-Fourier feature matrix plus a learned point-type
//! embedding. The decoder runs two-way attention over
//! `[iou token, 3 mask tokens, prompt tokens]` and the image tokens, then
//! produces three mask logit grids, three IoU estimates and the attended
//! image-token map (`f_DT`) consumed by the point matching module.

use std::f32::consts::PI;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::image::GrayImage;
use crate::nn::{self, Bound, ParamStore};
use crate::tape::{SparseMap, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const NUM_MASKS: usize = 3;
pub const NS: &str = "backbone";
/// Resolution gain of the learned mask upscaling over the token grid.
pub const UPSCALE: usize = 4;
const PE_GAUSS: &str = "backbone.pe_gauss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub encoder_mlp: usize,
    pub decoder_blocks: usize,
    /// Hidden width of the decoder's per-token MLPs (token side only, so wide
    /// layers are cheap: they see five tokens, not the image grid).
    pub decoder_mlp: usize,
    /// Projection width of the decoder's cross attentions.
    pub cross_inner: usize,
    pub head_hidden: usize,
    /// Std of the frozen Fourier matrix.
    pub pe_scale: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            channels: 64,
            heads: 8,
            encoder_blocks: 2,
            encoder_mlp: 256,
            decoder_blocks: 2,
            decoder_mlp: 2048,
            cross_inner: 32,
            head_hidden: 1536,
            pe_scale: 2.0,
        }
    }
}

impl BackboneConfig {
    /// 16×16 configuration for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch: 4,
            channels: 16,
            heads: 8,
            encoder_blocks: 1,
            encoder_mlp: 32,
            decoder_blocks: 2,
            decoder_mlp: 32,
            cross_inner: 16,
            head_hidden: 16,
            pe_scale: 1.0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("image size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        if self.grid() >= self.image_size {
            return Err(Error::Config("feature grid must be coarser than the image".into()));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) || !self.cross_inner.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("channels {} not divisible by {} heads", self.channels, self.heads)));
        }
        if !self.channels.is_multiple_of(8) {
            return Err(Error::Config("channels must be a multiple of 8".into()));
        }
        if UPSCALE * self.grid() > self.image_size {
            return Err(Error::Config(format!("patch {} is smaller than the {UPSCALE}× mask upscaling", self.patch)));
        }
        Ok(())
    }
}

/// A point prompt in pixel coordinates (`x` right, `y` down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    /// Centre of pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> Self {
        Self { x: col as f32 + 0.5, y: row as f32 + 0.5 }
    }
}

/// `f_I`: image tokens in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub tokens: Tensor,
    pub grid: usize,
}

impl ImageFeatures {
    pub fn position(&self, token: usize) -> (usize, usize) {
        (token / self.grid, token % self.grid)
    }
}

/// `f_P`: one token per prompt point.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub points: Vec<Point>,
}

/// Decoder results as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    /// `3 × (H_I·W_I)`
    pub mask_logits: Var,
    /// `(4H_f·4W_f) × 3`, before bilinear resampling
    pub low_res_logits: Var,
    /// `1 × 3`, in (0, 1)
    pub iou_pred: Var,
    /// `(H_f·W_f) × C`
    pub f_dt: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutputs {
    /// `[3, H_I, W_I]`
    pub mask_logits: Tensor,
    /// `[3, 4H_f, 4W_f]`
    pub low_res_logits: Tensor,
    pub iou_pred: [f32; NUM_MASKS],
    /// `[H_f, W_f, C]`
    pub f_dt: Tensor,
}

impl DecoderOutputs {
    pub fn from_tape(tape: &Tape, v: &DecoderVars, cfg: &BackboneConfig) -> Self {
        let (s, g, c) = (cfg.image_size, cfg.grid(), cfg.channels);
        let iou = tape.value(v.iou_pred).data();
        let low = tape.value(v.low_res_logits);
        let lg = UPSCALE * g;
        let mut low_t = vec![0.0; NUM_MASKS * lg * lg];
        for cell in 0..lg * lg {
            for m in 0..NUM_MASKS {
                low_t[m * lg * lg + cell] = low.at2(cell, m);
            }
        }
        Self {
            mask_logits: Tensor::from_parts(vec![NUM_MASKS, s, s], tape.value(v.mask_logits).data().to_vec()),
            low_res_logits: Tensor::from_parts(vec![NUM_MASKS, lg, lg], low_t),
            iou_pred: [iou[0], iou[1], iou[2]],
            f_dt: Tensor::from_parts(vec![g, g, c], tape.value(v.f_dt).data().to_vec()),
        }
    }

    pub fn mask_logits(&self, m: usize) -> &[f32] {
        let n = self.mask_logits.len() / NUM_MASKS;
        &self.mask_logits.data()[m * n..(m + 1) * n]
    }

    /// Index of the highest predicted IoU (first on ties).
    pub fn best_mask(&self) -> usize {
        argmax(&self.iou_pred)
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Random-Fourier features `[sin(2π p·B) ‖ cos(2π p·B)]` for points already
/// normalized to `[0, 1]²`. `gauss` is `2 × C/2`.
pub fn fourier_encode(points: &[(f32, f32)], gauss: &Tensor) -> Tensor {
    let half = gauss.cols();
    let g = gauss.data();
    let mut out = vec![0.0; points.len() * half * 2];
    for (i, (u, v)) in points.iter().enumerate() {
        for j in 0..half {
            let a = 2.0 * PI * (u * g[j] + v * g[half + j]);
            out[i * 2 * half + j] = a.sin();
            out[i * 2 * half + half + j] = a.cos();
        }
    }
    Tensor::from_parts(vec![points.len(), 2 * half], out)
}

/// Row permutation for a 2× pixel shuffle. Input rows are `token·4 + sub`
/// with `sub = 2·dy + dx` on a `g × g` token grid; output rows are the
/// row-major `2g × 2g` grid.
pub fn pixel_shuffle_map(g: usize) -> SparseMap {
    let n = 2 * g;
    let rows = (0..n * n)
        .map(|r| {
            let (y, x) = (r / n, r % n);
            let src = ((y / 2) * g + x / 2) * 4 + (y % 2) * 2 + x % 2;
            vec![(src as u32, 1.0)]
        })
        .collect();
    SparseMap { n_in: 4 * g * g, rows }
}

/// Bilinear resampling weights (half-pixel centres, border clamped) taking a
/// `src × src` grid to `dst × dst`.
pub fn bilinear_upsample_map(src: usize, dst: usize) -> SparseMap {
    let scale = src as f32 / dst as f32;
    let mut rows = Vec::with_capacity(dst * dst);
    for y in 0..dst {
        for x in 0..dst {
            let u = (x as f32 + 0.5) * scale - 0.5;
            let v = (y as f32 + 0.5) * scale - 0.5;
            rows.push(bilinear_taps(u, v, src, src));
        }
    }
    SparseMap { n_in: src * src, rows }
}

/// Taps of a bilinear read at continuous grid coordinate `(u, v)` on a
/// `w × h` grid (cell centres at integers), clamped to the border.
pub fn bilinear_taps(u: f32, v: f32, w: usize, h: usize) -> Vec<(u32, f32)> {
    let u = u.clamp(0.0, (w - 1) as f32);
    let v = v.clamp(0.0, (h - 1) as f32);
    let x0 = (u.floor() as usize).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f32;
    let fy = v - y0 as f32;
    let mut taps: Vec<(u32, f32)> = Vec::with_capacity(4);
    let mut push = |x: usize, y: usize, wgt: f32| {
        if wgt == 0.0 {
            return;
        }
        let idx = (y * w + x) as u32;
        if let Some(t) = taps.iter_mut().find(|t| t.0 == idx) {
            t.1 += wgt;
        } else {
            taps.push((idx, wgt));
        }
    };
    push(x0, y0, (1.0 - fx) * (1.0 - fy));
    push(x1, y0, fx * (1.0 - fy));
    push(x0, y1, (1.0 - fx) * fy);
    push(x1, y1, fx * fy);
    taps
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    upsample: Rc<SparseMap>,
    shuffle: [Rc<SparseMap>; 2],
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid();
        let upsample = Rc::new(bilinear_upsample_map(UPSCALE * g, cfg.image_size));
        let shuffle = [Rc::new(pixel_shuffle_map(g)), Rc::new(pixel_shuffle_map(2 * g))];
        Ok(Self { cfg, upsample, shuffle })
    }

    /// Fresh backbone parameters under the `backbone.` namespace.
    pub fn init(&self, seed: u64) -> ParamStore {
        let c = &self.cfg;
        let ch = c.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert(PE_GAUSS, Tensor::randn(&[2, ch / 2], c.pe_scale, &mut rng));
        nn::init_linear(&mut s, &mut rng, "backbone.enc.patch", c.patch * c.patch, ch);
        for i in 0..c.encoder_blocks {
            let p = format!("backbone.enc.{i}");
            nn::init_layer_norm(&mut s, &format!("{p}.ln1"), ch);
            nn::init_attention(&mut s, &mut rng, &format!("{p}.attn"), ch, ch);
            nn::init_layer_norm(&mut s, &format!("{p}.ln2"), ch);
            nn::init_mlp(&mut s, &mut rng, &format!("{p}.mlp"), &[ch, c.encoder_mlp, ch]);
        }
        nn::init_layer_norm(&mut s, "backbone.enc.neck", ch);
        s.insert("backbone.prompt.point_embed", Tensor::randn(&[ch], 1.0, &mut rng));
        s.insert("backbone.dec.tokens", Tensor::randn(&[1 + NUM_MASKS, ch], 1.0, &mut rng));
        for i in 0..c.decoder_blocks {
            let p = format!("backbone.dec.{i}");
            nn::init_attention(&mut s, &mut rng, &format!("{p}.self"), ch, ch);
            nn::init_layer_norm(&mut s, &format!("{p}.ln1"), ch);
            nn::init_attention(&mut s, &mut rng, &format!("{p}.t2i"), ch, c.cross_inner);
            nn::init_layer_norm(&mut s, &format!("{p}.ln2"), ch);
            nn::init_mlp(&mut s, &mut rng, &format!("{p}.mlp"), &[ch, c.decoder_mlp, ch]);
            nn::init_layer_norm(&mut s, &format!("{p}.ln3"), ch);
            nn::init_attention(&mut s, &mut rng, &format!("{p}.i2t"), ch, c.cross_inner);
            nn::init_layer_norm(&mut s, &format!("{p}.ln4"), ch);
        }
        nn::init_attention(&mut s, &mut rng, "backbone.dec.final_t2i", ch, c.cross_inner);
        nn::init_layer_norm(&mut s, "backbone.dec.final_ln", ch);
        nn::init_linear(&mut s, &mut rng, "backbone.dec.up.0", ch, ch);
        nn::init_layer_norm(&mut s, "backbone.dec.up.ln", ch / 4);
        nn::init_linear(&mut s, &mut rng, "backbone.dec.up.1", ch / 4, ch / 2);
        for m in 0..NUM_MASKS {
            nn::init_mlp(&mut s, &mut rng, &format!("backbone.dec.hyper.{m}"), &[ch, c.head_hidden, c.head_hidden, ch / 8]);
        }
        nn::init_mlp(&mut s, &mut rng, "backbone.dec.iou", &[ch, c.head_hidden, c.head_hidden, NUM_MASKS]);
        s
    }

    /// Names of parameters trained during pretraining (everything except the
    /// frozen Fourier matrix).
    pub fn is_pretrainable(name: &str) -> bool {
        name.starts_with("backbone.") && name != PE_GAUSS
    }

    pub fn is_decoder(name: &str) -> bool {
        name.starts_with("backbone.dec.")
    }

    /// Fourier encoding of the image-token grid (`tokens × C`).
    pub fn grid_pe(&self, params: &ParamStore) -> Result<Tensor> {
        let g = self.cfg.grid();
        let pts: Vec<(f32, f32)> = (0..g * g)
            .map(|i| (((i % g) as f32 + 0.5) / g as f32, ((i / g) as f32 + 0.5) / g as f32))
            .collect();
        Ok(fourier_encode(&pts, params.get(PE_GAUSS)?))
    }

    /// Fourier encoding of prompt points (`n × C`).
    pub fn point_pe(&self, params: &ParamStore, points: &[Point]) -> Result<Tensor> {
        let s = self.cfg.image_size as f32;
        for p in points {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < s && p.y < s) {
                return Err(Error::Input(format!("prompt point ({}, {}) outside the {s}×{s} image", p.x, p.y)));
            }
        }
        let pts: Vec<(f32, f32)> = points.iter().map(|p| (p.x / s, p.y / s)).collect();
        Ok(fourier_encode(&pts, params.get(PE_GAUSS)?))
    }

    fn patchify(&self, image: &GrayImage) -> Result<Tensor> {
        let (s, p, g) = (self.cfg.image_size, self.cfg.patch, self.cfg.grid());
        if image.width != s || image.height != s {
            return Err(dim_err!("expected {s}×{s} image, got {}×{}", image.width, image.height));
        }
        let mut out = vec![0.0; g * g * p * p];
        for gy in 0..g {
            for gx in 0..g {
                let t = gy * g + gx;
                for py in 0..p {
                    for px in 0..p {
                        out[t * p * p + py * p + px] = image.get(gx * p + px, gy * p + py);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![g * g, p * p], out))
    }

    /// Patch embedding plus grid encoding, before the transformer blocks.
    pub fn embed_patches<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, params: &ParamStore, image: &GrayImage) -> Result<Var> {
        let patches = tape.constant(self.patchify(image)?.cast());
        let x = nn::linear(tape, b, "backbone.enc.patch", patches)?;
        let pe = tape.constant(self.grid_pe(params)?.cast());
        tape.add(x, pe)
    }

    /// `E_I`: image → `tokens × C`.
    pub fn encode_image<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, params: &ParamStore, image: &GrayImage) -> Result<Var> {
        let mut x = self.embed_patches(tape, b, params, image)?;
        for i in 0..self.cfg.encoder_blocks {
            let p = format!("backbone.enc.{i}");
            let h = nn::layer_norm(tape, b, &format!("{p}.ln1"), x)?;
            let a = nn::attention(tape, b, &format!("{p}.attn"), h, h, h, self.cfg.heads)?;
            x = tape.add(x, a)?;
            let h = nn::layer_norm(tape, b, &format!("{p}.ln2"), x)?;
            let m = nn::mlp(tape, b, &format!("{p}.mlp"), h, 2)?;
            x = tape.add(x, m)?;
        }
        nn::layer_norm(tape, b, "backbone.enc.neck", x)
    }

    /// Image features without gradient tracking.
    pub fn image_features(&self, params: &ParamStore, image: &GrayImage) -> Result<ImageFeatures> {
        let mut tape = Tape::new();
        let b = params.subset("backbone.enc.").bind(&mut tape, |_| false);
        let v = self.encode_image(&mut tape, &b, params, image)?;
        Ok(ImageFeatures { tokens: tape.value(v).clone(), grid: self.cfg.grid() })
    }

    /// `E_P`: points → `n × C` tokens (Fourier encoding + point-type embedding).
    pub fn encode_prompt<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, params: &ParamStore, points: &[Point]) -> Result<Var> {
        if points.is_empty() {
            return Err(Error::Input("at least one prompt point is required".into()));
        }
        let pe = tape.constant(self.point_pe(params, points)?.cast());
        tape.add_row(pe, b.get("backbone.prompt.point_embed")?)
    }

    pub fn prompt_embedding(&self, params: &ParamStore, points: &[Point]) -> Result<PromptEmbedding> {
        let mut tape = Tape::new();
        let b = params.subset("backbone.prompt.").bind(&mut tape, |_| false);
        let v = self.encode_prompt(&mut tape, &b, params, points)?;
        Ok(PromptEmbedding { tokens: tape.value(v).clone(), points: points.to_vec() })
    }

    /// `D(f_I, f_P)`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, params: &ParamStore, f_i: Var, f_p: Var) -> Result<DecoderVars> {
        let c = &self.cfg;
        let ch = c.channels;
        if tape.value(f_i).cols() != ch || tape.value(f_p).cols() != ch {
            return Err(dim_err!(
                "decoder expects {ch} channels, got image {} / prompt {}",
                tape.value(f_i).cols(),
                tape.value(f_p).cols()
            ));
        }
        if tape.value(f_i).rows() != c.tokens() {
            return Err(dim_err!("decoder expects {} image tokens", c.tokens()));
        }
        let out_tokens = b.get("backbone.dec.tokens")?;
        let tokens = tape.concat_rows(&[out_tokens, f_p])?;
        let query_pe = tokens;
        let key_pe = tape.constant(self.grid_pe(params)?.cast());
        let mut queries = tokens;
        let mut keys = f_i;

        for i in 0..c.decoder_blocks {
            let p = format!("backbone.dec.{i}");
            if i == 0 {
                queries = nn::attention(tape, b, &format!("{p}.self"), queries, queries, queries, c.heads)?;
            } else {
                let q = tape.add(queries, query_pe)?;
                let a = nn::attention(tape, b, &format!("{p}.self"), q, q, queries, c.heads)?;
                queries = tape.add(queries, a)?;
            }
            queries = nn::layer_norm(tape, b, &format!("{p}.ln1"), queries)?;

            let q = tape.add(queries, query_pe)?;
            let k = tape.add(keys, key_pe)?;
            let a = nn::attention(tape, b, &format!("{p}.t2i"), q, k, keys, c.heads)?;
            queries = tape.add(queries, a)?;
            queries = nn::layer_norm(tape, b, &format!("{p}.ln2"), queries)?;

            let m = nn::mlp(tape, b, &format!("{p}.mlp"), queries, 2)?;
            queries = tape.add(queries, m)?;
            queries = nn::layer_norm(tape, b, &format!("{p}.ln3"), queries)?;

            let q = tape.add(queries, query_pe)?;
            let k = tape.add(keys, key_pe)?;
            let a = nn::attention(tape, b, &format!("{p}.i2t"), k, q, queries, c.heads)?;
            keys = tape.add(keys, a)?;
            keys = nn::layer_norm(tape, b, &format!("{p}.ln4"), keys)?;
        }
        let f_dt = keys;

        let q = tape.add(queries, query_pe)?;
        let k = tape.add(keys, key_pe)?;
        let a = nn::attention(tape, b, "backbone.dec.final_t2i", q, k, keys, c.heads)?;
        queries = tape.add(queries, a)?;
        queries = nn::layer_norm(tape, b, "backbone.dec.final_ln", queries)?;

        let iou_tok = tape.slice_rows(queries, 0, 1)?;
        let mut hyper = Vec::with_capacity(NUM_MASKS);
        for m in 0..NUM_MASKS {
            let t = tape.slice_rows(queries, 1 + m, 2 + m)?;
            hyper.push(nn::mlp(tape, b, &format!("backbone.dec.hyper.{m}"), t, 3)?);
        }
        let hyper = tape.concat_rows(&hyper)?;
        let fine = self.upscale(tape, b, f_dt)?;
        let low = tape.matmul_nt(fine, hyper)?;
        let up = tape.sparse_mix(low, self.upsample.clone())?;
        let mask_logits = tape.transpose(up);
        let iou = nn::mlp(tape, b, "backbone.dec.iou", iou_tok, 3)?;
        let iou_pred = tape.sigmoid(iou);
        Ok(DecoderVars { mask_logits, low_res_logits: low, iou_pred, f_dt })
    }

    /// Two learned 2× stages (per-token linear maps to 2×2 sub-pixels, as a
    /// stride-2 transposed convolution) taking `f_DT` to `4g × 4g × C/8`.
    fn upscale<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, f_dt: Var) -> Result<Var> {
        let (g, ch) = (self.cfg.grid(), self.cfg.channels);
        let x = nn::linear(tape, b, "backbone.dec.up.0", f_dt)?;
        let x = tape.reshape(x, &[4 * g * g, ch / 4])?;
        let x = tape.sparse_mix(x, self.shuffle[0].clone())?;
        let x = nn::layer_norm(tape, b, "backbone.dec.up.ln", x)?;
        let x = tape.relu(x);
        let x = nn::linear(tape, b, "backbone.dec.up.1", x)?;
        let x = tape.reshape(x, &[16 * g * g, ch / 8])?;
        let x = tape.sparse_mix(x, self.shuffle[1].clone())?;
        Ok(tape.relu(x))
    }

    /// Full frozen forward pass without gradients.
    pub fn predict(&self, params: &ParamStore, image: &GrayImage, points: &[Point]) -> Result<DecoderOutputs> {
        let feats = self.image_features(params, image)?;
        self.predict_with_features(params, &feats, points)
    }

    pub fn predict_with_features(&self, params: &ParamStore, feats: &ImageFeatures, points: &[Point]) -> Result<DecoderOutputs> {
        let mut tape = Tape::new();
        let b = bind_frozen_heads(params, &mut tape);
        let f_i = tape.constant(feats.tokens.clone());
        let f_p = self.encode_prompt(&mut tape, &b, params, points)?;
        let out = self.decode(&mut tape, &b, params, f_i, f_p)?;
        Ok(DecoderOutputs::from_tape(&tape, &out, &self.cfg))
    }

    pub fn param_count(params: &ParamStore) -> usize {
        params.count("backbone.")
    }
}

/// Binds the prompt encoder and decoder (not the image encoder) as constants.
pub(crate) fn bind_frozen_heads<T: Real>(params: &ParamStore, tape: &mut Tape<T>) -> Bound {
    let mut sub = params.subset("backbone.dec.");
    sub.extend(params.subset("backbone.prompt."));
    sub.bind(tape, |_| false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Backbone, ParamStore) {
        let bb = Backbone::new(BackboneConfig::tiny()).unwrap();
        let p = bb.init(11);
        (bb, p)
    }

    fn test_image(size: usize) -> GrayImage {
        let data = (0..size * size).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        GrayImage::new(size, size, data).unwrap()
    }

    #[test]
    fn encoder_shapes_at_default_scale() {
        let bb = Backbone::new(BackboneConfig::default()).unwrap();
        let p = bb.init(0);
        let f = bb.image_features(&p, &test_image(64)).unwrap();
        assert_eq!(f.tokens.shape(), &[64, 64]);
        let f2 = bb.image_features(&p, &test_image(64)).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn zero_image_with_zero_patch_embed_yields_positional_encoding() {
        let (bb, mut p) = tiny();
        for n in ["backbone.enc.patch.w", "backbone.enc.patch.b"] {
            let t = p.get(n).unwrap().clone();
            p.insert(n, Tensor::zeros(t.shape()));
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false);
        let img = GrayImage::filled(16, 16, 0.0);
        let v = bb.embed_patches(&mut tape, &b, &p, &img).unwrap();
        assert_eq!(tape.value(v), &bb.grid_pe(&p).unwrap());
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let (bb, p) = tiny();
        assert!(matches!(bb.image_features(&p, &test_image(20)), Err(Error::Dimension(_))));
    }

    #[test]
    fn prompt_encoder_contracts() {
        let (bb, mut p) = tiny();
        let pts = [Point::new(3.5, 4.5), Point::new(3.5, 4.5), Point::new(10.0, 1.0)];
        let e = bb.prompt_embedding(&p, &pts).unwrap();
        assert_eq!(e.tokens.shape(), &[3, 16]);
        assert_eq!(&e.tokens.data()[0..16], &e.tokens.data()[16..32]);

        // zero Fourier matrix: [0…0, 1…1] + type embedding
        p.insert(PE_GAUSS, Tensor::zeros(&[2, 8]));
        let e = bb.prompt_embedding(&p, &[Point::new(7.0, 2.0)]).unwrap();
        let te = p.get("backbone.prompt.point_embed").unwrap().data();
        for (j, (&v, &t)) in e.tokens.data()[..16].iter().zip(te).enumerate() {
            let base = if j < 8 { 0.0 } else { 1.0 };
            assert!((v - (base + t)).abs() < 1e-6);
        }
        assert!(matches!(bb.prompt_embedding(&p, &[Point::new(16.0, 2.0)]), Err(Error::Input(_))));
    }

    #[test]
    fn decoder_shapes_and_determinism_at_default_scale() {
        let bb = Backbone::new(BackboneConfig::default()).unwrap();
        let p = bb.init(0);
        let img = test_image(64);
        let o = bb.predict(&p, &img, &[Point::new(30.5, 20.5)]).unwrap();
        assert_eq!(o.mask_logits.shape(), &[3, 64, 64]);
        assert_eq!(o.f_dt.shape(), &[8, 8, 64]);
        assert!(o.iou_pred.iter().all(|v| *v > 0.0 && *v < 1.0));
        let o2 = bb.predict(&p, &img, &[Point::new(30.5, 20.5)]).unwrap();
        assert_eq!(o, o2);
    }

    #[test]
    fn decoder_rejects_channel_mismatch() {
        let (bb, p) = tiny();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false);
        let fi = tape.constant(Tensor::zeros(&[16, 16]));
        let fp = tape.constant(Tensor::zeros(&[1, 12]));
        assert!(matches!(bb.decode(&mut tape, &b, &p, fi, fp), Err(Error::Dimension(_))));
    }

    #[test]
    fn decoder_is_differentiable_in_prompt_tokens() {
        use crate::gradcheck::{finite_diff_check, FdOptions};
        let (bb, p) = tiny();
        let img = test_image(16);
        let feats = bb.image_features(&p, &img).unwrap();
        let prompt = bb.prompt_embedding(&p, &[Point::new(6.5, 9.5)]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                let b = bind_frozen_heads(&p, t);
                let fi = t.constant(feats.tokens.cast());
                let out = bb.decode(t, &b, &p, fi, v[0])?;
                let s = t.sum(out.mask_logits);
                Ok(t.scale(s, 1.0 / 256.0))
            },
            &[prompt.tokens],
            FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn pixel_shuffle_is_a_permutation_onto_subpixels() {
        let m = pixel_shuffle_map(3);
        let mut seen: Vec<u32> = m.rows.iter().map(|r| r[0].0).collect();
        // token (1, 2) sub-pixel (dy 1, dx 0) lands at row 3, col 4
        assert_eq!(m.rows[3 * 6 + 4][0].0 as usize, (3 + 2) * 4 + 2);
        seen.sort();
        assert_eq!(seen, (0..36).collect::<Vec<u32>>());
    }

    #[test]
    fn upsample_map_rows_are_convex_weights() {
        let m = bilinear_upsample_map(8, 64);
        assert_eq!(m.n_out(), 4096);
        for row in &m.rows {
            let s: f32 = row.iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

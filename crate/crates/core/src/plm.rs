//! Prompt learning module: `Δf_P = φ(f_P, f_I)`, `f̃_P = f_P + Δf_P`.
//!
//! Self-attention over the prompt tokens, cross-attention from the prompts
//! to the image tokens, then a per-token MLP whose last layer starts at
//! zero, so a fresh module leaves the frozen segmenter's behaviour unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{bind_frozen_heads, Backbone, DecoderOutputs, ImageFeatures, Point, PromptEmbedding};
use crate::error::{dim_err, Error, Result};
use crate::image::GrayImage;
use crate::nn::{self, Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const NS: &str = "plm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlmConfig {
    pub channels: usize,
    pub heads: usize,
    /// Projection width of both attention blocks.
    pub attn_inner: usize,
    pub mlp_hidden: usize,
}

impl PlmConfig {
    pub fn for_channels(c: usize) -> Self {
        Self { channels: c, heads: 8, attn_inner: (c / 2).max(8), mlp_hidden: 4 * c }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.attn_inner.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("PLM width {} not divisible by {} heads", self.attn_inner, self.heads)));
        }
        Ok(())
    }
}

impl Default for PlmConfig {
    fn default() -> Self {
        Self::for_channels(64)
    }
}

#[derive(Clone, Debug)]
pub struct Plm {
    pub cfg: PlmConfig,
}

impl Plm {
    pub fn new(cfg: PlmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let (c, inner, hid) = (self.cfg.channels, self.cfg.attn_inner, self.cfg.mlp_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        nn::init_attention(&mut s, &mut rng, "plm.self", c, inner);
        nn::init_layer_norm(&mut s, "plm.ln1", c);
        nn::init_attention(&mut s, &mut rng, "plm.cross", c, inner);
        nn::init_layer_norm(&mut s, "plm.ln2", c);
        nn::init_linear(&mut s, &mut rng, "plm.mlp.0", c, hid);
        nn::init_linear_zero(&mut s, "plm.mlp.1", hid, c);
        s
    }

    /// `φ(f_P, f_I)`. `prompt_pe` and `grid_pe` are the Fourier encodings of
    /// the prompt points and of the image-token grid.
    pub fn offset<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        f_p: Var,
        f_i: Var,
        prompt_pe: Var,
        grid_pe: Var,
    ) -> Result<Var> {
        let c = self.cfg.channels;
        if tape.value(f_p).cols() != c || tape.value(f_i).cols() != c {
            return Err(dim_err!(
                "PLM expects {c} channels, got prompt {} / image {}",
                tape.value(f_p).cols(),
                tape.value(f_i).cols()
            ));
        }
        let h = self.cfg.heads;
        let q = tape.add(f_p, prompt_pe)?;
        let a = nn::attention(tape, b, "plm.self", q, q, q, h)?;
        let x = tape.add(f_p, a)?;
        let x = nn::layer_norm(tape, b, "plm.ln1", x)?;

        let q = tape.add(x, prompt_pe)?;
        let k = tape.add(f_i, grid_pe)?;
        let a = nn::attention(tape, b, "plm.cross", q, k, f_i, h)?;
        let x = tape.add(x, a)?;
        let x = nn::layer_norm(tape, b, "plm.ln2", x)?;

        nn::mlp(tape, b, "plm.mlp", x, 2)
    }

    pub fn param_count(params: &ParamStore) -> usize {
        params.count("plm.")
    }
}

/// `f̃_P = f_P + Δf_P`.
pub fn apply_prompt_offset(f_p: &PromptEmbedding, delta: &Tensor) -> Result<PromptEmbedding> {
    if f_p.tokens.shape() != delta.shape() {
        return Err(dim_err!("prompt {:?} vs offset {:?}", f_p.tokens.shape(), delta.shape()));
    }
    let data = f_p.tokens.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
    Ok(PromptEmbedding { tokens: Tensor::new(f_p.tokens.shape(), data)?, points: f_p.points.clone() })
}

/// Frozen backbone plus an optional PLM, evaluated without gradients.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub backbone: Backbone,
    pub plm: Option<Plm>,
    pub params: ParamStore,
}

impl Segmenter {
    /// Uses the PLM only when `params` holds PLM tensors.
    pub fn new(backbone: Backbone, params: ParamStore) -> Result<Self> {
        let plm = if params.has_namespace(NS) {
            Some(Plm::new(PlmConfig::for_channels(backbone.cfg.channels))?)
        } else {
            None
        };
        Ok(Self { backbone, plm, params })
    }

    pub fn with_plm(backbone: Backbone, plm: Plm, params: ParamStore) -> Self {
        Self { backbone, plm: Some(plm), params }
    }

    pub fn image_features(&self, image: &GrayImage) -> Result<ImageFeatures> {
        self.backbone.image_features(&self.params, image)
    }

    pub fn predict(&self, image: &GrayImage, points: &[Point]) -> Result<DecoderOutputs> {
        let f = self.image_features(image)?;
        self.predict_with_features(&f, points)
    }

    /// `segment_adapted` on precomputed image features.
    pub fn predict_with_features(&self, feats: &ImageFeatures, points: &[Point]) -> Result<DecoderOutputs> {
        let mut tape = Tape::new();
        let out = forward_adapted(&mut tape, &self.backbone, self.plm.as_ref(), &self.params, &feats.tokens, points, |_| false)?;
        Ok(DecoderOutputs::from_tape(&tape, &out.decoder, &self.backbone.cfg))
    }
}

/// Tape variables from one adapted forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedVars {
    pub decoder: crate::backbone::DecoderVars,
    pub f_p: Var,
    pub delta: Option<Var>,
}

/// Prompt encoding, optional PLM offset and decoding on `tape`.
/// `trainable` selects parameters (by name) that require grad.
pub fn forward_adapted<T: Real>(
    tape: &mut Tape<T>,
    backbone: &Backbone,
    plm: Option<&Plm>,
    params: &ParamStore,
    image_tokens: &Tensor,
    points: &[Point],
    trainable: impl Fn(&str) -> bool,
) -> Result<AdaptedVars> {
    let mut b = bind_frozen_heads(params, tape);
    if plm.is_some() {
        let pb = params.subset("plm.").bind(tape, &trainable);
        b = merge(b, pb);
    }
    let f_i = tape.constant(image_tokens.cast());
    forward_adapted_bound(tape, &b, backbone, plm, params, f_i, points)
}

pub(crate) fn forward_adapted_bound<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    backbone: &Backbone,
    plm: Option<&Plm>,
    params: &ParamStore,
    f_i: Var,
    points: &[Point],
) -> Result<AdaptedVars> {
    let f_p = backbone.encode_prompt(tape, b, params, points)?;
    let (prompt, delta) = match plm {
        Some(plm) => {
            let ppe = tape.constant(backbone.point_pe(params, points)?.cast());
            let gpe = tape.constant(backbone.grid_pe(params)?.cast());
            let d = plm.offset(tape, b, f_p, f_i, ppe, gpe)?;
            (tape.add(f_p, d)?, Some(d))
        }
        None => (f_p, None),
    };
    let decoder = backbone.decode(tape, b, params, f_i, prompt)?;
    Ok(AdaptedVars { decoder, f_p, delta })
}

pub(crate) fn merge(mut a: Bound, b: Bound) -> Bound {
    a.extend(b);
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::gradcheck::{finite_diff_check, FdOptions};

    fn setup() -> (Backbone, Plm, ParamStore) {
        let bb = Backbone::new(BackboneConfig::tiny()).unwrap();
        let plm = Plm::new(PlmConfig::for_channels(16)).unwrap();
        let mut p = bb.init(1);
        p.extend(plm.init(2));
        (bb, plm, p)
    }

    fn image() -> GrayImage {
        GrayImage::new(16, 16, (0..256).map(|i| ((i * 13) % 29) as f32 / 29.0).collect()).unwrap()
    }

    #[test]
    fn offset_shapes_and_zero_init() {
        let (bb, plm, p) = setup();
        let feats = bb.image_features(&p, &image()).unwrap();
        for n in [1usize, 2, 5] {
            let pts: Vec<Point> = (0..n).map(|i| Point::new(2.0 + i as f32, 3.5)).collect();
            let mut tape = Tape::new();
            let out = forward_adapted(&mut tape, &bb, Some(&plm), &p, &feats.tokens, &pts, |_| false).unwrap();
            let d = tape.value(out.delta.unwrap());
            assert_eq!(d.shape(), &[n, 16]);
            assert!(d.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn identity_at_init_matches_frozen_decoder() {
        let (bb, _, p) = setup();
        let img = image();
        let pts = [Point::new(7.5, 4.5)];
        let frozen = bb.predict(&p, &img, &pts).unwrap();
        let adapted = Segmenter::new(bb, p).unwrap().predict(&img, &pts).unwrap();
        assert!(adapted.mask_logits.max_abs_diff(&frozen.mask_logits) <= 1e-6);
    }

    #[test]
    fn apply_offset_contracts() {
        let e = PromptEmbedding { tokens: Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(), points: vec![] };
        let d = Tensor::new(&[1, 3], vec![0.5, -1.0, 0.25]).unwrap();
        let neg = Tensor::new(&[1, 3], vec![-0.5, 1.0, -0.25]).unwrap();
        let back = apply_prompt_offset(&apply_prompt_offset(&e, &d).unwrap(), &neg).unwrap();
        assert_eq!(back.tokens, e.tokens);
        assert!(apply_prompt_offset(&e, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let (_, plm, p) = setup();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false);
        let fp = tape.constant(Tensor::zeros(&[1, 8]));
        let fi = tape.constant(Tensor::zeros(&[16, 16]));
        let pe = tape.constant(Tensor::zeros(&[1, 8]));
        let gpe = tape.constant(Tensor::zeros(&[16, 16]));
        assert!(matches!(plm.offset(&mut tape, &b, fp, fi, pe, gpe), Err(Error::Dimension(_))));
    }

    #[test]
    fn identical_points_get_identical_offsets() {
        let (bb, plm, mut p) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        p.insert("plm.mlp.1.w", Tensor::randn(&[64, 16], 0.2, &mut rng));
        let feats = bb.image_features(&p, &image()).unwrap();
        let pts = [Point::new(3.5, 3.5), Point::new(9.0, 12.0), Point::new(3.5, 3.5)];
        let mut tape = Tape::new();
        let out = forward_adapted(&mut tape, &bb, Some(&plm), &p, &feats.tokens, &pts, |_| false).unwrap();
        let d = tape.value(out.delta.unwrap()).data();
        assert_eq!(&d[0..16], &d[32..48]);
    }

    #[test]
    fn offset_gradients_match_finite_differences() {
        let (bb, plm, mut p) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        p.insert("plm.mlp.1.w", Tensor::randn(&[64, 16], 0.2, &mut rng));
        let feats = bb.image_features(&p, &image()).unwrap();
        let pts = [Point::new(3.5, 3.5), Point::new(11.0, 6.0)];
        let names: Vec<String> = p.subset("plm.").names().cloned().collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let r = finite_diff_check(
            |t, v| {
                let mut b = bind_frozen_heads(&p, t);
                b.extend(Bound::from_pairs(names.iter().cloned().zip(v.iter().copied())));
                let fi = t.constant(feats.tokens.cast());
                let fp = bb.encode_prompt(t, &b, &p, &pts)?;
                let ppe = t.constant(bb.point_pe(&p, &pts)?.cast());
                let gpe = t.constant(bb.grid_pe(&p)?.cast());
                let d = plm.offset(t, &b, fp, fi, ppe, gpe)?;
                let sq = t.mul(d, d)?;
                Ok(t.sum(sq))
            },
            &tensors,
            FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
        assert!(r.probes >= 100);
    }
}

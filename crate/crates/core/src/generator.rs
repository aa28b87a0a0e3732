//! Message-conditioned marker generator: FC stem, nearest-neighbor upsample +
//! conv stages with AdaIn styling, sigmoid RGB output in `[0,1]`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::Message;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tape::{Pad, Tape, Tensor, Var};

const EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("message length {got} does not match configured n_bits {expected}")]
    MessageLength { got: usize, expected: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Which normalization scheme the generator applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// No normalization anywhere.
    None,
    /// Pixel norm on the style vector and after every stage activation.
    PixelNorm,
    /// AdaIn styling, stage convs zero-padded.
    AdainZeroPad,
    /// AdaIn styling, stage convs replicate-padded.
    AdainReplicate,
}

impl Normalization {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "pixel_norm" => Some(Self::PixelNorm),
            "adain_zero_pad" => Some(Self::AdainZeroPad),
            "adain_replicate" => Some(Self::AdainReplicate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub n_bits: usize,
    pub style_dim: usize,
    /// Channels per resolution, starting at the 4x4 base; length = stages + 1.
    pub stage_channels: Vec<usize>,
    pub marker_resolution: usize,
    pub normalization: Normalization,
    pub leaky_slope: f64,
}

impl GeneratorConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len() - 1
    }

    fn validate(&self) {
        let stages = self.stages();
        assert_eq!(
            self.marker_resolution,
            4 << stages,
            "marker_resolution must be 4 * 2^stages (stages = stage_channels.len() - 1)"
        );
        assert!(self.n_bits > 0 && self.style_dim > 0);
    }
}

impl Default for GeneratorConfig {
    /// The 36-bit, 32x32 architecture: 4x4x16 -> 8x8x8 -> 16x16x6 -> 32x32x6 -> 32x32x3.
    fn default() -> Self {
        GeneratorConfig {
            n_bits: 36,
            style_dim: 256,
            stage_channels: vec![16, 8, 6, 6],
            marker_resolution: 32,
            normalization: Normalization::AdainZeroPad,
            leaky_slope: 0.2,
        }
    }
}

/// A generated color pattern, values in `[0,1]`, linear-light albedo.
#[derive(Debug, Clone)]
pub struct MarkerImage {
    /// `[3, H, W]`
    pub pixels: Tensor,
}

impl MarkerImage {
    pub fn resolution(&self) -> usize {
        self.pixels.shape[1]
    }

    /// Export as 8-bit sRGB PNG (gamma 2.2), optionally upscaled by
    /// nearest-neighbor.
    pub fn save_png(&self, path: &Path, upscale: usize) -> Result<(), GeneratorError> {
        let r = self.resolution();
        let s = upscale.max(1);
        let out = r * s;
        let mut img = image::RgbImage::new(out as u32, out as u32);
        let hw = r * r;
        for y in 0..out {
            for x in 0..out {
                let (sy, sx) = (y / s, x / s);
                let px = [0, 1, 2].map(|c| {
                    let v = self.pixels.data[c * hw + sy * r + sx].clamp(0.0, 1.0);
                    (v.powf(1.0 / 2.2) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

struct StageParams {
    conv_w: ParamId,
    conv_b: ParamId,
    adain_w: ParamId,
    adain_b: ParamId,
}

/// The generator network. Parameters live in a [`ParamStore`]; the forward
/// pass is a pure function of (weights, message).
pub struct Generator {
    pub cfg: GeneratorConfig,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    stages: Vec<StageParams>,
    to_rgb_w: ParamId,
    to_rgb_b: ParamId,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, store: &mut ParamStore, seed: u64) -> Self {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // He init per layer (fan-in scaled) so depth does not attenuate signal
        let he = |n: usize| (2.0 / n as f64).sqrt();
        let fc1_w =
            store.register_normal("gen.fc1.w", vec![cfg.n_bits, cfg.style_dim], he(cfg.n_bits), &mut rng);
        let fc1_b = store.register_zeros("gen.fc1.b", vec![cfg.style_dim]);
        let c0 = cfg.stage_channels[0];
        let fc2_w =
            store.register_normal("gen.fc2.w", vec![cfg.style_dim, c0 * 16], he(cfg.style_dim), &mut rng);
        let fc2_b = store.register_zeros("gen.fc2.b", vec![c0 * 16]);
        let mut stages = Vec::new();
        for i in 1..cfg.stage_channels.len() {
            let (ci, co) = (cfg.stage_channels[i - 1], cfg.stage_channels[i]);
            let conv_w = store.register_normal(
                &format!("gen.stage{i}.conv.w"),
                vec![co, ci, 3, 3],
                he(ci * 9),
                &mut rng,
            );
            let conv_b = store.register_zeros(&format!("gen.stage{i}.conv.b"), vec![co]);
            // style modulation starts gentle: scale near 1, shift near 0
            let adain_w = store.register_normal(
                &format!("gen.stage{i}.adain.w"),
                vec![cfg.style_dim, 2 * co],
                0.2 / (cfg.style_dim as f64).sqrt(),
                &mut rng,
            );
            // style scale bias starts at 1, shift at 0
            let mut b = vec![1.0; co];
            b.extend(vec![0.0; co]);
            let adain_b = store.register(
                &format!("gen.stage{i}.adain.b"),
                Tensor::from_vec(b),
            );
            stages.push(StageParams { conv_w, conv_b, adain_w, adain_b });
        }
        let cl = *cfg.stage_channels.last().unwrap();
        let to_rgb_w = store.register_normal("gen.torgb.w", vec![3, cl, 3, 3], he(cl * 9), &mut rng);
        let to_rgb_b = store.register_zeros("gen.torgb.b", vec![3]);
        Generator { cfg, fc1_w, fc1_b, fc2_w, fc2_b, stages, to_rgb_w, to_rgb_b }
    }

    /// Forward pass for one message; returns the `[3,H,W]` marker node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        message: &Message,
    ) -> Result<Var, GeneratorError> {
        Ok(self.forward_with_shapes(tape, binder, message)?.0)
    }

    /// Forward pass recording every intermediate feature-map shape (for the
    /// architecture audit).
    pub fn forward_with_shapes(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        message: &Message,
    ) -> Result<(Var, Vec<Vec<usize>>), GeneratorError> {
        if message.len() != self.cfg.n_bits {
            return Err(GeneratorError::MessageLength { got: message.len(), expected: self.cfg.n_bits });
        }
        let slope = self.cfg.leaky_slope;
        let mut shapes = Vec::new();
        let bits = tape.leaf(Tensor::from_vec(message.as_f64()));

        let w = binder.var(tape, self.fc1_w);
        let b = binder.var(tape, self.fc1_b);
        let style = tape.linear(bits, w, b);
        let style = tape.leaky_relu(style, slope);
        // style vector feeds FC2 and the per-stage AdaIn projections;
        // pixel norm applies unless normalization is disabled entirely
        let style = if self.cfg.normalization == Normalization::None {
            style
        } else {
            pixel_norm_vec(tape, style)
        };

        let w = binder.var(tape, self.fc2_w);
        let b = binder.var(tape, self.fc2_b);
        let base = tape.linear(style, w, b);
        let base = tape.leaky_relu(base, slope);
        let c0 = self.cfg.stage_channels[0];
        let mut feat = tape.reshape(base, vec![c0, 4, 4]);
        shapes.push(tape.val(feat).shape.clone());

        let pad = match self.cfg.normalization {
            Normalization::AdainReplicate => Pad::Replicate(1),
            _ => Pad::Zero(1),
        };
        for stage in &self.stages {
            feat = tape.upsample2x(feat);
            let w = binder.var(tape, stage.conv_w);
            let b = binder.var(tape, stage.conv_b);
            feat = tape.conv2d(feat, w, b, 1, pad);
            feat = tape.leaky_relu(feat, slope);
            match self.cfg.normalization {
                Normalization::None => {}
                Normalization::PixelNorm => feat = pixel_norm_map(tape, feat),
                Normalization::AdainZeroPad | Normalization::AdainReplicate => {
                    let aw = binder.var(tape, stage.adain_w);
                    let ab = binder.var(tape, stage.adain_b);
                    let style_params = tape.linear(style, aw, ab);
                    let c = tape.val(feat).shape[0];
                    let scale = tape.slice_flat(style_params, 0, c);
                    let bias = tape.slice_flat(style_params, c, c);
                    feat = adain(tape, feat, scale, bias);
                }
            }
            shapes.push(tape.val(feat).shape.clone());
        }

        let w = binder.var(tape, self.to_rgb_w);
        let b = binder.var(tape, self.to_rgb_b);
        let rgb = tape.conv2d(feat, w, b, 1, Pad::Zero(1));
        let out = tape.sigmoid(rgb);
        shapes.push(tape.val(out).shape.clone());
        Ok((out, shapes))
    }

    /// Generate marker images for a batch of messages (inference).
    pub fn generate(
        &self,
        store: &ParamStore,
        messages: &[Message],
    ) -> Result<Vec<MarkerImage>, GeneratorError> {
        let mut out = Vec::with_capacity(messages.len());
        for m in messages {
            let mut tape = Tape::new();
            let mut binder = Binder::new(store);
            let v = self.forward(&mut tape, &mut binder, m)?;
            out.push(MarkerImage { pixels: tape.val(v).clone() });
        }
        Ok(out)
    }
}

/// `x / sqrt(mean(x^2) + eps)` for a flat vector.
pub fn pixel_norm_vec(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.square(x);
    let ms = tape.mean(sq);
    let ms = tape.add_const(ms, EPS);
    let inv = tape.powf_const(ms, -0.5);
    tape.mul(x, inv)
}

/// Per-pixel across-channel normalization of a `[C,H,W]` map.
pub fn pixel_norm_map(tape: &mut Tape, x: Var) -> Var {
    let c = tape.val(x).shape[0];
    let sq = tape.square(x);
    let mut acc = tape.channel(sq, 0);
    for k in 1..c {
        let ch = tape.channel(sq, k);
        acc = tape.add(acc, ch);
    }
    let ms = tape.mul_const(acc, 1.0 / c as f64);
    let ms = tape.add_const(ms, EPS);
    let inv = tape.powf_const(ms, -0.5);
    let chans: Vec<Var> = (0..c)
        .map(|k| {
            let ch = tape.channel(x, k);
            tape.mul(ch, inv)
        })
        .collect();
    tape.concat0(&chans)
}

/// Adaptive instance normalization: remove per-channel instance statistics,
/// then apply the style scale and bias.
pub fn adain(tape: &mut Tape, feat: Var, scale: Var, bias: Var) -> Var {
    let m = tape.channel_mean(feat);
    let sq = tape.square(feat);
    let msq = tape.channel_mean(sq);
    let m2 = tape.square(m);
    let var = tape.sub(msq, m2);
    let var = tape.add_const(var, EPS);
    let inv_std = tape.powf_const(var, -0.5);
    // normalized = (feat - m) * inv_std, fused as feat*inv_std + (-m*inv_std)
    let neg_m = tape.neg(m);
    let shift = tape.mul(neg_m, inv_std);
    let normed = tape.channel_affine(feat, inv_std, shift);
    tape.channel_affine(normed, scale, bias)
}

//! The diffusion backend abstraction and the analytic constant backend.
//!
//! A backend bundles the noise predictor with its image codec and text
//! encoder. Real generative models (Stable Diffusion and friends) would
//! implement [`DiffusionBackend`] behind adapters; the shipped backends are
//! fully deterministic so every pipeline equation is testable on a CPU.

use std::collections::BTreeMap;

use image::RgbImage;

use crate::linalg::Matrix;
use crate::seed::{derive_seed, hash_embed, SeedRng};

use super::{DiffusionError, Latent};

/// Text-conditioning embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    data: Vec<f64>,
}

impl Condition {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Linear interpolation `(1 - t) a + t b`.
    pub fn lerp(a: &Condition, b: &Condition, t: f64) -> Condition {
        debug_assert_eq!(a.dim(), b.dim());
        Condition { data: crate::linalg::lerp(&a.data, &b.data, t) }
    }
}

/// Classifier-free guidance parameters (extension; off by default).
pub struct Guidance {
    pub uncond: Condition,
    pub scale: f64,
}

/// An adaptable layer: its weight viewed as a 2D `out_dim × in_dim` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
}

/// Additive per-layer weight deltas in the flattened 2D view declared by
/// [`DiffusionBackend::adaptable_layers`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightDelta {
    pub layers: BTreeMap<String, Matrix>,
}

impl WeightDelta {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.layers.get(name)
    }
}

/// Noise predictor + image codec + text encoder.
///
/// Implementations must be deterministic functions of their weights and
/// inputs, immutable during prediction, and safe to share across threads.
pub trait DiffusionBackend: Send + Sync {
    /// Predict the noise content of `z` at timestep `t` under condition `c`.
    fn predict_noise(
        &self,
        z: &Latent,
        t: usize,
        cond: &Condition,
        control: Option<&Latent>,
    ) -> Result<Latent, DiffusionError> {
        self.predict_noise_adapted(z, t, cond, control, None)
    }

    /// As [`Self::predict_noise`], with an optional additive weight delta
    /// applied to the adaptable layers for this call only.
    fn predict_noise_adapted(
        &self,
        z: &Latent,
        t: usize,
        cond: &Condition,
        control: Option<&Latent>,
        delta: Option<&WeightDelta>,
    ) -> Result<Latent, DiffusionError>;

    /// Encode an image into a latent.
    fn encode(&self, frame: &RgbImage) -> Result<Latent, DiffusionError>;

    /// Decode a latent back to an image.
    fn decode(&self, z: &Latent) -> Result<RgbImage, DiffusionError>;

    /// Deterministic text conditioning. Empty text maps to the zero
    /// condition (the unconditional embedding).
    fn encode_text(&self, text: &str) -> Result<Condition, DiffusionError>;

    /// Latent geometry for a given image size.
    fn latent_dims(&self, width: u32, height: u32)
        -> Result<(usize, usize, usize), DiffusionError>;

    /// Layers that accept additive weight deltas. Empty when the backend has
    /// no adaptable parameters.
    fn adaptable_layers(&self) -> Vec<LayerSpec> {
        Vec::new()
    }

    fn trainable(&self) -> bool {
        false
    }

    /// Denoising loss `mean((target - prediction)^2)` plus its gradient with
    /// respect to each adaptable layer's effective weight.
    fn denoise_loss_and_adaptable_grads(
        &self,
        _delta: Option<&WeightDelta>,
        _x_t: &Latent,
        _t: usize,
        _cond: &Condition,
        _target: &Latent,
    ) -> Result<(f64, BTreeMap<String, Matrix>), DiffusionError> {
        Err(DiffusionError::NotTrainable)
    }

    /// One SGD step on all backend weights against the denoising loss;
    /// returns the loss before the update.
    fn finetune_step(
        &mut self,
        _x_t: &Latent,
        _t: usize,
        _cond: &Condition,
        _target: &Latent,
        _lr: f64,
    ) -> Result<f64, DiffusionError> {
        Err(DiffusionError::NotTrainable)
    }

    /// Persist the backend weights as a named-tensor archive.
    fn save_weights(&self, path: &std::path::Path) -> Result<(), DiffusionError> {
        Err(DiffusionError::WeightArchive {
            path: path.to_path_buf(),
            reason: "this backend does not support weight export".to_string(),
        })
    }

    fn clone_backend(&self) -> Box<dyn DiffusionBackend>;
}

/// Lossless per-patch orthogonal image codec shared by the shipped backends.
///
/// The image is split into `patch`×`patch` tiles; each tile's 3·patch²
/// pixel values (scaled to [-1, 1]) are rotated by a seeded orthogonal
/// matrix into that many latent channels. Decoding applies the transpose, so
/// a decode(encode(frame)) round trip reproduces the frame exactly after
/// 8-bit quantization.
#[derive(Debug, Clone)]
pub struct PatchCodec {
    patch: usize,
    forward: Matrix,
    inverse: Matrix,
}

impl PatchCodec {
    pub fn new(patch: usize, seed: u64) -> Self {
        assert!(patch >= 1, "patch size must be >= 1");
        let dim = 3 * patch * patch;
        let mut rng = SeedRng::new(derive_seed(seed, &["patch-codec"]));
        let forward = Matrix::orthonormal_rows(dim, dim, &mut rng);
        let inverse = forward.transpose();
        Self { patch, forward, inverse }
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn latent_dims(
        &self,
        width: u32,
        height: u32,
    ) -> Result<(usize, usize, usize), DiffusionError> {
        let (w, h) = (width as usize, height as usize);
        if w == 0 || h == 0 || w % self.patch != 0 || h % self.patch != 0 {
            return Err(DiffusionError::Codec(format!(
                "image {w}x{h} not divisible into {0}x{0} patches",
                self.patch
            )));
        }
        Ok((self.latent_channels(), h / self.patch, w / self.patch))
    }

    pub fn encode(&self, frame: &RgbImage) -> Result<Latent, DiffusionError> {
        let (c, lh, lw) = self.latent_dims(frame.width(), frame.height())?;
        let p = self.patch;
        let mut out = Latent::zeros(c, lh, lw);
        let mut tile = vec![0.0f64; c];
        for py in 0..lh {
            for px in 0..lw {
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = frame.get_pixel((px * p + dx) as u32, (py * p + dy) as u32);
                        for ch in 0..3 {
                            tile[ch * p * p + dy * p + dx] = pix[ch] as f64 / 127.5 - 1.0;
                        }
                    }
                }
                let rotated = self.forward.matvec(&tile);
                for (ch, v) in rotated.iter().enumerate() {
                    out.set(ch, py, px, *v);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &Latent) -> Result<RgbImage, DiffusionError> {
        let c = self.latent_channels();
        if z.channels != c {
            return Err(DiffusionError::Codec(format!(
                "latent has {} channels, codec expects {c}",
                z.channels
            )));
        }
        let p = self.patch;
        let mut img = RgbImage::new((z.width * p) as u32, (z.height * p) as u32);
        let mut tile = vec![0.0f64; c];
        for py in 0..z.height {
            for px in 0..z.width {
                for (ch, v) in tile.iter_mut().enumerate() {
                    *v = z.at(ch, py, px);
                }
                let pixels = self.inverse.matvec(&tile);
                for dy in 0..p {
                    for dx in 0..p {
                        let mut rgb = [0u8; 3];
                        for ch in 0..3 {
                            let v = (pixels[ch * p * p + dy * p + dx] + 1.0) * 127.5;
                            rgb[ch] = v.round().clamp(0.0, 255.0) as u8;
                        }
                        img.put_pixel((px * p + dx) as u32, (py * p + dy) as u32, image::Rgb(rgb));
                    }
                }
            }
        }
        Ok(img)
    }
}

/// State-independent predictor modes for [`ConstantBackend`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstantPredictor {
    /// Always the zero tensor.
    Zero,
    /// Every entry equals the value.
    Constant(f64),
    /// Entries equal `amplitude * sin(t + 1)` — varies with the timestep but
    /// never with the latent.
    StepSine { amplitude: f64 },
}

/// Analytic backend whose predictions ignore the latent entirely; the DDIM
/// round trip is exact against it, which pins the algebra in tests.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    mode: ConstantPredictor,
    codec: PatchCodec,
    cond_dim: usize,
    text_seed: u64,
}

impl ConstantBackend {
    pub fn new(mode: ConstantPredictor, cond_dim: usize) -> Self {
        Self { mode, codec: PatchCodec::new(2, 0), cond_dim, text_seed: 0 }
    }

    pub fn zero(cond_dim: usize) -> Self {
        Self::new(ConstantPredictor::Zero, cond_dim)
    }

    pub fn constant(cond_dim: usize, value: f64) -> Self {
        Self::new(ConstantPredictor::Constant(value), cond_dim)
    }

    pub fn step_sine(cond_dim: usize, amplitude: f64) -> Self {
        Self::new(ConstantPredictor::StepSine { amplitude }, cond_dim)
    }
}

impl DiffusionBackend for ConstantBackend {
    fn predict_noise_adapted(
        &self,
        z: &Latent,
        t: usize,
        _cond: &Condition,
        _control: Option<&Latent>,
        _delta: Option<&WeightDelta>,
    ) -> Result<Latent, DiffusionError> {
        let value = match self.mode {
            ConstantPredictor::Zero => 0.0,
            ConstantPredictor::Constant(v) => v,
            ConstantPredictor::StepSine { amplitude } => amplitude * ((t + 1) as f64).sin(),
        };
        Ok(Latent::filled(z.channels, z.height, z.width, value))
    }

    fn encode(&self, frame: &RgbImage) -> Result<Latent, DiffusionError> {
        self.codec.encode(frame)
    }

    fn decode(&self, z: &Latent) -> Result<RgbImage, DiffusionError> {
        self.codec.decode(z)
    }

    fn encode_text(&self, text: &str) -> Result<Condition, DiffusionError> {
        Ok(Condition::new(hash_embed(self.text_seed, text, self.cond_dim)))
    }

    fn latent_dims(
        &self,
        width: u32,
        height: u32,
    ) -> Result<(usize, usize, usize), DiffusionError> {
        self.codec.latent_dims(width, height)
    }

    fn clone_backend(&self) -> Box<dyn DiffusionBackend> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synthetic_frame;

    #[test]
    fn codec_round_trip_is_exact_on_8bit_frames() {
        let codec = PatchCodec::new(2, 77);
        let frame = synthetic_frame(123, 16, 16);
        let z = codec.encode(&frame).unwrap();
        assert_eq!(z.shape(), (12, 8, 8));
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.as_raw(), frame.as_raw());
    }

    #[test]
    fn codec_rejects_indivisible_sizes() {
        let codec = PatchCodec::new(2, 1);
        assert!(codec.latent_dims(15, 16).is_err());
        assert!(codec.latent_dims(16, 15).is_err());
        assert!(codec.latent_dims(0, 16).is_err());
    }

    #[test]
    fn constant_backend_conditions_are_deterministic() {
        let b = ConstantBackend::zero(16);
        let c1 = b.encode_text("a knight rides a horse").unwrap();
        let c2 = b.encode_text("a knight rides a horse").unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.dim(), 16);
        // Empty text is the zero (unconditional) embedding.
        let un = b.encode_text("").unwrap();
        assert!(un.data().iter().all(|&v| v == 0.0));
    }
}

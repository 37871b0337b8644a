//! Deterministic toy diffusion backend.
//!
//! A two-layer 3×3 convolutional noise predictor with FiLM-style timestep
//! and text-condition channel biases:
//!
//! ```text
//! eps_hat = conv2( tanh( conv1([z; control]) + b1 + Wt·fourier(t) + Wc·c ) ) + b2
//! ```
//!
//! Both conv weights are adaptable (LoRA attaches there), the full parameter
//! set is trainable by plain SGD against the denoising objective, and the
//! image codec is the lossless orthogonal patch transform. Everything is
//! seeded, so identical configs produce bitwise-identical backends.

use std::collections::BTreeMap;

use image::RgbImage;

use crate::linalg::Matrix;
use crate::seed::{derive_seed, hash_embed, SeedRng};

use super::backend::{Condition, DiffusionBackend, LayerSpec, PatchCodec, WeightDelta};
use super::{noisy_latent, DiffusionError, Latent, NoiseSchedule};

pub const CONV1_LAYER: &str = "conv1.weight";
pub const CONV2_LAYER: &str = "conv2.weight";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyBackendConfig {
    pub hidden_channels: usize,
    pub cond_dim: usize,
    /// Codec patch size; latent channel count is 3·patch².
    pub patch: usize,
    /// Timestep Fourier feature count (pairs of sin/cos).
    pub time_features: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            cond_dim: 32,
            patch: 2,
            time_features: 8,
            init_std: 0.03,
            seed: 0,
        }
    }
}

impl ToyBackendConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Conv1 input channels: latent channels plus one control slot.
    fn input_channels(&self) -> usize {
        self.latent_channels() + 1
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    cfg: ToyBackendConfig,
    codec: PatchCodec,
    w1: Vec<f64>, // [hidden][in_ch][3][3]
    b1: Vec<f64>, // [hidden]
    w2: Vec<f64>, // [latent][hidden][3][3]
    b2: Vec<f64>, // [latent]
    wt: Matrix,   // hidden × time_features
    wc: Matrix,   // hidden × cond_dim
}

struct ForwardCache {
    input: Latent,
    hidden: Latent,
    time_feats: Vec<f64>,
    cond: Vec<f64>,
}

struct Grads {
    dw1: Vec<f64>,
    db1: Vec<f64>,
    dw2: Vec<f64>,
    db2: Vec<f64>,
    dwt: Matrix,
    dwc: Matrix,
}

impl ToyBackend {
    pub fn new(cfg: ToyBackendConfig) -> Self {
        let mut rng = SeedRng::new(derive_seed(cfg.seed, &["toy-init"]));
        let hidden = cfg.hidden_channels;
        let in_ch = cfg.input_channels();
        let latent = cfg.latent_channels();
        let gaussian = |rng: &mut SeedRng, n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| rng.next_gaussian() * std).collect()
        };
        let w1 = gaussian(&mut rng, hidden * in_ch * 9, cfg.init_std);
        let b1 = vec![0.0; hidden];
        let w2 = gaussian(&mut rng, latent * hidden * 9, cfg.init_std);
        let b2 = vec![0.0; latent];
        let wt = Matrix::gaussian(hidden, cfg.time_features, cfg.init_std, &mut rng);
        let wc = Matrix::gaussian(hidden, cfg.cond_dim, cfg.init_std, &mut rng);
        let codec = PatchCodec::new(cfg.patch, cfg.seed);
        Self { cfg, codec, w1, b1, w2, b2, wt, wc }
    }

    /// Construct and briefly train the predictor on seeded synthetic frames
    /// so its predictions actually depend on the latent state.
    pub fn pretrained(
        cfg: ToyBackendConfig,
        schedule: &NoiseSchedule,
        steps: usize,
        lr: f64,
    ) -> Result<Self, DiffusionError> {
        let mut backend = Self::new(cfg.clone());
        let side = (16 * cfg.patch) as u32;
        let frames: Vec<RgbImage> = (0..6)
            .map(|i| {
                crate::imaging::synthetic_frame(
                    derive_seed(cfg.seed, &["pretrain-img"]) + i,
                    side,
                    side,
                )
            })
            .collect();
        let latents: Vec<Latent> =
            frames.iter().map(|f| backend.encode(f)).collect::<Result<_, _>>()?;
        let prompts = [
            "a person does something",
            "a dog runs across a field",
            "waves crash on the shore",
            "a knight rides a horse",
        ];
        let conds: Vec<Condition> =
            prompts.iter().map(|p| backend.encode_text(p)).collect::<Result<_, _>>()?;
        let mut rng = SeedRng::new(derive_seed(cfg.seed, &["pretrain"]));
        for step in 0..steps {
            let z0 = &latents[rng.next_index(latents.len())];
            let cond = &conds[rng.next_index(conds.len())];
            let t = 1 + rng.next_index(schedule.steps());
            let mut eps = Latent::zeros(z0.channels, z0.height, z0.width);
            rng.fill_gaussian(eps.data_mut());
            let x_t = noisy_latent(z0, &eps, schedule.alpha(t));
            let loss = backend.finetune_step(&x_t, t, cond, &eps, lr)?;
            if !loss.is_finite() {
                return Err(DiffusionError::NonFinite { step });
            }
        }
        Ok(backend)
    }

    pub fn config(&self) -> &ToyBackendConfig {
        &self.cfg
    }

    // Geometric frequencies low enough that adjacent timesteps embed almost
    // identically; the DDIM pair evaluates the predictor at offset timesteps
    // across a transition, so a jittery embedding would dominate the
    // inversion error.
    fn time_features(&self, t: usize) -> Vec<f64> {
        let pairs = self.cfg.time_features / 2;
        let mut out = Vec::with_capacity(self.cfg.time_features);
        for k in 0..pairs {
            let omega = 0.08 / (2.0f64).powi(k as i32);
            out.push((omega * t as f64).sin());
            out.push((omega * t as f64).cos());
        }
        out.resize(self.cfg.time_features, 0.0);
        out
    }

    fn effective_weight(
        &self,
        base: &[f64],
        layer: &str,
        out_dim: usize,
        in_dim: usize,
        delta: Option<&WeightDelta>,
    ) -> Result<Vec<f64>, DiffusionError> {
        let mut w = base.to_vec();
        if let Some(delta) = delta {
            if let Some(d) = delta.get(layer) {
                if d.rows != out_dim || d.cols != in_dim {
                    return Err(DiffusionError::DeltaShape {
                        layer: layer.to_string(),
                        expected_rows: out_dim,
                        expected_cols: in_dim,
                        got_rows: d.rows,
                        got_cols: d.cols,
                    });
                }
                for (wv, dv) in w.iter_mut().zip(d.data()) {
                    *wv += dv;
                }
            }
        }
        Ok(w)
    }

    fn validate_delta_layers(&self, delta: Option<&WeightDelta>) -> Result<(), DiffusionError> {
        if let Some(delta) = delta {
            for name in delta.layers.keys() {
                if name != CONV1_LAYER && name != CONV2_LAYER {
                    return Err(DiffusionError::UnknownLayer(name.clone()));
                }
            }
        }
        Ok(())
    }

    fn forward(
        &self,
        z: &Latent,
        t: usize,
        cond: &Condition,
        control: Option<&Latent>,
        delta: Option<&WeightDelta>,
    ) -> Result<(Latent, ForwardCache), DiffusionError> {
        let latent_ch = self.cfg.latent_channels();
        if z.channels != latent_ch {
            return Err(DiffusionError::ShapeMismatch {
                expected: (latent_ch, z.height, z.width),
                got: z.shape(),
            });
        }
        if cond.dim() != self.cfg.cond_dim {
            return Err(DiffusionError::ConditionDim {
                expected: self.cfg.cond_dim,
                got: cond.dim(),
            });
        }
        self.validate_delta_layers(delta)?;

        let in_ch = self.cfg.input_channels();
        let hidden_ch = self.cfg.hidden_channels;
        let (h, w) = (z.height, z.width);

        // Stack latent channels plus the control slot (zeros when absent).
        let mut input = Latent::zeros(in_ch, h, w);
        input.data_mut()[..z.len()].copy_from_slice(z.data());
        if let Some(ctrl) = control {
            if ctrl.channels != 1 || ctrl.height != h || ctrl.width != w {
                return Err(DiffusionError::Control(format!(
                    "control is {:?}, expected (1, {h}, {w})",
                    ctrl.shape()
                )));
            }
            let hw = h * w;
            input.data_mut()[latent_ch * hw..].copy_from_slice(ctrl.data());
        }

        let w1 = self.effective_weight(&self.w1, CONV1_LAYER, hidden_ch, in_ch * 9, delta)?;
        let w2 = self.effective_weight(&self.w2, CONV2_LAYER, latent_ch, hidden_ch * 9, delta)?;

        let time_feats = self.time_features(t);
        let t_bias = self.wt.matvec(&time_feats);
        let c_bias = self.wc.matvec(cond.data());

        let mut hidden = conv3x3(&input, &w1, hidden_ch);
        for ch in 0..hidden_ch {
            let bias = self.b1[ch] + t_bias[ch] + c_bias[ch];
            let hw = h * w;
            for v in &mut hidden.data_mut()[ch * hw..(ch + 1) * hw] {
                *v = (*v + bias).tanh();
            }
        }

        let mut out = conv3x3(&hidden, &w2, latent_ch);
        for ch in 0..latent_ch {
            let hw = h * w;
            for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
                *v += self.b2[ch];
            }
        }
        Ok((out, ForwardCache { input, hidden, time_feats, cond: cond.data().to_vec() }))
    }

    /// Backprop of the MSE denoising loss through the net. `w2_eff` must be
    /// the same effective conv2 weight used in the forward pass.
    fn backward(&self, cache: &ForwardCache, w2_eff: &[f64], d_out: &Latent) -> Grads {
        let hidden_ch = self.cfg.hidden_channels;
        let latent_ch = self.cfg.latent_channels();
        let in_ch = self.cfg.input_channels();
        let (h, w) = (d_out.height, d_out.width);
        let hw = h * w;

        let dw2 = conv3x3_weight_grad(&cache.hidden, d_out);
        let db2: Vec<f64> = (0..latent_ch).map(|ch| d_out.channel(ch).iter().sum()).collect();

        let mut d_hidden = conv3x3_input_grad(w2_eff, d_out, hidden_ch);
        // tanh'(x) = 1 - tanh(x)^2, and cache.hidden stores tanh(x).
        for (dh, hv) in d_hidden.data_mut().iter_mut().zip(cache.hidden.data()) {
            *dh *= 1.0 - hv * hv;
        }

        let dw1 = conv3x3_weight_grad(&cache.input, &d_hidden);
        let db1: Vec<f64> = (0..hidden_ch).map(|ch| d_hidden.channel(ch).iter().sum()).collect();

        // FiLM biases broadcast over space, so their grads are the spatial
        // sums times the feature vectors.
        let mut dwt = Matrix::zeros(hidden_ch, self.cfg.time_features);
        let mut dwc = Matrix::zeros(hidden_ch, self.cfg.cond_dim);
        for ch in 0..hidden_ch {
            let sum: f64 = d_hidden.data()[ch * hw..(ch + 1) * hw].iter().sum();
            for (f, tf) in cache.time_feats.iter().enumerate() {
                dwt.set(ch, f, sum * tf);
            }
            for (d, cv) in cache.cond.iter().enumerate() {
                dwc.set(ch, d, sum * cv);
            }
        }
        debug_assert_eq!(dw1.len(), hidden_ch * in_ch * 9);
        Grads { dw1, db1, dw2, db2, dwt, dwc }
    }

    fn loss_and_grads(
        &self,
        delta: Option<&WeightDelta>,
        x_t: &Latent,
        t: usize,
        cond: &Condition,
        target: &Latent,
    ) -> Result<(f64, Grads), DiffusionError> {
        if target.shape() != x_t.shape() {
            return Err(DiffusionError::ShapeMismatch {
                expected: x_t.shape(),
                got: target.shape(),
            });
        }
        let (prediction, cache) = self.forward(x_t, t, cond, None, delta)?;
        let n = prediction.len() as f64;
        let mut loss = 0.0;
        let mut d_out = Latent::zeros(prediction.channels, prediction.height, prediction.width);
        for ((d, p), tv) in d_out.data_mut().iter_mut().zip(prediction.data()).zip(target.data()) {
            let diff = p - tv;
            loss += diff * diff;
            *d = 2.0 * diff / n;
        }
        loss /= n;
        let w2_eff = self.effective_weight(
            &self.w2,
            CONV2_LAYER,
            self.cfg.latent_channels(),
            self.cfg.hidden_channels * 9,
            delta,
        )?;
        let grads = self.backward(&cache, &w2_eff, &d_out);
        Ok((loss, grads))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DiffusionError> {
        use crate::archive::NamedTensor;
        let hidden = self.cfg.hidden_channels;
        let in_ch = self.cfg.input_channels();
        let latent = self.cfg.latent_channels();
        let tensors = vec![
            NamedTensor::new(CONV1_LAYER, vec![hidden, in_ch, 3, 3], self.w1.clone()),
            NamedTensor::new("conv1.bias", vec![hidden], self.b1.clone()),
            NamedTensor::new(CONV2_LAYER, vec![latent, hidden, 3, 3], self.w2.clone()),
            NamedTensor::new("conv2.bias", vec![latent], self.b2.clone()),
            NamedTensor::new(
                "time_proj",
                vec![hidden, self.cfg.time_features],
                self.wt.data().to_vec(),
            ),
            NamedTensor::new("cond_proj", vec![hidden, self.cfg.cond_dim], self.wc.data().to_vec()),
        ];
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "toy-backend".to_string());
        meta.insert(
            "config".to_string(),
            serde_json::to_string(&self.cfg).expect("config serializes"),
        );
        crate::archive::save(path, &tensors, &meta)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DiffusionError> {
        let bad =
            |reason: String| DiffusionError::WeightArchive { path: path.to_path_buf(), reason };
        let (mut tensors, meta) = crate::archive::load(path)?;
        if meta.get("kind").map(String::as_str) != Some("toy-backend") {
            return Err(bad(format!("archive kind {:?} is not a toy backend", meta.get("kind"))));
        }
        let cfg: ToyBackendConfig = serde_json::from_str(
            meta.get("config").ok_or_else(|| bad("missing config metadata".into()))?,
        )
        .map_err(|e| bad(format!("bad config metadata: {e}")))?;

        let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>, DiffusionError> {
            let t = crate::archive::take_tensor(&mut tensors, path, name)?;
            if t.shape != shape {
                return Err(DiffusionError::WeightArchive {
                    path: path.to_path_buf(),
                    reason: format!("tensor {name} has shape {:?}, expected {:?}", t.shape, shape),
                });
            }
            Ok(t.data)
        };
        let hidden = cfg.hidden_channels;
        let in_ch = cfg.input_channels();
        let latent = cfg.latent_channels();
        let w1 = take(CONV1_LAYER, vec![hidden, in_ch, 3, 3])?;
        let b1 = take("conv1.bias", vec![hidden])?;
        let w2 = take(CONV2_LAYER, vec![latent, hidden, 3, 3])?;
        let b2 = take("conv2.bias", vec![latent])?;
        let wt = Matrix::from_vec(
            hidden,
            cfg.time_features,
            take("time_proj", vec![hidden, cfg.time_features])?,
        );
        let wc =
            Matrix::from_vec(hidden, cfg.cond_dim, take("cond_proj", vec![hidden, cfg.cond_dim])?);
        let codec = PatchCodec::new(cfg.patch, cfg.seed);
        Ok(Self { cfg, codec, w1, b1, w2, b2, wt, wc })
    }
}

impl DiffusionBackend for ToyBackend {
    fn predict_noise_adapted(
        &self,
        z: &Latent,
        t: usize,
        cond: &Condition,
        control: Option<&Latent>,
        delta: Option<&WeightDelta>,
    ) -> Result<Latent, DiffusionError> {
        Ok(self.forward(z, t, cond, control, delta)?.0)
    }

    fn encode(&self, frame: &RgbImage) -> Result<Latent, DiffusionError> {
        self.codec.encode(frame)
    }

    fn decode(&self, z: &Latent) -> Result<RgbImage, DiffusionError> {
        self.codec.decode(z)
    }

    fn encode_text(&self, text: &str) -> Result<Condition, DiffusionError> {
        Ok(Condition::new(hash_embed(
            derive_seed(self.cfg.seed, &["text-cond"]),
            text,
            self.cfg.cond_dim,
        )))
    }

    fn latent_dims(
        &self,
        width: u32,
        height: u32,
    ) -> Result<(usize, usize, usize), DiffusionError> {
        self.codec.latent_dims(width, height)
    }

    fn adaptable_layers(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec {
                name: CONV1_LAYER.to_string(),
                out_dim: self.cfg.hidden_channels,
                in_dim: self.cfg.input_channels() * 9,
            },
            LayerSpec {
                name: CONV2_LAYER.to_string(),
                out_dim: self.cfg.latent_channels(),
                in_dim: self.cfg.hidden_channels * 9,
            },
        ]
    }

    fn trainable(&self) -> bool {
        true
    }

    fn denoise_loss_and_adaptable_grads(
        &self,
        delta: Option<&WeightDelta>,
        x_t: &Latent,
        t: usize,
        cond: &Condition,
        target: &Latent,
    ) -> Result<(f64, BTreeMap<String, Matrix>), DiffusionError> {
        let (loss, grads) = self.loss_and_grads(delta, x_t, t, cond, target)?;
        let mut out = BTreeMap::new();
        out.insert(
            CONV1_LAYER.to_string(),
            Matrix::from_vec(self.cfg.hidden_channels, self.cfg.input_channels() * 9, grads.dw1),
        );
        out.insert(
            CONV2_LAYER.to_string(),
            Matrix::from_vec(self.cfg.latent_channels(), self.cfg.hidden_channels * 9, grads.dw2),
        );
        Ok((loss, out))
    }

    fn finetune_step(
        &mut self,
        x_t: &Latent,
        t: usize,
        cond: &Condition,
        target: &Latent,
        lr: f64,
    ) -> Result<f64, DiffusionError> {
        let (loss, grads) = self.loss_and_grads(None, x_t, t, cond, target)?;
        for (w, g) in self.w1.iter_mut().zip(&grads.dw1) {
            *w -= lr * g;
        }
        for (b, g) in self.b1.iter_mut().zip(&grads.db1) {
            *b -= lr * g;
        }
        for (w, g) in self.w2.iter_mut().zip(&grads.dw2) {
            *w -= lr * g;
        }
        for (b, g) in self.b2.iter_mut().zip(&grads.db2) {
            *b -= lr * g;
        }
        self.wt.add_scaled(&grads.dwt, -lr);
        self.wc.add_scaled(&grads.dwc, -lr);
        Ok(loss)
    }

    fn save_weights(&self, path: &std::path::Path) -> Result<(), DiffusionError> {
        self.save(path)
    }

    fn clone_backend(&self) -> Box<dyn DiffusionBackend> {
        Box::new(self.clone())
    }
}

/// 3×3 convolution, stride 1, zero padding 1. Weight layout
/// `[out][in][ky][kx]`, flattened.
fn conv3x3(input: &Latent, weight: &[f64], out_ch: usize) -> Latent {
    let (in_ch, h, w) = input.shape();
    debug_assert_eq!(weight.len(), out_ch * in_ch * 9);
    let mut out = Latent::zeros(out_ch, h, w);
    for o in 0..out_ch {
        for c in 0..in_ch {
            let kbase = (o * in_ch + c) * 9;
            let src = input.channel(c);
            let dst = &mut out.data_mut()[o * h * w..(o + 1) * h * w];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight[kbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    for y in 0..h as isize {
                        let sy = y + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = 0.max(-dx);
                        let x_hi = (w as isize).min(w as isize - dx);
                        let drow = (y as usize) * w;
                        let srow = (sy as usize) * w;
                        for x in x_lo..x_hi {
                            dst[drow + x as usize] += wv * src[srow + (x + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the loss w.r.t. the conv input: transposed convolution of
/// `d_out` with the kernel.
fn conv3x3_input_grad(weight: &[f64], d_out: &Latent, in_ch: usize) -> Latent {
    let (out_ch, h, w) = d_out.shape();
    debug_assert_eq!(weight.len(), out_ch * in_ch * 9);
    let mut d_in = Latent::zeros(in_ch, h, w);
    for o in 0..out_ch {
        let src = d_out.channel(o);
        for c in 0..in_ch {
            let kbase = (o * in_ch + c) * 9;
            let dst = &mut d_in.data_mut()[c * h * w..(c + 1) * h * w];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight[kbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    // input position (yi, xi) receives from output (yi-dy, xi-dx)
                    for yi in 0..h as isize {
                        let oy = yi - dy;
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        let x_lo = 0.max(dx);
                        let x_hi = (w as isize).min(w as isize + dx);
                        let drow = (yi as usize) * w;
                        let srow = (oy as usize) * w;
                        for xi in x_lo..x_hi {
                            dst[drow + xi as usize] += wv * src[srow + (xi - dx) as usize];
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Gradient of the loss w.r.t. the conv kernel.
fn conv3x3_weight_grad(input: &Latent, d_out: &Latent) -> Vec<f64> {
    let (in_ch, h, w) = input.shape();
    let out_ch = d_out.channels;
    let mut dw = vec![0.0f64; out_ch * in_ch * 9];
    for o in 0..out_ch {
        let dsrc = d_out.channel(o);
        for c in 0..in_ch {
            let isrc = input.channel(c);
            let kbase = (o * in_ch + c) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let mut acc = 0.0;
                    for y in 0..h as isize {
                        let sy = y + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = 0.max(-dx);
                        let x_hi = (w as isize).min(w as isize - dx);
                        let drow = (y as usize) * w;
                        let srow = (sy as usize) * w;
                        for x in x_lo..x_hi {
                            acc += dsrc[drow + x as usize] * isrc[srow + (x + dx) as usize];
                        }
                    }
                    dw[kbase + ky * 3 + kx] = acc;
                }
            }
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::imaging::synthetic_frame;

    fn tiny_config() -> ToyBackendConfig {
        ToyBackendConfig {
            hidden_channels: 3,
            cond_dim: 4,
            patch: 1,
            time_features: 4,
            init_std: 0.2,
            seed: 5,
        }
    }

    fn seeded_latent(seed: u64, c: usize, h: usize, w: usize) -> Latent {
        let mut rng = SeedRng::new(seed);
        let mut z = Latent::zeros(c, h, w);
        rng.fill_gaussian(z.data_mut());
        z
    }

    #[test]
    fn prediction_is_deterministic_and_shape_preserving() {
        let backend = ToyBackend::new(ToyBackendConfig::default());
        let z = seeded_latent(1, 12, 8, 8);
        let c = backend.encode_text("a person surfs").unwrap();
        let a = backend.predict_noise(&z, 3, &c, None).unwrap();
        let b = backend.predict_noise(&z, 3, &c, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), z.shape());
        // Different timesteps and conditions change the output.
        let at5 = backend.predict_noise(&z, 5, &c, None).unwrap();
        assert_ne!(a.data(), at5.data());
        let c2 = backend.encode_text("a dog swims").unwrap();
        let other = backend.predict_noise(&z, 3, &c2, None).unwrap();
        assert_ne!(a.data(), other.data());
    }

    #[test]
    fn control_channel_changes_prediction() {
        let backend = ToyBackend::new(ToyBackendConfig::default());
        let z = seeded_latent(2, 12, 8, 8);
        let c = backend.encode_text("query").unwrap();
        let plain = backend.predict_noise(&z, 1, &c, None).unwrap();
        let ctrl = Latent::filled(1, 8, 8, 1.0);
        let with_ctrl = backend.predict_noise(&z, 1, &c, Some(&ctrl)).unwrap();
        assert_ne!(plain.data(), with_ctrl.data());
        // Zero control equals no control.
        let zero_ctrl = Latent::zeros(1, 8, 8);
        let with_zero = backend.predict_noise(&z, 1, &c, Some(&zero_ctrl)).unwrap();
        assert_eq!(plain.data(), with_zero.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Independent oracle for the training path: central finite
        // differences on a tiny network.
        let cfg = tiny_config();
        let backend = ToyBackend::new(cfg.clone());
        let x = seeded_latent(7, 3, 4, 4);
        let target = seeded_latent(8, 3, 4, 4);
        let cond = backend.encode_text("check").unwrap();
        let t = 2;

        let (_, grads) = backend.loss_and_grads(None, &x, t, &cond, &target).unwrap();

        let eps = 1e-6;
        let loss_of = |b: &ToyBackend| b.loss_and_grads(None, &x, t, &cond, &target).unwrap().0;

        // Check a spread of conv1 weights.
        for &idx in &[0usize, 5, 17, 40, grads.dw1.len() - 1] {
            let mut plus = backend.clone();
            plus.w1[idx] += eps;
            let mut minus = backend.clone();
            minus.w1[idx] -= eps;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let analytic = grads.dw1[idx];
            assert!(
                (numeric - analytic).abs() <= 1e-6 * numeric.abs().max(1.0),
                "w1[{idx}]: numeric {numeric} vs analytic {analytic}"
            );
        }
        for &idx in &[0usize, 9, grads.dw2.len() - 1] {
            let mut plus = backend.clone();
            plus.w2[idx] += eps;
            let mut minus = backend.clone();
            minus.w2[idx] -= eps;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            assert!((numeric - grads.dw2[idx]).abs() <= 1e-6 * numeric.abs().max(1.0), "w2[{idx}]");
        }
        for idx in 0..cfg.hidden_channels {
            let mut plus = backend.clone();
            plus.b1[idx] += eps;
            let mut minus = backend.clone();
            minus.b1[idx] -= eps;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            assert!((numeric - grads.db1[idx]).abs() <= 1e-6 * numeric.abs().max(1.0), "b1[{idx}]");
        }
        for idx in 0..3 {
            let mut plus = backend.clone();
            plus.b2[idx] += eps;
            let mut minus = backend.clone();
            minus.b2[idx] -= eps;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            assert!((numeric - grads.db2[idx]).abs() <= 1e-6 * numeric.abs().max(1.0), "b2[{idx}]");
        }
        // Time and condition projections.
        let mut plus = backend.clone();
        plus.wt.set(1, 2, plus.wt.get(1, 2) + eps);
        let mut minus = backend.clone();
        minus.wt.set(1, 2, minus.wt.get(1, 2) - eps);
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        assert!((numeric - grads.dwt.get(1, 2)).abs() <= 1e-6 * numeric.abs().max(1.0), "wt");
        let mut plus = backend.clone();
        plus.wc.set(2, 3, plus.wc.get(2, 3) + eps);
        let mut minus = backend.clone();
        minus.wc.set(2, 3, minus.wc.get(2, 3) - eps);
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        assert!((numeric - grads.dwc.get(2, 3)).abs() <= 1e-6 * numeric.abs().max(1.0), "wc");
    }

    #[test]
    fn adaptable_grads_match_base_weight_grads() {
        // d(loss)/d(delta) must equal d(loss)/d(weight) at the same point.
        let backend = ToyBackend::new(tiny_config());
        let x = seeded_latent(9, 3, 4, 4);
        let target = seeded_latent(10, 3, 4, 4);
        let cond = backend.encode_text("delta check").unwrap();
        let (loss_a, grads) =
            backend.denoise_loss_and_adaptable_grads(None, &x, 1, &cond, &target).unwrap();

        // Shift a delta and verify the loss moves as the gradient predicts.
        let g1 = &grads[CONV1_LAYER];
        let step = 1e-6;
        let mut delta = WeightDelta::default();
        let mut moved = Matrix::zeros(g1.rows, g1.cols);
        moved.add_scaled(g1, -step);
        delta.layers.insert(CONV1_LAYER.to_string(), moved);
        let (loss_b, _) =
            backend.denoise_loss_and_adaptable_grads(Some(&delta), &x, 1, &cond, &target).unwrap();
        let predicted_drop = step * crate::linalg::dot(g1.data(), g1.data());
        let actual_drop = loss_a - loss_b;
        assert!(
            (actual_drop - predicted_drop).abs() <= 1e-6 * predicted_drop.max(1e-12),
            "actual {actual_drop} predicted {predicted_drop}"
        );
    }

    #[test]
    fn zero_delta_leaves_prediction_unchanged() {
        let backend = ToyBackend::new(ToyBackendConfig::default());
        let z = seeded_latent(11, 12, 8, 8);
        let c = backend.encode_text("x").unwrap();
        let base = backend.predict_noise(&z, 2, &c, None).unwrap();
        let mut delta = WeightDelta::default();
        delta.layers.insert(CONV1_LAYER.to_string(), Matrix::zeros(16, 13 * 9));
        delta.layers.insert(CONV2_LAYER.to_string(), Matrix::zeros(12, 16 * 9));
        let adapted = backend.predict_noise_adapted(&z, 2, &c, None, Some(&delta)).unwrap();
        assert_eq!(base.data(), adapted.data());
    }

    #[test]
    fn delta_shape_mismatch_is_rejected() {
        let backend = ToyBackend::new(ToyBackendConfig::default());
        let z = seeded_latent(12, 12, 8, 8);
        let c = backend.encode_text("x").unwrap();
        let mut delta = WeightDelta::default();
        delta.layers.insert(CONV1_LAYER.to_string(), Matrix::zeros(2, 2));
        assert!(matches!(
            backend.predict_noise_adapted(&z, 0, &c, None, Some(&delta)),
            Err(DiffusionError::DeltaShape { .. })
        ));
        let mut unknown = WeightDelta::default();
        unknown.layers.insert("nope.weight".to_string(), Matrix::zeros(2, 2));
        assert!(matches!(
            backend.predict_noise_adapted(&z, 0, &c, None, Some(&unknown)),
            Err(DiffusionError::UnknownLayer(_))
        ));
    }

    #[test]
    fn save_load_round_trip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let schedule = NoiseSchedule::make(10, ScheduleKind::Linear, 0.05).unwrap();
        let backend =
            ToyBackend::pretrained(ToyBackendConfig::default(), &schedule, 30, 0.05).unwrap();
        let path = dir.path().join("toy.weights");
        backend.save(&path).unwrap();
        let loaded = ToyBackend::load(&path).unwrap();
        let z = seeded_latent(13, 12, 8, 8);
        let c = backend.encode_text("round trip").unwrap();
        let a = backend.predict_noise(&z, 4, &c, None).unwrap();
        let b = loaded.predict_noise(&z, 4, &c, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encode_decode_round_trip_through_backend() {
        let backend = ToyBackend::new(ToyBackendConfig::default());
        let frame = synthetic_frame(42, 32, 32);
        let z = backend.encode(&frame).unwrap();
        assert_eq!(z.shape(), (12, 16, 16));
        let back = backend.decode(&z).unwrap();
        assert_eq!(back.as_raw(), frame.as_raw());
    }
}

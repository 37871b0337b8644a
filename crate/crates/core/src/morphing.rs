//! Segment transitions: LoRA fine-tuning on the two endpoint frames, convex
//! interpolation of the deltas, spherical interpolation of the inverted
//! noise latents, and linear interpolation of the text conditions.
//!
//! Delta interpolation acts on effective weights (the B·A products), not on
//! the factors: the interpolated delta keeps both factor pairs with the left
//! one scaled by `1 - alpha` and the right by `alpha`, so its materialized
//! weight is exactly the convex combination.

use std::collections::BTreeMap;

use image::RgbImage;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffusion::{
    ddim_invert, ddim_sample, noisy_latent, Condition, DiffusionBackend, DiffusionError, Latent,
    NoiseSchedule, StepOptions, WeightDelta,
};
use crate::linalg::Matrix;
use crate::seed::SeedRng;

#[derive(Debug, Error)]
pub enum MorphError {
    #[error("latents have different shapes: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize, usize), b: (usize, usize, usize) },
    #[error("slerp input has zero norm")]
    ZeroInput,
    #[error("latents are antipodal (angle {angle:.6} rad); re-seed or perturb the endpoints")]
    Antipodal { angle: f64 },
    #[error("interpolation weight {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("lora rank {rank} exceeds layer {layer} minimum dimension {max}")]
    RankTooLarge { layer: String, rank: usize, max: usize },
    #[error("backend exposes no adaptable layers")]
    NoAdaptableLayers,
    #[error("layer sets differ: left has {left:?}, right has {right:?}")]
    LayerMismatch { left: Vec<String>, right: Vec<String> },
    #[error("non-finite fine-tune loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("transition n must be >= 2, got {0}")]
    BadTransitionCount(usize),
    #[error("intermediate {index}: {source}")]
    Intermediate {
        index: usize,
        #[source]
        source: Box<MorphError>,
    },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// One low-rank factor pair: the effective delta is `b (out×r) · a (r×in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraLayer {
    pub fn effective(&self) -> Matrix {
        self.b.matmul(&self.a)
    }
}

/// Low-rank weight deltas for a named subset of backend layers. Closed under
/// scaling and addition on effective weights; a zero delta (B = 0) leaves
/// backend output unchanged.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoraDelta {
    pub layers: BTreeMap<String, LoraLayer>,
}

impl LoraDelta {
    pub fn layer_names(&self) -> Vec<String> {
        self.layers.keys().cloned().collect()
    }

    /// Materialize effective per-layer deltas for backend application.
    pub fn materialize(&self) -> WeightDelta {
        WeightDelta {
            layers: self.layers.iter().map(|(k, v)| (k.clone(), v.effective())).collect(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), MorphError> {
        let mut tensors = Vec::new();
        for (name, layer) in &self.layers {
            tensors.push(crate::archive::NamedTensor::new(
                format!("{name}.lora_a"),
                vec![layer.a.rows, layer.a.cols],
                layer.a.data().to_vec(),
            ));
            tensors.push(crate::archive::NamedTensor::new(
                format!("{name}.lora_b"),
                vec![layer.b.rows, layer.b.cols],
                layer.b.data().to_vec(),
            ));
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "lora-delta".to_string());
        crate::archive::save(path, &tensors, &meta).map_err(DiffusionError::from)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, MorphError> {
        let (tensors, _) = crate::archive::load(path).map_err(DiffusionError::from)?;
        let mut halves: BTreeMap<String, (Option<Matrix>, Option<Matrix>)> = BTreeMap::new();
        for t in tensors {
            let m = Matrix::from_vec(t.shape[0], t.shape[1], t.data);
            if let Some(name) = t.name.strip_suffix(".lora_a") {
                halves.entry(name.to_string()).or_default().0 = Some(m);
            } else if let Some(name) = t.name.strip_suffix(".lora_b") {
                halves.entry(name.to_string()).or_default().1 = Some(m);
            }
        }
        let mut layers = BTreeMap::new();
        for (name, (a, b)) in halves {
            if let (Some(a), Some(b)) = (a, b) {
                layers.insert(name, LoraLayer { a, b });
            }
        }
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinetuneOptions {
    pub steps: usize,
    pub rank: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self { steps: 200, rank: 4, lr: 0.5, seed: 0 }
    }
}

/// Loss trace of one fine-tune: means over the first and last windows.
#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    pub initial_running_loss: f64,
    pub final_running_loss: f64,
}

impl FinetuneReport {
    fn from_losses(losses: Vec<f64>) -> Self {
        let window = (losses.len() / 4).clamp(1, 20).min(losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (initial, fin) = if losses.is_empty() {
            (0.0, 0.0)
        } else {
            (mean(&losses[..window]), mean(&losses[losses.len() - window..]))
        };
        Self { losses, initial_running_loss: initial, final_running_loss: fin }
    }
}

/// Zero delta over the backend's adaptable layer set (rank-checked).
fn zero_delta(
    backend: &dyn DiffusionBackend,
    rank: usize,
    seed: u64,
) -> Result<LoraDelta, MorphError> {
    let mut rng = SeedRng::new(seed);
    let mut layers = BTreeMap::new();
    for spec in backend.adaptable_layers() {
        let max = spec.out_dim.min(spec.in_dim);
        if rank > max {
            return Err(MorphError::RankTooLarge { layer: spec.name, rank, max });
        }
        // Standard LoRA init: gaussian A, zero B, so the effective delta
        // starts at exactly zero.
        let a = Matrix::gaussian(rank, spec.in_dim, 1.0 / (spec.in_dim as f64).sqrt(), &mut rng);
        let b = Matrix::zeros(spec.out_dim, rank);
        layers.insert(spec.name, LoraLayer { a, b });
    }
    Ok(LoraDelta { layers })
}

/// Fine-tune a LoRA delta against the denoising objective on one latent and
/// condition: sample a timestep and gaussian noise, noise the latent, and
/// descend the squared error of the noise prediction. Base weights are never
/// touched.
pub fn lora_finetune(
    backend: &dyn DiffusionBackend,
    z0: &Latent,
    cond: &Condition,
    schedule: &NoiseSchedule,
    opts: &FinetuneOptions,
) -> Result<(LoraDelta, FinetuneReport), MorphError> {
    let mut delta = zero_delta(backend, opts.rank, opts.seed)?;
    if opts.steps == 0 {
        return Ok((delta, FinetuneReport::from_losses(Vec::new())));
    }
    if delta.layers.is_empty() {
        return Err(MorphError::NoAdaptableLayers);
    }
    let mut rng = SeedRng::new(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let t = 1 + rng.next_index(schedule.steps());
        let mut eps = Latent::zeros(z0.channels, z0.height, z0.width);
        rng.fill_gaussian(eps.data_mut());
        let x_t = noisy_latent(z0, &eps, schedule.alpha(t));
        let materialized = delta.materialize();
        let (loss, grads) =
            backend.denoise_loss_and_adaptable_grads(Some(&materialized), &x_t, t, cond, &eps)?;
        if !loss.is_finite() {
            return Err(MorphError::NonFiniteLoss { step });
        }
        losses.push(loss);
        for (name, layer) in delta.layers.iter_mut() {
            let dw = &grads[name];
            // Chain rule through the factorization: dA = Bᵀ dW, dB = dW Aᵀ.
            let da = layer.b.transpose().matmul(dw);
            let db = dw.matmul(&layer.a.transpose());
            layer.a.add_scaled(&da, -opts.lr);
            layer.b.add_scaled(&db, -opts.lr);
        }
    }
    Ok((delta, FinetuneReport::from_losses(losses)))
}

/// Convex interpolation of two deltas on effective weights. The result keeps
/// both factor pairs (rank doubles) with A-factors scaled by `1 - alpha` and
/// `alpha`, so `materialize` yields exactly
/// `(1 - alpha) B_i A_i + alpha B_j A_j`.
pub fn lora_interpolate(
    left: &LoraDelta,
    right: &LoraDelta,
    alpha: f64,
) -> Result<LoraDelta, MorphError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MorphError::BadAlpha(alpha));
    }
    let left_names = left.layer_names();
    let right_names = right.layer_names();
    if left_names != right_names {
        return Err(MorphError::LayerMismatch { left: left_names, right: right_names });
    }
    let mut layers = BTreeMap::new();
    for (name, l) in &left.layers {
        let r = &right.layers[name];
        if l.a.cols != r.a.cols || l.b.rows != r.b.rows {
            return Err(MorphError::LayerMismatch {
                left: vec![format!("{name}:{}x{}", l.b.rows, l.a.cols)],
                right: vec![format!("{name}:{}x{}", r.b.rows, r.a.cols)],
            });
        }
        let rank = l.a.rows + r.a.rows;
        let mut a = Matrix::zeros(rank, l.a.cols);
        let mut b = Matrix::zeros(l.b.rows, rank);
        for row in 0..l.a.rows {
            for col in 0..l.a.cols {
                a.set(row, col, (1.0 - alpha) * l.a.get(row, col));
            }
        }
        for row in 0..r.a.rows {
            for col in 0..r.a.cols {
                a.set(l.a.rows + row, col, alpha * r.a.get(row, col));
            }
        }
        for row in 0..l.b.rows {
            for col in 0..l.b.cols {
                b.set(row, col, l.b.get(row, col));
            }
            for col in 0..r.b.cols {
                b.set(row, l.b.cols + col, r.b.get(row, col));
            }
        }
        layers.insert(name.clone(), LoraLayer { a, b });
    }
    Ok(LoraDelta { layers })
}

/// Spherical linear interpolation between two latents.
///
/// Near-parallel inputs (angle < 1e-4 rad) fall back to linear
/// interpolation; antipodal inputs are an error because the great-circle
/// path is ill-defined there.
pub fn slerp(z_i: &Latent, z_j: &Latent, alpha: f64) -> Result<Latent, MorphError> {
    if z_i.shape() != z_j.shape() {
        return Err(MorphError::ShapeMismatch { a: z_i.shape(), b: z_j.shape() });
    }
    let norm_i = z_i.norm();
    let norm_j = z_j.norm();
    if norm_i <= 1e-12 || norm_j <= 1e-12 {
        return Err(MorphError::ZeroInput);
    }
    let cos_phi = (z_i.dot(z_j) / (norm_i * norm_j)).clamp(-1.0, 1.0);
    let phi = cos_phi.acos();
    if phi < 1e-4 {
        let mut out = z_i.clone();
        out.blend_with(z_j, alpha);
        return Ok(out);
    }
    if phi > std::f64::consts::PI - 1e-4 {
        return Err(MorphError::Antipodal { angle: phi });
    }
    let sin_phi = phi.sin();
    let c_i = ((1.0 - alpha) * phi).sin() / sin_phi;
    let c_j = (alpha * phi).sin() / sin_phi;
    let data = z_i.data().iter().zip(z_j.data()).map(|(a, b)| c_i * a + c_j * b).collect();
    Ok(Latent::from_vec(z_i.channels, z_i.height, z_i.width, data))
}

/// A transition task between two edited segments.
pub struct TransitionSpec {
    /// Interpolation grid density: emits n-1 intermediate frames at
    /// alpha = k/n.
    pub n: usize,
    /// Last frame of the preceding segment.
    pub frame_i: RgbImage,
    /// First frame of the following segment.
    pub frame_j: RgbImage,
    pub query_i: String,
    pub query_j: String,
    pub finetune: FinetuneOptions,
}

/// Output of [`generate_transition`]. The endpoint deltas are returned for
/// auditing; persist them with [`LoraDelta::save`].
pub struct Transition {
    pub frames: Vec<RgbImage>,
    pub alphas: Vec<f64>,
    pub delta_i: LoraDelta,
    pub delta_j: LoraDelta,
    pub report_i: FinetuneReport,
    pub report_j: FinetuneReport,
}

/// Generate the n-1 intermediate frames between two endpoint frames.
///
/// Both endpoints get their own LoRA fine-tune and are inverted under their
/// own adapted weights; each intermediate samples from the slerped noise
/// under the interpolated delta and the linearly interpolated condition.
/// Intermediates are independent and evaluated in parallel; output order is
/// the alpha grid order.
pub fn generate_transition(
    spec: &TransitionSpec,
    backend: &dyn DiffusionBackend,
    schedule: &NoiseSchedule,
) -> Result<Transition, MorphError> {
    if spec.n < 2 {
        return Err(MorphError::BadTransitionCount(spec.n));
    }
    let z0_i = backend.encode(&spec.frame_i)?;
    let z0_j = backend.encode(&spec.frame_j)?;
    if z0_i.shape() != z0_j.shape() {
        return Err(MorphError::ShapeMismatch { a: z0_i.shape(), b: z0_j.shape() });
    }
    let cond_i = backend.encode_text(&spec.query_i)?;
    let cond_j = backend.encode_text(&spec.query_j)?;

    let opts_i = FinetuneOptions {
        seed: crate::seed::derive_seed(spec.finetune.seed, &["lora", "i"]),
        ..spec.finetune
    };
    let opts_j = FinetuneOptions {
        seed: crate::seed::derive_seed(spec.finetune.seed, &["lora", "j"]),
        ..spec.finetune
    };
    let (delta_i, report_i) = lora_finetune(backend, &z0_i, &cond_i, schedule, &opts_i)?;
    let (delta_j, report_j) = lora_finetune(backend, &z0_j, &cond_j, schedule, &opts_j)?;

    let applied_i = delta_i.materialize();
    let applied_j = delta_j.materialize();
    let zt_i = ddim_invert(
        &z0_i,
        &cond_i,
        schedule,
        backend,
        &StepOptions { lora: Some(&applied_i), ..Default::default() },
    )?;
    let zt_j = ddim_invert(
        &z0_j,
        &cond_j,
        schedule,
        backend,
        &StepOptions { lora: Some(&applied_j), ..Default::default() },
    )?;

    let alphas: Vec<f64> = (1..spec.n).map(|k| k as f64 / spec.n as f64).collect();
    let frames: Vec<RgbImage> = alphas
        .par_iter()
        .enumerate()
        .map(|(index, &alpha)| {
            let fail = |source: MorphError| MorphError::Intermediate {
                index: index + 1,
                source: Box::new(source),
            };
            let z_t = slerp(&zt_i, &zt_j, alpha).map_err(fail)?;
            let cond = Condition::lerp(&cond_i, &cond_j, alpha);
            let delta = lora_interpolate(&delta_i, &delta_j, alpha).map_err(fail)?;
            let applied = delta.materialize();
            let z0 = ddim_sample(
                &z_t,
                &cond,
                schedule,
                backend,
                &StepOptions { lora: Some(&applied), ..Default::default() },
            )
            .map_err(|e| fail(e.into()))?;
            backend.decode(&z0).map_err(|e| fail(e.into()))
        })
        .collect::<Result<_, _>>()?;

    Ok(Transition { frames, alphas, delta_i, delta_j, report_i, report_j })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{
        relative_error, ConstantBackend, ScheduleKind, ToyBackend, ToyBackendConfig,
    };
    use crate::imaging::synthetic_frame;

    fn seeded_latent(seed: u64, c: usize, h: usize, w: usize) -> Latent {
        let mut rng = SeedRng::new(seed);
        let mut z = Latent::zeros(c, h, w);
        rng.fill_gaussian(z.data_mut());
        z
    }

    fn unit(z: &Latent) -> Latent {
        let mut u = z.clone();
        u.scale(1.0 / z.norm());
        u
    }

    #[test]
    fn slerp_endpoints_are_exact() {
        let a = seeded_latent(1, 4, 3, 3);
        let b = seeded_latent(2, 4, 3, 3);
        assert_eq!(slerp(&a, &b, 0.0).unwrap().data(), a.data());
        assert_eq!(slerp(&a, &b, 1.0).unwrap().data(), b.data());
    }

    #[test]
    fn slerp_orthogonal_midpoint() {
        // Two orthogonal unit latents: midpoint must be (a + b)/sqrt(2).
        let mut a = Latent::zeros(1, 2, 2);
        a.data_mut()[0] = 1.0;
        let mut b = Latent::zeros(1, 2, 2);
        b.data_mut()[1] = 1.0;
        let mid = slerp(&a, &b, 0.5).unwrap();
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert!((mid.data()[0] - inv_sqrt2).abs() < 1e-12);
        assert!((mid.data()[1] - inv_sqrt2).abs() < 1e-12);
        assert_eq!(mid.data()[2], 0.0);
    }

    #[test]
    fn slerp_preserves_norm_and_interpolates_angle() {
        // For unit inputs, |z_alpha| = 1 and angle(z_i, z_alpha) = alpha*phi.
        for seed in 0..20u64 {
            let a = unit(&seeded_latent(100 + seed, 2, 4, 4));
            let b = unit(&seeded_latent(200 + seed, 2, 4, 4));
            let phi = a.dot(&b).clamp(-1.0, 1.0).acos();
            for k in 0..=12 {
                let alpha = k as f64 / 12.0;
                let z = slerp(&a, &b, alpha).unwrap();
                assert!((z.norm() - 1.0).abs() < 1e-10, "norm drift at alpha {alpha}");
                let angle = a.dot(&z).clamp(-1.0, 1.0).acos();
                // acos loses ~sqrt(eps) precision near 0, so 1e-9 is not
                // attainable at the endpoints; 1e-7 is.
                assert!(
                    (angle - alpha * phi).abs() < 1e-7,
                    "angle {angle} vs {} at alpha {alpha}",
                    alpha * phi
                );
            }
        }
    }

    #[test]
    fn slerp_is_symmetric_in_reversal() {
        let a = seeded_latent(7, 3, 2, 2);
        let b = seeded_latent(8, 3, 2, 2);
        for k in 1..10 {
            let alpha = k as f64 / 10.0;
            let fwd = slerp(&a, &b, alpha).unwrap();
            let rev = slerp(&b, &a, 1.0 - alpha).unwrap();
            assert!(relative_error(&fwd, &rev) < 1e-12);
        }
    }

    #[test]
    fn slerp_degenerate_cases() {
        let a = seeded_latent(3, 1, 2, 2);
        // Near-parallel falls back to lerp.
        let mut almost = a.clone();
        almost.scale(3.0);
        let out = slerp(&a, &almost, 0.5).unwrap();
        for (o, x) in out.data().iter().zip(a.data()) {
            assert!((o - 2.0 * x).abs() < 1e-12);
        }
        // Antipodal errors.
        let mut anti = a.clone();
        anti.scale(-1.0);
        assert!(matches!(slerp(&a, &anti, 0.5), Err(MorphError::Antipodal { .. })));
        // Zero input errors.
        let zero = Latent::zeros(1, 2, 2);
        assert!(matches!(slerp(&a, &zero, 0.5), Err(MorphError::ZeroInput)));
    }

    fn toy() -> ToyBackend {
        ToyBackend::new(ToyBackendConfig::default())
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::make(10, ScheduleKind::Linear, 0.02).unwrap()
    }

    #[test]
    fn zero_step_finetune_gives_zero_effective_delta() {
        let backend = toy();
        let z0 = seeded_latent(5, 12, 8, 8);
        let cond = backend.encode_text("anything").unwrap();
        let opts = FinetuneOptions { steps: 0, ..Default::default() };
        let (delta, report) = lora_finetune(&backend, &z0, &cond, &schedule(), &opts).unwrap();
        assert!(report.losses.is_empty());
        for layer in delta.layers.values() {
            assert!(layer.effective().data().iter().all(|&v| v == 0.0));
        }
        // Applying it leaves predictions untouched.
        let plain = backend.predict_noise(&z0, 1, &cond, None).unwrap();
        let applied = delta.materialize();
        let adapted = backend.predict_noise_adapted(&z0, 1, &cond, None, Some(&applied)).unwrap();
        assert_eq!(plain.data(), adapted.data());
    }

    #[test]
    fn finetune_descends_the_denoising_loss() {
        let backend = toy();
        let frame = synthetic_frame(77, 32, 32);
        let z0 = backend.encode(&frame).unwrap();
        let cond = backend.encode_text("a person cooks").unwrap();
        let opts = FinetuneOptions { steps: 200, rank: 4, lr: 0.5, seed: 11 };
        let (_, report) = lora_finetune(&backend, &z0, &cond, &schedule(), &opts).unwrap();
        assert!(
            report.final_running_loss < report.initial_running_loss,
            "no descent: {} -> {}",
            report.initial_running_loss,
            report.final_running_loss
        );
    }

    #[test]
    fn rank_larger_than_layer_min_dim_is_rejected() {
        let backend = toy();
        let z0 = seeded_latent(6, 12, 8, 8);
        let cond = backend.encode_text("q").unwrap();
        // conv2 has out_dim 12, so rank 13 cannot factor.
        let opts = FinetuneOptions { steps: 0, rank: 13, ..Default::default() };
        let err = lora_finetune(&backend, &z0, &cond, &schedule(), &opts).unwrap_err();
        assert!(matches!(err, MorphError::RankTooLarge { .. }), "{err}");
    }

    #[test]
    fn finetune_on_non_adaptable_backend_errors() {
        let backend = ConstantBackend::zero(8);
        let z0 = seeded_latent(6, 12, 8, 8);
        let cond = backend.encode_text("q").unwrap();
        let opts = FinetuneOptions { steps: 5, ..Default::default() };
        assert!(matches!(
            lora_finetune(&backend, &z0, &cond, &schedule(), &opts),
            Err(MorphError::NoAdaptableLayers)
        ));
    }

    fn random_delta(seed: u64, backend: &ToyBackend, rank: usize) -> LoraDelta {
        let mut rng = SeedRng::new(seed);
        let mut layers = BTreeMap::new();
        for spec in crate::diffusion::DiffusionBackend::adaptable_layers(backend) {
            layers.insert(
                spec.name,
                LoraLayer {
                    a: Matrix::gaussian(rank, spec.in_dim, 0.3, &mut rng),
                    b: Matrix::gaussian(spec.out_dim, rank, 0.3, &mut rng),
                },
            );
        }
        LoraDelta { layers }
    }

    #[test]
    fn interpolation_endpoints_are_bitwise_on_effective_weights() {
        let backend = toy();
        let d_i = random_delta(21, &backend, 3);
        let d_j = random_delta(22, &backend, 3);
        let at0 = lora_interpolate(&d_i, &d_j, 0.0).unwrap();
        let at1 = lora_interpolate(&d_i, &d_j, 1.0).unwrap();
        for name in d_i.layers.keys() {
            let want_i: Vec<u64> =
                d_i.layers[name].effective().data().iter().map(|v| v.to_bits()).collect();
            let got_0: Vec<u64> =
                at0.layers[name].effective().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(want_i, got_0, "alpha 0 endpoint of {name}");
            let want_j: Vec<u64> =
                d_j.layers[name].effective().data().iter().map(|v| v.to_bits()).collect();
            let got_1: Vec<u64> =
                at1.layers[name].effective().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(want_j, got_1, "alpha 1 endpoint of {name}");
        }
    }

    #[test]
    fn interpolation_is_convex_on_effective_weights() {
        let backend = toy();
        let d_i = random_delta(31, &backend, 2);
        let d_j = random_delta(32, &backend, 2);
        for &alpha in &[0.25, 0.5, 0.75] {
            let mix = lora_interpolate(&d_i, &d_j, alpha).unwrap();
            for name in d_i.layers.keys() {
                let got = mix.layers[name].effective();
                let ei = d_i.layers[name].effective();
                let ej = d_j.layers[name].effective();
                for ((g, a), b) in got.data().iter().zip(ei.data()).zip(ej.data()) {
                    let want = (1.0 - alpha) * a + alpha * b;
                    assert!((g - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn interpolating_identical_deltas_is_alpha_independent() {
        let backend = toy();
        let d = random_delta(41, &backend, 2);
        for &alpha in &[0.0, 0.3, 0.7, 1.0] {
            let mix = lora_interpolate(&d, &d, alpha).unwrap();
            for name in d.layers.keys() {
                let got = mix.layers[name].effective();
                let want = d.layers[name].effective();
                for (g, w) in got.data().iter().zip(want.data()) {
                    assert!((g - w).abs() < 1e-12, "alpha {alpha}");
                }
            }
        }
    }

    #[test]
    fn interpolation_rejects_mismatched_layer_sets() {
        let backend = toy();
        let d_i = random_delta(51, &backend, 2);
        let mut d_j = random_delta(52, &backend, 2);
        d_j.layers.remove("conv1.weight");
        assert!(matches!(lora_interpolate(&d_i, &d_j, 0.5), Err(MorphError::LayerMismatch { .. })));
        assert!(matches!(lora_interpolate(&d_i, &d_i, 1.5), Err(MorphError::BadAlpha(_))));
    }

    #[test]
    fn lora_delta_archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let backend = toy();
        let d = random_delta(61, &backend, 3);
        let path = dir.path().join("delta.lora");
        d.save(&path).unwrap();
        let back = LoraDelta::load(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn transition_counts_and_grid() {
        let backend = toy();
        let sched = NoiseSchedule::make(5, ScheduleKind::Linear, 0.05).unwrap();
        let spec = TransitionSpec {
            n: 15,
            frame_i: synthetic_frame(300, 32, 32),
            frame_j: synthetic_frame(301, 32, 32),
            query_i: "first scene".to_string(),
            query_j: "second scene".to_string(),
            finetune: FinetuneOptions { steps: 5, rank: 2, lr: 0.2, seed: 3 },
        };
        let out = generate_transition(&spec, &backend, &sched).unwrap();
        assert_eq!(out.frames.len(), 14);
        for (k, alpha) in out.alphas.iter().enumerate() {
            assert!((alpha - (k + 1) as f64 / 15.0).abs() < 1e-15);
        }

        let spec2 = TransitionSpec { n: 2, ..spec };
        let out2 = generate_transition(&spec2, &backend, &sched).unwrap();
        assert_eq!(out2.frames.len(), 1);
        assert_eq!(out2.alphas, vec![0.5]);

        let bad = TransitionSpec { n: 1, ..spec2 };
        assert!(matches!(
            generate_transition(&bad, &backend, &sched),
            Err(MorphError::BadTransitionCount(1))
        ));
    }

    #[test]
    fn identical_endpoints_fixed_point() {
        // Same frame, same query, state-independent predictor, zero-step
        // LoRA: every intermediate equals the endpoint reconstruction.
        let backend = ConstantBackend::constant(8, 0.2);
        let sched = NoiseSchedule::make(8, ScheduleKind::Linear, 0.05).unwrap();
        let frame = synthetic_frame(400, 32, 32);
        let spec = TransitionSpec {
            n: 4,
            frame_i: frame.clone(),
            frame_j: frame.clone(),
            query_i: "same".to_string(),
            query_j: "same".to_string(),
            finetune: FinetuneOptions { steps: 0, rank: 1, lr: 0.0, seed: 0 },
        };
        let out = generate_transition(&spec, &backend, &sched).unwrap();
        assert_eq!(out.frames.len(), 3);
        // Round trip through the codec is exact, so intermediates equal the
        // source frame.
        for f in &out.frames {
            assert_eq!(f.as_raw(), frame.as_raw());
        }
    }

    #[test]
    fn transition_is_deterministic() {
        let backend = toy();
        let sched = NoiseSchedule::make(4, ScheduleKind::Linear, 0.05).unwrap();
        let make_spec = || TransitionSpec {
            n: 5,
            frame_i: synthetic_frame(500, 32, 32),
            frame_j: synthetic_frame(501, 32, 32),
            query_i: "before".to_string(),
            query_j: "after".to_string(),
            finetune: FinetuneOptions { steps: 8, rank: 2, lr: 0.2, seed: 9 },
        };
        let a = generate_transition(&make_spec(), &backend, &sched).unwrap();
        let b = generate_transition(&make_spec(), &backend, &sched).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.as_raw(), y.as_raw());
        }
    }
}

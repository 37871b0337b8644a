//! Noise schedules, latent tensors, and the DDIM inversion/sampling pair.
//!
//! `alpha_t` throughout is the cumulative signal rate in the DDIM convention:
//! `x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) eps`, with `alpha_0 = 1` and
//! a strictly decreasing schedule. Inversion walks a clean latent forward to
//! noise under the same update that sampling runs backward, so for any
//! state-independent noise predictor the two telescope exactly.

mod backend;
mod toy;

pub use backend::{
    Condition, ConstantBackend, ConstantPredictor, DiffusionBackend, Guidance, LayerSpec,
    PatchCodec, WeightDelta,
};
pub use toy::{ToyBackend, ToyBackendConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("latent shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("non-finite latent at step {step}")]
    NonFinite { step: usize },
    #[error("condition dimension mismatch: expected {expected}, got {got}")]
    ConditionDim { expected: usize, got: usize },
    #[error("control tensor mismatch: {0}")]
    Control(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error("backend is not trainable")]
    NotTrainable,
    #[error("unknown adaptable layer {0}")]
    UnknownLayer(String),
    #[error("weight delta shape mismatch on {layer}: expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    DeltaShape {
        layer: String,
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("weight archive {path}: {reason}")]
    WeightArchive { path: std::path::PathBuf, reason: String },
    #[error(transparent)]
    Archive(#[from] crate::archive::ArchiveError),
}

/// Per-frame latent tensor, channels × height × width, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "latent data length mismatch");
        Self { channels, height, width, data }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.data)
    }

    pub fn dot(&self, other: &Latent) -> f64 {
        crate::linalg::dot(&self.data, &other.data)
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Latent, s: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Elementwise `(1 - t) * self + t * other`, in place.
    pub fn blend_with(&mut self, other: &Latent, t: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = (1.0 - t) * *a + t * b;
        }
    }

    /// FNV-1a hash of the raw bytes; used as an audit fingerprint.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::seed::fnv1a64(&bytes)
    }
}

/// Relative L2 error of `a` against reference `b`.
pub fn relative_error(a: &Latent, b: &Latent) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut diff = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        diff += d * d;
    }
    diff.sqrt() / b.norm().max(1e-300)
}

/// Schedule families for [`NoiseSchedule::make`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Cumulative signal rates `alpha_0..alpha_T`, strictly decreasing, all in
/// (0, 1], with `alpha_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn make(steps: usize, kind: ScheduleKind, alpha_min: f64) -> Result<Self, DiffusionError> {
        if steps < 1 {
            return Err(DiffusionError::InvalidSchedule("steps must be >= 1".into()));
        }
        if !(alpha_min > 0.0 && alpha_min < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "alpha_min {alpha_min} outside (0, 1)"
            )));
        }
        let alphas = (0..=steps)
            .map(|t| {
                // Endpoints are pinned exactly: alpha_0 = 1, alpha_T = alpha_min.
                if t == 0 {
                    return 1.0;
                }
                if t == steps {
                    return alpha_min;
                }
                let u = t as f64 / steps as f64;
                match kind {
                    ScheduleKind::Linear => 1.0 - u * (1.0 - alpha_min),
                    ScheduleKind::Cosine => {
                        let c = (std::f64::consts::FRAC_PI_2 * u).cos();
                        alpha_min + (1.0 - alpha_min) * c * c
                    }
                }
            })
            .collect();
        Self::from_alphas(alphas)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self, DiffusionError> {
        if alphas.len() < 2 {
            return Err(DiffusionError::InvalidSchedule("need at least alpha_0, alpha_1".into()));
        }
        if alphas[0] > 1.0 || alphas[0] <= 0.0 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "alpha_0 = {} outside (0, 1]",
                alphas[0]
            )));
        }
        for w in alphas.windows(2) {
            if !(w[1] > 0.0 && w[1] < w[0]) {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "sequence not strictly decreasing and positive at pair ({}, {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { alphas })
    }

    /// Number of diffusion steps T (the schedule holds T+1 alphas).
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

/// `sqrt(alpha_t) z_0 + sqrt(1 - alpha_t) eps` — the forward noising used by
/// the fine-tuning objective.
pub fn noisy_latent(z0: &Latent, eps: &Latent, alpha_t: f64) -> Latent {
    debug_assert_eq!(z0.shape(), eps.shape());
    let a = alpha_t.sqrt();
    let b = (1.0 - alpha_t).sqrt();
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Latent::from_vec(z0.channels, z0.height, z0.width, data)
}

/// Per-call knobs for the DDIM loops.
#[derive(Default)]
pub struct StepOptions<'a> {
    /// Extra conditioning tensor passed through to the backend.
    pub control: Option<&'a Latent>,
    /// Additive weight delta (LoRA) applied inside the backend.
    pub lora: Option<&'a WeightDelta>,
    /// Classifier-free guidance. Off by default; the shipped pipeline never
    /// enables it, it exists as an extension for backends trained with an
    /// unconditional branch.
    pub guidance: Option<Guidance>,
}

fn predict(
    backend: &dyn DiffusionBackend,
    z: &Latent,
    t: usize,
    cond: &Condition,
    opts: &StepOptions,
) -> Result<Latent, DiffusionError> {
    let base = backend.predict_noise_adapted(z, t, cond, opts.control, opts.lora)?;
    match &opts.guidance {
        None => Ok(base),
        Some(g) => {
            let uncond = backend.predict_noise_adapted(z, t, &g.uncond, opts.control, opts.lora)?;
            let mut out = uncond.clone();
            out.add_scaled(&base, g.scale);
            out.add_scaled(&uncond, -g.scale);
            Ok(out)
        }
    }
}

/// One DDIM update moving a latent from signal rate `alpha_from` to
/// `alpha_to` under the predicted noise.
#[inline]
fn ddim_step(z: &Latent, eps_hat: &Latent, alpha_from: f64, alpha_to: f64) -> Latent {
    let sa_from = alpha_from.sqrt();
    let sa_to = alpha_to.sqrt();
    let sb_from = (1.0 - alpha_from).sqrt();
    let sb_to = (1.0 - alpha_to).sqrt();
    let data = z
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(zv, ev)| sa_to * (zv - sb_from * ev) / sa_from + sb_to * ev)
        .collect();
    Latent::from_vec(z.channels, z.height, z.width, data)
}

/// Invert a clean latent to its noise latent in T forward steps.
pub fn ddim_invert(
    z0: &Latent,
    cond: &Condition,
    schedule: &NoiseSchedule,
    backend: &dyn DiffusionBackend,
    opts: &StepOptions,
) -> Result<Latent, DiffusionError> {
    let mut z = z0.clone();
    for t in 0..schedule.steps() {
        let eps_hat = predict(backend, &z, t, cond, opts)?;
        z = ddim_step(&z, &eps_hat, schedule.alpha(t), schedule.alpha(t + 1));
        if !z.is_finite() {
            return Err(DiffusionError::NonFinite { step: t });
        }
    }
    Ok(z)
}

/// As [`ddim_invert`], returning the full trajectory `z_0..z_T`.
pub fn ddim_invert_trajectory(
    z0: &Latent,
    cond: &Condition,
    schedule: &NoiseSchedule,
    backend: &dyn DiffusionBackend,
    opts: &StepOptions,
) -> Result<Vec<Latent>, DiffusionError> {
    let mut traj = Vec::with_capacity(schedule.steps() + 1);
    traj.push(z0.clone());
    for t in 0..schedule.steps() {
        let z = traj.last().expect("trajectory non-empty");
        let eps_hat = predict(backend, z, t, cond, opts)?;
        let next = ddim_step(z, &eps_hat, schedule.alpha(t), schedule.alpha(t + 1));
        if !next.is_finite() {
            return Err(DiffusionError::NonFinite { step: t });
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Metadata passed to the per-step observer during sampling.
#[derive(Debug, Clone, Copy)]
pub struct StepEvent {
    /// Timestep of the latent just produced (T-1 down to 0).
    pub timestep: usize,
    /// 0-based index of this sampling step (0..T).
    pub step_index: usize,
    pub total_steps: usize,
}

/// Sample a noise latent back to a clean latent in T reverse steps.
///
/// `on_step` runs after every update and may transform the latent in place;
/// the editing hooks attach here.
pub fn ddim_sample_observed(
    z_t: &Latent,
    cond: &Condition,
    schedule: &NoiseSchedule,
    backend: &dyn DiffusionBackend,
    opts: &StepOptions,
    mut on_step: impl FnMut(StepEvent, &mut Latent),
) -> Result<Latent, DiffusionError> {
    let total = schedule.steps();
    let mut z = z_t.clone();
    for t in (1..=total).rev() {
        let eps_hat = predict(backend, &z, t, cond, opts)?;
        z = ddim_step(&z, &eps_hat, schedule.alpha(t), schedule.alpha(t - 1));
        if !z.is_finite() {
            return Err(DiffusionError::NonFinite { step: t });
        }
        on_step(StepEvent { timestep: t - 1, step_index: total - t, total_steps: total }, &mut z);
    }
    Ok(z)
}

pub fn ddim_sample(
    z_t: &Latent,
    cond: &Condition,
    schedule: &NoiseSchedule,
    backend: &dyn DiffusionBackend,
    opts: &StepOptions,
) -> Result<Latent, DiffusionError> {
    ddim_sample_observed(z_t, cond, schedule, backend, opts, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedRng;

    fn seeded_latent(seed: u64, c: usize, h: usize, w: usize) -> Latent {
        let mut rng = SeedRng::new(seed);
        let mut z = Latent::zeros(c, h, w);
        rng.fill_gaussian(z.data_mut());
        z
    }

    fn cond() -> Condition {
        Condition::new(vec![0.0; 8])
    }

    #[test]
    fn linear_schedule_endpoints_and_midpoint() {
        let s = NoiseSchedule::make(50, ScheduleKind::Linear, 0.01).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert!((s.alpha(50) - 0.01).abs() < 1e-15);
        assert!((s.alpha(25) - 0.505).abs() < 1e-12);
    }

    #[test]
    fn one_step_linear_schedule() {
        let s = NoiseSchedule::make(1, ScheduleKind::Linear, 0.3).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.3]);
    }

    #[test]
    fn schedules_strictly_decrease() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1usize, 2, 7, 50, 200] {
                let s = NoiseSchedule::make(steps, kind, 0.02).unwrap();
                assert_eq!(s.steps(), steps);
                assert_eq!(s.alpha(0), 1.0);
                for t in 0..steps {
                    assert!(
                        s.alpha(t + 1) < s.alpha(t) && s.alpha(t + 1) > 0.0,
                        "{kind:?} steps={steps} t={t}"
                    );
                }
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(NoiseSchedule::make(0, ScheduleKind::Linear, 0.1).is_err());
        assert!(NoiseSchedule::make(10, ScheduleKind::Linear, 0.0).is_err());
        assert!(NoiseSchedule::make(10, ScheduleKind::Linear, 1.0).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.6]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.5, -0.1]).is_err());
    }

    #[test]
    fn zero_predictor_inversion_is_pure_rescale() {
        let backend = ConstantBackend::zero(8);
        let schedule = NoiseSchedule::make(10, ScheduleKind::Linear, 0.04).unwrap();
        let z0 = seeded_latent(1, 12, 4, 4);
        let z_t = ddim_invert(&z0, &cond(), &schedule, &backend, &StepOptions::default()).unwrap();
        // z_T = sqrt(alpha_T / alpha_0) z_0.
        let factor = (schedule.alpha(10) / schedule.alpha(0)).sqrt();
        for (got, want) in z_t.data().iter().zip(z0.data()) {
            assert!((got - want * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_predictor_sampling_is_pure_rescale() {
        let backend = ConstantBackend::zero(8);
        let schedule = NoiseSchedule::make(7, ScheduleKind::Cosine, 0.05).unwrap();
        let z_t = seeded_latent(2, 12, 4, 4);
        let z0 = ddim_sample(&z_t, &cond(), &schedule, &backend, &StepOptions::default()).unwrap();
        let factor = (schedule.alpha(0) / schedule.alpha(7)).sqrt();
        for (got, want) in z0.data().iter().zip(z_t.data()) {
            assert!((got - want * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_predictor_single_step_matches_closed_form() {
        let e = 0.37;
        let backend = ConstantBackend::constant(8, e);
        let schedule = NoiseSchedule::make(1, ScheduleKind::Linear, 0.6).unwrap();
        let z0 = seeded_latent(3, 12, 4, 4);
        let z1 = ddim_invert(&z0, &cond(), &schedule, &backend, &StepOptions::default()).unwrap();
        // alpha_0 = 1, one step: z_1 = sqrt(alpha_1) z_0 + sqrt(1 - alpha_1) e.
        let a1 = schedule.alpha(1);
        for (got, z) in z1.data().iter().zip(z0.data()) {
            let want = a1.sqrt() * z + (1.0 - a1).sqrt() * e;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_and_constant_round_trips_are_exact() {
        // The update pair evaluates the predictor at the input latent's
        // timestep, so transition t <-> t+1 sees index t on the way out and
        // t+1 on the way back; telescoping is exact when the prediction does
        // not vary with t (zero and constant predictors).
        for (seed, backend) in [
            (10u64, ConstantBackend::zero(8)),
            (11, ConstantBackend::constant(8, -0.25)),
            (12, ConstantBackend::constant(8, 0.8)),
        ] {
            for steps in [1usize, 10, 50] {
                let schedule = NoiseSchedule::make(steps, ScheduleKind::Linear, 0.01).unwrap();
                let z0 = seeded_latent(seed, 12, 4, 4);
                let opts = StepOptions::default();
                let z_t = ddim_invert(&z0, &cond(), &schedule, &backend, &opts).unwrap();
                let back = ddim_sample(&z_t, &cond(), &schedule, &backend, &opts).unwrap();
                let err = relative_error(&back, &z0);
                assert!(err < 1e-6, "seed {seed} steps {steps}: rel err {err}");
            }
        }
    }

    #[test]
    fn shapes_are_preserved() {
        let backend = ConstantBackend::step_sine(8, 0.2);
        let schedule = NoiseSchedule::make(5, ScheduleKind::Linear, 0.1).unwrap();
        let z0 = seeded_latent(20, 12, 6, 2);
        let opts = StepOptions::default();
        let z_t = ddim_invert(&z0, &cond(), &schedule, &backend, &opts).unwrap();
        assert_eq!(z_t.shape(), z0.shape());
        let back = ddim_sample(&z_t, &cond(), &schedule, &backend, &opts).unwrap();
        assert_eq!(back.shape(), z0.shape());
    }

    #[test]
    fn trajectories_are_deterministic() {
        let backend = ConstantBackend::step_sine(8, 0.3);
        let schedule = NoiseSchedule::make(12, ScheduleKind::Cosine, 0.02).unwrap();
        let z0 = seeded_latent(33, 12, 4, 4);
        let opts = StepOptions::default();
        let a = ddim_invert_trajectory(&z0, &cond(), &schedule, &backend, &opts).unwrap();
        let b = ddim_invert_trajectory(&z0, &cond(), &schedule, &backend, &opts).unwrap();
        assert_eq!(a.len(), 13);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn sample_observer_sees_every_step_in_order() {
        let backend = ConstantBackend::zero(8);
        let schedule = NoiseSchedule::make(6, ScheduleKind::Linear, 0.1).unwrap();
        let z_t = seeded_latent(4, 12, 2, 2);
        let mut seen = Vec::new();
        ddim_sample_observed(
            &z_t,
            &cond(),
            &schedule,
            &backend,
            &StepOptions::default(),
            |ev, _| {
                seen.push((ev.step_index, ev.timestep));
            },
        )
        .unwrap();
        assert_eq!(seen, vec![(0, 5), (1, 4), (2, 3), (3, 2), (4, 1), (5, 0)]);
    }

    #[test]
    fn guidance_interpolates_between_branches() {
        // out = uncond + s * (cond - uncond): s = 0 reproduces the
        // unconditional branch, s = 1 the conditional one.
        let backend = super::ToyBackend::new(super::ToyBackendConfig::default());
        let schedule = NoiseSchedule::make(3, ScheduleKind::Linear, 0.1).unwrap();
        let z = seeded_latent(40, 12, 4, 4);
        let cond = backend.encode_text("a castle at night").unwrap();
        let uncond = backend.encode_text("").unwrap();

        let plain_cond =
            ddim_sample(&z, &cond, &schedule, &backend, &StepOptions::default()).unwrap();
        let plain_uncond =
            ddim_sample(&z, &uncond, &schedule, &backend, &StepOptions::default()).unwrap();
        for (scale, reference) in [(0.0, &plain_uncond), (1.0, &plain_cond)] {
            let opts = StepOptions {
                guidance: Some(Guidance { uncond: uncond.clone(), scale }),
                ..Default::default()
            };
            let guided = ddim_sample(&z, &cond, &schedule, &backend, &opts).unwrap();
            let err = relative_error(&guided, reference);
            assert!(err < 1e-12, "scale {scale}: err {err}");
        }
        // An amplified scale departs from both branches.
        let opts = StepOptions {
            guidance: Some(Guidance { uncond: uncond.clone(), scale: 4.0 }),
            ..Default::default()
        };
        let amplified = ddim_sample(&z, &cond, &schedule, &backend, &opts).unwrap();
        assert!(relative_error(&amplified, &plain_cond) > 1e-9);
    }

    #[test]
    fn noisy_latent_matches_formula() {
        let z0 = seeded_latent(5, 12, 2, 2);
        let eps = seeded_latent(6, 12, 2, 2);
        let x = noisy_latent(&z0, &eps, 0.64);
        for ((got, z), e) in x.data().iter().zip(z0.data()).zip(eps.data()) {
            assert!((got - (0.8 * z + 0.36_f64.sqrt() * e)).abs() < 1e-12);
        }
    }
}

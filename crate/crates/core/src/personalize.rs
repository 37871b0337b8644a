//! Subject personalization: bind a rare identifier token to a few-shot image
//! set by fine-tuning a copy of the backend on prompts of the form
//! `"A <token> <class>"`. The source backend is never modified; the returned
//! backend satisfies the full backend contract and can replace the base one
//! in editing and morphing.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{noisy_latent, DiffusionBackend, DiffusionError, Latent, NoiseSchedule};
use crate::imaging::preprocess_frame;
use crate::seed::SeedRng;

pub const MIN_SUBJECT_IMAGES: usize = 3;
pub const MAX_SUBJECT_IMAGES: usize = 5;

#[derive(Debug, Error)]
pub enum PersonalizeError {
    #[error("subject needs {MIN_SUBJECT_IMAGES}-{MAX_SUBJECT_IMAGES} images, got {0}")]
    ImageCount(usize),
    #[error("identifier token must be a single non-empty token, got {0:?}")]
    BadToken(String),
    #[error("class name must be non-empty")]
    EmptyClass,
    #[error("non-finite fine-tune loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Few-shot subject description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectSpec {
    /// Rare identifier token, e.g. `"[V]"` or `"sks"`.
    pub identifier_token: String,
    /// Subject class, e.g. `"dog"`.
    pub class_name: String,
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Training images are center-cropped and resized to this square side.
    #[serde(default = "default_resolution")]
    pub resolution: u32,
}

fn default_lr() -> f64 {
    0.5
}

fn default_resolution() -> u32 {
    64
}

impl SubjectSpec {
    /// The training prompt: `"A <token> <class>"`.
    pub fn prompt(&self) -> String {
        format!("A {} {}", self.identifier_token, self.class_name)
    }
}

#[derive(Debug, Clone)]
pub struct PersonalizeReport {
    pub losses: Vec<f64>,
    pub initial_running_loss: f64,
    pub final_running_loss: f64,
}

/// Fine-tune a copy of `backend` on the subject images under the rare-token
/// prompt. Returns the personalized backend and the loss trace.
pub fn personalize(
    backend: &dyn DiffusionBackend,
    spec: &SubjectSpec,
    images: &[RgbImage],
    schedule: &NoiseSchedule,
) -> Result<(Box<dyn DiffusionBackend>, PersonalizeReport), PersonalizeError> {
    if !(MIN_SUBJECT_IMAGES..=MAX_SUBJECT_IMAGES).contains(&images.len()) {
        return Err(PersonalizeError::ImageCount(images.len()));
    }
    let token = spec.identifier_token.trim();
    if token.is_empty() || token.split_whitespace().count() != 1 {
        return Err(PersonalizeError::BadToken(spec.identifier_token.clone()));
    }
    if spec.class_name.trim().is_empty() {
        return Err(PersonalizeError::EmptyClass);
    }
    if !backend.trainable() {
        return Err(PersonalizeError::Diffusion(DiffusionError::NotTrainable));
    }

    let mut tuned = backend.clone_backend();
    let cond = tuned.encode_text(&spec.prompt())?;
    let latents: Vec<Latent> = images
        .iter()
        .map(|img| tuned.encode(&preprocess_frame(img, spec.resolution)))
        .collect::<Result<_, _>>()?;

    let mut rng = SeedRng::new(spec.seed);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let z0 = &latents[rng.next_index(latents.len())];
        let t = 1 + rng.next_index(schedule.steps());
        let mut eps = Latent::zeros(z0.channels, z0.height, z0.width);
        rng.fill_gaussian(eps.data_mut());
        let x_t = noisy_latent(z0, &eps, schedule.alpha(t));
        let loss = tuned.finetune_step(&x_t, t, &cond, &eps, spec.lr)?;
        if !loss.is_finite() {
            return Err(PersonalizeError::NonFiniteLoss { step });
        }
        losses.push(loss);
    }

    let window = (losses.len() / 4).clamp(1, 30).min(losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (initial, fin) = if losses.is_empty() {
        (0.0, 0.0)
    } else {
        (mean(&losses[..window]), mean(&losses[losses.len() - window..]))
    };
    Ok((
        tuned,
        PersonalizeReport { losses, initial_running_loss: initial, final_running_loss: fin },
    ))
}

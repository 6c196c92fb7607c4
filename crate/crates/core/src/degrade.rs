//! Degradation synthesis. Only additive Gaussian noise is synthesized; rain
//! and haze come from datasets and have no formula to implement.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NOISE_LEVELS: [u32; 3] = [15, 25, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "denoise15")]
    Denoise15,
    #[serde(rename = "denoise25")]
    Denoise25,
    #[serde(rename = "denoise50")]
    Denoise50,
    #[serde(rename = "derain")]
    Derain,
    #[serde(rename = "dehaze")]
    Dehaze,
    #[serde(rename = "all-in-one")]
    AllInOne,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Denoise15,
        Task::Denoise25,
        Task::Denoise50,
        Task::Derain,
        Task::Dehaze,
        Task::AllInOne,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Task::Denoise15 => "denoise15",
            Task::Denoise25 => "denoise25",
            Task::Denoise50 => "denoise50",
            Task::Derain => "derain",
            Task::Dehaze => "dehaze",
            Task::AllInOne => "all-in-one",
        }
    }

    /// Noise level on the 0..255 scale, for the denoising tasks.
    pub fn sigma(self) -> Option<u32> {
        match self {
            Task::Denoise15 => Some(15),
            Task::Denoise25 => Some(25),
            Task::Denoise50 => Some(50),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

/// `clean + N(0, sigma/255)` clipped to [0, 1]. Zero sigma returns the
/// input unchanged.
pub fn add_gaussian_noise(clean: &Tensor<f32>, sigma: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level {sigma} is not a finite non-negative number")));
    }
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("positive finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = clean.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Applies `task` to a clean image in [0, 1].
pub fn synthesize(clean: &Tensor<f32>, task: Task, seed: u64) -> Result<Tensor<f32>> {
    match task.sigma() {
        Some(s) => add_gaussian_noise(clean, s as f64, seed),
        None => Err(Error::InvalidArgument(format!(
            "task {task} has no synthesis rule; only denoise15/25/50 can be synthesized"
        ))),
    }
}

/// Smooth shading with a disc and a band of stripes, values in [0.1, 0.9].
/// A deterministic stand-in for a natural image in demos and smoke tests.
pub fn test_pattern(height: usize, width: usize) -> Tensor<f32> {
    let (hf, wf) = (height.max(1) as f32, width.max(1) as f32);
    Tensor::from_fn([1, height, width, 3], |[_, y, x, c]| {
        let (u, v) = (x as f32 / wf, y as f32 / hf);
        let mut val = 0.25 + 0.35 * u + 0.2 * v * (c as f32 + 1.0) / 3.0;
        let (dx, dy) = (u - 0.62, v - 0.4);
        if dx * dx + dy * dy < 0.05 {
            val = 0.85 - 0.2 * c as f32 / 2.0;
        }
        if v > 0.7 && v < 0.85 {
            val += if (x / 3) % 2 == 0 { 0.12 } else { -0.12 };
        }
        val.clamp(0.1, 0.9)
    })
}

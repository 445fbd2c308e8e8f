//! Tiny generated test corpus: silence, a 1 kHz tone and seeded white
//! noise, one second each at 16 kHz, plus golden feature files extracted
//! with the DFT path. Everything is deterministic, so CI needs no
//! downloads and regeneration is byte-identical.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::format::save_tensor;
use crate::frontend::{FeatureConfig, FeatureExtractor, TransformKind};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::wav::{write_wav_mono, REQUIRED_SAMPLE_RATE};

pub const CLIP_SAMPLES: usize = 16_000;
pub const NOISE_SEED: u64 = 0x6b77_735f_6e6f_6973;
pub const TONE_HZ: f64 = 1000.0;

pub fn silence_samples() -> Tensor {
    Tensor::zeros(&[CLIP_SAMPLES]).unwrap()
}

/// Half-amplitude sine at `TONE_HZ`.
pub fn tone_samples() -> Tensor {
    let data: Vec<f32> = (0..CLIP_SAMPLES)
        .map(|i| {
            (0.5 * (std::f64::consts::TAU * TONE_HZ * i as f64 / REQUIRED_SAMPLE_RATE as f64).sin())
                as f32
        })
        .collect();
    Tensor::from_vec(vec![CLIP_SAMPLES], data).unwrap()
}

/// Uniform noise in [-0.5, 0.5) from the fixed corpus seed.
pub fn noise_samples() -> Tensor {
    let mut rng = SplitMix64::new(NOISE_SEED);
    let data: Vec<f32> = (0..CLIP_SAMPLES).map(|_| rng.uniform(-0.5, 0.5)).collect();
    Tensor::from_vec(vec![CLIP_SAMPLES], data).unwrap()
}

pub const CLIP_NAMES: [&str; 3] = ["silence", "tone_1khz", "noise"];

pub fn clip_samples(name: &str) -> Option<Tensor> {
    match name {
        "silence" => Some(silence_samples()),
        "tone_1khz" => Some(tone_samples()),
        "noise" => Some(noise_samples()),
        _ => None,
    }
}

/// Writes the three WAVs and their golden feature tensors into `dir`.
/// Goldens use the DFT transform with the default feature config. Returns
/// the written paths.
pub fn generate(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let extractor = FeatureExtractor::new(FeatureConfig {
        transform: TransformKind::Dft,
        ..FeatureConfig::default()
    })?;
    let mut written = Vec::new();
    for name in CLIP_NAMES {
        let samples = clip_samples(name).expect("known corpus clip");
        let wav_path = dir.join(format!("{name}.wav"));
        write_wav_mono(&wav_path, &samples, REQUIRED_SAMPLE_RATE)?;

        // Goldens describe the wav as stored, so extract from the
        // re-read (PCM-quantized) samples.
        let stored = crate::wav::read_wav_mono_16k(&wav_path)?;
        let features = extractor.extract_clip(&stored)?;
        let feat_path = dir.join(format!("{name}_features.sktf"));
        save_tensor(&features, &feat_path)?;
        written.push(wav_path);
        written.push(feat_path);
    }
    Ok(written)
}

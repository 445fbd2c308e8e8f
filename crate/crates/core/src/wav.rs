//! WAV input/output for the CLI and test corpus.
//!
//! Only mono 16 kHz 16-bit PCM is accepted; samples are normalized to
//! [-1, 1) by dividing by 32768.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const REQUIRED_SAMPLE_RATE: u32 = 16_000;

pub fn read_wav_mono_16k(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut reader =
        hound::WavReader::open(path.as_ref()).map_err(|e| Error::UnsupportedWav(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedWav(format!(
            "need mono audio, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != REQUIRED_SAMPLE_RATE {
        return Err(Error::UnsupportedWav(format!(
            "need {REQUIRED_SAMPLE_RATE} Hz audio, got {} Hz",
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedWav(format!(
            "need 16-bit PCM, got {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|e| Error::UnsupportedWav(e.to_string()))?;
    if samples.is_empty() {
        return Err(Error::UnsupportedWav("empty wav".into()));
    }
    let data: Vec<f32> = samples.iter().map(|&s| s as f32 / 32768.0).collect();
    let n = data.len();
    Tensor::from_vec(vec![n], data)
}

/// Writes normalized samples as 16-bit PCM at the given rate (the reader
/// only accepts 16 kHz; other rates exist for tests).
pub fn write_wav_mono(path: impl AsRef<Path>, samples: &Tensor, sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)
        .map_err(|e| Error::UnsupportedWav(e.to_string()))?;
    for &x in samples.data() {
        let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::UnsupportedWav(e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::UnsupportedWav(e.to_string()))?;
    Ok(())
}

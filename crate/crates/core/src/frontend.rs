//! MFCC speech frontend.
//!
//! Turns 16 kHz audio into cepstral feature frames: Hann window, magnitude
//! spectrum (FFT or explicit-matrix DFT), mel filterbank, log compression,
//! orthonormal DCT-II. Works offline (whole clip to `[frames, coeffs]`) and
//! streaming (one hop of samples to one feature frame), with the streaming
//! path reusing the same ring-buffer primitive as the model states.
//!
//! The DFT path materializes full `fft_size x window` cosine/sine tables
//! (the price of expressing the transform as plain weights), while the FFT
//! path keeps no coefficient tables at all.

use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::stream::ring_buffer_step;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Fft,
    Dft,
}

#[derive(Debug, Clone)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f32,
    pub hop_ms: f32,
    pub transform: TransformKind,
    /// Transform size; must be a power of two for the FFT path and at least
    /// the window length. The window is zero-padded up to it.
    pub fft_size: usize,
    pub mel_bins: usize,
    pub mel_low_hz: f32,
    pub mel_high_hz: f32,
    pub dct_coeffs: usize,
    /// Added before the log so silent filters stay finite.
    pub log_floor: f32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: 16_000,
            window_ms: 40.0,
            hop_ms: 20.0,
            transform: TransformKind::Fft,
            fft_size: 1024,
            mel_bins: 40,
            mel_low_hz: 20.0,
            mel_high_hz: 7600.0,
            dct_coeffs: 20,
            log_floor: 1e-12,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms as f64 * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms as f64 * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.hop_ms > 0.0 && self.window_ms > self.hop_ms) {
            return bad(format!(
                "window ({} ms) must exceed hop ({} ms), both positive",
                self.window_ms, self.hop_ms
            ));
        }
        if self.fft_size < self.window_samples() {
            return bad(format!(
                "fft_size {} smaller than the {}-sample window",
                self.fft_size,
                self.window_samples()
            ));
        }
        if self.transform == TransformKind::Fft && !self.fft_size.is_power_of_two() {
            return bad(format!("fft_size {} is not a power of two", self.fft_size));
        }
        if self.dct_coeffs == 0 || self.dct_coeffs > self.mel_bins {
            return bad(format!(
                "dct_coeffs {} must be in 1..={}",
                self.dct_coeffs, self.mel_bins
            ));
        }
        let nyquist = self.sample_rate_hz as f32 / 2.0;
        if !(0.0 < self.mel_low_hz
            && self.mel_low_hz < self.mel_high_hz
            && self.mel_high_hz <= nyquist)
        {
            return bad(format!(
                "mel range {}..{} Hz invalid for nyquist {nyquist} Hz",
                self.mel_low_hz, self.mel_high_hz
            ));
        }
        Ok(())
    }
}

/// Number of analysis frames a clip of `n_samples` yields:
/// `floor((n - window) / hop) + 1`.
pub fn frame_count(n_samples: usize, cfg: &FeatureConfig) -> Result<usize> {
    let win = cfg.window_samples();
    if n_samples < win {
        return Err(Error::TooShort {
            needed: win,
            got: n_samples,
        });
    }
    Ok((n_samples - win) / cfg.hop_samples() + 1)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10.0f32.powf(mel / 2595.0) - 1.0)
}

struct DftTables {
    /// `fft_size x window` each, row k holding cos/sin(2*pi*k*n/fft_size).
    cos: Vec<f32>,
    sin: Vec<f32>,
}

pub struct FeatureExtractor {
    cfg: FeatureConfig,
    window: Vec<f32>,
    /// Triangular filter rows, `mel_bins x (fft_size/2 + 1)`.
    mel_rows: Vec<Vec<f32>>,
    /// Orthonormal DCT-II, `dct_coeffs x mel_bins`, row-major.
    dct: Vec<f32>,
    dft: Option<DftTables>,
    fft: Option<Arc<dyn Fft<f32>>>,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<FeatureExtractor> {
        cfg.validate()?;
        let win = cfg.window_samples();
        let n = cfg.fft_size;

        // Symmetric Hann window.
        let window: Vec<f32> = (0..win)
            .map(|i| {
                let x = std::f64::consts::TAU * i as f64 / (win - 1) as f64;
                (0.5 * (1.0 - x.cos())) as f32
            })
            .collect();

        let mel_rows = mel_filterbank(&cfg);

        let m = cfg.mel_bins;
        let mut dct = vec![0.0f32; cfg.dct_coeffs * m];
        for k in 0..cfg.dct_coeffs {
            let scale = if k == 0 {
                (1.0 / m as f64).sqrt()
            } else {
                (2.0 / m as f64).sqrt()
            };
            for j in 0..m {
                let angle = std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2 * m) as f64;
                dct[k * m + j] = (scale * angle.cos()) as f32;
            }
        }

        let (dft, fft) = match cfg.transform {
            TransformKind::Dft => {
                let mut cos = vec![0.0f32; n * win];
                let mut sin = vec![0.0f32; n * win];
                for k in 0..n {
                    for i in 0..win {
                        let angle = std::f64::consts::TAU * k as f64 * i as f64 / n as f64;
                        cos[k * win + i] = angle.cos() as f32;
                        sin[k * win + i] = angle.sin() as f32;
                    }
                }
                (Some(DftTables { cos, sin }), None)
            }
            TransformKind::Fft => {
                let plan = FftPlanner::new().plan_fft_forward(n);
                (None, Some(plan))
            }
        };

        Ok(FeatureExtractor {
            cfg,
            window,
            mel_rows,
            dct,
            dft,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Dimensions of the materialized DFT coefficient tables, if any. The
    /// FFT path reports `None`: it keeps no tables.
    pub fn dft_table_dims(&self) -> Option<(usize, usize)> {
        self.dft
            .as_ref()
            .map(|_| (self.cfg.fft_size, self.cfg.window_samples()))
    }

    pub fn mel_filter_rows(&self) -> &[Vec<f32>] {
        &self.mel_rows
    }

    /// Magnitude spectrum (bins `0..=fft_size/2`) of one windowed frame.
    pub fn magnitude_spectrum(&self, windowed: &[f32]) -> Vec<f32> {
        let n = self.cfg.fft_size;
        let half = n / 2 + 1;
        match self.cfg.transform {
            TransformKind::Dft => {
                let tables = self.dft.as_ref().expect("DFT path has tables");
                let win = windowed.len();
                let mut mag = Vec::with_capacity(half);
                for k in 0..half {
                    let mut re = 0.0f32;
                    let mut im = 0.0f32;
                    for (i, &x) in windowed.iter().enumerate() {
                        re += x * tables.cos[k * win + i];
                        im -= x * tables.sin[k * win + i];
                    }
                    mag.push((re * re + im * im).sqrt());
                }
                mag
            }
            TransformKind::Fft => {
                let fft = self.fft.as_ref().expect("FFT path has a plan");
                let mut buf = vec![Complex32::new(0.0, 0.0); n];
                for (i, &x) in windowed.iter().enumerate() {
                    buf[i].re = x;
                }
                fft.process(&mut buf);
                buf[..half].iter().map(|c| c.norm()).collect()
            }
        }
    }

    /// Mel filterbank energies of one window of samples (before the log).
    pub fn mel_energies(&self, samples: &Tensor) -> Result<Vec<f32>> {
        let win = self.cfg.window_samples();
        if samples.shape() != [win] {
            return Err(Error::ShapeMismatch(format!(
                "expected [{win}] samples, got {:?}",
                samples.shape()
            )));
        }
        let windowed: Vec<f32> = samples
            .data()
            .iter()
            .zip(&self.window)
            .map(|(x, w)| x * w)
            .collect();
        let mag = self.magnitude_spectrum(&windowed);
        let mut energies = vec![0.0f32; self.cfg.mel_bins];
        for (j, row) in self.mel_rows.iter().enumerate() {
            let mut e = 0.0f32;
            for (k, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    e += w * mag[k];
                }
            }
            energies[j] = e;
        }
        Ok(energies)
    }

    /// One feature frame from exactly `window_samples` samples: window,
    /// magnitude spectrum, mel energies, `log(e + floor)`, DCT-II, first
    /// `dct_coeffs` coefficients.
    pub fn extract_frame(&self, samples: &Tensor) -> Result<Tensor> {
        let energies = self.mel_energies(samples)?;
        let m = self.cfg.mel_bins;
        let mut logmel = vec![0.0f32; m];
        for (j, &e) in energies.iter().enumerate() {
            logmel[j] = (e + self.cfg.log_floor).ln();
        }

        let mut out = vec![0.0f32; self.cfg.dct_coeffs];
        for (k, coeff) in out.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (j, &lm) in logmel.iter().enumerate() {
                acc += self.dct[k * m + j] * lm;
            }
            *coeff = acc;
        }
        Tensor::from_vec(vec![self.cfg.dct_coeffs], out)
    }

    /// Whole-clip extraction: row `t` is `extract_frame` of samples
    /// `[t*hop, t*hop + window)`.
    pub fn extract_clip(&self, samples: &Tensor) -> Result<Tensor> {
        if samples.rank() != 1 {
            return Err(Error::shape_mismatch(
                "extract_clip wants a [N] sample tensor",
            ));
        }
        let frames = frame_count(samples.numel(), &self.cfg)?;
        let win = self.cfg.window_samples();
        let hop = self.cfg.hop_samples();
        let mut out = Vec::with_capacity(frames * self.cfg.dct_coeffs);
        for t in 0..frames {
            let frame = samples.slice_time(t * hop, win)?;
            out.extend_from_slice(self.extract_frame(&frame)?.data());
        }
        Tensor::from_vec(vec![frames, self.cfg.dct_coeffs], out)
    }
}

fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f32>> {
    let n = cfg.fft_size;
    let half = n / 2 + 1;
    let m = cfg.mel_bins;
    let lo = hz_to_mel(cfg.mel_low_hz);
    let hi = hz_to_mel(cfg.mel_high_hz);
    let points: Vec<f32> = (0..m + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f32 / (m + 1) as f32))
        .collect();
    let bin_hz = cfg.sample_rate_hz as f32 / n as f32;
    let mut rows = Vec::with_capacity(m);
    for j in 0..m {
        let (left, center, right) = (points[j], points[j + 1], points[j + 2]);
        let mut row = vec![0.0f32; half];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f32 * bin_hz;
            if f > left && f < center {
                *w = (f - left) / (center - left);
            } else if f == center {
                *w = 1.0;
            } else if f > center && f < right {
                *w = (right - f) / (right - center);
            }
        }
        rows.push(row);
    }
    rows
}

/// Streaming feature extraction: raw samples arrive one hop at a time and
/// slide through a window-sized sample buffer. Emits one feature frame per
/// hop once the buffer holds a full window; those frames are bit-identical
/// to the offline [`FeatureExtractor::extract_clip`] rows.
pub struct StreamingFeatureExtractor {
    extractor: FeatureExtractor,
    /// Sample window as `[window/hop, hop]`, updated with the shared
    /// ring-buffer step.
    buffer: Tensor,
    hops_per_window: usize,
    hops_seen: usize,
}

impl StreamingFeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<StreamingFeatureExtractor> {
        cfg.validate()?;
        let win = cfg.window_samples();
        let hop = cfg.hop_samples();
        if !win.is_multiple_of(hop) {
            return Err(Error::InvalidConfig(format!(
                "streaming extraction needs window ({win}) to be a multiple of hop ({hop})"
            )));
        }
        let hops_per_window = win / hop;
        Ok(StreamingFeatureExtractor {
            extractor: FeatureExtractor::new(cfg)?,
            buffer: Tensor::zeros(&[hops_per_window, hop])?,
            hops_per_window,
            hops_seen: 0,
        })
    }

    /// Feeds `hop_samples` new samples. Returns a feature frame once a full
    /// window has been seen, `None` while still filling.
    pub fn push_hop(&mut self, hop: &Tensor) -> Result<Option<Tensor>> {
        let hop_len = self.extractor.cfg.hop_samples();
        if hop.shape() != [hop_len] {
            return Err(Error::ShapeMismatch(format!(
                "push_hop wants [{hop_len}] samples, got {:?}",
                hop.shape()
            )));
        }
        let frame = hop.reshape(vec![1, hop_len])?;
        self.buffer = ring_buffer_step(&self.buffer, &frame)?;
        self.hops_seen += 1;
        if self.hops_seen < self.hops_per_window {
            return Ok(None);
        }
        let window = self.buffer.reshape(vec![self.buffer.numel()])?;
        Ok(Some(self.extractor.extract_frame(&window)?))
    }
}

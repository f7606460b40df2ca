//! Mono waveforms, 16-bit PCM WAV I/O and the log-mel filterbank.

use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate of all training audio.
pub const TRAINING_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("audio clip is empty".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Input("audio samples must be finite and within [-1, 1]".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of motion frames covering this clip at `fps`.
    pub fn frame_count(&self, fps: f32) -> usize {
        ((self.duration_secs() * fps as f64).round() as usize).max(1)
    }

    pub fn save_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample((s * i16::MAX as f32).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }

    pub fn load_wav(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Input(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Input(format!("{}: expected 16-bit PCM", path.display())));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / i16::MAX as f32).map(|v| v.max(-1.0)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Power floor applied before the logarithm.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: TRAINING_SAMPLE_RATE,
            n_fft: 512,
            win_length: 400,
            hop_length: 160,
            n_mels: 40,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Log-mel spectrogram: frames of `n_mels` log energies.
#[derive(Clone)]
pub struct MelSpectrogram {
    config: MelConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelSpectrogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelSpectrogram").field("config", &self.config).finish()
    }
}

/// `[n_mels][n_fft/2 + 1]` triangular filters on the HTK mel scale.
pub fn mel_filterbank(config: &MelConfig) -> Vec<Vec<f64>> {
    let bins = config.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(config.f_min);
    let mel_hi = hz_to_mel(config.f_max);
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * config.sample_rate as f64 / config.n_fft as f64;
    (0..config.n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Frequency support `(lo, center, hi)` in Hz of mel filter `m`.
pub fn mel_band_edges(config: &MelConfig, m: usize) -> (f64, f64, f64) {
    let mel_lo = hz_to_mel(config.f_min);
    let mel_hi = hz_to_mel(config.f_max);
    let at = |i: usize| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64);
    (at(m), at(m + 1), at(m + 2))
}

impl MelSpectrogram {
    pub fn new(config: MelConfig) -> Result<Self> {
        if config.win_length == 0 || config.win_length > config.n_fft || config.hop_length == 0 {
            return Err(Error::Config(
                "mel analysis needs 0 < win_length <= n_fft and a positive hop".into(),
            ));
        }
        if config.n_mels == 0 || !(config.f_max > config.f_min) {
            return Err(Error::Config("mel filterbank needs n_mels > 0 and f_max > f_min".into()));
        }
        let window = (0..config.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / config.win_length as f64).cos())
            .collect();
        let filters = mel_filterbank(&config);
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self {
            config,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn n_mels(&self) -> usize {
        self.config.n_mels
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.config.win_length {
            0
        } else {
            1 + (samples - self.config.win_length) / self.config.hop_length
        }
    }

    /// Log-mel frames of the clip as a `(1, F, n_mels)` tensor.
    pub fn compute_tensor(&self, clip: &AudioClip, dtype: candle_core::DType) -> Result<candle_core::Tensor> {
        let frames = self.compute(clip)?;
        let f = frames.len();
        crate::ops::from_f64(frames.into_iter().flatten().collect(), (1, f, self.config.n_mels), dtype)
    }

    /// Log-mel frames of the clip, row-major `[frames][n_mels]`.
    pub fn compute(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        if clip.sample_rate() != self.config.sample_rate {
            return Err(Error::Input(format!(
                "clip sampled at {} Hz, frontend expects {} Hz",
                clip.sample_rate(),
                self.config.sample_rate
            )));
        }
        let samples = clip.samples();
        let frames = self.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::Input(format!(
                "clip of {} samples is shorter than one {}-sample analysis window",
                samples.len(),
                self.config.win_length
            )));
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.n_fft];
        let bins = self.config.n_fft / 2 + 1;
        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let start = f * self.config.hop_length;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.config.win_length {
                    Complex::new(samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
            out.push(
                self.filters
                    .iter()
                    .map(|filter| {
                        let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                        e.max(self.config.log_floor).ln()
                    })
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Number of log-mel frames that cover `motion_frames` frames at `fps`.
    pub fn frames_for_motion(&self, motion_frames: usize, fps: f32) -> usize {
        let per_second = self.config.sample_rate as f64 / self.config.hop_length as f64;
        ((motion_frames as f64 * per_second / fps as f64).round() as usize).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64) -> AudioClip {
        let n = (secs * TRAINING_SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / TRAINING_SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioClip::new(samples, TRAINING_SAMPLE_RATE).unwrap()
    }

    /// Naive O(N^2) DFT of a windowed frame, independent of the FFT path.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..n_fft / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn silence_is_the_log_floor() {
        let mel = MelSpectrogram::new(MelConfig::default()).unwrap();
        let clip = AudioClip::new(vec![0.0; 1600], TRAINING_SAMPLE_RATE).unwrap();
        let frames = mel.compute(&clip).unwrap();
        assert_eq!(frames.len(), 8);
        let floor = 1e-10f64.ln();
        assert!(frames.iter().flatten().all(|&v| v == floor));
    }

    #[test]
    fn too_short_clip_is_input_error() {
        let mel = MelSpectrogram::new(MelConfig::default()).unwrap();
        let clip = AudioClip::new(vec![0.1; 399], TRAINING_SAMPLE_RATE).unwrap();
        assert!(matches!(mel.compute(&clip), Err(Error::Input(_))));
    }

    #[test]
    fn sine_energy_lands_in_the_440hz_band() {
        let config = MelConfig::default();
        let mel = MelSpectrogram::new(config.clone()).unwrap();
        let clip = sine(440.0, 1.0);
        let frames = mel.compute(&clip).unwrap();

        // Oracle: direct DFT of the same windowed frames through the filterbank.
        let filters = mel_filterbank(&config);
        let window: Vec<f64> = (0..config.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / config.win_length as f64).cos())
            .collect();
        for f in [0usize, 37, frames.len() - 1] {
            let start = f * config.hop_length;
            let frame: Vec<f64> = (0..config.win_length)
                .map(|i| clip.samples()[start + i] as f64 * window[i])
                .collect();
            let power = dft_power(&frame, config.n_fft);
            for (m, filter) in filters.iter().enumerate() {
                let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                let expected = e.max(config.log_floor).ln();
                assert!((frames[f][m] - expected).abs() < 1e-6, "frame {f} band {m}");
            }
        }

        let mean: Vec<f64> = (0..config.n_mels)
            .map(|m| frames.iter().map(|r| r[m]).sum::<f64>() / frames.len() as f64)
            .collect();
        let peak = (0..config.n_mels).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        let (lo, _, hi) = mel_band_edges(&config, peak);
        assert!(lo < 440.0 && 440.0 < hi, "peak band {peak} spans {lo}..{hi}");
    }

    #[test]
    fn wav_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = sine(200.0, 0.1);
        clip.save_wav(&path).unwrap();
        let back = AudioClip::load_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), TRAINING_SAMPLE_RATE);
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(AudioClip::new(vec![1.5], 16_000).is_err());
        assert!(AudioClip::new(vec![], 16_000).is_err());
    }
}

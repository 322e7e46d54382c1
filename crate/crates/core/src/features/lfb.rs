use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioBuffer;
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LfbConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    /// Added to mel energies before the log.
    pub floor: f64,
}

impl Default for LfbConfig {
    fn default() -> Self {
        LfbConfig {
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            f_min: 0.0,
            f_max: None,
            floor: 1e-10,
        }
    }
}

impl LfbConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * f64::from(sample_rate) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * f64::from(sample_rate) / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.n_fft == 0 {
            return Err(Error::Config("n_mels and n_fft must be positive".into()));
        }
        if !(self.win_ms > 0.0 && self.hop_ms > 0.0) {
            return Err(Error::Config("window and hop must be positive".into()));
        }
        if !(self.floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// Precomputed window, FFT plan and filterbank for one sample rate.
pub struct LfbExtractor {
    cfg: LfbConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// `n_mels x (n_fft/2 + 1)` triangular weights.
    filters: Mat,
}

impl LfbExtractor {
    pub fn new(cfg: LfbConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.win_samples(sample_rate);
        let hop = cfg.hop_samples(sample_rate);
        if win == 0 || hop == 0 {
            return Err(Error::Config("window or hop rounds to zero samples".into()));
        }
        if win > cfg.n_fft {
            return Err(Error::Config(format!(
                "window of {win} samples exceeds FFT size {}",
                cfg.n_fft
            )));
        }
        // Periodic Hann.
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let filters = mel_filterbank(&cfg, sample_rate)?;
        Ok(LfbExtractor {
            cfg,
            sample_rate,
            win,
            hop,
            window,
            fft,
            filters,
        })
    }

    pub fn config(&self) -> &LfbConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.win {
            0
        } else {
            (num_samples - self.win) / self.hop + 1
        }
    }

    /// Center frequency (Hz) of each mel filter.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let (lo, hi) = band_edges_mel(&self.cfg, self.sample_rate);
        let step = (hi - lo) / (self.cfg.n_mels + 1) as f64;
        (1..=self.cfg.n_mels)
            .map(|m| mel_to_hz(lo + step * m as f64))
            .collect()
    }

    pub fn compute(&self, audio: &AudioBuffer) -> Result<Mat> {
        if audio.sample_rate_hz != self.sample_rate {
            return Err(Error::Input(format!(
                "audio is {} Hz but the extractor was built for {} Hz",
                audio.sample_rate_hz, self.sample_rate
            )));
        }
        let n = audio.samples.len();
        if n < self.win {
            return Err(Error::TooShort(format!(
                "{n} samples is shorter than one {}-sample window",
                self.win
            )));
        }
        let frames = self.num_frames(n);
        let bins = self.cfg.n_fft / 2 + 1;
        let mut out = Mat::zeros(frames, self.cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; bins];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.win {
                    Complex::new(audio.samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = out.row_mut(f);
            for (m, v) in row.iter_mut().enumerate() {
                let energy: f64 = self
                    .filters
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                *v = (energy + self.cfg.floor).ln();
            }
        }
        Ok(out)
    }
}

/// One-shot log-mel extraction.
pub fn compute_lfb(audio: &AudioBuffer, cfg: &LfbConfig) -> Result<Mat> {
    LfbExtractor::new(cfg.clone(), audio.sample_rate_hz)?.compute(audio)
}

fn band_edges_mel(cfg: &LfbConfig, sample_rate: u32) -> (f64, f64) {
    let nyquist = f64::from(sample_rate) / 2.0;
    let f_max = cfg.f_max.unwrap_or(nyquist).min(nyquist);
    (hz_to_mel(cfg.f_min), hz_to_mel(f_max))
}

fn mel_filterbank(cfg: &LfbConfig, sample_rate: u32) -> Result<Mat> {
    let (lo, hi) = band_edges_mel(cfg, sample_rate);
    if hi <= lo {
        return Err(Error::Config("mel band is empty".into()));
    }
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let bins = cfg.n_fft / 2 + 1;
    let bin_hz = f64::from(sample_rate) / cfg.n_fft as f64;
    let mut filters = Mat::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f >= left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f <= right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            filters.set(m, k, w);
        }
    }
    Ok(filters)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64) -> AudioBuffer {
        let n = (16000.0 * secs) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn one_second_gives_98_rows() {
        let rows = compute_lfb(&sine(440.0, 1.0), &LfbConfig::default()).unwrap();
        assert_eq!(rows.shape(), (98, 80));
        assert!(rows.is_finite());
    }

    #[test]
    fn silence_hits_the_floor() {
        let audio = AudioBuffer::new(vec![0.0; 4000], 16000).unwrap();
        let rows = compute_lfb(&audio, &LfbConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(rows.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_audio() {
        let audio = AudioBuffer::new(vec![0.0; 399], 16000).unwrap();
        assert!(matches!(
            compute_lfb(&audio, &LfbConfig::default()),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn mel_round_trip() {
        for hz in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn window_longer_than_fft_rejected() {
        let cfg = LfbConfig {
            win_ms: 40.0,
            ..LfbConfig::default()
        };
        assert!(matches!(LfbExtractor::new(cfg, 16000), Err(Error::Config(_))));
    }
}

//! Deterministic synthetic speech-like corpus.
//!
//! A corpus "language" is drawn from the seed: each class owns a pair of
//! resonance frequencies picked from shared grids (so classes overlap in one
//! peak with several others), and a sparse transition table decides which
//! class tends to follow which. Utterances are chains of phones, each phone a
//! burst of noise shaped by its class resonances. Per-utterance speaker
//! variation scales the resonances, and background noise is mixed in.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{extract_features, AudioBuffer, LfbConfig, LfbExtractor, Utterance};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

const SAMPLE_RATE: u32 = 16000;
/// Samples per output (label) frame at the canonical front end: 4 x 10 ms.
const LABEL_HOP: usize = 640;
/// First label frame is centered at this sample.
const LABEL_CENTER0: usize = 600;
const F1_GRID: [f64; 8] = [260.0, 340.0, 430.0, 520.0, 620.0, 720.0, 830.0, 950.0];
const F2_GRID: [f64; 8] = [
    1050.0, 1300.0, 1550.0, 1800.0, 2100.0, 2400.0, 2750.0, 3100.0,
];
const SUCCESSORS: usize = 4;
const FOLLOW_PROB: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_classes: usize,
    pub utterances_labelled: usize,
    pub utterances_unlabelled: usize,
    #[serde(default)]
    pub utterances_held_out: usize,
    /// Inclusive range of utterance lengths, in output (label) frames.
    pub frames_per_utterance: (usize, usize),
    pub seed: u64,
    /// Speaker resonance scale is drawn from `1 ± speaker_spread`.
    #[serde(default = "default_speaker_spread")]
    pub speaker_spread: f64,
    /// Background noise standard deviation range, relative to full scale.
    #[serde(default = "default_noise_level")]
    pub noise_level: (f64, f64),
    /// Width of the resonance glide across each phone boundary.
    #[serde(default = "default_coarticulation_ms")]
    pub coarticulation_ms: f64,
}

fn default_coarticulation_ms() -> f64 {
    30.0
}

fn default_speaker_spread() -> f64 {
    0.08
}

fn default_noise_level() -> (f64, f64) {
    (0.02, 0.07)
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            num_classes: 32,
            utterances_labelled: 100,
            utterances_unlabelled: 500,
            utterances_held_out: 100,
            frames_per_utterance: (20, 40),
            seed: 7,
            speaker_spread: default_speaker_spread(),
            noise_level: default_noise_level(),
            coarticulation_ms: default_coarticulation_ms(),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        if self.num_classes > F1_GRID.len() * F2_GRID.len() {
            return Err(Error::Config(format!(
                "synthetic corpus supports at most {} classes",
                F1_GRID.len() * F2_GRID.len()
            )));
        }
        let (lo, hi) = self.frames_per_utterance;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!(
                "invalid frames_per_utterance range ({lo}, {hi})"
            )));
        }
        if !(0.0..0.5).contains(&self.speaker_spread) {
            return Err(Error::Config(format!(
                "speaker_spread {} outside [0, 0.5)",
                self.speaker_spread
            )));
        }
        if !(self.coarticulation_ms >= 0.0) {
            return Err(Error::Config("coarticulation_ms must be non-negative".into()));
        }
        let (n0, n1) = self.noise_level;
        if !(0.0 <= n0 && n0 <= n1 && n1 < 1.0) {
            return Err(Error::Config(format!("invalid noise_level range ({n0}, {n1})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub labelled: Vec<Utterance>,
    pub unlabelled: Vec<Utterance>,
    pub held_out: Vec<Utterance>,
}

struct Language {
    formants: Vec<(f64, f64)>,
    successors: Vec<Vec<usize>>,
}

impl Language {
    fn generate(num_classes: usize, rng: &mut Rng) -> Self {
        let mut combos: Vec<(f64, f64)> = F1_GRID
            .iter()
            .flat_map(|&a| F2_GRID.iter().map(move |&b| (a, b)))
            .collect();
        combos.shuffle(rng);
        combos.truncate(num_classes);
        let successors = (0..num_classes)
            .map(|c| {
                let mut others: Vec<usize> = (0..num_classes).filter(|&o| o != c).collect();
                others.shuffle(rng);
                others.truncate(SUCCESSORS.min(num_classes - 1));
                others
            })
            .collect();
        Language {
            formants: combos,
            successors,
        }
    }

    fn next_class(&self, current: usize, rng: &mut Rng) -> usize {
        if rng.gen::<f64>() < FOLLOW_PROB {
            *self.successors[current].choose(rng).unwrap()
        } else {
            rng.gen_range(0..self.formants.len())
        }
    }
}

/// Generates labelled, unlabelled and held-out utterances from `spec`.
///
/// Unlabelled utterances are produced exactly like labelled ones and then
/// stripped of their labels. Output is a pure function of `spec`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let language = Language::generate(spec.num_classes, &mut rng::stream(spec.seed, Stream::Corpus, 0));
    let extractor = LfbExtractor::new(LfbConfig::default(), SAMPLE_RATE)?;
    let make = |split: u64, prefix: &str, count: usize, keep_labels: bool| -> Result<Vec<Utterance>> {
        (0..count)
            .map(|i| {
                let mut rng = rng::substream(spec.seed, Stream::Corpus, i as u64 + 1, split);
                let (audio, labels) = synthesize_utterance(&language, spec, &mut rng);
                let features = extract_features(&audio, &extractor)?;
                Ok(Utterance {
                    id: format!("{prefix}{i:05}"),
                    features,
                    labels: keep_labels.then_some(labels),
                })
            })
            .collect()
    };
    Ok(SyntheticCorpus {
        labelled: make(1, "L", spec.utterances_labelled, true)?,
        unlabelled: make(2, "U", spec.utterances_unlabelled, false)?,
        held_out: make(3, "H", spec.utterances_held_out, true)?,
    })
}

fn synthesize_utterance(
    language: &Language,
    spec: &SyntheticCorpusSpec,
    rng: &mut Rng,
) -> (AudioBuffer, Vec<usize>) {
    let frames = rng.gen_range(spec.frames_per_utterance.0..=spec.frames_per_utterance.1);
    // frames output frames need 2*frames + 2 model rows = 4*frames + 4 log-mel rows.
    let num_samples = (4 * frames + 3) * 160 + 400;

    let mut labels = Vec::with_capacity(frames);
    let mut class = rng.gen_range(0..language.formants.len());
    while labels.len() < frames {
        let dur = rng.gen_range(2..=5);
        for _ in 0..dur {
            if labels.len() < frames {
                labels.push(class);
            }
        }
        class = language.next_class(class, rng);
    }

    let speaker_scale = 1.0 + spec.speaker_spread * rng.gen_range(-1.0..=1.0);
    let gain = rng.gen_range(0.25..0.6);
    let noise_level = spec.noise_level.0 + (spec.noise_level.1 - spec.noise_level.0) * rng.gen::<f64>();

    // Phone segments in samples. Boundaries sit halfway between neighbouring
    // label-frame centers.
    let mut segments = Vec::new();
    let mut start = 0;
    let mut t = 0;
    while t < frames {
        let c = labels[t];
        let mut end_frame = t;
        while end_frame < frames && labels[end_frame] == c {
            end_frame += 1;
        }
        let end = if end_frame == frames {
            num_samples
        } else {
            LABEL_CENTER0 + end_frame * LABEL_HOP - LABEL_HOP / 2
        };
        let phone_gain = gain * rng.gen_range(0.7..1.3);
        segments.push((start, end, c, phone_gain));
        start = end;
        t = end_frame;
    }

    // Per-sample resonance and gain tracks: flat inside a phone, gliding
    // linearly over `spec.coarticulation_ms` centred on each boundary.
    let half = (spec.coarticulation_ms * f64::from(SAMPLE_RATE) / 2000.0) as usize;
    let mut f1 = vec![0.0; num_samples];
    let mut f2 = vec![0.0; num_samples];
    let mut amp = vec![0.0; num_samples];
    for &(s, e, c, g) in &segments {
        let (a, b) = language.formants[c];
        for i in s..e {
            f1[i] = a * speaker_scale;
            f2[i] = b * speaker_scale;
            amp[i] = g;
        }
    }
    if half > 0 {
        let (r1, r2, ra) = (f1.clone(), f2.clone(), amp.clone());
        for w in segments.windows(2) {
            let boundary = w[0].1;
            let lo = boundary.saturating_sub(half).max(w[0].0);
            let hi = (boundary + half).min(w[1].1);
            let span = (hi - lo).max(1) as f64;
            for i in lo..hi {
                let x = (i - lo) as f64 / span;
                f1[i] = (1.0 - x) * r1[lo] + x * r1[hi - 1];
                f2[i] = (1.0 - x) * r2[lo] + x * r2[hi - 1];
                amp[i] = (1.0 - x) * ra[lo] + x * ra[hi - 1];
            }
        }
    }

    let voiced = resonant_noise(&f1, &f2, rng);
    let samples = voiced
        .iter()
        .zip(&amp)
        .map(|(v, a)| {
            let n: f64 = StandardNormal.sample(rng);
            (v * a + noise_level * n).clamp(-1.0, 1.0)
        })
        .collect();
    (
        AudioBuffer {
            samples,
            sample_rate_hz: SAMPLE_RATE,
        },
        labels,
    )
}

/// Expected RMS of a two-pole resonator driven by unit white noise.
fn resonator_rms(a1: f64, a2: f64) -> f64 {
    // Stationary variance of y = x + a1 y[-1] + a2 y[-2].
    let var = (1.0 - a2) / ((1.0 + a2) * ((1.0 - a2).powi(2) - a1 * a1));
    var.sqrt()
}

/// White noise through two parallel two-pole resonators with time-varying
/// center frequencies, each branch scaled to unit expected RMS.
fn resonant_noise(f1: &[f64], f2: &[f64], rng: &mut Rng) -> Vec<f64> {
    let fs = f64::from(SAMPLE_RATE);
    let coeffs = |f: f64, bw: f64| {
        let r = (-std::f64::consts::PI * bw / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * f / fs;
        (2.0 * r * theta.cos(), -r * r)
    };
    let (mut y1, mut y2, mut z1, mut z2) = (0.0, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(f1.len());
    for (&fa, &fb) in f1.iter().zip(f2) {
        let (a1, a2) = coeffs(fa, 90.0);
        let (b1, b2) = coeffs(fb, 140.0);
        let x: f64 = StandardNormal.sample(rng);
        let y = x + a1 * y1 + a2 * y2;
        let z = x + b1 * z1 + b2 * z2;
        y2 = y1;
        y1 = y;
        z2 = z1;
        z1 = z;
        out.push((y / resonator_rms(a1, a2) + 0.7 * z / resonator_rms(b1, b2)) / 1.22);
    }
    out
}

use std::ops::Range;

use super::AudioBuffer;

/// Half-open sample range.
pub type Segment = Range<usize>;

/// Energy-based speech detector.
///
/// Audio is cut into non-overlapping 10 ms frames. A frame is active when its
/// RMS level is within `threshold_db` (a negative number) of the loudest
/// frame. Runs of active frames form segments; segments shorter than
/// `min_segment_ms` are discarded.
pub fn energy_vad(audio: &AudioBuffer, threshold_db: f64, min_segment_ms: f64) -> Vec<Segment> {
    let frame = (audio.sample_rate_hz as usize / 100).max(1);
    let n = audio.samples.len();
    let rms: Vec<f64> = audio
        .samples
        .chunks(frame)
        .map(|c| (c.iter().map(|s| s * s).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let peak = rms.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let floor = peak * 10f64.powf(threshold_db / 20.0);
    let min_len = (min_segment_ms * f64::from(audio.sample_rate_hz) / 1000.0).ceil() as usize;

    let mut segments = Vec::new();
    let mut start = None;
    for (i, &r) in rms.iter().enumerate() {
        match (r > 0.0 && r >= floor, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                segments.push(s * frame..(i * frame).min(n));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segments.push(s * frame..n);
    }
    segments.retain(|seg| seg.len() >= min_len);
    segments
}

/// Concatenates the samples inside `segments`.
pub fn concat_segments(audio: &AudioBuffer, segments: &[Segment]) -> AudioBuffer {
    let samples = segments
        .iter()
        .flat_map(|s| audio.samples[s.clone()].iter().copied())
        .collect();
    AudioBuffer {
        samples,
        sample_rate_hz: audio.sample_rate_hz,
    }
}

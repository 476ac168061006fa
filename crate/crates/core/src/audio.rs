//! 16 kHz mono PCM waveforms: WAV I/O, majority/minority mixing and the input cap.

use std::path::Path;

use thiserror::Error;

use crate::augment::{MixMode, MixPlan};
use crate::features::CAP_SECONDS;

pub const SAMPLE_RATE_HZ: u32 = 16_000;

const I16_SCALE: f32 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: unsupported format: {mismatch}")]
    Format { path: String, mismatch: String },
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples, sample_rate_hz: SAMPLE_RATE_HZ }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// The int16 payload `write_wav` stores.
    pub fn to_pcm16(&self) -> Vec<i16> {
        self.samples
            .iter()
            .map(|x| (x * I16_SCALE).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16)
            .collect()
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let shown = || path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Io { path: shown(), message: io.to_string() },
        other => AudioError::Format { path: shown(), mismatch: other.to_string() },
    })?;
    let spec = reader.spec();
    let mismatch = if spec.channels != 1 {
        Some(format!("channels={}", spec.channels))
    } else if spec.sample_rate != SAMPLE_RATE_HZ {
        Some(format!("sample_rate={}", spec.sample_rate))
    } else if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        Some(format!("bits_per_sample={} format={:?}", spec.bits_per_sample, spec.sample_format))
    } else {
        None
    };
    if let Some(mismatch) = mismatch {
        return Err(AudioError::Format { path: shown(), mismatch });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / I16_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AudioError::Io { path: shown(), message: e.to_string() })?;
    Ok(Waveform::new(samples))
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io = |e: hound::Error| AudioError::Io { path: path.display().to_string(), message: e.to_string() };
    if w.sample_rate_hz != SAMPLE_RATE_HZ {
        return Err(AudioError::Format {
            path: path.display().to_string(),
            mismatch: format!("sample_rate={}", w.sample_rate_hz),
        });
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(hound::Error::IoError(e)))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for s in w.to_pcm16() {
        writer.write_sample(s).map_err(io)?;
    }
    writer.finalize().map_err(io)
}

/// Number of samples a plan's `t` spans at `rate`.
pub fn gap_len(t_seconds: f64, rate: f64) -> usize {
    (t_seconds * rate).floor().max(0.0) as usize
}

/// Joins `maj` and `min` per `plan`: `min` leads when `order_swapped`.
///
/// Silence mode puts `⌊t·rate⌋` zeros between the two signals. Overlap mode
/// sums the last `⌊t·rate⌋` samples of the leading signal with the first
/// samples of the trailing one at 0.5 gain each; the overlap never exceeds the
/// shorter signal.
pub fn mix_waveforms(maj: &Waveform, min: &Waveform, plan: &MixPlan) -> Result<Waveform, AudioError> {
    if maj.sample_rate_hz != min.sample_rate_hz {
        return Err(AudioError::RateMismatch(maj.sample_rate_hz, min.sample_rate_hz));
    }
    let (a, b) = if plan.order_swapped { (min, maj) } else { (maj, min) };
    let gap = gap_len(plan.t_seconds, a.sample_rate_hz as f64);
    let samples = match plan.mode {
        MixMode::Silence => {
            let mut out = Vec::with_capacity(a.len() + gap + b.len());
            out.extend_from_slice(&a.samples);
            out.resize(a.len() + gap, 0.0);
            out.extend_from_slice(&b.samples);
            out
        }
        MixMode::Overlap => {
            let gap = gap.min(a.len()).min(b.len());
            let start = a.len() - gap;
            let mut out = Vec::with_capacity(a.len() + b.len() - gap);
            out.extend_from_slice(&a.samples[..start]);
            out.extend(a.samples[start..].iter().zip(&b.samples[..gap]).map(|(x, y)| 0.5 * x + 0.5 * y));
            out.extend_from_slice(&b.samples[gap..]);
            out
        }
    };
    Ok(Waveform { samples, sample_rate_hz: a.sample_rate_hz })
}

/// Keeps the first `cap_seconds` of audio.
pub fn truncate_to_cap(mut w: Waveform, cap_seconds: f64) -> Waveform {
    let cap = (cap_seconds * w.sample_rate_hz as f64).floor() as usize;
    w.samples.truncate(cap);
    w
}

/// [`truncate_to_cap`] at the model's input limit.
pub fn truncate_to_default_cap(w: Waveform) -> Waveform {
    truncate_to_cap(w, CAP_SECONDS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(mode: MixMode, t: f64, swapped: bool) -> MixPlan {
        MixPlan {
            first: "a".into(),
            second: "b".into(),
            mode,
            t_seconds: t,
            order_swapped: swapped,
        }
    }

    #[test]
    fn silence_wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_wav(&p, &Waveform::new(vec![0.0; 16_000])).unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.len(), 16_000);
        assert!(w.samples.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn pcm_payload_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let w = Waveform::new((0..4000).map(|i| ((i as f32) * 0.37).sin() * 0.99).collect());
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.to_pcm16(), w.to_pcm16());
        let q = dir.path().join("r2.wav");
        write_wav(&q, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        // Extremes survive as well.
        let ext = Waveform::new(vec![-1.0, 1.0, -0.0]);
        write_wav(&q, &ext).unwrap();
        assert_eq!(read_wav(&q).unwrap().to_pcm16(), vec![-32768, 32767, 0]);
    }

    #[test]
    fn rejects_stereo_and_wrong_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut wtr = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..10 {
            wtr.write_sample(0i16).unwrap();
        }
        wtr.finalize().unwrap();
        let err = read_wav(&p).unwrap_err();
        assert!(err.to_string().contains("channels=2"), "{err}");

        let spec = hound::WavSpec { channels: 1, sample_rate: 44_100, ..spec };
        let mut wtr = hound::WavWriter::create(&p, spec).unwrap();
        wtr.write_sample(0i16).unwrap();
        wtr.finalize().unwrap();
        assert!(read_wav(&p).unwrap_err().to_string().contains("sample_rate=44100"));
        assert!(matches!(read_wav(dir.path().join("missing.wav")), Err(AudioError::Io { .. })));
    }

    #[test]
    fn concatenation_and_overlap() {
        let a = Waveform::new(vec![0.1; 100]);
        let b = Waveform::new(vec![0.2; 50]);
        let m = mix_waveforms(&a, &b, &plan(MixMode::Silence, 0.0, false)).unwrap();
        assert_eq!(m.len(), 150);
        assert_eq!(&m.samples[..100], &a.samples[..]);

        let m = mix_waveforms(&a, &b, &plan(MixMode::Silence, 0.001, true)).unwrap();
        assert_eq!(m.len(), 50 + 16 + 100);
        assert!(m.samples[50..66].iter().all(|x| *x == 0.0));
        assert_eq!(m.samples[0], 0.2);

        let c = Waveform::new(vec![0.7; 64_000]);
        let m = mix_waveforms(&c, &c, &plan(MixMode::Overlap, 1.0, false)).unwrap();
        assert_eq!(m.len(), 2 * 64_000 - 16_000);
        assert!(m.samples.iter().all(|x| *x == 0.7));

        let other = Waveform { samples: vec![0.0], sample_rate_hz: 8_000 };
        assert!(matches!(mix_waveforms(&a, &other, &plan(MixMode::Silence, 0.0, false)), Err(AudioError::RateMismatch(..))));
    }

    #[test]
    fn cap_keeps_the_head() {
        let ten = Waveform::new(vec![0.5; 160_000]);
        assert_eq!(truncate_to_default_cap(ten.clone()), ten);
        let twenty = Waveform::new((0..320_000).map(|i| (i % 7) as f32 / 10.0).collect());
        let capped = truncate_to_default_cap(twenty.clone());
        assert_eq!(capped.len(), 240_000);
        assert_eq!(&capped.samples[..], &twenty.samples[..240_000]);
        let fifteen = Waveform::new(vec![0.1; 240_000]);
        assert_eq!(truncate_to_default_cap(fifteen.clone()), fifteen);
    }
}

//! Mono 16-bit PCM WAV ingestion and the minimum-duration padding applied
//! before feature extraction.

use std::path::Path;

use thiserror::Error;

/// Sample rate used by every pipeline-internal buffer.
pub const SAMPLE_RATE: u32 = 16_000;

/// Utterances shorter than this are zero-padded before featurization.
pub const DEFAULT_MIN_PAD_SECONDS: f64 = 0.3;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: not a RIFF/WAVE file ({reason})")]
    NotWav { path: String, reason: String },
    #[error("{path}: unsupported encoding ({detail}); expected 16-bit integer PCM")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("{path}: {channels} channels; only mono audio is supported")]
    MultiChannel { path: String, channels: u16 },
    #[error(
        "{path}: sample rate {rate} Hz; convert to {SAMPLE_RATE} Hz mono first, \
         e.g. `ffmpeg -i in.wav -ac 1 -ar 16000 -acodec pcm_s16le out.wav`"
    )]
    BadSampleRate { path: String, rate: u32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono PCM audio with real-valued samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    /// A buffer of `n` zero samples.
    pub fn silence(n: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; n], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Quantizes one sample to int16, clipping out-of-range values.
pub fn quantize(x: f64) -> i16 {
    let scaled = (x * 32768.0).round();
    scaled.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Reads a 16 kHz mono 16-bit PCM WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: name.clone(),
            source,
        },
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: name.clone(),
            detail: "unsupported WAVE format".into(),
        },
        other => AudioError::NotWav {
            path: name.clone(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding {
            path: name,
            detail: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    if spec.channels != 1 {
        return Err(AudioError::MultiChannel {
            path: name,
            channels: spec.channels,
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::BadSampleRate {
            path: name,
            rate: spec.sample_rate,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AudioError::NotWav {
            path: name.clone(),
            reason: e.to_string(),
        })?;
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

/// Writes a mono 16-bit PCM WAV file; samples outside `[-1, 1]` are clipped.
pub fn write_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io_err = |e: hound::Error| {
        let source = match e {
            hound::Error::IoError(err) => err,
            other => std::io::Error::other(other.to_string()),
        };
        AudioError::Io {
            path: path.display().to_string(),
            source,
        }
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &buf.samples {
        writer.write_sample(quantize(s)).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

/// Appends zeros so the buffer lasts at least `min_seconds`.
///
/// Buffers already at or above the minimum are returned unchanged.
pub fn pad_min_duration(buf: &AudioBuffer, min_seconds: f64) -> AudioBuffer {
    let target = (min_seconds * buf.sample_rate as f64).ceil() as usize;
    let mut out = buf.clone();
    if out.samples.len() < target {
        out.samples.resize(target, 0.0);
    }
    out
}

//! Manifests, binary feature files, example loading and the synthetic tone
//! corpus used for desk-scale training runs.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError, SAMPLE_RATE};
use crate::features::{self, FeatureError, SpecKind, Spectrogram};
use crate::phonemize::{self, Lexicon, PhonemeError, PhonemeInventory};
use crate::seed;

const FEATURE_MAGIC: &[u8; 4] = b"PHF1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("malformed feature file {path}: {msg}")]
    BadFeatureFile { path: String, msg: String },
    #[error("{path}: {source}")]
    Audio {
        path: String,
        #[source]
        source: AudioError,
    },
    #[error("{path}: {source}")]
    Features {
        path: String,
        #[source]
        source: FeatureError,
    },
    #[error("{path}: {source}")]
    Phoneme {
        path: String,
        #[source]
        source: PhonemeError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub audio_path: String,
    pub transcript: String,
}

/// `audio_path<TAB>transcript` rows without a header. Paths are relative to
/// `base_dir`, normally the manifest's own directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            rows: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn parse(
        text: &str,
        base_dir: impl Into<PathBuf>,
        origin: &str,
    ) -> Result<Self, DataError> {
        let mut m = Self::new(base_dir);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| DataError::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (path, transcript) = line.split_once('\t').unwrap_or((line, ""));
            let p = Path::new(path);
            if path.is_empty()
                || p.is_absolute()
                || p.components().any(|c| matches!(c, Component::ParentDir))
            {
                return Err(err(format!(
                    "audio path `{path}` must be relative and stay under the manifest directory"
                )));
            }
            if transcript.contains('\t') {
                return Err(err("expected two TAB-separated columns".into()));
            }
            m.rows.push(ManifestRow {
                audio_path: path.to_string(),
                transcript: transcript.to_string(),
            });
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("{}\t{}\n", r.audio_path, r.transcript))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(io_err(path))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.audio_path)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub const FEATURE_EXT: &str = "feat";

/// Serializes a spectrogram: `PHF1`, u32 frames, u32 bins, u32 kind code,
/// f64 hop seconds, then row-major f32 values, all little-endian.
pub fn feature_bytes(spec: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * spec.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_bins as u32).to_le_bytes());
    out.extend_from_slice(&spec.kind.code().to_le_bytes());
    out.extend_from_slice(&spec.frame_hop_s.to_le_bytes());
    for &v in &spec.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn parse_feature_bytes(bytes: &[u8], origin: &str) -> Result<Spectrogram, DataError> {
    let bad = |msg: &str| DataError::BadFeatureFile {
        path: origin.to_string(),
        msg: msg.to_string(),
    };
    if bytes.len() < 24 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing PHF1 header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (t, f) = (u32_at(4) as usize, u32_at(8) as usize);
    let kind = SpecKind::from_code(u32_at(12)).ok_or_else(|| bad("unknown kind code"))?;
    let hop = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let payload = &bytes[24..];
    if payload.len() != t * f * 4 {
        return Err(bad(&format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            t * f * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Spectrogram::new(data, t, f, hop, kind))
}

pub fn write_features(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, feature_bytes(spec)).map_err(io_err(path))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Spectrogram, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_feature_bytes(&bytes, &path.display().to_string())
}

/// Reads a WAV, pads it to the minimum duration and computes log-mel features.
pub fn featurize_file(path: &Path, min_pad_seconds: f64) -> Result<Spectrogram, DataError> {
    let p = path.display().to_string();
    let buf = audio::read_wav(path).map_err(|source| DataError::Audio {
        path: p.clone(),
        source,
    })?;
    let buf = audio::pad_min_duration(&buf, min_pad_seconds);
    features::mel_spectrogram(&buf).map_err(|source| DataError::Features { path: p, source })
}

/// Reads a `.feat` file as is; anything else is featurized as a WAV.
pub fn load_features(path: &Path, min_pad_seconds: f64) -> Result<Spectrogram, DataError> {
    if path.extension().is_some_and(|e| e == FEATURE_EXT) {
        read_features(path)
    } else {
        featurize_file(path, min_pad_seconds)
    }
}

/// How manifest transcripts map to label sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TranscriptFormat {
    /// Space-separated inventory labels, `|` for word boundaries.
    Phonemes,
    /// Normalized words looked up in a lexicon; word boundaries are inserted
    /// when the inventory has a boundary label.
    Words {
        language: crate::Language,
        #[serde(default)]
        lexicon: Option<PathBuf>,
    },
}

/// One training or evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Spectrogram,
    pub target: Vec<u32>,
}

pub fn encode_row(
    transcript: &str,
    format: &TranscriptFormat,
    inv: &PhonemeInventory,
    lexicon: Option<&Lexicon>,
) -> Result<Vec<u32>, PhonemeError> {
    match format {
        TranscriptFormat::Phonemes => Ok(phonemize::encode_transcript(transcript, inv)?.ids),
        TranscriptFormat::Words { .. } => {
            let lex = lexicon.expect("word transcripts need a lexicon");
            let words = phonemize::phonemize_sentence(transcript, lex)?;
            Ok(phonemize::encode(&words, inv, inv.space_index().is_some())?.ids)
        }
    }
}

/// Loads every manifest row into an [`Example`], in parallel and in order.
pub fn load_examples(
    manifest: &Manifest,
    format: &TranscriptFormat,
    inv: &PhonemeInventory,
    min_pad_seconds: f64,
) -> Result<Vec<Example>, DataError> {
    let lexicon = match format {
        TranscriptFormat::Words { language, lexicon } => Some(match lexicon {
            Some(p) => Lexicon::load(p, *language).map_err(|source| DataError::Phoneme {
                path: p.display().to_string(),
                source,
            })?,
            None => Lexicon::seed(*language),
        }),
        TranscriptFormat::Phonemes => None,
    };
    manifest
        .rows
        .par_iter()
        .map(|row| {
            let path = manifest.resolve(row);
            let features = load_features(&path, min_pad_seconds)?;
            let target =
                encode_row(&row.transcript, format, inv, lexicon.as_ref()).map_err(|source| {
                    DataError::Phoneme {
                        path: path.display().to_string(),
                        source,
                    }
                })?;
            Ok(Example {
                id: row.audio_path.clone(),
                features,
                target,
            })
        })
        .collect()
}

/// Seeded split of `0..n` into (train, val) index lists, each sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed_value: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_value, "split", 0));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

pub const SYNTH_PHONEME_S: f64 = 0.150;
pub const SYNTH_GAP_S: f64 = 0.020;
const SYNTH_AMPLITUDE: f64 = 0.5;
const SYNTH_NOISE: f64 = 0.003;
const SYNTH_RAMP_S: f64 = 0.010;
const SYNTH_F_LO: f64 = 300.0;
const SYNTH_F_HI: f64 = 3400.0;

/// Tone frequency for phoneme `index` of `n`, evenly spaced on the mel scale.
pub fn tone_frequency(index: usize, n: usize) -> f64 {
    let (lo, hi) = (
        features::hz_to_mel(SYNTH_F_LO),
        features::hz_to_mel(SYNTH_F_HI),
    );
    let step = if n > 1 {
        (hi - lo) / (n - 1) as f64
    } else {
        0.0
    };
    features::mel_to_hz(lo + step * index as f64)
}

/// A pure tone of `seconds` at `freq` with raised-cosine edges.
pub fn tone(freq: f64, seconds: f64, sample_rate: u32) -> Vec<f64> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let ramp = ((SYNTH_RAMP_S * sample_rate as f64) as usize)
        .min(n / 2)
        .max(1);
    (0..n)
        .map(|i| {
            let edge = i.min(n - 1 - i);
            let env = if edge < ramp {
                0.5 * (1.0 - (PI * edge as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            SYNTH_AMPLITUDE * env * (2.0 * PI * freq * i as f64 / sample_rate as f64).sin()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub phonemes: Vec<String>,
    pub audio: AudioBuffer,
}

/// Generates `n_utts` utterances of 2–6 phonemes drawn from `vocab`, each
/// phoneme a 150 ms tone at its own frequency followed by 20 ms of silence,
/// over faint white noise. Consecutive phonemes always differ.
pub fn synthgen<S: AsRef<str> + Sync>(
    n_utts: usize,
    vocab: &[S],
    seed_value: u64,
) -> Vec<SynthUtterance> {
    assert!(vocab.len() >= 2, "synthgen needs at least two phonemes");
    let tones: Vec<Vec<f64>> = (0..vocab.len())
        .map(|i| tone(tone_frequency(i, vocab.len()), SYNTH_PHONEME_S, SAMPLE_RATE))
        .collect();
    let gap = (SYNTH_GAP_S * SAMPLE_RATE as f64).round() as usize;
    (0..n_utts)
        .into_par_iter()
        .map(|u| {
            let mut rng = seed::rng(seed_value, "synthgen", u as u64);
            let len = rng.random_range(2..=6);
            let mut ids: Vec<usize> = Vec::with_capacity(len);
            while ids.len() < len {
                let k = rng.random_range(0..vocab.len());
                if ids.last() != Some(&k) {
                    ids.push(k);
                }
            }
            let mut samples = Vec::new();
            for &k in &ids {
                samples.extend_from_slice(&tones[k]);
                samples.extend(std::iter::repeat_n(0.0, gap));
            }
            for s in samples.iter_mut() {
                *s += SYNTH_NOISE * rng.random_range(-1.0..1.0);
            }
            SynthUtterance {
                phonemes: ids.iter().map(|&k| vocab[k].as_ref().to_string()).collect(),
                audio: AudioBuffer::new(samples, SAMPLE_RATE),
            }
        })
        .collect()
}

/// Writes `uttNNNNN.wav` files and `manifest.tsv` (phoneme transcripts) into `dir`.
pub fn write_synth_corpus(dir: &Path, utts: &[SynthUtterance]) -> Result<Manifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Manifest::new(dir);
    for (i, u) in utts.iter().enumerate() {
        let name = format!("utt{i:05}.wav");
        let path = dir.join(&name);
        audio::write_wav(&u.audio, &path).map_err(|source| DataError::Audio {
            path: path.display().to_string(),
            source,
        })?;
        manifest.rows.push(ManifestRow {
            audio_path: name,
            transcript: u.phonemes.join(" "),
        });
    }
    let mpath = dir.join("manifest.tsv");
    let mut f = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    f.write_all(manifest.to_tsv().as_bytes())
        .map_err(io_err(&mpath))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_path_rules() {
        let text = "a/x.wav\thola mundo\nb.wav\t\n\n";
        let m = Manifest::parse(text, "/data", "m.tsv").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.resolve(&m.rows[0]), PathBuf::from("/data/a/x.wav"));
        assert_eq!(m.to_tsv(), "a/x.wav\thola mundo\nb.wav\t\n");
        assert!(Manifest::parse("../x.wav\thi\n", "/d", "m").is_err());
        assert!(Manifest::parse("/abs.wav\thi\n", "/d", "m").is_err());
        assert!(Manifest::parse("x.wav\ta\tb\n", "/d", "m").is_err());
    }

    #[test]
    fn feature_file_round_trip_is_bitwise() {
        let data: Vec<f64> = (0..35).map(|i| ((i as f32) * 0.37 - 4.0) as f64).collect();
        let s = Spectrogram::new(data, 5, 7, 0.02, SpecKind::LogMel);
        let bytes = feature_bytes(&s);
        assert_eq!(bytes.len(), 24 + 35 * 4);
        let back = parse_feature_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, s);
        assert_eq!(feature_bytes(&back), bytes);
        assert!(parse_feature_bytes(&bytes[..30], "mem").is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let (tr, va) = split_indices(200, 0.2, 7);
        assert_eq!((tr.len(), va.len()), (160, 40));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_indices(200, 0.2, 7), (tr, va));
    }

    #[test]
    fn synthgen_contract() {
        let vocab = ["a", "b", "c", "d"];
        let utts = synthgen(50, &vocab, 7);
        assert_eq!(utts, synthgen(50, &vocab, 7));
        for u in &utts {
            assert!((2..=6).contains(&u.phonemes.len()));
            assert!(u.phonemes.windows(2).all(|w| w[0] != w[1]));
            let expect = u.phonemes.len() * (2400 + 320);
            assert_eq!(u.audio.len(), expect);
            assert!(u.audio.peak() <= 1.0);
        }
    }

    /// Direct DFT magnitude at `f` Hz over the given samples.
    fn dft_mag(x: &[f64], f: f64) -> f64 {
        let w = 2.0 * PI * f / SAMPLE_RATE as f64;
        let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &s)| {
            (re + s * (w * i as f64).cos(), im - s * (w * i as f64).sin())
        });
        (re * re + im * im).sqrt()
    }

    #[test]
    fn each_tone_peaks_at_its_frequency() {
        let n = 8;
        for k in 0..n {
            let f = tone_frequency(k, n);
            let x = tone(f, SYNTH_PHONEME_S, SAMPLE_RATE);
            let peak = (0..=400)
                .map(|i| 100.0 + 10.0 * i as f64)
                .max_by(|a, b| dft_mag(&x, *a).total_cmp(&dft_mag(&x, *b)))
                .unwrap();
            assert!((peak - f).abs() <= 10.0, "phoneme {k}: {peak} vs {f}");
        }
    }
}

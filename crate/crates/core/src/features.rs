//! Short-time power spectra, mel filterbanks, log-mel spectrograms and MFCCs.
//!
//! Front-end parameters for the recognizer: 40 ms Hann window, 20 ms hop,
//! 1024-point FFT (window zero-padded), no centre padding, 128 HTK-scale mel
//! filters spanning 0 Hz to Nyquist, natural log with a `1e-10` floor.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;

pub const WINDOW_S: f64 = 0.040;
pub const HOP_S: f64 = 0.020;
pub const N_FFT: usize = 1024;
pub const N_MELS: usize = 128;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("signal has {samples} samples, fewer than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("window of {window} samples exceeds FFT size {n_fft}")]
    WindowTooLong { window: usize, n_fft: usize },
    #[error("hop must be positive")]
    BadHop,
    #[error("invalid filterbank range: {0}")]
    BadRange(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Power,
    Mel,
    LogMel,
    Mfcc,
    /// Per-frame log-probabilities emitted by the recognizer.
    LogProb,
}

impl SpecKind {
    pub fn code(self) -> u32 {
        match self {
            SpecKind::Power => 0,
            SpecKind::Mel => 1,
            SpecKind::LogMel => 2,
            SpecKind::Mfcc => 3,
            SpecKind::LogProb => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => SpecKind::Power,
            1 => SpecKind::Mel,
            2 => SpecKind::LogMel,
            3 => SpecKind::Mfcc,
            4 => SpecKind::LogProb,
            _ => return None,
        })
    }
}

/// Time × bin real matrix, stored row-major (one row per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub frame_hop_s: f64,
    pub kind: SpecKind,
}

impl Spectrogram {
    pub fn new(
        data: Vec<f64>,
        n_frames: usize,
        n_bins: usize,
        frame_hop_s: f64,
        kind: SpecKind,
    ) -> Self {
        assert_eq!(data.len(), n_frames * n_bins, "spectrogram shape mismatch");
        Self {
            data,
            n_frames,
            n_bins,
            frame_hop_s,
            kind,
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.n_bins + f]
    }

    /// Returns a copy with the frame order reversed.
    pub fn time_reversed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.n_frames).rev() {
            data.extend_from_slice(self.frame(t));
        }
        Self { data, ..*self }
    }
}

/// Periodic Hann window, matching the common framework default.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> usize {
    if n_samples < window {
        0
    } else {
        1 + (n_samples - window) / hop
    }
}

/// One-sided power spectrogram `|DFT|²` over bins `0..=n_fft/2`.
pub fn stft_power(
    buf: &AudioBuffer,
    win_s: f64,
    hop_s: f64,
    n_fft: usize,
) -> Result<Spectrogram, FeatureError> {
    let fs = buf.sample_rate as f64;
    let window = (win_s * fs).round() as usize;
    let hop = (hop_s * fs).round() as usize;
    if hop == 0 {
        return Err(FeatureError::BadHop);
    }
    if window > n_fft {
        return Err(FeatureError::WindowTooLong { window, n_fft });
    }
    if buf.len() < window || window == 0 {
        return Err(FeatureError::TooShort {
            samples: buf.len(),
            window,
        });
    }
    let n_frames = frame_count(buf.len(), window, hop);
    let n_bins = n_fft / 2 + 1;
    let win = hann_window(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut frame = vec![Complex::new(0.0, 0.0); n_fft];
    let mut data = Vec::with_capacity(n_frames * n_bins);
    for t in 0..n_frames {
        let start = t * hop;
        frame.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (x, w)) in buf.samples[start..start + window]
            .iter()
            .zip(&win)
            .enumerate()
        {
            frame[i] = Complex::new(x * w, 0.0);
        }
        fft.process_with_scratch(&mut frame, &mut scratch);
        data.extend(frame[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(Spectrogram::new(
        data,
        n_frames,
        n_bins,
        hop as f64 / fs,
        SpecKind::Power,
    ))
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters, one row per filter over the one-sided FFT bins.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl MelFilterbank {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.n_bins..(r + 1) * self.n_bins]
    }

    /// Applies the filterbank to every frame of a power spectrogram.
    pub fn apply(&self, power: &Spectrogram) -> Spectrogram {
        assert_eq!(
            power.n_bins, self.n_bins,
            "filterbank/spectrum size mismatch"
        );
        let mut data = Vec::with_capacity(power.n_frames * self.n_mels);
        for t in 0..power.n_frames {
            let frame = power.frame(t);
            for r in 0..self.n_mels {
                data.push(self.row(r).iter().zip(frame).map(|(w, p)| w * p).sum());
            }
        }
        Spectrogram::new(
            data,
            power.n_frames,
            self.n_mels,
            power.frame_hop_s,
            SpecKind::Mel,
        )
    }
}

/// Builds `n_mels` triangles whose centres are equally spaced on the HTK mel
/// axis between `f_min` and `f_max`; filter `r` rises from centre `r-1` to
/// centre `r` and falls to centre `r+1` (with the band edges as outer centres).
pub fn make_mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    fs: f64,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::BadRange("n_mels must be at least 1".into()));
    }
    if !(0.0 <= f_min && f_min < f_max && f_max <= fs / 2.0) {
        return Err(FeatureError::BadRange(format!(
            "need 0 <= f_min < f_max <= fs/2, got f_min={f_min} f_max={f_max} fs={fs}"
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_mels * n_bins];
    for r in 0..n_mels {
        let (lo, mid, hi) = (points[r], points[r + 1], points[r + 2]);
        for b in 0..n_bins {
            let f = b as f64 * fs / n_fft as f64;
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            weights[r * n_bins + b] = up.min(down).max(0.0);
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        n_bins,
        f_min,
        f_max,
    })
}

/// The recognizer's input representation: a `T × 128` log-mel matrix.
pub fn mel_spectrogram(buf: &AudioBuffer) -> Result<Spectrogram, FeatureError> {
    let fb = make_mel_filterbank(
        N_MELS,
        N_FFT,
        buf.sample_rate as f64,
        0.0,
        buf.sample_rate as f64 / 2.0,
    )?;
    mel_spectrogram_with(buf, &fb)
}

/// Same as [`mel_spectrogram`] with a precomputed filterbank.
pub fn mel_spectrogram_with(
    buf: &AudioBuffer,
    fb: &MelFilterbank,
) -> Result<Spectrogram, FeatureError> {
    let power = stft_power(buf, WINDOW_S, HOP_S, N_FFT)?;
    let mut mel = fb.apply(&power);
    mel.data.iter_mut().for_each(|x| *x = (*x + LOG_FLOOR).ln());
    mel.kind = SpecKind::LogMel;
    Ok(mel)
}

/// Orthonormal DCT-II basis, `n_out × n_in`, row `k` = coefficient `k`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for k in 0..n_out {
        let scale = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        for n in 0..n_in {
            m[k * n_in + n] =
                scale * (PI * k as f64 * (2 * n + 1) as f64 / (2 * n_in) as f64).cos();
        }
    }
    m
}

/// Applies the DCT to each log-mel frame and keeps coefficients `2..=n_coeffs`
/// (the energy-like first coefficient is dropped).
pub fn mfcc_from_log_mel(log_mel: &Spectrogram, n_coeffs: usize) -> Spectrogram {
    assert!(
        n_coeffs >= 1 && n_coeffs <= log_mel.n_bins,
        "n_coeffs must be in 1..=n_mels"
    );
    let dct = dct_matrix(n_coeffs, log_mel.n_bins);
    let keep = n_coeffs - 1;
    let mut data = Vec::with_capacity(log_mel.n_frames * keep);
    for t in 0..log_mel.n_frames {
        let frame = log_mel.frame(t);
        for k in 1..n_coeffs {
            let row = &dct[k * log_mel.n_bins..(k + 1) * log_mel.n_bins];
            data.push(row.iter().zip(frame).map(|(a, b)| a * b).sum());
        }
    }
    Spectrogram::new(
        data,
        log_mel.n_frames,
        keep,
        log_mel.frame_hop_s,
        SpecKind::Mfcc,
    )
}

pub fn mfcc(buf: &AudioBuffer, n_coeffs: usize) -> Result<Spectrogram, FeatureError> {
    let log_mel = mel_spectrogram(buf)?;
    if n_coeffs == 0 || n_coeffs > log_mel.n_bins {
        return Err(FeatureError::BadRange(format!(
            "n_coeffs {n_coeffs} must be in 1..={}",
            log_mel.n_bins
        )));
    }
    Ok(mfcc_from_log_mel(&log_mel, n_coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{pad_min_duration, SAMPLE_RATE};

    fn tone(freq: f64, n: usize) -> AudioBuffer {
        let fs = SAMPLE_RATE as f64;
        AudioBuffer::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / fs).sin())
                .collect(),
            SAMPLE_RATE,
        )
    }

    /// Direct O(N²) DFT power of one windowed frame.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn zero_signal_gives_zero_power() {
        let s = stft_power(
            &AudioBuffer::silence(4000, SAMPLE_RATE),
            WINDOW_S,
            HOP_S,
            N_FFT,
        )
        .unwrap();
        assert!(s.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let k = 37;
        let buf = tone(k as f64 * SAMPLE_RATE as f64 / N_FFT as f64, 8000);
        let s = stft_power(&buf, WINDOW_S, HOP_S, N_FFT).unwrap();
        let win = hann_window(640);
        let framed: Vec<f64> = buf.samples[320..960]
            .iter()
            .zip(&win)
            .map(|(a, b)| a * b)
            .collect();
        let oracle = dft_power(&framed, N_FFT);
        for (a, b) in s.frame(1).iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        for t in 0..s.n_frames {
            let argmax = s
                .frame(t)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::MIN),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0;
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let buf = AudioBuffer::new(
            (0..3000)
                .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
                .collect(),
            SAMPLE_RATE,
        );
        let s = stft_power(&buf, WINDOW_S, HOP_S, N_FFT).unwrap();
        let win = hann_window(640);
        for t in 0..s.n_frames {
            let energy: f64 = buf.samples[t * 320..t * 320 + 640]
                .iter()
                .zip(&win)
                .map(|(x, w)| (x * w).powi(2))
                .sum::<f64>()
                * N_FFT as f64;
            let frame = s.frame(t);
            let one_sided: f64 = frame
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    if k == 0 || k == N_FFT / 2 {
                        *p
                    } else {
                        2.0 * p
                    }
                })
                .sum();
            assert!((one_sided - energy).abs() / energy < 1e-6);
        }
    }

    #[test]
    fn too_short_is_an_error() {
        let err = stft_power(
            &AudioBuffer::silence(100, SAMPLE_RATE),
            WINDOW_S,
            HOP_S,
            N_FFT,
        )
        .unwrap_err();
        assert_eq!(
            err,
            FeatureError::TooShort {
                samples: 100,
                window: 640
            }
        );
    }

    #[test]
    fn mel_of_700_hz() {
        let expected = 2595.0 * 2f64.log10();
        assert!((hz_to_mel(700.0) - expected).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn single_filter_peaks_at_mel_midpoint() {
        let fb = make_mel_filterbank(1, N_FFT, 16000.0, 0.0, 8000.0).unwrap();
        let peak_hz = mel_to_hz(hz_to_mel(8000.0) / 2.0);
        let row = fb.row(0);
        let argmax = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        let bin_hz = 16000.0 / N_FFT as f64;
        assert!((argmax as f64 * bin_hz - peak_hz).abs() <= bin_hz);
        assert_eq!(row[0], 0.0);
    }

    #[test]
    fn filterbank_shape_invariants() {
        let fb = make_mel_filterbank(N_MELS, N_FFT, 16000.0, 0.0, 8000.0).unwrap();
        for r in 0..N_MELS {
            let row = fb.row(r);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0), "row {r} empty");
            // unimodal: non-decreasing then non-increasing
            let peak = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert!(row[..=peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
            if r + 1 < N_MELS {
                let next = fb.row(r + 1);
                assert!(
                    row.iter().zip(next).any(|(a, b)| *a > 0.0 && *b > 0.0),
                    "rows {r},{} disjoint",
                    r + 1
                );
            }
        }
    }

    #[test]
    fn filterbank_rejects_bad_ranges() {
        assert!(make_mel_filterbank(0, N_FFT, 16000.0, 0.0, 8000.0).is_err());
        assert!(make_mel_filterbank(10, N_FFT, 16000.0, 500.0, 400.0).is_err());
        assert!(make_mel_filterbank(10, N_FFT, 16000.0, 0.0, 9000.0).is_err());
    }

    #[test]
    fn padded_silence_is_floor_everywhere() {
        let buf = pad_min_duration(&AudioBuffer::silence(100, SAMPLE_RATE), 0.3);
        let s = mel_spectrogram(&buf).unwrap();
        assert_eq!(s.n_frames, 14);
        assert_eq!(s.n_bins, 128);
        assert!(s.data.iter().all(|&x| x == LOG_FLOOR.ln()));
    }

    #[test]
    fn one_second_gives_49_frames_and_sign_invariance() {
        let buf = tone(440.0, 16000);
        let s = mel_spectrogram(&buf).unwrap();
        assert_eq!(s.n_frames, 1 + (16000 - 640) / 320);
        assert_eq!(s.n_frames, 49);
        let neg = AudioBuffer::new(buf.samples.iter().map(|x| -x).collect(), SAMPLE_RATE);
        assert_eq!(mel_spectrogram(&neg).unwrap(), s);
    }

    #[test]
    fn filterbank_is_linear() {
        let fb = make_mel_filterbank(N_MELS, N_FFT, 16000.0, 0.0, 8000.0).unwrap();
        let a = stft_power(&tone(300.0, 2000), WINDOW_S, HOP_S, N_FFT).unwrap();
        let b = stft_power(&tone(2100.0, 2000), WINDOW_S, HOP_S, N_FFT).unwrap();
        let mut sum = a.clone();
        sum.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        let (ma, mb, ms) = (fb.apply(&a), fb.apply(&b), fb.apply(&sum));
        for i in 0..ms.data.len() {
            assert!(
                (ms.data[i] - ma.data[i] - mb.data[i]).abs() <= 1e-9 * (1.0 + ms.data[i].abs())
            );
        }
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let n = 128;
        let g = dct_matrix(n, n);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        assert!(worst < 1e-10, "max |GGᵀ - I| = {worst}");
    }

    #[test]
    fn constant_log_mel_has_zero_cepstrum_after_c0() {
        let spec = Spectrogram::new(vec![-3.5; 2 * 128], 2, 128, HOP_S, SpecKind::LogMel);
        let c = mfcc_from_log_mel(&spec, 13);
        assert_eq!(c.n_bins, 12);
        assert!(c.data.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mfcc_keeps_twelve() {
        let c = mfcc(&tone(1000.0, 8000), 13).unwrap();
        assert_eq!(c.n_bins, 12);
        assert_eq!(c.kind, SpecKind::Mfcc);
        assert!(mfcc(&tone(1000.0, 8000), 129).is_err());
    }

    #[test]
    fn deterministic_bitwise() {
        let buf = tone(523.0, 5000);
        assert_eq!(
            mel_spectrogram(&buf).unwrap().data,
            mel_spectrogram(&buf).unwrap().data
        );
    }
}

//! Frequency and time masking of log-mel spectrograms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::{Spectrogram, LOG_FLOOR};

/// One frequency band of up to `fm` rows and one time band of up to
/// `floor(tm·T)` frames, each drawn with width uniform from zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub fm: usize,
    pub tm: f64,
    #[serde(default = "default_fill")]
    pub fill: f64,
}

fn default_fill() -> f64 {
    LOG_FLOOR.ln()
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            fm: 14,
            tm: 0.0625,
            fill: default_fill(),
        }
    }
}

/// The rectangle chosen by one call to [`mask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskDraw {
    pub freq_start: usize,
    pub freq_width: usize,
    pub time_start: usize,
    pub time_width: usize,
}

impl AugmentSpec {
    pub fn max_time_width(&self, n_frames: usize) -> usize {
        (self.tm.clamp(0.0, 1.0) * n_frames as f64).floor() as usize
    }

    pub fn draw<R: Rng + ?Sized>(&self, n_frames: usize, n_bins: usize, rng: &mut R) -> MaskDraw {
        let f = rng.random_range(0..=self.fm.min(n_bins));
        let f0 = rng.random_range(0..=n_bins - f);
        let t = rng.random_range(0..=self.max_time_width(n_frames));
        let t0 = rng.random_range(0..=n_frames - t);
        MaskDraw {
            freq_start: f0,
            freq_width: f,
            time_start: t0,
            time_width: t,
        }
    }
}

/// Returns a masked copy and the rectangle that was used.
pub fn mask<R: Rng + ?Sized>(
    spec: &Spectrogram,
    a: &AugmentSpec,
    rng: &mut R,
) -> (Spectrogram, MaskDraw) {
    let d = a.draw(spec.n_frames, spec.n_bins, rng);
    let mut out = spec.clone();
    apply(&mut out, &d, a.fill);
    (out, d)
}

pub fn apply(spec: &mut Spectrogram, d: &MaskDraw, fill: f64) {
    for t in 0..spec.n_frames {
        let row = spec.frame_mut(t);
        if (d.time_start..d.time_start + d.time_width).contains(&t) {
            row.iter_mut().for_each(|x| *x = fill);
        } else {
            row[d.freq_start..d.freq_start + d.freq_width]
                .iter_mut()
                .for_each(|x| *x = fill);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SpecKind;
    use crate::seed;

    fn ramp(t: usize, f: usize) -> Spectrogram {
        let data = (0..t * f).map(|i| i as f64 * 0.01 - 3.0).collect();
        Spectrogram::new(data, t, f, 0.02, SpecKind::LogMel)
    }

    #[test]
    fn empty_mask_is_identity() {
        let s = ramp(20, 16);
        let a = AugmentSpec {
            fm: 0,
            tm: 0.0,
            ..Default::default()
        };
        let mut rng = seed::rng(1, "specaugment", 0);
        for _ in 0..50 {
            assert_eq!(mask(&s, &a, &mut rng).0, s);
        }
    }

    #[test]
    fn only_the_drawn_rectangle_changes() {
        let s = ramp(81, 128);
        let a = AugmentSpec::default();
        let mut rng = seed::rng(3, "specaugment", 0);
        for _ in 0..200 {
            let (m, d) = mask(&s, &a, &mut rng);
            assert!(d.freq_width <= 14 && d.time_width <= 5);
            for t in 0..81 {
                for f in 0..128 {
                    let inside = (d.time_start..d.time_start + d.time_width).contains(&t)
                        || (d.freq_start..d.freq_start + d.freq_width).contains(&f);
                    let (x, y) = (s.get(t, f), m.get(t, f));
                    if inside {
                        assert_eq!(y, a.fill);
                    } else {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn every_width_occurs() {
        let a = AugmentSpec::default();
        let mut rng = seed::rng(5, "specaugment", 0);
        let (mut fw, mut tw) = ([false; 15], [false; 6]);
        for _ in 0..10_000 {
            let d = a.draw(81, 128, &mut rng);
            fw[d.freq_width] = true;
            tw[d.time_width] = true;
        }
        assert!(fw.iter().all(|&b| b) && tw.iter().all(|&b| b));
    }

    #[test]
    fn deterministic_given_stream() {
        let s = ramp(30, 20);
        let a = AugmentSpec {
            fm: 5,
            tm: 0.2,
            ..Default::default()
        };
        let x = mask(&s, &a, &mut seed::rng(9, "specaugment", 4)).0;
        let y = mask(&s, &a, &mut seed::rng(9, "specaugment", 4)).0;
        assert_eq!(x, y);
    }
}

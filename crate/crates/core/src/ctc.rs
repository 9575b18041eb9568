//! Connectionist Temporal Classification: loss by forward-backward dynamic
//! programming over the blank-interleaved target, its gradient with respect
//! to the per-frame log-probabilities, and greedy (argmax) decoding.
//!
//! The blank is label 0. All recursions run in log space; impossible states
//! hold `-inf` and [`log_sum_exp`] returns `-inf` for an all-`-inf` input.

use thiserror::Error;

use crate::phonemize::PhonemeInventory;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error(
        "target of length {target_len} needs at least {required} frames, lattice has {frames}"
    )]
    TargetTooLong {
        target_len: usize,
        required: usize,
        frames: usize,
    },
    #[error("target label {label} is the blank or exceeds {classes} classes")]
    InvalidLabel { label: u32, classes: usize },
    #[error("lattice shape mismatch: {0}")]
    Shape(String),
}

/// `T × C` matrix of per-frame log-probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub n_classes: usize,
}

impl LogProbLattice {
    pub fn new(data: Vec<f64>, n_frames: usize, n_classes: usize) -> Result<Self, CtcError> {
        if n_frames == 0 || n_classes == 0 || data.len() != n_frames * n_classes {
            return Err(CtcError::Shape(format!(
                "{} values for {n_frames}×{n_classes}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            n_frames,
            n_classes,
        })
    }

    /// Builds a lattice from probabilities (each row should sum to one).
    pub fn from_probs(probs: &[Vec<f64>]) -> Result<Self, CtcError> {
        let c = probs.first().map_or(0, Vec::len);
        if probs.iter().any(|r| r.len() != c) {
            return Err(CtcError::Shape("ragged probability rows".into()));
        }
        Self::new(
            probs.iter().flatten().map(|p| p.ln()).collect(),
            probs.len(),
            c,
        )
    }

    /// Row-wise log-softmax of unnormalized scores.
    pub fn from_logits(
        logits: &[f64],
        n_frames: usize,
        n_classes: usize,
    ) -> Result<Self, CtcError> {
        let mut data = logits.to_vec();
        for row in data.chunks_mut(n_classes.max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Self::new(data, n_frames, n_classes)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_classes..(t + 1) * self.n_classes]
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.n_classes + c]
    }

    /// Per-frame argmax; ties resolve to the lowest class index.
    pub fn argmax_path(&self) -> Vec<u32> {
        (0..self.n_frames)
            .map(|t| {
                let row = self.row(t);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcResult {
    pub neg_log_likelihood: f64,
    /// `∂nll/∂log p[t][c]`, same layout as the lattice.
    pub grad: Vec<f64>,
}

/// `log Σ exp(x_i)`, exact `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    log_sum_exp(&[a, b])
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    log_sum_exp(&[a, b, c])
}

/// Minimum number of frames that can emit `target`: one per label plus one
/// separating blank for each adjacent repeated pair.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Target with a blank before, between and after every label.
fn extended(target: &[u32]) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(0);
    for &l in target {
        ext.push(l);
        ext.push(0);
    }
    ext
}

/// Negative log-likelihood of `target` under `lattice` and its gradient.
///
/// The lattice entries are treated as independent variables, so the gradient
/// is `-α_t(s)β_t(s) / (P · p_t(c))` summed over the extended-target
/// positions `s` carrying class `c`.
pub fn ctc_loss(lattice: &LogProbLattice, target: &[u32]) -> Result<CtcResult, CtcError> {
    let (t_len, n_classes) = (lattice.n_frames, lattice.n_classes);
    if let Some(&label) = target.iter().find(|&&l| l == 0 || l as usize >= n_classes) {
        return Err(CtcError::InvalidLabel {
            label,
            classes: n_classes,
        });
    }
    let required = min_frames(target);
    if t_len < required {
        return Err(CtcError::TargetTooLong {
            target_len: target.len(),
            required,
            frames: t_len,
        });
    }
    let ext = extended(target);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    // skip transition s-2 → s allowed onto a non-blank that differs from ext[s-2]
    let can_skip = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lattice.get(0, ext[0] as usize);
    if s_len > 1 {
        alpha[1] = lattice.get(0, ext[1] as usize);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let stay = prev[s];
            let step = if s >= 1 { prev[s - 1] } else { ninf };
            let skip = if can_skip(s) { prev[s - 2] } else { ninf };
            let sum = lse3(stay, step, skip);
            cur[s] = if sum == ninf {
                ninf
            } else {
                sum + lattice.get(t, ext[s] as usize)
            };
        }
    }

    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lattice.get(t_len - 1, ext[s_len - 1] as usize);
    if s_len > 1 {
        beta[last + s_len - 2] = lattice.get(t_len - 1, ext[s_len - 2] as usize);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let stay = next[s];
            let step = if s + 1 < s_len { next[s + 1] } else { ninf };
            let skip = if s + 2 < s_len && can_skip(s + 2) {
                next[s + 2]
            } else {
                ninf
            };
            let sum = lse3(stay, step, skip);
            cur[s] = if sum == ninf {
                ninf
            } else {
                sum + lattice.get(t, ext[s] as usize)
            };
        }
    }

    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Err(CtcError::TargetTooLong {
            target_len: target.len(),
            required,
            frames: t_len,
        });
    }

    let mut grad = vec![0.0; t_len * n_classes];
    let mut per_class = vec![ninf; n_classes];
    for t in 0..t_len {
        per_class.iter_mut().for_each(|x| *x = ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            let c = ext[s] as usize;
            per_class[c] = lse2(per_class[c], ab);
        }
        for c in 0..n_classes {
            if per_class[c] != ninf {
                grad[t * n_classes + c] = -(per_class[c] - lattice.get(t, c) - log_p).exp();
            }
        }
    }
    Ok(CtcResult {
        neg_log_likelihood: -log_p,
        grad,
    })
}

/// Chains a log-probability gradient through a row-wise log-softmax, giving
/// the gradient with respect to the pre-softmax scores.
pub fn grad_wrt_logits(lattice: &LogProbLattice, grad_logp: &[f64]) -> Vec<f64> {
    let c = lattice.n_classes;
    let mut out = vec![0.0; grad_logp.len()];
    for t in 0..lattice.n_frames {
        let g = &grad_logp[t * c..(t + 1) * c];
        let total: f64 = g.iter().sum();
        for k in 0..c {
            out[t * c + k] = g[k] - lattice.get(t, k).exp() * total;
        }
    }
    out
}

/// Merges runs of identical labels, then deletes blanks.
pub fn collapse(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if Some(l) != prev && l != 0 {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

pub fn greedy_decode_ids(lattice: &LogProbLattice) -> Vec<u32> {
    collapse(&lattice.argmax_path())
}

pub fn greedy_decode(lattice: &LogProbLattice, inv: &PhonemeInventory) -> Vec<String> {
    greedy_decode_ids(lattice)
        .into_iter()
        .map(|id| inv.label(id).unwrap_or("?").to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_single_path() {
        let lat = LogProbLattice::from_probs(&[vec![0.4, 0.6]]).unwrap();
        let r = ctc_loss(&lat, &[1]).unwrap();
        assert!((r.neg_log_likelihood + 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_uniform_frames() {
        let lat = LogProbLattice::from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let r = ctc_loss(&lat, &[1]).unwrap();
        assert!((r.neg_log_likelihood + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let lat = LogProbLattice::from_probs(&[vec![0.7, 0.3], vec![0.9, 0.1]]).unwrap();
        let r = ctc_loss(&lat, &[]).unwrap();
        assert!((r.neg_log_likelihood + (0.7f64 * 0.9).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_invalid_targets() {
        let lat = LogProbLattice::from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(
            ctc_loss(&lat, &[1, 1]).unwrap_err(),
            CtcError::TargetTooLong {
                target_len: 2,
                required: 3,
                frames: 2
            }
        );
        assert!(matches!(
            ctc_loss(&lat, &[0]),
            Err(CtcError::InvalidLabel { .. })
        ));
        assert!(matches!(
            ctc_loss(&lat, &[2]),
            Err(CtcError::InvalidLabel { .. })
        ));
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    #[test]
    fn certain_path_has_zero_loss() {
        let lat = LogProbLattice::from_probs(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let r = ctc_loss(&lat, &[1, 2]).unwrap();
        assert_eq!(r.neg_log_likelihood, 0.0);
    }

    #[test]
    fn logit_gradient_rows_sum_to_zero() {
        let logits: Vec<f64> = (0..15)
            .map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0)
            .collect();
        let lat = LogProbLattice::from_logits(&logits, 5, 3).unwrap();
        let r = ctc_loss(&lat, &[1, 2, 1]).unwrap();
        let g = grad_wrt_logits(&lat, &r.grad);
        for t in 0..5 {
            let s: f64 = g[t * 3..t * 3 + 3].iter().sum();
            assert!(s.abs() < 1e-12);
            // every path emits exactly one label per frame
            let raw: f64 = r.grad[t * 3..t * 3 + 3].iter().sum();
            assert!((raw + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collapse_merges_before_deleting_blanks() {
        assert_eq!(collapse(&[1, 1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[1, 1, 1]), vec![1]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<u32>::new());
        assert_eq!(collapse(&[0, 2, 2, 0, 3, 0]), vec![2, 3]);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let lat =
            LogProbLattice::from_probs(&[vec![0.25, 0.25, 0.5], vec![0.4, 0.4, 0.2]]).unwrap();
        assert_eq!(lat.argmax_path(), vec![2, 0]);
    }

    #[test]
    fn log_sum_exp_of_nothing() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}

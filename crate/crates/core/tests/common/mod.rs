#![allow(dead_code)]

use phonorec::ctc::{collapse, LogProbLattice};
use rand::Rng;

/// `−ln Σ P(path)` over every length-T path that collapses to `target`.
pub fn brute_force_nll(lat: &LogProbLattice, target: &[u32]) -> f64 {
    let (t, c) = (lat.n_frames, lat.n_classes);
    let mut total = 0.0;
    let mut path = vec![0u32; t];
    for code in 0..(c as u64).pow(t as u32) {
        let mut rest = code;
        for slot in path.iter_mut() {
            *slot = (rest % c as u64) as u32;
            rest /= c as u64;
        }
        if collapse(&path) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &k)| lat.get(i, k as usize))
                .sum::<f64>()
                .exp();
        }
    }
    -total.ln()
}

pub fn random_lattice<R: Rng>(t: usize, c: usize, rng: &mut R) -> LogProbLattice {
    let logits: Vec<f64> = (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    LogProbLattice::from_logits(&logits, t, c).unwrap()
}

/// A feasible random target with labels in `1..c`.
pub fn random_target<R: Rng>(t: usize, c: usize, max_len: usize, rng: &mut R) -> Vec<u32> {
    loop {
        let len = rng.random_range(0..=max_len);
        let target: Vec<u32> = (0..len).map(|_| rng.random_range(1..c as u32)).collect();
        if phonorec::ctc::min_frames(&target) <= t {
            return target;
        }
    }
}

/// Lattice whose per-frame argmax follows `path`.
pub fn lattice_for_path(path: &[u32], c: usize) -> LogProbLattice {
    let probs: Vec<Vec<f64>> = path
        .iter()
        .map(|&k| {
            (0..c)
                .map(|j| {
                    if j == k as usize {
                        0.6
                    } else {
                        0.4 / (c - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    LogProbLattice::from_probs(&probs).unwrap()
}

/// Top-down memoized edit distance, independent of the library's table fill.
pub fn recursive_edit_distance(a: &[u8], b: &[u8]) -> usize {
    fn go(
        a: &[u8],
        b: &[u8],
        i: usize,
        j: usize,
        memo: &mut Vec<Option<usize>>,
        w: usize,
    ) -> usize {
        if let Some(v) = memo[i * w + j] {
            return v;
        }
        let v = if i == 0 {
            j
        } else if j == 0 {
            i
        } else {
            let sub = go(a, b, i - 1, j - 1, memo, w) + usize::from(a[i - 1] != b[j - 1]);
            sub.min(go(a, b, i - 1, j, memo, w) + 1)
                .min(go(a, b, i, j - 1, memo, w) + 1)
        };
        memo[i * w + j] = Some(v);
        v
    }
    let w = b.len() + 1;
    let mut memo = vec![None; (a.len() + 1) * w];
    go(a, b, a.len(), b.len(), &mut memo, w)
}

/// Every string over `{0, 1, 2}` of length `0..=max_len`.
pub fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<u8>> = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<u8>> = frontier
            .iter()
            .flat_map(|s| (0..3u8).map(move |c| [s.as_slice(), &[c]].concat()))
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Central-difference check of `grad` for `f` at `x`; returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn max_rel_err(
    x: &mut [f64],
    grad: &[f64],
    eps: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(x);
        x[i] = orig - eps;
        let down = f(x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor));
    }
    worst
}

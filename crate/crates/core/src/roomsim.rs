//! Shoebox image-source room simulation and corpus augmentation.
//!
//! Walls share one absorption coefficient α; each reflection keeps a
//! `sqrt(1 − α)` fraction of the pressure amplitude. Sources and the
//! microphone are ideal omnidirectional points, delays are rounded to the
//! nearest sample and sound travels at [`SPEED_OF_SOUND`].

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::seed;

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Peak level of every simulated output.
pub const OUTPUT_PEAK: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum RoomError {
    #[error("scene has {expected} {role} source(s) but {got} signal(s) were given")]
    RoleMismatch {
        role: Role,
        expected: usize,
        got: usize,
    },
    #[error("the {0} pool is empty but the scene has {0} sources")]
    EmptyPool(Role),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Babble,
    Noise,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Target => "target",
            Role::Babble => "babble",
            Role::Noise => "noise",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub pos: [f64; 3],
    pub gain: f64,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomScene {
    pub dims: [f64; 3],
    pub absorption: f64,
    pub max_order: u32,
    pub mic: [f64; 3],
    pub sources: Vec<Source>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSource {
    pub position: [f64; 3],
    pub reflections: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl ImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|x| x * x).sum()
    }

    pub fn first_nonzero(&self) -> Option<usize> {
        self.taps.iter().position(|&x| x != 0.0)
    }

    fn sparse(&self) -> Vec<(usize, f64)> {
        self.taps
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(i, &a)| (i, a))
            .collect()
    }
}

fn inside(p: &[f64; 3], dims: &[f64; 3]) -> bool {
    p.iter().zip(dims).all(|(&x, &l)| x > 0.0 && x < l)
}

impl RoomScene {
    pub fn from_json(text: &str) -> Result<Self, RoomError> {
        let scene: Self =
            serde_json::from_str(text).map_err(|e| RoomError::InvalidScene(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<(), RoomError> {
        let bad = |m: String| Err(RoomError::InvalidScene(m));
        if self.dims.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad(format!("room dimensions {:?} must be positive", self.dims));
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return bad(format!("absorption {} outside (0, 1]", self.absorption));
        }
        if !inside(&self.mic, &self.dims) {
            return bad(format!("microphone {:?} outside the room", self.mic));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !inside(&s.pos, &self.dims) {
                return bad(format!("source {i} at {:?} outside the room", s.pos));
            }
            if !(s.gain >= 0.0 && s.gain.is_finite()) {
                return bad(format!("source {i} has gain {}", s.gain));
            }
        }
        let targets = self.count(Role::Target);
        if targets != 1 {
            return bad(format!(
                "expected exactly one target source, found {targets}"
            ));
        }
        Ok(())
    }

    pub fn count(&self, role: Role) -> usize {
        self.sources.iter().filter(|s| s.role == role).count()
    }

    fn indices(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.sources
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.role == role)
            .map(|(i, _)| i)
    }
}

/// Mirror positions of one coordinate: `2nL + s` after `2|n|` reflections
/// and `2nL − s` after `|2n − 1|`.
fn axis_images(s: f64, l: f64, max_order: u32) -> Vec<(f64, u32)> {
    let n_max = max_order as i64 / 2 + 1;
    let mut out = Vec::new();
    for n in -n_max..=n_max {
        let base = 2.0 * n as f64 * l;
        let even = (2 * n).unsigned_abs() as u32;
        let odd = (2 * n - 1).unsigned_abs() as u32;
        if even <= max_order {
            out.push((base + s, even));
        }
        if odd <= max_order {
            out.push((base - s, odd));
        }
    }
    out
}

/// All images of source `src_index` with at most `max_order` reflections in
/// total, the source itself included.
pub fn image_sources(scene: &RoomScene, src_index: usize) -> Vec<ImageSource> {
    let p = scene.sources[src_index].pos;
    let axes: Vec<Vec<(f64, u32)>> = (0..3)
        .map(|a| axis_images(p[a], scene.dims[a], scene.max_order))
        .collect();
    let mut out = Vec::new();
    for &(x, rx) in &axes[0] {
        for &(y, ry) in &axes[1] {
            for &(z, rz) in &axes[2] {
                let r = rx + ry + rz;
                if r <= scene.max_order {
                    out.push(ImageSource {
                        position: [x, y, z],
                        reflections: r,
                    });
                }
            }
        }
    }
    out
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn delay_samples(d: f64, sample_rate: u32) -> usize {
    (sample_rate as f64 * d / SPEED_OF_SOUND).round() as usize
}

/// Impulse response from source `src_index` to the microphone. Images whose
/// delays round to the same sample add up in one tap.
pub fn rir(scene: &RoomScene, src_index: usize, sample_rate: u32) -> ImpulseResponse {
    let images = image_sources(scene, src_index);
    let keep = 1.0 - scene.absorption;
    let contributions: Vec<(usize, f64)> = images
        .iter()
        .filter_map(|im| {
            let amp_r = if im.reflections == 0 {
                1.0
            } else {
                keep.powf(im.reflections as f64 / 2.0)
            };
            if amp_r == 0.0 {
                return None;
            }
            let d = distance(&im.position, &scene.mic);
            Some((
                delay_samples(d, sample_rate),
                amp_r / (4.0 * std::f64::consts::PI * d),
            ))
        })
        .collect();
    let len = contributions.iter().map(|c| c.0 + 1).max().unwrap_or(1);
    let mut taps = vec![0.0; len];
    for (i, a) in contributions {
        taps[i] += a;
    }
    ImpulseResponse { taps, sample_rate }
}

/// `x ⊛ h` truncated or zero-extended to `len` samples.
fn convolve_into(out: &mut [f64], x: &[f64], h: &[(usize, f64)], gain: f64) {
    if gain == 0.0 {
        return;
    }
    for &(k, a) in h {
        let g = gain * a;
        if k >= out.len() {
            continue;
        }
        let n = x.len().min(out.len() - k);
        for (o, &s) in out[k..k + n].iter_mut().zip(&x[..n]) {
            *o += g * s;
        }
    }
}

/// The microphone signal before peak normalization.
pub fn mix_unnormalized(
    scene: &RoomScene,
    target: &AudioBuffer,
    babble: &[AudioBuffer],
    noise: &[AudioBuffer],
) -> Result<Vec<f64>, RoomError> {
    for (role, given) in [
        (Role::Target, 1),
        (Role::Babble, babble.len()),
        (Role::Noise, noise.len()),
    ] {
        let expected = scene.count(role);
        if expected != given {
            return Err(RoomError::RoleMismatch {
                role,
                expected,
                got: given,
            });
        }
    }
    let fs = target.sample_rate;
    if let Some(b) = babble.iter().chain(noise).find(|b| b.sample_rate != fs) {
        return Err(RoomError::SampleRateMismatch(fs, b.sample_rate));
    }
    let t_idx = scene.indices(Role::Target).next().expect("validated scene");
    let rirs: Vec<ImpulseResponse> = (0..scene.sources.len())
        .map(|i| rir(scene, i, fs))
        .collect();
    let len = if target.is_empty() {
        0
    } else {
        target.len() + rirs[t_idx].taps.len() - 1
    };
    let mut out = vec![0.0; len];
    let signals = scene
        .indices(Role::Target)
        .map(|i| (i, target))
        .chain(scene.indices(Role::Babble).zip(babble))
        .chain(scene.indices(Role::Noise).zip(noise));
    for (i, buf) in signals {
        convolve_into(
            &mut out,
            &buf.samples,
            &rirs[i].sparse(),
            scene.sources[i].gain,
        );
    }
    Ok(out)
}

/// Mixes every source through its impulse response and scales the result so
/// its peak is [`OUTPUT_PEAK`]. An all-zero mix stays zero.
pub fn simulate(
    scene: &RoomScene,
    target: &AudioBuffer,
    babble: &[AudioBuffer],
    noise: &[AudioBuffer],
) -> Result<AudioBuffer, RoomError> {
    let mut out = mix_unnormalized(scene, target, babble, noise)?;
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let k = OUTPUT_PEAK / peak;
        out.iter_mut().for_each(|x| *x *= k);
    }
    Ok(AudioBuffer::new(out, target.sample_rate))
}

/// A `len`-sample excerpt of `buf` starting at a random offset, wrapping
/// around when the buffer is shorter than `len`.
fn excerpt<R: Rng>(buf: &AudioBuffer, len: usize, rng: &mut R) -> AudioBuffer {
    if buf.is_empty() {
        return AudioBuffer::silence(len, buf.sample_rate);
    }
    let start = rng.random_range(0..buf.len());
    let samples = (0..len)
        .map(|i| buf.samples[(start + i) % buf.len()])
        .collect();
    AudioBuffer::new(samples, buf.sample_rate)
}

fn draw_role<R: Rng>(
    scene: &RoomScene,
    role: Role,
    pool: &[AudioBuffer],
    len: usize,
    rng: &mut R,
) -> Result<Vec<AudioBuffer>, RoomError> {
    let n = scene.count(role);
    if n > 0 && pool.is_empty() {
        return Err(RoomError::EmptyPool(role));
    }
    Ok((0..n)
        .map(|_| {
            let pick = &pool[rng.random_range(0..pool.len())];
            excerpt(pick, len, rng)
        })
        .collect())
}

/// Simulates one utterance in every geometry. Interferers are drawn from
/// the pools with a stream keyed by `(seed, geometry seed, item)`.
pub fn augment_utterance(
    item: u64,
    target: &AudioBuffer,
    geometries: &[RoomScene],
    babble_pool: &[AudioBuffer],
    noise_pool: &[AudioBuffer],
    seed: u64,
) -> Result<Vec<AudioBuffer>, RoomError> {
    geometries
        .iter()
        .map(|scene| {
            let mut rng = seed::rng(seed ^ scene.seed, "roomsim", item);
            let babble = draw_role(scene, Role::Babble, babble_pool, target.len(), &mut rng)?;
            let noise = draw_role(scene, Role::Noise, noise_pool, target.len(), &mut rng)?;
            simulate(scene, target, &babble, &noise)
        })
        .collect()
}

/// One output per (utterance, geometry) pair, utterance-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub utterance: usize,
    pub geometry: usize,
    pub audio: AudioBuffer,
}

/// Expands a corpus by the number of geometries (four by default).
pub fn augment_corpus(
    targets: &[AudioBuffer],
    geometries: &[RoomScene],
    babble_pool: &[AudioBuffer],
    noise_pool: &[AudioBuffer],
    seed: u64,
) -> Result<Vec<Augmented>, RoomError> {
    if geometries.is_empty() {
        return Err(RoomError::InvalidScene("no geometries given".into()));
    }
    for g in geometries {
        g.validate()?;
        for role in [Role::Babble, Role::Noise] {
            let pool = if role == Role::Babble {
                babble_pool
            } else {
                noise_pool
            };
            if g.count(role) > 0 && pool.is_empty() {
                return Err(RoomError::EmptyPool(role));
            }
        }
    }
    let per_item: Vec<Vec<AudioBuffer>> = targets
        .par_iter()
        .enumerate()
        .map(|(i, t)| augment_utterance(i as u64, t, geometries, babble_pool, noise_pool, seed))
        .collect::<Result<_, _>>()?;
    Ok(per_item
        .into_iter()
        .enumerate()
        .flat_map(|(u, outs)| {
            outs.into_iter()
                .enumerate()
                .map(move |(g, audio)| Augmented {
                    utterance: u,
                    geometry: g,
                    audio,
                })
        })
        .collect())
}

const GEOMETRIES: [&str; 4] = [
    include_str!("../assets/scenes/g1.json"),
    include_str!("../assets/scenes/g2.json"),
    include_str!("../assets/scenes/g3.json"),
    include_str!("../assets/scenes/g4.json"),
];

/// The four shipped 6 × 4 × 3 m classroom-table layouts. Gains put the
/// direct-path target-to-interference ratio at 5 dB; they are repository
/// defaults, not measured values.
pub fn default_geometries() -> Vec<RoomScene> {
    GEOMETRIES
        .iter()
        .map(|s| RoomScene::from_json(s).expect("shipped scenes are valid"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(absorption: f64, max_order: u32) -> RoomScene {
        RoomScene {
            dims: [4.0, 4.0, 4.0],
            absorption,
            max_order,
            mic: [2.0, 3.0, 2.5],
            sources: vec![Source {
                pos: [1.0, 1.0, 1.0],
                gain: 1.0,
                role: Role::Target,
            }],
            seed: 0,
        }
    }

    #[test]
    fn image_counts_by_order() {
        assert_eq!(image_sources(&scene(0.5, 0), 0).len(), 1);
        assert_eq!(image_sources(&scene(0.5, 1), 0).len(), 7);
        // 1 + 6 + 18 + 38: lattice points with |i|+|j|+|k| <= 3
        assert_eq!(image_sources(&scene(0.5, 3), 0).len(), 63);
    }

    #[test]
    fn first_order_x_mirrors() {
        let ims = image_sources(&scene(0.5, 1), 0);
        let has = |p: [f64; 3]| ims.iter().any(|i| i.position == p && i.reflections == 1);
        assert!(has([-1.0, 1.0, 1.0]));
        assert!(has([7.0, 1.0, 1.0]));
    }

    #[test]
    fn full_absorption_leaves_direct_path() {
        let s = scene(1.0, 4);
        let h = rir(&s, 0, 16_000);
        let d = distance(&s.sources[0].pos, &s.mic);
        let nz: Vec<usize> = (0..h.taps.len()).filter(|&i| h.taps[i] != 0.0).collect();
        assert_eq!(nz, vec![delay_samples(d, 16_000)]);
        assert!((h.taps[nz[0]] - 1.0 / (4.0 * std::f64::consts::PI * d)).abs() < 1e-15);
    }

    #[test]
    fn direct_delay_by_hand() {
        assert_eq!(delay_samples(3.43, 16_000), 160);
    }

    #[test]
    fn energy_falls_with_absorption() {
        let e: Vec<f64> = [0.2, 0.4, 0.6, 0.8]
            .iter()
            .map(|&a| rir(&scene(a, 3), 0, 16_000).energy())
            .collect();
        assert!(e.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn scene_validation() {
        let mut s = scene(0.5, 1);
        s.sources[0].pos = [4.0, 1.0, 1.0];
        assert!(matches!(s.validate(), Err(RoomError::InvalidScene(_))));
        let mut s = scene(0.5, 1);
        s.sources[0].role = Role::Noise;
        assert!(matches!(s.validate(), Err(RoomError::InvalidScene(_))));
        let mut s = scene(0.0, 1);
        assert!(s.validate().is_err());
        s.absorption = 0.3;
        assert!(RoomScene::from_json(&s.to_json()).is_ok());
    }

    #[test]
    fn role_counts_must_match() {
        let s = &default_geometries()[0];
        let t = AudioBuffer::silence(100, 16_000);
        let err = simulate(s, &t, &[], &[]).unwrap_err();
        assert!(matches!(
            err,
            RoomError::RoleMismatch {
                role: Role::Babble,
                ..
            }
        ));
    }

    #[test]
    fn shipped_geometries_are_five_db() {
        for g in default_geometries() {
            let direct = |s: &Source| s.gain / distance(&s.pos, &g.mic);
            let t = g.sources.iter().find(|s| s.role == Role::Target).unwrap();
            let i: f64 = g
                .sources
                .iter()
                .filter(|s| s.role != Role::Target)
                .map(|s| direct(s).powi(2))
                .sum();
            let tir = 10.0 * (direct(t).powi(2) / i).log10();
            assert!((tir - 5.0).abs() < 0.01, "{tir}");
        }
    }

    #[test]
    fn empty_pool_is_rejected() {
        let t = vec![AudioBuffer::silence(10, 16_000)];
        let g = default_geometries();
        let b = vec![AudioBuffer::silence(10, 16_000)];
        assert_eq!(
            augment_corpus(&t, &g, &[], &b, 0).unwrap_err(),
            RoomError::EmptyPool(Role::Babble)
        );
        assert_eq!(
            augment_corpus(&t, &g, &b, &[], 0).unwrap_err(),
            RoomError::EmptyPool(Role::Noise)
        );
    }
}

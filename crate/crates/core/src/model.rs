//! The convolutional-recurrent acoustic model.
//!
//! ```text
//! log-mel (T × n_mels)
//!   → Conv2d 1→F, 3×3, stride 2, pad 1       (F × ceil(n_mels/2) × ceil(T/2))
//!   → flatten filters × frequency per frame
//!   → FC to gru_input
//!   → per recurrent layer: LayerNorm → GELU → bidirectional GRU (directions concatenated)
//!   → FC to gru_input → GELU → dropout → FC to n_classes → log-softmax
//! ```
//!
//! GRU cells follow the reset-after formulation with separate input and
//! hidden biases:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! Arithmetic is f64 throughout. Parameter values are kept representable in
//! f32 so that checkpoints, which store f32, reload bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{grad_wrt_logits, LogProbLattice};
use crate::features::Spectrogram;
use crate::seed;

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 5] = b"PHRC1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {got} bins per frame, model expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("input has no frames")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_filters: usize,
    pub gru_layers: usize,
    pub gru_input: usize,
    pub gru_hidden: usize,
    #[serde(default = "default_n_mels")]
    pub n_mels: usize,
    pub n_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
}

fn default_n_mels() -> usize {
    crate::features::N_MELS
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn new(
        n_filters: usize,
        gru_layers: usize,
        gru_input: usize,
        gru_hidden: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            n_filters,
            gru_layers,
            gru_input,
            gru_hidden,
            n_mels: default_n_mels(),
            n_classes,
            dropout_p: default_dropout(),
        }
    }

    /// Frequency rows after the stride-2 convolution.
    pub fn conv_bins(&self) -> usize {
        self.n_mels.div_ceil(2)
    }

    /// Width of the flattened convolution output per frame.
    pub fn in_feats(&self) -> usize {
        self.n_filters * self.conv_bins()
    }

    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.gru_input
        } else {
            2 * self.gru_hidden
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.n_filters,
            self.gru_layers,
            self.gru_input,
            self.gru_hidden,
            self.n_mels,
        ];
        if dims.contains(&0) {
            return Err(ModelError::BadConfig(format!(
                "zero-sized dimension in {self:?}"
            )));
        }
        if self.n_classes < 2 {
            return Err(ModelError::BadConfig(
                "need at least blank plus one label".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Output frames for `t` input frames.
    pub fn output_frames(t: usize) -> usize {
        t.div_ceil(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named tensors in a fixed order. Also used for gradients and optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    pub tensors: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.tensors[name].data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no tensor {name}"))
            .data
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    /// Element-wise `self += other`; both sets must share a layout.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.values().flat_map(|t| t.data.iter().copied())
    }
}

/// Total number of scalar parameters.
///
/// ```
/// use phonorec::model::{param_count, ParameterSet, Tensor};
/// let mut p = ParameterSet::default();
/// assert_eq!(param_count(&p), 0);
/// p.insert("fc.weight", Tensor::zeros(&[5, 10]));
/// p.insert("fc.bias", Tensor::zeros(&[5]));
/// assert_eq!(param_count(&p), 55);
/// ```
pub fn param_count(p: &ParameterSet) -> usize {
    p.tensors.values().map(Tensor::len).sum()
}

/// Parameter counts grouped by layer (the name prefix before the first dot),
/// in network order.
pub fn param_breakdown(p: &ParameterSet) -> Vec<(String, usize)> {
    let mut out: IndexMap<String, usize> = IndexMap::new();
    for (name, t) in &p.tensors {
        let layer = name.split('.').next().unwrap_or(name).to_string();
        *out.entry(layer).or_default() += t.len();
    }
    out.into_iter().collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// `out = W x + b` for a row-major `W` of shape `out.len() × x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(n).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Accumulates `dW += dy ⊗ x`, `db += dy` and, if given, `dx += Wᵀ dy`.
fn affine_back(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        for (d, &xi) in dw[o * n..(o + 1) * n].iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &wi) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *d += g * wi;
            }
        }
    }
}

struct Gru<'a> {
    w_ih: &'a [f64],
    w_hh: &'a [f64],
    b_ih: &'a [f64],
    b_hh: &'a [f64],
    hidden: usize,
    input: usize,
}

/// Per-step activations in processing order.
struct GruTape {
    h: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
}

#[derive(Clone)]
struct GruGrads {
    w_ih: Vec<f64>,
    w_hh: Vec<f64>,
    b_ih: Vec<f64>,
    b_hh: Vec<f64>,
}

impl<'a> Gru<'a> {
    fn from_params(p: &'a ParameterSet, prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: p.get(&format!("{prefix}.w_ih")),
            w_hh: p.get(&format!("{prefix}.w_hh")),
            b_ih: p.get(&format!("{prefix}.b_ih")),
            b_hh: p.get(&format!("{prefix}.b_hh")),
            hidden,
            input,
        }
    }

    /// Runs over `xs` (T × input, time order), backwards in time when
    /// `reverse`. Writes hidden states into `out` at column `col` of a
    /// `stride`-wide row-major matrix, time order.
    fn forward(
        &self,
        xs: &[f64],
        reverse: bool,
        out: &mut [f64],
        stride: usize,
        col: usize,
    ) -> GruTape {
        let (h, t_len) = (self.hidden, xs.len() / self.input);
        let mut tape = GruTape {
            h: vec![0.0; (t_len + 1) * h],
            r: vec![0.0; t_len * h],
            z: vec![0.0; t_len * h],
            n: vec![0.0; t_len * h],
            ghn: vec![0.0; t_len * h],
        };
        let mut gi = vec![0.0; 3 * h];
        let mut gh = vec![0.0; 3 * h];
        for s in 0..t_len {
            let t = if reverse { t_len - 1 - s } else { s };
            let x = &xs[t * self.input..(t + 1) * self.input];
            affine(self.w_ih, self.b_ih, x, &mut gi);
            let (hs_prev, hs_next) = tape.h.split_at_mut((s + 1) * h);
            let h_prev = &hs_prev[s * h..];
            affine(self.w_hh, self.b_hh, h_prev, &mut gh);
            for k in 0..h {
                let r = sigmoid(gi[k] + gh[k]);
                let z = sigmoid(gi[h + k] + gh[h + k]);
                let n = (gi[2 * h + k] + r * gh[2 * h + k]).tanh();
                let hn = (1.0 - z) * n + z * h_prev[k];
                tape.r[s * h + k] = r;
                tape.z[s * h + k] = z;
                tape.n[s * h + k] = n;
                tape.ghn[s * h + k] = gh[2 * h + k];
                hs_next[k] = hn;
                out[t * stride + col + k] = hn;
            }
        }
        tape
    }

    /// Gradient of the loss given `dout` (∂L/∂h_t, same layout as the
    /// forward `out`). Accumulates into `dxs` (time order).
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        xs: &[f64],
        tape: &GruTape,
        reverse: bool,
        dout: &[f64],
        stride: usize,
        col: usize,
        dxs: &mut [f64],
    ) -> GruGrads {
        let (h, inp) = (self.hidden, self.input);
        let t_len = xs.len() / inp;
        let mut g = GruGrads {
            w_ih: vec![0.0; 3 * h * inp],
            w_hh: vec![0.0; 3 * h * h],
            b_ih: vec![0.0; 3 * h],
            b_hh: vec![0.0; 3 * h],
        };
        let mut dh = vec![0.0; h];
        let mut dgi = vec![0.0; 3 * h];
        let mut dgh = vec![0.0; 3 * h];
        for s in (0..t_len).rev() {
            let t = if reverse { t_len - 1 - s } else { s };
            for k in 0..h {
                dh[k] += dout[t * stride + col + k];
            }
            let h_prev = &tape.h[s * h..(s + 1) * h];
            let mut dh_prev = vec![0.0; h];
            for k in 0..h {
                let i = s * h + k;
                let (r, z, n, ghn) = (tape.r[i], tape.z[i], tape.n[i], tape.ghn[i]);
                let dn = dh[k] * (1.0 - z);
                let dz = dh[k] * (h_prev[k] - n);
                dh_prev[k] = dh[k] * z;
                let dn_pre = dn * (1.0 - n * n);
                let dr = dn_pre * ghn;
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                dgi[k] = dr_pre;
                dgi[h + k] = dz_pre;
                dgi[2 * h + k] = dn_pre;
                dgh[k] = dr_pre;
                dgh[h + k] = dz_pre;
                dgh[2 * h + k] = dn_pre * r;
            }
            let x = &xs[t * inp..(t + 1) * inp];
            affine_back(
                self.w_ih,
                x,
                &dgi,
                &mut g.w_ih,
                &mut g.b_ih,
                Some(&mut dxs[t * inp..(t + 1) * inp]),
            );
            affine_back(
                self.w_hh,
                h_prev,
                &dgh,
                &mut g.w_hh,
                &mut g.b_hh,
                Some(&mut dh_prev),
            );
            dh = dh_prev;
        }
        g
    }
}

struct LayerTape {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pre_gelu: Vec<f64>,
    gru_in: Vec<f64>,
    fwd: GruTape,
    bwd: GruTape,
}

/// Activations cached by [`Model::forward`] for one input. [`Model::backward`]
/// takes it by value, so a tape cannot be replayed.
pub struct Tape {
    input: Vec<f64>,
    t_in: usize,
    t_out: usize,
    flat: Vec<f64>,
    layers: Vec<LayerTape>,
    rnn_out: Vec<f64>,
    fc2_pre: Vec<f64>,
    fc2_act: Vec<f64>,
    mask: Option<Vec<f64>>,
    lattice: LogProbLattice,
}

impl Tape {
    /// Output of the recurrent stack (T' × 2·gru_hidden).
    pub fn rnn_output(&self) -> &[f64] {
        &self.rnn_out
    }

    pub fn dropout_mask(&self) -> Option<&[f64]> {
        self.mask.as_deref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

fn uniform_tensor(shape: &[usize], bound: f64, seed_value: u64, index: u64) -> Tensor {
    let mut rng = seed::rng(seed_value, "init", index);
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    }
}

fn xavier(fan_out: usize, fan_in: usize, seed_value: u64, index: u64) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_tensor(&[fan_out, fan_in], bound, seed_value, index)
}

impl Model {
    /// Fresh parameters: He-uniform convolution kernels, Xavier-uniform dense
    /// and recurrent matrices, zero biases, unit layer-norm gains.
    pub fn build(config: ModelConfig, seed_value: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let (f, gi, h) = (c.n_filters, c.gru_input, c.gru_hidden);
        let mut p = ParameterSet::default();
        let mut idx = 0u64;
        let mut next = || {
            idx += 1;
            idx
        };
        p.insert(
            "conv.weight",
            uniform_tensor(&[f, 1, 3, 3], (6.0f64 / 9.0).sqrt(), seed_value, next()),
        );
        p.insert("conv.bias", Tensor::zeros(&[f]));
        p.insert("fc1.weight", xavier(gi, c.in_feats(), seed_value, next()));
        p.insert("fc1.bias", Tensor::zeros(&[gi]));
        for l in 0..c.gru_layers {
            let inp = c.layer_input(l);
            p.insert(
                format!("gru{l}.ln_gamma"),
                Tensor {
                    shape: vec![inp],
                    data: vec![1.0; inp],
                },
            );
            p.insert(format!("gru{l}.ln_beta"), Tensor::zeros(&[inp]));
            for dir in ["fwd", "bwd"] {
                p.insert(
                    format!("gru{l}.{dir}.w_ih"),
                    xavier(3 * h, inp, seed_value, next()),
                );
                p.insert(
                    format!("gru{l}.{dir}.w_hh"),
                    xavier(3 * h, h, seed_value, next()),
                );
                p.insert(format!("gru{l}.{dir}.b_ih"), Tensor::zeros(&[3 * h]));
                p.insert(format!("gru{l}.{dir}.b_hh"), Tensor::zeros(&[3 * h]));
            }
        }
        p.insert("fc2.weight", xavier(gi, 2 * h, seed_value, next()));
        p.insert("fc2.bias", Tensor::zeros(&[gi]));
        p.insert("fc3.weight", xavier(c.n_classes, gi, seed_value, next()));
        p.insert("fc3.bias", Tensor::zeros(&[c.n_classes]));
        p.round_to_f32();
        Ok(Self { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    /// Runs the network. Dropout is active only when `dropout_rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        spec: &Spectrogram,
        dropout_rng: Option<&mut R>,
    ) -> Result<(LogProbLattice, Tape), ModelError> {
        let c = &self.config;
        if spec.n_bins != c.n_mels {
            return Err(ModelError::ShapeMismatch {
                expected: c.n_mels,
                got: spec.n_bins,
            });
        }
        if spec.n_frames == 0 {
            return Err(ModelError::EmptyInput);
        }
        let p = &self.params;
        let (t_in, m) = (spec.n_frames, c.n_mels);
        let (t_out, m2, nf) = (ModelConfig::output_frames(t_in), c.conv_bins(), c.n_filters);
        let (gi, h, n_cls) = (c.gru_input, c.gru_hidden, c.n_classes);
        let x = &spec.data;

        // convolution, flattened to frame-major [t][filter * m2 + freq]
        let (cw, cb) = (p.get("conv.weight"), p.get("conv.bias"));
        let feats = c.in_feats();
        let mut flat = vec![0.0; t_out * feats];
        for j in 0..t_out {
            for ch in 0..nf {
                let k = &cw[ch * 9..ch * 9 + 9];
                for i in 0..m2 {
                    let mut acc = cb[ch];
                    for di in 0..3 {
                        let fi = (2 * i + di) as isize - 1;
                        if fi < 0 || fi as usize >= m {
                            continue;
                        }
                        for dj in 0..3 {
                            let tj = (2 * j + dj) as isize - 1;
                            if tj < 0 || tj as usize >= t_in {
                                continue;
                            }
                            acc += k[di * 3 + dj] * x[tj as usize * m + fi as usize];
                        }
                    }
                    flat[j * feats + ch * m2 + i] = acc;
                }
            }
        }

        let mut u = vec![0.0; t_out * gi];
        let (w1, b1) = (p.get("fc1.weight"), p.get("fc1.bias"));
        for j in 0..t_out {
            affine(
                w1,
                b1,
                &flat[j * feats..(j + 1) * feats],
                &mut u[j * gi..(j + 1) * gi],
            );
        }

        let mut layers = Vec::with_capacity(c.gru_layers);
        for l in 0..c.gru_layers {
            let inp = c.layer_input(l);
            let gamma = p.get(&format!("gru{l}.ln_gamma"));
            let beta = p.get(&format!("gru{l}.ln_beta"));
            let mut xhat = vec![0.0; t_out * inp];
            let mut inv_std = vec![0.0; t_out];
            let mut pre = vec![0.0; t_out * inp];
            let mut g = vec![0.0; t_out * inp];
            for j in 0..t_out {
                let row = &u[j * inp..(j + 1) * inp];
                let mean = row.iter().sum::<f64>() / inp as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / inp as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[j] = is;
                for k in 0..inp {
                    let xh = (row[k] - mean) * is;
                    let v = gamma[k] * xh + beta[k];
                    xhat[j * inp + k] = xh;
                    pre[j * inp + k] = v;
                    g[j * inp + k] = gelu(v);
                }
            }
            let mut out = vec![0.0; t_out * 2 * h];
            let fwd = Gru::from_params(p, &format!("gru{l}.fwd"), inp, h).forward(
                &g,
                false,
                &mut out,
                2 * h,
                0,
            );
            let bwd = Gru::from_params(p, &format!("gru{l}.bwd"), inp, h).forward(
                &g,
                true,
                &mut out,
                2 * h,
                h,
            );
            layers.push(LayerTape {
                xhat,
                inv_std,
                pre_gelu: pre,
                gru_in: g,
                fwd,
                bwd,
            });
            u = out;
        }
        let rnn_out = u;

        let (w2, b2) = (p.get("fc2.weight"), p.get("fc2.bias"));
        let mut fc2_pre = vec![0.0; t_out * gi];
        for j in 0..t_out {
            affine(
                w2,
                b2,
                &rnn_out[j * 2 * h..(j + 1) * 2 * h],
                &mut fc2_pre[j * gi..(j + 1) * gi],
            );
        }
        let mut fc2_act: Vec<f64> = fc2_pre.iter().map(|&v| gelu(v)).collect();
        let mask = match dropout_rng {
            Some(rng) if c.dropout_p > 0.0 => {
                let mk = dropout_mask(fc2_act.len(), c.dropout_p, rng);
                fc2_act.iter_mut().zip(&mk).for_each(|(a, m)| *a *= m);
                Some(mk)
            }
            _ => None,
        };

        let (w3, b3) = (p.get("fc3.weight"), p.get("fc3.bias"));
        let mut logits = vec![0.0; t_out * n_cls];
        for j in 0..t_out {
            affine(
                w3,
                b3,
                &fc2_act[j * gi..(j + 1) * gi],
                &mut logits[j * n_cls..(j + 1) * n_cls],
            );
        }
        let lattice =
            LogProbLattice::from_logits(&logits, t_out, n_cls).expect("well-formed logits");
        let tape = Tape {
            input: x.clone(),
            t_in,
            t_out,
            flat,
            layers,
            rnn_out,
            fc2_pre,
            fc2_act,
            mask,
            lattice: lattice.clone(),
        };
        Ok((lattice, tape))
    }

    /// Eval-mode forward without a tape.
    pub fn infer(&self, spec: &Spectrogram) -> Result<LogProbLattice, ModelError> {
        self.forward::<rand_chacha::ChaCha8Rng>(spec, None)
            .map(|r| r.0)
    }

    /// Parameter gradients given `grad_lattice`, the loss gradient with
    /// respect to the output log-probabilities (T' × C).
    pub fn backward(&self, tape: Tape, grad_lattice: &[f64]) -> ParameterSet {
        let c = &self.config;
        let p = &self.params;
        let mut grads = p.zeros_like();
        let (t_out, t_in, m) = (tape.t_out, tape.t_in, c.n_mels);
        let (gi, h, n_cls, m2, nf) = (
            c.gru_input,
            c.gru_hidden,
            c.n_classes,
            c.conv_bins(),
            c.n_filters,
        );
        let feats = c.in_feats();

        let dlogits = grad_wrt_logits(&tape.lattice, grad_lattice);

        let mut d_act = vec![0.0; t_out * gi];
        {
            let w3 = p.get("fc3.weight");
            let (mut dw, mut db) = (vec![0.0; w3.len()], vec![0.0; n_cls]);
            for j in 0..t_out {
                affine_back(
                    w3,
                    &tape.fc2_act[j * gi..(j + 1) * gi],
                    &dlogits[j * n_cls..(j + 1) * n_cls],
                    &mut dw,
                    &mut db,
                    Some(&mut d_act[j * gi..(j + 1) * gi]),
                );
            }
            grads.get_mut("fc3.weight").copy_from_slice(&dw);
            grads.get_mut("fc3.bias").copy_from_slice(&db);
        }
        if let Some(mask) = &tape.mask {
            d_act.iter_mut().zip(mask).for_each(|(d, k)| *d *= k);
        }
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(&tape.fc2_pre)
            .map(|(d, &v)| d * gelu_grad(v))
            .collect();

        let mut d_u = vec![0.0; t_out * 2 * h];
        {
            let w2 = p.get("fc2.weight");
            let (mut dw, mut db) = (vec![0.0; w2.len()], vec![0.0; gi]);
            for j in 0..t_out {
                affine_back(
                    w2,
                    &tape.rnn_out[j * 2 * h..(j + 1) * 2 * h],
                    &d_pre[j * gi..(j + 1) * gi],
                    &mut dw,
                    &mut db,
                    Some(&mut d_u[j * 2 * h..(j + 1) * 2 * h]),
                );
            }
            grads.get_mut("fc2.weight").copy_from_slice(&dw);
            grads.get_mut("fc2.bias").copy_from_slice(&db);
        }

        for (l, lt) in tape.layers.iter().enumerate().rev() {
            let inp = c.layer_input(l);
            let mut dg = vec![0.0; t_out * inp];
            for (dir, reverse, col, gt) in [("fwd", false, 0, &lt.fwd), ("bwd", true, h, &lt.bwd)] {
                let prefix = format!("gru{l}.{dir}");
                let gru = Gru::from_params(p, &prefix, inp, h);
                let gg = gru.backward(&lt.gru_in, gt, reverse, &d_u, 2 * h, col, &mut dg);
                grads
                    .get_mut(&format!("{prefix}.w_ih"))
                    .copy_from_slice(&gg.w_ih);
                grads
                    .get_mut(&format!("{prefix}.w_hh"))
                    .copy_from_slice(&gg.w_hh);
                grads
                    .get_mut(&format!("{prefix}.b_ih"))
                    .copy_from_slice(&gg.b_ih);
                grads
                    .get_mut(&format!("{prefix}.b_hh"))
                    .copy_from_slice(&gg.b_hh);
            }
            let gamma = p.get(&format!("gru{l}.ln_gamma"));
            let (mut dgamma, mut dbeta) = (vec![0.0; inp], vec![0.0; inp]);
            let mut d_in = vec![0.0; t_out * inp];
            for j in 0..t_out {
                let r = j * inp..(j + 1) * inp;
                let mut dxhat = vec![0.0; inp];
                for k in 0..inp {
                    let dv = dg[r.start + k] * gelu_grad(lt.pre_gelu[r.start + k]);
                    dgamma[k] += dv * lt.xhat[r.start + k];
                    dbeta[k] += dv;
                    dxhat[k] = dv * gamma[k];
                }
                let xh = &lt.xhat[r.clone()];
                let mean_d = dxhat.iter().sum::<f64>() / inp as f64;
                let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / inp as f64;
                for k in 0..inp {
                    d_in[r.start + k] = lt.inv_std[j] * (dxhat[k] - mean_d - xh[k] * mean_dx);
                }
            }
            grads
                .get_mut(&format!("gru{l}.ln_gamma"))
                .copy_from_slice(&dgamma);
            grads
                .get_mut(&format!("gru{l}.ln_beta"))
                .copy_from_slice(&dbeta);
            d_u = d_in;
        }

        let mut d_flat = vec![0.0; t_out * feats];
        {
            let w1 = p.get("fc1.weight");
            let (mut dw, mut db) = (vec![0.0; w1.len()], vec![0.0; gi]);
            for j in 0..t_out {
                affine_back(
                    w1,
                    &tape.flat[j * feats..(j + 1) * feats],
                    &d_u[j * gi..(j + 1) * gi],
                    &mut dw,
                    &mut db,
                    Some(&mut d_flat[j * feats..(j + 1) * feats]),
                );
            }
            grads.get_mut("fc1.weight").copy_from_slice(&dw);
            grads.get_mut("fc1.bias").copy_from_slice(&db);
        }

        let x = &tape.input;
        let (mut dw, mut db) = (vec![0.0; nf * 9], vec![0.0; nf]);
        for j in 0..t_out {
            for ch in 0..nf {
                for i in 0..m2 {
                    let dy = d_flat[j * feats + ch * m2 + i];
                    if dy == 0.0 {
                        continue;
                    }
                    db[ch] += dy;
                    for di in 0..3 {
                        let fi = (2 * i + di) as isize - 1;
                        if fi < 0 || fi as usize >= m {
                            continue;
                        }
                        for dj in 0..3 {
                            let tj = (2 * j + dj) as isize - 1;
                            if tj < 0 || tj as usize >= t_in {
                                continue;
                            }
                            dw[ch * 9 + di * 3 + dj] += dy * x[tj as usize * m + fi as usize];
                        }
                    }
                }
            }
        }
        grads.get_mut("conv.weight").copy_from_slice(&dw);
        grads.get_mut("conv.bias").copy_from_slice(&db);
        grads
    }

    /// Output of the recurrent stack alone for a `T × gru_input` sequence.
    pub fn rnn_stack(&self, input: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let p = &self.params;
        let t = input.len() / c.gru_input;
        let h = c.gru_hidden;
        let mut u = input.to_vec();
        for l in 0..c.gru_layers {
            let inp = c.layer_input(l);
            let gamma = p.get(&format!("gru{l}.ln_gamma"));
            let beta = p.get(&format!("gru{l}.ln_beta"));
            let mut g = vec![0.0; t * inp];
            for j in 0..t {
                let row = &u[j * inp..(j + 1) * inp];
                let mean = row.iter().sum::<f64>() / inp as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / inp as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                for k in 0..inp {
                    g[j * inp + k] = gelu(gamma[k] * (row[k] - mean) * is + beta[k]);
                }
            }
            let mut out = vec![0.0; t * 2 * h];
            Gru::from_params(p, &format!("gru{l}.fwd"), inp, h).forward(
                &g,
                false,
                &mut out,
                2 * h,
                0,
            );
            Gru::from_params(p, &format!("gru{l}.bwd"), inp, h).forward(
                &g,
                true,
                &mut out,
                2 * h,
                h,
            );
            u = out;
        }
        u
    }

    /// Writes the checkpoint format: `PHRC1`, a little-endian u32 header
    /// length, the JSON header, then every tensor as little-endian f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut offset = 0usize;
        let table: Vec<TensorEntry> = self
            .params
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 4 * t.len();
                e
            })
            .collect();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: table,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for v in self.params.iter_values() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(io)?)
            .read_to_end(&mut bytes)
            .map_err(io)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
        if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing PHRC1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = 9 + hlen;
        if bytes.len() < body {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[9..body])
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(ModelError::BadCheckpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut model = Self::build(header.config, 0)?;
        if header.tensors.len() != model.params.tensors.len() {
            return Err(bad("tensor table does not match the config"));
        }
        let data = &bytes[body..];
        for entry in &header.tensors {
            let t = model.params.tensors.get_mut(&entry.name).ok_or_else(|| {
                ModelError::BadCheckpoint(format!("unexpected tensor {}", entry.name))
            })?;
            if t.shape != entry.shape {
                return Err(ModelError::BadCheckpoint(format!(
                    "shape mismatch for {}",
                    entry.name
                )));
            }
            let end = entry.offset + 4 * t.len();
            let raw = data.get(entry.offset..end).ok_or_else(|| {
                ModelError::BadCheckpoint(format!("truncated data for {}", entry.name))
            })?;
            for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss;
    use crate::features::SpecKind;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_filters: 2,
            gru_layers: 1,
            gru_input: 3,
            gru_hidden: 4,
            n_mels: 6,
            n_classes: 3,
            dropout_p: 0.1,
        }
    }

    fn random_spec(t: usize, f: usize, s: u64) -> Spectrogram {
        let mut rng = seed::rng(s, "test-spec", 0);
        let data = (0..t * f).map(|_| rng.random_range(-2.0..2.0)).collect();
        Spectrogram::new(data, t, f, 0.02, SpecKind::LogMel)
    }

    /// Layer-by-layer closed form: conv 10F, fc1, then per recurrent layer
    /// layer-norm 2·in plus two directions of 3(h·in + h·h + 2h), fc2, fc3.
    fn closed_form(c: &ModelConfig) -> usize {
        let (f, gi, h) = (c.n_filters, c.gru_input, c.gru_hidden);
        let mut n = 10 * f + f * c.n_mels.div_ceil(2) * gi + gi;
        for l in 0..c.gru_layers {
            let inp = if l == 0 { gi } else { 2 * h };
            n += 2 * inp + 2 * 3 * (h * inp + h * h + 2 * h);
        }
        n + 2 * h * gi + gi + gi * c.n_classes + c.n_classes
    }

    #[test]
    fn counts_match_closed_form() {
        for c in [
            ModelConfig::new(4, 2, 64, 64, 41),
            ModelConfig::new(8, 2, 64, 64, 36),
            ModelConfig::new(16, 3, 32, 32, 40),
            ModelConfig::new(32, 4, 64, 32, 38),
            tiny(),
        ] {
            let m = Model::build(c.clone(), 1).unwrap();
            assert_eq!(m.param_count(), closed_form(&c));
            let total: usize = param_breakdown(&m.params).iter().map(|x| x.1).sum();
            assert_eq!(total, m.param_count());
        }
    }

    #[test]
    fn output_frames_and_normalization() {
        let m = Model::build(ModelConfig::new(2, 1, 8, 4, 5), 3).unwrap();
        let (lat, _) = m
            .forward::<ChaCha8Rng>(&random_spec(49, 128, 1), None)
            .unwrap();
        assert_eq!(lat.n_frames, 25);
        for t in 0..lat.n_frames {
            assert!(crate::ctc::log_sum_exp(lat.row(t)).abs() < 1e-6);
        }
        assert_eq!(m.infer(&random_spec(49, 128, 1)).unwrap(), lat);
        assert!(matches!(
            m.infer(&random_spec(4, 40, 1)),
            Err(ModelError::ShapeMismatch {
                expected: 128,
                got: 40
            })
        ));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        let x = 0.7;
        let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
        assert!((fd - gelu_grad(x)).abs() < 1e-8);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Model::build(tiny(), 5).unwrap();
        let (lat, tape) = m
            .forward::<ChaCha8Rng>(&random_spec(6, 6, 2), None)
            .unwrap();
        let g = m.backward(tape, &vec![0.0; lat.data.len()]);
        assert!(g.iter_values().all(|v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = Model::build(tiny(), 11).unwrap();
        // move away from the symmetric zero-bias start so every path is exercised
        let mut rng = seed::rng(4, "perturb", 0);
        for t in m.params.tensors.values_mut() {
            t.data
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let spec = random_spec(6, 6, 3);
        let target = [1u32, 2];
        let loss = |m: &Model| {
            ctc_loss(&m.infer(&spec).unwrap(), &target)
                .unwrap()
                .neg_log_likelihood
        };
        let (lat, tape) = m.forward::<ChaCha8Rng>(&spec, None).unwrap();
        let g = m.backward(tape, &ctc_loss(&lat, &target).unwrap().grad);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let names: Vec<String> = m.params.tensors.keys().cloned().collect();
        for name in names {
            for i in 0..m.params.tensors[&name].len() {
                let orig = m.params.get(&name)[i];
                m.params.get_mut(&name)[i] = orig + eps;
                let up = loss(&m);
                m.params.get_mut(&name)[i] = orig - eps;
                let down = loss(&m);
                m.params.get_mut(&name)[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = g.get(&name)[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let m = Model::build(ModelConfig::new(2, 1, 8, 4, 5), 3).unwrap();
        let spec = random_spec(20, 128, 9);
        let mut rng = seed::rng(1, "dropout", 0);
        let (_, tape) = m.forward(&spec, Some(&mut rng)).unwrap();
        assert!(tape.dropout_mask().is_some());
        let (_, tape) = m.forward::<ChaCha8Rng>(&spec, None).unwrap();
        assert!(tape.dropout_mask().is_none());
        let mask = dropout_mask(10_000, 0.1, &mut seed::rng(2, "dropout", 0));
        let zeros = mask.iter().filter(|&&v| v == 0.0).count() as f64;
        // mean 1000, sd 30
        assert!((zeros - 1000.0).abs() < 120.0, "{zeros}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = Model::build(ModelConfig::new(2, 2, 8, 4, 5), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.phrc");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        let spec = random_spec(13, 128, 4);
        let (a, b) = (m.infer(&spec).unwrap(), back.infer(&spec).unwrap());
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(matches!(
            Model::from_bytes(b"PHRC0xxxx"),
            Err(ModelError::BadCheckpoint(_))
        ));
    }

    /// Reversing time and exchanging the two directions (with their input
    /// halves permuted in later layers) mirrors the stack output.
    #[test]
    fn bidirectional_symmetry() {
        let cfg = ModelConfig::new(2, 2, 5, 3, 4);
        let m = Model::build(cfg.clone(), 8).unwrap();
        let h = cfg.gru_hidden;
        let mut swapped = m.clone();
        for l in 0..cfg.gru_layers {
            let inp = cfg.layer_input(l);
            let perm = |k: usize| if l == 0 { k } else { (k + h) % (2 * h) };
            for part in ["w_ih", "w_hh", "b_ih", "b_hh"] {
                let f = m.params.get(&format!("gru{l}.fwd.{part}")).to_vec();
                let b = m.params.get(&format!("gru{l}.bwd.{part}")).to_vec();
                let permute = |src: &[f64]| -> Vec<f64> {
                    if part != "w_ih" {
                        return src.to_vec();
                    }
                    let mut out = src.to_vec();
                    for row in 0..3 * h {
                        for k in 0..inp {
                            out[row * inp + perm(k)] = src[row * inp + k];
                        }
                    }
                    out
                };
                swapped
                    .params
                    .get_mut(&format!("gru{l}.fwd.{part}"))
                    .copy_from_slice(&permute(&b));
                swapped
                    .params
                    .get_mut(&format!("gru{l}.bwd.{part}"))
                    .copy_from_slice(&permute(&f));
            }
            for part in ["ln_gamma", "ln_beta"] {
                let src = m.params.get(&format!("gru{l}.{part}")).to_vec();
                let dst = swapped.params.get_mut(&format!("gru{l}.{part}"));
                for k in 0..inp {
                    dst[perm(k)] = src[k];
                }
            }
        }
        let t = 7;
        let mut rng = seed::rng(3, "sym", 0);
        let input: Vec<f64> = (0..t * cfg.gru_input)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut reversed = vec![0.0; input.len()];
        for j in 0..t {
            let gi = cfg.gru_input;
            reversed[j * gi..(j + 1) * gi].copy_from_slice(&input[(t - 1 - j) * gi..(t - j) * gi]);
        }
        let a = m.rnn_stack(&input);
        let b = swapped.rnn_stack(&reversed);
        for j in 0..t {
            for k in 0..2 * h {
                let mirror = a[(t - 1 - j) * 2 * h + (k + h) % (2 * h)];
                assert!((b[j * 2 * h + k] - mirror).abs() < 1e-12);
            }
        }
    }
}

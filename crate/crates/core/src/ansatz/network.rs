//! Residual-RBM: a translation-equivariant convolutional encoder produces `d`
//! hidden spin channels that are stacked on the physical spins and fed to a
//! convolutional RBM with complex parameters. The full log-amplitude is
//! `a·ln ψ₀ + b·ln φ`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{ParameterLayout, WavefunctionParameters};
use super::reference::ReferenceState;
use super::Ansatz;
use crate::error::{Error, Result};
use crate::lattice::{config_bits, Boundary, Lattice};

const NONE: u32 = u32::MAX;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Residual blocks `B`.
    pub blocks: usize,
    /// Hidden spin channels `d`.
    pub embedding: usize,
    /// Channel multiplier `α` of the inner convolution.
    pub enhancement: usize,
    /// Encoder kernel footprint per axis.
    pub encoder_kernel: usize,
    /// RBM kernel footprint per axis; `None` spans the lattice.
    pub rbm_kernel: Option<usize>,
    /// RBM hidden channels.
    pub rbm_channels: usize,
    pub norm_eps: f64,
}

impl ArchitectureConfig {
    /// Defaults: `B = 2`, `α = 2`, `d = N/2` in 1D and `d = 8` in 2D, RBM channels `d + 1`.
    pub fn for_lattice(lattice: &Lattice) -> Self {
        let d = match lattice.dimension() {
            1 => (lattice.n_sites() / 2).max(1),
            _ => 8,
        };
        Self {
            blocks: 2,
            embedding: d,
            enhancement: 2,
            encoder_kernel: 3,
            rbm_kernel: None,
            rbm_channels: d + 1,
            norm_eps: 1e-5,
        }
    }
}

/// Standard deviations and constants for parameter initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub encoder_std: f64,
    pub rbm_std: f64,
    pub embedding_std: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { encoder_std: 1e-2, rbm_std: 1e-2, embedding_std: 1.0, a: 1.0, b: 1e-2 }
    }
}

/// Gather table for a convolution: `table[r * taps + j]` is the site read by tap `j`
/// at output site `r`, or `NONE` outside an open boundary.
#[derive(Clone, Debug)]
struct Geometry {
    n: usize,
    taps: usize,
    table: Vec<u32>,
}

impl Geometry {
    fn new(lattice: &Lattice, footprint: usize) -> Self {
        let l = lattice.extent() as i64;
        let n = lattice.n_sites();
        let half = (footprint / 2) as i64;
        let offsets: Vec<i64> = (0..footprint as i64).map(|o| o - half).collect();
        let deltas: Vec<[i64; 2]> = match lattice.dimension() {
            1 => offsets.iter().map(|&d| [d, 0]).collect(),
            _ => offsets.iter().flat_map(|&dy| offsets.iter().map(move |&dx| [dx, dy])).collect(),
        };
        let periodic = lattice.boundary() == Boundary::Periodic;
        let mut table = Vec::with_capacity(n * deltas.len());
        for r in 0..n {
            let [x, y] = lattice.coords(r);
            for d in &deltas {
                let (tx, ty) = (x as i64 + d[0], y as i64 + d[1]);
                let inside = (0..l).contains(&tx) && (lattice.dimension() == 1 || (0..l).contains(&ty));
                table.push(if periodic {
                    lattice.site([tx.rem_euclid(l) as usize, ty.rem_euclid(l) as usize]) as u32
                } else if inside {
                    lattice.site([tx as usize, ty as usize]) as u32
                } else {
                    NONE
                });
            }
        }
        Self { n, taps: deltas.len(), table }
    }

    /// `out[k][r] = bias[k] + Σ_{l,j} w[k][l][j] · input[l][table[r][j]]`.
    fn forward(&self, input: &[f64], c_in: usize, w: &[f64], bias: &[f64], c_out: usize, out: &mut [f64]) {
        let (n, taps) = (self.n, self.taps);
        for k in 0..c_out {
            for r in 0..n {
                let mut acc = bias[k];
                let row = &self.table[r * taps..(r + 1) * taps];
                for l in 0..c_in {
                    let wk = &w[(k * c_in + l) * taps..(k * c_in + l + 1) * taps];
                    let inp = &input[l * n..(l + 1) * n];
                    for (wj, &s) in wk.iter().zip(row) {
                        if s != NONE {
                            acc += wj * inp[s as usize];
                        }
                    }
                }
                out[k * n + r] = acc;
            }
        }
    }

    /// Backward pass of [`Geometry::forward`] with complex cotangents `g_out`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        g_out: &[Complex64],
        input: &[f64],
        c_in: usize,
        w: &[f64],
        c_out: usize,
        g_w: &mut [Complex64],
        g_bias: &mut [Complex64],
        g_in: &mut [Complex64],
    ) {
        let (n, taps) = (self.n, self.taps);
        for k in 0..c_out {
            let gk = &g_out[k * n..(k + 1) * n];
            g_bias[k] += gk.iter().sum::<Complex64>();
            for r in 0..n {
                let g = gk[r];
                let row = &self.table[r * taps..(r + 1) * taps];
                for l in 0..c_in {
                    let base = (k * c_in + l) * taps;
                    for (j, &s) in row.iter().enumerate() {
                        if s != NONE {
                            let s = s as usize;
                            g_w[base + j] += g * input[l * n + s];
                            g_in[l * n + s] += g * w[base + j];
                        }
                    }
                }
            }
        }
    }
}

/// `ln cosh z` without overflow.
pub fn ln_cosh(z: Complex64) -> Complex64 {
    let s = if z.re >= 0.0 { 1.0 } else { -1.0 };
    let e = (-2.0 * s * z).exp();
    s * z + (1.0 + e).ln() - std::f64::consts::LN_2
}

/// `tanh z` without overflow.
pub fn tanh(z: Complex64) -> Complex64 {
    let s = if z.re >= 0.0 { 1.0 } else { -1.0 };
    let e = (-2.0 * s * z).exp();
    s * (1.0 - e) / (1.0 + e)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug)]
struct Offsets {
    a: usize,
    b: usize,
    rbm_bias: usize,
    rbm_kernel: usize,
    embedding: usize,
    blocks: Vec<BlockOffsets>,
    final_scale: usize,
    final_shift: usize,
}

#[derive(Clone, Debug)]
struct BlockOffsets {
    scale: usize,
    shift: usize,
    up_kernel: usize,
    up_bias: usize,
    down_kernel: usize,
    down_bias: usize,
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    /// Residual stream entering each block, plus the final one.
    h: Vec<Vec<f64>>,
    /// Normalized (pre-affine) activations and inverse standard deviations for each
    /// block's norm and the final norm.
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    normed: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    final_norm: Vec<f64>,
    xt: Vec<f64>,
    theta: Vec<Complex64>,
}

/// Residual-RBM ansatz with a fixed reference state.
#[derive(Clone, Debug)]
pub struct ResidualRbm {
    lattice: Lattice,
    config: ArchitectureConfig,
    reference: ReferenceState,
    layout: ParameterLayout,
    offsets: Offsets,
    enc: Geometry,
    rbm: Geometry,
    symmetric: bool,
}

impl ResidualRbm {
    pub fn new(lattice: Lattice, config: ArchitectureConfig, reference: ReferenceState) -> Result<Self> {
        if reference.n_sites() != lattice.n_sites() {
            return Err(Error::Shape("reference and lattice sizes differ".into()));
        }
        if config.encoder_kernel == 0 || config.rbm_kernel == Some(0) {
            return Err(Error::Invalid("kernel footprints must be positive".into()));
        }
        if config.rbm_channels == 0 {
            return Err(Error::Invalid("the RBM needs at least one channel".into()));
        }
        if config.embedding > 0 && config.enhancement == 0 {
            return Err(Error::Invalid("enhancement must be positive".into()));
        }
        if !(config.norm_eps > 0.0) {
            return Err(Error::Invalid("normalization epsilon must be positive".into()));
        }
        let enc = Geometry::new(&lattice, config.encoder_kernel);
        let rbm = Geometry::new(&lattice, config.rbm_kernel.unwrap_or(lattice.extent()));
        let d = config.embedding;
        let ad = config.enhancement * d;
        let k = config.rbm_channels;
        let mut layout = ParameterLayout::default();
        let a = layout.push("mix.a", vec![], false);
        let b = layout.push("mix.b", vec![], false);
        let rbm_bias = layout.push("rbm.bias", vec![k], true);
        let rbm_kernel = layout.push("rbm.kernel", vec![k, d + 1, rbm.taps], true);
        let embedding = layout.push("encoder.embedding", vec![d], false);
        let mut blocks = Vec::new();
        if d > 0 {
            for i in 0..config.blocks {
                let p = format!("encoder.block{i}");
                blocks.push(BlockOffsets {
                    scale: layout.push(format!("{p}.norm.scale"), vec![d], false),
                    shift: layout.push(format!("{p}.norm.shift"), vec![d], false),
                    up_kernel: layout.push(format!("{p}.up.kernel"), vec![ad, d, enc.taps], false),
                    up_bias: layout.push(format!("{p}.up.bias"), vec![ad], false),
                    down_kernel: layout.push(format!("{p}.down.kernel"), vec![d, ad, enc.taps], false),
                    down_bias: layout.push(format!("{p}.down.bias"), vec![d], false),
                });
            }
        }
        let final_scale = layout.push("encoder.final_norm.scale", vec![d], false);
        let final_shift = layout.push("encoder.final_norm.shift", vec![d], false);
        let symmetric = lattice.is_periodic() && reference.is_translation_invariant();
        Ok(Self {
            lattice,
            config,
            reference,
            layout,
            offsets: Offsets { a, b, rbm_bias, rbm_kernel, embedding, blocks, final_scale, final_shift },
            enc,
            rbm,
            symmetric,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn reference(&self) -> &ReferenceState {
        &self.reference
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    /// Random initial parameters close to the reference state.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, init: &InitConfig) -> WavefunctionParameters {
        let mut p = WavefunctionParameters::zeros(self.layout.clone());
        let mut fill = |p: &mut WavefunctionParameters, name: &str, std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            if let Some(block) = p.block_mut(name) {
                block.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        };
        fill(&mut p, "rbm.kernel", init.rbm_std);
        fill(&mut p, "encoder.embedding", init.embedding_std);
        for i in 0..self.offsets.blocks.len() {
            fill(&mut p, &format!("encoder.block{i}.up.kernel"), init.encoder_std);
            fill(&mut p, &format!("encoder.block{i}.down.kernel"), init.encoder_std);
            p.block_mut(&format!("encoder.block{i}.norm.scale")).unwrap().fill(1.0);
        }
        p.block_mut("encoder.final_norm.scale").unwrap().fill(1.0);
        p.values_mut()[self.offsets.a] = init.a;
        p.values_mut()[self.offsets.b] = init.b;
        p
    }

    fn layer_norm(&self, h: &[f64], gamma: &[f64], beta: &[f64], xhat: &mut [f64], inv: &mut [f64], out: &mut [f64]) {
        let n = self.lattice.n_sites();
        for c in 0..gamma.len() {
            let hc = &h[c * n..(c + 1) * n];
            let mean = hc.iter().sum::<f64>() / n as f64;
            let var = hc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + self.config.norm_eps).sqrt();
            inv[c] = is;
            for i in 0..n {
                let xh = (hc[i] - mean) * is;
                xhat[c * n + i] = xh;
                out[c * n + i] = gamma[c] * xh + beta[c];
            }
        }
    }

    fn layer_norm_backward(&self, g_out: &[Complex64], xhat: &[f64], inv: &[f64], gamma: &[f64], g_gamma: &mut [Complex64], g_beta: &mut [Complex64], g_in: &mut [Complex64]) {
        let n = self.lattice.n_sites();
        let nf = n as f64;
        for c in 0..gamma.len() {
            let go = &g_out[c * n..(c + 1) * n];
            let xh = &xhat[c * n..(c + 1) * n];
            let mut sum_g = Complex64::new(0.0, 0.0);
            let mut sum_gx = Complex64::new(0.0, 0.0);
            for i in 0..n {
                g_gamma[c] += go[i] * xh[i];
                g_beta[c] += go[i];
                let gx = go[i] * gamma[c];
                sum_g += gx;
                sum_gx += gx * xh[i];
            }
            for i in 0..n {
                let gx = go[i] * gamma[c];
                g_in[c * n + i] += inv[c] * (gx - sum_g / nf - xh[i] * sum_gx / nf);
            }
        }
    }

    fn forward(&self, p: &[f64], x: &[i8]) -> Trace {
        let n = self.lattice.n_sites();
        let d = self.config.embedding;
        let ad = self.config.enhancement * d;
        let o = &self.offsets;
        let u = &p[o.embedding..o.embedding + d];
        let mut h0 = vec![0.0; d * n];
        for c in 0..d {
            for i in 0..n {
                h0[c * n + i] = x[i] as f64 * u[c];
            }
        }
        let mut t = Trace {
            h: vec![h0],
            xhat: Vec::new(),
            inv_std: Vec::new(),
            normed: Vec::new(),
            pre: Vec::new(),
            act: Vec::new(),
            final_norm: vec![0.0; d * n],
            xt: vec![0.0; (d + 1) * n],
            theta: Vec::new(),
        };
        for bo in &o.blocks {
            let h = t.h.last().unwrap();
            let mut xhat = vec![0.0; d * n];
            let mut inv = vec![0.0; d];
            let mut normed = vec![0.0; d * n];
            self.layer_norm(h, &p[bo.scale..bo.scale + d], &p[bo.shift..bo.shift + d], &mut xhat, &mut inv, &mut normed);
            let mut pre = vec![0.0; ad * n];
            self.enc.forward(&normed, d, &p[bo.up_kernel..], &p[bo.up_bias..bo.up_bias + ad], ad, &mut pre);
            let act: Vec<f64> = pre.iter().map(|&z| z * sigmoid(z)).collect();
            let mut delta = vec![0.0; d * n];
            self.enc.forward(&act, ad, &p[bo.down_kernel..], &p[bo.down_bias..bo.down_bias + d], d, &mut delta);
            let next: Vec<f64> = h.iter().zip(&delta).map(|(a, b)| a + b).collect();
            t.xhat.push(xhat);
            t.inv_std.push(inv);
            t.normed.push(normed);
            t.pre.push(pre);
            t.act.push(act);
            t.h.push(next);
        }
        let mut xhat = vec![0.0; d * n];
        let mut inv = vec![0.0; d];
        let h = t.h.last().unwrap();
        self.layer_norm(h, &p[o.final_scale..o.final_scale + d], &p[o.final_shift..o.final_shift + d], &mut xhat, &mut inv, &mut t.final_norm);
        t.xhat.push(xhat);
        t.inv_std.push(inv);
        for i in 0..n {
            t.xt[i] = x[i] as f64;
        }
        for (j, &v) in t.final_norm.iter().enumerate() {
            t.xt[n + j] = v / (1.0 + v.abs());
        }
        t.theta = self.rbm_theta(p, &t.xt);
        t
    }

    fn rbm_theta(&self, p: &[f64], xt: &[f64]) -> Vec<Complex64> {
        let n = self.lattice.n_sites();
        let c_in = self.config.embedding + 1;
        let k_ch = self.config.rbm_channels;
        let taps = self.rbm.taps;
        let o = &self.offsets;
        let mut theta = vec![Complex64::new(0.0, 0.0); k_ch * n];
        for k in 0..k_ch {
            let bias = Complex64::new(p[o.rbm_bias + 2 * k], p[o.rbm_bias + 2 * k + 1]);
            for r in 0..n {
                let row = &self.rbm.table[r * taps..(r + 1) * taps];
                let (mut re, mut im) = (bias.re, bias.im);
                for c in 0..c_in {
                    let base = o.rbm_kernel + 2 * (k * c_in + c) * taps;
                    let inp = &xt[c * n..(c + 1) * n];
                    for (j, &s) in row.iter().enumerate() {
                        if s != NONE {
                            let v = inp[s as usize];
                            re += p[base + 2 * j] * v;
                            im += p[base + 2 * j + 1] * v;
                        }
                    }
                }
                theta[k * n + r] = Complex64::new(re, im);
            }
        }
        theta
    }

    /// `RBM(x̃) = Σ_{k,r} ln cosh(b^k + (w^k ∗ x̃)_r)` for a `(d+1)`-channel input.
    pub fn rbm_log(&self, params: &[f64], xtilde: &[f64]) -> Result<Complex64> {
        let expected = (self.config.embedding + 1) * self.lattice.n_sites();
        if xtilde.len() != expected || params.len() != self.layout.n_params() {
            return Err(Error::Shape(format!("expected {expected} augmented inputs")));
        }
        Ok(self.rbm_theta(params, xtilde).into_iter().map(ln_cosh).sum())
    }

    /// Hidden spins `y` (`d` channels, channel-major).
    pub fn encoder_forward(&self, params: &[f64], x: &[i8]) -> Vec<f64> {
        let n = self.lattice.n_sites();
        self.forward(params, x).xt[n..].to_vec()
    }

    /// `ln φ(x)`.
    pub fn log_phi(&self, params: &[f64], x: &[i8]) -> Complex64 {
        self.forward(params, x).theta.into_iter().map(ln_cosh).sum()
    }
}

impl Ansatz for ResidualRbm {
    fn n_sites(&self) -> usize {
        self.lattice.n_sites()
    }

    fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    fn log_amplitude(&self, params: &[f64], x: &[i8]) -> Complex64 {
        let a = params[self.offsets.a];
        let b = params[self.offsets.b];
        a * self.reference.log_amplitude(x) + b * self.log_phi(params, x)
    }

    fn log_amplitude_and_jacobian(&self, p: &[f64], x: &[i8], jac: &mut [Complex64]) -> Complex64 {
        let n = self.lattice.n_sites();
        let d = self.config.embedding;
        let ad = self.config.enhancement * d;
        let c_in = d + 1;
        let k_ch = self.config.rbm_channels;
        let o = &self.offsets;
        let zero = Complex64::new(0.0, 0.0);
        jac.fill(zero);

        let t = self.forward(p, x);
        let ln0 = self.reference.log_amplitude(x);
        let ln_phi: Complex64 = t.theta.iter().map(|&z| ln_cosh(z)).sum();
        let (a, b) = (p[o.a], p[o.b]);
        jac[o.a] = ln0;
        jac[o.b] = ln_phi;

        // RBM layer: cotangent b·tanh(θ) on each pre-activation.
        let taps = self.rbm.taps;
        let mut g_xt = vec![zero; c_in * n];
        for k in 0..k_ch {
            let mut gsum = zero;
            for r in 0..n {
                let g = b * tanh(t.theta[k * n + r]);
                gsum += g;
                let row = &self.rbm.table[r * taps..(r + 1) * taps];
                for c in 0..c_in {
                    let base = 2 * (k * c_in + c) * taps;
                    for (j, &s) in row.iter().enumerate() {
                        if s != NONE {
                            let s = s as usize;
                            let v = t.xt[c * n + s];
                            let w = Complex64::new(p[o.rbm_kernel + base + 2 * j], p[o.rbm_kernel + base + 2 * j + 1]);
                            jac[o.rbm_kernel + base + 2 * j] += g * v;
                            jac[o.rbm_kernel + base + 2 * j + 1] += g * Complex64::i() * v;
                            if c > 0 {
                                g_xt[c * n + s] += g * w;
                            }
                        }
                    }
                }
            }
            jac[o.rbm_bias + 2 * k] = gsum;
            jac[o.rbm_bias + 2 * k + 1] = gsum * Complex64::i();
        }
        if d == 0 {
            return a * ln0 + b * ln_phi;
        }

        // SoftSign and final norm.
        let mut g_norm = vec![zero; d * n];
        for j in 0..d * n {
            let v = t.final_norm[j];
            g_norm[j] = g_xt[n + j] / (1.0 + v.abs()).powi(2);
        }
        let nb = o.blocks.len();
        let mut g_h = vec![zero; d * n];
        {
            let (gs, rest) = jac[o.final_scale..].split_at_mut(d);
            let gb = &mut rest[..d];
            self.layer_norm_backward(&g_norm, &t.xhat[nb], &t.inv_std[nb], &p[o.final_scale..o.final_scale + d], gs, gb, &mut g_h);
        }

        // Residual blocks in reverse.
        for (bi, bo) in o.blocks.iter().enumerate().rev() {
            let mut g_act = vec![zero; ad * n];
            {
                let mut g_w = vec![zero; d * ad * self.enc.taps];
                let mut g_bias = vec![zero; d];
                self.enc.backward(&g_h, &t.act[bi], ad, &p[bo.down_kernel..], d, &mut g_w, &mut g_bias, &mut g_act);
                jac[bo.down_kernel..bo.down_kernel + g_w.len()].copy_from_slice(&g_w);
                jac[bo.down_bias..bo.down_bias + d].copy_from_slice(&g_bias);
            }
            for (g, &z) in g_act.iter_mut().zip(&t.pre[bi]) {
                let s = sigmoid(z);
                *g *= s * (1.0 + z * (1.0 - s));
            }
            let mut g_normed = vec![zero; d * n];
            {
                let mut g_w = vec![zero; ad * d * self.enc.taps];
                let mut g_bias = vec![zero; ad];
                self.enc.backward(&g_act, &t.normed[bi], d, &p[bo.up_kernel..], ad, &mut g_w, &mut g_bias, &mut g_normed);
                jac[bo.up_kernel..bo.up_kernel + g_w.len()].copy_from_slice(&g_w);
                jac[bo.up_bias..bo.up_bias + ad].copy_from_slice(&g_bias);
            }
            let mut g_prev = g_h.clone();
            {
                let (gs, rest) = jac[bo.scale..].split_at_mut(d);
                let gb = &mut rest[..d];
                self.layer_norm_backward(&g_normed, &t.xhat[bi], &t.inv_std[bi], &p[bo.scale..bo.scale + d], gs, gb, &mut g_prev);
            }
            g_h = g_prev;
        }

        // Embedding.
        for c in 0..d {
            jac[o.embedding + c] = (0..n).map(|i| g_h[c * n + i] * x[i] as f64).sum();
        }
        a * ln0 + b * ln_phi
    }

    fn amplitude_key(&self, x: &[i8]) -> u64 {
        let bits = config_bits(x);
        if self.symmetric {
            self.lattice.canonical_bits(bits)
        } else {
            bits
        }
    }

    /// The reference maximum and its global spin flip, which has the same `|ψ₀|`.
    /// Alternating between them keeps both magnetization sectors populated when
    /// the reference nodes separate them.
    fn preferred_starts(&self) -> Vec<Vec<i8>> {
        if !self.reference.has_nodes() {
            return Vec::new();
        }
        let x = self.reference.max_amplitude_configuration();
        let flipped = x.iter().map(|s| -s).collect();
        vec![x, flipped]
    }
}

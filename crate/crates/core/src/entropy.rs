//! Coding distributions for anchor attributes.
//!
//! The hyper-decoder maps the plane feature and the PC3 encoding to a mean,
//! a scale and a quantization step for the first feature chunk, the offsets
//! and the scaling. The remaining four feature chunks are predicted by the
//! channel-wise autoregressive models, each conditioned on the chunks
//! decoded before it.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

use rand::Rng;

use crate::error::{CodecError, Result};
use crate::hyperprior::{FourierVector, PlaneFeature, FOURIER_DIM, PLANE_FEATURE_DIM};
use crate::mlp::Mlp;
use crate::rangecoder::{apportion, CdfTable, MAX_ALPHABET};
use crate::scene::{FEATURE_DIM, NUM_OFFSETS, SCALING_DIM};

pub const SIGMA_MIN: f64 = 1e-4;
pub const Q_MIN: f64 = 1e-4;
pub const Q_MAX: f64 = 10.0;
/// Smallest probability charged by the rate estimate; equals one count of a 16-bit table.
pub const P_FLOOR: f64 = 1.0 / 65536.0;
/// Largest magnitude of a quantized attribute symbol.
pub const SYMBOL_CAP: i32 = (1 << 15) - 1;
/// Raw bits written after an escape symbol.
pub const ESCAPE_BITS: u32 = 32;

pub const CHUNKS: usize = 5;
pub const CHUNK_SIZE: usize = FEATURE_DIM / CHUNKS;
pub const OFFSET_DIM: usize = 3 * NUM_OFFSETS;

pub const HYPER_INPUT: usize = PLANE_FEATURE_DIM + FOURIER_DIM;
pub const HYPER_HIDDEN: usize = 96;
pub const CARM_HIDDEN: usize = 64;
pub const ARM_HIDDEN: usize = 32;
pub const ARM_CONTEXT: usize = 4;

/// Attribute groups coded from the hyper-decoder, with their widths, in
/// output order.
pub const HYPER_GROUPS: [usize; 3] = [CHUNK_SIZE, OFFSET_DIM, SCALING_DIM];
/// Raw outputs per group: mean and scale per element plus one step.
pub const fn group_outputs(dim: usize) -> usize {
    2 * dim + 1
}
pub const HYPER_OUTPUT: usize = group_outputs(CHUNK_SIZE) + group_outputs(OFFSET_DIM) + group_outputs(SCALING_DIM);
pub const CARM_OUTPUT: usize = group_outputs(CHUNK_SIZE);

/// Gaussian tail, in standard deviations, beyond which symbols go through the escape.
const TAIL_SIGMAS: f64 = 5.5;
/// Largest half-width of an attribute alphabet.
const MAX_HALF_WIDTH: i32 = 4096;

/// Mean and scale per element and one quantization step for the group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub q: f64,
}

impl GroupParams {
    /// Squashes `[mu.., raw_sigma.., raw_q]`.
    pub fn from_raw(raw: &[f64]) -> Self {
        let dim = (raw.len() - 1) / 2;
        GroupParams {
            mu: raw[..dim].to_vec(),
            sigma: raw[dim..2 * dim].iter().map(|&s| sigma_from_raw(s)).collect(),
            q: q_from_raw(raw[2 * dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigma_from_raw(s: f64) -> f64 {
    softplus(s).max(SIGMA_MIN)
}

/// `d sigma / d raw`, zero where the floor is active.
pub fn sigma_from_raw_grad(s: f64) -> f64 {
    if softplus(s) > SIGMA_MIN {
        sigmoid(s)
    } else {
        0.0
    }
}

pub fn q_from_raw(t: f64) -> f64 {
    t.exp().clamp(Q_MIN, Q_MAX)
}

/// `d q / d raw`, zero where the clamp is active.
pub fn q_from_raw_grad(t: f64) -> f64 {
    let e = t.exp();
    if e > Q_MIN && e < Q_MAX {
        e
    } else {
        0.0
    }
}

/// All learned networks of the codec.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// Hyper-decoder: `[g, gamma]` to the three hyper groups.
    pub hyper: Mlp,
    /// Autoregressive predictors for feature chunks 2..=5.
    pub carm: Vec<Mlp>,
    /// Spatial autoregressive model for plane entries, shared by every
    /// sub-plane and channel.
    pub arm: Mlp,
}

impl ModelWeights {
    pub fn hyper_dims() -> Vec<usize> {
        vec![HYPER_INPUT, HYPER_HIDDEN, HYPER_HIDDEN, HYPER_OUTPUT]
    }

    /// Layer widths of the predictor for chunk `i` (2..=5).
    pub fn carm_dims(i: usize) -> Vec<usize> {
        vec![
            HYPER_INPUT + CHUNK_SIZE * (i - 1),
            CARM_HIDDEN,
            CARM_HIDDEN,
            CARM_OUTPUT,
        ]
    }

    pub fn arm_dims() -> Vec<usize> {
        vec![ARM_CONTEXT, ARM_HIDDEN, ARM_HIDDEN, 2]
    }

    pub fn zeros() -> Self {
        ModelWeights {
            hyper: Mlp::zeros(&Self::hyper_dims()),
            carm: (2..=CHUNKS).map(|i| Mlp::zeros(&Self::carm_dims(i))).collect(),
            arm: Mlp::zeros(&Self::arm_dims()),
        }
    }

    pub fn init(rng: &mut impl Rng) -> Self {
        ModelWeights {
            hyper: Mlp::init(&Self::hyper_dims(), 0.1, rng),
            carm: (2..=CHUNKS).map(|i| Mlp::init(&Self::carm_dims(i), 0.1, rng)).collect(),
            arm: Mlp::init(&Self::arm_dims(), 0.1, rng),
        }
    }

    /// Networks in serialization order: hyper, chunk predictors, plane model.
    pub fn networks(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.hyper];
        v.extend(self.carm.iter());
        v.push(&self.arm);
        v
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.hyper];
        v.extend(self.carm.iter_mut());
        v.push(&mut self.arm);
        v
    }

    pub fn from_networks(mut nets: Vec<Mlp>) -> Result<Self> {
        if nets.len() != CHUNKS + 1 {
            return Err(CodecError::Format(format!(
                "expected {} networks, got {}",
                CHUNKS + 1,
                nets.len()
            )));
        }
        let arm = nets.pop().unwrap();
        let carm = nets.split_off(1);
        let hyper = nets.pop().unwrap();
        let w = ModelWeights { hyper, carm, arm };
        let expected = Self::zeros();
        for (got, want) in w.networks().iter().zip(expected.networks()) {
            if got.dims() != want.dims() {
                return Err(CodecError::Format(format!(
                    "network dims {:?} do not match {:?}",
                    got.dims(),
                    want.dims()
                )));
            }
        }
        Ok(w)
    }

    pub fn round_to_f32(&mut self) {
        self.networks_mut().into_iter().for_each(Mlp::round_to_f32);
    }

    pub fn is_finite(&self) -> bool {
        self.networks().iter().all(|m| m.is_finite())
    }
}

/// Hyper-decoder input `[g, gamma]`.
pub fn hyper_input(g: &PlaneFeature, gamma: &FourierVector) -> [f64; HYPER_INPUT] {
    let mut x = [0.0; HYPER_INPUT];
    x[..PLANE_FEATURE_DIM].copy_from_slice(g);
    x[PLANE_FEATURE_DIM..].copy_from_slice(gamma);
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub chunk1: GroupParams,
    pub offsets: GroupParams,
    pub scaling: GroupParams,
}

/// Splits hyper-decoder output into its three groups.
pub fn split_hyper_output(raw: &[f64]) -> HyperParams {
    let a = group_outputs(CHUNK_SIZE);
    let b = a + group_outputs(OFFSET_DIM);
    HyperParams {
        chunk1: GroupParams::from_raw(&raw[..a]),
        offsets: GroupParams::from_raw(&raw[a..b]),
        scaling: GroupParams::from_raw(&raw[b..]),
    }
}

pub fn hyper_decode(weights: &ModelWeights, g: &PlaneFeature, gamma: &FourierVector) -> Result<HyperParams> {
    let raw = weights.hyper.forward(&hyper_input(g, gamma));
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::Numeric("hyper-decoder output".into()));
    }
    Ok(split_hyper_output(&raw))
}

/// Input of the chunk-`i` predictor: `[g, gamma, chunks 1..i-1]`.
pub fn carm_input(g: &PlaneFeature, gamma: &FourierVector, decoded: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(HYPER_INPUT + decoded.len());
    x.extend_from_slice(g);
    x.extend_from_slice(gamma);
    x.extend_from_slice(decoded);
    x
}

/// Parameters for feature chunk `chunk` (2..=5) given the dequantized
/// values of chunks `1..chunk`.
pub fn carm_predict(
    weights: &ModelWeights,
    chunk: usize,
    g: &PlaneFeature,
    gamma: &FourierVector,
    decoded: &[f64],
) -> Result<GroupParams> {
    if !(2..=CHUNKS).contains(&chunk) || decoded.len() != CHUNK_SIZE * (chunk - 1) {
        return Err(CodecError::Shape(format!(
            "chunk {chunk} needs {} context values, got {}",
            CHUNK_SIZE * chunk.saturating_sub(1),
            decoded.len()
        )));
    }
    let raw = weights.carm[chunk - 2].forward(&carm_input(g, gamma, decoded));
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::Numeric(format!("chunk {chunk} predictor output")));
    }
    Ok(GroupParams::from_raw(&raw))
}

/// Symbols `round_half_even((a - mu) / q)` and reconstructions `mu + n q`.
pub fn quantize_attr(a: &[f64], mu: &[f64], q: f64) -> Result<(Vec<i32>, Vec<f64>)> {
    let mut syms = Vec::with_capacity(a.len());
    let mut rec = Vec::with_capacity(a.len());
    for (&x, &m) in a.iter().zip(mu) {
        let n = quantize_scalar(x, m, q)?;
        syms.push(n);
        rec.push(m + n as f64 * q);
    }
    Ok((syms, rec))
}

pub fn quantize_scalar(a: f64, mu: f64, q: f64) -> Result<i32> {
    let n = ((a - mu) / q).round_ties_even();
    if !n.is_finite() || n.abs() > SYMBOL_CAP as f64 {
        return Err(CodecError::Range(format!(
            "attribute {a} with mean {mu} and step {q} is outside the symbol range"
        )));
    }
    Ok(n as i32)
}

/// Upper tail `P(Z > x)` of the standard normal.
#[inline]
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() * 0.398_942_280_401_432_7
}

/// `P(lo < Z < hi)` for a standard normal, computed on whichever tail keeps precision.
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        normal_sf(lo) - normal_sf(hi)
    } else if hi <= 0.0 {
        normal_sf(-hi) - normal_sf(-lo)
    } else {
        1.0 - normal_sf(-lo) - normal_sf(hi)
    }
}

/// Mass of a zero-mean Gaussian with scale `sigma` on the bin of width `q`
/// centred at `n q`.
pub fn gaussian_bin_prob(n: i32, sigma: f64, q: f64) -> f64 {
    let c = n as f64 * q;
    normal_interval((c - 0.5 * q) / sigma, (c + 0.5 * q) / sigma)
}

/// Bits charged for probability `p` by the rate estimate.
#[inline]
pub fn rate_bits(p: f64) -> f64 {
    -p.max(P_FLOOR).log2()
}

/// `d rate_bits / d p`, zero under the floor.
#[inline]
pub fn rate_bits_grad(p: f64) -> f64 {
    if p > P_FLOOR {
        -1.0 / (p * LN_2)
    } else {
        0.0
    }
}

/// Half-width `M` of the alphabet `[-M, M]` used for a symbol with these parameters.
pub fn attr_half_width(sigma: f64, q: f64) -> i32 {
    let m = (TAIL_SIGMAS * sigma / q).ceil();
    if m.is_finite() {
        (m as i32).clamp(1, MAX_HALF_WIDTH)
    } else {
        MAX_HALF_WIDTH
    }
}

/// Table over `[n_min, n_max]` plus a final escape symbol holding the tail mass.
pub fn build_cdf_table(sigma: f64, q: f64, n_min: i32, n_max: i32) -> Result<CdfTable> {
    let mut pmf = Vec::new();
    gaussian_pmf(sigma, q, n_min, n_max, &mut pmf)?;
    CdfTable::from_pmf(&pmf)
}

fn gaussian_pmf(sigma: f64, q: f64, n_min: i32, n_max: i32, pmf: &mut Vec<f64>) -> Result<()> {
    if n_min > 0 || n_max < 0 {
        return Err(CodecError::Range(format!("alphabet [{n_min}, {n_max}] must contain 0")));
    }
    let size = (n_max as i64 - n_min as i64 + 2) as usize;
    if size > MAX_ALPHABET {
        return Err(CodecError::Range(format!("alphabet of {size} symbols")));
    }
    pmf.clear();
    let mut inside = 0.0;
    for n in n_min..=n_max {
        let p = gaussian_bin_prob(n, sigma, q);
        inside += p;
        pmf.push(p);
    }
    let tail = normal_sf((n_max as f64 + 0.5) * q / sigma) + normal_sf((-(n_min as f64) + 0.5) * q / sigma);
    pmf.push(tail.max(1.0 - inside).clamp(0.0, 1.0));
    Ok(())
}

/// Reusable per-symbol table builder for the attribute stream.
#[derive(Debug, Default)]
pub struct AttrTableBuilder {
    pmf: Vec<f64>,
    freqs: Vec<u32>,
    order: Vec<usize>,
    cdf: Vec<u32>,
}

/// A table for one attribute symbol: `[-half, half]` then the escape.
pub struct AttrTable<'a> {
    pub half: i32,
    pub cdf: &'a [u32],
}

impl AttrTable<'_> {
    pub fn escape(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn index_of(&self, n: i32) -> Option<usize> {
        (n.abs() <= self.half).then(|| (n + self.half) as usize)
    }

    pub fn cum(&self, s: usize) -> u32 {
        self.cdf[s]
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cdf[s + 1] - self.cdf[s]
    }
}

impl AttrTableBuilder {
    pub fn build(&mut self, sigma: f64, q: f64) -> Result<AttrTable<'_>> {
        let half = attr_half_width(sigma, q);
        gaussian_pmf(sigma, q, -half, half, &mut self.pmf)?;
        apportion(&self.pmf, &mut self.freqs, &mut self.order)?;
        self.cdf.clear();
        self.cdf.push(0);
        let mut acc = 0;
        for &f in &self.freqs {
            acc += f;
            self.cdf.push(acc);
        }
        Ok(AttrTable { half, cdf: &self.cdf })
    }
}

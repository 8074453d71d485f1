//! Rate-distortion training of the planes and all networks.
//!
//! Each step samples a rate batch (USRO: any anchor, ViSRO: visible anchors
//! only) and a distortion batch of visible anchors, which stands in for the
//! anchors a rendered training view would touch. Quantizers are relaxed with
//! additive uniform noise on the rate path. On the distortion path the
//! rounding offset of every attribute is held fixed for the step, so the
//! reconstruction error `q * delta` is a smooth function of the step size.
//! The plane rate is evaluated only on steps where `ardo_gate` fires.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::{
    hyper_input, normal_interval, normal_pdf, q_from_raw, q_from_raw_grad, rate_bits, rate_bits_grad, sigma_from_raw,
    sigma_from_raw_grad, ModelWeights, CHUNKS, CHUNK_SIZE, Q_MAX, Q_MIN,
};
use crate::error::{CodecError, Result};
use crate::frame::SceneFrame;
use crate::hyperprior::{
    fourier_encode, quantize_planes, query_with, resolution_for, stencils, sub_plane_source, FourierVector,
    MultiScalePlanes, QuantizedPlanes, Stencil, PLANE_CHANNELS, PLANE_FEATURE_DIM, SUB_PLANES,
};
use crate::mlp::{Mlp, MlpCache};
use crate::pca::{PcaBasis, SceneBounds};
use crate::planecodec::{extract_context, laplace_b_grad, laplace_from_raw, laplace_interval};
use crate::scene::{AnchorSet, NormStats, ATTR_DIM};

/// Attribute values per anchor: 50 + 30 + 6.
pub const PARAMS_PER_ANCHOR: f64 = ATTR_DIM as f64;
/// Feature values the chunk predictors can condition on (chunks 1..4).
const CONTEXT_DIM: usize = CHUNK_SIZE * (CHUNKS - 1);
/// Learning rates decay along a cosine to this fraction of their start value.
const COSINE_FLOOR: f64 = 0.1;
/// Index of the plane model in `ModelWeights::networks()`.
const ARM_NET: usize = CHUNKS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Uniform over all anchors.
    Usro,
    /// Uniform over anchors with positive visibility.
    Visro,
}

impl FromStr for SamplingMode {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "usro" => Ok(SamplingMode::Usro),
            "visro" => Ok(SamplingMode::Visro),
            _ => Err(CodecError::Config(format!("unknown sampling mode {s:?}"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Usro => "usro",
            SamplingMode::Visro => "visro",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Rate weight; the useful range is about 0.002 to 0.04.
    pub lambda_r: f64,
    /// Extra weight on plane bits.
    pub lambda_tri: f64,
    /// The plane rate is evaluated every `ardo_interval` steps. It is not
    /// rescaled by the interval on the steps where it is evaluated.
    pub ardo_interval: usize,
    pub sampling: SamplingMode,
    pub sample_fraction: f64,
    pub steps: usize,
    pub lr_planes: f64,
    pub lr_mlp: f64,
    pub seed: u64,
    /// Anchor counts mapped to the smallest and largest plane resolution.
    pub min_count: usize,
    pub max_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_r: 0.01,
            lambda_tri: 10.0,
            ardo_interval: 4,
            sampling: SamplingMode::Usro,
            sample_fraction: 0.05,
            steps: 2000,
            lr_planes: 1e-2,
            lr_mlp: 1e-3,
            seed: 0,
            min_count: 1000,
            max_count: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CodecError::Config(m));
        if !(self.lambda_r > 0.0 && self.lambda_r.is_finite()) {
            return bad(format!("lambda_r must be positive, got {}", self.lambda_r));
        }
        if !(self.lambda_tri >= 0.0 && self.lambda_tri.is_finite()) {
            return bad(format!("lambda_tri must be non-negative, got {}", self.lambda_tri));
        }
        if self.ardo_interval == 0 {
            return bad("ardo interval must be at least 1".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!(
                "sample fraction must be in (0, 1], got {}",
                self.sample_fraction
            ));
        }
        if !(self.lr_planes >= 0.0 && self.lr_mlp >= 0.0 && self.lr_planes.is_finite() && self.lr_mlp.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Weight of the mask loss in the original formulation,
    /// `max(1e-3, 0.3 * lambda_r)`. The mask is an input here, so it is unused.
    pub fn lambda_m(&self) -> f64 {
        (0.3 * self.lambda_r).max(1e-3)
    }

    /// Cosine-decayed learning rate at `step`.
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        if self.steps <= 1 {
            return base;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        base * (COSINE_FLOOR + (1.0 - COSINE_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// Per-step training record; also the row format of the training CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    /// Mean squared attribute error over the distortion batch, normalized space.
    pub distortion: f64,
    /// Bits of the sampled anchors (not upscaled).
    pub attr_bits: f64,
    /// Bits of all planes; zero on steps where the gate is off.
    pub plane_bits: f64,
    pub total: f64,
    pub gated: bool,
}

pub fn ardo_gate(step: usize, interval: usize) -> bool {
    step.is_multiple_of(interval.max(1))
}

/// Normalized rate: sampled bits upscaled by `1 / fraction`, plus the
/// weighted plane bits when `include_plane`, over `86 N`.
pub fn rate_loss(
    attr_bits: f64,
    plane_bits: f64,
    n: usize,
    include_plane: bool,
    fraction: f64,
    lambda_tri: f64,
) -> f64 {
    let planes = if include_plane { lambda_tri * plane_bits } else { 0.0 };
    (attr_bits / fraction + planes) / (PARAMS_PER_ANCHOR * n as f64)
}

/// Mean squared difference over all entries.
pub fn distortion_proxy(original: &[[f64; ATTR_DIM]], dequantized: &[[f64; ATTR_DIM]]) -> f64 {
    if original.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (a, b) in original.iter().zip(dequantized) {
        for (x, y) in a.iter().zip(b) {
            acc += (x - y) * (x - y);
        }
    }
    acc / (original.len() * ATTR_DIM) as f64
}

/// Samples `max(1, round(fraction * pool))` distinct anchors.
pub fn sample_anchors(mode: SamplingMode, fraction: f64, set: &AnchorSet, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let vis: Vec<u32> = set.anchors().iter().map(|a| a.visibility).collect();
    sample_by_visibility(mode, fraction, &vis, rng)
}

pub fn sample_by_visibility(
    mode: SamplingMode,
    fraction: f64,
    visibility: &[u32],
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if visibility.is_empty() {
        return Err(CodecError::Config("cannot sample from an empty set".into()));
    }
    let pool: Vec<usize> = match mode {
        SamplingMode::Usro => (0..visibility.len()).collect(),
        SamplingMode::Visro => (0..visibility.len()).filter(|&i| visibility[i] > 0).collect(),
    };
    if pool.is_empty() {
        return Err(CodecError::Config("no visible anchors to sample".into()));
    }
    let count = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len());
    Ok(index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

/// Gradients in the layout of the parameters: per scale for the planes, per
/// network (in `ModelWeights::networks()` order) for the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub planes: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(planes: &MultiScalePlanes, weights: &ModelWeights) -> Self {
        Gradients {
            planes: planes.scales.iter().map(|g| vec![0.0; g.data.len()]).collect(),
            weights: weights.networks().iter().map(|m| vec![0.0; m.num_params()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.planes
            .iter()
            .chain(&self.weights)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Values fixed the first time a batch slot is evaluated.
#[derive(Debug, Clone)]
struct Frozen {
    /// Reconstructed feature chunks 1..4 fed to the chunk predictors.
    context: [f64; CONTEXT_DIM],
    /// Rounding offset `round(r) - r` of every attribute, `r = (a - mu) / q`.
    delta: [f64; ATTR_DIM],
}

/// Everything random about one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub step: usize,
    pub gated: bool,
    pub rate_anchors: Vec<usize>,
    pub dist_anchors: Vec<usize>,
    /// Uniform noise in [-1/2, 1/2) per attribute of each rate anchor.
    pub attr_noise: Vec<[f64; ATTR_DIM]>,
    /// Uniform noise per plane entry, per scale.
    pub plane_noise: Vec<Vec<f64>>,
    frozen: Vec<Option<Frozen>>,
}

/// Scale factors turning bits and squared errors into loss.
#[derive(Debug, Clone, Copy)]
struct Weights {
    rate: f64,
    dist: f64,
    plane: f64,
}

#[derive(Default)]
struct Workspace {
    cache: MlpCache,
    dx: Vec<f64>,
    draw: Vec<f64>,
    input: Vec<f64>,
}

/// The training problem for one scene: normalized attributes, visibility and
/// the fixed plane stencils and PC3 encodings of every anchor.
#[derive(Debug, Clone)]
pub struct Objective {
    n: usize,
    base: usize,
    attrs: Vec<[f64; ATTR_DIM]>,
    visibility: Vec<u32>,
    stencils: Vec<[Stencil; 2]>,
    gammas: Vec<FourierVector>,
}

impl Objective {
    pub fn new(base: usize, coords: &[[f64; 3]], attrs: Vec<[f64; ATTR_DIM]>, visibility: Vec<u32>) -> Result<Self> {
        if coords.len() != attrs.len() || attrs.len() != visibility.len() || attrs.is_empty() {
            return Err(CodecError::Shape(
                "coordinates, attributes and visibility must match".into(),
            ));
        }
        Ok(Objective {
            n: attrs.len(),
            base,
            stencils: coords.iter().map(|c| stencils(base, c[0], c[1])).collect(),
            gammas: coords.iter().map(|c| fourier_encode(c[2])).collect(),
            attrs,
            visibility,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn base(&self) -> usize {
        self.base
    }

    /// Draws the batches and noise of `step`.
    pub fn sample_batch(&self, step: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
        let rate_anchors = sample_by_visibility(cfg.sampling, cfg.sample_fraction, &self.visibility, rng)?;
        // Distortion is only observed where training views see the scene.
        let dist_mode = if self.visibility.iter().any(|&v| v > 0) {
            SamplingMode::Visro
        } else {
            SamplingMode::Usro
        };
        let dist_anchors = sample_by_visibility(dist_mode, cfg.sample_fraction, &self.visibility, rng)?;
        let attr_noise = rate_anchors
            .iter()
            .map(|_| std::array::from_fn(|_| rng.random::<f64>() - 0.5))
            .collect();
        let side = |r: usize| r * self.base;
        let plane_noise = crate::hyperprior::PLANE_SCALES
            .iter()
            .map(|&r| {
                (0..PLANE_CHANNELS * side(r) * side(r))
                    .map(|_| rng.random::<f64>() - 0.5)
                    .collect()
            })
            .collect();
        let slots = rate_anchors.len() + dist_anchors.len();
        Ok(Batch {
            step,
            gated: ardo_gate(step, cfg.ardo_interval),
            rate_anchors,
            dist_anchors,
            attr_noise,
            plane_noise,
            frozen: vec![None; slots],
        })
    }

    fn loss_weights(&self, cfg: &TrainConfig, batch: &Batch) -> Weights {
        let denom = PARAMS_PER_ANCHOR * self.n as f64;
        Weights {
            rate: cfg.lambda_r / (cfg.sample_fraction * denom),
            dist: 1.0 / (batch.dist_anchors.len().max(1) as f64 * PARAMS_PER_ANCHOR),
            plane: if batch.gated {
                cfg.lambda_r * cfg.lambda_tri / denom
            } else {
                0.0
            },
        }
    }

    fn noisy_planes(&self, planes: &MultiScalePlanes, batch: &Batch) -> MultiScalePlanes {
        let mut p = planes.clone();
        for (g, u) in p.scales.iter_mut().zip(&batch.plane_noise) {
            g.data.iter_mut().zip(u).for_each(|(v, u)| *v += u);
        }
        p
    }

    /// Loss of the batch and, if requested, its gradients (accumulated into `grads`).
    pub fn evaluate(
        &self,
        planes: &MultiScalePlanes,
        weights: &ModelWeights,
        batch: &mut Batch,
        cfg: &TrainConfig,
        mut grads: Option<&mut Gradients>,
    ) -> Result<LossReport> {
        if planes.base != self.base {
            return Err(CodecError::Shape(format!(
                "planes have base {} but the problem uses {}",
                planes.base, self.base
            )));
        }
        let k = self.loss_weights(cfg, batch);
        let noisy = self.noisy_planes(planes, batch);
        let mut ws = Workspace::default();
        let mut attr_bits = 0.0;
        let mut sq = 0.0;
        let nr = batch.rate_anchors.len();
        for s in 0..nr + batch.dist_anchors.len() {
            let (i, noise, kr, kd) = if s < nr {
                (batch.rate_anchors[s], Some(&batch.attr_noise[s]), k.rate, 0.0)
            } else {
                (batch.dist_anchors[s - nr], None, 0.0, k.dist)
            };
            let (b, e) = self.anchor_terms(
                &noisy,
                weights,
                i,
                noise,
                kr,
                kd,
                &mut batch.frozen[s],
                grads.as_deref_mut(),
                &mut ws,
            )?;
            attr_bits += b;
            sq += e;
        }
        let plane_bits = if batch.gated {
            self.plane_terms(&noisy, &weights.arm, k.plane, grads, &mut ws)?
        } else {
            0.0
        };
        let distortion = sq * k.dist;
        let total = distortion
            + cfg.lambda_r
                * rate_loss(
                    attr_bits,
                    plane_bits,
                    self.n,
                    batch.gated,
                    cfg.sample_fraction,
                    cfg.lambda_tri,
                );
        if !total.is_finite() {
            return Err(CodecError::Divergence {
                step: batch.step,
                detail: format!("loss is {total}"),
            });
        }
        Ok(LossReport {
            step: batch.step,
            distortion,
            attr_bits,
            plane_bits,
            total,
            gated: batch.gated,
        })
    }

    /// Rate bits and squared error of one anchor. Rate terms are weighted by
    /// `kr` and only computed when `noise` is given; distortion terms by `kd`.
    #[allow(clippy::too_many_arguments)]
    fn anchor_terms(
        &self,
        noisy: &MultiScalePlanes,
        weights: &ModelWeights,
        i: usize,
        noise: Option<&[f64; ATTR_DIM]>,
        kr: f64,
        kd: f64,
        frozen: &mut Option<Frozen>,
        mut grads: Option<&mut Gradients>,
        ws: &mut Workspace,
    ) -> Result<(f64, f64)> {
        let st = &self.stencils[i];
        let g = query_with(noisy, st);
        let gamma = &self.gammas[i];
        let y = &self.attrs[i];
        let fresh = frozen.is_none();
        let mut fz = frozen.take().unwrap_or(Frozen {
            context: [0.0; CONTEXT_DIM],
            delta: [0.0; ATTR_DIM],
        });
        let mut dg = [0.0; PLANE_FEATURE_DIM];
        let mut bits = 0.0;
        let mut sq = 0.0;
        let mut rec = [0.0; ATTR_DIM];

        // Hyper-decoder groups: chunk 1, offsets, scaling.
        let groups: [(std::ops::Range<usize>, std::ops::Range<usize>); 3] = [
            (0..21, 0..CHUNK_SIZE),
            (21..82, crate::attributes::OFFSETS_RANGE),
            (82..95, crate::attributes::SCALING_RANGE),
        ];
        let x = hyper_input(&g, gamma);
        let raw = weights.hyper.forward_cached(&x, &mut ws.cache);
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::Numeric("hyper-decoder output".into()));
        }
        ws.draw.clear();
        ws.draw.resize(raw.len(), 0.0);
        for (rr, slots) in groups.iter().cloned() {
            let (b, e) = group_terms(
                &raw[rr.clone()],
                &y[slots.clone()],
                noise.map(|u| &u[slots.clone()]),
                &mut fz.delta[slots.clone()],
                fresh,
                kr,
                kd,
                &mut ws.draw[rr],
                &mut rec[slots],
            );
            bits += b;
            sq += e;
        }
        if fresh {
            fz.context[..CHUNK_SIZE].copy_from_slice(&rec[..CHUNK_SIZE]);
        }
        if let Some(gr) = grads.as_deref_mut() {
            ws.dx.clear();
            ws.dx.resize(x.len(), 0.0);
            weights
                .hyper
                .backward(&mut ws.cache, &ws.draw, &mut gr.weights[0], Some(&mut ws.dx));
            dg.iter_mut().zip(&ws.dx).for_each(|(d, v)| *d += v);
        }

        for chunk in 2..=CHUNKS {
            let net = &weights.carm[chunk - 2];
            let slots = crate::attributes::chunk_range(chunk);
            ws.input.clear();
            ws.input.extend_from_slice(&g);
            ws.input.extend_from_slice(gamma);
            ws.input.extend_from_slice(&fz.context[..CHUNK_SIZE * (chunk - 1)]);
            let raw = net.forward_cached(&ws.input, &mut ws.cache);
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(CodecError::Numeric(format!("chunk {chunk} predictor output")));
            }
            ws.draw.clear();
            ws.draw.resize(raw.len(), 0.0);
            let (b, e) = group_terms(
                raw,
                &y[slots.clone()],
                noise.map(|u| &u[slots.clone()]),
                &mut fz.delta[slots.clone()],
                fresh,
                kr,
                kd,
                &mut ws.draw,
                &mut rec[slots.clone()],
            );
            bits += b;
            sq += e;
            if fresh && chunk < CHUNKS {
                fz.context[slots.clone()].copy_from_slice(&rec[slots]);
            }
            if let Some(gr) = grads.as_deref_mut() {
                ws.dx.clear();
                ws.dx.resize(ws.input.len(), 0.0);
                net.backward(&mut ws.cache, &ws.draw, &mut gr.weights[chunk - 1], Some(&mut ws.dx));
                dg.iter_mut().zip(&ws.dx).for_each(|(d, v)| *d += v);
            }
        }

        if let Some(gr) = grads {
            for (s, grid) in noisy.scales.iter().enumerate() {
                let area = grid.side * grid.side;
                for c in 0..PLANE_CHANNELS {
                    let d = dg[s * PLANE_CHANNELS + c];
                    if d == 0.0 {
                        continue;
                    }
                    for k in 0..4 {
                        gr.planes[s][c * area + st[s].nodes[k]] += st[s].weights[k] * d;
                    }
                }
            }
        }
        *frozen = Some(fz);
        Ok((bits, sq))
    }

    /// Bits of every plane entry given its noisy causal neighbours in its
    /// sub-plane, weighted by `kp` in the gradients.
    fn plane_terms(
        &self,
        noisy: &MultiScalePlanes,
        arm: &Mlp,
        kp: f64,
        mut grads: Option<&mut Gradients>,
        ws: &mut Workspace,
    ) -> Result<f64> {
        let side = self.base;
        let mut view = vec![0.0; side * side];
        let mut map = vec![0usize; side * side];
        let mut dctx = [0.0; 4];
        let mut bits = 0.0;
        for sub in 0..SUB_PLANES {
            let scale = usize::from(sub > 0);
            for c in 0..PLANE_CHANNELS {
                for i in 0..side {
                    for j in 0..side {
                        let (_, k) = sub_plane_source(side, sub, c, i, j);
                        view[i * side + j] = noisy.scales[scale].data[k];
                        map[i * side + j] = k;
                    }
                }
                for i in 0..side {
                    for j in 0..side {
                        let ctx = extract_context(&view, side, i, j);
                        let raw = arm.forward_cached(&ctx, &mut ws.cache);
                        let p = laplace_from_raw(raw);
                        if !p.mu.is_finite() || !p.b.is_finite() {
                            return Err(CodecError::Numeric("plane model output".into()));
                        }
                        let rb = raw[1];
                        let y = view[i * side + j];
                        let (lo, hi) = (y - 0.5, y + 0.5);
                        let prob = laplace_interval(lo, hi, &p);
                        bits += rate_bits(prob);
                        let Some(gr) = grads.as_deref_mut() else { continue };
                        let gb = kp * rate_bits_grad(prob);
                        if gb == 0.0 {
                            continue;
                        }
                        let dens = |x: f64| (-(x - p.mu).abs() / p.b).exp() / (2.0 * p.b);
                        let (fh, fl) = (dens(hi), dens(lo));
                        let dp_dy = fh - fl;
                        let dp_db = -(fh * (hi - p.mu) - fl * (lo - p.mu)) / p.b;
                        let draw = [-gb * dp_dy, gb * dp_db * laplace_b_grad(rb)];
                        arm.backward(&mut ws.cache, &draw, &mut gr.weights[ARM_NET], Some(&mut dctx));
                        let gp = &mut gr.planes[scale];
                        gp[map[i * side + j]] += gb * dp_dy;
                        if i > 0 {
                            if j > 0 {
                                gp[map[(i - 1) * side + j - 1]] += dctx[0];
                            }
                            gp[map[(i - 1) * side + j]] += dctx[1];
                            if j + 1 < side {
                                gp[map[(i - 1) * side + j + 1]] += dctx[2];
                            }
                        }
                        if j > 0 {
                            gp[map[i * side + j - 1]] += dctx[3];
                        }
                    }
                }
            }
        }
        Ok(bits)
    }

    /// Plane bits of entry `(sub, c, i, j)` alone, read straight from the full planes.
    fn plane_entry_bits(&self, noisy: &MultiScalePlanes, arm: &Mlp, sub: usize, c: usize, i: usize, j: usize) -> f64 {
        let side = self.base;
        let value = |i: usize, j: usize| {
            let (s, k) = sub_plane_source(side, sub, c, i, j);
            noisy.scales[s].data[k]
        };
        let mut ctx = [0.0; 4];
        if i > 0 {
            if j > 0 {
                ctx[0] = value(i - 1, j - 1);
            }
            ctx[1] = value(i - 1, j);
            if j + 1 < side {
                ctx[2] = value(i - 1, j + 1);
            }
        }
        if j > 0 {
            ctx[3] = value(i, j - 1);
        }
        let p = laplace_from_raw(&arm.forward(&ctx));
        let y = value(i, j);
        rate_bits(laplace_interval(y - 0.5, y + 0.5, &p))
    }
}

/// Rate and distortion terms of one attribute group with raw outputs
/// `[mu.., sigma_raw.., q_raw]`. Writes reconstructions into `rec` and
/// gradients with respect to the raw outputs into `draw`.
#[allow(clippy::too_many_arguments)]
fn group_terms(
    raw: &[f64],
    y: &[f64],
    noise: Option<&[f64]>,
    delta: &mut [f64],
    fresh: bool,
    kr: f64,
    kd: f64,
    draw: &mut [f64],
    rec: &mut [f64],
) -> (f64, f64) {
    let dim = y.len();
    let t = raw[2 * dim];
    let q = q_from_raw(t);
    let dq = q_from_raw_grad(t);
    let mut bits = 0.0;
    let mut sq = 0.0;
    for k in 0..dim {
        let mu = raw[k];
        let s_raw = raw[dim + k];
        let sigma = sigma_from_raw(s_raw);
        let r = (y[k] - mu) / q;
        let n = r.round_ties_even();
        rec[k] = mu + n * q;
        if fresh {
            delta[k] = n - r;
        }
        if kd != 0.0 {
            let e = q * delta[k];
            sq += e * e;
            draw[2 * dim] += kd * 2.0 * q * delta[k] * delta[k] * dq;
        }
        if let Some(u) = noise {
            let u = u[k];
            let e = y[k] - mu + u * q;
            let a = (e - 0.5 * q) / sigma;
            let b = (e + 0.5 * q) / sigma;
            let p = normal_interval(a, b);
            bits += rate_bits(p);
            let gb = kr * rate_bits_grad(p);
            if gb != 0.0 {
                let (pa, pb) = (normal_pdf(a), normal_pdf(b));
                let dp_dmu = -(pb - pa) / sigma;
                let dp_dsigma = -(pb * b - pa * a) / sigma;
                let dp_dq = (pb * (u + 0.5) - pa * (u - 0.5)) / sigma;
                draw[k] += gb * dp_dmu;
                draw[dim + k] += gb * dp_dsigma * sigma_from_raw_grad(s_raw);
                draw[2 * dim] += gb * dp_dq * dq;
            }
        }
    }
    (bits, sq)
}

/// First/second-moment adaptive update for one parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// The decodable state produced by training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub basis: PcaBasis,
    pub bounds: SceneBounds,
    pub stats: NormStats,
    /// Real-valued planes at the end of training.
    pub planes: MultiScalePlanes,
    pub quantized: QuantizedPlanes,
    /// Weights rounded to their stored f32 precision.
    pub weights: ModelWeights,
    pub lambda_r: f64,
    pub lambda_tri: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub report: LossReport,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub history: Vec<StepLog>,
    /// Number of steps that evaluated the plane rate.
    pub plane_evaluations: usize,
    pub train_seconds: f64,
}

/// Raw output bias of a fresh group head: unit scale, and a step at the
/// high-rate optimum `q^2 = 6 lambda / ln 2` of a unit-variance source.
fn init_head_biases(net: &mut Mlp, dims: &[usize], lambda_r: f64) {
    let sigma_one = (std::f64::consts::E - 1.0).ln();
    let q0 = (6.0 * lambda_r / std::f64::consts::LN_2).sqrt().clamp(Q_MIN, Q_MAX);
    let bias = net.output_bias_mut();
    let mut off = 0;
    for &d in dims {
        bias[off + d..off + 2 * d].iter_mut().for_each(|b| *b = sigma_one);
        bias[off + 2 * d] = q0.ln();
        off += 2 * d + 1;
    }
}

/// Fresh planes and networks for a problem at base resolution `base`.
pub fn init_model(base: usize, lambda_r: f64, rng: &mut impl Rng) -> (MultiScalePlanes, ModelWeights) {
    let planes = MultiScalePlanes::random(base, rng);
    let mut weights = ModelWeights::init(rng);
    init_head_biases(&mut weights.hyper, &crate::entropy::HYPER_GROUPS, lambda_r);
    for net in &mut weights.carm {
        init_head_biases(net, &[CHUNK_SIZE], lambda_r);
    }
    (planes, weights)
}

pub fn fit(set: &AnchorSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    let frame = SceneFrame::fit(set)?;
    fit_frame(&frame, set, cfg)
}

/// Trains on a set whose frame has already been fitted.
pub fn fit_frame(frame: &SceneFrame, set: &AnchorSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let base = resolution_for(set.len(), cfg.min_count, cfg.max_count);
    let vis = set.anchors().iter().map(|a| a.visibility).collect();
    let problem = Objective::new(base, &frame.coords, frame.normalized(set), vis)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut planes, mut weights) = init_model(base, cfg.lambda_r, &mut rng);

    let mut plane_opt: Vec<Adam> = planes.scales.iter().map(|g| Adam::new(g.data.len())).collect();
    let mut net_opt: Vec<Adam> = weights.networks().iter().map(|m| Adam::new(m.num_params())).collect();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut plane_evaluations = 0;
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let mut batch = problem.sample_batch(step, cfg, &mut rng)?;
        let mut grads = Gradients::zeros(&planes, &weights);
        let report = problem
            .evaluate(&planes, &weights, &mut batch, cfg, Some(&mut grads))
            .map_err(|e| match e {
                CodecError::Numeric(what) => CodecError::Divergence {
                    step,
                    detail: format!("non-finite {what}"),
                },
                other => other,
            })?;
        if !grads.is_finite() {
            return Err(CodecError::Divergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        plane_evaluations += usize::from(report.gated);
        let lr_p = cfg.lr_at(cfg.lr_planes, step);
        let lr_m = cfg.lr_at(cfg.lr_mlp, step);
        for ((g, opt), grad) in planes.scales.iter_mut().zip(&mut plane_opt).zip(&grads.planes) {
            opt.step(&mut g.data, grad, lr_p);
        }
        for (k, (net, opt)) in weights.networks_mut().into_iter().zip(&mut net_opt).enumerate() {
            // The plane model only has a signal on gated steps.
            if k == ARM_NET && !report.gated {
                continue;
            }
            opt.step(net.params_mut(), &grads.weights[k], lr_m);
        }
        history.push(StepLog {
            report,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }

    let quantized = quantize_planes(&planes).map_err(|e| CodecError::Divergence {
        step: cfg.steps,
        detail: e.to_string(),
    })?;
    weights.round_to_f32();
    if !weights.is_finite() {
        return Err(CodecError::Divergence {
            step: cfg.steps,
            detail: "non-finite weights".into(),
        });
    }
    Ok(TrainOutput {
        model: TrainedModel {
            basis: frame.basis.clone(),
            bounds: frame.bounds,
            stats: frame.stats.clone(),
            planes,
            quantized,
            weights,
            lambda_r: cfg.lambda_r,
            lambda_tri: cfg.lambda_tri,
        },
        history,
        plane_evaluations,
        train_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn write_training_log(history: &[StepLog], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,distortion,attr_bits,plane_bits,gated,wall_ms")?;
    for s in history {
        let r = &s.report;
        writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.step,
            r.distortion,
            r.attr_bits,
            r.plane_bits,
            u8::from(r.gated),
            s.wall_ms
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradients of one batch with fp64 central
/// differences, for `samples` parameters of each group (planes, hyper-decoder,
/// chunk predictors, plane model). The noise draws and the rounding offsets
/// are held fixed. Every finite difference is taken over the terms of the
/// loss that depend on the parameter, which keeps cancellation error far
/// below the tolerance. Relative errors use `max(|analytic|, |numeric|)` with
/// a floor of 1e-6 times the group's largest gradient.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    problem: &Objective,
    planes: &MultiScalePlanes,
    weights: &ModelWeights,
    batch: &mut Batch,
    cfg: &TrainConfig,
    epsilon: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let mut grads = Gradients::zeros(planes, weights);
    problem.evaluate(planes, weights, batch, cfg, Some(&mut grads))?;
    let k = problem.loss_weights(cfg, batch);
    let slots: Vec<(usize, bool)> = batch
        .rate_anchors
        .iter()
        .map(|&i| (i, true))
        .chain(batch.dist_anchors.iter().map(|&i| (i, false)))
        .collect();

    // Attribute loss of each of the given batch slots. Finite differences
    // are taken term by term and then summed, which keeps the cancellation
    // error of a large total out of the estimate.
    let attr_loss = |planes: &MultiScalePlanes, weights: &ModelWeights, which: &[usize]| -> Result<Vec<f64>> {
        let noisy = problem.noisy_planes(planes, batch);
        let mut ws = Workspace::default();
        let mut terms = Vec::with_capacity(which.len());
        for &s in which {
            let (i, rate) = slots[s];
            let mut fz = batch.frozen[s].clone();
            let (b, e) = if rate {
                problem.anchor_terms(
                    &noisy,
                    weights,
                    i,
                    Some(&batch.attr_noise[s]),
                    k.rate,
                    0.0,
                    &mut fz,
                    None,
                    &mut ws,
                )?
            } else {
                problem.anchor_terms(&noisy, weights, i, None, 0.0, k.dist, &mut fz, None, &mut ws)?
            };
            terms.push(if rate { k.rate * b } else { k.dist * e });
        }
        Ok(terms)
    };
    let central =
        |up: Vec<f64>, down: Vec<f64>| up.iter().zip(&down).map(|(a, b)| a - b).sum::<f64>() / (2.0 * epsilon);
    let all_slots: Vec<usize> = (0..slots.len()).collect();
    let rel = |a: f64, f: f64, floor: f64| (a - f).abs() / a.abs().max(f.abs()).max(floor);
    let group_floor = |g: &[f64]| 1e-6 * g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut report = GradCheckReport { groups: Vec::new() };

    // Planes: prefer entries touched by the batch, plus random ones when the plane rate is on.
    {
        let side = problem.base;
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for &(i, _) in &slots {
            let st = &problem.stencils[i];
            for (s, grid) in planes.scales.iter().enumerate() {
                let c = rng.random_range(0..PLANE_CHANNELS);
                let node = st[s].nodes[rng.random_range(0..4)];
                candidates.push((s, c * grid.side * grid.side + node));
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        let mut chosen: Vec<(usize, usize)> = index::sample(rng, candidates.len(), samples.min(candidates.len()))
            .into_iter()
            .map(|k| candidates[k])
            .collect();
        if batch.gated {
            for _ in 0..samples / 2 {
                let s = rng.random_range(0..planes.scales.len());
                chosen.push((s, rng.random_range(0..planes.scales[s].data.len())));
            }
        }
        let floor = group_floor(&grads.planes.iter().flatten().copied().collect::<Vec<_>>());
        let mut worst = 0.0f64;
        for &(s, idx) in &chosen {
            let grid_side = planes.scales[s].side;
            let area = grid_side * grid_side;
            let node = idx % area;
            let touching: Vec<usize> = (0..slots.len())
                .filter(|&t| problem.stencils[slots[t].0][s].nodes.contains(&node))
                .collect();
            // The entry's position in its sub-plane, and the entries whose context holds it.
            let (c, r, col) = (idx / area, (idx % area) / grid_side, idx % grid_side);
            let (sub, i, j) = if s == 0 {
                (0, r, col)
            } else {
                (1 + 2 * (r % 2) + col % 2, r / 2, col / 2)
            };
            let mut local = vec![(i, j)];
            local.extend(crate::planecodec::context_dependents(side, i, j).map(|(a, b, _)| (a, b)));
            let eval = |delta: f64| -> Result<Vec<f64>> {
                let mut p = planes.clone();
                p.scales[s].data[idx] += delta;
                let mut v = attr_loss(&p, weights, &touching)?;
                if batch.gated {
                    let noisy = problem.noisy_planes(&p, batch);
                    for &(a, b) in &local {
                        v.push(k.plane * problem.plane_entry_bits(&noisy, &weights.arm, sub, c, a, b));
                    }
                }
                Ok(v)
            };
            let fd = central(eval(epsilon)?, eval(-epsilon)?);
            worst = worst.max(rel(grads.planes[s][idx], fd, floor));
        }
        report.groups.push(GroupCheck {
            group: "planes",
            checked: chosen.len(),
            max_rel_error: worst,
        });
    }

    // Networks feeding the attribute terms.
    for (name, nets) in [("hyper-decoder", 0..1), ("chunk predictors", 1..CHUNKS)] {
        let floor = group_floor(&nets.clone().flat_map(|n| grads.weights[n].clone()).collect::<Vec<_>>());
        let mut worst = 0.0f64;
        let mut checked = 0;
        for _ in 0..samples {
            let net = rng.random_range(nets.clone());
            let idx = rng.random_range(0..weights.networks()[net].num_params());
            let eval = |delta: f64| -> Result<Vec<f64>> {
                let mut w = weights.clone();
                w.networks_mut()[net].params_mut()[idx] += delta;
                attr_loss(planes, &w, &all_slots)
            };
            let fd = central(eval(epsilon)?, eval(-epsilon)?);
            worst = worst.max(rel(grads.weights[net][idx], fd, floor));
            checked += 1;
        }
        report.groups.push(GroupCheck {
            group: name,
            checked,
            max_rel_error: worst,
        });
    }

    // Plane model: only the plane rate depends on it.
    if batch.gated {
        let floor = group_floor(&grads.weights[ARM_NET]);
        let noisy = problem.noisy_planes(planes, batch);
        let mut worst = 0.0f64;
        let side = problem.base;
        for _ in 0..samples {
            let idx = rng.random_range(0..weights.arm.num_params());
            let shifted = |delta: f64| {
                let mut arm = weights.arm.clone();
                arm.params_mut()[idx] += delta;
                arm
            };
            let (up, down) = (shifted(epsilon), shifted(-epsilon));
            let mut diff = 0.0;
            for sub in 0..SUB_PLANES {
                for c in 0..PLANE_CHANNELS {
                    for i in 0..side {
                        for j in 0..side {
                            diff += problem.plane_entry_bits(&noisy, &up, sub, c, i, j)
                                - problem.plane_entry_bits(&noisy, &down, sub, c, i, j);
                        }
                    }
                }
            }
            let fd = k.plane * diff / (2.0 * epsilon);
            worst = worst.max(rel(grads.weights[ARM_NET][idx], fd, floor));
        }
        report.groups.push(GroupCheck {
            group: "plane model",
            checked: samples,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

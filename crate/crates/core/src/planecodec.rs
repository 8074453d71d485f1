//! Plane streams: each quantized sub-plane is coded on its own, channel by
//! channel in raster order, with Laplace parameters predicted from the four
//! causal neighbours by one network shared across all sub-planes and channels.

use std::thread;

use crate::entropy::{rate_bits, sigmoid, softplus};
use crate::error::{CodecError, Result};
use crate::hyperprior::IntGrid;
use crate::mlp::{Mlp, MlpCache};
use crate::rangecoder::{apportion, Decoder, Encoder};
use crate::scene::ByteReader;

pub const B_MIN: f64 = 1e-4;
/// Bytes before the payload: symbol range as two i16 and the payload length.
pub const STREAM_HEADER: usize = 8;

/// `[up-left, up, up-right, left]`, zero outside the plane.
pub type SarmContext = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceParams {
    pub mu: f64,
    pub b: f64,
}

/// Neighbour values of `(i, j)` on one channel of `side × side` values.
pub fn extract_context<T: Copy + Into<f64>>(channel: &[T], side: usize, i: usize, j: usize) -> SarmContext {
    let at = |i: usize, j: usize| channel[i * side + j].into();
    let mut c = [0.0; 4];
    if i > 0 {
        if j > 0 {
            c[0] = at(i - 1, j - 1);
        }
        c[1] = at(i - 1, j);
        if j + 1 < side {
            c[2] = at(i - 1, j + 1);
        }
    }
    if j > 0 {
        c[3] = at(i, j - 1);
    }
    c
}

/// Entries whose context contains `(i, j)`, paired with the context slot it fills.
pub fn context_dependents(side: usize, i: usize, j: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let mut v = Vec::with_capacity(4);
    if i + 1 < side {
        if j + 1 < side {
            v.push((i + 1, j + 1, 0));
        }
        v.push((i + 1, j, 1));
        if j > 0 {
            v.push((i + 1, j - 1, 2));
        }
    }
    if j + 1 < side {
        v.push((i, j + 1, 3));
    }
    v.into_iter()
}

pub fn laplace_from_raw(raw: &[f64]) -> LaplaceParams {
    LaplaceParams {
        mu: raw[0],
        b: softplus(raw[1]).max(B_MIN),
    }
}

/// `d b / d raw`, zero where the floor is active.
pub fn laplace_b_grad(raw_b: f64) -> f64 {
    if softplus(raw_b) > B_MIN {
        sigmoid(raw_b)
    } else {
        0.0
    }
}

pub fn arm_predict(arm: &Mlp, ctx: &SarmContext) -> Result<LaplaceParams> {
    let raw = arm.forward(ctx);
    if !raw[0].is_finite() || !raw[1].is_finite() {
        return Err(CodecError::Numeric("plane model output".into()));
    }
    Ok(laplace_from_raw(&raw))
}

/// `P(lo < X < hi)` for a Laplace variable, evaluated on the tail that keeps precision.
pub fn laplace_interval(lo: f64, hi: f64, p: &LaplaceParams) -> f64 {
    let (a, c) = ((lo - p.mu) / p.b, (hi - p.mu) / p.b);
    if a >= 0.0 {
        -0.5 * (-a).exp() * (a - c).exp_m1()
    } else if c <= 0.0 {
        -0.5 * c.exp() * (a - c).exp_m1()
    } else {
        1.0 - 0.5 * a.exp() - 0.5 * (-c).exp()
    }
}

/// Mass on the unit bin centred at `n`.
pub fn laplace_bin_prob(n: i32, p: &LaplaceParams) -> f64 {
    laplace_interval(n as f64 - 0.5, n as f64 + 0.5, p)
}

/// Lower tail `P(X < x)`.
pub fn laplace_cdf(x: f64, p: &LaplaceParams) -> f64 {
    let z = (x - p.mu) / p.b;
    if z < 0.0 {
        0.5 * z.exp()
    } else {
        1.0 - 0.5 * (-z).exp()
    }
}

/// Upper tail `P(X > x)`.
pub fn laplace_sf(x: f64, p: &LaplaceParams) -> f64 {
    let z = (x - p.mu) / p.b;
    if z > 0.0 {
        0.5 * (-z).exp()
    } else {
        1.0 - 0.5 * z.exp()
    }
}

/// Probability of each symbol in `[n_min, n_max]`, with the tails folded into the end symbols.
pub fn laplace_pmf(p: &LaplaceParams, n_min: i32, n_max: i32, out: &mut Vec<f64>) {
    out.clear();
    out.extend((n_min..=n_max).map(|n| folded_bin_prob(n, p, n_min, n_max)));
}

/// Mass of symbol `n` when the alphabet is `[n_min, n_max]` and the tails
/// belong to the end symbols.
pub fn folded_bin_prob(n: i32, p: &LaplaceParams, n_min: i32, n_max: i32) -> f64 {
    let x = n as f64;
    match (n == n_min, n == n_max) {
        (false, false) => laplace_interval(x - 0.5, x + 0.5, p),
        (true, false) => laplace_cdf(x + 0.5, p),
        (false, true) => laplace_sf(x - 0.5, p),
        (true, true) => 1.0,
    }
}

#[derive(Default)]
struct TableScratch {
    pmf: Vec<f64>,
    freqs: Vec<u32>,
    order: Vec<usize>,
    cdf: Vec<u32>,
    cache: MlpCache,
}

impl TableScratch {
    fn build(&mut self, arm: &Mlp, ctx: &SarmContext, n_min: i32, n_max: i32) -> Result<&[u32]> {
        let raw = arm.forward_cached(ctx, &mut self.cache);
        if !raw[0].is_finite() || !raw[1].is_finite() {
            return Err(CodecError::Numeric("plane model output".into()));
        }
        let p = laplace_from_raw(raw);
        laplace_pmf(&p, n_min, n_max, &mut self.pmf);
        apportion(&self.pmf, &mut self.freqs, &mut self.order)?;
        self.cdf.clear();
        self.cdf.push(0);
        let mut acc = 0;
        for &f in &self.freqs {
            acc += f;
            self.cdf.push(acc);
        }
        Ok(&self.cdf)
    }
}

/// Coded sub-plane: header and payload.
pub fn encode_plane(plane: &IntGrid, arm: &Mlp) -> Result<Vec<u8>> {
    let (n_min, n_max) = symbol_range(plane)?;
    let mut enc = Encoder::new();
    let mut scratch = TableScratch::default();
    let side = plane.side;
    let real: Vec<f64> = plane.data.iter().map(|&v| v as f64).collect();
    for c in 0..plane.channels {
        let ch = &real[c * side * side..(c + 1) * side * side];
        for i in 0..side {
            for j in 0..side {
                let ctx = extract_context(ch, side, i, j);
                let cdf = scratch.build(arm, &ctx, n_min, n_max)?;
                enc.encode_cdf(cdf, (plane.get(c, i, j) - n_min) as usize);
            }
        }
    }
    let payload = enc.finish();
    let mut out = Vec::with_capacity(STREAM_HEADER + payload.len());
    out.extend_from_slice(&(n_min as i16).to_le_bytes());
    out.extend_from_slice(&(n_max as i16).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn symbol_range(plane: &IntGrid) -> Result<(i32, i32)> {
    if plane.data.is_empty() || plane.data.len() != plane.channels * plane.side * plane.side {
        return Err(CodecError::Shape("plane has no entries or inconsistent size".into()));
    }
    let lo = *plane.data.iter().min().unwrap();
    let hi = *plane.data.iter().max().unwrap();
    if lo < i16::MIN as i32 + 1 || hi > i16::MAX as i32 {
        return Err(CodecError::Range(format!("plane symbols span [{lo}, {hi}]")));
    }
    Ok((lo, hi))
}

/// Decodes one stream produced by `encode_plane`. `section` names the
/// stream in errors.
pub fn decode_plane(stream: &[u8], arm: &Mlp, channels: usize, side: usize, section: &str) -> Result<IntGrid> {
    let tag = |e: CodecError| match e {
        CodecError::Corrupt { detail, .. } => CodecError::corrupt(section, detail),
        other => other,
    };
    if channels == 0 || side == 0 {
        return Err(CodecError::Shape(format!(
            "cannot decode a {channels}x{side}x{side} plane"
        )));
    }
    let mut r = ByteReader::new(stream, "plane stream");
    let n_min = r.i16().map_err(tag)? as i32;
    let n_max = r.i16().map_err(tag)? as i32;
    let len = r.u32().map_err(tag)? as usize;
    if n_min > n_max {
        return Err(CodecError::corrupt(
            section,
            format!("symbol range [{n_min}, {n_max}] is empty"),
        ));
    }
    if r.remaining() != len {
        return Err(CodecError::corrupt(
            section,
            format!("payload length {len} but {} bytes follow the header", r.remaining()),
        ));
    }
    let payload = r.take(len).map_err(tag)?;
    let mut dec = Decoder::new(payload).map_err(tag)?;
    let mut scratch = TableScratch::default();
    let mut out = IntGrid::new(channels, side);
    let mut real = vec![0.0; side * side];
    for c in 0..channels {
        real.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..side {
            for j in 0..side {
                let ctx = extract_context(&real, side, i, j);
                let cdf = scratch.build(arm, &ctx, n_min, n_max)?;
                let s = dec.decode_cdf(cdf).map_err(tag)?;
                let v = n_min + s as i32;
                real[i * side + j] = v as f64;
                let k = out.index(c, i, j);
                out.data[k] = v;
            }
        }
    }
    if dec.position() != payload.len() {
        return Err(CodecError::corrupt(section, "payload longer than its symbols"));
    }
    Ok(out)
}

pub fn plane_section_name(k: usize) -> String {
    format!("plane stream {k}")
}

/// Codes every sub-plane into its own stream.
pub fn code_all_planes(subs: &[IntGrid], arm: &Mlp) -> Result<Vec<Vec<u8>>> {
    subs.iter().map(|p| encode_plane(p, arm)).collect()
}

/// Decodes the streams, one thread per stream when `parallel` is set.
/// Results do not depend on scheduling.
pub fn decode_all_planes(
    streams: &[&[u8]],
    arm: &Mlp,
    channels: usize,
    side: usize,
    parallel: bool,
) -> Result<Vec<IntGrid>> {
    if !parallel {
        return streams
            .iter()
            .enumerate()
            .map(|(k, s)| decode_plane(s, arm, channels, side, &plane_section_name(k)))
            .collect();
    }
    thread::scope(|scope| {
        let handles: Vec<_> = streams
            .iter()
            .enumerate()
            .map(|(k, s)| scope.spawn(move || decode_plane(s, arm, channels, side, &plane_section_name(k))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("plane decode thread panicked"))
            .collect()
    })
}

/// `-sum log2 p` of a sub-plane under the pmf its stream is coded with:
/// Laplace bins over the plane's symbol range, tails folded into the end
/// symbols, with the probability floor.
pub fn plane_rate_bits(plane: &IntGrid, arm: &Mlp) -> Result<f64> {
    let (n_min, n_max) = symbol_range(plane)?;
    let side = plane.side;
    let mut cache = MlpCache::default();
    let mut bits = 0.0;
    let real: Vec<f64> = plane.data.iter().map(|&v| v as f64).collect();
    for c in 0..plane.channels {
        let ch = &real[c * side * side..(c + 1) * side * side];
        for i in 0..side {
            for j in 0..side {
                let raw = arm.forward_cached(&extract_context(ch, side, i, j), &mut cache);
                let p = laplace_from_raw(raw);
                if !p.mu.is_finite() || !p.b.is_finite() {
                    return Err(CodecError::Numeric("plane model output".into()));
                }
                let n = plane.get(c, i, j);
                bits += rate_bits(folded_bin_prob(n, &p, n_min, n_max));
            }
        }
    }
    Ok(bits)
}

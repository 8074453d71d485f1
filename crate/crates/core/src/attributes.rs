//! Attribute stream: every anchor's 86 normalized attributes coded in file
//! order, groups in the order chunk 1..5, offsets, scaling.
//!
//! The same walk drives encoding, decoding and the rate estimate, so the
//! three can never disagree about which parameters a symbol is coded with.

use std::ops::Range;

use crate::entropy::{
    carm_predict, gaussian_bin_prob, hyper_decode, quantize_scalar, rate_bits, AttrTableBuilder, GroupParams,
    ModelWeights, CHUNKS, CHUNK_SIZE, ESCAPE_BITS, SYMBOL_CAP,
};
use crate::error::{CodecError, Result};
use crate::hyperprior::{fourier_encode, query_plane_features, FourierVector, MultiScalePlanes, PlaneFeature};
use crate::pca::{normalize_coords, PcaBasis, SceneBounds};
use crate::rangecoder::{Decoder, Encoder, PROB_BITS};
use crate::scene::{ATTR_DIM, FEATURE_DIM};

pub const OFFSETS_RANGE: Range<usize> = FEATURE_DIM..FEATURE_DIM + 30;
pub const SCALING_RANGE: Range<usize> = FEATURE_DIM + 30..ATTR_DIM;

pub fn chunk_range(chunk: usize) -> Range<usize> {
    (chunk - 1) * CHUNK_SIZE..chunk * CHUNK_SIZE
}

/// Hyperprior inputs of one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorContext {
    pub g: PlaneFeature,
    pub gamma: FourierVector,
}

/// Plane coordinates `(u, v)` and axis coordinate `w` of each position.
pub fn anchor_coords(basis: &PcaBasis, bounds: &SceneBounds, positions: &[[f64; 3]]) -> Vec<[f64; 3]> {
    positions
        .iter()
        .map(|p| normalize_coords(bounds, &basis.to_pca(p)))
        .collect()
}

pub fn anchor_contexts(planes: &MultiScalePlanes, coords: &[[f64; 3]]) -> Vec<AnchorContext> {
    coords
        .iter()
        .map(|&[u, v, w]| AnchorContext {
            g: query_plane_features(planes, u, v),
            gamma: fourier_encode(w),
        })
        .collect()
}

/// Visits the groups of one anchor in coding order. `visit` must write the
/// dequantized values of its slot range into `rec`, which later chunk
/// predictions read.
fn walk_anchor(
    weights: &ModelWeights,
    ctx: &AnchorContext,
    rec: &mut [f64; ATTR_DIM],
    mut visit: impl FnMut(&GroupParams, Range<usize>, &mut [f64; ATTR_DIM]) -> Result<()>,
) -> Result<()> {
    let h = hyper_decode(weights, &ctx.g, &ctx.gamma)?;
    visit(&h.chunk1, chunk_range(1), rec)?;
    for chunk in 2..=CHUNKS {
        let p = carm_predict(weights, chunk, &ctx.g, &ctx.gamma, &rec[..CHUNK_SIZE * (chunk - 1)])?;
        visit(&p, chunk_range(chunk), rec)?;
    }
    visit(&h.offsets, OFFSETS_RANGE, rec)?;
    visit(&h.scaling, SCALING_RANGE, rec)
}

/// Output of `encode_attributes`.
#[derive(Debug, Clone)]
pub struct EncodedAttributes {
    pub bytes: Vec<u8>,
    /// Quantized-dequantized attributes, in normalized space.
    pub reconstructed: Vec<[f64; ATTR_DIM]>,
    /// Code length of each anchor under the integer tables, escapes included.
    pub anchor_bits: Vec<f64>,
    /// `-sum log2 p` with the probability floor.
    pub estimate_bits: f64,
}

pub fn encode_attributes(
    weights: &ModelWeights,
    contexts: &[AnchorContext],
    attrs: &[[f64; ATTR_DIM]],
) -> Result<EncodedAttributes> {
    if contexts.len() != attrs.len() {
        return Err(CodecError::Shape(format!(
            "{} contexts for {} anchors",
            contexts.len(),
            attrs.len()
        )));
    }
    let mut enc = Encoder::new();
    let mut builder = AttrTableBuilder::default();
    let mut reconstructed = Vec::with_capacity(attrs.len());
    let mut anchor_bits = Vec::with_capacity(attrs.len());
    let mut estimate_bits = 0.0;
    for (ctx, a) in contexts.iter().zip(attrs) {
        let mut rec = [0.0; ATTR_DIM];
        let mut bits = 0.0;
        walk_anchor(weights, ctx, &mut rec, |p, range, rec| {
            for (k, slot) in range.enumerate() {
                let (mu, sigma) = (p.mu[k], p.sigma[k]);
                let n = quantize_scalar(a[slot], mu, p.q)?;
                estimate_bits += rate_bits(gaussian_bin_prob(n, sigma, p.q));
                let t = builder.build(sigma, p.q)?;
                match t.index_of(n) {
                    Some(s) => {
                        enc.encode_cdf(t.cdf, s);
                        bits += PROB_BITS as f64 - (t.freq(s) as f64).log2();
                    }
                    None => {
                        let e = t.escape();
                        enc.encode_cdf(t.cdf, e);
                        enc.encode_bypass(n as u32, ESCAPE_BITS);
                        bits += PROB_BITS as f64 - (t.freq(e) as f64).log2() + ESCAPE_BITS as f64;
                    }
                }
                rec[slot] = mu + n as f64 * p.q;
            }
            Ok(())
        })?;
        reconstructed.push(rec);
        anchor_bits.push(bits);
    }
    Ok(EncodedAttributes {
        bytes: enc.finish(),
        reconstructed,
        anchor_bits,
        estimate_bits,
    })
}

pub fn decode_attributes(
    weights: &ModelWeights,
    contexts: &[AnchorContext],
    bytes: &[u8],
) -> Result<Vec<[f64; ATTR_DIM]>> {
    let section = "attributes";
    let tag = |e: CodecError| match e {
        CodecError::Corrupt { detail, .. } => CodecError::corrupt(section, detail),
        other => other,
    };
    let mut dec = Decoder::new(bytes).map_err(tag)?;
    let mut builder = AttrTableBuilder::default();
    let mut out = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let mut rec = [0.0; ATTR_DIM];
        walk_anchor(weights, ctx, &mut rec, |p, range, rec| {
            for (k, slot) in range.enumerate() {
                let t = builder.build(p.sigma[k], p.q)?;
                let s = dec.decode_cdf(t.cdf).map_err(tag)?;
                let n = if s == t.escape() {
                    let n = dec.decode_bypass(ESCAPE_BITS).map_err(tag)? as i32;
                    if n.abs() <= t.half || n.abs() > SYMBOL_CAP {
                        return Err(CodecError::corrupt(section, format!("invalid escaped symbol {n}")));
                    }
                    n
                } else {
                    s as i32 - t.half
                };
                rec[slot] = p.mu[k] + n as f64 * p.q;
            }
            Ok(())
        })?;
        out.push(rec);
    }
    if dec.position() != bytes.len() {
        return Err(CodecError::corrupt(
            section,
            format!("{} trailing bytes", bytes.len() - dec.position()),
        ));
    }
    Ok(out)
}

/// `-sum log2 p` over the given anchors and all their attributes, with the
/// probability floor. Chunk predictions see the quantized values of earlier
/// chunks, exactly as when coding.
pub fn rate_estimate_attrs(
    weights: &ModelWeights,
    contexts: &[AnchorContext],
    attrs: &[[f64; ATTR_DIM]],
    anchors: &[usize],
) -> Result<f64> {
    let mut bits = 0.0;
    for &i in anchors {
        let a = &attrs[i];
        let mut rec = [0.0; ATTR_DIM];
        walk_anchor(weights, &contexts[i], &mut rec, |p, range, rec| {
            for (k, slot) in range.enumerate() {
                let n = quantize_scalar(a[slot], p.mu[k], p.q)?;
                bits += rate_bits(gaussian_bin_prob(n, p.sigma[k], p.q));
                rec[slot] = p.mu[k] + n as f64 * p.q;
            }
            Ok(())
        })?;
    }
    Ok(bits)
}

//! End-to-end compression: train, quantize, code every section, assemble.
//! Decompression reverses it, optionally decoding the plane streams on
//! separate threads.

use std::time::Instant;

use crate::attributes::{anchor_contexts, decode_attributes, encode_attributes};
use crate::container::{
    assemble, decode_mask, decode_positions, decode_weights, disassemble, encode_mask, encode_positions,
    encode_weights, read_table, Container, Header, SectionId, HEADER_BYTES, TABLE_ENTRY_BYTES,
};
use crate::entropy::ModelWeights;
use crate::error::{CodecError, Result};
use crate::frame::SceneFrame;
use crate::hyperprior::{reassemble, split_high_res, QuantizedPlanes, PLANE_CHANNELS, SUB_PLANES};
use crate::planecodec::{code_all_planes, decode_all_planes, plane_rate_bits};
use crate::scene::{Anchor, AnchorSet, NormStats, ATTR_DIM, NUM_OFFSETS};
use crate::trainer::{fit_frame, TrainConfig, TrainOutput, TrainedModel};

/// Byte counts per part of a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SizeReport {
    /// Header and section table.
    pub header: usize,
    pub positions: usize,
    pub weights: usize,
    pub planes: usize,
    pub mask: usize,
    pub attributes: usize,
}

impl SizeReport {
    pub fn total(&self) -> usize {
        self.header + self.positions + self.weights + self.planes + self.mask + self.attributes
    }

    /// Reads the section table of an encoded file.
    pub fn of_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, table) = read_table(bytes)?;
        let mut r = SizeReport {
            header: HEADER_BYTES + 2 + table.len() * TABLE_ENTRY_BYTES,
            ..Default::default()
        };
        for e in table {
            let len = e.len as usize;
            match e.id {
                SectionId::Positions => r.positions += len,
                SectionId::Weights => r.weights += len,
                SectionId::Plane(_) => r.planes += len,
                SectionId::Mask => r.mask += len,
                SectionId::Attributes => r.attributes += len,
            }
        }
        Ok(r)
    }
}

/// An encoded scene with the encoder-side view of what the decoder will see.
#[derive(Debug, Clone)]
pub struct EncodedScene {
    pub bytes: Vec<u8>,
    pub sizes: SizeReport,
    /// fp16-rounded positions.
    pub positions: Vec<[f64; 3]>,
    pub quantized_planes: QuantizedPlanes,
    /// Quantized-dequantized attributes in normalized space.
    pub reconstructed: Vec<[f64; ATTR_DIM]>,
    /// Exact code length of each anchor's attributes.
    pub anchor_bits: Vec<f64>,
    /// `-sum log2 p` of the attribute stream.
    pub attr_estimate_bits: f64,
    /// `-sum log2 p` of each sub-plane stream, excluding its 8-byte header.
    pub plane_estimate_bits: Vec<f64>,
    /// Payload bytes of each sub-plane stream, excluding its header.
    pub plane_payload_bytes: Vec<usize>,
}

/// Codes a trained model and the scene it was trained on.
pub fn encode_trained(frame: &SceneFrame, set: &AnchorSet, model: &TrainedModel) -> Result<EncodedScene> {
    if frame.len() != set.len() {
        return Err(CodecError::Shape("frame and anchor set differ in length".into()));
    }
    let subs = split_high_res(&model.quantized)?;
    let plane_streams = code_all_planes(&subs, &model.weights.arm)?;
    let plane_estimate_bits = subs
        .iter()
        .map(|s| plane_rate_bits(s, &model.weights.arm))
        .collect::<Result<Vec<_>>>()?;

    let contexts = anchor_contexts(&model.quantized.dequantize(), &frame.coords);
    let attrs = frame.normalized(set);
    let encoded = encode_attributes(&model.weights, &contexts, &attrs)?;

    let mut header = Header {
        anchor_count: u32::try_from(set.len()).map_err(|_| CodecError::Range("too many anchors".into()))?,
        offsets_per_anchor: NUM_OFFSETS as u16,
        base: model.quantized.base as u16,
        channels: PLANE_CHANNELS as u16,
        lambda_r: model.lambda_r as f32,
        lambda_tri: model.lambda_tri as f32,
        pca_mean: [0.0; 3],
        pca_directions: [[0.0; 3]; 3],
        bounds_min: [0.0; 3],
        bounds_max: [0.0; 3],
        norm_shift: [0.0; ATTR_DIM],
        norm_scale: [0.0; ATTR_DIM],
    };
    header.set_frame(&frame.basis, &frame.bounds, &frame.stats);

    let mut sections = vec![
        (SectionId::Positions, encode_positions(&frame.positions)?),
        (SectionId::Weights, encode_weights(&model.weights.networks())?),
    ];
    let plane_payload_bytes = plane_streams
        .iter()
        .map(|s| s.len() - crate::planecodec::STREAM_HEADER)
        .collect();
    for (k, s) in plane_streams.into_iter().enumerate() {
        sections.push((SectionId::Plane(k as u8), s));
    }
    if let Some(mask) = set.mask() {
        sections.push((SectionId::Mask, encode_mask(mask)));
    }
    sections.push((SectionId::Attributes, encoded.bytes));
    let bytes = assemble(&Container { header, sections })?;
    Ok(EncodedScene {
        sizes: SizeReport::of_bytes(&bytes)?,
        bytes,
        positions: frame.positions.clone(),
        quantized_planes: model.quantized.clone(),
        reconstructed: encoded.reconstructed,
        anchor_bits: encoded.anchor_bits,
        attr_estimate_bits: encoded.estimate_bits,
        plane_estimate_bits,
        plane_payload_bytes,
    })
}

/// Trains on `set` and encodes it.
pub fn compress(set: &AnchorSet, cfg: &TrainConfig) -> Result<(EncodedScene, TrainOutput)> {
    let frame = SceneFrame::fit(set)?;
    let trained = fit_frame(&frame, set, cfg)?;
    let encoded = encode_trained(&frame, set, &trained.model)?;
    Ok((encoded, trained))
}

/// Wall time of each decode stage in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecodeTimings {
    /// Container parsing, positions and weights.
    pub setup: f64,
    pub planes: f64,
    pub attributes: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct DecodedScene {
    /// Anchors with fp16 positions and dequantized attributes; visibility is
    /// not transmitted and reads as zero.
    pub set: AnchorSet,
    /// Dequantized attributes in normalized space.
    pub normalized: Vec<[f64; ATTR_DIM]>,
    pub planes: QuantizedPlanes,
    pub header: Header,
    pub timings: DecodeTimings,
}

pub fn decompress(bytes: &[u8], parallel_planes: bool) -> Result<DecodedScene> {
    let t0 = Instant::now();
    let c = disassemble(bytes)?;
    let h = &c.header;
    if h.offsets_per_anchor as usize != NUM_OFFSETS || h.channels as usize != PLANE_CHANNELS {
        return Err(CodecError::Format(format!(
            "unsupported layout: {} offsets, {} channels",
            h.offsets_per_anchor, h.channels
        )));
    }
    let n = h.anchor_count as usize;
    let section = |id| c.section(id).expect("required sections checked on parse");
    let positions = decode_positions(section(SectionId::Positions), n)?;
    let weights = ModelWeights::from_networks(decode_weights(section(SectionId::Weights))?)?;
    let mask = c
        .section(SectionId::Mask)
        .map(|m| decode_mask(m, n * NUM_OFFSETS))
        .transpose()?;
    let frame = SceneFrame::from_parts(positions, h.basis(), h.bounds(), h.stats());
    let t1 = Instant::now();

    let streams: Vec<&[u8]> = (0..SUB_PLANES as u8).map(|k| section(SectionId::Plane(k))).collect();
    let subs = decode_all_planes(&streams, &weights.arm, PLANE_CHANNELS, h.base as usize, parallel_planes)?;
    let planes = reassemble(&subs)?;
    let t2 = Instant::now();

    let contexts = anchor_contexts(&planes.dequantize(), &frame.coords);
    let normalized = decode_attributes(&weights, &contexts, section(SectionId::Attributes))?;
    let set = rebuild_set(&frame.positions, &normalized, &frame.stats, mask)?;
    let t3 = Instant::now();
    Ok(DecodedScene {
        set,
        normalized,
        planes,
        header: c.header.clone(),
        timings: DecodeTimings {
            setup: (t1 - t0).as_secs_f64(),
            planes: (t2 - t1).as_secs_f64(),
            attributes: (t3 - t2).as_secs_f64(),
            total: (t3 - t0).as_secs_f64(),
        },
    })
}

/// Anchor set holding decoded positions and denormalized attributes.
pub fn rebuild_set(
    positions: &[[f64; 3]],
    normalized: &[[f64; ATTR_DIM]],
    stats: &NormStats,
    mask: Option<Vec<bool>>,
) -> Result<AnchorSet> {
    let anchors = positions
        .iter()
        .zip(normalized)
        .map(|(p, a)| {
            let mut anchor = Anchor {
                position: p.map(|v| v as f32),
                ..Anchor::default()
            };
            anchor.set_attributes(&stats.denormalize(a));
            anchor
        })
        .collect();
    AnchorSet::new(anchors, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_synthetic_scene, SyntheticSpec};

    fn scene(n: usize, seed: u64, with_mask: bool) -> AnchorSet {
        gen_synthetic_scene(&SyntheticSpec {
            anchors: n,
            seed,
            with_mask,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn pipeline_round_trip() {
        let set = scene(150, 1, true);
        let cfg = TrainConfig {
            steps: 3,
            ..Default::default()
        };
        let (enc, _) = compress(&set, &cfg).unwrap();
        assert_eq!(enc.sizes.total(), enc.bytes.len());
        for parallel in [false, true] {
            let dec = decompress(&enc.bytes, parallel).unwrap();
            assert_eq!(dec.normalized, enc.reconstructed);
            assert_eq!(dec.planes, enc.quantized_planes);
            assert_eq!(dec.set.mask(), set.mask());
            for (a, p) in dec.set.anchors().iter().zip(&enc.positions) {
                assert_eq!(a.position_f64(), *p);
            }
        }
    }

    #[test]
    fn untrained_model_is_decodable() {
        let set = scene(60, 2, false);
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (enc, _) = compress(&set, &cfg).unwrap();
        let dec = decompress(&enc.bytes, false).unwrap();
        assert_eq!(dec.normalized, enc.reconstructed);
        assert_eq!(enc.sizes.mask, 0);
    }

    #[test]
    fn damaged_plane_stream_is_named() {
        let set = scene(60, 3, false);
        let (enc, _) = compress(
            &set,
            &TrainConfig {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let (_, table) = read_table(&enc.bytes).unwrap();
        let e = table.iter().find(|e| e.id == SectionId::Plane(2)).unwrap();
        let mut b = enc.bytes.clone();
        b[e.offset as usize + 9] ^= 1;
        match decompress(&b, true) {
            Err(CodecError::Checksum { section }) => assert_eq!(section, "plane stream 2"),
            other => panic!("{other:?}"),
        }
    }
}

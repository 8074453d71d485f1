//! The `.c3p` file: fixed header, section table, then the sections back to
//! back. The byte layout is documented in FORMAT.md.
//!
//! Decode order: positions and weights first, then the five plane streams
//! (independent of each other), then attributes, which need the decoded
//! planes. The mask stream depends on nothing.

use std::fmt;

use half::f16;

use crate::error::{CodecError, Result};
use crate::mlp::Mlp;
use crate::pca::{PcaBasis, SceneBounds};
use crate::planecodec::plane_section_name;
use crate::rangecoder::{Decoder, Encoder, PROB_TOTAL};
use crate::scene::{ByteReader, NormStats, ATTR_DIM};

pub const MAGIC: &[u8; 4] = b"C3GP";
pub const VERSION: u16 = 1;
/// Magic through the NormStats block.
pub const HEADER_BYTES: usize = 4 + 2 + 4 + 2 + 2 + 2 + 4 + 4 + 12 * 4 + 6 * 4 + 2 * ATTR_DIM * 4;
/// One table row: id, offset, length, CRC32.
pub const TABLE_ENTRY_BYTES: usize = 1 + 4 + 4 + 4;
/// Largest mask probability, in 1/65535 units; keeps both symbols codable.
const MASK_P_MAX: u16 = 65534;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SectionId {
    Positions,
    Weights,
    /// Sub-plane stream 0..5.
    Plane(u8),
    Mask,
    Attributes,
}

impl SectionId {
    pub fn code(self) -> u8 {
        match self {
            SectionId::Positions => 1,
            SectionId::Weights => 2,
            SectionId::Plane(k) => 3 + k,
            SectionId::Mask => 8,
            SectionId::Attributes => 9,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => SectionId::Positions,
            2 => SectionId::Weights,
            3..=7 => SectionId::Plane(code - 3),
            8 => SectionId::Mask,
            9 => SectionId::Attributes,
            _ => return None,
        })
    }

    pub fn name(self) -> String {
        match self {
            SectionId::Positions => "positions".into(),
            SectionId::Weights => "weights".into(),
            SectionId::Plane(k) => plane_section_name(k as usize),
            SectionId::Mask => "mask".into(),
            SectionId::Attributes => "attributes".into(),
        }
    }

    pub fn is_plane(self) -> bool {
        matches!(self, SectionId::Plane(_))
    }
}

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Everything the decoder needs before reading any section. Floating-point
/// fields are stored as f32 and kept here at that precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub anchor_count: u32,
    pub offsets_per_anchor: u16,
    pub base: u16,
    pub channels: u16,
    /// Rate weights the file was trained with. Informational only.
    pub lambda_r: f32,
    pub lambda_tri: f32,
    pub pca_mean: [f32; 3],
    pub pca_directions: [[f32; 3]; 3],
    pub bounds_min: [f32; 3],
    pub bounds_max: [f32; 3],
    pub norm_shift: [f32; ATTR_DIM],
    pub norm_scale: [f32; ATTR_DIM],
}

impl Header {
    pub fn basis(&self) -> PcaBasis {
        PcaBasis::from_transmitted(self.pca_mean, self.pca_directions)
    }

    pub fn bounds(&self) -> SceneBounds {
        SceneBounds {
            min: self.bounds_min.map(f64::from),
            max: self.bounds_max.map(f64::from),
        }
    }

    pub fn stats(&self) -> NormStats {
        NormStats {
            shift: self.norm_shift.map(f64::from),
            scale: self.norm_scale.map(f64::from),
        }
    }

    pub fn set_frame(&mut self, basis: &PcaBasis, bounds: &SceneBounds, stats: &NormStats) {
        self.pca_mean = basis.mean.map(|v| v as f32);
        self.pca_directions = basis.stored_directions;
        self.bounds_min = bounds.min.map(|v| v as f32);
        self.bounds_max = bounds.max.map(|v| v as f32);
        self.norm_shift = stats.shift.map(|v| v as f32);
        self.norm_scale = stats.scale.map(|v| v as f32);
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.anchor_count.to_le_bytes());
        out.extend_from_slice(&self.offsets_per_anchor.to_le_bytes());
        out.extend_from_slice(&self.base.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        let floats = [self.lambda_r, self.lambda_tri]
            .into_iter()
            .chain(self.pca_mean)
            .chain(self.pca_directions.into_iter().flatten())
            .chain(self.bounds_min)
            .chain(self.bounds_max)
            .chain(self.norm_shift)
            .chain(self.norm_scale);
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read(r: &mut ByteReader) -> Result<Self> {
        if r.take(4)? != MAGIC {
            return Err(CodecError::Format("bad magic, not a .c3p file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CodecError::Format(format!("unsupported version {version}")));
        }
        let anchor_count = r.u32()?;
        let offsets_per_anchor = r.u16()?;
        let base = r.u16()?;
        let channels = r.u16()?;
        let lambda_r = r.f32()?;
        let lambda_tri = r.f32()?;
        let mut f3 = || -> Result<[f32; 3]> { Ok([r.f32()?, r.f32()?, r.f32()?]) };
        let pca_mean = f3()?;
        let pca_directions = [f3()?, f3()?, f3()?];
        let bounds_min = f3()?;
        let bounds_max = f3()?;
        let mut norm_shift = [0.0; ATTR_DIM];
        for v in &mut norm_shift {
            *v = r.f32()?;
        }
        let mut norm_scale = [0.0; ATTR_DIM];
        for v in &mut norm_scale {
            *v = r.f32()?;
        }
        Ok(Header {
            anchor_count,
            offsets_per_anchor,
            base,
            channels,
            lambda_r,
            lambda_tri,
            pca_mean,
            pca_directions,
            bounds_min,
            bounds_max,
            norm_shift,
            norm_scale,
        })
    }
}

/// One row of the section table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionEntry {
    pub id: SectionId,
    pub offset: u32,
    pub len: u32,
    pub crc: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    /// Sections in file order; ids ascend.
    pub sections: Vec<(SectionId, Vec<u8>)>,
}

impl Container {
    pub fn section(&self, id: SectionId) -> Option<&[u8]> {
        self.sections.iter().find(|(s, _)| *s == id).map(|(_, d)| d.as_slice())
    }

    /// Bytes taken by header, table count and table rows.
    pub fn table_end(&self) -> usize {
        HEADER_BYTES + 2 + self.sections.len() * TABLE_ENTRY_BYTES
    }

    pub fn layout(&self) -> Vec<SectionEntry> {
        let mut offset = self.table_end();
        self.sections
            .iter()
            .map(|(id, data)| {
                let e = SectionEntry {
                    id: *id,
                    offset: offset as u32,
                    len: data.len() as u32,
                    crc: crc32fast::hash(data),
                };
                offset += data.len();
                e
            })
            .collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.table_end() + self.sections.iter().map(|(_, d)| d.len()).sum::<usize>()
    }
}

pub fn assemble(c: &Container) -> Result<Vec<u8>> {
    let mut ids: Vec<SectionId> = c.sections.iter().map(|(id, _)| *id).collect();
    if !ids.windows(2).all(|w| w[0] < w[1]) {
        return Err(CodecError::Validation(
            "section ids must be unique and ascending".into(),
        ));
    }
    ids.retain(|id| *id != SectionId::Mask);
    let required: Vec<SectionId> = [SectionId::Positions, SectionId::Weights]
        .into_iter()
        .chain((0..5).map(SectionId::Plane))
        .chain([SectionId::Attributes])
        .collect();
    if ids != required {
        return Err(CodecError::Validation("container is missing a required section".into()));
    }
    if c.total_bytes() > u32::MAX as usize {
        return Err(CodecError::Range("container exceeds 4 GiB".into()));
    }
    let mut out = Vec::with_capacity(c.total_bytes());
    c.header.write(&mut out);
    out.extend_from_slice(&(c.sections.len() as u16).to_le_bytes());
    for e in c.layout() {
        out.push(e.id.code());
        out.extend_from_slice(&e.offset.to_le_bytes());
        out.extend_from_slice(&e.len.to_le_bytes());
        out.extend_from_slice(&e.crc.to_le_bytes());
    }
    for (_, d) in &c.sections {
        out.extend_from_slice(d);
    }
    debug_assert_eq!(out.len(), c.total_bytes());
    Ok(out)
}

/// Header and table without touching the section payloads.
pub fn read_table(bytes: &[u8]) -> Result<(Header, Vec<SectionEntry>)> {
    let mut r = ByteReader::new(bytes, "header");
    let header = Header::read(&mut r)?;
    let count = r.u16()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut r = ByteReader::new(&bytes[HEADER_BYTES + 2..], "section table");
    for _ in 0..count {
        let code = r.u8()?;
        let id = SectionId::from_code(code).ok_or_else(|| CodecError::Format(format!("unknown section id {code}")))?;
        entries.push(SectionEntry {
            id,
            offset: r.u32()?,
            len: r.u32()?,
            crc: r.u32()?,
        });
    }
    // Sections tile the rest of the file in ascending id order.
    let mut expected = HEADER_BYTES + 2 + count * TABLE_ENTRY_BYTES;
    for (k, e) in entries.iter().enumerate() {
        if k > 0 && entries[k - 1].id >= e.id {
            return Err(CodecError::Format(format!(
                "section {} is duplicated or out of order",
                e.id
            )));
        }
        if e.offset as usize != expected {
            return Err(CodecError::Format(format!(
                "section {} starts at {} instead of {expected}",
                e.id, e.offset
            )));
        }
        let end = expected + e.len as usize;
        if end > bytes.len() {
            return Err(CodecError::corrupt(
                e.id.name(),
                format!("ends at byte {end} but the file has {}", bytes.len()),
            ));
        }
        expected = end;
    }
    if expected != bytes.len() {
        return Err(CodecError::Format(format!(
            "{} bytes after the last section",
            bytes.len() - expected
        )));
    }
    Ok((header, entries))
}

/// Parses and checksums every section.
pub fn disassemble(bytes: &[u8]) -> Result<Container> {
    let (header, entries) = read_table(bytes)?;
    let mut sections = Vec::with_capacity(entries.len());
    for e in &entries {
        let data = &bytes[e.offset as usize..(e.offset + e.len) as usize];
        if crc32fast::hash(data) != e.crc {
            return Err(CodecError::Checksum { section: e.id.name() });
        }
        sections.push((e.id, data.to_vec()));
    }
    let c = Container { header, sections };
    for id in [SectionId::Positions, SectionId::Weights, SectionId::Attributes]
        .into_iter()
        .chain((0..5).map(SectionId::Plane))
    {
        if c.section(id).is_none() {
            return Err(CodecError::Format(format!("missing section {id}")));
        }
    }
    Ok(c)
}

// ---------------------------------------------------------------------------
// Section payloads

/// Three little-endian half floats per position.
pub fn encode_positions(positions: &[[f64; 3]]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(positions.len() * 6);
    for p in positions {
        for &v in p {
            out.extend_from_slice(&crate::frame::to_fp16(v)?.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_positions(bytes: &[u8], count: usize) -> Result<Vec<[f64; 3]>> {
    if bytes.len() != count * 6 {
        return Err(CodecError::corrupt(
            "positions",
            format!("{} bytes for {count} positions", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(6)
        .map(|c| std::array::from_fn(|k| f16::from_bits(u16::from_le_bytes([c[2 * k], c[2 * k + 1]])).to_f64()))
        .collect())
}

/// Manifest (network count, then per network its layer count and widths as
/// u16) followed by every parameter as f32.
pub fn encode_weights(nets: &[&Mlp]) -> Result<Vec<u8>> {
    if nets.is_empty() || nets.len() > u8::MAX as usize {
        return Err(CodecError::Validation(format!("cannot store {} networks", nets.len())));
    }
    let mut out = vec![nets.len() as u8];
    for m in nets {
        let dims = m.dims();
        if dims.len() < 2 || dims.len() > u8::MAX as usize || dims.iter().any(|&d| d == 0 || d > u16::MAX as usize) {
            return Err(CodecError::Validation(format!(
                "network dims {dims:?} cannot be stored"
            )));
        }
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
    }
    for m in nets {
        for &p in m.params() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<Mlp>> {
    let mut r = ByteReader::new(bytes, "weights");
    let count = r.u8()? as usize;
    if count == 0 {
        return Err(CodecError::Format("weights manifest lists no networks".into()));
    }
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let layers = r.u8()? as usize;
        if layers < 2 {
            return Err(CodecError::Format(format!("network with {layers} layer widths")));
        }
        let dims = (0..layers)
            .map(|_| r.u16().map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        if dims.contains(&0) {
            return Err(CodecError::Format("zero layer width in manifest".into()));
        }
        manifest.push(dims);
    }
    let total: usize = manifest.iter().map(|d| crate::mlp::param_count(d)).sum();
    if r.remaining() != total * 4 {
        return Err(CodecError::Format(format!(
            "manifest describes {} bytes of weights but the section holds {}",
            total * 4,
            r.remaining()
        )));
    }
    manifest
        .into_iter()
        .map(|dims| {
            let n = crate::mlp::param_count(&dims);
            let params = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            Ok(Mlp::from_params(&dims, params).expect("count matches manifest"))
        })
        .collect()
}

/// Probability of a set bit in 1/65535 units, clamped so both outcomes stay codable.
pub fn mask_probability(bits: &[bool]) -> u16 {
    if bits.is_empty() {
        return 32768;
    }
    let ones = bits.iter().filter(|&&b| b).count() as f64;
    ((ones / bits.len() as f64 * 65535.0).round() as u16).clamp(1, MASK_P_MAX)
}

fn mask_cdf(p: u16) -> [u32; 3] {
    let ones = u32::from(p.clamp(1, MASK_P_MAX));
    [0, PROB_TOTAL - ones, PROB_TOTAL]
}

/// u16 probability followed by the bits range-coded as Bernoulli(p).
pub fn encode_mask(bits: &[bool]) -> Vec<u8> {
    let p = mask_probability(bits);
    let cdf = mask_cdf(p);
    let mut enc = Encoder::new();
    for &b in bits {
        enc.encode_cdf(&cdf, usize::from(b));
    }
    let mut out = p.to_le_bytes().to_vec();
    out.extend(enc.finish());
    out
}

pub fn decode_mask(bytes: &[u8], count: usize) -> Result<Vec<bool>> {
    let tag = |e: CodecError| match e {
        CodecError::Corrupt { detail, .. } => CodecError::corrupt("mask", detail),
        other => other,
    };
    let mut r = ByteReader::new(bytes, "mask");
    let p = r.u16()?;
    if p == 0 || p > MASK_P_MAX {
        return Err(CodecError::corrupt("mask", format!("probability {p} out of range")));
    }
    let cdf = mask_cdf(p);
    let payload = &bytes[2..];
    let mut dec = Decoder::new(payload).map_err(tag)?;
    let bits = (0..count)
        .map(|_| dec.decode_cdf(&cdf).map(|s| s == 1))
        .collect::<Result<Vec<_>>>()
        .map_err(tag)?;
    if dec.position() != payload.len() {
        return Err(CodecError::corrupt("mask", "trailing bytes"));
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample_container(seed: u64) -> Container {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut header = Header {
            anchor_count: 3,
            offsets_per_anchor: 10,
            base: 64,
            channels: 8,
            lambda_r: 0.01,
            lambda_tri: 10.0,
            pca_mean: [0.0; 3],
            pca_directions: [[0.0; 3]; 3],
            bounds_min: [0.0; 3],
            bounds_max: [0.0; 3],
            norm_shift: [0.0; ATTR_DIM],
            norm_scale: [1.0; ATTR_DIM],
        };
        header.norm_shift.iter_mut().for_each(|v| *v = rng.random());
        let mut sections = vec![
            (SectionId::Positions, vec![1u8; 18]),
            (SectionId::Weights, vec![2u8; 40]),
        ];
        for k in 0..5 {
            sections.push((
                SectionId::Plane(k),
                (0..rng.random_range(8..50)).map(|_| rng.random()).collect(),
            ));
        }
        sections.push((SectionId::Mask, vec![7, 7, 7]));
        sections.push((SectionId::Attributes, vec![9u8; 33]));
        Container { header, sections }
    }

    #[test]
    fn round_trip_and_size() {
        let c = sample_container(1);
        let bytes = assemble(&c).unwrap();
        assert_eq!(bytes.len(), c.total_bytes());
        assert_eq!(disassemble(&bytes).unwrap(), c);
        let (_, table) = read_table(&bytes).unwrap();
        let sum: usize = table.iter().map(|e| e.len as usize).sum();
        assert_eq!(c.table_end() + sum, bytes.len());
    }

    #[test]
    fn mask_is_optional() {
        let mut c = sample_container(2);
        c.sections.retain(|(id, _)| *id != SectionId::Mask);
        let bytes = assemble(&c).unwrap();
        assert_eq!(disassemble(&bytes).unwrap(), c);
        c.sections.remove(0);
        assert!(assemble(&c).is_err());
    }

    #[test]
    fn flipped_byte_names_section() {
        let c = sample_container(3);
        let bytes = assemble(&c).unwrap();
        for e in read_table(&bytes).unwrap().1 {
            let mut b = bytes.clone();
            b[e.offset as usize + e.len as usize / 2] ^= 0x10;
            match disassemble(&b) {
                Err(CodecError::Checksum { section }) => assert_eq!(section, e.id.name()),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn header_errors() {
        let c = sample_container(4);
        let mut bytes = assemble(&c).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(disassemble(&bad), Err(CodecError::Format(_))));
        bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(disassemble(&bad), Err(CodecError::Format(_))));
        // Truncation inside the last section names it.
        let err = disassemble(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(
            matches!(err, CodecError::Corrupt { ref section, .. } if section == "attributes"),
            "{err}"
        );
        assert!(matches!(disassemble(&bytes[..20]), Err(CodecError::Corrupt { .. })));
        bytes.push(0);
        assert!(matches!(disassemble(&bytes), Err(CodecError::Format(_))));
    }

    #[test]
    fn overlapping_sections_rejected() {
        let c = sample_container(5);
        let mut bytes = assemble(&c).unwrap();
        // Move the second table entry's offset back by one.
        let at = HEADER_BYTES + 2 + TABLE_ENTRY_BYTES + 1;
        let off = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) - 1;
        bytes[at..at + 4].copy_from_slice(&off.to_le_bytes());
        assert!(matches!(disassemble(&bytes), Err(CodecError::Format(_))));
    }

    #[test]
    fn positions_round_trip() {
        let p = vec![[1.0, 0.0, -0.0], [2.33333, -2.5, 1000.25]];
        let b = encode_positions(&p).unwrap();
        assert_eq!(&b[..6], &[0x00, 0x3C, 0x00, 0x00, 0x00, 0x80]);
        let d = decode_positions(&b, 2).unwrap();
        assert_eq!(d[0], [1.0, 0.0, -0.0]);
        assert_eq!(d[1][2], 1000.0);
        assert!((d[1][0] - 2.33333).abs() <= 0.001);
        assert!(decode_positions(&b[..5], 2).is_err());
        assert!(encode_positions(&[[1e6, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = crate::entropy::ModelWeights::init(&mut rng);
        w.round_to_f32();
        let bytes = encode_weights(&w.networks()).unwrap();
        let manifest_len = 1 + w.networks().iter().map(|m| 1 + 2 * m.dims().len()).sum::<usize>();
        let params: usize = w.networks().iter().map(|m| m.num_params()).sum();
        assert_eq!(bytes.len(), manifest_len + 4 * params);
        let back = crate::entropy::ModelWeights::from_networks(decode_weights(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);
        assert!(encode_weights(&[]).is_err());
        assert!(matches!(decode_weights(&[0]), Err(CodecError::Format(_))));
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn mask_cases() {
        let ones = vec![true; 8000];
        let b = encode_mask(&ones);
        assert_eq!(u16::from_le_bytes([b[0], b[1]]), 65534);
        assert!(b.len() <= 2 + 8 + 4, "{}", b.len());
        assert_eq!(decode_mask(&b, ones.len()).unwrap(), ones);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let half: Vec<bool> = (0..80_000).map(|_| rng.random()).collect();
        let b = encode_mask(&half);
        let ideal = half.len() / 8;
        assert!(b.len() >= ideal - 50 && b.len() <= ideal + 2 + 8 + 50, "{}", b.len());
        assert_eq!(decode_mask(&b, half.len()).unwrap(), half);
        assert!(matches!(
            decode_mask(&b[..b.len() / 2], half.len()),
            Err(CodecError::Corrupt { ref section, .. }) if section == "mask"
        ));
    }
}

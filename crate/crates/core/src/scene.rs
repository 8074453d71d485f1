//! Anchor data model, ANCH file I/O, attribute normalization and the
//! synthetic scene generator used for desk-scale experiments.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CodecError, Result};

/// Length of the latent feature vector.
pub const FEATURE_DIM: usize = 50;
/// Number of offsets (neural Gaussians) per anchor.
pub const NUM_OFFSETS: usize = 10;
pub const SCALING_DIM: usize = 6;
/// Number of coded attribute scalars per anchor: 50 + 3K + 6.
pub const ATTR_DIM: usize = FEATURE_DIM + 3 * NUM_OFFSETS + SCALING_DIM;

pub const ANCH_MAGIC: &[u8; 4] = b"ANCH";
pub const ANCH_VERSION: u16 = 1;
const RECORD_BYTES: usize = 4 * (3 + ATTR_DIM) + 4;

/// Anchors needed for a non-degenerate PCA of the positions.
pub const MIN_ANCHORS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub position: [f32; 3],
    pub feature: [f32; FEATURE_DIM],
    pub offsets: [[f32; 3]; NUM_OFFSETS],
    pub scaling: [f32; SCALING_DIM],
    /// Number of training views that see this anchor.
    pub visibility: u32,
}

impl Default for Anchor {
    fn default() -> Self {
        Anchor {
            position: [0.0; 3],
            feature: [0.0; FEATURE_DIM],
            offsets: [[0.0; 3]; NUM_OFFSETS],
            scaling: [0.0; SCALING_DIM],
            visibility: 0,
        }
    }
}

impl Anchor {
    /// Attributes flattened in coding order: feature, offsets (row-major), scaling.
    pub fn attributes(&self) -> [f64; ATTR_DIM] {
        let mut out = [0.0; ATTR_DIM];
        for (o, &v) in out.iter_mut().zip(self.attribute_iter()) {
            *o = v as f64;
        }
        out
    }

    fn attribute_iter(&self) -> impl Iterator<Item = &f32> {
        self.feature
            .iter()
            .chain(self.offsets.iter().flatten())
            .chain(self.scaling.iter())
    }

    pub fn set_attributes(&mut self, attrs: &[f64; ATTR_DIM]) {
        let (feat, rest) = attrs.split_at(FEATURE_DIM);
        let (offs, scal) = rest.split_at(3 * NUM_OFFSETS);
        for (d, s) in self.feature.iter_mut().zip(feat) {
            *d = *s as f32;
        }
        for (d, s) in self.offsets.iter_mut().flatten().zip(offs) {
            *d = *s as f32;
        }
        for (d, s) in self.scaling.iter_mut().zip(scal) {
            *d = *s as f32;
        }
    }

    pub fn position_f64(&self) -> [f64; 3] {
        self.position.map(|v| v as f64)
    }

    fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.attribute_iter().all(|v| v.is_finite())
    }
}

/// An ordered set of anchors with an optional N×K keep-mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
    mask: Option<Vec<bool>>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<Anchor>, mask: Option<Vec<bool>>) -> Result<Self> {
        if anchors.len() < MIN_ANCHORS {
            return Err(CodecError::Validation(format!(
                "anchor set needs at least {MIN_ANCHORS} anchors, got {}",
                anchors.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != anchors.len() * NUM_OFFSETS {
                return Err(CodecError::Validation(format!(
                    "mask has {} entries, expected {}",
                    m.len(),
                    anchors.len() * NUM_OFFSETS
                )));
            }
        }
        if let Some(i) = anchors.iter().position(|a| !a.is_finite()) {
            return Err(CodecError::Validation(format!("anchor {i} has a non-finite value")));
        }
        Ok(AnchorSet { anchors, mask })
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.anchors.iter().map(Anchor::position_f64).collect()
    }

    pub fn with_mask(self, mask: Option<Vec<bool>>) -> Result<Self> {
        AnchorSet::new(self.anchors, mask)
    }

    pub fn into_parts(self) -> (Vec<Anchor>, Option<Vec<bool>>) {
        (self.anchors, self.mask)
    }
}

// ---------------------------------------------------------------------------
// ANCH files

pub fn save_anchor_set(set: &AnchorSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_anchor_set(set))?;
    w.flush()?;
    Ok(())
}

pub fn load_anchor_set(path: impl AsRef<Path>) -> Result<AnchorSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_anchor_set(&bytes)
}

pub fn encode_anchor_set(set: &AnchorSet) -> Vec<u8> {
    let n = set.len();
    let mask_bytes = set.mask.as_ref().map_or(0, |_| (n * NUM_OFFSETS).div_ceil(8));
    let mut out = Vec::with_capacity(15 + n * RECORD_BYTES + mask_bytes);
    out.extend_from_slice(ANCH_MAGIC);
    out.extend_from_slice(&ANCH_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_OFFSETS as u32).to_le_bytes());
    out.push(u8::from(set.mask.is_some()));
    for a in &set.anchors {
        for v in a.position.iter().chain(a.attribute_iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&a.visibility.to_le_bytes());
    }
    if let Some(mask) = &set.mask {
        out.extend_from_slice(&pack_bits(mask));
    }
    out
}

pub fn decode_anchor_set(bytes: &[u8]) -> Result<AnchorSet> {
    let mut r = ByteReader::new(bytes, "anchor file");
    if r.take(4)? != ANCH_MAGIC {
        return Err(CodecError::Format("bad magic, expected ANCH".into()));
    }
    let version = r.u16()?;
    if version != ANCH_VERSION {
        return Err(CodecError::Format(format!("unsupported ANCH version {version}")));
    }
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    if k != NUM_OFFSETS {
        return Err(CodecError::Format(format!("K must be {NUM_OFFSETS}, got {k}")));
    }
    let flags = r.u8()?;
    let expected = n
        .checked_mul(RECORD_BYTES)
        .ok_or_else(|| CodecError::Format("anchor count overflows".into()))?;
    if r.remaining() < expected {
        return Err(CodecError::corrupt("anchor file", "truncated anchor records"));
    }
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut a = Anchor::default();
        for v in a.position.iter_mut() {
            *v = r.f32()?;
        }
        for v in a.feature.iter_mut() {
            *v = r.f32()?;
        }
        for v in a.offsets.iter_mut().flatten() {
            *v = r.f32()?;
        }
        for v in a.scaling.iter_mut() {
            *v = r.f32()?;
        }
        a.visibility = r.u32()?;
        anchors.push(a);
    }
    let mask = if flags & 1 != 0 {
        let bits = n * NUM_OFFSETS;
        let packed = r.take(bits.div_ceil(8))?;
        Some(unpack_bits(packed, bits))
    } else {
        None
    };
    AnchorSet::new(anchors, mask)
}

/// Row-major bits, least significant bit first within each byte.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Little-endian cursor that reports truncation as corruption of a named section.
pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(data: &'a [u8], section: &'static str) -> Self {
        ByteReader { data, pos: 0, section }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(CodecError::corrupt(self.section, "unexpected end of data"));
        }
        let s = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn array<const L: usize>(&mut self) -> Result<[u8; L]> {
        Ok(self.take(L)?.try_into().unwrap())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn i16(&mut self) -> Result<i16> {
        self.array().map(i16::from_le_bytes)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-channel affine normalization of the 86 attribute channels.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub shift: [f64; ATTR_DIM],
    pub scale: [f64; ATTR_DIM],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            shift: [0.0; ATTR_DIM],
            scale: [1.0; ATTR_DIM],
        }
    }

    /// Mean and population standard deviation per channel; a zero-variance
    /// channel keeps scale 1.
    pub fn fit(set: &AnchorSet) -> Self {
        let n = set.len() as f64;
        let mut mean = [0.0; ATTR_DIM];
        for a in set.anchors() {
            for (m, v) in mean.iter_mut().zip(a.attributes()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; ATTR_DIM];
        for a in set.anchors() {
            for ((s, v), m) in var.iter_mut().zip(a.attributes()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut scale = [1.0; ATTR_DIM];
        for (s, v) in scale.iter_mut().zip(&var) {
            let sd = (v / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                *s = sd;
            }
        }
        NormStats { shift: mean, scale }
    }

    /// The stats as transmitted (every value rounded through f32).
    pub fn to_f32_precision(&self) -> Self {
        let round = |v: &f64| (*v as f32) as f64;
        let mut scale = self.scale.map(|v| round(&v));
        // An f32 underflow must not produce a zero scale.
        scale.iter_mut().for_each(|s| {
            if *s <= 0.0 {
                *s = 1.0
            }
        });
        NormStats {
            shift: self.shift.map(|v| round(&v)),
            scale,
        }
    }

    pub fn normalize(&self, attrs: &[f64; ATTR_DIM]) -> [f64; ATTR_DIM] {
        std::array::from_fn(|c| (attrs[c] - self.shift[c]) / self.scale[c])
    }

    pub fn denormalize(&self, attrs: &[f64; ATTR_DIM]) -> [f64; ATTR_DIM] {
        std::array::from_fn(|c| attrs[c] * self.scale[c] + self.shift[c])
    }
}

/// Returns the set with every attribute channel standardized, plus the stats
/// needed to undo it.
pub fn normalize_attributes(set: &AnchorSet) -> (AnchorSet, NormStats) {
    let stats = NormStats::fit(set);
    let anchors = set
        .anchors()
        .iter()
        .map(|a| {
            let mut b = a.clone();
            b.set_attributes(&stats.normalize(&a.attributes()));
            b
        })
        .collect();
    let out = AnchorSet {
        anchors,
        mask: set.mask.clone(),
    };
    (out, stats)
}

pub fn denormalize_attributes(set: &AnchorSet, stats: &NormStats) -> AnchorSet {
    let anchors = set
        .anchors()
        .iter()
        .map(|a| {
            let mut b = a.clone();
            b.set_attributes(&stats.denormalize(&a.attributes()));
            b
        })
        .collect();
    AnchorSet {
        anchors,
        mask: set.mask.clone(),
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub anchors: usize,
    pub clusters: usize,
    /// Within-cluster standard deviation relative to the spread of cluster centers.
    pub cluster_spread: f64,
    /// Standard deviations along the three scene axes, descending.
    pub anisotropy: [f64; 3],
    /// Anchors farther than this from the scene center are seen by no view.
    pub falloff_radius: f64,
    /// Fraction of scene-level attribute noise relative to the smooth signal.
    pub noise: f64,
    pub with_mask: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            anchors: 1000,
            clusters: 6,
            cluster_spread: 0.5,
            anisotropy: [10.0, 5.0, 1.0],
            falloff_radius: 1e3,
            noise: 0.15,
            with_mask: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    // Negated comparisons so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.anchors < MIN_ANCHORS {
            return Err(CodecError::Validation(format!(
                "synthetic scene needs at least {MIN_ANCHORS} anchors"
            )));
        }
        let [a, b, c] = self.anisotropy;
        if !(c > 0.0 && b >= c && a >= b && a.is_finite()) {
            return Err(CodecError::Validation(
                "anisotropy ratios must be positive and descending".into(),
            ));
        }
        if self.clusters == 0 || !(self.cluster_spread >= 0.0) {
            return Err(CodecError::Validation(
                "need at least one cluster and a non-negative spread".into(),
            ));
        }
        if !(self.falloff_radius >= 0.0) || !(self.noise >= 0.0) {
            return Err(CodecError::Validation(
                "falloff radius and noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Views that see an anchor at the scene center.
const PEAK_VISIBILITY: f64 = 32.0;
/// Smooth basis functions the attributes are mixed from.
const SIGNAL_BASIS: usize = 8;

pub fn gen_synthetic_scene(spec: &SyntheticSpec) -> Result<AnchorSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.anchors;

    let centers: Vec<Vector3<f64>> = (0..spec.clusters).map(|_| normal3(&mut rng)).collect();
    let mut raw: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            let k = rng.random_range(0..spec.clusters);
            centers[k] + normal3(&mut rng) * spec.cluster_spread
        })
        .collect();
    whiten(&mut raw);
    let positions: Vec<Vector3<f64>> = raw
        .iter()
        .map(|z| {
            Vector3::new(
                z.x * spec.anisotropy[0],
                z.y * spec.anisotropy[1],
                z.z * spec.anisotropy[2],
            )
        })
        .collect();

    // Attributes are random mixtures of a few smooth functions of the whitened
    // position, so they are spatially and cross-channel correlated.
    let freqs: Vec<Vector3<f64>> = (0..SIGNAL_BASIS).map(|_| normal3(&mut rng) * 1.2).collect();
    let phases: Vec<f64> = (0..SIGNAL_BASIS)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mixing: Vec<[f64; SIGNAL_BASIS]> = (0..ATTR_DIM)
        .map(|_| std::array::from_fn(|_| gauss(&mut rng) / (SIGNAL_BASIS as f64).sqrt()))
        .collect();
    let channel_bias: Vec<f64> = (0..ATTR_DIM).map(|_| gauss(&mut rng) * 0.5).collect();
    let channel_gain: Vec<f64> = (0..ATTR_DIM)
        .map(|c| match c {
            c if c < FEATURE_DIM => 1.0,
            c if c < FEATURE_DIM + 3 * NUM_OFFSETS => 0.05 * spec.anisotropy[2],
            _ => 0.4,
        })
        .collect();

    let mut anchors = Vec::with_capacity(n);
    for (z, x) in raw.iter().zip(&positions) {
        let basis: [f64; SIGNAL_BASIS] = std::array::from_fn(|m| (freqs[m].dot(z) + phases[m]).sin());
        let attrs: [f64; ATTR_DIM] = std::array::from_fn(|c| {
            let signal: f64 = mixing[c].iter().zip(&basis).map(|(w, b)| w * b).sum();
            channel_gain[c] * (channel_bias[c] + signal + spec.noise * gauss(&mut rng))
        });
        let mut a = Anchor {
            position: [x.x as f32, x.y as f32, x.z as f32],
            ..Anchor::default()
        };
        a.set_attributes(&attrs);
        anchors.push(a);
    }

    let mask = spec
        .with_mask
        .then(|| (0..n * NUM_OFFSETS).map(|_| rng.random_bool(0.8)).collect());

    assign_visibility(&mut anchors, spec.falloff_radius);
    AnchorSet::new(anchors, mask)
}

/// Sets each anchor's view count from a linear radial falloff around the
/// scene centroid: the peak count at the center, at least one view anywhere
/// strictly inside `radius`, zero at or beyond it.
pub fn assign_visibility(anchors: &mut [Anchor], radius: f64) {
    let center = centroid(anchors);
    for a in anchors.iter_mut() {
        let d = distance(&a.position_f64(), &center);
        a.visibility = if d < radius {
            (PEAK_VISIBILITY * (1.0 - d / radius)).ceil().max(1.0) as u32
        } else {
            0
        };
    }
}

/// Smallest radius whose open ball around the centroid holds at least
/// `fraction` of the anchors.
pub fn radius_covering(set: &AnchorSet, fraction: f64) -> f64 {
    let center = centroid(set.anchors());
    let mut d: Vec<f64> = set
        .anchors()
        .iter()
        .map(|a| distance(&a.position_f64(), &center))
        .collect();
    d.sort_by(f64::total_cmp);
    let k = ((fraction * d.len() as f64).ceil() as usize).clamp(1, d.len());
    // Open ball: nudge past the k-th distance.
    d[k - 1] * (1.0 + 1e-9) + 1e-12
}

fn centroid(anchors: &[Anchor]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for a in anchors {
        for (ci, p) in c.iter_mut().zip(a.position_f64()) {
            *ci += p;
        }
    }
    c.map(|v| v / anchors.len().max(1) as f64)
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(gauss(rng), gauss(rng), gauss(rng))
}

/// Centers the samples and makes their population covariance the identity.
fn whiten(points: &mut [Vector3<f64>]) {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points.iter_mut() {
        *p -= mean;
        cov += *p * p.transpose();
    }
    cov /= n;
    if let Some(chol) = cov.cholesky() {
        if let Some(inv) = chol.l().try_inverse() {
            for p in points.iter_mut() {
                *p = inv * *p;
            }
        }
    }
}

//! Vector-matrix hyperprior: two dense feature planes spanned by PC1/PC2 at
//! scales 1 and 2, queried by bilinear interpolation, and a sinusoidal
//! encoding of the PC3 coordinate.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{CodecError, Result};

pub const PLANE_CHANNELS: usize = 8;
pub const PLANE_SCALES: [usize; 2] = [1, 2];
pub const MIN_RESOLUTION: usize = 64;
pub const MAX_RESOLUTION: usize = 128;
/// Frequencies of the PC3 encoding.
pub const FOURIER_FREQS: usize = 10;
pub const FOURIER_DIM: usize = 2 * FOURIER_FREQS;
/// Width of the concatenated plane feature over all scales.
pub const PLANE_FEATURE_DIM: usize = PLANE_CHANNELS * PLANE_SCALES.len();
/// Largest magnitude a quantized plane entry may take.
pub const PLANE_SYMBOL_CAP: i32 = (1 << 15) - 1;
/// Sub-planes produced by `split_high_res`.
pub const SUB_PLANES: usize = 5;

pub type PlaneFeature = [f64; PLANE_FEATURE_DIM];
pub type FourierVector = [f64; FOURIER_DIM];

/// A `channels × side × side` grid, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn new(channels: usize, side: usize) -> Self {
        Grid {
            channels,
            side,
            data: vec![T::default(); channels * side * side],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.side + i) * self.side + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[self.index(c, i, j)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.side * self.side;
        &self.data[c * n..(c + 1) * n]
    }
}

pub type IntGrid = Grid<i32>;

/// Real-valued planes, one grid per entry of `PLANE_SCALES`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScalePlanes {
    pub base: usize,
    pub scales: Vec<Grid<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPlanes {
    pub base: usize,
    pub scales: Vec<IntGrid>,
}

impl MultiScalePlanes {
    pub fn zeros(base: usize) -> Self {
        MultiScalePlanes {
            base,
            scales: PLANE_SCALES
                .iter()
                .map(|r| Grid::new(PLANE_CHANNELS, r * base))
                .collect(),
        }
    }

    /// Entries drawn uniformly from [-0.5, 0.5].
    pub fn random(base: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(base);
        for g in &mut p.scales {
            g.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..=0.5));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.scales.iter().map(|g| g.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&self.base) {
            return Err(CodecError::Shape(format!(
                "base resolution {} outside [{MIN_RESOLUTION}, {MAX_RESOLUTION}]",
                self.base
            )));
        }
        check_scales(self.base, self.scales.iter().map(|g| (g.channels, g.side)))?;
        if self.scales.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
            return Err(CodecError::Numeric("hyperprior planes".into()));
        }
        Ok(())
    }
}

impl QuantizedPlanes {
    pub fn dequantize(&self) -> MultiScalePlanes {
        MultiScalePlanes {
            base: self.base,
            scales: self
                .scales
                .iter()
                .map(|g| Grid {
                    channels: g.channels,
                    side: g.side,
                    data: g.data.iter().map(|&v| v as f64).collect(),
                })
                .collect(),
        }
    }
}

fn check_scales(base: usize, shapes: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    let shapes: Vec<_> = shapes.collect();
    if shapes.len() != PLANE_SCALES.len() {
        return Err(CodecError::Shape(format!("expected {} scales", PLANE_SCALES.len())));
    }
    for ((ch, side), r) in shapes.into_iter().zip(PLANE_SCALES) {
        if ch != PLANE_CHANNELS || side != r * base {
            return Err(CodecError::Shape(format!(
                "scale {r} plane is {ch}x{side}x{side}, expected {PLANE_CHANNELS}x{0}x{0}",
                r * base
            )));
        }
    }
    Ok(())
}

/// Base plane resolution for an anchor count, linear between 64 at
/// `min_count` and 128 at `max_count`, rounded to an even number.
pub fn resolution_for(anchor_count: usize, min_count: usize, max_count: usize) -> usize {
    if max_count <= min_count {
        return if anchor_count >= max_count {
            MAX_RESOLUTION
        } else {
            MIN_RESOLUTION
        };
    }
    let t = (anchor_count.clamp(min_count, max_count) - min_count) as f64 / (max_count - min_count) as f64;
    let b = MIN_RESOLUTION as f64 + t * (MAX_RESOLUTION - MIN_RESOLUTION) as f64;
    let even = 2 * (b / 2.0).round_ties_even() as usize;
    even.clamp(MIN_RESOLUTION, MAX_RESOLUTION)
}

/// The four grid nodes and bilinear weights touched by a query on one plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    /// Offsets of the nodes within a channel (row-major).
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
}

impl Stencil {
    /// Align-corners mapping: node `k` sits at `k / (side - 1)`.
    pub fn at(side: usize, u: f64, v: f64) -> Self {
        if side < 2 {
            return Stencil {
                nodes: [0; 4],
                weights: [1.0, 0.0, 0.0, 0.0],
            };
        }
        let last = (side - 1) as f64;
        let (x, y) = (u.clamp(0.0, 1.0) * last, v.clamp(0.0, 1.0) * last);
        let j0 = (x.floor() as usize).min(side - 2);
        let i0 = (y.floor() as usize).min(side - 2);
        let (tx, ty) = (x - j0 as f64, y - i0 as f64);
        let base = i0 * side + j0;
        Stencil {
            nodes: [base, base + 1, base + side, base + side + 1],
            weights: [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
        }
    }

    #[inline]
    pub fn apply(&self, channel: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..4 {
            acc += self.weights[k] * channel[self.nodes[k]];
        }
        acc
    }
}

/// One stencil per scale for the plane coordinates `(u, v)`.
pub fn stencils(base: usize, u: f64, v: f64) -> [Stencil; 2] {
    PLANE_SCALES.map(|r| Stencil::at(r * base, u, v))
}

/// Plane feature at `(u, v)`: bilinear per channel, scales concatenated
/// scale-major then channel-major.
pub fn query_plane_features(planes: &MultiScalePlanes, u: f64, v: f64) -> PlaneFeature {
    query_with(planes, &stencils(planes.base, u, v))
}

pub fn query_with(planes: &MultiScalePlanes, st: &[Stencil; 2]) -> PlaneFeature {
    let mut out = [0.0; PLANE_FEATURE_DIM];
    for (s, grid) in planes.scales.iter().enumerate() {
        for c in 0..grid.channels {
            out[s * PLANE_CHANNELS + c] = st[s].apply(grid.channel(c));
        }
    }
    out
}

/// `(sin(2^l π w), cos(2^l π w))` for `l = 0..10`, interleaved.
pub fn fourier_encode(w: f64) -> FourierVector {
    let mut out = [0.0; FOURIER_DIM];
    for l in 0..FOURIER_FREQS {
        let (s, c) = ((1u32 << l) as f64 * PI * w).sin_cos();
        out[2 * l] = s;
        out[2 * l + 1] = c;
    }
    out
}

/// Rounds every entry half-to-even; values live on a unit-step grid.
pub fn quantize_planes(planes: &MultiScalePlanes) -> Result<QuantizedPlanes> {
    let mut scales = Vec::with_capacity(planes.scales.len());
    for g in &planes.scales {
        let mut data = Vec::with_capacity(g.data.len());
        for &v in &g.data {
            let q = v.round_ties_even();
            if !q.is_finite() || q.abs() > PLANE_SYMBOL_CAP as f64 {
                return Err(CodecError::Range(format!("plane value {v} exceeds the symbol range")));
            }
            data.push(q as i32);
        }
        scales.push(Grid {
            channels: g.channels,
            side: g.side,
            data,
        });
    }
    Ok(QuantizedPlanes {
        base: planes.base,
        scales,
    })
}

/// Scale-1 plane followed by the four 2×2 polyphase components of the
/// scale-2 plane; sub-plane `2a + b` holds entries `(2i + a, 2j + b)`.
pub fn split_high_res(q: &QuantizedPlanes) -> Result<Vec<IntGrid>> {
    let [low, high] = &q.scales[..] else {
        return Err(CodecError::Shape("expected exactly two scales".into()));
    };
    if high.side % 2 != 0 {
        return Err(CodecError::Shape(format!("scale-2 side {} is odd", high.side)));
    }
    let half = high.side / 2;
    if low.side != half || low.channels != high.channels {
        return Err(CodecError::Shape(
            "scale-1 plane does not match half the scale-2 plane".into(),
        ));
    }
    let mut out = vec![low.clone()];
    for (a, b) in polyphase_order() {
        let mut sub = IntGrid::new(high.channels, half);
        for c in 0..high.channels {
            for i in 0..half {
                for j in 0..half {
                    let dst = sub.index(c, i, j);
                    sub.data[dst] = high.get(c, 2 * i + a, 2 * j + b);
                }
            }
        }
        out.push(sub);
    }
    Ok(out)
}

pub fn reassemble(subs: &[IntGrid]) -> Result<QuantizedPlanes> {
    if subs.len() != SUB_PLANES {
        return Err(CodecError::Shape(format!(
            "expected {SUB_PLANES} sub-planes, got {}",
            subs.len()
        )));
    }
    let (channels, side) = (subs[0].channels, subs[0].side);
    if subs
        .iter()
        .any(|s| s.channels != channels || s.side != side || s.data.len() != channels * side * side)
    {
        return Err(CodecError::Shape("sub-planes differ in shape".into()));
    }
    let mut high = IntGrid::new(channels, 2 * side);
    for ((a, b), sub) in polyphase_order().zip(&subs[1..]) {
        for c in 0..channels {
            for i in 0..side {
                for j in 0..side {
                    let dst = high.index(c, 2 * i + a, 2 * j + b);
                    high.data[dst] = sub.get(c, i, j);
                }
            }
        }
    }
    Ok(QuantizedPlanes {
        base: side,
        scales: vec![subs[0].clone(), high],
    })
}

fn polyphase_order() -> impl Iterator<Item = (usize, usize)> {
    [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter()
}

/// Index of the full-plane entry behind `(sub, c, i, j)` of `split_high_res`,
/// as `(scale, flat index)`.
pub fn sub_plane_source(base: usize, sub: usize, c: usize, i: usize, j: usize) -> (usize, usize) {
    if sub == 0 {
        return (0, (c * base + i) * base + j);
    }
    let (a, b) = [(0, 0), (0, 1), (1, 0), (1, 1)][sub - 1];
    let side = 2 * base;
    (1, (c * side + 2 * i + a) * side + 2 * j + b)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resolution_endpoints() {
        assert_eq!(resolution_for(500_000, 1000, 500_000), 128);
        assert_eq!(resolution_for(1000, 1000, 500_000), 64);
        assert_eq!(resolution_for(250_500, 1000, 500_000), 96);
        assert_eq!(resolution_for(10, 1000, 500_000), 64);
        assert_eq!(resolution_for(usize::MAX, 1000, 500_000), 128);
        assert_eq!(resolution_for(10_000, 1000, 100_000) % 2, 0);
    }

    fn random_planes(seed: u64) -> MultiScalePlanes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MultiScalePlanes::random(64, &mut rng);
        p.scales
            .iter_mut()
            .for_each(|g| g.data.iter_mut().for_each(|v| *v *= 10.0));
        p
    }

    #[test]
    fn exact_at_nodes() {
        let p = random_planes(1);
        // (u, v) = (j/(side-1), i/(side-1)) on the scale-1 plane is also a node of scale 2
        // only at the corners; check the corners and one interior scale-1 node.
        let g = query_plane_features(&p, 1.0, 0.0);
        for c in 0..PLANE_CHANNELS {
            assert_eq!(g[c], p.scales[0].get(c, 0, 63));
            assert_eq!(g[PLANE_CHANNELS + c], p.scales[1].get(c, 0, 127));
        }
        let (i, j) = (17, 40);
        let g = query_plane_features(&p, j as f64 / 63.0, i as f64 / 63.0);
        for c in 0..PLANE_CHANNELS {
            assert!((g[c] - p.scales[0].get(c, i, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let p = random_planes(2);
        let (u, v) = (10.5 / 63.0, 3.5 / 63.0);
        let g = query_plane_features(&p, u, v);
        for c in 0..PLANE_CHANNELS {
            let s = &p.scales[0];
            let mean = (s.get(c, 3, 10) + s.get(c, 3, 11) + s.get(c, 4, 10) + s.get(c, 4, 11)) / 4.0;
            assert!((g[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_plane() {
        let mut p = MultiScalePlanes::zeros(64);
        p.scales
            .iter_mut()
            .for_each(|g| g.data.iter_mut().for_each(|v| *v = 2.75));
        for &(u, v) in &[(0.0, 0.0), (0.3, 0.9), (1.0, 1.0), (0.123, 0.456)] {
            assert!(query_plane_features(&p, u, v).iter().all(|&x| (x - 2.75).abs() < 1e-12));
        }
    }

    #[test]
    fn fourier_closed_forms() {
        let z = fourier_encode(0.0);
        for l in 0..FOURIER_FREQS {
            assert_eq!((z[2 * l], z[2 * l + 1]), (0.0, 1.0));
        }
        let one = fourier_encode(1.0);
        assert!((one[1] + 1.0).abs() < 1e-12);
        for l in 0..FOURIER_FREQS {
            assert!(one[2 * l].abs() < 1e-12);
            if l > 0 {
                assert!((one[2 * l + 1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantize_half_even() {
        let mut p = MultiScalePlanes::zeros(64);
        p.scales[0].data[0] = 0.4;
        p.scales[0].data[1] = 0.5;
        p.scales[0].data[2] = 1.5;
        p.scales[0].data[3] = -2.5;
        let q = quantize_planes(&p).unwrap();
        assert_eq!(&q.scales[0].data[..4], &[0, 0, 2, -2]);
        assert!(q.scales[1].data.iter().all(|&v| v == 0));
        let again = quantize_planes(&q.dequantize()).unwrap();
        assert_eq!(again, q);
        p.scales[1].data[7] = 40_000.0;
        assert!(matches!(quantize_planes(&p), Err(CodecError::Range(_))));
    }

    #[test]
    fn polyphase_smallest_case() {
        let q = QuantizedPlanes {
            base: 1,
            scales: vec![
                IntGrid {
                    channels: 1,
                    side: 1,
                    data: vec![9],
                },
                IntGrid {
                    channels: 1,
                    side: 2,
                    data: vec![1, 2, 3, 4],
                },
            ],
        };
        let subs = split_high_res(&q).unwrap();
        let vals: Vec<i32> = subs.iter().map(|s| s.data[0]).collect();
        assert_eq!(vals, vec![9, 1, 2, 3, 4]);
        assert_eq!(reassemble(&subs).unwrap(), q);
    }

    #[test]
    fn split_shapes_and_source_map() {
        let p = random_planes(4);
        let q = quantize_planes(&p).unwrap();
        let subs = split_high_res(&q).unwrap();
        assert_eq!(subs.len(), SUB_PLANES);
        assert!(subs.iter().all(|s| s.side == 64 && s.channels == PLANE_CHANNELS));
        for (k, sub) in subs.iter().enumerate() {
            for &(c, i, j) in &[(0, 0, 0), (3, 5, 63), (7, 63, 1)] {
                let (s, idx) = sub_plane_source(64, k, c, i, j);
                assert_eq!(q.scales[s].data[idx], sub.get(c, i, j));
            }
        }
        assert_eq!(reassemble(&subs).unwrap(), q);
        let zeros = vec![IntGrid::new(2, 3); SUB_PLANES];
        assert!(reassemble(&zeros)
            .unwrap()
            .scales
            .iter()
            .all(|g| g.data.iter().all(|&v| v == 0)));
    }

    #[test]
    fn split_rejects_bad_shapes() {
        let odd = QuantizedPlanes {
            base: 1,
            scales: vec![IntGrid::new(1, 1), IntGrid::new(1, 3)],
        };
        assert!(matches!(split_high_res(&odd), Err(CodecError::Shape(_))));
        let mut subs = vec![IntGrid::new(1, 2); SUB_PLANES];
        subs[3] = IntGrid::new(1, 3);
        assert!(matches!(reassemble(&subs), Err(CodecError::Shape(_))));
        assert!(reassemble(&subs[..4]).is_err());
    }

    #[test]
    fn bilinear_weights_are_the_gradient() {
        // d g / d node equals the node's bilinear weight (finite differences at fp64).
        let p = random_planes(5);
        let (u, v) = (0.4172, 0.7731);
        let st = stencils(p.base, u, v);
        for s in 0..2 {
            for k in 0..4 {
                let idx = PLANE_CHANNELS.min(3) * p.scales[s].side * p.scales[s].side + st[s].nodes[k];
                let c = 3;
                let eps = 1e-5;
                let mut hi = p.clone();
                hi.scales[s].data[idx] += eps;
                let mut lo = p.clone();
                lo.scales[s].data[idx] -= eps;
                let fd = (query_plane_features(&hi, u, v)[s * PLANE_CHANNELS + c]
                    - query_plane_features(&lo, u, v)[s * PLANE_CHANNELS + c])
                    / (2.0 * eps);
                let w = st[s].weights[k];
                assert!((fd - w).abs() <= 1e-6 * w.abs().max(1e-3), "{fd} vs {w}");
            }
        }
    }
}

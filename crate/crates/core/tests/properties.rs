use anchor_codec::container::{
    assemble, decode_mask, decode_positions, disassemble, encode_mask, encode_positions, Container, Header, SectionId,
};
use anchor_codec::entropy::{attr_half_width, gaussian_bin_prob, normal_sf, quantize_scalar};
use anchor_codec::hyperprior::{reassemble, split_high_res, Grid, QuantizedPlanes, Stencil};
use anchor_codec::pca::fit_pca;
use anchor_codec::planecodec::{folded_bin_prob, LaplaceParams};
use anchor_codec::rangecoder::{CdfTable, Decoder, Encoder};
use anchor_codec::scene::{
    decode_anchor_set, encode_anchor_set, gen_synthetic_scene, pack_bits, unpack_bits, NormStats, SyntheticSpec,
    ATTR_DIM,
};
use anchor_codec::trainer::{rate_loss, sample_by_visibility, SamplingMode};
use half::f16;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
enum Op {
    Symbol(Vec<u32>, usize),
    Bypass(u32, u32),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (prop::collection::vec(1u32..1000, 1..40), any::<prop::sample::Index>()).prop_map(|(w, i)| {
            let k = i.index(w.len());
            Op::Symbol(w, k)
        }),
        (any::<u32>(), 0u32..=32).prop_map(|(v, b)| Op::Bypass(v, b)),
    ]
}

fn table(weights: &[u32]) -> CdfTable {
    let pmf: Vec<f64> = weights.iter().map(|&w| w as f64).collect();
    CdfTable::from_pmf(&pmf).unwrap()
}

fn header(n: u32) -> Header {
    Header {
        anchor_count: n,
        offsets_per_anchor: 10,
        base: 64,
        channels: 8,
        lambda_r: 0.01,
        lambda_tri: 10.0,
        pca_mean: [1.0, 2.0, 3.0],
        pca_directions: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        bounds_min: [-1.0; 3],
        bounds_max: [1.0; 3],
        norm_shift: [0.5; ATTR_DIM],
        norm_scale: [2.0; ATTR_DIM],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn range_coder_round_trip(ops in prop::collection::vec(op(), 0..200)) {
        let mut enc = Encoder::new();
        for o in &ops {
            match o {
                Op::Symbol(w, s) => enc.encode(&table(w), *s),
                Op::Bypass(v, b) => enc.encode_bypass(*v, *b),
            }
        }
        let bytes = enc.finish();
        let mut dec = Decoder::new(&bytes).unwrap();
        for o in &ops {
            match o {
                Op::Symbol(w, s) => prop_assert_eq!(dec.decode(&table(w)).unwrap(), *s),
                Op::Bypass(v, b) => {
                    let mask = if *b == 32 { u32::MAX } else { (1u32 << b) - 1 };
                    prop_assert_eq!(dec.decode_bypass(*b).unwrap(), v & mask);
                }
            }
        }
        prop_assert_eq!(dec.position(), bytes.len());
    }

    #[test]
    fn tables_are_valid(weights in prop::collection::vec(0.0f64..1.0, 1..3000)) {
        let t = CdfTable::from_pmf(&weights).unwrap();
        prop_assert_eq!(t.symbols(), weights.len());
        prop_assert_eq!(*t.cdf().last().unwrap(), 1 << 16);
        prop_assert!((0..t.symbols()).all(|s| t.freq(s) >= 1));
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step(a in -50.0f64..50.0, mu in -5.0f64..5.0, q in 0.01f64..10.0) {
        let n = quantize_scalar(a, mu, q).unwrap();
        let rec = mu + n as f64 * q;
        prop_assert!((a - rec).abs() <= 0.5 * q * (1.0 + 1e-12));
    }

    #[test]
    fn gaussian_alphabet_sums_to_one(sigma in 1e-3f64..10.0, q in 1e-3f64..10.0) {
        let m = attr_half_width(sigma, q);
        let inside: f64 = (-m..=m).map(|n| gaussian_bin_prob(n, sigma, q)).sum();
        let tail = 2.0 * normal_sf((m as f64 + 0.5) * q / sigma);
        prop_assert!((inside + tail - 1.0).abs() < 1e-9, "{}", inside + tail);
    }

    #[test]
    fn folded_laplace_sums_to_one(mu in -20.0f64..20.0, b in 1e-3f64..10.0, lo in -30i32..0, span in 0i32..60) {
        let p = LaplaceParams { mu, b };
        let total: f64 = (lo..=lo + span).map(|n| folded_bin_prob(n, &p, lo, lo + span)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fp16_positions_within_half_ulp(p in prop::array::uniform3(-60000.0f64..60000.0)) {
        let bytes = encode_positions(&[p]).unwrap();
        let d = decode_positions(&bytes, 1).unwrap()[0];
        for (x, y) in p.iter().zip(d) {
            let h = f16::from_f64(*x);
            let ulp = (f16::from_bits(h.to_bits() + 1).to_f64() - h.to_f64()).abs()
                .max((h.to_f64() - f16::from_bits(h.to_bits().wrapping_sub(1)).to_f64()).abs());
            prop_assert!((x - y).abs() <= 0.5 * ulp);
        }
    }

    #[test]
    fn bits_pack_round_trip(bits in prop::collection::vec(any::<bool>(), 0..500)) {
        prop_assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
    }

    #[test]
    fn mask_round_trip(bits in prop::collection::vec(prop::bool::weighted(0.85), 1..3000)) {
        prop_assert_eq!(decode_mask(&encode_mask(&bits), bits.len()).unwrap(), bits);
    }

    #[test]
    fn polyphase_split_is_invertible(base in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = |side: usize| Grid {
            channels: 8,
            side,
            data: (0..8 * side * side).map(|_| rng.random_range(-50..50)).collect(),
        };
        let q = QuantizedPlanes { base, scales: vec![grid(base), grid(2 * base)] };
        prop_assert_eq!(reassemble(&split_high_res(&q).unwrap()).unwrap(), q);
    }

    #[test]
    fn container_round_trip(lens in prop::collection::vec(0usize..300, 8), mask in any::<bool>(), n in 4u32..1000) {
        let mut sections = vec![];
        let ids = [SectionId::Positions, SectionId::Weights, SectionId::Plane(0), SectionId::Plane(1),
            SectionId::Plane(2), SectionId::Plane(3), SectionId::Plane(4), SectionId::Attributes];
        for (k, (id, len)) in ids.into_iter().zip(lens).enumerate() {
            if id == SectionId::Attributes && mask {
                sections.push((SectionId::Mask, vec![3u8; 17]));
            }
            sections.push((id, (0..len).map(|i| (i * 31 + k) as u8).collect()));
        }
        let c = Container { header: header(n), sections };
        let bytes = assemble(&c).unwrap();
        prop_assert_eq!(bytes.len(), c.total_bytes());
        prop_assert_eq!(disassemble(&bytes).unwrap(), c);
    }

    #[test]
    fn stencil_weights_form_a_partition(side in 2usize..300, u in -0.2f64..1.2, v in -0.2f64..1.2) {
        let s = Stencil::at(side, u, v);
        prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.weights.iter().all(|&w| w >= 0.0));
        prop_assert!(s.nodes.iter().all(|&n| n < side * side));
    }

    #[test]
    fn sampling_respects_mode(vis in prop::collection::vec(0u32..3, 1..400), fraction in 0.001f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = sample_by_visibility(SamplingMode::Usro, fraction, &vis, &mut rng).unwrap();
        prop_assert_eq!(u.len(), ((fraction * vis.len() as f64).round() as usize).clamp(1, vis.len()));
        let visible = vis.iter().filter(|&&v| v > 0).count();
        match sample_by_visibility(SamplingMode::Visro, fraction, &vis, &mut rng) {
            Ok(s) => {
                prop_assert!(s.iter().all(|&i| vis[i] > 0));
                prop_assert_eq!(s.len(), ((fraction * visible as f64).round() as usize).clamp(1, visible));
            }
            Err(_) => prop_assert_eq!(visible, 0),
        }
    }

    #[test]
    fn rate_loss_is_linear(a in 0.0f64..1e6, p in 0.0f64..1e6, n in 1usize..100_000, tri in 0.0f64..50.0) {
        let both = rate_loss(a, p, n, true, 0.05, tri);
        let attr = rate_loss(a, p, n, false, 0.05, tri);
        let planes = rate_loss(0.0, p, n, true, 0.05, tri);
        prop_assert!((both - attr - planes).abs() <= 1e-12 * both.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scenes_serialize_and_normalize(seed in any::<u64>(), n in 4usize..200, with_mask in any::<bool>()) {
        let set = gen_synthetic_scene(&SyntheticSpec { anchors: n, seed, with_mask, ..SyntheticSpec::default() }).unwrap();
        let back = decode_anchor_set(&encode_anchor_set(&set)).unwrap();
        prop_assert_eq!(&back, &set);
        let stats = NormStats::fit(&set);
        for a in set.anchors() {
            let x = a.attributes();
            let y = stats.denormalize(&stats.normalize(&x));
            prop_assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= 1e-9 * p.abs().max(1.0)));
        }
        let basis = fit_pca(&set.positions()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| basis.directions[i][k] * basis.directions[j][k]).sum();
                prop_assert!((d - f64::from(u8::from(i == j))).abs() < 1e-9);
            }
        }
        prop_assert!(basis.eigenvalues[0] >= basis.eigenvalues[1] && basis.eigenvalues[1] >= basis.eigenvalues[2]);
    }
}

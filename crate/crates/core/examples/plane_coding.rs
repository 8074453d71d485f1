//! Quantizes smooth planes, splits the fine scale into independent streams,
//! codes all five streams, and decodes them on separate threads.

use anchor_codec::entropy::ModelWeights;
use anchor_codec::hyperprior::{quantize_planes, reassemble, split_high_res, MultiScalePlanes, PLANE_CHANNELS};
use anchor_codec::planecodec::{code_all_planes, decode_all_planes, plane_rate_bits};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anchor_codec::Result<()> {
    let base = 64;
    let mut planes = MultiScalePlanes::zeros(base);
    for g in &mut planes.scales {
        let side = g.side as f64;
        for c in 0..g.channels {
            for i in 0..g.side {
                for j in 0..g.side {
                    let (x, y) = (i as f64 / side, j as f64 / side);
                    let k = g.index(c, i, j);
                    g.data[k] = 6.0 * (std::f64::consts::TAU * (x + c as f64 * y)).sin();
                }
            }
        }
    }
    let quantized = quantize_planes(&planes)?;
    let subs = split_high_res(&quantized)?;
    let arm = ModelWeights::init(&mut ChaCha8Rng::seed_from_u64(2)).arm;
    let streams = code_all_planes(&subs, &arm)?;
    for (k, (s, sub)) in streams.iter().zip(&subs).enumerate() {
        println!(
            "stream {k}: {} bytes, estimate {:.0} bytes",
            s.len(),
            plane_rate_bits(sub, &arm)? / 8.0
        );
    }
    let refs: Vec<&[u8]> = streams.iter().map(|s| s.as_slice()).collect();
    let decoded = decode_all_planes(&refs, &arm, PLANE_CHANNELS, base, true)?;
    assert_eq!(reassemble(&decoded)?, quantized);
    println!("decoded planes match");
    Ok(())
}

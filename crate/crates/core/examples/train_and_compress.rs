//! Trains on a synthetic scene, writes the container, decodes it again and
//! reports where the bytes went.
//!
//! cargo run --release --example train_and_compress -- [anchors] [steps]

use anchor_codec::codec::{compress, decompress};
use anchor_codec::scene::{gen_synthetic_scene, SyntheticSpec};
use anchor_codec::trainer::TrainConfig;

fn main() -> anchor_codec::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let anchors = args.next().unwrap_or(3000);
    let steps = args.next().unwrap_or(150);
    let set = gen_synthetic_scene(&SyntheticSpec {
        anchors,
        with_mask: true,
        ..SyntheticSpec::default()
    })?;
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let (enc, trained) = compress(&set, &cfg)?;
    for log in trained.history.iter().step_by((steps / 10).max(1)) {
        let r = &log.report;
        println!(
            "step {:4}  loss {:9.4}  mse {:.3e}  attr bits {:8.0}  plane bits {:8.0}",
            r.step, r.total, r.distortion, r.attr_bits, r.plane_bits
        );
    }
    let s = enc.sizes;
    println!(
        "{} bytes: header {} positions {} weights {} planes {} mask {} attributes {}",
        s.total(),
        s.header,
        s.positions,
        s.weights,
        s.planes,
        s.mask,
        s.attributes
    );
    println!(
        "attributes: {:.2} bits per anchor",
        enc.anchor_bits.iter().sum::<f64>() / anchors as f64
    );

    let dec = decompress(&enc.bytes, true)?;
    assert_eq!(dec.normalized, enc.reconstructed);
    println!(
        "decoded in {:.3} s (planes {:.3} s, attributes {:.3} s), trained in {:.1} s",
        dec.timings.total, dec.timings.planes, dec.timings.attributes, trained.train_seconds
    );
    Ok(())
}

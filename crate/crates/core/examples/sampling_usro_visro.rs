//! Uniform vs visibility-restricted rate sampling on a scene whose training
//! views only see the central 30% of anchors. Prints the attribute bytes of
//! both modes and the mean bits of the anchors no view sees.
//!
//! cargo run --release --example sampling_usro_visro -- [anchors] [steps] [seeds]

use anchor_codec::codec::compress;
use anchor_codec::scene::{assign_visibility, gen_synthetic_scene, radius_covering, AnchorSet, SyntheticSpec};
use anchor_codec::trainer::{SamplingMode, TrainConfig};

fn main() -> anchor_codec::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let anchors = args.next().unwrap_or(1000);
    let steps = args.next().unwrap_or(200);
    let seeds = args.next().unwrap_or(3) as u64;
    println!("seed,usro_attr_bytes,visro_attr_bytes,usro_peripheral_bits,visro_peripheral_bits");
    for seed in 0..seeds {
        let set = gen_synthetic_scene(&SyntheticSpec {
            anchors,
            seed,
            ..SyntheticSpec::default()
        })?;
        let radius = radius_covering(&set, 0.3);
        let (mut anchors, mask) = set.into_parts();
        assign_visibility(&mut anchors, radius);
        let set = AnchorSet::new(anchors, mask)?;
        let mut row = vec![];
        let mut peripheral = vec![];
        for sampling in [SamplingMode::Usro, SamplingMode::Visro] {
            let cfg = TrainConfig {
                steps,
                seed,
                sampling,
                ..TrainConfig::default()
            };
            let (enc, _) = compress(&set, &cfg)?;
            row.push(enc.sizes.attributes);
            let hidden: Vec<f64> = set
                .anchors()
                .iter()
                .zip(&enc.anchor_bits)
                .filter(|(a, _)| a.visibility == 0)
                .map(|(_, b)| *b)
                .collect();
            peripheral.push(hidden.iter().sum::<f64>() / hidden.len().max(1) as f64);
        }
        println!("{seed},{},{},{:.1},{:.1}", row[0], row[1], peripheral[0], peripheral[1]);
    }
    Ok(())
}

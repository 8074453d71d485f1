//! Sweeps the rate weight on a seeded synthetic scene and prints the RD table.
//!
//! cargo run --release --example rd_sweep -- [anchors] [steps]

use anchor_codec::scene::{gen_synthetic_scene, SyntheticSpec};
use anchor_codec::sweep::{rd_sweep, write_rd_csv, DEFAULT_LAMBDAS};
use anchor_codec::trainer::TrainConfig;

fn main() -> anchor_codec::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let anchors = args.next().unwrap_or(1000);
    let steps = args.next().unwrap_or(200);
    let set = gen_synthetic_scene(&SyntheticSpec {
        anchors,
        ..SyntheticSpec::default()
    })?;
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let runs = rd_sweep(&set, &cfg, &DEFAULT_LAMBDAS);
    write_rd_csv(&runs, cfg.seed, std::io::stdout())?;
    Ok(())
}

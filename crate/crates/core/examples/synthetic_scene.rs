//! Generates a seeded synthetic anchor set, saves it, and reloads it.
//!
//! cargo run --release --example synthetic_scene -- [anchors] [seed]

use anchor_codec::scene::{gen_synthetic_scene, load_anchor_set, save_anchor_set, SyntheticSpec};

fn main() -> anchor_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let anchors = args.next().map_or(2000, |a| a.parse().expect("anchor count"));
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));
    let set = gen_synthetic_scene(&SyntheticSpec {
        anchors,
        seed,
        with_mask: true,
        ..SyntheticSpec::default()
    })?;

    let path = std::env::temp_dir().join(format!("synthetic_{anchors}_{seed}.anch"));
    save_anchor_set(&set, &path)?;
    let back = load_anchor_set(&path)?;
    assert_eq!(back, set);

    let visible = set.anchors().iter().filter(|a| a.visibility > 0).count();
    let kept = set.mask().map_or(0, |m| m.iter().filter(|&&b| b).count());
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for a in set.anchors() {
        for c in 0..3 {
            lo[c] = lo[c].min(a.position[c]);
            hi[c] = hi[c].max(a.position[c]);
        }
    }
    println!("{} anchors written to {}", set.len(), path.display());
    println!("visible to at least one view: {visible}");
    println!("offsets kept by the mask: {kept} of {}", set.len() * 10);
    println!("extent: {lo:?} .. {hi:?}");
    Ok(())
}

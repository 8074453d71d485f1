//! Rotates and shifts a synthetic scene, fits its frame, and shows that the
//! fitted axes recover the rotation and how anchors map into plane
//! coordinates and the depth axis.

use anchor_codec::frame::SceneFrame;
use anchor_codec::scene::{gen_synthetic_scene, AnchorSet, SyntheticSpec};

fn main() -> anchor_codec::Result<()> {
    let set = gen_synthetic_scene(&SyntheticSpec {
        anchors: 5000,
        anisotropy: [12.0, 4.0, 0.5],
        ..SyntheticSpec::default()
    })?;
    // 30 degrees about z, then 45 degrees about x, then a shift.
    let (a, b) = (30f64.to_radians(), 45f64.to_radians());
    let rot = [
        [a.cos(), -a.sin(), 0.0],
        [b.cos() * a.sin(), b.cos() * a.cos(), -b.sin()],
        [b.sin() * a.sin(), b.sin() * a.cos(), b.cos()],
    ];
    let (mut anchors, mask) = set.into_parts();
    for anchor in &mut anchors {
        let p = anchor.position_f64();
        anchor.position =
            std::array::from_fn(|r| (rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2] + 5.0 * r as f64) as f32);
    }
    let set = AnchorSet::new(anchors, mask)?;
    println!("expected principal axis {:.4?}", [rot[0][0], rot[1][0], rot[2][0]]);
    let frame = SceneFrame::fit(&set)?;
    let b = &frame.basis;
    println!("mean {:?}", b.mean);
    for (k, d) in b.directions.iter().enumerate() {
        println!("axis {k}: {d:.4?}");
    }
    let dots: Vec<f64> = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (0..3).map(|c| b.directions[i][c] * b.directions[j][c]).sum())
        .collect();
    println!("gram matrix {dots:.2?}");
    println!("bounds {:?} .. {:?}", frame.bounds.min, frame.bounds.max);

    // Plane coordinates fill [0, 1]; the depth axis lands in [-1, 1].
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &frame.coords {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    println!(
        "u in [{:.3}, {:.3}], v in [{:.3}, {:.3}], w in [{:.3}, {:.3}]",
        lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]
    );
    Ok(())
}

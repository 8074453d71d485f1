//! Compares analytic gradients of the training loss with central finite
//! differences, group by group.

use anchor_codec::frame::SceneFrame;
use anchor_codec::scene::{gen_synthetic_scene, SyntheticSpec};
use anchor_codec::trainer::{fit_frame, grad_check, Objective, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anchor_codec::Result<()> {
    let set = gen_synthetic_scene(&SyntheticSpec {
        anchors: 400,
        ..SyntheticSpec::default()
    })?;
    let frame = SceneFrame::fit(&set)?;
    let cfg = TrainConfig {
        steps: 10,
        sample_fraction: 0.1,
        ..TrainConfig::default()
    };
    let model = fit_frame(&frame, &set, &cfg)?.model;
    let visibility = set.anchors().iter().map(|a| a.visibility).collect();
    let problem = Objective::new(model.planes.base, &frame.coords, frame.normalized(&set), visibility)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Step 0 has the plane rate switched on, so every group is exercised.
    let mut batch = problem.sample_batch(0, &cfg, &mut rng)?;
    let report = grad_check(
        &problem,
        &model.planes,
        &model.weights,
        &mut batch,
        &cfg,
        1e-7,
        16,
        &mut rng,
    )?;
    for g in &report.groups {
        println!(
            "{:<17} {:3} entries  max relative error {:.2e}",
            g.group, g.checked, g.max_rel_error
        );
    }
    Ok(())
}

//! Queries random planes at a few plane coordinates and prints the entropy
//! parameters an untrained hyper-decoder assigns there.

use anchor_codec::entropy::{hyper_decode, ModelWeights};
use anchor_codec::hyperprior::{fourier_encode, query_plane_features, MultiScalePlanes};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anchor_codec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let planes = MultiScalePlanes::random(64, &mut rng);
    let weights = ModelWeights::init(&mut rng);
    for (u, v, w) in [(0.0, 0.0, 0.0), (0.5, 0.5, 0.1), (0.25, 0.9, -0.7), (1.0, 1.0, 1.0)] {
        let g = query_plane_features(&planes, u, v);
        let gamma = fourier_encode(w);
        let p = hyper_decode(&weights, &g, &gamma)?;
        println!("(u, v, w) = ({u}, {v}, {w})");
        println!("  features  {:.3?}", &g[..4]);
        println!("  axis code {:.3?}", &gamma[..4]);
        println!(
            "  chunk 1: q {:.4}, sigma[0] {:.4}; offsets: q {:.4}; scaling: q {:.4}",
            p.chunk1.q, p.chunk1.sigma[0], p.offsets.q, p.scaling.q
        );
    }
    Ok(())
}

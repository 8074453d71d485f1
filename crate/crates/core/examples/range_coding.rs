//! Codes a skewed symbol source with a frequency table built from its pmf,
//! mixes in raw bits, and compares the output size with the entropy.

use anchor_codec::rangecoder::{CdfTable, Decoder, Encoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anchor_codec::Result<()> {
    let pmf: Vec<f64> = (0..16).map(|k| 0.6f64.powi(k)).collect();
    let total: f64 = pmf.iter().sum();
    let table = CdfTable::from_pmf(&pmf)?;
    let entropy: f64 = pmf.iter().map(|p| p / total).map(|p| -p * p.log2()).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let symbols: Vec<usize> = (0..n)
        .map(|_| {
            let mut x = rng.random::<f64>() * total;
            pmf.iter()
                .position(|&p| {
                    x -= p;
                    x < 0.0
                })
                .unwrap_or(15)
        })
        .collect();
    let tags: Vec<u32> = (0..n / 100).map(|_| rng.random_range(0..1 << 12)).collect();

    let mut enc = Encoder::new();
    for (k, &s) in symbols.iter().enumerate() {
        enc.encode(&table, s);
        if k % 100 == 0 {
            enc.encode_bypass(tags[k / 100], 12);
        }
    }
    let bytes = enc.finish();

    let mut dec = Decoder::new(&bytes)?;
    for (k, &s) in symbols.iter().enumerate() {
        assert_eq!(dec.decode(&table)?, s);
        if k % 100 == 0 {
            assert_eq!(dec.decode_bypass(12)?, tags[k / 100]);
        }
    }
    let ideal = (entropy * n as f64 + 12.0 * tags.len() as f64) / 8.0;
    println!("{n} symbols and {} 12-bit tags in {} bytes", tags.len(), bytes.len());
    println!(
        "source entropy {entropy:.4} bits/symbol, ideal {ideal:.0} bytes, overhead {:+.3}%",
        100.0 * (bytes.len() as f64 / ideal - 1.0)
    );
    Ok(())
}

//! Rate-distortion sweeps over the rate weight, and per-anchor bit histograms.

use std::io::Write;
use std::time::Instant;

use crate::codec::{compress, decompress, EncodedScene};
use crate::error::{CodecError, Result};
use crate::frame::SceneFrame;
use crate::scene::AnchorSet;
use crate::trainer::{distortion_proxy, TrainConfig};

/// The sweep endpoints and the points in between used by default.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.002, 0.005, 0.01, 0.02, 0.04];

pub const RD_HEADER: &str =
    "lambda_r,total_bytes,plane_bytes,attr_bytes,pos_bytes,weights_bytes,mask_bytes,attr_mse,train_s,decode_s,seed,status";

/// Bits per histogram bin.
pub const HIST_BIN_BITS: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub lambda_r: f64,
    pub total_bytes: usize,
    pub plane_bytes: usize,
    pub attr_bytes: usize,
    pub pos_bytes: usize,
    pub weights_bytes: usize,
    pub mask_bytes: usize,
    /// Mean squared error of the decoded attributes in normalized space.
    pub attr_mse: f64,
    pub train_s: f64,
    pub decode_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub lambda_r: f64,
    pub outcome: std::result::Result<(RdPoint, Vec<f64>), String>,
}

/// Compresses `set` at `cfg`, decodes the result and measures it.
pub fn run_point(set: &AnchorSet, cfg: &TrainConfig) -> Result<(RdPoint, EncodedScene)> {
    let (enc, trained) = compress(set, cfg)?;
    let t = Instant::now();
    let dec = decompress(&enc.bytes, false)?;
    let decode_s = t.elapsed().as_secs_f64();
    if dec.normalized != enc.reconstructed {
        return Err(CodecError::Validation(
            "decoded attributes differ from the encoder's".into(),
        ));
    }
    let frame = SceneFrame::fit(set)?;
    let s = enc.sizes;
    let point = RdPoint {
        lambda_r: cfg.lambda_r,
        total_bytes: s.total(),
        plane_bytes: s.planes,
        attr_bytes: s.attributes,
        pos_bytes: s.positions,
        weights_bytes: s.weights,
        mask_bytes: s.mask,
        attr_mse: distortion_proxy(&frame.normalized(set), &dec.normalized),
        train_s: trained.train_seconds,
        decode_s,
        seed: cfg.seed,
    };
    Ok((point, enc))
}

/// One run per rate weight, all other settings from `base`. Failures are
/// kept in the result instead of aborting the sweep.
pub fn rd_sweep(set: &AnchorSet, base: &TrainConfig, lambdas: &[f64]) -> Vec<SweepRun> {
    lambdas
        .iter()
        .map(|&lambda_r| {
            let cfg = TrainConfig {
                lambda_r,
                ..base.clone()
            };
            SweepRun {
                lambda_r,
                outcome: run_point(set, &cfg)
                    .map(|(p, enc)| (p, enc.anchor_bits))
                    .map_err(|e| e.to_string()),
            }
        })
        .collect()
}

/// Writes the sweep table. Failed points keep their rate weight and seed
/// and carry the error in the status column.
pub fn write_rd_csv(runs: &[SweepRun], seed: u64, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{RD_HEADER}")?;
    for r in runs {
        match &r.outcome {
            Ok((p, _)) => writeln!(
                out,
                "{},{},{},{},{},{},{},{:.9e},{:.3},{:.3},{},ok",
                p.lambda_r,
                p.total_bytes,
                p.plane_bytes,
                p.attr_bytes,
                p.pos_bytes,
                p.weights_bytes,
                p.mask_bytes,
                p.attr_mse,
                p.train_s,
                p.decode_s,
                p.seed
            )?,
            Err(e) => writeln!(
                out,
                "{},,,,,,,,,,{seed},error: {}",
                r.lambda_r,
                e.replace([',', '\n'], ";")
            )?,
        }
    }
    Ok(())
}

/// Counts of anchors per `HIST_BIN_BITS`-wide bin, from bin 0 to the last
/// non-empty one.
pub fn bit_histogram(anchor_bits: &[f64]) -> Vec<usize> {
    let mut counts = Vec::new();
    for &b in anchor_bits {
        let k = (b / HIST_BIN_BITS).floor().max(0.0) as usize;
        if k >= counts.len() {
            counts.resize(k + 1, 0);
        }
        counts[k] += 1;
    }
    counts
}

/// `lambda_r,bits_lo,bits_hi,anchors` rows for every successful run.
pub fn write_histogram_csv(runs: &[SweepRun], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "lambda_r,bits_lo,bits_hi,anchors")?;
    for r in runs {
        if let Ok((_, bits)) = &r.outcome {
            for (k, c) in bit_histogram(bits).into_iter().enumerate() {
                let lo = k as f64 * HIST_BIN_BITS;
                writeln!(out, "{},{},{},{}", r.lambda_r, lo, lo + HIST_BIN_BITS, c)?;
            }
        }
    }
    Ok(())
}

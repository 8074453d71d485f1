//! Command-line front end. Exit codes: 0 success, 2 invalid arguments,
//! 3 bad or corrupt input, 4 training divergence.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codec::{compress, decompress, SizeReport};
use crate::container::read_table;
use crate::error::{CodecError, Result};
use crate::scene::{
    assign_visibility, gen_synthetic_scene, load_anchor_set, radius_covering, save_anchor_set, AnchorSet, SyntheticSpec,
};
use crate::sweep::{rd_sweep, write_histogram_csv, write_rd_csv};
use crate::trainer::{write_training_log, SamplingMode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "anchor-codec", version, about = "Compress anchor-point scene attributes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the entropy models on an anchor file and write a .c3p container.
    Compress(CompressArgs),
    /// Decode a .c3p container back to an anchor file.
    Decompress(DecompressArgs),
    /// Print the header and section table of a .c3p container.
    Inspect(InspectArgs),
    /// Compress at several rate weights and write one CSV row per weight.
    RdSweep(SweepArgs),
    /// Write a seeded synthetic anchor file.
    GenSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0.01)]
    pub lambda_r: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "usro")]
    pub sampling: SamplingMode,
    /// Evaluate the plane rate every T steps.
    #[arg(long, default_value_t = 4)]
    pub ardo_t: usize,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lambda_r: self.lambda_r,
            steps: self.steps,
            seed: self.seed,
            sampling: self.sampling,
            ardo_interval: self.ardo_t,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Training log; defaults to the output path with `.log.csv` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Decode the five plane streams concurrently.
    #[arg(long)]
    pub parallel_planes: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Print key=value lines instead of a table.
    #[arg(long)]
    pub machine: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0.002,0.005,0.01,0.02,0.04")]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-anchor bit histogram; defaults to the output path with `.hist.csv` appended.
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "usro")]
    pub sampling: SamplingMode,
    #[arg(long, default_value_t = 4)]
    pub ardo_t: usize,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub anchors: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.15)]
    pub noise: f64,
    /// Fraction of anchors seen by at least one training view.
    #[arg(long, default_value_t = 1.0)]
    pub visible_fraction: f64,
    #[arg(long)]
    pub with_mask: bool,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &CodecError) -> i32 {
    match e {
        CodecError::Config(_) => EXIT_USAGE,
        CodecError::Divergence { .. } | CodecError::Numeric(_) => EXIT_DIVERGED,
        _ => EXIT_INPUT,
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Compress(a) => cmd_compress(&a),
        Command::Decompress(a) => cmd_decompress(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::RdSweep(a) => cmd_rd_sweep(&a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn print_sizes(s: &SizeReport) {
    println!(
        "size: total {} B = header {} + positions {} + weights {} + planes {} + mask {} + attributes {}",
        s.total(),
        s.header,
        s.positions,
        s.weights,
        s.planes,
        s.mask,
        s.attributes
    );
}

pub fn cmd_compress(a: &CompressArgs) -> Result<()> {
    let cfg = a.train.config();
    cfg.validate()?;
    let set = load_anchor_set(&a.input)?;
    let (enc, trained) = compress(&set, &cfg)?;
    fs::write(&a.output, &enc.bytes)?;
    let log = a.log.clone().unwrap_or_else(|| with_suffix(&a.output, ".log.csv"));
    let mut w = BufWriter::new(fs::File::create(&log)?);
    write_training_log(&trained.history, &mut w)?;
    w.flush()?;
    println!(
        "trained {} steps in {:.2} s ({} plane-rate evaluations), lambda_r {}",
        trained.history.len(),
        trained.train_seconds,
        trained.plane_evaluations,
        cfg.lambda_r
    );
    if let Some(last) = trained.history.last() {
        let r = &last.report;
        println!(
            "final step {}: distortion {:.6e}, sampled attribute bits {:.1}, plane bits {:.1}, loss {:.6e}",
            r.step, r.distortion, r.attr_bits, r.plane_bits, r.total
        );
    }
    print_sizes(&enc.sizes);
    println!("wrote {} and {}", a.output.display(), log.display());
    Ok(())
}

pub fn cmd_decompress(a: &DecompressArgs) -> Result<()> {
    let bytes = fs::read(&a.input)?;
    let dec = decompress(&bytes, a.parallel_planes)?;
    save_anchor_set(&dec.set, &a.output)?;
    let t = dec.timings;
    println!(
        "decoded {} anchors: planes {:.3} s ({}), attributes {:.3} s, total {:.3} s",
        dec.set.len(),
        t.planes,
        if a.parallel_planes { "parallel" } else { "serial" },
        t.attributes,
        t.total
    );
    Ok(())
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.input)?;
    let (h, table) = read_table(&bytes)?;
    let sizes = SizeReport::of_bytes(&bytes)?;
    let mut out = std::io::stdout().lock();
    if a.machine {
        writeln!(out, "file_bytes={}", bytes.len())?;
        writeln!(out, "anchors={}", h.anchor_count)?;
        writeln!(out, "offsets_per_anchor={}", h.offsets_per_anchor)?;
        writeln!(out, "base={}", h.base)?;
        writeln!(out, "channels={}", h.channels)?;
        writeln!(out, "lambda_r={}", h.lambda_r)?;
        writeln!(out, "lambda_tri={}", h.lambda_tri)?;
        writeln!(out, "header_bytes={}", sizes.header)?;
        for e in &table {
            writeln!(out, "section.{}={},{},{:08x}", e.id.code(), e.offset, e.len, e.crc)?;
        }
        writeln!(out, "plane_bytes={}", sizes.planes)?;
        writeln!(out, "attr_bytes={}", sizes.attributes)?;
    } else {
        writeln!(out, "file       {} bytes", bytes.len())?;
        writeln!(out, "anchors    {} (K = {})", h.anchor_count, h.offsets_per_anchor)?;
        writeln!(out, "planes     B = {}, {} channels", h.base, h.channels)?;
        writeln!(out, "lambda     r = {}, tri = {}", h.lambda_r, h.lambda_tri)?;
        writeln!(
            out,
            "{:<4} {:<16} {:>10} {:>10} {:>10}",
            "id", "section", "offset", "bytes", "crc32"
        )?;
        writeln!(
            out,
            "{:<4} {:<16} {:>10} {:>10} {:>10}",
            "-", "header+table", 0, sizes.header, "-"
        )?;
        for e in &table {
            writeln!(
                out,
                "{:<4} {:<16} {:>10} {:>10} {:>10}",
                e.id.code(),
                e.id.name(),
                e.offset,
                e.len,
                format!("{:08x}", e.crc)
            )?;
        }
        writeln!(
            out,
            "planes {} bytes, attributes {} bytes",
            sizes.planes, sizes.attributes
        )?;
    }
    Ok(())
}

pub fn cmd_rd_sweep(a: &SweepArgs) -> Result<()> {
    if a.lambdas.is_empty() {
        return Err(CodecError::Config("need at least one rate weight".into()));
    }
    let base = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        sampling: a.sampling,
        ardo_interval: a.ardo_t,
        ..TrainConfig::default()
    };
    for &l in &a.lambdas {
        TrainConfig {
            lambda_r: l,
            ..base.clone()
        }
        .validate()?;
    }
    let set = load_anchor_set(&a.input)?;
    let runs = rd_sweep(&set, &base, &a.lambdas);
    let mut w = BufWriter::new(fs::File::create(&a.out)?);
    write_rd_csv(&runs, a.seed, &mut w)?;
    w.flush()?;
    let hist = a.hist.clone().unwrap_or_else(|| with_suffix(&a.out, ".hist.csv"));
    let mut w = BufWriter::new(fs::File::create(&hist)?);
    write_histogram_csv(&runs, &mut w)?;
    w.flush()?;
    let ok = runs.iter().filter(|r| r.outcome.is_ok()).count();
    println!(
        "{ok} of {} points succeeded; wrote {} and {}",
        runs.len(),
        a.out.display(),
        hist.display()
    );
    if ok == 0 {
        return Err(runs
            .into_iter()
            .find_map(|r| r.outcome.err())
            .map(|e| CodecError::Divergence { step: 0, detail: e })
            .expect("at least one run"));
    }
    Ok(())
}

pub fn cmd_gen_synthetic(a: &SyntheticArgs) -> Result<()> {
    if !(a.visible_fraction > 0.0 && a.visible_fraction <= 1.0) {
        return Err(CodecError::Config("visible fraction must be in (0, 1]".into()));
    }
    let set = gen_synthetic_scene(&SyntheticSpec {
        anchors: a.anchors,
        seed: a.seed,
        clusters: a.clusters,
        noise: a.noise,
        with_mask: a.with_mask,
        ..SyntheticSpec::default()
    })
    .map_err(|e| match e {
        CodecError::Validation(m) => CodecError::Config(m),
        other => other,
    })?;
    let set = if a.visible_fraction < 1.0 {
        let radius = radius_covering(&set, a.visible_fraction);
        let (mut anchors, mask) = set.into_parts();
        assign_visibility(&mut anchors, radius);
        AnchorSet::new(anchors, mask)?
    } else {
        set
    };
    save_anchor_set(&set, &a.out)?;
    let visible = set.anchors().iter().filter(|x| x.visibility > 0).count();
    println!("wrote {} anchors ({visible} visible) to {}", set.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(run(["anchor-codec", "compress", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["anchor-codec"]), EXIT_USAGE);
        assert_eq!(
            exit_code(&CodecError::Divergence {
                step: 1,
                detail: String::new()
            }),
            EXIT_DIVERGED
        );
        assert_eq!(exit_code(&CodecError::corrupt("mask", "x")), EXIT_INPUT);
        assert_eq!(exit_code(&CodecError::Config("x".into())), EXIT_USAGE);
    }

    #[test]
    fn lambdas_parse() {
        let c = Cli::try_parse_from(["x", "rd-sweep", "--input", "a", "--out", "b", "--lambdas", "0.01,0.02"]).unwrap();
        let Command::RdSweep(s) = c.command else { panic!() };
        assert_eq!(s.lambdas, vec![0.01, 0.02]);
    }
}

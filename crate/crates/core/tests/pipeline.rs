use std::path::Path;
use std::process::{Command, Output};

use anchor_codec::codec::{compress, decompress, encode_trained, SizeReport};
use anchor_codec::frame::SceneFrame;
use anchor_codec::scene::{gen_synthetic_scene, SyntheticSpec};
use anchor_codec::trainer::TrainConfig;

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchor-codec"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn requantizing_decoded_scene_is_a_fixed_point() {
    let set = gen_synthetic_scene(&SyntheticSpec {
        anchors: 120,
        seed: 4,
        with_mask: true,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 4,
        ..TrainConfig::default()
    };
    let (enc, trained) = compress(&set, &cfg).unwrap();
    let dec = decompress(&enc.bytes, false).unwrap();
    let h = &dec.header;
    let frame = SceneFrame::from_parts(enc.positions.clone(), h.basis(), h.bounds(), h.stats());
    let again = encode_trained(&frame, &dec.set, &trained.model).unwrap();
    assert_eq!(again.bytes, enc.bytes);
}

#[test]
fn cli_round_trip_and_inspection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&cli(
        &[
            "gen-synthetic",
            "--out",
            "s.anch",
            "--anchors",
            "200",
            "--seed",
            "3",
            "--with-mask",
        ],
        d,
    ));
    ok(&cli(
        &[
            "gen-synthetic",
            "--out",
            "t.anch",
            "--anchors",
            "200",
            "--seed",
            "3",
            "--with-mask",
        ],
        d,
    ));
    assert_eq!(
        std::fs::read(d.join("s.anch")).unwrap(),
        std::fs::read(d.join("t.anch")).unwrap()
    );

    let out = ok(&cli(
        &[
            "compress", "--input", "s.anch", "--output", "s.c3p", "--steps", "5", "--ardo-t", "2",
        ],
        d,
    ));
    assert!(out.contains("3 plane-rate evaluations"), "{out}");
    let log = std::fs::read_to_string(d.join("s.c3p.log.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "step,distortion,attr_bits,plane_bits,gated,wall_ms"
    );
    assert_eq!(log.lines().count(), 6);

    ok(&cli(&["decompress", "--input", "s.c3p", "--output", "a.anch"], d));
    let par = ok(&cli(
        &[
            "decompress",
            "--input",
            "s.c3p",
            "--output",
            "b.anch",
            "--parallel-planes",
        ],
        d,
    ));
    assert!(par.contains("planes") && par.contains("attributes"));
    assert_eq!(
        std::fs::read(d.join("a.anch")).unwrap(),
        std::fs::read(d.join("b.anch")).unwrap()
    );

    let bytes = std::fs::read(d.join("s.c3p")).unwrap();
    let machine = ok(&cli(&["inspect", "--input", "s.c3p", "--machine"], d));
    let value = |k: &str| -> usize {
        machine
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let sections: usize = machine
        .lines()
        .filter(|l| l.starts_with("section."))
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(value("header_bytes") + sections, bytes.len());
    assert_eq!(value("file_bytes"), bytes.len());
    let sizes = SizeReport::of_bytes(&bytes).unwrap();
    assert_eq!(value("plane_bytes"), sizes.planes);
    assert_eq!(value("attr_bytes"), sizes.attributes);
    assert_eq!(value("anchors"), 200);
    ok(&cli(&["inspect", "--input", "s.c3p"], d));
}

#[test]
fn cli_errors_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = cli(&["compress", "--no-such-flag"], d);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert_eq!(
        cli(
            &["compress", "--input", "x", "--output", "y", "--sampling", "sideways"],
            d
        )
        .status
        .code(),
        Some(2)
    );

    ok(&cli(&["gen-synthetic", "--out", "s.anch", "--anchors", "60"], d));
    assert_eq!(
        cli(
            &["compress", "--input", "s.anch", "--output", "s.c3p", "--lambda-r", "-1"],
            d
        )
        .status
        .code(),
        Some(2)
    );
    ok(&cli(
        &["compress", "--input", "s.anch", "--output", "s.c3p", "--steps", "0"],
        d,
    ));
    let bytes = std::fs::read(d.join("s.c3p")).unwrap();

    std::fs::write(d.join("short.c3p"), &bytes[..bytes.len() - 10]).unwrap();
    let t = cli(&["decompress", "--input", "short.c3p", "--output", "o.anch"], d);
    assert_eq!(t.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&t.stderr).contains("attributes"));

    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 20] ^= 0x40;
    std::fs::write(d.join("flip.c3p"), &flipped).unwrap();
    let f = cli(&["decompress", "--input", "flip.c3p", "--output", "o.anch"], d);
    assert_eq!(f.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&f.stderr).contains("attributes"));

    std::fs::write(d.join("magic.c3p"), b"NOPE and some more bytes").unwrap();
    assert_eq!(cli(&["inspect", "--input", "magic.c3p"], d).status.code(), Some(3));
    assert_eq!(
        cli(&["decompress", "--input", "missing.c3p", "--output", "o"], d)
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn cli_sweep_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&cli(&["gen-synthetic", "--out", "s.anch", "--anchors", "80"], d));
    let sweep = |out: &str| {
        ok(&cli(
            &[
                "rd-sweep",
                "--input",
                "s.anch",
                "--lambdas",
                "0.01",
                "--out",
                out,
                "--steps",
                "3",
            ],
            d,
        ));
        std::fs::read_to_string(d.join(out)).unwrap()
    };
    let a = sweep("a.csv");
    let b = sweep("b.csv");
    assert_eq!(a.lines().count(), 2);
    assert!(a.starts_with(
        "lambda_r,total_bytes,plane_bytes,attr_bytes,pos_bytes,weights_bytes,mask_bytes,attr_mse,train_s,decode_s,seed"
    ));
    // Wall-clock columns (train_s, decode_s) are the only ones allowed to differ.
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| *i != 8 && *i != 9)
                    .map(|(_, v)| v)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    let hist = std::fs::read_to_string(d.join("a.csv.hist.csv")).unwrap();
    assert_eq!(hist.lines().next().unwrap(), "lambda_r,bits_lo,bits_hi,anchors");
    let counted: usize = hist
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counted, 80);
}

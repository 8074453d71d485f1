//! Frozen byte layouts. Set UPDATE_GOLDEN=1 to rewrite the files after an
//! intentional format change.

use std::path::PathBuf;

use anchor_codec::codec::{compress, decompress};
use anchor_codec::container::{
    assemble, disassemble, encode_mask, encode_positions, read_table, Container, Header, SectionId, HEADER_BYTES,
};
use anchor_codec::scene::{gen_synthetic_scene, SyntheticSpec, ATTR_DIM};
use anchor_codec::trainer::TrainConfig;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn check_or_update(name: &str, bytes: &[u8]) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let frozen = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(
        frozen == bytes,
        "{name} differs from the frozen file ({} vs {} bytes)",
        bytes.len(),
        frozen.len()
    );
}

fn minimal() -> Container {
    let header = Header {
        anchor_count: 2,
        offsets_per_anchor: 10,
        base: 64,
        channels: 8,
        lambda_r: 0.01,
        lambda_tri: 10.0,
        pca_mean: [0.5, -1.0, 2.0],
        pca_directions: [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]],
        bounds_min: [-4.0, -2.0, -1.0],
        bounds_max: [4.0, 2.0, 1.0],
        norm_shift: std::array::from_fn(|i| i as f32 * 0.25),
        norm_scale: std::array::from_fn(|i| 1.0 + i as f32),
    };
    let positions = encode_positions(&[[1.0, 0.0, -0.0], [0.5, -2.0, 65504.0]]).unwrap();
    let mask: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
    let mut sections = vec![(SectionId::Positions, positions), (SectionId::Weights, vec![0xAB; 5])];
    for k in 0..5 {
        sections.push((SectionId::Plane(k), vec![k; 3 + k as usize]));
    }
    sections.push((SectionId::Mask, encode_mask(&mask)));
    sections.push((SectionId::Attributes, b"attr".to_vec()));
    Container { header, sections }
}

#[test]
fn minimal_container_bytes() {
    let c = minimal();
    let bytes = assemble(&c).unwrap();
    check_or_update("minimal.c3p", &bytes);
    assert_eq!(disassemble(&bytes).unwrap(), c);

    assert_eq!(&bytes[..4], b"C3GP");
    assert_eq!(&bytes[4..6], &[1, 0]);
    assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
    assert_eq!(&bytes[16..20], &0.01f32.to_le_bytes());
    assert_eq!(&bytes[96..100], &0.0f32.to_le_bytes());
    assert_eq!(&bytes[440..444], &1.0f32.to_le_bytes());
    assert_eq!(HEADER_BYTES, 784);
    assert_eq!(&bytes[784..786], &[9, 0]);
    // First table row: positions at 786 + 9 * 13 = 903, 12 bytes.
    assert_eq!(bytes[786], 1);
    assert_eq!(&bytes[787..791], &903u32.to_le_bytes());
    assert_eq!(&bytes[791..795], &12u32.to_le_bytes());
    assert_eq!(&bytes[903..909], &[0x00, 0x3C, 0x00, 0x00, 0x00, 0x80]);
    let last = *read_table(&bytes).unwrap().1.last().unwrap();
    assert_eq!(last.id.code(), 9);
    assert_eq!(last.offset as usize + 4, bytes.len());
    assert_eq!(&bytes[bytes.len() - 4..], b"attr");
}

#[test]
fn untrained_pipeline_bytes() {
    let set = gen_synthetic_scene(&SyntheticSpec {
        anchors: 40,
        seed: 11,
        with_mask: true,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let (enc, _) = compress(&set, &cfg).unwrap();
    // Freeze everything but the weights, which are large and fully determined
    // by the seeded initialization checked elsewhere.
    let (_, table) = read_table(&enc.bytes).unwrap();
    let mut frozen = enc.bytes[..table[0].offset as usize].to_vec();
    for e in &table {
        if e.id != SectionId::Weights {
            frozen.extend_from_slice(&enc.bytes[e.offset as usize..(e.offset + e.len) as usize]);
        }
    }
    check_or_update("untrained_40.bin", &frozen);
    let dec = decompress(&enc.bytes, true).unwrap();
    assert_eq!(dec.normalized, enc.reconstructed);
    assert_eq!(dec.normalized[0].len(), ATTR_DIM);
}

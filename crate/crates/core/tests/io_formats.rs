use std::fs;

use ndarray::Array2;
use proptest::prelude::*;
use statechange::io::{
    catalog_sidecar, decode_checkpoint, decode_features, encode_checkpoint, encode_features, load_dataset, read_checkpoint,
    write_checkpoint, write_dataset,
};
use statechange::model::ModelParams;
use statechange::synth::{generate, Split, SynthConfig};
use statechange::types::{Architecture, Category, CategoryCatalog, HeadLayout, VideoFeatures};
use std::path::Path;

fn catalog(n: usize) -> CategoryCatalog {
    CategoryCatalog::new((0..n).map(|c| Category::new(&format!("c{c}"), "raw", "done", "act")).collect()).unwrap()
}

proptest! {
    #[test]
    fn features_round_trip(rows in 1usize..20, cols in 1usize..9, seed in any::<u32>()) {
        let m = Array2::from_shape_fn((rows, cols), |(r, c)| {
            (((r * 31 + c * 7) as u32 ^ seed) as f32 / 97.0 - 3.0) as f64
        });
        let back = decode_features(&encode_features(&m), Path::new("x")).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn any_truncation_is_reported(cut in 1usize..40) {
        let m = Array2::from_shape_fn((4, 3), |(r, c)| (r + c) as f64);
        let bytes = encode_features(&m);
        let cut = cut.min(bytes.len() - 4);
        let err = decode_features(&bytes[..bytes.len() - cut], Path::new("x")).unwrap_err();
        prop_assert_eq!(err.code(), "truncated_payload");
    }
}

#[test]
fn checkpoint_round_trip_every_architecture() {
    for arch in [Architecture::Independent, Architecture::MultiClassifier, Architecture::Joint1, Architecture::Joint2] {
        for bg in [false, true] {
            let p = ModelParams::init(HeadLayout::new(arch, 3, bg), 5, 4, 9).unwrap();
            let bytes = encode_checkpoint(&p);
            assert_eq!(&bytes[..4], b"MTSC");
            assert_eq!(decode_checkpoint(&bytes, Path::new("m")).unwrap(), p);
        }
    }
}

#[test]
fn checkpoint_errors() {
    let p = ModelParams::init(HeadLayout::new(Architecture::Joint2, 2, true), 3, 2, 0).unwrap();
    let bytes = encode_checkpoint(&p);
    assert_eq!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("m")).unwrap_err().code(), "truncated_payload");
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"FETV");
    assert_eq!(decode_checkpoint(&bad, Path::new("m")).unwrap_err().code(), "bad_magic");
    let mut ver = bytes;
    ver[4] = 9;
    assert_eq!(decode_checkpoint(&ver, Path::new("m")).unwrap_err().code(), "version");
}

#[test]
fn checkpoint_files_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mtsc");
    let p = ModelParams::init(HeadLayout::new(Architecture::MultiClassifier, 2, false), 3, 2, 1).unwrap();
    write_checkpoint(&path, &p, &catalog(2)).unwrap();
    assert!(catalog_sidecar(&path).exists());
    let (back, cat) = read_checkpoint(&path).unwrap();
    assert_eq!(back, p);
    assert_eq!(cat, catalog(2));
    assert!(write_checkpoint(&path, &p, &catalog(3)).is_err());
    // only the two final files remain: no stray temp files
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn dataset_round_trip_and_header_checks() {
    let cfg = SynthConfig { categories: 2, videos_per_category: 3, frames: 50, dim: 4, ..Default::default() };
    let data = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let videos: Vec<(&VideoFeatures, Option<Split>)> = data.videos.iter().map(|v| (&v.features, Some(v.split))).collect();
    let manifest = write_dataset(dir.path(), &data.catalog, &videos, Some(&data.annotations)).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded.videos.len(), data.videos.len());
    for (a, b) in loaded.videos.iter().zip(&data.videos) {
        assert_eq!(a.id, b.features.id);
        let rounded = b.features.frames.mapv(|v| v as f32 as f64);
        assert_eq!(a.frames, rounded);
    }
    assert_eq!(loaded.training_videos().len(), data.videos.iter().filter(|v| v.split == Split::Train).count());

    // a manifest disagreeing with a feature header is rejected
    let text = fs::read_to_string(&manifest).unwrap();
    let broken = text.replacen("\"num_frames\": 50", "\"num_frames\": 49", 1);
    fs::write(&manifest, broken).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap_err().code(), "dimension");
}

#[test]
fn zero_frame_file_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let empty = VideoFeatures::new("e", 0, 1.0, Array2::zeros((0, 3)));
    let manifest = write_dataset(dir.path(), &catalog(1), &[(&empty, None)], None).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap_err().code(), "too_short");
}

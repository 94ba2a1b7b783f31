use std::path::PathBuf;
use std::sync::Arc;

use bpclip::data::{self, DataError, LoadedSample, ManifestOptions, Polarity, SplitSpec};
use bpclip::Mode;
use proptest::prelude::*;

fn write(dir: &std::path::Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const FR_CSV: &str = "\
id,image_path,reference_path,mos,group_key
a,dist/a.png,ref/x.png,3.5,x
b,dist/b.png,ref/x.png,2.0,x
c,dist/c.png,ref/y.png,4.25,y
";

const FR_JSON: &str = r#"{
  "meta": {"mode": "FR", "mos_polarity": "higher_better", "mos_min": 1, "mos_max": 5},
  "entries": [
    {"id": "a", "image_path": "dist/a.png", "reference_path": "ref/x.png", "mos": 3.5, "group_key": "x"},
    {"id": "b", "image_path": "dist/b.png", "reference_path": "ref/x.png", "mos": 2.0, "group_key": "x"},
    {"id": "c", "image_path": "dist/c.png", "reference_path": "ref/y.png", "mos": 4.25, "group_key": "y"}
  ]
}"#;

fn fr_opts() -> ManifestOptions {
    ManifestOptions {
        mode: Some(Mode::Fr),
        mos_range: Some((1.0, 5.0)),
        ..Default::default()
    }
}

#[test]
fn fr_csv_three_rows_two_groups() {
    let dir = tempfile::tempdir().unwrap();
    let m = data::load_manifest(write(dir.path(), "m.csv", FR_CSV), &fr_opts()).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.groups().len(), 2);
    assert_eq!(m.meta.mode, Mode::Fr);
    assert_eq!(m.root, dir.path());
    assert_eq!(m.resolve(&m.entries[2].image_path), dir.path().join("dist/c.png"));
}

#[test]
fn csv_and_json_agree() {
    let dir = tempfile::tempdir().unwrap();
    let a = data::load_manifest(write(dir.path(), "m.csv", FR_CSV), &fr_opts()).unwrap();
    let b = data::load_manifest(write(dir.path(), "m.json", FR_JSON), &ManifestOptions::default()).unwrap();
    assert_eq!(a, b);
    let again = data::load_manifest(write(dir.path(), "again.json", &a.to_json()), &ManifestOptions::default()).unwrap();
    assert_eq!(again, a);
}

#[test]
fn nr_row_with_reference_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = "id,image_path,reference_path,mos,group_key\na,img/a.png,,3,\nb,img/b.png,ref/b.png,2,\n";
    let opts = ManifestOptions {
        mode: Some(Mode::Nr),
        ..Default::default()
    };
    let err = data::load_manifest(write(dir.path(), "m.csv", text), &opts).unwrap_err();
    assert!(matches!(err, DataError::Validation(_)), "{err}");
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let dup = "id,image_path,reference_path,mos,group_key\na,d/a.png,r/x.png,1,x\na,d/b.png,r/x.png,2,x\n";
    let err = data::load_manifest(write(dir.path(), "dup.csv", dup), &fr_opts()).unwrap_err();
    assert!(matches!(err, DataError::DuplicateId(ref id) if id == "a"), "{err}");

    let missing = "id,image_path,mos\na,d/a.png,1\n";
    let err = data::load_manifest(write(dir.path(), "col.csv", missing), &fr_opts()).unwrap_err();
    assert!(matches!(err, DataError::MissingColumn(_)), "{err}");

    let opts = ManifestOptions {
        check_files: true,
        ..fr_opts()
    };
    let err = data::load_manifest(write(dir.path(), "m.csv", FR_CSV), &opts).unwrap_err();
    assert!(matches!(err, DataError::DanglingPath { .. }), "{err}");
}

#[test]
fn lower_better_scale_flips() {
    let dir = tempfile::tempdir().unwrap();
    let opts = ManifestOptions {
        polarity: Polarity::LowerBetter,
        ..fr_opts()
    };
    let m = data::load_manifest(write(dir.path(), "m.csv", FR_CSV), &opts).unwrap();
    let n = data::normalize_mos(&m).unwrap();
    let got: Vec<f64> = n.entries.iter().map(|e| e.mos).collect();
    assert_eq!(got, vec![0.375, 0.75, 0.1875]);
}

#[test]
fn shorter_side_resize_dims() {
    assert_eq!(data::shorter_side_dims(3000, 4000, 448), (448, 597));
    assert_eq!(data::shorter_side_dims(4000, 3000, 448), (597, 448));
    assert_eq!(data::shorter_side_dims(100, 100, 64), (64, 64));
}

fn pair(h: usize, w: usize) -> LoadedSample {
    let img = Arc::new(ndarray::Array3::from_shape_fn((3, h, w), |(c, y, x)| (c * 1000 + y * w + x) as f64));
    LoadedSample {
        id: "p".into(),
        image_path: "d.png".into(),
        reference: Some(Arc::new(img.mapv(|v| -v))),
        image: img,
        reference_path: Some("r.png".into()),
        mos: 0.5,
    }
}

#[test]
fn augmentation_is_reproducible() {
    let s = pair(40, 50);
    let run = |seed| {
        let mut rng = data::sample_rng(seed, "p", 3);
        (0..20)
            .map(|_| data::augment_patch(&s, &mut rng, 16, true).unwrap().distorted_crop)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn undersized_image_names_path() {
    let s = pair(10, 30);
    let mut rng = data::sample_rng(0, "p", 0);
    let err = data::augment_patch(&s, &mut rng, 16, true).unwrap_err();
    assert!(err.to_string().contains("d.png"), "{err}");
}

proptest! {
    #[test]
    fn crops_stay_in_bounds(h in 8usize..64, w in 8usize..64, size in 1usize..8, seed: u64, train: bool) {
        let mut rng = data::sample_rng(seed, "x", 0);
        let c = data::sample_crop(h, w, size, &mut rng, train);
        prop_assert!(c.top + c.size <= h && c.left + c.size <= w);
        prop_assert_eq!(c.size, size);
        if !train {
            prop_assert!(!c.hflip && !c.vflip);
        }
    }

    #[test]
    fn fr_splits_partition_groups(groups in 3usize..30, per in 1usize..4, seed: u64, repeat in 0u32..10) {
        let entries = (0..groups * per)
            .map(|i| data::Entry {
                id: format!("s{i}"),
                image_path: format!("d/{i}.png").into(),
                reference_path: Some(format!("r/{}.png", i / per).into()),
                mos: i as f64,
                group_key: format!("g{}", i / per),
            })
            .collect();
        let m = data::SampleManifest::new(entries, Mode::Fr, Polarity::HigherBetter, None, "".into(), false).unwrap();
        let s = data::split_dataset(&m, &SplitSpec::for_mode(Mode::Fr, seed, repeat)).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..groups * per).collect::<Vec<_>>());
        let g = |idx: &[usize]| idx.iter().map(|&i| m.entries[i].group_key.clone()).collect::<std::collections::HashSet<_>>();
        prop_assert!(g(&s.train).is_disjoint(&g(&s.test)));
        prop_assert!(g(&s.train).is_disjoint(&g(&s.val)));
        prop_assert!(g(&s.val).is_disjoint(&g(&s.test)));
        prop_assert!(!s.train.is_empty() && !s.test.is_empty());
    }
}

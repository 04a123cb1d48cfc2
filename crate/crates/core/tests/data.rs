use std::collections::BTreeMap;
use std::path::Path;

use maniqa::data::augment::{flip_horizontal, multi_crop_specs};
use maniqa::data::{
    augment, export_dataset, load_manifest, multi_crop, split_indices, synth_generate, Dataset, DatasetItem,
    DatasetManifest, Distortion, Image, ItemSource, SynthConfig,
};
use maniqa::metrics::srocc;
use maniqa::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn item(id: &str, mos: f64, group: &str) -> DatasetItem {
    DatasetItem {
        id: id.into(),
        source: ItemSource::File(format!("{id}.png").into()),
        mos,
        ref_group: group.into(),
    }
}

fn ramp(h: usize, w: usize) -> Image {
    Image::new(h, w, (0..3 * h * w).map(|i| i as f64 / (3 * h * w) as f64).collect()).unwrap()
}

#[test]
fn manifest_parses_and_records_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "m.csv", "id,path,mos,ref_group\na,a.png,3.5,r1\nb,b.png,1.5,r2\n");
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!((m.mos_min, m.mos_max), (1.5, 3.5));
    assert_eq!(m.normalized_mos(), vec![1.0, 0.0]);
    assert_eq!(m.items[0].source, ItemSource::File("a.png".into()));
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.csv", "id,path,mos,ref_group\na,a.png,1,r\nb,b.png,abc,r\n");
    match load_manifest(&bad) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let dup = write(dir.path(), "dup.csv", "id,path,mos,ref_group\na,a.png,1,r\na,b.png,2,r\n");
    assert!(matches!(load_manifest(&dup), Err(Error::Validation(_))));
    let header = write(dir.path(), "hdr.csv", "name,path,mos,group\na,a.png,1,r\n");
    assert!(matches!(load_manifest(&header), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(load_manifest(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
}

#[test]
fn single_item_normalizes_to_half() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "one.csv", "id,path,mos,ref_group\na,a.png,42,r\n");
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.normalized_mos(), vec![0.5]);
    assert_eq!(m.denormalize(0.5), 42.0);
}

proptest! {
    #[test]
    fn normalization_round_trips(lo in -100.0f64..100.0, span in 1e-3f64..100.0, t in 0.0f64..1.0) {
        let m = DatasetManifest::from_items(vec![item("a", lo, "r"), item("b", lo + span, "r")]).unwrap();
        let mos = lo + t * span;
        prop_assert!((m.denormalize(m.normalize(mos)) - mos).abs() < 1e-12);
    }
}

#[test]
fn split_ten_groups_eight_to_two_and_deterministic() {
    let items: Vec<_> = (0..30).map(|i| item(&format!("i{i}"), i as f64, &format!("g{}", i % 10))).collect();
    let m = DatasetManifest::from_items(items).unwrap();
    let (train, test) = split_indices(&m, 0.8, 3).unwrap();
    let groups = |idx: &[usize]| idx.iter().map(|&i| m.items[i].ref_group.clone()).collect::<std::collections::BTreeSet<_>>();
    assert_eq!(groups(&train).len(), 8);
    assert_eq!(groups(&test).len(), 2);
    assert_eq!(train.len() + test.len(), 30);
    assert_eq!(split_indices(&m, 0.8, 3).unwrap(), (train, test));
}

#[test]
fn split_errors() {
    let one_group = DatasetManifest::from_items(vec![item("a", 1.0, "g"), item("b", 2.0, "g")]).unwrap();
    assert!(matches!(split_indices(&one_group, 0.8, 0), Err(Error::Validation(_))));
    let two = DatasetManifest::from_items(vec![item("a", 1.0, "g"), item("b", 2.0, "h")]).unwrap();
    for ratio in [0.0, 1.0, -0.5, f64::NAN] {
        assert!(matches!(split_indices(&two, ratio, 0), Err(Error::Config(_))));
    }
}

#[test]
fn split_never_separates_a_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..200 {
        let groups = rng.random_range(2..15);
        let n = rng.random_range(groups..60);
        let items: Vec<_> = (0..n)
            .map(|i| {
                let g = if i < groups { i } else { rng.random_range(0..groups) };
                item(&format!("i{i}"), rng.random(), &format!("g{g}"))
            })
            .collect();
        let m = DatasetManifest::from_items(items).unwrap();
        let ratio = rng.random_range(0.05..0.95);
        let (train, test) = split_indices(&m, ratio, trial).unwrap();
        let mut side = BTreeMap::new();
        for (idx, s) in [(&train, 0), (&test, 1)] {
            for &i in idx.iter() {
                let prev = side.insert(m.items[i].ref_group.clone(), s);
                assert!(prev.is_none() || prev == Some(s), "group split across sides");
            }
        }
        assert!(!train.is_empty() && !test.is_empty());
        assert_eq!(train.len() + test.len(), n);
    }
}

#[test]
fn synthetic_mos_tracks_severity_for_every_distortion() {
    for d in Distortion::ALL {
        let data = synth_generate(&SynthConfig {
            num_refs: 100,
            distortions_per_ref: 10,
            image_size: 8,
            seed: 5,
            distortions: vec![d],
        })
        .unwrap();
        let (sev, mos): (Vec<f64>, Vec<f64>) = data
            .manifest
            .items
            .iter()
            .map(|it| match it.source {
                ItemSource::Synthetic { severity, .. } => (severity, it.mos),
                _ => unreachable!(),
            })
            .unzip();
        assert_eq!(sev.len(), 1000);
        let r = srocc(&sev, &mos).unwrap();
        assert!(r < -0.95, "{d}: {r}");
        for (s, m) in sev.iter().zip(&mos) {
            assert!((0.0..=1.0).contains(m));
            if *s == 0.0 {
                assert!(*m >= 0.98);
            }
        }
    }
}

#[test]
fn zero_severity_mos_is_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let m = maniqa::data::synth::synthetic_mos(0.0, &mut rng);
        assert!((0.98..=1.0).contains(&m));
    }
}

#[test]
fn synth_is_deterministic_and_well_formed() {
    let cfg = SynthConfig { num_refs: 3, distortions_per_ref: 4, image_size: 16, ..SynthConfig::default() };
    let a = synth_generate(&cfg).unwrap();
    assert_eq!(a, synth_generate(&cfg).unwrap());
    assert_ne!(a, synth_generate(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap());
    assert_eq!(a.len(), 12);
    assert_eq!(a.manifest.groups().len(), 3);
    for img in &a.images {
        assert_eq!((img.height(), img.width()), (16, 16));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(synth_generate(&SynthConfig { distortions: vec![], ..cfg }).is_err());
}

#[test]
fn distortions_leave_severity_zero_images_nearly_intact() {
    let base = ramp(16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for d in Distortion::ALL {
        let out = d.apply(&base, 0.0, &mut rng);
        let worst = out.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{d} changed a clean image by {worst}");
        let heavy = d.apply(&base, 1.0, &mut rng);
        assert_ne!(heavy, base, "{d} at full severity is a no-op");
    }
}

#[test]
fn export_then_load_round_trips_to_eight_bits() {
    let cfg = SynthConfig { num_refs: 2, distortions_per_ref: 2, image_size: 12, ..SynthConfig::default() };
    let data = synth_generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&data, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(text.starts_with("id,path,mos,ref_group\n") && !text.contains('\r'));
    let loaded = Dataset::load(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded.len(), data.len());
    for (a, b) in loaded.manifest.items.iter().zip(&data.manifest.items) {
        assert_eq!((&a.id, a.mos, &a.ref_group), (&b.id, b.mos, &b.ref_group));
    }
    for (a, b) in loaded.images.iter().zip(&data.images) {
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn full_size_crop_without_flip_is_identity() {
    let img = ramp(8, 8);
    assert_eq!(augment(&img, 8, 0.0, 3).unwrap(), img);
    let flipped = augment(&img, 8, 1.0, 3).unwrap();
    assert_eq!(flipped, flip_horizontal(&img));
    assert_eq!(flip_horizontal(&flipped), img);
}

#[test]
fn zero_flip_probability_never_flips() {
    let img = ramp(6, 6);
    for seed in 0..1000 {
        assert_eq!(augment(&img, 6, 0.0, seed).unwrap(), img);
    }
}

#[test]
fn augment_errors_and_determinism() {
    let img = ramp(8, 10);
    assert!(matches!(augment(&img, 9, 0.5, 0), Err(Error::Validation(_))));
    assert!(matches!(augment(&img, 4, 1.5, 0), Err(Error::Config(_))));
    assert_eq!(augment(&img, 4, 0.5, 7).unwrap(), augment(&img, 4, 0.5, 7).unwrap());
    assert!(matches!(multi_crop(&img, 2, 11, 0), Err(Error::Validation(_))));
}

#[test]
fn multi_crop_examples() {
    let img = ramp(12, 12);
    assert_eq!(multi_crop(&img, 1, 12, 4).unwrap(), vec![img.clone()]);
    let specs = multi_crop_specs(&img, 20, 8, 4).unwrap();
    assert_eq!(specs.len(), 20);
    assert_eq!(specs, multi_crop_specs(&img, 20, 8, 4).unwrap());
    assert!(specs.iter().all(|s| !s.flip && s.top <= 4 && s.left <= 4));
    assert!(specs.iter().any(|s| s != &specs[0]));
    assert_eq!(multi_crop(&img, 20, 8, 4).unwrap().len(), 20);
}

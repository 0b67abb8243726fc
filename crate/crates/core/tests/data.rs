use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2me::data::{
    augment, corrupt, generate_sample, generate_scribbles, generate_synthetic_dataset, psnr, tensor_file, Corruption,
    DataError, Dataset, GenConfig, ScribbleConfig, Split, MANIFEST,
};
use s2me::labels::{LabelMap, BACKGROUND, FOREGROUND, UNLABELED};
use s2me::numerics::Tensor;

fn corpus() -> Dataset {
    generate_synthetic_dataset(&GenConfig::new(200, 0, 0, 64, 5)).unwrap()
}

#[test]
fn corpus_fractions_over_200_samples() {
    let d = corpus();
    assert_eq!(d.train.len(), 200);
    for s in &d.train {
        let fg = s.mask.count(FOREGROUND) as f64 / (64.0 * 64.0);
        assert!((0.02..=0.40).contains(&fg), "sample {} fg {fg}", s.id);
        assert!(s.scribble.labeled_fraction() <= 0.05, "sample {}", s.id);
        assert!(s.scribble.count(FOREGROUND) > 0);
        assert!(s.scribble.count(BACKGROUND) > 0);
        assert!(s.scribble_consistent());
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    let st = d.stats();
    assert_eq!(st.samples, 200);
    assert_eq!(st.flagged, 0);
}

#[test]
fn background_strokes_keep_their_margin() {
    let d = generate_synthetic_dataset(&GenConfig::new(30, 0, 0, 48, 8)).unwrap();
    for s in &d.train {
        let (h, w) = s.size();
        for i in 0..h * w {
            if s.scribble.data()[i] != BACKGROUND {
                continue;
            }
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            for j in 0..h * w {
                if s.mask.data()[j] == FOREGROUND {
                    let (fy, fx) = ((j / w) as f64, (j % w) as f64);
                    assert!(((y - fy).powi(2) + (x - fx).powi(2)).sqrt() >= 3.0);
                }
            }
        }
    }
}

#[test]
fn splits_are_disjoint_and_sized() {
    let d = generate_synthetic_dataset(&GenConfig::new(6, 3, 4, 32, 1)).unwrap();
    let ids: Vec<HashSet<u32>> = Split::ALL
        .iter()
        .map(|&s| d.manifest.splits.get(s).iter().map(|e| e.id).collect())
        .collect();
    assert_eq!([ids[0].len(), ids[1].len(), ids[2].len()], [6, 3, 4]);
    assert!(ids[0].is_disjoint(&ids[1]) && ids[0].is_disjoint(&ids[2]) && ids[1].is_disjoint(&ids[2]));
}

#[test]
fn small_size_is_rejected() {
    let err = generate_synthetic_dataset(&GenConfig::new(1, 0, 0, 20, 0)).unwrap_err();
    assert!(err.to_string().contains("20"));
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "val", "test"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(split))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            out.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    out.push((MANIFEST.into(), std::fs::read(dir.join(MANIFEST)).unwrap()));
    out
}

#[test]
fn same_seed_gives_identical_bytes_and_load_roundtrips() {
    let cfg = GenConfig::new(4, 2, 2, 32, 11);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let d = generate_synthetic_dataset(&cfg).unwrap();
    d.save(a.path()).unwrap();
    generate_synthetic_dataset(&cfg).unwrap().save(b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(Dataset::load(a.path()).unwrap(), d);
    let other = generate_synthetic_dataset(&GenConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(other.train[0].image, d.train[0].image);
}

#[test]
fn sample_stream_depends_only_on_seed_and_id() {
    let d = generate_synthetic_dataset(&GenConfig::new(3, 2, 0, 32, 4)).unwrap();
    let (again, _) = generate_sample(4, 4, 32, &ScribbleConfig::default()).unwrap();
    assert_eq!(d.val[1], again);
}

#[test]
fn truncated_sample_file_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_synthetic_dataset(&GenConfig::new(1, 0, 0, 32, 2)).unwrap();
    d.save(dir.path()).unwrap();
    let path = dir.path().join(&d.manifest.splits.train[0].path);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    match Dataset::load(dir.path()).unwrap_err() {
        DataError::Format { offset, .. } => assert!(offset > 10),
        other => panic!("{other}"),
    }
}

#[test]
fn all_background_mask_gets_only_background_strokes() {
    let mask = LabelMap::filled(1, 32, 32, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = generate_scribbles(&mask, &ScribbleConfig::default(), &mut rng);
    assert!(s.fg_omitted);
    assert_eq!(s.mask.count(FOREGROUND), 0);
    assert!(s.mask.count(BACKGROUND) > 0);
}

#[test]
fn augmented_scribbles_agree_with_masks() {
    let d = generate_synthetic_dataset(&GenConfig::new(100, 0, 0, 32, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in &d.train {
        for out in [32, 48] {
            let a = augment(s, &mut rng, 2, out, 0.5).unwrap();
            assert!(a.scribble_consistent());
            assert!(a.mask.data().iter().all(|&v| v <= 1));
            assert!(a.scribble.data().iter().all(|&v| v <= UNLABELED));
            assert_eq!(a.size(), (out, out));
        }
    }
}

#[test]
fn blur_psnr_drops_with_severity() {
    let d = generate_synthetic_dataset(&GenConfig::new(50, 0, 0, 32, 6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in &d.train {
        let p: Vec<f64> = (1..=3)
            .map(|k| psnr(&s.image, &corrupt(s, Corruption::Blur, k, &mut rng).unwrap().image))
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
    }
}

#[test]
fn corruptions_touch_only_the_image() {
    let d = generate_synthetic_dataset(&GenConfig::new(5, 0, 0, 32, 7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in &d.train {
        for kind in [Corruption::Blur, Corruption::Specular, Corruption::BrightnessShift] {
            for sev in 1..=3 {
                let c = corrupt(s, kind, sev, &mut rng).unwrap();
                assert_eq!(c.mask, s.mask);
                assert_eq!(c.scribble, s.scribble);
                assert!(c.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        assert!(corrupt(s, Corruption::Blur, 4, &mut rng).is_err());
    }
    let tagged = d.corrupted(Split::Train, Corruption::Specular, 2, 0).unwrap();
    assert_eq!(
        tagged.manifest.splits.train[0].corruption.as_deref(),
        Some("specular:2")
    );
}

proptest! {
    #[test]
    fn tensor_file_roundtrip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&shape, |_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff));
        let entries = vec![("t".to_string(), t.clone())];
        let back = tensor_file::decode(&tensor_file::encode(&entries).unwrap()).unwrap();
        let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(back[0].1.shape(), t.shape());
        prop_assert_eq!(bits(&back[0].1), bits(&t));
    }

    #[test]
    fn every_truncation_is_rejected(cut in 0usize..60) {
        let t = Tensor::from_fn(&[2, 3], |i| i as f32);
        let bytes = tensor_file::encode(&[("ab".to_string(), t)]).unwrap();
        prop_assume!(cut < bytes.len());
        prop_assert!(tensor_file::decode(&bytes[..cut]).is_err());
    }
}

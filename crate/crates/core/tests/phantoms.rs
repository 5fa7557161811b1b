use strokeseg_core::phantom::{gen_dataset, gen_phantom, load_case, ClassMix, DatasetManifest, DatasetOptions, PhantomSpec, BRAIN_HU};
use strokeseg_core::CaseClass;

fn small(class: CaseClass, seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: [32, 64, 64],
        ..PhantomSpec::new(class, seed)
    }
}

/// Mean HU inside the lesion mask minus the mean HU of unlabeled brain voxels.
fn lesion_contrast(spec: &PhantomSpec) -> f64 {
    let (hu, mask) = gen_phantom(spec).unwrap();
    let (mut lesion, mut nl) = (0.0, 0usize);
    let (mut brain, mut nb) = (0.0, 0usize);
    for (&v, &l) in hu.values.iter().zip(&mask.labels) {
        if l != 0 {
            lesion += v as f64;
            nl += 1;
        } else if (v - BRAIN_HU).abs() < 15.0 {
            brain += v as f64;
            nb += 1;
        }
    }
    assert!(nl > 0 && nb > 0);
    lesion / nl as f64 - brain / nb as f64
}

#[test]
fn hemorrhage_is_at_least_20_hu_brighter() {
    for seed in 0..5 {
        let c = lesion_contrast(&small(CaseClass::Hemorrhagic, seed));
        assert!(c >= 20.0, "seed {seed}: contrast {c}");
    }
}

#[test]
fn ischemic_contrast_is_weaker_than_hemorrhagic() {
    for seed in 0..5 {
        let is = lesion_contrast(&small(CaseClass::Ischemic, seed));
        let ih = lesion_contrast(&small(CaseClass::Hemorrhagic, seed));
        assert!(is < 0.0, "ischemic lesions are hypodense, got {is}");
        assert!(is.abs() < ih.abs(), "seed {seed}: |{is}| vs |{ih}|");
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let spec = small(CaseClass::Ischemic, 42);
    let (a, ma) = gen_phantom(&spec).unwrap();
    let (b, mb) = gen_phantom(&spec).unwrap();
    assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(ma.labels, mb.labels);
    let (c, _) = gen_phantom(&small(CaseClass::Ischemic, 43)).unwrap();
    assert_ne!(a.values, c.values);
}

#[test]
fn lesion_labels_match_class() {
    let (_, m) = gen_phantom(&small(CaseClass::Ischemic, 1)).unwrap();
    assert!(m.labels.iter().all(|&l| l == 0 || l == 1));
    assert!(m.labels.contains(&1));
    let (_, m) = gen_phantom(&small(CaseClass::Hemorrhagic, 1)).unwrap();
    assert!(m.labels.iter().all(|&l| l == 0 || l == 2));
}

#[test]
fn dataset_round_trip_reproduces_cases() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = DatasetOptions::new(10, ClassMix::default(), 9);
    opts.dims = [16, 32, 32];
    let manifest = gen_dataset(&opts, dir.path()).unwrap();
    let reloaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(manifest, reloaded);
    for entry in &reloaded.cases {
        let case = load_case(dir.path(), entry).unwrap();
        let (hu, mask) = gen_phantom(&reloaded.spec(entry)).unwrap();
        assert_eq!(case.labels.labels, mask.labels);
        // raw storage is hu + 1024 in f32, so the round trip is exact up to that rounding
        let worst = case.hu.values.iter().zip(&hu.values).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-3, "{worst}");
    }
}

#[test]
fn unwritable_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let mut opts = DatasetOptions::new(3, ClassMix::default(), 1);
    opts.dims = [16, 32, 32];
    let err = gen_dataset(&opts, &file.join("sub")).unwrap_err();
    assert!(matches!(err, strokeseg_core::Error::Io { .. }), "{err}");
}

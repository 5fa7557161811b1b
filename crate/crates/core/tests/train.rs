use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeseg_core::model::{ModelConfig, SegModel};
use strokeseg_core::phantom::{gen_phantom, PhantomSpec};
use strokeseg_core::train::*;
use strokeseg_core::volume::{Projection, VolumeGrid, VolumeKind};
use strokeseg_core::{CaseClass, Error, Result};
use strokeseg_tensor::Tensor;

fn pools(n: usize, stroke_every: usize) -> Pools {
    Pools {
        stroke: (0..n).filter(|i| i % stroke_every == 0).collect(),
        all: (0..n).collect(),
    }
}

#[test]
fn sampler_frequency_matches_expectation() {
    // 20% stroke slices: expected stroke fraction 0.5 + 0.5 * 0.2
    let p = pools(500, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = sample_batch(&p, 10_000, 0.5, &mut rng).unwrap();
    let frac = draws.iter().filter(|&&i| i % 5 == 0).count() as f64 / draws.len() as f64;
    assert!((frac - 0.6).abs() <= 0.02, "{frac}");
}

#[test]
fn sampler_is_reproducible() {
    let p = pools(100, 3);
    let a = sample_batch(&p, 64, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_batch(&p, 64, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sampler_falls_back_without_stroke_slices() {
    let p = Pools {
        stroke: vec![],
        all: (0..10).collect(),
    };
    let draws = sample_batch(&p, 200, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(draws.len(), 200);
    assert!(draws.iter().all(|&i| i < 10));
    assert!(sample_batch(&Pools::default(), 1, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
}

fn ramp(n: usize) -> (Vec<f32>, Vec<u8>) {
    let img = (0..n * n).map(|i| i as f32 / (n * n) as f32).collect();
    let mask = (0..n * n).map(|i| (i % 3) as u8).collect();
    (img, mask)
}

#[test]
fn augment_with_everything_off_is_identity() {
    let (img, mask) = ramp(16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let (i2, m2) = augment(&img, &mask, (16, 16), &AugmentConfig::none(), &mut rng).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }
}

#[test]
fn four_quarter_turns_are_identity() {
    let (img, mask) = ramp(12);
    let turn = AugmentParams {
        quarter_turns: 1,
        ..AugmentParams::IDENTITY
    };
    let (mut i, mut m) = (img.clone(), mask.clone());
    for k in 0..4 {
        let out = apply_augment(&i, &m, (12, 12), &turn).unwrap();
        i = out.0;
        m = out.1;
        if k < 3 {
            assert_ne!(i, img);
        }
    }
    assert_eq!(i, img);
    assert_eq!(m, mask);
}

#[test]
fn scaling_grows_disk_area_quadratically() {
    let n = 64;
    let c = (n as f64 - 1.0) / 2.0;
    let r = 12.0;
    let mask: Vec<u8> = (0..n * n)
        .map(|k| {
            let (y, x) = ((k / n) as f64, (k % n) as f64);
            ((y - c).powi(2) + (x - c).powi(2) <= r * r) as u8
        })
        .collect();
    let img: Vec<f32> = mask.iter().map(|&m| m as f32).collect();
    let params = AugmentParams {
        scale: 1.1,
        ..AugmentParams::IDENTITY
    };
    let (_, scaled) = apply_augment(&img, &mask, (n, n), &params).unwrap();
    let before = mask.iter().filter(|&&m| m == 1).count() as f64;
    let after = scaled.iter().filter(|&&m| m == 1).count() as f64;
    let ratio = after / before;
    assert!((1.15..=1.27).contains(&ratio), "{ratio}");
}

#[test]
fn augment_rejects_non_square_slices() {
    let e = augment(&[0.0; 12], &[0; 12], (3, 4), &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(e.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augment_keeps_labels_and_size(seed in any::<u64>()) {
        let (img, mask) = ramp(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i2, m2) = augment(&img, &mask, (32, 32), &AugmentConfig::default(), &mut rng).unwrap();
        prop_assert_eq!(i2.len(), 32 * 32);
        prop_assert_eq!(m2.len(), 32 * 32);
        prop_assert!(m2.iter().all(|&m| m <= 2));
        prop_assert!(i2.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn select_best_matches_sort_oracle(scores in prop::collection::vec(0u8..6, 1..30), k in 1usize..30) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 5.0).collect();
        let k = k.min(scores.len());
        let mut oracle: Vec<(f64, usize)> = scores.iter().enumerate().map(|(i, &s)| (-s, i)).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<usize> = oracle.iter().take(k).map(|p| p.1).collect();
        prop_assert_eq!(select_best(&scores, k).unwrap(), want);
    }
}

#[test]
fn select_best_rejects_bad_k() {
    assert!(select_best(&[0.1, 0.2], 3).is_err());
    assert!(select_best(&[0.1], 0).is_err());
}

// ---------------------------------------------------------------------------
// TTA and ensembles

struct Constant(f32);

impl Predictor for Constant {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = batch.shape();
        Ok(Tensor::full([s[0], 2, s[2], s[3]], self.0))
    }
}

struct Identity;

impl Predictor for Identity {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(batch.clone())
    }
}

/// Not flip-equivariant: weights each pixel by its column.
struct ColumnWeighted;

impl Predictor for ColumnWeighted {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let w = batch.shape()[3];
        let data = batch.data().iter().enumerate().map(|(i, v)| v * (i % w) as f32 / w as f32).collect();
        Ok(Tensor::from_vec(batch.shape(), data)?)
    }
}

fn random_batch(seed: u64) -> Tensor<f32> {
    Tensor::<f64>::rand_uniform([2, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).cast()
}

#[test]
fn tta_of_constant_model_is_constant() {
    let out = tta_predict(&Constant(0.3), &random_batch(1)).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
}

#[test]
fn tta_of_flip_equivariant_model_is_the_model() {
    let x = random_batch(2);
    let out = tta_predict(&Identity, &x).unwrap();
    for (a, b) in out.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn tta_stays_within_member_range() {
    let x = random_batch(3);
    let out = tta_predict(&ColumnWeighted, &x).unwrap();
    let plain = ColumnWeighted.predict(&x).unwrap();
    let lr = flip(&ColumnWeighted.predict(&flip(&x, Flip::LeftRight).unwrap()).unwrap(), Flip::LeftRight).unwrap();
    let ud = flip(&ColumnWeighted.predict(&flip(&x, Flip::UpDown).unwrap()).unwrap(), Flip::UpDown).unwrap();
    for i in 0..out.numel() {
        let m = [plain.data()[i], lr.data()[i], ud.data()[i]];
        let (lo, hi) = (m.iter().copied().fold(f32::MAX, f32::min), m.iter().copied().fold(f32::MIN, f32::max));
        assert!(out.data()[i] >= lo - 1e-7 && out.data()[i] <= hi + 1e-7);
    }
    assert_ne!(out.data(), plain.data());
}

#[test]
fn flips_are_involutions() {
    let x = random_batch(4);
    for axis in [Flip::LeftRight, Flip::UpDown] {
        let once = flip(&x, axis).unwrap();
        assert_ne!(once.data(), x.data());
        assert_eq!(flip(&once, axis).unwrap().data(), x.data());
    }
}

#[test]
fn ensemble_is_the_member_mean() {
    let x = random_batch(5);
    let single = ensemble_predict(&[Identity], &x).unwrap();
    assert_eq!(single.data(), x.data());
    let pair = ensemble_predict(&[Constant(0.2), Constant(0.6)], &x).unwrap();
    assert!(pair.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    assert!(ensemble_predict::<Constant>(&[], &x).is_err());
}

// ---------------------------------------------------------------------------
// Training

fn phantom_data(dims: [usize; 3], seeds: &[(CaseClass, u64)], val: &[(CaseClass, u64)]) -> TrainData {
    let load = |class: CaseClass, seed: u64| {
        let spec = PhantomSpec {
            dims,
            ..PhantomSpec::new(class, seed)
        };
        let (hu, labels) = gen_phantom(&spec).unwrap();
        prepare_view(&hu, &labels, Projection::Axial).unwrap()
    };
    let mut train = SliceSet::new(dims[1], dims[2]);
    for &(c, s) in seeds {
        let (image, labels) = load(c, s);
        train.push_volume(&image, &labels).unwrap();
    }
    let val = val
        .iter()
        .map(|&(class, s)| {
            let (image, labels) = load(class, s);
            ValCase {
                id: format!("v{s}"),
                class,
                image,
                labels,
            }
        })
        .collect();
    TrainData {
        projection: Projection::Axial,
        train,
        val,
    }
}

#[test]
fn overfitting_one_phantom_halves_the_loss() {
    let data = phantom_data([32, 64, 64], &[(CaseClass::Hemorrhagic, 3)], &[(CaseClass::Hemorrhagic, 3)]);
    let cfg = TrainConfig {
        steps: 300,
        eval_every: 300,
        augment: AugmentConfig::none(),
        seed: 1,
        ..TrainConfig::default()
    };
    let model = SegModel::<f32>::new(ModelConfig::tiny(), 2).unwrap();
    let out = train(&cfg, &data, model, None, |_, _| {}).unwrap();
    let first = out.losses[0];
    let last = out.losses[out.losses.len() - 10..].iter().sum::<f32>() / 10.0;
    assert!(last < 0.5 * first, "initial {first}, final {last}");
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 30,
        eval_every: 10,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn quick_data() -> TrainData {
    phantom_data(
        [16, 32, 32],
        &[(CaseClass::Ischemic, 1), (CaseClass::Healthy, 2)],
        &[(CaseClass::Ischemic, 5), (CaseClass::Healthy, 6)],
    )
}

#[test]
fn checkpoints_follow_the_cadence_and_repeat_exactly() {
    let data = quick_data();
    let run = |seed| {
        let model = SegModel::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        train(&quick_config(seed), &data, model, None, |_, _| {}).unwrap()
    };
    let a = run(7);
    let b = run(7);
    let steps: Vec<u64> = a.checkpoints.iter().map(|c| c.step).collect();
    assert_eq!(steps, vec![10, 20, 30]);
    let ious = |o: &TrainOutcome| o.checkpoints.iter().map(|c| c.val_iou.to_bits()).collect::<Vec<_>>();
    assert_eq!(ious(&a), ious(&b));
    assert_eq!(a.losses, b.losses);
    assert!(a.checkpoints.iter().all(|c| (0.0..=1.0).contains(&c.val_iou)));
    let best = a.best_checkpoint();
    assert!(a.checkpoints.iter().all(|c| c.val_iou <= best.val_iou));
    let first_best = a.checkpoints.iter().position(|c| c.val_iou == best.val_iou).unwrap();
    assert_eq!(first_best, a.best);
}

#[test]
fn training_writes_checkpoints_and_log() {
    let data = quick_data();
    let dir = tempfile::tempdir().unwrap();
    let model = SegModel::<f32>::new(ModelConfig::tiny(), 0).unwrap();
    let out = train(&quick_config(1), &data, model, Some(dir.path()), |_, _| {}).unwrap();
    for step in [10, 20, 30] {
        assert!(dir.path().join(format!("step_{step:06}")).join("model.json").exists());
    }
    let log: TrainLog = serde_json::from_str(&std::fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap()).unwrap();
    assert_eq!(log.best_step, out.best_checkpoint().step);
    assert_eq!(log.losses.len(), 30);
    let (best, _) = SegModel::<f32>::load(&dir.path().join("best")).unwrap();
    let x = Tensor::<f32>::full([1, 1, 32, 32], 0.5);
    assert_eq!(best.predict(&x).unwrap().data(), out.model.predict(&x).unwrap().data());
}

#[test]
fn diverging_training_reports_the_step() {
    let data = quick_data();
    let cfg = TrainConfig {
        lr0: 1e30,
        lr_decay: 1.0,
        ..quick_config(0)
    };
    let model = SegModel::<f32>::new(ModelConfig::tiny(), 0).unwrap();
    match train(&cfg, &data, model, None, |_, _| {}) {
        Err(Error::NonFiniteLoss { step }) => assert!((1..=30).contains(&step)),
        Err(e) => panic!("unexpected error {e}"),
        Ok(o) => panic!("training should diverge, losses {:?}", &o.losses[..5]),
    }
}

#[test]
fn validation_iou_treats_empty_healthy_prediction_as_perfect() {
    let data = quick_data();
    let healthy = &data.val[1];
    let empty = [
        VolumeGrid::filled(healthy.image.dims, [1.0; 3], 0.0, VolumeKind::Probability).unwrap(),
        VolumeGrid::filled(healthy.image.dims, [1.0; 3], 0.0, VolumeKind::Probability).unwrap(),
    ];
    assert_eq!(case_iou(&empty, &healthy.labels, CaseClass::Healthy).unwrap(), 1.0);
    let lesion = &data.val[0];
    assert_eq!(case_iou(&empty, &lesion.labels, CaseClass::Ischemic).unwrap(), 0.0);
    let perfect_isch = VolumeGrid::new(
        lesion.labels.dims,
        [1.0; 3],
        lesion.labels.labels.iter().map(|&l| (l == 1) as u8 as f32).collect(),
        VolumeKind::Probability,
    )
    .unwrap();
    let maps = [perfect_isch, empty[1].clone()];
    assert_eq!(case_iou(&maps, &lesion.labels, CaseClass::Ischemic).unwrap(), 1.0);
}

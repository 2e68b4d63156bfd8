use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use tamperlab_core::data::{synth_dataset, Activity, EcgRecord};
use tamperlab_core::dsp::FilterMode;
use tamperlab_core::harness::*;
use tamperlab_core::models::{InputKind, Model, ModelConfig, ModelKind};
use tamperlab_core::tamper::TamperStrategy;
use tamperlab_nn::Tensor;

fn small_pool(subjects: usize, duration: f64) -> SegmentPool {
    let (_, recs) = synth_dataset(11, subjects, duration).unwrap();
    SegmentPool::from_records(&recs, FilterMode::ZeroPhase).unwrap()
}

fn tiny_spec(model: ModelKind) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(model, &[TamperStrategy::Half5050]);
    spec.dataset.subjects = 3;
    spec.dataset.duration_s = 8.0;
    spec.dataset.pairs = 40;
    spec.model_config = ModelConfig::scaled(0.04, 0);
    spec.hyper.epochs = 2;
    spec.repeats = 1;
    spec.master_seed = 5;
    spec
}

#[test]
fn tamper_pool_sidecars_reproduce_segments() {
    let pool = small_pool(3, 8.0);
    let made = tamper_pool(&pool, TamperStrategy::Sporadic20, Some(5), 9).unwrap();
    assert_eq!(made.len(), 5);
    for t in &made {
        let s = &t.sidecar;
        assert_eq!(s.host_id, t.host.subject);
        assert_ne!(s.host_id, s.donor_id);
        let donor = pool
            .segments
            .iter()
            .find(|g| g.subject == s.donor_id && g.activity == s.activity && g.start == s.donor_start)
            .unwrap();
        let donor = tamperlab_core::dsp::normalize_segment(donor).unwrap();
        let layout = tamperlab_core::tamper::make_layout(
            s.strategy,
            2048,
            &mut ChaCha8Rng::seed_from_u64(s.seed),
        )
        .unwrap();
        assert_eq!(layout.spans, s.spans);
        let again = tamperlab_core::tamper::compose(s.strategy, &layout, &t.host, &donor, s.blend_width).unwrap();
        assert_eq!(again.samples, t.tampered.samples);
        assert_eq!(tamperlab_core::tamper::mask_rle(&again.mask), s.mask_rle);
    }
    let again = tamper_pool(&pool, TamperStrategy::Sporadic20, Some(5), 9).unwrap();
    assert_eq!(again[4].tampered.samples, made[4].tampered.samples);

    let lone = small_pool(1, 8.0);
    assert!(tamper_pool(&lone, TamperStrategy::Half5050, None, 1).is_err());
}

#[test]
fn detection_dataset_contract() {
    // Four subjects, two activities.
    let (_, all) = synth_dataset(2, 4, 8.0).unwrap();
    let recs: Vec<EcgRecord> = all
        .into_iter()
        .filter(|r| matches!(r.activity, Activity::Sitting | Activity::Walking))
        .collect();
    let pool = SegmentPool::from_records(&recs, FilterMode::ZeroPhase).unwrap();
    let dims = ModelConfig::scaled(1.0, 0).dims().unwrap();
    let raw = InputBuilder::new(InputKind::Raw1d, &dims).unwrap();
    let ds = build_detection_dataset(&pool, TamperStrategy::Half5050, &raw, None, 1).unwrap();
    let (clean, tampered) = ds.balance();
    assert_eq!(clean, tampered);
    assert_eq!(clean, pool.segments.len());
    for item in &ds.items {
        assert_eq!(item.input.shape(), &[2048, 1]);
        let v = item.input.data();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        match &item.meta.donor {
            Some(d) => {
                assert!(item.label);
                assert_ne!(d, &item.meta.subject);
            }
            None => assert!(!item.label),
        }
    }
    let cwt = InputBuilder::new(InputKind::Cwt, &dims).unwrap();
    let few = build_detection_dataset(&pool, TamperStrategy::Half5050, &cwt, Some(2), 1).unwrap();
    assert_eq!(few.items.len(), 4);
    assert!(few.items.iter().all(|i| i.input.shape() == [2048, 96]));
}

#[test]
fn detection_needs_two_subjects_per_activity() {
    let pool = small_pool(1, 8.0);
    let dims = ModelConfig::scaled(0.25, 0).dims().unwrap();
    let raw = InputBuilder::new(InputKind::Raw1d, &dims).unwrap();
    assert!(build_detection_dataset(&pool, TamperStrategy::Half5050, &raw, None, 1).is_err());
    assert!(build_pair_dataset(&pool, &raw, 10, 1).is_err());
}

#[test]
fn pair_dataset_contract() {
    let pool = small_pool(4, 12.0);
    let dims = ModelConfig::scaled(0.25, 0).dims().unwrap();
    let raw = InputBuilder::new(InputKind::Raw1d, &dims).unwrap();
    let ds = build_pair_dataset(&pool, &raw, 101, 3).unwrap();
    assert_eq!(ds.pairs.len(), 100);
    let pos = ds.pairs.iter().filter(|p| p.label).count();
    assert_eq!(pos, 50);
    let mut seen = BTreeSet::new();
    for p in &ds.pairs {
        let (a, b) = (&p.meta_a, &p.meta_b);
        if p.label {
            assert_eq!(a.subject, b.subject);
            assert_ne!(a.activity, b.activity);
        } else {
            assert_ne!(a.subject, b.subject);
            assert_eq!(a.activity, b.activity);
        }
        let ka = (a.subject.clone(), a.activity, a.start);
        let kb = (b.subject.clone(), b.activity, b.start);
        assert!(seen.insert(if ka < kb { (ka, kb) } else { (kb, ka) }), "duplicate pair");
    }
    // Verification inputs keep their amplitude: not squeezed into [0, 1].
    assert!(ds.pairs.iter().any(|p| p.a.data().iter().any(|v| *v < 0.0)));
}

#[test]
fn stratified_split_contract() {
    let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
    let s = split_stratified(&labels, (0.8, 0.1), 4).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    for part in [&s.train, &s.val, &s.test] {
        let pos = part.iter().filter(|&&i| labels[i]).count();
        assert_eq!(2 * pos, part.len());
    }
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(split_stratified(&labels, (0.8, 0.1), 4).unwrap(), s);
    assert!(split_stratified(&labels[..9], (0.8, 0.1), 4).is_err());
}

#[test]
fn metric_examples() {
    let perfect = metrics(&[true, false, true], &[true, false, true]).unwrap();
    assert_eq!(perfect, Metrics { accuracy: 1.0, precision: 1.0, recall: 1.0, f1: 1.0 });
    let c = Confusion::from_predictions(&[true, true, false, false], &[true, false, true, false]).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
    assert_eq!(c.metrics().unwrap(), Metrics { accuracy: 0.5, precision: 0.5, recall: 0.5, f1: 0.5 });
    let neg = metrics(&[false; 6], &[true, true, true, false, false, false]).unwrap();
    assert_eq!(neg, Metrics { accuracy: 0.5, precision: 0.0, recall: 0.0, f1: 0.0 });
    assert!(metrics(&[true], &[true, false]).is_err());
}

proptest! {
    #[test]
    fn f1_identity(pred in prop::collection::vec(any::<bool>(), 1..200), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<bool> = pred.iter().map(|_| rng.random()).collect();
        let m = metrics(&pred, &truth).unwrap();
        let d = m.precision + m.recall;
        let f1 = if d > 0.0 { 2.0 * m.precision * m.recall / d } else { 0.0 };
        prop_assert!((m.f1 - f1).abs() < 1e-12);
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

/// Items whose label is the sign of their mean amplitude.
fn toy_items(model: &Model, n: usize, seed: u64) -> Vec<DetectionItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.input_shape().to_vec();
    let len: usize = shape.iter().product();
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let offset = if label { 0.5 } else { -0.5 };
            let data = (0..len).map(|_| offset + rng.random_range(-0.3..0.3)).collect();
            DetectionItem {
                input: Tensor::new(shape.clone(), data).unwrap(),
                label,
                meta: ItemMeta {
                    subject: format!("T{i}"),
                    activity: Activity::Sitting,
                    start: 0,
                    donor: None,
                },
            }
        })
        .collect()
}

#[test]
fn separable_toy_problem_is_learned() {
    let mut model = Model::build(ModelKind::Cnn, &ModelConfig::scaled(0.04, 1)).unwrap();
    let items = toy_items(&model, 64, 2);
    let set = TrainSet::Detection {
        train: items[..48].iter().collect(),
        val: items[48..].iter().collect(),
    };
    let hyper = Hyper {
        epochs: 50,
        batch: 16,
        patience: 50,
        ..Hyper::default()
    };
    let out = train(&mut model, &set, &hyper, 3).unwrap();
    assert!(out.history.iter().any(|h| h.train_acc == 1.0));
    let test: Vec<&DetectionItem> = items[48..].iter().collect();
    assert_eq!(evaluate_detector(&model, &test).unwrap().accuracy, 1.0);
}

#[test]
fn one_epoch_one_history_row() {
    let mut model = Model::build(ModelKind::Cnn, &ModelConfig::scaled(0.04, 1)).unwrap();
    let items = toy_items(&model, 12, 2);
    let set = TrainSet::Detection {
        train: items[..8].iter().collect(),
        val: items[8..].iter().collect(),
    };
    let hyper = Hyper { epochs: 1, ..Hyper::default() };
    let out = train(&mut model, &set, &hyper, 0).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best_epoch, 1);
    let pairs = TrainSet::Pairs { train: vec![], val: vec![] };
    assert!(train(&mut model, &pairs, &hyper, 0).is_err());
}

#[test]
fn repeats_are_deterministic_and_seedable() {
    let mut spec = tiny_spec(ModelKind::Cnn);
    spec.repeats = 3;
    let opts = RunOptions {
        jobs: 2,
        fixed_seed: Some(9),
        ..RunOptions::default()
    };
    let r = repeat_runs(&spec, &opts).unwrap();
    let e = &r.entries[0];
    assert_eq!(e.runs.len(), 3);
    assert_eq!(e.succeeded, 3);
    assert_eq!(e.std, Metrics::default());
    assert!(r.meets_success_policy());

    spec.repeats = 1;
    let one = repeat_runs(&spec, &RunOptions::default()).unwrap();
    assert_eq!(one.entries[0].mean, one.entries[0].runs[0].metrics.unwrap());
    let again = repeat_runs(&spec, &RunOptions::default()).unwrap();
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn verification_runs_tune_a_threshold() {
    let spec = tiny_spec(ModelKind::SiameseFeatCnnTran);
    let r = repeat_runs(&spec, &RunOptions::default()).unwrap();
    assert_eq!(r.entries.len(), 1);
    assert_eq!(r.entries[0].task, "verification");
    let run = &r.entries[0].runs[0];
    assert!(run.ok, "{:?}", run.error);
    assert!(run.threshold.unwrap() > 0.0);
}

#[test]
fn spec_validation_lists_every_problem() {
    let mut spec = tiny_spec(ModelKind::Cnn);
    spec.repeats = 0;
    spec.hyper.lr = -1.0;
    spec.preprocessing = Some(InputKind::Cwt);
    let p = spec.problems();
    assert_eq!(p.len(), 3, "{p:?}");
    assert!(p.iter().any(|m| m.starts_with("repeats")));
    assert!(p.iter().any(|m| m.starts_with("hyper")));
    assert!(p.iter().any(|m| m.starts_with("preprocessing")));
    assert!(repeat_runs(&spec, &RunOptions::default()).is_err());

    let json = r#"{"model":"cnn","strategy":"sporadic50","repeats":2}"#;
    let s: ExperimentSpec = serde_json::from_str(json).unwrap();
    assert_eq!(s.tasks(), vec![Some(TamperStrategy::Sporadic50)]);
    assert!(serde_json::from_str::<ExperimentSpec>(r#"{"model":"cnn","typo":1}"#).is_err());
}

#[test]
fn reports_are_reemitted_identically() {
    let mut spec = tiny_spec(ModelKind::Cnn);
    spec.strategies = OneOrMany::Many(vec![TamperStrategy::Half5050, TamperStrategy::Sporadic20]);
    let r = repeat_runs(&spec, &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let all = Formats { json: true, csv: true, svg: true };
    let files = emit_report(&r, dir.path(), "rep", all).unwrap();
    assert_eq!(files.len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("rep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    let svg = std::fs::read_to_string(dir.path().join("rep_half5050.svg")).unwrap();
    assert!(svg.contains("#2e8b57") && svg.contains("#c0392b") && svg.contains("#f39c12"));
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    let again = emit_report(&r, dir.path(), "rep", all).unwrap();
    let second: Vec<Vec<u8>> = again.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(first, second);
    let back: RunReport = serde_json::from_slice(&first[0]).unwrap();
    assert_eq!(back.schema_version, SCHEMA_VERSION);
    assert_eq!(back.entries.len(), r.entries.len());
}

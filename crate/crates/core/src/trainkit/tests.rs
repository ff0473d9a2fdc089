use proptest::prelude::*;

use super::*;
use crate::diffcore::{ParamStore, Tape, Tensor};
use crate::distill::{distill_objective, DistillSignal, GateMode, GatePolicy, PROB_FLOOR};
use crate::encoder::{DualEncoderModel, EncoderConfig};
use crate::error::Error;
use crate::peft::{self, LoraConfig, PeftVariant};
use crate::synthdata::{generate, split, Dataset, GenSpec, SplitSpec, Splits};

fn tiny_spec() -> ProtocolSpec {
    let encoder = EncoderConfig {
        layers: 1,
        vision_width: 8,
        text_width: 8,
        embed_dim: 4,
        heads: 2,
        patches: 4,
        ..EncoderConfig::default()
    };
    let data = GenSpec {
        n_examples: 2000,
        n_test: 100,
        patches: 4,
        patch_dim: 8,
        ..GenSpec::default()
    };
    ProtocolSpec {
        encoder,
        data,
        teacher: TrainConfig {
            max_epochs: 2,
            ..TrainConfig::teacher()
        },
        student: TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        },
        adapter: crate::peft::AdapterConfig { bottleneck: 2 },
        lora: LoraConfig { rank: 2, gamma: None },
        ..ProtocolSpec::default()
    }
}

fn fixture() -> (ProtocolSpec, Dataset, Splits) {
    let spec = tiny_spec();
    let data = generate(&spec.data).unwrap();
    let s = split(&data, &SplitSpec::default(), 1).unwrap();
    (spec, data, s)
}

fn bytes(m: &DualEncoderModel) -> Vec<u8> {
    let mut b = Vec::new();
    m.save(&mut b).unwrap();
    b
}

#[test]
fn macro_f1_examples() {
    let labels = [0, 0, 1, 1];
    assert_eq!(accuracy_and_macro_f1(&labels, &labels, 2).unwrap(), (1.0, 1.0));
    let (acc, f1) = accuracy_and_macro_f1(&labels, &[0, 0, 0, 0], 2).unwrap();
    assert_eq!(acc, 0.5);
    assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
    assert!(accuracy_and_macro_f1(&[], &[], 2).is_err());
    assert!(accuracy_and_macro_f1(&[0], &[2], 2).is_err());
    assert!(accuracy_and_macro_f1(&[0, 1], &[0], 2).is_err());
}

proptest! {
    #[test]
    fn macro_f1_is_invariant_under_relabelling(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..60)) {
        let (y, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let swap = |v: &[usize]| v.iter().map(|&c| 1 - c).collect::<Vec<_>>();
        let (a1, f1) = accuracy_and_macro_f1(&y, &p, 2).unwrap();
        let (a2, f2) = accuracy_and_macro_f1(&swap(&y), &swap(&p), 2).unwrap();
        prop_assert_eq!(a1, a2);
        prop_assert!((f1 - f2).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&a1) && (0.0..=1.0).contains(&f1));
    }

    #[test]
    fn population_std_matches_definition(v in prop::collection::vec(-1.0f64..1.0, 1..10)) {
        let (m, s) = mean_std(&v);
        let n = v.len() as f64;
        let var = v.iter().map(|x| x * x).sum::<f64>() / n - m * m;
        prop_assert!((s * s - var).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().trainable(true)).unwrap();
    let frozen = store.insert("f", Tensor::new(&[1], vec![5.0]).unwrap()).unwrap();
    store.get_mut(id).accumulate_grad(&[0.5, -2.0, 0.0]).unwrap();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    adam.step(&mut store, |_| 0.1);
    // Bias-corrected first step is lr·g/(|g|+eps).
    let w = store.get(id).values();
    let expect = |w0: f64, g: f64| w0 - 0.1 * g / (g.abs() + 1e-8);
    assert!((w[0] - expect(1.0, 0.5)).abs() < 1e-15);
    assert!((w[1] - expect(2.0, -2.0)).abs() < 1e-15);
    assert_eq!(w[2], 3.0);
    assert_eq!(store.get(frozen).values(), &[5.0]);
    assert!(store.get(id).grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr_head: 0.0, ..TrainConfig::default() },
        TrainConfig { lr_backbone: f64::NAN, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { beta2: 1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn evaluate_rejects_empty_and_fills_records() {
    let (spec, data, _) = fixture();
    let m = spec.backbone().unwrap();
    assert!(evaluate(&m, &data, &[], None).is_err());
    let idx = data.test_indices();
    let preds = vec![1; idx.len()];
    let ev = evaluate(&m, &data, &idx, Some(&preds)).unwrap();
    assert_eq!(ev.records.len(), idx.len());
    for (r, &i) in ev.records.iter().zip(&idx) {
        assert_eq!(r.id, data.examples[i].id);
        assert_eq!(r.teacher_pred, Some(1));
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.confidence, r.probs[r.pred]);
        assert!(r.confidence >= 0.5);
    }
    assert!(evaluate(&m, &data, &idx, Some(&preds[1..])).is_err());
}

#[test]
fn zero_epochs_returns_the_initial_weights() {
    let (spec, data, s) = fixture();
    let init = spec.backbone().unwrap();
    let cfg = TrainConfig { max_epochs: 0, ..spec.teacher_config(1) };
    let out = train_teacher(init.clone(), &data, &s, &cfg).unwrap();
    assert_eq!(out.best_epoch, None);
    assert_eq!(bytes(&out.model), bytes(&init));
    let acc = evaluate(&out.model, &data, &data.test_indices(), None).unwrap().accuracy;
    assert!((acc - 0.5).abs() <= 0.15, "untrained accuracy {acc}");
}

#[test]
fn teacher_training_is_deterministic_and_picks_earliest_best_epoch() {
    let (spec, data, s) = fixture();
    let cfg = spec.teacher_config(1);
    let a = train_teacher(spec.backbone().unwrap(), &data, &s, &cfg).unwrap();
    let b = train_teacher(spec.backbone().unwrap(), &data, &s, &cfg).unwrap();
    assert_eq!(bytes(&a.model), bytes(&b.model));
    assert_eq!(a.history.len(), cfg.max_epochs);
    let best = a.history.iter().map(|h| h.valid_accuracy).fold(f64::MIN, f64::max);
    let first = a.history.iter().find(|h| h.valid_accuracy == best).unwrap().epoch;
    assert_eq!(a.best_epoch, Some(first));
    assert_eq!(a.valid_accuracy, best);
    assert!(a.history.iter().all(|h| h.train_loss.is_finite()));
}

#[test]
fn teacher_divergence_is_a_numerical_error() {
    let (spec, data, s) = fixture();
    let mut m = spec.backbone().unwrap();
    let id = m.head_bias;
    m.store.get_mut(id).values_mut()[0] = f64::NAN;
    let err = train_teacher(m, &data, &s, &spec.teacher_config(1)).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
}

#[test]
fn teacher_must_be_fully_trainable() {
    let (spec, data, s) = fixture();
    let mut m = spec.backbone().unwrap();
    peft::attach(&mut m, PeftVariant::Lora(spec.lora.clone()), 0).unwrap();
    assert!(train_teacher(m, &data, &s, &spec.teacher_config(1)).is_err());
}

fn teacher(spec: &ProtocolSpec, data: &Dataset, s: &Splits) -> DualEncoderModel {
    train_teacher(spec.backbone().unwrap(), data, s, &spec.teacher_config(1)).unwrap().model
}

#[test]
fn student_training_updates_only_peft_and_head() {
    let (spec, data, s) = fixture();
    let t = teacher(&spec, &data, &s);
    let t_before = bytes(&t);
    let backbone = spec.backbone().unwrap();
    for kind in PeftKind::ALL {
        let v = StudentVariant::new(kind, true, GateMode::Entropy);
        let out = train_student(&backbone, spec.peft_variant(kind), &t, &data, &s, &spec.student_config(v, 1)).unwrap();
        let m = &out.model;
        for id in m.backbone_ids() {
            let name = m.store.name(id);
            let orig = backbone.store.get(backbone.store.id(name).unwrap());
            assert_eq!(m.store.get(id).values(), orig.values(), "{kind:?} changed {name}");
        }
        let head_moved = m.head_ids().iter().any(|&id| m.store.get(id).values() != backbone.store.get(id).values());
        assert!(head_moved, "{kind:?} head never moved");
        assert_eq!(bytes(&t), t_before);
    }
}

#[test]
fn cached_teacher_logits_match_recomputation_bitwise() {
    let (spec, data, s) = fixture();
    let t = teacher(&spec, &data, &s);
    let cached = predict_logits(&t, &data, &s.student_train).unwrap();
    for chunk in s.student_train.chunks(7) {
        let fresh = t.logits(&data.batch(chunk)).unwrap();
        let k = s.student_train.iter().position(|i| *i == chunk[0]).unwrap();
        for (r, _) in chunk.iter().enumerate() {
            assert_eq!(fresh.row(r), cached.row(k + r));
        }
    }
    let backbone = spec.backbone().unwrap();
    let v = StudentVariant::new(PeftKind::Lora, true, GateMode::Entropy);
    let on = spec.student_config(v, 2);
    let off = TrainConfig { cache_teacher_logits: false, ..on.clone() };
    let variant = spec.peft_variant(PeftKind::Lora);
    let a = train_student(&backbone, variant.clone(), &t, &data, &s, &on).unwrap();
    let b = train_student(&backbone, variant, &t, &data, &s, &off).unwrap();
    assert_eq!(bytes(&a.model), bytes(&b.model));
}

#[test]
fn zero_init_student_of_its_own_backbone_has_zero_kd() {
    let (spec, data, s) = fixture();
    let backbone = spec.backbone().unwrap();
    let mut student = backbone.clone();
    peft::attach(&mut student, PeftVariant::Lora(spec.lora.clone()), 3).unwrap();
    let batch = data.batch(&s.student_train);
    let signal = DistillSignal::new(&backbone.logits(&batch).unwrap(), 2.0).unwrap();
    let mut tape = Tape::new();
    let out = student.forward(&mut tape, &batch, false).unwrap();
    let obj = distill_objective(&mut tape, out.logits, &signal, &batch.labels, &GatePolicy::default()).unwrap();
    for r in &obj.records {
        assert!(r.kd.abs() <= 4.0 * 2.0 * PROB_FLOOR, "kd {}", r.kd);
    }
}

#[test]
fn pure_ce_student_ignores_teacher() {
    let (spec, data, s) = fixture();
    let backbone = spec.backbone().unwrap();
    let t1 = teacher(&spec, &data, &s);
    let t2 = backbone.clone();
    let v = StudentVariant::new(PeftKind::Adapter, false, GateMode::Entropy);
    assert_eq!(v.gate, GateMode::Ungated);
    let cfg = spec.student_config(v, 1);
    assert!(!cfg.gate.kd);
    let variant = spec.peft_variant(PeftKind::Adapter);
    let a = train_student(&backbone, variant.clone(), &t1, &data, &s, &cfg).unwrap();
    let b = train_student(&backbone, variant, &t2, &data, &s, &cfg).unwrap();
    assert_eq!(bytes(&a.model), bytes(&b.model));
}

#[test]
fn mismatched_teacher_is_rejected() {
    let (spec, data, s) = fixture();
    let other = DualEncoderModel::new(EncoderConfig { embed_dim: 6, ..spec.encoder.clone() }, 0).unwrap();
    let v = StudentVariant::new(PeftKind::Lora, true, GateMode::Entropy);
    let err = train_student(&spec.backbone().unwrap(), spec.peft_variant(PeftKind::Lora), &other, &data, &s, &spec.student_config(v, 1))
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn variant_tags_round_trip() {
    for v in StudentVariant::full_grid() {
        assert_eq!(v.to_string().parse::<StudentVariant>().unwrap(), v);
    }
    assert_eq!(StudentVariant::full_grid().len(), 12);
    assert!("lora/kd".parse::<StudentVariant>().is_err());
    assert!("bitfit/nokd".parse::<StudentVariant>().is_err());
    assert!("lora/kd/soft".parse::<StudentVariant>().is_err());
}

fn kd_grid() -> Vec<StudentVariant> {
    PeftKind::ALL
        .into_iter()
        .flat_map(|p| [StudentVariant::new(p, false, GateMode::Ungated), StudentVariant::new(p, true, GateMode::Entropy)])
        .collect()
}

fn without_timing(mut r: ProtocolReport) -> ProtocolReport {
    r.teachers.iter_mut().for_each(|t| t.wall_clock_secs = 0.0);
    r.runs.iter_mut().for_each(|t| t.wall_clock_secs = 0.0);
    r
}

#[test]
fn protocol_shape_determinism_and_deltas() {
    let spec = ProtocolSpec {
        variants: kd_grid(),
        teacher: TrainConfig { max_epochs: 1, ..tiny_spec().teacher },
        student: TrainConfig { max_epochs: 2, ..tiny_spec().student },
        ..tiny_spec()
    };
    let data = generate(&spec.data).unwrap();
    let (a, models) = run_protocol(&spec, &data, 1, true).unwrap();
    let (b, _) = run_protocol(&spec, &data, 3, false).unwrap();
    assert_eq!(without_timing(a.clone()), without_timing(b));
    assert_eq!(a.teachers.len(), 2);
    assert_eq!(models.teachers.len(), 2);
    assert_eq!(models.students.len(), a.runs.len());
    assert_eq!(a.runs.len(), 36);
    assert_eq!(a.aggregates.len(), 6);
    for agg in &a.aggregates {
        assert_eq!(agg.runs, 6);
        let acc: Vec<f64> = a.runs.iter().filter(|r| r.variant == agg.variant).map(|r| r.accuracy).collect();
        let (m, sd) = mean_std(&acc);
        assert_eq!((agg.mean_accuracy, agg.std_accuracy), (m, sd));
        for (c, &e) in agg.student_only_errors.iter().enumerate() {
            assert!(e <= agg.class_errors[c]);
        }
    }
    assert_eq!(a.comparisons.len(), 3);
    for c in &a.comparisons {
        assert_eq!(c.axis, "kd");
        let find = |v| a.aggregates.iter().find(|g| g.variant == v).unwrap().mean_accuracy;
        assert_eq!(c.delta_accuracy, find(c.with) - find(c.without));
    }
    for (r, m) in a.runs.iter().zip(&models.students) {
        assert_eq!(r.trainable_params, m.trainable_parameter_count());
        assert!((0.0..=1.0).contains(&r.accuracy));
    }
}

#[test]
fn protocol_rejects_bad_specs() {
    let spec = tiny_spec();
    let data = generate(&spec.data).unwrap();
    let dup = ProtocolSpec { variants: vec![kd_grid()[0], kd_grid()[0]], ..spec.clone() };
    assert!(run_protocol(&dup, &data, 1, false).is_err());
    let no_trials = ProtocolSpec { trial_seeds: vec![], ..spec.clone() };
    assert!(run_protocol(&no_trials, &data, 1, false).is_err());
    let other = ProtocolSpec { data: GenSpec { seed: 9, ..spec.data.clone() }, ..spec };
    assert!(run_protocol(&other, &data, 1, false).is_err());
}

#[test]
fn protocol_spec_round_trips_through_toml() {
    let spec = ProtocolSpec::default();
    let text = toml::to_string(&spec).unwrap();
    assert_eq!(toml::from_str::<ProtocolSpec>(&text).unwrap(), spec);
    assert!(toml::from_str::<ProtocolSpec>("bogus = 1").is_err());
}

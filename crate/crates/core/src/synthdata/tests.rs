use std::collections::HashSet;

use super::*;

fn small(n: usize) -> GenSpec {
    GenSpec {
        n_examples: n,
        n_test: 40,
        ..GenSpec::default()
    }
}

fn bytes(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, d).unwrap();
    buf
}

#[test]
fn same_seed_gives_identical_files() {
    let a = generate(&small(200)).unwrap();
    let b = generate(&small(200)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let c = generate(&GenSpec { seed: 1, ..small(200) }).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn examples_are_independent_of_generation_order() {
    let spec = small(60);
    let all = generate(&spec).unwrap();
    for i in (0..100).rev().step_by(7) {
        assert_eq!(example(&spec, i).unwrap(), all.examples[i]);
    }
    assert!(example(&spec, 100).is_err());
}

#[test]
fn labels_rederive_from_tokens_and_scene() {
    for sigma in [0.0, 0.3] {
        let d = generate(&GenSpec { sigma, ..small(1000) }).unwrap();
        assert!(verify_labels(&d).unwrap().is_empty());
    }
}

#[test]
fn classes_are_exactly_balanced() {
    let d = generate(&small(1000)).unwrap();
    let pool: Vec<usize> = (0..1000).collect();
    assert_eq!(d.label_counts(&pool), [500, 500]);
    assert_eq!(d.label_counts(&d.test_indices()), [20, 20]);
}

#[test]
fn each_modality_alone_is_ambiguous() {
    let spec = small(4000);
    let d = generate(&spec).unwrap();
    let vocab = Vocab::new(&spec).unwrap();
    let (mut text_only, mut image_only, mut both) = (0, 0, 0);
    for ex in d.pool() {
        let claimed = ex.tokens.iter().find_map(|&t| vocab.color_of(t)).unwrap();
        let praises = spec.is_pleasant(claimed);
        let grim = !spec.is_pleasant(ex.meta.color as usize);
        text_only += usize::from(usize::from(praises) == ex.label);
        image_only += usize::from(usize::from(grim) == ex.label);
        both += usize::from(usize::from(praises && grim) == ex.label);
    }
    let n = d.pool().len() as f64;
    // Each single-modality rule is the best one available: 3/4 of the mass.
    assert!((text_only as f64 / n - 0.75).abs() < 0.03);
    assert!((image_only as f64 / n - 0.75).abs() < 0.03);
    assert_eq!(both, d.pool().len());
}

#[test]
fn twenty_thousand_give_two_hundred_student_examples() {
    let d = generate(&GenSpec { n_test: 100, ..GenSpec::default() }).unwrap();
    let spec = SplitSpec::default();
    let s = split(&d, &spec, 0).unwrap();
    assert_eq!(s.student_train.len(), 200);
    assert_eq!(d.label_counts(&s.student_train), [100, 100]);
    assert_eq!(d.label_counts(&s.valid_student), [100, 100]);

    let set = |v: &[usize]| v.iter().copied().collect::<HashSet<_>>();
    let (tt, tv, st, sv, te) = (
        set(&s.teacher_train),
        set(&s.valid_teacher),
        set(&s.student_train),
        set(&s.valid_student),
        set(&s.test),
    );
    assert!(tt.is_disjoint(&st) && tv.is_disjoint(&st) && tt.is_disjoint(&tv));
    assert!(sv.is_subset(&tv) && sv.is_disjoint(&st));
    for part in [&tt, &tv, &st] {
        assert!(part.is_disjoint(&te));
    }
    assert_eq!(tt.len() + tv.len() + st.len(), 20_000);
    assert_eq!(s.test, (20_000..20_100).collect::<Vec<_>>());

    let other = split(&d, &spec, 1).unwrap();
    assert_ne!(other.student_train, s.student_train);
    assert_eq!(other.test, s.test);
    assert_eq!(split(&d, &spec, 0).unwrap(), s);
}

#[test]
fn split_rejects_tiny_pools_and_bad_fractions() {
    let d = generate(&small(40)).unwrap();
    assert!(split(&d, &SplitSpec::default(), 0).is_err());
    let spec = SplitSpec {
        teacher_fraction: 0.995,
        student_fraction: 0.01,
        ..SplitSpec::default()
    };
    assert!(split(&d, &spec, 0).is_err());
}

#[test]
fn shifted_test_set_moves_only_the_image_codes() {
    let base = small(0);
    assert!(shifted_testset(&base, ShiftSpec { strength: 0.0, seed: 1 }).is_err());
    assert!(shifted_testset(&base, ShiftSpec { strength: 1.5, seed: 1 }).is_err());
    let plain = generate(&base).unwrap();
    let shifted = shifted_testset(&base, ShiftSpec { strength: 0.5, seed: 1 }).unwrap();
    assert_eq!(shifted.label_counts(&shifted.test_indices()), [20, 20]);
    assert!(verify_labels(&shifted).unwrap().is_empty());
    for (a, b) in plain.examples.iter().zip(&shifted.examples) {
        assert_eq!((a.label, &a.tokens, a.meta), (b.label, &b.tokens, b.meta));
        assert_ne!(a.patches, b.patches);
    }
}

#[test]
fn dataset_files_round_trip() {
    let d = generate(&GenSpec {
        shift: Some(ShiftSpec { strength: 0.25, seed: 3 }),
        ..small(30)
    })
    .unwrap();
    let first = bytes(&d);
    assert_eq!(&first[..4], b"PKDS");
    let back = read_dataset(&mut first.as_slice()).unwrap();
    assert_eq!(back, d);
    assert_eq!(bytes(&back), first);

    assert!(read_dataset(&mut &first[..first.len() - 1]).is_err());
    let mut extra = first.clone();
    extra.push(0);
    assert!(read_dataset(&mut extra.as_slice()).is_err());
    let mut magic = first.clone();
    magic[3] = b'X';
    assert!(read_dataset(&mut magic.as_slice()).is_err());
}

#[test]
fn spec_validation() {
    assert!(generate(&GenSpec { colors: 5, ..small(10) }).is_err());
    assert!(generate(&GenSpec { vocab: 30, ..small(10) }).is_err());
    assert!(generate(&GenSpec { max_tokens: 6, ..small(10) }).is_err());
    assert!(generate(&GenSpec { sigma: -1.0, ..small(10) }).is_err());
    assert!(generate(&GenSpec { seed: u64::MAX, ..small(10) }).is_err());
    let cfg = EncoderConfig::default();
    GenSpec::default().check_encoder(&cfg).unwrap();
    assert!(GenSpec { patches: 8, ..GenSpec::default() }.check_encoder(&cfg).is_err());
}

#[test]
fn batches_carry_examples_in_order() {
    let d = generate(&small(10)).unwrap();
    let b = d.batch(&[3, 1]);
    assert_eq!(b.ids, vec![3, 1]);
    assert_eq!(b.labels, vec![1, 1]);
    assert_eq!(b.patches.row(0), d.examples[3].patches.as_slice());
    b.validate(&EncoderConfig::default()).unwrap();
}

#[test]
fn annotation_noise_spares_the_test_block() {
    let data = generate(&small(4000)).unwrap();
    let noisy = annotate(&data, 0.05).unwrap();
    assert_eq!(annotate(&data, 0.05).unwrap(), noisy);
    let n = data.pool().len();
    let flipped = (0..n).filter(|&i| data.examples[i].label != noisy.examples[i].label).count();
    let rate = flipped as f64 / n as f64;
    assert!((rate - 0.05).abs() < 0.015, "flip rate {rate}");
    assert_eq!(data.examples[n..], noisy.examples[n..]);
    assert_eq!(annotate(&data, 0.0).unwrap(), data);
    assert!(annotate(&data, 0.5).is_err());
    assert!(annotate(&data, -0.1).is_err());
    // lower rates flip a subset of what higher rates flip
    let more = annotate(&data, 0.1).unwrap();
    for i in 0..n {
        if noisy.examples[i].label != data.examples[i].label {
            assert_ne!(more.examples[i].label, data.examples[i].label);
        }
    }
}

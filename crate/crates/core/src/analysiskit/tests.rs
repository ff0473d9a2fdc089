use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::encoder::{BranchKind, DualEncoderModel, EncoderConfig};
use crate::synthdata::{generate, GenSpec};
use crate::trainkit::ExampleRecord;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    let dist = Normal::new(0.0, 1.0).unwrap();
    Matrix::new(n, d, (0..n * d).map(|_| dist.sample(rng)).collect()).unwrap()
}

fn times(x: &Matrix, m: &[f64], cols: usize) -> Matrix {
    let mut out = vec![0.0; x.rows * cols];
    for r in 0..x.rows {
        for c in 0..cols {
            out[r * cols + c] = (0..x.cols).map(|k| x.values[r * x.cols + k] * m[k * cols + c]).sum();
        }
    }
    Matrix::new(x.rows, cols, out).unwrap()
}

/// Canonical correlations by orthonormalising both centred matrices with
/// modified Gram–Schmidt and taking singular values of `Qxᵀ Qy` from a
/// cyclic Jacobi eigen-solve of its Gram matrix. Shares no code with the
/// covariance route.
mod oracle {
    use super::Matrix;

    fn orthonormal_columns(m: &Matrix) -> Vec<Vec<f64>> {
        let mut cols: Vec<Vec<f64>> = (0..m.cols)
            .map(|c| {
                let v: Vec<f64> = (0..m.rows).map(|r| m.values[r * m.cols + c]).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| x - mean).collect()
            })
            .collect();
        for i in 0..cols.len() {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let qj = cols[j].clone();
                cols[i].iter_mut().zip(&qj).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = cols[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            cols[i].iter_mut().for_each(|a| *a /= norm);
        }
        cols
    }

    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    pub fn mean_cca(x: &Matrix, y: &Matrix) -> f64 {
        let (qx, qy) = (orthonormal_columns(x), orthonormal_columns(y));
        let (small, large) = if qx.len() <= qy.len() { (&qx, &qy) } else { (&qy, &qx) };
        // M = smallᵀ·large, Gram = M·Mᵀ (k×k), eigenvalues are squared correlations.
        let m: Vec<Vec<f64>> = small
            .iter()
            .map(|a| large.iter().map(|b| a.iter().zip(b).map(|(u, v)| u * v).sum()).collect())
            .collect();
        let gram: Vec<Vec<f64>> = m
            .iter()
            .map(|ri| m.iter().map(|rj| ri.iter().zip(rj).map(|(u, v)| u * v).sum()).collect())
            .collect();
        let ev = jacobi_eigenvalues(gram);
        ev.iter().map(|l| l.max(0.0).sqrt().min(1.0)).sum::<f64>() / ev.len() as f64
    }
}

#[test]
fn self_correlation_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian(&mut rng, 500, 6);
    assert!((mean_cca(&x, &x, RIDGE).unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn invariant_under_invertible_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in [2, 5, 8] {
        let x = gaussian(&mut rng, 400, d);
        let noise = gaussian(&mut rng, 400, d);
        let y = Matrix::new(400, d, x.values.iter().zip(&noise.values).map(|(a, b)| a + 0.7 * b).collect()).unwrap();
        let base = mean_cca(&x, &y, 1e-10).unwrap();
        // Orthogonal map from a Householder reflection, and a generic invertible map.
        let v = gaussian(&mut rng, 1, d).values;
        let vv: f64 = v.iter().map(|a| a * a).sum();
        let house: Vec<f64> = (0..d * d)
            .map(|k| f64::from(u8::from(k / d == k % d)) - 2.0 * v[k / d] * v[k % d] / vv)
            .collect();
        let mut generic = gaussian(&mut rng, d, d).values;
        (0..d).for_each(|i| generic[i * d + i] += 3.0);
        for m in [&house, &generic] {
            let ym = times(&y, m, d);
            assert!((mean_cca(&x, &ym, 1e-10).unwrap() - base).abs() < 1e-6, "d={d}");
        }
    }
}

#[test]
fn independent_gaussians_are_nearly_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 5000, 8);
    let y = gaussian(&mut rng, 5000, 8);
    let v = mean_cca(&x, &y, RIDGE).unwrap();
    assert!(v < 0.1, "{v}");
    assert!((v - oracle::mean_cca(&x, &y)).abs() < 1e-6);
}

#[test]
fn covariance_route_matches_orthogonalisation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (d1, d2) in [(3, 3), (4, 7), (8, 2), (6, 6)] {
        let x = gaussian(&mut rng, 300, d1);
        let mix = gaussian(&mut rng, d1, d2).values;
        let noise = gaussian(&mut rng, 300, d2);
        let xm = times(&x, &mix, d2);
        let y = Matrix::new(300, d2, xm.values.iter().zip(&noise.values).map(|(a, b)| a + b).collect()).unwrap();
        let ours = mean_cca(&x, &y, 1e-10).unwrap();
        let theirs = oracle::mean_cca(&x, &y);
        assert!((ours - theirs).abs() < 1e-6, "{d1}x{d2}: {ours} vs {theirs}");
        let cc = canonical_correlations(&x, &y, 1e-10).unwrap();
        assert_eq!(cc.len(), d1.min(d2));
        assert!(cc.windows(2).all(|w| w[0] >= w[1]) && cc.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(&mut rng, 8, 8);
    assert!(mean_cca(&x, &x, RIDGE).is_err());
    let y = gaussian(&mut rng, 20, 3);
    let z = gaussian(&mut rng, 21, 3);
    assert!(mean_cca(&y, &z, RIDGE).is_err());
    assert!(mean_cca(&y, &y, 0.0).is_err());
    assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
}

fn small_setup() -> (DualEncoderModel, crate::synthdata::Dataset) {
    let data = generate(&GenSpec {
        n_examples: 0,
        n_test: 120,
        patches: 4,
        patch_dim: 8,
        ..GenSpec::default()
    })
    .unwrap();
    let cfg = EncoderConfig {
        layers: 2,
        vision_width: 8,
        text_width: 8,
        embed_dim: 4,
        heads: 2,
        patches: 4,
        ..EncoderConfig::default()
    };
    (DualEncoderModel::new(cfg, 0).unwrap(), data)
}

#[test]
fn profile_of_a_model_with_itself_is_all_ones() {
    let (m, data) = small_setup();
    let idx = data.test_indices();
    let a = dump_activations(&m, &data, &idx, "teacher").unwrap();
    let b = dump_activations(&m, &data, &idx, "copy").unwrap();
    assert_eq!(a.vision.len(), 2);
    assert_eq!(a.vision[0].rows, idx.len());
    let rows = cca_profile(&a, &b, RIDGE).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.branch == BranchKind::Vision).count(), 2);
    for r in &rows {
        assert!(r.mean_cca > 1.0 - 1e-3, "{r:?}");
    }
    let other = DualEncoderModel::new(m.config.clone(), 9).unwrap();
    let c = dump_activations(&other, &data, &idx, "random").unwrap();
    let rand_rows = cca_profile(&a, &c, RIDGE).unwrap();
    assert!(rand_rows.iter().zip(&rows).all(|(r, s)| r.mean_cca < s.mean_cca));

    let mut short = b.clone();
    short.text.pop();
    assert!(cca_profile(&a, &short, RIDGE).is_err());
    let shifted = dump_activations(&m, &data, &idx[1..], "x").unwrap();
    assert!(cca_profile(&a, &shifted, RIDGE).is_err());
}

fn rec(id: u64, label: usize, pred: usize, p1: f64) -> ExampleRecord {
    let probs = vec![1.0 - p1, p1];
    ExampleRecord {
        id,
        label,
        teacher_pred: None,
        pred,
        confidence: probs[pred],
        probs,
    }
}

#[test]
fn gate_curve_examples() {
    let recs = vec![rec(0, 0, 1, 0.9), rec(1, 0, 0, 0.5), rec(2, 1, 1, 1.0)];
    let pts = gate_curve(&recs).unwrap();
    assert_eq!(pts.len(), 3);
    assert_eq!(pts[0].confidence, 0.5);
    assert!(pts[0].weight.abs() < 1e-15);
    assert!((pts[1].weight - 0.531_004_406_410_718_8).abs() < 1e-12);
    assert_eq!(pts[2].weight, 1.0);
    assert!(pts.windows(2).all(|w| w[0].confidence <= w[1].confidence));
}

proptest! {
    #[test]
    fn gate_curve_follows_binary_entropy(p in 0.0f64..=1.0) {
        let pts = gate_curve(&[rec(0, 0, 0, p)]).unwrap();
        let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
        let expect = 1.0 - (h(p) + h(1.0 - p)) / std::f64::consts::LN_2;
        prop_assert!((pts[0].weight - expect).abs() < 1e-12);
    }

    #[test]
    fn error_counts_partition_errors(cases in prop::collection::vec((0usize..2, 0usize..2, 0usize..2), 1..50)) {
        let student: Vec<_> = cases.iter().enumerate().map(|(i, &(y, s, _))| rec(i as u64, y, s, 0.5)).collect();
        let teacher: Vec<_> = cases.iter().enumerate().map(|(i, &(y, _, t))| rec(i as u64, y, t, 0.5)).collect();
        let c = error_breakdown(&student, &teacher, 2).unwrap();
        let wrong = cases.iter().filter(|(y, s, _)| y != s).count();
        prop_assert_eq!(c.errors.iter().sum::<usize>(), wrong);
        for k in 0..2 {
            prop_assert!(c.student_only[k] <= c.errors[k]);
        }
        let same = error_breakdown(&teacher, &teacher, 2).unwrap();
        prop_assert_eq!(same.student_only, vec![0, 0]);
    }

    #[test]
    fn confidence_stats_ignore_record_order(conf in prop::collection::vec(0.5f64..=1.0, 1..30), seed in any::<u64>()) {
        let make = |c: &[f64]| c.iter().enumerate().map(|(i, &p)| rec(i as u64, i % 2, 1, p)).collect::<Vec<_>>();
        let a = confidence_stats(&make(&conf), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        let mut recs = make(&conf);
        recs.shuffle(&mut rng);
        prop_assert_eq!(format!("{:?}", confidence_stats(&recs, 2)), format!("{a:?}"));
    }
}

#[test]
fn error_breakdown_hand_fixture() {
    // (label, student, teacher)
    let cases = [(0, 0, 0), (0, 1, 0), (0, 1, 1), (1, 0, 1), (1, 1, 0), (1, 0, 1)];
    let student: Vec<_> = cases.iter().enumerate().map(|(i, &(y, s, _))| rec(i as u64, y, s, 0.5)).collect();
    let teacher: Vec<_> = cases.iter().enumerate().map(|(i, &(y, _, t))| rec(i as u64, y, t, 0.5)).collect();
    let c = error_breakdown(&student, &teacher, 2).unwrap();
    assert_eq!(c.errors, vec![2, 2]);
    assert_eq!(c.student_only, vec![1, 2]);
    let mut bad = teacher.clone();
    bad[2].id = 99;
    assert!(error_breakdown(&student, &bad, 2).is_err());
    assert!(error_breakdown(&student, &teacher[1..], 2).is_err());
}

#[test]
fn confidence_quartile_examples() {
    assert_eq!(quantile(&[0.6, 0.7, 0.8, 0.9], 0.5), 0.75);
    let recs: Vec<_> = [0.6, 0.7, 0.8, 0.9].iter().enumerate().map(|(i, &p)| rec(i as u64, 0, 1, p)).collect();
    let s = confidence_stats(&recs, 2);
    assert!((s[0].median - 0.75).abs() < 1e-15);
    assert!((s[0].q1 - 0.675).abs() < 1e-12 && (s[0].q3 - 0.825).abs() < 1e-12);
    assert_eq!(s[1].count, 0);
    assert!(s[1].median.is_nan());
    let ones: Vec<_> = (0..5).map(|i| rec(i, 1, 1, 1.0)).collect();
    let s = confidence_stats(&ones, 2);
    assert_eq!((s[1].median, s[1].iqr), (1.0, 0.0));
}

#[test]
fn embedding_export_covers_every_example() {
    let (m, data) = small_setup();
    let idx = data.test_indices();
    let a = export_embeddings(&m, &data, &idx, "teacher").unwrap();
    let b = export_embeddings(&m, &data, &idx, "teacher").unwrap();
    assert_eq!(a.len(), idx.len());
    assert_eq!(a, b);
    let other = DualEncoderModel::new(m.config.clone(), 4).unwrap();
    let c = export_embeddings(&other, &data, &idx, "student").unwrap();
    assert!(a.iter().zip(&c).all(|(x, y)| x.id == y.id && x.label == y.label));
    let three = DualEncoderModel::new(EncoderConfig { classes: 3, ..m.config.clone() }, 0).unwrap();
    assert!(export_embeddings(&three, &data, &idx, "x").is_err());
}

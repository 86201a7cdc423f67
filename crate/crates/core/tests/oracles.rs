//! Property tests of the pure math against brute-force oracles.

use advlens::analysis::{ratios_from_features, roc_auc};
use advlens::synthdata::taxonomy_for;
use advlens::taxonomy::{c_quadratic, cosine_sim_c, lc_score, CategoricalDistribution, CorrelationMatrix};
use proptest::prelude::*;

fn dist_strategy(k: usize) -> impl Strategy<Value = CategoricalDistribution> {
    prop::collection::vec(0.0f64..1.0, k)
        .prop_filter("non-zero mass", |v| v.iter().sum::<f64>() > 1e-6)
        .prop_map(|v| CategoricalDistribution::from_counts(&v).unwrap())
}

fn pair_count_auc(clean: &[f64], adv: &[f64]) -> f64 {
    let mut w = 0.0;
    for a in adv {
        for c in clean {
            w += if a < c { 1.0 } else if a == c { 0.5 } else { 0.0 };
        }
    }
    w / (clean.len() * adv.len()) as f64
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn quadratic_form_matches_double_sum(v in prop::collection::vec(-1.0f64..1.0, 8), sigma in 0.2f64..4.0) {
        let c = CorrelationMatrix::build(&taxonomy_for(8).unwrap(), sigma).unwrap();
        let mut want = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                want += v[i] * c.get(i, j) * v[j];
            }
        }
        let got = c_quadratic(&v, &c).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        prop_assert!(got >= -1e-10);
    }

    #[test]
    fn scores_stay_in_range(p in dist_strategy(16), q in dist_strategy(16)) {
        let c = CorrelationMatrix::build(&taxonomy_for(16).unwrap(), 1.0).unwrap();
        let lc = lc_score(&p, &c).unwrap();
        prop_assert!(lc > 0.0 && lc <= 1.0 + 1e-12);
        let cs = cosine_sim_c(&p, &q, &c).unwrap();
        prop_assert!(cs <= 1.0);
        prop_assert!((cs - cosine_sim_c(&q, &p, &c).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pair_count(
        clean in prop::collection::vec(0u8..6, 1..30),
        adv in prop::collection::vec(0u8..6, 1..30),
    ) {
        let clean: Vec<f64> = clean.into_iter().map(f64::from).collect();
        let adv: Vec<f64> = adv.into_iter().map(f64::from).collect();
        let roc = roc_auc(&clean, &adv).unwrap();
        prop_assert_eq!(roc.auc, pair_count_auc(&clean, &adv));
        let first = roc.points.first().unwrap();
        let last = roc.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn ratios_match_direct_means(
        adv in prop::collection::vec(-3.0f64..3.0, 3),
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..6),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..6),
    ) {
        let aset: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
        let bset: Vec<&[f64]> = b.iter().map(|v| v.as_slice()).collect();
        let within: f64 = {
            let (mut s, mut n) = (0.0, 0);
            for i in 0..a.len() {
                for j in 0..a.len() {
                    if i != j {
                        s += l2(&a[i], &a[j]);
                        n += 1;
                    }
                }
            }
            s / n as f64
        };
        let between = a.iter().flat_map(|x| b.iter().map(move |y| l2(x, y))).sum::<f64>() / (a.len() * b.len()) as f64;
        let to_a = a.iter().map(|x| l2(&adv, x)).sum::<f64>() / a.len() as f64;
        let to_b = b.iter().map(|x| l2(&adv, x)).sum::<f64>() / b.len() as f64;
        prop_assume!(within > 1e-9 && between > 1e-9);
        let (r1, r2) = ratios_from_features(&adv, &aset, &bset).unwrap();
        prop_assert!((r1 - to_a / within).abs() <= 1e-12 * (1.0 + r1.abs()));
        prop_assert!((r2 - to_b / between).abs() <= 1e-12 * (1.0 + r2.abs()));
    }
}

use ibunet_core::metrics::{auc, confusion, nrmse, optimal_threshold, roc_curve, ssim};
use ibunet_core::Map2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &sp) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sn) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_matches_pairwise_statistic_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..100 {
        let n = rng.gen_range(2..=1000);
        let levels: f64 = if inst % 3 == 0 { 10.0 } else { 1e6 };
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| ((rng.gen_range(0.0f64..1.0) + if l { 0.3 } else { 0.0 }) * levels).round() / levels)
            .collect();
        let got = auc(&roc_curve(&scores, &labels).unwrap());
        let want = pairwise_auc(&scores, &labels);
        assert!((got - want).abs() <= 1e-12, "instance {inst} (n={n}): {got} vs {want}");
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Map2 {
    Map2::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
}

#[test]
fn nrmse_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(2..40), rng.gen_range(2..40));
        let y = random_map(&mut rng, h, w);
        let yhat = random_map(&mut rng, h, w);
        let n = (h * w) as f64;
        let mse: f64 = y.data.iter().zip(&yhat.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let max = y.data.iter().cloned().fold(f64::MIN, f64::max);
        let min = y.data.iter().cloned().fold(f64::MAX, f64::min);
        let want = mse.sqrt() / (max - min);
        let got = nrmse(&y, &yhat).unwrap();
        assert!((got - want).abs() <= 4.0 * f64::EPSILON * want, "{got} vs {want}");
        assert_eq!(nrmse(&y, &y).unwrap(), 0.0);
    }
}

#[test]
fn ssim_identity_and_symmetry_on_50_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(11..48), rng.gen_range(11..48));
        let a = random_map(&mut rng, h, w);
        let b = random_map(&mut rng, h, w);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }
}

#[test]
fn four_point_hand_case() {
    let scores = [0.9, 0.8, 0.3, 0.1];
    let labels = [true, true, false, false];
    let roc = roc_curve(&scores, &labels).unwrap();
    let pts: Vec<(f64, f64)> = roc.iter().map(|p| (p.fpr, p.tpr)).collect();
    assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]);
    let thr: Vec<f64> = roc.iter().skip(1).map(|p| p.threshold).collect();
    assert_eq!(thr, vec![0.9, 0.8, 0.3, 0.1]);
    let best = optimal_threshold(&roc).unwrap();
    assert_eq!(best.threshold, 0.8);
    assert_eq!(auc(&roc), 1.0);
    let cm = confusion(&scores, &labels, 0.8).unwrap();
    assert_eq!((cm.tp, cm.fp, cm.tn, cm.false_neg), (2, 0, 2, 0));
}

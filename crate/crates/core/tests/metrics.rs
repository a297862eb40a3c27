use mcpa::metrics::{auc_roc, dice_score, hd100, hd95, Evaluator, REPORT_COLUMNS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const S: usize = 16;

fn random_mask(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let density = rng.gen_range(0.1..0.7);
    let mut m: Vec<bool> = (0..S * S).map(|_| rng.gen_bool(density)).collect();
    m[rng.gen_range(0..S * S)] = true;
    m
}

fn brute_boundary(m: &[bool]) -> Vec<(i64, i64)> {
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < S as i64 && x < S as i64 && m[y as usize * S + x as usize];
    let mut out = Vec::new();
    for y in 0..S as i64 {
        for x in 0..S as i64 {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn brute_hd95(a: &[bool], b: &[bool]) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let nearest =
        |p: &(i64, i64), set: &[(i64, i64)]| set.iter().map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min);
    let mut d: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).chain(bb.iter().map(|p| nearest(p, &ba))).collect();
    d.sort_by(f64::total_cmp);
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    d[lo] + (rank - lo as f64) * (d[hi] - d[lo])
}

fn brute_auc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn dice_matches_set_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let p: Vec<u8> = (0..S * S).map(|_| rng.gen_range(0..3)).collect();
        let g: Vec<u8> = (0..S * S).map(|_| rng.gen_range(0..3)).collect();
        for c in 0..3u8 {
            let inter = p.iter().zip(&g).filter(|(a, b)| **a == c && **b == c).count() as f64;
            let sum = (p.iter().filter(|&&a| a == c).count() + g.iter().filter(|&&b| b == c).count()) as f64;
            let expect = 2.0 * inter / sum;
            assert!((dice_score(&p, &g, c) - expect).abs() < 1e-9);
            assert_eq!(dice_score(&p, &g, c), dice_score(&g, &p, c));
        }
    }
}

#[test]
fn hd95_matches_pairwise_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let a = random_mask(&mut rng);
        let b = random_mask(&mut rng);
        let h = hd95(&a, &b, S, S).unwrap();
        assert!((h - brute_hd95(&a, &b)).abs() < 1e-9, "{h} vs {}", brute_hd95(&a, &b));
        assert_eq!(h, hd95(&b, &a, S, S).unwrap());
        assert!(h <= hd100(&a, &b, S, S).unwrap());
        assert!(h >= 0.0);
    }
}

#[test]
fn hd_hand_case_and_empty() {
    let mut a = vec![false; S * S];
    let mut b = vec![false; S * S];
    a[0] = true;
    b[3 * S + 4] = true;
    assert_eq!(hd100(&a, &b, S, S), Some(5.0));
    assert_eq!(hd95(&a, &b, S, S), Some(5.0));
    assert_eq!(hd95(&a, &a, S, S), Some(0.0));
    assert_eq!(hd95(&a, &vec![false; S * S], S, S), None);
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = S * S;
        let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        y[0] = true;
        y[1] = false;
        let a = auc_roc(&s, &y).unwrap();
        assert!((a - brute_auc(&s, &y)).abs() < 1e-9);
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        assert!((auc_roc(&t, &y).unwrap() - a).abs() < 1e-12);
    }
}

#[test]
fn auc_hand_cases() {
    assert_eq!(auc_roc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn random_scores_on_balanced_toy_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y: Vec<bool> = (0..4000).map(|i| i % 2 == 0).collect();
    let s: Vec<f64> = (0..4000).map(|_| rng.gen()).collect();
    let a = 100.0 * auc_roc(&s, &y).unwrap();
    assert!((a - 50.0).abs() <= 5.0, "{a}");
}

#[test]
fn perfect_prediction_report() {
    let mut ev = Evaluator::new(3);
    let gt: Vec<u8> = (0..S * S).map(|i| ((i / S) / 6) as u8).collect();
    ev.add(&gt, &gt, S, S, None).unwrap();
    let r = ev.report();
    assert_eq!(r.mean_dice, 100.0);
    assert_eq!(r.mean_hd95, Some(0.0));
    let mut buf = Vec::new();
    r.write_csv(&mut buf, "run").unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), REPORT_COLUMNS.join(","));
}

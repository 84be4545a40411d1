//! Library kernels against direct brute-force references.

mod support;

use nnmobile::autodiff::Graph;
use nnmobile::metrics::{
    auc_binary, auc_multiclass, confusion, f1_per_class, f1_scores, kappa_quadratic, EvalBuffer,
};
use nnmobile::rng::{stream, Stream};
use nnmobile::Tensor;
use rand::Rng;
use support::oracles;

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn conv_matches_direct_loops_in_f32() {
    let mut rng = stream(11, Stream::Check, &[]);
    for case in 0..50 {
        let groups_choice = rng.random_range(0..3);
        let cin = rng.random_range(1..=4) * if groups_choice == 0 { 1 } else { 2 };
        let (groups, cout) = match groups_choice {
            0 => (1, rng.random_range(1..=5)),
            1 => (cin, cin),
            _ => (2, 2 * rng.random_range(1..=3)),
        };
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        let h = rng.random_range(k..=9);
        let w = rng.random_range(k..=9);
        let n = rng.random_range(1..=2);
        let xd = [n, cin, h, w];
        let wd = [cout, cin / groups, k, k];
        let x = rand_vec(&mut rng, xd.iter().product());
        let wt = rand_vec(&mut rng, wd.iter().product());
        let b = rand_vec(&mut rng, cout);
        let (want, od) = oracles::conv2d(&x, xd, &wt, wd, Some(&b), stride, pad, groups);

        let mut g = Graph::<f32>::new();
        let xv = g.constant(Tensor::new(&xd, x.iter().map(|&v| v as f32).collect()).unwrap());
        let wv = g.constant(Tensor::new(&wd, wt.iter().map(|&v| v as f32).collect()).unwrap());
        let bv = g.constant(Tensor::new(&[cout], b.iter().map(|&v| v as f32).collect()).unwrap());
        let y = g.conv2d(xv, wv, Some(bv), stride, pad, groups).unwrap();
        assert_eq!(g.dims(y), od, "case {case}");
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!(
                (*a as f64 - e).abs() <= 1e-5 * e.abs().max(1.0),
                "case {case}: {a} vs {e} (groups {groups}, stride {stride}, pad {pad}, k {k})"
            );
        }
    }
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = stream(12, Stream::Check, &[]);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(2..=20);
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let Some(want) = oracles::auc_pairs(&scores, &labels) else {
            assert!(auc_binary(&scores, &labels).is_err());
            continue;
        };
        assert!((auc_binary(&scores, &labels).unwrap() - want).abs() <= 1e-12);
        checked += 1;
    }
}

#[test]
fn multiclass_auc_kappa_f1_match_brute_force() {
    let mut rng = stream(13, Stream::Check, &[]);
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let n = rng.random_range(2..=25);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(0..4) as f64 / 4.0).collect())
            .collect();
        let mut buf = EvalBuffer::new(k);
        for (l, r) in labels.iter().zip(&rows) {
            buf.push(*l, r).unwrap();
        }
        match oracles::auc_ovr(&rows, &labels, k) {
            Some(want) => assert!((auc_multiclass(&buf).unwrap().0 - want).abs() <= 1e-12),
            None => assert!(auc_multiclass(&buf).is_err()),
        }
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        match oracles::kappa_pairs(&labels, &preds) {
            Some(want) => {
                let got = kappa_quadratic(&labels, &preds, k).unwrap();
                assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            }
            None => assert!(kappa_quadratic(&labels, &preds, k).is_err()),
        }
        let c = confusion(&labels, &preds, k).unwrap();
        let want = oracles::f1_counts(&labels, &preds, k);
        for (a, b) in f1_per_class(&c).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        let (mac, _) = f1_scores(&c);
        assert!((mac - want.iter().sum::<f64>() / k as f64).abs() <= 1e-12);
    }
}

#[test]
fn worked_auc_example() {
    let s = [0.1, 0.4, 0.35, 0.8];
    let l = [false, false, true, true];
    assert_eq!(auc_binary(&s, &l).unwrap(), 0.75);
    assert_eq!(oracles::auc_pairs(&s, &l), Some(0.75));
}

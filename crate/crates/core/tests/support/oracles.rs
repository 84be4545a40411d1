//! Brute-force reference implementations used by the test suites.
#![allow(dead_code)]

/// Direct seven-loop grouped cross-correlation, NCHW / OIHW, in f64.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    xd: [usize; 4],
    w: &[f64],
    wd: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wid] = xd;
    let [cout, cpg, kh, kw] = wd;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    assert_eq!(cpg * groups, cin);
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            let g = o / opg;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wid as isize {
                                    continue;
                                }
                                acc += x[((b * cin + c) * h + iy as usize) * wid + ix as usize]
                                    * w[((o * cpg + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * cout + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

/// Mean one-vs-rest pair AUC over classes that occur in `labels`.
pub fn auc_ovr(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Option<f64> {
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    for &c in &present {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auc_pairs(&col, &bin)?;
    }
    Some(total / present.len() as f64)
}

/// Quadratic kappa from sample pairs: observed squared disagreement over the
/// mean squared disagreement of every (truth, prediction) pairing.
pub fn kappa_pairs(t: &[usize], p: &[usize]) -> Option<f64> {
    let n = t.len() as f64;
    let sq = |a: usize, b: usize| (a as f64 - b as f64).powi(2);
    let observed: f64 = t.iter().zip(p).map(|(&a, &b)| sq(a, b)).sum();
    let mut chance = 0.0;
    for &a in t {
        for &b in p {
            chance += sq(a, b);
        }
    }
    chance /= n;
    if chance == 0.0 {
        return (observed == 0.0).then_some(1.0);
    }
    Some(1.0 - observed / chance)
}

/// Per-class F1 as `2 tp / (2 tp + fp + fn)`, zero when the class never appears.
pub fn f1_counts(t: &[usize], p: &[usize], k: usize) -> Vec<f64> {
    (0..k)
        .map(|c| {
            let tp = t.iter().zip(p).filter(|(&a, &b)| a == c && b == c).count() as f64;
            let fp = t.iter().zip(p).filter(|(&a, &b)| a != c && b == c).count() as f64;
            let fnn = t.iter().zip(p).filter(|(&a, &b)| a == c && b != c).count() as f64;
            let d = 2.0 * tp + fp + fnn;
            if d == 0.0 {
                0.0
            } else {
                2.0 * tp / d
            }
        })
        .collect()
}

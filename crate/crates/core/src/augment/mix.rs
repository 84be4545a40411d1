//! Batch-level Mixup and CutMix with soft labels.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    None,
    Mixup,
    Cutmix,
}

/// How a mixed batch was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: MixMode,
    /// Weight of the original sample in both pixels and labels.
    pub lambda: f64,
    /// Sample `i` is mixed with sample `permutation[i]`.
    pub permutation: Vec<usize>,
    /// CutMix box as `[y0, y1, x0, x1)`.
    pub cut_box: Option<[usize; 4]>,
}

#[derive(Debug, Clone)]
pub struct MixedBatch {
    /// `[N, 3, H, W]`.
    pub images: Tensor<f32>,
    /// `[N, K]`, rows on the probability simplex.
    pub soft_labels: Tensor<f32>,
    pub provenance: Provenance,
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor<f32>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!("label {bad} outside 0..{k}")));
    }
    Ok(Tensor::from_fn(&[labels.len(), k], |i| {
        f32::from(labels[i / k] == i % k)
    }))
}

fn check_batch(batch: &Tensor<f32>, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = batch.nchw()?;
    if c != 3 || n != labels.len() {
        return Err(Error::Dimension(format!(
            "batch {:?} does not match {} labels with 3 channels",
            batch.dims(),
            labels.len()
        )));
    }
    Ok((n, h, w))
}

fn unmixed(batch: &Tensor<f32>, labels: &[usize], k: usize) -> Result<MixedBatch> {
    Ok(MixedBatch {
        images: batch.clone(),
        soft_labels: one_hot(labels, k)?,
        provenance: Provenance {
            mode: MixMode::None,
            lambda: 1.0,
            permutation: (0..labels.len()).collect(),
            cut_box: None,
        },
    })
}

fn mix_labels(labels: &[usize], k: usize, perm: &[usize], lambda: f64) -> Result<Tensor<f32>> {
    let a = one_hot(labels, k)?;
    let lam = lambda as f32;
    let mut out = a.clone();
    let d = out.data_mut();
    for (i, &j) in perm.iter().enumerate() {
        for c in 0..k {
            d[i * k + c] = lam * a.data()[i * k + c] + (1.0 - lam) * a.data()[j * k + c];
        }
    }
    Ok(out)
}

fn sample_perm(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// Mixup with `lambda ~ Beta(alpha, alpha)` and a random pairing.
pub fn mixup(batch: &Tensor<f32>, labels: &[usize], k: usize, alpha: f64, rng: &mut Rng) -> Result<MixedBatch> {
    let (n, _, _) = check_batch(batch, labels)?;
    if n < 2 {
        return unmixed(batch, labels, k);
    }
    let lambda = sample_lambda(alpha, rng)?;
    let perm = sample_perm(n, rng);
    mixup_with_lambda(batch, labels, k, lambda, &perm)
}

/// Mixup with a given weight and pairing: `lambda * x_i + (1 - lambda) * x_perm[i]`.
pub fn mixup_with_lambda(
    batch: &Tensor<f32>,
    labels: &[usize],
    k: usize,
    lambda: f64,
    perm: &[usize],
) -> Result<MixedBatch> {
    let (n, h, w) = check_batch(batch, labels)?;
    check_perm(perm, n)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("lambda {lambda} outside [0, 1]")));
    }
    let lam = lambda as f32;
    let sz = 3 * h * w;
    let src = batch.data();
    let mut images = batch.clone();
    for (i, &j) in perm.iter().enumerate() {
        let dst = &mut images.data_mut()[i * sz..(i + 1) * sz];
        for (p, v) in dst.iter_mut().enumerate() {
            *v = lam * src[i * sz + p] + (1.0 - lam) * src[j * sz + p];
        }
    }
    Ok(MixedBatch {
        images,
        soft_labels: mix_labels(labels, k, perm, lambda)?,
        provenance: Provenance {
            mode: MixMode::Mixup,
            lambda,
            permutation: perm.to_vec(),
            cut_box: None,
        },
    })
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || !perm.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true)) {
        return Err(Error::Validation(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    Ok(())
}

/// Box of target area `(1 - lambda) * H * W`, centred uniformly and clipped.
pub fn sample_box(h: usize, w: usize, lambda: f64, rng: &mut Rng) -> [usize; 4] {
    let cut = (1.0 - lambda).sqrt();
    let (ch, cw) = ((h as f64 * cut) as usize, (w as f64 * cut) as usize);
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let y0 = cy.saturating_sub(ch / 2);
    let y1 = (cy + ch / 2).min(h);
    let x0 = cx.saturating_sub(cw / 2);
    let x1 = (cx + cw / 2).min(w);
    [y0, y1, x0, x1]
}

pub fn cutmix(batch: &Tensor<f32>, labels: &[usize], k: usize, alpha: f64, rng: &mut Rng) -> Result<MixedBatch> {
    let (n, h, w) = check_batch(batch, labels)?;
    if n < 2 {
        return unmixed(batch, labels, k);
    }
    let lambda = sample_lambda(alpha, rng)?;
    let perm = sample_perm(n, rng);
    let b = sample_box(h, w, lambda, rng);
    cutmix_with_box(batch, labels, k, b, &perm)
}

/// Paste `[y0, y1) x [x0, x1)` from each partner; labels are mixed with the
/// exact kept-pixel fraction `1 - box_area / (H * W)`.
pub fn cutmix_with_box(
    batch: &Tensor<f32>,
    labels: &[usize],
    k: usize,
    cut_box: [usize; 4],
    perm: &[usize],
) -> Result<MixedBatch> {
    let (n, h, w) = check_batch(batch, labels)?;
    check_perm(perm, n)?;
    let [y0, y1, x0, x1] = cut_box;
    if y0 > y1 || x0 > x1 || y1 > h || x1 > w {
        return Err(Error::Validation(format!("box {cut_box:?} outside {h}x{w}")));
    }
    let area = (y1 - y0) * (x1 - x0);
    let lambda = 1.0 - area as f64 / (h * w) as f64;
    let src = batch.data();
    let mut images = batch.clone();
    let plane = h * w;
    for (i, &j) in perm.iter().enumerate() {
        let dst = images.data_mut();
        for c in 0..3 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let off = c * plane + y * w + x;
                    dst[i * 3 * plane + off] = src[j * 3 * plane + off];
                }
            }
        }
    }
    Ok(MixedBatch {
        images,
        soft_labels: mix_labels(labels, k, perm, lambda)?,
        provenance: Provenance {
            mode: MixMode::Cutmix,
            lambda,
            permutation: perm.to_vec(),
            cut_box: Some(cut_box),
        },
    })
}

/// With probability `mix_prob` apply CutMix (chance `mix_switch_prob`) or
/// Mixup; otherwise, or when the recipe has no batch mixing, one-hot labels.
pub fn mix_dispatch(
    batch: &Tensor<f32>,
    labels: &[usize],
    k: usize,
    policy: &AugPolicy,
    rng: &mut Rng,
) -> Result<MixedBatch> {
    check_batch(batch, labels)?;
    if !policy.uses_mix() || rng.random::<f64>() >= policy.mix_prob {
        return unmixed(batch, labels, k);
    }
    if rng.random::<f64>() < policy.mix_switch_prob {
        cutmix(batch, labels, k, policy.cutmix_alpha, rng)
    } else {
        mixup(batch, labels, k, policy.mixup_alpha, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn batch(n: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 3, h, w], |i| ((i * 37) % 101) as f32 / 100.0)
    }

    #[test]
    fn lambda_one_is_identity() {
        let b = batch(3, 4, 4);
        let m = mixup_with_lambda(&b, &[0, 1, 2], 3, 1.0, &[2, 0, 1]).unwrap();
        assert_eq!(m.images, b);
        assert_eq!(m.soft_labels, one_hot(&[0, 1, 2], 3).unwrap());
    }

    #[test]
    fn half_mix_of_pair() {
        let b = batch(2, 2, 2);
        let m = mixup_with_lambda(&b, &[0, 1], 2, 0.5, &[1, 0]).unwrap();
        for p in 0..12 {
            let want = 0.5 * b.data()[p] + 0.5 * b.data()[12 + p];
            assert!((m.images.data()[p] - want).abs() < 1e-7);
        }
        assert_eq!(&m.soft_labels.data()[..2], &[0.5, 0.5]);
    }

    #[test]
    fn quarter_box_gives_three_quarters() {
        let b = Tensor::zeros(&[2, 3, 224, 224]);
        let m = cutmix_with_box(&b, &[0, 1], 2, [0, 112, 0, 112], &[1, 0]).unwrap();
        assert_eq!(m.provenance.lambda, 0.75);
    }

    #[test]
    fn full_box_swaps_labels() {
        let b = batch(2, 3, 3);
        let m = cutmix_with_box(&b, &[0, 1], 2, [0, 3, 0, 3], &[1, 0]).unwrap();
        assert_eq!(m.provenance.lambda, 0.0);
        assert_eq!(m.soft_labels.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(&m.images.data()[..27], &b.data()[27..]);
    }

    #[test]
    fn single_sample_passes_through() {
        let mut rng = stream(0, Stream::Mix, &[]);
        let b = batch(1, 2, 2);
        let m = mixup(&b, &[1], 3, 0.8, &mut rng).unwrap();
        assert_eq!(m.provenance.mode, MixMode::None);
        assert_eq!(m.soft_labels.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn dispatch_respects_probabilities() {
        let mut rng = stream(0, Stream::Mix, &[]);
        let b = batch(4, 4, 4);
        let mut p = AugPolicy::recipe(crate::augment::Recipe::III);
        p.mix_prob = 0.0;
        let m = mix_dispatch(&b, &[0, 1, 2, 0], 3, &p, &mut rng).unwrap();
        assert_eq!(m.provenance.mode, MixMode::None);
        p.mix_prob = 1.0;
        p.mix_switch_prob = 1.0;
        for _ in 0..20 {
            let m = mix_dispatch(&b, &[0, 1, 2, 0], 3, &p, &mut rng).unwrap();
            assert_eq!(m.provenance.mode, MixMode::Cutmix);
        }
    }
}

//! Training-time augmentation recipes.
//!
//! * Recipe I: resize, random crop, horizontal flip, brightness jitter.
//! * Recipe II: recipe I plus batch-level Mixup/CutMix.
//! * Recipe III: recipe II plus RandAugment and Random Erasing per sample.

pub mod mix;
pub mod ops;

use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::rng::Rng;

pub use mix::{cutmix, cutmix_with_box, mix_dispatch, mixup, mixup_with_lambda, MixMode, MixedBatch, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Recipe {
    I,
    II,
    III,
}

impl std::str::FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Recipe::I),
            "II" | "2" => Ok(Recipe::II),
            "III" | "3" => Ok(Recipe::III),
            _ => Err(Error::Config(format!("unknown augmentation recipe `{s}`"))),
        }
    }
}

/// RandAugment operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RaOp {
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Brightness,
    Contrast,
    Solarize,
    Posterize,
    Equalize,
    AutoContrast,
}

impl RaOp {
    pub const ALL: [RaOp; 11] = [
        RaOp::Rotate,
        RaOp::ShearX,
        RaOp::ShearY,
        RaOp::TranslateX,
        RaOp::TranslateY,
        RaOp::Brightness,
        RaOp::Contrast,
        RaOp::Solarize,
        RaOp::Posterize,
        RaOp::Equalize,
        RaOp::AutoContrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RaOp::Rotate => "rotate",
            RaOp::ShearX => "shear_x",
            RaOp::ShearY => "shear_y",
            RaOp::TranslateX => "translate_x",
            RaOp::TranslateY => "translate_y",
            RaOp::Brightness => "brightness",
            RaOp::Contrast => "contrast",
            RaOp::Solarize => "solarize",
            RaOp::Posterize => "posterize",
            RaOp::Equalize => "equalize",
            RaOp::AutoContrast => "autocontrast",
        }
    }

    /// Apply at `level` in `[0, 1]`; signed ops flip direction when `negate`.
    pub fn apply(self, img: &Image, level: f32, negate: bool) -> Image {
        let sign = if negate { -1.0 } else { 1.0 };
        match self {
            RaOp::Rotate => ops::rotate(img, sign * 30.0 * level),
            RaOp::ShearX => ops::shear_x(img, sign * 0.3 * level),
            RaOp::ShearY => ops::shear_y(img, sign * 0.3 * level),
            RaOp::TranslateX => ops::translate_x(img, sign * 0.45 * level * img.width as f32),
            RaOp::TranslateY => ops::translate_y(img, sign * 0.45 * level * img.height as f32),
            RaOp::Brightness => ops::brightness(img, 1.0 + sign * 0.9 * level),
            RaOp::Contrast => ops::contrast(img, 1.0 + sign * 0.9 * level),
            RaOp::Solarize => ops::solarize(img, 1.0 - level),
            RaOp::Posterize => ops::posterize(img, 8 - (4.0 * level).floor() as u32),
            RaOp::Equalize => ops::equalize(img),
            RaOp::AutoContrast => ops::autocontrast(img),
        }
    }
}

fn d_num_ops() -> usize {
    2
}
fn d_magnitude() -> f64 {
    9.0
}
fn d_mstd() -> f64 {
    0.5
}
fn d_op_prob() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandAugment {
    #[serde(default = "d_num_ops")]
    pub num_ops: usize,
    /// On a 0..=10 scale.
    #[serde(default = "d_magnitude")]
    pub magnitude: f64,
    /// Per-op Gaussian jitter of the magnitude.
    #[serde(default = "d_mstd")]
    pub magnitude_std: f64,
    /// Chance that each chosen op is actually applied.
    #[serde(default = "d_op_prob")]
    pub op_prob: f64,
}

impl Default for RandAugment {
    fn default() -> Self {
        Self {
            num_ops: d_num_ops(),
            magnitude: d_magnitude(),
            magnitude_std: d_mstd(),
            op_prob: d_op_prob(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EraseFill {
    /// Independent uniform noise per pixel.
    Random,
    /// The image's per-channel mean.
    Mean,
    Zero,
}

fn d_erase_prob() -> f64 {
    0.25
}
fn d_erase_area() -> [f64; 2] {
    [0.02, 1.0 / 3.0]
}
fn d_erase_aspect() -> [f64; 2] {
    [0.3, 3.3]
}
fn d_erase_fill() -> EraseFill {
    EraseFill::Random
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomErasing {
    #[serde(default = "d_erase_prob")]
    pub prob: f64,
    /// Erased fraction of the image area.
    #[serde(default = "d_erase_area")]
    pub area: [f64; 2],
    /// Height / width of the erased rectangle.
    #[serde(default = "d_erase_aspect")]
    pub aspect: [f64; 2],
    #[serde(default = "d_erase_fill")]
    pub fill: EraseFill,
}

impl Default for RandomErasing {
    fn default() -> Self {
        Self {
            prob: d_erase_prob(),
            area: d_erase_area(),
            aspect: d_erase_aspect(),
            fill: d_erase_fill(),
        }
    }
}

fn d_recipe() -> Recipe {
    Recipe::III
}
fn d_resize() -> usize {
    256
}
fn d_crop() -> usize {
    224
}
fn d_crop_scale() -> [f64; 2] {
    [0.8, 1.0]
}
fn d_flip() -> f64 {
    0.5
}
fn d_brightness() -> f64 {
    0.2
}
fn d_mixup_alpha() -> f64 {
    0.8
}
fn d_cutmix_alpha() -> f64 {
    1.0
}
fn d_mix_prob() -> f64 {
    1.0
}
fn d_switch() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPolicy {
    #[serde(default = "d_recipe")]
    pub recipe: Recipe,
    /// Square side the decoded image is resized to before cropping.
    #[serde(default = "d_resize")]
    pub resize: usize,
    /// Network input side.
    #[serde(default = "d_crop")]
    pub crop_size: usize,
    /// Crop area as a fraction of the resized image.
    #[serde(default = "d_crop_scale")]
    pub crop_scale: [f64; 2],
    #[serde(default = "d_flip")]
    pub flip_prob: f64,
    /// Brightness factor drawn from `1 ± brightness`.
    #[serde(default = "d_brightness")]
    pub brightness: f64,
    #[serde(default)]
    pub randaugment: RandAugment,
    #[serde(default)]
    pub erasing: RandomErasing,
    #[serde(default = "d_mixup_alpha")]
    pub mixup_alpha: f64,
    #[serde(default = "d_cutmix_alpha")]
    pub cutmix_alpha: f64,
    #[serde(default = "d_mix_prob")]
    pub mix_prob: f64,
    /// Chance of CutMix rather than Mixup when a mix is applied.
    #[serde(default = "d_switch")]
    pub mix_switch_prob: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self::recipe(d_recipe())
    }
}

impl AugPolicy {
    pub fn recipe(recipe: Recipe) -> Self {
        Self {
            recipe,
            resize: d_resize(),
            crop_size: d_crop(),
            crop_scale: d_crop_scale(),
            flip_prob: d_flip(),
            brightness: d_brightness(),
            randaugment: RandAugment::default(),
            erasing: RandomErasing::default(),
            mixup_alpha: d_mixup_alpha(),
            cutmix_alpha: d_cutmix_alpha(),
            mix_prob: d_mix_prob(),
            mix_switch_prob: d_switch(),
        }
    }

    /// Every randomized step switched off; the output equals the input when
    /// `resize == crop_size ==` the input side.
    pub fn identity(recipe: Recipe, size: usize) -> Self {
        Self {
            resize: size,
            crop_size: size,
            crop_scale: [1.0, 1.0],
            flip_prob: 0.0,
            brightness: 0.0,
            randaugment: RandAugment {
                op_prob: 0.0,
                ..RandAugment::default()
            },
            erasing: RandomErasing {
                prob: 0.0,
                ..RandomErasing::default()
            },
            mix_prob: 0.0,
            ..Self::recipe(recipe)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("flip_prob", self.flip_prob)?;
        prob("erasing.prob", self.erasing.prob)?;
        prob("randaugment.op_prob", self.randaugment.op_prob)?;
        prob("mix_prob", self.mix_prob)?;
        prob("mix_switch_prob", self.mix_switch_prob)?;
        let range = |name: &str, r: [f64; 2], lo: f64, hi: f64| {
            if lo <= r[0] && r[0] <= r[1] && r[1] <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {r:?} must satisfy {lo} <= lo <= hi <= {hi}")))
            }
        };
        range("crop_scale", self.crop_scale, f64::MIN_POSITIVE, 1.0)?;
        range("erasing.area", self.erasing.area, f64::MIN_POSITIVE, 1.0)?;
        range("erasing.aspect", self.erasing.aspect, f64::MIN_POSITIVE, f64::INFINITY)?;
        if self.crop_size == 0 || self.resize == 0 {
            return Err(Error::Config("resize and crop_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.brightness) {
            return Err(Error::Config(format!("brightness {} outside [0, 1]", self.brightness)));
        }
        if !(0.0..=10.0).contains(&self.randaugment.magnitude) || self.randaugment.magnitude_std < 0.0 {
            return Err(Error::Config("randaugment magnitude must be in [0, 10], std >= 0".into()));
        }
        if self.uses_mix() && self.mix_prob > 0.0 {
            if self.mix_switch_prob < 1.0 && self.mixup_alpha <= 0.0 {
                return Err(Error::Config("mixup_alpha must be > 0 when mixup is enabled".into()));
            }
            if self.mix_switch_prob > 0.0 && self.cutmix_alpha <= 0.0 {
                return Err(Error::Config("cutmix_alpha must be > 0 when cutmix is enabled".into()));
            }
        }
        Ok(())
    }

    pub fn uses_mix(&self) -> bool {
        self.recipe >= Recipe::II
    }

    pub fn uses_randaugment(&self) -> bool {
        self.recipe >= Recipe::III
    }

    /// Names of the operations the recipe can apply.
    pub fn op_set(&self) -> BTreeSet<&'static str> {
        let mut s: BTreeSet<&'static str> = ["resize", "random_crop", "hflip", "brightness_jitter"].into();
        if self.uses_mix() {
            s.extend(["mixup", "cutmix"]);
        }
        if self.uses_randaugment() {
            s.extend(RaOp::ALL.iter().map(|op| op.name()));
            s.insert("random_erasing");
        }
        s
    }
}

/// Per-sample pipeline: resize, crop, flip, brightness, then RandAugment and
/// Random Erasing for recipe III. Output is `crop_size` square, values in `[0, 1]`.
pub fn apply_sample_augs(img: &Image, policy: &AugPolicy, rng: &mut Rng) -> Image {
    let resized = img.resize(policy.resize, policy.resize);
    let mut out = random_crop(&resized, policy, rng);
    if rng.random::<f64>() < policy.flip_prob {
        out = out.flip_horizontal();
    }
    if policy.brightness > 0.0 {
        let f = rng.random_range(-policy.brightness..=policy.brightness);
        out = ops::brightness(&out, 1.0 + f as f32);
    }
    if policy.uses_randaugment() {
        out = randaugment(&out, &policy.randaugment, rng);
        erase(&mut out, &policy.erasing, rng);
    }
    out.clamp();
    out
}

/// Eval-time pipeline: resize then centre crop of the largest-scale window.
pub fn eval_transform(img: &Image, policy: &AugPolicy) -> Image {
    let resized = img.resize(policy.resize, policy.resize);
    let side = crop_side(policy.resize, policy.crop_scale[1]);
    let off = (policy.resize - side) / 2;
    resized
        .crop(off, off, side, side)
        .expect("window inside")
        .resize(policy.crop_size, policy.crop_size)
}

fn crop_side(full: usize, scale: f64) -> usize {
    ((scale.sqrt() * full as f64).round() as usize).clamp(1, full)
}

fn random_crop(img: &Image, policy: &AugPolicy, rng: &mut Rng) -> Image {
    let [lo, hi] = policy.crop_scale;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = crop_side(img.height.min(img.width), scale);
    let top = rng.random_range(0..=img.height - side);
    let left = rng.random_range(0..=img.width - side);
    img.crop(top, left, side, side)
        .expect("window inside")
        .resize(policy.crop_size, policy.crop_size)
}

/// `num_ops` ops drawn with replacement, each applied with `op_prob` at a
/// jittered magnitude.
pub fn randaugment(img: &Image, cfg: &RandAugment, rng: &mut Rng) -> Image {
    let mut out = img.clone();
    for _ in 0..cfg.num_ops {
        let op = RaOp::ALL[rng.random_range(0..RaOp::ALL.len())];
        let apply = rng.random::<f64>() < cfg.op_prob;
        let mut m = cfg.magnitude;
        if cfg.magnitude_std > 0.0 {
            m = Normal::new(cfg.magnitude, cfg.magnitude_std)
                .expect("std checked")
                .sample(rng);
        }
        let level = (m.clamp(0.0, 10.0) / 10.0) as f32;
        let negate = rng.random::<bool>();
        if apply {
            out = op.apply(&out, level, negate);
        }
    }
    out
}

/// Axis-aligned rectangle `(top, left, height, width)` erased by [`erase`].
pub type Rect = (usize, usize, usize, usize);

/// Random Erasing. The aspect ratio is drawn log-uniformly from the part of
/// the configured range where a rectangle of the drawn area fits.
pub fn erase(img: &mut Image, cfg: &RandomErasing, rng: &mut Rng) -> Option<Rect> {
    if rng.random::<f64>() >= cfg.prob {
        return None;
    }
    let (h, w) = (img.height as f64, img.width as f64);
    let total = h * w;
    for _ in 0..10 {
        let target = rng.random_range(cfg.area[0]..=cfg.area[1]) * total;
        let lo = cfg.aspect[0].max(target / (w * w)).ln();
        let hi = cfg.aspect[1].min(h * h / target).ln();
        if lo > hi {
            continue;
        }
        let ar = rng.random_range(lo..=hi).exp();
        let eh = ((target * ar).sqrt().round() as usize).clamp(1, img.height);
        let ew = ((target / ar).sqrt().round() as usize).clamp(1, img.width);
        let frac = (eh * ew) as f64 / total;
        if frac < cfg.area[0] || frac > cfg.area[1] {
            continue;
        }
        let top = rng.random_range(0..=img.height - eh);
        let left = rng.random_range(0..=img.width - ew);
        let mean = img.mean_rgb();
        for c in 0..3 {
            for y in top..top + eh {
                for x in left..left + ew {
                    let v = match cfg.fill {
                        EraseFill::Random => rng.random::<f32>(),
                        EraseFill::Mean => mean[c],
                        EraseFill::Zero => 0.0,
                    };
                    img.set(c, y, x, v);
                }
            }
        }
        return Some((top, left, eh, ew));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn recipes_nest() {
        let sets: Vec<_> = [Recipe::I, Recipe::II, Recipe::III]
            .map(|r| AugPolicy::recipe(r).op_set())
            .into();
        assert!(sets[0].is_subset(&sets[1]) && sets[0] != sets[1]);
        assert!(sets[1].is_subset(&sets[2]) && sets[1] != sets[2]);
    }

    #[test]
    fn identity_policy_returns_input() {
        let mut rng = stream(0, Stream::Augment, &[]);
        let mut img = Image::filled(16, 16, [0.1, 0.2, 0.3]);
        img.set(1, 3, 5, 0.9);
        for r in [Recipe::I, Recipe::II, Recipe::III] {
            let out = apply_sample_augs(&img, &AugPolicy::identity(r, 16), &mut rng);
            assert_eq!(out, img);
        }
    }

    #[test]
    fn defaults_validate() {
        for r in [Recipe::I, Recipe::II, Recipe::III] {
            AugPolicy::recipe(r).validate().unwrap();
        }
        let mut p = AugPolicy::recipe(Recipe::III);
        p.flip_prob = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn output_has_crop_size() {
        let mut rng = stream(4, Stream::Augment, &[]);
        let mut p = AugPolicy::recipe(Recipe::III);
        p.resize = 40;
        p.crop_size = 32;
        let out = apply_sample_augs(&Image::filled(50, 60, [0.5; 3]), &p, &mut rng);
        assert_eq!((out.height, out.width), (32, 32));
    }
}

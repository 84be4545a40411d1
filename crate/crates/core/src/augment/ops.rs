//! Per-image photometric and geometric operations on `[0, 1]` images.

use crate::img::Image;

/// Inverse-mapped affine warp about the image centre. `inv` maps an output
/// pixel offset `(dx, dy)` from the centre to an input offset:
/// `x' = a*dx + b*dy + c`, `y' = d*dx + e*dy + f`. Pixels mapped outside the
/// source take the per-channel image mean.
pub fn affine(img: &Image, inv: [f32; 6]) -> Image {
    let [a, b, c, d, e, f] = inv;
    let fill = img.mean_rgb();
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let sx = a * dx + b * dy + c + cx;
            let sy = d * dx + e * dy + f + cy;
            for ch in 0..3 {
                let v = img.sample(ch, sy, sx).unwrap_or(fill[ch]);
                out.set(ch, y, x, v);
            }
        }
    }
    out.clamp();
    out
}

/// Rotate by `degrees` about the centre.
pub fn rotate(img: &Image, degrees: f32) -> Image {
    let t = degrees.to_radians();
    let (s, c) = t.sin_cos();
    affine(img, [c, -s, 0.0, s, c, 0.0])
}

pub fn shear_x(img: &Image, factor: f32) -> Image {
    affine(img, [1.0, factor, 0.0, 0.0, 1.0, 0.0])
}

pub fn shear_y(img: &Image, factor: f32) -> Image {
    affine(img, [1.0, 0.0, 0.0, factor, 1.0, 0.0])
}

/// Shift content by `pixels` along x.
pub fn translate_x(img: &Image, pixels: f32) -> Image {
    affine(img, [1.0, 0.0, -pixels, 0.0, 1.0, 0.0])
}

pub fn translate_y(img: &Image, pixels: f32) -> Image {
    affine(img, [1.0, 0.0, 0.0, 0.0, 1.0, -pixels])
}

pub fn brightness(img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v *= factor;
    }
    out.clamp();
    out
}

/// Blend towards the mean grey level: `mean + factor * (v - mean)`.
pub fn contrast(img: &Image, factor: f32) -> Image {
    let [r, g, b] = img.mean_rgb();
    let grey = 0.299 * r + 0.587 * g + 0.114 * b;
    let mut out = img.clone();
    for v in &mut out.data {
        *v = grey + factor * (*v - grey);
    }
    out.clamp();
    out
}

/// Invert every value at or above `threshold`.
pub fn solarize(img: &Image, threshold: f32) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Keep the top `bits` bits of each 8-bit quantized value.
pub fn posterize(img: &Image, bits: u32) -> Image {
    let bits = bits.clamp(1, 8);
    let mask = !((1u16 << (8 - bits)) - 1) as u8;
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (to_u8(*v) & mask) as f32 / 255.0;
    }
    out
}

/// Per-channel histogram equalization over 256 levels.
pub fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let ch = out.channel_mut(c);
        let mut hist = [0usize; 256];
        for &v in ch.iter() {
            hist[to_u8(v) as usize] += 1;
        }
        let n = ch.len();
        let nonzero: Vec<usize> = hist.iter().copied().filter(|&h| h > 0).collect();
        // A single-level channel has nothing to spread.
        if nonzero.len() <= 1 {
            continue;
        }
        let last = *nonzero.last().unwrap();
        let step = (n - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut acc = step / 2;
        for (i, &h) in hist.iter().enumerate() {
            lut[i] = (acc / step).min(255) as u8;
            acc += h;
        }
        for v in ch.iter_mut() {
            *v = lut[to_u8(*v) as usize] as f32 / 255.0;
        }
    }
    out
}

/// Per-channel linear stretch of `[min, max]` to `[0, 1]`.
pub fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let ch = out.channel_mut(c);
        let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            for v in ch.iter_mut() {
                *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

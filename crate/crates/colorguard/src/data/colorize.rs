//! Deterministic pseudo-colorizers.
//!
//! These are desk-scale stand-ins for deep colorization networks: they keep the
//! luminance structure of the input intact and synthetically regenerate the
//! chrominance channels, leaving the kind of chroma damage (quantized palettes,
//! smoothed chroma, shifted hues) that colorization detectors key on. They are
//! stand-ins, not reimplementations of any published colorization method.

use image::{DynamicImage, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::seeds;

/// Joint chroma bin count used by [`ColorizerMethod::PaletteQuant`].
pub const PALETTE_BINS: usize = 8;

const KMEANS_ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ColorizerMethod {
    /// Snap every pixel's chroma pair to one of [`PALETTE_BINS`] centroids.
    PaletteQuant,
    /// Low-pass the chroma planes, erasing high-frequency chroma detail.
    ChromaBlur,
    /// Rotate the chroma plane around neutral and rescale saturation.
    HueRemap,
}

impl ColorizerMethod {
    pub const ALL: [ColorizerMethod; 3] = [
        ColorizerMethod::PaletteQuant,
        ColorizerMethod::ChromaBlur,
        ColorizerMethod::HueRemap,
    ];

    /// Identifier used as `colorizer_id` in manifests and as directory name
    /// in generated corpora.
    pub fn id(self) -> &'static str {
        match self {
            ColorizerMethod::PaletteQuant => "palette_quant",
            ColorizerMethod::ChromaBlur => "chroma_blur",
            ColorizerMethod::HueRemap => "hue_remap",
        }
    }

    fn stream(self) -> u64 {
        match self {
            ColorizerMethod::PaletteQuant => 0x71,
            ColorizerMethod::ChromaBlur => 0x72,
            ColorizerMethod::HueRemap => 0x73,
        }
    }
}

/// BT.601 full-range luma; identical to the `gray()` notion used by the
/// luminance-preservation contract.
pub(crate) fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_chroma(r: f64, g: f64, b: f64) -> (f64, f64) {
    let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    (cb, cr)
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    (r, g, b)
}

fn clamp_round(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Reconstructs an RGB pixel from target luma plus new chroma. When the naive
/// reconstruction leaves gamut, the pixel is shifted along the gray axis until
/// its luma matches the target again (monotone, so a bisection suffices); the
/// chroma gives way, the luminance never does.
fn reconstruct_with_luma(y: f64, cb: f64, cr: f64) -> [u8; 3] {
    let (r, g, b) = ycbcr_to_rgb(y, cb, cr);
    let in_gamut = |v: f64| (-0.5..255.5).contains(&v);
    if in_gamut(r) && in_gamut(g) && in_gamut(b) {
        return [clamp_round(r), clamp_round(g), clamp_round(b)];
    }

    let luma_at = |shift: f64| {
        luma(
            (r + shift).clamp(0.0, 255.0),
            (g + shift).clamp(0.0, 255.0),
            (b + shift).clamp(0.0, 255.0),
        )
    };
    let (mut lo, mut hi) = (-512.0f64, 512.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if luma_at(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let shift = 0.5 * (lo + hi);
    [
        clamp_round((r + shift).clamp(0.0, 255.0)),
        clamp_round((g + shift).clamp(0.0, 255.0)),
        clamp_round((b + shift).clamp(0.0, 255.0)),
    ]
}

/// Chroma planes extracted from an image, rounded to 8-bit.
struct ChromaPlanes {
    cb: Vec<u8>,
    cr: Vec<u8>,
}

fn extract_chroma(img: &RgbImage) -> ChromaPlanes {
    let n = (img.width() * img.height()) as usize;
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for p in img.pixels() {
        let (b_, r_) = rgb_to_chroma(p[0] as f64, p[1] as f64, p[2] as f64);
        cb.push(clamp_round(b_));
        cr.push(clamp_round(r_));
    }
    ChromaPlanes { cb, cr }
}

/// Quantizes the joint (cb, cr) distribution to at most [`PALETTE_BINS`]
/// centroids with a deterministic Lloyd iteration. The planes are smoothed
/// first so the output is flat posterized chroma regions rather than noisy
/// per-pixel snapping. Centroid seeds are unique chroma pairs picked at
/// seed-phased quantiles, so the palette adapts to the image while staying
/// reproducible.
fn quantize_palette(planes: &ChromaPlanes, w: usize, h: usize, seed: u64) -> ChromaPlanes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..1.0);
    let desat: f64 = rng.gen_range(0.4..0.6);

    let planes = &ChromaPlanes {
        cb: blur_plane(&planes.cb, w, h, 2),
        cr: blur_plane(&planes.cr, w, h, 2),
    };
    let scale_pair = |cb: f64, cr: f64| {
        (
            128.0 + desat * (cb - 128.0),
            128.0 + desat * (cr - 128.0),
        )
    };
    let pairs: Vec<(u8, u8)> = planes.cb.iter().copied().zip(planes.cr.iter().copied()).collect();
    let mut unique: Vec<(u8, u8)> = pairs.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() <= PALETTE_BINS {
        // Already at or below the palette size; just desaturate the smoothed
        // planes (a constant-chroma image passes through unchanged).
        let n = pairs.len();
        let mut cb = Vec::with_capacity(n);
        let mut cr = Vec::with_capacity(n);
        for &(pc, pr) in &pairs {
            let (sc, sr) = scale_pair(pc as f64, pr as f64);
            cb.push(clamp_round(sc));
            cr.push(clamp_round(sr));
        }
        return ChromaPlanes { cb, cr };
    }

    let mut centroids: Vec<(f64, f64)> = (0..PALETTE_BINS)
        .map(|i| {
            let q = (i as f64 + phase) / PALETTE_BINS as f64;
            let idx = ((q * unique.len() as f64) as usize).min(unique.len() - 1);
            (unique[idx].0 as f64, unique[idx].1 as f64)
        })
        .collect();

    let nearest = |centroids: &[(f64, f64)], p: (u8, u8)| -> usize {
        let (pc, pr) = (p.0 as f64, p.1 as f64);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, &(cc, cr_)) in centroids.iter().enumerate() {
            let d = (pc - cc) * (pc - cc) + (pr - cr_) * (pr - cr_);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    };

    for _ in 0..KMEANS_ITERATIONS {
        let mut sum = [(0.0f64, 0.0f64, 0usize); PALETTE_BINS];
        for &p in &pairs {
            let k = nearest(&centroids, p);
            sum[k].0 += p.0 as f64;
            sum[k].1 += p.1 as f64;
            sum[k].2 += 1;
        }
        for (k, &(sc, sr, count)) in sum.iter().enumerate() {
            if count > 0 {
                centroids[k] = (sc / count as f64, sr / count as f64);
            }
        }
    }

    // Palette entries pulled toward neutral: posterized and washed out.
    let palette: Vec<(u8, u8)> = centroids
        .iter()
        .map(|&(c, r)| {
            let (sc, sr) = scale_pair(c, r);
            (clamp_round(sc), clamp_round(sr))
        })
        .collect();

    let mut cb = Vec::with_capacity(pairs.len());
    let mut cr = Vec::with_capacity(pairs.len());
    for &p in &pairs {
        let k = nearest(&centroids, p);
        cb.push(palette[k].0);
        cr.push(palette[k].1);
    }
    ChromaPlanes { cb, cr }
}

/// One pass of a clamped-extent box blur along rows. Integer plane in, integer
/// plane out, so a constant plane survives untouched.
fn box_blur_rows(plane: &[u8], w: usize, h: usize, radius: usize) -> Vec<u8> {
    let mut out = vec![0u8; plane.len()];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            let sum: u32 = row[lo..=hi].iter().map(|&v| v as u32).sum();
            let len = (hi - lo + 1) as f64;
            out[y * w + x] = (sum as f64 / len).round() as u8;
        }
    }
    out
}

fn transpose(plane: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = vec![0u8; plane.len()];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = plane[y * w + x];
        }
    }
    out
}

/// Separable box blur run three times for a roughly Gaussian profile.
fn blur_plane(plane: &[u8], w: usize, h: usize, radius: usize) -> Vec<u8> {
    let mut cur = plane.to_vec();
    for _ in 0..3 {
        cur = box_blur_rows(&cur, w, h, radius);
        cur = transpose(&cur, w, h);
        cur = box_blur_rows(&cur, h, w, radius);
        cur = transpose(&cur, h, w);
    }
    cur
}

/// Low-pass plus a seeded pull toward neutral: smeared, washed-out chroma.
/// Zero-chroma planes pass through unchanged.
fn blur_chroma(planes: &ChromaPlanes, w: usize, h: usize, seed: u64) -> ChromaPlanes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = rng.gen_range(4..=9usize);
    let desat: f64 = rng.gen_range(0.35..0.55);
    let scale = |plane: Vec<u8>| {
        plane
            .into_iter()
            .map(|v| clamp_round(128.0 + desat * (v as f64 - 128.0)))
            .collect()
    };
    ChromaPlanes {
        cb: scale(blur_plane(&planes.cb, w, h, radius)),
        cr: scale(blur_plane(&planes.cr, w, h, radius)),
    }
}

/// Rotates every chroma offset around neutral by a seeded angle (at least 60
/// degrees away from identity) and desaturates. Neutral (gray) pixels carry
/// no chroma and pass through unchanged.
fn remap_hue(planes: &ChromaPlanes, seed: u64) -> ChromaPlanes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: f64 = rng.gen_range(60.0..300.0) * std::f64::consts::PI / 180.0;
    let scale: f64 = rng.gen_range(0.35..0.55);
    let (sin, cos) = theta.sin_cos();

    let n = planes.cb.len();
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for i in 0..n {
        let dc = planes.cb[i] as f64 - 128.0;
        let dr = planes.cr[i] as f64 - 128.0;
        cb.push(clamp_round(128.0 + scale * (cos * dc - sin * dr)));
        cr.push(clamp_round(128.0 + scale * (sin * dc + cos * dr)));
    }
    ChromaPlanes { cb, cr }
}

/// Regenerates the chrominance of a 3-channel image with the given method.
///
/// The output keeps the input's luminance structure (mean absolute gray-level
/// drift stays within a couple of intensity levels) while the chroma is
/// quantized, blurred, or remapped. Fully deterministic in `(method, seed)`;
/// pixels whose chroma the method leaves untouched are copied verbatim.
pub fn pseudo_colorize(
    image: &DynamicImage,
    method: ColorizerMethod,
    seed: u64,
) -> Result<RgbImage, DataError> {
    let rgb = match image {
        DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(DataError::UnsupportedChannelCount(format!(
                "{:?}",
                other.color()
            )))
        }
    };
    Ok(pseudo_colorize_rgb(rgb, method, seed))
}

/// [`pseudo_colorize`] for images already known to be RGB8.
pub fn pseudo_colorize_rgb(rgb: &RgbImage, method: ColorizerMethod, seed: u64) -> RgbImage {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let planes = extract_chroma(rgb);
    let stream_seed = seeds::derive(seed, method.stream());
    let new = match method {
        ColorizerMethod::PaletteQuant => quantize_palette(&planes, w, h, stream_seed),
        ColorizerMethod::ChromaBlur => blur_chroma(&planes, w, h, stream_seed),
        ColorizerMethod::HueRemap => remap_hue(&planes, stream_seed),
    };

    let mut out = RgbImage::new(rgb.width(), rgb.height());
    for (i, (src, dst)) in rgb.pixels().zip(out.pixels_mut()).enumerate() {
        if new.cb[i] == planes.cb[i] && new.cr[i] == planes.cr[i] {
            // Untouched chroma: keep the exact input pixel.
            *dst = *src;
            continue;
        }
        let y = luma(src[0] as f64, src[1] as f64, src[2] as f64);
        let [r, g, b] = reconstruct_with_luma(y, new.cb[i] as f64, new.cr[i] as f64);
        *dst = image::Rgb([r, g, b]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mean_luma_drift(a: &RgbImage, b: &RgbImage) -> f64 {
        let total: f64 = a
            .pixels()
            .zip(b.pixels())
            .map(|(pa, pb)| {
                (luma(pa[0] as f64, pa[1] as f64, pa[2] as f64)
                    - luma(pb[0] as f64, pb[1] as f64, pb[2] as f64))
                .abs()
            })
            .sum();
        total / (a.width() * a.height()) as f64
    }

    /// Brute-force count of distinct chroma pairs in an image, where "distinct"
    /// tolerates the ±2-level smear the 8-bit RGB round trip puts around each
    /// quantized value: pairs are greedily covered by frequency-ordered centers
    /// of Chebyshev radius `radius`, and the cover size is the count.
    fn chroma_pair_count(img: &RgbImage, radius: i32) -> usize {
        let mut counts: std::collections::HashMap<(i32, i32), usize> = std::collections::HashMap::new();
        for p in img.pixels() {
            let (cb, cr) = rgb_to_chroma(p[0] as f64, p[1] as f64, p[2] as f64);
            *counts.entry((cb.round() as i32, cr.round() as i32)).or_default() += 1;
        }
        let mut pairs: Vec<((i32, i32), usize)> = counts.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut centers: Vec<(i32, i32)> = Vec::new();
        for &(p, _) in &pairs {
            let covered = centers
                .iter()
                .any(|c| (p.0 - c.0).abs().max((p.1 - c.1).abs()) <= radius);
            if !covered {
                centers.push(p);
            }
        }
        centers.len()
    }

    /// Mid-tone textured fixture with rich per-pixel chroma variation.
    fn textured_fixture(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |x, y| {
            let base = 90.0 + 50.0 * ((x as f64 / 9.0).sin() * (y as f64 / 7.0).cos());
            let r = base + rng.gen_range(-25.0..25.0);
            let g = base + rng.gen_range(-25.0..25.0);
            let b = base + rng.gen_range(-25.0..25.0);
            image::Rgb([clamp_round(r), clamp_round(g), clamp_round(b)])
        })
    }

    #[test]
    fn chroma_blur_is_identity_on_uniform_gray() {
        let img = RgbImage::from_pixel(24, 16, image::Rgb([97, 97, 97]));
        let out = pseudo_colorize_rgb(&img, ColorizerMethod::ChromaBlur, 42);
        assert_eq!(img.as_raw(), out.as_raw());
    }

    #[test]
    fn palette_quant_limits_joint_chroma_bins() {
        let img = textured_fixture(48, 48, 9);
        assert!(
            chroma_pair_count(&img, 4) > PALETTE_BINS,
            "fixture must start with more chroma than the palette"
        );
        let out = pseudo_colorize_rgb(&img, ColorizerMethod::PaletteQuant, 3);
        let bins = chroma_pair_count(&out, 4);
        assert!(bins <= PALETTE_BINS, "got {bins} chroma bins");
    }

    #[test]
    fn palette_quant_is_identity_on_zero_chroma() {
        let img = RgbImage::from_pixel(10, 10, image::Rgb([97, 97, 97]));
        let out = pseudo_colorize_rgb(&img, ColorizerMethod::PaletteQuant, 0);
        assert_eq!(img.as_raw(), out.as_raw());
    }

    #[test]
    fn colorizers_are_deterministic_and_seed_sensitive() {
        let img = textured_fixture(32, 24, 11);
        for method in ColorizerMethod::ALL {
            let a = pseudo_colorize_rgb(&img, method, 7);
            let b = pseudo_colorize_rgb(&img, method, 7);
            let c = pseudo_colorize_rgb(&img, method, 8);
            assert_eq!(a.as_raw(), b.as_raw(), "{method:?} not deterministic");
            assert_ne!(a.as_raw(), c.as_raw(), "{method:?} ignores the seed");
        }
    }

    #[test]
    fn hue_remap_moves_chroma_but_not_luma() {
        let img = textured_fixture(32, 32, 5);
        let out = pseudo_colorize_rgb(&img, ColorizerMethod::HueRemap, 21);
        assert_ne!(img.as_raw(), out.as_raw());
        assert!(mean_luma_drift(&img, &out) <= 2.0);
    }

    #[test]
    fn rejects_non_rgb_inputs() {
        let gray = DynamicImage::ImageLuma8(image::GrayImage::new(4, 4));
        let err = pseudo_colorize(&gray, ColorizerMethod::ChromaBlur, 0).unwrap_err();
        assert!(matches!(err, DataError::UnsupportedChannelCount(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Luminance preservation holds for every method on arbitrary small
        /// images, including ones that force the gamut-restoring path.
        #[test]
        fn luminance_survives_any_input(seed in 0u64..10_000, w in 3u32..14, h in 3u32..14) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = RgbImage::from_fn(w, h, |_, _| {
                image::Rgb([rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()])
            });
            for method in ColorizerMethod::ALL {
                let out = pseudo_colorize_rgb(&img, method, seed);
                let drift = mean_luma_drift(&img, &out);
                prop_assert!(drift <= 2.0, "{method:?} drifted luma by {drift}");
            }
        }
    }
}

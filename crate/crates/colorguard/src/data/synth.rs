//! Procedural corpus generation for desk-scale runs.
//!
//! Natural-style images are smooth color fields with textured shapes, hues
//! drawn from a fixed set of camera-plausible bands, and per-pixel chroma
//! grain. The paired derivatives come from the pseudo-colorizers, which erase
//! or displace exactly those chroma statistics, so the two classes are
//! separable by construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_manifest, pseudo_colorize_rgb, ColorizerMethod, DataError, DatasetManifest};
use crate::seeds;

const IMAGE_SIZE: u32 = 96;

/// Hue bands (degrees) natural-style images draw from: backgrounds sit in a
/// warm band shared by the whole class, shapes add accents from all bands.
/// The hue-remap colorizer rotates chroma by at least 60 degrees, which
/// reliably leaves the background band.
const BACKGROUND_BAND: (f64, f64) = (12.0, 52.0);
const HUE_BANDS: [(f64, f64); 3] = [(15.0, 45.0), (95.0, 145.0), (200.0, 250.0)];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn band_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (lo, hi) = HUE_BANDS[rng.gen_range(0..HUE_BANDS.len())];
    let h = rng.gen_range(lo..hi);
    let s = rng.gen_range(0.5..0.85);
    let v = rng.gen_range(0.4..0.8);
    hsv_to_rgb(h, s, v)
}

fn background_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (lo, hi) = BACKGROUND_BAND;
    let h = rng.gen_range(lo..hi);
    let s = rng.gen_range(0.55..0.9);
    let v = rng.gen_range(0.4..0.8);
    hsv_to_rgb(h, s, v)
}

/// Renders one natural-style RGB image. Deterministic in `seed`.
pub fn synthesize_natural_image(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = IMAGE_SIZE as usize;

    // Smooth background: bilinear blend of four warm-band colors.
    let corners: [[f64; 3]; 4] = [
        background_color(&mut rng),
        background_color(&mut rng),
        background_color(&mut rng),
        background_color(&mut rng),
    ];
    let mut field = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        let fy = y as f64 / (size - 1) as f64;
        for x in 0..size {
            let fx = x as f64 / (size - 1) as f64;
            for c in 0..3 {
                field[y * size + x][c] = corners[0][c] * (1.0 - fx) * (1.0 - fy)
                    + corners[1][c] * fx * (1.0 - fy)
                    + corners[2][c] * (1.0 - fx) * fy
                    + corners[3][c] * fx * fy;
            }
        }
    }

    // Textured shapes: soft-edged ellipses with a striped luma modulation.
    let n_shapes = rng.gen_range(3..=6);
    for _ in 0..n_shapes {
        let color = band_color(&mut rng);
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let rx = rng.gen_range(8.0..30.0);
        let ry = rng.gen_range(8.0..30.0);
        let alpha = rng.gen_range(0.55..0.9);
        let stripe_freq = rng.gen_range(0.25..0.9);
        let stripe_dir = rng.gen_range(0.0..std::f64::consts::PI);
        let (sd_sin, sd_cos) = stripe_dir.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let d = dx * dx + dy * dy;
                if d >= 1.0 {
                    continue;
                }
                let edge = (1.0 - d).min(0.25) * 4.0;
                let stripes = 1.0 + 0.18 * ((x as f64 * sd_cos + y as f64 * sd_sin) * stripe_freq).sin();
                let a = alpha * edge;
                let px = &mut field[y * size + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * stripes * a;
                }
            }
        }
    }

    // Per-pixel grain: a small luma component plus a strong zero-luma chroma
    // component. The chroma part is what the pseudo-colorizers erase or
    // displace, so it carries the class signal; the luma part survives
    // colorization untouched.
    RgbImage::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| {
        let px = field[y as usize * size + x as usize];
        let dl: f64 = rng.gen_range(-10.0..10.0);
        let ncb: f64 = rng.gen_range(-18.0..18.0);
        let ncr: f64 = rng.gen_range(-18.0..18.0);
        let dr = dl + 1.402 * ncr;
        let dg = dl - 0.344136 * ncb - 0.714136 * ncr;
        let db = dl + 1.772 * ncb;
        image::Rgb([
            (px[0] + dr).round().clamp(0.0, 255.0) as u8,
            (px[1] + dg).round().clamp(0.0, 255.0) as u8,
            (px[2] + db).round().clamp(0.0, 255.0) as u8,
        ])
    })
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    img.save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `n_groups` natural images plus one derivative per pseudo-colorizer
/// under `out_dir` (`natural/`, `palette_quant/`, `chroma_blur/`, `hue_remap/`)
/// and returns the conforming 1:3 manifest. Record paths are stored relative
/// to `out_dir`, so the manifest file and the corpus can move together.
pub fn generate_synthetic_corpus(
    n_groups: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    generate_corpus_with_methods(n_groups, out_dir, seed, &ColorizerMethod::ALL)
}

/// [`generate_synthetic_corpus`] with an explicit colorizer subset. Corpora
/// built from fewer than three methods do not satisfy the 1:3 protocol and
/// come back flagged `ratio_free`; the generalization study uses this to
/// train on one colorizer family and test on another.
pub fn generate_corpus_with_methods(
    n_groups: usize,
    out_dir: &Path,
    seed: u64,
    methods: &[ColorizerMethod],
) -> Result<DatasetManifest, DataError> {
    if n_groups == 0 {
        return Err(DataError::InvalidArgument(
            "n_groups must be at least 1".into(),
        ));
    }
    if methods.is_empty() {
        return Err(DataError::InvalidArgument("no colorizer methods given".into()));
    }

    let natural_dir = out_dir.join("natural");
    fs::create_dir_all(&natural_dir).map_err(|e| DataError::Io {
        path: natural_dir.clone(),
        source: e,
    })?;
    let mut colorized_dirs: BTreeMap<String, PathBuf> = BTreeMap::new();
    for method in methods {
        let dir = out_dir.join(method.id());
        fs::create_dir_all(&dir).map_err(|e| DataError::Io {
            path: dir.clone(),
            source: e,
        })?;
        colorized_dirs.insert(method.id().to_string(), dir);
    }

    for i in 0..n_groups {
        let stem = format!("g{i:05}");
        let natural = synthesize_natural_image(seeds::derive(seed, i as u64 * 8));
        save_png(&natural, &natural_dir.join(format!("{stem}.png")))?;
        for (m_idx, method) in methods.iter().enumerate() {
            let derivative =
                pseudo_colorize_rgb(&natural, *method, seeds::derive(seed, i as u64 * 8 + 1 + m_idx as u64));
            save_png(&derivative, &colorized_dirs[method.id()].join(format!("{stem}.png")))?;
        }
    }

    let name = format!("synthetic-{n_groups}g");
    let mut manifest = build_manifest(&natural_dir, &colorized_dirs, &name, seed)?;
    for r in &mut manifest.records {
        if let Ok(rel) = r.image_path.strip_prefix(out_dir) {
            r.image_path = rel.to_path_buf();
        }
    }
    Ok(manifest.with_base_dir(out_dir))
}

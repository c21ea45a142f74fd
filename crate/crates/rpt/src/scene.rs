//! Procedural street-scene benchmark with a controllable appearance gap.
//!
//! Scenes follow a fixed vertical grammar: a sky band, a building zone whose
//! skyline varies per column (with vegetation patches strictly inside it),
//! and a road band with car rectangles strictly inside it. Reading any column
//! top to bottom therefore never moves "up" a zone: sky, then
//! building/vegetation, then road/car. Labels depend only on the structural
//! seed; palette, hue shift, texture, and noise only touch the image, so two
//! domains built from the same seed share identical label maps.
//!
//! Every scene ships with per-pixel features (Lab color plus normalized row
//! and column) that downstream clustering treats as frozen input.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::color::{rgb_to_lab, srgb_to_lab};
use crate::error::{Result, RptError};
use crate::tensor::{FeatureMap, Image, LabelMap, Tensor, IGNORE_LABEL};

pub const NUM_CLASSES: usize = 5;
pub const CLASS_ROAD: u8 = 0;
pub const CLASS_BUILDING: u8 = 1;
pub const CLASS_SKY: u8 = 2;
pub const CLASS_VEGETATION: u8 = 3;
pub const CLASS_CAR: u8 = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["road", "building", "sky", "vegetation", "car"];

/// Smallest scene the grammar can host while leaving every band non-trivial.
pub const MIN_SCENE_SIDE: usize = 32;

/// Feature channels the generator emits: Lab + normalized (row, col).
pub const FEATURE_DEPTH: usize = 5;

/// Appearance and identity of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    /// Base sRGB color per class, components in `[0, 1]`.
    pub palette: [[f64; 3]; NUM_CLASSES],
    /// Hue rotation (radians) applied to the final color.
    pub hue_shift: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Amplitude of the smooth procedural texture field.
    pub texture_amp: f64,
    /// Structural seed; layout and labels depend on this alone.
    pub seed: u64,
}

pub const BASE_PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.45, 0.45, 0.48], // road: asphalt gray
    [0.60, 0.42, 0.30], // building: brick
    [0.40, 0.62, 0.92], // sky
    [0.22, 0.55, 0.25], // vegetation
    [0.78, 0.16, 0.18], // car
];

impl DomainParams {
    pub fn source(seed: u64) -> DomainParams {
        DomainParams {
            palette: BASE_PALETTE,
            hue_shift: 0.0,
            noise_sigma: 0.02,
            texture_amp: 0.05,
            seed,
        }
    }

    /// Target appearance: rotated hues, stronger noise and texture. The
    /// rotation is large enough that color-driven decisions learned on the
    /// source palette misfire, while layout statistics stay identical.
    pub fn target(seed: u64) -> DomainParams {
        DomainParams {
            palette: BASE_PALETTE,
            hue_shift: 0.8,
            noise_sigma: 0.12,
            texture_amp: 0.12,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for rgb in &self.palette {
            for &c in rgb {
                if !c.is_finite() || !(0.0..=1.0).contains(&c) {
                    return Err(RptError::Invalid(format!(
                        "palette component {c} outside [0,1]"
                    )));
                }
            }
        }
        if !self.hue_shift.is_finite() {
            return Err(RptError::Invalid("hue_shift must be finite".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(RptError::Invalid("noise_sigma must be >= 0".into()));
        }
        if !self.texture_amp.is_finite() || self.texture_amp < 0.0 {
            return Err(RptError::Invalid("texture_amp must be >= 0".into()));
        }
        Ok(())
    }
}

/// One generated scene: image, labels (1-pixel ignore border), features.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelMap,
    pub features: FeatureMap,
}

/// Rotates an RGB vector around the gray axis by `angle` radians.
fn rotate_hue(r: f64, g: f64, b: f64, angle: f64) -> (f64, f64, f64) {
    // Rodrigues rotation about k = (1,1,1)/sqrt(3).
    let k = 1.0 / 3f64.sqrt();
    let cos = angle.cos();
    let sin = angle.sin();
    let dot = k * (r + g + b);
    // k x v
    let cx = k * (b - g);
    let cy = k * (r - b);
    let cz = k * (g - r);
    (
        r * cos + cx * sin + k * dot * (1.0 - cos),
        g * cos + cy * sin + k * dot * (1.0 - cos),
        b * cos + cz * sin + k * dot * (1.0 - cos),
    )
}

/// Standard normal via Box-Muller; consumes exactly two uniform draws.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Builds the class map (no ignore border yet).
fn build_structure(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<u8> {
    let h = height;
    let w = width;
    let sky_h = rng.gen_range(h / 4..=2 * h / 5);
    let road_top = rng.gen_range(13 * h / 20..=4 * h / 5);
    let min_depth = (h / 8).max(4); // guaranteed building depth under every column

    let mut skyline = vec![0usize; w];
    let mut x = 0;
    while x < w {
        let bw = rng.gen_range(w / 8..=w / 4).max(2);
        let top = rng.gen_range(sky_h..=road_top - min_depth);
        for c in x..(x + bw).min(w) {
            skyline[c] = top;
        }
        x += bw;
    }

    let mut class = vec![CLASS_ROAD; h * w];
    for r in 0..h {
        for c in 0..w {
            class[r * w + c] = if r < skyline[c] {
                CLASS_SKY
            } else if r < road_top {
                CLASS_BUILDING
            } else {
                CLASS_ROAD
            };
        }
    }

    // Vegetation patches live strictly inside the building zone: at least one
    // building row above and below, never touching sky or road.
    let n_veg = rng.gen_range(2..=4usize);
    let mut placed = 0;
    for _ in 0..40 {
        if placed >= n_veg {
            break;
        }
        let vw = rng.gen_range(3..=(w / 8).max(4));
        let vh = rng.gen_range(2..=(h / 10).max(3));
        if w < vw + 2 || road_top < vh + 2 {
            continue;
        }
        let c0 = rng.gen_range(1..w - 1 - vw);
        let r1 = road_top - 1; // exclusive end, keeps a building row below
        if r1 < vh + sky_h {
            continue;
        }
        let r0 = rng.gen_range(sky_h..=r1 - vh);
        let max_sky = (c0..c0 + vw).map(|c| skyline[c]).max().unwrap();
        if r0 <= max_sky {
            continue; // would touch or cross into sky
        }
        for r in r0..r0 + vh {
            for c in c0..c0 + vw {
                class[r * w + c] = CLASS_VEGETATION;
            }
        }
        placed += 1;
    }
    if placed == 0 {
        // Deterministic fallback: tuck a patch against the road boundary at
        // the column window with the lowest skyline.
        let vw = 4.min(w - 2);
        let c0 = (1..w - 1 - vw)
            .min_by_key(|&c| (c..c + vw).map(|cc| skyline[cc]).max().unwrap())
            .unwrap_or(1);
        let r1 = road_top - 1;
        let r0 = r1 - 2;
        for r in r0..r1 {
            for c in c0..c0 + vw {
                class[r * w + c] = CLASS_VEGETATION;
            }
        }
    }

    // Cars sit strictly inside the road band.
    let n_car = rng.gen_range(1..=3usize);
    for _ in 0..n_car {
        let cw = rng.gen_range(3..=(w / 8).max(4));
        let ch_max = ((h - road_top) / 3).max(2);
        let ch = rng.gen_range(2..=ch_max);
        if w < cw + 2 || h < road_top + ch + 3 {
            continue;
        }
        let c0 = rng.gen_range(1..w - 1 - cw);
        let r0 = rng.gen_range(road_top + 1..=h - 2 - ch);
        for r in r0..r0 + ch {
            for c in c0..c0 + cw {
                class[r * w + c] = CLASS_CAR;
            }
        }
    }

    class
}

/// Generates one scene. `height` and `width` must be at least
/// [`MIN_SCENE_SIDE`]; labels carry a 1-pixel ignore border.
pub fn gen_scene(params: &DomainParams, height: usize, width: usize) -> Result<Scene> {
    params.validate()?;
    if height < MIN_SCENE_SIDE || width < MIN_SCENE_SIDE {
        return Err(RptError::Invalid(format!(
            "scene must be at least {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE}, got {height}x{width}"
        )));
    }

    let mut structure_rng = ChaCha8Rng::seed_from_u64(params.seed);
    // Separate stream so appearance never perturbs the layout.
    let mut appearance_rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);

    let class = build_structure(&mut structure_rng, height, width);

    // Smooth two-component sinusoidal texture field.
    let mut waves = [[0.0f64; 3]; 2];
    for wave in waves.iter_mut() {
        wave[0] = appearance_rng.gen_range(1.0..4.0);
        wave[1] = appearance_rng.gen_range(1.0..4.0);
        wave[2] = appearance_rng.gen_range(0.0..std::f64::consts::TAU);
    }

    let mut image = vec![0.0f32; height * width * 3];
    for r in 0..height {
        for c in 0..width {
            let cls = class[r * width + c] as usize;
            let base = params.palette[cls];
            let mut field = 0.0;
            for wave in &waves {
                field += (std::f64::consts::TAU
                    * (wave[0] * c as f64 / width as f64 + wave[1] * r as f64 / height as f64)
                    + wave[2])
                    .sin();
            }
            field *= 0.5;
            let mut rgb = [0.0f64; 3];
            for (ch, v) in rgb.iter_mut().enumerate() {
                // Noise is always drawn so the stream stays aligned across
                // domains that differ only in sigma.
                let noise = gauss(&mut appearance_rng) * params.noise_sigma;
                *v = base[ch] + params.texture_amp * field + noise;
            }
            let (mut rr, mut gg, mut bb) = rotate_hue(rgb[0], rgb[1], rgb[2], params.hue_shift);
            rr = rr.clamp(0.0, 1.0);
            gg = gg.clamp(0.0, 1.0);
            bb = bb.clamp(0.0, 1.0);
            let idx = (r * width + c) * 3;
            image[idx] = rr as f32;
            image[idx + 1] = gg as f32;
            image[idx + 2] = bb as f32;
        }
    }
    let image = Image::new(height, width, 3, image)?;

    let mut labels = class;
    for c in 0..width {
        labels[c] = IGNORE_LABEL;
        labels[(height - 1) * width + c] = IGNORE_LABEL;
    }
    for r in 0..height {
        labels[r * width] = IGNORE_LABEL;
        labels[r * width + width - 1] = IGNORE_LABEL;
    }
    let labels = LabelMap::new(height, width, labels)?;

    let mut features = vec![0.0f32; height * width * FEATURE_DEPTH];
    for r in 0..height {
        for c in 0..width {
            let (l, a, b) = srgb_to_lab(
                image.get(r, c, 0) as f64,
                image.get(r, c, 1) as f64,
                image.get(r, c, 2) as f64,
            );
            let idx = (r * width + c) * FEATURE_DEPTH;
            features[idx] = l as f32;
            features[idx + 1] = a as f32;
            features[idx + 2] = b as f32;
            features[idx + 3] = ((r as f64 + 0.5) / height as f64) as f32;
            features[idx + 4] = ((c as f64 + 0.5) / width as f64) as f32;
        }
    }
    let features = FeatureMap::new(height, width, FEATURE_DEPTH, features)?;

    Ok(Scene {
        image,
        labels,
        features,
    })
}

/// Recomputes generator-style features from an arbitrary image.
pub fn features_from_image(image: &Image) -> Result<FeatureMap> {
    let lab = rgb_to_lab(image)?;
    let (h, w) = (image.height, image.width);
    let mut data = vec![0.0f32; h * w * FEATURE_DEPTH];
    for r in 0..h {
        for c in 0..w {
            let idx = (r * w + c) * FEATURE_DEPTH;
            data[idx] = lab.get(r, c, 0);
            data[idx + 1] = lab.get(r, c, 1);
            data[idx + 2] = lab.get(r, c, 2);
            data[idx + 3] = ((r as f64 + 0.5) / h as f64) as f32;
            data[idx + 4] = ((c as f64 + 0.5) / w as f64) as f32;
        }
    }
    FeatureMap::new(h, w, FEATURE_DEPTH, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One dataset row: which domain/split a scene belongs to and where its
/// tensors live. `eval_only` marks labels that exist purely for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub domain: Domain,
    pub split: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub feature_path: PathBuf,
    pub eval_only: bool,
}

/// Offset added to the base seed for target-domain scenes so the two domains
/// draw disjoint structural layouts.
pub const TARGET_SEED_OFFSET: u64 = 0x1000_0000;

/// Generates `n_src` source and `n_tgt` target training scenes plus a
/// manifest. Returns the manifest path.
pub fn gen_dataset(
    src: &DomainParams,
    tgt: &DomainParams,
    n_src: usize,
    n_tgt: usize,
    height: usize,
    width: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    if n_src == 0 || n_tgt == 0 {
        return Err(RptError::Invalid(
            "dataset needs at least one scene per domain".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| RptError::io(out_dir, e))?;

    let jobs: Vec<(Domain, usize, DomainParams)> = (0..n_src)
        .map(|i| {
            let mut p = src.clone();
            p.seed = src.seed.wrapping_add(i as u64);
            (Domain::Source, i, p)
        })
        .chain((0..n_tgt).map(|i| {
            let mut p = tgt.clone();
            p.seed = tgt.seed.wrapping_add(TARGET_SEED_OFFSET + i as u64);
            (Domain::Target, i, p)
        }))
        .collect();

    let scenes: Vec<(Domain, usize, Scene)> = jobs
        .par_iter()
        .map(|(domain, i, p)| gen_scene(p, height, width).map(|s| (*domain, *i, s)))
        .collect::<Result<_>>()?;

    let mut lines = Vec::new();
    for (domain, i, scene) in &scenes {
        let stem = format!("{domain}_train_{i:03}");
        let image_name = format!("{stem}_image.rptt");
        let label_name = format!("{stem}_labels.rptt");
        let feature_name = format!("{stem}_features.rptt");
        scene.image.to_tensor().write(&out_dir.join(&image_name))?;
        scene.labels.to_tensor().write(&out_dir.join(&label_name))?;
        scene
            .features
            .to_tensor()
            .write(&out_dir.join(&feature_name))?;
        let eval_only = *domain == Domain::Target;
        lines.push(format!(
            "{domain},train,{image_name},{label_name},{feature_name},{eval_only}"
        ));
    }
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, lines.join("\n") + "\n")
        .map_err(|e| RptError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Parses a manifest; tensor paths are resolved relative to its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| RptError::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(RptError::Format(format!(
                "manifest line {}: expected 6 comma-separated fields, got {}",
                lineno + 1,
                parts.len()
            )));
        }
        let domain = match parts[0] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => {
                return Err(RptError::Format(format!(
                    "manifest line {}: unknown domain {other:?}",
                    lineno + 1
                )))
            }
        };
        let eval_only = match parts[5] {
            "true" => true,
            "false" => false,
            other => {
                return Err(RptError::Format(format!(
                    "manifest line {}: eval_only must be true/false, got {other:?}",
                    lineno + 1
                )))
            }
        };
        entries.push(ManifestEntry {
            domain,
            split: parts[1].to_string(),
            image_path: dir.join(parts[2]),
            label_path: dir.join(parts[3]),
            feature_path: dir.join(parts[4]),
            eval_only,
        });
    }
    if entries.is_empty() {
        return Err(RptError::Format(format!(
            "manifest {} has no entries",
            path.display()
        )));
    }
    Ok(entries)
}

/// A manifest entry loaded into memory.
pub struct LoadedScene {
    pub entry: ManifestEntry,
    pub image: Image,
    pub labels: LabelMap,
    pub features: FeatureMap,
}

pub fn load_scene(entry: &ManifestEntry) -> Result<LoadedScene> {
    let image = Image::from_tensor(&Tensor::read(&entry.image_path)?)?;
    let labels = LabelMap::from_tensor(&Tensor::read(&entry.label_path)?)?;
    let features = FeatureMap::from_tensor(&Tensor::read(&entry.feature_path)?)?;
    if labels.height != image.height || labels.width != image.width {
        return Err(RptError::Invalid(format!(
            "labels {}x{} do not match image {}x{}",
            labels.height, labels.width, image.height, image.width
        )));
    }
    labels.validate_classes(NUM_CLASSES)?;
    Ok(LoadedScene {
        entry: entry.clone(),
        image,
        labels,
        features,
    })
}

/// Zone index used by the grammar checks: sky above buildings above road.
pub fn grammar_zone(class: u8) -> Option<u8> {
    match class {
        CLASS_SKY => Some(0),
        CLASS_BUILDING | CLASS_VEGETATION => Some(1),
        CLASS_ROAD | CLASS_CAR => Some(2),
        _ => None,
    }
}

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    split_indices, write_manifest, write_ppm, Dataset, ManifestRow, Provenance, SplitSpec,
    MANIFEST_FILE,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Knobs of the synthetic blob families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
    /// Half-width of the per-image background brightness jitter.
    pub brightness_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            noise: 0.05,
            brightness_jitter: 0.1,
        }
    }
}

struct ClassStyle {
    background_hue: f64,
    blob_hue: f64,
    blobs: usize,
    radius: f64,
}

impl ClassStyle {
    fn new(c: usize, k: usize) -> Self {
        let hue = c as f64 / k as f64;
        Self {
            background_hue: hue,
            blob_hue: (hue + 0.5).fract(),
            blobs: 1 + c % 3,
            radius: 0.12 + 0.05 * ((c / 3) % 3) as f64,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `k` classes of `per_class` RGB images of size `height×width`.
///
/// Each class has its own background colour, blob colour, blob count and
/// blob radius; blob placement, brightness and pixel noise vary per image.
/// Every image is drawn from its own stream derived from `(seed, class,
/// index)`.
pub fn make_synthetic(
    k: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "synthetic data needs at least 2 classes, got {k}"
        )));
    }
    if per_class == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidInput(
            "synthetic data needs per_class, height and width ≥ 1".into(),
        ));
    }
    let mut images = Vec::with_capacity(k * per_class);
    let mut labels = Vec::with_capacity(k * per_class);
    for c in 0..k {
        let style = ClassStyle::new(c, k);
        for i in 0..per_class {
            let mut rng = crate::rng::stream(seed, &[0x5e7d, c as u64, i as u64]);
            images.push(draw(&style, height, width, config, &mut rng)?);
            labels.push(c);
        }
    }
    let names = (0..k).map(|c| format!("class_{c:02}")).collect();
    Dataset::new(images, labels, names, Provenance::Synthetic)
}

fn draw<R: Rng>(
    style: &ClassStyle,
    h: usize,
    w: usize,
    config: &SynthConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let jitter = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let bg = hsv(
        style.background_hue + jitter(rng, 0.02),
        0.55,
        0.6 + jitter(rng, config.brightness_jitter),
    );
    let fg = hsv(style.blob_hue + jitter(rng, 0.02), 0.8, 0.9);
    let scale = h.min(w) as f64;
    let blobs: Vec<(f64, f64, f64)> = (0..style.blobs)
        .map(|_| {
            let r = style.radius * scale * rng.gen_range(0.8..=1.2);
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                r,
            )
        })
        .collect();
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = blobs
                .iter()
                .any(|&(by, bx, r)| (y as f64 + 0.5 - by).hypot(x as f64 + 0.5 - bx) <= r);
            let colour = if inside { fg } else { bg };
            for ch in 0..3 {
                let v = colour[ch] + jitter(rng, config.noise);
                data[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Writes `root/<class>/<nnnnn>.ppm` plus a manifest assigning every image
/// to a stratified split. Returns the manifest rows.
pub fn write_synthetic(ds: &Dataset, root: &Path, spec: &SplitSpec) -> Result<Vec<ManifestRow>> {
    let assignment = split_indices(ds, spec)?.assignment(ds.len());
    for name in ds.class_names() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rows = Vec::with_capacity(ds.len());
    for (i, (image, &label)) in ds.images().iter().zip(ds.labels()).enumerate() {
        let rel = format!("{}/{i:05}.ppm", ds.class_names()[label]);
        write_ppm(&root.join(&rel), image)?;
        rows.push(ManifestRow {
            path: rel,
            class_id: label,
            split: assignment[i],
        });
    }
    write_manifest(&root.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

//! Directory dataset readers.
//!
//! BCD layout: `A/`, `B/`, `label/`. SCD layout: `A/`, `B/`, `labelA/`,
//! `labelB/` and optionally `change/`; when `change/` is absent the change
//! mask is derived as `labelA != labelB`. Rasters are 8-bit PNG; label
//! masks are single-channel PNG. Split files are newline-delimited id
//! lists under `splits/<name>.txt`.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::BiTemporalSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetLayout {
    Bcd,
    Scd,
}

fn default_patch_size() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub layout: DatasetLayout,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    pub class_names: Vec<String>,
    /// Optional prep-policy filter: drop samples whose change ratio is
    /// below this fraction.
    #[serde(default)]
    pub min_change_ratio: Option<f64>,
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Config("dataset needs at least one class name".into()));
        }
        if self.patch_size % 32 != 0 {
            return Err(Error::NotDivisible {
                context: "dataset patch size",
                axis: "side",
                value: self.patch_size,
                by: 32,
            });
        }
        Ok(())
    }
}

fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let rgb: RgbImage = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let gray: GrayImage = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, pixel) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = pixel.0[0];
    }
    Ok(out)
}

fn check_size(context: &str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::Shape {
            context: context.to_string(),
            expected: vec![expected.0, expected.1],
            found: vec![found.0, found.1],
        });
    }
    Ok(())
}

fn check_labels(context: &str, mask: &Array2<u8>, num_classes: usize) -> Result<()> {
    for &v in mask.iter() {
        if v != super::IGNORE_LABEL && v as usize >= num_classes {
            return Err(Error::Data(format!(
                "{context}: label {v} >= num_classes {num_classes}"
            )));
        }
    }
    Ok(())
}

/// Ids of a split: `splits/<name>.txt` when present, otherwise every PNG
/// stem under `A/`, sorted.
pub fn list_ids(spec: &DatasetSpec, split: Option<&str>) -> Result<Vec<String>> {
    if let Some(name) = split {
        let path = spec.root.join("splits").join(format!("{name}.txt"));
        let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    let dir = spec.root.join("A");
    let mut ids = Vec::new();
    let entries = std::fs::read_dir(&dir).map_err(|_| Error::MissingFile(dir.clone()))?;
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Load one sample by id, validating sizes and label ranges.
pub fn load_sample(spec: &DatasetSpec, id: &str) -> Result<BiTemporalSample> {
    spec.validate()?;
    let file = |dir: &str| spec.root.join(dir).join(format!("{id}.png"));
    let x1 = read_rgb(&file("A"))?;
    let x2 = read_rgb(&file("B"))?;
    let hw1 = (x1.dim().1, x1.dim().2);
    check_size(&format!("sample {id}: raster B vs A"), hw1, (x2.dim().1, x2.dim().2))?;

    match spec.layout {
        DatasetLayout::Bcd => {
            let raw = read_mask(&file("label"))?;
            check_size(&format!("sample {id}: label vs raster"), hw1, raw.dim())?;
            let change = raw.mapv(|v| u8::from(v != 0));
            Ok(BiTemporalSample {
                id: id.to_string(),
                x1,
                x2,
                sem_t1: None,
                sem_t2: None,
                change,
            })
        }
        DatasetLayout::Scd => {
            let sem_a = read_mask(&file("labelA"))?;
            let sem_b = read_mask(&file("labelB"))?;
            check_size(&format!("sample {id}: labelA vs raster"), hw1, sem_a.dim())?;
            check_size(&format!("sample {id}: labelB vs raster"), hw1, sem_b.dim())?;
            check_labels(&format!("sample {id}: labelA"), &sem_a, spec.num_classes())?;
            check_labels(&format!("sample {id}: labelB"), &sem_b, spec.num_classes())?;
            let change_path = file("change");
            let change = if change_path.exists() {
                let raw = read_mask(&change_path)?;
                check_size(&format!("sample {id}: change vs raster"), hw1, raw.dim())?;
                raw.mapv(|v| u8::from(v != 0))
            } else {
                Array2::from_shape_fn(hw1, |(y, x)| u8::from(sem_a[[y, x]] != sem_b[[y, x]]))
            };
            Ok(BiTemporalSample {
                id: id.to_string(),
                x1,
                x2,
                sem_t1: Some(sem_a),
                sem_t2: Some(sem_b),
                change,
            })
        }
    }
}

fn write_rgb(path: &Path, raster: &Array3<f32>) -> Result<()> {
    let (_, h, w) = raster.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (raster[[0, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (raster[[1, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (raster[[2, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

fn write_mask(path: &Path, mask: &Array2<u8>, scale_binary: bool) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = mask[[y, x]];
            let v = if scale_binary && v == 1 { 255 } else { v };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write one sample into an SCD directory layout under `root`.
pub fn write_sample_png(root: &Path, sample: &BiTemporalSample) -> Result<()> {
    for dir in ["A", "B", "labelA", "labelB", "change"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    let name = format!("{}.png", sample.id);
    write_rgb(&root.join("A").join(&name), &sample.x1)?;
    write_rgb(&root.join("B").join(&name), &sample.x2)?;
    let sem_a = sample
        .sem_t1
        .as_ref()
        .ok_or_else(|| Error::Data("SCD export needs semantic masks".into()))?;
    let sem_b = sample
        .sem_t2
        .as_ref()
        .ok_or_else(|| Error::Data("SCD export needs semantic masks".into()))?;
    write_mask(&root.join("labelA").join(&name), sem_a, false)?;
    write_mask(&root.join("labelB").join(&name), sem_b, false)?;
    write_mask(&root.join("change").join(&name), &sample.change, true)?;
    Ok(())
}

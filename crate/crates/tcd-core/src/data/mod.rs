//! Datasets: bi-temporal sample type, directory readers, the seeded
//! synthetic generator and crop augmentation.

mod loader;
mod synth;


pub use loader::{list_ids, load_sample, write_sample_png, DatasetLayout, DatasetSpec};
pub use synth::{synth_pair, SynthSpec};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar};

/// Ignore label for unlabelled pixels in semantic masks.
pub const IGNORE_LABEL: u8 = 255;

/// One co-registered image pair with its ground truth.
#[derive(Debug, Clone)]
pub struct BiTemporalSample {
    pub id: String,
    /// `[C, H, W]`, values in `[0, 1]`.
    pub x1: Array3<f32>,
    pub x2: Array3<f32>,
    /// Per-phase semantic masks (SCD layouts and the synthetic generator).
    pub sem_t1: Option<Array2<u8>>,
    pub sem_t2: Option<Array2<u8>>,
    /// Binary change mask, values 0/1.
    pub change: Array2<u8>,
}

impl BiTemporalSample {
    pub fn height(&self) -> usize {
        self.x1.dim().1
    }

    pub fn width(&self) -> usize {
        self.x1.dim().2
    }

    /// Fraction of changed pixels in the ground-truth change mask.
    pub fn change_ratio(&self) -> f64 {
        let total = self.change.len();
        if total == 0 {
            return 0.0;
        }
        self.change.iter().filter(|&&v| v != 0).count() as f64 / total as f64
    }
}

/// Identical crop window applied to both rasters and all masks.
pub fn crop_augment(sample: &BiTemporalSample, out_size: usize, seed: u64) -> Result<BiTemporalSample> {
    let (h, w) = (sample.height(), sample.width());
    if out_size > h || out_size > w {
        return Err(Error::Config(format!(
            "crop size {out_size} exceeds canvas {h}x{w}"
        )));
    }
    if out_size % 32 != 0 {
        return Err(Error::NotDivisible {
            context: "crop size",
            axis: "side",
            value: out_size,
            by: 32,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let y0 = rng.gen_range(0..=h - out_size);
    let x0 = rng.gen_range(0..=w - out_size);
    let crop3 = |a: &Array3<f32>| {
        a.slice(ndarray::s![.., y0..y0 + out_size, x0..x0 + out_size])
            .to_owned()
    };
    let crop2 = |a: &Array2<u8>| {
        a.slice(ndarray::s![y0..y0 + out_size, x0..x0 + out_size])
            .to_owned()
    };
    Ok(BiTemporalSample {
        id: sample.id.clone(),
        x1: crop3(&sample.x1),
        x2: crop3(&sample.x2),
        sem_t1: sample.sem_t1.as_ref().map(crop2),
        sem_t2: sample.sem_t2.as_ref().map(crop2),
        change: crop2(&sample.change),
    })
}

/// Stacked model inputs and targets for one batch.
pub struct Batch<T> {
    pub x1: ArrayD<T>,
    pub x2: ArrayD<T>,
    pub change: Array3<u8>,
    pub sem_t1: Option<Array3<u8>>,
    pub sem_t2: Option<Array3<u8>>,
    pub change_masks: Vec<Array2<u8>>,
    pub ids: Vec<String>,
}

/// Stack samples (all of identical size) into batch tensors.
pub fn stack_batch<T: Scalar>(samples: &[&BiTemporalSample]) -> Result<Batch<T>> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (c, h, w) = samples[0].x1.dim();
    for sample in samples {
        if sample.x1.dim() != (c, h, w) {
            return Err(Error::Shape {
                context: format!("batch sample {}", sample.id),
                expected: vec![c, h, w],
                found: {
                    let d = sample.x1.dim();
                    vec![d.0, d.1, d.2]
                },
            });
        }
    }
    let b = samples.len();
    let mut x1 = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
    let mut x2 = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
    let mut change = Array3::<u8>::zeros((b, h, w));
    let has_sem = samples.iter().all(|s| s.sem_t1.is_some() && s.sem_t2.is_some());
    let mut sem_t1 = has_sem.then(|| Array3::<u8>::zeros((b, h, w)));
    let mut sem_t2 = has_sem.then(|| Array3::<u8>::zeros((b, h, w)));
    for (i, sample) in samples.iter().enumerate() {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    x1[[i, ci, y, x]] = s::<T>(sample.x1[[ci, y, x]] as f64);
                    x2[[i, ci, y, x]] = s::<T>(sample.x2[[ci, y, x]] as f64);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                change[[i, y, x]] = sample.change[[y, x]];
                if let (Some(s1), Some(s2)) = (&mut sem_t1, &mut sem_t2) {
                    s1[[i, y, x]] = sample.sem_t1.as_ref().unwrap()[[y, x]];
                    s2[[i, y, x]] = sample.sem_t2.as_ref().unwrap()[[y, x]];
                }
            }
        }
    }
    Ok(Batch {
        x1,
        x2,
        change,
        sem_t1,
        sem_t2,
        change_masks: samples.iter().map(|s| s.change.clone()).collect(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// In-memory dataset: either loaded from a directory layout or generated.
pub struct Dataset {
    pub samples: Vec<BiTemporalSample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Generate `count` synthetic samples indexed from `index_offset`.
    pub fn synthetic(spec: &SynthSpec, count: usize, index_offset: u64) -> Result<Self> {
        let samples = (0..count)
            .map(|i| synth_pair(spec, index_offset + i as u64))
            .collect::<Result<Vec<_>>>()?;
        let class_names = (0..spec.num_classes).map(|c| format!("class{c}")).collect();
        Ok(Self {
            samples,
            class_names,
        })
    }

    /// Load every id of a split from a directory layout.
    pub fn from_directory(spec: &DatasetSpec, split: Option<&str>) -> Result<Self> {
        let ids = list_ids(spec, split)?;
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            let sample = load_sample(spec, &id)?;
            if let Some(min_ratio) = spec.min_change_ratio {
                if sample.change_ratio() < min_ratio {
                    continue;
                }
            }
            samples.push(sample);
        }
        Ok(Self {
            samples,
            class_names: spec.class_names.clone(),
        })
    }
}

/// Synthetic dataset description, serialized inside run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDataConfig {
    pub canvas: (usize, usize),
    pub num_classes: usize,
    pub change_ratio_target: f64,
    #[serde(default)]
    pub shapes: Option<Vec<String>>,
    #[serde(default = "default_noise")]
    pub pseudo_change_noise: f64,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
}

fn default_noise() -> f64 {
    0.05
}

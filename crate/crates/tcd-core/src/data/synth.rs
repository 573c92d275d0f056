//! Seeded synthetic bi-temporal scenes: colored class regions, true class
//! transitions in phase 2, and a global intensity jitter that must not be
//! detected as change.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::BiTemporalSample;

/// Region shapes the generator may draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangles,
    Blobs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub canvas: (usize, usize),
    pub num_classes: usize,
    /// Desired fraction of changed pixels; the realized fraction must land
    /// within ±20% (relative) or generation retries.
    pub change_ratio_target: f64,
    pub shapes: Vec<ShapeKind>,
    /// Magnitude of the global phase-2 intensity jitter.
    pub pseudo_change_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic scenes need at least 2 classes".into()));
        }
        if !(0.0..=1.0).contains(&self.change_ratio_target) {
            return Err(Error::Config(format!(
                "change_ratio_target {} outside [0, 1]",
                self.change_ratio_target
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("at least one shape kind required".into()));
        }
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return Err(Error::Config("empty canvas".into()));
        }
        Ok(())
    }
}

/// Fixed, well-separated palette color for a class index.
pub fn class_color(class: usize) -> [f32; 3] {
    // golden-angle hue walk, fixed saturation/value
    let hue = (class as f64 * 0.618_033_988_749_895) % 1.0;
    let (h, s, v) = (hue * 6.0, 0.65, 0.85);
    let i = h.floor() as i64;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn draw_region(
    rng: &mut ChaCha20Rng,
    sem: &mut Array2<u8>,
    shapes: &[ShapeKind],
    target_area: usize,
    value: impl Fn(u8) -> u8,
) {
    let (h, w) = sem.dim();
    let shape = shapes[rng.gen_range(0..shapes.len())];
    let side = ((target_area as f64).sqrt().round() as usize).clamp(2, h.min(w));
    let rh = rng.gen_range((side / 2).max(1)..=(side * 3 / 2).min(h));
    let rw = (target_area / rh.max(1)).clamp(1, w);
    let y0 = rng.gen_range(0..=h - rh);
    let x0 = rng.gen_range(0..=w - rw);
    match shape {
        ShapeKind::Rectangles => {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    sem[[y, x]] = value(sem[[y, x]]);
                }
            }
        }
        ShapeKind::Blobs => {
            let (cy, cx) = (y0 as f64 + rh as f64 / 2.0, x0 as f64 + rw as f64 / 2.0);
            let (ay, ax) = (rh as f64 / 2.0, rw as f64 / 2.0);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    let dy = (y as f64 + 0.5 - cy) / ay.max(0.5);
                    let dx = (x as f64 + 0.5 - cx) / ax.max(0.5);
                    if dy * dy + dx * dx <= 1.0 {
                        sem[[y, x]] = value(sem[[y, x]]);
                    }
                }
            }
        }
    }
}

fn rng_for(spec: &SynthSpec, index: u64, attempt: u64) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(spec.seed.to_le_bytes());
    hasher.update(index.to_le_bytes());
    hasher.update(attempt.to_le_bytes());
    let digest = hasher.finalize();
    ChaCha20Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

/// Generate the sample at `index`; a pure function of `(spec, index)`.
pub fn synth_pair(spec: &SynthSpec, index: u64) -> Result<BiTemporalSample> {
    spec.validate()?;
    let (h, w) = spec.canvas;
    let total = (h * w) as f64;
    let target = spec.change_ratio_target;

    for attempt in 0..100u64 {
        let mut rng = rng_for(spec, index, attempt);

        // phase-1 scene
        let mut sem_a = Array2::<u8>::zeros((h, w));
        let regions = rng.gen_range(4..=9);
        for _ in 0..regions {
            let area = rng.gen_range(total as usize / 32..=total as usize / 6);
            let class = rng.gen_range(1..spec.num_classes) as u8;
            draw_region(&mut rng, &mut sem_a, &spec.shapes, area, |_| class);
        }

        // phase-2: mutate class regions until the realized ratio fits
        let mut sem_b = sem_a.clone();
        if target > 0.0 {
            let k = spec.num_classes as u8;
            let mut guard = 0;
            loop {
                let changed = sem_a
                    .iter()
                    .zip(sem_b.iter())
                    .filter(|(a, b)| a != b)
                    .count() as f64
                    / total;
                if changed >= 0.8 * target || guard > 200 {
                    break;
                }
                let remaining = ((target - changed) * total) as usize;
                let area = remaining.clamp(4, (total * 0.2) as usize);
                let delta = rng.gen_range(1..spec.num_classes) as u8;
                draw_region(&mut rng, &mut sem_b, &spec.shapes, area, |v| (v + delta) % k);
                guard += 1;
            }
        }
        let change = Array2::from_shape_fn((h, w), |(y, x)| u8::from(sem_a[[y, x]] != sem_b[[y, x]]));
        let realized = change.iter().filter(|&&v| v != 0).count() as f64 / total;
        let ok = if target == 0.0 {
            realized == 0.0
        } else {
            (0.8 * target..=1.2 * target).contains(&realized)
        };
        if !ok {
            continue;
        }

        // rasters: palette + per-pixel texture noise; phase 2 gets a global
        // intensity jitter that leaves the labels untouched
        let mut x1 = Array3::<f32>::zeros((3, h, w));
        let mut x2 = Array3::<f32>::zeros((3, h, w));
        let noise_scale = 0.02f32;
        let gamma = 1.0 + (rng.gen_range(-1.0..1.0) * spec.pseudo_change_noise) as f32;
        let beta = (rng.gen_range(-1.0..1.0) * spec.pseudo_change_noise * 0.5) as f32;
        for y in 0..h {
            for x in 0..w {
                let texture = rng.gen_range(-1.0f32..1.0) * noise_scale;
                let ca = class_color(sem_a[[y, x]] as usize);
                let cb = class_color(sem_b[[y, x]] as usize);
                for ch in 0..3 {
                    x1[[ch, y, x]] = (ca[ch] + texture).clamp(0.0, 1.0);
                    x2[[ch, y, x]] = ((cb[ch] + texture) * gamma + beta).clamp(0.0, 1.0);
                }
            }
        }

        return Ok(BiTemporalSample {
            id: format!("synth{index:05}"),
            x1,
            x2,
            sem_t1: Some(sem_a),
            sem_t2: Some(sem_b),
            change,
        });
    }
    Err(Error::Data(format!(
        "could not reach change ratio {target} within 100 attempts (sample {index})"
    )))
}

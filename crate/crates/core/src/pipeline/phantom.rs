//! Procedural grayscale "radiograph" phantoms.
//!
//! Every image has a smooth random background (base level plus a few long-wave
//! cosines) and pixel noise. The class decides which lesions are drawn on top:
//!
//! | class | nodules | streaks |
//! |-------|---------|---------|
//! | 0     | 0       | 0       |
//! | 1     | 1       | 0       |
//! | 2     | 0       | 1       |
//! | 3     | 1       | 1       |
//! | 4     | 2       | 0       |
//! | 5     | 0       | 2       |
//! | 6     | 2       | 1       |
//! | 7     | 1       | 1 (faint) |
//!
//! Sample `i` has label `i mod k` and draws from its own stream keyed by
//! `(seed, i)`, so generation is order independent.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{sample_rng, PipelineError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Clear,
    Nodule,
    Streak,
    NoduleAndStreak,
    MultiNodule,
    MultiStreak,
    Mixed,
    Faint,
}

impl ShapeKind {
    fn of(label: usize) -> Self {
        use ShapeKind::*;
        [Clear, Nodule, Streak, NoduleAndStreak, MultiNodule, MultiStreak, Mixed, Faint][label]
    }

    /// `(nodules, streaks, contrast)`.
    fn recipe(self) -> (usize, usize, f64) {
        match self {
            ShapeKind::Clear => (0, 0, 0.0),
            ShapeKind::Nodule => (1, 0, 1.0),
            ShapeKind::Streak => (0, 1, 1.0),
            ShapeKind::NoduleAndStreak => (1, 1, 1.0),
            ShapeKind::MultiNodule => (2, 0, 1.0),
            ShapeKind::MultiStreak => (0, 2, 1.0),
            ShapeKind::Mixed => (2, 1, 1.0),
            ShapeKind::Faint => (1, 1, 0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomMeta {
    pub kind: ShapeKind,
    /// Centre `(row, col)` of the first lesion, if any.
    pub position: Option<(f64, f64)>,
    /// Characteristic size in pixels of the first lesion (radius or half-length).
    pub size: Option<f64>,
    pub seed: u64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    /// `1×h×w`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub meta: PhantomMeta,
}

const NODULE_GAIN: f64 = 0.35;
const STREAK_GAIN: f64 = 0.3;
const NOISE_SD: f64 = 0.03;

/// `n` balanced samples over `num_classes` classes (2 to 8).
pub fn gen_phantom_dataset(
    n: usize,
    num_classes: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<PhantomSample>, PipelineError> {
    if !(2..=8).contains(&num_classes) {
        return Err(PipelineError::Config(format!("num_classes must be in 2..=8, got {num_classes}")));
    }
    if h < 4 || w < 4 {
        return Err(PipelineError::Config(format!("image size {h}x{w} below 4x4")));
    }
    super::worker_pool().install(|| {
        (0..n).into_par_iter().map(|i| phantom(i, i % num_classes, h, w, seed)).collect()
    })
}

fn phantom(index: usize, label: usize, h: usize, w: usize, seed: u64) -> Result<PhantomSample, PipelineError> {
    let mut rng = sample_rng(seed, &[index as u64]);
    let kind = ShapeKind::of(label);
    let scale = h.min(w) as f64;
    let mut px = vec![0.0; h * w];

    let base = rng.gen_range(0.2..0.45);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.5..1.5) * std::f64::consts::TAU / scale;
            (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.02..0.06))
        })
        .collect();
    for i in 0..h {
        for j in 0..w {
            px[i * w + j] = base
                + waves.iter().map(|&(fy, fx, ph, amp)| amp * (fy * i as f64 + fx * j as f64 + ph).cos()).sum::<f64>();
        }
    }

    let (nodules, streaks, contrast) = kind.recipe();
    let mut first: Option<((f64, f64), f64)> = None;
    let margin = 0.2 * scale;
    for _ in 0..nodules {
        let cy = rng.gen_range(margin..h as f64 - margin);
        let cx = rng.gen_range(margin..w as f64 - margin);
        let ry = rng.gen_range(0.08..0.15) * scale;
        let rx = ry * rng.gen_range(0.7..1.3);
        let gain = NODULE_GAIN * contrast * rng.gen_range(0.8..1.2);
        for i in 0..h {
            for j in 0..w {
                let r2 = ((i as f64 + 0.5 - cy) / ry).powi(2) + ((j as f64 + 0.5 - cx) / rx).powi(2);
                // Soft-edged disc: flat core, smooth fall-off over the outer 30%.
                let v = ((1.3 - r2.sqrt()) / 0.6).clamp(0.0, 1.0);
                px[i * w + j] += gain * v * v * (3.0 - 2.0 * v);
            }
        }
        first.get_or_insert(((cy, cx), ry));
    }
    for _ in 0..streaks {
        let cy = rng.gen_range(margin..h as f64 - margin);
        let cx = rng.gen_range(margin..w as f64 - margin);
        let half = rng.gen_range(0.25..0.4) * scale;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (dy, dx) = (theta.sin(), theta.cos());
        let width = rng.gen_range(0.03..0.05) * scale;
        let gain = STREAK_GAIN * contrast * rng.gen_range(0.8..1.2);
        for i in 0..h {
            for j in 0..w {
                let (py, pxx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                let along = (py * dy + pxx * dx).clamp(-half, half);
                let dist = ((py - along * dy).powi(2) + (pxx - along * dx).powi(2)).sqrt();
                px[i * w + j] += gain * (-(dist * dist) / (2.0 * width * width)).exp();
            }
        }
        first.get_or_insert(((cy, cx), half));
    }

    let noise = Normal::new(0.0, NOISE_SD).expect("positive sd");
    px.iter_mut().for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    Ok(PhantomSample {
        image: Tensor::from_vec(vec![1, h, w], px)?,
        label,
        meta: PhantomMeta { kind, position: first.map(|f| f.0), size: first.map(|f| f.1), seed, index },
    })
}

/// Stack `1×h×w` images into an `N×1×h×w` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor, PipelineError> {
    let items: Vec<Tensor> = images.into_iter().cloned().collect();
    Ok(Tensor::stack(&items)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_in_range() {
        let ds = gen_phantom_dataset(100, 4, 32, 32, 1).unwrap();
        for c in 0..4 {
            assert_eq!(ds.iter().filter(|s| s.label == c).count(), 25);
        }
        assert!(ds.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(ds.iter().all(|s| s.meta.kind == ShapeKind::of(s.label)));
        assert!(ds.iter().filter(|s| s.label == 0).all(|s| s.meta.position.is_none()));
    }

    #[test]
    fn reproducible() {
        assert_eq!(gen_phantom_dataset(12, 8, 16, 20, 3).unwrap(), gen_phantom_dataset(12, 8, 16, 20, 3).unwrap());
        assert_ne!(gen_phantom_dataset(4, 2, 16, 16, 3).unwrap(), gen_phantom_dataset(4, 2, 16, 16, 4).unwrap());
    }

    #[test]
    fn nodules_raise_mean_intensity() {
        let ds = gen_phantom_dataset(2000, 2, 32, 32, 7).unwrap();
        let mean = |c: usize| {
            let v: Vec<f64> = ds.iter().filter(|s| s.label == c).map(|s| s.image.sum() / s.image.numel() as f64).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1) > mean(0));
    }

    #[test]
    fn class_count_bounds() {
        assert!(gen_phantom_dataset(4, 1, 32, 32, 0).is_err());
        assert!(gen_phantom_dataset(4, 9, 32, 32, 0).is_err());
    }
}

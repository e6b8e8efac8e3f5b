use rand::Rng;

use super::PipelineError;
use crate::tensor::Tensor;

/// Random view transformations for single-channel images in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub crop: bool,
    /// Smallest and largest crop area as a fraction of the image area.
    pub crop_min: f64,
    pub crop_max: f64,
    pub flip: bool,
    pub flip_prob: f64,
    pub jitter: bool,
    /// Additive offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Gain drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
    pub blur: bool,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop: true,
            crop_min: 0.5,
            crop_max: 1.0,
            flip: true,
            flip_prob: 0.5,
            jitter: true,
            brightness: 0.1,
            contrast: 0.2,
            blur: true,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.0,
        }
    }
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        Self { crop: false, flip: false, jitter: false, blur: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let (lo, hi) = (self.crop_min, self.crop_max);
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop scale range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"));
        }
        for (name, p) in [("flip", self.flip_prob), ("blur", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        if !(self.brightness >= 0.0 && self.contrast >= 0.0 && self.contrast < 1.0) {
            return bad("brightness must be >= 0 and contrast in [0, 1)".into());
        }
        let (s0, s1) = (self.blur_sigma_min, self.blur_sigma_max);
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("blur sigma range [{s0}, {s1}] must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }

    fn any(&self) -> bool {
        self.crop || self.flip || self.jitter || self.blur
    }
}

/// One random view of a `1×h×w` image. Draws from `rng` in a fixed order, so the
/// output is a pure function of the image, the spec and the rng state.
pub fn augment(image: &Tensor, spec: &AugmentationSpec, rng: &mut impl Rng) -> Result<Tensor, PipelineError> {
    spec.validate()?;
    let [1, h, w] = *image.shape() else {
        return Err(PipelineError::Config(format!("expected a 1 x h x w image, got {:?}", image.shape())));
    };
    if !spec.any() {
        return Ok(image.clone());
    }
    let mut px = image.data().to_vec();
    if spec.crop {
        px = random_resized_crop(&px, h, w, (spec.crop_min, spec.crop_max), rng)?;
    }
    if spec.flip && rng.gen::<f64>() < spec.flip_prob {
        for row in px.chunks_mut(w) {
            row.reverse();
        }
    }
    if spec.jitter {
        let gain = 1.0 + rng.gen_range(-1.0..=1.0) * spec.contrast;
        let offset = rng.gen_range(-1.0..=1.0) * spec.brightness;
        px.iter_mut().for_each(|v| *v = *v * gain + offset);
    }
    if spec.blur && rng.gen::<f64>() < spec.blur_prob {
        let sigma = rng.gen_range(spec.blur_sigma_min..=spec.blur_sigma_max);
        px = gaussian_blur(&px, h, w, sigma);
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Tensor::from_vec(vec![1, h, w], px)?)
}

fn random_resized_crop(
    px: &[f64],
    h: usize,
    w: usize,
    (lo, hi): (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<f64>, PipelineError> {
    let area = rng.gen_range(lo..=hi);
    let log_ratio = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let cw = ((w as f64) * (area * ratio).sqrt()).round().clamp(1.0, w as f64);
    let ch = ((h as f64) * (area / ratio).sqrt()).round().clamp(1.0, h as f64);
    let x0 = rng.gen_range(0.0..=(w as f64 - cw));
    let y0 = rng.gen_range(0.0..=(h as f64 - ch));
    if !(cw >= 1.0 && ch >= 1.0) {
        return Err(PipelineError::Config(format!("degenerate crop {cw}x{ch}")));
    }
    let (sx, sy) = (cw / w as f64, ch / h as f64);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let y = (y0 + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y_lo, fy) = (y.floor() as usize, y - y.floor());
        let y_hi = (y_lo + 1).min(h - 1);
        for j in 0..w {
            let x = (x0 + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x_lo, fx) = (x.floor() as usize, x - x.floor());
            let x_hi = (x_lo + 1).min(w - 1);
            let top = px[y_lo * w + x_lo] * (1.0 - fx) + px[y_lo * w + x_hi] * fx;
            let bottom = px[y_hi * w + x_lo] * (1.0 - fx) + px[y_hi * w + x_hi] * fx;
            out[i * w + j] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Ok(out)
}

fn gaussian_blur(px: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * px[i * w + clampi(j as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(i as isize + k as isize - radius, h) * w + j])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::sample_rng;

    fn image() -> Tensor {
        let mut rng = sample_rng(5, &[]);
        Tensor::from_fn(&[1, 12, 10], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn disabled_is_identity() {
        let img = image();
        let out = augment(&img, &AugmentationSpec::disabled(), &mut sample_rng(1, &[])).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_is_identity() {
        let spec = AugmentationSpec { flip: true, flip_prob: 1.0, ..AugmentationSpec::disabled() };
        let img = image();
        let mut rng = sample_rng(1, &[]);
        let once = augment(&img, &spec, &mut rng).unwrap();
        assert_ne!(once, img);
        assert_eq!(once.at(&[0, 0, 0]), img.at(&[0, 0, 9]));
        assert_eq!(augment(&once, &spec, &mut rng).unwrap(), img);
    }

    #[test]
    fn deterministic_and_clamped() {
        let img = image();
        let spec = AugmentationSpec { brightness: 0.8, ..AugmentationSpec::default() };
        let a = augment(&img, &spec, &mut sample_rng(9, &[4])).unwrap();
        let b = augment(&img, &spec, &mut sample_rng(9, &[4])).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.shape(), img.shape());
    }

    #[test]
    fn crop_interpolates_within_input_range() {
        let img = image();
        let (lo, hi) = img.data().iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        for seed in 0..20 {
            let out = random_resized_crop(img.data(), 12, 10, (0.3, 1.0), &mut sample_rng(seed, &[])).unwrap();
            assert_eq!(out.len(), 120);
            assert!(out.iter().all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let out = gaussian_blur(&vec![0.3; 30], 5, 6, 0.8);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn invalid_specs() {
        let img = image();
        for spec in [
            AugmentationSpec { crop_min: 0.0, crop_max: 0.5, ..AugmentationSpec::default() },
            AugmentationSpec { crop_min: 0.8, crop_max: 0.5, ..AugmentationSpec::default() },
            AugmentationSpec { flip_prob: 1.5, ..AugmentationSpec::default() },
        ] {
            assert!(matches!(augment(&img, &spec, &mut sample_rng(0, &[])), Err(PipelineError::Config(_))));
        }
    }
}

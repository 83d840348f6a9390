//! Photometric augmentations that turn the training image into a fresh
//! harmonization input at every iteration.
//!
//! Each transform is applied independently with its own probability, always
//! in the order brightness, contrast, saturation, hue, noise, and the result
//! is clamped to `[-1, 1]`. No geometric transforms: the image must stay
//! aligned with the reconstruction target.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Range of the additive Gaussian noise standard deviation.
    pub noise_sigma: (f32, f32),
    /// Brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Contrast factor range (around the image mean).
    pub contrast: (f32, f32),
    /// Saturation factor range (around per-pixel luma).
    pub saturation: (f32, f32),
    /// Hue rotation drawn from `[-hue_degrees, hue_degrees]`.
    pub hue_degrees: f32,
    pub p_noise: f32,
    pub p_brightness: f32,
    pub p_contrast: f32,
    pub p_saturation: f32,
    pub p_hue: f32,
    /// Separate seed for the augmentation stream; defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            noise_sigma: (0.0, 0.15),
            brightness: 0.2,
            contrast: (0.7, 1.3),
            saturation: (0.7, 1.3),
            hue_degrees: 15.0,
            p_noise: 0.5,
            p_brightness: 0.5,
            p_contrast: 0.5,
            p_saturation: 0.5,
            p_hue: 0.5,
            seed: None,
        }
    }
}

impl AugmentSpec {
    /// Every transform disabled.
    pub fn identity() -> Self {
        AugmentSpec {
            p_noise: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_saturation: 0.0,
            p_hue: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f32, f32)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "augment range {name} = ({lo}, {hi}) is invalid"
                )))
            }
        };
        ordered("noise_sigma", self.noise_sigma)?;
        ordered("contrast", self.contrast)?;
        ordered("saturation", self.saturation)?;
        if !(self.brightness >= 0.0 && self.brightness.is_finite()) {
            return Err(Error::invalid("augment brightness must be >= 0"));
        }
        if !(self.hue_degrees >= 0.0 && self.hue_degrees <= 180.0) {
            return Err(Error::invalid("augment hue_degrees must lie in [0, 180]"));
        }
        for (name, p) in [
            ("p_noise", self.p_noise),
            ("p_brightness", self.p_brightness),
            ("p_contrast", self.p_contrast),
            ("p_saturation", self.p_saturation),
            ("p_hue", self.p_hue),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "augment probability {name} = {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn fires(rng: &mut Rng, p: f32) -> bool {
    p > 0.0 && rng.gen::<f32>() < p
}

fn per_pixel(data: &mut [f32], plane: usize, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
    for i in 0..plane {
        let px = [data[i], data[plane + i], data[2 * plane + i]];
        let out = f(px);
        data[i] = out[0];
        data[plane + i] = out[1];
        data[2 * plane + i] = out[2];
    }
}

/// Rotation by `angle` about the gray axis `(1,1,1)/√3`.
fn hue_matrix(angle: f32) -> [[f32; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let k = 1.0 / 3.0f32;
    let t = (1.0 - c) * k;
    let sa = s * k.sqrt();
    [
        [c + t, t - sa, t + sa],
        [t + sa, c + t, t - sa],
        [t - sa, t + sa, c + t],
    ]
}

/// Applies a randomly drawn subset of the configured transforms to a
/// `[3, H, W]` image in `[-1, 1]`.
pub fn random_augment(image: &Tensor, spec: &AugmentSpec, rng: &mut Rng) -> Tensor {
    let (c, h, w) = image.chw();
    assert_eq!(c, 3, "augmentations expect RGB");
    let plane = h * w;
    let mut data = image.to_vec();

    if fires(rng, spec.p_brightness) {
        let b = uniform(rng, (-spec.brightness, spec.brightness));
        data.iter_mut().for_each(|v| *v += b);
    }
    if fires(rng, spec.p_contrast) {
        let f = uniform(rng, spec.contrast);
        let mean = (data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64) as f32;
        data.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
    }
    if fires(rng, spec.p_saturation) {
        let f = uniform(rng, spec.saturation);
        per_pixel(&mut data, plane, |p| {
            let y = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
            [y + f * (p[0] - y), y + f * (p[1] - y), y + f * (p[2] - y)]
        });
    }
    if fires(rng, spec.p_hue) {
        let deg = uniform(rng, (-spec.hue_degrees, spec.hue_degrees));
        let m = hue_matrix(deg.to_radians());
        per_pixel(&mut data, plane, |p| {
            let mut out = [0.0; 3];
            for (o, row) in out.iter_mut().zip(&m) {
                *o = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
            }
            out
        });
    }
    if fires(rng, spec.p_noise) {
        let sigma = uniform(rng, spec.noise_sigma);
        for v in data.iter_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Tensor::new(vec![c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image() -> Tensor {
        let (h, w) = (16, 20);
        Tensor::new(
            vec![3, h, w],
            (0..3 * h * w).map(|i| (i as f32 * 0.13).sin() * 0.6).collect(),
        )
    }

    #[test]
    fn disabled_transforms_are_identity() {
        let x = image();
        let mut r = Rng::seed_from_u64(0);
        assert_eq!(random_augment(&x, &AugmentSpec::identity(), &mut r), x);
    }

    #[test]
    fn noise_only_has_requested_spread() {
        let spec = AugmentSpec {
            noise_sigma: (0.1, 0.1),
            p_noise: 1.0,
            ..AugmentSpec::identity()
        };
        let x = Tensor::zeros(vec![3, 32, 32]);
        let mut r = Rng::seed_from_u64(1);
        let mut sum_sq = 0.0f64;
        let mut n = 0usize;
        for _ in 0..10 {
            let y = random_augment(&x, &spec, &mut r);
            sum_sq += y.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            n += y.len();
        }
        let std = (sum_sq / n as f64).sqrt();
        assert!((std - 0.1).abs() <= 0.02, "{std}");
    }

    #[test]
    fn cloned_rng_reproduces_output() {
        let x = image();
        let spec = AugmentSpec {
            p_noise: 1.0,
            p_brightness: 1.0,
            p_contrast: 1.0,
            p_saturation: 1.0,
            p_hue: 1.0,
            ..Default::default()
        };
        let mut r = Rng::seed_from_u64(2);
        let mut r2 = r.clone();
        let a = random_augment(&x, &spec, &mut r);
        let b = random_augment(&x, &spec, &mut r2);
        assert_eq!(a, b);
        assert_ne!(a, x);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn brightness_jitter_is_zero_centered() {
        let x = image();
        let spec = AugmentSpec {
            p_brightness: 1.0,
            ..AugmentSpec::identity()
        };
        let mut r = Rng::seed_from_u64(3);
        let draws = 400;
        let mean: f64 = (0..draws)
            .map(|_| random_augment(&x, &spec, &mut r).mean())
            .sum::<f64>()
            / draws as f64;
        assert!((mean - x.mean()).abs() < 0.02, "{mean} vs {}", x.mean());
    }

    #[test]
    fn hue_rotation_keeps_gray_and_norm() {
        let m = hue_matrix(0.4);
        let gray = [0.3f32; 3];
        for row in &m {
            let v: f32 = row.iter().zip(&gray).map(|(a, b)| a * b).sum();
            assert!((v - 0.3).abs() < 1e-6);
        }
        let p = [0.5f32, -0.2, 0.1];
        let q: Vec<f32> = m
            .iter()
            .map(|row| row.iter().zip(&p).map(|(a, b)| a * b).sum())
            .collect();
        let n = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>();
        assert!((n(&p) - n(&q)).abs() < 1e-5);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(AugmentSpec::default().validate().is_ok());
        assert!(AugmentSpec {
            p_hue: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AugmentSpec {
            contrast: (1.3, 0.7),
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}

//! Resolution schedules and per-stage training images.
//!
//! Two schedules are supported. The geometric one shrinks stage `n` by
//! `r^(N-n)`. The skewed one uses the exponent `((N-1)/log N)·log(N-n) + 1`,
//! which keeps more stages at low resolution and fewer near the top. In both
//! cases `r` is refitted so that stage 0 lands exactly on `min_len` along the
//! shorter side.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::resize;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    OldGeometric,
    NewSkewed,
}

impl std::str::FromStr for RescaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "old" | "old_geometric" | "geometric" => Ok(RescaleMode::OldGeometric),
            "new" | "new_skewed" | "skewed" => Ok(RescaleMode::NewSkewed),
            other => Err(Error::invalid(format!(
                "unknown rescale mode `{other}` (expected old_geometric or new_skewed)"
            ))),
        }
    }
}

/// User-facing knobs a schedule is planned from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub mode: RescaleMode,
    /// Nominal scale factor, only used to pick the number of stages.
    pub r: f64,
    /// Shorter side at stage 0.
    pub min_len: usize,
    /// Longer side of the training image is clamped to this.
    pub max_len: usize,
    /// Forces the total number of stages (`N + 1`) instead of deriving it
    /// from `r`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_stages: Option<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            mode: RescaleMode::NewSkewed,
            r: 0.55,
            min_len: 25,
            max_len: 250,
            num_stages: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub mode: RescaleMode,
    pub r: f64,
    /// Fitted factor actually used for the resolutions.
    pub r_eff: f64,
    /// Index of the final stage; stages are `0..=last_stage`.
    pub last_stage: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// `(height, width)` for every stage.
    pub resolutions: Vec<(usize, usize)>,
}

/// Per-stage training images, intensities in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<Tensor>,
}

impl ImagePyramid {
    pub fn level(&self, n: usize) -> &Tensor {
        &self.levels[n]
    }

    pub fn base(&self) -> &Tensor {
        &self.levels[0]
    }

    pub fn top(&self) -> &Tensor {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Factor `r_eff` with `side_len · r_eff^N == min_len`.
pub fn effective_scale(min_len: usize, side_len: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("effective_scale needs at least one scaling step"));
    }
    if min_len == 0 || side_len == 0 {
        return Err(Error::invalid("sizes must be positive"));
    }
    if min_len > side_len {
        return Err(Error::invalid(format!(
            "minimum size {min_len} exceeds image side {side_len}"
        )));
    }
    Ok((min_len as f64 / side_len as f64).powf(1.0 / n as f64))
}

fn skewed_exponent_with(n: usize, last: usize, log: impl Fn(f64) -> f64) -> f64 {
    (last as f64 - 1.0) / log(last as f64) * log((last - n) as f64) + 1.0
}

/// Exponent applied to `r_eff` for stage `n < last`.
pub fn stage_exponent(n: usize, last: usize, mode: RescaleMode) -> Result<f64> {
    if n > last {
        return Err(Error::invalid(format!("stage {n} beyond final stage {last}")));
    }
    if n == last {
        return Ok(0.0);
    }
    match mode {
        RescaleMode::OldGeometric => Ok((last - n) as f64),
        RescaleMode::NewSkewed => {
            if last < 2 {
                return Err(Error::invalid(
                    "skewed rescaling needs at least three stages (log N is zero for N = 1)",
                ));
            }
            Ok(skewed_exponent_with(n, last, f64::ln))
        }
    }
}

fn scale_side(len: usize, factor: f64) -> usize {
    ((len as f64 * factor).round() as usize).max(2)
}

/// Resolution of stage `n` for a full-size `(h, w)` image.
pub fn stage_resolution(
    n: usize,
    last: usize,
    mode: RescaleMode,
    r_eff: f64,
    full: (usize, usize),
) -> Result<(usize, usize)> {
    let e = stage_exponent(n, last, mode)?;
    if n == last {
        return Ok(full);
    }
    let f = r_eff.powf(e);
    Ok((scale_side(full.0, f), scale_side(full.1, f)))
}

/// Final stage index `N` for nominal factor `r`: the number of `r`-steps
/// needed to bring the shorter side down to `min_len`, plus one, and at least 1.
pub fn num_stages(r: f64, min_len: usize, full: (usize, usize)) -> Result<usize> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::invalid(format!("scale factor r = {r} must lie in (0, 1)")));
    }
    if min_len < 2 {
        return Err(Error::invalid("minimum size must be at least 2 px"));
    }
    let short = full.0.min(full.1) as f64;
    let steps = ((min_len as f64 / short).ln() / r.ln()).ceil();
    Ok((steps as i64 + 1).max(1) as usize)
}

/// Shrinks `(h, w)` so that its longer side is at most `max_len`.
pub fn clamp_to_max_side(size: (usize, usize), max_len: usize) -> (usize, usize) {
    let long = size.0.max(size.1);
    if long <= max_len {
        return size;
    }
    let f = max_len as f64 / long as f64;
    (scale_side(size.0, f), scale_side(size.1, f))
}

impl PyramidSpec {
    /// Plans the schedule for a training image of size `full` (already
    /// clamped to `cfg.max_len`).
    pub fn plan(cfg: &PyramidConfig, full: (usize, usize)) -> Result<PyramidSpec> {
        if full.0 < 2 || full.1 < 2 {
            return Err(Error::invalid(format!("image {}x{} is too small", full.0, full.1)));
        }
        let short = full.0.min(full.1);
        if cfg.min_len > short {
            return Err(Error::invalid(format!(
                "image shorter side {short} is below the stage-0 size {}",
                cfg.min_len
            )));
        }
        let last = match cfg.num_stages {
            Some(0) => return Err(Error::invalid("at least one stage is required")),
            Some(count) => count - 1,
            None => num_stages(cfg.r, cfg.min_len, full)?,
        };
        if last == 0 {
            return Ok(PyramidSpec {
                mode: cfg.mode,
                r: cfg.r,
                r_eff: 1.0,
                last_stage: 0,
                min_len: cfg.min_len,
                max_len: cfg.max_len,
                resolutions: vec![full],
            });
        }
        let r_eff = effective_scale(cfg.min_len, short, last)?;
        // Both schedules coincide for a single scaling step.
        let mode = if last < 2 { RescaleMode::OldGeometric } else { cfg.mode };
        let resolutions = (0..=last)
            .map(|n| stage_resolution(n, last, mode, r_eff, full))
            .collect::<Result<Vec<_>>>()?;
        Ok(PyramidSpec {
            mode: cfg.mode,
            r: cfg.r,
            r_eff,
            last_stage: last,
            min_len: cfg.min_len,
            max_len: cfg.max_len,
            resolutions,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.resolutions.len()
    }

    pub fn full(&self) -> (usize, usize) {
        *self.resolutions.last().expect("non-empty schedule")
    }

    /// One line per stage: index, height, width and the exponent of `r_eff`.
    pub fn dump(&self) -> String {
        let mode = if self.last_stage < 2 {
            RescaleMode::OldGeometric
        } else {
            self.mode
        };
        let mut s = String::new();
        for (n, (h, w)) in self.resolutions.iter().enumerate() {
            let e = stage_exponent(n, self.last_stage, mode).unwrap_or(0.0);
            let _ = writeln!(s, "{n:>3} {h:>5} {w:>5} {e:>8.4}");
        }
        s
    }
}

/// Resizes `image` (`[3, H, W]`, normalized) to every stage resolution.
pub fn build_pyramid(image: &Tensor, spec: &PyramidSpec) -> Result<ImagePyramid> {
    if image.shape().len() != 3 || image.shape()[0] != 3 || image.is_empty() {
        return Err(Error::invalid(format!(
            "expected an RGB [3,H,W] image, got {:?}",
            image.shape()
        )));
    }
    let (_, h, w) = image.chw();
    if (h, w) != spec.full() {
        return Err(Error::invalid(format!(
            "image is {h}x{w} but the schedule ends at {}x{}",
            spec.full().0,
            spec.full().1
        )));
    }
    let levels = spec.resolutions.iter().map(|&size| resize(image, size)).collect();
    Ok(ImagePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    const NEW: [(usize, usize); 6] = [(25, 34), (32, 42), (42, 56), (63, 84), (126, 167), (188, 250)];
    const OLD: [(usize, usize); 6] = [(25, 34), (38, 50), (57, 75), (84, 112), (126, 167), (188, 250)];

    fn within_one(got: &[(usize, usize)], want: &[(usize, usize)]) -> bool {
        got.len() == want.len()
            && got
                .iter()
                .zip(want)
                .all(|(g, w)| g.0.abs_diff(w.0) <= 1 && g.1.abs_diff(w.1) <= 1)
    }

    #[test]
    fn effective_scale_examples() {
        // 188 * r^5 = 25, solved by bisection as an independent check
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 188.0 * mid.powi(5) < 25.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let r = effective_scale(25, 188, 5).unwrap();
        assert!((r - lo).abs() < 1e-12);
        assert!((r - 0.6681).abs() < 5e-4);
        assert_eq!(effective_scale(25, 25, 3).unwrap(), 1.0);
        assert!((effective_scale(50, 200, 2).unwrap() - 0.5).abs() < 1e-15);
        assert!(effective_scale(200, 50, 2).is_err());
        assert!(effective_scale(0, 50, 2).is_err());
    }

    #[test]
    fn printed_ladders_reproduce() {
        let r = effective_scale(25, 188, 5).unwrap();
        let new: Vec<_> = (0..=5)
            .map(|n| stage_resolution(n, 5, RescaleMode::NewSkewed, r, (188, 250)).unwrap())
            .collect();
        let old: Vec<_> = (0..=5)
            .map(|n| stage_resolution(n, 5, RescaleMode::OldGeometric, r, (188, 250)).unwrap())
            .collect();
        assert!(within_one(&new, &NEW), "{new:?}");
        assert!(within_one(&old, &OLD), "{old:?}");
    }

    #[test]
    fn skewed_needs_three_stages() {
        assert!(stage_resolution(0, 1, RescaleMode::NewSkewed, 0.5, (100, 100)).is_err());
        assert!(stage_resolution(0, 1, RescaleMode::OldGeometric, 0.5, (100, 100)).is_ok());
    }

    #[test]
    fn final_stage_is_full_size() {
        for mode in [RescaleMode::OldGeometric, RescaleMode::NewSkewed] {
            assert_eq!(stage_resolution(4, 4, mode, 0.7, (77, 91)).unwrap(), (77, 91));
        }
    }

    #[test]
    fn stage_counts() {
        assert_eq!(num_stages(0.55, 25, (188, 250)).unwrap(), 5);
        let n = num_stages(0.75, 25, (188, 250)).unwrap();
        assert!((7..=9).contains(&n), "{n}");
        assert_eq!(num_stages(0.5, 188, (188, 250)).unwrap(), 1);
        assert!(num_stages(1.0, 25, (188, 250)).is_err());
    }

    #[test]
    fn logarithm_base_cancels() {
        let r = effective_scale(25, 188, 7).unwrap();
        for n in 0..7 {
            let e_ln = skewed_exponent_with(n, 7, f64::ln);
            let e_10 = skewed_exponent_with(n, 7, f64::log10);
            let e_2 = skewed_exponent_with(n, 7, f64::log2);
            let side = |e: f64| scale_side(188, r.powf(e));
            assert_eq!(side(e_ln), side(e_10));
            assert_eq!(side(e_ln), side(e_2));
        }
    }

    #[test]
    fn plan_defaults_give_six_stages() {
        let spec = PyramidSpec::plan(&PyramidConfig::default(), (188, 250)).unwrap();
        assert_eq!(spec.stage_count(), 6);
        assert!(within_one(&spec.resolutions, &NEW));
        let forced = PyramidSpec::plan(
            &PyramidConfig {
                num_stages: Some(3),
                ..Default::default()
            },
            (188, 250),
        )
        .unwrap();
        assert_eq!(forced.stage_count(), 3);
        assert_eq!(forced.resolutions[0].0, 25);
        let single = PyramidSpec::plan(
            &PyramidConfig {
                num_stages: Some(1),
                ..Default::default()
            },
            (40, 50),
        )
        .unwrap();
        assert_eq!(single.resolutions, vec![(40, 50)]);
    }

    #[test]
    fn plan_rejects_images_below_min_size() {
        assert!(PyramidSpec::plan(&PyramidConfig::default(), (20, 30)).is_err());
    }

    #[test]
    fn clamp_max_side() {
        assert_eq!(clamp_to_max_side((376, 500), 250), (188, 250));
        assert_eq!(clamp_to_max_side((100, 120), 250), (100, 120));
    }

    #[test]
    fn dump_has_one_line_per_stage() {
        let spec = PyramidSpec::plan(&PyramidConfig::default(), (188, 250)).unwrap();
        let d = spec.dump();
        assert_eq!(d.lines().count(), 6);
        assert!(d.lines().last().unwrap().contains("188"));
    }

    #[test]
    fn constant_image_stays_constant() {
        let spec = PyramidSpec::plan(&PyramidConfig::default(), (188, 250)).unwrap();
        let img = Tensor::full(vec![3, 188, 250], -0.2);
        let p = build_pyramid(&img, &spec).unwrap();
        for (lvl, size) in p.levels.iter().zip(&spec.resolutions) {
            assert_eq!(&lvl.shape()[1..], &[size.0, size.1]);
            assert!(lvl.data().iter().all(|v| (v + 0.2).abs() < 1e-5));
        }
        assert_eq!(p.top(), &img);
    }

    #[test]
    fn checkerboard_mean_is_preserved() {
        let (h, w) = (188, 250);
        let data: Vec<f32> = (0..3 * h * w)
            .map(|i| {
                let (y, x) = ((i / w) % h, i % w);
                if (y / 4 + x / 4) % 2 == 0 {
                    0.9
                } else {
                    -0.7
                }
            })
            .collect();
        let img = Tensor::new(vec![3, h, w], data);
        let small = resize(&img, (25, 34));
        assert!(
            (img.mean() - small.mean()).abs() < 1e-2,
            "{} vs {}",
            img.mean(),
            small.mean()
        );
    }
}

//! Single-image evaluation: pixel diversity and SIFID.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{normal_tensor, GrowingGenerator, Noise, LEAKY_SLOPE};
use crate::tensor::{conv2d, max_pool2d, Tensor};
use crate::trainer::noise_field;
use crate::Rng;

/// Environment variable naming the directory with pretrained extractor weights.
pub const WEIGHTS_DIR_ENV: &str = "CONSINGAN_WEIGHTS_DIR";
pub const RANDOM_CONV_TAG: &str = "random-conv-v1";
pub const INCEPTION_TAG: &str = "inception-pool1";
pub const EXTRACTOR_TAGS: [&str; 2] = [INCEPTION_TAG, RANDOM_CONV_TAG];
const INCEPTION_FILE: &str = "inception_pool1.safetensors";

/// Eigenvalues below `-NEG_EIG_TOL · max(1, |λ_max|)` are treated as a failed
/// square root rather than round-off.
const NEG_EIG_TOL: f64 = 1e-6;

/// Maps an RGB image to a `[C, H', W']` feature map.
pub trait FeatureExtractor {
    fn tag(&self) -> &str;
    fn channels(&self) -> usize;
    fn extract(&self, image: &Tensor) -> Result<Tensor>;
}

fn leaky(x: Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

fn add_bias(x: Tensor, bias: &[f32]) -> Tensor {
    let (c, h, w) = x.chw();
    let mut d = x.to_vec();
    for (ch, b) in bias.iter().enumerate().take(c) {
        d[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(vec![c, h, w], d)
}

fn check_rgb(image: &Tensor, min_side: usize) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!("feature extractor expects [3,H,W], got {s:?}")));
    }
    if s[1] < min_side || s[2] < min_side {
        return Err(Error::invalid(format!(
            "image {}x{} is below the extractor minimum {min_side}",
            s[1], s[2]
        )));
    }
    Ok(())
}

/// Two fixed random 3×3 convolutions; needs no downloads, so the metric suite
/// always runs.
pub struct RandomConvExtractor {
    w1: Tensor,
    b1: Vec<f32>,
    w2: Tensor,
    b2: Vec<f32>,
}

impl RandomConvExtractor {
    pub const CHANNELS: usize = 16;
    const SEED: u64 = 0x51f1d;

    pub fn new() -> Self {
        let mut rng = Rng::seed_from_u64(Self::SEED);
        let c = Self::CHANNELS;
        let w1 = normal_tensor(vec![c, 3, 3, 3], (2.0f32 / 27.0).sqrt(), &mut rng);
        let b1 = normal_tensor(vec![c], 0.1, &mut rng).to_vec();
        let w2 = normal_tensor(vec![c, c, 3, 3], (2.0 / (9 * c) as f32).sqrt(), &mut rng);
        let b2 = normal_tensor(vec![c], 0.1, &mut rng).to_vec();
        RandomConvExtractor { w1, b1, w2, b2 }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn tag(&self) -> &str {
        RANDOM_CONV_TAG
    }

    fn channels(&self) -> usize {
        Self::CHANNELS
    }

    fn extract(&self, image: &Tensor) -> Result<Tensor> {
        check_rgb(image, 4)?;
        let x = leaky(add_bias(conv2d(image, &self.w1, 1, 1), &self.b1));
        Ok(leaky(add_bias(conv2d(&x, &self.w2, 1, 2), &self.b2)))
    }
}

/// The stem of an Inception-v3 classifier up to its first max-pool:
/// three batch-normalized 3×3 convolutions with ReLU (the first with stride
/// 2, the last padded), then a 3×3 stride-2 pool. 64 channels.
pub struct InceptionPool1 {
    convs: Vec<(Tensor, Vec<f32>, usize, usize)>,
}

impl InceptionPool1 {
    const LAYERS: [(&'static str, usize, usize); 3] = [
        ("Conv2d_1a_3x3", 2, 0),
        ("Conv2d_2a_3x3", 1, 0),
        ("Conv2d_2b_3x3", 1, 1),
    ];
    const BN_EPS: f32 = 1e-3;

    /// Reads `inception_pool1.safetensors` from `dir`, or from the directory
    /// named by the environment when `dir` is `None`.
    pub fn load(dir: Option<&Path>) -> Result<Self> {
        let dir: PathBuf = match dir {
            Some(d) => d.to_path_buf(),
            None => std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                Error::invalid(format!(
                    "extractor `{INCEPTION_TAG}` needs weights: set {WEIGHTS_DIR_ENV} to a directory containing {INCEPTION_FILE}, or use `{RANDOM_CONV_TAG}`"
                ))
            })?,
        };
        let path = dir.join(INCEPTION_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Decode {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let get = |name: String| -> Result<Tensor> {
            let view = st.tensor(&name).map_err(|e| Error::Decode {
                path: path.clone(),
                message: format!("{name}: {e}"),
            })?;
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Decode {
                    path: path.clone(),
                    message: format!("{name}: expected f32, found {:?}", view.dtype()),
                });
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Tensor::new(view.shape().to_vec(), data))
        };
        let mut convs = Vec::new();
        for (name, stride, pad) in Self::LAYERS {
            let w = get(format!("{name}.conv.weight"))?;
            let gamma = get(format!("{name}.bn.weight"))?;
            let beta = get(format!("{name}.bn.bias"))?;
            let mean = get(format!("{name}.bn.running_mean"))?;
            let var = get(format!("{name}.bn.running_var"))?;
            let c_out = w.shape()[0];
            if [&gamma, &beta, &mean, &var].iter().any(|t| t.len() != c_out) {
                return Err(Error::Decode {
                    path: path.clone(),
                    message: format!("{name}: batch-norm sizes do not match {c_out} filters"),
                });
            }
            // Fold the normalization into the convolution.
            let scale: Vec<f32> = (0..c_out)
                .map(|o| gamma.data()[o] / (var.data()[o] + Self::BN_EPS).sqrt())
                .collect();
            let per = w.len() / c_out;
            let folded: Vec<f32> = w.data().iter().enumerate().map(|(i, v)| v * scale[i / per]).collect();
            let bias = (0..c_out).map(|o| beta.data()[o] - mean.data()[o] * scale[o]).collect();
            convs.push((Tensor::new(w.shape().to_vec(), folded), bias, stride, pad));
        }
        Ok(InceptionPool1 { convs })
    }
}

impl FeatureExtractor for InceptionPool1 {
    fn tag(&self) -> &str {
        INCEPTION_TAG
    }

    fn channels(&self) -> usize {
        self.convs.last().map(|c| c.0.shape()[0]).unwrap_or(0)
    }

    fn extract(&self, image: &Tensor) -> Result<Tensor> {
        check_rgb(image, 15)?;
        let mut x = image.clone();
        for (w, b, stride, pad) in &self.convs {
            x = add_bias(conv2d(&x, w, *pad, *stride), b).map(|v| v.max(0.0));
        }
        Ok(max_pool2d(&x, 3, 2))
    }
}

/// Looks an extractor up by tag.
pub fn extractor_by_tag(tag: &str, weights_dir: Option<&Path>) -> Result<Box<dyn FeatureExtractor>> {
    match tag {
        RANDOM_CONV_TAG => Ok(Box::new(RandomConvExtractor::new())),
        INCEPTION_TAG => Ok(Box::new(InceptionPool1::load(weights_dir)?)),
        other => Err(Error::invalid(format!(
            "unknown extractor `{other}` (available: {})",
            EXTRACTOR_TAGS.join(", ")
        ))),
    }
}

/// Mean and unbiased covariance of the spatial positions of a `[C,H,W]` map.
pub fn feature_statistics(features: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (c, h, w) = features.chw();
    let m = h * w;
    if m < 2 {
        return Err(Error::invalid("need at least two spatial positions for a covariance"));
    }
    let x = DMatrix::from_row_slice(c, m, &features.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let mu = x.column_mean();
    let mut centered = x;
    for mut col in centered.column_iter_mut() {
        col -= &mu;
    }
    let cov = &centered * centered.transpose() / (m as f64 - 1.0);
    Ok((mu, cov))
}

fn symmetric_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -NEG_EIG_TOL * scale {
            return Err(Error::Numeric(format!(
                "covariance has eigenvalue {v} (matrix square root failed)"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `tr((Σ_a Σ_b)^{1/2})`, computed as the trace of the square root of the
/// symmetric matrix `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, which has the same spectrum.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = symmetric_sqrt(a)?;
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut tr = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -NEG_EIG_TOL * scale {
            return Err(Error::Numeric(format!("product of covariances has eigenvalue {v}")));
        }
        tr += v.max(0.0).sqrt();
    }
    Ok(tr)
}

/// Fréchet distance between Gaussians fitted to two feature maps.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape().len() != 3 || b.shape().len() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::invalid(format!(
            "feature maps {:?} and {:?} are not comparable",
            a.shape(),
            b.shape()
        )));
    }
    let (mu_a, cov_a) = feature_statistics(a)?;
    let (mu_b, cov_b) = feature_statistics(b)?;
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let d = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(&cov_a, &cov_b)?;
    Ok(d.max(0.0))
}

/// Single-image Fréchet distance between `real` and `fake` under `fx`.
pub fn sifid(real: &Tensor, fake: &Tensor, fx: &dyn FeatureExtractor) -> Result<f64> {
    frechet_distance(&fx.extract(real)?, &fx.extract(fake)?)
}

fn intensity(image: &Tensor) -> Vec<f64> {
    let (c, h, w) = image.chw();
    let d = image.data();
    (0..h * w)
        .map(|i| (0..c).map(|ch| d[ch * h * w + i] as f64).sum::<f64>() / c as f64)
        .collect()
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-pixel standard deviation across samples of the channel-mean
/// intensity, averaged over pixels and divided by the standard deviation of
/// the training image's intensity.
pub fn diversity_score(samples: &[Tensor], training: &Tensor) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "diversity needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.shape() != training.shape()) {
        return Err(Error::invalid(format!(
            "sample shape {:?} differs from the training image {:?}",
            bad.shape(),
            training.shape()
        )));
    }
    let train_std = population_std(&intensity(training));
    if train_std == 0.0 {
        return Err(Error::invalid(
            "training image has constant intensity; diversity is undefined",
        ));
    }
    let per_sample: Vec<Vec<f64>> = samples.iter().map(intensity).collect();
    let pixels = per_sample[0].len();
    let mut column = vec![0.0; samples.len()];
    let mut total = 0.0;
    for p in 0..pixels {
        for (slot, s) in column.iter_mut().zip(&per_sample) {
            *slot = s[p];
        }
        total += population_std(&column);
    }
    Ok(total / pixels as f64 / train_std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub diversity: f64,
    /// Mean over samples of the per-sample SIFID.
    pub sifid: f64,
    pub samples: usize,
    pub extractor: String,
}

/// Draws `n_samples` unconditional outputs at the training resolution and
/// scores them.
pub fn evaluate_model(
    g: &GrowingGenerator,
    training: &Tensor,
    n_samples: usize,
    fx: &dyn FeatureExtractor,
    rng: &mut Rng,
) -> Result<EvalReport> {
    let samples = (0..n_samples)
        .map(|_| {
            let z = noise_field(g.resolutions[0], rng);
            Ok(g.forward(&Var::constant(z), Noise::Sampled(rng))?.value().clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let diversity = diversity_score(&samples, training)?;
    let real = fx.extract(training)?;
    let mut total = 0.0;
    for s in &samples {
        total += frechet_distance(&real, &fx.extract(s)?)?;
    }
    Ok(EvalReport {
        diversity,
        sifid: total / n_samples as f64,
        samples: n_samples,
        extractor: fx.tag().to_string(),
    })
}

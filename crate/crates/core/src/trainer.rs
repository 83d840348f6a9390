//! Progressive training: stage loop, concurrent window with a learning-rate
//! ladder, task-specific generator inputs, and the harmonization fine-tune.

use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::augment::{random_augment, AugmentSpec};
use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::losses::{
    critic_loss, generator_adv_loss, generator_objective, generator_total_loss, reconstruction_loss, LossWeights,
    DEFAULT_ALPHA, DEFAULT_GP_LAMBDA,
};
use crate::model::{normal_tensor, warm_start_critic, Critic, GrowingGenerator, Noise, PatchCritic};
use crate::optim::Adam;
use crate::pyramid::{build_pyramid, clamp_to_max_side, ImagePyramid, PyramidConfig, PyramidSpec};
use crate::resample::resize;
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Unconditional,
    Harmonization,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Unconditional => "unconditional",
            Task::Harmonization => "harmonization",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(Task::Unconditional),
            "harmonization" | "harmonize" => Ok(Task::Harmonization),
            other => Err(Error::invalid(format!(
                "unknown task `{other}` (expected unconditional or harmonization)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    /// Base learning rate of the top stage.
    pub eta: f64,
    /// Learning-rate factor per stage below the top of the window.
    pub delta: f64,
    /// Number of concurrently trained stages.
    pub k: usize,
    pub iters_per_stage: usize,
    pub fine_tune_iters: usize,
    pub alpha: f64,
    pub gp_lambda: f64,
    pub seed: u64,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Channel width of generator and critic.
    pub channels: usize,
    pub noise_amp: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub pyramid: PyramidConfig,
    pub augment: AugmentSpec,
}

impl TrainConfig {
    pub fn defaults(task: Task) -> TrainConfig {
        let (iters, pyramid) = match task {
            Task::Unconditional => (2000, PyramidConfig::default()),
            Task::Harmonization => (
                1000,
                PyramidConfig {
                    num_stages: Some(3),
                    ..PyramidConfig::default()
                },
            ),
        };
        TrainConfig {
            task,
            eta: 5e-4,
            delta: 0.1,
            k: 3,
            iters_per_stage: iters,
            fine_tune_iters: 500,
            alpha: DEFAULT_ALPHA,
            gp_lambda: DEFAULT_GP_LAMBDA,
            seed: 0,
            d_steps: 3,
            g_steps: 3,
            channels: crate::model::DEFAULT_CHANNELS,
            noise_amp: crate::model::DEFAULT_NOISE_AMP,
            beta1: 0.5,
            beta2: 0.999,
            pyramid,
            augment: AugmentSpec::default(),
        }
    }

    /// Checks everything that does not depend on the image.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if self.k == 0 {
            return Err(Error::invalid("the concurrent window k must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        if !(self.noise_amp.is_finite() && self.noise_amp >= 0.0) {
            return Err(Error::invalid("noise_amp must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.d_steps == 0 || self.g_steps == 0 {
            return Err(Error::invalid("d_steps and g_steps must be at least 1"));
        }
        let p = &self.pyramid;
        if !(p.r > 0.0 && p.r < 1.0) {
            return Err(Error::invalid(format!("r must lie in (0, 1), got {}", p.r)));
        }
        if p.min_len < crate::model::RECEPTIVE_FIELD {
            return Err(Error::invalid(format!(
                "min_len {} is below the critic's {}-pixel receptive field",
                p.min_len,
                crate::model::RECEPTIVE_FIELD
            )));
        }
        if p.max_len < p.min_len {
            return Err(Error::invalid("max_len must be at least min_len"));
        }
        self.augment.validate()?;
        LossWeights::new(self.alpha, self.gp_lambda)?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            gp_lambda: self.gp_lambda,
        }
    }
}

/// Learning rate of the stage `j` levels below the top of the window.
pub fn lr_for_depth(j: usize, cfg: &TrainConfig) -> f64 {
    cfg.eta * cfg.delta.powi(j as i32)
}

/// Stages trained while the top stage is `n`.
pub fn trainable_window(n: usize, k: usize) -> Vec<usize> {
    let lo = (n + 1).saturating_sub(k.max(1));
    (lo..=n).collect()
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> RngState {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::invalid(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::invalid("rng seed must be 32 bytes"))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    FineTune,
}

/// Learning rate given to one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLr {
    pub group: String,
    /// Distance below the top of the window; `None` for the shared head.
    pub depth: Option<usize>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub critic_loss: f64,
    pub adv: f64,
    pub rec: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub phase: Phase,
    pub window: Vec<usize>,
    pub frozen: Vec<usize>,
    pub learning_rates: Vec<GroupLr>,
    pub critic_lr: f64,
    pub losses: Vec<LossRecord>,
}

impl StageLog {
    /// `iteration,critic_loss,adv,rec,total` with a header line.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,critic_loss,adv,rec,total\n");
        for r in &self.losses {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.critic_loss, r.adv, r.rec, r.total
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Stages finished so far; the next stage to train has this index.
    pub completed_stages: usize,
    pub rng: RngState,
    pub aug_rng: RngState,
    pub history: Vec<StageLog>,
}

/// A parameter group with its own optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Stage(usize),
    Head,
}

impl Group {
    fn label(self) -> String {
        match self {
            Group::Stage(s) => format!("stage_{s}"),
            Group::Head => "head".to_string(),
        }
    }
}

/// Where the adversarial pass of the generator takes its input from.
enum AdvInput<'a> {
    Sampled,
    Fixed(&'a Tensor),
}

/// Fresh `N(0, 1)` three-channel field.
pub fn noise_field(size: (usize, usize), rng: &mut Rng) -> Tensor {
    normal_tensor(vec![3, size.0, size.1], 1.0, rng)
}

/// Generator input at stage-0 resolution: a noise field for unconditional
/// training, an augmented copy of the full image for harmonization.
pub fn sample_generator_input(
    task: Task,
    pyramid: &ImagePyramid,
    augment: &AugmentSpec,
    rng: &mut Rng,
    aug_rng: &mut Rng,
) -> Tensor {
    let (_, h0, w0) = pyramid.base().chw();
    match task {
        Task::Unconditional => noise_field((h0, w0), rng),
        Task::Harmonization => resize(&random_augment(pyramid.top(), augment, aug_rng), (h0, w0)),
    }
}

/// One unconditional sample. The stage-0 noise field is scaled by
/// `(scale_h, scale_w)`, and the output scales with it.
pub fn generate_sample(g: &GrowingGenerator, scale: (f64, f64), rng: &mut Rng) -> Result<Tensor> {
    if !(scale.0 > 0.0 && scale.1 > 0.0 && scale.0.is_finite() && scale.1.is_finite()) {
        return Err(Error::invalid(format!("scale factors must be positive, got {scale:?}")));
    }
    let (h0, w0) = g.resolutions[0];
    let size = (
        (h0 as f64 * scale.0).round() as usize,
        (w0 as f64 * scale.1).round() as usize,
    );
    let z = noise_field(size, rng);
    Ok(g.forward(&Var::constant(z), Noise::Sampled(rng))?.value().clone())
}

/// Deterministic harmonization of a naive composite: resized to the stage-0
/// input size and passed through all stages without feature noise.
pub fn harmonize(g: &GrowingGenerator, naive: &Tensor) -> Result<Tensor> {
    if naive.shape().len() != 3 || naive.shape()[0] != 3 {
        return Err(Error::invalid(format!(
            "naive image must be [3,H,W], got {:?}",
            naive.shape()
        )));
    }
    let x0 = resize(naive, g.resolutions[0]);
    Ok(g.forward(&Var::constant(x0), Noise::Zero)?.value().clone())
}

/// Clamps the image's longer side to the schedule's maximum.
pub fn prepare_image(image: &Tensor, cfg: &PyramidConfig) -> Tensor {
    let (_, h, w) = image.chw();
    let size = clamp_to_max_side((h, w), cfg.max_len);
    if size == (h, w) {
        image.clone()
    } else {
        resize(image, size)
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub spec: PyramidSpec,
    pub pyramid: ImagePyramid,
    pub generator: GrowingGenerator,
    pub critic: PatchCritic,
    pub state: TrainState,
    rng: Rng,
    aug_rng: Rng,
}

impl Trainer {
    /// Plans the schedule and initializes both networks. `image` is a
    /// normalized `[3,H,W]` raster.
    pub fn new(image: &Tensor, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        if image.shape().len() != 3 || image.shape()[0] != 3 || image.is_empty() {
            return Err(Error::invalid(format!(
                "expected an RGB [3,H,W] image, got {:?}",
                image.shape()
            )));
        }
        let image = prepare_image(image, &cfg.pyramid);
        let (_, h, w) = image.chw();
        let spec = PyramidSpec::plan(&cfg.pyramid, (h, w))?;
        if cfg.k > spec.stage_count() {
            return Err(Error::invalid(format!(
                "window k = {} exceeds the {} planned stages",
                cfg.k,
                spec.stage_count()
            )));
        }
        let pyramid = build_pyramid(&image, &spec)?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut aug_rng = Rng::seed_from_u64(cfg.augment.seed.unwrap_or(cfg.seed));
        aug_rng.set_stream(1);
        let generator = GrowingGenerator::new(cfg.channels, cfg.noise_amp, spec.resolutions.clone(), &mut rng)?;
        let critic = PatchCritic::new(cfg.channels, &mut rng)?;
        let state = TrainState {
            completed_stages: 0,
            rng: RngState::capture(&rng),
            aug_rng: RngState::capture(&aug_rng),
            history: Vec::new(),
        };
        Ok(Trainer {
            cfg,
            spec,
            pyramid,
            generator,
            critic,
            state,
            rng,
            aug_rng,
        })
    }

    /// Reassembles a trainer from persisted parts.
    pub fn from_parts(
        cfg: TrainConfig,
        spec: PyramidSpec,
        image: &Tensor,
        generator: GrowingGenerator,
        critic: PatchCritic,
        state: TrainState,
    ) -> Result<Trainer> {
        let pyramid = build_pyramid(image, &spec)?;
        if generator.stage_count() != state.completed_stages.max(1) {
            return Err(Error::invalid(format!(
                "generator has {} stages but {} are recorded as complete",
                generator.stage_count(),
                state.completed_stages
            )));
        }
        let rng = state.rng.restore()?;
        let aug_rng = state.aug_rng.restore()?;
        Ok(Trainer {
            cfg,
            spec,
            pyramid,
            generator,
            critic,
            state,
            rng,
            aug_rng,
        })
    }

    /// The full-resolution training image.
    pub fn image(&self) -> &Tensor {
        self.pyramid.top()
    }

    pub fn is_complete(&self) -> bool {
        self.state.completed_stages == self.spec.stage_count()
    }

    /// Grows the models if needed and trains the next stage.
    pub fn train_next_stage(&mut self) -> Result<&StageLog> {
        let n = self.state.completed_stages;
        if n >= self.spec.stage_count() {
            return Err(Error::invalid("all stages are already trained"));
        }
        if n > 0 {
            self.generator.grow(&mut self.rng)?;
            self.critic = warm_start_critic(&self.critic);
        }
        self.train_stage(n)?;
        self.state.completed_stages = n + 1;
        self.sync_rng_state();
        Ok(self.state.history.last().expect("stage log just pushed"))
    }

    /// Trains every remaining stage.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_complete() {
            self.train_next_stage()?;
        }
        Ok(())
    }

    /// Runs `iters_per_stage` iterations at the generator's current stage.
    pub fn train_stage(&mut self, n: usize) -> Result<()> {
        if self.generator.current_stage() != n {
            return Err(Error::Internal(format!(
                "training stage {n} but the generator is at stage {}",
                self.generator.current_stage()
            )));
        }
        let iters = self.cfg.iters_per_stage;
        self.optimize(n, Phase::Train, iters, AdvInput::Sampled)
    }

    /// Continues training the top window with the naive composite as the
    /// adversarial input. The reconstruction term is unchanged.
    pub fn fine_tune(&mut self, naive: &Tensor, iters: usize) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::invalid("fine-tuning needs a fully trained model"));
        }
        let full = self.spec.full();
        if naive.shape() != [3, full.0, full.1] {
            return Err(Error::invalid(format!(
                "naive image {:?} does not match the training resolution {}x{}",
                naive.shape(),
                full.0,
                full.1
            )));
        }
        let naive0 = resize(naive, self.spec.resolutions[0]);
        let n = self.generator.current_stage();
        self.optimize(n, Phase::FineTune, iters, AdvInput::Fixed(&naive0))?;
        self.sync_rng_state();
        Ok(())
    }

    fn sync_rng_state(&mut self) {
        self.state.rng = RngState::capture(&self.rng);
        self.state.aug_rng = RngState::capture(&self.aug_rng);
    }

    fn next_input(&mut self, adv: &AdvInput<'_>) -> Tensor {
        match adv {
            AdvInput::Fixed(t) => (*t).clone(),
            AdvInput::Sampled => sample_generator_input(
                self.cfg.task,
                &self.pyramid,
                &self.cfg.augment,
                &mut self.rng,
                &mut self.aug_rng,
            ),
        }
    }

    fn group_params(&self, group: Group) -> Vec<Var> {
        match group {
            Group::Stage(s) => self.generator.stage_params(s).into_iter().cloned().collect(),
            Group::Head => self.generator.head_params().into_iter().cloned().collect(),
        }
    }

    fn group_params_mut(&mut self, group: Group) -> Vec<&mut Var> {
        match group {
            Group::Stage(s) => self.generator.stage_params_mut(s),
            Group::Head => self.generator.head_params_mut(),
        }
    }

    fn optimize(&mut self, n: usize, phase: Phase, iters: usize, adv_input: AdvInput<'_>) -> Result<()> {
        let window = trainable_window(n, self.cfg.k);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        // Fresh moments for every group whenever the window moves.
        let mut groups: Vec<(Group, Option<usize>, Adam)> = window
            .iter()
            .rev()
            .enumerate()
            .map(|(j, &s)| (Group::Stage(s), Some(j), Adam::new(lr_for_depth(j, &self.cfg), b1, b2)))
            .collect();
        groups.push((Group::Head, None, Adam::new(self.cfg.eta, b1, b2)));
        let mut critic_opt = Adam::new(self.cfg.eta, b1, b2);

        let mut log = StageLog {
            stage: n,
            phase,
            frozen: (0..window[0]).collect(),
            window: window.clone(),
            learning_rates: groups
                .iter()
                .map(|(g, depth, opt)| GroupLr {
                    group: g.label(),
                    depth: *depth,
                    lr: opt.lr,
                })
                .collect(),
            critic_lr: critic_opt.lr,
            losses: Vec::with_capacity(iters),
        };

        let weights = self.cfg.loss_weights();
        let real = self.pyramid.level(n).clone();
        let x0 = self.pyramid.base().clone();
        let divergence = |iteration: usize, what: String| Error::Divergence {
            stage: n,
            iteration,
            what,
        };

        for it in 0..iters {
            let mut last_critic = 0.0f64;
            for _ in 0..self.cfg.d_steps {
                let input = self.next_input(&adv_input);
                let fake = self
                    .generator
                    .forward(&Var::constant(input), Noise::Sampled(&mut self.rng))?
                    .value()
                    .clone();
                let mix: f32 = self.rng.gen();
                let loss = critic_loss(&self.critic, &real, &fake, weights.gp_lambda, mix)?;
                let value = loss.total.item();
                if !value.is_finite() {
                    return Err(divergence(it, format!("critic loss is {value}")));
                }
                last_critic = value as f64;
                let params: Vec<Var> = self.critic.params().into_iter().cloned().collect();
                let refs: Vec<&Var> = params.iter().collect();
                let grads = grad(&loss.total, &refs, false);
                critic_opt.step(&mut self.critic.params_mut(), &grads);
            }

            let mut record = None;
            for _ in 0..self.cfg.g_steps {
                let input = self.next_input(&adv_input);
                let fake = self
                    .generator
                    .forward(&Var::constant(input), Noise::Sampled(&mut self.rng))?;
                let adv = generator_adv_loss(&self.critic, &fake)?;
                let rec = reconstruction_loss(&self.generator, &x0, &real)?;
                let (adv_v, rec_v) = (adv.item() as f64, rec.item() as f64);
                let total_v =
                    generator_total_loss(adv_v, rec_v, &weights).map_err(|e| divergence(it, e.to_string()))?;
                let total = generator_objective(&adv, &rec, &weights);

                let mut wrt = Vec::new();
                let mut spans = Vec::with_capacity(groups.len());
                for (group, _, opt) in &groups {
                    let start = wrt.len();
                    if opt.lr != 0.0 {
                        wrt.extend(self.group_params(*group));
                    }
                    spans.push(start..wrt.len());
                }
                let refs: Vec<&Var> = wrt.iter().collect();
                let grads = grad(&total, &refs, false);
                for (i, span) in spans.into_iter().enumerate() {
                    if span.is_empty() {
                        continue;
                    }
                    let group = groups[i].0;
                    let mut params = self.group_params_mut(group);
                    groups[i].2.step(&mut params, &grads[span]);
                }
                record = Some(LossRecord {
                    iteration: it,
                    critic_loss: last_critic,
                    adv: adv_v,
                    rec: rec_v,
                    total: total_v,
                });
            }
            log.losses.push(record.expect("g_steps >= 1"));
        }
        self.state.history.push(log);
        Ok(())
    }

    /// Reconstruction loss of the current model at its top stage.
    pub fn reconstruction_loss(&self) -> Result<f64> {
        let n = self.generator.current_stage();
        Ok(reconstruction_loss(&self.generator, self.pyramid.base(), self.pyramid.level(n))?.item() as f64)
    }

    /// Mean critic score of `image` under the current critic.
    pub fn critic_score(&self, image: &Tensor) -> Result<f64> {
        Ok(self.critic.score_map(&Var::constant(image.clone()))?.mean().item() as f64)
    }
}

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::schedule::lr_schedule;
use crate::data::{batch, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, BetaMode, LossTerms, LossWeights};
use crate::metrics::{summarize, BinaryMask, HausdorffVariant, MetricSummary};
use crate::net::{forward, init_parameters, predict, ForwardOutput, NetworkSpec};
use crate::params::{BoundParams, ParameterStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub beta_mode: BetaMode,
    /// Parameter initialisation seed.
    pub seed: u64,
    /// Seed of the per-epoch data shuffle, independent of `seed`.
    pub shuffle_seed: u64,
    /// Evaluate every this many epochs (and after the last). 0 disables.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (and after the last).
    pub checkpoint_every: usize,
    pub hausdorff: HausdorffVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha0: 1e-3,
            epochs: 300,
            batch_size: 8,
            weights: LossWeights::default(),
            beta_mode: BetaMode::PerBatch,
            seed: 0,
            shuffle_seed: 1,
            eval_every: 10,
            checkpoint_path: None,
            checkpoint_every: 10,
            hausdorff: HausdorffVariant::Max,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!("alpha0 must be > 0, got {}", self.alpha0)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Mean loss components over one epoch's batches plus optional evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub dice_main: f64,
    pub dice_shape: f64,
    pub edge: f64,
    pub eval: Option<MetricSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub params: ParameterStore,
}

/// Objective evaluated on a forward pass against the batch labels.
pub type Objective<'a> = dyn Fn(&mut Tape, &ForwardOutput, &Tensor) -> Result<LossTerms> + 'a;

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub params: ParameterStore,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(spec: NetworkSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_parameters(&spec, config.seed)?;
        let adam = AdamState::new(&params);
        Ok(Trainer { spec, config, params, adam, epoch: 0 })
    }

    pub fn from_checkpoint(spec: NetworkSpec, config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let (epoch, params, adam) = ckpt.into_state(&spec.layout())?;
        if epoch > config.epochs {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {epoch}, beyond the configured {} epochs",
                config.epochs
            )));
        }
        Ok(Trainer { spec, config, params, adam, epoch })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_state(self.epoch, &self.params, &self.adam)
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.shuffle_seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Run one epoch with the composite loss from the config.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochLog> {
        let objective = self.default_objective();
        self.run_epoch_with(data, &objective)
    }

    /// Run one epoch with an arbitrary objective.
    pub fn run_epoch_with(&mut self, data: &[Sample], objective: &Objective) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::invalid("train", "dataset is empty"));
        }
        if self.is_done() {
            return Err(Error::invalid("train", "all configured epochs are complete"));
        }
        let lr = lr_schedule(self.epoch, self.config.alpha0, self.config.epochs)?;
        let order = self.epoch_order(data.len());
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let members: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (x, y) = batch(&members)?;
            let mut tape = Tape::new();
            let mut bound = BoundParams::new(&self.params, true);
            let xv = tape.constant(x);
            let out = forward(&mut tape, &self.spec, &mut bound, xv)?;
            let terms = objective(&mut tape, &out, &y)?;
            if !terms.total_value.is_finite() {
                return Err(Error::NonFinite { context: format!("loss at epoch {}", self.epoch + 1) });
            }
            let grads = tape.backward(terms.total)?;
            let binding = bound.into_binding();
            binding.write_grads(&grads, &mut self.params)?;
            drop((grads, tape));
            self.adam.step(&mut self.params, lr)?;
            sums[0] += terms.total_value;
            sums[1] += terms.dice_main;
            sums[2] += terms.dice_shape;
            sums[3] += terms.edge;
            batches += 1;
        }
        self.epoch += 1;
        let b = batches as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            loss_total: sums[0] / b,
            dice_main: sums[1] / b,
            dice_shape: sums[2] / b,
            edge: sums[3] / b,
            eval: None,
        })
    }

    fn wants_eval(&self) -> bool {
        let every = self.config.eval_every;
        every > 0 && (self.epoch.is_multiple_of(every) || self.is_done())
    }

    fn wants_checkpoint(&self) -> bool {
        let every = self.config.checkpoint_every.max(1);
        self.config.checkpoint_path.is_some() && (self.epoch.is_multiple_of(every) || self.is_done())
    }

    /// Train until the configured number of epochs is reached.
    pub fn run(&mut self, train: &[Sample], eval: Option<&[Sample]>) -> Result<Vec<EpochLog>> {
        let objective = self.default_objective();
        self.run_with(train, eval, &objective)
    }

    pub fn run_with(
        &mut self,
        train: &[Sample],
        eval: Option<&[Sample]>,
        objective: &Objective,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.is_done() {
            logs.push(self.advance(train, eval, objective)?);
        }
        Ok(logs)
    }

    /// One epoch followed by the evaluation and checkpoint due at its end.
    /// A failed epoch leaves the last written checkpoint untouched.
    pub fn advance(&mut self, train: &[Sample], eval: Option<&[Sample]>, objective: &Objective) -> Result<EpochLog> {
        let mut log = self.run_epoch_with(train, objective)?;
        if self.wants_eval() {
            let set = eval.unwrap_or(train);
            log.eval = Some(evaluate(&self.spec, &self.params, set, self.config.hausdorff)?);
        }
        if self.wants_checkpoint() {
            let path = self.config.checkpoint_path.as_ref().expect("checked in wants_checkpoint");
            save_checkpoint(path, &self.checkpoint()?)?;
        }
        Ok(log)
    }

    /// Composite-loss objective from the config.
    pub fn default_objective(&self) -> impl Fn(&mut Tape, &ForwardOutput, &Tensor) -> Result<LossTerms> {
        let weights = self.config.weights;
        let mode = self.config.beta_mode;
        move |tape: &mut Tape, out: &ForwardOutput, y: &Tensor| total_loss(tape, out, y, &weights, mode)
    }

    pub fn into_model(self) -> TrainedModel {
        TrainedModel { spec: self.spec, params: self.params }
    }
}

/// Train from scratch with the composite loss.
pub fn train(
    data: &[Sample],
    eval: Option<&[Sample]>,
    config: &TrainConfig,
    spec: &NetworkSpec,
) -> Result<(TrainedModel, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(spec.clone(), config.clone())?;
    let logs = trainer.run(data, eval)?;
    Ok((trainer.into_model(), logs))
}

/// Predicted probabilities for every sample, batched to bound memory.
pub fn predict_all(spec: &NetworkSpec, params: &ParameterStore, data: &[Sample]) -> Result<Vec<Tensor>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(CHUNK) {
        let members: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = batch(&members)?;
        let pred = predict(spec, params, &x)?;
        for i in 0..chunk.len() {
            out.push(pred.y_prob.sample(i));
        }
    }
    Ok(out)
}

/// Dice / Jaccard / Hausdorff of thresholded predictions against labels.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParameterStore,
    data: &[Sample],
    variant: HausdorffVariant,
) -> Result<MetricSummary> {
    let probs = predict_all(spec, params, data)?;
    let mut preds = Vec::with_capacity(data.len());
    let mut truths = Vec::with_capacity(data.len());
    for (p, s) in probs.iter().zip(data) {
        let (h, w) = (s.height(), s.width());
        preds.push(BinaryMask::from_probs(h, w, p.data())?);
        truths.push(BinaryMask::from_probs(h, w, s.mask.data())?);
    }
    summarize(&preds, &truths, variant)
}

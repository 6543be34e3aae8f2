//! Pretraining and fine-tuning loops.
//!
//! All randomness derives from `config.seed`. Stream 0 of the seeded
//! generator drives initialization and training noise and is saved in
//! checkpoints; epoch shuffles and the data split use their own streams so
//! that a run resumed mid-epoch sees the same batches.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{check_echo, Objective, TrainingConfig, ARCHITECTURE_KEYS};
use super::data::LabeledSet;
use super::metrics::MetricsRow;
use crate::autodiff::{cosine_lr, Bound, Graph, Mlp, NodeId, OptimizerState, ParamStore, Tensor};
use crate::backbone::Encoder;
use crate::baselines::{baseline_step, readout_on, BaselineModel};
use crate::ddm::{pretrain_step, DdmModel, ScoreNetConfig};
use crate::error::{Error, Result};
use crate::geom::MoleculeGeometry;

const SPLIT_STREAM: u64 = u64::MAX;
const PRETRAIN_EPOCH_STREAM: u64 = 1;
const FINETUNE_EPOCH_STREAM: u64 = 1 << 40;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Indices `0..n` shuffled with the generator for `stream`.
fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, stream));
    idx
}

/// Batch size and full batches per epoch; a trailing partial batch is
/// dropped.
fn batching(n: usize, batch_size: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    let b = batch_size.min(n);
    Ok((b, n / b))
}

fn seconds(config: &TrainingConfig, start: Instant) -> f64 {
    if config.wall_clock {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// The trainable model behind each pretraining objective.
#[derive(Debug, Clone)]
pub enum PretrainModel {
    Ddm(DdmModel),
    Baseline(BaselineModel),
    Untrained(Encoder),
}

impl PretrainModel {
    pub fn build(config: &TrainingConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match config.objective {
            Objective::Ddm => PretrainModel::Ddm(DdmModel::new(
                store,
                &config.encoder,
                &ScoreNetConfig::for_encoder(&config.encoder),
                rng,
            )?),
            Objective::Baseline(kind) => {
                PretrainModel::Baseline(BaselineModel::new(store, &config.encoder, &config.baseline(kind), rng)?)
            }
            Objective::None => PretrainModel::Untrained(Encoder::new(store, &config.encoder, rng)?),
        })
    }
}

/// Runs (or resumes) pretraining, handing each step's metrics to `sink`;
/// returns the final checkpoint.
pub fn run_pretrain(
    config: &TrainingConfig,
    dataset: &[MoleculeGeometry],
    resume: Option<&Checkpoint>,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<Checkpoint> {
    run_pretrain_until(config, dataset, resume, u64::MAX, sink)
}

/// [`run_pretrain`] that stops once `stop` steps are done, leaving a
/// checkpoint the full run can resume from.
pub fn run_pretrain_until(
    config: &TrainingConfig,
    dataset: &[MoleculeGeometry],
    resume: Option<&Checkpoint>,
    stop: u64,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    let start = Instant::now();
    let echo = config.to_text();
    let mut rng = stream_rng(config.seed, 0);
    let mut params = ParamStore::new();
    let model = PretrainModel::build(config, &mut params, &mut rng)?;
    let mut optimizer = OptimizerState::new(&params);
    let mut step = 0u64;
    if let Some(ck) = resume {
        let keys: Vec<&str> = config
            .entries()
            .iter()
            .map(|(k, _)| *k)
            .filter(|k| *k != "wall_clock")
            .collect();
        check_echo(&ck.config_echo, config, &keys)?;
        ck.restore_params(&mut params, "")?;
        optimizer = ck.restore_optimizer(&params)?;
        rng = ck.rng.restore();
        step = ck.step;
    }
    if let PretrainModel::Untrained(_) = model {
        return Ok(Checkpoint::capture(echo, step, &rng, &params, &optimizer));
    }

    let (batch_size, per_epoch) = batching(dataset.len(), config.batch_size)?;
    let total = (config.epochs * per_epoch) as u64;
    if step > total {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint step {step} beyond run length {total}"
        )));
    }
    let ddm = config.ddm()?;
    while step < total.min(stop) {
        let epoch = step / per_epoch as u64;
        let k = (step % per_epoch as u64) as usize;
        let order = shuffled(dataset.len(), config.seed, PRETRAIN_EPOCH_STREAM + epoch);
        let batch: Vec<MoleculeGeometry> = order[k * batch_size..(k + 1) * batch_size]
            .iter()
            .map(|&i| dataset[i].clone())
            .collect();
        let lr = cosine_lr(step, total, config.lr, config.lr_min)?;
        let (loss, levels) = match &model {
            PretrainModel::Ddm(m) => {
                let r = pretrain_step(m, &mut params, &mut optimizer, &batch, &ddm, lr, &mut rng)?;
                (r.loss, r.per_level)
            }
            PretrainModel::Baseline(m) => (
                baseline_step(m, &mut params, &mut optimizer, &batch, lr, &mut rng)?,
                Vec::new(),
            ),
            PretrainModel::Untrained(_) => unreachable!("returned above"),
        };
        sink(&MetricsRow {
            step,
            loss,
            lr,
            seconds: seconds(config, start),
            levels,
        })?;
        step += 1;
    }
    Ok(Checkpoint::capture(echo, step, &rng, &params, &optimizer))
}

/// Train/validation/test index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 split of a seeded shuffle.
pub fn split_indices(n: usize, seed: u64) -> Result<Split> {
    let train = n * 8 / 10;
    let val = n / 10;
    let test = n - train - val;
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::invalid(format!("{n} samples cannot fill an 80/10/10 split")));
    }
    let order = shuffled(n, seed, SPLIT_STREAM);
    Ok(Split {
        train: order[..train].to_vec(),
        val: order[train..train + val].to_vec(),
        test: order[train + val..].to_vec(),
    })
}

/// Encoder with a scalar regression head on the mean readout.
#[derive(Debug, Clone)]
pub struct FinetuneModel {
    pub encoder: Encoder,
    pub head: Mlp,
}

impl FinetuneModel {
    pub fn new(config: &TrainingConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(store, &config.encoder, rng)?;
        let d = config.encoder.embedding_dim;
        let head = Mlp::new(store, "finetune.head", &[d, config.head_hidden, 1], true, rng)?;
        Ok(Self { encoder, head })
    }

    pub fn predict_on(&self, g: &mut Graph, p: &Bound, mol: &MoleculeGeometry) -> Result<NodeId> {
        let h = self.encoder.encode_on(g, p, mol, None)?;
        let z = readout_on(g, h)?;
        let y = self.head.forward(g, p, z)?;
        g.reshape(y, &[])
    }

    pub fn predict(&self, params: &ParamStore, mol: &MoleculeGeometry) -> Result<f64> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let y = self.predict_on(&mut g, &p, mol)?;
        Ok(g.value(y).item())
    }

    /// Mean absolute error over the indexed samples.
    pub fn mae(&self, params: &ParamStore, data: &LabeledSet, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::invalid("no samples to evaluate"));
        }
        let mut sum = 0.0;
        for &i in idx {
            sum += (self.predict(params, &data.conformers[i])? - data.labels[i]).abs();
        }
        Ok(sum / idx.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub split: Split,
    pub val_mae: f64,
    pub test_mae: f64,
    pub checkpoint: Checkpoint,
}

/// Trains head and encoder end-to-end on the squared error of the training
/// split, starting the encoder from `init` when given.
pub fn run_finetune(
    config: &TrainingConfig,
    init: Option<&Checkpoint>,
    data: &LabeledSet,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if data.conformers.len() != data.labels.len() {
        return Err(Error::invalid(format!(
            "{} conformers but {} labels",
            data.conformers.len(),
            data.labels.len()
        )));
    }
    let start = Instant::now();
    let split = split_indices(data.labels.len(), config.seed)?;
    let mut rng = stream_rng(config.seed, 0);
    let mut params = ParamStore::new();
    let model = FinetuneModel::new(config, &mut params, &mut rng)?;
    if let Some(ck) = init {
        check_echo(&ck.config_echo, config, ARCHITECTURE_KEYS)?;
        ck.restore_params(&mut params, "encoder.")?;
    }
    let mut optimizer = OptimizerState::new(&params);

    let (batch_size, per_epoch) = batching(split.train.len(), config.batch_size)?;
    let total = (config.finetune_epochs * per_epoch) as u64;
    for step in 0..total {
        let epoch = step / per_epoch as u64;
        let k = (step % per_epoch as u64) as usize;
        let order = shuffled(split.train.len(), config.seed, FINETUNE_EPOCH_STREAM + epoch);
        let lr = cosine_lr(step, total, config.lr, config.lr_min)?;

        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let mut sum: Option<NodeId> = None;
        for &o in &order[k * batch_size..(k + 1) * batch_size] {
            let i = split.train[o];
            let y = model.predict_on(&mut g, &p, &data.conformers[i])?;
            let t = g.constant(Tensor::scalar(data.labels[i]));
            let r = g.sub(y, t)?;
            let q = g.square(r)?;
            sum = Some(match sum {
                Some(acc) => g.add(acc, q)?,
                None => q,
            });
        }
        let loss = g.scale(sum.expect("non-empty batch"), 1.0 / batch_size as f64)?;
        let grads = g.backward(loss)?;
        let value = g.value(loss).item();
        optimizer.adam_step(&mut params, &p.gradients(&g, &grads), lr)?;
        sink(&MetricsRow {
            step,
            loss: value,
            lr,
            seconds: seconds(config, start),
            levels: Vec::new(),
        })?;
    }
    let val_mae = model.mae(&params, data, &split.val)?;
    let test_mae = model.mae(&params, data, &split.test)?;
    let checkpoint = Checkpoint::capture(config.to_text(), total, &rng, &params, &optimizer);
    Ok(FinetuneOutcome {
        split,
        val_mae,
        test_mae,
        checkpoint,
    })
}

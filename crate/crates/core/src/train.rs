//! The training loop: hierarchical (one group of units per step, optimizer
//! state paged to the device only while its group trains) and the
//! full-parameter baseline.

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, Batch, BatchStream, Dataset, Example, InputShape, Targets, TaskSpec};
use crate::error::{Error, Result};
use crate::memory::{
    move_state_to_device, move_state_to_host, Category, MemoryLedger, MemoryReport, Placement, Precision,
};
use crate::model::{Arch, LayeredModel, ParamSet};
use crate::optim::{Hyperparams, OptimizerKind, OptimizerState};
use crate::schedule::{Decay, GroupSchedule, LrSchedule, Strategy};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Hift,
    Fpft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub strategy: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub arch: Arch,
    pub task: TaskSpec,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub strategy: Strategy,
    /// Units per group.
    #[serde(default = "one")]
    pub m: usize,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub hyper: Hyperparams,
    pub lr: f64,
    /// Fraction of the schedule spent warming up.
    #[serde(default)]
    pub warmup: f64,
    #[serde(default)]
    pub decay: Decay,
    #[serde(default)]
    pub precision: Precision,
    pub batch_size: usize,
    /// Step budget `T`.
    pub steps: usize,
    #[serde(default)]
    pub seeds: Seeds,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Groups per sweep; 1 for the full-parameter baseline.
    pub fn k(&self) -> usize {
        match self.mode {
            Mode::Hift => crate::schedule::group_count(self.arch.units(), self.m),
            Mode::Fpft => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.hyper.validate()?;
        let n = self.arch.units();
        if self.mode == Mode::Hift && !(1..=n).contains(&self.m) {
            return Err(Error::config(format!("m={} outside 1..={n}", self.m)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.steps < self.k() {
            return Err(Error::config(format!(
                "{} steps do not cover one sweep of {} groups",
                self.steps,
                self.k()
            )));
        }
        if !self.task.is_classification() && self.arch.outputs != 1 {
            return Err(Error::config("regression tasks need exactly one output"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    fn input_shape(&self) -> InputShape {
        InputShape {
            vocab: self.arch.vocab,
            seq_len: self.arch.seq_len,
            classes: self.arch.outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    /// 0-based sweep the step belongs to.
    pub sweep: usize,
    pub group: String,
    pub loss: f64,
    pub lr: f64,
    pub trainable_params: usize,
    /// Device bytes right after backward, when the step's footprint peaks.
    pub device_bytes: u64,
    /// The param + grad + state + master_copy part of `device_bytes`.
    pub pgs_device_bytes: u64,
    /// Bytes moved between host and device in either direction.
    pub transfer_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub initial_loss: f64,
    /// Mean loss over the last sweep.
    pub final_train_loss: f64,
    pub eval_loss: f64,
    /// Held-out accuracy for classification tasks.
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: Option<String>,
    pub mode: Mode,
    pub task: String,
    pub k: usize,
    /// Units per group, in the order of the first sweep.
    pub group_sizes: Vec<usize>,
    pub strategy_seed: Option<u64>,
    pub total_params: usize,
    pub param_bytes: u64,
    pub steps: Vec<StepRecord>,
    pub metrics: FinalMetrics,
    pub memory: MemoryReport,
    pub config: TrainConfig,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::contract(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// One run's mutable state. [`Trainer::step`] executes a single iteration
/// so tests can inspect the model between steps.
pub struct Trainer {
    config: TrainConfig,
    model: LayeredModel,
    state: OptimizerState,
    ledger: MemoryLedger,
    schedule: Option<GroupSchedule>,
    lr: LrSchedule,
    data: Dataset,
    stream: BatchStream,
    records: Vec<StepRecord>,
    group_sizes: Vec<usize>,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = load_dataset(&config.task, config.input_shape(), config.seeds.data)?;
        let model = LayeredModel::build(&config.arch, config.seeds.init, config.precision.param_dtype())?;
        Trainer::with_parts(config, model, data)
    }

    /// Starts from an existing model and dataset (for resumed or shared runs).
    pub fn with_parts(config: &TrainConfig, model: LayeredModel, data: Dataset) -> Result<Self> {
        config.validate()?;
        if model.arch() != &config.arch {
            return Err(Error::config("model architecture differs from the config"));
        }
        let mut ledger = MemoryLedger::new();
        ledger.alloc(Category::Param, Placement::Device, model.total_bytes() as u64);
        let (schedule, initial, total_sweeps) = match config.mode {
            Mode::Hift => {
                let s = GroupSchedule::init_queue(&model.unit_ids(), config.strategy, config.m, config.seeds.strategy)?;
                let sweeps = config.steps.div_ceil(s.k());
                (Some(s), Placement::Host, sweeps)
            }
            Mode::Fpft => (None, Placement::Device, config.steps),
        };
        let group_sizes = match &schedule {
            Some(s) => s.peek_sweep().iter().map(Vec::len).collect(),
            None => vec![model.n_units()],
        };
        let state = OptimizerState::new(
            config.optimizer,
            config.hyper.clone(),
            config.precision,
            &model,
            initial,
            &mut ledger,
        )?;
        let lr = LrSchedule::new(config.lr, config.warmup, config.decay, total_sweeps)?;
        let stream = BatchStream::new(data.train.len(), config.batch_size, config.seeds.data)?;
        Ok(Trainer {
            config: config.clone(),
            model,
            state,
            ledger,
            schedule,
            lr,
            data,
            stream,
            records: Vec::with_capacity(config.steps),
            group_sizes,
        })
    }

    pub fn model(&self) -> &LayeredModel {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.state
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn schedule(&self) -> Option<&GroupSchedule> {
        self.schedule.as_ref()
    }

    pub fn steps_done(&self) -> usize {
        self.records.len()
    }

    /// Runs one iteration and returns its record.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let step = self.records.len() + 1;
        let sweep = self.lr.sweep_index();
        let lr = self.lr.lr_value();
        self.ledger.begin_step(step);

        self.model.freeze_all();
        let batch = self.stream.next_batch(&self.data.train);
        let (active, group) = match &mut self.schedule {
            Some(s) => {
                let ids = s.next_group();
                let names: Vec<&str> = ids.iter().map(|l| l.name.as_str()).collect();
                (self.model.select_parameters(&ids)?, names.join("+"))
            }
            None => (self.model.all_params(), "all".to_string()),
        };
        self.model.set_trainable(&active, true)?;
        self.state.update_optimizer_parameter(&active, &mut self.ledger)?;

        let mut tape = Tape::new(self.config.precision.compute_dtype());
        let out = self.model.forward(&mut tape, &batch.tokens, batch.size)?;
        let loss_var = loss(&mut tape, out, &batch)?;
        let loss = tape.value(loss_var)[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }

        let paged = self.schedule.is_some();
        let mut transfer = 0;
        if paged {
            transfer += move_state_to_device(&mut self.ledger, &mut self.state, &active)?;
        }

        let activations = tape.activation_bytes() as u64;
        self.ledger.alloc(Category::Residual, Placement::Device, activations);
        let stats = tape.backward(loss_var, &mut self.model)?;
        let grad_bytes: u64 = active
            .iter()
            .filter_map(|id| {
                let t = self.model.tensor(id);
                t.grad().map(|g| (g.len() * t.dtype().size_bytes()) as u64)
            })
            .sum();
        self.ledger.alloc(Category::Grad, Placement::Device, grad_bytes);
        let scratch = stats.peak_intermediate_bytes as u64;
        self.ledger.alloc(Category::Residual, Placement::Device, scratch);
        let device_bytes = self.ledger.device_total();
        let pgs_device_bytes = self.ledger.device_pgs();
        self.ledger
            .free(Category::Residual, Placement::Device, activations + scratch)?;

        if let Some(max_norm) = self.config.grad_clip {
            clip_grads(&mut self.model, &active, max_norm);
        }
        self.state.optimizer_step(&mut self.model, lr)?;
        let freed = self.model.clear_grads() as u64;
        self.ledger.free(Category::Grad, Placement::Device, freed)?;

        match &self.schedule {
            Some(s) => {
                transfer += move_state_to_host(&mut self.ledger, &mut self.state, &active)?;
                if s.is_all_layer_update() {
                    self.lr.advance();
                }
            }
            None => self.lr.advance(),
        }

        self.records.push(StepRecord {
            step,
            sweep,
            group,
            loss,
            lr,
            trainable_params: active.element_count(&self.model),
            device_bytes,
            pgs_device_bytes,
            transfer_bytes: transfer,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Loss and (for classification) accuracy on the held-out split.
    pub fn evaluate(&self) -> Result<(f64, Option<f64>)> {
        evaluate(&self.model, &self.data.eval, self.config.precision)
    }

    pub fn run(mut self) -> Result<RunReport> {
        while self.records.len() < self.config.steps {
            self.step()?;
        }
        self.finish()
    }

    /// Builds the report from the steps run so far.
    pub fn finish(self) -> Result<RunReport> {
        let (eval_loss, eval_accuracy) = self.evaluate()?;
        let k = self.config.k();
        let tail = &self.records[self.records.len().saturating_sub(k)..];
        let metrics = FinalMetrics {
            initial_loss: self.records.first().map_or(f64::NAN, |r| r.loss),
            final_train_loss: tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64,
            eval_loss,
            eval_accuracy,
        };
        Ok(RunReport {
            name: self.config.name.clone(),
            mode: self.config.mode,
            task: self.config.task.name().to_string(),
            k,
            group_sizes: self.group_sizes,
            strategy_seed: self.schedule.as_ref().and_then(GroupSchedule::seed),
            total_params: self.model.total_params(),
            param_bytes: self.model.total_bytes() as u64,
            steps: self.records,
            metrics,
            memory: self.ledger.peak_report()?,
            config: self.config,
        })
    }
}

fn loss(tape: &mut Tape, out: Var, batch: &Batch) -> Result<Var> {
    match &batch.targets {
        Targets::Classes(labels) => tape.softmax_cross_entropy(out, labels),
        Targets::Values(values) => tape.mse(out, values),
    }
}

fn clip_grads(model: &mut LayeredModel, active: &ParamSet, max_norm: f64) {
    let sq: f64 = active
        .iter()
        .filter_map(|id| model.tensor(id).grad())
        .flatten()
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for id in active.iter() {
            if let Some(g) = model.tensor_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// Mean loss over `examples` and, for classification, argmax accuracy.
pub fn evaluate(model: &LayeredModel, examples: &[Example], precision: Precision) -> Result<(f64, Option<f64>)> {
    if examples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let outputs = model.arch().outputs;
    let (mut loss_sum, mut correct, mut classification) = (0.0, 0usize, false);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs);
        let mut tape = Tape::new(precision.compute_dtype());
        let out = model.forward(&mut tape, &batch.tokens, batch.size)?;
        let l = loss(&mut tape, out, &batch)?;
        loss_sum += tape.value(l)[0] * batch.size as f64;
        if let Targets::Classes(labels) = &batch.targets {
            classification = true;
            let logits = tape.value(out);
            for (row, &y) in logits.chunks(outputs).zip(labels) {
                let pred = (0..outputs).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                correct += usize::from(pred == y);
            }
        }
    }
    let n = examples.len() as f64;
    Ok((loss_sum / n, classification.then(|| correct as f64 / n)))
}

pub fn train_hift(config: &TrainConfig) -> Result<RunReport> {
    if config.mode != Mode::Hift {
        return Err(Error::config("train_hift needs mode = \"hift\""));
    }
    Trainer::new(config)?.run()
}

pub fn train_fpft(config: &TrainConfig) -> Result<RunReport> {
    if config.mode != Mode::Fpft {
        return Err(Error::config("train_fpft needs mode = \"fpft\""));
    }
    Trainer::new(config)?.run()
}

pub fn train(config: &TrainConfig) -> Result<RunReport> {
    Trainer::new(config)?.run()
}

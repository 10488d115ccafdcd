//! Gradient-based optimizers whose per-parameter state can live on either
//! side of the simulated host/device boundary.
//!
//! State is allocated lazily, the first time a parameter appears in an
//! active set. Step counts are kept per parameter, so a parameter updated
//! once every `k` global steps is bias-corrected by its own update count.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{Category, MemoryLedger, Placement, Precision};
use crate::model::{LayeredModel, ParamSet};
use crate::tensor::{numel, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Sgdm,
    Adagrad,
    Adafactor,
    AdamW,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Sgd,
        OptimizerKind::Sgdm,
        OptimizerKind::Adagrad,
        OptimizerKind::Adafactor,
        OptimizerKind::AdamW,
    ];
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Sgdm => "sgdm",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adafactor => "adafactor",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW only).
    pub weight_decay: f64,
    pub momentum: f64,
    pub adafactor_eps1: f64,
    pub adafactor_eps2: f64,
    pub adafactor_clip: f64,
    /// Exponent `c` of the second-moment decay `1 - t^c`.
    pub adafactor_decay: f64,
    /// Scale the step by the parameter RMS.
    pub adafactor_scale_parameter: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.9,
            adafactor_eps1: 1e-30,
            adafactor_eps2: 1e-3,
            adafactor_clip: 1.0,
            adafactor_decay: -0.8,
            adafactor_scale_parameter: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let open01 = |x: f64| x > 0.0 && x < 1.0;
        let checks = [
            ("beta1", open01(self.beta1)),
            ("beta2", open01(self.beta2)),
            ("eps", self.eps >= 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("momentum", (0.0..1.0).contains(&self.momentum)),
            ("adafactor_eps1", self.adafactor_eps1 >= 0.0),
            ("adafactor_eps2", self.adafactor_eps2 >= 0.0),
            ("adafactor_clip", self.adafactor_clip > 0.0),
            ("adafactor_decay", self.adafactor_decay < 0.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::config(format!("hyperparameter {name} out of range"))),
            None => Ok(()),
        }
    }
}

/// Bytes of optimizer state for one parameter of `shape` stored at `dtype`.
/// Adafactor factors any parameter of rank ≥ 2 as a `(numel/last, last)`
/// matrix with one row and one column accumulator.
pub fn state_footprint(kind: OptimizerKind, shape: &[usize], dtype: DType) -> u64 {
    let n = numel(shape) as u64;
    let elem = dtype.size_bytes() as u64;
    let elems = match kind {
        OptimizerKind::Sgd => 0,
        OptimizerKind::Sgdm | OptimizerKind::Adagrad => n,
        OptimizerKind::AdamW => 2 * n,
        OptimizerKind::Adafactor => match shape {
            [] | [_] => n,
            [.., last] => n / *last as u64 + *last as u64,
        },
    };
    elems * elem
}

#[derive(Debug, Clone, PartialEq)]
enum Slots {
    Empty,
    Momentum(Vec<f64>),
    SumSq(Vec<f64>),
    Adam { m: Vec<f64>, v: Vec<f64> },
    Factored { row: Vec<f64>, col: Vec<f64> },
    Unfactored(Vec<f64>),
}

impl Slots {
    fn zeros(kind: OptimizerKind, shape: &[usize]) -> Self {
        let n = numel(shape);
        match kind {
            OptimizerKind::Sgd => Slots::Empty,
            OptimizerKind::Sgdm => Slots::Momentum(vec![0.0; n]),
            OptimizerKind::Adagrad => Slots::SumSq(vec![0.0; n]),
            OptimizerKind::AdamW => Slots::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            OptimizerKind::Adafactor => match shape {
                [] | [_] => Slots::Unfactored(vec![0.0; n]),
                [.., last] => Slots::Factored {
                    row: vec![0.0; n / last],
                    col: vec![0.0; *last],
                },
            },
        }
    }

    fn buffers(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Slots::Empty => vec![],
            Slots::Momentum(b) => vec![("momentum", b)],
            Slots::SumSq(b) => vec![("sum_sq", b)],
            Slots::Adam { m, v } => vec![("exp_avg", m), ("exp_avg_sq", v)],
            Slots::Factored { row, col } => vec![("row", row), ("col", col)],
            Slots::Unfactored(v) => vec![("exp_avg_sq", v)],
        }
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        match self {
            Slots::Empty => vec![],
            Slots::Momentum(b) => vec![("momentum", b)],
            Slots::SumSq(b) => vec![("sum_sq", b)],
            Slots::Adam { m, v } => vec![("exp_avg", m), ("exp_avg_sq", v)],
            Slots::Factored { row, col } => vec![("row", row), ("col", col)],
            Slots::Unfactored(v) => vec![("exp_avg_sq", v)],
        }
    }

    fn count(&self) -> usize {
        self.buffers().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamState {
    name: String,
    shape: Vec<usize>,
    slots: Option<Slots>,
    steps: u64,
    residency: Placement,
    master: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    hyper: Hyperparams,
    precision: Precision,
    entries: BTreeMap<usize, ParamState>,
    active: ParamSet,
}

impl OptimizerState {
    /// One entry per model parameter, all placed at `initial`. Under mixed
    /// precision this also creates the f32 master copies and books them in
    /// the ledger; slot buffers are only allocated on registration.
    pub fn new(
        kind: OptimizerKind,
        hyper: Hyperparams,
        precision: Precision,
        model: &LayeredModel,
        initial: Placement,
        ledger: &mut MemoryLedger,
    ) -> Result<Self> {
        hyper.validate()?;
        let mut entries = BTreeMap::new();
        for (id, p) in model.params().iter().enumerate() {
            let master = precision.master_dtype().map(|dt| {
                ledger.alloc(
                    Category::MasterCopy,
                    initial,
                    (p.tensor.numel() * dt.size_bytes()) as u64,
                );
                p.tensor.data().iter().map(|&v| dt.quantize(v)).collect()
            });
            entries.insert(
                id,
                ParamState {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    slots: None,
                    steps: 0,
                    residency: initial,
                    master,
                },
            );
        }
        Ok(OptimizerState {
            kind,
            hyper,
            precision,
            entries,
            active: ParamSet::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn active(&self) -> &ParamSet {
        &self.active
    }

    fn entry(&self, id: usize) -> Result<&ParamState> {
        self.entries.get(&id).ok_or_else(|| Error::Lookup {
            what: "optimizer parameter",
            name: id.to_string(),
        })
    }

    fn entry_mut(&mut self, id: usize) -> Result<&mut ParamState> {
        self.entries.get_mut(&id).ok_or_else(|| Error::Lookup {
            what: "optimizer parameter",
            name: id.to_string(),
        })
    }

    pub fn param_name(&self, id: usize) -> Result<&str> {
        Ok(&self.entry(id)?.name)
    }

    pub fn residency(&self, id: usize) -> Result<Placement> {
        Ok(self.entry(id)?.residency)
    }

    pub(crate) fn set_residency(&mut self, id: usize, to: Placement) -> Result<()> {
        self.entry_mut(id)?.residency = to;
        Ok(())
    }

    /// (state bytes, master-copy bytes) currently held for parameter `id`.
    pub fn resident_bytes(&self, id: usize) -> Result<(u64, u64)> {
        let e = self.entry(id)?;
        let state = if e.slots.is_some() {
            state_footprint(self.kind, &e.shape, self.precision.state_dtype())
        } else {
            0
        };
        let master = match (&e.master, self.precision.master_dtype()) {
            (Some(m), Some(dt)) => (m.len() * dt.size_bytes()) as u64,
            _ => 0,
        };
        Ok((state, master))
    }

    pub fn is_registered(&self, id: usize) -> bool {
        self.entries.get(&id).is_some_and(|e| e.slots.is_some())
    }

    /// Number of state buffers allocated for parameter `id`.
    pub fn slot_count(&self, id: usize) -> usize {
        self.entries
            .get(&id)
            .and_then(|e| e.slots.as_ref())
            .map_or(0, Slots::count)
    }

    pub fn step_count(&self, id: usize) -> u64 {
        self.entries.get(&id).map_or(0, |e| e.steps)
    }

    /// Sum of allocated slot bytes over all parameters.
    pub fn total_state_bytes(&self) -> u64 {
        self.entries
            .keys()
            .map(|&id| self.resident_bytes(id).map_or(0, |b| b.0))
            .sum()
    }

    /// Makes `active` the update target, allocating state for parameters seen
    /// for the first time at their entry's current placement.
    pub fn update_optimizer_parameter(&mut self, active: &ParamSet, ledger: &mut MemoryLedger) -> Result<()> {
        let kind = self.kind;
        let dtype = self.precision.state_dtype();
        for id in active.iter() {
            let e = self.entry_mut(id)?;
            if e.slots.is_none() {
                e.slots = Some(Slots::zeros(kind, &e.shape));
                ledger.alloc(Category::State, e.residency, state_footprint(kind, &e.shape, dtype));
            }
        }
        self.active = active.clone();
        Ok(())
    }

    /// Updates every active parameter in place from its gradient.
    pub fn optimizer_step(&mut self, model: &mut LayeredModel, lr: f64) -> Result<()> {
        for id in self.active.iter() {
            let e = self.entry(id)?;
            if model.tensor(id).grad().is_none() {
                return Err(Error::contract(format!("parameter {} has no gradient", e.name)));
            }
            if e.residency != Placement::Device {
                return Err(Error::Residency {
                    param: e.name.clone(),
                    msg: "optimizer state is host-resident during the update".into(),
                });
            }
            if e.slots.is_none() {
                return Err(Error::contract(format!("parameter {} was never registered", e.name)));
            }
        }
        let (kind, hyper) = (self.kind, self.hyper.clone());
        let sdt = self.precision.state_dtype();
        let ids: Vec<usize> = self.active.iter().collect();
        for id in ids {
            let e = self.entries.get_mut(&id).expect("checked above");
            let tensor = model.tensor_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let mut w: Vec<f64> = match &e.master {
                Some(m) => m.clone(),
                None => tensor.data().to_vec(),
            };
            e.steps += 1;
            let slots = e.slots.as_mut().expect("checked above");
            apply_update(kind, &hyper, slots, &e.shape, e.steps, lr, &mut w, &grad);
            for (_, buf) in slots.buffers_mut() {
                sdt.quantize_slice(buf);
            }
            if let Some(m) = &mut e.master {
                sdt.quantize_slice(&mut w);
                m.copy_from_slice(&w);
            }
            tensor.assign(&w)?;
        }
        Ok(())
    }

    /// Slot buffers and step counts as named records; slot names are
    /// `<param>::<slot>`.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let sdt = self.precision.state_dtype();
        let mut out = Vec::new();
        for e in self.entries.values() {
            if let Some(slots) = &e.slots {
                out.push((
                    format!("{}::step", e.name),
                    Tensor::new(vec![1], DType::F64, vec![e.steps as f64]).expect("scalar"),
                ));
                for (slot, buf) in slots.buffers() {
                    out.push((
                        format!("{}::{slot}", e.name),
                        Tensor::new(vec![buf.len()], sdt, buf.to_vec()).expect("non-empty slot"),
                    ));
                }
            }
            if let Some(m) = &e.master {
                out.push((
                    format!("{}::master", e.name),
                    Tensor::new(e.shape.clone(), DType::F32, m.clone()).expect("param shape"),
                ));
            }
        }
        out
    }

    /// Restores slot buffers, step counts and master copies written by
    /// [`to_records`](Self::to_records). Residency is left unchanged.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let kind = self.kind;
        for (name, t) in records {
            let (param, slot) = name
                .rsplit_once("::")
                .ok_or_else(|| Error::Checkpoint(format!("malformed state record {name}")))?;
            let e = self
                .entries
                .values_mut()
                .find(|e| e.name == param)
                .ok_or_else(|| Error::Lookup {
                    what: "parameter",
                    name: param.to_string(),
                })?;
            match slot {
                "step" => {
                    e.steps = t.data()[0] as u64;
                    e.slots.get_or_insert_with(|| Slots::zeros(kind, &e.shape));
                }
                "master" => e.master = Some(t.data().to_vec()),
                _ => {
                    let slots = e.slots.get_or_insert_with(|| Slots::zeros(kind, &e.shape));
                    let buf = slots
                        .buffers_mut()
                        .into_iter()
                        .find(|(n, _)| *n == slot)
                        .map(|(_, b)| b)
                        .ok_or_else(|| Error::Checkpoint(format!("slot {slot} not used by {kind}")))?;
                    if buf.len() != t.numel() {
                        return Err(Error::Checkpoint(format!("slot {name} has wrong length")));
                    }
                    buf.copy_from_slice(t.data());
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_update(
    kind: OptimizerKind,
    h: &Hyperparams,
    slots: &mut Slots,
    shape: &[usize],
    t: u64,
    lr: f64,
    w: &mut [f64],
    g: &[f64],
) {
    match (kind, slots) {
        (OptimizerKind::Sgd, _) => {
            for (w, g) in w.iter_mut().zip(g) {
                *w -= lr * g;
            }
        }
        (OptimizerKind::Sgdm, Slots::Momentum(buf)) => {
            for ((w, g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
                *b = h.momentum * *b + g;
                *w -= lr * *b;
            }
        }
        (OptimizerKind::Adagrad, Slots::SumSq(acc)) => {
            for ((w, g), s) in w.iter_mut().zip(g).zip(acc.iter_mut()) {
                *s += g * g;
                *w -= lr * g / (s.sqrt() + h.eps);
            }
        }
        (OptimizerKind::AdamW, Slots::Adam { m, v }) => {
            let bc1 = 1.0 - h.beta1.powi(t as i32);
            let bc2 = 1.0 - h.beta2.powi(t as i32);
            for (((w, g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= 1.0 - lr * h.weight_decay;
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        (OptimizerKind::Adafactor, slots) => {
            let beta2t = 1.0 - (t as f64).powf(h.adafactor_decay);
            let g2: Vec<f64> = g.iter().map(|g| g * g + h.adafactor_eps1).collect();
            let mut u: Vec<f64> = match slots {
                Slots::Factored { row, col } => {
                    let cols = *shape.last().expect("factored shape has rank >= 2");
                    let rows = g.len() / cols;
                    for i in 0..rows {
                        let s: f64 = g2[i * cols..(i + 1) * cols].iter().sum();
                        row[i] = beta2t * row[i] + (1.0 - beta2t) * s;
                    }
                    for j in 0..cols {
                        let s: f64 = (0..rows).map(|i| g2[i * cols + j]).sum();
                        col[j] = beta2t * col[j] + (1.0 - beta2t) * s;
                    }
                    let row_total: f64 = row.iter().sum();
                    (0..g.len())
                        .map(|idx| {
                            let v_hat = row[idx / cols] * col[idx % cols] / row_total;
                            g[idx] / v_hat.sqrt()
                        })
                        .collect()
                }
                Slots::Unfactored(v) => {
                    for (v, g2) in v.iter_mut().zip(&g2) {
                        *v = beta2t * *v + (1.0 - beta2t) * g2;
                    }
                    g.iter().zip(v.iter()).map(|(g, v)| g / v.sqrt()).collect()
                }
                _ => unreachable!("adafactor slots"),
            };
            let rms_u = rms(&u);
            let denom = (rms_u / h.adafactor_clip).max(1.0);
            u.iter_mut().for_each(|x| *x /= denom);
            let alpha = if h.adafactor_scale_parameter {
                lr * rms(w).max(h.adafactor_eps2)
            } else {
                lr
            };
            for (w, u) in w.iter_mut().zip(&u) {
                *w -= alpha * u;
            }
        }
        (kind, _) => unreachable!("slot layout mismatch for {kind}"),
    }
}

fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

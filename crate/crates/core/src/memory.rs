//! Simulated host/device memory ledger.
//!
//! Byte counts are tracked per category and placement. Every mutation is
//! an explicit event (allocate, free, or move between placements), which
//! makes the final balances reproducible by replaying the event log.
//! Fragmentation is not modelled.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::optim::OptimizerState;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Param,
    Grad,
    State,
    MasterCopy,
    /// Activations and temporary buffers of the autodiff tape.
    Residual,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Param,
        Category::Grad,
        Category::State,
        Category::MasterCopy,
        Category::Residual,
    ];

    fn idx(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Param => "param",
            Category::Grad => "grad",
            Category::State => "state",
            Category::MasterCopy => "master_copy",
            Category::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Host,
    Device,
}

impl Placement {
    fn idx(self) -> usize {
        match self {
            Placement::Host => 0,
            Placement::Device => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

impl Direction {
    fn endpoints(self) -> (Placement, Placement) {
        match self {
            Direction::HostToDevice => (Placement::Host, Placement::Device),
            Direction::DeviceToHost => (Placement::Device, Placement::Host),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Alloc(Placement),
    Free(Placement),
    Move(Direction),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub step: usize,
    pub kind: EventKind,
    pub category: Category,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub step: usize,
    pub direction: Direction,
    pub category: Category,
    pub bytes: u64,
}

/// Current bytes indexed by `[category][host, device]`.
pub type Balances = [[u64; 2]; 5];

/// Aggregates reported alongside the five categories.
const PGS: [Category; 4] = [Category::Param, Category::Grad, Category::State, Category::MasterCopy];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Peaks {
    host: u64,
    device: u64,
    combined: u64,
    transfer: u64,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryLedger {
    current: Balances,
    // 5 categories, then pgs, then all
    peaks: [Peaks; 7],
    step: usize,
    step_h2d: [u64; 7],
    events: Vec<LedgerEvent>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts accounting for `step`; per-step transfer totals reset.
    pub fn begin_step(&mut self, step: usize) {
        self.step = step;
        self.step_h2d = [0; 7];
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn current(&self, category: Category, placement: Placement) -> u64 {
        self.current[category.idx()][placement.idx()]
    }

    pub fn balances(&self) -> Balances {
        self.current
    }

    pub fn device_total(&self) -> u64 {
        self.current.iter().map(|c| c[1]).sum()
    }

    /// Device bytes of parameters, gradients, optimizer state and master copies.
    pub fn device_pgs(&self) -> u64 {
        PGS.iter().map(|c| self.current(*c, Placement::Device)).sum()
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn transfer_log(&self) -> Vec<Transfer> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Move(direction) => Some(Transfer {
                    step: e.step,
                    direction,
                    category: e.category,
                    bytes: e.bytes,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn alloc(&mut self, category: Category, placement: Placement, bytes: u64) {
        if bytes == 0 {
            return;
        }
        self.current[category.idx()][placement.idx()] += bytes;
        self.record(EventKind::Alloc(placement), category, bytes);
    }

    pub fn free(&mut self, category: Category, placement: Placement, bytes: u64) -> Result<()> {
        if bytes == 0 {
            return Ok(());
        }
        let slot = &mut self.current[category.idx()][placement.idx()];
        *slot = slot.checked_sub(bytes).ok_or_else(|| {
            Error::Ledger(format!(
                "freeing {bytes} {} bytes on {placement:?} with only {slot} held",
                category.name()
            ))
        })?;
        self.record(EventKind::Free(placement), category, bytes);
        Ok(())
    }

    pub fn transfer(&mut self, category: Category, direction: Direction, bytes: u64) -> Result<()> {
        if bytes == 0 {
            return Ok(());
        }
        let (from, to) = direction.endpoints();
        let c = category.idx();
        if self.current[c][from.idx()] < bytes {
            return Err(Error::Ledger(format!(
                "moving {bytes} {} bytes from {from:?} with only {} held",
                category.name(),
                self.current[c][from.idx()]
            )));
        }
        self.current[c][from.idx()] -= bytes;
        self.current[c][to.idx()] += bytes;
        if direction == Direction::HostToDevice {
            self.step_h2d[c] += bytes;
            if PGS.contains(&category) {
                self.step_h2d[5] += bytes;
            }
            self.step_h2d[6] += bytes;
        }
        self.record(EventKind::Move(direction), category, bytes);
        Ok(())
    }

    fn record(&mut self, kind: EventKind, category: Category, bytes: u64) {
        self.events.push(LedgerEvent {
            step: self.step,
            kind,
            category,
            bytes,
        });
        self.update_peaks();
    }

    fn update_peaks(&mut self) {
        let sum = |cats: &[Category], p: usize| cats.iter().map(|c| self.current[c.idx()][p]).sum::<u64>();
        let mut levels = [(0u64, 0u64); 7];
        for c in Category::ALL {
            levels[c.idx()] = (self.current[c.idx()][0], self.current[c.idx()][1]);
        }
        levels[5] = (sum(&PGS, 0), sum(&PGS, 1));
        levels[6] = (sum(&Category::ALL, 0), sum(&Category::ALL, 1));
        for (i, (h, d)) in levels.into_iter().enumerate() {
            let p = &mut self.peaks[i];
            p.host = p.host.max(h);
            p.device = p.device.max(d);
            p.combined = p.combined.max(h + d);
            p.transfer = p.transfer.max(self.step_h2d[i]);
        }
    }

    /// Recomputes balances from an event log.
    pub fn replay(events: &[LedgerEvent]) -> Result<Balances> {
        let mut b: Balances = [[0; 2]; 5];
        for e in events {
            let c = e.category.idx();
            match e.kind {
                EventKind::Alloc(p) => b[c][p.idx()] += e.bytes,
                EventKind::Free(p) => {
                    b[c][p.idx()] = b[c][p.idx()]
                        .checked_sub(e.bytes)
                        .ok_or_else(|| Error::Ledger("replay underflow".into()))?
                }
                EventKind::Move(dir) => {
                    let (from, to) = dir.endpoints();
                    b[c][from.idx()] = b[c][from.idx()]
                        .checked_sub(e.bytes)
                        .ok_or_else(|| Error::Ledger("replay underflow".into()))?;
                    b[c][to.idx()] += e.bytes;
                }
            }
        }
        Ok(b)
    }

    pub fn peak_device(&self, category: Category) -> u64 {
        self.peaks[category.idx()].device
    }

    pub fn peak_device_pgs(&self) -> u64 {
        self.peaks[5].device
    }

    pub fn peak_device_total(&self) -> u64 {
        self.peaks[6].device
    }

    /// Largest host-to-device volume moved within a single step.
    pub fn peak_step_transfer(&self) -> u64 {
        self.peaks[6].transfer
    }

    pub fn total_transferred(&self) -> u64 {
        self.transfer_log().iter().map(|t| t.bytes).sum()
    }

    pub fn peak_report(&self) -> Result<MemoryReport> {
        if self.events.is_empty() {
            return Err(Error::contract("peak report requested before any recorded event"));
        }
        let names = Category::ALL.iter().map(|c| c.name()).chain(["pgs", "total"]);
        let rows = names
            .zip(self.peaks.iter())
            .map(|(name, p)| MemoryRow {
                category: name.to_string(),
                host_peak_bytes: p.host,
                device_peak_bytes: p.device,
                total_peak_bytes: p.combined,
                peak_transfer_bytes: p.transfer,
            })
            .collect();
        Ok(MemoryReport { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub category: String,
    pub host_peak_bytes: u64,
    pub device_peak_bytes: u64,
    pub total_peak_bytes: u64,
    pub peak_transfer_bytes: u64,
}

/// Per-category high-water marks; rows `pgs` and `total` aggregate
/// param+grad+state+master_copy and all categories respectively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
}

impl MemoryReport {
    pub const CSV_HEADER: &'static str =
        "category,host_peak_bytes,device_peak_bytes,total_peak_bytes,peak_transfer_bytes";

    pub fn row(&self, category: &str) -> Option<&MemoryRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<memory csv>", e))
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MemoryRow>, _>>()
            .map_err(csv_err)?;
        Ok(MemoryReport { rows })
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Everything in f64; used for exact-equivalence checks.
    Fp64,
    #[default]
    Fp32,
    /// Half-precision working weights and gradients with f32 master copies
    /// and optimizer state.
    Mixed,
}

impl Precision {
    pub fn param_dtype(self) -> DType {
        match self {
            Precision::Fp64 => DType::F64,
            Precision::Fp32 => DType::F32,
            Precision::Mixed => DType::F16,
        }
    }

    pub fn compute_dtype(self) -> DType {
        match self {
            Precision::Fp64 => DType::F64,
            _ => DType::F32,
        }
    }

    pub fn state_dtype(self) -> DType {
        self.compute_dtype()
    }

    pub fn master_dtype(self) -> Option<DType> {
        match self {
            Precision::Mixed => Some(DType::F32),
            _ => None,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp64" | "f64" => Ok(Precision::Fp64),
            "fp32" | "f32" => Ok(Precision::Fp32),
            "mixed" | "amp" => Ok(Precision::Mixed),
            other => Err(Error::config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Moves the optimizer state (and, under mixed precision, the master copies)
/// of `group` to the device. Returns the bytes moved.
pub fn move_state_to_device(ledger: &mut MemoryLedger, state: &mut OptimizerState, group: &ParamSet) -> Result<u64> {
    relocate(ledger, state, group, Direction::HostToDevice)
}

/// Inverse of [`move_state_to_device`].
pub fn move_state_to_host(ledger: &mut MemoryLedger, state: &mut OptimizerState, group: &ParamSet) -> Result<u64> {
    relocate(ledger, state, group, Direction::DeviceToHost)
}

fn relocate(ledger: &mut MemoryLedger, state: &mut OptimizerState, group: &ParamSet, dir: Direction) -> Result<u64> {
    let (from, to) = dir.endpoints();
    for id in group.iter() {
        let r = state.residency(id)?;
        if r != from {
            return Err(Error::Residency {
                param: state.param_name(id)?.to_string(),
                msg: format!("state is on {r:?}, cannot move {dir:?}"),
            });
        }
    }
    let (mut state_bytes, mut master_bytes) = (0u64, 0u64);
    for id in group.iter() {
        let (s, m) = state.resident_bytes(id)?;
        state_bytes += s;
        master_bytes += m;
        state.set_residency(id, to)?;
    }
    ledger.transfer(Category::State, dir, state_bytes)?;
    ledger.transfer(Category::MasterCopy, dir, master_bytes)?;
    Ok(state_bytes + master_bytes)
}

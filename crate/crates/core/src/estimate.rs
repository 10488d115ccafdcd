//! Closed-form memory estimates for full-parameter and hierarchical
//! fine-tuning, computed in exact rational byte arithmetic.
//!
//! With parameter bytes `P`, the full-parameter device footprint is
//! `P + G + S` (weights, gradients, optimizer state). Hierarchical training
//! keeps all weights resident but only one group's gradients and state, so
//! the average over a sweep of `k` groups is `P + (G + S)/k`; for AdamW in
//! fp32 that is `(k+3)/k · P`, saving `(3k-3)/k · P`. Under mixed precision
//! the f32 master copies join the gradients and state in the per-group term.

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory::Precision;
use crate::model::{Arch, LayeredModel};
use crate::optim::{state_footprint, OptimizerKind};
use crate::schedule::sweep_group_sizes;
use crate::tensor::numel;

pub type Bytes = Ratio<u128>;

pub const GB: u128 = 1_000_000_000;

pub fn to_gb(b: Bytes) -> f64 {
    *b.numer() as f64 / *b.denom() as f64 / GB as f64
}

/// Average and savings figures quoted for the 34-unit 7B configuration
/// (m = 1, AdamW, fp32, 26.08 GB of weights). They disagree with the closed
/// form, which gives ≈28.38 GB and ≈75.94 GB; both are reported.
pub const REFERENCE_7B_WEIGHT_BYTES: u128 = 26_080_000_000;
pub const REFERENCE_7B_UNITS: usize = 34;
pub const REFERENCE_7B_AVERAGE_GB: f64 = 31.13;
pub const REFERENCE_7B_SAVED_GB: f64 = 73.19;

/// Parameter shapes partitioned into the groups a schedule activates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    groups: Vec<Vec<Vec<usize>>>,
}

impl Footprint {
    pub fn new(groups: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::contract("footprint needs at least one non-empty group"));
        }
        Ok(Footprint { groups })
    }

    /// Flat parameter groups given by element counts; the sizes must sum to
    /// `total`. Each group is treated as one unfactored vector.
    pub fn from_group_elements(total: usize, sizes: &[usize]) -> Result<Self> {
        let sum: usize = sizes.iter().sum();
        if sum != total || sizes.contains(&0) {
            return Err(Error::contract(format!(
                "group sizes sum to {sum}, expected a positive partition of {total}"
            )));
        }
        Footprint::new(sizes.iter().map(|&s| vec![vec![s]]).collect())
    }

    /// `zeta1` bytes of fp32 weights split into `k` equal flat groups (the
    /// last absorbs any remainder).
    pub fn from_fp32_bytes(zeta1: u128, k: usize) -> Result<Self> {
        if zeta1 == 0 || !zeta1.is_multiple_of(4) {
            return Err(Error::contract("fp32 weight bytes must be a positive multiple of 4"));
        }
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        let elems = usize::try_from(zeta1 / 4).map_err(|_| Error::contract("weight count overflows"))?;
        if elems < k {
            return Err(Error::contract("fewer elements than groups"));
        }
        let base = elems / k;
        let mut sizes = vec![base; k];
        sizes[k - 1] += elems - base * k;
        Footprint::from_group_elements(elems, &sizes)
    }

    /// Bottom-to-top groups of `m` units for an architecture, without
    /// allocating the model.
    pub fn from_arch(arch: &Arch, m: usize) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if m == 0 || m > layout.len() {
            return Err(Error::config(format!("m={m} outside 1..={}", layout.len())));
        }
        let mut units = layout.into_iter();
        let groups = sweep_group_sizes(arch.units(), m)
            .into_iter()
            .map(|size| {
                units
                    .by_ref()
                    .take(size)
                    .flat_map(|u| u.params.into_iter().map(|(_, s)| s))
                    .collect()
            })
            .collect();
        Footprint::new(groups)
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn elements(&self) -> u128 {
        self.groups.iter().flatten().map(|s| numel(s) as u128).sum()
    }

    fn group_bytes(&self, g: usize, kind: OptimizerKind, precision: Precision) -> GroupBytes {
        let shapes = &self.groups[g];
        let elems: u128 = shapes.iter().map(|s| numel(s) as u128).sum();
        let work = precision.param_dtype().size_bytes() as u128;
        GroupBytes {
            param: elems * work,
            grad: elems * work,
            state: shapes
                .iter()
                .map(|s| state_footprint(kind, s, precision.state_dtype()) as u128)
                .sum(),
            master: precision.master_dtype().map_or(0, |d| elems * d.size_bytes() as u128),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct GroupBytes {
    param: u128,
    grad: u128,
    state: u128,
    master: u128,
}

impl GroupBytes {
    fn transient(&self) -> u128 {
        self.grad + self.state + self.master
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub optimizer: OptimizerKind,
    pub precision: Precision,
    pub k: usize,
    /// Working weights, always device-resident.
    pub param_bytes: Bytes,
    pub grad_bytes: Bytes,
    pub state_bytes: Bytes,
    pub master_bytes: Bytes,
    /// `param + grad + state + master`: everything resident at once.
    pub fpft_bytes: Bytes,
    /// Average per-step device bytes over one sweep.
    pub hift_average_bytes: Option<Bytes>,
    /// Weights plus the transient bytes of the largest group.
    pub hift_peak_bytes: Option<Bytes>,
    /// `fpft - hift_average`.
    pub saved_bytes: Option<Bytes>,
    pub notes: Vec<String>,
}

fn totals(fp: &Footprint, kind: OptimizerKind, precision: Precision) -> (GroupBytes, Vec<GroupBytes>) {
    let per: Vec<GroupBytes> = (0..fp.k()).map(|g| fp.group_bytes(g, kind, precision)).collect();
    let sum = per.iter().fold(GroupBytes::default(), |a, g| GroupBytes {
        param: a.param + g.param,
        grad: a.grad + g.grad,
        state: a.state + g.state,
        master: a.master + g.master,
    });
    (sum, per)
}

/// Full-parameter fine-tuning: every category resident for the whole run.
/// Residual (activation) memory is excluded; it is only measured.
pub fn estimate_fpft(fp: &Footprint, kind: OptimizerKind, precision: Precision) -> EstimateReport {
    let (t, _) = totals(fp, kind, precision);
    EstimateReport {
        optimizer: kind,
        precision,
        k: 1,
        param_bytes: Bytes::from_integer(t.param),
        grad_bytes: Bytes::from_integer(t.grad),
        state_bytes: Bytes::from_integer(t.state),
        master_bytes: Bytes::from_integer(t.master),
        fpft_bytes: Bytes::from_integer(t.param + t.transient()),
        hift_average_bytes: None,
        hift_peak_bytes: None,
        saved_bytes: None,
        notes: Vec::new(),
    }
}

/// Hierarchical fine-tuning over the footprint's `k` groups.
pub fn estimate_hift(fp: &Footprint, kind: OptimizerKind, precision: Precision) -> EstimateReport {
    let mut rep = estimate_fpft(fp, kind, precision);
    let (t, per) = totals(fp, kind, precision);
    let k = fp.k();
    let average = Bytes::from_integer(t.param) + Bytes::new(t.transient(), k as u128);
    let peak = t.param + per.iter().map(GroupBytes::transient).max().unwrap_or(0);
    rep.k = k;
    rep.saved_bytes = Some(rep.fpft_bytes - average);
    rep.hift_average_bytes = Some(average);
    rep.hift_peak_bytes = Some(Bytes::from_integer(peak));
    if k == REFERENCE_7B_UNITS
        && kind == OptimizerKind::AdamW
        && precision == Precision::Fp32
        && t.param == REFERENCE_7B_WEIGHT_BYTES
    {
        rep.notes.push(format!(
            "reference figures for this configuration state {REFERENCE_7B_AVERAGE_GB} GB average \
             and {REFERENCE_7B_SAVED_GB} GB saved; the closed form gives {:.2} GB and {:.2} GB",
            to_gb(average),
            to_gb(rep.fpft_bytes - average),
        ));
    }
    rep
}

/// Largest group's parameter count over the total, for bottom-to-top
/// groups of `m` units.
pub fn trainable_peak_fraction(model: &LayeredModel, m: usize) -> Result<f64> {
    let n = model.n_units();
    if m == 0 || m > n {
        return Err(Error::config(format!("m={m} outside 1..={n}")));
    }
    let counts: Vec<usize> = (0..n).map(|u| model.unit_param_count(u)).collect();
    let mut start = 0;
    let mut peak = 0;
    for size in sweep_group_sizes(n, m) {
        peak = peak.max(counts[start..start + size].iter().sum::<usize>());
        start += size;
    }
    Ok(peak as f64 / model.total_params() as f64)
}

//! Group rotation and the sweep-delayed learning-rate schedule.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Bottom2Up,
    Top2Down,
    /// Seeded shuffle of the unit order, applied once before training.
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Bottom2Up => "bottom2up",
            Strategy::Top2Down => "top2down",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bottom2up" | "b2u" => Ok(Strategy::Bottom2Up),
            "top2down" | "t2d" => Ok(Strategy::Top2Down),
            "random" | "ran" => Ok(Strategy::Random),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// `k = n/m` when `m` divides `n`, otherwise `⌊n/m⌋ + 1`.
pub fn group_count(n: usize, m: usize) -> usize {
    if n.is_multiple_of(m) {
        n / m
    } else {
        n / m + 1
    }
}

/// Group sizes of one sweep: `m` repeated, with a final `n mod m` group when
/// `m` does not divide `n`.
pub fn sweep_group_sizes(n: usize, m: usize) -> Vec<usize> {
    let mut sizes = vec![m; n / m];
    if !n.is_multiple_of(m) {
        sizes.push(n % m);
    }
    sizes
}

#[derive(Debug, Clone)]
pub struct GroupSchedule {
    queue: VecDeque<LayerId>,
    m: usize,
    k: usize,
    strategy: Strategy,
    seed: Option<u64>,
    taken_in_sweep: usize,
    sweep_done: bool,
    sweeps_completed: usize,
    step: usize,
}

impl GroupSchedule {
    /// Builds the rotation queue from units listed bottom to top and applies
    /// the update strategy. `seed` is only consulted by [`Strategy::Random`].
    pub fn init_queue(units: &[LayerId], strategy: Strategy, m: usize, seed: u64) -> Result<Self> {
        let n = units.len();
        if m == 0 || m > n {
            return Err(Error::config(format!("group size m={m} must lie in 1..={n}")));
        }
        let mut order = units.to_vec();
        let seed = match strategy {
            Strategy::Bottom2Up => None,
            Strategy::Top2Down => {
                order.reverse();
                None
            }
            Strategy::Random => {
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Some(seed)
            }
        };
        Ok(GroupSchedule {
            queue: order.into(),
            m,
            k: group_count(n, m),
            strategy,
            seed,
            taken_in_sweep: 0,
            sweep_done: false,
            sweeps_completed: 0,
            step: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.queue.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Seed used for the random order, if any.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn sweeps_completed(&self) -> usize {
        self.sweeps_completed
    }

    pub fn queue(&self) -> impl Iterator<Item = &LayerId> {
        self.queue.iter()
    }

    /// Removes the next group from the head of the queue and appends it to
    /// the tail. The last group of a sweep is short when `m` does not divide
    /// `n`, so groups never straddle a sweep boundary.
    pub fn next_group(&mut self) -> Vec<LayerId> {
        let n = self.queue.len();
        let take = self.m.min(n - self.taken_in_sweep);
        let group: Vec<LayerId> = self.queue.drain(..take).collect();
        self.queue.extend(group.iter().cloned());
        self.taken_in_sweep += take;
        self.sweep_done = self.taken_in_sweep == n;
        if self.sweep_done {
            self.taken_in_sweep = 0;
            self.sweeps_completed += 1;
        }
        self.step += 1;
        group
    }

    /// True iff the group returned by the latest [`next_group`](Self::next_group)
    /// completed a sweep over all units.
    pub fn is_all_layer_update(&self) -> bool {
        self.sweep_done
    }

    /// The groups of one sweep starting from the current queue state,
    /// without advancing the schedule.
    pub fn peek_sweep(&self) -> Vec<Vec<LayerId>> {
        let mut probe = self.clone();
        let mut out = Vec::with_capacity(self.k);
        loop {
            out.push(probe.next_group());
            if probe.is_all_layer_update() {
                break out;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Constant,
    #[default]
    Linear,
}

/// Learning rate as a function of completed sweeps, never of raw steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    base_lr: f64,
    warmup_fraction: f64,
    decay: Decay,
    total_sweeps: usize,
    sweep_index: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_fraction: f64, decay: Decay, total_sweeps: usize) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::config(format!(
                "base learning rate must be positive, got {base_lr}"
            )));
        }
        if !(0.0..=1.0).contains(&warmup_fraction) {
            return Err(Error::config(format!(
                "warmup fraction {warmup_fraction} outside [0, 1]"
            )));
        }
        if total_sweeps == 0 {
            return Err(Error::config("schedule needs at least one sweep"));
        }
        Ok(LrSchedule {
            base_lr,
            warmup_fraction,
            decay,
            total_sweeps,
            sweep_index: 0,
        })
    }

    pub fn sweep_index(&self) -> usize {
        self.sweep_index
    }

    fn warmup_sweeps(&self) -> usize {
        (self.warmup_fraction * self.total_sweeps as f64).ceil() as usize
    }

    /// Linear warmup over the first `⌈warmup·total⌉` sweeps, then either
    /// constant or linear decay towards zero at `total_sweeps`.
    pub fn lr_value(&self) -> f64 {
        let s = self.sweep_index.min(self.total_sweeps - 1);
        let warm = self.warmup_sweeps().min(self.total_sweeps - 1);
        if s < warm {
            return self.base_lr * (s + 1) as f64 / warm as f64;
        }
        match self.decay {
            Decay::Constant => self.base_lr,
            Decay::Linear => self.base_lr * (self.total_sweeps - s) as f64 / (self.total_sweeps - warm) as f64,
        }
    }

    /// Called once per completed sweep.
    pub fn advance(&mut self) {
        self.sweep_index += 1;
    }
}

//! Datasets of fixed-length token sequences and seeded batch streams.
//!
//! Synthetic tasks draw a random "teacher" per token and label each
//! sequence from the sum of its tokens' teacher values, so the target is a
//! linear function of the mean-pooled one-hot sequence. CSV tasks read one
//! sequence per row: every column except the label column is a token id.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::csv_err;

/// Fraction of CSV rows held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    SyntheticRegression {
        train_size: usize,
        eval_size: usize,
    },
    SyntheticClassification {
        train_size: usize,
        eval_size: usize,
        /// Minimum gap between the best and second-best teacher score.
        #[serde(default = "default_margin")]
        margin: f64,
    },
    CsvClassification {
        path: PathBuf,
        label_column: String,
        /// Declared label vocabulary; inferred (sorted) from the file if absent.
        #[serde(default)]
        labels: Option<Vec<String>>,
    },
}

fn default_margin() -> f64 {
    0.5
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::SyntheticRegression { .. } => "synthetic-regression",
            TaskSpec::SyntheticClassification { .. } => "synthetic-classification",
            TaskSpec::CsvClassification { .. } => "csv-classification",
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskSpec::SyntheticRegression { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    /// Class names for classification tasks.
    pub classes: Option<Vec<String>>,
    pub seq_len: usize,
}

/// Shape of the sequences a model expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
}

pub fn load_dataset(task: &TaskSpec, shape: InputShape, seed: u64) -> Result<Dataset> {
    match task {
        TaskSpec::SyntheticRegression { train_size, eval_size } => {
            synthetic_regression(shape, *train_size, *eval_size, seed)
        }
        TaskSpec::SyntheticClassification {
            train_size,
            eval_size,
            margin,
        } => synthetic_classification(shape, *train_size, *eval_size, *margin, seed),
        TaskSpec::CsvClassification {
            path,
            label_column,
            labels,
        } => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let (examples, classes) = read_csv(file, label_column, labels.as_deref(), shape)?;
            let (train, eval) = split_holdout(examples, seed)?;
            Ok(Dataset {
                train,
                eval,
                classes: Some(classes),
                seq_len: shape.seq_len,
            })
        }
    }
}

fn check_sizes(train: usize, eval: usize) -> Result<()> {
    if train == 0 || eval == 0 {
        return Err(Error::config("synthetic tasks need positive train_size and eval_size"));
    }
    Ok(())
}

fn synthetic_regression(shape: InputShape, train: usize, eval: usize, seed: u64) -> Result<Dataset> {
    check_sizes(train, eval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher: Vec<f64> = (0..shape.vocab).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut draw = || {
        let tokens: Vec<usize> = (0..shape.seq_len).map(|_| rng.gen_range(0..shape.vocab)).collect();
        let y = tokens.iter().map(|&t| teacher[t]).sum::<f64>() / shape.seq_len as f64;
        Example {
            tokens,
            target: Target::Value(y),
        }
    };
    let all: Vec<Example> = (0..train + eval).map(|_| draw()).collect();
    let (train_set, eval_set) = all.split_at(train);
    Ok(Dataset {
        train: train_set.to_vec(),
        eval: eval_set.to_vec(),
        classes: None,
        seq_len: shape.seq_len,
    })
}

fn synthetic_classification(shape: InputShape, train: usize, eval: usize, margin: f64, seed: u64) -> Result<Dataset> {
    check_sizes(train, eval)?;
    if shape.classes < 2 {
        return Err(Error::config("classification needs at least two outputs"));
    }
    let c = shape.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher: Vec<f64> = (0..shape.vocab * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let want = train + eval;
    let mut all = Vec::with_capacity(want);
    let mut attempts = 0usize;
    while all.len() < want {
        attempts += 1;
        if attempts > want * 1000 {
            return Err(Error::config(format!("margin {margin} rejects almost every sample")));
        }
        let tokens: Vec<usize> = (0..shape.seq_len).map(|_| rng.gen_range(0..shape.vocab)).collect();
        let mut scores = vec![0.0; c];
        for &t in &tokens {
            for (s, w) in scores.iter_mut().zip(&teacher[t * c..(t + 1) * c]) {
                *s += w;
            }
        }
        let best = (0..c).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        let runner_up = (0..c)
            .filter(|&i| i != best)
            .map(|i| scores[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if scores[best] - runner_up >= margin {
            all.push(Example {
                tokens,
                target: Target::Class(best),
            });
        }
    }
    let eval_set = all.split_off(train);
    Ok(Dataset {
        train: all,
        eval: eval_set,
        classes: Some((0..c).map(|i| format!("class{i}")).collect()),
        seq_len: shape.seq_len,
    })
}

/// Parses labelled token sequences. Line numbers in errors are 1-based file
/// lines (the header is line 1).
pub fn read_csv(
    input: impl std::io::Read,
    label_column: &str,
    declared: Option<&[String]>,
    shape: InputShape,
) -> Result<(Vec<Example>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("no label column named {label_column:?}"),
        })?;
    if headers.len() - 1 != shape.seq_len {
        return Err(Error::config(format!(
            "csv has {} token columns, model expects sequence length {}",
            headers.len() - 1,
            shape.seq_len
        )));
    }

    let mut rows: Vec<(Vec<usize>, String, usize)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut tokens = Vec::with_capacity(shape.seq_len);
        for (i, field) in rec.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            let t: usize = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!(
                    "token {field:?} in column {:?} is not a non-negative integer",
                    &headers[i]
                ),
            })?;
            if t >= shape.vocab {
                return Err(Error::Vocabulary(format!(
                    "line {line}: token {t} outside vocabulary of {}",
                    shape.vocab
                )));
            }
            tokens.push(t);
        }
        rows.push((tokens, rec[label_idx].to_string(), line));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }

    let classes: Vec<String> = match declared {
        Some(labels) => labels.to_vec(),
        None => rows
            .iter()
            .map(|(_, l, _)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    if classes.len() > shape.classes {
        return Err(Error::Vocabulary(format!(
            "{} labels but the model has {} outputs",
            classes.len(),
            shape.classes
        )));
    }
    let examples = rows
        .into_iter()
        .map(|(tokens, label, line)| {
            let class = classes
                .iter()
                .position(|c| *c == label)
                .ok_or_else(|| Error::Vocabulary(format!("line {line}: unknown label {label:?}")))?;
            Ok(Example {
                tokens,
                target: Target::Class(class),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((examples, classes))
}

/// Seeded shuffle, then the last `EVAL_FRACTION` of rows become the
/// held-out split.
pub fn split_holdout(mut examples: Vec<Example>, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    let n = examples.len();
    let n_eval = ((n as f64 * EVAL_FRACTION).round() as usize).max(1);
    if n_eval >= n {
        return Err(Error::config(format!("{n} rows are too few for a held-out split")));
    }
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED));
    let eval = examples.split_off(n - n_eval);
    Ok((examples, eval))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Flattened `[size, seq_len]` token ids.
    pub tokens: Vec<usize>,
    pub size: usize,
    pub targets: Targets,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Self {
        let tokens = examples.iter().flat_map(|e| e.tokens.iter().copied()).collect();
        let targets = match examples.first().map(|e| e.target) {
            Some(Target::Value(_)) => Targets::Values(
                examples
                    .iter()
                    .map(|e| match e.target {
                        Target::Value(v) => v,
                        Target::Class(c) => c as f64,
                    })
                    .collect(),
            ),
            _ => Targets::Classes(
                examples
                    .iter()
                    .map(|e| match e.target {
                        Target::Class(c) => c,
                        Target::Value(v) => v as usize,
                    })
                    .collect(),
            ),
        };
        Batch {
            tokens,
            size: examples.len(),
            targets,
        }
    }
}

/// Endless epoch-by-epoch stream of mini-batches. Every epoch reshuffles
/// the previous epoch's order with the seeded generator; the last batch of
/// an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || len == 0 {
            return Err(Error::config("batch size and dataset length must be positive"));
        }
        Ok(BatchStream {
            order: (0..len).collect(),
            pos: len,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        idx
    }

    pub fn next_batch(&mut self, data: &[Example]) -> Batch {
        let idx = self.next_indices();
        let refs: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        Batch::from_examples(&refs)
    }
}

//! Layered models and their parameter registry.
//!
//! A model is an ordered stack of layer units: one embedding unit at the
//! bottom (token table plus positional table), `hidden` identical hidden
//! units, and one head unit at the top (mean pooling plus a linear map).
//! Every parameter belongs to exactly one unit; groups of units are what the
//! hierarchical trainer activates.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, DType, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    /// `layer_norm(x + act(x·W + b))`
    #[default]
    Dense,
    /// Pre-norm single-head attention followed by a two-layer feed-forward.
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub vocab: usize,
    pub seq_len: usize,
    pub width: usize,
    /// Number of hidden units; the model has `hidden + 2` layer units.
    pub hidden: usize,
    pub outputs: usize,
    #[serde(default)]
    pub unit: UnitKind,
    #[serde(default)]
    pub activation: Activation,
    /// Feed-forward width of transformer units; defaults to `2 * width`.
    #[serde(default)]
    pub ffn_width: Option<usize>,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("width", self.width),
            ("outputs", self.outputs),
            ("ffn_width", self.ffn()),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("arch.{name} must be positive")));
            }
        }
        if self.hidden == 0 {
            return Err(Error::config("arch.hidden must be at least 1"));
        }
        Ok(())
    }

    pub fn ffn(&self) -> usize {
        self.ffn_width.unwrap_or(2 * self.width)
    }

    /// Number of layer units `n`.
    pub fn units(&self) -> usize {
        self.hidden + 2
    }

    /// Parameter names and shapes per unit, bottom to top, without
    /// allocating any storage.
    pub fn layout(&self) -> Vec<UnitLayout> {
        let d = self.width;
        let mut units = Vec::with_capacity(self.units());
        units.push(UnitLayout {
            id: LayerId::new(0, LayerKind::Embedding, "embedding".into()),
            params: vec![
                ("embed.token".into(), vec![self.vocab, d]),
                ("embed.position".into(), vec![self.seq_len, d]),
            ],
        });
        for h in 1..=self.hidden {
            let p = |s: &str| format!("h{h}.{s}");
            let params = match self.unit {
                UnitKind::Dense => vec![
                    (p("weight"), vec![d, d]),
                    (p("bias"), vec![d]),
                    (p("ln.gamma"), vec![d]),
                    (p("ln.beta"), vec![d]),
                ],
                UnitKind::Transformer => {
                    let f = self.ffn();
                    vec![
                        (p("ln1.gamma"), vec![d]),
                        (p("ln1.beta"), vec![d]),
                        (p("attn.wq"), vec![d, d]),
                        (p("attn.wk"), vec![d, d]),
                        (p("attn.wv"), vec![d, d]),
                        (p("attn.wo"), vec![d, d]),
                        (p("ln2.gamma"), vec![d]),
                        (p("ln2.beta"), vec![d]),
                        (p("ffn.w1"), vec![d, f]),
                        (p("ffn.b1"), vec![f]),
                        (p("ffn.w2"), vec![f, d]),
                        (p("ffn.b2"), vec![d]),
                    ]
                }
            };
            units.push(UnitLayout {
                id: LayerId::new(h, LayerKind::Hidden, format!("hidden.{h}")),
                params,
            });
        }
        units.push(UnitLayout {
            id: LayerId::new(self.hidden + 1, LayerKind::Head, "head".into()),
            params: vec![
                ("head.weight".into(), vec![d, self.outputs]),
                ("head.bias".into(), vec![self.outputs]),
            ],
        });
        units
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(UnitLayout::param_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Embedding,
    Hidden,
    Head,
}

/// Identifier of one layer unit; ordered by position from the bottom.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub index: usize,
    pub kind: LayerKind,
    pub name: String,
}

impl LayerId {
    pub fn new(index: usize, kind: LayerKind, name: String) -> Self {
        LayerId { index, kind, name }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitLayout {
    pub id: LayerId,
    pub params: Vec<(String, Vec<usize>)>,
}

impl UnitLayout {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, s)| numel(s)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub unit: usize,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerUnit {
    pub id: LayerId,
    params: Range<usize>,
}

impl LayerUnit {
    pub fn param_ids(&self) -> Range<usize> {
        self.params.clone()
    }
}

/// Binary mask over the model's parameters, stored as the set of selected
/// parameter ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamSet {
    ids: BTreeSet<usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        ParamSet {
            ids: ids.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }

    pub fn is_disjoint(&self, other: &ParamSet) -> bool {
        self.ids.is_disjoint(&other.ids)
    }

    pub fn union(&self, other: &ParamSet) -> ParamSet {
        ParamSet {
            ids: self.ids.union(&other.ids).copied().collect(),
        }
    }

    /// The mask β as one flag per registry parameter.
    pub fn mask(&self, model: &LayeredModel) -> Vec<bool> {
        (0..model.params.len()).map(|i| self.contains(i)).collect()
    }

    /// (unit, parameter name) pairs in registry order.
    pub fn entries<'m>(&self, model: &'m LayeredModel) -> Vec<(&'m LayerId, &'m str)> {
        self.iter()
            .filter_map(|i| model.params.get(i))
            .map(|p| (&model.units[p.unit].id, p.name.as_str()))
            .collect()
    }

    /// Total element count of the selected parameters.
    pub fn element_count(&self, model: &LayeredModel) -> usize {
        self.iter()
            .filter_map(|i| model.params.get(i))
            .map(|p| p.tensor.numel())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    arch: Arch,
    dtype: DType,
    units: Vec<LayerUnit>,
    params: Vec<Param>,
}

/// Builds an `f64` model; see [`LayeredModel::build`].
pub fn build_model(arch: &Arch, seed: u64) -> Result<LayeredModel> {
    LayeredModel::build(arch, seed, DType::F64)
}

impl LayeredModel {
    /// Deterministic initialization from `seed`: matrices uniform in
    /// `±1/sqrt(fan_in)`, token embeddings uniform in `±1`, positional
    /// embeddings uniform in `±0.1`, biases and shifts zero, scales one.
    /// Every parameter starts frozen.
    pub fn build(arch: &Arch, seed: u64, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut units = Vec::new();
        let mut params = Vec::new();
        for (u, layout) in arch.layout().into_iter().enumerate() {
            let start = params.len();
            for (name, shape) in layout.params {
                let n = numel(&shape);
                let data: Vec<f64> = if name.ends_with("gamma") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let bound = match name.as_str() {
                        "embed.token" => 1.0,
                        "embed.position" => 0.1,
                        _ => 1.0 / (shape[0] as f64).sqrt(),
                    };
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                params.push(Param {
                    name,
                    unit: u,
                    tensor: Tensor::new(shape, dtype, data)?,
                });
            }
            units.push(LayerUnit {
                id: layout.id,
                params: start..params.len(),
            });
        }
        Ok(LayeredModel {
            arch: arch.clone(),
            dtype,
            units,
            params,
        })
    }

    /// Reassembles a model from stored tensors, checking names and shapes
    /// against the architecture.
    pub fn from_tensors(arch: &Arch, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let expected: usize = layout.iter().map(|u| u.params.len()).sum();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameter records, found {}",
                tensors.len()
            )));
        }
        let dtype = tensors[0].1.dtype();
        let mut it = tensors.into_iter();
        let mut units = Vec::new();
        let mut params = Vec::new();
        for (u, unit) in layout.into_iter().enumerate() {
            let start = params.len();
            for (name, shape) in unit.params {
                let (got_name, tensor) = it.next().expect("count checked above");
                if got_name != name || tensor.shape() != shape.as_slice() || tensor.dtype() != dtype {
                    return Err(Error::Checkpoint(format!(
                        "record {got_name} {:?} does not match {name} {shape:?}",
                        tensor.shape()
                    )));
                }
                params.push(Param { name, unit: u, tensor });
            }
            units.push(LayerUnit {
                id: unit.id,
                params: start..params.len(),
            });
        }
        Ok(LayeredModel {
            arch: arch.clone(),
            dtype,
            units,
            params,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn units(&self) -> &[LayerUnit] {
        &self.units
    }

    pub fn unit_ids(&self) -> Vec<LayerId> {
        self.units.iter().map(|u| u.id.clone()).collect()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.params[id].tensor
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].tensor
    }

    pub fn param_id(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.params.iter().map(|p| p.tensor.size_bytes()).sum()
    }

    pub fn unit_param_count(&self, unit: usize) -> usize {
        self.units[unit]
            .params
            .clone()
            .map(|i| self.params[i].tensor.numel())
            .sum()
    }

    /// The whole parameter vector θ as a set.
    pub fn all_params(&self) -> ParamSet {
        ParamSet::from_ids(0..self.params.len())
    }

    fn resolve(&self, id: &LayerId) -> Result<&LayerUnit> {
        self.units
            .get(id.index)
            .filter(|u| u.id == *id)
            .ok_or_else(|| Error::Lookup {
                what: "layer",
                name: id.name.clone(),
            })
    }

    /// Union of the parameters of the given units.
    pub fn select_parameters(&self, ids: &[LayerId]) -> Result<ParamSet> {
        let mut set = BTreeSet::new();
        for id in ids {
            set.extend(self.resolve(id)?.params.clone());
        }
        Ok(ParamSet { ids: set })
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.tensor.set_trainable(false);
        }
    }

    /// Sets the flag on exactly the parameters in `set`.
    pub fn set_trainable(&mut self, set: &ParamSet, flag: bool) -> Result<()> {
        if let Some(bad) = set.iter().find(|&i| i >= self.params.len()) {
            return Err(Error::Lookup {
                what: "parameter id",
                name: bad.to_string(),
            });
        }
        for i in set.iter() {
            self.params[i].tensor.set_trainable(flag);
        }
        Ok(())
    }

    pub fn trainable_set(&self) -> ParamSet {
        ParamSet::from_ids((0..self.params.len()).filter(|&i| self.params[i].tensor.trainable()))
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn grad_holders(&self) -> ParamSet {
        ParamSet::from_ids((0..self.params.len()).filter(|&i| self.params[i].tensor.grad().is_some()))
    }

    /// Drops gradients of every parameter, returning the bytes released.
    pub fn clear_grads(&mut self) -> usize {
        self.params.iter_mut().map(|p| p.tensor.clear_grad()).sum()
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.params.iter().map(|p| p.tensor.checksum()).collect()
    }

    /// Forward pass over a flattened `[batch, seq_len]` token matrix;
    /// returns the `[batch, outputs]` head output.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize], batch: usize) -> Result<Var> {
        let a = &self.arch;
        let l = a.seq_len;
        if batch == 0 || tokens.len() != batch * l {
            return Err(Error::InvalidShape {
                op: "forward",
                msg: format!("{} tokens for batch {batch} of length {l}", tokens.len()),
            });
        }
        let mut ids = 0usize..;
        let mut next = |tape: &mut Tape| tape.param(self, ids.next().expect("unbounded"));

        let table = next(tape)?;
        let pos = next(tape)?;
        let emb = tape.embedding_lookup(table, tokens)?;
        let mut x = tape.tile_add(emb, pos)?;

        for _ in 0..a.hidden {
            x = match a.unit {
                UnitKind::Dense => {
                    let (w, b, g, be) = (next(tape)?, next(tape)?, next(tape)?, next(tape)?);
                    let h = tape.matmul(x, w)?;
                    let h = tape.bias_add(h, b)?;
                    let h = activate(tape, a.activation, h);
                    let r = tape.add(x, h)?;
                    tape.layer_norm(r, g, be)?
                }
                UnitKind::Transformer => {
                    let (g1, b1) = (next(tape)?, next(tape)?);
                    let (wq, wk, wv, wo) = (next(tape)?, next(tape)?, next(tape)?, next(tape)?);
                    let (g2, b2) = (next(tape)?, next(tape)?);
                    let (w1, c1, w2, c2) = (next(tape)?, next(tape)?, next(tape)?, next(tape)?);
                    let n1 = tape.layer_norm(x, g1, b1)?;
                    let q = tape.matmul(n1, wq)?;
                    let k = tape.matmul(n1, wk)?;
                    let v = tape.matmul(n1, wv)?;
                    let att = tape.self_attention(q, k, v, l)?;
                    let o = tape.matmul(att, wo)?;
                    let h = tape.add(x, o)?;
                    let n2 = tape.layer_norm(h, g2, b2)?;
                    let f = tape.matmul(n2, w1)?;
                    let f = tape.bias_add(f, c1)?;
                    let f = activate(tape, a.activation, f);
                    let f = tape.matmul(f, w2)?;
                    let f = tape.bias_add(f, c2)?;
                    tape.add(h, f)?
                }
            };
        }

        let (w, b) = (next(tape)?, next(tape)?);
        let pooled = tape.mean_pool(x, l)?;
        let out = tape.matmul(pooled, w)?;
        tape.bias_add(out, b)
    }
}

fn activate(tape: &mut Tape, act: Activation, x: Var) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}

impl ParamStore for LayeredModel {
    fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.get(id).map(|p| &p.tensor)
    }

    fn param_mut(&mut self, id: usize) -> Option<&mut Tensor> {
        self.params.get_mut(id).map(|p| &mut p.tensor)
    }
}

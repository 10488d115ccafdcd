//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive application appends one node holding its output value and
//! whatever it saved for the backward pass. A node requires a gradient iff
//! one of its operands does; parameter leaves require one iff the backing
//! tensor is trainable. Backward visits each node once in reverse order and
//! only runs the rule of nodes that require a gradient, so frozen subgraphs
//! cost nothing during backpropagation.
//!
//! Shape rules (all matrices row-major):
//!
//! | op                      | operands                              | output   |
//! |-------------------------|---------------------------------------|----------|
//! | `matmul`                | `[r,s]`, `[s,c]`                      | `[r,c]`  |
//! | `bias_add`              | `[r,c]`, `[c]`                        | `[r,c]`  |
//! | `tile_add`              | `[r,c]`, `[p,c]`, `p` divides `r`     | `[r,c]`  |
//! | `add`, `mul`            | equal shapes                          | same     |
//! | `relu`, `gelu`, `scale` | any                                   | same     |
//! | `layer_norm`            | `[r,c]`, `[c]`, `[c]`                 | `[r,c]`  |
//! | `embedding_lookup`      | `[v,d]`, `n` ids `< v`                | `[n,d]`  |
//! | `self_attention`        | `q,k,v: [b*l,d]`, `l`                 | `[b*l,d]`|
//! | `mean_pool`             | `[b*l,d]`, `l`                        | `[b,d]`  |
//! | `softmax_cross_entropy` | `[b,c]`, `b` labels `< c`             | `[1]`    |
//! | `mse`                   | any, target of equal length           | `[1]`    |
//! | `sum`                   | any                                   | `[1]`    |

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    TileAdd(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        probs: Vec<f64>,
    },
    MeanPool {
        x: Var,
        seq_len: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

impl Op {
    fn saved_len(&self) -> usize {
        match self {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::Attention { probs, .. } | Op::SoftmaxCrossEntropy { probs, .. } => probs.len(),
            _ => 0,
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param(_))
    }
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// What one backward pass touched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose backward rule ran.
    pub nodes_visited: usize,
    /// High-water mark of live intermediate (non-parameter) gradient buffers.
    pub peak_intermediate_bytes: usize,
    /// Parameter ids that received a gradient, in first-visit order.
    pub params_touched: Vec<usize>,
}

/// Append-only record of one forward pass. Rebuilt every step.
#[derive(Debug)]
pub struct Tape {
    dtype: DType,
    nodes: Vec<Node>,
}

impl Tape {
    /// A tape whose intermediate values are stored at `dtype`.
    pub fn new(dtype: DType) -> Self {
        Tape {
            dtype,
            nodes: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Bytes held by non-leaf values and saved backward buffers.
    pub fn activation_bytes(&self) -> usize {
        let elems: usize = self
            .nodes
            .iter()
            .filter(|n| !n.op.is_leaf())
            .map(|n| n.value.len() + n.op.saved_len())
            .sum();
        elems * self.dtype.size_bytes()
    }

    fn push(&mut self, mut value: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.dtype.quantize_slice(&mut value);
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            other => Err(Error::InvalidShape {
                op,
                msg: format!("expected a matrix, got {other:?}"),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Constant leaf.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.is_empty() || data.len() != numel(&shape) {
            return Err(Error::InvalidShape {
                op: "input",
                msg: format!("{} values for shape {shape:?}", data.len()),
            });
        }
        Ok(self.push(data, shape, false, Op::Input))
    }

    /// Leaf bound to parameter `id` of `store`; it requires a gradient iff the
    /// tensor is trainable at the time of the call.
    pub fn param(&mut self, store: &impl ParamStore, id: usize) -> Result<Var> {
        let t = store.param(id).ok_or_else(|| Error::Lookup {
            what: "parameter id",
            name: id.to_string(),
        })?;
        let (value, shape, rg) = (t.data().to_vec(), t.shape().to_vec(), t.trainable());
        // parameter values are already quantized to their own storage dtype
        self.nodes.push(Node {
            value,
            shape,
            requires_grad: rg,
            op: Op::Param(id),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = self.dims2(a, "matmul")?;
        let (s2, c) = self.dims2(b, "matmul")?;
        if s != s2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![r, s],
                rhs: vec![s2, c],
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), r, s, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, vec![r, c], rg, Op::MatMul(a, b)))
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "bias_add")?;
        if self.shape(b) != [c] {
            return Err(Error::Shape {
                op: "bias_add",
                lhs: vec![r, c],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, vec![r, c], rg, Op::BiasAdd(x, b)))
    }

    /// Adds a `[p,c]` tile to every block of `p` consecutive rows of `x`.
    pub fn tile_add(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "tile_add")?;
        let (p, c2) = self.dims2(tile, "tile_add")?;
        if c != c2 || r % p != 0 {
            return Err(Error::Shape {
                op: "tile_add",
                lhs: vec![r, c],
                rhs: vec![p, c2],
            });
        }
        let tv = self.value(tile);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, x)| x + tv[i % (p * c)])
            .collect();
        let rg = self.rg(&[x, tile]);
        Ok(self.push(out, vec![r, c], rg, Op::TileAdd(x, tile)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), rg, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![s], vec![1], rg, Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), rg, Op::Relu(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), rg, Op::Gelu(x))
    }

    /// Normalizes each row of `x` over the last axis, then applies the
    /// learnable scale `gamma` and shift `beta`. A constant row normalizes to
    /// zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            let constant = row.iter().all(|&v| v == row[0]);
            if !constant {
                for (h, v) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *h = (v - mean) * rs;
                }
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            vec![r, c],
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "embedding_lookup",
                msg: "no ids".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table);
        let out: Vec<f64> = ids
            .iter()
            .flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Single-head scaled dot-product attention applied independently to each
    /// block of `seq_len` rows.
    pub fn self_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var> {
        let (r, d) = self.dims2(q, "self_attention")?;
        self.same_shape(q, k, "self_attention")?;
        self.same_shape(q, v, "self_attention")?;
        if seq_len == 0 || r % seq_len != 0 {
            return Err(Error::InvalidShape {
                op: "self_attention",
                msg: format!("{r} rows not divisible by sequence length {seq_len}"),
            });
        }
        let l = seq_len;
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; (r / l) * l * l];
        let mut out = vec![0.0; r * d];
        for b in 0..r / l {
            let base = b * l;
            let p = &mut probs[b * l * l..(b + 1) * l * l];
            for i in 0..l {
                let qi = &qv[(base + i) * d..(base + i + 1) * d];
                let row = &mut p[i * l..(i + 1) * l];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kv[(base + j) * d..(base + j + 1) * d];
                    *s = dot(qi, kj) * scale;
                }
                softmax_in_place(row);
                let o = &mut out[(base + i) * d..(base + i + 1) * d];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vv[(base + j) * d..(base + j + 1) * d];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += pij * vc;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            vec![r, d],
            rg,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                probs,
            },
        ))
    }

    /// Averages each block of `seq_len` rows into one row.
    pub fn mean_pool(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let (r, d) = self.dims2(x, "mean_pool")?;
        if seq_len == 0 || r % seq_len != 0 {
            return Err(Error::InvalidShape {
                op: "mean_pool",
                msg: format!("{r} rows not divisible by sequence length {seq_len}"),
            });
        }
        let b = r / seq_len;
        let xv = self.value(x);
        let mut out = vec![0.0; b * d];
        for (i, row) in xv.chunks(d).enumerate() {
            let o = &mut out[(i / seq_len) * d..(i / seq_len + 1) * d];
            for (oc, v) in o.iter_mut().zip(row) {
                *oc += v;
            }
        }
        let inv = 1.0 / seq_len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![b, d], rg, Op::MeanPool { x, seq_len }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Vocabulary(format!("label {bad} outside {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![loss / b as f64],
            vec![1],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::Shape {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Backpropagates from the scalar `loss`, accumulating gradients into
    /// every trainable parameter reachable from it. Consumes the tape.
    pub fn backward(self, loss: Var, store: &mut impl ParamStore) -> Result<BackwardStats> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut stats = BackwardStats::default();
        if !self.requires_grad(loss) {
            return Ok(stats);
        }
        let elem = self.dtype.size_bytes();
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut live = elem;
        stats.peak_intermediate_bytes = live;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            stats.nodes_visited += 1;
            if let Op::Param(id) = node.op {
                let t = store.param_mut(id).ok_or_else(|| Error::Lookup {
                    what: "parameter id",
                    name: id.to_string(),
                })?;
                t.accumulate_grad(&g)?;
                if !stats.params_touched.contains(&id) {
                    stats.params_touched.push(id);
                }
            } else {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads,
                    live: &mut live,
                    elem,
                };
                self.apply_rule(&node.op, &g, &mut sink);
                stats.peak_intermediate_bytes = stats.peak_intermediate_bytes.max(live);
            }
            live -= g.len() * elem;
        }
        Ok(stats)
    }

    fn apply_rule(&self, op: &Op, g: &[f64], sink: &mut GradSink<'_>) {
        match *op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (r, s) = (self.shape(a)[0], self.shape(a)[1]);
                let c = self.shape(b)[1];
                if sink.wants(a) {
                    // dA = dC · Bᵀ
                    let bv = self.value(b);
                    let mut da = vec![0.0; r * s];
                    for i in 0..r {
                        for kk in 0..s {
                            da[i * s + kk] = dot(&g[i * c..(i + 1) * c], &bv[kk * c..(kk + 1) * c]);
                        }
                    }
                    sink.add(a, &da);
                }
                if sink.wants(b) {
                    // dB = Aᵀ · dC
                    let av = self.value(a);
                    let mut db = vec![0.0; s * c];
                    for i in 0..r {
                        for kk in 0..s {
                            let aik = av[i * s + kk];
                            let row = &mut db[kk * c..(kk + 1) * c];
                            for (d, gv) in row.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                *d += aik * gv;
                            }
                        }
                    }
                    sink.add(b, &db);
                }
            }
            Op::BiasAdd(x, b) => {
                sink.add(x, g);
                if sink.wants(b) {
                    let c = self.shape(b)[0];
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    sink.add(b, &db);
                }
            }
            Op::TileAdd(x, tile) => {
                sink.add(x, g);
                if sink.wants(tile) {
                    let n = self.value(tile).len();
                    let mut dt = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        dt[i % n] += v;
                    }
                    sink.add(tile, &dt);
                }
            }
            Op::Add(a, b) => {
                sink.add(a, g);
                sink.add(b, g);
            }
            Op::Mul(a, b) => {
                if sink.wants(a) {
                    let d: Vec<f64> = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    sink.add(a, &d);
                }
                if sink.wants(b) {
                    let d: Vec<f64> = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    sink.add(b, &d);
                }
            }
            Op::Scale(x, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                sink.add(x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(x).len()];
                sink.add(x, &d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                sink.add(x, &d);
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g.iter().zip(self.value(x)).map(|(g, &v)| g * gelu_grad(v)).collect();
                sink.add(x, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let c = self.shape(gamma)[0];
                if sink.wants(gamma) {
                    let mut dg = vec![0.0; c];
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gv), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                    sink.add(gamma, &dg);
                }
                if sink.wants(beta) {
                    let mut db = vec![0.0; c];
                    for grow in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    sink.add(beta, &db);
                }
                if sink.wants(x) {
                    let gam = self.value(gamma);
                    let mut dx = vec![0.0; g.len()];
                    let cf = c as f64;
                    for (i, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cf;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / cf;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    sink.add(x, &dx);
                }
            }
            Op::Embedding { table, ref ids } => {
                let d = self.shape(table)[1];
                let mut dt = vec![0.0; self.value(table).len()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    for (t, v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *t += v;
                    }
                }
                sink.add(table, &dt);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len: l,
                ref probs,
            } => {
                let (r, d) = (self.shape(q)[0], self.shape(q)[1]);
                let scale = 1.0 / (d as f64).sqrt();
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let mut dq = vec![0.0; r * d];
                let mut dk = vec![0.0; r * d];
                let mut dv = vec![0.0; r * d];
                for b in 0..r / l {
                    let base = b * l;
                    let p = &probs[b * l * l..(b + 1) * l * l];
                    for i in 0..l {
                        let gi = &g[(base + i) * d..(base + i + 1) * d];
                        let prow = &p[i * l..(i + 1) * l];
                        // dP_ij = dO_i · V_j ; dS = P ⊙ (dP − Σ_j P_ij dP_ij)
                        let dp: Vec<f64> = (0..l)
                            .map(|j| dot(gi, &vv[(base + j) * d..(base + j + 1) * d]))
                            .collect();
                        let inner: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..l {
                            let pij = prow[j];
                            for c in 0..d {
                                dv[(base + j) * d + c] += pij * gi[c];
                            }
                            let ds = pij * (dp[j] - inner) * scale;
                            for c in 0..d {
                                dq[(base + i) * d + c] += ds * kv[(base + j) * d + c];
                                dk[(base + j) * d + c] += ds * qv[(base + i) * d + c];
                            }
                        }
                    }
                }
                sink.add(q, &dq);
                sink.add(k, &dk);
                sink.add(v, &dv);
            }
            Op::MeanPool { x, seq_len } => {
                let d = self.shape(x)[1];
                let inv = 1.0 / seq_len as f64;
                let r = self.shape(x)[0];
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let b = i / seq_len;
                    for c in 0..d {
                        dx[i * d + c] = g[b * d + c] * inv;
                    }
                }
                sink.add(x, &dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                let c = self.shape(logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                sink.add(logits, &d);
            }
            Op::Mse { pred, ref target } => {
                let f = 2.0 * g[0] / target.len() as f64;
                let d: Vec<f64> = self.value(pred).iter().zip(target).map(|(p, t)| f * (p - t)).collect();
                sink.add(pred, &d);
            }
        }
    }
}

struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    live: &'a mut usize,
    elem: usize,
}

impl GradSink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            slot @ None => {
                *slot = Some(g.to_vec());
                *self.live += g.len() * self.elem;
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, s: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for kk in 0..s {
            let aik = a[i * s + kk];
            for (o, bv) in orow.iter_mut().zip(&b[kk * c..(kk + 1) * c]) {
                *o += aik * bv;
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[(&[usize], &[f64])]) -> Vec<Tensor> {
        values
            .iter()
            .map(|(s, v)| {
                let mut t = Tensor::new(s.to_vec(), DType::F64, v.to_vec()).unwrap();
                t.set_trainable(true);
                t
            })
            .collect()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new(DType::F64);
        let id = tape
            .input(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
            .unwrap();
        let m: Vec<f64> = (1..=9).map(|v| v as f64 * 0.5).collect();
        let mv = tape.input(vec![3, 3], m.clone()).unwrap();
        let out = tape.matmul(id, mv).unwrap();
        assert_eq!(tape.value(out), m.as_slice());
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut tape = Tape::new(DType::F64);
        let a = tape.input(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = tape.input(vec![2, 1], vec![1., 1.]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new(DType::F64);
        let a = tape.input(vec![2, 3], vec![0.; 6]).unwrap();
        let b = tape.input(vec![2, 3], vec![0.; 6]).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.input(vec![3], vec![-1., 0., 2.]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0., 0., 2.]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_shift() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.input(vec![1, 4], vec![0.3; 4]).unwrap();
        let g = tape.input(vec![4], vec![2.0; 4]).unwrap();
        let b = tape.input(vec![4], vec![0.0; 4]).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);
    }

    #[test]
    fn uniform_softmax_cross_entropy_is_ln2() {
        let mut tape = Tape::new(DType::F64);
        let l = tape.input(vec![1, 2], vec![0., 0.]).unwrap();
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_vocabulary_error() {
        let mut tape = Tape::new(DType::F64);
        let l = tape.input(vec![1, 2], vec![0., 0.]).unwrap();
        assert!(matches!(tape.softmax_cross_entropy(l, &[2]), Err(Error::Vocabulary(_))));
        let t = tape.input(vec![3, 2], vec![0.; 6]).unwrap();
        assert!(matches!(tape.embedding_lookup(t, &[0, 3]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut params = store(&[(&[2, 2], &[1., -2., 3., 0.5])]);
        let mut tape = Tape::new(DType::F64);
        let w = tape.param(&params, 0).unwrap();
        let loss = tape.sum(w);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_half_squared_norm_is_identity() {
        let w0 = [0.25, -1.5, 2.0];
        let mut params = store(&[(&[3], &w0)]);
        let mut tape = Tape::new(DType::F64);
        let w = tape.param(&params, 0).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &w0);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut params = store(&[(&[2], &[1., 2.])]);
        let mut tape = Tape::new(DType::F64);
        let w = tape.param(&params, 0).unwrap();
        let y = tape.relu(w);
        assert!(matches!(tape.backward(y, &mut params), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut params = store(&[(&[1, 2], &[1., 2.]), (&[2, 1], &[3., 4.])]);
        params[0].set_trainable(false);
        let mut tape = Tape::new(DType::F64);
        let a = tape.param(&params, 0).unwrap();
        let b = tape.param(&params, 1).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let stats = tape.backward(loss, &mut params).unwrap();
        assert!(params[0].grad().is_none());
        assert_eq!(params[1].grad().unwrap(), &[1., 2.]);
        assert_eq!(stats.params_touched, vec![1]);
    }

    #[test]
    fn fully_frozen_graph_skips_backward() {
        let mut params = store(&[(&[2], &[1., 2.])]);
        params[0].set_trainable(false);
        let mut tape = Tape::new(DType::F64);
        let w = tape.param(&params, 0).unwrap();
        let loss = tape.sum(w);
        let stats = tape.backward(loss, &mut params).unwrap();
        assert_eq!(stats.nodes_visited, 0);
        assert!(params[0].grad().is_none());
    }
}

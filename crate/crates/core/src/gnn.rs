//! Message-passing conflict predictor with hand-written reverse mode.
//!
//! Each variable starts from an embedding of its raw features. In every
//! round each non-folded constraint maps the concatenated features of its
//! scope (in scope order) to one message per scope slot; a variable takes
//! the element-wise max of its incoming messages (zero when it has none) and
//! updates its features residually. A shared classifier maps the final
//! features to a logit; the score is its logistic.
//!
//! Unary Ref, Grasp and Pos constraints are not messaged; their parameters
//! are part of the raw features instead.
//!
//! All dense kernels process rows independently in a fixed order, so
//! relabeling variables permutes the scores bit for bit.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conflicts::LabeledInstance;
use crate::graph::{ConstraintKind, FactoredNlp, VarClass};
use crate::seed;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("model has no message net for {kind} with {arity} variables")]
    UnknownKind { kind: ConstraintKind, arity: usize },
    #[error("raw feature width {n_f} is below the required {required}")]
    FeatureOverflow { n_f: usize, required: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("{0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Width of the geometry block of the raw features.
pub const GEOMETRY_WIDTH: usize = 3;
/// Width of the folded unary-constraint block:
/// `[ref flag, ref x, ref y, grasp flag, region lo x, lo y, hi x, hi y]`.
pub const UNARY_WIDTH: usize = 8;
/// Smallest admissible raw feature width.
pub const RAW_FEATURES: usize = VarClass::ONE_HOT_WIDTH + GEOMETRY_WIDTH + UNARY_WIDTH;

const MODEL_VERSION: u32 = 1;

/// Constraint kinds whose unary instances are folded into features.
fn is_folded(kind: ConstraintKind, arity: usize) -> bool {
    arity == 1
        && matches!(
            kind,
            ConstraintKind::Ref | ConstraintKind::Grasp | ConstraintKind::Pos
        )
}

/// Row-major `|X| x n_f` raw features: class one-hot, geometry, folded
/// unary constraints, zero padding. The keyframe index is never used.
pub fn init_features(graph: &FactoredNlp, n_f: usize) -> Result<Vec<f64>, GnnError> {
    if n_f < RAW_FEATURES {
        return Err(GnnError::FeatureOverflow {
            n_f,
            required: RAW_FEATURES,
        });
    }
    let geo = VarClass::ONE_HOT_WIDTH;
    let unary = geo + GEOMETRY_WIDTH;
    let mut x = vec![0.0; graph.num_variables() * n_f];
    for v in graph.variables() {
        let row = &mut x[v.id * n_f..(v.id + 1) * n_f];
        row[v.class.one_hot_slot()] = 1.0;
        if v.geometry.len() > GEOMETRY_WIDTH {
            return Err(GnnError::FeatureOverflow {
                n_f,
                required: geo + v.geometry.len() + UNARY_WIDTH,
            });
        }
        row[geo..geo + v.geometry.len()].copy_from_slice(&v.geometry);
    }
    for c in graph.constraints() {
        if !is_folded(c.kind, c.scope.len()) {
            continue;
        }
        let row = &mut x[c.scope[0] * n_f..(c.scope[0] + 1) * n_f];
        match c.kind {
            ConstraintKind::Ref => {
                row[unary] = 1.0;
                for (k, &p) in c.params.iter().take(2).enumerate() {
                    row[unary + 1 + k] = p;
                }
            }
            ConstraintKind::Grasp => row[unary + 3] = 1.0,
            ConstraintKind::Pos => row[unary + 4..unary + 8].copy_from_slice(&c.params[..4]),
            _ => unreachable!("only folded kinds"),
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub n_f: usize,
    pub n_z: usize,
    pub n_mu: usize,
    pub hidden: usize,
    pub rounds: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            n_f: RAW_FEATURES,
            n_z: 64,
            n_mu: 64,
            hidden: 64,
            rounds: 3,
        }
    }
}

/// Message-net key: constraint kind and scope size.
pub type MessageKey = (ConstraintKind, usize);

/// Message-net keys needed by a graph, sorted.
pub fn message_keys(graph: &FactoredNlp) -> Vec<MessageKey> {
    let set: BTreeSet<MessageKey> = graph
        .constraints()
        .iter()
        .filter(|c| !is_folded(c.kind, c.scope.len()))
        .map(|c| (c.kind, c.scope.len()))
        .collect();
    set.into_iter().collect()
}

/// A dense layer stored as an `n_in x n_out` row-major weight block followed
/// by the bias.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    offset: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn w<'p>(&self, p: &'p [f64]) -> &'p [f64] {
        &p[self.offset..self.offset + self.n_in * self.n_out]
    }

    fn b<'p>(&self, p: &'p [f64]) -> &'p [f64] {
        let s = self.offset + self.n_in * self.n_out;
        &p[s..s + self.n_out]
    }

    /// `y = x W + b`, row by row.
    fn forward(&self, p: &[f64], x: &[f64], rows: usize, y: &mut [f64]) {
        let (w, b) = (self.w(p), self.b(p));
        for r in 0..rows {
            let xr = &x[r * self.n_in..(r + 1) * self.n_in];
            let yr = &mut y[r * self.n_out..(r + 1) * self.n_out];
            yr.copy_from_slice(b);
            for (k, &xk) in xr.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wk = &w[k * self.n_out..(k + 1) * self.n_out];
                for (yj, &wj) in yr.iter_mut().zip(wk) {
                    *yj += xk * wj;
                }
            }
        }
    }

    /// Accumulates parameter gradients and, optionally, writes `dx`.
    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &[f64],
        dy: &[f64],
        rows: usize,
        dx: Option<&mut [f64]>,
    ) {
        let w = self.w(p);
        let ws = self.offset;
        let bs = self.offset + self.n_in * self.n_out;
        for r in 0..rows {
            let xr = &x[r * self.n_in..(r + 1) * self.n_in];
            let dyr = &dy[r * self.n_out..(r + 1) * self.n_out];
            for (gb, &d) in g[bs..bs + self.n_out].iter_mut().zip(dyr) {
                *gb += d;
            }
            for (k, &xk) in xr.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let gw = &mut g[ws + k * self.n_out..ws + (k + 1) * self.n_out];
                for (gj, &d) in gw.iter_mut().zip(dyr) {
                    *gj += xk * d;
                }
            }
        }
        if let Some(dx) = dx {
            for r in 0..rows {
                let dyr = &dy[r * self.n_out..(r + 1) * self.n_out];
                let dxr = &mut dx[r * self.n_in..(r + 1) * self.n_in];
                for (k, dxk) in dxr.iter_mut().enumerate() {
                    let wk = &w[k * self.n_out..(k + 1) * self.n_out];
                    *dxk = wk.iter().zip(dyr).map(|(a, b)| a * b).sum();
                }
            }
        }
    }
}

/// Two dense layers with a rectified-linear hidden layer.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Mlp {
    l1: Dense,
    l2: Dense,
}

struct MlpCache {
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl Mlp {
    fn new(offset: &mut usize, n_in: usize, hidden: usize, n_out: usize) -> Self {
        let l1 = Dense {
            offset: *offset,
            n_in,
            n_out: hidden,
        };
        *offset += l1.len();
        let l2 = Dense {
            offset: *offset,
            n_in: hidden,
            n_out,
        };
        *offset += l2.len();
        Self { l1, l2 }
    }

    fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> MlpCache {
        let mut hidden = vec![0.0; rows * self.l1.n_out];
        self.l1.forward(p, x, rows, &mut hidden);
        for h in hidden.iter_mut() {
            if *h < 0.0 {
                *h = 0.0;
            }
        }
        let mut out = vec![0.0; rows * self.l2.n_out];
        self.l2.forward(p, &hidden, rows, &mut out);
        MlpCache { hidden, out }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &[f64],
        cache: &MlpCache,
        dout: &[f64],
        rows: usize,
        dx: Option<&mut [f64]>,
    ) {
        let mut dh = vec![0.0; rows * self.l1.n_out];
        self.l2
            .backward(p, g, &cache.hidden, dout, rows, Some(&mut dh));
        for (d, &h) in dh.iter_mut().zip(&cache.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        self.l1.backward(p, g, x, &dh, rows, dx);
    }

    fn init(&self, p: &mut [f64], rng: &mut impl Rng) {
        for d in [self.l1, self.l2] {
            let bound = 1.0 / (d.n_in as f64).sqrt();
            for w in &mut p[d.offset..d.offset + d.n_in * d.n_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: Mlp,
    messages: Vec<Mlp>,
    update: Mlp,
    classifier: Mlp,
    len: usize,
}

impl Layout {
    fn new(h: &Hyper, keys: &[MessageKey]) -> Self {
        let mut off = 0;
        let embed = Mlp::new(&mut off, h.n_f, h.hidden, h.n_z);
        let messages = keys
            .iter()
            .map(|&(_, arity)| Mlp::new(&mut off, arity * h.n_z, h.hidden, arity * h.n_mu))
            .collect();
        let update = Mlp::new(&mut off, h.n_mu + h.n_z, h.hidden, h.n_z);
        let classifier = Mlp::new(&mut off, h.n_z, h.hidden, 1);
        Self {
            embed,
            messages,
            update,
            classifier,
            len: off,
        }
    }
}

/// Parameters of all nets in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    hyper: Hyper,
    keys: Vec<MessageKey>,
    layout: Layout,
    params: Vec<f64>,
}

/// Constraints of one message key, flattened scopes.
struct Group {
    net: usize,
    arity: usize,
    scopes: Vec<usize>,
}

/// Graph-dependent data of a forward pass, reusable across passes.
pub struct Plan {
    n: usize,
    features: Vec<f64>,
    groups: Vec<Group>,
}

struct Round {
    msg_in: Vec<Vec<f64>>,
    msg: Vec<MlpCache>,
    /// Per `(variable, channel)`: group and flat index of the winning message.
    arg: Vec<(u32, u32)>,
    upd_in: Vec<f64>,
    upd: MlpCache,
}

struct Tape {
    embed: MlpCache,
    z: Vec<Vec<f64>>,
    rounds: Vec<Round>,
    cls: MlpCache,
}

const NONE: u32 = u32::MAX;

impl GnnModel {
    /// Fresh model with fan-in scaled uniform weights and zero biases.
    pub fn new(hyper: Hyper, keys: &[MessageKey], rng_seed: u64) -> Result<Self, GnnError> {
        if hyper.n_f < RAW_FEATURES {
            return Err(GnnError::FeatureOverflow {
                n_f: hyper.n_f,
                required: RAW_FEATURES,
            });
        }
        if hyper.n_z == 0 || hyper.n_mu == 0 || hyper.hidden == 0 {
            return Err(GnnError::Config("widths must be positive".into()));
        }
        let mut keys = keys.to_vec();
        keys.sort();
        keys.dedup();
        let layout = Layout::new(&hyper, &keys);
        let mut params = vec![0.0; layout.len];
        let mut rng = seed::rng(rng_seed);
        layout.embed.init(&mut params, &mut rng);
        for m in &layout.messages {
            m.init(&mut params, &mut rng);
        }
        layout.update.init(&mut params, &mut rng);
        layout.classifier.init(&mut params, &mut rng);
        Ok(Self {
            hyper,
            keys,
            layout,
            params,
        })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn keys(&self) -> &[MessageKey] {
        &self.keys
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter range of the message net for `key`.
    pub fn message_block(&self, key: MessageKey) -> Option<std::ops::Range<usize>> {
        let i = self.keys.binary_search(&key).ok()?;
        let m = &self.layout.messages[i];
        Some(m.l1.offset..m.l2.offset + m.l2.len())
    }

    /// Parameter range of the classifier.
    pub fn classifier_block(&self) -> std::ops::Range<usize> {
        let m = &self.layout.classifier;
        m.l1.offset..m.l2.offset + m.l2.len()
    }

    pub fn plan(&self, graph: &FactoredNlp) -> Result<Plan, GnnError> {
        let features = init_features(graph, self.hyper.n_f)?;
        let mut groups: Vec<Group> = Vec::new();
        let mut by_net: Vec<Option<usize>> = vec![None; self.keys.len()];
        for c in graph.constraints() {
            let arity = c.scope.len();
            if is_folded(c.kind, arity) {
                continue;
            }
            let net =
                self.keys
                    .binary_search(&(c.kind, arity))
                    .map_err(|_| GnnError::UnknownKind {
                        kind: c.kind,
                        arity,
                    })?;
            let gi = *by_net[net].get_or_insert_with(|| {
                groups.push(Group {
                    net,
                    arity,
                    scopes: Vec::new(),
                });
                groups.len() - 1
            });
            groups[gi].scopes.extend_from_slice(&c.scope);
        }
        groups.sort_by_key(|g| g.net);
        Ok(Plan {
            n: graph.num_variables(),
            features,
            groups,
        })
    }

    fn run(&self, plan: &Plan) -> Tape {
        let h = &self.hyper;
        let p = &self.params;
        let n = plan.n;
        let embed = self.layout.embed.forward(p, &plan.features, n);
        let mut z = vec![embed.out.clone()];
        let mut rounds = Vec::with_capacity(h.rounds);
        for _ in 0..h.rounds {
            let zk = z.last().expect("embedding");
            let mut msg_in = Vec::with_capacity(plan.groups.len());
            let mut msg = Vec::with_capacity(plan.groups.len());
            let mut agg = vec![f64::NEG_INFINITY; n * h.n_mu];
            let mut arg = vec![(NONE, NONE); n * h.n_mu];
            for (gi, g) in plan.groups.iter().enumerate() {
                let rows = g.scopes.len() / g.arity;
                let width = g.arity * h.n_z;
                let mut input = vec![0.0; rows * width];
                for (slot, &v) in g.scopes.iter().enumerate() {
                    input[slot * h.n_z..(slot + 1) * h.n_z]
                        .copy_from_slice(&zk[v * h.n_z..(v + 1) * h.n_z]);
                }
                let out = self.layout.messages[g.net].forward(p, &input, rows);
                for (slot, &v) in g.scopes.iter().enumerate() {
                    let m = &out.out[slot * h.n_mu..(slot + 1) * h.n_mu];
                    for (d, &val) in m.iter().enumerate() {
                        let k = v * h.n_mu + d;
                        if val > agg[k] {
                            agg[k] = val;
                            arg[k] = (gi as u32, (slot * h.n_mu + d) as u32);
                        }
                    }
                }
                msg_in.push(input);
                msg.push(out);
            }
            let w = h.n_mu + h.n_z;
            let mut upd_in = vec![0.0; n * w];
            for i in 0..n {
                let row = &mut upd_in[i * w..(i + 1) * w];
                for d in 0..h.n_mu {
                    let a = agg[i * h.n_mu + d];
                    row[d] = if a == f64::NEG_INFINITY { 0.0 } else { a };
                }
                row[h.n_mu..].copy_from_slice(&zk[i * h.n_z..(i + 1) * h.n_z]);
            }
            let upd = self.layout.update.forward(p, &upd_in, n);
            let next: Vec<f64> = zk.iter().zip(&upd.out).map(|(a, b)| a + b).collect();
            rounds.push(Round {
                msg_in,
                msg,
                arg,
                upd_in,
                upd,
            });
            z.push(next);
        }
        let cls = self
            .layout
            .classifier
            .forward(p, z.last().expect("features"), n);
        Tape {
            embed,
            z,
            rounds,
            cls,
        }
    }

    pub fn logits_planned(&self, plan: &Plan) -> Vec<f64> {
        self.run(plan).cls.out
    }

    pub fn logits(&self, graph: &FactoredNlp) -> Result<Vec<f64>, GnnError> {
        Ok(self.logits_planned(&self.plan(graph)?))
    }

    /// Per-variable scores in `(0, 1)`; low means predicted to be in a conflict.
    pub fn forward(&self, graph: &FactoredNlp) -> Result<Vec<f64>, GnnError> {
        Ok(self.logits(graph)?.into_iter().map(sigmoid).collect())
    }

    pub fn forward_planned(&self, plan: &Plan) -> Vec<f64> {
        self.logits_planned(plan).into_iter().map(sigmoid).collect()
    }

    /// Summed weighted cross-entropy over the graph's variables and its
    /// gradient, accumulated into `grad`.
    pub fn loss_grad_planned(
        &self,
        plan: &Plan,
        labels: &[u8],
        pos_weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        let h = &self.hyper;
        let p = &self.params;
        let n = plan.n;
        let tape = self.run(plan);
        let mut loss = 0.0;
        let mut dlogit = vec![0.0; n];
        for i in 0..n {
            let (l, d) = weighted_bce(tape.cls.out[i], labels[i], pos_weight);
            loss += l;
            dlogit[i] = d;
        }
        let mut dz = vec![0.0; n * h.n_z];
        self.layout.classifier.backward(
            p,
            grad,
            &tape.z[h.rounds],
            &tape.cls,
            &dlogit,
            n,
            Some(&mut dz),
        );
        for k in (0..h.rounds).rev() {
            let round = &tape.rounds[k];
            let w = h.n_mu + h.n_z;
            let mut dupd_in = vec![0.0; n * w];
            self.layout.update.backward(
                p,
                grad,
                &round.upd_in,
                &round.upd,
                &dz,
                n,
                Some(&mut dupd_in),
            );
            // residual path keeps dz; add the update's direct dependence on z
            let mut dmsg: Vec<Vec<f64>> =
                round.msg.iter().map(|m| vec![0.0; m.out.len()]).collect();
            for i in 0..n {
                for d in 0..h.n_mu {
                    let (gi, idx) = round.arg[i * h.n_mu + d];
                    if gi != NONE {
                        dmsg[gi as usize][idx as usize] += dupd_in[i * w + d];
                    }
                }
                for d in 0..h.n_z {
                    dz[i * h.n_z + d] += dupd_in[i * w + h.n_mu + d];
                }
            }
            for (gi, g) in plan.groups.iter().enumerate() {
                let rows = g.scopes.len() / g.arity;
                let mut din = vec![0.0; round.msg_in[gi].len()];
                self.layout.messages[g.net].backward(
                    p,
                    grad,
                    &round.msg_in[gi],
                    &round.msg[gi],
                    &dmsg[gi],
                    rows,
                    Some(&mut din),
                );
                for (slot, &v) in g.scopes.iter().enumerate() {
                    for d in 0..h.n_z {
                        dz[v * h.n_z + d] += din[slot * h.n_z + d];
                    }
                }
            }
        }
        self.layout
            .embed
            .backward(p, grad, &plan.features, &tape.embed, &dz, n, None);
        loss
    }

    /// Mean weighted cross-entropy over the graph's variables.
    pub fn loss(
        &self,
        graph: &FactoredNlp,
        labels: &[u8],
        pos_weight: f64,
    ) -> Result<f64, GnnError> {
        let logits = self.logits(graph)?;
        Ok(mean_loss(&logits, labels, pos_weight))
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDocument {
            version: MODEL_VERSION,
            hyper: self.hyper,
            nets: self.named_blocks(),
        };
        serde_json::to_string(&doc).expect("model serializes")
    }

    fn named_blocks(&self) -> Vec<NetRecord> {
        let block = |m: &Mlp| self.params[m.l1.offset..m.l2.offset + m.l2.len()].to_vec();
        let mut nets = vec![NetRecord {
            role: "embed".into(),
            kind: None,
            arity: None,
            params: block(&self.layout.embed),
        }];
        for (k, m) in self.keys.iter().zip(&self.layout.messages) {
            nets.push(NetRecord {
                role: "message".into(),
                kind: Some(k.0),
                arity: Some(k.1),
                params: block(m),
            });
        }
        nets.push(NetRecord {
            role: "update".into(),
            kind: None,
            arity: None,
            params: block(&self.layout.update),
        });
        nets.push(NetRecord {
            role: "classifier".into(),
            kind: None,
            arity: None,
            params: block(&self.layout.classifier),
        });
        nets
    }

    pub fn from_json(text: &str) -> Result<Self, GnnError> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| {
            GnnError::Format(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        if doc.version != MODEL_VERSION {
            return Err(GnnError::Version(doc.version));
        }
        let keys: Vec<MessageKey> = doc
            .nets
            .iter()
            .filter(|n| n.role == "message")
            .map(|n| match (n.kind, n.arity) {
                (Some(k), Some(a)) => Ok((k, a)),
                _ => Err(GnnError::Format(
                    "message net without kind and arity".into(),
                )),
            })
            .collect::<Result<_, _>>()?;
        let mut model = GnnModel::new(doc.hyper, &keys, 0)?;
        if model.keys != keys {
            return Err(GnnError::Format(
                "message nets are not sorted and unique".into(),
            ));
        }
        let expected = model.named_blocks();
        if expected.len() != doc.nets.len() {
            return Err(GnnError::Format("unexpected number of nets".into()));
        }
        let mut off = 0;
        for (want, got) in expected.iter().zip(&doc.nets) {
            if want.role != got.role || want.kind != got.kind || want.arity != got.arity {
                return Err(GnnError::Format(format!("unexpected net {}", got.role)));
            }
            if want.params.len() != got.params.len() {
                return Err(GnnError::Format(format!(
                    "{} net has {} params, expected {}",
                    got.role,
                    got.params.len(),
                    want.params.len()
                )));
            }
            model.params[off..off + got.params.len()].copy_from_slice(&got.params);
            off += got.params.len();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), GnnError> {
        std::fs::write(path, self.to_json()).map_err(|e| GnnError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GnnError> {
        let text = std::fs::read_to_string(path).map_err(|e| GnnError::Io(e.to_string()))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetRecord {
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<ConstraintKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arity: Option<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDocument {
    version: u32,
    hyper: Hyper,
    nets: Vec<NetRecord>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss and its derivative with respect to the logit. The infeasible class
/// (`y = 0`) is weighted by `pos_weight`.
fn weighted_bce(logit: f64, y: u8, pos_weight: f64) -> (f64, f64) {
    if y == 1 {
        (softplus(-logit), sigmoid(logit) - 1.0)
    } else {
        (pos_weight * softplus(logit), pos_weight * sigmoid(logit))
    }
}

/// Mean over variables of `-[w0 (1-y) log(1-s) + y log s]`, `s = sigmoid(logit)`.
pub fn mean_loss(logits: &[f64], labels: &[u8], pos_weight: f64) -> f64 {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return 0.0;
    }
    let s: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| weighted_bce(l, y, pos_weight).0)
        .sum();
    s / logits.len() as f64
}

/// Same loss from scores; scores are clamped away from 0 and 1.
pub fn loss_from_scores(scores: &[f64], labels: &[u8], pos_weight: f64) -> f64 {
    let logits: Vec<f64> = scores
        .iter()
        .map(|&s| {
            let s = s.clamp(1e-15, 1.0 - 1e-15);
            (s / (1.0 - s)).ln()
        })
        .collect();
    mean_loss(&logits, labels, pos_weight)
}

/// Compares reverse-mode gradients of the mean loss with central
/// differences on a sample of parameters; returns the largest relative
/// error. Each parameter is tried with steps 1e-4, 1e-5 and 1e-6 and keeps
/// its best match. A step whose one-sided slopes disagree (a rectifier or
/// max switching inside it) is discarded; a parameter with no usable step
/// is skipped.
pub fn grad_check(
    model: &GnnModel,
    graph: &FactoredNlp,
    labels: &[u8],
    pos_weight: f64,
    samples: usize,
    rng_seed: u64,
) -> Result<f64, GnnError> {
    let plan = model.plan(graph)?;
    let n = plan.n.max(1) as f64;
    let mut grad = vec![0.0; model.num_params()];
    model.loss_grad_planned(&plan, labels, pos_weight, &mut grad);
    grad.iter_mut().for_each(|g| *g /= n);
    let mut rng = seed::rng(rng_seed);
    let mut idx: Vec<usize> = (0..model.num_params()).collect();
    idx.shuffle(&mut rng);
    // bias the sample towards parameters that actually receive gradient
    idx.sort_by_key(|&i| grad[i] == 0.0);
    let mut worst: f64 = 0.0;
    let mut m = model.clone();
    let eval = |m: &GnnModel| mean_loss(&m.logits_planned(&plan), labels, pos_weight);
    let f0 = eval(&m);
    let mut checked = 0;
    for &i in &idx {
        if checked >= samples {
            break;
        }
        let orig = m.params[i];
        let a = grad[i];
        let mut best: Option<f64> = None;
        for h in [1e-4, 1e-5, 1e-6] {
            m.params[i] = orig + h;
            let fp = eval(&m);
            m.params[i] = orig - h;
            let fm = eval(&m);
            m.params[i] = orig;
            let right = (fp - f0) / h;
            let left = (f0 - fm) / h;
            let scale = right.abs().max(left.abs()).max(1e-8);
            if (right - left).abs() > 1e-3 * scale + 1e-9 {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            // below this magnitude the difference quotient is round-off
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
            best = Some(best.map_or(err, |b: f64| b.min(err)));
        }
        if let Some(err) = best {
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the infeasible class; `None` uses the ratio of class counts.
    pub pos_weight: Option<f64>,
    pub rng_seed: u64,
    pub validation_fraction: f64,
    pub hyper: Hyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            pos_weight: None,
            rng_seed: 0,
            validation_fraction: 0.1,
            hyper: Hyper::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Percent of feasible variables predicted feasible.
    pub acc_feasible: f64,
    /// Percent of infeasible variables predicted infeasible.
    pub acc_infeasible: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub pos_weight: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,acc_feasible,acc_infeasible\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{:.9},{:.9},{:.4},{:.4}",
                e.epoch, e.train_loss, e.val_loss, e.acc_feasible, e.acc_infeasible
            )
            .expect("string write");
        }
        s
    }
}

/// `(feasible %, infeasible %)` at threshold 0.5; `NaN` for an absent class.
pub fn accuracy_pair(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut c = [0usize; 2];
    let mut t = [0usize; 2];
    for (&s, &y) in scores.iter().zip(labels) {
        let y = y as usize;
        t[y] += 1;
        let pred = usize::from(s >= 0.5);
        if pred == y {
            c[y] += 1;
        }
    }
    let pct = |k: usize| {
        if t[k] == 0 {
            f64::NAN
        } else {
            100.0 * c[k] as f64 / t[k] as f64
        }
    };
    (pct(1), pct(0))
}

/// Counts of `(feasible, infeasible)` labels.
pub fn class_counts<'a>(data: impl IntoIterator<Item = &'a LabeledInstance>) -> (usize, usize) {
    let mut ones = 0;
    let mut zeros = 0;
    for inst in data {
        for &y in &inst.labels {
            if y == 1 {
                ones += 1;
            } else {
                zeros += 1;
            }
        }
    }
    (ones, zeros)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Scores for every instance, in order.
pub fn predict_all(model: &GnnModel, data: &[LabeledInstance]) -> Result<Vec<Vec<f64>>, GnnError> {
    data.par_iter()
        .map(|inst| model.forward(&inst.graph))
        .collect()
}

/// Mean loss and accuracy pair over a set of planned instances.
fn evaluate(model: &GnnModel, items: &[(Plan, &[u8])], pos_weight: f64) -> (f64, f64, f64) {
    let per: Vec<(Vec<f64>, &[u8])> = items
        .par_iter()
        .map(|(plan, labels)| (model.logits_planned(plan), *labels))
        .collect();
    let mut loss = 0.0;
    let mut count = 0;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (logits, y) in &per {
        loss += mean_loss(logits, y, pos_weight) * logits.len() as f64;
        count += logits.len();
        scores.extend(logits.iter().map(|&l| sigmoid(l)));
        labels.extend_from_slice(y);
    }
    let (af, ai) = accuracy_pair(&scores, &labels);
    (loss / count.max(1) as f64, af, ai)
}

/// Minibatch Adam on the weighted cross-entropy. A seeded shuffle splits
/// off the validation set; the returned model is the snapshot with the
/// lowest validation loss (training loss when there is no validation set).
pub fn train(
    data: &[LabeledInstance],
    config: &TrainConfig,
) -> Result<(GnnModel, TrainLog), GnnError> {
    train_with_progress(data, config, |_| {})
}

pub fn train_with_progress(
    data: &[LabeledInstance],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<(GnnModel, TrainLog), GnnError> {
    if data.is_empty() {
        return Err(GnnError::EmptyDataset);
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(GnnError::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(GnnError::Config(
            "validation_fraction must be in [0, 1)".into(),
        ));
    }
    let mut rng = seed::rng(config.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64) * config.validation_fraction).floor() as usize;
    let n_val = if data.len() > 1 {
        n_val.min(data.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut keys: BTreeSet<MessageKey> = BTreeSet::new();
    for inst in data {
        keys.extend(message_keys(&inst.graph));
    }
    let keys: Vec<MessageKey> = keys.into_iter().collect();
    let mut model = GnnModel::new(config.hyper, &keys, seed::derive(config.rng_seed, 1))?;

    let pos_weight = match config.pos_weight {
        Some(w) if w > 0.0 => w,
        Some(_) => return Err(GnnError::Config("pos_weight must be positive".into())),
        None => {
            let (ones, zeros) = class_counts(train_idx.iter().map(|&i| &data[i]));
            if zeros == 0 {
                1.0
            } else {
                ones as f64 / zeros as f64
            }
        }
    };

    let plans: Vec<Plan> = data
        .par_iter()
        .map(|inst| model.plan(&inst.graph))
        .collect::<Result<_, _>>()?;
    let val_items: Vec<(Plan, &[u8])> = val_idx
        .iter()
        .map(|&i| {
            model
                .plan(&data[i].graph)
                .map(|p| (p, data[i].labels.as_slice()))
        })
        .collect::<Result<_, _>>()?;

    let mut adam = Adam::new(model.num_params(), config.learning_rate);
    let mut log = TrainLog {
        pos_weight,
        ..TrainLog::default()
    };
    let mut best: Option<(f64, GnnModel)> = None;
    let mut train_order = train_idx.to_vec();
    for epoch in 0..config.epochs {
        train_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in train_order.chunks(config.batch_size) {
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = vec![0.0; model.num_params()];
                    let l = model.loss_grad_planned(&plans[i], &data[i].labels, pos_weight, &mut g);
                    (l, g)
                })
                .collect();
            let count: usize = batch.iter().map(|&i| data[i].labels.len()).sum();
            let mut grad = vec![0.0; model.num_params()];
            for (l, g) in &parts {
                epoch_loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            epoch_count += count;
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut model.params, &grad);
        }
        let train_loss = epoch_loss / epoch_count.max(1) as f64;
        if !train_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(GnnError::Divergence { epoch });
        }
        let (val_loss, af, ai) = if val_items.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            evaluate(&model, &val_items, pos_weight)
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            acc_feasible: af,
            acc_infeasible: ai,
        };
        info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} acc ({af:.1}, {ai:.1})");
        progress(&entry);
        log.epochs.push(entry);
        let key = if val_items.is_empty() {
            train_loss
        } else {
            val_loss
        };
        if best.as_ref().is_none_or(|(b, _)| key < *b) {
            best = Some((key, model.clone()));
            log.best_epoch = epoch;
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, log))
}

/// Writes the training log as CSV.
pub fn write_log(log: &TrainLog, path: &Path) -> Result<(), GnnError> {
    let mut f = std::fs::File::create(path).map_err(|e| GnnError::Io(e.to_string()))?;
    f.write_all(log.to_csv().as_bytes())
        .map_err(|e| GnnError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::six_graph;

    fn small_model(g: &FactoredNlp, rounds: usize) -> GnnModel {
        let hyper = Hyper {
            n_z: 8,
            n_mu: 6,
            hidden: 7,
            rounds,
            ..Hyper::default()
        };
        GnnModel::new(hyper, &message_keys(g), 3).unwrap()
    }

    #[test]
    fn robot_row_layout() {
        let mut g = FactoredNlp::new();
        g.add_variable(2, VarClass::RobotConfig, 4, vec![0.32, 0.41, 0.56])
            .unwrap();
        let x = init_features(&g, RAW_FEATURES).unwrap();
        let mut want = vec![0.0; RAW_FEATURES];
        want[0] = 1.0;
        want[6..9].copy_from_slice(&[0.32, 0.41, 0.56]);
        assert_eq!(x, want);
        assert!(init_features(&g, RAW_FEATURES - 1).is_err());
    }

    #[test]
    fn scores_in_open_interval() {
        let g = six_graph();
        let m = small_model(&g, 2);
        let s = m.forward(&g).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_classifier_gives_half() {
        let g = six_graph();
        let mut m = small_model(&g, 2);
        let r = m.classifier_block();
        m.params_mut()[r].iter_mut().for_each(|p| *p = 0.0);
        assert!(m.forward(&g).unwrap().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn balanced_half_scores_cost_ln2() {
        let l = mean_loss(&[0.0; 4], &[0, 1, 0, 1], 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let saturated = mean_loss(&[-800.0, 800.0], &[0, 1], 3.0);
        assert!(saturated < 1e-300);
        let from_scores = loss_from_scores(&[0.5, 0.5], &[0, 1], 1.0);
        assert!((from_scores - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_differences() {
        let g = six_graph();
        for rounds in [0, 1, 3] {
            let m = small_model(&g, rounds);
            for labels in [[0u8, 1, 1, 0, 1, 1], [1; 6], [0; 6]] {
                let err = grad_check(&m, &g, &labels, 2.5, 200, 1).unwrap();
                assert!(err <= 1e-4, "rounds {rounds}: {err}");
            }
        }
    }

    #[test]
    fn unknown_kind_is_reported() {
        let g = six_graph();
        let m = GnnModel::new(Hyper::default(), &[], 0).unwrap();
        assert!(matches!(m.forward(&g), Err(GnnError::UnknownKind { .. })));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let g = six_graph();
        let m = small_model(&g, 2);
        let back = GnnModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.forward(&g).unwrap(), m.forward(&g).unwrap());
        let text = m.to_json();
        assert!(GnnModel::from_json(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn overfits_one_instance() {
        let g = six_graph();
        let inst = LabeledInstance {
            graph: g,
            labels: vec![0, 0, 1, 1, 1, 0],
            conflicts: Vec::new(),
            seed: None,
        };
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 1e-2,
            pos_weight: Some(1.0),
            validation_fraction: 0.0,
            hyper: Hyper {
                n_z: 16,
                n_mu: 16,
                hidden: 16,
                rounds: 2,
                ..Hyper::default()
            },
            ..TrainConfig::default()
        };
        let (_, log) = train(std::slice::from_ref(&inst), &cfg).unwrap();
        let first = log.epochs[0].train_loss;
        let last = log.epochs.last().unwrap().train_loss;
        assert!(last <= 0.1 * first, "{first} -> {last}");
        let (_, again) = train(std::slice::from_ref(&inst), &cfg).unwrap();
        assert_eq!(log.to_csv(), again.to_csv());
    }
}

//! Factored nonlinear programs: a bipartite graph of typed continuous
//! variables and typed constraints, plus variable-induced subgraphs and
//! connected-component analysis over them.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, FRAME_PARAMS};

pub type VarId = usize;
pub type ConId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("variable dimension must be at least 1")]
    ZeroDim,
    #[error("{class} expects {expected} geometry values, got {got}")]
    GeometryArity {
        class: VarClass,
        expected: usize,
        got: usize,
    },
    #[error("{kind} cannot take a scope of {got} variables")]
    ScopeArity { kind: ConstraintKind, got: usize },
    #[error("unknown variable id {0}")]
    UnknownVariable(VarId),
    #[error("variable {0} appears twice in a scope")]
    DuplicateInScope(VarId),
    #[error("{kind} expects {expected} params, got {got}")]
    ParamsLength {
        kind: ConstraintKind,
        expected: String,
        got: usize,
    },
    #[error("{kind}: {reason}")]
    InvalidParams {
        kind: ConstraintKind,
        reason: String,
    },
    #[error("{kind}: variable {var} has dimension {got}, expected {expected}")]
    DimMismatch {
        kind: ConstraintKind,
        var: VarId,
        expected: usize,
        got: usize,
    },
    #[error("{what} id {got} is out of order (expected {expected})")]
    IdOrder {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("subgraphs belong to different graphs")]
    ParentMismatch,
    #[error("invalid record: {0}")]
    Record(String),
    #[error("malformed graph document at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Semantic class of a variable. Each class has a fixed one-hot slot and a
/// fixed geometry arity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarClass {
    /// Robot joint configuration; geometry is the planar base pose `(x, y, theta)`.
    RobotConfig,
    /// Object pose relative to the world/table frame; geometry is the object's start pose.
    ObjectRelative,
    /// Absolute object position; geometry is the object's half extents.
    ObjectAbsolute,
    /// Object pose relative to a gripper; geometry is the object's start pose.
    RelativeToGripper,
    /// Object pose relative to a supporting object; geometry is the object's start pose.
    RelativeToObject,
}

impl VarClass {
    pub const ALL: [VarClass; 5] = [
        VarClass::RobotConfig,
        VarClass::ObjectRelative,
        VarClass::ObjectAbsolute,
        VarClass::RelativeToGripper,
        VarClass::RelativeToObject,
    ];

    /// Width of the one-hot class prefix of the raw feature encoding.
    pub const ONE_HOT_WIDTH: usize = 6;

    pub fn geometry_arity(self) -> usize {
        match self {
            VarClass::RobotConfig => 3,
            VarClass::ObjectAbsolute => 2,
            VarClass::ObjectRelative | VarClass::RelativeToGripper | VarClass::RelativeToObject => {
                3
            }
        }
    }

    pub fn one_hot_slot(self) -> usize {
        match self {
            VarClass::RobotConfig => 0,
            VarClass::ObjectRelative => 1,
            VarClass::ObjectAbsolute => 2,
            VarClass::RelativeToGripper => 3,
            VarClass::RelativeToObject => 4,
        }
    }

    pub fn max_geometry_arity() -> usize {
        Self::ALL
            .iter()
            .map(|c| c.geometry_arity())
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for VarClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VarClass::RobotConfig => "robot_config",
            VarClass::ObjectRelative => "object_relative",
            VarClass::ObjectAbsolute => "object_absolute",
            VarClass::RelativeToGripper => "relative_to_gripper",
            VarClass::RelativeToObject => "relative_to_object",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `x = target`.
    Ref,
    /// `x_i = x_j`.
    Equal,
    /// `absolute = frame(parent) + relative`.
    PoseDiff,
    /// Kinematic switch: `frame1(p1) + rel1 = frame2(p2) + rel2`.
    Kin,
    /// Object centred in the gripper: `relative = 0`.
    Grasp,
    /// Placement inside an axis-aligned box.
    Pos,
    /// Disc non-penetration: `r_a + r_b + clearance - |p_a - p_b| <= 0`.
    Collision,
    /// `a . x - b <= 0`.
    LinearIneq,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 8] = [
        ConstraintKind::Ref,
        ConstraintKind::Equal,
        ConstraintKind::PoseDiff,
        ConstraintKind::Kin,
        ConstraintKind::Grasp,
        ConstraintKind::Pos,
        ConstraintKind::Collision,
        ConstraintKind::LinearIneq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintKind::Ref => "ref",
            ConstraintKind::Equal => "equal",
            ConstraintKind::PoseDiff => "pose_diff",
            ConstraintKind::Kin => "kin",
            ConstraintKind::Grasp => "grasp",
            ConstraintKind::Pos => "pos",
            ConstraintKind::Collision => "collision",
            ConstraintKind::LinearIneq => "linear_ineq",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableNode {
    pub id: VarId,
    pub dim: usize,
    pub class: VarClass,
    /// Keyframe index. Metadata only; never part of the learned encoding.
    pub time: u32,
    pub geometry: Vec<f64>,
}

impl VariableNode {
    /// Default starting point for the solver: the pose carried in the
    /// geometry when the class has one, the origin otherwise.
    pub fn reference_value(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if matches!(self.class, VarClass::ObjectRelative) {
            for (dst, src) in v.iter_mut().zip(&self.geometry) {
                *dst = *src;
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintNode {
    pub id: ConId,
    pub kind: ConstraintKind,
    /// Ordered scope `N(a)`; the order is part of the constraint's meaning.
    pub scope: Vec<VarId>,
    pub params: Vec<f64>,
    pub residual_dim: usize,
    pub is_equality: bool,
}

impl ConstraintNode {
    pub fn is_unary(&self) -> bool {
        self.scope.len() == 1
    }
}

/// A bipartite graph of variables and constraints. Edges are implied by the
/// constraint scopes; the reverse adjacency is kept consistent on insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactoredNlp {
    variables: Vec<VariableNode>,
    constraints: Vec<ConstraintNode>,
    adjacency: Vec<Vec<ConId>>,
}

impl FactoredNlp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn variables(&self) -> &[VariableNode] {
        &self.variables
    }

    pub fn constraints(&self) -> &[ConstraintNode] {
        &self.constraints
    }

    pub fn variable(&self, id: VarId) -> &VariableNode {
        &self.variables[id]
    }

    pub fn constraint(&self, id: ConId) -> &ConstraintNode {
        &self.constraints[id]
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Constraints whose scope contains `var` (`N(i)`), ascending.
    pub fn neighbors(&self, var: VarId) -> &[ConId] {
        &self.adjacency[var]
    }

    pub fn add_variable(
        &mut self,
        dim: usize,
        class: VarClass,
        time: u32,
        geometry: Vec<f64>,
    ) -> Result<VarId, GraphError> {
        if dim == 0 {
            return Err(GraphError::ZeroDim);
        }
        if geometry.len() != class.geometry_arity() {
            return Err(GraphError::GeometryArity {
                class,
                expected: class.geometry_arity(),
                got: geometry.len(),
            });
        }
        let id = self.variables.len();
        self.variables.push(VariableNode {
            id,
            dim,
            class,
            time,
            geometry,
        });
        self.adjacency.push(Vec::new());
        Ok(id)
    }

    pub fn add_constraint(
        &mut self,
        kind: ConstraintKind,
        scope: Vec<VarId>,
        params: Vec<f64>,
    ) -> Result<ConId, GraphError> {
        if scope.is_empty() {
            return Err(GraphError::ScopeArity { kind, got: 0 });
        }
        let mut seen = BTreeSet::new();
        for &v in &scope {
            if v >= self.variables.len() {
                return Err(GraphError::UnknownVariable(v));
            }
            if !seen.insert(v) {
                return Err(GraphError::DuplicateInScope(v));
            }
        }
        let (residual_dim, is_equality) = self.check_constraint(kind, &scope, &params)?;
        let id = self.constraints.len();
        for &v in &scope {
            self.adjacency[v].push(id);
        }
        self.constraints.push(ConstraintNode {
            id,
            kind,
            scope,
            params,
            residual_dim,
            is_equality,
        });
        Ok(id)
    }

    fn require_dim(
        &self,
        kind: ConstraintKind,
        scope: &[VarId],
        dim: usize,
    ) -> Result<(), GraphError> {
        for &v in scope {
            let got = self.variables[v].dim;
            if got != dim {
                return Err(GraphError::DimMismatch {
                    kind,
                    var: v,
                    expected: dim,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Validates a constraint and returns `(residual_dim, is_equality)`.
    fn check_constraint(
        &self,
        kind: ConstraintKind,
        scope: &[VarId],
        params: &[f64],
    ) -> Result<(usize, bool), GraphError> {
        use ConstraintKind::*;
        let n = scope.len();
        let arity_err = || GraphError::ScopeArity { kind, got: n };
        let len_err = |expected: &str| GraphError::ParamsLength {
            kind,
            expected: expected.to_string(),
            got: params.len(),
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(GraphError::InvalidParams {
                kind,
                reason: "params must be finite".into(),
            });
        }
        match kind {
            Ref => {
                if n != 1 {
                    return Err(arity_err());
                }
                let dim = self.variables[scope[0]].dim;
                if params.len() != dim {
                    return Err(len_err(&dim.to_string()));
                }
                Ok((dim, true))
            }
            Equal => {
                if n != 2 {
                    return Err(arity_err());
                }
                let dim = self.variables[scope[0]].dim;
                self.require_dim(kind, scope, dim)?;
                if !params.is_empty() {
                    return Err(len_err("0"));
                }
                Ok((dim, true))
            }
            PoseDiff => {
                if !(2..=3).contains(&n) {
                    return Err(arity_err());
                }
                self.require_dim(kind, scope, 2)?;
                if params.len() != FRAME_PARAMS {
                    return Err(len_err("4"));
                }
                let frame = decode_frame(kind, params)?;
                if frame.has_variable() != (n == 3) {
                    return Err(arity_err());
                }
                Ok((2, true))
            }
            Kin => {
                if !(3..=4).contains(&n) {
                    return Err(arity_err());
                }
                self.require_dim(kind, scope, 2)?;
                if params.len() != 2 * FRAME_PARAMS {
                    return Err(len_err("8"));
                }
                let f1 = decode_frame(kind, &params[..FRAME_PARAMS])?;
                let f2 = decode_frame(kind, &params[FRAME_PARAMS..])?;
                let parents = f1.has_variable() as usize + f2.has_variable() as usize;
                if parents + 2 != n {
                    return Err(arity_err());
                }
                Ok((2, true))
            }
            Grasp => {
                if n != 1 {
                    return Err(arity_err());
                }
                self.require_dim(kind, scope, 2)?;
                if !params.is_empty() {
                    return Err(len_err("0"));
                }
                Ok((2, true))
            }
            Pos => {
                if n != 1 {
                    return Err(arity_err());
                }
                self.require_dim(kind, scope, 2)?;
                if params.len() != 4 {
                    return Err(len_err("4"));
                }
                if params[0] > params[2] || params[1] > params[3] {
                    return Err(GraphError::InvalidParams {
                        kind,
                        reason: "region lower corner exceeds upper corner".into(),
                    });
                }
                Ok((4, false))
            }
            Collision => {
                if n != 2 {
                    return Err(arity_err());
                }
                self.require_dim(kind, scope, 2)?;
                if params.len() != 3 && params.len() != 3 + 2 * FRAME_PARAMS {
                    return Err(len_err("3 or 11"));
                }
                if params[..3].iter().any(|&p| p < 0.0) {
                    return Err(GraphError::InvalidParams {
                        kind,
                        reason: "radii and clearance must be nonnegative".into(),
                    });
                }
                if params.len() > 3 {
                    for f in [
                        decode_frame(kind, &params[3..3 + FRAME_PARAMS])?,
                        decode_frame(kind, &params[3 + FRAME_PARAMS..])?,
                    ] {
                        if !f.has_variable() {
                            return Err(GraphError::InvalidParams {
                                kind,
                                reason: "collision frames need a variable".into(),
                            });
                        }
                    }
                }
                Ok((1, false))
            }
            LinearIneq => {
                let total: usize = scope.iter().map(|&v| self.variables[v].dim).sum();
                if params.len() != total + 1 {
                    return Err(len_err(&(total + 1).to_string()));
                }
                Ok((1, false))
            }
        }
    }

    /// The whole graph as a subgraph.
    pub fn full(&self) -> Subgraph<'_> {
        Subgraph {
            graph: self,
            variables: (0..self.variables.len()).collect(),
            constraints: (0..self.constraints.len()).collect(),
        }
    }

    /// `G[X']`: the variables `X'` and every constraint whose scope lies in `X'`.
    pub fn induced_subgraph<I>(&self, variables: I) -> Result<Subgraph<'_>, GraphError>
    where
        I: IntoIterator<Item = VarId>,
    {
        let mut vars: Vec<VarId> = variables.into_iter().collect();
        if let Some(&bad) = vars.iter().find(|&&v| v >= self.variables.len()) {
            return Err(GraphError::UnknownVariable(bad));
        }
        vars.sort_unstable();
        vars.dedup();
        Ok(self.induced_sorted(vars))
    }

    /// `vars` must be sorted, deduplicated and valid.
    pub(crate) fn induced_sorted(&self, vars: Vec<VarId>) -> Subgraph<'_> {
        let mut mask = vec![false; self.variables.len()];
        for &v in &vars {
            mask[v] = true;
        }
        let mut constraints = Vec::new();
        for &v in &vars {
            for &c in &self.adjacency[v] {
                let scope = &self.constraints[c].scope;
                // visit each constraint once, from its smallest scope member
                if scope.iter().min() == Some(&v) && scope.iter().all(|&u| mask[u]) {
                    constraints.push(c);
                }
            }
        }
        constraints.sort_unstable();
        Subgraph {
            graph: self,
            variables: vars,
            constraints,
        }
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            variables: self
                .variables
                .iter()
                .map(|v| VariableRecord {
                    id: v.id,
                    dim: v.dim,
                    class: v.class,
                    time: v.time,
                    geometry: v.geometry.clone(),
                })
                .collect(),
            constraints: self
                .constraints
                .iter()
                .map(|c| ConstraintRecord {
                    id: c.id,
                    kind: c.kind,
                    scope: c.scope.clone(),
                    params: c.params.clone(),
                    equality: c.is_equality,
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &GraphDocument) -> Result<Self, GraphError> {
        let mut g = FactoredNlp::new();
        for (i, v) in doc.variables.iter().enumerate() {
            if v.id != i {
                return Err(GraphError::IdOrder {
                    what: "variable",
                    expected: i,
                    got: v.id,
                });
            }
            g.add_variable(v.dim, v.class, v.time, v.geometry.clone())?;
        }
        for (i, c) in doc.constraints.iter().enumerate() {
            if c.id != i {
                return Err(GraphError::IdOrder {
                    what: "constraint",
                    expected: i,
                    got: c.id,
                });
            }
            let id = g.add_constraint(c.kind, c.scope.clone(), c.params.clone())?;
            if g.constraints[id].is_equality != c.equality {
                return Err(GraphError::InvalidParams {
                    kind: c.kind,
                    reason: format!("constraint {i} equality flag disagrees with its kind"),
                });
            }
        }
        Ok(g)
    }

    /// Serializes to a single-line JSON document.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("graph documents always serialize")
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.to_json().into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, GraphError> {
        let doc: GraphDocument = serde_json::from_slice(bytes).map_err(parse_error)?;
        Self::from_document(&doc)
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Self>, GraphError> {
        let mut out = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| GraphError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let g = Self::deserialize(line.as_bytes()).map_err(|e| match e {
                GraphError::Parse {
                    column, message, ..
                } => GraphError::Parse {
                    line: lineno + 1,
                    column,
                    message,
                },
                other => other,
            })?;
            out.push(g);
        }
        Ok(out)
    }

    pub fn write_jsonl<W: Write>(graphs: &[Self], mut w: W) -> Result<(), GraphError> {
        for g in graphs {
            writeln!(w, "{}", g.to_json()).map_err(|e| GraphError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

fn decode_frame(kind: ConstraintKind, params: &[f64]) -> Result<Frame, GraphError> {
    Frame::decode(params).ok_or_else(|| GraphError::InvalidParams {
        kind,
        reason: format!(
            "bad frame encoding {:?}",
            &params[..params.len().min(FRAME_PARAMS)]
        ),
    })
}

pub(crate) fn parse_error(e: serde_json::Error) -> GraphError {
    GraphError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// On-disk form of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub variables: Vec<VariableRecord>,
    pub constraints: Vec<ConstraintRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRecord {
    pub id: VarId,
    pub dim: usize,
    pub class: VarClass,
    pub time: u32,
    pub geometry: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub id: ConId,
    pub kind: ConstraintKind,
    pub scope: Vec<VarId>,
    pub params: Vec<f64>,
    pub equality: bool,
}

impl Serialize for FactoredNlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_document().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FactoredNlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = GraphDocument::deserialize(d)?;
        FactoredNlp::from_document(&doc).map_err(serde::de::Error::custom)
    }
}

/// A variable-induced subgraph of a parent graph. Variables and constraints
/// are kept sorted ascending.
#[derive(Debug, Clone)]
pub struct Subgraph<'g> {
    graph: &'g FactoredNlp,
    variables: Vec<VarId>,
    constraints: Vec<ConId>,
}

impl PartialEq for Subgraph<'_> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.graph, other.graph)
            && self.variables == other.variables
            && self.constraints == other.constraints
    }
}

impl<'g> Subgraph<'g> {
    pub fn graph(&self) -> &'g FactoredNlp {
        self.graph
    }

    pub fn variables(&self) -> &[VarId] {
        &self.variables
    }

    pub fn constraints(&self) -> &[ConId] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn contains(&self, var: VarId) -> bool {
        self.variables.binary_search(&var).is_ok()
    }

    /// `G[vars]` on the same parent graph.
    pub fn induced<I: IntoIterator<Item = VarId>>(
        &self,
        vars: I,
    ) -> Result<Subgraph<'g>, GraphError> {
        self.graph.induced_subgraph(vars)
    }

    /// This subgraph with the given variables removed.
    pub fn without(&self, removed: &[VarId]) -> Subgraph<'g> {
        let keep = self
            .variables
            .iter()
            .copied()
            .filter(|v| !removed.contains(v))
            .collect();
        self.graph.induced_sorted(keep)
    }

    /// True iff `other`'s variables are a subset of this subgraph's.
    pub fn is_supergraph(&self, other: &Subgraph<'_>) -> Result<bool, GraphError> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(GraphError::ParentMismatch);
        }
        Ok(is_sorted_subset(&other.variables, &self.variables))
    }

    /// Maximal connected pieces of this subgraph, ordered by smallest variable id.
    pub fn connected_components(&self) -> Vec<Subgraph<'g>> {
        let n = self.variables.len();
        if n == 0 {
            return Vec::new();
        }
        let index = |v: VarId| {
            self.variables
                .binary_search(&v)
                .expect("scope inside subgraph")
        };
        let mut uf = UnionFind::new(n);
        for &c in &self.constraints {
            let scope = &self.graph.constraints[c].scope;
            let first = index(scope[0]);
            for &v in &scope[1..] {
                uf.union(first, index(v));
            }
        }
        // roots in order of first appearance give components sorted by min id
        let mut slot = vec![usize::MAX; n];
        let mut groups: Vec<Vec<VarId>> = Vec::new();
        for (i, &v) in self.variables.iter().enumerate() {
            let r = uf.find(i);
            if slot[r] == usize::MAX {
                slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[r]].push(v);
        }
        let mut cons: Vec<Vec<ConId>> = vec![Vec::new(); groups.len()];
        for &c in &self.constraints {
            let r = uf.find(index(self.graph.constraints[c].scope[0]));
            cons[slot[r]].push(c);
        }
        groups
            .into_iter()
            .zip(cons)
            .map(|(variables, constraints)| Subgraph {
                graph: self.graph,
                variables,
                constraints,
            })
            .collect()
    }
}

/// Both slices sorted ascending.
pub fn is_sorted_subset(small: &[VarId], big: &[VarId]) -> bool {
    let mut j = 0;
    for &x in small {
        while j < big.len() && big[j] < x {
            j += 1;
        }
        if j == big.len() || big[j] != x {
            return false;
        }
        j += 1;
    }
    true
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return false;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
        true
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ConstraintKind::*;

    fn rel(g: &mut FactoredNlp) -> VarId {
        g.add_variable(2, VarClass::ObjectRelative, 0, vec![0.0; 3])
            .unwrap()
    }

    /// Six variables and six constraints shaped like a small factor graph:
    /// (0,1) (0,2) (1,2,3) (2,4) (3,4,5) (4,5).
    pub(crate) fn six_graph() -> FactoredNlp {
        let mut g = FactoredNlp::new();
        for _ in 0..6 {
            rel(&mut g);
        }
        g.add_constraint(Equal, vec![0, 1], vec![]).unwrap();
        g.add_constraint(Equal, vec![0, 2], vec![]).unwrap();
        g.add_constraint(LinearIneq, vec![1, 2, 3], vec![0.0; 7])
            .unwrap();
        g.add_constraint(Equal, vec![2, 4], vec![]).unwrap();
        g.add_constraint(LinearIneq, vec![3, 4, 5], vec![0.0; 7])
            .unwrap();
        g.add_constraint(Equal, vec![4, 5], vec![]).unwrap();
        g
    }

    #[test]
    fn dense_ids() {
        let mut g = FactoredNlp::new();
        assert_eq!(
            g.add_variable(2, VarClass::RobotConfig, 0, vec![0.0; 3])
                .unwrap(),
            0
        );
        assert_eq!(
            g.add_variable(2, VarClass::RobotConfig, 0, vec![0.0; 3])
                .unwrap(),
            1
        );
    }

    #[test]
    fn geometry_arity_checked() {
        let mut g = FactoredNlp::new();
        let err = g
            .add_variable(2, VarClass::RobotConfig, 0, vec![0.0; 5])
            .unwrap_err();
        assert!(matches!(
            err,
            GraphError::GeometryArity {
                expected: 3,
                got: 5,
                ..
            }
        ));
        assert_eq!(
            g.add_variable(0, VarClass::RobotConfig, 0, vec![0.0; 3]),
            Err(GraphError::ZeroDim)
        );
    }

    #[test]
    fn residual_dims_from_kind() {
        let mut g = FactoredNlp::new();
        let a = rel(&mut g);
        let b = rel(&mut g);
        let abs_a = g
            .add_variable(2, VarClass::ObjectAbsolute, 0, vec![0.1, 0.1])
            .unwrap();
        let abs_b = g
            .add_variable(2, VarClass::ObjectAbsolute, 0, vec![0.1, 0.1])
            .unwrap();
        let e = g.add_constraint(Equal, vec![a, b], vec![]).unwrap();
        assert_eq!(g.constraint(e).residual_dim, 2);
        assert!(g.constraint(e).is_equality);
        let c = g
            .add_constraint(Collision, vec![abs_a, abs_b], vec![0.1, 0.1, 0.0])
            .unwrap();
        assert_eq!(g.constraint(c).residual_dim, 1);
        assert!(!g.constraint(c).is_equality);
        assert_eq!(g.neighbors(a), &[e]);
        assert_eq!(g.neighbors(abs_b), &[c]);
    }

    #[test]
    fn kin_needs_parents() {
        let mut g = FactoredNlp::new();
        let a = rel(&mut g);
        let mut params = Frame::World.encode().to_vec();
        params.extend(Frame::Point.encode());
        assert!(matches!(
            g.add_constraint(Kin, vec![a], params.clone()),
            Err(GraphError::ScopeArity { got: 1, .. })
        ));
        assert!(matches!(
            g.add_constraint(Equal, vec![a, 9], vec![]),
            Err(GraphError::UnknownVariable(9))
        ));
        assert!(matches!(
            g.add_constraint(Equal, vec![a, a], vec![]),
            Err(GraphError::DuplicateInScope(_))
        ));
    }

    #[test]
    fn induced_full_and_empty() {
        let g = six_graph();
        let full = g.induced_subgraph(0..6).unwrap();
        assert_eq!(full, g.full());
        let empty = g.induced_subgraph(std::iter::empty()).unwrap();
        assert!(empty.is_empty() && empty.constraints().is_empty());
        assert!(g.induced_subgraph([0, 6]).is_err());
    }

    #[test]
    fn induced_matches_scope_scan() {
        let g = six_graph();
        let sub = g.induced_subgraph([1, 2, 4, 5]).unwrap();
        let expected: Vec<ConId> = g
            .constraints()
            .iter()
            .filter(|c| c.scope.iter().all(|v| [1, 2, 4, 5].contains(v)))
            .map(|c| c.id)
            .collect();
        assert_eq!(sub.constraints(), expected.as_slice());
        assert_eq!(sub.constraints(), &[3, 5]);
    }

    #[test]
    fn components_split_and_order() {
        let g = six_graph();
        assert!(g
            .induced_subgraph([])
            .unwrap()
            .connected_components()
            .is_empty());
        let sub = g.induced_subgraph([0, 1, 4, 5]).unwrap();
        let comps = sub.connected_components();
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].variables(), &[0, 1]);
        assert_eq!(comps[0].constraints(), &[0]);
        assert_eq!(comps[1].variables(), &[4, 5]);
        assert_eq!(comps[1].constraints(), &[5]);
        assert_eq!(g.full().connected_components().len(), 1);
    }

    #[test]
    fn supergraph_checks() {
        let g = six_graph();
        let other = six_graph();
        let a = g.induced_subgraph([0, 1, 2]).unwrap();
        let b = g.induced_subgraph([]).unwrap();
        let c = g.induced_subgraph([4, 5]).unwrap();
        assert!(a.is_supergraph(&a).unwrap());
        assert!(a.is_supergraph(&b).unwrap());
        assert!(!a.is_supergraph(&c).unwrap());
        let foreign = other.induced_subgraph([0]).unwrap();
        assert_eq!(a.is_supergraph(&foreign), Err(GraphError::ParentMismatch));
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let g = six_graph();
        let bytes = g.serialize();
        assert_eq!(FactoredNlp::deserialize(&bytes).unwrap(), g);
        let empty = FactoredNlp::new();
        assert_eq!(FactoredNlp::deserialize(&empty.serialize()).unwrap(), empty);
        let err = FactoredNlp::deserialize(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 1, .. }), "{err}");
        let bad_kind = String::from_utf8(bytes.clone())
            .unwrap()
            .replace("\"equal\"", "\"teleport\"");
        assert!(FactoredNlp::deserialize(bad_kind.as_bytes()).is_err());
    }
}

//! Factored nonlinear programs, feasibility checking, and minimal
//! infeasible subgraph extraction guided by a message-passing network.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod conflicts;
pub mod domain;
pub mod eval;
pub mod frame;
pub mod gnn;
pub mod graph;
pub mod seed;
pub mod solver;

pub use conflicts::{
    brute_force_conflicts, check_minimal, deletion_filter, expert_prefix, extract_with_scores,
    gnn_extract, label_variables, quickxplain, Conflict, ConflictError, Counting, DeletionFilter,
    ExpertPrefix, ExtractConfig, Extraction, LabelConfig, LabeledInstance, QuickXplain, Reducer,
};
pub use domain::{DatasetConfig, DatasetReport, DomainError, Regime, Scene, SceneConfig};
pub use eval::{BenchConfig, BenchReport, Method, SubgraphCounts};
pub use frame::Frame;
pub use gnn::{GnnError, GnnModel, Hyper, TrainConfig, TrainLog};
pub use graph::{
    ConId, ConstraintKind, ConstraintNode, FactoredNlp, GraphDocument, GraphError, Subgraph,
    VarClass, VarId, VariableNode,
};
pub use solver::{
    Assignment, CachedSolver, ComponentCache, Feasibility, SolveOutcome, Solver, SolverConfig,
    SolverError,
};

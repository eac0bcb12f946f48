//! Planar manipulation scenes compiled into keyframe factored NLPs, planted
//! micro-instances with known conflicts, and the dataset labeling pipeline.
//!
//! Robots are base-anchored grippers whose reach is a disc; objects are
//! rectangles treated as their circumscribed discs for collision. Each
//! keyframe holds one configuration per robot and an absolute and a
//! relative position per object. The relative position is expressed in the
//! object's parent frame: the world (table), a gripper, or another object.

use std::fmt;

use log::{debug, info, warn};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conflicts::{
    label_variables, ConflictError, ExpertPrefix, LabelConfig, LabeledInstance, QuickXplain,
};
use crate::frame::Frame;
use crate::graph::{
    ConstraintKind, FactoredNlp, GraphDocument, GraphError, UnionFind, VarClass, VarId,
};
use crate::seed;
use crate::solver::{CachedSolver, Solver, SolverConfig};

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("action {index}: {reason}")]
    InvalidAction { index: usize, reason: String },
    #[error("scene sampling gave up after {attempts} attempts")]
    SamplingBudget { attempts: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Conflict(#[from] ConflictError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robot {
    /// `(x, y, heading)`.
    pub base: [f64; 3],
    pub reach: f64,
}

impl Robot {
    pub fn frame(&self) -> Frame {
        Frame::Arm {
            base: [self.base[0], self.base[1]],
            reach: self.reach,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    /// `(x, y, heading)` on a table.
    pub start: [f64; 3],
    pub half: [f64; 2],
    pub obstacle: bool,
}

impl Object {
    pub fn radius(&self) -> f64 {
        self.half[0].hypot(self.half[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Table {
    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.lo[0] && p[0] <= self.hi[0] && p[1] >= self.lo[1] && p[1] <= self.hi[1]
    }

    /// Region where an object of the given half extents may be centred.
    fn placement_region(&self, half: [f64; 2]) -> [f64; 4] {
        [
            self.lo[0] + half[0],
            self.lo[1] + half[1],
            self.hi[0] - half[0],
            self.hi[1] - half[1],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub robots: Vec<Robot>,
    /// Blocks first, then obstacles.
    pub objects: Vec<Object>,
    pub tables: Vec<Table>,
    pub gripper_radius: f64,
    pub seed: u64,
}

impl Scene {
    pub fn start_table(&self, object: usize) -> Option<usize> {
        let s = self.objects[object].start;
        self.tables.iter().position(|t| t.contains([s[0], s[1]]))
    }
}

/// Distributions for random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub workspace: [f64; 2],
    pub n_tables: usize,
    pub table_width: [f64; 2],
    pub table_depth: [f64; 2],
    pub reach: f64,
    pub gripper_radius: f64,
    pub block_half: [f64; 2],
    pub obstacle_half: [f64; 2],
    /// Minimum gap between the collision discs of start poses.
    pub start_gap: f64,
    /// Probability that an action is drawn among the geometrically plausible ones.
    pub plausible_bias: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            workspace: [1.6, 1.0],
            n_tables: 3,
            table_width: [0.30, 0.45],
            table_depth: [0.25, 0.35],
            reach: 0.55,
            gripper_radius: 0.05,
            block_half: [0.025, 0.035],
            obstacle_half: [0.06, 0.08],
            start_gap: 0.01,
            plausible_bias: 0.7,
        }
    }
}

const SAMPLING_ATTEMPTS: usize = 2000;

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Rejection-sampled scene: non-overlapping tables in the middle band,
/// robot bases along the two long edges, objects resting on tables.
pub fn random_scene(
    n_blocks: usize,
    n_obstacles: usize,
    n_robots: usize,
    rng_seed: u64,
    cfg: &SceneConfig,
) -> Result<Scene, DomainError> {
    let mut rng = seed::rng(rng_seed);
    let [wx, wy] = cfg.workspace;
    let band = [0.2 * wy, 0.8 * wy];

    // one table per horizontal slot
    let slot = wx / cfg.n_tables.max(1) as f64;
    let gap = 0.05;
    let mut tables: Vec<Table> = Vec::with_capacity(cfg.n_tables);
    for k in 0..cfg.n_tables {
        let w = uniform(&mut rng, cfg.table_width).min(slot - gap);
        let d = uniform(&mut rng, cfg.table_depth).min(band[1] - band[0]);
        let x0 = k as f64 * slot + gap / 2.0;
        let cx = uniform(&mut rng, [x0 + w / 2.0, x0 + slot - gap - w / 2.0]);
        let cy = uniform(&mut rng, [band[0] + d / 2.0, band[1] - d / 2.0]);
        tables.push(Table {
            lo: [cx - w / 2.0, cy - d / 2.0],
            hi: [cx + w / 2.0, cy + d / 2.0],
        });
    }

    let mut attempts;
    let mut robots: Vec<Robot> = Vec::new();
    attempts = 0;
    while robots.len() < n_robots {
        attempts += 1;
        if attempts > SAMPLING_ATTEMPTS {
            return Err(DomainError::SamplingBudget { attempts });
        }
        let x = rng.random_range(0.1 * wx..0.9 * wx);
        let bottom = rng.random_bool(0.5);
        let y = if bottom {
            rng.random_range(0.02 * wy..0.08 * wy)
        } else {
            rng.random_range(0.92 * wy..0.98 * wy)
        };
        let heading = if bottom {
            std::f64::consts::FRAC_PI_2
        } else {
            -std::f64::consts::FRAC_PI_2
        };
        let far = robots
            .iter()
            .all(|r| (r.base[0] - x).hypot(r.base[1] - y) >= 4.0 * cfg.gripper_radius);
        if far {
            robots.push(Robot {
                base: [x, y, heading],
                reach: cfg.reach,
            });
        }
    }

    let mut objects: Vec<Object> = Vec::new();
    attempts = 0;
    while objects.len() < n_blocks + n_obstacles {
        attempts += 1;
        if attempts > SAMPLING_ATTEMPTS {
            return Err(DomainError::SamplingBudget { attempts });
        }
        let obstacle = objects.len() >= n_blocks;
        let range = if obstacle {
            cfg.obstacle_half
        } else {
            cfg.block_half
        };
        let half = [uniform(&mut rng, range), uniform(&mut rng, range)];
        let t = &tables[rng.random_range(0..tables.len())];
        let r = t.placement_region(half);
        if r[0] >= r[2] || r[1] >= r[3] {
            continue;
        }
        let p = [rng.random_range(r[0]..r[2]), rng.random_range(r[1]..r[3])];
        let o = Object {
            start: [
                p[0],
                p[1],
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            ],
            half,
            obstacle,
        };
        let free = objects.iter().all(|q| {
            (q.start[0] - p[0]).hypot(q.start[1] - p[1]) >= q.radius() + o.radius() + cfg.start_gap
        });
        if free {
            objects.push(o);
        }
    }

    Ok(Scene {
        robots,
        objects,
        tables,
        gripper_radius: cfg.gripper_radius,
        seed: rng_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Pick,
    Place,
    Handover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Table(usize),
    Object(usize),
    Robot(usize),
}

/// One symbolic action. `robot` is the robot holding the object afterwards
/// (pick, handover) or releasing it (place). A handover's target is the
/// giving robot; a place's target is the support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub verb: Verb,
    pub object: usize,
    pub robot: usize,
    pub target: Option<Target>,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.verb, self.target) {
            (Verb::Pick, _) => write!(f, "pick o{} with r{}", self.object, self.robot),
            (Verb::Handover, Some(Target::Robot(g))) => {
                write!(
                    f,
                    "handover o{} from r{} to r{}",
                    self.object, g, self.robot
                )
            }
            (Verb::Place, Some(Target::Table(t))) => {
                write!(
                    f,
                    "place o{} on table {} with r{}",
                    self.object, t, self.robot
                )
            }
            (Verb::Place, Some(Target::Object(o))) => {
                write!(f, "place o{} on o{} with r{}", self.object, o, self.robot)
            }
            _ => write!(f, "{:?}", self),
        }
    }
}

/// Parent of an object at some keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Parent {
    Table(usize),
    Object(usize),
    Gripper(usize),
}

#[derive(Debug, Clone)]
struct Symbolic {
    parent: Vec<Parent>,
    holding: Vec<Option<usize>>,
}

impl Symbolic {
    fn initial(scene: &Scene) -> Result<Self, DomainError> {
        let mut parent = Vec::with_capacity(scene.objects.len());
        for o in 0..scene.objects.len() {
            let t = scene
                .start_table(o)
                .ok_or_else(|| DomainError::InvalidAction {
                    index: 0,
                    reason: format!("object {o} does not start on a table"),
                })?;
            parent.push(Parent::Table(t));
        }
        Ok(Self {
            parent,
            holding: vec![None; scene.robots.len()],
        })
    }

    fn is_clear(&self, object: usize) -> bool {
        !self.parent.contains(&Parent::Object(object))
    }

    fn is_held(&self, object: usize) -> bool {
        matches!(self.parent[object], Parent::Gripper(_))
    }

    fn check(&self, scene: &Scene, a: &Action) -> Result<(), String> {
        let n_obj = scene.objects.len();
        let n_rob = scene.robots.len();
        if a.object >= n_obj || a.robot >= n_rob {
            return Err("unknown object or robot".into());
        }
        match (a.verb, a.target) {
            (Verb::Pick, None) => {
                if self.holding[a.robot].is_some() {
                    return Err("robot already holds an object".into());
                }
                if self.is_held(a.object) {
                    return Err("object is held".into());
                }
                if !self.is_clear(a.object) {
                    return Err("object has something on top".into());
                }
            }
            (Verb::Place, Some(target)) => {
                if self.holding[a.robot] != Some(a.object) {
                    return Err("robot does not hold the object".into());
                }
                match target {
                    Target::Table(t) if t < scene.tables.len() => {}
                    Target::Object(s) if s < n_obj => {
                        if s == a.object || self.is_held(s) || !self.is_clear(s) {
                            return Err("support is not a free, clear object".into());
                        }
                    }
                    _ => return Err("invalid placement target".into()),
                }
            }
            (Verb::Handover, Some(Target::Robot(g))) => {
                if g >= n_rob || g == a.robot {
                    return Err("invalid giving robot".into());
                }
                if self.holding[g] != Some(a.object) {
                    return Err("giver does not hold the object".into());
                }
                if self.holding[a.robot].is_some() {
                    return Err("receiver already holds an object".into());
                }
            }
            _ => return Err("verb and target do not match".into()),
        }
        Ok(())
    }

    fn apply(&mut self, a: &Action) {
        match (a.verb, a.target) {
            (Verb::Pick, _) => {
                self.parent[a.object] = Parent::Gripper(a.robot);
                self.holding[a.robot] = Some(a.object);
            }
            (Verb::Place, Some(Target::Table(t))) => {
                self.parent[a.object] = Parent::Table(t);
                self.holding[a.robot] = None;
            }
            (Verb::Place, Some(Target::Object(s))) => {
                self.parent[a.object] = Parent::Object(s);
                self.holding[a.robot] = None;
            }
            (Verb::Handover, Some(Target::Robot(g))) => {
                self.parent[a.object] = Parent::Gripper(a.robot);
                self.holding[g] = None;
                self.holding[a.robot] = Some(a.object);
            }
            _ => unreachable!("checked action"),
        }
    }
}

pub fn validate_actions(scene: &Scene, actions: &[Action]) -> Result<(), DomainError> {
    let mut s = Symbolic::initial(scene)?;
    for (index, a) in actions.iter().enumerate() {
        s.check(scene, a)
            .map_err(|reason| DomainError::InvalidAction { index, reason })?;
        s.apply(a);
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn clamp_to(region: [f64; 4], p: [f64; 2]) -> [f64; 2] {
    [
        p[0].clamp(region[0], region[2]),
        p[1].clamp(region[1], region[3]),
    ]
}

/// Symbolically valid random sequence. With probability `plausible_bias`
/// each action is drawn among those whose geometry looks reachable, and
/// placements on blocks are favoured so that towers get built.
pub fn random_actions(
    scene: &Scene,
    length: usize,
    rng_seed: u64,
    cfg: &SceneConfig,
) -> Vec<Action> {
    let mut rng = seed::rng(rng_seed);
    let Ok(mut state) = Symbolic::initial(scene) else {
        return Vec::new();
    };
    // rough world positions, only used to judge plausibility
    let mut pos: Vec<[f64; 2]> = scene
        .objects
        .iter()
        .map(|o| [o.start[0], o.start[1]])
        .collect();
    let base = |r: usize| [scene.robots[r].base[0], scene.robots[r].base[1]];
    let margin = 0.95;
    let mut out = Vec::with_capacity(length);
    while out.len() < length {
        let mut options: Vec<(Action, f64, bool)> = Vec::new();
        for r in 0..scene.robots.len() {
            let reach = scene.robots[r].reach * margin;
            match state.holding[r] {
                None => {
                    for o in 0..scene.objects.len() {
                        let a = Action {
                            verb: Verb::Pick,
                            object: o,
                            robot: r,
                            target: None,
                        };
                        if state.check(scene, &a).is_ok() {
                            let w = if scene.objects[o].obstacle { 0.3 } else { 1.0 };
                            options.push((a, w, dist(base(r), pos[o]) < reach));
                        }
                    }
                }
                Some(o) => {
                    let half = scene.objects[o].half;
                    for (t, table) in scene.tables.iter().enumerate() {
                        let a = Action {
                            verb: Verb::Place,
                            object: o,
                            robot: r,
                            target: Some(Target::Table(t)),
                        };
                        let p = clamp_to(table.placement_region(half), base(r));
                        options.push((a, 1.0, dist(base(r), p) < reach));
                    }
                    for s in 0..scene.objects.len() {
                        let a = Action {
                            verb: Verb::Place,
                            object: o,
                            robot: r,
                            target: Some(Target::Object(s)),
                        };
                        if state.check(scene, &a).is_ok() {
                            let w = if scene.objects[s].obstacle { 0.3 } else { 1.5 };
                            options.push((a, w, dist(base(r), pos[s]) < reach));
                        }
                    }
                    for g in 0..scene.robots.len() {
                        let a = Action {
                            verb: Verb::Handover,
                            object: o,
                            robot: g,
                            target: Some(Target::Robot(r)),
                        };
                        if state.check(scene, &a).is_ok() {
                            let ok =
                                dist(base(r), base(g)) < reach + scene.robots[g].reach * margin;
                            options.push((a, 0.7, ok));
                        }
                    }
                }
            }
        }
        if options.is_empty() {
            break;
        }
        let plausible: Vec<&(Action, f64, bool)> = options.iter().filter(|o| o.2).collect();
        let pool: Vec<&(Action, f64, bool)> =
            if !plausible.is_empty() && rng.random_bool(cfg.plausible_bias) {
                plausible
            } else {
                options.iter().collect()
            };
        let total: f64 = pool.iter().map(|o| o.1).sum();
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = pool[pool.len() - 1].0;
        for o in &pool {
            if pick < o.1 {
                chosen = o.0;
                break;
            }
            pick -= o.1;
        }
        match (chosen.verb, chosen.target) {
            (Verb::Pick, _) | (Verb::Handover, _) => {}
            (Verb::Place, Some(Target::Table(t))) => {
                let region = scene.tables[t].placement_region(scene.objects[chosen.object].half);
                pos[chosen.object] = clamp_to(region, base(chosen.robot));
            }
            (Verb::Place, Some(Target::Object(s))) => pos[chosen.object] = pos[s],
            _ => {}
        }
        state.apply(&chosen);
        out.push(chosen);
    }
    out
}

/// Variable ids of one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeVars {
    pub robots: Vec<VarId>,
    pub absolute: Vec<VarId>,
    pub relative: Vec<VarId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compiled {
    pub graph: FactoredNlp,
    pub keyframes: Vec<KeyframeVars>,
    pub names: Vec<String>,
}

/// Deterministic mapping of a scene and an action sequence to a factored
/// NLP with one keyframe per action boundary.
pub fn compile(scene: &Scene, actions: &[Action]) -> Result<FactoredNlp, DomainError> {
    Ok(compile_named(scene, actions)?.graph)
}

pub fn compile_named(scene: &Scene, actions: &[Action]) -> Result<Compiled, DomainError> {
    use ConstraintKind::*;
    validate_actions(scene, actions)?;
    let n_obj = scene.objects.len();
    let n_rob = scene.robots.len();
    let n_key = actions.len() + 1;

    // symbolic parents per keyframe
    let mut parents: Vec<Vec<Parent>> = Vec::with_capacity(n_key);
    let mut state = Symbolic::initial(scene)?;
    parents.push(state.parent.clone());
    for a in actions {
        state.apply(a);
        parents.push(state.parent.clone());
    }

    let mut g = FactoredNlp::new();
    let mut names = Vec::new();
    let mut keyframes: Vec<KeyframeVars> = Vec::with_capacity(n_key);
    for (t, par) in parents.iter().enumerate() {
        let time = t as u32;
        let mut kv = KeyframeVars {
            robots: Vec::with_capacity(n_rob),
            absolute: Vec::with_capacity(n_obj),
            relative: Vec::with_capacity(n_obj),
        };
        for (r, robot) in scene.robots.iter().enumerate() {
            kv.robots
                .push(g.add_variable(2, VarClass::RobotConfig, time, robot.base.to_vec())?);
            names.push(format!("q{r}_{t}"));
        }
        for (o, obj) in scene.objects.iter().enumerate() {
            kv.absolute.push(g.add_variable(
                2,
                VarClass::ObjectAbsolute,
                time,
                obj.half.to_vec(),
            )?);
            names.push(format!("A{o}_{t}"));
            let class = match par[o] {
                Parent::Table(_) => VarClass::ObjectRelative,
                Parent::Gripper(_) => VarClass::RelativeToGripper,
                Parent::Object(_) => VarClass::RelativeToObject,
            };
            kv.relative
                .push(g.add_variable(2, class, time, obj.start.to_vec())?);
            names.push(format!("a{o}_{t}"));
        }
        keyframes.push(kv);
    }

    let frame_of = |p: Parent, t: usize| -> (Frame, Option<VarId>) {
        match p {
            Parent::Table(_) => (Frame::World, None),
            Parent::Gripper(r) => (scene.robots[r].frame(), Some(keyframes[t].robots[r])),
            Parent::Object(s) => (Frame::Point, Some(keyframes[t].absolute[s])),
        }
    };

    let mut moved = vec![false; n_obj];
    for t in 0..n_key {
        let kv = &keyframes[t];
        if t == 0 {
            for &q in &kv.robots {
                g.add_constraint(Ref, vec![q], vec![0.0, 0.0])?;
            }
        }
        let action = if t > 0 { Some(actions[t - 1]) } else { None };
        if let Some(a) = action {
            moved[a.object] = true;
        }
        for o in 0..n_obj {
            let obj = &scene.objects[o];
            let rel = kv.relative[o];
            if !moved[o] {
                g.add_constraint(Ref, vec![rel], vec![obj.start[0], obj.start[1]])?;
            }
            let switched = action.is_some_and(|a| a.object == o);
            if t > 0 {
                let prev = keyframes[t - 1].relative[o];
                if switched {
                    let a = action.expect("switch implies an action");
                    let (f_old, p_old) = frame_of(parents[t - 1][o], t);
                    let (f_new, p_new) = frame_of(parents[t][o], t);
                    let mut scope = vec![prev, rel];
                    scope.extend(p_old);
                    scope.extend(p_new);
                    let mut params = f_old.encode().to_vec();
                    params.extend(f_new.encode());
                    g.add_constraint(Kin, scope, params)?;
                    match (a.verb, a.target) {
                        (Verb::Pick, _) | (Verb::Handover, _) => {
                            g.add_constraint(Grasp, vec![rel], vec![])?;
                        }
                        (Verb::Place, Some(Target::Table(tb))) => {
                            let region = scene.tables[tb].placement_region(obj.half);
                            g.add_constraint(Pos, vec![rel], region.to_vec())?;
                        }
                        (Verb::Place, Some(Target::Object(s))) => {
                            let h = scene.objects[s].half;
                            g.add_constraint(Pos, vec![rel], vec![-h[0], -h[1], h[0], h[1]])?;
                        }
                        _ => unreachable!("validated action"),
                    }
                } else {
                    g.add_constraint(Equal, vec![prev, rel], vec![])?;
                }
            }
            let (f, p) = frame_of(parents[t][o], t);
            let mut scope = vec![kv.absolute[o], rel];
            scope.extend(p);
            g.add_constraint(PoseDiff, scope, f.encode().to_vec())?;
        }

        // entities: grippers then objects; pairs inside one contact group are exempt
        let n_ent = n_rob + n_obj;
        let mut groups = UnionFind::new(n_ent);
        let ent = |p: Parent| match p {
            Parent::Gripper(r) => Some(r),
            Parent::Object(s) => Some(n_rob + s),
            Parent::Table(_) => None,
        };
        for o in 0..n_obj {
            if let Some(e) = ent(parents[t][o]) {
                groups.union(n_rob + o, e);
            }
            if action.is_some_and(|a| a.object == o) {
                if let Some(e) = ent(parents[t - 1][o]) {
                    groups.union(n_rob + o, e);
                }
            }
        }
        for i in 0..n_ent {
            for j in i + 1..n_ent {
                if groups.find(i) == groups.find(j) {
                    continue;
                }
                let (vi, ri, fi) = entity(scene, kv, n_rob, i);
                let (vj, rj, fj) = entity(scene, kv, n_rob, j);
                let mut params = vec![ri, rj, 0.0];
                if fi != Frame::Point || fj != Frame::Point {
                    params.extend(fi.encode());
                    params.extend(fj.encode());
                }
                g.add_constraint(Collision, vec![vi, vj], params)?;
            }
        }
    }
    Ok(Compiled {
        graph: g,
        keyframes,
        names,
    })
}

fn entity(scene: &Scene, kv: &KeyframeVars, n_rob: usize, e: usize) -> (VarId, f64, Frame) {
    if e < n_rob {
        (kv.robots[e], scene.gripper_radius, scene.robots[e].frame())
    } else {
        let o = e - n_rob;
        (kv.absolute[o], scene.objects[o].radius(), Frame::Point)
    }
}

/// Conflict patterns for planted micro-instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// One position pinned to two distant targets.
    ContradictoryRefs,
    /// An object grasped from a resting place outside the robot's reach.
    UnreachableGrasp,
    /// A placement region entirely covered by an anchored obstacle.
    PosOverlapsObstacle,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [
        Pattern::ContradictoryRefs,
        Pattern::UnreachableGrasp,
        Pattern::PosOverlapsObstacle,
    ];

    pub fn size(self) -> usize {
        match self {
            Pattern::ContradictoryRefs => 1,
            Pattern::UnreachableGrasp => 3,
            Pattern::PosOverlapsObstacle => 4,
        }
    }
}

/// Feasible decoys that share constraint kinds with the patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Filler {
    Anchored,
    ReachableGrasp,
    ClearPlacement,
    Chain,
}

impl Filler {
    fn size(self) -> usize {
        match self {
            Filler::Anchored => 1,
            Filler::ReachableGrasp => 3,
            Filler::ClearPlacement => 4,
            Filler::Chain => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub graph: FactoredNlp,
    pub conflicts: Vec<Vec<VarId>>,
}

/// Builds a small graph containing the given patterns (in separate
/// components) plus feasible filler up to `max_vars` variables.
pub fn planted_instance(
    patterns: &[Pattern],
    max_vars: usize,
    rng_seed: u64,
) -> Result<PlantedInstance, DomainError> {
    let mut rng = seed::rng(rng_seed);
    let mut g = FactoredNlp::new();
    let mut conflicts = Vec::new();
    let mut used: usize = patterns.iter().map(|p| p.size()).sum();
    let mut pieces: Vec<Result<Pattern, Filler>> = patterns.iter().map(|&p| Ok(p)).collect();
    let fillers = [
        Filler::Anchored,
        Filler::ReachableGrasp,
        Filler::ClearPlacement,
        Filler::Chain,
    ];
    for _ in 0..8 {
        let f = *fillers.choose(&mut rng).expect("non-empty");
        if used + f.size() <= max_vars && rng.random_bool(0.7) {
            used += f.size();
            pieces.push(Err(f));
        }
    }
    // interleave deterministically so conflicts do not always take the lowest ids
    for i in (1..pieces.len()).rev() {
        let j = rng.random_range(0..=i);
        pieces.swap(i, j);
    }
    for (k, piece) in pieces.into_iter().enumerate() {
        let time = (k % 6) as u32;
        match piece {
            Ok(p) => conflicts.push(plant(&mut g, &mut rng, p, time)?),
            Err(f) => filler(&mut g, &mut rng, f, time)?,
        }
    }
    Ok(PlantedInstance {
        graph: g,
        conflicts,
    })
}

fn point_var(
    g: &mut FactoredNlp,
    class: VarClass,
    time: u32,
    rng: &mut ChaCha8Rng,
) -> Result<VarId, GraphError> {
    let geometry = match class {
        VarClass::ObjectAbsolute => vec![0.03, 0.03],
        _ => vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0],
    };
    g.add_variable(2, class, time, geometry)
}

fn grasp_piece(
    g: &mut FactoredNlp,
    rng: &mut ChaCha8Rng,
    time: u32,
    reachable: bool,
) -> Result<Vec<VarId>, GraphError> {
    use ConstraintKind::*;
    let reach = 0.5;
    let base = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let d = if reachable {
        rng.random_range(0.1..0.7) * reach
    } else {
        rng.random_range(1.3..2.0) * reach
    };
    let target = [base[0] + d * angle.cos(), base[1] + d * angle.sin()];
    let prev = g.add_variable(
        2,
        VarClass::ObjectRelative,
        time,
        vec![target[0], target[1], 0.0],
    )?;
    let q = g.add_variable(
        2,
        VarClass::RobotConfig,
        time + 1,
        vec![base[0], base[1], 0.0],
    )?;
    let new = g.add_variable(
        2,
        VarClass::RelativeToGripper,
        time + 1,
        vec![target[0], target[1], 0.0],
    )?;
    g.add_constraint(Ref, vec![prev], target.to_vec())?;
    let mut params = Frame::World.encode().to_vec();
    params.extend(Frame::Arm { base, reach }.encode());
    g.add_constraint(Kin, vec![prev, new, q], params)?;
    g.add_constraint(Grasp, vec![new], vec![])?;
    Ok(vec![prev, q, new])
}

fn placement_piece(
    g: &mut FactoredNlp,
    rng: &mut ChaCha8Rng,
    time: u32,
    blocked: bool,
) -> Result<Vec<VarId>, GraphError> {
    use ConstraintKind::*;
    let c = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let half = 0.04;
    let region = vec![c[0] - half, c[1] - half, c[0] + half, c[1] + half];
    let obstacle_at = if blocked {
        c
    } else {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        [c[0] + 0.5 * a.cos(), c[1] + 0.5 * a.sin()]
    };
    let b = g.add_variable(2, VarClass::ObjectRelative, time, vec![c[0], c[1], 0.0])?;
    let bb = g.add_variable(2, VarClass::ObjectAbsolute, time, vec![0.03, 0.03])?;
    let o = g.add_variable(
        2,
        VarClass::ObjectRelative,
        time,
        vec![obstacle_at[0], obstacle_at[1], 0.0],
    )?;
    let oo = g.add_variable(2, VarClass::ObjectAbsolute, time, vec![0.08, 0.08])?;
    g.add_constraint(Pos, vec![b], region)?;
    g.add_constraint(PoseDiff, vec![bb, b], Frame::World.encode().to_vec())?;
    g.add_constraint(Ref, vec![o], obstacle_at.to_vec())?;
    g.add_constraint(PoseDiff, vec![oo, o], Frame::World.encode().to_vec())?;
    // the disc sum exceeds the distance from the obstacle to any region point
    g.add_constraint(Collision, vec![bb, oo], vec![0.05, 0.12, 0.0])?;
    Ok(vec![b, bb, o, oo])
}

fn plant(
    g: &mut FactoredNlp,
    rng: &mut ChaCha8Rng,
    p: Pattern,
    time: u32,
) -> Result<Vec<VarId>, GraphError> {
    use ConstraintKind::*;
    match p {
        Pattern::ContradictoryRefs => {
            let x = point_var(g, VarClass::ObjectRelative, time, rng)?;
            let a = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let gap = rng.random_range(0.2..0.6);
            g.add_constraint(Ref, vec![x], a.to_vec())?;
            g.add_constraint(
                Ref,
                vec![x],
                vec![a[0] + gap * ang.cos(), a[1] + gap * ang.sin()],
            )?;
            Ok(vec![x])
        }
        Pattern::UnreachableGrasp => grasp_piece(g, rng, time, false),
        Pattern::PosOverlapsObstacle => placement_piece(g, rng, time, true),
    }
}

fn filler(
    g: &mut FactoredNlp,
    rng: &mut ChaCha8Rng,
    f: Filler,
    time: u32,
) -> Result<(), GraphError> {
    use ConstraintKind::*;
    match f {
        Filler::Anchored => {
            let x = point_var(g, VarClass::ObjectRelative, time, rng)?;
            let a = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            g.add_constraint(Ref, vec![x], a.to_vec())?;
        }
        Filler::ReachableGrasp => {
            grasp_piece(g, rng, time, true)?;
        }
        Filler::ClearPlacement => {
            placement_piece(g, rng, time, false)?;
        }
        Filler::Chain => {
            let x = point_var(g, VarClass::ObjectRelative, time, rng)?;
            let y = point_var(g, VarClass::ObjectRelative, time + 1, rng)?;
            let a = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            g.add_constraint(Ref, vec![x], a.to_vec())?;
            g.add_constraint(Equal, vec![x, y], vec![])?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Train,
    Blocks,
    Robots,
    Actions,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Train,
        Regime::Blocks,
        Regime::Robots,
        Regime::Actions,
    ];

    /// `(blocks, obstacles, robots)`.
    pub fn counts(self) -> (usize, usize, usize) {
        match self {
            Regime::Train | Regime::Actions => (3, 2, 2),
            Regime::Blocks => (5, 2, 2),
            Regime::Robots => (3, 2, 3),
        }
    }

    /// Inclusive range of action-sequence lengths.
    pub fn lengths(self) -> (usize, usize) {
        match self {
            Regime::Actions => (8, 10),
            _ => (4, 7),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Train => "train",
            Regime::Blocks => "blocks",
            Regime::Robots => "robots",
            Regime::Actions => "actions",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.trim_start_matches('+') {
            "train" => Some(Regime::Train),
            "blocks" => Some(Regime::Blocks),
            "robots" => Some(Regime::Robots),
            "actions" => Some(Regime::Actions),
            _ => None,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A generated, not yet labeled, instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInstance {
    pub seed: u64,
    pub scene: Scene,
    pub actions: Vec<Action>,
    pub graph: FactoredNlp,
}

pub fn generate_instance(
    regime: Regime,
    instance_seed: u64,
    cfg: &SceneConfig,
) -> Result<GeneratedInstance, DomainError> {
    let (b, o, r) = regime.counts();
    let scene = random_scene(b, o, r, seed::derive(instance_seed, 1), cfg)?;
    let (lo, hi) = regime.lengths();
    let mut rng = seed::rng(seed::derive(instance_seed, 2));
    let len = rng.random_range(lo..=hi);
    let actions = random_actions(&scene, len, seed::derive(instance_seed, 3), cfg);
    let graph = compile(&scene, &actions)?;
    Ok(GeneratedInstance {
        seed: instance_seed,
        scene,
        actions,
        graph,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub solver: SolverConfig,
    pub label: LabelConfig,
    /// Stored conflicts must have a best violation at least this multiple
    /// of the feasibility tolerance.
    pub margin_factor: f64,
    /// Stored conflicts are re-solved with this many restarts and must stay
    /// infeasible.
    pub verify_restarts: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            solver: SolverConfig::default(),
            label: LabelConfig::default(),
            margin_factor: 10.0,
            verify_restarts: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetReport {
    pub requested: usize,
    pub written: usize,
    pub infeasible: usize,
    pub skipped_errors: usize,
    pub skipped_margin: usize,
    pub zero_labels: usize,
    pub one_labels: usize,
}

/// Why an instance was left out.
#[derive(Debug)]
pub enum Skip {
    Error(String),
    Margin,
}

/// Labels one generated instance. An instance is skipped when one of its
/// stored conflicts turns feasible under a re-solve with more restarts or
/// keeps a best violation below the margin.
pub fn label_instance(
    inst: &GeneratedInstance,
    cfg: &DatasetConfig,
) -> Result<LabeledInstance, Skip> {
    label_graph(&inst.graph, Some(inst.seed), cfg)
}

pub fn label_graph(
    graph: &FactoredNlp,
    instance_seed: Option<u64>,
    cfg: &DatasetConfig,
) -> Result<LabeledInstance, Skip> {
    let solver = Solver::new(cfg.solver.clone());
    let cached = CachedSolver::new(&solver, graph);
    let reducer = ExpertPrefix { inner: QuickXplain };
    let mut labeled = label_variables(graph, &cached, &reducer, &cfg.label)
        .map_err(|e| Skip::Error(e.to_string()))?;
    let verifier = Solver::new(SolverConfig {
        restarts: cfg.verify_restarts.max(cfg.solver.restarts),
        ..cfg.solver.clone()
    });
    for c in &labeled.conflicts {
        let sub = c.subgraph(graph).map_err(|e| Skip::Error(e.to_string()))?;
        let out = verifier
            .solve(&sub)
            .map_err(|e| Skip::Error(e.to_string()))?;
        if out.feasible || out.max_violation < cfg.margin_factor * cfg.solver.feas_tol {
            return Err(Skip::Margin);
        }
    }
    labeled.seed = instance_seed;
    Ok(labeled)
}

/// One line of an unlabeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub regime: String,
    pub seed: u64,
    pub actions: Vec<String>,
    pub graph: GraphDocument,
}

impl GeneratedInstance {
    pub fn to_record(&self, regime: Regime) -> GeneratedRecord {
        GeneratedRecord {
            regime: regime.name().to_string(),
            seed: self.seed,
            actions: self.actions.iter().map(|a| a.to_string()).collect(),
            graph: self.graph.to_document(),
        }
    }
}

/// Generates `n` instances with per-instance seeds derived from `rng_seed`.
/// Failed draws are logged and counted, not returned.
pub fn generate_batch(
    regime: Regime,
    n: usize,
    rng_seed: u64,
    cfg: &SceneConfig,
) -> (Vec<GeneratedInstance>, usize) {
    let results: Vec<Result<GeneratedInstance, DomainError>> = (0..n)
        .into_par_iter()
        .map(|i| generate_instance(regime, seed::derive(rng_seed, i as u64), cfg))
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(inst) => out.push(inst),
            Err(e) => {
                warn!("{regime} instance {i} not generated: {e}");
                failed += 1;
            }
        }
    }
    (out, failed)
}

/// Labels graphs in parallel; output order follows the input.
pub fn label_batch(
    graphs: &[(FactoredNlp, Option<u64>)],
    cfg: &DatasetConfig,
) -> (Vec<LabeledInstance>, DatasetReport) {
    let results: Vec<Result<LabeledInstance, Skip>> = graphs
        .par_iter()
        .map(|(g, s)| label_graph(g, *s, cfg))
        .collect();
    let mut report = DatasetReport {
        requested: graphs.len(),
        ..DatasetReport::default()
    };
    let mut out = Vec::with_capacity(graphs.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(inst) => {
                assert!(inst.labels_consistent());
                if inst.is_infeasible() {
                    report.infeasible += 1;
                }
                report.zero_labels += inst.labels.iter().filter(|&&y| y == 0).count();
                report.one_labels += inst.labels.iter().filter(|&&y| y == 1).count();
                out.push(inst);
            }
            Err(Skip::Error(e)) => {
                warn!("instance {i} skipped: {e}");
                report.skipped_errors += 1;
            }
            Err(Skip::Margin) => {
                debug!("instance {i} skipped: stored conflict not robustly infeasible");
                report.skipped_margin += 1;
            }
        }
    }
    report.written = out.len();
    (out, report)
}

/// Generates and labels `n` instances in parallel. Output order and
/// content depend only on the arguments.
pub fn build_dataset(
    regime: Regime,
    n: usize,
    rng_seed: u64,
    cfg: &DatasetConfig,
) -> (Vec<LabeledInstance>, DatasetReport) {
    let (generated, failed) = generate_batch(regime, n, rng_seed, &cfg.scene);
    let graphs: Vec<(FactoredNlp, Option<u64>)> = generated
        .into_iter()
        .map(|g| (g.graph, Some(g.seed)))
        .collect();
    let (out, mut report) = label_batch(&graphs, cfg);
    report.requested = n;
    report.skipped_errors += failed;
    info!(
        "{regime}: {} of {} instances, {} infeasible, labels 0/1 = {}/{}",
        report.written, n, report.infeasible, report.zero_labels, report.one_labels
    );
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn fig_scene() -> Scene {
        Scene {
            robots: vec![
                Robot {
                    base: [0.3, 0.05, 1.57],
                    reach: 0.55,
                },
                Robot {
                    base: [0.7, 0.05, 1.57],
                    reach: 0.55,
                },
            ],
            objects: vec![
                Object {
                    start: [0.8, 0.4, 0.0],
                    half: [0.03, 0.03],
                    obstacle: false,
                },
                Object {
                    start: [0.3, 0.4, 0.0],
                    half: [0.03, 0.03],
                    obstacle: false,
                },
            ],
            tables: vec![Table {
                lo: [0.1, 0.3],
                hi: [1.0, 0.6],
            }],
            gripper_radius: 0.05,
            seed: 0,
        }
    }

    /// Pick B with Q, hand B from Q to W, place B on A with W.
    fn fig_actions() -> Vec<Action> {
        vec![
            Action {
                verb: Verb::Pick,
                object: 1,
                robot: 0,
                target: None,
            },
            Action {
                verb: Verb::Handover,
                object: 1,
                robot: 1,
                target: Some(Target::Robot(0)),
            },
            Action {
                verb: Verb::Place,
                object: 1,
                robot: 1,
                target: Some(Target::Object(0)),
            },
        ]
    }

    fn kinds_per_keyframe(g: &FactoredNlp) -> Vec<BTreeMap<&'static str, usize>> {
        let n_key = g.variables().iter().map(|v| v.time).max().unwrap() as usize + 1;
        let mut out = vec![BTreeMap::new(); n_key];
        for c in g.constraints() {
            if c.kind == ConstraintKind::Collision {
                continue;
            }
            let t = c.scope.iter().map(|&v| g.variable(v).time).max().unwrap() as usize;
            *out[t].entry(c.kind.name()).or_insert(0) += 1;
        }
        out
    }

    #[test]
    fn handover_example_structure() {
        let c = compile_named(&fig_scene(), &fig_actions()).unwrap();
        assert_eq!(c.keyframes.len(), 4);
        let kinds = kinds_per_keyframe(&c.graph);
        let col =
            |pairs: &[(&'static str, usize)]| pairs.iter().cloned().collect::<BTreeMap<_, _>>();
        assert_eq!(kinds[0], col(&[("ref", 4), ("pose_diff", 2)]));
        assert_eq!(
            kinds[1],
            col(&[
                ("ref", 1),
                ("equal", 1),
                ("pose_diff", 2),
                ("grasp", 1),
                ("kin", 1)
            ])
        );
        assert_eq!(
            kinds[2],
            col(&[
                ("ref", 1),
                ("equal", 1),
                ("pose_diff", 2),
                ("grasp", 1),
                ("kin", 1)
            ])
        );
        assert_eq!(
            kinds[3],
            col(&[
                ("ref", 1),
                ("equal", 1),
                ("pose_diff", 2),
                ("pos", 1),
                ("kin", 1)
            ])
        );
        // scope sizes of the three switches: pick 3, handover 4, place 4
        let kin: Vec<usize> = c
            .graph
            .constraints()
            .iter()
            .filter(|k| k.kind == ConstraintKind::Kin)
            .map(|k| k.scope.len())
            .collect();
        assert_eq!(kin, vec![3, 4, 4]);
    }

    #[test]
    fn handover_example_is_feasible() {
        let g = compile(&fig_scene(), &fig_actions()).unwrap();
        let out = Solver::new(SolverConfig::default())
            .solve_graph(&g)
            .unwrap();
        assert!(out.feasible, "violation {}", out.max_violation);
    }

    #[test]
    fn empty_sequence_single_keyframe() {
        let g = compile(&fig_scene(), &[]).unwrap();
        assert!(g.variables().iter().all(|v| v.time == 0));
        assert!(g.constraints().iter().all(|c| matches!(
            c.kind,
            ConstraintKind::Ref | ConstraintKind::PoseDiff | ConstraintKind::Collision
        )));
        assert!(
            Solver::new(SolverConfig::default())
                .solve_graph(&g)
                .unwrap()
                .feasible
        );
    }

    #[test]
    fn invalid_action_rejected() {
        let bad = [Action {
            verb: Verb::Place,
            object: 0,
            robot: 0,
            target: Some(Target::Table(0)),
        }];
        assert!(matches!(
            compile(&fig_scene(), &bad),
            Err(DomainError::InvalidAction { index: 0, .. })
        ));
    }

    #[test]
    fn regime_scenes() {
        let cfg = SceneConfig::default();
        for regime in Regime::ALL {
            let (b, o, r) = regime.counts();
            let s = random_scene(b, o, r, 11, &cfg).unwrap();
            assert_eq!((s.objects.len(), s.robots.len()), (b + o, r));
            for (i, a) in s.objects.iter().enumerate() {
                assert!(s.start_table(i).is_some());
                for bobj in &s.objects[i + 1..] {
                    let d = dist([a.start[0], a.start[1]], [bobj.start[0], bobj.start[1]]);
                    assert!(d >= a.radius() + bobj.radius());
                }
            }
        }
        assert_eq!(
            random_scene(3, 2, 2, 5, &cfg).unwrap(),
            random_scene(3, 2, 2, 5, &cfg).unwrap()
        );
    }

    #[test]
    fn random_actions_are_valid() {
        let cfg = SceneConfig::default();
        for s in 0..20 {
            let scene = random_scene(3, 2, 2, s, &cfg).unwrap();
            let acts = random_actions(&scene, 7, s, &cfg);
            assert_eq!(acts.len(), 7);
            validate_actions(&scene, &acts).unwrap();
        }
        let scene = random_scene(3, 2, 2, 0, &cfg).unwrap();
        let one = random_actions(&scene, 1, 0, &cfg);
        assert_eq!(one[0].verb, Verb::Pick);
        let g = compile(&scene, &one).unwrap();
        assert_eq!(g.variables().iter().map(|v| v.time).max(), Some(1));
    }

    #[test]
    fn scopes_span_adjacent_keyframes() {
        let cfg = SceneConfig::default();
        let inst = generate_instance(Regime::Train, 3, &cfg).unwrap();
        for c in inst.graph.constraints() {
            let times: Vec<u32> = c
                .scope
                .iter()
                .map(|&v| inst.graph.variable(v).time)
                .collect();
            let span = times.iter().max().unwrap() - times.iter().min().unwrap();
            match c.kind {
                ConstraintKind::Kin | ConstraintKind::Equal => assert_eq!(span, 1),
                _ => assert_eq!(span, 0),
            }
        }
    }
}

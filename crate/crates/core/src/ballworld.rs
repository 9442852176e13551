//! Kinematic ball world.
//!
//! Balls are discs of equal radius confined to a square box centred on the
//! origin. Actions are per-ball velocities; a step integrates them over `dt`
//! and then separates overlapping discs by pairwise projection along the
//! centre line. Every disc intersection seen during the separation passes is
//! recorded as a collision for that step.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Penetration depth below which two touching discs do not count as overlapping.
pub const OVERLAP_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub half_extent: f64,
    pub ball_radius: f64,
    pub n_colors: usize,
    pub n_per_color: usize,
    pub v_max: f64,
    pub dt: f64,
    pub horizon: usize,
    pub resolution_passes: usize,
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            half_extent: 0.3,
            ball_radius: 0.025,
            n_colors: 3,
            n_per_color: 7,
            v_max: 0.3,
            dt: 0.02,
            horizon: 100,
            resolution_passes: 10,
            rng_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.ball_radius > 0.0 && self.half_extent > self.ball_radius) {
            return bad("need half_extent > ball_radius > 0");
        }
        if !(self.v_max > 0.0) {
            return bad("v_max must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.n_balls() == 0 {
            return bad("need at least one ball");
        }
        Ok(())
    }

    pub fn n_balls(&self) -> usize {
        self.n_colors * self.n_per_color
    }

    /// Largest admissible absolute coordinate of a ball centre.
    pub fn bound(&self) -> f64 {
        self.half_extent - self.ball_radius
    }

    /// Canonical colour layout: balls `[c * n_per_color, (c + 1) * n_per_color)` have colour `c`.
    pub fn categories(&self) -> Vec<usize> {
        (0..self.n_balls()).map(|i| i / self.n_per_color).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub positions: Vec<[f64; 2]>,
    pub categories: Vec<usize>,
}

impl BallState {
    pub fn new(positions: Vec<[f64; 2]>, categories: Vec<usize>) -> Result<Self> {
        if positions.len() != categories.len() {
            return Err(Error::Shape(format!(
                "{} positions but {} categories",
                positions.len(),
                categories.len()
            )));
        }
        Ok(Self {
            positions,
            categories,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn min_pair_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                best = best.min(dist(self.positions[i], self.positions[j]));
            }
        }
        best
    }

    pub fn within_bounds(&self, bound: f64) -> bool {
        self.positions
            .iter()
            .all(|p| p[0].abs() <= bound && p[1].abs() <= bound)
    }

    /// Positions flattened as `[x0, y0, x1, y1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn same_layout(&self, other: &BallState) -> bool {
        self.categories == other.categories
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub velocities: Vec<[f64; 2]>,
}

impl Action {
    pub fn zeros(n: usize) -> Self {
        Self {
            velocities: vec![[0.0; 2]; n],
        }
    }

    /// Per-ball speed clip. Non-finite components are treated as zero.
    pub fn clipped(&self, v_max: f64) -> Action {
        let velocities = self
            .velocities
            .iter()
            .map(|v| {
                let v = if v[0].is_finite() && v[1].is_finite() {
                    *v
                } else {
                    [0.0; 2]
                };
                let speed = norm(v);
                if speed > v_max {
                    [v[0] * v_max / speed, v[1] * v_max / speed]
                } else {
                    v
                }
            })
            .collect();
        Action { velocities }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state_before: BallState,
    pub action: Action,
    pub state_after: BallState,
    pub collision_count: usize,
    pub pair_collisions: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_norm: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn initial_state(&self) -> Option<&BallState> {
        self.records.first().map(|r| &r.state_before)
    }

    pub fn final_state(&self) -> Option<&BallState> {
        self.records.last().map(|r| &r.state_after)
    }

    /// `s_0, s_1, ..., s_T`: the initial state followed by every post-step state.
    pub fn states(&self) -> Vec<&BallState> {
        let mut out = Vec::with_capacity(self.records.len() + 1);
        if let Some(first) = self.records.first() {
            out.push(&first.state_before);
        }
        out.extend(self.records.iter().map(|r| &r.state_after));
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

/// A controller mapping the current state and step index to an action.
pub trait Policy {
    fn act(&mut self, state: &BallState, step: usize) -> Action;
}

impl<F> Policy for F
where
    F: FnMut(&BallState, usize) -> Action,
{
    fn act(&mut self, state: &BallState, step: usize) -> Action {
        self(state, step)
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub(crate) fn norm(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn clamp_point(p: [f64; 2], bound: f64) -> [f64; 2] {
    [p[0].clamp(-bound, bound), p[1].clamp(-bound, bound)]
}

/// Separate one pair along its centre line, keeping both inside the walls.
/// Pairs overlapping by no more than the tolerance are left alone. Returns
/// true if the pair was separated.
fn separate_pair(positions: &mut [[f64; 2]], i: usize, j: usize, radius: f64, bound: f64) -> bool {
    let contact = 2.0 * radius;
    let d = dist(positions[i], positions[j]);
    if d >= contact - OVERLAP_TOL {
        return false;
    }
    let dir = |a: [f64; 2], b: [f64; 2]| {
        let d = dist(a, b);
        if d > 0.0 {
            [(b[0] - a[0]) / d, (b[1] - a[1]) / d]
        } else {
            [1.0, 0.0]
        }
    };

    let n = dir(positions[i], positions[j]);
    let half = 0.5 * (contact - d);
    positions[i] = clamp_point(
        [positions[i][0] - n[0] * half, positions[i][1] - n[1] * half],
        bound,
    );
    positions[j] = clamp_point(
        [positions[j][0] + n[0] * half, positions[j][1] + n[1] * half],
        bound,
    );

    // A wall may have absorbed part of the push; hand the remainder to the
    // other ball, first j then i.
    for mover in [j, i] {
        let d = dist(positions[i], positions[j]);
        if d >= contact {
            break;
        }
        let n = dir(positions[i], positions[j]);
        let rest = contact - d;
        let sign = if mover == j { 1.0 } else { -1.0 };
        let p = positions[mover];
        positions[mover] = clamp_point(
            [p[0] + sign * n[0] * rest, p[1] + sign * n[1] * rest],
            bound,
        );
    }
    true
}

/// Run up to `passes` projection sweeps over all pairs in lexical order.
/// Colliding pairs are added to `collisions`. Returns true once a sweep finds
/// no overlap beyond tolerance.
pub fn resolve_overlaps(
    positions: &mut [[f64; 2]],
    radius: f64,
    bound: f64,
    passes: usize,
    mut collisions: Option<&mut BTreeSet<(usize, usize)>>,
) -> bool {
    for p in positions.iter_mut() {
        *p = clamp_point(*p, bound);
    }
    for _ in 0..passes {
        let mut any = false;
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                if separate_pair(positions, i, j, radius, bound) {
                    any = true;
                    if let Some(set) = collisions.as_deref_mut() {
                        set.insert((i, j));
                    }
                }
            }
        }
        if !any {
            return true;
        }
    }
    !has_overlap(positions, radius)
}

pub(crate) fn has_overlap(positions: &[[f64; 2]], radius: f64) -> bool {
    let limit = 2.0 * radius - OVERLAP_TOL;
    (0..positions.len())
        .any(|i| ((i + 1)..positions.len()).any(|j| dist(positions[i], positions[j]) < limit))
}

/// Clean up an arbitrary arrangement: clamp to the walls and separate discs,
/// allowing extra sweeps beyond the per-step budget.
pub(crate) fn legalize(positions: &mut [[f64; 2]], cfg: &WorldConfig) -> bool {
    let passes = cfg.resolution_passes.max(1);
    for _ in 0..50 {
        if resolve_overlaps(positions, cfg.ball_radius, cfg.bound(), passes, None) {
            return true;
        }
    }
    false
}

fn check_packing(cfg: &WorldConfig) -> Result<()> {
    let k = cfg.n_balls();
    let disc_area = k as f64 * std::f64::consts::PI * cfg.ball_radius.powi(2);
    let box_area = (2.0 * cfg.half_extent).powi(2);
    if disc_area > 0.9 * box_area {
        return Err(Error::PackingInfeasible {
            balls: k,
            radius: cfg.ball_radius,
        });
    }
    Ok(())
}

/// Uniform positions in the admissible box, de-overlapped by projection.
pub fn sample_initial_state<R: Rng + ?Sized>(cfg: &WorldConfig, rng: &mut R) -> Result<BallState> {
    cfg.validate()?;
    check_packing(cfg)?;
    let bound = cfg.bound();
    for _ in 0..1000 {
        let mut positions: Vec<[f64; 2]> = (0..cfg.n_balls())
            .map(|_| {
                [
                    rng.random_range(-bound..=bound),
                    rng.random_range(-bound..=bound),
                ]
            })
            .collect();
        if legalize(&mut positions, cfg) {
            return Ok(BallState {
                positions,
                categories: cfg.categories(),
            });
        }
    }
    Err(Error::PackingInfeasible {
        balls: cfg.n_balls(),
        radius: cfg.ball_radius,
    })
}

pub fn step(state: &BallState, action: &Action, cfg: &WorldConfig) -> StepRecord {
    let action = action.clipped(cfg.v_max);
    let bound = cfg.bound();
    let mut positions: Vec<[f64; 2]> = state
        .positions
        .iter()
        .zip(action.velocities.iter().chain(std::iter::repeat(&[0.0; 2])))
        .map(|(p, v)| [p[0] + v[0] * cfg.dt, p[1] + v[1] * cfg.dt])
        .collect();
    let mut pairs = BTreeSet::new();
    resolve_overlaps(
        &mut positions,
        cfg.ball_radius,
        bound,
        cfg.resolution_passes,
        Some(&mut pairs),
    );
    let pair_collisions: Vec<(usize, usize)> = pairs.into_iter().collect();
    StepRecord {
        state_before: state.clone(),
        action,
        state_after: BallState {
            positions,
            categories: state.categories.clone(),
        },
        collision_count: pair_collisions.len(),
        pair_collisions,
        reward_raw: None,
        reward_norm: None,
    }
}

/// Run one episode of `cfg.horizon` steps from the episode's initial state.
pub fn rollout<P: Policy + ?Sized>(
    policy: &mut P,
    cfg: &WorldConfig,
    episode: u64,
) -> Result<Trajectory> {
    let mut rng = rng::episode_init(cfg.rng_seed, episode);
    let initial = sample_initial_state(cfg, &mut rng)?;
    Ok(rollout_from(policy, cfg, initial))
}

pub fn rollout_from<P: Policy + ?Sized>(
    policy: &mut P,
    cfg: &WorldConfig,
    initial: BallState,
) -> Trajectory {
    let mut state = initial;
    let mut records = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let action = policy.act(&state, t);
        let rec = step(&state, &action, cfg);
        state = rec.state_after.clone();
        records.push(rec);
    }
    Trajectory { records }
}

//! From score fields to velocities.
//!
//! The gradient action rescales the flattened field to the speed limit. The
//! ORCA layer turns each ball's nearest neighbours (and nearby walls) into
//! half-plane constraints on its next velocity and picks the admissible
//! velocity closest to the preferred one with a two-dimensional incremental
//! LP. When the constraints admit no velocity, a three-dimensional LP finds
//! the velocity minimizing the largest constraint violation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ballworld::{self, Action, BallState, Policy, WorldConfig};
use crate::field::{flat_norm, Field, ScoreField};
use crate::rng::LabRng;
use crate::scorenet::T_MIN;

const LP_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrcaParams {
    pub tau: f64,
    pub dt: f64,
    pub max_neighbors: usize,
    pub v_max: f64,
    /// Neighbours farther than this (centre to centre) are ignored.
    pub neighbor_dist: f64,
    #[serde(default)]
    pub budget: SpeedBudget,
}

impl Default for OrcaParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            dt: 0.02,
            max_neighbors: 2,
            v_max: 0.3,
            neighbor_dist: 0.15,
            budget: SpeedBudget::default(),
        }
    }
}

/// Norm given to the flattened field before the per-ball clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeedBudget {
    /// The whole joint velocity has norm `v_max`.
    Joint,
    /// The joint velocity has norm `v_max * sqrt(K)`, so the root-mean-square
    /// ball speed is `v_max`.
    #[default]
    Rms,
}

impl SpeedBudget {
    pub fn joint_speed(self, v_max: f64, n_balls: usize) -> f64 {
        match self {
            SpeedBudget::Joint => v_max,
            SpeedBudget::Rms => v_max * (n_balls.max(1) as f64).sqrt(),
        }
    }
}

impl std::str::FromStr for SpeedBudget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "joint" => Ok(SpeedBudget::Joint),
            "rms" => Ok(SpeedBudget::Rms),
            _ => Err(format!(
                "unknown speed budget `{s}` (expected joint or rms)"
            )),
        }
    }
}

impl OrcaParams {
    pub fn for_world(world: &WorldConfig) -> Self {
        Self {
            dt: world.dt,
            v_max: world.v_max,
            ..Self::default()
        }
    }
}

/// `{ v : (v - point) . normal >= 0 }`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub point: [f64; 2],
    pub normal: [f64; 2],
}

impl HalfPlane {
    pub fn new(point: [f64; 2], normal: [f64; 2]) -> Self {
        let n = ballworld::norm(normal);
        let normal = if n > 0.0 {
            [normal[0] / n, normal[1] / n]
        } else {
            [1.0, 0.0]
        };
        Self { point, normal }
    }

    /// Positive when `v` lies outside the half-plane.
    pub fn violation(&self, v: [f64; 2]) -> f64 {
        -((v[0] - self.point[0]) * self.normal[0] + (v[1] - self.point[1]) * self.normal[1])
    }

    /// Boundary direction with the feasible side on its left.
    fn direction(&self) -> [f64; 2] {
        [self.normal[1], -self.normal[0]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t0: f64,
    pub t_end: f64,
    pub horizon: usize,
}

impl NoiseSchedule {
    pub fn new(horizon: usize) -> Self {
        Self {
            t0: 0.1,
            t_end: T_MIN,
            horizon,
        }
    }

    /// Linear decay from `t0` at step 0 to `t_end` at the last step.
    pub fn t(&self, step: usize) -> f64 {
        let t = if self.horizon <= 1 {
            self.t0
        } else {
            let frac = step.min(self.horizon - 1) as f64 / (self.horizon - 1) as f64;
            self.t0 + (self.t_end - self.t0) * frac
        };
        t.clamp(T_MIN, 1.0)
    }
}

fn det(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn mul(a: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] * s, a[1] * s]
}

/// Global rescale of the field to norm `v_max`, then a per-ball clip.
pub fn gradient_action(g: &[[f64; 2]], v_max: f64) -> Action {
    budgeted_gradient_action(g, v_max, SpeedBudget::Joint)
}

/// Global rescale of the field to the budget's joint speed, then a per-ball
/// clip at `v_max`.
pub fn budgeted_gradient_action(g: &[[f64; 2]], v_max: f64, budget: SpeedBudget) -> Action {
    let n = flat_norm(g);
    if !(n >= 1e-12) || !n.is_finite() {
        return Action::zeros(g.len());
    }
    let s = budget.joint_speed(v_max, g.len()) / n;
    Action {
        velocities: g.iter().map(|v| [v[0] * s, v[1] * s]).collect(),
    }
    .clipped(v_max)
}

/// Indices of up to `max_neighbors` nearest other balls within range,
/// ties broken by index.
fn nearest_neighbors(i: usize, state: &BallState, params: &OrcaParams) -> Vec<usize> {
    let p = state.positions[i];
    let mut cand: Vec<(f64, usize)> = state
        .positions
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &q)| (ballworld::dist(p, q), j))
        .filter(|&(d, _)| d <= params.neighbor_dist)
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.into_iter()
        .take(params.max_neighbors)
        .map(|(_, j)| j)
        .collect()
}

fn neighbor_plane(
    i: usize,
    j: usize,
    state: &BallState,
    velocities: &[[f64; 2]],
    params: &OrcaParams,
    radius: f64,
) -> HalfPlane {
    let rel_pos = sub(state.positions[j], state.positions[i]);
    let rel_vel = sub(velocities[i], velocities[j]);
    let dist_sq = dot(rel_pos, rel_pos);
    let r = 2.0 * radius;
    let r_sq = r * r;
    // Direction from i towards j used when the geometry is degenerate.
    let pseudo = if dist_sq > 0.0 {
        mul(rel_pos, 1.0 / dist_sq.sqrt())
    } else if i < j {
        [1.0, 0.0]
    } else {
        [-1.0, 0.0]
    };

    let (normal, u);
    if dist_sq > r_sq {
        let inv_tau = 1.0 / params.tau;
        // from the cut-off disc centre to the relative velocity
        let w = sub(rel_vel, mul(rel_pos, inv_tau));
        let w_len_sq = dot(w, w);
        let dot1 = dot(w, rel_pos);
        if dot1 < 0.0 && dot1 * dot1 > r_sq * w_len_sq {
            let w_len = w_len_sq.sqrt();
            let unit_w = if w_len > 0.0 {
                mul(w, 1.0 / w_len)
            } else {
                mul(pseudo, -1.0)
            };
            normal = unit_w;
            u = mul(unit_w, r * inv_tau - w_len);
        } else {
            let leg = (dist_sq - r_sq).sqrt();
            let dir = if det(rel_pos, w) > 0.0 {
                mul(
                    [
                        rel_pos[0] * leg - rel_pos[1] * r,
                        rel_pos[0] * r + rel_pos[1] * leg,
                    ],
                    1.0 / dist_sq,
                )
            } else {
                mul(
                    [
                        rel_pos[0] * leg + rel_pos[1] * r,
                        -rel_pos[0] * r + rel_pos[1] * leg,
                    ],
                    -1.0 / dist_sq,
                )
            };
            normal = [-dir[1], dir[0]];
            u = sub(mul(dir, dot(rel_vel, dir)), rel_vel);
        }
    } else {
        // Already in contact: resolve within one step.
        let inv_dt = 1.0 / params.dt;
        let w = sub(rel_vel, mul(rel_pos, inv_dt));
        let w_len = ballworld::norm(w);
        let unit_w = if w_len > 0.0 {
            mul(w, 1.0 / w_len)
        } else {
            mul(pseudo, -1.0)
        };
        normal = unit_w;
        u = mul(unit_w, r * inv_dt - w_len);
    }
    HalfPlane::new(add(velocities[i], mul(u, 0.5)), normal)
}

fn wall_planes(p: [f64; 2], params: &OrcaParams, world: &WorldConfig) -> Vec<HalfPlane> {
    let mut out = Vec::new();
    let reach = params.tau * params.v_max;
    for axis in 0..2 {
        for sign in [1.0, -1.0] {
            let d = world.half_extent - sign * p[axis];
            let gap = (d - world.ball_radius).max(0.0);
            if gap < reach {
                let mut point = [0.0; 2];
                let mut normal = [0.0; 2];
                point[axis] = sign * gap / params.dt;
                normal[axis] = -sign;
                out.push(HalfPlane { point, normal });
            }
        }
    }
    out
}

/// Velocity constraints for ball `i`: one ORCA half-plane per considered
/// neighbour, then wall half-planes.
pub fn orca_constraints(
    i: usize,
    state: &BallState,
    velocities: &[[f64; 2]],
    params: &OrcaParams,
    world: &WorldConfig,
) -> Vec<HalfPlane> {
    let mut planes: Vec<HalfPlane> = nearest_neighbors(i, state, params)
        .into_iter()
        .map(|j| neighbor_plane(i, j, state, velocities, params, world.ball_radius))
        .collect();
    planes.extend(wall_planes(state.positions[i], params, world));
    planes
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpSolution {
    pub velocity: [f64; 2],
    pub feasible: bool,
}

/// Optimum on the boundary of plane `i`, clipped by the disc and planes `..i`.
fn lp1(
    planes: &[HalfPlane],
    i: usize,
    radius: f64,
    opt: [f64; 2],
    directional: bool,
) -> Option<[f64; 2]> {
    let (pi, di) = (planes[i].point, planes[i].direction());
    let dp = dot(pi, di);
    let disc = dp * dp + radius * radius - dot(pi, pi);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (mut t_left, mut t_right) = (-dp - sq, -dp + sq);
    for pl in &planes[..i] {
        let dj = pl.direction();
        let denom = det(di, dj);
        let numer = det(dj, sub(pi, pl.point));
        if denom.abs() <= LP_EPS {
            if numer < 0.0 {
                return None;
            }
            continue;
        }
        let t = numer / denom;
        if denom >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return None;
        }
    }
    let t = if directional {
        if dot(opt, di) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        dot(di, sub(opt, pi)).clamp(t_left, t_right)
    };
    Some(add(pi, mul(di, t)))
}

/// Returns the result and the index of the first plane that could not be
/// satisfied (`planes.len()` when feasible).
fn lp2(planes: &[HalfPlane], radius: f64, opt: [f64; 2], directional: bool) -> ([f64; 2], usize) {
    let mut result = if directional {
        mul(opt, radius)
    } else if dot(opt, opt) > radius * radius {
        mul(opt, radius / ballworld::norm(opt))
    } else {
        opt
    };
    for i in 0..planes.len() {
        if planes[i].violation(result) > 0.0 {
            match lp1(planes, i, radius, opt, directional) {
                Some(v) => result = v,
                None => return (result, i),
            }
        }
    }
    (result, planes.len())
}

fn lp3(planes: &[HalfPlane], begin: usize, radius: f64, mut result: [f64; 2]) -> [f64; 2] {
    let mut distance = 0.0;
    for i in begin..planes.len() {
        if planes[i].violation(result) <= distance {
            continue;
        }
        let di = planes[i].direction();
        let mut projected = Vec::with_capacity(i);
        for pj in &planes[..i] {
            let dj = pj.direction();
            let d = det(di, dj);
            let point = if d.abs() <= LP_EPS {
                if dot(di, dj) > 0.0 {
                    continue;
                }
                mul(add(planes[i].point, pj.point), 0.5)
            } else {
                add(
                    planes[i].point,
                    mul(di, det(dj, sub(planes[i].point, pj.point)) / d),
                )
            };
            // bisector of the two boundaries, feasible side towards plane j
            let dir = sub(dj, di);
            let n = ballworld::norm(dir);
            let dir = if n > 0.0 { mul(dir, 1.0 / n) } else { dir };
            projected.push(HalfPlane {
                point,
                normal: [-dir[1], dir[0]],
            });
        }
        let before = result;
        let (v, fail) = lp2(&projected, radius, planes[i].normal, true);
        result = if fail < projected.len() { before } else { v };
        distance = planes[i].violation(result);
    }
    result
}

/// Closest point to `v_pref` in the speed disc intersected with every plane.
/// When the intersection is empty, `feasible` is false and `velocity` is the
/// partial result at the first plane that failed.
pub fn solve_lp2(planes: &[HalfPlane], v_pref: [f64; 2], v_max: f64) -> LpSolution {
    let (v, fail) = lp2(planes, v_max, v_pref, false);
    LpSolution {
        velocity: v,
        feasible: fail == planes.len(),
    }
}

/// [`solve_lp2`] with the minimax fallback: if no velocity satisfies every
/// plane, return the one in the speed disc minimizing the largest violation.
pub fn solve_lp3(planes: &[HalfPlane], v_pref: [f64; 2], v_max: f64) -> [f64; 2] {
    let (v, fail) = lp2(planes, v_max, v_pref, false);
    if fail == planes.len() {
        v
    } else {
        lp3(planes, fail, v_max, v)
    }
}

pub fn max_violation(planes: &[HalfPlane], v: [f64; 2]) -> f64 {
    planes
        .iter()
        .map(|p| p.violation(v))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// ORCA-adjusted velocities for every ball given preferred velocities, which
/// also serve as the current velocities of the neighbours.
pub fn orca_adjust(
    state: &BallState,
    v_pref: &[[f64; 2]],
    params: &OrcaParams,
    world: &WorldConfig,
) -> Action {
    let velocities = (0..state.len())
        .map(|i| {
            let planes = orca_constraints(i, state, v_pref, params, world);
            solve_lp3(&planes, v_pref[i], params.v_max)
        })
        .collect();
    Action { velocities }
}

fn score_or_zero<F: ScoreField + ?Sized>(field: &F, state: &BallState, t: f64) -> Field {
    // A field that cannot be evaluated yields no preference rather than a crash.
    field
        .score(state, t)
        .unwrap_or_else(|_| vec![[0.0; 2]; state.len()])
}

pub struct OrcaPolicy<F> {
    pub field: F,
    pub schedule: NoiseSchedule,
    pub params: OrcaParams,
    pub world: WorldConfig,
}

impl<F: ScoreField> OrcaPolicy<F> {
    pub fn new(field: F, world: &WorldConfig) -> Self {
        Self {
            field,
            schedule: NoiseSchedule::new(world.horizon),
            params: OrcaParams::for_world(world),
            world: world.clone(),
        }
    }
}

impl<F: ScoreField> Policy for OrcaPolicy<F> {
    fn act(&mut self, state: &BallState, step: usize) -> Action {
        let g = score_or_zero(&self.field, state, self.schedule.t(step));
        let pref = budgeted_gradient_action(&g, self.params.v_max, self.params.budget);
        orca_adjust(state, &pref.velocities, &self.params, &self.world)
    }
}

/// The gradient action alone, no collision avoidance.
pub struct GradientPolicy<F> {
    pub field: F,
    pub schedule: NoiseSchedule,
    pub v_max: f64,
    pub budget: SpeedBudget,
}

impl<F: ScoreField> GradientPolicy<F> {
    pub fn new(field: F, world: &WorldConfig) -> Self {
        Self {
            field,
            schedule: NoiseSchedule::new(world.horizon),
            v_max: world.v_max,
            budget: SpeedBudget::default(),
        }
    }
}

impl<F: ScoreField> Policy for GradientPolicy<F> {
    fn act(&mut self, state: &BallState, step: usize) -> Action {
        let g = score_or_zero(&self.field, state, self.schedule.t(step));
        budgeted_gradient_action(&g, self.v_max, self.budget)
    }
}

/// Bi-level planner moving a single ball: every `switch_period` steps the
/// ball with the largest field component is selected; only it moves, along
/// its own component at full speed, ORCA-adjusted against the resting balls.
pub struct OneBallPolicy<F> {
    pub field: F,
    pub schedule: NoiseSchedule,
    pub params: OrcaParams,
    pub world: WorldConfig,
    pub switch_period: usize,
    selected: usize,
}

impl<F: ScoreField> OneBallPolicy<F> {
    pub fn new(field: F, world: &WorldConfig, switch_period: usize) -> Self {
        Self {
            field,
            schedule: NoiseSchedule::new(world.horizon),
            params: OrcaParams::for_world(world),
            world: world.clone(),
            switch_period: switch_period.max(1),
            selected: 0,
        }
    }

    pub fn selected(&self) -> usize {
        self.selected
    }
}

/// `argmax_i ||g_i||`, lowest index on ties.
pub fn select_ball(g: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_norm = f64::NEG_INFINITY;
    for (i, v) in g.iter().enumerate() {
        let n = ballworld::norm(*v);
        if n > best_norm {
            best = i;
            best_norm = n;
        }
    }
    best
}

impl<F: ScoreField> Policy for OneBallPolicy<F> {
    fn act(&mut self, state: &BallState, step: usize) -> Action {
        let g = score_or_zero(&self.field, state, self.schedule.t(step));
        if step % self.switch_period == 0 {
            self.selected = select_ball(&g);
        }
        let i = self.selected.min(state.len().saturating_sub(1));
        let mut masked = vec![[0.0; 2]; state.len()];
        masked[i] = g[i];
        let pref = gradient_action(&masked, self.params.v_max).velocities;
        let planes = orca_constraints(i, state, &pref, &self.params, &self.world);
        let mut out = Action::zeros(state.len());
        out.velocities[i] = solve_lp3(&planes, pref[i], self.params.v_max);
        out
    }
}

/// Uniform velocities in the speed disc.
pub struct RandomPolicy {
    pub rng: LabRng,
    pub v_max: f64,
}

impl Policy for RandomPolicy {
    fn act(&mut self, state: &BallState, _step: usize) -> Action {
        let velocities = (0..state.len())
            .map(|_| {
                let r = self.v_max * self.rng.random::<f64>().sqrt();
                let a = self.rng.random_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        Action { velocities }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn grid_argmin(v_max: f64, pitch: f64, f: impl Fn([f64; 2]) -> f64) -> ([f64; 2], f64) {
        let n = (v_max / pitch).round() as i64;
        let mut best = ([0.0; 2], f64::INFINITY);
        for a in -n..=n {
            for b in -n..=n {
                let v = [a as f64 * pitch, b as f64 * pitch];
                if dot(v, v) > v_max * v_max {
                    continue;
                }
                let c = f(v);
                if c < best.1 {
                    best = (v, c);
                }
            }
        }
        best
    }

    fn random_planes(r: &mut LabRng, n: usize, v_max: f64) -> Vec<HalfPlane> {
        (0..n)
            .map(|_| {
                let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
                let p = [r.random_range(-v_max..v_max), r.random_range(-v_max..v_max)];
                HalfPlane::new(p, [a.cos(), a.sin()])
            })
            .collect()
    }

    #[test]
    fn gradient_action_cases() {
        assert_eq!(gradient_action(&[[0.0; 2]; 3], 0.3), Action::zeros(3));
        let a = gradient_action(&[[0.3, 0.4]], 0.3);
        assert!(
            (a.velocities[0][0] - 0.18).abs() < 1e-12 && (a.velocities[0][1] - 0.24).abs() < 1e-12
        );
        let a = gradient_action(&[[1.0, 2.0], [-3.0, 0.5], [0.2, 0.1]], 0.3);
        assert!((flat_norm(&a.velocities) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rms_budget_scales_by_root_k() {
        let g = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        let a = budgeted_gradient_action(&g, 0.3, SpeedBudget::Rms);
        assert!(a
            .velocities
            .iter()
            .all(|v| (ballworld::norm(*v) - 0.3).abs() < 1e-12));
        let a = budgeted_gradient_action(&[[10.0, 0.0], [0.1, 0.0]], 0.3, SpeedBudget::Rms);
        assert!((a.velocities[0][0] - 0.3).abs() < 1e-12);
        assert_eq!(
            budgeted_gradient_action(&g, 0.3, SpeedBudget::Joint),
            gradient_action(&g, 0.3)
        );
    }

    #[test]
    fn no_planes_projects_onto_disc() {
        let s = solve_lp2(&[], [0.6, 0.8], 0.5);
        assert!(s.feasible);
        assert!((s.velocity[0] - 0.3).abs() < 1e-12 && (s.velocity[1] - 0.4).abs() < 1e-12);
        let s = solve_lp2(&[], [0.1, -0.1], 0.5);
        assert_eq!(s.velocity, [0.1, -0.1]);
    }

    #[test]
    fn single_plane_projection() {
        // v_x >= 0.1 excludes v_pref = (-0.05, 0.07); projection is (0.1, 0.07).
        let p = HalfPlane::new([0.1, 0.0], [1.0, 0.0]);
        let s = solve_lp2(&[p], [-0.05, 0.07], 0.3);
        assert!(s.feasible);
        assert!((s.velocity[0] - 0.1).abs() < 1e-12 && (s.velocity[1] - 0.07).abs() < 1e-12);
    }

    #[test]
    fn lp2_matches_grid_oracle() {
        let v_max = 0.3;
        let pitch = v_max / 500.0;
        let mut r = rng::stream(7, 0);
        let mut checked = 0;
        while checked < 20 {
            let n = r.random_range(1..=5);
            let planes = random_planes(&mut r, n, v_max);
            let pref = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
            let sol = solve_lp2(&planes, pref, v_max);
            let (g, cost) = grid_argmin(v_max, pitch, |v| {
                if max_violation(&planes, v) > 0.0 {
                    f64::INFINITY
                } else {
                    ballworld::dist(v, pref)
                }
            });
            if !sol.feasible {
                assert!(cost.is_infinite() || cost > 0.0);
                continue;
            }
            assert!(max_violation(&planes, sol.velocity) <= 1e-9);
            assert!(ballworld::norm(sol.velocity) <= v_max + 1e-9);
            if cost.is_finite() {
                // The objective is 1-Lipschitz, so a point within 2 pitches of
                // the optimum costs at most 2 pitches more than it.
                let sol_cost = ballworld::dist(sol.velocity, pref);
                assert!(sol_cost <= cost + 1e-12, "{sol_cost} > {cost} at {g:?}");
                assert!(cost - sol_cost <= 2.0 * pitch, "{sol_cost} vs {cost}");
            }
            checked += 1;
        }
    }

    #[test]
    fn opposing_planes_fall_back_to_midline() {
        // v_x >= 0.1 and v_x <= -0.1 cannot both hold; minimax is v_x = 0.
        let planes = [
            HalfPlane::new([0.1, 0.0], [1.0, 0.0]),
            HalfPlane::new([-0.1, 0.0], [-1.0, 0.0]),
        ];
        assert!(!solve_lp2(&planes, [0.0, 0.05], 0.3).feasible);
        let v = solve_lp3(&planes, [0.0, 0.05], 0.3);
        assert!(v[0].abs() < 1e-12, "{v:?}");
        assert!((max_violation(&planes, v) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn lp3_matches_grid_minimax() {
        let v_max = 0.3;
        let pitch = v_max / 500.0;
        let mut r = rng::stream(8, 0);
        let mut checked = 0;
        while checked < 10 {
            let planes = random_planes(&mut r, 3, v_max);
            let pref = [r.random_range(-0.3..0.3), r.random_range(-0.3..0.3)];
            if solve_lp2(&planes, pref, v_max).feasible {
                continue;
            }
            let v = solve_lp3(&planes, pref, v_max);
            assert!(ballworld::norm(v) <= v_max + 1e-9);
            let (_, best) = grid_argmin(v_max, pitch, |v| max_violation(&planes, v));
            let got = max_violation(&planes, v);
            assert!(
                got <= best + 1e-12 && best - got <= 2.0 * pitch,
                "{got} vs {best}"
            );
            checked += 1;
        }
    }

    #[test]
    fn isolated_ball_keeps_preference() {
        let world = WorldConfig {
            n_colors: 1,
            n_per_color: 2,
            ..WorldConfig::default()
        };
        let s = BallState::new(vec![[-0.1, 0.0], [0.1, 0.0]], vec![0, 0]).unwrap();
        let pref = [[0.1, -0.2], [0.0, 0.05]];
        let act = orca_adjust(&s, &pref, &OrcaParams::for_world(&world), &world);
        assert_eq!(act.velocities, pref.to_vec());
    }

    #[test]
    fn lp3_on_feasible_input_equals_lp2() {
        let mut r = rng::stream(9, 0);
        for _ in 0..200 {
            let planes = random_planes(&mut r, 3, 0.3);
            let pref = [r.random_range(-0.3..0.3), r.random_range(-0.3..0.3)];
            let s = solve_lp2(&planes, pref, 0.3);
            if s.feasible {
                assert_eq!(solve_lp3(&planes, pref, 0.3), s.velocity);
            }
        }
    }

    #[test]
    fn far_apart_balls_have_no_constraints() {
        let world = WorldConfig {
            n_colors: 1,
            n_per_color: 2,
            ..WorldConfig::default()
        };
        let s = BallState::new(vec![[-0.1, 0.0], [0.1, 0.0]], vec![0, 0]).unwrap();
        let planes = orca_constraints(0, &s, &[[0.0; 2]; 2], &OrcaParams::default(), &world);
        assert!(planes.is_empty());
    }

    #[test]
    fn stationary_pair_constraint_is_radial() {
        let world = WorldConfig {
            n_colors: 1,
            n_per_color: 2,
            ..WorldConfig::default()
        };
        let r = world.ball_radius;
        let s = BallState::new(vec![[0.0, 0.0], [3.0 * r, 0.0]], vec![0, 0]).unwrap();
        let params = OrcaParams::default();
        let planes = orca_constraints(0, &s, &[[0.0; 2]; 2], &params, &world);
        assert_eq!(planes.len(), 1);
        assert!((planes[0].normal[0] + 1.0).abs() < 1e-12 && planes[0].normal[1].abs() < 1e-12);

        // Brute force along the centre line: the truncated cone starts at
        // relative speed (3r - 2r) / tau; half of that belongs to ball 0.
        let rel = [3.0 * r, 0.0];
        let collides = |v: [f64; 2]| {
            let tt = (dot(v, rel) / dot(v, v).max(1e-300)).clamp(0.0, params.tau);
            ballworld::norm(sub(rel, mul(v, tt))) < 2.0 * r
        };
        let edge = r / params.tau;
        assert!(!collides([edge - 1e-6, 0.0]) && collides([edge + 1e-6, 0.0]));
        assert!((planes[0].point[0] - 0.5 * edge).abs() < 1e-9);
    }

    #[test]
    fn overlapping_pair_is_pushed_apart() {
        let world = WorldConfig {
            n_colors: 1,
            n_per_color: 2,
            ..WorldConfig::default()
        };
        let s = BallState::new(vec![[0.0, 0.0], [0.04, 0.0]], vec![0, 0]).unwrap();
        let params = OrcaParams::default();
        let act = orca_adjust(&s, &[[0.0; 2]; 2], &params, &world);
        let sep = act.velocities[1][0] - act.velocities[0][0];
        assert!(sep > 0.0);
        let rec = ballworld::step(&s, &act, &world);
        assert!(ballworld::dist(rec.state_after.positions[0], rec.state_after.positions[1]) > 0.04);
    }

    #[test]
    fn coincident_centres_use_pseudo_normal() {
        let world = WorldConfig {
            n_colors: 1,
            n_per_color: 2,
            ..WorldConfig::default()
        };
        let s = BallState::new(vec![[0.0, 0.0], [0.0, 0.0]], vec![0, 0]).unwrap();
        let params = OrcaParams::default();
        let p0 = orca_constraints(0, &s, &[[0.0; 2]; 2], &params, &world);
        let p1 = orca_constraints(1, &s, &[[0.0; 2]; 2], &params, &world);
        assert_eq!(p0[0].normal, [-1.0, 0.0]);
        assert_eq!(p1[0].normal, [1.0, 0.0]);
    }

    #[test]
    fn wall_plane_caps_outward_speed() {
        let world = WorldConfig {
            n_colors: 1,
            n_per_color: 1,
            ..WorldConfig::default()
        };
        let x = world.bound() - 0.002;
        let s = BallState::new(vec![[x, 0.0]], vec![0]).unwrap();
        let params = OrcaParams::default();
        let planes = orca_constraints(0, &s, &[[0.3, 0.0]], &params, &world);
        assert_eq!(planes.len(), 1);
        let v = solve_lp3(&planes, [0.3, 0.0], params.v_max);
        assert!((v[0] - 0.002 / params.dt).abs() < 1e-9);
    }

    #[test]
    fn mirrored_head_on_pair_sidesteps_symmetrically() {
        let world = WorldConfig {
            n_colors: 1,
            n_per_color: 2,
            ..WorldConfig::default()
        };
        let s = BallState::new(vec![[-0.06, 0.0], [0.06, 0.0]], vec![0, 0]).unwrap();
        let params = OrcaParams::for_world(&world);
        let act = orca_adjust(&s, &[[0.3, 0.0], [-0.3, 0.0]], &params, &world);
        let (a, b) = (act.velocities[0], act.velocities[1]);
        assert!(
            (a[0] + b[0]).abs() <= 1e-9 && (a[1] + b[1]).abs() <= 1e-9,
            "{a:?} {b:?}"
        );
        let rec = ballworld::step(&s, &act, &world);
        assert_eq!(rec.collision_count, 0);
    }

    #[test]
    fn schedule_decays_linearly() {
        let s = NoiseSchedule::new(101);
        assert_eq!(s.t(0), 0.1);
        assert!((s.t(100) - T_MIN).abs() < 1e-15);
        assert!((s.t(50) - (0.1 + T_MIN) / 2.0).abs() < 1e-12);
        assert!((s.t(500) - T_MIN).abs() < 1e-15);
    }

    #[test]
    fn argmax_selection() {
        assert_eq!(select_ball(&[[0.1, 0.0], [0.0, -2.0], [1.0, 1.0]]), 1);
        assert_eq!(select_ball(&[[0.0; 2]; 4]), 0);
        assert_eq!(select_ball(&[[1.0, 0.0], [0.0, 1.0]]), 0);
    }

    #[test]
    fn random_policy_stays_in_disc() {
        let mut p = RandomPolicy {
            rng: rng::stream(1, 0),
            v_max: 0.3,
        };
        let s = BallState::new(vec![[0.0; 2]; 50], vec![0; 50]).unwrap();
        let a = p.act(&s, 0);
        assert!(a.velocities.iter().all(|v| ballworld::norm(*v) <= 0.3));
    }
}

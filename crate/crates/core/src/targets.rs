//! Target distributions over ball arrangements.
//!
//! Four tasks are supported. `Circling` and `CirclingClustering` come from
//! an explicit sampling program without a tractable density; `Clustering`
//! (two modes) and `SixModeClustering` (six modes) are Gaussian mixtures
//! whose density, score and mode posterior are available in closed form.
//! Each task carries a pseudo-likelihood used as the evaluation signal.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ballworld::{self, BallState, WorldConfig};
use crate::error::{Error, Result};
use crate::field::{Field, ScoreField};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Circling,
    Clustering,
    CirclingClustering,
    SixModeClustering,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Circling,
        TaskKind::Clustering,
        TaskKind::CirclingClustering,
        TaskKind::SixModeClustering,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Circling => "circling",
            TaskKind::Clustering => "clustering",
            TaskKind::CirclingClustering => "circling-clustering",
            TaskKind::SixModeClustering => "six-mode-clustering",
        }
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, TaskKind::Clustering | TaskKind::SixModeClustering)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub world: WorldConfig,
    pub gmm_std: f64,
    pub gmm_center_radius: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, world: WorldConfig) -> Self {
        Self {
            kind,
            world,
            gmm_std: 0.05,
            gmm_center_radius: 0.18,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if matches!(
            self.kind,
            TaskKind::Clustering | TaskKind::SixModeClustering | TaskKind::CirclingClustering
        ) && self.world.n_colors != 3
        {
            return Err(Error::InvalidConfig(format!(
                "{} needs exactly 3 colours, got {}",
                self.kind, self.world.n_colors
            )));
        }
        if self.kind.is_mixture() {
            if !(self.gmm_std > 0.0) {
                return Err(Error::InvalidConfig("gmm_std must be positive".into()));
            }
            if !(self.gmm_center_radius >= 0.0 && self.gmm_center_radius < self.world.bound()) {
                return Err(Error::InvalidConfig(format!(
                    "cluster centres at radius {} do not fit inside the admissible box",
                    self.gmm_center_radius
                )));
            }
        }
        Ok(())
    }

    /// The same task with a different number of balls per colour.
    pub fn with_per_color(&self, n_per_color: usize) -> TaskSpec {
        let mut out = self.clone();
        out.world.n_per_color = n_per_color;
        out
    }

    pub fn gmm(&self) -> Result<Gmm> {
        let r = self.gmm_center_radius;
        match self.kind {
            TaskKind::Clustering => {
                let loc = |k: f64| [r * (k * PI / 3.0).sin(), r * (k * PI / 3.0).cos()];
                let (l0, l1, l2) = (loc(0.0), loc(1.0), loc(2.0));
                Gmm::new(vec![vec![l0, l1, l2], vec![l0, l2, l1]], self.gmm_std)
            }
            TaskKind::SixModeClustering => {
                let loc = |a: f64| [r * a.cos(), r * a.sin()];
                let l = [loc(2.0 * PI / 3.0), loc(4.0 * PI / 3.0), loc(2.0 * PI)];
                // colour -> location index, one row per mode
                let table = [
                    [0, 1, 2],
                    [0, 2, 1],
                    [2, 1, 0],
                    [1, 2, 0],
                    [2, 0, 1],
                    [1, 0, 2],
                ];
                let modes = table
                    .iter()
                    .map(|row| row.iter().map(|&i| l[i]).collect())
                    .collect();
                Gmm::new(modes, self.gmm_std)
            }
            kind => Err(Error::WrongTaskKind {
                op: "gmm",
                kind: kind.to_string(),
            }),
        }
    }
}

/// Equal-weight mixture of isotropic Gaussians over whole arrangements.
/// Mode `k` places every ball of colour `c` around `modes[k][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    modes: Vec<Vec<[f64; 2]>>,
    std: f64,
}

impl Gmm {
    pub fn new(modes: Vec<Vec<[f64; 2]>>, std: f64) -> Result<Self> {
        if modes.is_empty() || modes[0].is_empty() {
            return Err(Error::InvalidConfig(
                "mixture needs at least one mode and colour".into(),
            ));
        }
        if modes.iter().any(|m| m.len() != modes[0].len()) {
            return Err(Error::Shape(
                "every mode must list one centre per colour".into(),
            ));
        }
        if !(std > 0.0) {
            return Err(Error::InvalidConfig("mixture std must be positive".into()));
        }
        Ok(Self { modes, std })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn n_colors(&self) -> usize {
        self.modes[0].len()
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn center(&self, mode: usize, color: usize) -> [f64; 2] {
        self.modes[mode][color]
    }

    fn check(&self, state: &BallState) -> Result<()> {
        match state.categories.iter().find(|&&c| c >= self.n_colors()) {
            Some(c) => Err(Error::Shape(format!("colour {c} has no mixture centre"))),
            None => Ok(()),
        }
    }

    /// `log w_k + log p(s | mode k)` for every mode.
    pub fn mode_log_joint(&self, state: &BallState) -> Result<Vec<f64>> {
        self.check(state)?;
        let var = self.std * self.std;
        let norm = -(2.0 * PI * var).ln();
        let log_w = -(self.n_modes() as f64).ln();
        Ok(self
            .modes
            .iter()
            .map(|centers| {
                let mut acc = log_w;
                for (p, &c) in state.positions.iter().zip(&state.categories) {
                    let mu = centers[c];
                    let d2 = (p[0] - mu[0]).powi(2) + (p[1] - mu[1]).powi(2);
                    acc += norm - d2 / (2.0 * var);
                }
                acc
            })
            .collect())
    }

    pub fn log_density(&self, state: &BallState) -> Result<f64> {
        Ok(log_sum_exp(&self.mode_log_joint(state)?))
    }

    pub fn posterior(&self, state: &BallState) -> Result<Vec<f64>> {
        let lj = self.mode_log_joint(state)?;
        let lse = log_sum_exp(&lj);
        Ok(lj.iter().map(|l| (l - lse).exp()).collect())
    }

    /// Exact gradient of [`Gmm::log_density`]: posterior-weighted per-mode scores.
    pub fn score(&self, state: &BallState) -> Result<Field> {
        let post = self.posterior(state)?;
        let var = self.std * self.std;
        Ok(state
            .positions
            .iter()
            .zip(&state.categories)
            .map(|(p, &c)| {
                let mut g = [0.0; 2];
                for (w, centers) in post.iter().zip(&self.modes) {
                    let mu = centers[c];
                    g[0] -= w * (p[0] - mu[0]) / var;
                    g[1] -= w * (p[1] - mu[1]) / var;
                }
                g
            })
            .collect())
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// The analytic mixture score as a [`ScoreField`]; the noise level is ignored.
#[derive(Clone, Debug)]
pub struct GmmField(pub Gmm);

impl GmmField {
    pub fn for_task(task: &TaskSpec) -> Result<Self> {
        Ok(Self(task.gmm()?))
    }
}

impl ScoreField for GmmField {
    fn score(&self, state: &BallState, _t: f64) -> Result<Field> {
        self.0.score(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModePosterior {
    pub probs: Vec<f64>,
    pub entropy: f64,
}

impl ModePosterior {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let entropy = -probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        Self {
            probs,
            entropy: entropy.max(0.0),
        }
    }
}

pub fn gmm_log_density(state: &BallState, task: &TaskSpec) -> Result<f64> {
    task.gmm()?.log_density(state)
}

pub fn gmm_score(state: &BallState, task: &TaskSpec) -> Result<Field> {
    task.gmm()?.score(state)
}

pub fn gmm_posterior(state: &BallState, task: &TaskSpec) -> Result<ModePosterior> {
    if task.kind != TaskKind::SixModeClustering {
        return Err(Error::WrongTaskKind {
            op: "gmm_posterior",
            kind: task.kind.to_string(),
        });
    }
    Ok(ModePosterior::from_probs(task.gmm()?.posterior(state)?))
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Smallest circle radius that fits `k` touching balls of radius `r`.
pub fn min_circle_radius(k: usize, r: f64) -> f64 {
    if k <= 1 {
        0.0
    } else {
        r / (PI / k as f64).sin()
    }
}

/// Uniform legal centre, then a uniform radius from the legal range at that centre.
fn sample_circle<R: Rng + ?Sized>(world: &WorldConfig, rng: &mut R) -> Result<([f64; 2], f64)> {
    let r = world.ball_radius;
    let r_min = min_circle_radius(world.n_balls(), r);
    let c_max = world.bound() - r_min;
    if c_max < 0.0 {
        return Err(Error::NoLegalCircle(format!(
            "{} balls need a circle of radius {r_min:.4}, larger than the box allows",
            world.n_balls()
        )));
    }
    let center = [
        rng.random_range(-c_max..=c_max),
        rng.random_range(-c_max..=c_max),
    ];
    let wall = world.half_extent - center[0].abs().max(center[1].abs());
    let r_max = (wall - r).max(r_min);
    Ok((center, rng.random_range(r_min..=r_max)))
}

fn circle_slots<R: Rng + ?Sized>(world: &WorldConfig, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    let (c, radius) = sample_circle(world, rng)?;
    let k = world.n_balls();
    let phase = rng.random_range(0.0..2.0 * PI);
    Ok((0..k)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / k as f64;
            [c[0] + radius * a.cos(), c[1] + radius * a.sin()]
        })
        .collect())
}

pub fn sample_target<R: Rng + ?Sized>(task: &TaskSpec, rng: &mut R) -> Result<BallState> {
    task.validate()?;
    let world = &task.world;
    let categories = world.categories();
    let k = world.n_balls();
    let mut positions = match task.kind {
        TaskKind::Circling => {
            let slots = circle_slots(world, rng)?;
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(rng);
            let mut pos = vec![[0.0; 2]; k];
            for (ball, slot) in order.into_iter().enumerate() {
                pos[ball] = slots[slot];
            }
            pos
        }
        TaskKind::CirclingClustering => {
            let slots = circle_slots(world, rng)?;
            let n = world.n_per_color;
            let start = rng.random_range(0..k);
            let colors: [usize; 3] = if rng.random_bool(0.5) {
                [0, 1, 2]
            } else {
                [0, 2, 1]
            };
            let mut pos = vec![[0.0; 2]; k];
            for (arc, &color) in colors.iter().enumerate() {
                let mut members: Vec<usize> = (color * n..(color + 1) * n).collect();
                members.shuffle(rng);
                for (m, ball) in members.into_iter().enumerate() {
                    pos[ball] = slots[(start + arc * n + m) % k];
                }
            }
            pos
        }
        TaskKind::Clustering | TaskKind::SixModeClustering => {
            let gmm = task.gmm()?;
            loop {
                let mode = rng.random_range(0..gmm.n_modes());
                let mut pos: Vec<[f64; 2]> = categories
                    .iter()
                    .map(|&c| {
                        let mu = gmm.center(mode, c);
                        [
                            mu[0] + gmm.std * gaussian(rng),
                            mu[1] + gmm.std * gaussian(rng),
                        ]
                    })
                    .collect();
                if ballworld::legalize(&mut pos, world) {
                    break pos;
                }
            }
        }
    };
    ballworld::legalize(&mut positions, world);
    Ok(BallState {
        positions,
        categories,
    })
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let s = points
        .iter()
        .fold([0.0; 2], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

/// Std of the gaps between polar angles (about `center`) of consecutive
/// points, including the wrap-around gap.
pub fn angular_gap_std(points: &[[f64; 2]], center: [f64; 2]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let mut angles: Vec<f64> = points
        .iter()
        .map(|p| (p[1] - center[1]).atan2(p[0] - center[0]))
        .collect();
    angles.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = angles.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.push(2.0 * PI - (angles[angles.len() - 1] - angles[0]));
    population_std(&gaps)
}

/// `(sigma_theta, sigma_r)` about the centroid of all balls.
pub fn circle_deviation(positions: &[[f64; 2]]) -> (f64, f64) {
    let c = centroid(positions);
    let radii: Vec<f64> = positions.iter().map(|&p| ballworld::dist(p, c)).collect();
    (angular_gap_std(positions, c), population_std(&radii))
}

pub fn pseudo_likelihood(state: &BallState, task: &TaskSpec) -> Result<f64> {
    if state.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "pseudo-likelihood needs at least 3 balls, got {}",
            state.len()
        )));
    }
    match task.kind {
        TaskKind::Circling => {
            let (st, sr) = circle_deviation(&state.positions);
            Ok((-(st + sr)).exp())
        }
        TaskKind::Clustering | TaskKind::SixModeClustering => {
            Ok(gmm_log_density(state, task)?.exp())
        }
        TaskKind::CirclingClustering => {
            let (st, sr) = circle_deviation(&state.positions);
            let c = centroid(&state.positions);
            let n_colors = task.world.n_colors;
            let mut color_gap_sum = 0.0;
            let mut color_centers = Vec::with_capacity(n_colors);
            for color in 0..n_colors {
                let pts: Vec<[f64; 2]> = state
                    .positions
                    .iter()
                    .zip(&state.categories)
                    .filter(|(_, &cat)| cat == color)
                    .map(|(p, _)| *p)
                    .collect();
                if pts.is_empty() {
                    continue;
                }
                color_gap_sum += angular_gap_std(&pts, c);
                color_centers.push(centroid(&pts));
            }
            let joint = centroid(&color_centers);
            let spread: Vec<f64> = color_centers
                .iter()
                .map(|&p| ballworld::dist(p, joint))
                .collect();
            let sigma_c = population_std(&spread);
            Ok((-(st + sr)).exp() * (-color_gap_sum + sigma_c).exp())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDataset {
    pub task: TaskSpec,
    pub examples: Vec<BallState>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    task: TaskSpec,
}

impl TargetDataset {
    /// `n` independent target samples from stream `(seed, 0)`.
    pub fn generate(task: &TaskSpec, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("dataset size must be positive".into()));
        }
        let mut rng = rng::stream(seed, 0);
        let examples = (0..n)
            .map(|_| sample_target(task, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            task: task.clone(),
            examples,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&DatasetHeader {
            task: self.task.clone(),
        })?;
        out.push('\n');
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines
            .next()
            .ok_or_else(|| Error::Empty("dataset file is empty".into()))?;
        let header: DatasetHeader = serde_json::from_str(head).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("header: {e}"),
        })?;
        let task = header.task;
        task.validate()?;
        let categories = task.world.categories();
        let bound = task.world.bound() + 1e-12;
        let mut examples = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let state: BallState = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            if state.categories != categories || state.positions.len() != categories.len() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "ball layout does not match the task header".into(),
                });
            }
            if !state.within_bounds(bound) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "ball outside the walls".into(),
                });
            }
            examples.push(state);
        }
        Ok(Self { task, examples })
    }
}

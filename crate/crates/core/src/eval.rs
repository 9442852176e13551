//! Rollout metrics: oracle-normalized pseudo-likelihood curves, coverage
//! score, collision counts, path length, and mode-posterior entropy.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ballworld::{self, BallState, Trajectory};
use crate::error::{Error, Result};
use crate::targets::{self, TaskKind, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: usize,
    pub gt_size: usize,
    pub gamma: f64,
}

impl EvalConfig {
    pub fn for_task(kind: TaskKind) -> Self {
        let gt_size = match kind {
            TaskKind::Clustering | TaskKind::SixModeClustering => 50,
            _ => 20,
        };
        Self {
            episodes: 100,
            seeds: 5,
            gt_size,
            gamma: crate::rewards::GAMMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.seeds == 0 || self.gt_size == 0 {
            return Err(Error::InvalidConfig(
                "episodes, seeds and gt_size must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "discount must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-step mean with a normal-approximation 95% band across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlCurve {
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl PlCurve {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn terminal(&self) -> Option<f64> {
        self.mean.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean,lo,hi\n");
        for i in 0..self.mean.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i, self.mean[i], self.lo[i], self.hi[i]
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mean_entropy: f64,
    pub mean_posterior: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub n_trajectories: usize,
    pub seeds: Vec<u64>,
    pub oracle_mean_pl: f64,
    pub pl_curve: PlCurve,
    pub coverage_score: f64,
    pub acn: f64,
    pub asc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyReport>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean pseudo-likelihood over a set of states.
pub fn mean_pl(states: &[BallState], task: &TaskSpec) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Empty("no states to score".into()));
    }
    let pls = states
        .iter()
        .map(|s| targets::pseudo_likelihood(s, task))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&pls))
}

/// `groups` holds the trajectories of each seed. The per-step PL is averaged
/// within a seed, then across seeds; the band uses the sample std of the
/// seed means. Everything is divided by `oracle_mean`.
pub fn pl_curve(groups: &[Vec<Trajectory>], task: &TaskSpec, oracle_mean: f64) -> Result<PlCurve> {
    if !(oracle_mean != 0.0 && oracle_mean.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "oracle mean PL must be finite and nonzero, got {oracle_mean}"
        )));
    }
    let groups: Vec<&Vec<Trajectory>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if groups.is_empty() {
        return Err(Error::Empty("no trajectories".into()));
    }
    let steps = groups[0][0].records.len() + 1;
    let mut seed_means = Vec::with_capacity(groups.len());
    for g in &groups {
        let mut sums = vec![0.0; steps];
        for traj in g.iter() {
            let states = traj.states();
            if states.len() != steps {
                return Err(Error::Shape(format!(
                    "trajectories differ in horizon ({} vs {} states)",
                    states.len(),
                    steps
                )));
            }
            for (acc, s) in sums.iter_mut().zip(states) {
                *acc += targets::pseudo_likelihood(s, task)?;
            }
        }
        seed_means.push(
            sums.into_iter()
                .map(|v| v / g.len() as f64 / oracle_mean)
                .collect::<Vec<_>>(),
        );
    }
    let n = seed_means.len() as f64;
    let mut curve = PlCurve {
        mean: Vec::with_capacity(steps),
        lo: Vec::with_capacity(steps),
        hi: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let vals: Vec<f64> = seed_means.iter().map(|m| m[t]).collect();
        let m = mean(&vals);
        let half = if seed_means.len() > 1 {
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        curve.mean.push(m);
        curve.lo.push(m - half);
        curve.hi.push(m + half);
    }
    Ok(curve)
}

fn directed_chamfer(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter()
        .map(|&p| {
            b.iter()
                .map(|&q| ballworld::dist(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Symmetric Chamfer distance: the average of the two directed mean
/// nearest-neighbour distances.
pub fn chamfer(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (false, false) => 0.5 * (directed_chamfer(a, b) + directed_chamfer(b, a)),
        _ => f64::INFINITY,
    }
}

fn by_color(s: &BallState, color: usize) -> Vec<[f64; 2]> {
    s.positions
        .iter()
        .zip(&s.categories)
        .filter(|(_, &c)| c == color)
        .map(|(p, _)| *p)
        .collect()
}

/// Sum over colours of the Chamfer distance between same-colour positions.
pub fn state_distance(a: &BallState, b: &BallState) -> f64 {
    let n_colors = a
        .categories
        .iter()
        .chain(&b.categories)
        .max()
        .map_or(0, |&c| c + 1);
    (0..n_colors)
        .map(|c| chamfer(&by_color(a, c), &by_color(b, c)))
        .sum()
}

/// Minimal-matching distance of the ground-truth set against the results.
pub fn coverage_score(results: &[BallState], gt: &[BallState]) -> Result<f64> {
    if results.is_empty() || gt.is_empty() {
        return Err(Error::Empty(
            "coverage score needs nonempty result and ground-truth sets".into(),
        ));
    }
    Ok(gt
        .iter()
        .map(|g| {
            results
                .iter()
                .map(|r| state_distance(g, r))
                .fold(f64::INFINITY, f64::min)
        })
        .sum())
}

/// Mean over trajectories of the total collision count.
pub fn acn(trajs: &[Trajectory]) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    trajs
        .iter()
        .map(|t| t.records.iter().map(|r| r.collision_count).sum::<usize>() as f64)
        .sum::<f64>()
        / trajs.len() as f64
}

/// Total L1 path length of all balls.
pub fn asc(traj: &Trajectory) -> f64 {
    traj.records
        .iter()
        .map(|r| {
            r.state_after
                .positions
                .iter()
                .zip(&r.state_before.positions)
                .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs())
                .sum::<f64>()
        })
        .sum()
}

/// Target samples with Gaussian jitter, made legal again.
pub fn oracle_baseline<R: Rng + ?Sized>(
    task: &TaskSpec,
    n: usize,
    perturb_std: f64,
    rng: &mut R,
) -> Result<Vec<BallState>> {
    task.validate()?;
    if !(perturb_std >= 0.0 && perturb_std.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "perturbation std must be finite and nonnegative, got {perturb_std}"
        )));
    }
    let noise = Normal::new(0.0, perturb_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    (0..n)
        .map(|_| {
            let mut s = targets::sample_target(task, rng)?;
            if perturb_std > 0.0 {
                for p in s.positions.iter_mut() {
                    p[0] += noise.sample(rng);
                    p[1] += noise.sample(rng);
                }
                ballworld::legalize(&mut s.positions, &task.world);
            }
            Ok(s)
        })
        .collect()
}

pub fn entropy_report(states: &[BallState], task: &TaskSpec) -> Result<EntropyReport> {
    if task.kind != TaskKind::SixModeClustering {
        return Err(Error::WrongTaskKind {
            op: "entropy_report",
            kind: task.kind.to_string(),
        });
    }
    if states.is_empty() {
        return Err(Error::Empty("no states for entropy report".into()));
    }
    let posts = states
        .iter()
        .map(|s| targets::gmm_posterior(s, task))
        .collect::<Result<Vec<_>>>()?;
    let n = posts.len() as f64;
    let mut mean_posterior = vec![0.0; posts[0].probs.len()];
    for p in &posts {
        for (acc, v) in mean_posterior.iter_mut().zip(&p.probs) {
            *acc += v / n;
        }
    }
    Ok(EntropyReport {
        mean_entropy: posts.iter().map(|p| p.entropy).sum::<f64>() / n,
        mean_posterior,
    })
}

/// Full report over per-seed trajectory groups.
pub fn evaluate(
    groups: &[(u64, Vec<Trajectory>)],
    task: &TaskSpec,
    gt: &[BallState],
    oracle: &[BallState],
) -> Result<MetricsReport> {
    let all: Vec<Trajectory> = groups.iter().flat_map(|(_, g)| g.iter().cloned()).collect();
    if all.is_empty() {
        return Err(Error::Empty("no trajectories to evaluate".into()));
    }
    let oracle_mean_pl = mean_pl(oracle, task)?;
    let trajs: Vec<Vec<Trajectory>> = groups.iter().map(|(_, g)| g.clone()).collect();
    let pl = pl_curve(&trajs, task, oracle_mean_pl)?;
    let finals: Vec<BallState> = all
        .iter()
        .filter_map(|t| t.final_state().cloned())
        .collect();
    let entropy = if task.kind == TaskKind::SixModeClustering {
        Some(entropy_report(&finals, task)?)
    } else {
        None
    };
    Ok(MetricsReport {
        task: task.kind,
        n_trajectories: all.len(),
        seeds: groups.iter().map(|(s, _)| *s).collect(),
        oracle_mean_pl,
        pl_curve: pl,
        coverage_score: coverage_score(&finals, gt)?,
        acn: acn(&all),
        asc: all.iter().map(asc).sum::<f64>() / all.len() as f64,
        entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ballworld::{Action, WorldConfig};
    use crate::rng;

    fn one(p: [f64; 2]) -> BallState {
        BallState::new(vec![p], vec![0]).unwrap()
    }

    fn static_traj(s: &BallState, steps: usize) -> Trajectory {
        let cfg = WorldConfig {
            horizon: steps,
            ..WorldConfig::default()
        };
        let mut zero = |s: &BallState, _: usize| Action::zeros(s.len());
        ballworld::rollout_from(&mut zero, &cfg, s.clone())
    }

    #[test]
    fn coverage_hand_example() {
        let gt = [one([0.0, 0.0]), one([1.0, 0.0])];
        assert_eq!(coverage_score(&[one([0.0, 0.0])], &gt).unwrap(), 1.0);
        assert_eq!(coverage_score(&gt, &gt).unwrap(), 0.0);
        assert!(coverage_score(&[], &gt).is_err());
    }

    #[test]
    fn chamfer_is_permutation_invariant() {
        let a = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.2]];
        let b = [[0.05, 0.0], [0.0, 0.25]];
        let a2 = [a[2], a[0], a[1]];
        assert_eq!(chamfer(&a, &b), chamfer(&a2, &b));
        assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
    }

    #[test]
    fn acn_and_asc_by_hand() {
        let s = one([0.0, 0.0]);
        let mut traj = static_traj(&s, 3);
        assert_eq!(acn(&[traj.clone()]), 0.0);
        assert_eq!(asc(&traj), 0.0);
        for r in traj.records.iter_mut() {
            r.collision_count = 1;
        }
        assert_eq!(acn(&[traj]), 3.0);

        let cfg = WorldConfig {
            n_colors: 1,
            n_per_color: 1,
            horizon: 2,
            ..WorldConfig::default()
        };
        let mut mover = |_: &BallState, _: usize| Action {
            velocities: vec![[0.5, 0.5]],
        };
        let cfg = WorldConfig {
            v_max: 1.0,
            dt: 0.02,
            ..cfg
        };
        let t = ballworld::rollout_from(&mut mover, &cfg, s);
        assert!((asc(&t) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn oracle_without_noise_is_exact_targets() {
        let task = TaskSpec::new(TaskKind::Clustering, WorldConfig::default());
        let a = oracle_baseline(&task, 5, 0.0, &mut rng::stream(3, 0)).unwrap();
        let mut r = rng::stream(3, 0);
        let b: Vec<BallState> = (0..5)
            .map(|_| targets::sample_target(&task, &mut r).unwrap())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_beats_random_states() {
        let task = TaskSpec::new(TaskKind::Circling, WorldConfig::default());
        let mut r = rng::stream(4, 0);
        let oracle = oracle_baseline(&task, 50, 0.005, &mut r).unwrap();
        let random: Vec<BallState> = (0..50)
            .map(|_| ballworld::sample_initial_state(&task.world, &mut r).unwrap())
            .collect();
        assert!(mean_pl(&oracle, &task).unwrap() > mean_pl(&random, &task).unwrap());
        let gt: Vec<BallState> = (0..20)
            .map(|_| targets::sample_target(&task, &mut r).unwrap())
            .collect();
        assert!(coverage_score(&oracle, &gt).unwrap() < coverage_score(&random, &gt).unwrap());
    }

    #[test]
    fn static_curve_is_flat_and_scale_consistent() {
        let task = TaskSpec::new(TaskKind::Circling, WorldConfig::default());
        let s = ballworld::sample_initial_state(&task.world, &mut rng::stream(5, 0)).unwrap();
        let groups = vec![vec![static_traj(&s, 4)], vec![static_traj(&s, 4)]];
        let c = pl_curve(&groups, &task, 2.0).unwrap();
        assert_eq!(c.len(), 5);
        assert!(c.mean.windows(2).all(|w| w[0] == w[1]));
        let c2 = pl_curve(&groups, &task, 4.0).unwrap();
        assert!((c.mean[0] - 2.0 * c2.mean[0]).abs() < 1e-15);
        assert!(pl_curve(&groups, &task, 0.0).is_err());
        assert!(c.to_csv().starts_with("step,mean,lo,hi\n0,"));
    }

    #[test]
    fn entropy_report_cases() {
        let world = WorldConfig::default();
        let task = TaskSpec::new(TaskKind::SixModeClustering, world.clone());
        let centre = BallState::new(vec![[0.0, 0.0]; world.n_balls()], world.categories()).unwrap();
        let e = entropy_report(&[centre], &task).unwrap();
        assert!((e.mean_entropy - 6f64.ln()).abs() < 1e-9);
        let wrong = TaskSpec::new(TaskKind::Clustering, world);
        assert!(entropy_report(&[], &wrong).is_err());
    }
}

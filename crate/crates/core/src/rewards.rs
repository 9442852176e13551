//! First-order estimates of the change in target log-likelihood.
//!
//! The reward of a step is the score at the previous state dotted with the
//! displacement. Raw rewards can be turned into z-scores with a running
//! normalizer.

use crate::ballworld::{BallState, Trajectory};
use crate::error::{Error, Result};
use crate::field::{dot, ScoreField};

/// Noise level at which the field is queried for rewards.
pub const REWARD_T: f64 = 0.01;
pub const GAMMA: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardRecord {
    pub raw: f64,
    pub normalized: f64,
}

/// `<score(s_prev, t), s_next - s_prev>`
pub fn step_reward<F: ScoreField + ?Sized>(
    field: &F,
    s_prev: &BallState,
    s_next: &BallState,
    t: f64,
) -> Result<f64> {
    if !s_prev.same_layout(s_next) {
        return Err(Error::Shape(format!(
            "reward states differ in layout ({} vs {} balls)",
            s_prev.len(),
            s_next.len()
        )));
    }
    let g = field.score(s_prev, t)?;
    let delta: Vec<[f64; 2]> = s_next
        .positions
        .iter()
        .zip(&s_prev.positions)
        .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
        .collect();
    let r = dot(&g, &delta);
    if !r.is_finite() {
        return Err(Error::NonFinite("step reward".into()));
    }
    Ok(r)
}

/// Welford running mean and population std.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningNormalizer {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningNormalizer {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            return Self::STD_FLOOR;
        }
        (self.m2 / self.count as f64).sqrt().max(Self::STD_FLOOR)
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// z-score against the statistics seen so far, then absorb `x`.
    /// Emits 0 until two samples have been seen.
    pub fn push(&mut self, x: f64) -> f64 {
        let z = if self.count < 2 {
            0.0
        } else {
            (x - self.mean) / self.std()
        };
        self.update(x);
        z
    }
}

pub fn normalize(rewards: &[f64], normalizer: &mut RunningNormalizer) -> Vec<f64> {
    rewards.iter().map(|&r| normalizer.push(r)).collect()
}

/// Raw rewards for every step of a trajectory.
pub fn trajectory_rewards<F: ScoreField + ?Sized>(
    field: &F,
    traj: &Trajectory,
    t: f64,
) -> Result<Vec<f64>> {
    traj.records
        .iter()
        .map(|r| step_reward(field, &r.state_before, &r.state_after, t))
        .collect()
}

/// Fill in `reward_raw` and `reward_norm` on every record.
pub fn annotate<F: ScoreField + ?Sized>(
    field: &F,
    traj: &mut Trajectory,
    normalizer: &mut RunningNormalizer,
) -> Result<Vec<RewardRecord>> {
    let raw = trajectory_rewards(field, traj, REWARD_T)?;
    let mut out = Vec::with_capacity(raw.len());
    for (rec, r) in traj.records.iter_mut().zip(raw) {
        let z = normalizer.push(r);
        rec.reward_raw = Some(r);
        rec.reward_norm = Some(z);
        out.push(RewardRecord {
            raw: r,
            normalized: z,
        });
    }
    Ok(out)
}

/// `sum_t gamma^t sum_{k<=t} r_k` over a sequence of raw rewards.
pub fn discounted_cumulative(rewards: &[f64], gamma: f64) -> f64 {
    let mut partial = 0.0;
    let mut weight = 1.0;
    let mut total = 0.0;
    for &r in rewards {
        partial += r;
        total += weight * partial;
        weight *= gamma;
    }
    total
}

pub fn discounted_surrogate_return<F: ScoreField + ?Sized>(
    field: &F,
    traj: &Trajectory,
    gamma: f64,
) -> Result<f64> {
    if traj.records.is_empty() {
        return Err(Error::Empty("trajectory has no steps".into()));
    }
    Ok(discounted_cumulative(
        &trajectory_rewards(field, traj, REWARD_T)?,
        gamma,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ballworld::{self, Action, WorldConfig};
    use crate::rng;
    use crate::targets::{GmmField, TaskKind, TaskSpec};
    use rand_distr::{Distribution, Normal};

    fn task() -> TaskSpec {
        TaskSpec::new(TaskKind::Clustering, WorldConfig::default())
    }

    #[test]
    fn zero_displacement_gives_zero() {
        let t = task();
        let f = GmmField::for_task(&t).unwrap();
        let s = ballworld::sample_initial_state(&t.world, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(step_reward(&f, &s, &s, REWARD_T).unwrap(), 0.0);
    }

    #[test]
    fn moving_along_score_gives_squared_norm() {
        let t = task();
        let f = GmmField::for_task(&t).unwrap();
        let s = ballworld::sample_initial_state(&t.world, &mut rng::stream(2, 0)).unwrap();
        let g = f.score(&s, REWARD_T).unwrap();
        let eps = 1e-4;
        let mut next = s.clone();
        for (p, v) in next.positions.iter_mut().zip(&g) {
            p[0] += eps * v[0];
            p[1] += eps * v[1];
        }
        let r = step_reward(&f, &s, &next, REWARD_T).unwrap();
        let expect = eps * dot(&g, &g);
        assert!(
            r > 0.0 && (r - expect).abs() <= 1e-9 * expect,
            "{r} {expect}"
        );
    }

    #[test]
    fn reward_is_linear_in_displacement() {
        let t = task();
        let f = GmmField::for_task(&t).unwrap();
        let s = ballworld::sample_initial_state(&t.world, &mut rng::stream(3, 0)).unwrap();
        let shift = |c: f64| {
            let mut n = s.clone();
            for (i, p) in n.positions.iter_mut().enumerate() {
                p[0] += c * 0.001 * (i as f64).sin();
                p[1] -= c * 0.002;
            }
            n
        };
        let r1 = step_reward(&f, &s, &shift(1.0), REWARD_T).unwrap();
        let r3 = step_reward(&f, &s, &shift(3.0), REWARD_T).unwrap();
        assert!((r3 - 3.0 * r1).abs() <= 1e-9 * r1.abs().max(1.0));
    }

    #[test]
    fn mismatched_states_rejected() {
        let t = task();
        let f = GmmField::for_task(&t).unwrap();
        let a = ballworld::sample_initial_state(&t.world, &mut rng::stream(4, 0)).unwrap();
        let mut b = a.clone();
        b.positions.pop();
        b.categories.pop();
        assert!(step_reward(&f, &a, &b, REWARD_T).is_err());
    }

    #[test]
    fn normalizer_conventions() {
        let mut n = RunningNormalizer::new();
        assert_eq!(normalize(&[0.0, 2.0], &mut n), vec![0.0, 0.0]);
        let mut n = RunningNormalizer::new();
        assert!(normalize(&[3.0; 50], &mut n).iter().all(|&z| z == 0.0));
        assert!(n.std() >= RunningNormalizer::STD_FLOOR);
    }

    #[test]
    fn normalizer_standardizes_stationary_stream() {
        let mut r = rng::stream(5, 0);
        let d = Normal::new(5.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..20000).map(|_| d.sample(&mut r)).collect();
        let mut n = RunningNormalizer::new();
        let z = normalize(&xs, &mut n);
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        assert!(m.abs() < 0.05, "{m}");
        assert!((sd - 1.0).abs() < 0.05, "{sd}");
        assert!((n.mean() - 5.0).abs() < 0.1 && (n.std() - 2.0).abs() < 0.1);
    }

    #[test]
    fn double_sum_by_hand() {
        assert_eq!(discounted_cumulative(&[2.0, 5.0], 1.0), 2.0 + (2.0 + 5.0));
        assert!(
            (discounted_cumulative(&[1.0, 1.0, 1.0], 0.5) - (1.0 + 0.5 * 2.0 + 0.25 * 3.0)).abs()
                < 1e-15
        );
    }

    #[test]
    fn static_trajectory_has_zero_return() {
        let t = task();
        let f = GmmField::for_task(&t).unwrap();
        let mut zero = |s: &BallState, _: usize| Action::zeros(s.len());
        let traj = ballworld::rollout(
            &mut zero,
            &WorldConfig {
                horizon: 5,
                ..t.world.clone()
            },
            0,
        )
        .unwrap();
        assert_eq!(discounted_surrogate_return(&f, &traj, GAMMA).unwrap(), 0.0);
        assert!(discounted_surrogate_return(&f, &Trajectory::default(), GAMMA).is_err());
    }

    #[test]
    fn taylor_reward_tracks_exact_change() {
        let t = task();
        let gmm = t.gmm().unwrap();
        let f = GmmField(gmm.clone());
        let mut r = rng::stream(6, 0);
        let s = crate::targets::sample_target(&t, &mut r).unwrap();
        // small step of length v_max * dt toward a fixed direction
        let step = t.world.v_max * t.world.dt / (s.len() as f64).sqrt();
        let mut next = s.clone();
        for p in next.positions.iter_mut() {
            p[0] += step * 0.6;
            p[1] -= step * 0.8;
        }
        let exact = gmm.log_density(&next).unwrap() - gmm.log_density(&s).unwrap();
        let approx = step_reward(&f, &s, &next, REWARD_T).unwrap();
        assert!(
            (approx - exact).abs() < 0.1 * exact.abs().max(0.5),
            "{approx} {exact}"
        );
    }
}

use crate::ballworld::BallState;
use crate::error::Result;

/// Per-ball 2-vectors, one row per ball.
pub type Field = Vec<[f64; 2]>;

/// Anything that can produce a noise-conditioned gradient field over ball
/// states: the trained score network or an analytic score.
pub trait ScoreField: Send + Sync {
    fn score(&self, state: &BallState, t: f64) -> Result<Field>;
}

impl<T: ScoreField + ?Sized> ScoreField for &T {
    fn score(&self, state: &BallState, t: f64) -> Result<Field> {
        (**self).score(state, t)
    }
}

pub(crate) fn flat_norm(field: &[[f64; 2]]) -> f64 {
    field
        .iter()
        .map(|v| v[0] * v[0] + v[1] * v[1])
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn dot(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x[0] * y[0] + x[1] * y[1])
        .sum()
}

//! Noise-conditioned graph score network and denoising score matching.
//!
//! The arrangement is a fully connected graph with one node per ball. Node
//! features are `[scaled position, one-hot colour, fourier(t)]`. After a
//! linear embedding, each message round applies an edge convolution: for
//! every ordered pair the message is `silu(theta_self h_i + theta_diff
//! (h_j - h_i) + b)`, averaged over all senders `j` and added to `h_i`. A
//! linear head maps each node to a 2-vector, divided by the kernel std so
//! the raw head output targets unit-scale noise.
//!
//! The first edge layer is linear in `[h_i, h_j - h_i]`, so it splits into a
//! per-node term and a per-sender term; the pair expansion only adds them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ballworld::BallState;
use crate::error::{Error, Result};
use crate::field::{Field, ScoreField};
use crate::rng::{self, LabRng};
use crate::targets::TargetDataset;
use crate::tensor::{adam_step, AdamState, Tape, Tensor, Var};

/// Smallest noise level the network is trained on or queried at.
pub const T_MIN: f64 = 1e-3;
pub const FOURIER_DIM: usize = 16;
const FOURIER_SCALE: f64 = 16.0;
/// Rough spread of ball coordinates, used to normalize network inputs.
const POSITION_SCALE: f64 = 0.2;

/// Variance-exploding perturbation kernel `N(s0, var(t) I)` with
/// `var(t) = (sigma^(2t) - 1) / (2 ln sigma)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeKernel {
    pub sigma: f64,
}

impl Default for SdeKernel {
    fn default() -> Self {
        Self { sigma: 25.0 }
    }
}

impl SdeKernel {
    pub fn variance(&self, t: f64) -> f64 {
        (self.sigma.powf(2.0 * t) - 1.0) / (2.0 * self.sigma.ln())
    }

    pub fn std(&self, t: f64) -> f64 {
        self.variance(t).sqrt()
    }
}

fn check_t(t: f64) -> Result<()> {
    if (T_MIN..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::NoiseLevel { t, min: T_MIN })
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Perturb with the kernel at level `t`. Returns the noisy state and the
/// conditional score `-(noisy - state) / var(t)`.
pub fn perturb(
    state: &BallState,
    t: f64,
    kernel: &SdeKernel,
    rng: &mut impl Rng,
) -> Result<(BallState, Field)> {
    check_t(t)?;
    let z: Vec<[f64; 2]> = (0..state.len())
        .map(|_| [standard_normal(rng), standard_normal(rng)])
        .collect();
    Ok(perturb_with(state, t, kernel, &z))
}

pub fn perturb_with(
    state: &BallState,
    t: f64,
    kernel: &SdeKernel,
    z: &[[f64; 2]],
) -> (BallState, Field) {
    let var = kernel.variance(t);
    let std = var.sqrt();
    let positions: Vec<[f64; 2]> = state
        .positions
        .iter()
        .zip(z)
        .map(|(p, z)| [p[0] + std * z[0], p[1] + std * z[1]])
        .collect();
    let score = positions
        .iter()
        .zip(&state.positions)
        .map(|(n, p)| [-(n[0] - p[0]) / var, -(n[1] - p[1]) / var])
        .collect();
    (
        BallState {
            positions,
            categories: state.categories.clone(),
        },
        score,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub t_min: f64,
    pub rng_seed: u64,
    pub hidden: usize,
    pub rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 20_000,
            lr: 2e-4,
            t_min: T_MIN,
            rng_seed: 0,
            hidden: 64,
            rounds: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden == 0 || self.rounds == 0 {
            return Err(Error::InvalidConfig(
                "batch size, hidden width and rounds must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if !(self.t_min >= T_MIN && self.t_min < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "t_min must lie in [{T_MIN}, 1)"
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layers: Vec<Tensor>,
    fourier_seed: u64,
}

/// Parameter layout: `[embed_w, embed_b, (theta_self, theta_diff, edge_b) x rounds, head_w, head_b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    params: Vec<Tensor>,
    freqs: Vec<f64>,
    fourier_seed: u64,
    n_colors: usize,
    hidden: usize,
    kernel: SdeKernel,
}

fn uniform_init(shape: &[usize], bound: f64, rng: &mut LabRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape and data agree")
}

fn fourier_freqs(seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 0);
    (0..FOURIER_DIM / 2)
        .map(|_| FOURIER_SCALE * standard_normal(&mut r))
        .collect()
}

impl ScoreModel {
    pub fn new(
        n_colors: usize,
        hidden: usize,
        rounds: usize,
        seed: u64,
        kernel: SdeKernel,
    ) -> Self {
        let mut r = rng::stream(seed, 1);
        let input = 2 + n_colors + FOURIER_DIM;
        let mut params = vec![
            uniform_init(&[input, hidden], 1.0 / (input as f64).sqrt(), &mut r),
            Tensor::zeros(&[hidden]),
        ];
        let hb = 1.0 / (hidden as f64).sqrt();
        for _ in 0..rounds {
            params.push(uniform_init(&[hidden, hidden], hb, &mut r));
            params.push(uniform_init(&[hidden, hidden], hb, &mut r));
            params.push(Tensor::zeros(&[hidden]));
        }
        params.push(uniform_init(&[hidden, 2], 0.1 * hb, &mut r));
        params.push(Tensor::zeros(&[2]));
        Self {
            params,
            freqs: fourier_freqs(seed),
            fourier_seed: seed,
            n_colors,
            hidden,
            kernel,
        }
    }

    pub fn n_colors(&self) -> usize {
        self.n_colors
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn rounds(&self) -> usize {
        (self.params.len() - 4) / 3
    }

    pub fn kernel(&self) -> SdeKernel {
        self.kernel
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            layers: self.params.clone(),
            fourier_seed: self.fourier_seed,
        })?)
    }

    pub fn from_checkpoint_json(text: &str, kernel: SdeKernel) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let bad = |msg: String| Err(Error::InvalidConfig(format!("checkpoint: {msg}")));
        if ck.layers.len() < 7 || (ck.layers.len() - 4) % 3 != 0 {
            return bad(format!("unexpected layer count {}", ck.layers.len()));
        }
        let (input, hidden) = match ck.layers[0].shape() {
            &[i, h] if i > 2 + FOURIER_DIM => (i, h),
            s => return bad(format!("embedding shape {s:?}")),
        };
        let n_colors = input - 2 - FOURIER_DIM;
        let rounds = (ck.layers.len() - 4) / 3;
        let mut expected: Vec<Vec<usize>> = vec![vec![input, hidden], vec![hidden]];
        for _ in 0..rounds {
            expected.extend([vec![hidden, hidden], vec![hidden, hidden], vec![hidden]]);
        }
        expected.extend([vec![hidden, 2], vec![2]]);
        for (i, (l, e)) in ck.layers.iter().zip(&expected).enumerate() {
            if l.shape() != e.as_slice() {
                return bad(format!(
                    "layer {i} has shape {:?}, expected {e:?}",
                    l.shape()
                ));
            }
            if !l.is_finite() {
                return bad(format!("layer {i} holds non-finite values"));
            }
        }
        Ok(Self {
            params: ck.layers,
            freqs: fourier_freqs(ck.fourier_seed),
            fourier_seed: ck.fourier_seed,
            n_colors,
            hidden,
            kernel,
        })
    }

    fn node_features(&self, states: &[&BallState], ts: &[f64]) -> Result<Tensor> {
        let width = 2 + self.n_colors + FOURIER_DIM;
        let rows: usize = states.iter().map(|s| s.len()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for (s, &t) in states.iter().zip(ts) {
            let c_in = 1.0 / (POSITION_SCALE * POSITION_SCALE + self.kernel.variance(t)).sqrt();
            let fourier: Vec<f64> = self
                .freqs
                .iter()
                .flat_map(|w| {
                    let a = 2.0 * std::f64::consts::PI * w * t;
                    [a.sin(), a.cos()]
                })
                .collect();
            for (p, &c) in s.positions.iter().zip(&s.categories) {
                if c >= self.n_colors {
                    return Err(Error::Shape(format!(
                        "colour {c} but the model knows {}",
                        self.n_colors
                    )));
                }
                data.push(c_in * p[0]);
                data.push(c_in * p[1]);
                data.extend((0..self.n_colors).map(|k| if k == c { 1.0 } else { 0.0 }));
                data.extend_from_slice(&fourier);
            }
        }
        Tensor::matrix(rows, width, data)
    }

    /// Builds the forward graph for a batch of equally sized states and
    /// returns the per-node output `[B*K, 2]`.
    fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        states: &[&BallState],
        ts: &[f64],
    ) -> Result<Var> {
        let k = states.first().map(|s| s.len()).unwrap_or(0);
        if k == 0 || states.iter().any(|s| s.len() != k) {
            return Err(Error::Shape(
                "batch states must share a positive ball count".into(),
            ));
        }
        let x = tape.leaf(self.node_features(states, ts)?);
        let h = tape.matmul(x, params[0])?;
        let mut h = tape.add_row(h, params[1])?;
        for r in 0..self.rounds() {
            let (w_self, w_diff, b) = (params[2 + 3 * r], params[3 + 3 * r], params[4 + 3 * r]);
            let a = tape.matmul(h, w_self)?;
            let d = tape.matmul(h, w_diff)?;
            let neg_d = tape.scale(d, -1.0)?;
            let own = tape.add(a, neg_d)?;
            let own = tape.add_row(own, b)?;
            let agg = tape.pair_silu_mean(own, d, k)?;
            h = tape.add(h, agg)?;
        }
        let n = params.len();
        let act = tape.silu(h)?;
        let out = tape.matmul(act, params[n - 2])?;
        let out = tape.add_row(out, params[n - 1])?;
        let inv_std: Vec<f64> = states
            .iter()
            .zip(ts)
            .flat_map(|(s, &t)| vec![1.0 / self.kernel.std(t); 2 * s.len()])
            .collect();
        tape.mul_const(out, Tensor::matrix(k * states.len(), 2, inv_std)?)
    }

    /// Score field at noise level `t`.
    pub fn score(&self, state: &BallState, t: f64) -> Result<Field> {
        check_t(t)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = self.forward(&mut tape, &params, &[state], &[t])?;
        Ok(tape
            .value(out)
            .data()
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect())
    }
}

impl ScoreField for ScoreModel {
    fn score(&self, state: &BallState, t: f64) -> Result<Field> {
        ScoreModel::score(self, state, t)
    }
}

/// A frozen draw of noise levels and standard-normal noise for a batch.
#[derive(Clone, Debug)]
pub struct DsmBatch {
    pub states: Vec<BallState>,
    pub ts: Vec<f64>,
    pub noise: Vec<Vec<[f64; 2]>>,
}

impl DsmBatch {
    pub fn draw(states: Vec<BallState>, t_min: f64, rng: &mut impl Rng) -> Self {
        let ts = states
            .iter()
            .map(|_| rng.random_range(t_min..=1.0))
            .collect();
        let noise = states
            .iter()
            .map(|s| {
                (0..s.len())
                    .map(|_| [standard_normal(rng), standard_normal(rng)])
                    .collect()
            })
            .collect();
        Self { states, ts, noise }
    }
}

/// Builds `mean_b var(t_b) * ||phi(noisy_b, t_b) - true score_b||^2`, written
/// as `mean_b ||std(t_b) * phi + z_b||^2`.
fn dsm_graph(model: &ScoreModel, batch: &DsmBatch) -> Result<(Tape, Vec<Var>, Var)> {
    if batch.states.is_empty() {
        return Err(Error::Empty("DSM batch".into()));
    }
    let kernel = model.kernel;
    let noisy: Vec<BallState> = batch
        .states
        .iter()
        .zip(&batch.ts)
        .zip(&batch.noise)
        .map(|((s, &t), z)| perturb_with(s, t, &kernel, z).0)
        .collect();
    let refs: Vec<&BallState> = noisy.iter().collect();
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let phi = model.forward(&mut tape, &params, &refs, &batch.ts)?;
    let rows = tape.value(phi).shape()[0];
    let std_rows: Vec<f64> = batch
        .states
        .iter()
        .zip(&batch.ts)
        .flat_map(|(s, &t)| vec![kernel.std(t); 2 * s.len()])
        .collect();
    let scaled = tape.mul_const(phi, Tensor::matrix(rows, 2, std_rows)?)?;
    let z: Vec<f64> = batch
        .noise
        .iter()
        .flat_map(|zs| zs.iter().flat_map(|z| [z[0], z[1]]))
        .collect();
    let z = tape.leaf(Tensor::matrix(rows, 2, z)?);
    let resid = tape.add(scaled, z)?;
    let ss = tape.sum_squares(resid)?;
    let loss = tape.scale(ss, 1.0 / batch.states.len() as f64)?;
    Ok((tape, params, loss))
}

pub fn dsm_loss_frozen(model: &ScoreModel, batch: &DsmBatch) -> Result<f64> {
    let (tape, _, loss) = dsm_graph(model, batch)?;
    tape.value(loss)
        .item()
        .ok_or_else(|| Error::Shape("loss is not scalar".into()))
}

/// Loss and its gradient with respect to every model parameter.
pub fn dsm_loss_and_grad(model: &ScoreModel, batch: &DsmBatch) -> Result<(f64, Vec<Tensor>)> {
    let (tape, params, loss) = dsm_graph(model, batch)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, params.iter().map(|&p| grads.wrt(p)).collect()))
}

/// DSM loss on `states` with fresh noise levels in `[T_MIN, 1]`.
pub fn dsm_loss(model: &ScoreModel, states: &[BallState], rng: &mut impl Rng) -> Result<f64> {
    let batch = DsmBatch::draw(states.to_vec(), T_MIN, rng);
    dsm_loss_frozen(model, &batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
}

pub fn train(
    dataset: &TargetDataset,
    cfg: &TrainConfig,
    kernel: SdeKernel,
) -> Result<(ScoreModel, TrainOutcome)> {
    train_with(dataset, cfg, kernel, |_, _| {})
}

/// Like [`train`], calling `progress(step, loss)` after every update.
pub fn train_with(
    dataset: &TargetDataset,
    cfg: &TrainConfig,
    kernel: SdeKernel,
    mut progress: impl FnMut(usize, f64),
) -> Result<(ScoreModel, TrainOutcome)> {
    cfg.validate()?;
    if dataset.examples.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let mut model = ScoreModel::new(
        dataset.task.world.n_colors,
        cfg.hidden,
        cfg.rounds,
        cfg.rng_seed,
        kernel,
    );
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut rng = rng::stream(cfg.rng_seed, 2);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let states: Vec<BallState> = (0..cfg.batch_size)
            .map(|_| dataset.examples[rng.random_range(0..dataset.examples.len())].clone())
            .collect();
        let batch = DsmBatch::draw(states, cfg.t_min, &mut rng);
        let (loss, grads) = match dsm_loss_and_grad(&model, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam_step(&mut model.params, &grads, &mut adam).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step, loss },
            e => e,
        })?;
        history.push(loss);
        progress(step, loss);
    }
    let final_loss = history.last().copied().unwrap_or(f64::NAN);
    Ok((
        model,
        TrainOutcome {
            loss_history: history,
            final_loss,
        },
    ))
}

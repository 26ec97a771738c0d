//! Training: window sampling, batched tape gradients, adaptive-moment
//! updates, and the finite-difference gradient check.

use super::dataset::PreparedDataset;
use super::graph::{load_params, noise_draws, window_loss, Window};
use super::params::{WMParams, WmConfig, ACTION_DIM};
use super::tape::Tape;
use crate::state::STATE_DIM;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning-rate multiplier reached at the final step (exponential decay;
    /// 1.0 keeps the rate constant).
    pub lr_decay: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Print a progress line every n steps (0 = silent).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 12, lr: 1e-3, lr_decay: 1.0, seed: 7, grad_clip: 10.0, log_every: 0 }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no window of length {needed} (longest episode: {longest})")]
    DatasetTooShort { needed: usize, longest: usize },
    #[error("non-finite loss at step {step} (last finite loss {last_loss:.6})")]
    NanLoss { step: usize, last_loss: f64 },
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut WMParams, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let lr_t = lr * (1.0 - self.beta2.powi(self.t as i32)).sqrt()
            / (1.0 - self.beta1.powi(self.t as i32));
        for (g_idx, tensor) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[g_idx], &mut self.v[g_idx]);
            for i in 0..tensor.data.len() {
                let g = grads[g_idx][i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                tensor.data[i] -= lr_t * m[i] / (v[i].sqrt() + self.eps);
            }
        }
    }
}

/// One sampled window plus its pre-drawn reparameterization noise.
struct Sample {
    states: Vec<[f64; STATE_DIM]>,
    actions: Vec<[f64; ACTION_DIM]>,
    noise: Vec<Vec<f64>>,
}

fn draw_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn sample_window(
    data: &PreparedDataset,
    cfg: &WmConfig,
    rng: &mut ChaCha8Rng,
    eligible: &[usize],
) -> Sample {
    let win_len = cfg.warmup + cfg.horizon;
    let ep = &data.episodes[eligible[rng.random_range(0..eligible.len())]];
    let start = rng.random_range(0..=ep.len() - win_len);
    let states: Vec<[f64; STATE_DIM]> = ep[start..start + win_len].iter().map(|(s, _)| *s).collect();
    let actions: Vec<[f64; ACTION_DIM]> =
        ep[start..start + win_len - 1].iter().map(|(_, a)| *a).collect();
    let noise = (0..noise_draws(cfg))
        .map(|_| (0..cfg.d_z).map(|_| draw_normal(rng)).collect())
        .collect();
    Sample { states, actions, noise }
}

/// Gradients and monitoring values for one window.
fn window_grads(params: &WMParams, sample: &Sample) -> (Vec<Vec<f64>>, f64, f64) {
    let mut tape = Tape::new();
    let gp = load_params(&mut tape, params);
    let w = Window { states: &sample.states, actions: &sample.actions };
    let noise = (!params.cfg.deterministic_latent).then_some(sample.noise.as_slice());
    let wl = window_loss(&mut tape, params, &gp, &w, noise);
    let loss = tape.scalar(wl.loss);
    tape.backward(wl.loss);
    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    tape.collect_param_grads(&mut grads);
    (grads, loss, wl.pred_mse)
}

/// Average window loss over a fixed batch without touching parameters.
pub fn batch_loss(params: &WMParams, batch: &[(Vec<[f64; STATE_DIM]>, Vec<[f64; ACTION_DIM]>)]) -> f64 {
    batch
        .iter()
        .map(|(states, actions)| {
            let mut tape = Tape::new();
            let gp = load_params(&mut tape, params);
            let w = Window { states, actions };
            let wl = window_loss(&mut tape, params, &gp, &w, None);
            tape.scalar(wl.loss)
        })
        .sum::<f64>()
        / batch.len().max(1) as f64
}

pub struct TrainOutcome {
    pub params: WMParams,
    pub loss_history: Vec<f64>,
}

/// Conditioning constants for the kinematic input terms, from the dataset
/// normalization statistics (control runs at 10 Hz).
pub fn cond_from_stats(stats: &crate::state::NormStats) -> [f64; 7] {
    use crate::state::{EGO_SPEED, EGO_X, EGO_Y, EGO_YAW};
    [
        stats.mean[EGO_YAW],
        stats.scale[EGO_YAW],
        stats.mean[EGO_SPEED],
        stats.scale[EGO_SPEED],
        stats.scale[EGO_X],
        stats.scale[EGO_Y],
        0.1,
    ]
}

/// Stochastic training with adaptive moments. Deterministic for a fixed
/// config and seed: sampling and noise come from one seeded stream and batch
/// gradients reduce in window order.
pub fn train(
    cfg: WmConfig,
    data: &PreparedDataset,
    tc: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let win_len = cfg.warmup + cfg.horizon;
    let eligible: Vec<usize> = data
        .episodes
        .iter()
        .enumerate()
        .filter(|(_, ep)| ep.len() >= win_len)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(TrainError::DatasetTooShort {
            needed: win_len,
            longest: data.episodes.iter().map(|e| e.len()).max().unwrap_or(0),
        });
    }

    let mut cfg = cfg;
    if cfg.cond.is_none() {
        cfg.cond = Some(cond_from_stats(&data.stats));
    }
    let mut params = WMParams::init(cfg.clone(), tc.seed);
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_mul(0x9E3779B97F4A7C15));
    let mut history = Vec::with_capacity(tc.steps);
    let mut last_finite = f64::NAN;

    for step in 0..tc.steps {
        let samples: Vec<Sample> =
            (0..tc.batch).map(|_| sample_window(data, &cfg, &mut rng, &eligible)).collect();

        let results: Vec<(Vec<Vec<f64>>, f64, f64)> =
            samples.par_iter().map(|s| window_grads(&params, s)).collect();

        let mut grads: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
        let mut loss = 0.0;
        for (g, l, _) in &results {
            loss += l;
            for (acc, src) in grads.iter_mut().zip(g.iter()) {
                for (a, b) in acc.iter_mut().zip(src.iter()) {
                    *a += b;
                }
            }
        }
        loss /= tc.batch as f64;
        let scale = 1.0 / tc.batch as f64;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }

        if !loss.is_finite() {
            return Err(TrainError::NanLoss { step, last_loss: last_finite });
        }
        last_finite = loss;
        history.push(loss);

        // global-norm clip
        let norm: f64 = grads.iter().flat_map(|g| g.iter().map(|v| v * v)).sum::<f64>().sqrt();
        if norm > tc.grad_clip {
            let k = tc.grad_clip / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= k;
                }
            }
        }

        let lr = tc.lr * tc.lr_decay.powf(step as f64 / tc.steps.max(1) as f64);
        adam.step(&mut params, &grads, lr);
        if !params.all_finite() {
            return Err(TrainError::NanLoss { step, last_loss: last_finite });
        }
        if tc.log_every > 0 && (step + 1) % tc.log_every == 0 {
            eprintln!("train step {:>6}/{} loss {:.6}", step + 1, tc.steps, loss);
        }
    }

    Ok(TrainOutcome { params, loss_history: history })
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub tensor: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare analytic gradients against central finite differences on randomly
/// selected parameters, covering every tensor group. The check runs with the
/// free-bits floor disabled so the loss is smooth at the evaluation point;
/// reparameterization noise is frozen.
pub fn gradient_check(
    params: &WMParams,
    states: &[[f64; STATE_DIM]],
    actions: &[[f64; ACTION_DIM]],
    n_samples: usize,
    seed: u64,
) -> Vec<GradCheckEntry> {
    let mut smooth = params.clone();
    smooth.cfg.free_bits = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<f64>> = (0..noise_draws(&smooth.cfg))
        .map(|_| (0..smooth.cfg.d_z).map(|_| draw_normal(&mut rng)).collect())
        .collect();

    let eval = |p: &WMParams| -> f64 {
        let mut tape = Tape::new();
        let gp = load_params(&mut tape, p);
        let w = Window { states, actions };
        let noise_opt = (!p.cfg.deterministic_latent).then_some(noise.as_slice());
        let wl = window_loss(&mut tape, p, &gp, &w, noise_opt);
        tape.scalar(wl.loss)
    };

    // analytic pass
    let mut tape = Tape::new();
    let gp = load_params(&mut tape, &smooth);
    let w = Window { states, actions };
    let noise_opt = (!smooth.cfg.deterministic_latent).then_some(noise.as_slice());
    let wl = window_loss(&mut tape, &smooth, &gp, &w, noise_opt);
    tape.backward(wl.loss);
    let mut grads: Vec<Vec<f64>> = smooth.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    tape.collect_param_grads(&mut grads);

    // pick indices: one from every tensor, the rest uniformly at random
    let names = WMParams::tensor_names();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (g_idx, t) in smooth.tensors().iter().enumerate() {
        picks.push((g_idx, rng.random_range(0..t.len())));
    }
    while picks.len() < n_samples {
        let g_idx = rng.random_range(0..names.len());
        let len = smooth.tensors()[g_idx].len();
        picks.push((g_idx, rng.random_range(0..len)));
    }
    picks.truncate(n_samples.max(names.len()));

    picks
        .into_par_iter()
        .map(|(g_idx, i)| {
            let theta = smooth.tensors()[g_idx].data[i];
            let h = 1e-5 * theta.abs().max(1.0);
            let mut plus = smooth.clone();
            plus.tensors_mut()[g_idx].data[i] = theta + h;
            let mut minus = smooth.clone();
            minus.tensors_mut()[g_idx].data[i] = theta - h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads[g_idx][i];
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            GradCheckEntry { tensor: names[g_idx], index: i, analytic, numeric, rel_err }
        })
        .collect()
}

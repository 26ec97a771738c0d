//! Action-conditioned latent world model: social-attention encoder, gated
//! recurrent belief, stochastic latent with a learned prior, and a residual
//! decoder. Deployment uses distribution means throughout, so belief updates
//! and rollouts are deterministic.

pub mod dataset;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;

pub use dataset::{collect_dataset, CollectConfig, CollectStats, TransitionRecord};
pub use eval::{eval_prediction, PredictionMetrics};
pub use loss::loss_multistep;
pub use params::{load_checkpoint, save_checkpoint, WMParams, WmConfig, ACTION_DIM};
pub use train::{gradient_check, train, TrainConfig, TrainError};

use crate::state::{NormStats, StructuredState, EGO_X, EGO_Y, LANE_OFFSET, STATE_DIM};
use model::{act_embed, decode_delta, encode_step, gru_step, posterior, prior};
use thiserror::Error;

pub use model::{attention_weights, social_attention};

/// Recurrent belief state; zero-initialized at episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub h: Vec<f64>,
    pub last_z: Vec<f64>,
    pub last_action: [f64; ACTION_DIM],
}

#[derive(Debug, Error)]
#[error("rollout produced non-finite values at step {step}")]
pub struct RolloutFailure {
    pub step: usize,
}

/// H-step prediction under a fixed action source. Safety quantities are
/// recomputed from the predicted states.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Denormalized predicted states for steps t+1..t+H.
    pub states: Vec<StructuredState>,
    /// Per-step minimum box distance to any unmasked neighbor (+inf if none).
    pub d_min: Vec<f64>,
    /// Per-step signed lateral offset from lane center.
    pub lateral: Vec<f64>,
}

impl Rollout {
    pub fn min_distance(&self) -> f64 {
        self.d_min.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_lateral(&self) -> f64 {
        self.lateral.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Episode-frame origin: ego positions are expressed relative to the episode
/// start before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeOrigin {
    pub x: f64,
    pub y: f64,
}

/// Trained model plus its normalization statistics.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub params: WMParams,
    pub stats: NormStats,
}

impl WorldModel {
    pub fn new(params: WMParams, stats: NormStats) -> Self {
        Self { params, stats }
    }

    pub fn init_belief(&self) -> Belief {
        Belief {
            h: vec![0.0; self.params.cfg.d_hidden],
            last_z: vec![0.0; self.params.cfg.d_z],
            last_action: [0.0; ACTION_DIM],
        }
    }

    /// Shift into the episode frame and normalize.
    pub fn normalize(&self, s: &StructuredState, origin: EpisodeOrigin) -> [f64; STATE_DIM] {
        let mut shifted = *s;
        shifted.0[EGO_X] -= origin.x;
        shifted.0[EGO_Y] -= origin.y;
        self.stats.normalize(&shifted).0
    }

    pub fn denormalize(&self, s_norm: &[f64; STATE_DIM], origin: EpisodeOrigin) -> StructuredState {
        let mut out = self.stats.denormalize(&StructuredState(*s_norm));
        out.0[EGO_X] += origin.x;
        out.0[EGO_Y] += origin.y;
        out
    }

    /// Gated-recurrent belief update from an observed state. Uses the
    /// posterior mean (deterministic deployment contract).
    pub fn belief_update(
        &self,
        belief: &Belief,
        state: &StructuredState,
        origin: EpisodeOrigin,
    ) -> Belief {
        let s_norm = self.normalize(state, origin);
        let p = &self.params;
        let x = encode_step(p, &s_norm);
        let a_emb = act_embed(p, &belief.last_action);
        let mut input = x.clone();
        input.extend_from_slice(&a_emb);
        input.extend_from_slice(&belief.last_z);
        let h = gru_step(p, &belief.h, &input);
        let (mu, _lv) = posterior(p, &x, &h);
        Belief { h, last_z: mu, last_action: belief.last_action }
    }

    /// One-step prediction: residual decode in normalized space, returned
    /// denormalized.
    pub fn decode_next(
        &self,
        state: &StructuredState,
        belief: &Belief,
        action: [f64; ACTION_DIM],
        origin: EpisodeOrigin,
    ) -> StructuredState {
        let s_norm = self.normalize(state, origin);
        let delta = decode_delta(&self.params, &belief.h, &belief.last_z, &action, &s_norm);
        let mut next = s_norm;
        for i in 0..STATE_DIM {
            next[i] += delta[i];
        }
        self.denormalize(&next, origin)
    }

    /// Roll the model forward `h_steps` from the current belief/state under a
    /// per-step action source, feeding predictions back as inputs and using
    /// prior means for the latent.
    pub fn rollout_with(
        &self,
        belief: &Belief,
        state: &StructuredState,
        origin: EpisodeOrigin,
        mut action_at: impl FnMut(usize) -> [f64; ACTION_DIM],
        h_steps: usize,
    ) -> Result<Rollout, RolloutFailure> {
        assert!(h_steps >= 1, "rollout horizon must be >= 1");
        let p = &self.params;
        let mut s_norm = self.normalize(state, origin);
        let mut h = belief.h.clone();
        let mut z = belief.last_z.clone();
        let mut states = Vec::with_capacity(h_steps);
        let mut d_min = Vec::with_capacity(h_steps);
        let mut lateral = Vec::with_capacity(h_steps);

        for k in 0..h_steps {
            let a = action_at(k);
            let delta = decode_delta(p, &h, &z, &a, &s_norm);
            for i in 0..STATE_DIM {
                s_norm[i] += delta[i];
            }
            if s_norm.iter().any(|v| !v.is_finite()) {
                return Err(RolloutFailure { step: k });
            }
            let raw = self.denormalize(&s_norm, origin);
            d_min.push(raw.min_neighbor_distance());
            lateral.push(raw.0[LANE_OFFSET]);
            states.push(raw);

            if k + 1 < h_steps {
                let x = encode_step(p, &s_norm);
                let a_emb = act_embed(p, &a);
                let mut input = x;
                input.extend_from_slice(&a_emb);
                input.extend_from_slice(&z);
                h = gru_step(p, &h, &input);
                let (mu, _lv) = prior(p, &h);
                z = mu;
            }
        }
        Ok(Rollout { states, d_min, lateral })
    }

    /// Rollout under a constant action profile (the deployment path).
    pub fn rollout(
        &self,
        belief: &Belief,
        state: &StructuredState,
        origin: EpisodeOrigin,
        action: [f64; ACTION_DIM],
        h_steps: usize,
    ) -> Result<Rollout, RolloutFailure> {
        self.rollout_with(belief, state, origin, |_| action, h_steps)
    }
}

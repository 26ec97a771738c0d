//! Tape-based training forward pass. Mirrors `model.rs` step for step so the
//! differentiable loss equals the plain forward evaluation.

use super::params::{tidx, WMParams, ACTION_DIM, EGO_RAW_IN, LOGVAR_HI, LOGVAR_LO};
use super::tape::{NodeId, Tape};
use crate::state::{EGO_SPEED, EGO_YAW, MASK, NEIGHBOR_FEATS, N_NEIGHBORS, SOCIAL, STATE_DIM};

/// Parameter nodes on a tape, aligned with `WMParams::tensors()` order.
pub struct GraphParams {
    pub ids: Vec<NodeId>,
}

pub fn load_params(tape: &mut Tape, p: &WMParams) -> GraphParams {
    let ids = p.tensors().iter().enumerate().map(|(pid, t)| tape.param(pid, &t.data)).collect();
    GraphParams { ids }
}

fn affine_tanh(
    tape: &mut Tape,
    p: &WMParams,
    gp: &GraphParams,
    w_idx: usize,
    b_idx: usize,
    x: NodeId,
) -> NodeId {
    let (rows, cols) = {
        let t = p.tensors()[w_idx];
        (t.rows, t.cols)
    };
    let y = tape.matvec(gp.ids[w_idx], x, rows, cols);
    let y = tape.add(y, gp.ids[b_idx]);
    tape.tanh(y)
}

fn affine(
    tape: &mut Tape,
    p: &WMParams,
    gp: &GraphParams,
    w_idx: usize,
    b_idx: usize,
    x: NodeId,
) -> NodeId {
    let (rows, cols) = {
        let t = p.tensors()[w_idx];
        (t.rows, t.cols)
    };
    let y = tape.matvec(gp.ids[w_idx], x, rows, cols);
    tape.add(y, gp.ids[b_idx])
}

/// Fused feature x_t from a state node: embedded ego/road block concatenated
/// with the masked social-attention context. The mask comes from the node's
/// forward value.
/// Ego/road block plus the engineered kinematic terms, as a graph node.
fn ego_input(tape: &mut Tape, p: &WMParams, s: NodeId) -> NodeId {
    let ego_raw = tape.slice(s, 0, EGO_RAW_IN);
    match p.cfg.cond {
        Some([yaw_mean, yaw_scale, v_mean, v_scale, x_scale, y_scale, dt]) => {
            let yaw_n = tape.slice(s, EGO_YAW, 1);
            let yaw = tape.affine_const(yaw_n, &[yaw_scale], &[yaw_mean]);
            let v_n = tape.slice(s, EGO_SPEED, 1);
            let v = tape.affine_const(v_n, &[v_scale], &[v_mean]);
            let cos = tape.cos(yaw);
            let sin = tape.sin(yaw);
            let vcos = tape.mul(v, cos);
            let vsin = tape.mul(v, sin);
            let adv_x = tape.affine_const(vcos, &[dt / x_scale], &[0.0]);
            let adv_y = tape.affine_const(vsin, &[dt / y_scale], &[0.0]);
            tape.concat(&[ego_raw, cos, sin, adv_x, adv_y])
        }
        None => {
            let zeros = tape.input(&[0.0; super::params::KINEMATIC_AUX]);
            tape.concat(&[ego_raw, zeros])
        }
    }
}

pub fn encode_step(tape: &mut Tape, p: &WMParams, gp: &GraphParams, s: NodeId) -> NodeId {
    let ego_in = ego_input(tape, p, s);
    let ego = affine_tanh(tape, p, gp, tidx::EGO_EMB_W, tidx::EGO_EMB_B, ego_in);

    let mask: Vec<bool> = (0..N_NEIGHBORS).map(|i| tape.value(s)[MASK + i] > 0.5).collect();
    if !mask.iter().any(|&m| m) {
        let zero = tape.input(&vec![0.0; p.cfg.d_attn]);
        return tape.concat(&[ego, zero]);
    }

    let d_attn = p.cfg.d_attn;
    let q = tape.matvec(gp.ids[tidx::ATTN_Q], ego, d_attn, p.cfg.d_token);
    let inv_sqrt = 1.0 / (d_attn as f64).sqrt();
    let mut scores = Vec::with_capacity(N_NEIGHBORS);
    let mut values = Vec::with_capacity(N_NEIGHBORS);
    for i in 0..N_NEIGHBORS {
        if mask[i] {
            let feats = tape.slice(s, SOCIAL + i * NEIGHBOR_FEATS, NEIGHBOR_FEATS);
            let tok = affine_tanh(tape, p, gp, tidx::NB_EMB_W, tidx::NB_EMB_B, feats);
            let k = tape.matvec(gp.ids[tidx::ATTN_K], tok, d_attn, p.cfg.d_token);
            scores.push(tape.dot_scaled(q, k, inv_sqrt));
            values.push(tape.matvec(gp.ids[tidx::ATTN_V], tok, d_attn, p.cfg.d_token));
        } else {
            let neg = tape.input(&[0.0]);
            scores.push(neg);
            let zero = tape.input(&vec![0.0; d_attn]);
            values.push(zero);
        }
    }
    let stacked = tape.stack(&scores);
    let alpha = tape.masked_softmax(stacked, &mask);
    let c = tape.weighted_sum(alpha, &values);
    tape.concat(&[ego, c])
}

fn gru_step(tape: &mut Tape, p: &WMParams, gp: &GraphParams, h: NodeId, input: NodeId) -> NodeId {
    let dh = p.cfg.d_hidden;
    let din = p.cfg.gru_in();
    let wz = tape.matvec(gp.ids[tidx::GRU_WZ], input, dh, din);
    let uz = tape.matvec(gp.ids[tidx::GRU_UZ], h, dh, dh);
    let zsum = tape.add(wz, uz);
    let zsum = tape.add(zsum, gp.ids[tidx::GRU_BZ]);
    let u = tape.sigmoid(zsum);

    let wr = tape.matvec(gp.ids[tidx::GRU_WR], input, dh, din);
    let ur = tape.matvec(gp.ids[tidx::GRU_UR], h, dh, dh);
    let rsum = tape.add(wr, ur);
    let rsum = tape.add(rsum, gp.ids[tidx::GRU_BR]);
    let r = tape.sigmoid(rsum);
    let rh = tape.mul(r, h);

    let wc = tape.matvec(gp.ids[tidx::GRU_WC], input, dh, din);
    let uc = tape.matvec(gp.ids[tidx::GRU_UC], rh, dh, dh);
    let csum = tape.add(wc, uc);
    let csum = tape.add(csum, gp.ids[tidx::GRU_BC]);
    let cand = tape.tanh(csum);

    tape.lerp(u, h, cand)
}

fn posterior(
    tape: &mut Tape,
    p: &WMParams,
    gp: &GraphParams,
    x: NodeId,
    h: NodeId,
) -> (NodeId, NodeId) {
    let input = tape.concat(&[x, h]);
    let hid = affine_tanh(tape, p, gp, tidx::POST_W1, tidx::POST_B1, input);
    let out = affine(tape, p, gp, tidx::POST_W2, tidx::POST_B2, hid);
    let dz = p.cfg.d_z;
    (tape.slice(out, 0, dz), tape.slice(out, dz, dz))
}

fn prior(tape: &mut Tape, p: &WMParams, gp: &GraphParams, h: NodeId) -> (NodeId, NodeId) {
    let hid = affine_tanh(tape, p, gp, tidx::PRIOR_W1, tidx::PRIOR_B1, h);
    let out = affine(tape, p, gp, tidx::PRIOR_W2, tidx::PRIOR_B2, hid);
    let dz = p.cfg.d_z;
    (tape.slice(out, 0, dz), tape.slice(out, dz, dz))
}

fn decode_delta(
    tape: &mut Tape,
    p: &WMParams,
    gp: &GraphParams,
    h: NodeId,
    z: NodeId,
    a: NodeId,
    s: NodeId,
) -> NodeId {
    let skip = ego_input(tape, p, s);
    let input = tape.concat(&[h, z, a, skip]);
    let hid = affine_tanh(tape, p, gp, tidx::DEC_W1, tidx::DEC_B1, input);
    let hid2 = affine_tanh(tape, p, gp, tidx::DEC_W2, tidx::DEC_B2, hid);
    affine(tape, p, gp, tidx::DEC_W3, tidx::DEC_B3, hid2)
}

/// A training window: `warmup` observed states followed by `horizon`
/// prediction targets. `actions[i]` was executed between states i and i+1.
pub struct Window<'a> {
    pub states: &'a [[f64; STATE_DIM]],
    pub actions: &'a [[f64; ACTION_DIM]],
}

pub struct WindowLoss {
    pub loss: NodeId,
    /// Undiscounted mean per-step squared error, for monitoring.
    pub pred_mse: f64,
    /// Summed (floored) KL across the window.
    pub latent: f64,
}

/// Build the multi-step discounted loss for one window. Warmup consumes true
/// states through the posterior; prediction steps feed decoded states back,
/// with the posterior evaluated on predictions and regularized toward the
/// learned prior. `noise` supplies one reparameterization draw per belief
/// update; `None` uses posterior means (deterministic).
pub fn window_loss(
    tape: &mut Tape,
    p: &WMParams,
    gp: &GraphParams,
    window: &Window,
    noise: Option<&[Vec<f64>]>,
) -> WindowLoss {
    let cfg = &p.cfg;
    let w = cfg.warmup;
    let h_steps = cfg.horizon;
    assert_eq!(window.states.len(), w + h_steps, "window length");
    assert_eq!(window.actions.len(), w + h_steps - 1, "action length");
    let dz = cfg.d_z;
    let zero_noise = vec![0.0; dz];
    let draw = |i: usize| -> &[f64] {
        match noise {
            Some(n) => &n[i],
            None => &zero_noise,
        }
    };

    let mut h = tape.input(&vec![0.0; cfg.d_hidden]);
    let mut z = tape.input(&vec![0.0; dz]);
    let mut kls: Vec<NodeId> = Vec::new();
    let mut updates = 0usize;

    // warmup over observed states
    for i in 0..w {
        let s = tape.input(&window.states[i]);
        let x = encode_step(tape, p, gp, s);
        let prev_a = if i == 0 { [0.0; ACTION_DIM] } else { window.actions[i - 1] };
        let a_in = tape.input(&prev_a);
        let a_emb = affine_tanh(tape, p, gp, tidx::ACT_EMB_W, tidx::ACT_EMB_B, a_in);
        let input = tape.concat(&[x, a_emb, z]);
        h = gru_step(tape, p, gp, h, input);
        let (mu_q, lv_q) = posterior(tape, p, gp, x, h);
        let (mu_p, lv_p) = prior(tape, p, gp, h);
        kls.push(tape.kl_diag(mu_q, lv_q, mu_p, lv_p, LOGVAR_LO, LOGVAR_HI));
        z = if cfg.deterministic_latent {
            mu_q
        } else {
            tape.reparam(mu_q, lv_q, draw(updates), LOGVAR_LO, LOGVAR_HI)
        };
        updates += 1;
    }

    // open-loop prediction, feeding decoded states back
    let mut s_hat = tape.input(&window.states[w - 1]);
    let mut err_terms: Vec<(f64, NodeId)> = Vec::new();
    let mut pred_mse = 0.0;
    for k in 1..=h_steps {
        let a_raw = window.actions[w - 2 + k];
        let a_in = tape.input(&a_raw);
        let delta = decode_delta(tape, p, gp, h, z, a_in, s_hat);
        s_hat = tape.add(s_hat, delta);
        let err = tape.sum_sq_diff(s_hat, &window.states[w - 1 + k]);
        pred_mse += tape.scalar(err);
        err_terms.push((cfg.gamma.powi(k as i32) / h_steps as f64, err));

        if k < h_steps {
            let x = encode_step(tape, p, gp, s_hat);
            let a_emb = affine_tanh(tape, p, gp, tidx::ACT_EMB_W, tidx::ACT_EMB_B, a_in);
            let input = tape.concat(&[x, a_emb, z]);
            h = gru_step(tape, p, gp, h, input);
            let (mu_q, lv_q) = posterior(tape, p, gp, x, h);
            let (mu_p, lv_p) = prior(tape, p, gp, h);
            kls.push(tape.kl_diag(mu_q, lv_q, mu_p, lv_p, LOGVAR_LO, LOGVAR_HI));
            z = if cfg.deterministic_latent {
                mu_q
            } else {
                tape.reparam(mu_q, lv_q, draw(updates), LOGVAR_LO, LOGVAR_HI)
            };
            updates += 1;
        }
    }

    // latent term with the per-update free-bits floor
    let mut latent_terms: Vec<(f64, NodeId)> = Vec::new();
    let mut floor_bias = 0.0;
    let mut latent = 0.0;
    for &kl in &kls {
        let v = tape.scalar(kl);
        if v > cfg.free_bits {
            latent_terms.push((cfg.lambda, kl));
            latent += v;
        } else {
            floor_bias += cfg.lambda * cfg.free_bits;
            latent += cfg.free_bits;
        }
    }

    let mut terms = err_terms;
    terms.extend(latent_terms);
    let loss = tape.lin_comb(&terms, floor_bias);
    WindowLoss { loss, pred_mse: pred_mse / h_steps as f64, latent }
}

/// Number of reparameterization draws a window consumes.
pub fn noise_draws(cfg: &super::WmConfig) -> usize {
    cfg.warmup + cfg.horizon - 1
}

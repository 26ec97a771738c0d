//! Plain (gradient-free) forward pass: social-attention encoder, gated
//! recurrent belief update, latent heads, and the residual decoder. The
//! training graph in `graph.rs` mirrors this math exactly on the tape.

use super::params::{
    Tensor, WMParams, ACTION_DIM, EGO_RAW_IN, KINEMATIC_AUX, LOGVAR_HI, LOGVAR_LO, NB_TOKEN_IN,
};
use crate::state::{EGO_SPEED, EGO_YAW, MASK, NEIGHBOR_FEATS, N_NEIGHBORS, SOCIAL, STATE_DIM};

pub(crate) fn matvec(t: &Tensor, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(t.cols, x.len());
    let mut out = vec![0.0; t.rows];
    for i in 0..t.rows {
        let row = &t.data[i * t.cols..(i + 1) * t.cols];
        out[i] = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    }
    out
}

fn affine_tanh(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut v = matvec(w, x);
    for (o, bi) in v.iter_mut().zip(b.data.iter()) {
        *o = (*o + bi).tanh();
    }
    v
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Engineered kinematic inputs from the normalized state: heading direction
/// and the one-step position advance expressed in normalized units.
pub(crate) fn kinematic_aux(p: &WMParams, s: &[f64; STATE_DIM]) -> [f64; KINEMATIC_AUX] {
    let Some(c) = p.cfg.cond else { return [0.0; KINEMATIC_AUX] };
    let [yaw_mean, yaw_scale, v_mean, v_scale, x_scale, y_scale, dt] = c;
    let yaw = s[EGO_YAW] * yaw_scale + yaw_mean;
    let v = s[EGO_SPEED] * v_scale + v_mean;
    [yaw.cos(), yaw.sin(), v * yaw.cos() * dt / x_scale, v * yaw.sin() * dt / y_scale]
}

/// Ego/road block plus the engineered kinematic terms.
pub(crate) fn ego_input(p: &WMParams, s: &[f64; STATE_DIM]) -> Vec<f64> {
    let mut input = s[..EGO_RAW_IN].to_vec();
    input.extend_from_slice(&kinematic_aux(p, s));
    input
}

pub(crate) fn ego_token(p: &WMParams, s: &[f64; STATE_DIM]) -> Vec<f64> {
    affine_tanh(&p.ego_emb_w, &p.ego_emb_b, &ego_input(p, s))
}

pub(crate) fn neighbor_token(p: &WMParams, feats: &[f64]) -> Vec<f64> {
    debug_assert_eq!(feats.len(), NB_TOKEN_IN);
    affine_tanh(&p.nb_emb_w, &p.nb_emb_b, feats)
}

/// Scaled dot-product attention over neighbor tokens. Attention weights are a
/// softmax over unmasked slots; with no unmasked neighbor the context is zero.
pub fn social_attention(
    p: &WMParams,
    ego_tok: &[f64],
    neighbor_toks: &[Vec<f64>],
    mask: &[bool],
) -> Vec<f64> {
    debug_assert_eq!(neighbor_toks.len(), mask.len());
    let d_attn = p.cfg.d_attn;
    if !mask.iter().any(|&m| m) {
        return vec![0.0; d_attn];
    }
    let q = matvec(&p.attn_q, ego_tok);
    let inv_sqrt = 1.0 / (d_attn as f64).sqrt();
    let mut scores = vec![f64::NEG_INFINITY; neighbor_toks.len()];
    let mut values: Vec<Option<Vec<f64>>> = vec![None; neighbor_toks.len()];
    for i in 0..neighbor_toks.len() {
        if mask[i] {
            let k = matvec(&p.attn_k, &neighbor_toks[i]);
            scores[i] = q.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
            values[i] = Some(matvec(&p.attn_v, &neighbor_toks[i]));
        }
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0; scores.len()];
    let mut sum = 0.0;
    for i in 0..scores.len() {
        if mask[i] {
            weights[i] = (scores[i] - max).exp();
            sum += weights[i];
        }
    }
    let mut out = vec![0.0; d_attn];
    for i in 0..weights.len() {
        if let Some(v) = &values[i] {
            let a = weights[i] / sum;
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += a * x;
            }
        }
    }
    out
}

/// Attention weights alone (softmax over unmasked slots), for inspection.
pub fn attention_weights(
    p: &WMParams,
    ego_tok: &[f64],
    neighbor_toks: &[Vec<f64>],
    mask: &[bool],
) -> Vec<f64> {
    let d_attn = p.cfg.d_attn;
    let q = matvec(&p.attn_q, ego_tok);
    let inv_sqrt = 1.0 / (d_attn as f64).sqrt();
    let mut scores = vec![f64::NEG_INFINITY; neighbor_toks.len()];
    for i in 0..neighbor_toks.len() {
        if mask[i] {
            let k = matvec(&p.attn_k, &neighbor_toks[i]);
            scores[i] = q.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
        }
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![0.0; neighbor_toks.len()];
    }
    let mut w = vec![0.0; scores.len()];
    let mut sum = 0.0;
    for i in 0..scores.len() {
        if mask[i] {
            w[i] = (scores[i] - max).exp();
            sum += w[i];
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

pub(crate) fn state_mask(s: &[f64; STATE_DIM]) -> Vec<bool> {
    (0..N_NEIGHBORS).map(|i| s[MASK + i] > 0.5).collect()
}

pub(crate) fn neighbor_feats(s: &[f64; STATE_DIM], slot: usize) -> &[f64] {
    let o = SOCIAL + slot * NEIGHBOR_FEATS;
    &s[o..o + NEIGHBOR_FEATS]
}

/// Fused per-step feature: embedded ego/road block concatenated with the
/// social context.
pub fn encode_step(p: &WMParams, s: &[f64; STATE_DIM]) -> Vec<f64> {
    let ego = ego_token(p, s);
    let mask = state_mask(s);
    let toks: Vec<Vec<f64>> = (0..N_NEIGHBORS)
        .map(|i| {
            if mask[i] {
                neighbor_token(p, neighbor_feats(s, i))
            } else {
                vec![0.0; p.cfg.d_token]
            }
        })
        .collect();
    let c = social_attention(p, &ego, &toks, &mask);
    let mut x = ego;
    x.extend_from_slice(&c);
    x
}

pub(crate) fn act_embed(p: &WMParams, a: &[f64; ACTION_DIM]) -> Vec<f64> {
    affine_tanh(&p.act_emb_w, &p.act_emb_b, a)
}

/// Standard gated recurrent cell.
pub(crate) fn gru_step(p: &WMParams, h: &[f64], input: &[f64]) -> Vec<f64> {
    let n = h.len();
    let wz = matvec(&p.gru_wz, input);
    let uz = matvec(&p.gru_uz, h);
    let wr = matvec(&p.gru_wr, input);
    let ur = matvec(&p.gru_ur, h);
    let mut rh = vec![0.0; n];
    let mut u = vec![0.0; n];
    for i in 0..n {
        let r = sigmoid(wr[i] + ur[i] + p.gru_br.data[i]);
        rh[i] = r * h[i];
        u[i] = sigmoid(wz[i] + uz[i] + p.gru_bz.data[i]);
    }
    let wc = matvec(&p.gru_wc, input);
    let uc = matvec(&p.gru_uc, &rh);
    let mut out = vec![0.0; n];
    for i in 0..n {
        let cand = (wc[i] + uc[i] + p.gru_bc.data[i]).tanh();
        out[i] = h[i] + u[i] * (cand - h[i]);
    }
    out
}

pub(crate) fn clamp_lv(v: f64) -> f64 {
    v.max(LOGVAR_LO).min(LOGVAR_HI)
}

/// Posterior head q(z | x, h): returns (mean, clamped log-variance).
pub(crate) fn posterior(p: &WMParams, x: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut input = x.to_vec();
    input.extend_from_slice(h);
    let hid = affine_tanh(&p.post_w1, &p.post_b1, &input);
    let mut out = matvec(&p.post_w2, &hid);
    for (o, b) in out.iter_mut().zip(p.post_b2.data.iter()) {
        *o += b;
    }
    let dz = p.cfg.d_z;
    let mu = out[..dz].to_vec();
    let lv = out[dz..].iter().map(|&v| clamp_lv(v)).collect();
    (mu, lv)
}

/// Prior head p(z | h): returns (mean, clamped log-variance).
pub(crate) fn prior(p: &WMParams, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hid = affine_tanh(&p.prior_w1, &p.prior_b1, h);
    let mut out = matvec(&p.prior_w2, &hid);
    for (o, b) in out.iter_mut().zip(p.prior_b2.data.iter()) {
        *o += b;
    }
    let dz = p.cfg.d_z;
    let mu = out[..dz].to_vec();
    let lv = out[dz..].iter().map(|&v| clamp_lv(v)).collect();
    (mu, lv)
}

/// Residual decoder: state delta in normalized space. Conditions on the
/// belief, latent, action, and (skip path) the current ego/road features.
pub(crate) fn decode_delta(
    p: &WMParams,
    h: &[f64],
    z: &[f64],
    a: &[f64; ACTION_DIM],
    s: &[f64; STATE_DIM],
) -> [f64; STATE_DIM] {
    let mut input = h.to_vec();
    input.extend_from_slice(z);
    input.extend_from_slice(a);
    input.extend_from_slice(&ego_input(p, s));
    let hid = affine_tanh(&p.dec_w1, &p.dec_b1, &input);
    let hid2 = affine_tanh(&p.dec_w2, &p.dec_b2, &hid);
    let mut out = matvec(&p.dec_w3, &hid2);
    for (o, b) in out.iter_mut().zip(p.dec_b3.data.iter()) {
        *o += b;
    }
    let mut arr = [0.0; STATE_DIM];
    arr.copy_from_slice(&out);
    arr
}

/// KL(q || p) for diagonal Gaussians with already-clamped log-variances.
#[cfg(test)]
pub(crate) fn kl_diag(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..mu_q.len() {
        let dm = mu_q[i] - mu_p[i];
        s += 0.5 * ((lv_p[i] - lv_q[i]) + (lv_q[i].exp() + dm * dm) * (-lv_p[i]).exp() - 1.0);
    }
    s
}

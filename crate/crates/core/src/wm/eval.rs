//! Open-loop prediction quality at the rollout horizon: displacement,
//! heading, and speed errors, plus a constant-velocity reference.

use super::params::ACTION_DIM;
use super::{EpisodeOrigin, WorldModel};
use crate::state::{StructuredState, EGO_SPEED, EGO_X, EGO_Y, EGO_YAW};
use crate::geom::wrap_angle;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionMetrics {
    /// Mean ego displacement error over rollout steps 1..H, meters.
    pub ade: f64,
    /// Ego displacement error at step H, meters.
    pub fde: f64,
    /// Yaw RMSE over all rollout steps, degrees.
    pub yaw_rmse_deg: f64,
    /// Speed RMSE over all rollout steps, m/s.
    pub vel_rmse: f64,
    pub n_windows: usize,
}

struct Accum {
    disp_sum: f64,
    disp_n: usize,
    fde_sum: f64,
    yaw_sq: f64,
    vel_sq: f64,
    step_n: usize,
    windows: usize,
}

impl Accum {
    fn new() -> Self {
        Self { disp_sum: 0.0, disp_n: 0, fde_sum: 0.0, yaw_sq: 0.0, vel_sq: 0.0, step_n: 0, windows: 0 }
    }

    fn push(&mut self, pred: &[StructuredState], truth: &[StructuredState]) {
        for (p, t) in pred.iter().zip(truth.iter()) {
            let dx = p.0[EGO_X] - t.0[EGO_X];
            let dy = p.0[EGO_Y] - t.0[EGO_Y];
            self.disp_sum += (dx * dx + dy * dy).sqrt();
            self.disp_n += 1;
            let dyaw = wrap_angle(p.0[EGO_YAW] - t.0[EGO_YAW]).to_degrees();
            self.yaw_sq += dyaw * dyaw;
            let dv = p.0[EGO_SPEED] - t.0[EGO_SPEED];
            self.vel_sq += dv * dv;
            self.step_n += 1;
        }
        let (p, t) = (pred.last().unwrap(), truth.last().unwrap());
        let dx = p.0[EGO_X] - t.0[EGO_X];
        let dy = p.0[EGO_Y] - t.0[EGO_Y];
        self.fde_sum += (dx * dx + dy * dy).sqrt();
        self.windows += 1;
    }

    fn finish(self) -> PredictionMetrics {
        let n = self.windows.max(1) as f64;
        PredictionMetrics {
            ade: self.disp_sum / self.disp_n.max(1) as f64,
            fde: self.fde_sum / n,
            yaw_rmse_deg: (self.yaw_sq / self.step_n.max(1) as f64).sqrt(),
            vel_rmse: (self.vel_sq / self.step_n.max(1) as f64).sqrt(),
            n_windows: self.windows,
        }
    }
}

/// Open-loop rollout quality on held-out episodes of raw (state, action)
/// pairs. Each window bootstraps the belief over `warmup` observed states and
/// rolls `horizon` steps with the logged actions.
pub fn eval_prediction(
    wm: &WorldModel,
    episodes: &[Vec<(StructuredState, [f64; ACTION_DIM])>],
    stride: usize,
) -> PredictionMetrics {
    let cfg = &wm.params.cfg;
    let (w, h) = (cfg.warmup, cfg.horizon);
    let win = w + h;
    let mut acc = Accum::new();

    for ep in episodes {
        if ep.len() < win {
            continue;
        }
        // match the training representation: continuous ego yaw
        let ep = {
            let mut e = ep.clone();
            crate::wm::dataset::continuize_yaw(&mut e);
            e
        };
        let origin = EpisodeOrigin { x: ep[0].0 .0[EGO_X], y: ep[0].0 .0[EGO_Y] };
        let mut t0 = 0;
        while t0 + win <= ep.len() {
            let mut belief = wm.init_belief();
            for i in 0..w {
                belief.last_action = if i == 0 { [0.0; ACTION_DIM] } else { ep[t0 + i - 1].1 };
                belief = wm.belief_update(&belief, &ep[t0 + i].0, origin);
            }
            let pivot = t0 + w - 1;
            let actions: Vec<[f64; ACTION_DIM]> = (0..h).map(|k| ep[pivot + k].1).collect();
            match wm.rollout_with(&belief, &ep[pivot].0, origin, |k| actions[k], h) {
                Ok(rollout) => {
                    let truth: Vec<StructuredState> =
                        (1..=h).map(|k| ep[pivot + k].0).collect();
                    acc.push(&rollout.states, &truth);
                }
                Err(_) => {}
            }
            t0 += stride.max(1);
        }
    }
    acc.finish()
}

/// Constant-velocity reference: hold speed and heading from the pivot state.
pub fn constant_velocity_metrics(
    episodes: &[Vec<(StructuredState, [f64; ACTION_DIM])>],
    warmup: usize,
    horizon: usize,
    dt: f64,
    stride: usize,
) -> PredictionMetrics {
    let win = warmup + horizon;
    let mut acc = Accum::new();
    for ep in episodes {
        if ep.len() < win {
            continue;
        }
        let mut t0 = 0;
        while t0 + win <= ep.len() {
            let pivot = t0 + warmup - 1;
            let base = &ep[pivot].0;
            let (x, y, yaw, v) = (base.0[EGO_X], base.0[EGO_Y], base.0[EGO_YAW], base.0[EGO_SPEED]);
            let pred: Vec<StructuredState> = (1..=horizon)
                .map(|k| {
                    let mut s = *base;
                    s.0[EGO_X] = x + v * yaw.cos() * dt * k as f64;
                    s.0[EGO_Y] = y + v * yaw.sin() * dt * k as f64;
                    s
                })
                .collect();
            let truth: Vec<StructuredState> = (1..=horizon).map(|k| ep[pivot + k].0).collect();
            acc.push(&pred, &truth);
            t0 += stride.max(1);
        }
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::STATE_DIM;

    fn straight_episode(n: usize, v: f64, dt: f64) -> Vec<(StructuredState, [f64; ACTION_DIM])> {
        (0..n)
            .map(|i| {
                let mut s = StructuredState([0.0; STATE_DIM]);
                s.0[EGO_X] = v * dt * i as f64;
                s.0[EGO_SPEED] = v;
                (s, [0.0; ACTION_DIM])
            })
            .collect()
    }

    /// Constant-velocity predictions on constant-velocity truth are exact.
    #[test]
    fn cv_on_straight_is_zero() {
        let eps = vec![straight_episode(30, 8.0, 0.1)];
        let m = constant_velocity_metrics(&eps, 3, 10, 0.1, 5);
        assert!(m.n_windows > 0);
        assert!(m.ade < 1e-9);
        assert!(m.fde < 1e-9);
        assert!(m.yaw_rmse_deg < 1e-9);
        assert!(m.vel_rmse < 1e-9);
    }

    /// A constant 0.5 m offset in every predicted position gives ADE = FDE = 0.5.
    #[test]
    fn constant_offset_metrics() {
        let truth = straight_episode(11, 5.0, 0.1);
        let pred: Vec<StructuredState> = truth[1..]
            .iter()
            .map(|(s, _)| {
                let mut p = *s;
                p.0[EGO_Y] += 0.5;
                p
            })
            .collect();
        let truth_states: Vec<StructuredState> = truth[1..].iter().map(|(s, _)| *s).collect();
        let mut acc = Accum::new();
        acc.push(&pred, &truth_states);
        let m = acc.finish();
        assert!((m.ade - 0.5).abs() < 1e-12);
        assert!((m.fde - 0.5).abs() < 1e-12);
    }
}

#[cfg(test)]
mod diag {
    use super::*;
    use crate::wm::dataset::{load_records, episodes_from_records};
    use crate::wm::load_checkpoint;
    use crate::state::{EGO_X, EGO_Y, EGO_YAW, EGO_SPEED};

    #[test]
    #[ignore]
    fn position_consistency() {
        let f = std::fs::File::open("/root/artifacts/e11.wm").unwrap();
        let (params, stats) = load_checkpoint(std::io::BufReader::new(f)).unwrap();
        let wm = WorldModel::new(params, stats);
        let f = std::fs::File::open("/root/artifacts/train_dense.jsonl").unwrap();
        let records = load_records(std::io::BufReader::new(f)).unwrap();
        let episodes = episodes_from_records(&records);
        let cfg = wm.params.cfg.clone();
        let (w, h) = (cfg.warmup, cfg.horizon);
        let mut n = 0;
        let (mut ade_direct, mut ade_dead, mut ade_true_dead) = (0.0, 0.0, 0.0);
        for ep in episodes.iter().rev().take(20) {
            let ep = {
                let mut e = ep.clone();
                crate::wm::dataset::continuize_yaw(&mut e);
                e
            };
            if ep.len() < w + h { continue; }
            let origin = EpisodeOrigin { x: ep[0].0 .0[EGO_X], y: ep[0].0 .0[EGO_Y] };
            let mut t0 = 0;
            while t0 + w + h <= ep.len() {
                let mut belief = wm.init_belief();
                for i in 0..w {
                    belief.last_action = if i == 0 { [0.0; 3] } else { ep[t0 + i - 1].1 };
                    belief = wm.belief_update(&belief, &ep[t0 + i].0, origin);
                }
                let pivot = t0 + w - 1;
                let actions: Vec<[f64; 3]> = (0..h).map(|k| ep[pivot + k].1).collect();
                if let Ok(r) = wm.rollout_with(&belief, &ep[pivot].0, origin, |k| actions[k], h) {
                    // direct position ADE
                    let mut dd = 0.0;
                    // dead reckon from predicted v/yaw
                    let (mut dx, mut dy) = (ep[pivot].0 .0[EGO_X], ep[pivot].0 .0[EGO_Y]);
                    let (mut tx, mut ty) = (dx, dy);
                    let mut dead = 0.0;
                    let mut tdead = 0.0;
                    let mut v_prev = ep[pivot].0 .0[EGO_SPEED];
                    let mut yaw_prev = ep[pivot].0 .0[EGO_YAW];
                    for k in 0..h {
                        let p = &r.states[k];
                        let t = &ep[pivot + 1 + k].0;
                        dd += ((p.0[EGO_X] - t.0[EGO_X]).powi(2) + (p.0[EGO_Y] - t.0[EGO_Y]).powi(2)).sqrt();
                        // predicted v/yaw dead reckoning (position update uses pre-step v/yaw)
                        dx += v_prev * yaw_prev.cos() * 0.1;
                        dy += v_prev * yaw_prev.sin() * 0.1;
                        v_prev = p.0[EGO_SPEED];
                        yaw_prev = p.0[EGO_YAW];
                        dead += ((dx - t.0[EGO_X]).powi(2) + (dy - t.0[EGO_Y]).powi(2)).sqrt();
                        // true v/yaw dead reckoning
                        let tv = ep[pivot + k].0 .0[EGO_SPEED];
                        let tyaw = ep[pivot + k].0 .0[EGO_YAW];
                        tx += tv * tyaw.cos() * 0.1;
                        ty += tv * tyaw.sin() * 0.1;
                        tdead += ((tx - t.0[EGO_X]).powi(2) + (ty - t.0[EGO_Y]).powi(2)).sqrt();
                    }
                    ade_direct += dd / h as f64;
                    ade_dead += dead / h as f64;
                    ade_true_dead += tdead / h as f64;
                    n += 1;
                }
                t0 += 7;
            }
        }
        let n = n as f64;
        eprintln!("windows {n}: direct ADE {:.3}, dead-reckon(pred v/yaw) ADE {:.3}, dead-reckon(true v/yaw) ADE {:.3}",
            ade_direct / n, ade_dead / n, ade_true_dead / n);
    }
}

#[cfg(test)]
mod diag2 {
    use super::*;
    use crate::wm::dataset::{episodes_from_records, load_records};
    use crate::wm::load_checkpoint;
    use crate::state::{EGO_SPEED, EGO_X, EGO_Y, EGO_YAW};

    #[test]
    #[ignore]
    fn cv_vs_wm_window_structure() {
        let f = std::fs::File::open("/root/artifacts/e8.wm").unwrap();
        let (params, stats) = load_checkpoint(std::io::BufReader::new(f)).unwrap();
        let wm = WorldModel::new(params, stats);
        let f = std::fs::File::open("/root/artifacts/train_dense.jsonl").unwrap();
        let records = load_records(std::io::BufReader::new(f)).unwrap();
        let episodes = episodes_from_records(&records);
        let n_hold = episodes.len() / 10;
        let hold = &episodes[episodes.len() - n_hold..];
        let cfg = wm.params.cfg.clone();
        let (w, h) = (cfg.warmup, cfg.horizon);

        let mut wins = 0usize;
        let mut total = 0usize;
        let (mut cruise_cv, mut cruise_wm, mut dyn_cv, mut dyn_wm) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_cruise, mut n_dyn) = (0usize, 0usize);
        for ep in hold {
            let ep = {
                let mut e = ep.clone();
                crate::wm::dataset::continuize_yaw(&mut e);
                e
            };
            if ep.len() < w + h {
                continue;
            }
            let origin = EpisodeOrigin { x: ep[0].0 .0[EGO_X], y: ep[0].0 .0[EGO_Y] };
            let mut t0 = 0;
            while t0 + w + h <= ep.len() {
                let pivot = t0 + w - 1;
                // window dynamics: speed change over the horizon
                let dv = (ep[pivot + h].0 .0[EGO_SPEED] - ep[pivot].0 .0[EGO_SPEED]).abs();
                let dynamic = dv > 0.5;

                let mut belief = wm.init_belief();
                for i in 0..w {
                    belief.last_action = if i == 0 { [0.0; 3] } else { ep[t0 + i - 1].1 };
                    belief = wm.belief_update(&belief, &ep[t0 + i].0, origin);
                }
                let actions: Vec<[f64; 3]> = (0..h).map(|k| ep[pivot + k].1).collect();
                let Ok(r) = wm.rollout_with(&belief, &ep[pivot].0, origin, |k| actions[k], h) else {
                    t0 += 5;
                    continue;
                };
                let base = &ep[pivot].0;
                let (x, y, yaw, v) = (base.0[EGO_X], base.0[EGO_Y], base.0[EGO_YAW], base.0[EGO_SPEED]);
                let mut wm_err = 0.0;
                let mut cv_err = 0.0;
                for k in 0..h {
                    let t = &ep[pivot + 1 + k].0;
                    let p = &r.states[k];
                    wm_err += ((p.0[EGO_X] - t.0[EGO_X]).powi(2) + (p.0[EGO_Y] - t.0[EGO_Y]).powi(2)).sqrt();
                    let cx = x + v * yaw.cos() * 0.1 * (k + 1) as f64;
                    let cy = y + v * yaw.sin() * 0.1 * (k + 1) as f64;
                    cv_err += ((cx - t.0[EGO_X]).powi(2) + (cy - t.0[EGO_Y]).powi(2)).sqrt();
                }
                wm_err /= h as f64;
                cv_err /= h as f64;
                total += 1;
                if wm_err < cv_err {
                    wins += 1;
                }
                if dynamic {
                    dyn_cv += cv_err;
                    dyn_wm += wm_err;
                    n_dyn += 1;
                } else {
                    cruise_cv += cv_err;
                    cruise_wm += wm_err;
                    n_cruise += 1;
                }
                t0 += 5;
            }
        }
        eprintln!("windows {total}, wm wins {wins} ({:.1}%)", 100.0 * wins as f64 / total as f64);
        eprintln!(
            "cruise ({n_cruise}): CV {:.3} vs WM {:.3} | dynamic ({n_dyn}): CV {:.3} vs WM {:.3}",
            cruise_cv / n_cruise.max(1) as f64,
            cruise_wm / n_cruise.max(1) as f64,
            dyn_cv / n_dyn.max(1) as f64,
            dyn_wm / n_dyn.max(1) as f64
        );
    }
}

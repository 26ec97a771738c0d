//! World-model parameters: tensor container, seeded initialization, and the
//! versioned checkpoint format (layout-checked on load).

use crate::state::{NormStats, LAYOUT_VERSION, STATE_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

pub const ACTION_DIM: usize = 3;
/// Ego + road block plus engineered kinematic terms feed the ego token.
pub const EGO_TOKEN_IN: usize = EGO_RAW_IN + KINEMATIC_AUX;
pub const EGO_RAW_IN: usize = 15;
/// cos(yaw), sin(yaw), and the one-step position advance in normalized
/// units: the decoder can then read position residuals almost linearly.
pub const KINEMATIC_AUX: usize = 4;
/// Per-neighbor features feed a neighbor token.
pub const NB_TOKEN_IN: usize = 6;
pub const LOGVAR_LO: f64 = -6.0;
pub const LOGVAR_HI: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmConfig {
    pub d_token: usize,
    pub d_attn: usize,
    pub d_act: usize,
    pub d_hidden: usize,
    pub d_z: usize,
    pub post_hidden: usize,
    pub prior_hidden: usize,
    pub dec_hidden: usize,
    pub dec_hidden2: usize,
    /// Rollout horizon in control steps.
    pub horizon: usize,
    /// Observed warmup steps per training window.
    pub warmup: usize,
    /// Discount on per-step prediction errors.
    pub gamma: f64,
    /// Latent regularization weight.
    pub lambda: f64,
    /// Per-step KL floor in nats.
    pub free_bits: f64,
    /// Force z to the posterior mean during training (ablation switch).
    pub deterministic_latent: bool,
    /// Conditioning constants for the kinematic input terms:
    /// [yaw_mean, yaw_scale, speed_mean, speed_scale, x_scale, y_scale, dt].
    /// None disables the terms (they read zero).
    pub cond: Option<[f64; 7]>,
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            d_token: 32,
            d_attn: 64,
            d_act: 16,
            d_hidden: 128,
            d_z: 32,
            post_hidden: 64,
            prior_hidden: 64,
            dec_hidden: 192,
            dec_hidden2: 128,
            horizon: 10,
            warmup: 4,
            gamma: 0.95,
            lambda: 1.0,
            free_bits: 0.3,
            deterministic_latent: false,
            cond: None,
        }
    }
}

impl WmConfig {
    /// Shrunk dimensions for fast tests.
    pub fn tiny() -> Self {
        Self {
            d_token: 16,
            d_attn: 16,
            d_act: 8,
            d_hidden: 32,
            d_z: 8,
            post_hidden: 24,
            prior_hidden: 24,
            dec_hidden: 64,
            dec_hidden2: 48,
            ..Self::default()
        }
    }

    pub fn x_dim(&self) -> usize {
        self.d_token + self.d_attn
    }

    pub fn gru_in(&self) -> usize {
        self.x_dim() + self.d_act + self.d_z
    }

    pub fn post_in(&self) -> usize {
        self.x_dim() + self.d_hidden
    }

    pub fn dec_in(&self) -> usize {
        // skip connection: the decoder reads the ego/road block (plus the
        // kinematic terms) directly alongside the belief
        self.d_hidden + self.d_z + ACTION_DIM + EGO_TOKEN_IN
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Self { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

macro_rules! wm_tensors {
    ($($field:ident),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct WMParams {
            pub cfg: WmConfig,
            $(pub $field: Tensor,)*
        }

        impl WMParams {
            pub fn tensor_names() -> &'static [&'static str] {
                &[$(stringify!($field)),*]
            }

            pub fn tensors(&self) -> Vec<&Tensor> {
                vec![$(&self.$field),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$field),*]
            }
        }
    };
}

wm_tensors!(
    ego_emb_w, ego_emb_b, nb_emb_w, nb_emb_b, attn_q, attn_k, attn_v, act_emb_w, act_emb_b,
    gru_wz, gru_uz, gru_bz, gru_wr, gru_ur, gru_br, gru_wc, gru_uc, gru_bc, post_w1, post_b1,
    post_w2, post_b2, prior_w1, prior_b1, prior_w2, prior_b2, dec_w1, dec_b1, dec_w2, dec_b2,
    dec_w3, dec_b3,
);

/// Tensor indices in `WMParams::tensors()` order.
pub mod tidx {
    pub const EGO_EMB_W: usize = 0;
    pub const EGO_EMB_B: usize = 1;
    pub const NB_EMB_W: usize = 2;
    pub const NB_EMB_B: usize = 3;
    pub const ATTN_Q: usize = 4;
    pub const ATTN_K: usize = 5;
    pub const ATTN_V: usize = 6;
    pub const ACT_EMB_W: usize = 7;
    pub const ACT_EMB_B: usize = 8;
    pub const GRU_WZ: usize = 9;
    pub const GRU_UZ: usize = 10;
    pub const GRU_BZ: usize = 11;
    pub const GRU_WR: usize = 12;
    pub const GRU_UR: usize = 13;
    pub const GRU_BR: usize = 14;
    pub const GRU_WC: usize = 15;
    pub const GRU_UC: usize = 16;
    pub const GRU_BC: usize = 17;
    pub const POST_W1: usize = 18;
    pub const POST_B1: usize = 19;
    pub const POST_W2: usize = 20;
    pub const POST_B2: usize = 21;
    pub const PRIOR_W1: usize = 22;
    pub const PRIOR_B1: usize = 23;
    pub const PRIOR_W2: usize = 24;
    pub const PRIOR_B2: usize = 25;
    pub const DEC_W1: usize = 26;
    pub const DEC_B1: usize = 27;
    pub const DEC_W2: usize = 28;
    pub const DEC_B2: usize = 29;
    pub const DEC_W3: usize = 30;
    pub const DEC_B3: usize = 31;
}

impl WMParams {
    pub fn init(cfg: WmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut p = Self {
            ego_emb_w: Tensor::xavier(cfg.d_token, EGO_TOKEN_IN, r),
            ego_emb_b: Tensor::zeros(cfg.d_token, 1),
            nb_emb_w: Tensor::xavier(cfg.d_token, NB_TOKEN_IN, r),
            nb_emb_b: Tensor::zeros(cfg.d_token, 1),
            attn_q: Tensor::xavier(cfg.d_attn, cfg.d_token, r),
            attn_k: Tensor::xavier(cfg.d_attn, cfg.d_token, r),
            attn_v: Tensor::xavier(cfg.d_attn, cfg.d_token, r),
            act_emb_w: Tensor::xavier(cfg.d_act, ACTION_DIM, r),
            act_emb_b: Tensor::zeros(cfg.d_act, 1),
            gru_wz: Tensor::xavier(cfg.d_hidden, cfg.gru_in(), r),
            gru_uz: Tensor::xavier(cfg.d_hidden, cfg.d_hidden, r),
            gru_bz: Tensor::zeros(cfg.d_hidden, 1),
            gru_wr: Tensor::xavier(cfg.d_hidden, cfg.gru_in(), r),
            gru_ur: Tensor::xavier(cfg.d_hidden, cfg.d_hidden, r),
            gru_br: Tensor::zeros(cfg.d_hidden, 1),
            gru_wc: Tensor::xavier(cfg.d_hidden, cfg.gru_in(), r),
            gru_uc: Tensor::xavier(cfg.d_hidden, cfg.d_hidden, r),
            gru_bc: Tensor::zeros(cfg.d_hidden, 1),
            post_w1: Tensor::xavier(cfg.post_hidden, cfg.post_in(), r),
            post_b1: Tensor::zeros(cfg.post_hidden, 1),
            post_w2: Tensor::xavier(2 * cfg.d_z, cfg.post_hidden, r),
            post_b2: Tensor::zeros(2 * cfg.d_z, 1),
            prior_w1: Tensor::xavier(cfg.prior_hidden, cfg.d_hidden, r),
            prior_b1: Tensor::zeros(cfg.prior_hidden, 1),
            prior_w2: Tensor::xavier(2 * cfg.d_z, cfg.prior_hidden, r),
            prior_b2: Tensor::zeros(2 * cfg.d_z, 1),
            dec_w1: Tensor::xavier(cfg.dec_hidden, cfg.dec_in(), r),
            dec_b1: Tensor::zeros(cfg.dec_hidden, 1),
            dec_w2: Tensor::xavier(cfg.dec_hidden2, cfg.dec_hidden, r),
            dec_b2: Tensor::zeros(cfg.dec_hidden2, 1),
            dec_w3: Tensor::xavier(STATE_DIM, cfg.dec_hidden2, r),
            dec_b3: Tensor::zeros(STATE_DIM, 1),
            cfg,
        };
        // start with small latent variances
        let dz = p.cfg.d_z;
        for i in 0..dz {
            p.post_b2.data[dz + i] = -1.0;
            p.prior_b2.data[dz + i] = -1.0;
        }
        p
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("state layout mismatch: file has {found}, expected {expected}")]
    LayoutMismatch { found: String, expected: String },
}

pub const CHECKPOINT_HEADER: &str = "RIA-WM v1";

fn write_f64_line<W: Write>(w: &mut W, key: &str, vals: &[f64]) -> std::io::Result<()> {
    let joined: Vec<String> = vals.iter().map(|v| format!("{:x}", v.to_bits())).collect();
    writeln!(w, "{key} {}", joined.join(" "))
}

fn parse_f64s(text: &str) -> Result<Vec<f64>, CheckpointError> {
    text.split_whitespace()
        .map(|t| {
            u64::from_str_radix(t, 16)
                .map(f64::from_bits)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))
        })
        .collect()
}

/// Write a checkpoint: model config, normalization stats, and every tensor,
/// with f64 bits hex-encoded for exact round-trips.
pub fn save_checkpoint<W: Write>(
    mut w: W,
    params: &WMParams,
    stats: &NormStats,
) -> std::io::Result<()> {
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    writeln!(w, "layout {LAYOUT_VERSION}")?;
    writeln!(w, "config {}", serde_json::to_string(&params.cfg)?)?;
    write_f64_line(&mut w, "stats_mean", &stats.mean)?;
    write_f64_line(&mut w, "stats_scale", &stats.scale)?;
    for (name, t) in WMParams::tensor_names().iter().zip(params.tensors()) {
        write_f64_line(&mut w, &format!("tensor {name} {} {}", t.rows, t.cols), &t.data)?;
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(r: R) -> Result<(WMParams, NormStats), CheckpointError> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != CHECKPOINT_HEADER {
        return Err(CheckpointError::Malformed(format!("bad header {header:?}")));
    }
    let layout = lines.next().transpose()?.unwrap_or_default();
    let found = layout.strip_prefix("layout ").unwrap_or("").to_string();
    if found != LAYOUT_VERSION {
        return Err(CheckpointError::LayoutMismatch { found, expected: LAYOUT_VERSION.into() });
    }
    let cfg_line = lines.next().transpose()?.unwrap_or_default();
    let cfg: WmConfig = serde_json::from_str(
        cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| CheckpointError::Malformed("missing config".into()))?,
    )
    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut stats_mean = None;
    let mut stats_scale = None;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("stats_mean ") {
            stats_mean = Some(parse_f64s(rest)?);
        } else if let Some(rest) = line.strip_prefix("stats_scale ") {
            stats_scale = Some(parse_f64s(rest)?);
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut it = rest.splitn(4, ' ');
            let name = it.next().unwrap_or("").to_string();
            let rows: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| CheckpointError::Malformed("tensor rows".into()))?;
            let cols: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| CheckpointError::Malformed("tensor cols".into()))?;
            let data = parse_f64s(it.next().unwrap_or(""))?;
            if data.len() != rows * cols {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name}: {} values for {rows}x{cols}",
                    data.len()
                )));
            }
            tensors.push((name, Tensor { rows, cols, data }));
        } else {
            return Err(CheckpointError::Malformed(format!("unknown line {line:?}")));
        }
    }

    let mut params = WMParams::init(cfg, 0);
    {
        let names = WMParams::tensor_names();
        let mut slots = params.tensors_mut();
        if tensors.len() != names.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} tensors in file, expected {}",
                tensors.len(),
                names.len()
            )));
        }
        for ((name, t), (expect, slot)) in
            tensors.into_iter().zip(names.iter().zip(slots.iter_mut()))
        {
            if name != *expect {
                return Err(CheckpointError::Malformed(format!(
                    "tensor order: got {name}, expected {expect}"
                )));
            }
            if (t.rows, t.cols) != (slot.rows, slot.cols) {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name}: shape {}x{} vs config {}x{}",
                    t.rows, t.cols, slot.rows, slot.cols
                )));
            }
            **slot = t;
        }
    }
    let stats = NormStats {
        mean: stats_mean.ok_or_else(|| CheckpointError::Malformed("missing stats_mean".into()))?,
        scale: stats_scale
            .ok_or_else(|| CheckpointError::Malformed("missing stats_scale".into()))?,
    };
    if stats.mean.len() != STATE_DIM || stats.scale.len() != STATE_DIM {
        return Err(CheckpointError::Malformed("stats length".into()));
    }
    Ok((params, stats))
}

//! Network definition: audio/IMU encoders, cross-attention fusion, latent
//! projection, symmetric decoders, and every loss term.
//!
//! All forward passes are expressed as tape operations so the composite
//! training objective differentiates end to end, including the path through
//! the robust batch statistics when `detach_stats` is off.

use crate::ndcompute::{Tape, Tensor, TensorId};
use crate::robust::{self, RobustEstimate};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Distance metric for the soft-boundary objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mahalanobis,
    Euclidean,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(Mode::Mahalanobis),
            "euclidean" => Ok(Mode::Euclidean),
            other => Err(Error::Parse(format!("unknown mode '{other}' (expected mahalanobis|euclidean)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token feature width.
    pub d: usize,
    /// Latent ellipsoid dimension.
    pub s: usize,
    /// Audio window length (samples per channel).
    pub l_a: usize,
    /// IMU window length.
    pub l_i: usize,
    /// Intermediate audio conv channel counts; the final conv outputs `d`.
    pub audio_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Consecutive IMU samples grouped into one token.
    pub imu_token_width: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// Covariance regularization (shared between the estimate and penalty).
    pub epsilon: f64,
    pub mode: Mode,
    /// When true, the loss treats mu_z/Sigma_z as constants.
    pub detach_stats: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            s: 32,
            l_a: 8820,
            l_i: 400,
            audio_channels: vec![8, 16, 32, 32, 32],
            kernel: 5,
            stride: 2,
            padding: 2,
            imu_token_width: 4,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 0.001,
            epsilon: 0.001,
            mode: Mode::Mahalanobis,
            detach_stats: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.s < 1 {
            return Err(Error::Contract(format!("d and s must be >= 1 (got d = {}, s = {})", self.d, self.s)));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.alpha3 < 0.0 {
            return Err(Error::Contract("loss weights must be nonnegative".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Contract(format!("epsilon must be positive (got {})", self.epsilon)));
        }
        if self.l_i % self.imu_token_width != 0 {
            return Err(Error::Dimension(format!(
                "IMU window length {} not divisible by token width {}",
                self.l_i, self.imu_token_width
            )));
        }
        if self.audio_token_len() < 1 {
            return Err(Error::Dimension(format!(
                "audio window length {} collapses to zero tokens under {} conv layers",
                self.l_a,
                self.conv_channels().len() - 1
            )));
        }
        Ok(())
    }

    /// Channel sequence through the audio conv stack: 2 -> ... -> d.
    pub fn conv_channels(&self) -> Vec<usize> {
        let mut seq = Vec::with_capacity(self.audio_channels.len() + 2);
        seq.push(2);
        seq.extend_from_slice(&self.audio_channels);
        seq.push(self.d);
        seq
    }

    /// Token-sequence length after the audio conv stack.
    pub fn audio_token_len(&self) -> usize {
        let mut t = self.l_a;
        for _ in 0..self.conv_channels().len() - 1 {
            let padded = t + 2 * self.padding;
            if padded < self.kernel {
                return 0;
            }
            t = (padded - self.kernel) / self.stride + 1;
        }
        t
    }

    pub fn imu_token_len(&self) -> usize {
        self.l_i / self.imu_token_width
    }
}

/// Named trainable tensors in a fixed, deterministic order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Seeded uniform initialization: Kaiming bounds (√(6/fan_in)) for the
    /// ReLU conv stacks, Glorot bounds elsewhere; biases zero, rho set so
    /// softplus(rho) = 1.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let fill = |entries: &mut Vec<(String, Tensor)>, rng: &mut R, name: String, shape: Vec<usize>, bound: f64| {
            let n = shape.iter().product();
            let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            entries.push((name, Tensor::new(shape, values)));
        };
        let kaiming = |entries: &mut Vec<(String, Tensor)>, rng: &mut R, name: String, shape: Vec<usize>, fan_in: usize| {
            fill(entries, rng, name, shape, (6.0 / fan_in as f64).sqrt());
        };
        let weight = |entries: &mut Vec<(String, Tensor)>, rng: &mut R, name: String, shape: Vec<usize>, fan_in: usize| {
            // Glorot with fan_out taken from the leading dimension product
            let fan_out: usize = shape[0] * if shape.len() == 3 { shape[2] } else { 1 };
            fill(entries, rng, name, shape, (6.0 / (fan_in + fan_out) as f64).sqrt());
        };
        let zeros = |entries: &mut Vec<(String, Tensor)>, name: String, shape: Vec<usize>| {
            entries.push((name, Tensor::zeros(shape)));
        };

        let (d, s, k, tok) = (cfg.d, cfg.s, cfg.kernel, cfg.imu_token_width);
        let chans = cfg.conv_channels();
        for i in 0..chans.len() - 1 {
            let (cin, cout) = (chans[i], chans[i + 1]);
            kaiming(&mut entries, rng, format!("audio_enc.conv{i}.w"), vec![cout, cin, k], cin * k);
            zeros(&mut entries, format!("audio_enc.conv{i}.b"), vec![cout]);
        }
        weight(&mut entries, rng, "audio_enc.lstm.w_ih".into(), vec![4 * d, d], d);
        weight(&mut entries, rng, "audio_enc.lstm.w_hh".into(), vec![4 * d, d], d);
        zeros(&mut entries, "audio_enc.lstm.b".into(), vec![4 * d]);

        weight(&mut entries, rng, "imu_enc.lstm0.w_ih".into(), vec![4 * d, tok], tok);
        weight(&mut entries, rng, "imu_enc.lstm0.w_hh".into(), vec![4 * d, d], d);
        zeros(&mut entries, "imu_enc.lstm0.b".into(), vec![4 * d]);
        weight(&mut entries, rng, "imu_enc.lstm1.w_ih".into(), vec![4 * d, d], d);
        weight(&mut entries, rng, "imu_enc.lstm1.w_hh".into(), vec![4 * d, d], d);
        zeros(&mut entries, "imu_enc.lstm1.b".into(), vec![4 * d]);

        for m in ["a", "i"] {
            for p in ["q", "k", "v"] {
                weight(&mut entries, rng, format!("fuse.{p}_{m}.w"), vec![d, d], d);
            }
        }
        for dir in ["ia", "ai"] {
            weight(&mut entries, rng, format!("fuse.{dir}.mlp.w"), vec![d, d], d);
            zeros(&mut entries, format!("fuse.{dir}.mlp.b"), vec![d]);
        }
        weight(&mut entries, rng, "proj.w".into(), vec![s, d], d);
        zeros(&mut entries, "proj.b".into(), vec![s]);

        let rev: Vec<usize> = chans.iter().rev().copied().collect();
        for i in 0..rev.len() - 1 {
            let (cin, cout) = (rev[i], rev[i + 1]);
            kaiming(&mut entries, rng, format!("audio_dec.deconv{i}.w"), vec![cin, cout, k], cin * k);
            zeros(&mut entries, format!("audio_dec.deconv{i}.b"), vec![cout]);
        }
        weight(&mut entries, rng, "imu_dec.lstm.w_ih".into(), vec![4 * d, d], d);
        weight(&mut entries, rng, "imu_dec.lstm.w_hh".into(), vec![4 * d, d], d);
        zeros(&mut entries, "imu_dec.lstm.b".into(), vec![4 * d]);
        weight(&mut entries, rng, "imu_dec.head.w".into(), vec![d, tok], d);
        zeros(&mut entries, "imu_dec.head.b".into(), vec![tok]);

        // softplus(rho) = 1
        entries.push(("rho".into(), Tensor::scalar((std::f64::consts::E - 1.0).ln())));
        ModelParams { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Record every tensor on a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.var(t.clone())))
            .collect();
        BoundParams { ids }
    }

    /// Same, but as constants (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        BoundParams { ids }
    }
}

/// Tape handles of all bound parameters.
pub struct BoundParams {
    pub ids: Vec<(String, TensorId)>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> TensorId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }
}

fn lstm_named(tape: &mut Tape, bp: &BoundParams, prefix: &str, x: TensorId, hidden: usize) -> Result<TensorId> {
    let w_ih = bp.get(&format!("{prefix}.w_ih"));
    let w_hh = bp.get(&format!("{prefix}.w_hh"));
    let b = bp.get(&format!("{prefix}.b"));
    tape.lstm(x, w_ih, w_hh, b, hidden)
}

/// Audio CRNN encoder: strided convs with ReLU, then one LSTM.
/// Returns (token sequence [T_a×d], pooled z_A [d]).
pub fn encode_audio(tape: &mut Tape, bp: &BoundParams, cfg: &ModelConfig, audio: &[f64]) -> Result<(TensorId, TensorId)> {
    if audio.len() != cfg.l_a * 2 {
        return Err(Error::Dimension(format!(
            "audio window has {} values, expected {}×2 = {}",
            audio.len(),
            cfg.l_a,
            cfg.l_a * 2
        )));
    }
    let mut x = tape.constant(Tensor::new(vec![cfg.l_a, 2], audio.to_vec()));
    let chans = cfg.conv_channels();
    for i in 0..chans.len() - 1 {
        let w = bp.get(&format!("audio_enc.conv{i}.w"));
        let b = bp.get(&format!("audio_enc.conv{i}.b"));
        let y = tape.conv1d(x, w, b, cfg.stride, cfg.padding)?;
        x = tape.relu(y);
    }
    let tokens = lstm_named(tape, bp, "audio_enc.lstm", x, cfg.d)?;
    let z_a = tape.mean_axis0(tokens)?;
    Ok((tokens, z_a))
}

/// IMU encoder: reshape to tokens, two stacked LSTM layers.
/// Returns (token sequence [T_i×d], pooled z_I [d]).
pub fn encode_imu(tape: &mut Tape, bp: &BoundParams, cfg: &ModelConfig, imu: &[f64]) -> Result<(TensorId, TensorId)> {
    if imu.len() != cfg.l_i {
        return Err(Error::Dimension(format!(
            "IMU window has {} values, expected {}",
            imu.len(),
            cfg.l_i
        )));
    }
    let t_i = cfg.imu_token_len();
    let x = tape.constant(Tensor::new(vec![t_i, cfg.imu_token_width], imu.to_vec()));
    let h0 = lstm_named(tape, bp, "imu_enc.lstm0", x, cfg.d)?;
    let tokens = lstm_named(tape, bp, "imu_enc.lstm1", h0, cfg.d)?;
    let z_i = tape.mean_axis0(tokens)?;
    Ok((tokens, z_i))
}

fn attend(
    tape: &mut Tape,
    cfg: &ModelConfig,
    queries: TensorId,
    keys: TensorId,
    values: TensorId,
    mlp_w: TensorId,
    mlp_b: TensorId,
) -> Result<TensorId> {
    let kt = tape.transpose(keys)?;
    let scores = tape.matmul(queries, kt)?;
    let scaled = tape.scale(scores, 1.0 / (cfg.d as f64).sqrt());
    let attn = tape.softmax(scaled, 1)?;
    let attended = tape.matmul(attn, values)?;
    let dense = tape.matmul(attended, mlp_w)?;
    let dense = tape.row_bcast_add(dense, mlp_b)?;
    let seq = tape.add(attended, dense)?;
    tape.mean_axis0(seq)
}

/// Bidirectional cross-attention between token sequences.
/// Returns (z_AI, z_IA), each a length-d vector.
pub fn cross_attention_fuse(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelConfig,
    tokens_a: TensorId,
    tokens_i: TensorId,
) -> Result<(TensorId, TensorId)> {
    let proj = |tape: &mut Tape, tokens: TensorId, name: &str| -> Result<TensorId> {
        tape.matmul(tokens, bp.get(name))
    };
    let q_a = proj(tape, tokens_a, "fuse.q_a.w")?;
    let k_a = proj(tape, tokens_a, "fuse.k_a.w")?;
    let v_a = proj(tape, tokens_a, "fuse.v_a.w")?;
    let q_i = proj(tape, tokens_i, "fuse.q_i.w")?;
    let k_i = proj(tape, tokens_i, "fuse.k_i.w")?;
    let v_i = proj(tape, tokens_i, "fuse.v_i.w")?;
    let z_ia = attend(tape, cfg, q_a, k_i, v_i, bp.get("fuse.ia.mlp.w"), bp.get("fuse.ia.mlp.b"))?;
    let z_ai = attend(tape, cfg, q_i, k_a, v_a, bp.get("fuse.ai.mlp.w"), bp.get("fuse.ai.mlp.b"))?;
    Ok((z_ai, z_ia))
}

/// z = W_M (z_AI + z_IA) + b.
pub fn project_latent(tape: &mut Tape, bp: &BoundParams, z_ai: TensorId, z_ia: TensorId) -> Result<TensorId> {
    let summed = tape.add(z_ai, z_ia)?;
    let mapped = tape.matvec(bp.get("proj.w"), summed)?;
    tape.add(mapped, bp.get("proj.b"))
}

/// Decoders, symmetric to the encoders.
/// Returns (audio reconstruction [L_A×2], IMU reconstruction [L_I]).
pub fn decode(tape: &mut Tape, bp: &BoundParams, cfg: &ModelConfig, z_a: TensorId, z_i: TensorId) -> Result<(TensorId, TensorId)> {
    // audio: broadcast the latent to T_a tokens, mirror the conv stack
    let t_a = cfg.audio_token_len();
    let mut x = tape.repeat_rows(z_a, t_a)?;
    let n_layers = cfg.conv_channels().len() - 1;
    for i in 0..n_layers {
        let w = bp.get(&format!("audio_dec.deconv{i}.w"));
        let b = bp.get(&format!("audio_dec.deconv{i}.b"));
        let y = tape.deconv1d(x, w, b, cfg.stride, cfg.padding)?;
        x = if i + 1 < n_layers { tape.relu(y) } else { y };
    }
    let a_hat = tape.crop_pad_rows(x, cfg.l_a)?;

    // IMU: LSTM seeded with z_I at every step, dense head per step
    let t_i = cfg.imu_token_len();
    let seed = tape.repeat_rows(z_i, t_i)?;
    let h = lstm_named(tape, bp, "imu_dec.lstm", seed, cfg.d)?;
    let head = tape.matmul(h, bp.get("imu_dec.head.w"))?;
    let head = tape.row_bcast_add(head, bp.get("imu_dec.head.b"))?;
    let i_hat = tape.reshape(head, vec![cfg.l_i])?;
    Ok((a_hat, i_hat))
}

/// Huber reconstruction loss for both modalities.
pub fn reconstruction_loss(tape: &mut Tape, a: TensorId, a_hat: TensorId, i: TensorId, i_hat: TensorId) -> Result<TensorId> {
    let la = tape.huber(a, a_hat)?;
    let li = tape.huber(i, i_hat)?;
    tape.add(la, li)
}

/// Soft-boundary objective R² + (1/N)·Σ max(0, D² − R²), taking the
/// squared distances directly.
pub fn soft_boundary_loss(tape: &mut Tape, d_sq: TensorId, r2: TensorId) -> Result<TensorId> {
    if tape.values(d_sq).is_empty() {
        return Err(Error::Contract("soft-boundary loss over an empty batch".into()));
    }
    let excess = tape.sub_scalar_t(d_sq, r2)?;
    let hinge = tape.relu(excess);
    let mean_hinge = tape.mean(hinge)?;
    tape.add(r2, mean_hinge)
}

/// Mahalanobis soft-boundary loss over precomputed squared distances.
pub fn msvdd_loss(tape: &mut Tape, d_sq: TensorId, r2: TensorId) -> Result<TensorId> {
    soft_boundary_loss(tape, d_sq, r2)
}

/// Euclidean ablation: same hinge with D_i = ‖z_i − c‖₂.
pub fn dsvdd_euclidean_loss(tape: &mut Tape, z: TensorId, c: TensorId, r2: TensorId) -> Result<TensorId> {
    let diff = tape.row_bcast_sub(z, c)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.shape(z)[1];
    let ones = tape.constant(Tensor::new(vec![s], vec![1.0; s]));
    let d_sq = tape.matvec(sq, ones)?;
    soft_boundary_loss(tape, d_sq, r2)
}

/// Conditioning penalty on the tape: Σ 1/(σᵢᵢ+ε) + λ_max/(λ_min+ε).
pub fn covariance_penalty(tape: &mut Tape, sigma: TensorId, epsilon: f64) -> Result<TensorId> {
    let diag = tape.diag_part(sigma)?;
    let shifted = tape.add_scalar(diag, epsilon);
    let inv = tape.recip(shifted);
    let diag_term = tape.sum(inv);
    let ext = tape.eigen_extremes(sigma)?;
    let lmin = tape.select(ext, 0)?;
    let lmax = tape.select(ext, 1)?;
    let lmin_e = tape.add_scalar(lmin, epsilon);
    let cond = tape.div(lmax, lmin_e)?;
    tape.add(diag_term, cond)
}

/// Robust-statistics options for one batch.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub h: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Euclidean-mode center; when absent the batch mean is used.
    pub center: Option<Vec<f64>>,
}

/// One window of aligned inputs: audio row-major [L_A×2], IMU [L_I].
pub struct WindowInput<'a> {
    pub audio: &'a [f64],
    pub imu: &'a [f64],
}

/// Values of each loss term and the batch statistics behind them.
#[derive(Debug)]
pub struct LossOutput {
    pub loss: TensorId,
    pub latent: TensorId,
    pub svdd: f64,
    pub rec: f64,
    pub reg: f64,
    pub r2: f64,
    pub estimate: RobustEstimate,
    /// Per-window squared distances under the batch statistics.
    pub d_sq: Vec<f64>,
    /// Per-window reconstruction losses.
    pub rec_per_window: Vec<f64>,
}

/// Composite objective α₁·L_MSVDD + α₂·L_Rec + α₃·L_Reg over a batch
/// (Euclidean mode drops the covariance machinery).
pub fn total_loss(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelConfig,
    batch: &[WindowInput],
    stats: &BatchStats,
) -> Result<LossOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if cfg.mode == Mode::Mahalanobis && n <= cfg.s + 1 {
        return Err(Error::Contract(format!(
            "mahalanobis mode needs batch size > s + 1 = {} (got {n})",
            cfg.s + 1
        )));
    }

    let mut zs = Vec::with_capacity(n);
    let mut recs = Vec::with_capacity(n);
    let mut rec_vals = Vec::with_capacity(n);
    for win in batch {
        let (tokens_a, z_a) = encode_audio(tape, bp, cfg, win.audio)?;
        let (tokens_i, z_i) = encode_imu(tape, bp, cfg, win.imu)?;
        let (a_hat, i_hat) = decode(tape, bp, cfg, z_a, z_i)?;
        let a = tape.constant(Tensor::new(vec![cfg.l_a, 2], win.audio.to_vec()));
        let i = tape.constant(Tensor::new(vec![cfg.l_i], win.imu.to_vec()));
        let rec = reconstruction_loss(tape, a, a_hat, i, i_hat)?;
        rec_vals.push(tape.value_scalar(rec));
        recs.push(rec);
        let (z_ai, z_ia) = cross_attention_fuse(tape, bp, cfg, tokens_a, tokens_i)?;
        zs.push(project_latent(tape, bp, z_ai, z_ia)?);
    }
    let latent = tape.stack_rows(&zs)?;
    let rec_stack = tape.stack_rows(&recs)?;
    let rec_mean = tape.mean(rec_stack)?;

    let rho = bp.get("rho");
    let r2 = tape.softplus(rho);

    let (svdd, reg, estimate, d_sq) = match cfg.mode {
        Mode::Mahalanobis => {
            let zvals = tape.values(latent).to_vec();
            let est = robust::mcd_estimate(&zvals, n, cfg.s, stats.h, cfg.epsilon, stats.restarts, stats.seed)?;
            let (mu, sigma) = if cfg.detach_stats {
                let mu = tape.constant(Tensor::new(vec![cfg.s], est.mu.clone()));
                let sigma = tape.constant(Tensor::new(vec![cfg.s, cfg.s], est.sigma.clone()));
                (mu, sigma)
            } else {
                let zh = tape.gather_rows(latent, &est.subset)?;
                let mu = tape.mean_axis0(zh)?;
                let centered = tape.row_bcast_sub(zh, mu)?;
                let ct = tape.transpose(centered)?;
                let prod = tape.matmul(ct, centered)?;
                let cov = tape.scale(prod, 1.0 / est.subset.len() as f64);
                let eye = Tensor::new(
                    vec![cfg.s, cfg.s],
                    (0..cfg.s * cfg.s)
                        .map(|i| if i % (cfg.s + 1) == 0 { cfg.epsilon } else { 0.0 })
                        .collect(),
                );
                let eps_eye = tape.constant(eye);
                let sigma = tape.add(cov, eps_eye)?;
                (mu, sigma)
            };
            let d_sq = tape.mahalanobis_sq(latent, mu, sigma)?;
            let svdd = soft_boundary_loss(tape, d_sq, r2)?;
            let reg = covariance_penalty(tape, sigma, cfg.epsilon)?;
            let dvals = tape.values(d_sq).to_vec();
            (svdd, Some(reg), est, dvals)
        }
        Mode::Euclidean => {
            let center_vals = match &stats.center {
                Some(c) => {
                    if c.len() != cfg.s {
                        return Err(Error::Dimension(format!(
                            "center has length {}, expected s = {}",
                            c.len(),
                            cfg.s
                        )));
                    }
                    c.clone()
                }
                None => {
                    let zv = tape.values(latent);
                    let mut c = vec![0.0; cfg.s];
                    for row in 0..n {
                        for j in 0..cfg.s {
                            c[j] += zv[row * cfg.s + j];
                        }
                    }
                    for v in c.iter_mut() {
                        *v /= n as f64;
                    }
                    c
                }
            };
            let c = tape.constant(Tensor::new(vec![cfg.s], center_vals.clone()));
            let svdd = dsvdd_euclidean_loss(tape, latent, c, r2)?;
            let est = RobustEstimate::identity(center_vals);
            let zv = tape.values(latent);
            let d_sq = (0..n)
                .map(|row| {
                    (0..cfg.s)
                        .map(|j| (zv[row * cfg.s + j] - est.mu[j]).powi(2))
                        .sum()
                })
                .collect();
            (svdd, None, est, d_sq)
        }
    };

    let t1 = tape.scale(svdd, cfg.alpha1);
    let t2 = tape.scale(rec_mean, cfg.alpha2);
    let mut loss = tape.add(t1, t2)?;
    let mut reg_val = 0.0;
    if let Some(reg) = reg {
        let t3 = tape.scale(reg, cfg.alpha3);
        loss = tape.add(loss, t3)?;
        reg_val = tape.value_scalar(reg);
    }

    Ok(LossOutput {
        loss,
        latent,
        svdd: tape.value_scalar(svdd),
        rec: tape.value_scalar(rec_mean),
        reg: reg_val,
        r2: tape.value_scalar(r2),
        estimate,
        d_sq,
        rec_per_window: rec_vals,
    })
}

/// Inference forward pass for one window with frozen parameters:
/// returns (latent z, reconstruction loss).
pub fn infer_window(tape: &mut Tape, bp: &BoundParams, cfg: &ModelConfig, win: &WindowInput) -> Result<(Vec<f64>, f64)> {
    let (tokens_a, z_a) = encode_audio(tape, bp, cfg, win.audio)?;
    let (tokens_i, z_i) = encode_imu(tape, bp, cfg, win.imu)?;
    let (a_hat, i_hat) = decode(tape, bp, cfg, z_a, z_i)?;
    let a = tape.constant(Tensor::new(vec![cfg.l_a, 2], win.audio.to_vec()));
    let i = tape.constant(Tensor::new(vec![cfg.l_i], win.imu.to_vec()));
    let rec = reconstruction_loss(tape, a, a_hat, i, i_hat)?;
    let (z_ai, z_ia) = cross_attention_fuse(tape, bp, cfg, tokens_a, tokens_i)?;
    let z = project_latent(tape, bp, z_ai, z_ia)?;
    Ok((tape.values(z).to_vec(), tape.value_scalar(rec)))
}

//! Training loop: Adam with a cosine learning-rate schedule, per-batch
//! robust statistics, and finalization into a self-contained artifact.

use crate::model::{self, BatchStats, Mode, ModelConfig, ModelParams, WindowInput};
use crate::ndcompute::Tape;
use crate::robust::{self, RobustEstimate};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    /// Fraction of each batch (and of the final pass) kept by MCD.
    pub h_fraction: f64,
    /// Random restarts for the MCD search.
    pub restarts: usize,
    /// Reconstruction weight in the anomaly score.
    pub w: f64,
    /// Quantile of training scores used as the decision threshold.
    pub quantile: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr0: 1e-4,
            seed: 42,
            h_fraction: 0.75,
            restarts: 10,
            w: 0.01,
            quantile: 0.95,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Contract("epochs and batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Contract(format!("lr0 must be positive (got {})", self.lr0)));
        }
        if !(0.5..=1.0).contains(&self.h_fraction) {
            return Err(Error::Contract(format!(
                "h_fraction must lie in [0.5, 1] (got {})",
                self.h_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.quantile) {
            return Err(Error::Contract(format!("quantile must lie in [0, 1) (got {})", self.quantile)));
        }
        if self.w < 0.0 {
            return Err(Error::Contract(format!("score weight w must be nonnegative (got {})", self.w)));
        }
        Ok(())
    }
}

/// Cosine decay from lr0 at step 0 toward 0 at `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total) as f64) / (total as f64);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ModelParams) -> Self {
        let m = params.entries.iter().map(|(_, t)| vec![0.0; t.values.len()]).collect();
        let v = params.entries.iter().map(|(_, t)| vec![0.0; t.values.len()]).collect();
        Adam { m, v, t: 0 }
    }

    /// Apply one update. `grads[i]` matches `params.entries[i]`; `None`
    /// means zero gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != params.entries.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.entries.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (i, (_, tensor)) in params.entries.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.len() != tensor.values.len() {
                return Err(Error::Dimension(format!(
                    "gradient {} has {} values, parameter has {}",
                    i,
                    g.len(),
                    tensor.values.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in parameter {i}")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g[j];
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                tensor.values[j] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
        Ok(())
    }
}

/// Per-epoch averages for the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub svdd: f64,
    pub rec: f64,
    pub reg: f64,
    pub r2: f64,
}

/// Inference-time statistics packaged with the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactStats {
    /// Robust latent mean, length s.
    pub mu: Vec<f64>,
    /// Regularized robust latent covariance, s×s row-major.
    pub sigma: Vec<f64>,
    /// Mean Mahalanobis distance over training windows.
    pub mu_d: f64,
    /// Mean reconstruction loss over training windows.
    pub mu_rec: f64,
    /// Decision threshold δ* (training-score quantile).
    pub threshold: f64,
    /// trace(Σ_z) before regularization is removed — collapse indicator.
    pub trace_sigma: f64,
}

/// Everything needed to score new windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedArtifact {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    pub stats: ArtifactStats,
}

impl TrainedArtifact {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(self).map_err(|e| Error::Format(format!("artifact serialization: {e}")))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let artifact: TrainedArtifact =
            serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("artifact parse: {e}")))?;
        if artifact.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported artifact format version {} (expected {})",
                artifact.format_version, ARTIFACT_FORMAT_VERSION
            )));
        }
        Ok(artifact)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    /// Reconstruct the estimate backing the stored statistics.
    pub fn estimate(&self) -> Result<RobustEstimate> {
        RobustEstimate::from_parts(self.stats.mu.clone(), self.stats.sigma.clone(), self.model.epsilon)
    }
}

/// Linear-interpolation quantile of unsorted values, q in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Contract(format!("quantile level must lie in [0, 1] (got {q})")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index)
}

/// One aligned training window (audio row-major [L_A×2], IMU [L_I]).
pub type Window = (Vec<f64>, Vec<f64>);

/// Run the full optimization loop. `on_epoch` fires after every epoch with
/// that epoch's averaged terms.
pub fn train(
    windows: &[Window],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelParams, Vec<EpochLog>)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let min_batch = if model_cfg.mode == Mode::Mahalanobis { model_cfg.s + 2 } else { 1 };
    if train_cfg.batch_size < min_batch {
        return Err(Error::Contract(format!(
            "batch_size {} too small for mode (needs >= {min_batch})",
            train_cfg.batch_size
        )));
    }
    if windows.len() < min_batch {
        return Err(Error::Contract(format!(
            "training set has {} windows; need at least {min_batch}",
            windows.len()
        )));
    }

    let mut params = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, 1, 0));
        ModelParams::init(model_cfg, &mut rng)
    };
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, 2, 0));

    // count usable batches per epoch once: partial tails below the mode's
    // floor are dropped
    let usable = |start: usize| {
        let n = (windows.len() - start).min(train_cfg.batch_size);
        n >= min_batch
    };
    let batches_per_epoch = (0..windows.len())
        .step_by(train_cfg.batch_size)
        .filter(|&s| usable(s))
        .count();
    if batches_per_epoch == 0 {
        return Err(Error::Contract("no usable batches (all smaller than the mode's floor)".into()));
    }
    let total_steps = batches_per_epoch * train_cfg.epochs;

    let mut center: Option<Vec<f64>> = None; // euclidean mode, frozen after epoch 1
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // loss, svdd, rec, reg, r2
        let mut last_lr = 0.0;
        let mut epoch_latents: Vec<f64> = Vec::new();
        let mut epoch_latent_rows = 0usize;

        for batch_idx in (0..windows.len()).step_by(train_cfg.batch_size) {
            let idx = &order[batch_idx..(batch_idx + train_cfg.batch_size).min(windows.len())];
            if idx.len() < min_batch {
                continue;
            }
            let batch: Vec<WindowInput> = idx
                .iter()
                .map(|&i| WindowInput { audio: &windows[i].0, imu: &windows[i].1 })
                .collect();
            let h = (train_cfg.h_fraction * idx.len() as f64).ceil() as usize;
            let stats = BatchStats {
                h: h.min(idx.len() - 1).max(model_cfg.s + 1),
                restarts: train_cfg.restarts,
                seed: derive_seed(train_cfg.seed, 3, step as u64),
                center: center.clone(),
            };

            let mut tape = Tape::new();
            let bp = params.bind(&mut tape);
            let out = model::total_loss(&mut tape, &bp, model_cfg, &batch, &stats)?;
            let loss_val = tape.value_scalar(out.loss);
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            let grads = tape.backward(out.loss)?;
            let grad_vec: Vec<Option<Vec<f64>>> = bp
                .ids
                .iter()
                .map(|(_, id)| grads.get(*id).map(|g| g.to_vec()))
                .collect();
            let lr = cosine_lr(train_cfg.lr0, step, total_steps);
            adam.step(&mut params, &grad_vec, lr)?;

            if model_cfg.mode == Mode::Euclidean && center.is_none() {
                epoch_latents.extend_from_slice(tape.values(out.latent));
                epoch_latent_rows += idx.len();
            }

            sums.0 += loss_val;
            sums.1 += out.svdd;
            sums.2 += out.rec;
            sums.3 += out.reg;
            sums.4 += out.r2;
            last_lr = lr;
            step += 1;
        }

        if model_cfg.mode == Mode::Euclidean && center.is_none() && epoch_latent_rows > 0 {
            // freeze the hypersphere center at the epoch-1 mean latent
            let s = model_cfg.s;
            let mut c = vec![0.0; s];
            for row in 0..epoch_latent_rows {
                for j in 0..s {
                    c[j] += epoch_latents[row * s + j];
                }
            }
            c.iter_mut().for_each(|v| *v /= epoch_latent_rows as f64);
            center = Some(c);
        }

        let nb = batches_per_epoch as f64;
        let entry = EpochLog {
            epoch,
            lr: last_lr,
            loss: sums.0 / nb,
            svdd: sums.1 / nb,
            rec: sums.2 / nb,
            reg: sums.3 / nb,
            r2: sums.4 / nb,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    Ok((params, log))
}

/// Forward every window under frozen weights: (latents [M×s], rec losses [M]).
pub fn embed_all(params: &ModelParams, cfg: &ModelConfig, windows: &[Window]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut latents = Vec::with_capacity(windows.len() * cfg.s);
    let mut recs = Vec::with_capacity(windows.len());
    for (audio, imu) in windows {
        let mut tape = Tape::new();
        let bp = params.bind_frozen(&mut tape);
        let (z, rec) = model::infer_window(&mut tape, &bp, cfg, &WindowInput { audio, imu })?;
        latents.extend_from_slice(&z);
        recs.push(rec);
    }
    Ok((latents, recs))
}

/// Fit inference-time statistics and the decision threshold from the full
/// training set, then package the artifact.
pub fn finalize(
    params: ModelParams,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    windows: &[Window],
) -> Result<TrainedArtifact> {
    let m = windows.len();
    let (latents, recs) = embed_all(&params, model_cfg, windows)?;

    let est = match model_cfg.mode {
        Mode::Mahalanobis => {
            let h = ((train_cfg.h_fraction * m as f64).ceil() as usize)
                .max(model_cfg.s + 1)
                .min(m.saturating_sub(1));
            robust::mcd_estimate(
                &latents,
                m,
                model_cfg.s,
                h,
                model_cfg.epsilon,
                train_cfg.restarts,
                derive_seed(train_cfg.seed, 4, 0),
            )?
        }
        Mode::Euclidean => {
            let s = model_cfg.s;
            let mut mu = vec![0.0; s];
            for row in 0..m {
                for j in 0..s {
                    mu[j] += latents[row * s + j];
                }
            }
            mu.iter_mut().for_each(|v| *v /= m as f64);
            RobustEstimate::identity(mu)
        }
    };

    let s = model_cfg.s;
    let dists: Vec<f64> = (0..m).map(|row| robust::mahalanobis(&latents[row * s..(row + 1) * s], &est)).collect();
    let mu_d = dists.iter().sum::<f64>() / m as f64;
    let mu_rec = recs.iter().sum::<f64>() / m as f64;
    if mu_rec == 0.0 {
        return Err(Error::Contract("mean training reconstruction loss is zero; score is undefined".into()));
    }
    let scale = train_cfg.w * mu_d / mu_rec;
    let deltas: Vec<f64> = dists.iter().zip(&recs).map(|(d, r)| d + scale * r).collect();
    let threshold = quantile(&deltas, train_cfg.quantile)?;
    let trace_sigma = (0..s).map(|i| est.sigma[i * s + i]).sum();

    Ok(TrainedArtifact {
        format_version: ARTIFACT_FORMAT_VERSION,
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        params,
        stats: ArtifactStats {
            mu: est.mu,
            sigma: est.sigma,
            mu_d,
            mu_rec,
            threshold,
            trace_sigma,
        },
    })
}

/// Write the per-epoch log as CSV.
pub fn write_log_csv(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("log csv: {e}")))?;
    for entry in log {
        w.serialize(entry).map_err(|e| Error::Format(format!("log csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

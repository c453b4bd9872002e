//! Ingestion (WAV/CSV), preprocessing, window assembly, and a deterministic
//! synthetic telemetry generator with a WAV+CSV+manifest export layout.

use crate::trainer::Window;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const AUDIO_DECIMATION: usize = 10;
pub const SMOOTH_WIDTH: usize = 5;

/// Window label; train data must never carry the anomalous kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Collision,
    Fault,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self != Label::Normal
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Collision => "collision",
            Label::Fault => "fault",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "collision" => Ok(Label::Collision),
            "fault" => Ok(Label::Fault),
            other => Err(Error::Parse(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Per-channel normalization statistics fitted on the training split and
/// reused verbatim for test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub audio_mean: [f64; 2],
    pub audio_std: [f64; 2],
    pub imu_mean: f64,
    pub imu_std: f64,
}

/// One preprocessed window ready for the model.
#[derive(Debug, Clone)]
pub struct DataWindow {
    /// Row-major [L_A×2].
    pub audio: Vec<f64>,
    /// [L_I].
    pub imu: Vec<f64>,
    pub label: Option<Label>,
    pub source: String,
    pub start_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub windows: Vec<DataWindow>,
    pub stats: NormStats,
    pub l_a: usize,
    pub l_i: usize,
}

impl WindowedDataset {
    /// Model-facing views: (windows, anomaly flags where labeled).
    pub fn to_model_windows(&self) -> (Vec<Window>, Vec<Option<bool>>) {
        let windows = self.windows.iter().map(|w| (w.audio.clone(), w.imu.clone())).collect();
        let labels = self.windows.iter().map(|w| w.label.map(Label::is_anomalous)).collect();
        (windows, labels)
    }
}

// ---------------------------------------------------------------------------
// WAV (RIFF, PCM16 / IEEE float32)
// ---------------------------------------------------------------------------

fn read_exact_or(buf: &mut impl Read, out: &mut [u8], what: &str) -> Result<()> {
    buf.read_exact(out)
        .map_err(|_| Error::Format(format!("truncated WAV: unexpected end of file inside {what}")))
}

/// Parse a RIFF/WAVE file. Returns interleaved stereo samples as row-major
/// [n×2] (mono inputs are duplicated) plus the sample rate. 16-bit PCM is
/// scaled by 1/32768; 32-bit IEEE float is taken as-is.
pub fn load_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = std::fs::read(path)?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    let mut r = bytes;
    let mut hdr = [0u8; 12];
    read_exact_or(&mut r, &mut hdr, "RIFF header")?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // codec, channels, rate, bits
    let mut data: Option<Vec<u8>> = None;
    while !r.is_empty() {
        let mut chdr = [0u8; 8];
        if r.len() < 8 {
            break; // trailing padding
        }
        read_exact_or(&mut r, &mut chdr, "chunk header")?;
        let id = [chdr[0], chdr[1], chdr[2], chdr[3]];
        let size = u32::from_le_bytes([chdr[4], chdr[5], chdr[6], chdr[7]]) as usize;
        let mut body = vec![0u8; size];
        read_exact_or(&mut r, &mut body, &format!("'{}' chunk", String::from_utf8_lossy(&id)))?;
        if size % 2 == 1 && !r.is_empty() {
            let mut pad = [0u8; 1];
            read_exact_or(&mut r, &mut pad, "chunk padding")?;
        }
        match &id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("truncated WAV: fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((
                    u16::from_le_bytes([body[0], body[1]]),
                    u16::from_le_bytes([body[2], body[3]]),
                    u32::from_le_bytes([body[4], body[5], body[6], body[7]]),
                    u16::from_le_bytes([body[14], body[15]]),
                ));
            }
            b"data" => data = Some(body),
            _ => {} // LIST, fact, ... are ignored
        }
    }
    let (codec, channels, rate, bits) = fmt.ok_or_else(|| Error::Format("WAV has no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("WAV has no data chunk".into()))?;
    if !(1..=2).contains(&channels) {
        return Err(Error::Format(format!("unsupported channel count {channels} (expected 1 or 2)")));
    }
    let decode = |bytes_per: usize, f: &dyn Fn(&[u8]) -> f64| -> Result<Vec<f64>> {
        if data.len() % (bytes_per * channels as usize) != 0 {
            return Err(Error::Format(format!(
                "truncated WAV: data chunk of {} bytes is not a whole number of {}-channel frames",
                data.len(),
                channels
            )));
        }
        Ok(data.chunks_exact(bytes_per).map(f).collect())
    };
    let flat = match (codec, bits) {
        (1, 16) => decode(2, &|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)?,
        (3, 32) => decode(4, &|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)?,
        (1, other) => return Err(Error::Format(format!("unsupported PCM bit depth {other} (codec tag 1)"))),
        (3, other) => return Err(Error::Format(format!("unsupported float bit depth {other} (codec tag 3)"))),
        (tag, _) => return Err(Error::Format(format!("unsupported WAV codec tag {tag} (only PCM 1 and IEEE float 3)"))),
    };
    let stereo = match channels {
        1 => flat.iter().flat_map(|&v| [v, v]).collect(),
        _ => flat,
    };
    Ok((stereo, rate))
}

/// Write interleaved stereo samples ([n×2] row-major) as 32-bit float WAV.
pub fn write_wav_f32(path: &Path, stereo: &[f64], rate: u32) -> Result<()> {
    if stereo.len() % 2 != 0 {
        return Err(Error::Dimension(format!("stereo buffer has odd length {}", stereo.len())));
    }
    let data_len = (stereo.len() * 4) as u32;
    let mut out = Vec::with_capacity(44 + stereo.len() * 4);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
    out.extend_from_slice(&2u16.to_le_bytes()); // stereo
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2 * 4).to_le_bytes());
    out.extend_from_slice(&8u16.to_le_bytes()); // block align
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in stereo {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV time series
// ---------------------------------------------------------------------------

/// Load one numeric column from a headered CSV with a `timestamp` column.
/// Returns (values, timestamps); timestamps must be strictly increasing.
pub fn load_csv_timeseries(path: &Path, column: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let col_idx = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Format(format!(
                "column '{name}' not found; available columns: {}",
                headers.join(", ")
            ))
        })
    };
    let ti = col_idx("timestamp")?;
    let vi = col_idx(column)?;
    let mut values = Vec::new();
    let mut timestamps = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {}: {e}", row + 2)))?;
        let cell = |i: usize| -> Result<f64> {
            let raw = record
                .get(i)
                .ok_or_else(|| Error::Parse(format!("row {}: missing field {}", row + 2, i + 1)))?;
            raw.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}: '{}' is not numeric", row + 2, raw)))
        };
        let t = cell(ti)?;
        if let Some(&prev) = timestamps.last() {
            if t <= prev {
                return Err(Error::Format(format!(
                    "non-monotone timestamps at row {}: {t} after {prev}",
                    row + 2
                )));
            }
        }
        timestamps.push(t);
        values.push(cell(vi)?);
    }
    Ok((values, timestamps))
}

/// Write an IMU trace as `timestamp,z_velocity` rows at the given rate.
pub fn write_imu_csv(path: &Path, samples: &[f64], rate_hz: u32) -> Result<()> {
    let mut out = String::from("timestamp,z_velocity\n");
    for (i, v) in samples.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i as f64 / rate_hz as f64, v));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Mean over each complete block of `factor`, then stride; the remainder is
/// dropped.
pub fn decimate_boxcar(x: &[f64], factor: usize) -> Vec<f64> {
    x.chunks_exact(factor)
        .map(|block| block.iter().sum::<f64>() / factor as f64)
        .collect()
}

/// Centered moving average; edges use the samples that exist.
pub fn smooth_moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn zscore(x: &mut [f64], mean: f64, std: f64) {
    for v in x.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Raw 2-second capture: audio at the raw rate (row-major [n×2]), IMU at
/// its native rate.
#[derive(Debug, Clone)]
pub struct RawWindow {
    pub audio: Vec<f64>,
    pub imu: Vec<f64>,
    pub label: Label,
    pub split: Split,
    pub source: String,
}

/// Decimate one raw stereo buffer into per-channel streams.
fn decimate_audio(audio: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let left: Vec<f64> = audio.iter().step_by(2).copied().collect();
    let right: Vec<f64> = audio.iter().skip(1).step_by(2).copied().collect();
    (decimate_boxcar(&left, AUDIO_DECIMATION), decimate_boxcar(&right, AUDIO_DECIMATION))
}

/// Fit normalization statistics on decimated training-split windows.
/// Zero-variance channels are a contract error (flat signal).
pub fn fit_stats(raws: &[RawWindow]) -> Result<NormStats> {
    let train: Vec<&RawWindow> = raws.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Contract("cannot fit normalization statistics: no training windows".into()));
    }
    let mut chans: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut imu = Vec::new();
    for r in &train {
        let (l, rr) = decimate_audio(&r.audio);
        chans[0].extend(l);
        chans[1].extend(rr);
        imu.extend_from_slice(&r.imu);
    }
    let mut audio_mean = [0.0; 2];
    let mut audio_std = [0.0; 2];
    for c in 0..2 {
        let (m, s) = mean_std(&chans[c]);
        if s == 0.0 {
            return Err(Error::Contract(format!("audio channel {c} has zero variance (flat signal)")));
        }
        audio_mean[c] = m;
        audio_std[c] = s;
    }
    let (imu_mean, imu_std) = mean_std(&imu);
    if imu_std == 0.0 {
        return Err(Error::Contract("IMU stream has zero variance (flat signal)".into()));
    }
    Ok(NormStats { audio_mean, audio_std, imu_mean, imu_std })
}

/// Decimate, z-score with the given statistics, and smooth one raw window.
pub fn preprocess_window(raw: &RawWindow, stats: &NormStats) -> Result<(Vec<f64>, Vec<f64>)> {
    if raw.audio.len() % 2 != 0 {
        return Err(Error::Dimension(format!("stereo buffer has odd length {}", raw.audio.len())));
    }
    let (mut left, mut right) = decimate_audio(&raw.audio);
    zscore(&mut left, stats.audio_mean[0], stats.audio_std[0]);
    zscore(&mut right, stats.audio_mean[1], stats.audio_std[1]);
    let left = smooth_moving_average(&left, SMOOTH_WIDTH);
    let right = smooth_moving_average(&right, SMOOTH_WIDTH);
    let mut imu = raw.imu.clone();
    zscore(&mut imu, stats.imu_mean, stats.imu_std);
    let imu = smooth_moving_average(&imu, SMOOTH_WIDTH);
    let audio: Vec<f64> = left.iter().zip(&right).flat_map(|(&l, &r)| [l, r]).collect();
    Ok((audio, imu))
}

/// Preprocess a batch of raw windows into a model-ready dataset. Statistics
/// are fitted on the train split unless provided.
pub fn preprocess_dataset(raws: &[RawWindow], stats: Option<NormStats>, split: Option<Split>) -> Result<WindowedDataset> {
    let stats = match stats {
        Some(s) => s,
        None => fit_stats(raws)?,
    };
    let selected: Vec<&RawWindow> = raws
        .iter()
        .filter(|r| split.map_or(true, |s| r.split == s))
        .collect();
    let mut windows = Vec::with_capacity(selected.len());
    let (mut l_a, mut l_i) = (0, 0);
    for (idx, raw) in selected.iter().enumerate() {
        let (audio, imu) = preprocess_window(raw, &stats)?;
        let (wa, wi) = (audio.len() / 2, imu.len());
        if idx == 0 {
            l_a = wa;
            l_i = wi;
        } else if wa != l_a || wi != l_i {
            return Err(Error::Dimension(format!(
                "window '{}' has shape ({wa}, {wi}), expected ({l_a}, {l_i})",
                raw.source
            )));
        }
        windows.push(DataWindow {
            audio,
            imu,
            label: Some(raw.label),
            source: raw.source.clone(),
            start_seconds: 0.0,
        });
    }
    Ok(WindowedDataset { windows, stats, l_a, l_i })
}

/// Cut aligned continuous streams into non-overlapping windows; the
/// trailing remainder is dropped. `audio` is row-major [n×2].
pub fn segment_windows(
    audio: &[f64],
    imu: &[f64],
    l_a: usize,
    l_i: usize,
    source: &str,
    label: Option<Label>,
    window_seconds: f64,
) -> Result<Vec<DataWindow>> {
    if audio.len() % 2 != 0 {
        return Err(Error::Dimension(format!("stereo buffer has odd length {}", audio.len())));
    }
    if l_a == 0 || l_i == 0 {
        return Err(Error::Contract("window lengths must be positive".into()));
    }
    let n_a = audio.len() / 2;
    let k_a = n_a / l_a;
    let k_i = imu.len() / l_i;
    if k_a != k_i {
        return Err(Error::Dimension(format!(
            "stream lengths disagree: audio gives {k_a} windows ({n_a}/{l_a}), IMU gives {k_i} ({}/{l_i})",
            imu.len()
        )));
    }
    Ok((0..k_a)
        .map(|k| DataWindow {
            audio: audio[k * l_a * 2..(k + 1) * l_a * 2].to_vec(),
            imu: imu[k * l_i..(k + 1) * l_i].to_vec(),
            label,
            source: source.to_string(),
            start_seconds: k as f64 * window_seconds,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic telemetry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Training-split normal windows.
    pub train_normal: usize,
    /// Test-split counts per class.
    pub test_normal: usize,
    pub collision: usize,
    pub fault: usize,
    pub audio_rate_hz: u32,
    pub imu_rate_hz: u32,
    pub window_seconds: f64,
    pub noise_floor: f64,
    pub hum_hz: f64,
    pub collision_amp: (f64, f64),
    pub fault_rate_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            train_normal: 120,
            test_normal: 60,
            collision: 30,
            fault: 30,
            audio_rate_hz: 44_100,
            imu_rate_hz: 200,
            window_seconds: 2.0,
            noise_floor: 0.05,
            hum_hz: 120.0,
            collision_amp: (0.5, 1.0),
            fault_rate_hz: 8.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.audio_rate_hz == 0 || self.imu_rate_hz == 0 || self.window_seconds <= 0.0 {
            return Err(Error::Contract("synth rates and window length must be positive".into()));
        }
        if self.audio_rate_hz as usize % AUDIO_DECIMATION != 0 {
            return Err(Error::Contract(format!(
                "audio rate {} not divisible by the decimation factor {AUDIO_DECIMATION}",
                self.audio_rate_hz
            )));
        }
        if self.collision_amp.0 > self.collision_amp.1 || self.collision_amp.0 < 0.0 {
            return Err(Error::Contract(format!(
                "collision amplitude range ({}, {}) is invalid",
                self.collision_amp.0, self.collision_amp.1
            )));
        }
        if self.noise_floor < 0.0 || self.hum_hz < 0.0 || self.fault_rate_hz <= 0.0 {
            return Err(Error::Contract("noise floor, hum, and rattle rate must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn n_audio(&self) -> usize {
        (self.audio_rate_hz as f64 * self.window_seconds).round() as usize
    }

    pub fn n_imu(&self) -> usize {
        (self.imu_rate_hz as f64 * self.window_seconds).round() as usize
    }

    /// Post-preprocessing window lengths implied by this generator.
    pub fn model_lengths(&self) -> (usize, usize) {
        (self.n_audio() / AUDIO_DECIMATION, self.n_imu())
    }
}

fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn synth_window(cfg: &SynthConfig, rng: &mut ChaCha8Rng, label: Label) -> (Vec<f64>, Vec<f64>) {
    let n_a = cfg.n_audio();
    let n_i = cfg.n_imu();
    let fs_a = cfg.audio_rate_hz as f64;
    let fs_i = cfg.imu_rate_hz as f64;

    // normal bed: pink-ish noise (one-pole lowpass mixed with white) plus an
    // engine hum, per channel; IMU carries a low-amplitude vibration line
    let hum_amp = 0.08 + rng.gen_range(-0.01..0.01);
    let hum_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut audio = vec![0.0; n_a * 2];
    for ch in 0..2 {
        let mut lp = 0.0;
        let gain = 1.0 + rng.gen_range(-0.05..0.05f64);
        for t in 0..n_a {
            let white: f64 = rng.gen_range(-1.0..1.0);
            lp = 0.98 * lp + 0.02 * white;
            let noise = cfg.noise_floor * (0.5 * white + 12.0 * lp);
            let hum = hum_amp * (std::f64::consts::TAU * cfg.hum_hz * t as f64 / fs_a + hum_phase).sin();
            audio[t * 2 + ch] = gain * (noise + hum);
        }
    }
    let vib_hz = 27.0 + rng.gen_range(-2.0..2.0);
    let vib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut imu: Vec<f64> = (0..n_i)
        .map(|t| {
            0.02 * (std::f64::consts::TAU * vib_hz * t as f64 / fs_i + vib_phase).sin()
                + 0.008 * rng.gen_range(-1.0..1.0)
        })
        .collect();

    match label {
        Label::Normal => {}
        Label::Collision => {
            // one co-occurring decaying impulse in both modalities
            let amp = rng.gen_range(cfg.collision_amp.0..=cfg.collision_amp.1);
            let t0 = rng.gen_range(0.1..cfg.window_seconds - 0.2);
            let ring_hz = rng.gen_range(600.0..1100.0);
            let i0 = (t0 * fs_a) as usize;
            for t in i0..(i0 + (0.05 * fs_a) as usize).min(n_a) {
                let dt = (t - i0) as f64 / fs_a;
                let burst = amp * (-dt / 0.008).exp() * (std::f64::consts::TAU * ring_hz * dt).sin();
                audio[t * 2] += burst;
                audio[t * 2 + 1] += 0.9 * burst;
            }
            let j0 = (t0 * fs_i) as usize;
            for t in j0..(j0 + (0.3 * fs_i) as usize).min(n_i) {
                let dt = (t - j0) as f64 / fs_i;
                imu[t] += 0.6 * amp * (-dt / 0.06).exp() * (std::f64::consts::TAU * 23.0 * dt).cos();
            }
        }
        Label::Fault => {
            // periodic rattle bursts at the configured rate, both modalities
            let amp = 0.25 + rng.gen_range(-0.05..0.05);
            let jitter = rng.gen_range(0.0..1.0 / cfg.fault_rate_hz);
            let mut t0 = jitter;
            while t0 < cfg.window_seconds {
                let i0 = (t0 * fs_a) as usize;
                for t in i0..(i0 + (0.01 * fs_a) as usize).min(n_a) {
                    let dt = (t - i0) as f64 / fs_a;
                    let click = amp * (-dt / 0.002).exp() * (std::f64::consts::TAU * 1500.0 * dt).sin();
                    audio[t * 2] += click;
                    audio[t * 2 + 1] += click;
                }
                let j0 = (t0 * fs_i) as usize;
                for t in j0..(j0 + (0.08 * fs_i) as usize).min(n_i) {
                    let dt = (t - j0) as f64 / fs_i;
                    imu[t] += 0.35 * amp * (-dt / 0.02).exp();
                }
                t0 += 1.0 / cfg.fault_rate_hz;
            }
        }
    }

    // quantize so the in-memory dataset matches a float32 WAV round trip
    audio.iter_mut().for_each(|v| *v = quantize_f32(*v));
    imu.iter_mut().for_each(|v| *v = quantize_f32(*v));
    (audio, imu)
}

fn window_rng(seed: u64, split: Split, label: Label, index: usize) -> ChaCha8Rng {
    let stream = match (split, label) {
        (Split::Train, _) => 10,
        (Split::Test, Label::Normal) => 20,
        (Split::Test, Label::Collision) => 21,
        (Split::Test, Label::Fault) => 22,
    };
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream * 0x1000_0000)
            .wrapping_add(index as u64),
    )
}

/// Generate raw labeled windows; byte-identical for a fixed config.
pub fn synth_generate_raw(cfg: &SynthConfig) -> Result<Vec<RawWindow>> {
    cfg.validate()?;
    let mut raws = Vec::new();
    let emit = |split: Split, label: Label, count: usize, raws: &mut Vec<RawWindow>| {
        for i in 0..count {
            let mut rng = window_rng(cfg.seed, split, label, i);
            let (audio, imu) = synth_window(cfg, &mut rng, label);
            raws.push(RawWindow {
                audio,
                imu,
                label,
                split,
                source: format!("{}_{}_{i:04}", split.as_str(), label.as_str()),
            });
        }
    };
    emit(Split::Train, Label::Normal, cfg.train_normal, &mut raws);
    emit(Split::Test, Label::Normal, cfg.test_normal, &mut raws);
    emit(Split::Test, Label::Collision, cfg.collision, &mut raws);
    emit(Split::Test, Label::Fault, cfg.fault, &mut raws);
    Ok(raws)
}

/// Generate and preprocess in one step (stats fitted on the train split).
pub fn synth_generate(cfg: &SynthConfig) -> Result<WindowedDataset> {
    let raws = synth_generate_raw(cfg)?;
    preprocess_dataset(&raws, None, None)
}

// ---------------------------------------------------------------------------
// Manifest export / import
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: String,
    pub imu: String,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub audio_rate_hz: u32,
    pub imu_rate_hz: u32,
    pub stats: NormStats,
    pub entries: Vec<ManifestEntry>,
}

/// Write raw windows as per-window WAV + CSV files plus `manifest.json`.
/// Returns the manifest. The stored statistics are fitted on the train
/// split so loaders normalize test data identically.
pub fn export_dataset(dir: &Path, cfg: &SynthConfig, raws: &[RawWindow]) -> Result<Manifest> {
    let stats = fit_stats(raws)?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(raws.len());
    for raw in raws {
        let audio_name = format!("{}.wav", raw.source);
        let imu_name = format!("{}.imu.csv", raw.source);
        write_wav_f32(&dir.join(&audio_name), &raw.audio, cfg.audio_rate_hz)?;
        write_imu_csv(&dir.join(&imu_name), &raw.imu, cfg.imu_rate_hz)?;
        entries.push(ManifestEntry {
            audio: audio_name,
            imu: imu_name,
            label: raw.label,
            split: raw.split,
        });
    }
    let manifest = Manifest {
        audio_rate_hz: cfg.audio_rate_hz,
        imu_rate_hz: cfg.imu_rate_hz,
        stats,
        entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Load one split of an exported dataset, re-running preprocessing with the
/// manifest's stored statistics.
pub fn load_split(manifest_path: &Path, manifest: &Manifest, split: Split) -> Result<WindowedDataset> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut raws = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == split) {
        let (audio, rate) = load_wav(&dir.join(&entry.audio))?;
        if rate != manifest.audio_rate_hz {
            return Err(Error::Format(format!(
                "{}: sample rate {rate} does not match manifest rate {}",
                entry.audio, manifest.audio_rate_hz
            )));
        }
        let (imu, _) = load_csv_timeseries(&dir.join(&entry.imu), "z_velocity")?;
        raws.push(RawWindow {
            audio,
            imu,
            label: entry.label,
            split: entry.split,
            source: entry.audio.trim_end_matches(".wav").to_string(),
        });
    }
    preprocess_dataset(&raws, Some(manifest.stats.clone()), Some(split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn pcm16_scaling_and_mono_duplication() {
        // hand-build a mono PCM16 WAV with samples [-32768, 0, 16384]
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 6).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&44100u32.to_le_bytes());
        bytes.extend_from_slice(&(44100u32 * 2).to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&6u32.to_le_bytes());
        for v in [-32768i16, 0, 16384] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (stereo, rate) = parse_wav(&bytes).unwrap();
        assert_eq!(rate, 44100);
        assert_eq!(stereo, vec![-1.0, -1.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn unsupported_codec_names_the_tag() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&36u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&85u16.to_le_bytes()); // MP3 tag
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&44100u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let err = parse_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("codec tag 85"), "{err}");
    }

    #[test]
    fn truncated_chunk_is_a_format_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 4]); // cut off mid-chunk
        let err = parse_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn float_wav_round_trip_is_bit_exact() {
        let dir = tmp();
        let path = dir.path().join("x.wav");
        let stereo: Vec<f64> = (0..64)
            .map(|i| quantize_f32((i as f64 * 0.37).sin() * 0.8))
            .collect();
        write_wav_f32(&path, &stereo, 44100).unwrap();
        let (back, rate) = load_wav(&path).unwrap();
        assert_eq!(rate, 44100);
        assert_eq!(back, stereo);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tmp();
        let path = dir.path().join("imu.csv");
        let samples = vec![0.125, -0.5, 3e-4];
        write_imu_csv(&path, &samples, 200).unwrap();
        let (vals, ts) = load_csv_timeseries(&path, "z_velocity").unwrap();
        assert_eq!(vals, samples);
        assert_eq!(ts, vec![0.0, 0.005, 0.01]);

        let err = load_csv_timeseries(&path, "missing").unwrap_err().to_string();
        assert!(err.contains("timestamp") && err.contains("z_velocity"), "{err}");

        std::fs::write(&path, "timestamp,z_velocity\n0.0,1.0\n0.005,oops\n").unwrap();
        let err = load_csv_timeseries(&path, "z_velocity").unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");

        std::fs::write(&path, "timestamp,z_velocity\n0.0,1.0\n0.0,2.0\n").unwrap();
        let err = load_csv_timeseries(&path, "z_velocity").unwrap_err().to_string();
        assert!(err.contains("non-monotone"), "{err}");

        // scientific notation == decimal
        std::fs::write(&path, "timestamp,z_velocity\n0.0,2.5e-1\n1.0,0.25\n").unwrap();
        let (vals, _) = load_csv_timeseries(&path, "z_velocity").unwrap();
        assert_eq!(vals[0], vals[1]);
    }

    #[test]
    fn decimation_preserves_block_means() {
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let d = decimate_boxcar(&x, 10);
        assert_eq!(d, vec![4.5, 14.5]); // remainder dropped
        // constant stream stays constant
        assert_eq!(decimate_boxcar(&[3.0; 30], 10), vec![3.0; 3]);
    }

    #[test]
    fn impulse_through_width5_smoother() {
        let mut x = vec![0.0; 11];
        x[5] = 1.0;
        let y = smooth_moving_average(&x, 5);
        for (i, v) in y.iter().enumerate() {
            let want = if (3..=7).contains(&i) { 0.2 } else { 0.0 };
            assert!((v - want).abs() < 1e-15, "index {i}");
        }
    }

    #[test]
    fn segment_window_counts() {
        // 10 s at (4410, 200) -> 5 windows; 9.9 s -> 4 with remainder dropped
        let mk = |secs: f64| {
            let n_a = (4410.0 * secs) as usize;
            let n_i = (200.0 * secs) as usize;
            (vec![0.0; n_a * 2], vec![0.0; n_i])
        };
        let (a, i) = mk(10.0);
        let w = segment_windows(&a, &i, 8820, 400, "s", None, 2.0).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[3].start_seconds, 6.0);
        let (a, i) = mk(9.9);
        assert_eq!(segment_windows(&a, &i, 8820, 400, "s", None, 2.0).unwrap().len(), 4);
        // mismatched durations are rejected
        let (a, _) = mk(10.0);
        let (_, i) = mk(6.0);
        assert!(segment_windows(&a, &i, 8820, 400, "s", None, 2.0).is_err());
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            train_normal: 6,
            test_normal: 4,
            collision: 3,
            fault: 3,
            audio_rate_hz: 4410,
            window_seconds: 1.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let cfg = small_cfg();
        let a = synth_generate_raw(&cfg).unwrap();
        let b = synth_generate_raw(&cfg).unwrap();
        assert_eq!(a.len(), 16);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.audio, y.audio);
            assert_eq!(x.imu, y.imu);
            assert_eq!(x.label, y.label);
        }
        let normals = a.iter().filter(|r| r.label == Label::Normal).count();
        assert_eq!(normals, 10);
        assert_eq!(a.iter().filter(|r| r.split == Split::Train).count(), 6);

        // zero anomaly counts -> all normal
        let cfg0 = SynthConfig { collision: 0, fault: 0, ..small_cfg() };
        let raws = synth_generate_raw(&cfg0).unwrap();
        assert!(raws.iter().all(|r| r.label == Label::Normal));
    }

    #[test]
    fn collision_imu_peak_exceeds_normal_peaks() {
        let cfg = SynthConfig { train_normal: 200, test_normal: 0, collision: 50, fault: 0, ..small_cfg() };
        let raws = synth_generate_raw(&cfg).unwrap();
        let peak = |r: &RawWindow| r.imu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut normal_peaks: Vec<f64> = raws
            .iter()
            .filter(|r| r.label == Label::Normal)
            .map(peak)
            .collect();
        normal_peaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p99 = normal_peaks[(0.99 * (normal_peaks.len() - 1) as f64) as usize];
        for r in raws.iter().filter(|r| r.label == Label::Collision) {
            assert!(peak(r) > p99, "collision peak {} <= normal p99 {p99}", peak(r));
        }
    }

    #[test]
    fn preprocessing_normalizes_training_stream() {
        let cfg = small_cfg();
        let raws = synth_generate_raw(&cfg).unwrap();
        let stats = fit_stats(&raws).unwrap();
        // re-derive the concatenated z-scored training stream and check moments
        let mut all = Vec::new();
        for r in raws.iter().filter(|r| r.split == Split::Train) {
            let (l, _) = decimate_audio(&r.audio);
            all.extend(l.iter().map(|v| (v - stats.audio_mean[0]) / stats.audio_std[0]));
        }
        let (m, s) = mean_std(&all);
        assert!(m.abs() < 1e-9, "mean {m}");
        assert!((s - 1.0).abs() < 1e-6, "std {s}");
    }

    #[test]
    fn flat_signal_is_a_contract_error() {
        let cfg = small_cfg();
        let mut raws = synth_generate_raw(&cfg).unwrap();
        for r in raws.iter_mut() {
            r.imu.iter_mut().for_each(|v| *v = 0.25);
        }
        let err = fit_stats(&raws).unwrap_err().to_string();
        assert!(err.contains("zero variance"), "{err}");
    }

    #[test]
    fn synth_dataset_shapes_and_labels() {
        let cfg = small_cfg();
        let ds = synth_generate(&cfg).unwrap();
        let (l_a, l_i) = cfg.model_lengths();
        assert_eq!((ds.l_a, ds.l_i), (l_a, l_i));
        assert_eq!(ds.windows.len(), 16);
        assert!(ds.windows.iter().all(|w| w.audio.len() == l_a * 2 && w.imu.len() == l_i));
        let (_, labels) = ds.to_model_windows();
        assert_eq!(labels.iter().filter(|l| l.unwrap()).count(), 6);
    }

    #[test]
    fn export_and_reload_round_trip() {
        let dir = tmp();
        let cfg = small_cfg();
        let raws = synth_generate_raw(&cfg).unwrap();
        let manifest = export_dataset(dir.path(), &cfg, &raws).unwrap();
        assert_eq!(manifest.entries.len(), 16);
        let mpath = dir.path().join("manifest.json");
        let loaded = load_manifest(&mpath).unwrap();
        assert_eq!(loaded.stats, manifest.stats);

        // reloaded split matches the in-memory preprocessing exactly
        // (generator output is float32-quantized for this reason)
        let train_mem = preprocess_dataset(&raws, Some(manifest.stats.clone()), Some(Split::Train)).unwrap();
        let train_disk = load_split(&mpath, &loaded, Split::Train).unwrap();
        assert_eq!(train_mem.windows.len(), train_disk.windows.len());
        for (a, b) in train_mem.windows.iter().zip(&train_disk.windows) {
            assert_eq!(a.audio, b.audio);
            assert_eq!(a.imu, b.imu);
        }
    }
}

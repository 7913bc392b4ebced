//! Experiment orchestration: seeded Monte Carlo sweeps over SNR, CFO, block
//! length, training kind and quantizer, with NMSE / CFO-MSE / NSE-CDF metrics
//! and plot-ready CSV outputs.
//!
//! Determinism contract: every trial derives its own RNG from
//! `(master_seed, trial index)`, trials run on a worker pool and are merged
//! by trial index, so identical configs and seeds produce identical metric
//! rows (wall-clock columns aside).

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    gen_sparse_angle_delay, normalization_constant, sample_rays, synthesize_taps, to_angle_delay,
    AngleDelayChannel, ChannelGenParams,
};
use crate::estimators::cfo_estimate;
use crate::kernels::{fro_norm_sq, inner_product, wrap_angle};
use crate::measurement::{forward_factored, observe, snr_to_sigma2, Quantizer};
use crate::pbigamp::{self, GampConfig, Hyperparams};
use crate::phase::{gen_phase_errors, ppm_to_digital, to_spectrum, PhaseParams};
use crate::training::{assemble_f, gen_training, TrainingKind};
use crate::{Error, Result};

/// Channel model used per trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSpec {
    /// Clustered ray model; angle spread given in degrees for config
    /// readability.
    Clustered {
        n_clusters: usize,
        rays_per_cluster: usize,
        angle_spread_deg: f64,
        delay_spread_max: f64,
    },
    /// Exactly sparse on-grid fixture with `nnz` nonzeros.
    Sparse { nnz: usize },
}

/// CFO specification: one explicit digital-domain value, or a sweep over
/// oscillator offsets in ppm of the carrier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CfoSpec {
    #[serde(rename = "eps")]
    Eps(f64),
    #[serde(rename = "ppm")]
    Ppm(Vec<f64>),
}

/// Optional override of the initial prior parameters (the noise variance is
/// always calibrated from the SNR).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorInit {
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub sigma_b2: f64,
    pub sigma_c2: f64,
}

/// Full experiment description; serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(rename = "Nrx")]
    pub nrx: usize,
    #[serde(rename = "Ntx")]
    pub ntx: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "Np")]
    pub np: usize,
    /// Carrier frequency, Hz.
    pub f1: f64,
    /// Symbol period, seconds.
    #[serde(rename = "T")]
    pub symbol_period: f64,
    pub channel: ChannelSpec,
    pub training: TrainingKind,
    pub q: Quantizer,
    pub snr_db: Vec<f64>,
    pub cfo: CfoSpec,
    /// Wiener phase-noise increment standard deviation, radians.
    pub beta: f64,
    pub trials: usize,
    pub solver: GampConfig,
    pub master_seed: u64,
    pub output_path: String,
    /// Per-symbol training power.
    #[serde(default = "default_power")]
    pub power: f64,
    /// Ensemble normalization scale for the clustered model; calibrated when
    /// absent.
    #[serde(default)]
    pub channel_scale: Option<f64>,
    #[serde(default)]
    pub prior: Option<PriorInit>,
    /// NSE below this counts as a successful recovery.
    #[serde(default = "default_nse_threshold")]
    pub nse_success_threshold: f64,
    /// Fraction of best realizations kept by the trimmed aggregates.
    #[serde(default = "default_trim")]
    pub trim_keep_fraction: f64,
    /// Ensemble size used to calibrate `channel_scale`.
    #[serde(default = "default_calibration")]
    pub calibration_size: usize,
}

fn default_power() -> f64 {
    1.0
}
fn default_nse_threshold() -> f64 {
    0.1
}
fn default_trim() -> f64 {
    0.95
}
fn default_calibration() -> usize {
    500
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.nrx == 0 || self.ntx == 0 || self.l == 0 || self.np == 0 {
            return Err(Error::Config("dimensions must be >= 1".into()));
        }
        if self.snr_db.is_empty() {
            return Err(Error::Config("snr_db list must be nonempty".into()));
        }
        if self.l > self.np {
            return Err(Error::Config("L must not exceed Np".into()));
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Override one config key from a `--sweep key=value` element; values are
    /// parsed as JSON with a plain-string fallback.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let map = v
            .as_object_mut()
            .ok_or_else(|| Error::Config("config is not a JSON object".into()))?;
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        map.insert(key.to_string(), parsed);
        let cfg: Self = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One trial's metrics. `wall_ms` is the only nondeterministic column and is
/// kept last so byte-level comparisons can strip it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub trial: usize,
    pub np: usize,
    pub snr_db: f64,
    pub ppm: f64,
    pub eps_true: f64,
    pub training: String,
    pub q: String,
    pub beta: f64,
    pub nmse: f64,
    pub nmse_db: f64,
    pub cfo_se: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub wall_ms: f64,
}

/// Outcome of a full sweep.
pub struct RunSummary {
    pub records: Vec<MetricRecord>,
    pub diverged_trials: usize,
    pub channel_scale: Option<f64>,
}

/// NMSE after the optimal complex rescaling `gamma = <C_hat, C> / ||C_hat||^2`
/// (inner product conjugate-linear in the first argument). An all-zero
/// estimate scores `nmse = 1, gamma = 0`.
pub fn nmse(c_true: &Array2<Complex64>, c_hat: &Array2<Complex64>) -> (f64, Complex64) {
    let true_energy = fro_norm_sq(c_true);
    assert!(true_energy > 0.0, "reference channel must be nonzero");
    let hat_energy = fro_norm_sq(c_hat);
    if hat_energy <= 0.0 {
        return (1.0, Complex64::new(0.0, 0.0));
    }
    let gamma = inner_product(c_hat, c_true) / hat_energy;
    let mut err = 0.0;
    for (t, h) in c_true.iter().zip(c_hat.iter()) {
        err += (t - gamma * h).norm_sqr();
    }
    (err / true_energy, gamma)
}

/// Empirical CDF of the normalized squared errors: sorted values with
/// cumulative fractions.
pub fn nse_cdf(records: &[MetricRecord]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::DegenerateInput("no records".into()));
    }
    let mut values: Vec<f64> = records.iter().map(|r| r.nmse).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len() as f64;
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n))
        .collect())
}

/// Mean over the best `keep` fraction of values (ascending); the outlier-
/// trimmed aggregate. Pure function of the value set.
pub fn trimmed_mean(values: &[f64], keep: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((keep.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

/// Median of a nonempty slice.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn trial_seed(master: u64, trial: usize) -> u64 {
    splitmix64(master ^ splitmix64(trial as u64 + 1))
}

fn clustered_params(cfg: &ExperimentConfig) -> Option<ChannelGenParams> {
    match cfg.channel {
        ChannelSpec::Clustered {
            n_clusters,
            rays_per_cluster,
            angle_spread_deg,
            delay_spread_max,
        } => Some(ChannelGenParams {
            n_clusters,
            rays_per_cluster,
            angle_spread: angle_spread_deg.to_radians(),
            delay_spread_max,
            nrx: cfg.nrx,
            ntx: cfg.ntx,
            taps: cfg.l,
            symbol_period: cfg.symbol_period,
        }),
        ChannelSpec::Sparse { .. } => None,
    }
}

/// Calibrate the ensemble normalization scale for the clustered model.
pub fn calibrate_channel_scale(cfg: &ExperimentConfig) -> Result<Option<f64>> {
    let Some(params) = clustered_params(cfg) else {
        return Ok(None);
    };
    let seed = splitmix64(cfg.master_seed ^ 0xCA11_B4A7_E0CA_1E5C);
    let ensemble: Vec<AngleDelayChannel> = (0..cfg.calibration_size.max(1))
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ i as u64));
            let rays = sample_rays(&params, &mut rng)?;
            to_angle_delay(&synthesize_taps(&rays, &params)?)
        })
        .collect::<Result<_>>()?;
    Ok(Some(normalization_constant(&ensemble)?))
}

fn draw_channel(
    cfg: &ExperimentConfig,
    scale: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<AngleDelayChannel> {
    match cfg.channel {
        ChannelSpec::Sparse { nnz } => gen_sparse_angle_delay(cfg.nrx, cfg.ntx, cfg.l, nnz, rng),
        ChannelSpec::Clustered { .. } => {
            let params = clustered_params(cfg).expect("clustered spec");
            let rays = sample_rays(&params, rng)?;
            let mut c = to_angle_delay(&synthesize_taps(&rays, &params)?)?;
            if let Some(s) = scale {
                c.c.mapv_inplace(|v| v * s);
            }
            Ok(c)
        }
    }
}

fn run_trial(
    cfg: &ExperimentConfig,
    scale: Option<f64>,
    trial: usize,
    snr_db: f64,
    eps: f64,
    ppm: f64,
) -> Result<MetricRecord> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.master_seed, trial));

    let c_true = draw_channel(cfg, scale, &mut rng)?;
    let t = gen_training(cfg.training, cfg.ntx, cfg.np, cfg.power, &mut rng)?;
    let f = assemble_f(&t, cfg.l)?;
    let phase = PhaseParams::new(eps, cfg.beta, cfg.np)?;
    let d = gen_phase_errors(&phase, &mut rng);
    let b_true = to_spectrum(&d)?;
    let z = forward_factored(&c_true, &f, &b_true)?;
    let sigma2 = snr_to_sigma2(&t, snr_db)?;
    let y = observe(&z, sigma2, cfg.q, &mut rng)?;

    let mut hp = Hyperparams::init(cfg.l, sigma2);
    if let Some(p) = cfg.prior {
        hp.lambda_b = p.lambda_b;
        hp.lambda_c = p.lambda_c;
        hp.sigma_b2 = p.sigma_b2;
        hp.sigma_c2 = p.sigma_c2;
    }
    let mut solver_cfg = cfg.solver;
    solver_cfg.init_seed = splitmix64(trial_seed(cfg.master_seed, trial) ^ 0x50_1BE5);

    let (nmse_val, cfo_se, iterations, converged, diverged) =
        match pbigamp::run(&y, &f, &hp, &solver_cfg) {
            Ok(res) => {
                let (nm, _gamma) = nmse(&c_true.c, &res.c_hat);
                let eps_hat =
                    cfo_estimate(&res.b_hat, cfg.beta, sigma2 / cfg.np as f64).unwrap_or(0.0);
                let err = wrap_angle(eps_hat - eps);
                (nm, err * err, res.iterations, res.converged, false)
            }
            Err(Error::Divergence { .. }) => (1.0, eps * eps, cfg.solver.t_max, false, true),
            Err(e) => return Err(e),
        };

    Ok(MetricRecord {
        trial,
        np: cfg.np,
        snr_db,
        ppm,
        eps_true: eps,
        training: cfg.training.to_string(),
        q: cfg.q.to_string(),
        beta: cfg.beta,
        nmse: nmse_val,
        nmse_db: 10.0 * nmse_val.max(1e-40).log10(),
        cfo_se,
        iterations,
        converged,
        diverged,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Run the full sweep. `sink` receives records in deterministic order as
/// sweep points complete, enabling incremental writes.
pub fn run_experiment<F>(cfg: &ExperimentConfig, mut sink: F) -> Result<RunSummary>
where
    F: FnMut(&MetricRecord) -> Result<()>,
{
    cfg.validate()?;
    let scale = match cfg.channel_scale {
        Some(s) => Some(s),
        None => calibrate_channel_scale(cfg)?,
    };

    let cfo_points: Vec<(f64, f64)> = match &cfg.cfo {
        CfoSpec::Eps(e) => {
            let ppm = e / (2.0 * std::f64::consts::PI * 1e-6 * cfg.f1 * cfg.symbol_period);
            vec![(*e, ppm)]
        }
        CfoSpec::Ppm(list) => list
            .iter()
            .map(|&p| Ok((ppm_to_digital(p, cfg.f1, cfg.symbol_period)?, p)))
            .collect::<Result<_>>()?,
    };

    let mut records = Vec::new();
    let mut diverged_trials = 0usize;
    for &snr in &cfg.snr_db {
        for &(eps, ppm) in &cfo_points {
            let mut batch: Vec<MetricRecord> = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| run_trial(cfg, scale, trial, snr, eps, ppm))
                .collect::<Result<_>>()?;
            batch.sort_by_key(|r| r.trial);
            for r in &batch {
                if r.diverged {
                    diverged_trials += 1;
                }
                sink(r)?;
            }
            records.extend(batch);
        }
    }
    Ok(RunSummary { records, diverged_trials, channel_scale: scale })
}

/// Re-run trial 0 of the first sweep point and return the solver trace
/// (diagnostic path behind the CLI `--trace` flag).
pub fn trace_first_trial(cfg: &ExperimentConfig) -> Result<Vec<crate::pbigamp::TraceRow>> {
    cfg.validate()?;
    let scale = match cfg.channel_scale {
        Some(s) => Some(s),
        None => calibrate_channel_scale(cfg)?,
    };
    let snr = cfg.snr_db[0];
    let eps = match &cfg.cfo {
        CfoSpec::Eps(e) => *e,
        CfoSpec::Ppm(p) => ppm_to_digital(
            *p.first().ok_or_else(|| Error::Config("empty ppm list".into()))?,
            cfg.f1,
            cfg.symbol_period,
        )?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.master_seed, 0));
    let c_true = draw_channel(cfg, scale, &mut rng)?;
    let t = gen_training(cfg.training, cfg.ntx, cfg.np, cfg.power, &mut rng)?;
    let f = assemble_f(&t, cfg.l)?;
    let phase = PhaseParams::new(eps, cfg.beta, cfg.np)?;
    let d = gen_phase_errors(&phase, &mut rng);
    let z = forward_factored(&c_true, &f, &to_spectrum(&d)?)?;
    let sigma2 = snr_to_sigma2(&t, snr)?;
    let y = observe(&z, sigma2, cfg.q, &mut rng)?;
    let hp = Hyperparams::init(cfg.l, sigma2);
    let mut solver_cfg = cfg.solver;
    solver_cfg.init_seed = splitmix64(trial_seed(cfg.master_seed, 0) ^ 0x50_1BE5);
    Ok(pbigamp::run(&y, &f, &hp, &solver_cfg)?.trace)
}

/// Write records as CSV (headers included).
pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Run manifest: config echo plus provenance, written next to the records.
#[derive(Serialize)]
pub struct Manifest<'a> {
    pub config: &'a ExperimentConfig,
    pub git_describe: String,
    pub channel_scale: Option<f64>,
    pub records: String,
    pub n_records: usize,
    pub diverged_trials: usize,
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

// ---------------------------------------------------------------------------
// Figure aggregation
// ---------------------------------------------------------------------------

/// One aggregated point of a figure.
#[derive(Debug, Serialize)]
pub struct AggregateRow {
    pub axis: String,
    pub axis_value: f64,
    pub training: String,
    pub q: String,
    pub np: usize,
    pub snr_db: f64,
    pub trials: usize,
    pub median_nmse_db: f64,
    pub trim_mean_nmse_db: f64,
    pub median_cfo_se: f64,
    pub trim_mean_cfo_se: f64,
    pub success_fraction: f64,
}

fn group_key(r: &MetricRecord, axis: &str) -> (String, String, u64, u64, u64) {
    // Group by everything except the axis variable (and the trial).
    let np_key = if axis == "np" { 0 } else { r.np as u64 };
    let snr_key = if axis == "snr_db" { 0 } else { r.snr_db.to_bits() };
    let ppm_key = if axis == "ppm" { 0 } else { r.ppm.to_bits() };
    (r.training.clone(), r.q.clone(), np_key, snr_key, ppm_key)
}

fn axis_value(r: &MetricRecord, axis: &str) -> f64 {
    match axis {
        "np" => r.np as f64,
        "snr_db" => r.snr_db,
        "ppm" => r.ppm,
        _ => f64::NAN,
    }
}

/// Aggregate records along one axis (`np`, `snr_db` or `ppm`), producing one
/// row per (group, axis value) with median and trimmed-mean metrics.
pub fn aggregate(
    records: &[MetricRecord],
    axis: &str,
    trim_keep: f64,
    nse_threshold: f64,
) -> Vec<AggregateRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<((String, String, u64, u64, u64), u64), Vec<&MetricRecord>> =
        BTreeMap::new();
    for r in records {
        let key = (group_key(r, axis), axis_value(r, axis).to_bits());
        groups.entry(key).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((_, axis_bits), group) in groups {
        let nmses: Vec<f64> = group.iter().map(|r| r.nmse).collect();
        let cfos: Vec<f64> = group.iter().map(|r| r.cfo_se).collect();
        let success =
            group.iter().filter(|r| r.nmse < nse_threshold).count() as f64 / group.len() as f64;
        let first = group[0];
        rows.push(AggregateRow {
            axis: axis.to_string(),
            axis_value: f64::from_bits(axis_bits),
            training: first.training.clone(),
            q: first.q.clone(),
            np: first.np,
            snr_db: first.snr_db,
            trials: group.len(),
            median_nmse_db: 10.0 * median(&nmses).max(1e-40).log10(),
            trim_mean_nmse_db: 10.0 * trimmed_mean(&nmses, trim_keep).max(1e-40).log10(),
            median_cfo_se: median(&cfos),
            trim_mean_cfo_se: trimmed_mean(&cfos, trim_keep),
            success_fraction: success,
        });
    }
    rows.sort_by(|a, b| {
        (&a.training, &a.q, a.np, a.snr_db.to_bits(), a.axis_value.to_bits()).cmp(&(
            &b.training,
            &b.q,
            b.np,
            b.snr_db.to_bits(),
            b.axis_value.to_bits(),
        ))
    });
    rows
}

/// Emit the per-figure CSV set from a record set.
pub fn write_figures(
    records: &[MetricRecord],
    out_dir: &Path,
    trim_keep: f64,
    nse_threshold: f64,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let figures: [(&str, &str); 5] = [
        ("nmse_vs_np.csv", "np"),
        ("nmse_vs_snr.csv", "snr_db"),
        ("cfomse_vs_snr.csv", "snr_db"),
        ("cfomse_vs_np.csv", "np"),
        ("nmse_vs_ppm.csv", "ppm"),
    ];
    for (name, axis) in figures {
        let rows = aggregate(records, axis, trim_keep, nse_threshold);
        let mut w = csv::Writer::from_path(out_dir.join(name))?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }

    // NSE CDF per (training, q, np, snr) group.
    #[derive(Serialize)]
    struct CdfRow<'a> {
        training: &'a str,
        q: &'a str,
        np: usize,
        snr_db: f64,
        nse: f64,
        cum_frac: f64,
    }
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String, usize, u64), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.training.clone(), r.q.clone(), r.np, r.snr_db.to_bits()))
            .or_default()
            .push(r);
    }
    let mut w = csv::Writer::from_path(out_dir.join("nse_cdf.csv"))?;
    for ((training, q, np, snr_bits), group) in groups {
        let mut values: Vec<f64> = group.iter().map(|r| r.nmse).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len() as f64;
        for (i, v) in values.iter().enumerate() {
            w.serialize(CdfRow {
                training: &training,
                q: &q,
                np,
                snr_db: f64::from_bits(snr_bits),
                nse: *v,
                cum_frac: (i + 1) as f64 / n,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Resolve the output directory for a run.
pub fn output_dir(cfg: &ExperimentConfig, override_dir: Option<&Path>) -> PathBuf {
    override_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_path))
}

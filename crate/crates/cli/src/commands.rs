//! Subcommand implementations. Each command reads the shared TOML config,
//! works from files on disk, and writes its outputs plus a deterministic
//! manifest into the configured output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use prodmix::diagnostics::{ess, gelman_rubin};
use prodmix::likelihood::PriorSpec;
use prodmix::model::simulate_field;
use prodmix::numeric::quantile_unsorted;
use prodmix::predict::{
    chi_u_many, chi_u_model, posterior_predict, ChiEstimate, PredictConfig, PredictiveDraws,
};
use prodmix::sampler::{
    init_state, param_names, run_chain_segment, ChainState, ChainTrace, Init, SamplerConfig,
    StepSizes,
};
use prodmix::score::{crps_sample, mpe, twcrps_sample, PointPredictor};
use prodmix::{Bounds, CopulaFamily, HyperParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::ingest::{self, IngestedData};
use crate::thresholds::{build_thresholds, site_threshold, ThresholdedData};

/// Marker for configuration and usage mistakes; the binary maps these to
/// exit code 2, everything else to 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Loaded config plus resolved paths, shared by every command.
pub struct Ctx {
    pub cfg: RunConfig,
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
}

impl Ctx {
    /// Loads and validates the config and creates the output directory.
    pub fn load(config_path: &Path) -> Result<Self> {
        let cfg = RunConfig::load(config_path).map_err(usage)?;
        let out_dir = cfg.output.dir.clone();
        fs::create_dir_all(&out_dir)
            .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
        Ok(Self { cfg, config_path: config_path.to_path_buf(), out_dir })
    }
}

// ---------------------------------------------------------------------------
// Small IO helpers
// ---------------------------------------------------------------------------

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .with_context(|| format!("cannot serialize {}", path.display()))?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Writes via a temporary file and rename, so an interrupted run never
/// leaves a truncated checkpoint behind.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    write_json(&tmp, value)?;
    fs::rename(&tmp, path)
        .with_context(|| format!("cannot move {} into place", tmp.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

/// Run provenance: enough to re-execute the command and to detect config
/// drift, with no timestamps so reruns are byte-identical.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub package: String,
    pub version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn write_manifest(
    ctx: &Ctx,
    command: &str,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let config_bytes = fs::read(&ctx.config_path)
        .with_context(|| format!("cannot re-read config {}", ctx.config_path.display()))?;
    let manifest = Manifest {
        command: command.to_string(),
        config: ctx.config_path.display().to_string(),
        config_sha256: sha256_hex(&config_bytes),
        seed,
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&ctx.out_dir.join(format!("manifest-{command}.json")), &manifest)
}

fn fmt_cell(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------------------
// Shared data preparation
// ---------------------------------------------------------------------------

/// Ingested and thresholded inputs shared by `fit`, `predict` and `score`.
pub struct Prepared {
    pub ingested: IngestedData,
    pub thresholded: ThresholdedData,
    pub bounds: Bounds,
    pub priors: PriorSpec,
    pub copula: CopulaFamily,
}

/// Reads the station and observation files, applies the station mask and
/// censoring rule, and resolves bounds and priors.
pub fn prepare_data(ctx: &Ctx) -> Result<Prepared> {
    let terms = ctx.cfg.formula_terms().map_err(usage)?;
    let copula = ctx.cfg.copula().map_err(usage)?;
    let ingested = ingest::ingest(&ctx.cfg.data.stations, &ctx.cfg.data.observations, &terms)?;

    let mut mask = vec![false; ingested.station_ids.len()];
    for id in &ctx.cfg.data.mask_stations {
        match ingested.station_ids.iter().position(|s| s == id) {
            Some(j) => mask[j] = true,
            None => {
                return Err(usage(format!(
                    "data.mask_stations: unknown station id '{id}'"
                )))
            }
        }
    }

    let thresholded = build_thresholds(
        &ingested.raw,
        &ingested.station_ids,
        ctx.cfg.data.censor_quantile,
        ctx.cfg.data.positive_only,
        &mask,
    )?;
    if thresholded.masked.iter().all(|&m| m) {
        bail!("every station is masked or empty; nothing to fit");
    }

    let delta = match ctx.cfg.model.delta {
        Some(d) => d,
        None => ingested.stations.max_distance(),
    };
    let bounds = Bounds::new(ctx.cfg.model.delta1, ctx.cfg.model.delta2, delta).map_err(|e| {
        usage(format!("{e} (set model.delta explicitly when stations are co-located)"))
    })?;

    let mut priors = PriorSpec::default();
    if let Some(v) = ctx.cfg.priors.gamma_var {
        priors.gamma_var = v;
    }
    if let Some(v) = ctx.cfg.priors.beta3_shape {
        priors.beta3_shape = v;
    }
    if let Some(v) = ctx.cfg.priors.beta3_rate {
        priors.beta3_rate = v;
    }
    priors.validate().map_err(|e| usage(format!("priors: {e}")))?;

    Ok(Prepared { ingested, thresholded, bounds, priors, copula })
}

/// The library sampler configuration for one chain of this run.
pub fn sampler_config(ctx: &Ctx, bounds: Bounds, chain: u64) -> SamplerConfig {
    let s = &ctx.cfg.sampler;
    let mut cfg = SamplerConfig::new(bounds, s.iterations, s.burnin, ctx.cfg.chain_seed(chain));
    cfg.batch_size = s.batch_size;
    cfg.mh_interval = s.mh_interval;
    cfg.thin = s.thin;
    cfg.latent_thin = s.latent_thin;
    cfg.adapt_interval = s.adapt_interval;
    cfg
}

fn checkpoint_path(ctx: &Ctx, chain: u64) -> PathBuf {
    ctx.out_dir.join(format!("checkpoint_c{chain}.json"))
}

/// On-disk chain checkpoint: the restartable sampler state plus everything
/// recorded so far. Continuing from it reproduces the uninterrupted run
/// bit for bit.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub state: ChainState,
    pub trace: ChainTrace,
}

fn load_traces(ctx: &Ctx) -> Result<Vec<ChainTrace>> {
    let mut traces = Vec::new();
    for c in 0..ctx.cfg.sampler.chains {
        let path = checkpoint_path(ctx, c);
        if !path.exists() {
            bail!("missing {}; run `prodmix fit` first", path.display());
        }
        let ck: Checkpoint = read_json(&path)?;
        if ck.state.iteration < ck.trace.n_iterations {
            bail!(
                "{} holds an incomplete chain ({} of {} iterations); finish it with \
                 `prodmix fit --resume`",
                path.display(),
                ck.state.iteration,
                ck.trace.n_iterations
            );
        }
        traces.push(ck.trace);
    }
    Ok(traces)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TruthFile<'a> {
    gamma: &'a [f64],
    beta1: f64,
    beta2: f64,
    beta3: f64,
    rho: f64,
    copula: &'a str,
    nu: Option<f64>,
    formula: Vec<String>,
    n_times: usize,
    seed: u64,
}

/// Generates a synthetic observation matrix at the configured stations and
/// writes it to the `data.observations` path (so a subsequent `fit` of the
/// same config ingests it directly), plus the generating parameters.
pub fn simulate(ctx: &Ctx) -> Result<()> {
    let sim = ctx
        .cfg
        .simulate
        .as_ref()
        .ok_or_else(|| usage("config has no [simulate] section"))?;
    let terms = ctx.cfg.formula_terms().map_err(usage)?;
    let copula = ctx.cfg.copula().map_err(usage)?;
    let table = ingest::read_stations(&ctx.cfg.data.stations)?;
    let stations = table.to_station_set(&terms)?;

    let theta = HyperParams {
        gamma: sim.gamma.clone(),
        beta1: sim.beta1,
        beta2: sim.beta2,
        beta3: sim.beta3,
        rho: sim.rho,
        copula,
    };
    theta.validate().map_err(|e| usage(format!("[simulate] parameters: {e}")))?;

    let seed = sim.seed.unwrap_or(ctx.cfg.sampler.seed);
    let field = simulate_field(&theta, &stations, sim.n_times, seed)?;

    let obs_path = &ctx.cfg.data.observations;
    if let Some(parent) = obs_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    ingest::write_observations(obs_path, &table.ids, &field)?;

    let truth_path = ctx.out_dir.join("truth.json");
    write_json(
        &truth_path,
        &TruthFile {
            gamma: &sim.gamma,
            beta1: sim.beta1,
            beta2: sim.beta2,
            beta3: sim.beta3,
            rho: sim.rho,
            copula: &ctx.cfg.model.copula,
            nu: ctx.cfg.model.nu,
            formula: terms.iter().map(|t| t.label()).collect(),
            n_times: sim.n_times,
            seed,
        },
    )?;
    write_manifest(
        ctx,
        "simulate",
        seed,
        &[&ctx.cfg.data.stations],
        &[obs_path, &truth_path],
    )?;
    println!(
        "simulate: {} times × {} stations → {}",
        sim.n_times,
        table.ids.len(),
        obs_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ParamSummary {
    name: String,
    mean: f64,
    sd: f64,
    ci95: [f64; 2],
    ess: f64,
    ess_per_min: Option<f64>,
    rhat: Option<f64>,
}

#[derive(Serialize)]
struct FitSummary {
    iterations: u64,
    burnin: u64,
    chains: u64,
    n_times: usize,
    n_stations: usize,
    masked_stations: Vec<String>,
    n_exceedances: usize,
    n_censored: usize,
    formula: Vec<String>,
    params: Vec<ParamSummary>,
}

fn write_trace_csv(path: &Path, trace: &ChainTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    let mut header = vec!["iteration".to_string()];
    header.extend(trace.param_names.iter().cloned());
    w.write_record(&header)?;
    for (it, row) in trace.iterations.iter().zip(&trace.draws) {
        let mut rec = vec![it.to_string()];
        rec.extend(row.iter().map(|v| fmt_cell(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_thresholds_csv(
    path: &Path,
    ids: &[String],
    thresholded: &ThresholdedData,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["station", "threshold", "masked"])?;
    for (j, id) in ids.iter().enumerate() {
        let thr = thresholded.thresholds[j].map(fmt_cell).unwrap_or_default();
        w.write_record([id.as_str(), &thr, if thresholded.masked[j] { "1" } else { "0" }])?;
    }
    w.flush()?;
    Ok(())
}

/// Post-burn-in draws of one trace column.
fn kept(trace: &ChainTrace, col: usize) -> Vec<f64> {
    trace
        .iterations
        .iter()
        .zip(&trace.draws)
        .filter(|(it, _)| **it > trace.burnin)
        .map(|(_, row)| row[col])
        .collect()
}

fn summarize(ctx: &Ctx, prep: &Prepared, traces: &[ChainTrace]) -> Result<FitSummary> {
    let names = &traces[0].param_names;
    let total_wall_min: f64 = traces.iter().map(|t| t.total_wall_ms).sum::<f64>() / 60_000.0;
    let minutes = ctx.cfg.output.fixed_minutes.unwrap_or(total_wall_min);

    let mut params = Vec::with_capacity(names.len());
    for (col, name) in names.iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = traces.iter().map(|t| kept(t, col)).collect();
        let pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
        if pooled.is_empty() {
            bail!("no post-burn-in draws recorded; lower sampler.burnin or thin");
        }
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let sd = if pooled.len() > 1 {
            (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let ci95 = [quantile_unsorted(&pooled, 0.025), quantile_unsorted(&pooled, 0.975)];
        let ess_total: f64 = per_chain
            .iter()
            .map(|c| ess(c).map(|r| r.ess).unwrap_or(0.0))
            .sum();
        let ess_per_min = if minutes > 0.0 { Some(ess_total / minutes) } else { None };
        let rhat = if per_chain.len() >= 2
            && per_chain.iter().all(|c| c.len() == per_chain[0].len() && c.len() >= 4)
        {
            gelman_rubin(&per_chain).ok()
        } else {
            None
        };
        params.push(ParamSummary {
            name: name.clone(),
            mean,
            sd,
            ci95,
            ess: ess_total,
            ess_per_min,
            rhat,
        });
    }

    let masked_stations: Vec<String> = prep
        .ingested
        .station_ids
        .iter()
        .zip(&prep.thresholded.masked)
        .filter(|(_, &m)| m)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(FitSummary {
        iterations: ctx.cfg.sampler.iterations,
        burnin: ctx.cfg.sampler.burnin,
        chains: ctx.cfg.sampler.chains,
        n_times: prep.ingested.raw.nrows(),
        n_stations: prep.ingested.station_ids.len(),
        masked_stations,
        n_exceedances: prep.thresholded.n_exceedances,
        n_censored: prep.thresholded.n_censored,
        formula: prep.ingested.term_labels.clone(),
        params,
    })
}

/// Runs the configured chains (optionally resuming interrupted ones from
/// their checkpoints), then writes per-chain trace CSVs, checkpoints, the
/// threshold table, and a posterior summary.
pub fn fit(ctx: &Ctx, resume: bool) -> Result<()> {
    let prep = prepare_data(ctx)?;
    let data = &prep.thresholded.dataset;
    let stations = &prep.ingested.stations;
    let names = param_names(stations.n_covariates() + 1);

    let mut traces = Vec::new();
    let mut outputs: Vec<PathBuf> = Vec::new();
    for c in 0..ctx.cfg.sampler.chains {
        let scfg = sampler_config(ctx, prep.bounds, c);
        scfg.validate(data.n_times()).map_err(|e| usage(format!("sampler: {e}")))?;
        let ck_path = checkpoint_path(ctx, c);

        let (mut state, mut trace) = if resume && ck_path.exists() {
            let ck: Checkpoint = read_json(&ck_path)?;
            if ck.trace.n_iterations != scfg.n_iterations || ck.trace.param_names != names {
                bail!(
                    "checkpoint {} was produced under a different configuration",
                    ck_path.display()
                );
            }
            println!(
                "fit: chain {c} resuming at iteration {} of {}",
                ck.state.iteration, scfg.n_iterations
            );
            (ck.state, ck.trace)
        } else {
            let init = Init::from_data(data, stations, &prep.bounds, prep.copula, &prep.priors)?
                .overdispersed(&prep.bounds, c);
            (init_state(data, stations, &prep.priors, &scfg, &init)?,
             ChainTrace::new(names.clone(), &scfg))
        };

        let step = if ctx.cfg.sampler.checkpoint_every == 0 {
            scfg.n_iterations
        } else {
            ctx.cfg.sampler.checkpoint_every
        };
        while state.iteration < scfg.n_iterations {
            let upto = (state.iteration + step).min(scfg.n_iterations);
            run_chain_segment(data, stations, &prep.priors, &scfg, &mut state, &mut trace, upto)?;
            write_json_atomic(&ck_path, &Checkpoint { state: state.clone(), trace: trace.clone() })?;
        }

        let trace_path = ctx.out_dir.join(format!("trace_c{c}.csv"));
        write_trace_csv(&trace_path, &trace)?;
        println!(
            "fit: chain {c} finished {} iterations ({:.1} s)",
            trace.n_iterations,
            trace.total_wall_ms / 1_000.0
        );
        outputs.push(ck_path);
        outputs.push(trace_path);
        traces.push(trace);
    }

    let summary = summarize(ctx, &prep, &traces)?;
    let summary_path = ctx.out_dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    let thr_path = ctx.out_dir.join("thresholds.csv");
    write_thresholds_csv(&thr_path, &prep.ingested.station_ids, &prep.thresholded)?;
    outputs.push(summary_path);
    outputs.push(thr_path);

    let out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(
        ctx,
        "fit",
        ctx.cfg.sampler.seed,
        &[&ctx.cfg.data.stations, &ctx.cfg.data.observations],
        &out_refs,
    )?;
    println!("fit: summary → {}", ctx.out_dir.join("summary.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

/// All cells of held-out (masked) stations, in time-major order.
fn masked_cells(prep: &Prepared) -> Vec<(usize, usize)> {
    let n = prep.ingested.raw.nrows();
    let mut cells = Vec::new();
    for t in 0..n {
        for (j, &m) in prep.thresholded.masked.iter().enumerate() {
            if m {
                cells.push((t, j));
            }
        }
    }
    cells
}

fn predictive_draws(ctx: &Ctx, prep: &Prepared, cells: &[(usize, usize)]) -> Result<PredictiveDraws> {
    let traces = load_traces(ctx)?;
    let pcfg = PredictConfig {
        replicates_per_draw: ctx.cfg.predict.replicates_per_draw,
        seed: ctx.cfg.predict.seed.unwrap_or(ctx.cfg.sampler.seed),
    };
    Ok(posterior_predict(&traces, &prep.ingested.stations, prep.copula, cells, &pcfg)?)
}

/// Posterior-predictive summaries at every cell of the masked stations:
/// ensemble mean, spread, and central 90% interval.
pub fn predict(ctx: &Ctx) -> Result<()> {
    let prep = prepare_data(ctx)?;
    let cells = masked_cells(&prep);
    if cells.is_empty() {
        return Err(usage(
            "no masked stations to predict at; set data.mask_stations".to_string(),
        ));
    }
    let draws = predictive_draws(ctx, &prep, &cells)?;

    let path = ctx.out_dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["time", "station", "mean", "sd", "q05", "median", "q95"])?;
    for (c, &(t, j)) in cells.iter().enumerate() {
        let ens = draws.cell_draws(c);
        let n = ens.len() as f64;
        let mean = ens.iter().sum::<f64>() / n;
        let sd = if ens.len() > 1 {
            (ens.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let (lo, hi) = draws.interval(c, 0.9);
        let median = quantile_unsorted(ens, 0.5);
        w.write_record([
            t.to_string(),
            prep.ingested.station_ids[j].clone(),
            fmt_cell(mean),
            fmt_cell(sd),
            fmt_cell(lo),
            fmt_cell(median),
            fmt_cell(hi),
        ])?;
    }
    w.flush()?;

    write_manifest(
        ctx,
        "predict",
        ctx.cfg.predict.seed.unwrap_or(ctx.cfg.sampler.seed),
        &[&ctx.cfg.data.stations, &ctx.cfg.data.observations],
        &[&path],
    )?;
    println!("predict: {} cells → {}", cells.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct StationScore {
    station: String,
    n_cells: usize,
    weight_mean: f64,
    crps: f64,
    twcrps: f64,
    mpe: f64,
}

#[derive(Serialize)]
struct ScoreFile {
    n_cells: usize,
    predictor: String,
    weight_sd: f64,
    crps: f64,
    twcrps: f64,
    mpe: f64,
    stations: Vec<StationScore>,
}

/// Scores posterior-predictive ensembles at masked stations against the
/// values recorded in the observations file: mean CRPS, mean tail-weighted
/// CRPS (normal-CDF weight centred on each station's own censoring-rule
/// threshold), and mean squared error of the point predictor.
pub fn score(ctx: &Ctx) -> Result<()> {
    let prep = prepare_data(ctx)?;
    let cells = masked_cells(&prep);
    if cells.is_empty() {
        return Err(usage(
            "no masked stations to score; set data.mask_stations".to_string(),
        ));
    }
    let draws = predictive_draws(ctx, &prep, &cells)?;
    let predictor = match ctx.cfg.score.predictor.as_str() {
        "median" => PointPredictor::Median,
        _ => PointPredictor::Mean,
    };
    let weight_sd = ctx.cfg.score.weight_sd;

    // Per masked station: the threshold its own held-out data implies under
    // the configured censoring rule, used as the tail-weight location.
    let d = prep.ingested.station_ids.len();
    let n = prep.ingested.raw.nrows();
    let mut weight_mean = vec![f64::NAN; d];
    for j in 0..d {
        if !prep.thresholded.masked[j] {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|t| prep.ingested.raw[(t, j)]).collect();
        let q = ctx.cfg.data.censor_quantile;
        weight_mean[j] = site_threshold(&col, q, ctx.cfg.data.positive_only)
            .or_else(|| site_threshold(&col, q, false))
            .unwrap_or(f64::NAN);
    }

    struct Acc {
        n: usize,
        crps: f64,
        twcrps: f64,
        points: Vec<f64>,
        truths: Vec<f64>,
    }
    let mut per_site: Vec<Acc> = (0..d)
        .map(|_| Acc { n: 0, crps: 0.0, twcrps: 0.0, points: Vec::new(), truths: Vec::new() })
        .collect();
    for (c, &(t, j)) in cells.iter().enumerate() {
        let y = prep.ingested.raw[(t, j)];
        if y.is_nan() {
            continue; // the held-out station had no recording at this time
        }
        let ens = draws.cell_draws(c);
        let acc = &mut per_site[j];
        acc.n += 1;
        acc.crps += crps_sample(ens, y)?;
        acc.twcrps += twcrps_sample(ens, y, weight_mean[j], weight_sd)?;
        acc.points.push(match predictor {
            PointPredictor::Mean => ens.iter().sum::<f64>() / ens.len() as f64,
            PointPredictor::Median => quantile_unsorted(ens, 0.5),
        });
        acc.truths.push(y);
    }

    let mut stations = Vec::new();
    let (mut n_total, mut crps_total, mut twcrps_total) = (0usize, 0.0, 0.0);
    let (mut all_points, mut all_truths) = (Vec::new(), Vec::new());
    for (j, acc) in per_site.iter().enumerate() {
        if acc.n == 0 {
            continue;
        }
        stations.push(StationScore {
            station: prep.ingested.station_ids[j].clone(),
            n_cells: acc.n,
            weight_mean: weight_mean[j],
            crps: acc.crps / acc.n as f64,
            twcrps: acc.twcrps / acc.n as f64,
            mpe: mpe(&acc.points, &acc.truths)?,
        });
        n_total += acc.n;
        crps_total += acc.crps;
        twcrps_total += acc.twcrps;
        all_points.extend_from_slice(&acc.points);
        all_truths.extend_from_slice(&acc.truths);
    }
    if n_total == 0 {
        bail!("the observations file holds no values at the masked stations; nothing to score");
    }

    let file = ScoreFile {
        n_cells: n_total,
        predictor: ctx.cfg.score.predictor.clone(),
        weight_sd,
        crps: crps_total / n_total as f64,
        twcrps: twcrps_total / n_total as f64,
        mpe: mpe(&all_points, &all_truths)?,
        stations,
    };
    let path = ctx.out_dir.join("scores.json");
    write_json(&path, &file)?;
    write_manifest(
        ctx,
        "score",
        ctx.cfg.predict.seed.unwrap_or(ctx.cfg.sampler.seed),
        &[&ctx.cfg.data.stations, &ctx.cfg.data.observations],
        &[&path],
    )?;
    println!(
        "score: {} cells, CRPS {:.4}, twCRPS {:.4}, MPE {:.4} → {}",
        file.n_cells,
        file.crps,
        file.twcrps,
        file.mpe,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// chi
// ---------------------------------------------------------------------------

fn write_chi_csv(path: &Path, levels: &[f64], estimates: &[ChiEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["level", "chi", "n_cond", "mc_se", "low_count"])?;
    for (u, e) in levels.iter().zip(estimates) {
        w.write_record([
            fmt_cell(*u),
            fmt_cell(e.chi),
            e.n_cond.to_string(),
            fmt_cell(e.mc_se),
            if e.low_count { "1".into() } else { "0".to_string() },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Tail-dependence curve χ(u): either Monte Carlo under explicit model
/// parameters at a given station separation, or empirical from one pair of
/// observed stations.
pub fn chi(ctx: &Ctx) -> Result<()> {
    let chi_cfg = ctx
        .cfg
        .chi
        .as_ref()
        .ok_or_else(|| usage("config has no [chi] section"))?;
    let seed = chi_cfg.seed.unwrap_or(ctx.cfg.sampler.seed);
    let path = ctx.out_dir.join("chi.csv");

    let estimates = match chi_cfg.mode.as_deref().unwrap_or("model") {
        "model" => {
            let copula = ctx.cfg.copula().map_err(usage)?;
            let theta = HyperParams {
                gamma: vec![chi_cfg.gamma0.expect("validated")],
                beta1: chi_cfg.beta1.expect("validated"),
                beta2: chi_cfg.beta2.expect("validated"),
                beta3: chi_cfg.beta3.expect("validated"),
                rho: chi_cfg.rho.expect("validated"),
                copula,
            };
            theta.validate().map_err(|e| usage(format!("[chi] parameters: {e}")))?;
            chi_u_model(
                &theta,
                chi_cfg.separation.expect("validated"),
                &chi_cfg.levels,
                chi_cfg.n_samples,
                seed,
            )?
        }
        _ => {
            let table = ingest::read_stations(&ctx.cfg.data.stations)?;
            let (raw, _) = ingest::read_observations(&ctx.cfg.data.observations, &table.ids)?;
            let col = |id: &str| -> Result<usize> {
                table.ids.iter().position(|s| s == id).ok_or_else(|| {
                    usage(format!("chi.pair: unknown station id '{id}'"))
                })
            };
            let (a, b) = (col(&chi_cfg.pair[0])?, col(&chi_cfg.pair[1])?);
            let mut x = Vec::new();
            let mut y = Vec::new();
            for t in 0..raw.nrows() {
                let (va, vb) = (raw[(t, a)], raw[(t, b)]);
                if !va.is_nan() && !vb.is_nan() {
                    x.push(va);
                    y.push(vb);
                }
            }
            chi_u_many(&x, &y, &chi_cfg.levels)?
        }
    };

    write_chi_csv(&path, &chi_cfg.levels, &estimates)?;
    write_manifest(ctx, "chi", seed, &[&ctx.cfg.data.stations], &[&path])?;
    println!("chi: {} levels → {}", chi_cfg.levels.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// diag
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DiagChain {
    chain: u64,
    accept_correction: [f64; 4],
    accept_x2: f64,
    accept_x3: f64,
    trajectory_aborts: [u64; 4],
    final_steps: StepSizes,
    total_wall_s: f64,
}

#[derive(Serialize)]
struct DiagParam {
    name: String,
    ess_per_chain: Vec<f64>,
    ess: f64,
    rhat: Option<f64>,
}

#[derive(Serialize)]
struct DiagFile {
    iterations: u64,
    burnin: u64,
    chains: Vec<DiagChain>,
    params: Vec<DiagParam>,
}

/// Convergence report over the fitted chains: acceptance rates per block,
/// step sizes, effective sample sizes and split R-hat, plus a pooled
/// post-burn-in trace for external plotting.
pub fn diag(ctx: &Ctx) -> Result<()> {
    let traces = load_traces(ctx)?;
    let chains: Vec<DiagChain> = traces
        .iter()
        .enumerate()
        .map(|(c, t)| DiagChain {
            chain: c as u64,
            accept_correction: t.report.correction.map(|s| s.rate()),
            accept_x2: t.report.x2.rate(),
            accept_x3: t.report.x3.rate(),
            trajectory_aborts: t.report.trajectory_aborts,
            final_steps: t.final_steps,
            total_wall_s: t.total_wall_ms / 1_000.0,
        })
        .collect();

    let names = &traces[0].param_names;
    let mut params = Vec::with_capacity(names.len());
    for (col, name) in names.iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = traces.iter().map(|t| kept(t, col)).collect();
        let ess_per_chain: Vec<f64> =
            per_chain.iter().map(|c| ess(c).map(|r| r.ess).unwrap_or(0.0)).collect();
        let rhat = if per_chain.len() >= 2
            && per_chain.iter().all(|c| c.len() == per_chain[0].len() && c.len() >= 4)
        {
            gelman_rubin(&per_chain).ok()
        } else {
            None
        };
        params.push(DiagParam {
            name: name.clone(),
            ess: ess_per_chain.iter().sum(),
            ess_per_chain,
            rhat,
        });
    }

    let diag_path = ctx.out_dir.join("diag.json");
    write_json(
        &diag_path,
        &DiagFile {
            iterations: traces[0].n_iterations,
            burnin: traces[0].burnin,
            chains,
            params,
        },
    )?;

    // Pooled post-burn-in draws, thinned, with a chain label per row.
    let kept_path = ctx.out_dir.join("trace_kept.csv");
    let mut w = csv::Writer::from_path(&kept_path)
        .with_context(|| format!("cannot create {}", kept_path.display()))?;
    let mut header = vec!["chain".to_string(), "iteration".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    let stride = ctx.cfg.diag.thin.max(1) as usize;
    for (c, trace) in traces.iter().enumerate() {
        for (k, (it, row)) in trace
            .iterations
            .iter()
            .zip(&trace.draws)
            .filter(|(it, _)| **it > trace.burnin)
            .enumerate()
        {
            if k % stride != 0 {
                continue;
            }
            let mut rec = vec![c.to_string(), it.to_string()];
            rec.extend(row.iter().map(|v| fmt_cell(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    write_manifest(
        ctx,
        "diag",
        ctx.cfg.sampler.seed,
        &[],
        &[&diag_path, &kept_path],
    )?;
    println!("diag: {} chains → {}", traces.len(), diag_path.display());
    Ok(())
}

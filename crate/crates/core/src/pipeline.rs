//! Walk-forward orchestration: per forecast date, cut the data at that date,
//! build features and samples on the training window, train the ensemble and
//! forecast every location. Also the persistence baseline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Months, NaiveDate};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectivity::{compute_spc, compute_sph, row_normalize, ConnectivityMatrix, DirectionalWeights};
use crate::data::{
    fit_scaler, rolling_mean_7, smooth_channel, to_rate_per_10k, DateRange, ScalerParams, TimePanel, CASES,
    HOSPITALIZATIONS,
};
use crate::ensemble::{
    aggregate, member_predictions, EnsemblePlan, ForecastInputs, LocationInput, MemberPredictions, MemberSpec,
    PlanShape, QuantileForecast, HORIZON,
};
use crate::error::{Error, Result};
use crate::neural::{train_member, AdamConfig, Checkpoint, Sample, SlstmConfig, SlstmParams, Tensor2, TrainConfig};
use crate::neural::{LONG_WINDOW, SHORT_WINDOW};
use crate::quantiles::LEVELS;

pub const HOSP_RATE: &str = "hosp_rate";
pub const CASE_RATE: &str = "case_rate";
pub const SPH: &str = "sph";
pub const SPC: &str = "spc";

pub const WINDOW_MONTHS: u32 = 15;
pub const MIN_HISTORY: usize = 60;
pub const MIN_LOCATIONS: usize = 5;
/// History needed for the persistence residual quantiles.
pub const PERSISTENCE_MIN_HISTORY: usize = HORIZON + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureToggles {
    pub sph: bool,
    pub spc: bool,
}

impl Default for FeatureToggles {
    fn default() -> Self {
        FeatureToggles { sph: true, spc: false }
    }
}

impl FeatureToggles {
    /// Input channels in network order. SPH keeps its slot when disabled.
    pub fn channels(&self) -> Vec<&'static str> {
        let mut c = vec![HOSP_RATE, CASE_RATE, SPH];
        if self.spc {
            c.push(SPC);
        }
        c
    }

    fn needs_connectivity(&self) -> bool {
        self.sph || self.spc
    }
}

/// The training window ending at `forecast_date`, clipped to the panel
/// start. The flag is true when clipping happened.
pub fn training_window(panel_start: NaiveDate, forecast_date: NaiveDate, months: u32) -> (DateRange, bool) {
    let wanted = forecast_date.checked_sub_months(Months::new(months)).unwrap_or(NaiveDate::MIN);
    if wanted < panel_start {
        (DateRange::new(panel_start, forecast_date), true)
    } else {
        (DateRange::new(wanted, forecast_date), false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSplit {
    /// Lowest, median and highest rate, in that order.
    pub val_locations: Vec<String>,
    pub train_locations: Vec<String>,
}

/// Hold out the locations with the lowest, (lower) median and highest
/// smoothed hospitalization rate at `forecast_date`. Ties go to the smaller id.
pub fn spatial_validation_split(panel: &TimePanel, forecast_date: NaiveDate) -> Result<ValidationSplit> {
    let n = panel.n_locations();
    if n < MIN_LOCATIONS {
        return Err(Error::Invalid(format!("spatial validation needs {MIN_LOCATIONS} locations, got {n}")));
    }
    let t = panel
        .date_index(forecast_date)
        .ok_or_else(|| Error::InsufficientHistory(format!("no data on {forecast_date}")))?;
    let rates = to_rate_per_10k(panel, HOSPITALIZATIONS)?;
    let mut ranked: Vec<(f64, &str)> = panel
        .locations()
        .iter()
        .zip(&rates)
        .map(|(loc, r)| (rolling_mean_7(&r[..=t])[t], loc.id.as_str()))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let picks = [0, (n - 1) / 2, n - 1];
    let val_locations: Vec<String> = picks.iter().map(|&i| ranked[i].1.to_string()).collect();
    let train_locations = panel
        .locations()
        .iter()
        .map(|l| l.id.clone())
        .filter(|id| !val_locations.contains(id))
        .collect();
    Ok(ValidationSplit {
        val_locations,
        train_locations,
    })
}

/// Direction weights ordered like the panel's locations.
pub fn weights_for(panel: &TimePanel, sci: &ConnectivityMatrix) -> Result<DirectionalWeights> {
    let ids: Vec<String> = panel.locations().iter().map(|l| l.id.clone()).collect();
    row_normalize(&sci.reordered(&ids)?)
}

/// Scaled model inputs for one forecast date.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    /// Data up to and including the forecast date, with derived channels.
    pub panel: TimePanel,
    pub forecast_date: NaiveDate,
    pub window: DateRange,
    pub window_truncated: bool,
    pub channels: Vec<&'static str>,
    pub scalers: BTreeMap<String, ScalerParams>,
    /// `[channel][location][date]` in scaled units.
    pub scaled: Vec<Vec<Vec<f64>>>,
}

impl FeatureSet {
    pub fn window_start_index(&self) -> usize {
        self.panel.date_index(self.window.start).unwrap()
    }

    pub fn forecast_index(&self) -> usize {
        self.panel.n_dates() - 1
    }

    pub fn target_scaler(&self) -> &ScalerParams {
        &self.scalers[HOSP_RATE]
    }

    /// `[len × channels]` inputs for a location, ending at date index `end`.
    pub fn input_window(&self, location: usize, end: usize, len: usize) -> Tensor2 {
        let mut x = Tensor2::zeros(len, self.channels.len());
        for (r, t) in (end + 1 - len..=end).enumerate() {
            for c in 0..self.channels.len() {
                x.set(r, c, self.scaled[c][location][t]);
            }
        }
        x
    }
}

/// Smooth, convert to rates, derive spatial features and scale them, using
/// only data up to `forecast_date`. Scalers are fitted on the training window.
pub fn build_features(
    panel: &TimePanel,
    weights: Option<&DirectionalWeights>,
    forecast_date: NaiveDate,
    toggles: FeatureToggles,
    window_months: u32,
) -> Result<FeatureSet> {
    if panel.date_index(forecast_date).is_none() {
        return Err(Error::InsufficientHistory(format!(
            "forecast date {forecast_date} outside data {}..{}",
            panel.start(),
            panel.end()
        )));
    }
    let weights = match (toggles.needs_connectivity(), weights) {
        (true, None) => return Err(Error::Invalid("spatial features need a connectivity matrix".into())),
        (true, Some(w)) if w.len() != panel.n_locations() => {
            return Err(Error::Shape(format!(
                "connectivity has {} locations, panel {}",
                w.len(),
                panel.n_locations()
            )))
        }
        (_, w) => w,
    };
    let mut cut = panel.truncate_to(forecast_date);
    let smoothed_hosp = smooth_channel(cut.channel(HOSPITALIZATIONS)?);
    let smoothed_cases = smooth_channel(cut.channel(CASES)?);
    cut.insert_channel("hospitalizations_smoothed", smoothed_hosp)?;
    cut.insert_channel("cases_smoothed", smoothed_cases)?;
    let hosp_rate = to_rate_per_10k(&cut, "hospitalizations_smoothed")?;
    let case_rate = to_rate_per_10k(&cut, "cases_smoothed")?;
    if toggles.sph {
        cut.insert_channel(SPH, compute_sph(weights.unwrap(), &hosp_rate)?)?;
    }
    if toggles.spc {
        cut.insert_channel(SPC, compute_spc(weights.unwrap(), &case_rate)?)?;
    }
    cut.insert_channel(HOSP_RATE, hosp_rate)?;
    cut.insert_channel(CASE_RATE, case_rate)?;

    let (window, truncated) = training_window(cut.start(), forecast_date, window_months);
    if truncated {
        warn!("{forecast_date}: training window truncated to {}..{}", window.start, window.end);
    }
    let channels = toggles.channels();
    let mut scalers = BTreeMap::new();
    let mut scaled = Vec::with_capacity(channels.len());
    for &ch in &channels {
        if ch == SPH && !toggles.sph {
            scaled.push(vec![vec![0.0; cut.n_dates()]; cut.n_locations()]);
            continue;
        }
        let scaler = fit_scaler(&cut, ch, window)?;
        scaled.push(scaler.apply_rows(cut.channel(ch)?));
        scalers.insert(ch.to_string(), scaler);
    }
    Ok(FeatureSet {
        panel: cut,
        forecast_date,
        window,
        window_truncated: truncated,
        channels,
        scalers,
        scaled,
    })
}

/// Dates a sample touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub location: String,
    pub input_start: NaiveDate,
    pub input_end: NaiveDate,
    pub target_start: NaiveDate,
    pub target_end: NaiveDate,
}

impl SampleMeta {
    pub fn latest(&self) -> NaiveDate {
        self.input_end.max(self.target_end)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemberSamples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub train_meta: Vec<SampleMeta>,
    pub val_meta: Vec<SampleMeta>,
}

/// Training and validation samples for one member. Anchors run backwards
/// from the latest anchor whose targets end on the forecast date, every
/// `stride` days, while the long input window stays inside the training window.
pub fn build_samples(fs: &FeatureSet, split: &ValidationSplit, spec: &MemberSpec, stride: usize) -> Result<MemberSamples> {
    spec.validate()?;
    if stride == 0 {
        return Err(Error::Invalid("sample stride must be positive".into()));
    }
    let first = fs.window_start_index() + LONG_WINDOW - 1;
    let reach = spec.target_offset + spec.horizon_len - 1;
    let mut out = MemberSamples::default();
    let Some(last) = fs.forecast_index().checked_sub(reach) else {
        return Ok(out);
    };
    if last < first {
        return Ok(out);
    }
    let hosp = &fs.scaled[0];
    let anchors: Vec<usize> = (first..=last).rev().step_by(stride).collect();
    for (li, loc) in fs.panel.locations().iter().enumerate() {
        let is_val = split.val_locations.contains(&loc.id);
        if !is_val && !split.train_locations.contains(&loc.id) {
            continue;
        }
        for &t in anchors.iter().rev() {
            let ts = t + spec.target_offset;
            let sample = Sample {
                x_short: fs.input_window(li, t, SHORT_WINDOW),
                x_long: fs.input_window(li, t, LONG_WINDOW),
                target: hosp[li][ts..ts + spec.horizon_len].to_vec(),
            };
            let meta = SampleMeta {
                location: loc.id.clone(),
                input_start: fs.panel.date(t + 1 - LONG_WINDOW),
                input_end: fs.panel.date(t),
                target_start: fs.panel.date(ts),
                target_end: fs.panel.date(ts + spec.horizon_len - 1),
            };
            if is_val {
                out.val.push(sample);
                out.val_meta.push(meta);
            } else {
                out.train.push(sample);
                out.train_meta.push(meta);
            }
        }
    }
    Ok(out)
}

/// Fail if any sample touches a date after `forecast_date`.
pub fn leakage_scan(meta: &[SampleMeta], forecast_date: NaiveDate) -> Result<()> {
    let bad: Vec<String> = meta
        .iter()
        .filter(|m| m.latest() > forecast_date)
        .take(5)
        .map(|m| format!("{} up to {}", m.location, m.latest()))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(format!("forecast date {forecast_date}: {}", bad.join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub lstm_widths: Vec<usize>,
    pub dense_width: usize,
    pub train: TrainConfig,
    pub plan: PlanShape,
    pub seed_base: u64,
    pub features: FeatureToggles,
    pub min_history: usize,
    pub window_months: u32,
    /// Days between consecutive sample anchors.
    pub sample_stride: usize,
    /// Worker threads for member training.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lstm_widths: vec![256, 128, 128, 128],
            dense_width: 64,
            train: TrainConfig::default(),
            plan: PlanShape::FULL,
            seed_base: 0,
            features: FeatureToggles::default(),
            min_history: MIN_HISTORY,
            window_months: WINDOW_MONTHS,
            sample_stride: 1,
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    pub fn plan(&self) -> EnsemblePlan {
        EnsemblePlan::with_shape(self.seed_base, self.plan)
    }

    pub fn architecture(&self, horizon: usize) -> SlstmConfig {
        SlstmConfig {
            input_dim: self.features.channels().len(),
            lstm_widths: self.lstm_widths.clone(),
            dense_width: self.dense_width,
            horizon,
            n_quantiles: LEVELS.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture(HORIZON).validate()?;
        if self.plan.seeds_7 == 0 || self.plan.seeds_14 == 0 || self.plan.seeds_28 == 0 {
            return Err(Error::Invalid("every member subgroup needs at least one seed".into()));
        }
        if self.min_history < LONG_WINDOW + HORIZON {
            return Err(Error::Invalid(format!(
                "min_history {} cannot fit a long window plus a {HORIZON}-day target",
                self.min_history
            )));
        }
        if self.sample_stride == 0 || self.jobs == 0 {
            return Err(Error::Invalid("sample_stride and jobs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub index: usize,
    pub spec: MemberSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
}

/// Everything produced for one forecast date.
#[derive(Debug, Clone)]
pub struct JobResult {
    pub forecast_date: NaiveDate,
    pub window: DateRange,
    pub split: ValidationSplit,
    pub members: BTreeMap<usize, SlstmParams>,
    pub reports: Vec<MemberReport>,
    pub predictions: MemberPredictions,
    pub forecasts: Vec<QuantileForecast>,
    /// Every training and validation sample's dates, for auditing.
    pub sample_meta: Vec<SampleMeta>,
}

fn check_history(panel: &TimePanel, date: NaiveDate, min_history: usize) -> Result<()> {
    match panel.date_index(date) {
        Some(i) if i + 1 >= min_history => Ok(()),
        Some(i) => Err(Error::InsufficientHistory(format!(
            "{date}: {} days of history, need {min_history}",
            i + 1
        ))),
        None => Err(Error::InsufficientHistory(format!(
            "{date} outside data {}..{}",
            panel.start(),
            panel.end()
        ))),
    }
}

/// Scaled inputs for every location at the forecast date.
pub fn forecast_inputs(fs: &FeatureSet) -> ForecastInputs {
    let t = fs.forecast_index();
    ForecastInputs {
        forecast_date: fs.forecast_date,
        locations: fs
            .panel
            .locations()
            .iter()
            .enumerate()
            .map(|(li, loc)| LocationInput {
                location: loc.id.clone(),
                population: loc.population,
                x_short: fs.input_window(li, t, SHORT_WINDOW),
                x_long: fs.input_window(li, t, LONG_WINDOW),
            })
            .collect(),
        target_scaler: fs.target_scaler().clone(),
        levels: LEVELS.to_vec(),
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))
}

/// Train the ensemble for one forecast date and forecast every location.
pub fn run_job(
    panel: &TimePanel,
    weights: Option<&DirectionalWeights>,
    forecast_date: NaiveDate,
    config: &PipelineConfig,
) -> Result<JobResult> {
    config.validate()?;
    check_history(panel, forecast_date, config.min_history)?;
    let fs = build_features(panel, weights, forecast_date, config.features, config.window_months)?;
    let split = spatial_validation_split(&fs.panel, forecast_date)?;
    let plan = config.plan();

    let mut samples = Vec::with_capacity(plan.len());
    let mut sample_meta = Vec::new();
    for spec in &plan.members {
        let s = build_samples(&fs, &split, spec, config.sample_stride)?;
        leakage_scan(&s.train_meta, forecast_date)?;
        leakage_scan(&s.val_meta, forecast_date)?;
        if s.train.is_empty() || s.val.is_empty() {
            return Err(Error::InsufficientHistory(format!(
                "{forecast_date}: no samples for member (horizon {}, offset {})",
                spec.horizon_len, spec.target_offset
            )));
        }
        sample_meta.extend(s.train_meta.iter().cloned());
        sample_meta.extend(s.val_meta.iter().cloned());
        samples.push(s);
    }

    info!("{forecast_date}: training {} members", plan.len());
    let trained: Vec<Result<(SlstmParams, MemberReport)>> = pool(config.jobs)?.install(|| {
        plan.members
            .par_iter()
            .zip(samples.par_iter())
            .enumerate()
            .map(|(index, (spec, s))| {
                let arch = config.architecture(spec.horizon_len);
                let out = train_member(&s.train, &s.val, &arch, &config.train, &LEVELS, spec.seed)?;
                let report = MemberReport {
                    index,
                    spec: spec.clone(),
                    n_train: s.train.len(),
                    n_val: s.val.len(),
                    best_epoch: out.best_epoch,
                    epochs_run: out.epochs_run,
                    best_val_loss: out.best_val_loss,
                };
                Ok((out.params, report))
            })
            .collect()
    });
    let mut members = BTreeMap::new();
    let mut reports = Vec::with_capacity(plan.len());
    for (i, r) in trained.into_iter().enumerate() {
        let (params, report) = r?;
        members.insert(i, params);
        reports.push(report);
    }

    let inputs = forecast_inputs(&fs);
    let predictions = member_predictions(&plan, &members, &inputs)?;
    let forecasts = aggregate(&plan, &predictions, &inputs)?;
    Ok(JobResult {
        forecast_date,
        window: fs.window,
        split,
        members,
        reports,
        predictions,
        forecasts,
        sample_meta,
    })
}

#[derive(Debug, Clone, Default)]
pub struct WalkForward {
    pub jobs: Vec<JobResult>,
    /// Dates without enough history, with the reason.
    pub skipped: Vec<(NaiveDate, String)>,
}

impl WalkForward {
    pub fn forecasts(&self) -> Vec<QuantileForecast> {
        self.jobs.iter().flat_map(|j| j.forecasts.iter().cloned()).collect()
    }
}

/// Run one job per forecast date, skipping dates with too little history.
pub fn run_walk_forward(
    panel: &TimePanel,
    sci: Option<&ConnectivityMatrix>,
    dates: &[NaiveDate],
    config: &PipelineConfig,
) -> Result<WalkForward> {
    let weights = match sci {
        Some(m) if config.features.needs_connectivity() => Some(weights_for(panel, m)?),
        _ => None,
    };
    let mut out = WalkForward::default();
    for &date in dates {
        match run_job(panel, weights.as_ref(), date, config) {
            Ok(job) => out.jobs.push(job),
            Err(Error::InsufficientHistory(why)) => {
                warn!("skipping {date}: {why}");
                out.skipped.push((date, why));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Scores of one ablation arm, averaged over forecast dates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    /// Mean absolute error of the median over all locations and 28 days.
    pub mae: f64,
    /// Mean across-member variance of the median prediction.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReplicate {
    pub seed_base: u64,
    pub with_sph: AblationArm,
    pub without_sph: AblationArm,
}

impl AblationReplicate {
    pub fn sph_lower_mae(&self) -> bool {
        self.with_sph.mae < self.without_sph.mae
    }

    pub fn sph_lower_variance(&self) -> bool {
        self.with_sph.variance < self.without_sph.variance
    }
}

fn ablation_arm(panel: &TimePanel, sci: &ConnectivityMatrix, dates: &[NaiveDate], config: &PipelineConfig) -> Result<AblationArm> {
    let wf = run_walk_forward(panel, Some(sci), dates, config)?;
    if wf.jobs.is_empty() {
        return Err(Error::InsufficientHistory("no forecast date could be run".into()));
    }
    let plan = config.plan();
    let report = crate::scoring::score_run("arm", &wf.forecasts(), panel, crate::scoring::Truth::Smoothed)?;
    let variance = wf
        .jobs
        .iter()
        .map(|j| crate::ensemble::member_variance(&plan, &j.predictions, crate::quantiles::MEDIAN_INDEX))
        .sum::<f64>()
        / wf.jobs.len() as f64;
    Ok(AblationArm {
        mae: report.average("arm").map(|r| r.mae).unwrap_or(f64::NAN),
        variance,
    })
}

/// Train with and without the SPH channel for each seed base. Everything
/// else, including the panel, is shared between arms.
pub fn run_ablation(
    panel: &TimePanel,
    sci: &ConnectivityMatrix,
    dates: &[NaiveDate],
    config: &PipelineConfig,
    seed_bases: &[u64],
) -> Result<Vec<AblationReplicate>> {
    let mut out = Vec::with_capacity(seed_bases.len());
    for &seed_base in seed_bases {
        let arm = |sph: bool| {
            let cfg = PipelineConfig {
                seed_base,
                features: FeatureToggles { sph, ..config.features },
                ..config.clone()
            };
            ablation_arm(panel, sci, dates, &cfg)
        };
        let rep = AblationReplicate {
            seed_base,
            with_sph: arm(true)?,
            without_sph: arm(false)?,
        };
        info!(
            "seed_base {seed_base}: MAE {:.4} vs {:.4}, variance {:.4} vs {:.4}",
            rep.with_sph.mae, rep.without_sph.mae, rep.with_sph.variance, rep.without_sph.variance
        );
        out.push(rep);
    }
    Ok(out)
}

pub const ABLATION_HEADER: &str = "seed_base,mae_sph,mae_no_sph,variance_sph,variance_no_sph";

pub fn ablation_csv(reps: &[AblationReplicate]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in reps {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.seed_base, r.with_sph.mae, r.without_sph.mae, r.with_sph.variance, r.without_sph.variance
        ));
    }
    s
}

/// Checkpoints laid out as `{root}/{forecast_date}/{member_index}.ckpt`.
#[derive(Debug, Clone)]
pub struct ModelStore {
    root: PathBuf,
}

impl ModelStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ModelStore { root: root.into() }
    }

    pub fn path(&self, date: NaiveDate, index: usize) -> PathBuf {
        self.root.join(date.to_string()).join(format!("{index}.ckpt"))
    }

    pub fn save_job(&self, job: &JobResult) -> Result<()> {
        let dir = self.root.join(job.forecast_date.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for report in &job.reports {
            Checkpoint {
                member: report.spec.clone(),
                params: job.members[&report.index].clone(),
            }
            .save(self.path(job.forecast_date, report.index))?;
        }
        Ok(())
    }

    /// Load every member of `plan`; the stored spec must match the plan.
    pub fn load(&self, date: NaiveDate, plan: &EnsemblePlan) -> Result<BTreeMap<usize, SlstmParams>> {
        let mut out = BTreeMap::new();
        let mut missing = Vec::new();
        for (i, spec) in plan.members.iter().enumerate() {
            let path = self.path(date, i);
            if !path.exists() {
                missing.push(path.display().to_string());
                continue;
            }
            let ck = Checkpoint::load(&path)?;
            if &ck.member != spec {
                return Err(Error::Invalid(format!(
                    "{}: checkpoint is for {:?}, plan expects {:?}",
                    path.display(),
                    ck.member,
                    spec
                )));
            }
            out.insert(i, ck.params);
        }
        if !missing.is_empty() {
            return Err(Error::MissingMembers(missing.join(", ")));
        }
        Ok(out)
    }
}

/// Forecast from stored members without retraining.
pub fn forecast_from_store(
    panel: &TimePanel,
    sci: Option<&ConnectivityMatrix>,
    date: NaiveDate,
    config: &PipelineConfig,
    store: &ModelStore,
) -> Result<Vec<QuantileForecast>> {
    let weights = match sci {
        Some(m) if config.features.needs_connectivity() => Some(weights_for(panel, m)?),
        _ => None,
    };
    let fs = build_features(panel, weights.as_ref(), date, config.features, config.window_months)?;
    let plan = config.plan();
    let members = store.load(date, &plan)?;
    let inputs = forecast_inputs(&fs);
    let preds = member_predictions(&plan, &members, &inputs)?;
    aggregate(&plan, &preds, &inputs)
}

/// Linear-interpolation quantile of sorted data.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Persistence forecast of smoothed hospitalizations.
///
/// The point forecast is the last smoothed value. Quantiles add empirical
/// quantiles of the symmetrized `k`-step differences of the history.
pub fn persistence_forecast(panel: &TimePanel, forecast_date: NaiveDate, horizon: usize) -> Result<Vec<QuantileForecast>> {
    let t = panel
        .date_index(forecast_date)
        .ok_or_else(|| Error::InsufficientHistory(format!("no data on {forecast_date}")))?;
    if t + 1 < PERSISTENCE_MIN_HISTORY.max(horizon + 1) {
        return Err(Error::InsufficientHistory(format!(
            "persistence needs {} observations before {forecast_date}, have {}",
            PERSISTENCE_MIN_HISTORY.max(horizon + 1),
            t + 1
        )));
    }
    let mut out = Vec::with_capacity(panel.n_locations());
    for (li, loc) in panel.locations().iter().enumerate() {
        let s = rolling_mean_7(&panel.series(HOSPITALIZATIONS, li)?[..=t]);
        let point = s[t];
        let mut values = Tensor2::zeros(horizon, LEVELS.len());
        for k in 1..=horizon {
            let mut diffs: Vec<f64> = (k..=t).flat_map(|i| [s[i] - s[i - k], s[i - k] - s[i]]).collect();
            diffs.sort_by(f64::total_cmp);
            let mut row: Vec<f64> = LEVELS
                .iter()
                .map(|&q| (point + empirical_quantile(&diffs, q)).max(0.0))
                .collect();
            row.sort_by(f64::total_cmp);
            values.row_mut(k - 1).copy_from_slice(&row);
        }
        out.push(QuantileForecast {
            forecast_date,
            location: loc.id.clone(),
            levels: LEVELS.to_vec(),
            values,
        });
    }
    Ok(out)
}

/// Structured job configuration file. Relative paths are resolved against
/// the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub cases: PathBuf,
    pub hospitalizations: PathBuf,
    pub population: PathBuf,
    #[serde(default)]
    pub sci: Option<PathBuf>,
    #[serde(default)]
    pub forecast_dates: Vec<NaiveDate>,
    #[serde(default = "default_widths")]
    pub lstm_widths: Vec<usize>,
    #[serde(default = "default_dense")]
    pub dense_width: usize,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_plan")]
    pub plan: PlanShape,
    #[serde(default = "default_true")]
    pub sph: bool,
    #[serde(default)]
    pub spc: bool,
    #[serde(default = "default_min_history")]
    pub min_history: usize,
    #[serde(default = "default_window")]
    pub window_months: u32,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    /// Extra forecast files scored next to this model, keyed by model name.
    #[serde(default)]
    pub compare: BTreeMap<String, PathBuf>,
    /// Score against raw rather than smoothed hospitalizations.
    #[serde(default)]
    pub raw_truth: bool,
}

fn default_widths() -> Vec<usize> {
    vec![256, 128, 128, 128]
}
fn default_dense() -> usize {
    64
}
fn default_patience() -> usize {
    10
}
fn default_max_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    AdamConfig::default().lr
}
fn default_plan() -> PlanShape {
    PlanShape::FULL
}
fn default_true() -> bool {
    true
}
fn default_min_history() -> usize {
    MIN_HISTORY
}
fn default_window() -> u32 {
    WINDOW_MONTHS
}
fn default_stride() -> usize {
    1
}

impl JobConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<JobConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: JobConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.cases);
        fix(&mut cfg.hospitalizations);
        fix(&mut cfg.population);
        if let Some(p) = cfg.sci.as_mut() {
            fix(p);
        }
        cfg.compare.values_mut().for_each(fix);
        Ok(cfg)
    }

    pub fn pipeline(&self, jobs: usize) -> PipelineConfig {
        PipelineConfig {
            lstm_widths: self.lstm_widths.clone(),
            dense_width: self.dense_width,
            train: TrainConfig {
                batch_size: self.batch_size,
                max_epochs: self.max_epochs,
                patience: self.patience,
                adam: AdamConfig {
                    lr: self.learning_rate,
                    ..AdamConfig::default()
                },
            },
            plan: self.plan,
            seed_base: self.seed_base,
            features: FeatureToggles {
                sph: self.sph,
                spc: self.spc,
            },
            min_history: self.min_history,
            window_months: self.window_months,
            sample_stride: self.sample_stride,
            jobs,
        }
    }
}

//! Deterministic metapopulation SIR/SEIR simulator with an admissions
//! observation model, used to generate synthetic panels.
//!
//! Regions are coupled through the force of infection. For region `r`
//!
//! ```text
//! I_eff[r] = (1 − κ)·I[r] + κ·Σ_j w[r][j]·I[j]·N[r]/N[j]
//! λ[r]     = β·I_eff[r]/N[r]
//! ```
//!
//! so `κ = 0` gives independent regions. Integration is classic RK4 with a
//! fixed step; cumulative incidence is integrated alongside the
//! compartments so that daily cases are exact differences of it.

use std::path::Path;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::connectivity::{row_normalize, ConnectivityMatrix, DirectionalWeights};
use crate::data::{Location, TimePanel, CASES, HOSPITALIZATIONS};
use crate::error::{Error, Result};

/// Compartments below this after a step are an integrator failure.
pub const NEGATIVE_TOLERANCE: f64 = -1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compartments {
    Sir,
    Seir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpiParams {
    pub model: Compartments,
    pub beta: f64,
    pub gamma: f64,
    /// Exit rate from the exposed compartment; unused for SIR.
    pub sigma: f64,
    pub hosp_frac: f64,
    pub hosp_lag: usize,
    pub populations: Vec<f64>,
    pub coupling: DirectionalWeights,
    pub kappa: f64,
}

impl EpiParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.beta > 0.0 && self.gamma > 0.0) {
            return bad(format!("rates must be positive: beta {}, gamma {}", self.beta, self.gamma));
        }
        if self.model == Compartments::Seir && !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.hosp_frac) {
            return bad(format!("hosp_frac {} outside [0, 1]", self.hosp_frac));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa {} outside [0, 1]", self.kappa));
        }
        if self.populations.is_empty() || self.populations.iter().any(|&n| !(n > 0.0)) {
            return bad("every region needs a positive population".into());
        }
        if self.coupling.len() != self.populations.len() {
            return bad(format!(
                "coupling has {} regions, populations {}",
                self.coupling.len(),
                self.populations.len()
            ));
        }
        if self.populations.len() == 1 && self.kappa > 0.0 {
            return bad("a single region cannot be coupled".into());
        }
        Ok(())
    }

    pub fn n_regions(&self) -> usize {
        self.populations.len()
    }

    /// Per-region force of infection.
    fn force(&self, infectious: &[f64]) -> Vec<f64> {
        let n = self.n_regions();
        (0..n)
            .map(|r| {
                let local = infectious[r] / self.populations[r];
                let mut imported = 0.0;
                for j in 0..n {
                    imported += self.coupling.get(r, j) * infectious[j] / self.populations[j];
                }
                self.beta * ((1.0 - self.kappa) * local + self.kappa * imported)
            })
            .collect()
    }
}

/// Compartment sizes per region, in persons.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiState {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub i: Vec<f64>,
    pub r: Vec<f64>,
    /// Cumulative incident infections (E→I for SEIR, S→I for SIR).
    pub cumulative: Vec<f64>,
}

impl EpiState {
    /// Everyone susceptible except `infectious[r]` persons per region.
    pub fn new(populations: &[f64], infectious: &[f64]) -> Result<Self> {
        if populations.len() != infectious.len() {
            return Err(Error::Shape("populations and initial infections differ in length".into()));
        }
        if infectious.iter().zip(populations).any(|(&i, &n)| i < 0.0 || i > n) {
            return Err(Error::Invalid("initial infections outside [0, N]".into()));
        }
        let n = populations.len();
        Ok(EpiState {
            s: populations.iter().zip(infectious).map(|(n, i)| n - i).collect(),
            e: vec![0.0; n],
            i: infectious.to_vec(),
            r: vec![0.0; n],
            cumulative: vec![0.0; n],
        })
    }

    pub fn total(&self, region: usize) -> f64 {
        self.s[region] + self.e[region] + self.i[region] + self.r[region]
    }

    fn axpy(&self, h: f64, d: &EpiState) -> EpiState {
        let f = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + h * y).collect();
        EpiState {
            s: f(&self.s, &d.s),
            e: f(&self.e, &d.e),
            i: f(&self.i, &d.i),
            r: f(&self.r, &d.r),
            cumulative: f(&self.cumulative, &d.cumulative),
        }
    }

    fn compartments(&self) -> [&Vec<f64>; 4] {
        [&self.s, &self.e, &self.i, &self.r]
    }
}

fn derivative(x: &EpiState, p: &EpiParams) -> EpiState {
    let lambda = p.force(&x.i);
    let n = p.n_regions();
    let mut d = EpiState {
        s: vec![0.0; n],
        e: vec![0.0; n],
        i: vec![0.0; n],
        r: vec![0.0; n],
        cumulative: vec![0.0; n],
    };
    for r in 0..n {
        let infection = lambda[r] * x.s[r];
        let recovery = p.gamma * x.i[r];
        d.s[r] = -infection;
        d.r[r] = recovery;
        match p.model {
            Compartments::Seir => {
                let onset = p.sigma * x.e[r];
                d.e[r] = infection - onset;
                d.i[r] = onset - recovery;
                d.cumulative[r] = onset;
            }
            Compartments::Sir => {
                d.i[r] = infection - recovery;
                d.cumulative[r] = infection;
            }
        }
    }
    d
}

/// One RK4 step of length `dt` days.
pub fn seir_step(state: &EpiState, params: &EpiParams, dt: f64) -> Result<EpiState> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("step size {dt} must be positive")));
    }
    let k1 = derivative(state, params);
    let k2 = derivative(&state.axpy(0.5 * dt, &k1), params);
    let k3 = derivative(&state.axpy(0.5 * dt, &k2), params);
    let k4 = derivative(&state.axpy(dt, &k3), params);
    let mut next = state.clone();
    let combine = |out: &mut Vec<f64>, a: &[f64], b: &[f64], c: &[f64], d: &[f64]| {
        for (idx, o) in out.iter_mut().enumerate() {
            *o += dt / 6.0 * (a[idx] + 2.0 * b[idx] + 2.0 * c[idx] + d[idx]);
        }
    };
    combine(&mut next.s, &k1.s, &k2.s, &k3.s, &k4.s);
    combine(&mut next.e, &k1.e, &k2.e, &k3.e, &k4.e);
    combine(&mut next.i, &k1.i, &k2.i, &k3.i, &k4.i);
    combine(&mut next.r, &k1.r, &k2.r, &k3.r, &k4.r);
    combine(&mut next.cumulative, &k1.cumulative, &k2.cumulative, &k3.cumulative, &k4.cumulative);
    for comp in next.compartments() {
        if let Some(v) = comp.iter().find(|&&v| v < NEGATIVE_TOLERANCE) {
            return Err(Error::Integrator(format!("negative compartment {v} after step")));
        }
    }
    for comp in [&mut next.s, &mut next.e, &mut next.i, &mut next.r] {
        comp.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(next)
}

/// Infections introduced into a region at the start of a day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEvent {
    pub region: usize,
    pub day: usize,
    pub infections: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub params: EpiParams,
    pub location_ids: Vec<String>,
    pub start_date: NaiveDate,
    pub days: usize,
    pub dt: f64,
    pub seeding: Vec<SeedEvent>,
    /// Standard deviation of the log of the multiplicative observation noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Daily output of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub panel: TimePanel,
    /// State at the end of each day.
    pub states: Vec<EpiState>,
}

impl Simulation {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.location_ids.len() != self.params.n_regions() {
            return Err(Error::Invalid("one location id per region required".into()));
        }
        if self.days < self.params.hosp_lag + 1 {
            return Err(Error::Invalid(format!(
                "{} days cannot cover a hospitalization lag of {}",
                self.days, self.params.hosp_lag
            )));
        }
        let steps = 1.0 / self.dt;
        if !(self.dt > 0.0 && self.dt <= 1.0 && (steps - steps.round()).abs() < 1e-9) {
            return Err(Error::Invalid(format!("dt {} must divide one day", self.dt)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise sigma {}", self.noise_sigma)));
        }
        if let Some(ev) = self.seeding.iter().find(|e| e.region >= self.params.n_regions() || e.infections < 0.0) {
            return Err(Error::Invalid(format!("bad seeding event {ev:?}")));
        }
        Ok(())
    }

    /// Integrate and emit a panel with `cases` and `hospitalizations`.
    pub fn run(&self) -> Result<SimOutput> {
        self.validate()?;
        let p = &self.params;
        let n = p.n_regions();
        let mut state = EpiState::new(&p.populations, &vec![0.0; n])?;
        let steps = (1.0 / self.dt).round() as usize;
        let mut cases = vec![vec![0.0; self.days]; n];
        let mut states = Vec::with_capacity(self.days);
        for day in 0..self.days {
            for ev in self.seeding.iter().filter(|e| e.day == day) {
                let moved = ev.infections.min(state.s[ev.region]);
                state.s[ev.region] -= moved;
                state.i[ev.region] += moved;
            }
            let before = state.cumulative.clone();
            for _ in 0..steps {
                state = seir_step(&state, p, self.dt)?;
            }
            for r in 0..n {
                cases[r][day] = (state.cumulative[r] - before[r]).max(0.0);
            }
            states.push(state.clone());
        }
        let mut admissions = vec![vec![0.0; self.days]; n];
        for r in 0..n {
            for day in p.hosp_lag..self.days {
                admissions[r][day] = p.hosp_frac * cases[r][day - p.hosp_lag];
            }
        }
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let s = self.noise_sigma;
            let noise = LogNormal::new(-0.5 * s * s, s).map_err(|e| Error::Invalid(e.to_string()))?;
            for series in cases.iter_mut().chain(admissions.iter_mut()) {
                for v in series.iter_mut() {
                    *v *= noise.sample(&mut rng);
                }
            }
        }
        let locations = self
            .location_ids
            .iter()
            .zip(&p.populations)
            .map(|(id, &n)| Location::new(id.clone(), n.round() as u64))
            .collect();
        let panel = TimePanel::new(locations, self.start_date, self.days)?
            .with_channel(CASES, cases)?
            .with_channel(HOSPITALIZATIONS, admissions)?;
        Ok(SimOutput { panel, states })
    }
}

/// Simulate and return the observed panel.
pub fn simulate_panel(sim: &Simulation) -> Result<TimePanel> {
    Ok(sim.run()?.panel)
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub start_date: NaiveDate,
    pub days: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_model")]
    pub model: Compartments,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub sigma: f64,
    pub hosp_frac: f64,
    #[serde(default = "default_lag")]
    pub hosp_lag: usize,
    #[serde(default)]
    pub kappa: f64,
    pub regions: Vec<ScenarioRegion>,
    /// Symmetric connectedness matrix, rows in region order. Optional for a
    /// single region.
    #[serde(default)]
    pub sci: Vec<Vec<f64>>,
    #[serde(default)]
    pub seeding: Vec<ScenarioSeed>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRegion {
    pub id: String,
    pub population: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSeed {
    pub region: String,
    pub day: usize,
    pub infections: f64,
}

fn default_dt() -> f64 {
    0.25
}

fn default_model() -> Compartments {
    Compartments::Seir
}

fn default_lag() -> usize {
    5
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn location_ids(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.id.clone()).collect()
    }

    pub fn connectivity(&self) -> Result<Option<ConnectivityMatrix>> {
        let n = self.regions.len();
        if self.sci.is_empty() && n == 1 {
            return Ok(None);
        }
        if self.sci.len() != n || self.sci.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("sci must be {n}x{n}")));
        }
        ConnectivityMatrix::new(self.location_ids(), self.sci.concat()).map(Some)
    }

    pub fn to_simulation(&self) -> Result<Simulation> {
        let ids = self.location_ids();
        let coupling = match self.connectivity()? {
            Some(m) => row_normalize(&m)?,
            None => DirectionalWeights::from_matrix(1, vec![0.0])?,
        };
        let seeding = self
            .seeding
            .iter()
            .map(|s| {
                ids.iter()
                    .position(|id| *id == s.region)
                    .map(|region| SeedEvent {
                        region,
                        day: s.day,
                        infections: s.infections,
                    })
                    .ok_or_else(|| Error::UnknownLocation(s.region.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let sim = Simulation {
            params: EpiParams {
                model: self.model,
                beta: self.beta,
                gamma: self.gamma,
                sigma: self.sigma,
                hosp_frac: self.hosp_frac,
                hosp_lag: self.hosp_lag,
                populations: self.regions.iter().map(|r| r.population as f64).collect(),
                coupling,
                kappa: self.kappa,
            },
            location_ids: ids,
            start_date: self.start_date,
            days: self.days,
            dt: self.dt,
            seeding,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        };
        sim.validate()?;
        Ok(sim)
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use log::warn;

use sphcast::connectivity::{parse_sci_tsv, ConnectivityMatrix};
use sphcast::data::{load_panel, write_population_csv, write_truth_csv, TimePanel, CASES, HOSPITALIZATIONS};
use sphcast::ensemble::{read_hub_csv, write_hub_csv, HORIZON};
use sphcast::episim::Scenario;
use sphcast::pipeline::{
    ablation_csv, build_features, forecast_from_store, persistence_forecast, run_ablation, run_walk_forward,
    weights_for, JobConfig, ModelStore, PipelineConfig,
};
use sphcast::quantiles::LEVELS;
use sphcast::scoring::{score_run, ScoreReport, Truth};

use crate::{require_file, runtime, validation, Cli, Command, Failure};

type Outcome = Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    if cli.jobs == 0 {
        return Err(validation("--jobs must be at least 1"));
    }
    match &cli.command {
        Command::Simulate => simulate(cli),
        Command::Ingest => ingest(cli),
        Command::Features => features(cli),
        Command::Train => train(cli),
        Command::Forecast => forecast(cli),
        Command::Score {
            forecasts,
            raw_truth,
            svg,
        } => score(cli, forecasts, *raw_truth, *svg),
        Command::Ablate { replicates } => ablate(cli, *replicates),
    }
}

fn config_path(cli: &Cli) -> Result<&Path, Failure> {
    let path = cli.config.as_deref().ok_or_else(|| validation("--config is required"))?;
    require_file(path, "config")?;
    Ok(path)
}

fn create_out(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Inputs of a pipeline command, fully validated.
struct Job {
    config: JobConfig,
    panel: TimePanel,
    sci: Option<ConnectivityMatrix>,
    pipeline: PipelineConfig,
}

fn load_job(cli: &Cli, need_dates: bool) -> Result<Job, Failure> {
    let path = config_path(cli)?;
    let mut config = JobConfig::load(path).map_err(validation)?;
    if let Some(s) = cli.sph {
        config.sph = s.on();
    }
    if let Some(s) = cli.spc {
        config.spc = s.on();
    }
    if let Some(seed) = cli.seed {
        config.seed_base = seed;
    }
    require_file(&config.cases, "cases")?;
    require_file(&config.hospitalizations, "hospitalizations")?;
    require_file(&config.population, "population")?;
    let needs_sci = config.sph || config.spc;
    if needs_sci {
        let sci = config
            .sci
            .as_deref()
            .ok_or_else(|| validation("sph=on or spc=on needs an `sci` path in the config"))?;
        require_file(sci, "SCI")?;
    }
    let pipeline = config.pipeline(cli.jobs);
    pipeline.validate().map_err(validation)?;
    let panel = load_panel(&config.cases, &config.hospitalizations, &config.population).map_err(validation)?;
    let sci = match (&config.sci, needs_sci) {
        (Some(p), true) => {
            let ids: Vec<String> = panel.locations().iter().map(|l| l.id.clone()).collect();
            Some(parse_sci_tsv(p, &ids).map_err(validation)?)
        }
        _ => None,
    };
    if need_dates {
        if config.forecast_dates.is_empty() {
            return Err(validation("config lists no forecast_dates"));
        }
        if let Some(d) = config.forecast_dates.iter().find(|d| panel.date_index(**d).is_none()) {
            return Err(validation(format!(
                "forecast date {d} outside data {}..{}",
                panel.start(),
                panel.end()
            )));
        }
    }
    Ok(Job {
        config,
        panel,
        sci,
        pipeline,
    })
}

fn simulate(cli: &Cli) -> Outcome {
    let path = config_path(cli)?;
    let mut scenario = Scenario::load(path).map_err(validation)?;
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    let sim = scenario.to_simulation().map_err(validation)?;
    let sci = scenario.connectivity().map_err(validation)?;
    let panel = sim.run().map_err(runtime)?.panel;
    create_out(&cli.out)?;
    write_truth_csv(cli.out.join("cases.csv"), &panel, CASES).map_err(runtime)?;
    write_truth_csv(cli.out.join("hospitalizations.csv"), &panel, HOSPITALIZATIONS).map_err(runtime)?;
    write_population_csv(cli.out.join("population.csv"), panel.locations()).map_err(runtime)?;
    if let Some(m) = sci {
        write_text(&cli.out.join("sci.tsv"), &m.to_tsv())?;
    }
    println!(
        "simulated {} regions, {}..{}, into {}",
        panel.n_locations(),
        panel.start(),
        panel.end(),
        cli.out.display()
    );
    Ok(())
}

fn ingest(cli: &Cli) -> Outcome {
    let job = load_job(cli, false)?;
    let panel = &job.panel;
    create_out(&cli.out)?;
    write_truth_csv(cli.out.join("cases.csv"), panel, CASES).map_err(runtime)?;
    write_truth_csv(cli.out.join("hospitalizations.csv"), panel, HOSPITALIZATIONS).map_err(runtime)?;
    write_population_csv(cli.out.join("population.csv"), panel.locations()).map_err(runtime)?;
    if let Some(m) = &job.sci {
        write_text(&cli.out.join("sci.tsv"), &m.to_tsv())?;
    }
    println!(
        "{} locations, {}..{} ({} days)",
        panel.n_locations(),
        panel.start(),
        panel.end(),
        panel.n_dates()
    );
    Ok(())
}

fn features(cli: &Cli) -> Outcome {
    let job = load_job(cli, true)?;
    let weights = match &job.sci {
        Some(m) => Some(weights_for(&job.panel, m).map_err(validation)?),
        None => None,
    };
    let mut outputs = Vec::new();
    for &date in &job.config.forecast_dates {
        let fs = build_features(&job.panel, weights.as_ref(), date, job.pipeline.features, job.pipeline.window_months)
            .map_err(runtime)?;
        let mut csv = format!("date,location,{}\n", fs.channels.join(","));
        for (li, loc) in fs.panel.locations().iter().enumerate() {
            for t in 0..fs.panel.n_dates() {
                let _ = write!(csv, "{},{}", fs.panel.date(t), loc.id);
                for c in 0..fs.channels.len() {
                    let _ = write!(csv, ",{}", fs.scaled[c][li][t]);
                }
                csv.push('\n');
            }
        }
        let scalers = serde_json::to_string_pretty(&fs.scalers).map_err(runtime)?;
        outputs.push((date, csv, scalers));
    }
    let dir = cli.out.join("features");
    create_out(&dir)?;
    for (date, csv, scalers) in outputs {
        write_text(&dir.join(format!("{date}.csv")), &csv)?;
        write_text(&dir.join(format!("{date}.scalers.json")), &scalers)?;
    }
    println!("features for {} dates in {}", job.config.forecast_dates.len(), dir.display());
    Ok(())
}

fn train(cli: &Cli) -> Outcome {
    let job = load_job(cli, true)?;
    let wf = run_walk_forward(&job.panel, job.sci.as_ref(), &job.config.forecast_dates, &job.pipeline).map_err(runtime)?;
    if wf.jobs.is_empty() {
        return Err(runtime("no forecast date had enough history"));
    }
    let dates: Vec<NaiveDate> = wf.jobs.iter().map(|j| j.forecast_date).collect();
    let mut baseline = Vec::new();
    for &d in &dates {
        baseline.extend(persistence_forecast(&job.panel, d, HORIZON).map_err(runtime)?);
    }
    let reports: Vec<_> = wf.jobs.iter().map(|j| (j.forecast_date, &j.split, &j.reports)).collect();
    let reports = serde_json::to_string_pretty(&reports).map_err(runtime)?;

    create_out(&cli.out)?;
    let store = ModelStore::new(cli.out.join("models"));
    for j in &wf.jobs {
        store.save_job(j).map_err(runtime)?;
    }
    write_hub_csv(cli.out.join("forecasts.csv"), &wf.forecasts()).map_err(runtime)?;
    write_hub_csv(cli.out.join("persistence.csv"), &baseline).map_err(runtime)?;
    write_text(&cli.out.join("members.json"), &reports)?;
    for (d, why) in &wf.skipped {
        warn!("skipped {d}: {why}");
    }
    println!(
        "trained {} members for {} dates; forecasts in {}",
        job.pipeline.plan().len(),
        dates.len(),
        cli.out.join("forecasts.csv").display()
    );
    Ok(())
}

fn forecast(cli: &Cli) -> Outcome {
    let job = load_job(cli, true)?;
    let models = cli.out.join("models");
    if !models.is_dir() {
        return Err(validation(format!("model store not found: {}", models.display())));
    }
    let store = ModelStore::new(models);
    let mut all = Vec::new();
    for &date in &job.config.forecast_dates {
        all.extend(forecast_from_store(&job.panel, job.sci.as_ref(), date, &job.pipeline, &store).map_err(runtime)?);
    }
    write_hub_csv(cli.out.join("forecasts.csv"), &all).map_err(runtime)?;
    println!("{} location forecasts in {}", all.len(), cli.out.join("forecasts.csv").display());
    Ok(())
}

fn forecast_sources(cli: &Cli, job: &JobConfig, explicit: &[String]) -> Result<Vec<(String, PathBuf)>, Failure> {
    let mut out = Vec::new();
    for spec in explicit {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| validation(format!("--forecast expects NAME=PATH, got {spec}")))?;
        out.push((name.to_string(), PathBuf::from(path)));
    }
    if out.is_empty() {
        for (name, file) in [("sphcast", "forecasts.csv"), ("persistence", "persistence.csv")] {
            let p = cli.out.join(file);
            if p.is_file() {
                out.push((name.to_string(), p));
            }
        }
        out.extend(job.compare.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    if out.is_empty() {
        return Err(validation("no forecast files to score"));
    }
    Ok(out)
}

fn score(cli: &Cli, explicit: &[String], raw_truth: bool, svg: bool) -> Outcome {
    let path = config_path(cli)?;
    let config = JobConfig::load(path).map_err(validation)?;
    require_file(&config.cases, "cases")?;
    require_file(&config.hospitalizations, "hospitalizations")?;
    require_file(&config.population, "population")?;
    let panel = load_panel(&config.cases, &config.hospitalizations, &config.population).map_err(validation)?;
    let truth = if raw_truth || config.raw_truth {
        Truth::Raw
    } else {
        Truth::Smoothed
    };
    let mut report = ScoreReport::default();
    for (name, file) in forecast_sources(cli, &config, explicit)? {
        require_file(&file, "forecast")?;
        let forecasts = read_hub_csv(&file, &LEVELS).map_err(validation)?;
        let r = score_run(&name, &forecasts, &panel, truth).map_err(validation)?;
        report = report.merge(r);
    }
    create_out(&cli.out)?;
    report.write_csv(cli.out.join("scores.csv")).map_err(runtime)?;
    let md = report.to_markdown();
    write_text(&cli.out.join("scores.md"), &md)?;
    if svg {
        write_text(&cli.out.join("scores.svg"), &report.to_svg())?;
    }
    print!("{md}");
    Ok(())
}

fn ablate(cli: &Cli, replicates: usize) -> Outcome {
    if replicates == 0 {
        return Err(validation("--replicates must be at least 1"));
    }
    let job = load_job(cli, true)?;
    let sci = job
        .sci
        .as_ref()
        .ok_or_else(|| validation("ablation needs an `sci` path in the config"))?;
    let seeds: Vec<u64> = (0..replicates as u64)
        .map(|r| job.pipeline.seed_base.wrapping_add(1000 * r))
        .collect();
    let reps = run_ablation(&job.panel, sci, &job.config.forecast_dates, &job.pipeline, &seeds).map_err(runtime)?;
    create_out(&cli.out)?;
    write_text(&cli.out.join("ablation.csv"), &ablation_csv(&reps))?;
    let mae = reps.iter().filter(|r| r.sph_lower_mae()).count();
    let var = reps.iter().filter(|r| r.sph_lower_variance()).count();
    println!("SPH lower MAE in {mae}/{replicates} replicates, lower member variance in {var}/{replicates}");
    Ok(())
}

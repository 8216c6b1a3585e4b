//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line;
//! the process exits nonzero if any fails.

use std::time::{Duration as Elapsed, Instant};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sphcast::connectivity::DirectionalWeights;
use sphcast::data::{rolling_mean_7, TimePanel, HOSPITALIZATIONS};
use sphcast::ensemble::{build_plan, median, reorder_quantiles, to_hub_csv, PlanShape, HORIZON, MEMBERS_PER_DAY};
use sphcast::episim::{seir_step, simulate_panel, Compartments, EpiParams, EpiState, Scenario, ScenarioRegion, ScenarioSeed};
use sphcast::neural::loss::{quantile_loss, total_loss};
use sphcast::neural::{train_member, AdamConfig, Sample, SlstmConfig, SlstmParams, Tensor2, TrainConfig, LONG_WINDOW, SHORT_WINDOW};
use sphcast::pipeline::{
    leakage_scan, persistence_forecast, run_ablation, run_walk_forward, FeatureToggles, PipelineConfig, SampleMeta,
};
use sphcast::quantiles::LEVELS;
use sphcast::scoring::{score_run, wis, Truth};
use sphcast::Error;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Elapsed, start: Instant) -> std::result::Result<f64, String> {
    let s = start.elapsed().as_secs_f64();
    if start.elapsed() <= limit {
        Ok(s)
    } else {
        Err(format!("took {s:.1}s, limit {}s", limit.as_secs()))
    }
}

// ---------------------------------------------------------------- network

fn random_sample(rng: &mut ChaCha8Rng, channels: usize, horizon: usize) -> Sample {
    Sample {
        x_short: Tensor2::uniform(SHORT_WINDOW, channels, 1.0, rng),
        x_long: Tensor2::uniform(LONG_WINDOW, channels, 1.0, rng),
        target: (0..horizon).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = SlstmConfig { input_dim: 3, lstm_widths: vec![2, 2, 2, 2], dense_width: 2, horizon: 3, n_quantiles: 3 };
    let levels = [0.1, 0.5, 0.9];
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SlstmParams::init(cfg.clone(), &mut rng);
        p.fusion_weight = rng.gen_range(0.5..1.5);
        let samples: Vec<Sample> = (0..4).map(|_| random_sample(&mut rng, 3, 3)).collect();
        let mut grads = SlstmParams::zeros(cfg.clone());
        p.loss_and_gradient(&samples, &levels, &mut grads).map_err(|e| e.to_string())?;
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
        let mut probe = p.clone();
        for (ti, a) in analytic.iter().enumerate() {
            for (i, &g) in a.iter().enumerate() {
                let orig = probe.tensors_mut()[ti][i];
                probe.tensors_mut()[ti][i] = orig + eps;
                let up = probe.loss(&samples, &levels).unwrap();
                probe.tensors_mut()[ti][i] = orig - eps;
                let down = probe.loss(&samples, &levels).unwrap();
                probe.tensors_mut()[ti][i] = orig;
                let fd = (up - down) / (2.0 * eps);
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    let secs = within(Elapsed::from_secs(30), start)?;
    ensure(worst < 1e-4, format!("{checked} parameters over 5 seeds, max relative error {worst:.2e}, {secs:.1}s"))
}

fn loss_identities() -> Outcome {
    let exact = quantile_loss(3.7, 3.7, 0.3).unwrap() == 0.0
        && quantile_loss(10.0, 8.0, 0.5).unwrap() == 1.0
        && quantile_loss(10.0, 12.0, 0.9).unwrap() == (1.0 - 0.9) * 2.0;
    let y = Tensor2::from_rows(&[vec![1.0, 2.0, -0.5]]).unwrap();
    let over = Tensor2::from_rows(&[vec![2.0; 3], vec![3.0; 3], vec![0.5; 3]]).unwrap();
    let total = total_loss(&y, &[over], &[0.25, 0.5, 0.75]).unwrap();
    ensure(
        exact && (total - 0.5).abs() <= 1e-12,
        format!("three examples exact: {exact}; uniform over-prediction loss {total}"),
    )
}

// ---------------------------------------------------------------- scoring

fn wis_oracle() -> Outcome {
    let toy = wis(10.0, &[8.0, 9.0, 12.0], &[0.25, 0.5, 0.75]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = 11.0;
    let mut worst_identity: f64 = 0.0;
    let mut worst_pinball: f64 = 0.0;
    for _ in 0..10_000 {
        let centre = rng.gen_range(-50.0..50.0);
        let mut row: Vec<f64> = (0..LEVELS.len()).map(|_| centre + rng.gen_range(-20.0..20.0)).collect();
        row.sort_by(f64::total_cmp);
        let y = centre + rng.gen_range(-40.0..40.0);
        let d = wis(y, &row, &LEVELS).unwrap();
        let scale = d.total.abs().max(1.0);
        worst_identity = worst_identity.max((d.total - (d.dispersion + d.under + d.over)).abs() / scale);
        // Independent route: WIS equals the summed pinball loss over all
        // levels divided by K + 1/2.
        let pinball: f64 = row.iter().zip(LEVELS).map(|(&q, l)| quantile_loss(y, q, l).unwrap()).sum::<f64>() / (k + 0.5);
        worst_pinball = worst_pinball.max((d.total - pinball).abs() / scale);
    }
    let point = wis(7.25, &[7.25; 23], &LEVELS).unwrap();
    ensure(
        (toy.total - 1.0).abs() <= 1e-9 && worst_identity <= 1e-12 && worst_pinball <= 1e-12 && point.total == 0.0,
        format!(
            "toy {:.12}; 10000 rows: identity residual {worst_identity:.1e}, pinball residual {worst_pinball:.1e}; point mass {}",
            toy.total, point.total
        ),
    )
}

// ---------------------------------------------------------------- ensemble

fn ensemble_plan() -> Outcome {
    let plan = build_plan(0);
    let counts: Vec<usize> = (1..=HORIZON).map(|d| plan.covering(d).len()).collect();
    let exact = plan.len() == 34 && counts.iter().all(|&c| c == MEMBERS_PER_DAY);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut robust = true;
    let mut monotone = true;
    for _ in 0..1000 {
        let v: Vec<f64> = (0..MEMBERS_PER_DAY).map(|_| rng.gen_range(0.0..100.0)).collect();
        let m = median(&v).unwrap();
        // Pushing up to 7 of 15 values to extremes on their own side keeps
        // the median.
        let mut w = v.clone();
        for x in w.iter_mut().filter(|x| **x > m).take(7) {
            *x = 1e12;
        }
        for x in w.iter_mut().filter(|x| **x < m).take(7) {
            *x = -1e12;
        }
        robust &= median(&w).unwrap() == m;
        let row: Vec<f64> = (0..23).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let sorted = reorder_quantiles(&row);
        let mut expect = row.clone();
        expect.sort_by(f64::total_cmp);
        monotone &= sorted == expect;
    }
    ensure(
        exact && robust && monotone,
        format!("{} members, coverage per day {:?}; median robust {robust}; reordering monotone {monotone}", plan.len(), {
            let mut c = counts.clone();
            c.dedup();
            c
        }),
    )
}

// ---------------------------------------------------------------- simulator

fn two_regions(kappa: f64) -> EpiParams {
    EpiParams {
        model: Compartments::Seir,
        beta: 0.4,
        gamma: 0.1,
        sigma: 0.25,
        hosp_frac: 0.1,
        hosp_lag: 5,
        populations: vec![1_000_000.0, 400_000.0],
        coupling: DirectionalWeights::from_matrix(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        kappa,
    }
}

fn integrate(p: &EpiParams, infectious: &[f64], days: f64, dt: f64) -> Vec<EpiState> {
    let mut x = EpiState::new(&p.populations, infectious).unwrap();
    let mut out = vec![x.clone()];
    for _ in 0..(days / dt).round() as usize {
        x = seir_step(&x, p, dt).unwrap();
        out.push(x.clone());
    }
    out
}

fn simulator() -> Outcome {
    let p = two_regions(0.6);
    let mut drift: f64 = 0.0;
    for x in integrate(&p, &[100.0, 0.0], 365.0, 0.25) {
        for r in 0..2 {
            drift = drift.max((x.total(r) - p.populations[r]).abs() / p.populations[r]);
        }
    }

    let final_i = |dt: f64| integrate(&p, &[100.0, 0.0], 60.0, dt).last().unwrap().i[1];
    let (a, b, c) = (final_i(1.0), final_i(0.5), final_i(0.25));
    let ratio = (a - b).abs() / (b - c).abs();

    let alone = EpiParams {
        populations: vec![1_000_000.0],
        coupling: DirectionalWeights::from_matrix(1, vec![0.0]).unwrap(),
        kappa: 0.0,
        ..two_regions(0.0)
    };
    let coupled = integrate(&two_regions(0.0), &[100.0, 30.0], 200.0, 0.25);
    let single = integrate(&alone, &[100.0], 200.0, 0.25);
    let decoupled = coupled.iter().zip(&single).all(|(c, s)| c.s[0] == s.s[0] && c.e[0] == s.e[0] && c.i[0] == s.i[0] && c.r[0] == s.r[0]);

    // With two regions the neighbour weight is 1, so only weak coupling
    // leaves room for a lag.
    let series = integrate(&two_regions(0.01), &[100.0, 0.0], 300.0, 1.0);
    let peak = |r: usize| (0..series.len()).max_by(|&x, &y| series[x].i[r].total_cmp(&series[y].i[r])).unwrap();
    let (p0, p1) = (peak(0), peak(1));

    ensure(
        drift <= 1e-9 && (12.0..=20.0).contains(&ratio) && decoupled && p1 > p0,
        format!(
            "relative drift {drift:.1e}; RK4 refinement ratio {ratio:.2}; decoupled exact {decoupled}; peaks day {p0} and {p1}"
        ),
    )
}

// ---------------------------------------------------------------- pipeline

fn reduced_config() -> PipelineConfig {
    PipelineConfig {
        lstm_widths: vec![32, 16, 16, 16],
        dense_width: 16,
        train: TrainConfig {
            batch_size: 32,
            max_epochs: 60,
            patience: 8,
            adam: AdamConfig { lr: 0.003, ..AdamConfig::default() },
        },
        plan: PlanShape { seeds_7: 1, seeds_14: 1, seeds_28: 1 },
        sample_stride: 3,
        ..PipelineConfig::default()
    }
}

/// Three pairs of closely linked regions in a chain. The epidemic starts in
/// the first pair and is seeded late and small further down the chain, so
/// each pair's takeoff is preceded by activity its neighbours can see.
fn chained_pairs() -> Scenario {
    let pops = [2.0e6, 1.0e6, 3.0e6, 1.5e6, 2.5e6, 1.2e6];
    let n = pops.len();
    let sci = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (i / 2).abs_diff(j / 2) {
                    _ if i == j => 0.0,
                    0 => 100.0,
                    1 => 1.0,
                    _ => 1e-3,
                })
                .collect()
        })
        .collect();
    Scenario {
        start_date: NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        days: 450,
        dt: 0.25,
        model: Compartments::Seir,
        beta: 0.17,
        gamma: 0.125,
        sigma: 0.2,
        hosp_frac: 0.05,
        hosp_lag: 5,
        kappa: 0.6,
        regions: (0..n).map(|i| ScenarioRegion { id: format!("R{i}"), population: pops[i] as u64 }).collect(),
        sci,
        seeding: vec![
            ScenarioSeed { region: "R0".into(), day: 0, infections: 5000.0 },
            ScenarioSeed { region: "R2".into(), day: 100, infections: 10.0 },
            ScenarioSeed { region: "R4".into(), day: 200, infections: 10.0 },
        ],
        noise_sigma: 0.1,
        seed: 7,
    }
}

const ABLATION_DAYS: [i64; 2] = [300, 315];

fn sph_ablation() -> Outcome {
    let start = Instant::now();
    let sc = chained_pairs();
    let panel = simulate_panel(&sc.to_simulation().unwrap()).unwrap();
    let sci = sc.connectivity().unwrap().unwrap();
    let dates: Vec<NaiveDate> = ABLATION_DAYS.iter().map(|&d| sc.start_date + Duration::days(d)).collect();
    let seeds: Vec<u64> = (0..5).map(|r| 1000 * r).collect();
    let reps = run_ablation(&panel, &sci, &dates, &reduced_config(), &seeds).map_err(|e| e.to_string())?;
    let mae_wins = reps.iter().filter(|r| r.sph_lower_mae()).count();
    let var_wins = reps.iter().filter(|r| r.sph_lower_variance()).count();
    for r in &reps {
        println!(
            "      seed_base {:>4}: MAE {:.3} vs {:.3}, member variance {:.4} vs {:.4}",
            r.seed_base, r.with_sph.mae, r.without_sph.mae, r.with_sph.variance, r.without_sph.variance
        );
    }
    let secs = within(Elapsed::from_secs(30 * 60), start)?;
    ensure(
        mae_wins >= 4 && var_wins >= 4,
        format!("SPH lower MAE in {mae_wins}/5, lower variance in {var_wins}/5, {secs:.0}s"),
    )
}

/// Six regions all in early exponential growth.
fn rising_panel() -> Scenario {
    let mut sc = chained_pairs();
    sc.days = 240;
    sc.beta = 0.2;
    sc.noise_sigma = 0.05;
    sc.seeding = (0..6)
        .map(|i| ScenarioSeed { region: format!("R{i}"), day: 10 * i, infections: 20.0 })
        .collect();
    sc
}

fn baseline_contract() -> Outcome {
    let sc = rising_panel();
    let panel = simulate_panel(&sc.to_simulation().unwrap()).unwrap();
    let date = sc.start_date + Duration::days(200);
    let t = panel.date_index(date).unwrap();

    let persistence = persistence_forecast(&panel, date, HORIZON).map_err(|e| e.to_string())?;
    let mut flat = true;
    for f in &persistence {
        let li = panel.location_index(&f.location).unwrap();
        let last = rolling_mean_7(panel.series(HOSPITALIZATIONS, li).unwrap())[t];
        flat &= (1..=HORIZON).all(|d| f.point(d).unwrap() == last);
    }

    let rising = panel.channel(HOSPITALIZATIONS).unwrap().iter().all(|h| h[t + HORIZON] > h[t]);
    let sci = sc.connectivity().unwrap().unwrap();
    let wf = run_walk_forward(&panel, Some(&sci), &[date], &reduced_config()).map_err(|e| e.to_string())?;
    let model = score_run("sph", &wf.forecasts(), &panel, Truth::Smoothed).unwrap();
    let base = score_run("persistence", &persistence, &panel, Truth::Smoothed).unwrap();
    let (m, b) = (model.average("sph").unwrap().mae, base.average("persistence").unwrap().mae);
    ensure(
        flat && rising && m < b,
        format!("persistence equals last value at all 28 days: {flat}; rising panel {rising}; 28-day MAE SPH {m:.3} vs persistence {b:.3}"),
    )
}

fn small_config() -> PipelineConfig {
    PipelineConfig {
        lstm_widths: vec![4, 4, 4, 4],
        dense_width: 4,
        train: TrainConfig { batch_size: 32, max_epochs: 4, patience: 2, ..TrainConfig::default() },
        plan: PlanShape { seeds_7: 1, seeds_14: 1, seeds_28: 1 },
        sample_stride: 2,
        features: FeatureToggles { sph: true, spc: true },
        ..PipelineConfig::default()
    }
}

fn leakage_guard() -> Outcome {
    let sc = rising_panel();
    let panel = simulate_panel(&sc.to_simulation().unwrap()).unwrap();
    let sci = sc.connectivity().unwrap().unwrap();
    let dates: Vec<NaiveDate> = [80, 100, 130, 160].iter().map(|&d| sc.start_date + Duration::days(d)).collect();
    let wf = run_walk_forward(&panel, Some(&sci), &dates, &small_config()).map_err(|e| e.to_string())?;
    let mut scanned = 0;
    let mut offending = 0;
    for job in &wf.jobs {
        scanned += job.sample_meta.len();
        offending += job.sample_meta.iter().filter(|m| m.latest() > job.forecast_date).count();
        leakage_scan(&job.sample_meta, job.forecast_date).map_err(|e| e.to_string())?;
    }
    // The scan itself must catch a sample reaching one day too far.
    let date = dates[0];
    let bad = SampleMeta {
        location: "R0".into(),
        input_start: date - Duration::days(40),
        input_end: date - Duration::days(12),
        target_start: date - Duration::days(11),
        target_end: date + Duration::days(1),
    };
    let caught = matches!(leakage_scan(&[bad], date), Err(Error::Leakage(_)));
    ensure(
        wf.jobs.len() == dates.len() && scanned > 0 && offending == 0 && caught,
        format!("{scanned} samples over {} dates, {offending} past the forecast date; planted leak caught {caught}", wf.jobs.len()),
    )
}

fn end_to_end(panel: &TimePanel, sc: &Scenario) -> (String, String) {
    let sci = sc.connectivity().unwrap().unwrap();
    let dates: Vec<NaiveDate> = [110, 124].iter().map(|&d| sc.start_date + Duration::days(d)).collect();
    let wf = run_walk_forward(panel, Some(&sci), &dates, &small_config()).unwrap();
    let forecasts = wf.forecasts();
    let report = score_run("sphcast", &forecasts, panel, Truth::Smoothed).unwrap();
    (to_hub_csv(&forecasts).unwrap(), report.to_csv())
}

fn determinism() -> Outcome {
    let sc = rising_panel();
    let first = end_to_end(&simulate_panel(&sc.to_simulation().unwrap()).unwrap(), &sc);
    let second = end_to_end(&simulate_panel(&sc.to_simulation().unwrap()).unwrap(), &sc);
    ensure(
        first == second,
        format!("forecast CSV {} bytes, score CSV {} bytes, identical {}", first.0.len(), first.1.len(), first == second),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let arch = SlstmConfig { input_dim: 3, lstm_widths: vec![4, 4, 4, 4], dense_width: 4, horizon: 7, n_quantiles: 23 };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sample = random_sample(&mut rng, 3, 7);
    let train = vec![sample.clone(); 320];
    let val = vec![sample.clone()];
    let config = TrainConfig { batch_size: 64, max_epochs: 200, patience: 200, adam: AdamConfig::default() };
    let out = train_member(&train, &val, &arch, &config, &LEVELS, 9).map_err(|e| e.to_string())?;
    let loss = out.params.loss(&[sample], &LEVELS).unwrap();
    let secs = within(Elapsed::from_secs(60), start)?;
    ensure(
        out.epochs_run <= 200 && loss < 1e-3,
        format!("training loss {loss:.2e} after {} epochs, {secs:.1}s", out.best_epoch),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_check),
        ("loss identities", loss_identities),
        ("WIS oracle", wis_oracle),
        ("ensemble plan", ensemble_plan),
        ("simulator", simulator),
        ("overfit sanity", overfit),
        ("leakage guard", leakage_guard),
        ("determinism", determinism),
        ("baseline contract", baseline_contract),
        ("SPH ablation", sph_ablation),
    ];
    let only = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

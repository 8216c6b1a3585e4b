//! The multi-horizon ensemble: which members exist, which forecast days each
//! one covers, and how their outputs become one quantile forecast.
//!
//! Members are direct multi-output models. A member with horizon `H` and
//! offset `o` predicts days `o ..= o + H - 1` after the forecast date. The
//! full plan staggers four 7-day subgroups, two 14-day subgroups and one
//! 28-day group so that every day of the 28-day horizon is covered by the
//! same number of members.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::{rate_to_count, ScalerParams, DATE_FORMAT};
use crate::error::{Error, Result};
use crate::neural::{SlstmParams, Tensor2};
use crate::quantiles::{format_level, level_index};

/// Forecast horizon of the ensemble, in days.
pub const HORIZON: usize = 28;

/// Members covering each day in the full plan.
pub const MEMBERS_PER_DAY: usize = 15;

/// Legal (horizon, offsets) combinations.
pub const SUBGROUPS: [(usize, &[usize]); 3] = [(7, &[1, 8, 15, 22]), (14, &[1, 15]), (28, &[1])];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemberSpec {
    pub horizon_len: usize,
    /// First predicted day, counted from the forecast date (day 1 = t + 1).
    pub target_offset: usize,
    pub seed: u64,
}

impl MemberSpec {
    pub fn validate(&self) -> Result<()> {
        let legal = SUBGROUPS
            .iter()
            .any(|(h, offsets)| *h == self.horizon_len && offsets.contains(&self.target_offset));
        if !legal || self.target_offset + self.horizon_len - 1 > HORIZON {
            return Err(Error::Invalid(format!(
                "illegal member (horizon {}, offset {})",
                self.horizon_len, self.target_offset
            )));
        }
        Ok(())
    }

    /// Last forecast day this member predicts.
    pub fn last_day(&self) -> usize {
        self.target_offset + self.horizon_len - 1
    }

    pub fn covers(&self, day: usize) -> bool {
        self.target_offset <= day && day <= self.last_day()
    }
}

/// Seeds per subgroup for each member horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanShape {
    pub seeds_7: usize,
    pub seeds_14: usize,
    pub seeds_28: usize,
}

impl PlanShape {
    /// 4 + 7 + 4 members per day, 34 in total.
    pub const FULL: PlanShape = PlanShape {
        seeds_7: 4,
        seeds_14: 7,
        seeds_28: 4,
    };

    pub fn members_per_day(&self) -> usize {
        self.seeds_7 + self.seeds_14 + self.seeds_28
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsemblePlan {
    pub shape: PlanShape,
    pub members: Vec<MemberSpec>,
}

/// The full 34-member plan. Member `i` gets seed `seed_base + i`.
pub fn build_plan(seed_base: u64) -> EnsemblePlan {
    EnsemblePlan::with_shape(seed_base, PlanShape::FULL)
}

impl EnsemblePlan {
    pub fn with_shape(seed_base: u64, shape: PlanShape) -> EnsemblePlan {
        let mut members = Vec::new();
        for (horizon, offsets) in SUBGROUPS {
            let seeds = match horizon {
                7 => shape.seeds_7,
                14 => shape.seeds_14,
                _ => shape.seeds_28,
            };
            for &offset in offsets {
                for _ in 0..seeds {
                    let seed = seed_base.wrapping_add(members.len() as u64);
                    members.push(MemberSpec {
                        horizon_len: horizon,
                        target_offset: offset,
                        seed,
                    });
                }
            }
        }
        EnsemblePlan { shape, members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members_per_day(&self) -> usize {
        self.shape.members_per_day()
    }

    /// Indices of the members predicting forecast day `day` (1-based).
    pub fn covering(&self, day: usize) -> Vec<usize> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.covers(day))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Median of exactly 15 member predictions.
pub fn aggregate_median(predictions: &[f64]) -> Result<f64> {
    if predictions.len() != MEMBERS_PER_DAY {
        return Err(Error::Invalid(format!(
            "median aggregation expects {MEMBERS_PER_DAY} values, got {}",
            predictions.len()
        )));
    }
    median(predictions)
}

/// Median of any nonempty set of finite values; the mean of the two middle
/// order statistics for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("median of no values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("median of non-finite values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Sort a quantile row ascending so that quantiles do not cross.
pub fn reorder_quantiles(row: &[f64]) -> Vec<f64> {
    let mut v = row.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Quantile forecast for one location and forecast date, in counts.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForecast {
    pub forecast_date: NaiveDate,
    pub location: String,
    pub levels: Vec<f64>,
    /// `[horizon × levels]`; row `k` is day `k + 1`.
    pub values: Tensor2,
}

impl QuantileForecast {
    pub fn horizon(&self) -> usize {
        self.values.rows()
    }

    pub fn target_date(&self, day: usize) -> NaiveDate {
        self.forecast_date + Duration::days(day as i64)
    }

    /// The 0.5 quantile at 1-based `day`.
    pub fn point(&self, day: usize) -> Result<f64> {
        let mi = level_index(&self.levels, 0.5).ok_or_else(|| Error::Invalid("no median level".into()))?;
        Ok(self.values.get(day - 1, mi))
    }

    pub fn row(&self, day: usize) -> &[f64] {
        self.values.row(day - 1)
    }

    pub fn is_monotone(&self) -> bool {
        (0..self.horizon()).all(|k| self.values.row(k).windows(2).all(|w| w[0] <= w[1]))
    }
}

/// Model inputs for one location at the forecast date.
#[derive(Debug, Clone)]
pub struct LocationInput {
    pub location: String,
    pub population: u64,
    pub x_short: Tensor2,
    pub x_long: Tensor2,
}

#[derive(Debug, Clone)]
pub struct ForecastInputs {
    pub forecast_date: NaiveDate,
    pub locations: Vec<LocationInput>,
    /// Scaler of the target (hospitalization rate) channel.
    pub target_scaler: ScalerParams,
    pub levels: Vec<f64>,
}

/// Count-space predictions of every member: `[member][location]`, each
/// `[member horizon × levels]`, neither clamped nor reordered.
pub type MemberPredictions = Vec<Vec<Tensor2>>;

fn missing_members(plan: &EnsemblePlan, members: &BTreeMap<usize, SlstmParams>) -> Result<()> {
    let absent: Vec<String> = plan
        .members
        .iter()
        .enumerate()
        .filter(|(i, _)| !members.contains_key(i))
        .map(|(i, m)| format!("#{i} (horizon {}, offset {}, seed {})", m.horizon_len, m.target_offset, m.seed))
        .collect();
    if absent.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingMembers(absent.join(", ")))
    }
}

/// Run every member on every location and map outputs back to counts.
pub fn member_predictions(
    plan: &EnsemblePlan,
    members: &BTreeMap<usize, SlstmParams>,
    inputs: &ForecastInputs,
) -> Result<MemberPredictions> {
    missing_members(plan, members)?;
    let samples: Vec<crate::neural::Sample> = inputs
        .locations
        .iter()
        .map(|l| crate::neural::Sample {
            x_short: l.x_short.clone(),
            x_long: l.x_long.clone(),
            target: Vec::new(),
        })
        .collect();
    plan.members
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let params = &members[&i];
            if params.horizon() != spec.horizon_len || params.n_quantiles() != inputs.levels.len() {
                return Err(Error::Shape(format!(
                    "member #{i}: network has horizon {} and {} heads, plan expects {} and {}",
                    params.horizon(),
                    params.n_quantiles(),
                    spec.horizon_len,
                    inputs.levels.len()
                )));
            }
            let outs = params.predict(&samples)?;
            Ok(outs
                .into_iter()
                .zip(&inputs.locations)
                .map(|(scaled, loc)| {
                    scaled.map(|v| rate_to_count(inputs.target_scaler.invert(v), loc.population))
                })
                .collect())
        })
        .collect()
}

/// Median over covering members per (location, day, level), clamped at zero,
/// then reordered per row.
pub fn aggregate(plan: &EnsemblePlan, predictions: &MemberPredictions, inputs: &ForecastInputs) -> Result<Vec<QuantileForecast>> {
    if predictions.len() != plan.len() {
        return Err(Error::Shape(format!("{} member outputs for {} members", predictions.len(), plan.len())));
    }
    let nq = inputs.levels.len();
    let coverage: Vec<Vec<usize>> = (1..=HORIZON).map(|d| plan.covering(d)).collect();
    for (d, c) in coverage.iter().enumerate() {
        if c.len() != plan.members_per_day() {
            return Err(Error::Invalid(format!(
                "day {} covered by {} members, expected {}",
                d + 1,
                c.len(),
                plan.members_per_day()
            )));
        }
    }
    let mut out = Vec::with_capacity(inputs.locations.len());
    let mut column = Vec::with_capacity(plan.members_per_day());
    for (li, loc) in inputs.locations.iter().enumerate() {
        let mut values = Tensor2::zeros(HORIZON, nq);
        for (k, covering) in coverage.iter().enumerate() {
            let day = k + 1;
            let mut row = vec![0.0; nq];
            for (qi, slot) in row.iter_mut().enumerate() {
                column.clear();
                for &m in covering {
                    let spec = &plan.members[m];
                    column.push(predictions[m][li].get(day - spec.target_offset, qi));
                }
                let med = if column.len() == MEMBERS_PER_DAY {
                    aggregate_median(&column)?
                } else {
                    median(&column)?
                };
                *slot = med.max(0.0);
            }
            values.row_mut(k).copy_from_slice(&reorder_quantiles(&row));
        }
        out.push(QuantileForecast {
            forecast_date: inputs.forecast_date,
            location: loc.location.clone(),
            levels: inputs.levels.clone(),
            values,
        });
    }
    Ok(out)
}

/// Ensemble forecast for every location.
pub fn forecast(
    plan: &EnsemblePlan,
    members: &BTreeMap<usize, SlstmParams>,
    inputs: &ForecastInputs,
) -> Result<Vec<QuantileForecast>> {
    let preds = member_predictions(plan, members, inputs)?;
    aggregate(plan, &preds, inputs)
}

/// Mean over locations and days of the sample variance, across the covering
/// members, of the prediction at `level_idx`.
pub fn member_variance(plan: &EnsemblePlan, predictions: &MemberPredictions, level_idx: usize) -> f64 {
    let n_loc = predictions.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut cells = 0usize;
    for li in 0..n_loc {
        for day in 1..=HORIZON {
            let vals: Vec<f64> = plan
                .covering(day)
                .into_iter()
                .map(|m| predictions[m][li].get(day - plan.members[m].target_offset, level_idx))
                .collect();
            if vals.len() < 2 {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            total += var;
            cells += 1;
        }
    }
    if cells == 0 {
        0.0
    } else {
        total / cells as f64
    }
}

pub const HUB_HEADER: &str = "forecast_date,target,target_end_date,location,type,quantile,value";

pub fn target_name(day: usize) -> String {
    format!("{day} day ahead inc hosp")
}

fn parse_target(s: &str) -> Option<usize> {
    s.strip_suffix(" day ahead inc hosp")?.trim().parse().ok()
}

/// Render forecasts in the hub quantile format: per location and day, one
/// `point` row (the 0.5 quantile) followed by one row per level.
pub fn to_hub_csv(forecasts: &[QuantileForecast]) -> Result<String> {
    let mut s = String::from(HUB_HEADER);
    s.push('\n');
    for f in forecasts {
        let date = f.forecast_date.format(DATE_FORMAT);
        for day in 1..=f.horizon() {
            let end = f.target_date(day).format(DATE_FORMAT);
            let target = target_name(day);
            s.push_str(&format!("{date},{target},{end},{},point,NA,{}\n", f.location, f.point(day)?));
            for (qi, &q) in f.levels.iter().enumerate() {
                s.push_str(&format!(
                    "{date},{target},{end},{},quantile,{},{}\n",
                    f.location,
                    format_level(q),
                    f.values.get(day - 1, qi)
                ));
            }
        }
    }
    Ok(s)
}

pub fn write_hub_csv(path: impl AsRef<Path>, forecasts: &[QuantileForecast]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_hub_csv(forecasts)?).map_err(|e| Error::io(path, e))
}

/// Read a hub-format file back into forecasts. Every (forecast date,
/// location) group must hold every level for days `1..=H` with no gaps.
/// `point` rows are accepted and not used.
pub fn read_hub_csv(path: impl AsRef<Path>, levels: &[f64]) -> Result<Vec<QuantileForecast>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_hub_csv(&text, path, levels)
}

pub fn parse_hub_csv(text: &str, path: &Path, levels: &[f64]) -> Result<Vec<QuantileForecast>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != HUB_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {HUB_HEADER}"),
        });
    }
    type Cells = BTreeMap<(usize, usize), f64>;
    let mut groups: BTreeMap<(NaiveDate, String), Cells> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let date = NaiveDate::parse_from_str(&record[0], DATE_FORMAT).map_err(|_| bad(format!("bad date {:?}", &record[0])))?;
        let day = parse_target(&record[1]).ok_or_else(|| bad(format!("bad target {:?}", &record[1])))?;
        if day == 0 {
            return Err(bad("target day must be positive".into()));
        }
        let end = NaiveDate::parse_from_str(&record[2], DATE_FORMAT).map_err(|_| bad(format!("bad date {:?}", &record[2])))?;
        if end != date + Duration::days(day as i64) {
            return Err(bad(format!("target_end_date {end} inconsistent with {day} days after {date}")));
        }
        match &record[4] {
            "point" => continue,
            "quantile" => {}
            other => return Err(bad(format!("bad type {other:?}"))),
        }
        let q: f64 = record[5].parse().map_err(|_| bad(format!("bad quantile {:?}", &record[5])))?;
        let qi = level_index(levels, q).ok_or_else(|| bad(format!("unexpected quantile level {q}")))?;
        let value: f64 = record[6].parse().map_err(|_| bad(format!("bad value {:?}", &record[6])))?;
        let cells = groups.entry((date, record[3].to_string())).or_default();
        if cells.insert((day, qi), value).is_some() {
            return Err(bad(format!("duplicate row for day {day}, quantile {q}")));
        }
    }
    groups
        .into_iter()
        .map(|((forecast_date, location), cells)| {
            let horizon = cells.keys().map(|(d, _)| *d).max().unwrap_or(0);
            let mut values = Tensor2::zeros(horizon, levels.len());
            for day in 1..=horizon {
                for qi in 0..levels.len() {
                    let v = cells.get(&(day, qi)).ok_or_else(|| {
                        Error::Invalid(format!(
                            "{}: {location} {forecast_date}: missing day {day} quantile {}",
                            path.display(),
                            levels[qi]
                        ))
                    })?;
                    values.set(day - 1, qi, *v);
                }
            }
            Ok(QuantileForecast {
                forecast_date,
                location,
                levels: levels.to_vec(),
                values,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DateRange;
    use crate::neural::{SlstmConfig, LONG_WINDOW, SHORT_WINDOW};
    use crate::quantiles::LEVELS;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_plan_has_34_members_and_15_per_day() {
        let plan = build_plan(100);
        assert_eq!(plan.len(), 34);
        let by_h = |h| plan.members.iter().filter(|m| m.horizon_len == h).count();
        assert_eq!((by_h(7), by_h(14), by_h(28)), (16, 14, 4));
        for day in 1..=28 {
            assert_eq!(plan.covering(day).len(), 15, "day {day}");
        }
        for m in &plan.members {
            m.validate().unwrap();
        }
        let seeds: std::collections::BTreeSet<u64> = plan.members.iter().map(|m| m.seed).collect();
        assert_eq!(seeds.len(), 34);
        assert_eq!(plan, build_plan(100));
    }

    #[test]
    fn day_13_is_covered_by_the_expected_subgroups() {
        let plan = build_plan(0);
        let mut counts = BTreeMap::new();
        for i in plan.covering(13) {
            let m = &plan.members[i];
            *counts.entry((m.horizon_len, m.target_offset)).or_insert(0) += 1;
        }
        assert_eq!(counts, BTreeMap::from([((7, 8), 4), ((14, 1), 7), ((28, 1), 4)]));
    }

    #[test]
    fn reduced_plan_covers_each_day_three_times() {
        let plan = EnsemblePlan::with_shape(0, PlanShape { seeds_7: 1, seeds_14: 1, seeds_28: 1 });
        assert_eq!(plan.len(), 7);
        assert!((1..=28).all(|d| plan.covering(d).len() == 3));
    }

    #[test]
    fn illegal_members_are_rejected() {
        assert!(MemberSpec { horizon_len: 7, target_offset: 2, seed: 0 }.validate().is_err());
        assert!(MemberSpec { horizon_len: 14, target_offset: 22, seed: 0 }.validate().is_err());
        assert!(MemberSpec { horizon_len: 28, target_offset: 1, seed: 0 }.validate().is_ok());
    }

    #[test]
    fn median_examples() {
        let xs: Vec<f64> = (1..=15).map(f64::from).collect();
        assert_eq!(aggregate_median(&xs).unwrap(), 8.0);
        let mut robust = vec![5.0; 14];
        robust.push(1e9);
        assert_eq!(aggregate_median(&robust).unwrap(), 5.0);
        let mut shuffled = xs.clone();
        shuffled.reverse();
        shuffled.swap(2, 9);
        assert_eq!(aggregate_median(&shuffled).unwrap(), 8.0);
        assert!(aggregate_median(&xs[..14]).is_err());
        assert_eq!(median(&[1.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn reorder_examples() {
        let sorted: Vec<f64> = LEVELS.to_vec();
        assert_eq!(reorder_quantiles(&sorted), sorted);
        assert_eq!(reorder_quantiles(&[3.0, 1.0, 2.0]), vec![1.0, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn outlier_member_moves_median_at_most_one_gap(xs in prop::collection::vec(-1e3f64..1e3, 15), which in 0usize..15) {
            let base = aggregate_median(&xs).unwrap();
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            let gap = sorted[8] - sorted[7];
            let mut ys = xs.clone();
            ys[which] = 1e9;
            let moved = aggregate_median(&ys).unwrap();
            prop_assert!((moved - base).abs() <= gap + 1e-12);
        }

        #[test]
        fn reorder_preserves_multiset(row in prop::collection::vec(-1e3f64..1e3, 23)) {
            let out = reorder_quantiles(&row);
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
            let mut a = row.clone();
            a.sort_by(f64::total_cmp);
            prop_assert_eq!(a, out);
        }
    }

    fn tiny_members(plan: &EnsemblePlan, seed: u64) -> BTreeMap<usize, SlstmParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        plan.members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let cfg = SlstmConfig {
                    input_dim: 3,
                    lstm_widths: vec![2, 2],
                    dense_width: 2,
                    horizon: m.horizon_len,
                    n_quantiles: LEVELS.len(),
                };
                (i, SlstmParams::init(cfg, &mut rng))
            })
            .collect()
    }

    fn inputs(n_loc: usize, seed: u64) -> ForecastInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let range = DateRange::new(NaiveDate::MIN, NaiveDate::MIN);
        ForecastInputs {
            forecast_date: NaiveDate::from_ymd_opt(2022, 1, 3).unwrap(),
            locations: (0..n_loc)
                .map(|i| LocationInput {
                    location: format!("L{i}"),
                    population: 1_000_000 * (i as u64 + 1),
                    x_short: Tensor2::uniform(SHORT_WINDOW, 3, 1.0, &mut rng),
                    x_long: Tensor2::uniform(LONG_WINDOW, 3, 1.0, &mut rng),
                })
                .collect(),
            target_scaler: ScalerParams::new("h", 0.0, 2.0, range).unwrap(),
            levels: LEVELS.to_vec(),
        }
    }

    #[test]
    fn forecasts_are_monotone_and_nonnegative() {
        let plan = build_plan(7);
        let members = tiny_members(&plan, 1);
        let fc = forecast(&plan, &members, &inputs(3, 2)).unwrap();
        assert_eq!(fc.len(), 3);
        for f in &fc {
            assert_eq!(f.values.shape(), (28, 23));
            assert!(f.is_monotone());
            assert!(f.values.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn identical_members_reproduce_a_single_member() {
        let plan = build_plan(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SlstmConfig {
            input_dim: 3,
            lstm_widths: vec![2],
            dense_width: 2,
            horizon: 28,
            n_quantiles: 23,
        };
        let one = SlstmParams::init(cfg, &mut rng);
        // Build members whose outputs equal the 28-day network on their window.
        let inp = inputs(2, 4);
        let full = member_predictions(
            &EnsemblePlan { shape: PlanShape { seeds_7: 0, seeds_14: 0, seeds_28: 1 }, members: vec![plan.members[30].clone()] },
            &BTreeMap::from([(0, one.clone())]),
            &inp,
        )
        .unwrap();
        let preds: MemberPredictions = plan
            .members
            .iter()
            .map(|m| {
                full[0]
                    .iter()
                    .map(|t| {
                        let mut sub = Tensor2::zeros(m.horizon_len, 23);
                        for k in 0..m.horizon_len {
                            sub.row_mut(k).copy_from_slice(t.row(m.target_offset - 1 + k));
                        }
                        sub
                    })
                    .collect()
            })
            .collect();
        let agg = aggregate(&plan, &preds, &inp).unwrap();
        for (li, f) in agg.iter().enumerate() {
            for k in 0..28 {
                let expect = reorder_quantiles(&full[0][li].row(k).iter().map(|v| v.max(0.0)).collect::<Vec<_>>());
                assert_eq!(f.values.row(k), expect.as_slice());
            }
        }
    }

    #[test]
    fn one_diverged_member_per_day_is_ignored() {
        let plan = build_plan(0);
        let inp = inputs(1, 5);
        let preds: MemberPredictions = plan
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let v = if i == 0 { 1e12 } else { 42.0 };
                vec![Tensor2::from_vec(m.horizon_len, 23, vec![v; m.horizon_len * 23]).unwrap()]
            })
            .collect();
        let agg = aggregate(&plan, &preds, &inp).unwrap();
        assert!(agg[0].values.data().iter().all(|&v| v == 42.0));
    }

    #[test]
    fn missing_member_is_named() {
        let plan = build_plan(0);
        let mut members = tiny_members(&plan, 1);
        members.remove(&5);
        let err = forecast(&plan, &members, &inputs(1, 2)).unwrap_err();
        assert!(matches!(err, Error::MissingMembers(ref s) if s.contains("#5")), "{err}");
    }

    #[test]
    fn hub_csv_round_trip() {
        let plan = build_plan(7);
        let fc = forecast(&plan, &tiny_members(&plan, 1), &inputs(2, 2)).unwrap();
        let text = to_hub_csv(&fc).unwrap();
        assert!(text.starts_with(HUB_HEADER));
        assert!(text.contains(",28 day ahead inc hosp,2022-01-31,L1,point,NA,"));
        assert!(text.contains(",1 day ahead inc hosp,2022-01-04,L0,quantile,0.025,"));
        assert_eq!(text.lines().count(), 1 + 2 * 28 * 24);
        let back = parse_hub_csv(&text, Path::new("x"), &LEVELS).unwrap();
        assert_eq!(back, fc);
    }

    #[test]
    fn hub_csv_with_gap_is_rejected() {
        let plan = build_plan(7);
        let fc = forecast(&plan, &tiny_members(&plan, 1), &inputs(1, 2)).unwrap();
        let text: String = to_hub_csv(&fc)
            .unwrap()
            .lines()
            .filter(|l| !l.contains(",5 day ahead inc hosp,") || !l.contains(",0.500,"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(parse_hub_csv(&text, Path::new("x"), &LEVELS).is_err());
    }
}

//! Point metrics, interval and weighted interval scores, coverage, and the
//! per-horizon score report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use log::warn;

use crate::data::{rolling_mean_7, TimePanel, HOSPITALIZATIONS};
use crate::ensemble::QuantileForecast;
use crate::error::{Error, Result};
use crate::quantiles::level_index;

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} truth values, {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("no values to score".into()));
    }
    Ok(())
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / truth.len() as f64)
}

/// Mean absolute percentage error, in percent. Fails on non-positive truth.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    if let Some(y) = truth.iter().find(|&&y| !(y > 0.0)) {
        return Err(Error::Invalid(format!("MAPE undefined for truth value {y}")));
    }
    let s: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).abs() / y).sum();
    Ok(100.0 * s / truth.len() as f64)
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let s: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok((s / truth.len() as f64).sqrt())
}

/// A score split into its sharpness and calibration parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Decomposed {
    pub total: f64,
    pub dispersion: f64,
    pub under: f64,
    pub over: f64,
}

impl Decomposed {
    fn scaled(self, c: f64) -> Decomposed {
        Decomposed {
            total: c * self.total,
            dispersion: c * self.dispersion,
            under: c * self.under,
            over: c * self.over,
        }
    }

    fn add(&mut self, o: Decomposed) {
        self.total += o.total;
        self.dispersion += o.dispersion;
        self.under += o.under;
        self.over += o.over;
    }
}

/// Interval score of the central `(1 − α)` interval `[l, u]`.
///
/// `under` is the penalty when the truth falls below the interval, i.e. the
/// forecast was too high; `over` when it lands above.
pub fn interval_score(y: f64, l: f64, u: f64, alpha: f64) -> Result<Decomposed> {
    if l > u {
        return Err(Error::Invalid(format!("interval lower bound {l} above upper {u}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let dispersion = u - l;
    let below = if y < l { 2.0 / alpha * (l - y) } else { 0.0 };
    let above = if y > u { 2.0 / alpha * (y - u) } else { 0.0 };
    Ok(Decomposed {
        total: dispersion + below + above,
        dispersion,
        under: below,
        over: above,
    })
}

/// Central intervals implied by a symmetric level set: `(α, lower index,
/// upper index)` from widest to narrowest, plus the median index.
pub fn central_intervals(levels: &[f64]) -> Result<(usize, Vec<(f64, usize, usize)>)> {
    let median = level_index(levels, 0.5).ok_or_else(|| Error::Invalid("level set has no median".into()))?;
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("levels must be strictly increasing".into()));
    }
    let mut out = Vec::new();
    for (lo, &q) in levels[..median].iter().enumerate() {
        let hi = level_index(levels, 1.0 - q)
            .ok_or_else(|| Error::Invalid(format!("level {q} has no symmetric partner")))?;
        out.push((2.0 * q, lo, hi));
    }
    if levels.len() != 2 * out.len() + 1 {
        return Err(Error::Invalid("level set is not symmetric about the median".into()));
    }
    Ok((median, out))
}

/// Weighted interval score of one quantile row.
///
/// The half-weighted absolute error of the median counts as under- or
/// over-prediction depending on which side of the median the truth lies.
pub fn wis(y: f64, row: &[f64], levels: &[f64]) -> Result<Decomposed> {
    if row.len() != levels.len() {
        return Err(Error::Shape(format!("{} values for {} levels", row.len(), levels.len())));
    }
    if row.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Invalid("quantile row is not monotone".into()));
    }
    let (mi, intervals) = central_intervals(levels)?;
    let m = row[mi];
    let mut acc = Decomposed {
        total: 0.5 * (y - m).abs(),
        ..Decomposed::default()
    };
    if y > m {
        acc.over = acc.total;
    } else {
        acc.under = acc.total;
    }
    for &(alpha, lo, hi) in &intervals {
        acc.add(interval_score(y, row[lo], row[hi], alpha)?.scaled(alpha / 2.0));
    }
    Ok(acc.scaled(1.0 / (intervals.len() as f64 + 0.5)))
}

/// Fraction of observations inside `[lower, upper]`.
pub fn coverage(truth: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64> {
    check_pair(truth, lower)?;
    check_pair(truth, upper)?;
    let inside = truth
        .iter()
        .zip(lower.iter().zip(upper))
        .filter(|(y, (l, u))| **l <= **y && **y <= **u)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

/// Scores of one model at one horizon day, or averaged over days.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub model: String,
    /// `None` for the average over all days.
    pub day: Option<usize>,
    pub mae: f64,
    /// `None` when some truth value was not positive.
    pub mape: Option<f64>,
    pub rmse: f64,
    pub wis: Decomposed,
    pub coverage95: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
}

pub const REPORT_HEADER: &str = "model,horizon,mae,mape,rmse,wis,dispersion,under,over,coverage95";

/// Which hospitalization series forecasts are scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    Smoothed,
    Raw,
}

/// Score forecasts of one model against the hospitalization channel.
///
/// Metrics are computed across locations for each forecast date and horizon
/// day, then averaged over forecast dates.
pub fn score_run(model: &str, forecasts: &[QuantileForecast], panel: &TimePanel, truth: Truth) -> Result<ScoreReport> {
    let first = forecasts.first().ok_or_else(|| Error::Invalid("no forecasts to score".into()))?;
    let horizon = first.horizon();
    let levels = first.levels.clone();
    let lo95 = level_index(&levels, 0.025).ok_or_else(|| Error::Invalid("no 0.025 level".into()))?;
    let hi95 = level_index(&levels, 0.975).ok_or_else(|| Error::Invalid("no 0.975 level".into()))?;
    let mid = level_index(&levels, 0.5).ok_or_else(|| Error::Invalid("no median level".into()))?;

    let observed: Vec<Vec<f64>> = panel
        .channel(HOSPITALIZATIONS)?
        .iter()
        .map(|s| match truth {
            Truth::Smoothed => rolling_mean_7(s),
            Truth::Raw => s.clone(),
        })
        .collect();

    let mut by_date: BTreeMap<NaiveDate, Vec<&QuantileForecast>> = BTreeMap::new();
    let mut gaps = Vec::new();
    for f in forecasts {
        if f.horizon() != horizon || f.levels != levels {
            return Err(Error::Shape(format!(
                "forecast for {} on {} differs in horizon or levels",
                f.location, f.forecast_date
            )));
        }
        match panel.location_index(&f.location) {
            None => gaps.push(format!("{} (unknown location)", f.location)),
            Some(_) => {
                for day in 1..=horizon {
                    if panel.date_index(f.target_date(day)).is_none() {
                        gaps.push(format!("{} {}", f.location, f.target_date(day)));
                    }
                }
            }
        }
        by_date.entry(f.forecast_date).or_default().push(f);
    }
    if !gaps.is_empty() {
        return Err(Error::MissingTruth(gaps.join(", ")));
    }

    let mut rows = Vec::with_capacity(horizon + 1);
    let mut mape_warned = false;
    for day in 1..=horizon {
        let n_dates = by_date.len() as f64;
        let mut row = ScoreRow {
            model: model.to_string(),
            day: Some(day),
            mae: 0.0,
            mape: Some(0.0),
            rmse: 0.0,
            wis: Decomposed::default(),
            coverage95: 0.0,
        };
        for group in by_date.values() {
            let mut y = Vec::with_capacity(group.len());
            let mut point = Vec::with_capacity(group.len());
            let mut lower = Vec::with_capacity(group.len());
            let mut upper = Vec::with_capacity(group.len());
            let mut w = Decomposed::default();
            for f in group {
                let li = panel.location_index(&f.location).unwrap();
                let ti = panel.date_index(f.target_date(day)).unwrap();
                let truth = observed[li][ti];
                let q = f.row(day);
                y.push(truth);
                point.push(q[mid]);
                lower.push(q[lo95]);
                upper.push(q[hi95]);
                w.add(wis(truth, q, &levels)?);
            }
            let n = group.len() as f64;
            row.mae += mae(&y, &point)? / n_dates;
            row.rmse += rmse(&y, &point)? / n_dates;
            row.coverage95 += coverage(&y, &lower, &upper)? / n_dates;
            row.wis.add(w.scaled(1.0 / (n * n_dates)));
            row.mape = match (row.mape, mape(&y, &point)) {
                (Some(acc), Ok(v)) => Some(acc + v / n_dates),
                _ => {
                    if !mape_warned {
                        warn!("{model}: MAPE omitted, truth not strictly positive");
                        mape_warned = true;
                    }
                    None
                }
            };
        }
        rows.push(row);
    }
    let k = horizon as f64;
    let mut mean = ScoreRow {
        model: model.to_string(),
        day: None,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / k,
        mape: rows.iter().map(|r| r.mape).sum::<Option<f64>>().map(|s| s / k),
        rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / k,
        wis: Decomposed::default(),
        coverage95: rows.iter().map(|r| r.coverage95).sum::<f64>() / k,
    };
    for r in &rows {
        mean.wis.add(r.wis.scaled(1.0 / k));
    }
    rows.push(mean);
    Ok(ScoreReport { rows })
}

impl ScoreReport {
    pub fn merge(mut self, other: ScoreReport) -> ScoreReport {
        self.rows.extend(other.rows);
        self
    }

    pub fn models(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.model.as_str()) {
                seen.push(&r.model);
            }
        }
        seen
    }

    pub fn row(&self, model: &str, day: Option<usize>) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.model == model && r.day == day)
    }

    /// The 28-day (or whole-horizon) average row of a model.
    pub fn average(&self, model: &str) -> Option<&ScoreRow> {
        self.row(model, None)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let day = r.day.map_or_else(|| "mean".to_string(), |d| d.to_string());
            let mape = r.mape.map_or_else(|| "NA".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.model, day, r.mae, mape, r.rmse, r.wis.total, r.wis.dispersion, r.wis.under, r.wis.over, r.coverage95
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| model | horizon | MAE | MAPE | RMSE | WIS | dispersion | under | over | cov95 |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let day = r.day.map_or_else(|| "mean".to_string(), |d| d.to_string());
            let mape = r.mape.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |",
                r.model, day, r.mae, mape, r.rmse, r.wis.total, r.wis.dispersion, r.wis.under, r.wis.over, r.coverage95
            );
        }
        s
    }

    /// Line chart of MAE (solid) and WIS (dashed) by horizon day.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 360.0;
        const PAD: f64 = 48.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let daily: Vec<&ScoreRow> = self.rows.iter().filter(|r| r.day.is_some()).collect();
        let max_day = daily.iter().filter_map(|r| r.day).max().unwrap_or(1).max(2) as f64;
        let max_y = daily
            .iter()
            .flat_map(|r| [r.mae, r.wis.total])
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let x = |d: usize| PAD + (d as f64 - 1.0) / (max_day - 1.0) * (W - 2.0 * PAD);
        let y = |v: f64| H - PAD - v / max_y * (H - 2.0 * PAD);

        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n");
        let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<path d=\"M{PAD} {PAD} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
            H - PAD,
            W - PAD
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">horizon day</text>", W / 2.0, H - 12.0);
        let _ = writeln!(s, "<text x=\"8\" y=\"{}\">{max_y:.3}</text>", PAD - 4.0);
        for (mi, model) in self.models().iter().enumerate() {
            let color = COLORS[mi % COLORS.len()];
            let rows: Vec<&&ScoreRow> = daily.iter().filter(|r| r.model == *model).collect();
            for (metric, dash) in [("mae", ""), ("wis", " stroke-dasharray=\"5 3\"")] {
                let pts: Vec<String> = rows
                    .iter()
                    .map(|r| {
                        let v = if metric == "mae" { r.mae } else { r.wis.total };
                        format!("{:.2},{:.2}", x(r.day.unwrap()), y(v))
                    })
                    .collect();
                let _ = writeln!(
                    s,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"{dash}/>",
                    pts.join(" ")
                );
            }
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{model}</text>",
                W - PAD - 100.0,
                PAD + 14.0 * mi as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

//! Incidence data: parsing, validation, smoothing, rate conversion and scaling.
//!
//! A [`TimePanel`] holds one value per (location, date) for each named channel.
//! Dates are always contiguous; a gap anywhere in an input file is an error
//! rather than something to interpolate over, because the trailing 7-day mean
//! assumes one observation per calendar day.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CASES: &str = "cases";
pub const HOSPITALIZATIONS: &str = "hospitalizations";

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Width of the trailing smoothing window, in days.
pub const SMOOTHING_WINDOW: usize = 7;

/// Rates are expressed per this many residents.
pub const RATE_DENOMINATOR: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub name: String,
    pub population: u64,
}

impl Location {
    pub fn new(id: impl Into<String>, population: u64) -> Self {
        let id = id.into();
        Location {
            name: id.clone(),
            id,
            population,
        }
    }
}

/// Inclusive calendar-date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        DateRange { start, end }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn len_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }
}

/// Per-location daily series for a fixed set of locations and contiguous dates.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePanel {
    locations: Vec<Location>,
    start: NaiveDate,
    n_dates: usize,
    channels: BTreeMap<String, Vec<Vec<f64>>>,
}

impl TimePanel {
    /// An empty panel over `n_dates` consecutive days starting at `start`.
    pub fn new(locations: Vec<Location>, start: NaiveDate, n_dates: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for loc in &locations {
            if loc.population == 0 {
                return Err(Error::MissingPopulation(loc.id.clone()));
            }
            if !seen.insert(loc.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate location id {}", loc.id)));
            }
        }
        Ok(TimePanel {
            locations,
            start,
            n_dates,
            channels: BTreeMap::new(),
        })
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_dates(&self) -> usize {
        self.n_dates
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    /// Last date in the panel. Panics on an empty date axis.
    pub fn end(&self) -> NaiveDate {
        assert!(self.n_dates > 0, "empty panel has no end date");
        self.date(self.n_dates - 1)
    }

    pub fn date(&self, index: usize) -> NaiveDate {
        self.start + Duration::days(index as i64)
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        (0..self.n_dates).map(|i| self.date(i))
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.start).num_days();
        (offset >= 0 && (offset as usize) < self.n_dates).then_some(offset as usize)
    }

    pub fn location_index(&self, id: &str) -> Option<usize> {
        self.locations.iter().position(|l| l.id == id)
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }

    pub fn has_channel(&self, name: &str) -> bool {
        self.channels.contains_key(name)
    }

    /// Values of a channel, indexed `[location][date]`.
    pub fn channel(&self, name: &str) -> Result<&[Vec<f64>]> {
        self.channels
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    pub fn series(&self, name: &str, location: usize) -> Result<&[f64]> {
        self.channel(name)?
            .get(location)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Shape(format!("location index {location} out of range")))
    }

    pub fn insert_channel(&mut self, name: impl Into<String>, values: Vec<Vec<f64>>) -> Result<()> {
        let name = name.into();
        if values.len() != self.locations.len() {
            return Err(Error::Shape(format!(
                "channel {name}: {} location rows, panel has {}",
                values.len(),
                self.locations.len()
            )));
        }
        if let Some(row) = values.iter().find(|row| row.len() != self.n_dates) {
            return Err(Error::Shape(format!(
                "channel {name}: row of {} dates, panel has {}",
                row.len(),
                self.n_dates
            )));
        }
        self.channels.insert(name, values);
        Ok(())
    }

    pub fn with_channel(mut self, name: impl Into<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        self.insert_channel(name, values)?;
        Ok(self)
    }

    /// A copy holding only dates `<= end`. Dates before the panel start yield
    /// an empty date axis.
    pub fn truncate_to(&self, end: NaiveDate) -> TimePanel {
        let keep = ((end - self.start).num_days() + 1).clamp(0, self.n_dates as i64) as usize;
        TimePanel {
            locations: self.locations.clone(),
            start: self.start,
            n_dates: keep,
            channels: self
                .channels
                .iter()
                .map(|(k, rows)| (k.clone(), rows.iter().map(|r| r[..keep].to_vec()).collect()))
                .collect(),
        }
    }

    /// Assemble a panel from parsed channel fragments and a population table.
    ///
    /// The panel spans the dates covered by every fragment. Any missing cell
    /// inside that span is an error.
    pub fn from_fragments(
        populations: &[(String, u64)],
        fragments: &[ChannelFragment],
    ) -> Result<TimePanel> {
        let first = fragments
            .first()
            .ok_or_else(|| Error::Invalid("no channel fragments".into()))?;
        let pop: BTreeMap<&str, u64> = populations.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let locations = first
            .locations
            .iter()
            .map(|id| {
                pop.get(id.as_str())
                    .map(|&p| Location::new(id.clone(), p))
                    .ok_or_else(|| Error::MissingPopulation(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;

        let start = fragments.iter().map(|f| f.start).max().expect("nonempty");
        let end = fragments.iter().map(|f| f.end()).min().expect("nonempty");
        if end < start {
            return Err(Error::Invalid("channel fragments share no dates".into()));
        }
        for f in fragments {
            if f.start != start || f.end() != end {
                warn!(
                    "channel {} trimmed from {}..{} to {}..{}",
                    f.channel,
                    f.start,
                    f.end(),
                    start,
                    end
                );
            }
        }
        let n_dates = ((end - start).num_days() + 1) as usize;
        let mut panel = TimePanel::new(locations, start, n_dates)?;

        for f in fragments {
            let offset = (start - f.start).num_days() as usize;
            let mut rows = Vec::with_capacity(panel.n_locations());
            for loc in &panel.locations {
                let li = f
                    .locations
                    .iter()
                    .position(|id| *id == loc.id)
                    .ok_or_else(|| Error::MissingCell {
                        location: loc.id.clone(),
                        date: start,
                    })?;
                let row = (0..n_dates)
                    .map(|t| {
                        f.values[li][offset + t].ok_or_else(|| Error::MissingCell {
                            location: loc.id.clone(),
                            date: start + Duration::days(t as i64),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
            if let Some(extra) = f.locations.iter().find(|id| panel.location_index(id).is_none()) {
                return Err(Error::UnknownLocation(extra.clone()));
            }
            panel.insert_channel(f.channel.clone(), rows)?;
        }
        Ok(panel)
    }
}

/// One channel as read from a truth file, before it is joined into a panel.
/// Absent (location, date) cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFragment {
    pub channel: String,
    pub locations: Vec<String>,
    pub start: NaiveDate,
    pub values: Vec<Vec<Option<f64>>>,
    /// Number of negative inputs that were clamped to zero.
    pub clamped: usize,
}

impl ChannelFragment {
    pub fn n_dates(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn end(&self) -> NaiveDate {
        self.start + Duration::days(self.n_dates() as i64 - 1)
    }

    pub fn missing_cells(&self) -> Vec<(String, NaiveDate)> {
        let mut out = Vec::new();
        for (li, row) in self.values.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if v.is_none() {
                    out.push((self.locations[li].clone(), self.start + Duration::days(t as i64)));
                }
            }
        }
        out
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).ok()
}

fn expect_header(record: &csv::StringRecord, expected: &[&str], path: &Path) -> Result<()> {
    let got: Vec<&str> = record.iter().map(str::trim).collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

/// Parse a truth CSV with header `date,location,value`.
pub fn parse_truth_csv(path: impl AsRef<Path>, channel: &str) -> Result<ChannelFragment> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_truth_reader(file, path, channel)
}

pub fn parse_truth_reader<R: Read>(reader: R, path: &Path, channel: &str) -> Result<ChannelFragment> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    expect_header(&header, &["date", "location", "value"], path)?;

    let mut cells: BTreeMap<(String, NaiveDate), f64> = BTreeMap::new();
    let mut clamped = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let date = parse_date(&record[0]).ok_or_else(|| bad(format!("bad date {:?}", &record[0])))?;
        let location = record[1].trim().to_string();
        if location.is_empty() {
            return Err(bad("empty location".into()));
        }
        let mut value: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad value {:?}", &record[2])))?;
        if !value.is_finite() {
            return Err(bad(format!("non-finite value {:?}", &record[2])));
        }
        if value < 0.0 {
            warn!("{}:{line}: negative value {value} for {location} on {date}, clamped to 0", path.display());
            clamped += 1;
            value = 0.0;
        }
        if cells.insert((location.clone(), date), value).is_some() {
            return Err(Error::Conflict {
                path: path.to_path_buf(),
                line,
                location,
                date,
            });
        }
    }

    let dates: BTreeSet<NaiveDate> = cells.keys().map(|(_, d)| *d).collect();
    check_contiguous(dates.iter().copied())?;
    let locations: Vec<String> = cells
        .keys()
        .map(|(l, _)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (Some(&start), Some(&end)) = (dates.first(), dates.last()) else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no data rows".into(),
        });
    };
    let n_dates = ((end - start).num_days() + 1) as usize;
    let mut values = vec![vec![None; n_dates]; locations.len()];
    for ((loc, date), v) in cells {
        let li = locations.binary_search(&loc).expect("collected above");
        values[li][(date - start).num_days() as usize] = Some(v);
    }
    let fragment = ChannelFragment {
        channel: channel.to_string(),
        locations,
        start,
        values,
        clamped,
    };
    let missing = fragment.missing_cells().len();
    if missing > 0 {
        warn!("{}: {missing} missing (location, date) cells", path.display());
    }
    Ok(fragment)
}

/// Error on the first gap in an ascending date sequence.
pub fn check_contiguous(dates: impl IntoIterator<Item = NaiveDate>) -> Result<()> {
    let mut prev: Option<NaiveDate> = None;
    for d in dates {
        if let Some(p) = prev {
            if (d - p).num_days() != 1 {
                return Err(Error::DateGap { before: p, after: d });
            }
        }
        prev = Some(d);
    }
    Ok(())
}

/// Parse a population CSV with header `location,population`.
pub fn parse_population_csv(path: impl AsRef<Path>) -> Result<Vec<(String, u64)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    expect_header(&header, &["location", "population"], path)?;
    let mut out: Vec<(String, u64)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let id = record.get(0).unwrap_or("").trim().to_string();
        let pop: u64 = record
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad population {:?}", record.get(1))))?;
        if pop == 0 {
            return Err(bad(format!("population of {id} must be positive")));
        }
        if out.iter().any(|(k, _)| *k == id) {
            return Err(bad(format!("duplicate location {id}")));
        }
        out.push((id, pop));
    }
    Ok(out)
}

/// Load cases, hospitalizations and populations into one panel.
pub fn load_panel(cases: &Path, hospitalizations: &Path, population: &Path) -> Result<TimePanel> {
    let pops = parse_population_csv(population)?;
    let fragments = [
        parse_truth_csv(cases, CASES)?,
        parse_truth_csv(hospitalizations, HOSPITALIZATIONS)?,
    ];
    TimePanel::from_fragments(&pops, &fragments)
}

/// Write one channel in the truth CSV format, date-major.
pub fn write_truth_csv(path: impl AsRef<Path>, panel: &TimePanel, channel: &str) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_truth(&mut buf, panel, channel)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_truth<W: Write>(out: &mut W, panel: &TimePanel, channel: &str) -> Result<()> {
    let rows = panel.channel(channel)?;
    let mut s = String::from("date,location,value\n");
    for t in 0..panel.n_dates() {
        let date = panel.date(t).format(DATE_FORMAT).to_string();
        for (li, loc) in panel.locations().iter().enumerate() {
            s.push_str(&format!("{date},{},{}\n", loc.id, rows[li][t]));
        }
    }
    out.write_all(s.as_bytes())
        .map_err(|e| Error::io("<truth output>", e))
}

pub fn write_population_csv(path: impl AsRef<Path>, locations: &[Location]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("location,population\n");
    for loc in locations {
        s.push_str(&format!("{},{}\n", loc.id, loc.population));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Trailing 7-day mean; the first six outputs average over the shorter
/// window that is available.
pub fn rolling_mean_7(series: &[f64]) -> Vec<f64> {
    (0..series.len())
        .map(|t| {
            let lo = t.saturating_sub(SMOOTHING_WINDOW - 1);
            let window = &series[lo..=t];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect()
}

/// Smooth every location of a channel.
pub fn smooth_channel(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| rolling_mean_7(r)).collect()
}

/// Convert a count channel to events per 10,000 residents.
pub fn to_rate_per_10k(panel: &TimePanel, channel: &str) -> Result<Vec<Vec<f64>>> {
    let rows = panel.channel(channel)?;
    panel
        .locations()
        .iter()
        .zip(rows)
        .map(|(loc, row)| {
            if loc.population == 0 {
                return Err(Error::MissingPopulation(loc.id.clone()));
            }
            let pop = loc.population as f64;
            Ok(row.iter().map(|v| v * RATE_DENOMINATOR / pop).collect())
        })
        .collect()
}

/// Convert a rate back to counts for a location of the given population.
pub fn rate_to_count(rate: f64, population: u64) -> f64 {
    rate * population as f64 / RATE_DENOMINATOR
}

/// Min/max scaling of a channel onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub channel: String,
    pub min: f64,
    pub max: f64,
    pub fitted_on: DateRange,
}

impl ScalerParams {
    pub fn new(channel: impl Into<String>, min: f64, max: f64, fitted_on: DateRange) -> Result<Self> {
        let channel = channel.into();
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::Invalid(format!("channel {channel}: non-finite scaler bounds")));
        }
        if max <= min {
            return Err(Error::DegenerateChannel { channel, value: min });
        }
        Ok(ScalerParams {
            channel,
            min,
            max,
            fitted_on,
        })
    }

    /// Values outside the fitted range are not clamped.
    pub fn apply(&self, x: f64) -> f64 {
        2.0 * (x - self.min) / (self.max - self.min) - 1.0
    }

    pub fn invert(&self, scaled: f64) -> f64 {
        (scaled + 1.0) * (self.max - self.min) / 2.0 + self.min
    }

    pub fn apply_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().map(|&x| self.apply(x)).collect())
            .collect()
    }
}

/// Fit one global scaler over every location and every date in `window`.
pub fn fit_scaler(panel: &TimePanel, channel: &str, window: DateRange) -> Result<ScalerParams> {
    let rows = panel.channel(channel)?;
    let lo = panel
        .date_index(window.start)
        .ok_or_else(|| Error::Invalid(format!("window start {} outside panel", window.start)))?;
    let hi = panel
        .date_index(window.end)
        .ok_or_else(|| Error::Invalid(format!("window end {} outside panel", window.end)))?;
    if hi < lo {
        return Err(Error::Invalid("empty scaler window".into()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for row in rows {
        for &v in &row[lo..=hi] {
            if !v.is_finite() {
                return Err(Error::Invalid(format!("channel {channel}: non-finite value")));
            }
            min = min.min(v);
            max = max.max(v);
        }
    }
    ScalerParams::new(channel, min, max, window)
}

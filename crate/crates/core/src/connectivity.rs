//! Social connectedness between locations and the features derived from it.
//!
//! The raw index is symmetric. Row-normalizing it (excluding the focal
//! location) turns each row into a convex weight vector, and the proximity
//! features are those weights applied to the other locations' rates.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that the index is symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

pub const SCI_HEADER: [&str; 3] = ["user_loc", "fr_loc", "scaled_sci"];

/// Dense, symmetric social connectedness index over an ordered location list.
///
/// The diagonal is carried when the source provides it and is otherwise
/// zero; no feature reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityMatrix {
    locations: Vec<String>,
    sci: Vec<f64>,
}

impl ConnectivityMatrix {
    /// Build from a row-major `n × n` matrix.
    pub fn new(locations: Vec<String>, sci: Vec<f64>) -> Result<Self> {
        let n = locations.len();
        if sci.len() != n * n {
            return Err(Error::Shape(format!("sci has {} entries, expected {}", sci.len(), n * n)));
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (a, b) = (sci[i * n + j], sci[j * n + i]);
                if !(a.is_finite() && a > 0.0) {
                    return Err(Error::Invalid(format!(
                        "sci({}, {}) = {a} must be positive",
                        locations[i], locations[j]
                    )));
                }
                if (a - b).abs() > SYMMETRY_TOLERANCE * a.abs().max(b.abs()) {
                    return Err(Error::Asymmetric {
                        a: locations[i].clone(),
                        b: locations[j].clone(),
                        ab: a,
                        ba: b,
                    });
                }
            }
        }
        Ok(ConnectivityMatrix { locations, sci })
    }

    pub fn locations(&self) -> &[String] {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sci[i * self.len() + j]
    }

    /// Reorder to match `order`; every id must be present.
    pub fn reordered(&self, order: &[String]) -> Result<Self> {
        let idx = order
            .iter()
            .map(|id| {
                self.locations
                    .iter()
                    .position(|l| l == id)
                    .ok_or_else(|| Error::UnknownLocation(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = order.len();
        let mut sci = vec![0.0; n * n];
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                sci[a * n + b] = self.get(i, j);
            }
        }
        Ok(ConnectivityMatrix {
            locations: order.to_vec(),
            sci,
        })
    }

    /// Serialize as a `user_loc\tfr_loc\tscaled_sci` table (off-diagonal pairs).
    pub fn to_tsv(&self) -> String {
        let mut s = SCI_HEADER.join("\t");
        s.push('\n');
        for (i, a) in self.locations.iter().enumerate() {
            for (j, b) in self.locations.iter().enumerate() {
                if i != j {
                    s.push_str(&format!("{a}\t{b}\t{}\n", self.get(i, j)));
                }
            }
        }
        s
    }
}

/// Parse an SCI table restricted to `locations`, in that order. Rows naming
/// other locations are ignored. Both directions of every pair must be present.
pub fn parse_sci_tsv(path: impl AsRef<Path>, locations: &[String]) -> Result<ConnectivityMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_sci_reader(file, path, locations)
}

pub fn parse_sci_reader<R: Read>(reader: R, path: &Path, locations: &[String]) -> Result<ConnectivityMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != SCI_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}, found {}", SCI_HEADER.join("\\t"), got.join("\\t")),
        });
    }
    let index: HashMap<&str, usize> = locations.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let n = locations.len();
    let mut cells: Vec<Option<f64>> = vec![None; n * n];
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let (Some(&i), Some(&j)) = (index.get(record[0].trim()), index.get(record[1].trim())) else {
            continue;
        };
        let v: f64 = record[2].trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("bad sci value {:?}", &record[2]),
        })?;
        cells[i * n + j] = Some(v);
    }
    let mut sci = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            match cells[i * n + j] {
                Some(v) => sci[i * n + j] = v,
                None if i != j => return Err(Error::MissingPair(locations[i].clone(), locations[j].clone())),
                None => {}
            }
        }
    }
    ConnectivityMatrix::new(locations.to_vec(), sci)
}

/// Row-normalized connectivity with a zero diagonal; each row sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalWeights {
    n: usize,
    weights: Vec<f64>,
}

impl DirectionalWeights {
    /// Build from an explicit row-major matrix, validating the row-sum and
    /// diagonal invariants.
    pub fn from_matrix(n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::Shape(format!("weights have {} entries, expected {}", weights.len(), n * n)));
        }
        for i in 0..n {
            let row = &weights[i * n..(i + 1) * n];
            if row[i] != 0.0 {
                return Err(Error::Invalid(format!("weight diagonal {i} is {}", row[i])));
            }
            if row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::Invalid(format!("weight row {i} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if n > 1 && (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("weight row {i} sums to {sum}")));
            }
        }
        Ok(DirectionalWeights { n, weights })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }
}

/// `w[i][j] = sci[i][j] / Σ_{h≠i} sci[i][h]` for `j ≠ i`, `w[i][i] = 0`.
pub fn row_normalize(m: &ConnectivityMatrix) -> Result<DirectionalWeights> {
    let n = m.len();
    if n < 2 {
        return Err(Error::Invalid("row normalization needs at least two locations".into()));
    }
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let total: f64 = (0..n).filter(|&h| h != i).map(|h| m.get(i, h)).sum();
        for j in (0..n).filter(|&j| j != i) {
            weights[i * n + j] = m.get(i, j) / total;
        }
    }
    Ok(DirectionalWeights { n, weights })
}

/// Connectivity-weighted sum of the other locations' rates, per date.
///
/// `rates` is indexed `[location][date]` in the same location order as the
/// weights. Used for both hospitalization and case proximity.
pub fn weighted_proximity(weights: &DirectionalWeights, rates: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = weights.len();
    if rates.len() != n {
        return Err(Error::Shape(format!("{} rate rows for {n} weighted locations", rates.len())));
    }
    let t_len = rates.first().map_or(0, Vec::len);
    if rates.iter().any(|r| r.len() != t_len) {
        return Err(Error::Shape("ragged rate rows".into()));
    }
    Ok((0..n)
        .map(|i| {
            let w = weights.row(i);
            (0..t_len)
                .map(|t| {
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| rates[j][t] * w[j])
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Social proximity to hospitalizations.
pub fn compute_sph(weights: &DirectionalWeights, hosp_rate: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    weighted_proximity(weights, hosp_rate)
}

/// Social proximity to cases.
pub fn compute_spc(weights: &DirectionalWeights, case_rate: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    weighted_proximity(weights, case_rate)
}

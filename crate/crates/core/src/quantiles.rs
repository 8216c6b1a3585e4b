//! The quantile level set used for submissions and scoring.

/// The 23 quantile levels required for state-level hospitalization forecasts.
pub const LEVELS: [f64; 23] = [
    0.010, 0.025, 0.050, 0.100, 0.150, 0.200, 0.250, 0.300, 0.350, 0.400, 0.450, 0.500, 0.550,
    0.600, 0.650, 0.700, 0.750, 0.800, 0.850, 0.900, 0.950, 0.975, 0.990,
];

/// Index of the 0.5 level within [`LEVELS`].
pub const MEDIAN_INDEX: usize = 11;

/// Index of the lower bound of the central 95% interval.
pub const LOWER_95_INDEX: usize = 1;

/// Index of the upper bound of the central 95% interval.
pub const UPPER_95_INDEX: usize = 21;

/// Format a level the way forecast files spell it (`0.025`, `0.500`).
pub fn format_level(q: f64) -> String {
    format!("{q:.3}")
}

/// Find the index of `q` in `levels`, tolerating formatting round-off.
pub fn level_index(levels: &[f64], q: f64) -> Option<usize> {
    levels.iter().position(|&l| (l - q).abs() < 1e-9)
}

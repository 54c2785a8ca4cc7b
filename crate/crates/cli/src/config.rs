use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tmbench_core::click_counting::Arm;
use tmbench_core::simulator::{ExperimentConfig, PUMP_REFERENCE};
use tmbench_core::timetag::WindowMode;

use crate::error::{CliError, CliResult};

/// Dynamic window widths, in units of the fitted σ, of the reference sweep.
pub const REFERENCE_DYNAMIC_WINDOWS: [f64; 16] = [
    0.1, 0.2, 0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 6.0, 8.0, 15.0, 20.0, 40.0,
];

/// Static window widths in picoseconds, paired row by row with the dynamic ones.
pub const REFERENCE_STATIC_WINDOWS: [f64; 16] = [
    20.0, 50.0, 100.0, 150.0, 200.0, 500.0, 1000.0, 1500.0, 2000.0, 2500.0, 5000.0, 6000.0, 8000.0, 10000.0,
    15000.0, 30000.0,
];

pub const DEFAULT_HERALDS: RangeInclusive<usize> = 1..=12;

/// Optional `[sweep]` table of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepTable {
    pub pumps_uw: Vec<f64>,
    pub windows: Vec<String>,
    /// Inclusive, written `A..B`.
    pub herald_range: String,
    pub herald_arm: String,
    pub k_list: Vec<usize>,
    /// Detection bins per network mode; defaults to all bins of an arm.
    pub bins_per_mode: Option<usize>,
}

impl Default for SweepTable {
    fn default() -> Self {
        SweepTable {
            pumps_uw: PUMP_REFERENCE.iter().map(|p| p.0).collect(),
            windows: REFERENCE_DYNAMIC_WINDOWS.iter().map(|m| format!("dynamic:{m}")).collect(),
            herald_range: format!("{}..{}", DEFAULT_HERALDS.start(), DEFAULT_HERALDS.end()),
            herald_arm: "A".into(),
            k_list: vec![1],
            bins_per_mode: None,
        }
    }
}

/// Reads an experiment configuration; a `[sweep]` table is split off.
pub fn load(path: &Path) -> CliResult<(ExperimentConfig, SweepTable)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn parse(text: &str) -> Result<(ExperimentConfig, SweepTable), String> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| format!("configuration: {e}"))?;
    let sweep = match table.remove("sweep") {
        Some(value) => value.try_into::<SweepTable>().map_err(|e| format!("[sweep]: {e}"))?,
        None => SweepTable::default(),
    };
    let config: ExperimentConfig = table.try_into().map_err(|e| format!("configuration: {e}"))?;
    config.validate().map_err(|e| e.to_string())?;
    Ok((config, sweep))
}

pub fn parse_herald_range(s: &str) -> CliResult<RangeInclusive<usize>> {
    let usage = || CliError::Usage(format!("herald range `{s}`: expected A..B with A <= B"));
    let (a, b) = s.split_once("..").ok_or_else(usage)?;
    let a: usize = a.trim().parse().map_err(|_| usage())?;
    let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| usage())?;
    if a > b {
        return Err(usage());
    }
    Ok(a..=b)
}

pub fn parse_list<T: FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    let items: Vec<T> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{what}: cannot parse `{}`", p.trim())))
        })
        .collect::<CliResult<_>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("{what}: empty list")));
    }
    Ok(items)
}

pub fn parse_windows(items: &[String]) -> CliResult<Vec<WindowMode>> {
    items
        .iter()
        .map(|w| w.parse().map_err(|e: tmbench_core::Error| CliError::Usage(e.to_string())))
        .collect()
}

pub fn parse_arm(s: &str) -> CliResult<Arm> {
    match s.trim() {
        "A" | "a" => Ok(Arm::A),
        "B" | "b" => Ok(Arm::B),
        other => Err(CliError::Usage(format!("herald arm `{other}`: expected A or B"))),
    }
}

/// Label of a pump setting, e.g. `150uW`.
pub fn pump_label(pump_uw: f64) -> String {
    format!("{pump_uw}uW")
}

/// Label for a configuration's mean pair number: the reference pump power
/// when it matches one, else `mu<mean>`.
pub fn mean_pairs_label(mean_pairs: f64) -> String {
    PUMP_REFERENCE
        .iter()
        .find(|p| p.1 == mean_pairs)
        .map_or_else(|| format!("mu{mean_pairs}"), |p| pump_label(p.0))
}

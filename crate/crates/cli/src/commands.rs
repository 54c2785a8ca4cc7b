use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmbench_core::analysis::{
    evaluate_dataset, sweep_cell_key, systematic_error, CellFailure, ResultRow, ResultTable, SweepDataset,
    SweepSpec, SystematicError, RESULT_COLUMNS,
};
use tmbench_core::click_counting::{Arm, JointClickHistogram};
use tmbench_core::simulator::{mean_pairs_for_pump, synthesize_timetags, ExperimentConfig, SinglesProfile};
use tmbench_core::timetag::{
    accumulate, estimate_offset, fit_bins, parse_stream, plan_windows, AccumulationTally, BinFits,
    BinaryTagWriter, CsvTagWriter, TagFormat, TagGeometry, TagSink, TimeTagRecord, WindowMode,
};

use crate::config::{self, SweepTable};
use crate::error::{CliError, CliResult};
use crate::manifest::{self, FileDigest, HashingWriter, OutputDir, RunManifest, MANIFEST_FILE};
use crate::{AnalyzeArgs, ReportArgs, SimulateArgs, SweepArgs};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const DIAGNOSTICS_JSON: &str = "diagnostics.json";
pub const JOINT_CSV: &str = "joint_histogram.csv";
pub const SINGLES_CSV: &str = "singles.csv";
pub const CELLS_DIR: &str = "cells";
pub const DATASETS_DIR: &str = "datasets";
pub const REPORT_MANIFEST: &str = "report_manifest.json";
pub const DEFAULT_ANALYZE_WINDOW: &str = "dynamic:2";

/// Manifest and, for analysis commands, the result table of a run.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub manifest: RunManifest,
    pub table: Option<ResultTable>,
}

impl CommandOutput {
    /// 0 when every cell succeeded, 3 if any failed numerically, else 2.
    pub fn exit_code(&self) -> i32 {
        match &self.table {
            Some(t) if t.numerical_failures() > 0 => 3,
            Some(t) if t.failures() > 0 => 2,
            _ => 0,
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<(ExperimentConfig, SweepTable)> {
    match path {
        Some(p) => config::load(p),
        None => Ok((ExperimentConfig::default(), SweepTable::default())),
    }
}

fn apply_overrides(config: &mut ExperimentConfig, seed: Option<u64>, trials: Option<u64>) -> CliResult<()> {
    if let Some(s) = seed {
        config.rng_seed = s;
    }
    if let Some(t) = trials {
        config.trials = t;
    }
    config.validate().map_err(|e| CliError::Data(e.to_string()))
}

fn input_digests(config_path: Option<&Path>) -> CliResult<Vec<FileDigest>> {
    config_path
        .map(|p| manifest::digest_file(p, p.display().to_string()))
        .into_iter()
        .collect()
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<CommandOutput> {
    let (mut config, _) = load_config(args.config.as_deref())?;
    apply_overrides(&mut config, args.seed, args.trials)?;
    let format: TagFormat = args
        .tag_format
        .as_deref()
        .unwrap_or("csv")
        .parse()
        .map_err(|e: tmbench_core::Error| CliError::Usage(e.to_string()))?;
    let inputs = input_digests(args.config.as_deref())?;
    let parameters = serde_json::json!({ "tag_format": format });
    let run_id = manifest::run_id("simulate", &config, &parameters, &inputs);
    let preamble = manifest::preamble(&run_id, MANIFEST_FILE);

    let mut out = OutputDir::new(&args.out);
    let tag_name = match format {
        TagFormat::Csv => "tags.csv",
        TagFormat::Binary => "tags.ttg",
    };
    let tag_path = out.path(tag_name);
    let mut simulation = None;
    out.write_with(tag_name, |w| {
        let result = match format {
            TagFormat::Csv => {
                writeln!(w, "# {preamble}").map_err(|e| CliError::io(&tag_path, e))?;
                let mut sink = CsvTagWriter::new(&mut *w);
                let r = synthesize_timetags(&config, &mut sink);
                r.and_then(|o| sink.finish().map(|()| o))
            }
            TagFormat::Binary => {
                let mut sink = BinaryTagWriter::new(&mut *w);
                let r = synthesize_timetags(&config, &mut sink);
                r.and_then(|o| sink.finish().map(|()| o))
            }
        };
        simulation = Some(result.map_err(|e| CliError::core(tag_path.display(), e))?);
        Ok(())
    })?;
    let sim = simulation.expect("simulation ran");
    out.write(JOINT_CSV, joint_csv(&sim.joint, &preamble).as_bytes())?;
    out.write(SINGLES_CSV, singles_csv(&sim.singles, &preamble).as_bytes())?;
    let manifest = out.finish(MANIFEST_FILE, "simulate", run_id, Some(config.rng_seed), config, parameters, inputs)?;
    Ok(CommandOutput { manifest, table: None })
}

/// Sparse `n_a,n_b,count` listing of the nonzero entries.
pub fn joint_csv(joint: &JointClickHistogram, preamble: &str) -> String {
    let mut s = format!("# {preamble}\nn_a,n_b,count\n");
    for (na, row) in joint.rows().iter().enumerate() {
        for (nb, &c) in row.iter().enumerate() {
            if c > 0 {
                let _ = writeln!(s, "{na},{nb},{c}");
            }
        }
    }
    s
}

pub fn singles_csv(singles: &SinglesProfile, preamble: &str) -> String {
    let mut s = format!("# {preamble}\narm,bin,count\n");
    for arm in [Arm::A, Arm::B] {
        for (bin, c) in singles.arm(arm).iter().enumerate() {
            let _ = writeln!(s, "{},{bin},{c}", arm.label());
        }
    }
    s
}

/// Reads the sparse joint-histogram CSV written by `simulate`.
pub fn read_joint_csv(path: &Path, bins: usize) -> CliResult<JointClickHistogram> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut joint = JointClickHistogram::empty(bins, bins);
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("n_a") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<u64> = line
            .split(',')
            .map(|f| f.trim().parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        match fields[..] {
            [na, nb, c] if (na as usize) <= bins && (nb as usize) <= bins => joint.add(na as usize, nb as usize, c),
            _ => return Err(CliError::Data(format!("{}: line {}: malformed entry", path.display(), i + 1))),
        }
    }
    Ok(joint)
}

/// Outcome of one window plan applied to a tag stream.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub window: WindowMode,
    pub result: Result<WindowAccumulation, CellFailure>,
}

#[derive(Debug, Clone)]
pub struct WindowAccumulation {
    pub joint: JointClickHistogram,
    pub singles: SinglesProfile,
    pub tally: AccumulationTally,
    pub systematic: SystematicError,
}

#[derive(Debug, Clone)]
pub struct TagAnalysis {
    pub fits: BinFits,
    pub windows: Vec<WindowDataset>,
}

/// Fits the stream once, then accumulates it under every window plan.
pub fn analyze_records(
    records: &[TimeTagRecord],
    geometry: &TagGeometry,
    total_trials: Option<u64>,
    windows: &[WindowMode],
) -> tmbench_core::Result<TagAnalysis> {
    let offset = estimate_offset(records, geometry)?;
    let fits = fit_bins(records, geometry, offset);
    let windows = windows
        .iter()
        .map(|&window| {
            let result = plan_windows(&fits, window)
                .and_then(|plan| accumulate(records, &plan, total_trials))
                .and_then(|acc| {
                    let systematic = systematic_error(&acc.singles)?;
                    Ok(WindowAccumulation {
                        joint: acc.joint,
                        singles: acc.singles,
                        tally: acc.tally,
                        systematic,
                    })
                })
                .map_err(|e| CellFailure::from(&e));
            WindowDataset { window, result }
        })
        .collect();
    Ok(TagAnalysis { fits, windows })
}

fn failed_rows(pump: &str, window: WindowMode, spec: &SweepSpec, failure: &CellFailure) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for herald in spec.heralds.clone() {
        for &k in &spec.k_list {
            rows.push(ResultRow {
                pump: pump.to_string(),
                window_mode: window.label().to_string(),
                window_param: window.param(),
                herald_n: herald,
                k,
                lambda_min: None,
                err_random: None,
                err_sys: None,
                err_combined: None,
                significance: None,
                trials: 0,
                err_sys_eigenvalue_scale: None,
                low_statistics: true,
                error: Some(failure.clone()),
            });
        }
    }
    rows
}

/// Result rows of every window of an analysis, in window order.
pub fn analysis_rows(pump: &str, analysis: &TagAnalysis, spec: &SweepSpec) -> Vec<ResultRow> {
    analysis
        .windows
        .iter()
        .flat_map(|w| match &w.result {
            Ok(acc) => evaluate_dataset(
                &SweepDataset {
                    pump: pump.to_string(),
                    window: w.window,
                    joint: acc.joint.clone(),
                    systematic_rel: acc.systematic.pooled,
                },
                spec,
            ),
            Err(f) => failed_rows(pump, w.window, spec, f),
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct WindowDiagnostics<'a> {
    window: String,
    tally: Option<&'a AccumulationTally>,
    systematic: Option<&'a SystematicError>,
    error: Option<&'a CellFailure>,
}

fn window_diagnostics(analysis: &TagAnalysis) -> Vec<WindowDiagnostics<'_>> {
    analysis
        .windows
        .iter()
        .map(|w| WindowDiagnostics {
            window: w.window.to_string(),
            tally: w.result.as_ref().ok().map(|a| &a.tally),
            systematic: w.result.as_ref().ok().map(|a| &a.systematic),
            error: w.result.as_ref().err(),
        })
        .collect()
}

struct AnalysisSettings {
    windows: Vec<WindowMode>,
    spec: SweepSpec,
}

fn settings(
    config: &ExperimentConfig,
    windows: Vec<String>,
    heralds: RangeInclusive<usize>,
    herald_arm: &str,
    k_list: Vec<usize>,
    bins_per_mode: Option<usize>,
) -> CliResult<AnalysisSettings> {
    let windows = config::parse_windows(&windows)?;
    let bins_per_mode = bins_per_mode.unwrap_or(config.network_bins);
    if bins_per_mode == 0 || !bins_per_mode.is_multiple_of(2) {
        return Err(CliError::Usage(format!("bins per mode must be even and positive, got {bins_per_mode}")));
    }
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k * bins_per_mode > config.network_bins) {
        return Err(CliError::Usage(format!(
            "K = {k} with {bins_per_mode} bins per mode does not fit {} bins per arm",
            config.network_bins
        )));
    }
    Ok(AnalysisSettings {
        windows,
        spec: SweepSpec {
            herald_arm: config::parse_arm(herald_arm)?,
            heralds,
            k_list,
            bins_per_mode,
        },
    })
}

fn spec_parameters(windows: &[WindowMode], spec: &SweepSpec) -> serde_json::Value {
    serde_json::json!({
        "windows": windows.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "herald_range": format!("{}..{}", spec.heralds.start(), spec.heralds.end()),
        "herald_arm": spec.herald_arm.label().to_string(),
        "k_list": spec.k_list,
        "bins_per_mode": spec.bins_per_mode,
    })
}

fn results_json(table: &ResultTable, run_id: &str, manifest_name: &str) -> String {
    let doc = serde_json::json!({
        "run_id": run_id,
        "manifest": manifest_name,
        "columns": RESULT_COLUMNS,
        "rows": table.rows,
    });
    serde_json::to_string_pretty(&doc).expect("results serialize")
}

fn write_results(out: &mut OutputDir, table: &ResultTable, run_id: &str) -> CliResult<()> {
    let preamble = manifest::preamble(run_id, MANIFEST_FILE);
    out.write(RESULTS_CSV, table.to_csv(Some(&preamble)).as_bytes())?;
    out.write(RESULTS_JSON, results_json(table, run_id, MANIFEST_FILE).as_bytes())?;
    Ok(())
}

/// Configuration for analysing a tag file: explicit, else the manifest next
/// to the file, else defaults.
fn analysis_config(args: &AnalyzeArgs) -> CliResult<(ExperimentConfig, &'static str)> {
    if let Some(p) = &args.config {
        return Ok((config::load(p)?.0, "file"));
    }
    let sibling = args.input.parent().map(|d| d.join(MANIFEST_FILE));
    match sibling {
        Some(m) if m.is_file() => Ok((RunManifest::read(&m)?.config, "manifest")),
        _ => Ok((ExperimentConfig::default(), "default")),
    }
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<CommandOutput> {
    let (config, source) = analysis_config(args)?;
    let heralds = match &args.herald_range {
        Some(r) => config::parse_herald_range(r)?,
        None => config::DEFAULT_HERALDS,
    };
    let windows = match &args.windows {
        Some(w) => config::parse_list(w, "windows")?,
        None => vec![DEFAULT_ANALYZE_WINDOW.to_string()],
    };
    let k_list = match &args.k_list {
        Some(k) => config::parse_list(k, "k-list")?,
        None => vec![1],
    };
    let s = settings(&config, windows, heralds, args.herald_arm.as_deref().unwrap_or("A"), k_list, args.bins_per_mode)?;

    let bytes = fs::read(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let geometry = TagGeometry::from_config(&config);
    let records = parse_stream(bytes.as_slice(), Some(geometry.max_channel()))
        .map_err(|e| CliError::core(args.input.display(), e))?;
    let mut hasher = HashingWriter::new(std::io::sink());
    hasher.write_all(&bytes).map_err(|e| CliError::io(&args.input, e))?;
    let mut inputs = vec![hasher.digest(args.input.display().to_string())];
    inputs.extend(input_digests(args.config.as_deref())?);
    drop(bytes);

    let total_trials = args.trials.or((source != "default").then_some(config.trials));
    let analysis = analyze_records(&records, &geometry, total_trials, &s.windows)
        .map_err(|e| CliError::core(args.input.display(), e))?;
    drop(records);
    let pump = args.label.clone().unwrap_or_else(|| config::mean_pairs_label(config.mean_pairs));
    let table = ResultTable {
        rows: analysis_rows(&pump, &analysis, &s.spec),
    };

    let mut parameters = spec_parameters(&s.windows, &s.spec);
    parameters["config_source"] = source.into();
    parameters["total_trials"] = total_trials.into();
    parameters["label"] = pump.clone().into();
    let run_id = manifest::run_id("analyze", &config, &parameters, &inputs);
    let mut out = OutputDir::new(&args.out);
    write_results(&mut out, &table, &run_id)?;
    let diagnostics = serde_json::json!({
        "run_id": run_id,
        "manifest": MANIFEST_FILE,
        "offset_ps": analysis.fits.offset_ps,
        "windows": window_diagnostics(&analysis),
        "fits": analysis.fits,
    });
    out.write(DIAGNOSTICS_JSON, serde_json::to_string_pretty(&diagnostics).expect("diagnostics serialize").as_bytes())?;
    let manifest = out.finish(MANIFEST_FILE, "analyze", run_id, None, config, parameters, inputs)?;
    Ok(CommandOutput {
        manifest,
        table: Some(table),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CellFile {
    run_id: String,
    manifest: String,
    row: ResultRow,
}

fn read_cell(path: &Path, run_id: &str) -> Option<ResultRow> {
    let text = fs::read_to_string(path).ok()?;
    let cell: CellFile = serde_json::from_str(&text).ok()?;
    (cell.run_id == run_id).then_some(cell.row)
}

fn cell_path(root: &Path, key: &str) -> PathBuf {
    root.join(CELLS_DIR).join(format!("{key}.json"))
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<CommandOutput> {
    let (mut config, table) = load_config(args.config.as_deref())?;
    apply_overrides(&mut config, args.seed, args.trials)?;
    let pumps: Vec<f64> = match &args.pumps {
        Some(p) => config::parse_list(p, "pumps")?,
        None => table.pumps_uw.clone(),
    };
    if pumps.is_empty() || pumps.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(CliError::Usage("pump powers must be a nonempty list of nonnegative numbers".into()));
    }
    let heralds = config::parse_herald_range(args.herald_range.as_deref().unwrap_or(&table.herald_range))?;
    let windows = match &args.windows {
        Some(w) => config::parse_list(w, "windows")?,
        None => table.windows.clone(),
    };
    let k_list = match &args.k_list {
        Some(k) => config::parse_list(k, "k-list")?,
        None => table.k_list.clone(),
    };
    let s = settings(
        &config,
        windows,
        heralds,
        &table.herald_arm,
        k_list,
        args.bins_per_mode.or(table.bins_per_mode),
    )?;
    let inputs = input_digests(args.config.as_deref())?;
    let mut parameters = spec_parameters(&s.windows, &s.spec);
    parameters["pumps_uw"] = pumps.clone().into();
    let run_id = manifest::run_id("sweep", &config, &parameters, &inputs);
    let mut out = OutputDir::new(&args.out);

    let keys_for = |label: &str| -> Vec<String> {
        let mut keys = Vec::new();
        for w in &s.windows {
            for h in s.spec.heralds.clone() {
                for &k in &s.spec.k_list {
                    keys.push(sweep_cell_key(label, w, h, k));
                }
            }
        }
        keys
    };

    for (index, &pump) in pumps.iter().enumerate() {
        let label = config::pump_label(pump);
        let keys = keys_for(&label);
        if args.resume && keys.iter().all(|k| read_cell(&cell_path(out.root(), k), &run_id).is_some()) {
            continue;
        }
        let mut pump_config = config.clone();
        pump_config.mean_pairs = mean_pairs_for_pump(pump);
        pump_config.rng_seed = config.rng_seed.wrapping_add(index as u64);
        let mut records: Vec<TimeTagRecord> = Vec::new();
        synthesize_timetags(&pump_config, &mut records).map_err(|e| CliError::core(&label, e))?;
        let geometry = TagGeometry::from_config(&pump_config);
        let (rows, diagnostics) = match analyze_records(&records, &geometry, Some(pump_config.trials), &s.windows) {
            Ok(analysis) => {
                let diag = serde_json::json!({
                    "run_id": run_id,
                    "pump_uw": pump,
                    "mean_pairs": pump_config.mean_pairs,
                    "seed": pump_config.rng_seed,
                    "events": records.len(),
                    "offset_ps": analysis.fits.offset_ps,
                    "windows": window_diagnostics(&analysis),
                });
                (analysis_rows(&label, &analysis, &s.spec), diag)
            }
            Err(e) => {
                let failure = CellFailure::from(&e);
                let rows = s.windows.iter().flat_map(|&w| failed_rows(&label, w, &s.spec, &failure)).collect();
                (rows, serde_json::json!({ "run_id": run_id, "pump_uw": pump, "error": failure }))
            }
        };
        drop(records);
        for row in rows {
            let cell = CellFile {
                run_id: run_id.clone(),
                manifest: MANIFEST_FILE.to_string(),
                row,
            };
            let name = format!("{CELLS_DIR}/{}.json", cell.row.key());
            out.write_untracked(&name, serde_json::to_string_pretty(&cell).expect("cell serializes").as_bytes())?;
        }
        let name = format!("{DATASETS_DIR}/{label}.json");
        out.write_untracked(&name, serde_json::to_string_pretty(&diagnostics).expect("diagnostics serialize").as_bytes())?;
        eprintln!("sweep: {label} done ({} cells)", keys.len());
    }

    let mut rows = Vec::new();
    for &pump in &pumps {
        for key in keys_for(&config::pump_label(pump)) {
            let path = cell_path(out.root(), &key);
            rows.push(
                read_cell(&path, &run_id)
                    .ok_or_else(|| CliError::Data(format!("{}: missing or stale sweep cell", path.display())))?,
            );
        }
    }
    let table = ResultTable { rows };
    write_results(&mut out, &table, &run_id)?;
    parameters["cells"] = table.rows.len().into();
    let manifest = out.finish(MANIFEST_FILE, "sweep", run_id, Some(config.rng_seed), config, parameters, inputs)?;
    Ok(CommandOutput {
        manifest,
        table: Some(table),
    })
}

#[derive(Debug, Deserialize)]
struct ResultsFile {
    run_id: String,
    rows: Vec<ResultRow>,
}

fn significance_text(row: &ResultRow) -> String {
    use tmbench_core::moments_witness::Significance;
    match (row.lambda_min, row.significance) {
        (Some(l), Some(Significance::Finite(s))) if l < 0.0 => format!("{s:?}"),
        (Some(l), Some(Significance::Unbounded)) if l < 0.0 => "unbounded".into(),
        _ => String::new(),
    }
}

fn significance_rank(row: &ResultRow) -> f64 {
    use tmbench_core::moments_witness::Significance;
    match (row.lambda_min, row.significance) {
        (Some(l), Some(Significance::Finite(s))) if l < 0.0 => s,
        (Some(l), Some(Significance::Unbounded)) if l < 0.0 => f64::INFINITY,
        _ => f64::NEG_INFINITY,
    }
}

/// Pump, window mode, window parameter and K.
type GroupKey = (String, String, String, usize);

/// Plot-ready summaries of a result table: a significance grid over heralds,
/// the best cell per dataset and the eigenvalue trend over K.
pub fn cmd_report(args: &ReportArgs) -> CliResult<CommandOutput> {
    let results_path = args.input.join(RESULTS_JSON);
    let text = fs::read_to_string(&results_path).map_err(|e| CliError::io(&results_path, e))?;
    let results: ResultsFile =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", results_path.display())))?;
    let source = RunManifest::read(&args.input.join(MANIFEST_FILE))?;
    let inputs = vec![manifest::digest_file(&results_path, results_path.display().to_string())?];
    let parameters = serde_json::json!({ "source_run_id": results.run_id });
    let run_id = manifest::run_id("report", &source.config, &parameters, &inputs);
    let preamble = manifest::preamble(&run_id, REPORT_MANIFEST);

    // Groups keyed by (pump, window, K) in first-appearance order.
    let mut groups: Vec<(GroupKey, Vec<&ResultRow>)> = Vec::new();
    for row in &results.rows {
        let key = (row.pump.clone(), row.window_mode.clone(), row.window_param.to_string(), row.k);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    let mut heralds: Vec<usize> = results.rows.iter().map(|r| r.herald_n).collect();
    heralds.sort_unstable();
    heralds.dedup();

    let mut grid = format!("# {preamble}\npump,window_mode,window_param,K");
    for h in &heralds {
        let _ = write!(grid, ",n{h}");
    }
    grid.push('\n');
    let mut best = format!("# {preamble}\npump,window_mode,window_param,K,best_significance,herald_n\n");
    for ((pump, mode, param, k), rows) in &groups {
        let _ = write!(grid, "{pump},{mode},{param},{k}");
        for h in &heralds {
            let cell = rows.iter().find(|r| r.herald_n == *h).map(|r| significance_text(r)).unwrap_or_default();
            let _ = write!(grid, ",{cell}");
        }
        grid.push('\n');
        let top = rows
            .iter()
            .filter(|r| significance_rank(r) > f64::NEG_INFINITY)
            .max_by(|a, b| significance_rank(a).total_cmp(&significance_rank(b)));
        let (sig, h) = top.map_or((String::new(), String::new()), |r| (significance_text(r), r.herald_n.to_string()));
        let _ = writeln!(best, "{pump},{mode},{param},{k},{sig},{h}");
    }

    let mut trend = format!("# {preamble}\npump,window_mode,window_param,herald_n,K,abs_lambda_min,err_combined,nondecreasing\n");
    let mut series: Vec<&ResultRow> = results.rows.iter().collect();
    series.sort_by(|a, b| {
        (&a.pump, &a.window_mode, a.window_param.to_bits(), a.herald_n, a.k).cmp(&(
            &b.pump,
            &b.window_mode,
            b.window_param.to_bits(),
            b.herald_n,
            b.k,
        ))
    });
    let mut previous: Option<&ResultRow> = None;
    for row in series {
        let same = previous.is_some_and(|p| {
            p.pump == row.pump && p.window_mode == row.window_mode && p.window_param == row.window_param && p.herald_n == row.herald_n
        });
        let abs = row.lambda_min.map(f64::abs);
        let flag = match (same, previous.and_then(|p| p.lambda_min).map(f64::abs), abs) {
            (true, Some(prev), Some(cur)) => (cur >= prev).to_string(),
            _ => String::new(),
        };
        let _ = writeln!(
            trend,
            "{},{},{},{},{},{},{},{}",
            row.pump,
            row.window_mode,
            row.window_param,
            row.herald_n,
            row.k,
            abs.map(|v| format!("{v:?}")).unwrap_or_default(),
            row.err_combined.map(|v| format!("{v:?}")).unwrap_or_default(),
            flag
        );
        previous = Some(row);
    }

    let mut out = OutputDir::new(args.out.as_deref().unwrap_or(&args.input));
    out.write("report_significance.csv", grid.as_bytes())?;
    out.write("report_best.csv", best.as_bytes())?;
    out.write("report_k_trend.csv", trend.as_bytes())?;
    let manifest = out.finish(REPORT_MANIFEST, "report", run_id, source.seed, source.config, parameters, inputs)?;
    Ok(CommandOutput { manifest, table: None })
}

//! Detector event streams: parsing, per-bin pulse fitting, coincidence
//! windows and accumulation into click histograms.
//!
//! Two formats are understood.
//!
//! CSV: a header line `channel,timestamp_ps` followed by one record per line
//! in ASCII decimal. Blank lines and lines starting with `#` are ignored.
//!
//! ```text
//! channel,timestamp_ps
//! 0,1000000
//! 2,1000012
//! 1,1100000
//! ```
//!
//! Binary: the magic bytes `TTG1`, a version byte (`1`), then 9-byte frames
//! made of a `u8` channel and a little-endian `u64` timestamp in picoseconds.
//!
//! Events are placed on a grid: bin `(channel, slot)` of trial `t` is nominally
//! at `offset + t·T + slot·τ`. Windows are centered on the fitted pulse mean
//! of each bin; a static window has a fixed full width, a dynamic one a full
//! width of `x·σ` of that bin.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufWriter, Read, Write};
use std::str::FromStr;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::click_counting::{Arm, JointClickHistogram};
use crate::error::{Error, Position, Result};
use crate::simulator::{ExperimentConfig, SinglesProfile};

pub const CSV_HEADER: &str = "channel,timestamp_ps";
pub const BINARY_MAGIC: &[u8; 4] = b"TTG1";
pub const BINARY_VERSION: u8 = 1;
pub const FRAME_BYTES: usize = 9;

/// Bins with fewer events are not fitted.
pub const MIN_FIT_EVENTS: usize = 50;
/// Accepted range of fitted pulse widths.
pub const SIGMA_RANGE_PS: (f64, f64) = (10.0, 10_000.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeTagRecord {
    pub channel: u8,
    pub timestamp_ps: u64,
}

/// Destination for a time-ordered event stream.
pub trait TagSink {
    fn write_record(&mut self, record: &TimeTagRecord) -> Result<()>;

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

impl TagSink for Vec<TimeTagRecord> {
    fn write_record(&mut self, record: &TimeTagRecord) -> Result<()> {
        self.push(*record);
        Ok(())
    }
}

pub struct CsvTagWriter<W: Write> {
    out: BufWriter<W>,
    header_written: bool,
}

impl<W: Write> CsvTagWriter<W> {
    pub fn new(inner: W) -> Self {
        CsvTagWriter {
            out: BufWriter::new(inner),
            header_written: false,
        }
    }

    fn header(&mut self) -> Result<()> {
        if !self.header_written {
            writeln!(self.out, "{CSV_HEADER}")?;
            self.header_written = true;
        }
        Ok(())
    }
}

impl<W: Write> TagSink for CsvTagWriter<W> {
    fn write_record(&mut self, record: &TimeTagRecord) -> Result<()> {
        self.header()?;
        writeln!(self.out, "{},{}", record.channel, record.timestamp_ps)?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.header()?;
        self.out.flush()?;
        Ok(())
    }
}

pub struct BinaryTagWriter<W: Write> {
    out: BufWriter<W>,
    header_written: bool,
}

impl<W: Write> BinaryTagWriter<W> {
    pub fn new(inner: W) -> Self {
        BinaryTagWriter {
            out: BufWriter::new(inner),
            header_written: false,
        }
    }

    fn header(&mut self) -> Result<()> {
        if !self.header_written {
            self.out.write_all(BINARY_MAGIC)?;
            self.out.write_all(&[BINARY_VERSION])?;
            self.header_written = true;
        }
        Ok(())
    }
}

impl<W: Write> TagSink for BinaryTagWriter<W> {
    fn write_record(&mut self, record: &TimeTagRecord) -> Result<()> {
        self.header()?;
        let mut frame = [0u8; FRAME_BYTES];
        frame[0] = record.channel;
        frame[1..].copy_from_slice(&record.timestamp_ps.to_le_bytes());
        self.out.write_all(&frame)?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.header()?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagFormat {
    Csv,
    Binary,
}

impl FromStr for TagFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TagFormat::Csv),
            "binary" | "bin" => Ok(TagFormat::Binary),
            other => Err(Error::invalid("tag_format", format!("unknown format `{other}`"))),
        }
    }
}

fn check_channel(channel: u32, max_channel: Option<u8>, position: Position) -> Result<u8> {
    let limit = max_channel.map_or(u8::MAX as u32, u32::from);
    if channel > limit {
        return Err(Error::ChannelOutOfRange {
            channel,
            max: limit as u8,
            position,
        });
    }
    Ok(channel as u8)
}

/// Parses the CSV format. Channels above `max_channel` are rejected.
pub fn parse_csv<R: BufRead>(reader: R, max_channel: Option<u8>) -> Result<Vec<TimeTagRecord>> {
    let mut records = Vec::new();
    let mut header_seen = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let position = Position::Line(i + 1);
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if !header_seen {
            if text != CSV_HEADER {
                return Err(Error::Parse {
                    position,
                    reason: format!("expected header `{CSV_HEADER}`"),
                });
            }
            header_seen = true;
            continue;
        }
        let (c, t) = text.split_once(',').ok_or_else(|| Error::Parse {
            position,
            reason: "expected two comma-separated fields".into(),
        })?;
        let channel: u32 = c.trim().parse().map_err(|e| Error::Parse {
            position,
            reason: format!("channel: {e}"),
        })?;
        let timestamp_ps: u64 = t.trim().parse().map_err(|e| Error::Parse {
            position,
            reason: format!("timestamp: {e}"),
        })?;
        records.push(TimeTagRecord {
            channel: check_channel(channel, max_channel, position)?,
            timestamp_ps,
        });
    }
    Ok(records)
}

/// Parses the binary format from an in-memory buffer.
pub fn parse_binary(bytes: &[u8], max_channel: Option<u8>) -> Result<Vec<TimeTagRecord>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    if bytes.len() < 5 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Parse {
            position: Position::ByteOffset(0),
            reason: "missing `TTG1` header".into(),
        });
    }
    if bytes[4] != BINARY_VERSION {
        return Err(Error::Parse {
            position: Position::ByteOffset(4),
            reason: format!("unsupported version {}", bytes[4]),
        });
    }
    let body = &bytes[5..];
    let frames = body.chunks_exact(FRAME_BYTES);
    if !frames.remainder().is_empty() {
        let offset = 5 + body.len() - frames.remainder().len();
        return Err(Error::Parse {
            position: Position::ByteOffset(offset as u64),
            reason: format!("truncated frame ({} of {FRAME_BYTES} bytes)", frames.remainder().len()),
        });
    }
    let limit = max_channel.unwrap_or(u8::MAX);
    let mut records = Vec::with_capacity(body.len() / FRAME_BYTES);
    for frame in frames {
        let channel = frame[0];
        let timestamp_ps = u64::from_le_bytes(frame[1..].try_into().expect("8-byte slice"));
        records.push(TimeTagRecord { channel, timestamp_ps });
    }
    if let Some(i) = records.iter().position(|r| r.channel > limit) {
        return Err(Error::ChannelOutOfRange {
            channel: records[i].channel as u32,
            max: limit,
            position: Position::ByteOffset((5 + i * FRAME_BYTES) as u64),
        });
    }
    Ok(records)
}

/// Reads a whole stream, detecting the format from its first bytes.
pub fn parse_stream<R: Read>(mut source: R, max_channel: Option<u8>) -> Result<Vec<TimeTagRecord>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes, max_channel)
    } else {
        parse_csv(bytes.as_slice(), max_channel)
    }
}

/// Layout of bins in time and over channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagGeometry {
    pub trial_period_ps: u64,
    pub bin_separation_ps: u64,
    pub slots: usize,
    pub detectors_per_arm: usize,
}

impl TagGeometry {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        TagGeometry {
            trial_period_ps: config.trial_period_ps(),
            bin_separation_ps: config.bin_separation_ps(),
            slots: config.slots(),
            detectors_per_arm: config.detectors_per_arm,
        }
    }

    pub fn bins_per_arm(&self) -> usize {
        self.slots * self.detectors_per_arm
    }

    pub fn channel_count(&self) -> usize {
        2 * self.detectors_per_arm
    }

    pub fn max_channel(&self) -> u8 {
        (self.channel_count() - 1) as u8
    }

    /// Total bins over both arms; bin `channel·slots + slot`.
    pub fn total_bins(&self) -> usize {
        self.channel_count() * self.slots
    }

    pub fn arm_of(&self, flat_bin: usize) -> (Arm, usize) {
        let per_arm = self.bins_per_arm();
        if flat_bin < per_arm {
            (Arm::A, flat_bin)
        } else {
            (Arm::B, flat_bin - per_arm)
        }
    }

    /// Trial index, slot and offset from the nominal slot time.
    #[inline]
    fn locate(&self, timestamp_ps: u64, offset_ps: u64) -> (i64, i64, i64) {
        let tau = self.bin_separation_ps as i64;
        let period = self.trial_period_ps as i64;
        let u = timestamp_ps as i64 - offset_ps as i64;
        let trial = (u + tau / 2).div_euclid(period);
        let r = u - trial * period;
        let slot = (r + tau / 2).div_euclid(tau);
        (trial, slot, r - slot * tau)
    }
}

/// Grid origin: the nominal time of slot 0 of some trial, reduced modulo the
/// trial period.
///
/// The phase within a slot is the circular mean of the timestamps folded by the
/// trial period, taken modulo `τ`.
/// The first slot follows the longest run of empty slot positions in the
/// trial period.
pub fn estimate_offset(records: &[TimeTagRecord], geometry: &TagGeometry) -> Result<u64> {
    if records.is_empty() {
        return Err(Error::EmptyHistogram);
    }
    let tau = geometry.bin_separation_ps;
    let period = geometry.trial_period_ps;
    let (mut s, mut c) = (0.0, 0.0);
    for r in records {
        let angle = std::f64::consts::TAU * (r.timestamp_ps % period % tau) as f64 / tau as f64;
        s += angle.sin();
        c += angle.cos();
    }
    let mean_angle = s.atan2(c).rem_euclid(std::f64::consts::TAU);
    let phase = ((mean_angle / std::f64::consts::TAU * tau as f64).round() as u64) % tau;

    let positions = period.div_ceil(tau) as usize;
    let mut occupancy = vec![0u64; positions];
    for r in records {
        let u = (r.timestamp_ps % period + period - phase) % period;
        let p = ((u + tau / 2) / tau) as usize % positions;
        occupancy[p] += 1;
    }
    let mut nonzero: Vec<u64> = occupancy.iter().copied().filter(|&c| c > 0).collect();
    nonzero.sort_unstable();
    let median = nonzero[nonzero.len() / 2];
    let empty: Vec<bool> = occupancy.iter().map(|&c| (c as f64) < 0.01 * median as f64).collect();
    // longest circular run of empty positions
    let (mut best_len, mut best_end, mut run) = (0usize, 0usize, 0usize);
    for i in 0..2 * positions {
        if empty[i % positions] {
            run += 1;
            if run > best_len && run <= positions {
                best_len = run;
                best_end = i % positions;
            }
        } else {
            run = 0;
        }
    }
    let first = if best_len == 0 { 0 } else { (best_end + 1) % positions };
    Ok((phase + first as u64 * tau) % period)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Fewer than the minimum events; the entry holds moment estimates.
    Underpopulated,
    /// Width outside the accepted range.
    SigmaOutOfRange,
    /// Least squares did not converge; moment estimates are reported.
    MomentFallback,
}

/// Gaussian-plus-floor fit of one bin's arrival times, relative to the
/// nominal bin time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean_ps: f64,
    pub sigma_ps: f64,
    pub amplitude: f64,
    pub background_floor: f64,
    pub fit_residual: f64,
    pub events: usize,
    pub flag: Option<FitFlag>,
}

/// Fits for every bin, indexed `channel·slots + slot`; `None` for empty bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinFits {
    pub geometry: TagGeometry,
    pub offset_ps: u64,
    pub fits: Vec<Option<GaussianFit>>,
}

/// Fits every bin's arrival-time distribution folded by the trial period.
pub fn fit_bins(records: &[TimeTagRecord], geometry: &TagGeometry, offset_ps: u64) -> BinFits {
    let mut deltas: Vec<Vec<i64>> = vec![Vec::new(); geometry.total_bins()];
    for r in records {
        let (_, slot, delta) = geometry.locate(r.timestamp_ps, offset_ps);
        let ch = r.channel as usize;
        if slot < 0 || slot as usize >= geometry.slots || ch >= geometry.channel_count() {
            continue;
        }
        deltas[ch * geometry.slots + slot as usize].push(delta);
    }
    let fits = deltas.into_par_iter().map(fit_one).collect();
    BinFits {
        geometry: *geometry,
        offset_ps,
        fits,
    }
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standard deviation of integer-picosecond quantization.
const QUANTIZATION_PS: f64 = 0.288_675_134_594_812_9;

fn fit_one(mut deltas: Vec<i64>) -> Option<GaussianFit> {
    if deltas.is_empty() {
        return None;
    }
    let events = deltas.len();
    deltas.sort_unstable();
    let median = deltas[events / 2] as f64;
    let mut dev: Vec<f64> = deltas.iter().map(|&d| (d as f64 - median).abs()).collect();
    dev.sort_unstable_by(f64::total_cmp);
    let robust = (1.4826 * dev[events / 2]).max(QUANTIZATION_PS);
    let lo = median - 6.0 * robust;
    let hi = median + 6.0 * robust;
    let core: Vec<f64> = deltas
        .iter()
        .map(|&d| d as f64)
        .filter(|&d| d >= lo && d <= hi)
        .collect();
    let (m_mean, m_sigma) = moments(&core);
    let fallback = |flag| GaussianFit {
        mean_ps: m_mean,
        sigma_ps: m_sigma.max(QUANTIZATION_PS),
        amplitude: core.len() as f64,
        background_floor: 0.0,
        fit_residual: 0.0,
        events,
        flag: Some(flag),
    };
    if events < MIN_FIT_EVENTS {
        return Some(fallback(FitFlag::Underpopulated));
    }
    if robust <= QUANTIZATION_PS * 1.01 {
        // no resolvable width: a delta spike
        return Some(fallback(FitFlag::SigmaOutOfRange));
    }

    const NBINS: usize = 60;
    let width = (hi - lo) / NBINS as f64;
    let mut counts = [0.0f64; NBINS];
    for &d in &core {
        let i = (((d - lo) / width) as usize).min(NBINS - 1);
        counts[i] += 1.0;
    }
    let xs: Vec<f64> = (0..NBINS).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let peak = counts.iter().cloned().fold(0.0, f64::max);
    let edge = (counts[0] + counts[NBINS - 1]) / 2.0;
    let init = Vector4::new((peak - edge).max(1.0), m_mean, m_sigma.max(robust * 0.5), edge);
    let mut fit = match levenberg_marquardt(&xs, &counts, init) {
        Some((p, residual)) if p[2].abs() > 0.0 && p.iter().all(|v| v.is_finite()) => GaussianFit {
            mean_ps: p[1],
            sigma_ps: p[2].abs(),
            amplitude: p[0],
            background_floor: p[3],
            fit_residual: residual,
            events,
            flag: None,
        },
        _ => fallback(FitFlag::MomentFallback),
    };
    if fit.flag.is_none() && !(SIGMA_RANGE_PS.0..=SIGMA_RANGE_PS.1).contains(&fit.sigma_ps) {
        fit.flag = Some(FitFlag::SigmaOutOfRange);
    }
    Some(fit)
}

/// Poisson-weighted least squares of `A exp(−(x−μ)²/2σ²) + B`.
/// Returns the parameters and the reduced chi-square.
fn levenberg_marquardt(xs: &[f64], ys: &[f64], init: Vector4<f64>) -> Option<(Vector4<f64>, f64)> {
    let weights: Vec<f64> = ys.iter().map(|&y| 1.0 / y.max(1.0)).collect();
    let eval = |p: &Vector4<f64>| -> (f64, Matrix4<f64>, Vector4<f64>) {
        let mut chi2 = 0.0;
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for ((&x, &y), &w) in xs.iter().zip(ys).zip(&weights) {
            let z = (x - p[1]) / p[2];
            let e = (-0.5 * z * z).exp();
            let r = y - (p[0] * e + p[3]);
            let j = Vector4::new(e, p[0] * e * z / p[2], p[0] * e * z * z / p[2], 1.0);
            chi2 += w * r * r;
            jtj += w * j * j.transpose();
            jtr += w * r * j;
        }
        (chi2, jtj, jtr)
    };
    let mut p = init;
    let (mut chi2, mut jtj, mut jtr) = eval(&p);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut a = jtj;
        for i in 0..4 {
            a[(i, i)] *= 1.0 + lambda;
        }
        let step = a.lu().solve(&jtr)?;
        let trial = p + step;
        if trial[2].abs() < 1e-9 {
            lambda *= 10.0;
            continue;
        }
        let (c2, j2, r2) = eval(&trial);
        if c2 < chi2 {
            let converged = (chi2 - c2) <= 1e-10 * chi2.max(1e-300);
            p = trial;
            chi2 = c2;
            jtj = j2;
            jtr = r2;
            lambda = (lambda / 10.0).max(1e-12);
            if converged {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    let dof = (xs.len() as f64 - 4.0).max(1.0);
    Some((p, chi2 / dof))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "param", rename_all = "snake_case")]
pub enum WindowMode {
    /// Full width in picoseconds.
    Static(f64),
    /// Full width as a multiple of the bin's fitted σ.
    Dynamic(f64),
}

impl WindowMode {
    pub fn label(&self) -> &'static str {
        match self {
            WindowMode::Static(_) => "static",
            WindowMode::Dynamic(_) => "dynamic",
        }
    }

    pub fn param(&self) -> f64 {
        match self {
            WindowMode::Static(v) | WindowMode::Dynamic(v) => *v,
        }
    }
}

impl fmt::Display for WindowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.label(), self.param())
    }
}

impl FromStr for WindowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid("windows", format!("`{s}`: expected static:<ps> or dynamic:<mult>")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::invalid("windows", format!("`{s}`: `{value}` is not a number")))?;
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::invalid("windows", format!("`{s}`: width must be positive")));
        }
        match kind.trim() {
            "static" => Ok(WindowMode::Static(value)),
            "dynamic" => Ok(WindowMode::Dynamic(value)),
            other => Err(Error::invalid("windows", format!("unknown window mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinWindow {
    /// Offset of the window center from the nominal bin time.
    pub center_ps: f64,
    pub half_width_ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinWindowPlan {
    pub mode: WindowMode,
    pub geometry: TagGeometry,
    pub offset_ps: u64,
    pub windows: Vec<BinWindow>,
}

/// Windows centered on each bin's fitted mean. Bins without a fit use the
/// nominal time in static mode and are an error in dynamic mode. Dynamic
/// widths use the fitted σ clamped to the accepted range.
pub fn plan_windows(fits: &BinFits, mode: WindowMode) -> Result<BinWindowPlan> {
    let g = &fits.geometry;
    let mut windows = Vec::with_capacity(fits.fits.len());
    for (i, fit) in fits.fits.iter().enumerate() {
        let window = match (mode, fit) {
            (WindowMode::Static(width), fit) => BinWindow {
                center_ps: fit.as_ref().map_or(0.0, |f| f.mean_ps),
                half_width_ps: width / 2.0,
            },
            (WindowMode::Dynamic(mult), Some(fit)) => BinWindow {
                center_ps: fit.mean_ps,
                half_width_ps: mult * fit.sigma_ps.clamp(SIGMA_RANGE_PS.0, SIGMA_RANGE_PS.1) / 2.0,
            },
            (WindowMode::Dynamic(_), None) => {
                return Err(Error::MissingFit {
                    what: format!("channel {} slot {} (no events)", i / g.slots, i % g.slots),
                })
            }
        };
        windows.push(window);
    }
    let tau = g.bin_separation_ps as f64;
    for (i, w) in windows.iter().enumerate() {
        if w.center_ps.abs() + w.half_width_ps >= tau / 2.0 {
            return Err(Error::OverlappingWindows(format!(
                "channel {} slot {}: window [{:.1}, {:.1}] ps reaches the neighbouring slot at ±{:.1} ps",
                i / g.slots,
                i % g.slots,
                w.center_ps - w.half_width_ps,
                w.center_ps + w.half_width_ps,
                tau / 2.0
            )));
        }
    }
    Ok(BinWindowPlan {
        mode,
        geometry: *g,
        offset_ps: fits.offset_ps,
        windows,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulationTally {
    pub total_events: u64,
    /// Events inside some window, including repeats within one window.
    pub in_window_events: u64,
    /// Events outside every window.
    pub discarded_events: u64,
    /// In-window events that hit an already clicked bin.
    pub repeated_events: u64,
    pub trials_with_clicks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accumulation {
    pub joint: JointClickHistogram,
    pub singles: SinglesProfile,
    pub tally: AccumulationTally,
}

impl Accumulation {
    /// Merges a disjoint trial range.
    pub fn merge(&mut self, other: &Accumulation) -> Result<()> {
        self.joint.merge(&other.joint)?;
        self.singles.merge(&other.singles)?;
        let (a, b) = (&mut self.tally, &other.tally);
        a.total_events += b.total_events;
        a.in_window_events += b.in_window_events;
        a.discarded_events += b.discarded_events;
        a.repeated_events += b.repeated_events;
        a.trials_with_clicks += b.trials_with_clicks;
        Ok(())
    }
}

/// Groups in-window events by trial into a joint click histogram and singles.
///
/// Trials without any in-window event are counted as `(0, 0)`: `total_trials`
/// gives the number of recorded trials; when absent, the span between the
/// first and last trial with events is used.
pub fn accumulate(records: &[TimeTagRecord], plan: &BinWindowPlan, total_trials: Option<u64>) -> Result<Accumulation> {
    let g = &plan.geometry;
    let bins = g.bins_per_arm();
    let mut last_ts = vec![0u64; g.channel_count()];
    let mut hits: Vec<(i64, u32)> = Vec::with_capacity(records.len());
    let mut tally = AccumulationTally {
        total_events: records.len() as u64,
        ..Default::default()
    };
    for (i, r) in records.iter().enumerate() {
        let ch = r.channel as usize;
        if ch >= g.channel_count() {
            return Err(Error::ChannelOutOfRange {
                channel: r.channel as u32,
                max: g.max_channel(),
                position: Position::Line(i + 1),
            });
        }
        if r.timestamp_ps < last_ts[ch] {
            return Err(Error::UnorderedStream { index: i });
        }
        last_ts[ch] = r.timestamp_ps;
        let (trial, slot, delta) = g.locate(r.timestamp_ps, plan.offset_ps);
        if slot < 0 || slot as usize >= g.slots {
            tally.discarded_events += 1;
            continue;
        }
        let flat = ch * g.slots + slot as usize;
        let w = &plan.windows[flat];
        if (delta as f64 - w.center_ps).abs() > w.half_width_ps {
            tally.discarded_events += 1;
            continue;
        }
        tally.in_window_events += 1;
        hits.push((trial, flat as u32));
    }
    if hits.windows(2).all(|w| w[0].0 <= w[1].0) {
        for group in hits.chunk_by_mut(|a, b| a.0 == b.0) {
            group.sort_unstable();
        }
    } else {
        hits.sort_unstable();
    }
    let mut joint = JointClickHistogram::empty(bins, bins);
    let mut singles = SinglesProfile::zeros(bins);
    let mut i = 0;
    let (mut first, mut last) = (i64::MAX, i64::MIN);
    while i < hits.len() {
        let trial = hits[i].0;
        first = first.min(trial);
        last = last.max(trial);
        let mut clicks = [0usize; 2];
        let mut prev = u32::MAX;
        while i < hits.len() && hits[i].0 == trial {
            let flat = hits[i].1;
            if flat == prev {
                tally.repeated_events += 1;
            } else {
                let (arm, bin) = g.arm_of(flat as usize);
                clicks[arm.index()] += 1;
                singles.increment(arm, bin);
                prev = flat;
            }
            i += 1;
        }
        joint.record(clicks[0], clicks[1]);
        tally.trials_with_clicks += 1;
    }
    let total = match total_trials {
        Some(t) => t,
        None if tally.trials_with_clicks == 0 => 0,
        None => (last - first + 1) as u64,
    };
    if total < tally.trials_with_clicks {
        return Err(Error::invalid(
            "trials",
            format!("{} trials have clicks but only {total} were recorded", tally.trials_with_clicks),
        ));
    }
    joint.add(0, 0, total - tally.trials_with_clicks);
    Ok(Accumulation { joint, singles, tally })
}

/// Per-trial click sets, useful for debugging small streams.
pub fn trial_clicks(records: &[TimeTagRecord], plan: &BinWindowPlan) -> BTreeMap<i64, Vec<usize>> {
    let g = &plan.geometry;
    let mut out: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for r in records {
        let (trial, slot, delta) = g.locate(r.timestamp_ps, plan.offset_ps);
        let ch = r.channel as usize;
        if slot < 0 || slot as usize >= g.slots || ch >= g.channel_count() {
            continue;
        }
        let flat = ch * g.slots + slot as usize;
        let w = &plan.windows[flat];
        if (delta as f64 - w.center_ps).abs() <= w.half_width_ps {
            let v = out.entry(trial).or_default();
            if !v.contains(&flat) {
                v.push(flat);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "channel,timestamp_ps\n0,1000000\n2,1000012\n1,1100000\n";

    fn fixture_records() -> Vec<TimeTagRecord> {
        vec![
            TimeTagRecord { channel: 0, timestamp_ps: 1_000_000 },
            TimeTagRecord { channel: 2, timestamp_ps: 1_000_012 },
            TimeTagRecord { channel: 1, timestamp_ps: 1_100_000 },
        ]
    }

    #[test]
    fn csv_fixture_parses_exactly() {
        assert_eq!(parse_csv(FIXTURE.as_bytes(), None).unwrap(), fixture_records());
        assert!(parse_csv("".as_bytes(), None).unwrap().is_empty());
        let commented = format!("# run\n{FIXTURE}\n");
        assert_eq!(parse_csv(commented.as_bytes(), None).unwrap().len(), 3);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = parse_csv("channel,timestamp_ps\n0,12\n1;4\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Parse { position: Position::Line(3), .. }));
        let err = parse_csv("channel,timestamp_ps\n9,12\n".as_bytes(), Some(3)).unwrap_err();
        assert!(matches!(err, Error::ChannelOutOfRange { channel: 9, .. }));
        let err = parse_csv("ts,ch\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Parse { position: Position::Line(1), .. }));
    }

    #[test]
    fn binary_round_trip_and_truncation() {
        let mut buf = Vec::new();
        {
            let mut w = BinaryTagWriter::new(&mut buf);
            for r in fixture_records() {
                w.write_record(&r).unwrap();
            }
            w.finish().unwrap();
        }
        assert_eq!(buf.len(), 5 + 3 * FRAME_BYTES);
        assert_eq!(parse_stream(buf.as_slice(), None).unwrap(), fixture_records());
        let cut = &buf[..buf.len() - 4];
        match parse_binary(cut, None) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, Position::ByteOffset(23)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_binary(&[], None).unwrap().is_empty());
    }

    #[test]
    fn csv_writer_round_trip() {
        let mut buf = Vec::new();
        {
            let mut w = CsvTagWriter::new(&mut buf);
            for r in fixture_records() {
                w.write_record(&r).unwrap();
            }
            w.finish().unwrap();
        }
        assert_eq!(String::from_utf8(buf).unwrap(), FIXTURE);
    }

    #[test]
    fn window_specs_parse() {
        assert_eq!("static:1000".parse::<WindowMode>().unwrap(), WindowMode::Static(1000.0));
        assert_eq!("dynamic:1.5".parse::<WindowMode>().unwrap(), WindowMode::Dynamic(1.5));
        assert!("dynamic:-1".parse::<WindowMode>().is_err());
        assert!("wide:3".parse::<WindowMode>().is_err());
    }

    fn geometry() -> TagGeometry {
        TagGeometry {
            trial_period_ps: 1_000_000,
            bin_separation_ps: 100_000,
            slots: 4,
            detectors_per_arm: 1,
        }
    }

    fn fits_with_sigma(sigmas: &[f64]) -> BinFits {
        BinFits {
            geometry: geometry(),
            offset_ps: 0,
            fits: sigmas
                .iter()
                .map(|&s| {
                    Some(GaussianFit {
                        mean_ps: 0.0,
                        sigma_ps: s,
                        amplitude: 1.0,
                        background_floor: 0.0,
                        fit_residual: 0.0,
                        events: 100,
                        flag: None,
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn plan_examples() {
        let fits = fits_with_sigma(&[200.0; 8]);
        let plan = plan_windows(&fits, WindowMode::Static(1000.0)).unwrap();
        assert!(plan.windows.iter().all(|w| w.half_width_ps == 500.0));
        let plan = plan_windows(&fits, WindowMode::Dynamic(1.0)).unwrap();
        assert!(plan.windows.iter().all(|w| w.half_width_ps == 100.0));
        assert!(matches!(
            plan_windows(&fits, WindowMode::Static(100_000.0)),
            Err(Error::OverlappingWindows(_))
        ));
        let mut missing = fits.clone();
        missing.fits[3] = None;
        assert!(matches!(plan_windows(&missing, WindowMode::Dynamic(1.0)), Err(Error::MissingFit { .. })));
        assert!(plan_windows(&missing, WindowMode::Static(10.0)).is_ok());
    }

    #[test]
    fn repeated_events_click_once() {
        let plan = plan_windows(&fits_with_sigma(&[200.0; 8]), WindowMode::Static(1000.0)).unwrap();
        let records = vec![
            TimeTagRecord { channel: 0, timestamp_ps: 100_000 },
            TimeTagRecord { channel: 0, timestamp_ps: 100_100 },
            TimeTagRecord { channel: 1, timestamp_ps: 100_000 },
            TimeTagRecord { channel: 1, timestamp_ps: 150_000 },
        ];
        let acc = accumulate(&records, &plan, Some(3)).unwrap();
        assert_eq!(acc.joint.get(1, 1), 1);
        assert_eq!(acc.joint.get(0, 0), 2);
        assert_eq!(acc.tally.repeated_events, 1);
        assert_eq!(acc.tally.discarded_events, 1);
        assert_eq!(acc.tally.in_window_events + acc.tally.discarded_events, acc.tally.total_events);
    }

    #[test]
    fn unordered_channel_is_rejected() {
        let plan = plan_windows(&fits_with_sigma(&[200.0; 8]), WindowMode::Static(1000.0)).unwrap();
        let records = vec![
            TimeTagRecord { channel: 0, timestamp_ps: 200_000 },
            TimeTagRecord { channel: 0, timestamp_ps: 100_000 },
        ];
        assert!(matches!(accumulate(&records, &plan, None), Err(Error::UnorderedStream { index: 1 })));
    }

    #[test]
    fn delta_spike_is_flagged() {
        let fit = fit_one(vec![0; 500]).unwrap();
        assert_eq!(fit.flag, Some(FitFlag::SigmaOutOfRange));
        assert!(fit.sigma_ps > 0.0);
        let fit = fit_one(vec![3; 10]).unwrap();
        assert_eq!(fit.flag, Some(FitFlag::Underpopulated));
    }
}

//! Monte Carlo model of a heralded, time-multiplexed click-counting experiment.
//!
//! Each trial draws a pair number from a multimode thermal law. Every signal
//! and idler photon lands uniformly in one of its arm's `MD` bins and survives
//! with the bin's detection probability. Background clicks are OR-ed in per
//! bin. Bin `b` of an arm belongs to detector `b / slots` at time slot
//! `b % slots`, where `slots = MD / detectors_per_arm`.
//!
//! Trials are processed in fixed-size chunks. Chunk `c` draws its clicks from
//! ChaCha8 stream `2c` and its timing jitter from stream `2c + 1`, both keyed
//! by `rng_seed`, so results do not depend on the number of worker threads or
//! on whether time tags are written.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Geometric, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::click_counting::{Arm, ClickHistogram, JointClickHistogram, SourceModel, SourceVariant};
use crate::error::{Error, Result};
use crate::timetag::{TagSink, TimeTagRecord};

pub const CONFIG_VERSION: u32 = 1;
/// Trials per deterministic RNG chunk.
pub const CHUNK_TRIALS: u64 = 4096;
/// Detector dead time; bins closer than this would need dead-time modeling.
pub const DEAD_TIME_NS: f64 = 60.0;

/// Reference mapping from pump power (µW) to mean pairs per pulse.
pub const PUMP_REFERENCE: [(f64, f64); 5] = [
    (15.0, 0.15),
    (50.0, 0.5),
    (150.0, 1.5),
    (500.0, 5.0),
    (1000.0, 10.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    /// Detection bins per arm (`MD`).
    pub network_bins: usize,
    pub detectors_per_arm: usize,
    /// Time between consecutive slots of one detector (`τ`).
    pub bin_separation_ns: f64,
    /// Pulse repetition period; must cover all slots of a trial.
    pub trial_period_ns: f64,
    /// Time of the first slot of trial 0.
    pub start_offset_ps: u64,
    pub mean_pairs: f64,
    pub schmidt_modes: f64,
    pub transmission_a: f64,
    pub transmission_b: f64,
    pub detector_efficiency: f64,
    pub background_click_prob: f64,
    /// Peak-to-peak relative ripple of the per-bin efficiency.
    pub bin_efficiency_variation: f64,
    pub pulse_width_min_ps: f64,
    pub pulse_width_max_ps: f64,
    pub jitter: bool,
    pub trials: u64,
    pub rng_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            network_bins: 128,
            detectors_per_arm: 2,
            bin_separation_ns: 100.0,
            trial_period_ns: 10_000.0,
            start_offset_ps: 1_000_000,
            mean_pairs: 1.5,
            schmidt_modes: 10.0,
            transmission_a: 0.861,
            transmission_b: 0.813,
            detector_efficiency: 0.90,
            background_click_prob: 1e-4,
            bin_efficiency_variation: 0.07,
            pulse_width_min_ps: 70.0,
            pulse_width_max_ps: 700.0,
            jitter: true,
            trials: 1_000_000,
            rng_seed: 1,
        }
    }
}

fn check_prob(field: &'static str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::invalid(field, format!("{value} is not a probability in [0, 1]")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::invalid(
                "config_version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.config_version),
            ));
        }
        if self.network_bins == 0 || self.network_bins > 4096 {
            return Err(Error::invalid("network_bins", "must be in 1..=4096"));
        }
        if self.detectors_per_arm == 0 || !self.network_bins.is_multiple_of(self.detectors_per_arm) {
            return Err(Error::invalid(
                "detectors_per_arm",
                "must be positive and divide network_bins",
            ));
        }
        if 2 * self.detectors_per_arm > 256 {
            return Err(Error::invalid("detectors_per_arm", "channels must fit in one byte"));
        }
        if self.bin_separation_ns < DEAD_TIME_NS || !self.bin_separation_ns.is_finite() {
            return Err(Error::invalid(
                "bin_separation_ns",
                format!("must be finite and at least the {DEAD_TIME_NS} ns detector dead time"),
            ));
        }
        let span = self.slots() as f64 * self.bin_separation_ns;
        if self.trial_period_ns < span + self.bin_separation_ns || !self.trial_period_ns.is_finite() {
            return Err(Error::invalid(
                "trial_period_ns",
                format!("must be at least {} ns (all slots plus one guard slot)", span + self.bin_separation_ns),
            ));
        }
        if (self.start_offset_ps as f64) < 0.5 * self.bin_separation_ns * 1e3 {
            return Err(Error::invalid("start_offset_ps", "must be at least half a bin separation"));
        }
        if self.mean_pairs < 0.0 || !self.mean_pairs.is_finite() {
            return Err(Error::invalid("mean_pairs", "must be finite and >= 0"));
        }
        if self.schmidt_modes <= 0.0 || !self.schmidt_modes.is_finite() {
            return Err(Error::invalid("schmidt_modes", "must be finite and > 0"));
        }
        check_prob("transmission_a", self.transmission_a)?;
        check_prob("transmission_b", self.transmission_b)?;
        check_prob("detector_efficiency", self.detector_efficiency)?;
        check_prob("background_click_prob", self.background_click_prob)?;
        if self.background_click_prob >= 1.0 {
            return Err(Error::invalid("background_click_prob", "must be below 1"));
        }
        if !(0.0..=1.0).contains(&self.bin_efficiency_variation) {
            return Err(Error::invalid("bin_efficiency_variation", "must be in [0, 1]"));
        }
        if self.pulse_width_min_ps <= 0.0 || !self.pulse_width_min_ps.is_finite() {
            return Err(Error::invalid("pulse_width_min_ps", "must be finite and > 0"));
        }
        if self.pulse_width_max_ps < self.pulse_width_min_ps || !self.pulse_width_max_ps.is_finite() {
            return Err(Error::invalid("pulse_width_max_ps", "must be finite and >= pulse_width_min_ps"));
        }
        Ok(())
    }

    /// Time slots per detector.
    pub fn slots(&self) -> usize {
        self.network_bins / self.detectors_per_arm
    }

    pub fn trial_period_ps(&self) -> u64 {
        (self.trial_period_ns * 1e3).round() as u64
    }

    pub fn bin_separation_ps(&self) -> u64 {
        (self.bin_separation_ns * 1e3).round() as u64
    }

    pub fn channel(&self, arm: Arm, bin: usize) -> u8 {
        (arm.index() * self.detectors_per_arm + bin / self.slots()) as u8
    }

    pub fn channel_count(&self) -> usize {
        2 * self.detectors_per_arm
    }

    /// Maps a channel back to `(arm, detector)`.
    pub fn channel_arm(&self, channel: u8) -> Option<(Arm, usize)> {
        let c = channel as usize;
        match c / self.detectors_per_arm {
            0 => Some((Arm::A, c % self.detectors_per_arm)),
            1 => Some((Arm::B, c % self.detectors_per_arm)),
            _ => None,
        }
    }

    /// Jitter standard deviation of a time slot, linear from the first to the last slot.
    pub fn pulse_width_ps(&self, slot: usize) -> f64 {
        let slots = self.slots();
        if slots <= 1 {
            return self.pulse_width_min_ps;
        }
        let f = slot as f64 / (slots - 1) as f64;
        self.pulse_width_min_ps + f * (self.pulse_width_max_ps - self.pulse_width_min_ps)
    }

    /// Relative efficiency factor of one bin: a sinusoid with the configured
    /// peak-to-peak ripple, phase-shifted between the arms.
    pub fn bin_efficiency_factor(&self, arm: Arm, bin: usize) -> f64 {
        let phase = match arm {
            Arm::A => 0.0,
            Arm::B => std::f64::consts::FRAC_PI_2,
        };
        let x = std::f64::consts::TAU * bin as f64 / self.network_bins as f64 + phase;
        1.0 + 0.5 * self.bin_efficiency_variation * x.sin()
    }

    /// Per-bin detection probability of a photon that reached the arm.
    pub fn survival_probabilities(&self, arm: Arm) -> Vec<f64> {
        let t = match arm {
            Arm::A => self.transmission_a,
            Arm::B => self.transmission_b,
        };
        (0..self.network_bins)
            .map(|b| (t * self.detector_efficiency * self.bin_efficiency_factor(arm, b)).clamp(0.0, 1.0))
            .collect()
    }
}

/// Mean pairs per pulse for a pump power in µW, interpolated linearly on the
/// reference table and extrapolated proportionally outside it.
pub fn mean_pairs_for_pump(pump_uw: f64) -> f64 {
    let table = &PUMP_REFERENCE;
    if pump_uw <= table[0].0 {
        return pump_uw * table[0].1 / table[0].0;
    }
    for w in table.windows(2) {
        let ((p0, m0), (p1, m1)) = (w[0], w[1]);
        if pump_uw <= p1 {
            return m0 + (pump_uw - p0) * (m1 - m0) / (p1 - p0);
        }
    }
    let (p, m) = table[table.len() - 1];
    pump_uw * m / p
}

/// Per-bin single counts, arm A bins followed by arm B bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinglesProfile {
    bins_per_arm: usize,
    counts: Vec<u64>,
}

impl SinglesProfile {
    pub fn zeros(bins_per_arm: usize) -> Self {
        SinglesProfile {
            bins_per_arm,
            counts: vec![0; 2 * bins_per_arm],
        }
    }

    pub fn from_counts(bins_per_arm: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != 2 * bins_per_arm {
            return Err(Error::DimensionMismatch {
                what: "singles profile",
                expected: 2 * bins_per_arm,
                actual: counts.len(),
            });
        }
        Ok(SinglesProfile { bins_per_arm, counts })
    }

    pub fn bins_per_arm(&self) -> usize {
        self.bins_per_arm
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn arm(&self, arm: Arm) -> &[u64] {
        let start = arm.index() * self.bins_per_arm;
        &self.counts[start..start + self.bins_per_arm]
    }

    pub fn increment(&mut self, arm: Arm, bin: usize) {
        self.counts[arm.index() * self.bins_per_arm + bin] += 1;
    }

    pub fn merge(&mut self, other: &SinglesProfile) -> Result<()> {
        if other.bins_per_arm != self.bins_per_arm {
            return Err(Error::DimensionMismatch {
                what: "singles merge",
                expected: self.bins_per_arm,
                actual: other.bins_per_arm,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Clicked bins of one trial, ascending per arm.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialOutcome {
    pub clicked: [Vec<u32>; 2],
}

impl TrialOutcome {
    pub fn clicks(&self, arm: Arm) -> usize {
        self.clicked[arm.index()].len()
    }
}

/// Pair number from the multimode thermal (negative binomial) law, drawn as a
/// Gamma–Poisson mixture.
pub fn sample_pair_number<R: Rng + ?Sized>(config: &ExperimentConfig, rng: &mut R) -> u64 {
    negative_binomial(config.mean_pairs, config.schmidt_modes, rng)
}

fn negative_binomial<R: Rng + ?Sized>(mean: f64, modes: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let rate = Gamma::new(modes, mean / modes)
        .expect("validated gamma parameters")
        .sample(rng);
    poisson(rate, rng)
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

/// Fixed-width bitset over the bins of one arm.
#[derive(Clone)]
struct BinSet {
    words: Vec<u64>,
}

impl BinSet {
    fn new(bins: usize) -> Self {
        BinSet {
            words: vec![0; bins.div_ceil(64)],
        }
    }

    fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    #[inline]
    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    #[inline]
    fn contains(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    fn union_into(&self, other: &BinSet, out: &mut Vec<u32>) {
        out.clear();
        for (w, (a, b)) in self.words.iter().zip(&other.words).enumerate() {
            let mut bits = a | b;
            while bits != 0 {
                let t = bits.trailing_zeros();
                out.push(w as u32 * 64 + t);
                bits &= bits - 1;
            }
        }
    }
}

/// OR background clicks into `set` by geometric skipping.
fn add_background<R: Rng + ?Sized>(set: &mut BinSet, bins: usize, prob: f64, geo: Option<&Geometric>, rng: &mut R) {
    let Some(geo) = geo else { return };
    if prob >= 1.0 {
        (0..bins).for_each(|b| set.insert(b));
        return;
    }
    let mut pos = 0u64;
    loop {
        pos += geo.sample(rng);
        if pos >= bins as u64 {
            break;
        }
        set.insert(pos as usize);
        pos += 1;
    }
}

struct TrialEngine {
    bins: usize,
    survival: [Vec<f64>; 2],
    background: f64,
    geometric: Option<Geometric>,
    optical: [BinSet; 2],
    noise: [BinSet; 2],
}

impl TrialEngine {
    fn new(config: &ExperimentConfig) -> Self {
        let bins = config.network_bins;
        let geometric = (config.background_click_prob > 0.0)
            .then(|| Geometric::new(config.background_click_prob).expect("validated probability"));
        TrialEngine {
            bins,
            survival: [config.survival_probabilities(Arm::A), config.survival_probabilities(Arm::B)],
            background: config.background_click_prob,
            geometric,
            optical: [BinSet::new(bins), BinSet::new(bins)],
            noise: [BinSet::new(bins), BinSet::new(bins)],
        }
    }

    fn run<R: Rng + ?Sized>(&mut self, pairs: u64, rng: &mut R, out: &mut TrialOutcome) {
        for arm in 0..2 {
            self.optical[arm].clear();
            self.noise[arm].clear();
            for _ in 0..pairs {
                let bin = rng.random_range(0..self.bins);
                if rng.random::<f64>() < self.survival[arm][bin] {
                    self.optical[arm].insert(bin);
                }
            }
            add_background(&mut self.noise[arm], self.bins, self.background, self.geometric.as_ref(), rng);
            self.optical[arm].union_into(&self.noise[arm], &mut out.clicked[arm]);
        }
    }

    fn is_optical(&self, arm: Arm, bin: usize) -> bool {
        self.optical[arm.index()].contains(bin)
    }
}

fn chunk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Results of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub joint: JointClickHistogram,
    pub singles: SinglesProfile,
    pub events: u64,
}

struct ChunkResult {
    joint: JointClickHistogram,
    singles: SinglesProfile,
    tags: Vec<TimeTagRecord>,
}

fn run_chunk(config: &ExperimentConfig, chunk: u64, with_tags: bool) -> ChunkResult {
    let first = chunk * CHUNK_TRIALS;
    let count = CHUNK_TRIALS.min(config.trials - first);
    let bins = config.network_bins;
    let mut rng = chunk_rng(config.rng_seed, 2 * chunk);
    let mut timing = chunk_rng(config.rng_seed, 2 * chunk + 1);
    let mut engine = TrialEngine::new(config);
    let mut joint = JointClickHistogram::empty(bins, bins);
    let mut singles = SinglesProfile::zeros(bins);
    let mut tags = Vec::new();
    let mut outcome = TrialOutcome::default();
    let slots = config.slots();
    let tau = config.bin_separation_ps() as f64;
    let period = config.trial_period_ps();
    let widths: Vec<f64> = (0..slots).map(|s| config.pulse_width_ps(s)).collect();
    for t in first..first + count {
        let pairs = sample_pair_number(config, &mut rng);
        engine.run(pairs, &mut rng, &mut outcome);
        joint.record(outcome.clicks(Arm::A), outcome.clicks(Arm::B));
        for arm in [Arm::A, Arm::B] {
            for &b in &outcome.clicked[arm.index()] {
                singles.increment(arm, b as usize);
            }
        }
        if !with_tags {
            continue;
        }
        let base = config.start_offset_ps as f64 + (t * period) as f64;
        let trial_start = tags.len();
        for arm in [Arm::A, Arm::B] {
            for &b in &outcome.clicked[arm.index()] {
                let b = b as usize;
                let slot = b % slots;
                let jitter = if !config.jitter {
                    0.0
                } else if engine.is_optical(arm, b) {
                    Normal::new(0.0, widths[slot]).expect("positive width").sample(&mut timing)
                } else {
                    (timing.random::<f64>() - 0.5) * tau
                };
                let ts = (base + slot as f64 * tau + jitter).round().max(0.0) as u64;
                tags.push(TimeTagRecord {
                    channel: config.channel(arm, b),
                    timestamp_ps: ts,
                });
            }
        }
        tags[trial_start..].sort_unstable_by_key(|r| (r.timestamp_ps, r.channel));
    }
    ChunkResult { joint, singles, tags }
}

/// Chunks processed together before their tags are flushed to the sink.
const CHUNKS_PER_BATCH: u64 = 64;

fn run(config: &ExperimentConfig, mut sink: Option<&mut dyn TagSink>) -> Result<SimulationOutput> {
    config.validate()?;
    let bins = config.network_bins;
    let chunks = config.trials.div_ceil(CHUNK_TRIALS);
    let with_tags = sink.is_some();
    let mut out = SimulationOutput {
        joint: JointClickHistogram::empty(bins, bins),
        singles: SinglesProfile::zeros(bins),
        events: 0,
    };
    let mut start = 0;
    while start < chunks {
        let end = (start + CHUNKS_PER_BATCH).min(chunks);
        let parts: Vec<ChunkResult> = (start..end)
            .into_par_iter()
            .map(|c| run_chunk(config, c, with_tags))
            .collect();
        for part in parts {
            out.joint.merge(&part.joint)?;
            out.singles.merge(&part.singles)?;
            if let Some(sink) = sink.as_deref_mut() {
                for tag in &part.tags {
                    sink.write_record(tag)?;
                }
                out.events += part.tags.len() as u64;
            }
        }
        start = end;
    }
    if !with_tags {
        out.events = out.singles.counts().iter().sum();
    }
    if let Some(sink) = sink {
        sink.finish()?;
    }
    Ok(out)
}

/// Joint click histogram and per-bin singles of `config.trials` trials.
pub fn simulate_trials(config: &ExperimentConfig) -> Result<(JointClickHistogram, SinglesProfile)> {
    let out = run(config, None)?;
    Ok((out.joint, out.singles))
}

/// Simulates the experiment and streams its detector events to `sink` in
/// time order. The returned histograms equal those of [`simulate_trials`].
pub fn synthesize_timetags(config: &ExperimentConfig, sink: &mut dyn TagSink) -> Result<SimulationOutput> {
    run(config, Some(sink))
}

/// Photon-number law of a single-arm reference source.
#[derive(Debug, Clone, PartialEq)]
pub enum PhotonNumberLaw {
    Fixed(u64),
    Poisson(f64),
    NegativeBinomial { mean: f64, modes: f64 },
    /// Weighted mixture of Poisson laws: `(weight, mean)` pairs.
    PoissonMixture(Vec<(f64, f64)>),
}

impl From<&SourceModel> for PhotonNumberLaw {
    fn from(model: &SourceModel) -> Self {
        match model.variant {
            SourceVariant::Fock { photons } => PhotonNumberLaw::Fixed(photons as u64),
            SourceVariant::Coherent { mean_photons } => PhotonNumberLaw::Poisson(mean_photons),
            SourceVariant::Thermal {
                mean_photons,
                schmidt_modes,
            } => PhotonNumberLaw::NegativeBinomial {
                mean: mean_photons,
                modes: schmidt_modes,
            },
        }
    }
}

impl PhotonNumberLaw {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            PhotonNumberLaw::Fixed(n) => *n,
            PhotonNumberLaw::Poisson(mean) => poisson(*mean, rng),
            PhotonNumberLaw::NegativeBinomial { mean, modes } => negative_binomial(*mean, *modes, rng),
            PhotonNumberLaw::PoissonMixture(parts) => {
                let total: f64 = parts.iter().map(|p| p.0).sum();
                let mut u = rng.random::<f64>() * total;
                for &(w, mean) in parts {
                    if u < w {
                        return poisson(mean, rng);
                    }
                    u -= w;
                }
                poisson(parts.last().map_or(0.0, |p| p.1), rng)
            }
        }
    }
}

/// Click histogram of a single-arm source on `detectors` uniformly
/// multiplexed bins with uniform efficiency.
pub fn sample_click_histogram(
    law: &PhotonNumberLaw,
    efficiency: f64,
    background: f64,
    detectors: usize,
    trials: u64,
    seed: u64,
) -> Result<ClickHistogram> {
    check_prob("efficiency", efficiency)?;
    check_prob("background_click_prob", background)?;
    if detectors == 0 {
        return Err(Error::invalid("detectors", "must be positive"));
    }
    let chunks = trials.div_ceil(CHUNK_TRIALS);
    let parts: Vec<ClickHistogram> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, 2 * c);
            let mut hist = ClickHistogram::empty(detectors);
            let geo = (background > 0.0 && background < 1.0)
                .then(|| Geometric::new(background).expect("validated probability"));
            let mut set = BinSet::new(detectors);
            let empty = BinSet::new(detectors);
            let mut clicked = Vec::new();
            let count = CHUNK_TRIALS.min(trials - c * CHUNK_TRIALS);
            for _ in 0..count {
                set.clear();
                for _ in 0..law.sample(&mut rng) {
                    let bin = rng.random_range(0..detectors);
                    if rng.random::<f64>() < efficiency {
                        set.insert(bin);
                    }
                }
                if background >= 1.0 {
                    (0..detectors).for_each(|b| set.insert(b));
                } else {
                    add_background(&mut set, detectors, background, geo.as_ref(), &mut rng);
                }
                set.union_into(&empty, &mut clicked);
                hist.record(clicked.len());
            }
            hist
        })
        .collect();
    let mut total = ClickHistogram::empty(detectors);
    for part in &parts {
        total.merge(part)?;
    }
    Ok(total)
}

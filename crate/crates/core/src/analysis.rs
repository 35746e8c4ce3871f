//! Post-processing: R0 estimation, epidemic-curve features, attack-rate
//! tables, synchrony of per-SLA epidemic peaks, the seeding scan and
//! choropleth export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::census::{haversine_km, AgeBand, RegionHierarchy, NATIONAL_POPULATION};
use crate::disease::calibrate::SettingFractions;
use crate::disease::DiseaseModel;
use crate::engine::{run, SeedSpec, SimConfig, SimError, SimOutput, SimState};
use crate::popgen::Population;
use crate::rng::{Purpose, Stream};

/// Cumulative-ill milestones of a national-scale run.
pub const FULL_SCALE_THRESHOLDS: [f64; 4] = [1e3, 1e4, 1e5, 1e6];
/// Prevalence level for the "days above" count of a national-scale run.
pub const FULL_SCALE_PREVALENCE_THRESHOLD: f64 = 1e5;
/// Reference colour scale for prevalence-proportion maps.
pub const CHOROPLETH_COLOUR_BOUNDS: [f64; 2] = [5e-3, 8e-2];
pub const DEFAULT_CHOROPLETH_DAYS: [u32; 4] = [30, 50, 62, 88];

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("synchrony needs at least two peak days, got {0}")]
    TooFewPeaks(usize),
    #[error("{slas} SLAs cannot fill {bins} bins")]
    TooFewSlas { slas: usize, bins: usize },
    #[error("day {day} outside the simulated range 0..{days}")]
    DayOutOfRange { day: u32, days: u32 },
    #[error("no simulation outputs given")]
    NoOutputs,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn write_file(path: &Path, text: String) -> Result<(), AnalysisError> {
    fs::write(path, text).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Sample (n-1) variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Reciprocal variance of peak days. Identical peaks have no finite
/// value and are flagged instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Synchrony {
    pub value: Option<f64>,
    pub fully_synchronous: bool,
}

impl Synchrony {
    /// Value used when comparing or averaging: fully synchronous sets rank
    /// above every finite value.
    pub fn as_f64(&self) -> f64 {
        if self.fully_synchronous {
            f64::INFINITY
        } else {
            self.value.unwrap_or(f64::NAN)
        }
    }
}

pub fn synchrony(peak_days: &[f64]) -> Result<Synchrony, AnalysisError> {
    if peak_days.len() < 2 {
        return Err(AnalysisError::TooFewPeaks(peak_days.len()));
    }
    let var = sample_variance(peak_days);
    Ok(if var == 0.0 {
        Synchrony {
            value: None,
            fully_synchronous: true,
        }
    } else {
        Synchrony {
            value: Some(1.0 / var),
            fully_synchronous: false,
        }
    })
}

/// Synchrony of a pair of peaks, `2 / delta^2`; `None` when they coincide.
pub fn pairwise_synchrony(a: f64, b: f64) -> Option<f64> {
    let d = a - b;
    (d != 0.0).then(|| 2.0 / (d * d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakMode {
    /// Argmax of a centred 7-day moving average.
    #[default]
    Smoothed,
    Raw,
}

/// Day of the largest value, first on ties; `None` for an all-zero series.
pub fn peak_day(series: &[f64], mode: PeakMode) -> Option<u32> {
    if !series.iter().any(|&x| x > 0.0) {
        return None;
    }
    let values: Vec<f64> = match mode {
        PeakMode::Raw => series.to_vec(),
        PeakMode::Smoothed => (0..series.len())
            .map(|d| {
                let lo = d.saturating_sub(3);
                let hi = (d + 4).min(series.len());
                series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect(),
    };
    let mut best = 0;
    for (d, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = d;
        }
    }
    Some(best as u32)
}

/// Peak day of every SLA's incidence series.
pub fn sla_peak_days(out: &SimOutput, mode: PeakMode) -> Vec<Option<u32>> {
    out.sla_incidence
        .iter()
        .map(|s| {
            let xs: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            peak_day(&xs, mode)
        })
        .collect()
}

/// Synchrony across every SLA that saw at least one case.
pub fn community_synchrony(out: &SimOutput, mode: PeakMode) -> Option<Synchrony> {
    let peaks: Vec<f64> = sla_peak_days(out, mode).into_iter().flatten().map(f64::from).collect();
    synchrony(&peaks).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDay {
    pub threshold: f64,
    pub day: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFeatures {
    pub thresholds: Vec<ThresholdDay>,
    pub peak_day: Option<u32>,
    pub peak_incidence: u64,
    pub prevalence_threshold: f64,
    pub days_above_threshold: u32,
    pub cumulative_ill: u64,
    pub synchrony: Option<Synchrony>,
}

/// Milestones scaled from national to `population` agents.
pub fn scaled_thresholds(population: usize) -> (Vec<f64>, f64) {
    let f = population as f64 / NATIONAL_POPULATION;
    (
        FULL_SCALE_THRESHOLDS.iter().map(|t| t * f).collect(),
        FULL_SCALE_PREVALENCE_THRESHOLD * f,
    )
}

pub fn curve_features(
    out: &SimOutput,
    thresholds: &[f64],
    prevalence_threshold: f64,
    mode: PeakMode,
) -> CurveFeatures {
    let incidence: Vec<f64> = out.national.iter().map(|d| d.incidence as f64).collect();
    let peak = peak_day(&incidence, PeakMode::Raw);
    CurveFeatures {
        thresholds: thresholds
            .iter()
            .map(|&t| ThresholdDay {
                threshold: t,
                day: out.national.iter().find(|d| d.cumulative as f64 >= t).map(|d| d.day),
            })
            .collect(),
        peak_day: peak,
        peak_incidence: peak.map_or(0, |d| out.national[d as usize].incidence),
        prevalence_threshold,
        days_above_threshold: out
            .national
            .iter()
            .filter(|d| d.prevalence as f64 > prevalence_threshold)
            .count() as u32,
        cumulative_ill: out.cumulative_ill(),
        synchrony: if out.sla_incidence.is_empty() {
            None
        } else {
            community_synchrony(out, mode)
        },
    }
}

/// Ill agents per 10,000 by age band, in national and community form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRates {
    pub national: [f64; 5],
    pub community: [f64; 5],
    pub national_overall: f64,
    pub community_overall: f64,
}

pub fn attack_rate_tables(out: &SimOutput, pop: &Population) -> AttackRates {
    let n_sla = pop.regions.slas.len();
    let mut band_pop = vec![[0u64; 5]; n_sla];
    for a in &pop.agents {
        band_pop[a.sla as usize][a.band.index()] += 1;
    }
    let mut national = [0.0; 5];
    let mut community = [0.0; 5];
    for b in 0..5 {
        let ill: u64 = out.ill_by_sla_band.iter().map(|r| r[b]).sum();
        let n: u64 = band_pop.iter().map(|r| r[b]).sum();
        national[b] = if n > 0 { ill as f64 / n as f64 * 1e4 } else { 0.0 };
        let rates: Vec<f64> = (0..n_sla)
            .filter(|&k| band_pop[k][b] > 0)
            .map(|k| out.ill_by_sla_band[k][b] as f64 / band_pop[k][b] as f64 * 1e4)
            .collect();
        if rates.len() < n_sla {
            log::debug!(
                "band {}: {} SLAs without residents left out of the community mean",
                AgeBand::from_index(b).label(),
                n_sla - rates.len()
            );
        }
        community[b] = if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        };
    }
    let total_ill: u64 = out.ill_by_sla_band.iter().flatten().sum();
    let national_overall = if pop.is_empty() {
        0.0
    } else {
        total_ill as f64 / pop.len() as f64 * 1e4
    };
    let sla_rates: Vec<f64> = (0..n_sla)
        .filter(|&k| !pop.sla_agents[k].is_empty())
        .map(|k| out.ill_by_sla_band[k].iter().sum::<u64>() as f64 / pop.sla_agents[k].len() as f64 * 1e4)
        .collect();
    let community_overall = if sla_rates.is_empty() {
        0.0
    } else {
        sla_rates.iter().sum::<f64>() / sla_rates.len() as f64
    };
    AttackRates {
        national,
        community,
        national_overall,
        community_overall,
    }
}

/// Contents of summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub kappa: f64,
    pub days: u32,
    pub age_bands: Vec<String>,
    pub attack_rates_per_10k: AttackRates,
    pub setting_fractions: SettingFractions,
    pub setting_counts: std::collections::BTreeMap<String, u64>,
    pub peak_day: Option<u32>,
    pub peak_incidence: u64,
    pub cumulative_ill: u64,
    pub total_infected: u64,
    pub seeds: u64,
    pub mean_generation_days: Option<f64>,
    pub clamp_count: u64,
}

impl RunSummary {
    pub fn of(out: &SimOutput, pop: &Population) -> Self {
        let incidence: Vec<f64> = out.national.iter().map(|d| d.incidence as f64).collect();
        let peak = peak_day(&incidence, PeakMode::Raw);
        RunSummary {
            seed: out.seed,
            kappa: out.kappa,
            days: out.days,
            age_bands: (0..5).map(|b| AgeBand::from_index(b).label().to_string()).collect(),
            attack_rates_per_10k: attack_rate_tables(out, pop),
            setting_fractions: SettingFractions::from_counts(&out.setting_counts),
            setting_counts: crate::popgen::Context::ALL
                .iter()
                .map(|c| (c.label().to_string(), out.setting_counts[c.index()]))
                .collect(),
            peak_day: peak,
            peak_incidence: peak.map_or(0, |d| out.national[d as usize].incidence),
            cumulative_ill: out.cumulative_ill(),
            total_infected: out.total_infected(),
            seeds: out.seed_events.len() as u64,
            mean_generation_days: out.mean_generation_time(),
            clamp_count: out.clamp_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R0Estimate {
    pub kappa: f64,
    pub r0: f64,
    pub stderr: f64,
    /// `histogram[k]` samples produced exactly `k` secondary cases.
    pub histogram: Vec<u64>,
    pub samples: usize,
    /// Mean interval in days from the seed's infection to its secondary
    /// cases' infections.
    pub mean_generation_days: Option<f64>,
}

/// Secondary cases of one randomly chosen seed in a fully susceptible
/// population, run until the seed recovers. Only the seed transmits, so
/// its offspring never deplete the susceptibles it could reach.
fn r0_sample(state: &mut SimState<'_>, pop: &Population, seed: u64, sample: u64) -> (usize, u64) {
    let sample_seed = Stream::derive_seed(seed, Purpose::R0Sample, sample);
    state.reset(sample_seed);
    let mut pick = Stream::new(sample_seed, 0, 0, Purpose::R0Sample);
    let agent = pick.below(pop.len() as u64) as u32;
    state.seed_agent(agent, "r0");
    state.restrict_transmission_to(Some(agent));
    let end = state.record(agent).expect("seeded").recovery_step();
    while state.step() < end {
        state.advance();
    }
    let steps: u64 = state
        .infected()
        .iter()
        .filter_map(|&a| state.record(a))
        .filter(|r| r.infector == Some(agent))
        .map(|r| r.step as u64)
        .sum();
    (state.secondary_cases(agent), steps)
}

pub fn estimate_r0(pop: &Population, model: &DiseaseModel, kappa: f64, n_samples: usize, seed: u64) -> R0Estimate {
    let results: Vec<(usize, u64)> = if kappa == 0.0 || pop.is_empty() {
        vec![(0, 0); n_samples]
    } else {
        (0..n_samples)
            .into_par_iter()
            .with_min_len(64)
            .map_init(
                || SimState::new(pop, model, kappa, seed),
                |state, s| r0_sample(state, pop, seed, s as u64),
            )
            .collect()
    };
    let counts: Vec<usize> = results.iter().map(|r| r.0).collect();
    let secondaries: usize = counts.iter().sum();
    let generation_steps: u64 = results.iter().map(|r| r.1).sum();
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut histogram = vec![0u64; max + 1];
    for &c in &counts {
        histogram[c] += 1;
    }
    let n = n_samples.max(1) as f64;
    let r0 = histogram.iter().enumerate().map(|(k, &h)| k as f64 * h as f64).sum::<f64>() / n;
    let var = if n_samples > 1 {
        counts.iter().map(|&c| (c as f64 - r0).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    R0Estimate {
        kappa,
        r0,
        stderr: (var / n).sqrt(),
        histogram,
        samples: n_samples,
        mean_generation_days: (secondaries > 0).then(|| generation_steps as f64 / 2.0 / secondaries as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
    /// 95% confidence interval for the slope.
    pub slope_ci: (f64, f64),
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let dof = n - 2.0;
    let slope_stderr = if dof > 0.0 { (sse / dof / sxx).sqrt() } else { f64::NAN };
    let t = if dof > 0.0 {
        StudentsT::new(0.0, 1.0, dof).map(|d| d.inverse_cdf(0.975)).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    LinearFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        slope_ci: (slope - t * slope_stderr, slope + t * slope_stderr),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynchronyBin {
    pub bin: usize,
    /// Smallest and largest SLA population (size mode) or pair distance in
    /// km (distance mode) in the bin.
    pub lower: f64,
    pub upper: f64,
    pub members: usize,
    /// Mean over runs (size mode) or over pairs (distance mode); `None`
    /// when no run or pair produced a finite value.
    pub synchrony: Option<f64>,
    /// Runs (size mode) or pairs (distance mode) whose peaks coincided.
    pub fully_synchronous: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynchronyReport {
    pub mode: String,
    pub bins: Vec<SynchronyBin>,
    /// Peak day of each SLA in each run, `[run][sla]`.
    pub peak_days: Vec<Vec<Option<u32>>>,
    pub sla_ids: Vec<String>,
    /// SLAs without any case, counted over runs.
    pub excluded: usize,
    pub trend: Option<LinearFit>,
}

/// Splits `0..n` into `bins` contiguous equal-count ranges.
pub fn equal_count_bins(n: usize, bins: usize) -> Vec<std::ops::Range<usize>> {
    (0..bins).map(|k| (k * n / bins)..((k + 1) * n / bins)).collect()
}

fn bin_trend(bins: &[SynchronyBin]) -> Option<LinearFit> {
    let pts: Vec<(f64, f64)> = bins
        .iter()
        .filter_map(|b| b.synchrony.map(|s| (b.bin as f64, s)))
        .collect();
    (pts.len() >= 3).then(|| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        linear_fit(&xs, &ys)
    })
}

/// Synchrony of SLAs of similar size. SLAs are sorted by population (ties by
/// id) and split into equal-count bins; each bin's synchrony is averaged
/// over the runs in which at least two of its SLAs had cases.
pub fn synchrony_by_size(
    outputs: &[SimOutput],
    sla_sizes: &[usize],
    sla_ids: &[String],
    n_bins: usize,
    mode: PeakMode,
) -> Result<SynchronyReport, AnalysisError> {
    if outputs.is_empty() {
        return Err(AnalysisError::NoOutputs);
    }
    let n = sla_sizes.len();
    if n < n_bins || n_bins == 0 {
        return Err(AnalysisError::TooFewSlas { slas: n, bins: n_bins });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&k| (sla_sizes[k], &sla_ids[k]));
    let peaks: Vec<Vec<Option<u32>>> = outputs.iter().map(|o| sla_peak_days(o, mode)).collect();
    let excluded = peaks.iter().flatten().filter(|p| p.is_none()).count();
    let bins = equal_count_bins(n, n_bins)
        .into_iter()
        .enumerate()
        .map(|(b, range)| {
            let members = &order[range];
            let mut values = Vec::new();
            let mut full = 0u64;
            for run in &peaks {
                let days: Vec<f64> = members.iter().filter_map(|&k| run[k]).map(f64::from).collect();
                if let Ok(s) = synchrony(&days) {
                    match s.value {
                        Some(v) => values.push(v),
                        None => full += 1,
                    }
                }
            }
            SynchronyBin {
                bin: b,
                lower: members.first().map_or(0.0, |&k| sla_sizes[k] as f64),
                upper: members.last().map_or(0.0, |&k| sla_sizes[k] as f64),
                members: members.len(),
                synchrony: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
                fully_synchronous: full,
            }
        })
        .collect::<Vec<_>>();
    Ok(SynchronyReport {
        mode: "size".into(),
        trend: bin_trend(&bins),
        bins,
        peak_days: peaks,
        sla_ids: sla_ids.to_vec(),
        excluded,
    })
}

/// Pairwise synchrony against centroid distance. All SLA pairs are sorted
/// by distance and split into equal-count bins; each bin reports the mean
/// pairwise synchrony over the (run, pair) combinations where both SLAs had
/// cases and their peaks differ.
pub fn pairwise_synchrony_by_distance(
    outputs: &[SimOutput],
    regions: &RegionHierarchy,
    n_bins: usize,
    mode: PeakMode,
) -> Result<SynchronyReport, AnalysisError> {
    if outputs.is_empty() {
        return Err(AnalysisError::NoOutputs);
    }
    let n = regions.slas.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let (x, y) = (&regions.slas[a], &regions.slas[b]);
            let (x, y) = if x.id <= y.id { (x, y) } else { (y, x) };
            pairs.push((haversine_km(x.centroid, y.centroid), a, b));
        }
    }
    if pairs.len() < n_bins || n_bins == 0 {
        return Err(AnalysisError::TooFewSlas { slas: n, bins: n_bins });
    }
    // Ties break on SLA ids so the binning does not depend on input order.
    let key = |&(_, a, b): &(f64, usize, usize)| {
        let (x, y) = (&regions.slas[a].id, &regions.slas[b].id);
        if x <= y { (x, y) } else { (y, x) }
    };
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| key(x).cmp(&key(y))));
    let peaks: Vec<Vec<Option<u32>>> = outputs.iter().map(|o| sla_peak_days(o, mode)).collect();
    let excluded = peaks.iter().flatten().filter(|p| p.is_none()).count();
    let bins = equal_count_bins(pairs.len(), n_bins)
        .into_iter()
        .enumerate()
        .map(|(b, range)| {
            let slice = &pairs[range];
            let mut sum = 0.0;
            let mut count = 0usize;
            let mut full = 0u64;
            for run in &peaks {
                for &(_, i, j) in slice {
                    if let (Some(p), Some(q)) = (run[i], run[j]) {
                        match pairwise_synchrony(p as f64, q as f64) {
                            Some(v) => {
                                sum += v;
                                count += 1;
                            }
                            None => full += 1,
                        }
                    }
                }
            }
            SynchronyBin {
                bin: b,
                lower: slice.first().map_or(0.0, |p| p.0),
                upper: slice.last().map_or(0.0, |p| p.0),
                members: slice.len(),
                synchrony: (count > 0).then(|| sum / count as f64),
                fully_synchronous: full,
            }
        })
        .collect::<Vec<_>>();
    Ok(SynchronyReport {
        mode: "distance".into(),
        trend: bin_trend(&bins),
        bins,
        peak_days: peaks,
        sla_ids: regions.slas.iter().map(|s| s.id.clone()).collect(),
        excluded,
    })
}

/// Log-spaced proportions from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSettings {
    pub duration_days: u32,
    pub kappa: f64,
    pub runs_per_cell: usize,
    pub peak_mode: PeakMode,
    /// When the Bernoulli draws seed nobody in the chosen SLAs, infect one
    /// of their residents so that every run has an introduction.
    pub at_least_one_seed: bool,
}

impl Default for ScanSettings {
    fn default() -> Self {
        ScanSettings {
            duration_days: 180,
            kappa: 1.0,
            runs_per_cell: 10,
            peak_mode: PeakMode::Smoothed,
            at_least_one_seed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanCell {
    pub sla_count: usize,
    pub proportion: f64,
    pub runs: usize,
    /// Runs in which at least two SLAs had cases.
    pub epidemics: usize,
    /// Mean finite synchrony over those runs.
    pub synchrony: Option<f64>,
    pub fully_synchronous: usize,
}

/// Runs explicit-seeded simulations for every (SLA count, proportion) cell.
/// The seeded SLAs of each run are a uniformly drawn subset.
pub fn seeding_scan(
    pop: &Population,
    model: &DiseaseModel,
    sla_counts: &[usize],
    proportions: &[f64],
    settings: &ScanSettings,
    seed: u64,
) -> Result<Vec<ScanCell>, AnalysisError> {
    let n_sla = pop.regions.slas.len();
    let mut cells = Vec::new();
    for &count in sla_counts {
        for (pi, &proportion) in proportions.iter().enumerate() {
            let mut values = Vec::new();
            let mut full = 0;
            let mut epidemics = 0;
            for r in 0..settings.runs_per_cell {
                let run_seed = crate::rng::mix(&[seed, Purpose::Scan as u64, count as u64, pi as u64, r as u64]);
                let mut pick = Stream::from_key(run_seed);
                let mut chosen: Vec<usize> = (0..n_sla).collect();
                pick.shuffle(&mut chosen);
                chosen.truncate(count.min(n_sla));
                chosen.sort_unstable();
                let out = scan_run(pop, model, settings, run_seed, &chosen, proportion)?;
                let peaks: Vec<f64> = sla_peak_days(&out, settings.peak_mode)
                    .into_iter()
                    .flatten()
                    .map(f64::from)
                    .collect();
                if let Ok(s) = synchrony(&peaks) {
                    epidemics += 1;
                    match s.value {
                        Some(v) => values.push(v),
                        None => full += 1,
                    }
                }
            }
            cells.push(ScanCell {
                sla_count: count,
                proportion,
                runs: settings.runs_per_cell,
                epidemics,
                synchrony: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
                fully_synchronous: full,
            });
        }
    }
    Ok(cells)
}

fn scan_run(
    pop: &Population,
    model: &DiseaseModel,
    settings: &ScanSettings,
    run_seed: u64,
    chosen: &[usize],
    proportion: f64,
) -> Result<SimOutput, AnalysisError> {
    let mut state = SimState::new(pop, model, settings.kappa, run_seed);
    let ids: Vec<String> = chosen.iter().map(|&k| pop.regions.slas[k].id.clone()).collect();
    let seeded = if ids.is_empty() {
        0
    } else {
        state.seed_explicit(&ids, proportion)?
    };
    if seeded == 0 && settings.at_least_one_seed && proportion > 0.0 {
        let residents: Vec<u32> = chosen.iter().flat_map(|&k| pop.sla_agents[k].iter().copied()).collect();
        if !residents.is_empty() {
            let mut rng = Stream::new(run_seed, 1, 0, Purpose::ExplicitSeeding);
            state.seed_agent(residents[rng.below(residents.len() as u64) as usize], "explicit");
        }
    }
    for _ in 0..2 * settings.duration_days {
        state.advance();
    }
    Ok(state.output(settings.duration_days, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoroplethRow {
    pub day: u32,
    pub sla_id: String,
    pub prevalence_proportion: f64,
}

/// Symptomatic share of each SLA's residents at the end of each requested day.
pub fn export_choropleth(out: &SimOutput, pop: &Population, days: &[u32]) -> Result<Vec<ChoroplethRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(days.len() * pop.regions.slas.len());
    for &day in days {
        if day >= out.days || out.sla_prevalence.is_empty() {
            return Err(AnalysisError::DayOutOfRange { day, days: out.days });
        }
        for (k, sla) in pop.regions.slas.iter().enumerate() {
            let residents = pop.sla_agents[k].len();
            let prev = out.sla_prevalence[k][day as usize] as f64;
            rows.push(ChoroplethRow {
                day,
                sla_id: sla.id.clone(),
                prevalence_proportion: if residents == 0 { 0.0 } else { prev / residents as f64 },
            });
        }
    }
    Ok(rows)
}

/// Mean and standard deviation across runs of each day's national counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateDay {
    pub day: u32,
    pub incidence_mean: f64,
    pub incidence_sd: f64,
    pub prevalence_mean: f64,
    pub prevalence_sd: f64,
    pub cumulative_mean: f64,
    pub cumulative_sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 { sample_variance(xs).sqrt() } else { 0.0 };
    (m, sd)
}

pub fn aggregate_runs(outputs: &[SimOutput]) -> Vec<AggregateDay> {
    let days = outputs.iter().map(|o| o.national.len()).min().unwrap_or(0);
    (0..days)
        .map(|d| {
            let col = |f: &dyn Fn(&crate::engine::DailyCounts) -> u64| -> Vec<f64> {
                outputs.iter().map(|o| f(&o.national[d]) as f64).collect()
            };
            let (im, is) = mean_sd(&col(&|c| c.incidence));
            let (pm, ps) = mean_sd(&col(&|c| c.prevalence));
            let (cm, cs) = mean_sd(&col(&|c| c.cumulative));
            AggregateDay {
                day: d as u32,
                incidence_mean: im,
                incidence_sd: is,
                prevalence_mean: pm,
                prevalence_sd: ps,
                cumulative_mean: cm,
                cumulative_sd: cs,
            }
        })
        .collect()
}

pub fn write_aggregate(rows: &[AggregateDay], path: &Path) -> Result<(), AnalysisError> {
    let mut s = String::from(
        "day,incidence_mean,incidence_sd,prevalence_mean,prevalence_sd,cumulative_mean,cumulative_sd\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.day, r.incidence_mean, r.incidence_sd, r.prevalence_mean, r.prevalence_sd, r.cumulative_mean, r.cumulative_sd
        );
    }
    write_file(path, s)
}

pub fn write_r0_curve(estimates: &[R0Estimate], path: &Path) -> Result<(), AnalysisError> {
    let mut s = String::from("kappa,r0_mean,r0_stderr,n_samples\n");
    for e in estimates {
        let _ = writeln!(s, "{},{},{},{}", e.kappa, e.r0, e.stderr, e.samples);
    }
    write_file(path, s)
}

pub fn write_attack_rates(rates: &AttackRates, path: &Path) -> Result<(), AnalysisError> {
    let mut s = String::from("age_band,national_per_10k,community_per_10k\n");
    for b in 0..5 {
        let _ = writeln!(
            s,
            "{},{},{}",
            AgeBand::from_index(b).label(),
            rates.national[b],
            rates.community[b]
        );
    }
    let _ = writeln!(s, "overall,{},{}", rates.national_overall, rates.community_overall);
    write_file(path, s)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_synchrony(report: &SynchronyReport, path: &Path) -> Result<(), AnalysisError> {
    let unit = if report.mode == "size" { "population" } else { "distance_km" };
    let mut s = format!("bin,lower_{unit},upper_{unit},members,synchrony,fully_synchronous\n");
    for b in &report.bins {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            b.bin,
            b.lower,
            b.upper,
            b.members,
            opt(b.synchrony),
            b.fully_synchronous
        );
    }
    write_file(path, s)
}

pub fn write_seeding_scan(cells: &[ScanCell], path: &Path) -> Result<(), AnalysisError> {
    let mut s = String::from("sla_count,proportion,runs,epidemics,synchrony,fully_synchronous\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.sla_count,
            c.proportion,
            c.runs,
            c.epidemics,
            opt(c.synchrony),
            c.fully_synchronous
        );
    }
    write_file(path, s)
}

/// Writes choropleth.csv and choropleth_meta.json with the colour bounds.
pub fn write_choropleth(rows: &[ChoroplethRow], dir: &Path) -> Result<(), AnalysisError> {
    let mut s = String::from("day,sla_id,prevalence_proportion\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.day, r.sla_id, r.prevalence_proportion);
    }
    write_file(&dir.join("choropleth.csv"), s)?;
    let mut days: Vec<u32> = rows.iter().map(|r| r.day).collect();
    days.dedup();
    let meta = serde_json::json!({
        "days": days,
        "colour_scale": {"min": CHOROPLETH_COLOUR_BOUNDS[0], "max": CHOROPLETH_COLOUR_BOUNDS[1]},
        "value": "symptomatic agents / SLA residents at end of day",
    });
    write_file(
        &dir.join("choropleth_meta.json"),
        serde_json::to_string_pretty(&meta).expect("json"),
    )
}

/// Runs `runs` simulations with seeds offset from `config.seed`.
pub fn run_many(
    pop: &Population,
    model: &DiseaseModel,
    config: &SimConfig,
    runs: usize,
) -> Result<Vec<SimOutput>, SimError> {
    (0..runs)
        .map(|r| {
            let c = SimConfig {
                seed: config.seed.wrapping_add(r as u64),
                ..config.clone()
            };
            run(pop, model, &c)
        })
        .collect()
}

/// Explicit seeding of every SLA, convenient for scans and tests.
pub fn all_slas(pop: &Population, proportion: f64) -> SeedSpec {
    SeedSpec::Explicit {
        slas: pop.regions.slas.iter().map(|s| s.id.clone()).collect(),
        proportion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synchrony_of_three_peaks() {
        let s = synchrony(&[10.0, 12.0, 14.0]).unwrap();
        assert_eq!(s.value, Some(0.25));
        let same = synchrony(&[5.0, 5.0, 5.0]).unwrap();
        assert!(same.fully_synchronous && same.value.is_none());
        assert!(synchrony(&[1.0]).is_err());
        let wider = synchrony(&[10.0, 12.0, 14.0, 40.0]).unwrap();
        assert!(wider.value.unwrap() < 0.25);
    }

    #[test]
    fn pairwise_values() {
        assert_eq!(pairwise_synchrony(10.0, 12.0), Some(0.5));
        assert_eq!(pairwise_synchrony(3.0, 3.0), None);
        let direct = 1.0 / sample_variance(&[10.0, 12.0]);
        assert!((pairwise_synchrony(10.0, 12.0).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn peaks() {
        let mut series: Vec<f64> = (0..100).map(|d| 100.0 - (d as f64 - 50.0).abs()).collect();
        assert_eq!(peak_day(&series, PeakMode::Raw), Some(50));
        assert_eq!(peak_day(&series, PeakMode::Smoothed), Some(50));
        series.iter_mut().for_each(|x| *x *= 3.5);
        assert_eq!(peak_day(&series, PeakMode::Raw), Some(50));
        assert_eq!(peak_day(&[0.0; 5], PeakMode::Raw), None);
        assert_eq!(peak_day(&[1.0, 3.0, 3.0], PeakMode::Raw), Some(1));
        // A one-day spike loses to a broad hump once smoothed.
        let mut s = vec![0.0; 60];
        s[5] = 20.0;
        for (d, v) in s.iter_mut().enumerate().skip(30).take(15) {
            *v = 6.0 + (d as f64 - 37.0).abs().min(3.0) * -1.0;
        }
        assert_eq!(peak_day(&s, PeakMode::Raw), Some(5));
        assert!(peak_day(&s, PeakMode::Smoothed).unwrap() > 30);
    }

    #[test]
    fn bins_partition() {
        let bins = equal_count_bins(20, 10);
        assert!(bins.iter().all(|r| r.len() == 2));
        let bins = equal_count_bins(23, 10);
        let covered: Vec<usize> = bins.into_iter().flatten().collect();
        assert_eq!(covered, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn line_fit() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [2.0, 4.0, 6.0, 8.0];
        let f = linear_fit(&xs, &ys);
        assert!((f.slope - 2.0).abs() < 1e-12 && f.intercept.abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_spacing() {
        let p = log_space(1e-5, 1.0, 6);
        for (a, b) in p.iter().zip([1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]) {
            assert!((a / b - 1.0).abs() < 1e-9);
        }
    }
}

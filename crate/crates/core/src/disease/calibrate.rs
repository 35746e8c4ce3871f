//! Fitting the infectious window to a target generation time, and fitting
//! the contact scaling `rho` to target transmission-setting shares.

use serde::{Deserialize, Serialize};

use super::{infectivity, sample_infection_record, DiseaseModel, InfectionRecord, NaturalHistoryParams};
use crate::engine::{run, SeedSpec, SimConfig, SimError};
use crate::popgen::{Context, Population};
use crate::rng::{Purpose, Stream};

pub const GENERATION_TIME_TARGET: (f64, f64) = (3.35, 3.39);

/// Peak per-step transmission probability of the reference infector-infectee
/// pair used when fitting the infectious window, at `kappa = 1`.
pub const REFERENCE_PAIR_PROBABILITY: f64 = 0.02;

/// All (record, weight) combinations the natural-history pmfs can produce.
fn enumerate_records(params: &NaturalHistoryParams) -> Vec<(InfectionRecord, f64)> {
    let (lo, extra) = params.infectious_step_pmf();
    let windows = [(lo, 1.0 - extra), (lo + 1, extra)];
    let mut onsets: Vec<(Option<u8>, f64)> = vec![(None, 1.0 - params.p_symptomatic)];
    for (k, &p) in params.onset_day_pmf.iter().enumerate() {
        onsets.push((Some(k as u8 + 1), params.p_symptomatic * p));
    }
    let mut out = Vec::new();
    for &(latent_days, pl) in &params.latent_days_pmf {
        for &(window, pw) in &windows {
            for &(onset, po) in &onsets {
                let w = pl * pw * po;
                if w <= 0.0 || window == 0 {
                    continue;
                }
                out.push((
                    InfectionRecord {
                        step: 0,
                        latent_steps: (latent_days * 2) as u16,
                        infectious_steps: window as u16,
                        onset_day: onset,
                        infector: None,
                        context: None,
                    },
                    w,
                ));
            }
        }
    }
    out
}

/// Exact mean generation time, in days, of a pair in continuous contact whose
/// per-step transmission probability is `pair_probability * f(elapsed)`.
/// Only pairs in which transmission occurs contribute.
pub fn mean_generation_time(params: &NaturalHistoryParams, pair_probability: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (record, weight) in enumerate_records(params) {
        let mut escape = 1.0;
        let end = record.latent_steps as i64 + record.infectious_steps as i64;
        for elapsed in 1..end {
            let h = (pair_probability * infectivity(elapsed, &record, params)).min(1.0);
            let p = escape * h;
            num += weight * p * elapsed as f64 / 2.0;
            den += weight * p;
            escape *= 1.0 - h;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

/// Monte-Carlo counterpart of [`mean_generation_time`]: draws `pairs`
/// infectors and lets each one try to infect a single partner.
pub fn simulate_generation_time(
    params: &NaturalHistoryParams,
    pair_probability: f64,
    pairs: usize,
    rng: &mut Stream,
) -> f64 {
    let mut total = 0.0;
    let mut hits = 0usize;
    for _ in 0..pairs {
        let record = sample_infection_record(0, rng, params);
        let end = record.latent_steps as i64 + record.infectious_steps as i64;
        for elapsed in 1..end {
            let h = pair_probability * infectivity(elapsed, &record, params);
            if rng.bernoulli(h) {
                total += elapsed as f64 / 2.0;
                hits += 1;
                break;
            }
        }
    }
    if hits == 0 {
        f64::NAN
    } else {
        total / hits as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationFit {
    pub infectious_days: f64,
    pub mean_generation_days: f64,
    pub simulated_generation_days: f64,
    pub converged: bool,
}

/// Finds the infectious window whose reference-pair mean generation time is
/// the midpoint of `target`. The fitted value is then checked by simulating
/// infector-infectee pairs.
pub fn calibrate_infectious_duration(
    params: &NaturalHistoryParams,
    target: (f64, f64),
    rng: &mut Stream,
) -> DurationFit {
    let goal = 0.5 * (target.0 + target.1);
    let at = |days: f64| {
        let p = NaturalHistoryParams {
            infectious_days: days,
            ..params.clone()
        };
        mean_generation_time(&p, REFERENCE_PAIR_PROBABILITY)
    };
    // Symptoms on day 3 must fall inside the window.
    let (mut lo, mut hi) = (3.5 + 1e-9, 20.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if at(mid) < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Round to 0.01 days so the preset stays readable.
    let days = (0.5 * (lo + hi) * 100.0).round() / 100.0;
    let fitted = NaturalHistoryParams {
        infectious_days: days,
        ..params.clone()
    };
    let mean = mean_generation_time(&fitted, REFERENCE_PAIR_PROBABILITY);
    let simulated = simulate_generation_time(&fitted, REFERENCE_PAIR_PROBABILITY, 200_000, rng);
    DurationFit {
        infectious_days: days,
        mean_generation_days: mean,
        simulated_generation_days: simulated,
        converged: (target.0..=target.1).contains(&mean),
    }
}

/// Transmission shares by setting: household (the household and its
/// cluster of neighbouring households), school (school, grade and class)
/// and everything else.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SettingFractions {
    pub household: f64,
    pub school: f64,
    pub other: f64,
}

impl SettingFractions {
    pub fn from_counts(counts: &[u64; 8]) -> Self {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return SettingFractions::default();
        }
        let share = |ctxs: &[Context]| {
            ctxs.iter().map(|c| counts[c.index()]).sum::<u64>() as f64 / total as f64
        };
        let household = share(&[Context::Household, Context::HouseholdCluster]);
        let school = share(&[Context::School, Context::Grade, Context::Class]);
        SettingFractions {
            household,
            school,
            other: 1.0 - household - school,
        }
    }

    /// Worst distance from the targets, zero when all three are inside.
    pub fn miss(&self, targets: &SettingTargets) -> f64 {
        let d = |v: f64, (lo, hi): (f64, f64)| (lo - v).max(v - hi).max(0.0);
        d(self.household, targets.household)
            .max(d(self.school, targets.school))
            .max(d(self.other, targets.other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingTargets {
    pub household: (f64, f64),
    pub school: (f64, f64),
    pub other: (f64, f64),
}

impl Default for SettingTargets {
    fn default() -> Self {
        SettingTargets {
            household: (0.30, 0.40),
            school: (0.15, 0.25),
            other: (0.40, 0.50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSearch {
    pub rho_range: (f64, f64),
    pub iterations: usize,
    pub epidemics_per_iteration: usize,
    pub verification_epidemics: usize,
    pub days: u32,
    pub initial_infected: usize,
    pub threads: usize,
}

impl Default for RhoSearch {
    fn default() -> Self {
        RhoSearch {
            rho_range: (0.0, 2.0),
            iterations: 10,
            epidemics_per_iteration: 4,
            verification_epidemics: 20,
            days: 180,
            initial_infected: 10,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoFit {
    pub rho: f64,
    pub fractions: SettingFractions,
    pub epidemics: usize,
    pub converged: bool,
    /// (rho, fractions) for every candidate tried.
    pub trace: Vec<(f64, SettingFractions)>,
}

/// Pooled setting fractions over `epidemics` runs seeded with random
/// infections.
pub fn setting_fractions(
    population: &Population,
    model: &DiseaseModel,
    search: &RhoSearch,
    epidemics: usize,
    seed: u64,
) -> Result<SettingFractions, SimError> {
    let mut counts = [0u64; 8];
    for e in 0..epidemics {
        let config = SimConfig {
            duration_days: search.days,
            seed: Stream::derive_seed(seed, Purpose::Calibration, e as u64),
            kappa: model.kappa(),
            seeding: SeedSpec::Random {
                count: search.initial_infected,
            },
            threads: search.threads,
            ..SimConfig::default()
        };
        let out = run(population, model, &config)?;
        for (c, v) in counts.iter_mut().zip(out.setting_counts) {
            *c += v;
        }
    }
    Ok(SettingFractions::from_counts(&counts))
}

/// Bisection on `rho` over the school-versus-other balance: a larger `rho`
/// strengthens every contact-based setting and so lowers the school share.
pub fn calibrate_rho(
    population: &Population,
    model: &DiseaseModel,
    targets: &SettingTargets,
    search: &RhoSearch,
    seed: u64,
) -> Result<RhoFit, SimError> {
    let mut trace = Vec::new();
    let eval = |rho: f64, epidemics: usize, trace: &mut Vec<(f64, SettingFractions)>| {
        let m = model.clone().with_rho(rho);
        let f = setting_fractions(population, &m, search, epidemics, seed)?;
        trace.push((rho, f));
        Ok::<_, SimError>(f)
    };
    let (mut lo, mut hi) = search.rho_range;
    let first = eval(lo, search.epidemics_per_iteration, &mut trace)?;
    let mut best = (lo, first.miss(targets));
    if best.1 > 0.0 {
        let goal = 0.5 * (targets.school.0 + targets.school.1);
        for _ in 0..search.iterations {
            let mid = 0.5 * (lo + hi);
            let f = eval(mid, search.epidemics_per_iteration, &mut trace)?;
            let miss = f.miss(targets);
            if miss < best.1 {
                best = (mid, miss);
            }
            if miss == 0.0 {
                break;
            }
            if f.school > goal {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let rho = best.0;
    let fractions = eval(rho, search.verification_epidemics, &mut trace)?;
    Ok(RhoFit {
        rho,
        fractions,
        epidemics: search.verification_epidemics,
        converged: fractions.miss(targets) == 0.0,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_generation_time() {
        // One day latent, a single infectious half-day: every transmission
        // happens exactly one day after infection.
        let params = NaturalHistoryParams {
            latent_days_pmf: vec![(1, 1.0)],
            infectious_days: 0.5,
            ..NaturalHistoryParams::default()
        };
        assert_eq!(mean_generation_time(&params, 0.3), 1.0);
    }

    #[test]
    fn analytic_matches_simulation() {
        let params = NaturalHistoryParams::default();
        let exact = mean_generation_time(&params, 0.1);
        let mut rng = Stream::from_key(5);
        let sim = simulate_generation_time(&params, 0.1, 200_000, &mut rng);
        assert!((exact - sim).abs() < 0.02, "{exact} vs {sim}");
    }

    #[test]
    fn fitted_window_hits_target() {
        let mut rng = Stream::from_key(8);
        let fit = calibrate_infectious_duration(
            &NaturalHistoryParams::default(),
            GENERATION_TIME_TARGET,
            &mut rng,
        );
        assert!(fit.converged, "{fit:?}");
        assert!((fit.simulated_generation_days - 3.37).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn stronger_pairs_transmit_earlier() {
        let params = NaturalHistoryParams::default();
        let mut last = f64::INFINITY;
        for kappa in [1.0, 2.0, 3.0, 4.0] {
            let g = mean_generation_time(&params, REFERENCE_PAIR_PROBABILITY * kappa);
            assert!(g < last);
            last = g;
        }
    }

    #[test]
    fn setting_shares() {
        let mut counts = [0u64; 8];
        counts[Context::Household.index()] = 15;
        counts[Context::HouseholdCluster.index()] = 20;
        counts[Context::Class.index()] = 20;
        counts[Context::Community.index()] = 45;
        let f = SettingFractions::from_counts(&counts);
        assert!((f.household - 0.35).abs() < 1e-12);
        assert!((f.school - 0.20).abs() < 1e-12);
        assert_eq!(f.miss(&SettingTargets::default()), 0.0);
    }
}

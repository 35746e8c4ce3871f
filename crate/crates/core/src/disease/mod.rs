//! Transmission mathematics and natural history.
//!
//! A susceptible agent `i` escapes infection in a half-day step with
//! probability `prod_g prod_j (1 - p_ji)` over the infectious members `j` of
//! every group `g` active for it in that cycle, where
//! `p_ji = kappa * f(n - n_j) * q_ji`. The per-pair value `q` is either a
//! tabled household/school transmission probability or a contact probability
//! scaled by `rho` and rescaled for group size.

pub mod calibrate;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::census::AgeBand;
use crate::popgen::{AgentId, Context, Cycle};
use crate::rng::Stream;

pub const SCHEMA_VERSION: u32 = 1;
pub const PRESET_H1N1_2009: &str = "h1n1-2009";

#[derive(Debug, thiserror::Error)]
pub enum DiseaseError {
    #[error("transmission rate must be non-negative, got {0}")]
    NegativeRate(f64),
    #[error("contact probability {c} scaled by rho {rho} is not a probability")]
    ScaledOutOfRange { c: f64, rho: f64 },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HealthState {
    Susceptible,
    Latent,
    InfectiousAsymptomatic,
    InfectiousPresymptomatic,
    InfectiousSymptomatic,
    Recovered,
}

impl HealthState {
    pub fn is_infectious(self) -> bool {
        matches!(
            self,
            HealthState::InfectiousAsymptomatic
                | HealthState::InfectiousPresymptomatic
                | HealthState::InfectiousSymptomatic
        )
    }

    /// Whether `next` may follow `self` one or more steps later.
    pub fn may_precede(self, next: HealthState) -> bool {
        use HealthState::*;
        let rank = |s: HealthState| match s {
            Susceptible => 0,
            Latent => 1,
            InfectiousAsymptomatic | InfectiousPresymptomatic => 2,
            InfectiousSymptomatic => 3,
            Recovered => 4,
        };
        if self == next {
            return true;
        }
        match (self, next) {
            (InfectiousAsymptomatic, InfectiousSymptomatic)
            | (InfectiousAsymptomatic, InfectiousPresymptomatic)
            | (InfectiousPresymptomatic, InfectiousAsymptomatic)
            | (InfectiousSymptomatic, InfectiousAsymptomatic)
            | (InfectiousSymptomatic, InfectiousPresymptomatic) => false,
            _ => rank(self) < rank(next),
        }
    }
}

/// Course of one infection. All durations are in half-day steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfectionRecord {
    /// Step at which the agent became latent.
    pub step: u32,
    pub latent_steps: u16,
    pub infectious_steps: u16,
    /// Day of symptom onset after infectiousness begins; `None` for
    /// asymptomatic infections.
    pub onset_day: Option<u8>,
    pub infector: Option<AgentId>,
    pub context: Option<Context>,
}

impl InfectionRecord {
    pub fn will_be_symptomatic(&self) -> bool {
        self.onset_day.is_some()
    }

    pub fn infectious_start(&self) -> u32 {
        self.step + self.latent_steps as u32
    }

    pub fn recovery_step(&self) -> u32 {
        self.infectious_start() + self.infectious_steps as u32
    }

    /// Absolute step at which symptoms appear.
    pub fn onset_step(&self) -> Option<u32> {
        self.onset_day
            .map(|d| self.infectious_start() + 2 * d as u32)
            .filter(|&s| s < self.recovery_step())
    }

    pub fn state_at(&self, step: u32) -> HealthState {
        if step < self.infectious_start() {
            HealthState::Latent
        } else if step >= self.recovery_step() {
            HealthState::Recovered
        } else {
            match self.onset_step() {
                Some(onset) if step >= onset => HealthState::InfectiousSymptomatic,
                Some(_) => HealthState::InfectiousPresymptomatic,
                None => HealthState::InfectiousAsymptomatic,
            }
        }
    }
}

/// State of an agent given its (optional) infection record.
pub fn state_of(record: Option<&InfectionRecord>, step: u32) -> HealthState {
    match record {
        None => HealthState::Susceptible,
        Some(r) if step < r.step => HealthState::Susceptible,
        Some(r) => r.state_at(step),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalHistoryParams {
    pub p_symptomatic: f64,
    /// Probability of symptom onset 1, 2 and 3 days after infectiousness begins.
    pub onset_day_pmf: [f64; 3],
    /// Infectivity multiplier while asymptomatic or pre-symptomatic.
    pub asymptomatic_infectivity: f64,
    /// (days, probability) pairs for the latent period.
    pub latent_days_pmf: Vec<(u32, f64)>,
    /// Mean length of the infectious window in days. A non-integral number of
    /// half-day steps is realised as a two-point mixture of the neighbouring
    /// step counts.
    pub infectious_days: f64,
}

impl Default for NaturalHistoryParams {
    fn default() -> Self {
        NaturalHistoryParams {
            p_symptomatic: 0.67,
            onset_day_pmf: [0.30, 0.50, 0.20],
            asymptomatic_infectivity: 0.5,
            latent_days_pmf: vec![(1, 0.5), (2, 0.5)],
            infectious_days: DEFAULT_INFECTIOUS_DAYS,
        }
    }
}

/// Infectious window produced by `calibrate_infectious_duration` with the
/// default latent and onset distributions.
pub const DEFAULT_INFECTIOUS_DAYS: f64 = 5.43;

impl NaturalHistoryParams {
    pub fn validate(&self) -> Result<(), DiseaseError> {
        let bad = |m: String| Err(DiseaseError::Invalid(m));
        if !(0.0..=1.0).contains(&self.p_symptomatic) {
            return bad(format!("p_symptomatic {} outside [0,1]", self.p_symptomatic));
        }
        if (self.onset_day_pmf.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.onset_day_pmf.iter().any(|&p| p < 0.0)
        {
            return bad("onset_day_pmf must be a distribution".into());
        }
        if !(self.asymptomatic_infectivity > 0.0 && self.asymptomatic_infectivity <= 1.0) {
            return bad("asymptomatic_infectivity must lie in (0,1]".into());
        }
        if self.latent_days_pmf.is_empty()
            || (self.latent_days_pmf.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() > 1e-9
            || self.latent_days_pmf.iter().any(|p| p.1 < 0.0)
        {
            return bad("latent_days_pmf must be a distribution".into());
        }
        let (lo, _) = self.infectious_step_pmf();
        // Everyone who will be symptomatic must reach onset before recovery.
        if lo <= 6 {
            return bad(format!(
                "infectious_days {} too short: symptoms on day 3 need more than 3 days",
                self.infectious_days
            ));
        }
        if lo > u16::MAX as u32 / 2 {
            return bad("infectious_days too long".into());
        }
        Ok(())
    }

    /// Lower step count and the probability of taking one extra step.
    pub fn infectious_step_pmf(&self) -> (u32, f64) {
        let steps = self.infectious_days * 2.0;
        let lo = steps.floor();
        (lo as u32, steps - lo)
    }
}

/// Linear-decay infectivity over the infectious window, multiplied by the
/// asymptomatic factor until symptoms appear. `elapsed_steps` is `n - n_j`
/// in half-day steps.
///
/// Infectiousness rises from zero to its peak during the half-day that
/// closes the latent period, so the first infectious step carries the peak
/// value 1 and each later step loses `1/W` of it for a window of `W` steps.
pub fn infectivity(elapsed_steps: i64, record: &InfectionRecord, params: &NaturalHistoryParams) -> f64 {
    let latent = record.latent_steps as i64;
    let window = record.infectious_steps as i64;
    if elapsed_steps < latent || elapsed_steps >= latent + window {
        return 0.0;
    }
    let s = elapsed_steps - latent;
    let profile = (window - s) as f64 / window as f64;
    let symptomatic = record.onset_day.is_some_and(|d| s >= 2 * d as i64);
    if symptomatic {
        profile
    } else {
        profile * params.asymptomatic_infectivity
    }
}

/// Draws the course of a new infection at `step`.
pub fn sample_infection_record(step: u32, rng: &mut Stream, params: &NaturalHistoryParams) -> InfectionRecord {
    let symptomatic = rng.uniform() < params.p_symptomatic;
    let onset = rng.weighted_index(&params.onset_day_pmf).unwrap_or(0) as u8 + 1;
    let latent_w: Vec<f64> = params.latent_days_pmf.iter().map(|p| p.1).collect();
    let latent_days = params.latent_days_pmf[rng.weighted_index(&latent_w).unwrap_or(0)].0;
    let (lo, extra) = params.infectious_step_pmf();
    let infectious = lo + u32::from(rng.uniform() < extra);
    InfectionRecord {
        step,
        latent_steps: (latent_days * 2) as u16,
        infectious_steps: infectious as u16,
        onset_day: symptomatic.then_some(onset),
        infector: None,
        context: None,
    }
}

/// Daily transmission probability from a transmission rate: `1 - exp(-beta)`.
pub fn beta_to_probability(beta: f64) -> Result<f64, DiseaseError> {
    if !(beta >= 0.0) {
        return Err(DiseaseError::NegativeRate(beta));
    }
    Ok(1.0 - (-beta).exp())
}

/// Transmission probability from a contact probability: `rho * c`.
pub fn contact_to_probability(c: f64, rho: f64) -> Result<f64, DiseaseError> {
    let q = rho * c;
    if !(0.0..=1.0).contains(&c) || rho < 0.0 || q > 1.0 || q.is_nan() {
        return Err(DiseaseError::ScaledOutOfRange { c, rho });
    }
    Ok(q)
}

/// Linear group-size rescaling: `c * reference / actual`, clamped to [0,1].
pub fn rescale_contact_for_group_size(c: f64, actual_size: usize, reference_size: f64) -> f64 {
    let actual = actual_size.max(1) as f64;
    (c * reference_size / actual).clamp(0.0, 1.0)
}

/// Tabled probabilities. Household and school entries are transmission
/// probabilities; cluster, work, community and neighbourhood entries are
/// contact probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionTables {
    /// (child target, adult target) for household sizes 2..=6.
    pub household: [[f64; 2]; 5],
    pub school: f64,
    pub grade: f64,
    pub class: f64,
    /// Indexed [infector is adult][target is adult].
    pub cluster: [[f64; 2]; 2],
    pub work_group: f64,
    /// By target: 0-4, 5-18, 19-64, 65+.
    pub neighbourhood: [f64; 4],
    pub community: [f64; 4],
    pub rho: f64,
    pub kappa: f64,
    /// Group size at which each contact probability applies unchanged;
    /// `None` disables rescaling for that context.
    pub reference_sizes: ReferenceSizes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSizes {
    pub household_cluster: Option<f64>,
    pub work_group: Option<f64>,
    pub community: Option<f64>,
    pub neighbourhood: Option<f64>,
}

impl ReferenceSizes {
    pub fn get(&self, ctx: Context) -> Option<f64> {
        match ctx {
            Context::HouseholdCluster => self.household_cluster,
            Context::WorkGroup => self.work_group,
            Context::Community => self.community,
            Context::Neighbourhood => self.neighbourhood,
            _ => None,
        }
    }
}

/// Calibrated contact scaling for the default tables.
pub const DEFAULT_RHO: f64 = 0.37;

impl Default for TransmissionTables {
    fn default() -> Self {
        TransmissionTables {
            household: [
                [0.0933, 0.0393],
                [0.0586, 0.0244],
                [0.0417, 0.0173],
                [0.0321, 0.0133],
                [0.0259, 0.0107],
            ],
            school: 0.000292,
            grade: 0.00158,
            class: 0.035,
            cluster: [[0.08, 0.035], [0.025, 0.04]],
            work_group: 0.05,
            neighbourhood: [0.0000435, 0.0001305, 0.000348, 0.000696],
            community: [0.0000109, 0.0000326, 0.000087, 0.000174],
            rho: DEFAULT_RHO,
            kappa: 1.0,
            reference_sizes: ReferenceSizes {
                household_cluster: None,
                work_group: Some(8.0),
                community: Some(500.0),
                neighbourhood: Some(2000.0),
            },
        }
    }
}

fn community_band(band: AgeBand) -> usize {
    match band {
        AgeBand::Age0To4 => 0,
        AgeBand::Age5To18 => 1,
        AgeBand::Age19To34 | AgeBand::Age35To64 => 2,
        AgeBand::Age65Plus => 3,
    }
}

impl TransmissionTables {
    pub fn validate(&self) -> Result<(), DiseaseError> {
        let mut all: Vec<f64> = self.household.iter().flatten().copied().collect();
        all.extend([self.school, self.grade, self.class, self.work_group]);
        all.extend(self.cluster.iter().flatten());
        all.extend(self.neighbourhood);
        all.extend(self.community);
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DiseaseError::Invalid("table entries must lie in [0,1]".into()));
        }
        if !(self.kappa >= 0.0) || !(self.rho >= 0.0) {
            return Err(DiseaseError::Invalid("kappa and rho must be non-negative".into()));
        }
        Ok(())
    }

    /// Peak-infectivity transmission probability `q` for one ordered pair in
    /// a group of `group_size`, before `kappa` and the cycle share.
    pub fn q(&self, ctx: Context, infector: AgeBand, target: AgeBand, group_size: usize) -> f64 {
        let contact = |c: f64| {
            let q = self.rho * c;
            match self.reference_sizes.get(ctx) {
                Some(r) => rescale_contact_for_group_size(q, group_size, r),
                None => q.clamp(0.0, 1.0),
            }
        };
        match ctx {
            Context::Household => {
                if group_size < 2 {
                    0.0
                } else {
                    let row = self.household[group_size.min(6) - 2];
                    if target.is_child() {
                        row[0]
                    } else {
                        row[1]
                    }
                }
            }
            Context::School | Context::Grade | Context::Class => {
                if !(infector.is_child() && target.is_child()) {
                    return 0.0;
                }
                match ctx {
                    Context::School => self.school,
                    Context::Grade => self.grade,
                    _ => self.class,
                }
            }
            Context::HouseholdCluster => contact(
                self.cluster[usize::from(!infector.is_child())][usize::from(!target.is_child())],
            ),
            Context::WorkGroup => {
                if infector.is_working_age() && target.is_working_age() {
                    contact(self.work_group)
                } else {
                    0.0
                }
            }
            Context::Community => contact(self.community[community_band(target)]),
            Context::Neighbourhood => contact(self.neighbourhood[community_band(target)]),
        }
    }
}

/// Share of a daily probability applied in one half-day cycle.
pub fn cycle_share(ctx: Context, _cycle: Cycle) -> f64 {
    match ctx {
        Context::Community | Context::Neighbourhood => 0.5,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseModel {
    pub schema_version: u32,
    pub preset: Option<String>,
    pub natural_history: NaturalHistoryParams,
    pub tables: TransmissionTables,
}

impl Default for DiseaseModel {
    fn default() -> Self {
        DiseaseModel::h1n1_2009()
    }
}

impl DiseaseModel {
    pub fn h1n1_2009() -> Self {
        DiseaseModel {
            schema_version: SCHEMA_VERSION,
            preset: Some(PRESET_H1N1_2009.to_string()),
            natural_history: NaturalHistoryParams::default(),
            tables: TransmissionTables::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self, DiseaseError> {
        match name {
            PRESET_H1N1_2009 => Ok(Self::h1n1_2009()),
            other => Err(DiseaseError::UnknownPreset(other.to_string())),
        }
    }

    pub fn kappa(&self) -> f64 {
        self.tables.kappa
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.tables.kappa = kappa;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.tables.rho = rho;
        self
    }

    pub fn validate(&self) -> Result<(), DiseaseError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DiseaseError::Invalid(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.natural_history.validate()?;
        self.tables.validate()
    }

    pub fn load(path: &Path) -> Result<Self, DiseaseError> {
        let err = |message: String| DiseaseError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let model: DiseaseModel = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    /// Accepts a preset name or a path to a JSON model.
    pub fn resolve(spec: &str) -> Result<Self, DiseaseError> {
        if spec == PRESET_H1N1_2009 {
            return Ok(Self::h1n1_2009());
        }
        Self::load(Path::new(spec))
    }

    pub fn save(&self, path: &Path) -> Result<(), DiseaseError> {
        let text = serde_json::to_string_pretty(self).expect("model serialises");
        std::fs::write(path, text).map_err(|e| DiseaseError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// A mixing group as seen by the transmission formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupView {
    pub context: Context,
    pub size: usize,
}

/// Per-pair probability together with whether clamping to 1 was needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairProbability {
    pub p: f64,
    pub clamped: bool,
}

/// `kappa * f(n - n_j) * q` for one infector/target pair in a group during
/// `step`. Community and neighbourhood contacts carry half their daily
/// probability in each cycle.
pub fn pairwise_transmission_prob(
    model: &DiseaseModel,
    infector_band: AgeBand,
    infector: &InfectionRecord,
    target_band: AgeBand,
    group: GroupView,
    step: u32,
) -> PairProbability {
    let f = infectivity(
        step as i64 - infector.step as i64,
        infector,
        &model.natural_history,
    );
    if f == 0.0 {
        return PairProbability { p: 0.0, clamped: false };
    }
    let q = model
        .tables
        .q(group.context, infector_band, target_band, group.size)
        * cycle_share(group.context, Cycle::of_step(step));
    let raw = model.tables.kappa * f * q;
    PairProbability {
        p: raw.min(1.0),
        clamped: raw > 1.0,
    }
}

/// One infectious member of one group active for the target.
#[derive(Debug, Clone, Copy)]
pub struct Contact<'a> {
    pub group: GroupView,
    pub infector_band: AgeBand,
    pub infector: &'a InfectionRecord,
}

/// Probability that a susceptible agent becomes latent in `step`:
/// `1 - prod (1 - p_pair)` over all listed contacts.
pub fn infection_probability(
    model: &DiseaseModel,
    target_band: AgeBand,
    contacts: &[Contact<'_>],
    step: u32,
) -> f64 {
    let escape: f64 = contacts
        .iter()
        .map(|c| {
            1.0 - pairwise_transmission_prob(model, c.infector_band, c.infector, target_band, c.group, step).p
        })
        .product();
    1.0 - escape
}

//! Discrete-time transmission engine.
//!
//! The clock advances in half-day steps. Step `n` reads the infection records
//! written before `n`, evaluates every susceptible agent against the groups
//! active in that cycle, and writes new records stamped `n`. Because every
//! decision draws from a stream keyed by (seed, agent, step, purpose), the
//! set of new infections does not depend on evaluation order or on how
//! agents are split across worker threads.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::census::{haversine_km, Airport};
use crate::disease::{
    pairwise_transmission_prob, sample_infection_record, state_of, DiseaseError, DiseaseModel, GroupView,
    HealthState, InfectionRecord,
};
use crate::popgen::{Agent, AgentId, Context, Cycle, GroupId, Population};
use crate::rng::{Purpose, Stream};

pub const PER_ARRIVAL_INFECTION_PROBABILITY: f64 = 0.0004;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown SLA `{0}`")]
    UnknownSla(String),
    #[error("explicit seeding needs at least one SLA")]
    EmptySlaList,
    #[error(transparent)]
    Disease(#[from] DiseaseError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn default_arrival_probability() -> f64 {
    PER_ARRIVAL_INFECTION_PROBABILITY
}

/// How infections enter the population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SeedSpec {
    None,
    /// Binomial daily arrivals around each airport. An empty airport list is
    /// filled from the population's census bundle by the caller.
    Airports {
        #[serde(default = "default_arrival_probability")]
        per_arrival_probability: f64,
        #[serde(default)]
        airports: Vec<Airport>,
    },
    /// Every resident of the listed SLAs is infected at step 0 with
    /// probability `proportion`.
    Explicit { slas: Vec<String>, proportion: f64 },
    /// `count` distinct agents chosen uniformly at step 0.
    Random { count: usize },
    /// The listed agents at step 0.
    Agents { ids: Vec<AgentId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputOptions {
    #[serde(default = "yes")]
    pub sla_series: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputOptions {
    fn default() -> Self {
        OutputOptions { sla_series: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration_days: u32,
    pub kappa: f64,
    pub seed: u64,
    pub seeding: SeedSpec,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub outputs: OutputOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration_days: 180,
            kappa: 1.0,
            seed: 1,
            seeding: SeedSpec::Airports {
                per_arrival_probability: PER_ARRIVAL_INFECTION_PROBABILITY,
                airports: Vec::new(),
            },
            threads: 0,
            outputs: OutputOptions::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(SimError::Invalid(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        match &self.seeding {
            SeedSpec::Airports {
                per_arrival_probability: p,
                ..
            } if !(0.0..=1.0).contains(p) => Err(SimError::Invalid(format!(
                "per_arrival_probability {p} outside [0,1]"
            ))),
            SeedSpec::Explicit { proportion, .. } if !(0.0..=1.0).contains(proportion) => Err(
                SimError::Invalid(format!("proportion {proportion} outside [0,1]")),
            ),
            SeedSpec::Explicit { slas, .. } if slas.is_empty() => Err(SimError::EmptySlaList),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: SimConfig = serde_json::from_str(&text)
            .map_err(|e| SimError::Invalid(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEvent {
    pub step: u32,
    pub agent: AgentId,
    /// Airport code, or "explicit"/"random"/"agent".
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfectionEvent {
    pub agent: AgentId,
    pub step: u32,
    pub infector: Option<AgentId>,
    pub context: Option<Context>,
    pub onset_step: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyCounts {
    pub day: u32,
    /// Agents whose symptoms began this day.
    pub incidence: u64,
    /// Agents symptomatic at the end of the day.
    pub prevalence: u64,
    pub cumulative: u64,
    /// Agents that became latent this day, seeds included.
    pub new_infections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub days: u32,
    pub seed: u64,
    pub kappa: f64,
    pub national: Vec<DailyCounts>,
    /// `[sla][day]`; empty when per-SLA series are switched off.
    pub sla_incidence: Vec<Vec<u32>>,
    pub sla_prevalence: Vec<Vec<u32>>,
    /// Agents who became symptomatic within the run, by SLA and age band.
    pub ill_by_sla_band: Vec<[u64; 5]>,
    pub infected_by_band: [u64; 5],
    pub seed_events: Vec<SeedEvent>,
    /// Non-seed infections by transmission context.
    pub setting_counts: [u64; 8],
    pub infections: Vec<InfectionEvent>,
    /// Pair probabilities that exceeded 1 before clamping.
    pub clamp_count: u64,
}

impl SimOutput {
    pub fn cumulative_ill(&self) -> u64 {
        self.national.last().map_or(0, |d| d.cumulative)
    }

    pub fn total_infected(&self) -> u64 {
        self.infections.len() as u64
    }

    /// Mean interval in days between an infector's infection and that of
    /// the agents it infected.
    pub fn mean_generation_time(&self) -> Option<f64> {
        let mut step_of = std::collections::HashMap::with_capacity(self.infections.len());
        for e in &self.infections {
            step_of.insert(e.agent, e.step);
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for e in &self.infections {
            if let Some(src) = e.infector.and_then(|j| step_of.get(&j)) {
                total += (e.step - src) as f64 / 2.0;
                n += 1;
            }
        }
        (n > 0).then(|| total / n as f64)
    }
}

/// Groups an agent mixes in during `cycle`, in the same order as
/// [`Agent::groups_in`] but without allocating.
#[inline]
pub fn active_groups(agent: &Agent, cycle: Cycle) -> ([GroupId; 5], usize) {
    let g = &agent.groups;
    match cycle {
        Cycle::Night => ([g.household, g.cluster, g.community, g.neighbourhood, 0], 4),
        Cycle::Day => {
            if let Some(w) = g.work {
                ([w, g.community, g.neighbourhood, 0, 0], 3)
            } else if let (Some(s), Some(gr), Some(c)) = (g.school, g.grade, g.class) {
                ([s, gr, c, g.community, g.neighbourhood], 5)
            } else {
                ([g.household, g.cluster, g.community, g.neighbourhood, 0], 4)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct NewInfection {
    agent: AgentId,
    infector: AgentId,
    context: Context,
}

/// Mutable simulation state over a borrowed population.
pub struct SimState<'a> {
    pop: &'a Population,
    model: DiseaseModel,
    seed: u64,
    step: u32,
    records: Vec<Option<InfectionRecord>>,
    /// Infected agents that have not yet recovered.
    active: Vec<AgentId>,
    /// Every infected agent in infection order.
    log: Vec<AgentId>,
    seed_events: Vec<SeedEvent>,
    setting_counts: [u64; 8],
    clamp_count: u64,
    /// Bumped once per evaluated step; marks fresh entries in the scratch
    /// arrays below so they never need clearing.
    stamp: u32,
    group_stamp: Vec<u32>,
    group_escape: Vec<[f64; 5]>,
    group_range: Vec<(u32, u32)>,
    agent_stamp: Vec<u32>,
    pairs: Vec<(GroupId, AgentId)>,
    airport_pools: Vec<Vec<AgentId>>,
    /// When set, only this agent transmits; everyone else infected stays
    /// non-infectious.
    sole_transmitter: Option<AgentId>,
}

impl<'a> SimState<'a> {
    pub fn new(pop: &'a Population, model: &DiseaseModel, kappa: f64, seed: u64) -> Self {
        let model = model.clone().with_kappa(kappa);
        SimState {
            pop,
            model,
            seed,
            step: 0,
            records: vec![None; pop.len()],
            active: Vec::new(),
            log: Vec::new(),
            seed_events: Vec::new(),
            setting_counts: [0; 8],
            clamp_count: 0,
            stamp: 0,
            group_stamp: vec![0; pop.groups.len()],
            group_escape: vec![[1.0; 5]; pop.groups.len()],
            group_range: vec![(0, 0); pop.groups.len()],
            agent_stamp: vec![0; pop.len()],
            pairs: Vec::new(),
            airport_pools: Vec::new(),
            sole_transmitter: None,
        }
    }

    /// Returns to a fully susceptible population at step 0 under a new seed.
    /// Only agents that were infected are touched.
    pub fn reset(&mut self, seed: u64) {
        for &a in &self.log {
            self.records[a as usize] = None;
        }
        self.log.clear();
        self.active.clear();
        self.seed_events.clear();
        self.setting_counts = [0; 8];
        self.clamp_count = 0;
        self.seed = seed;
        self.step = 0;
    }

    /// Restricts transmission to a single agent, as when counting the
    /// direct offspring of one case in an otherwise susceptible population.
    pub fn restrict_transmission_to(&mut self, agent: Option<AgentId>) {
        self.sole_transmitter = agent;
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    /// Moves the clock to `step` without evaluating transmission in
    /// between. For single-step experiments on hand-placed records.
    pub fn set_step(&mut self, step: u32) {
        self.step = step;
    }

    pub fn model(&self) -> &DiseaseModel {
        &self.model
    }

    pub fn record(&self, agent: AgentId) -> Option<&InfectionRecord> {
        self.records[agent as usize].as_ref()
    }

    pub fn state_of(&self, agent: AgentId, step: u32) -> HealthState {
        state_of(self.record(agent), step)
    }

    pub fn infected(&self) -> &[AgentId] {
        &self.log
    }

    pub fn is_susceptible(&self, agent: AgentId) -> bool {
        self.records[agent as usize].is_none()
    }

    /// Installs a prepared record, e.g. a seed. The agent must be susceptible.
    pub fn infect_with(&mut self, agent: AgentId, record: InfectionRecord) -> bool {
        let slot = &mut self.records[agent as usize];
        if slot.is_some() {
            return false;
        }
        *slot = Some(record);
        self.active.push(agent);
        self.log.push(agent);
        true
    }

    /// Seeds `agent` at the current step with a freshly drawn course.
    pub fn seed_agent(&mut self, agent: AgentId, source: &str) -> bool {
        let mut rng = Stream::new(self.seed, agent as u64, self.step as u64, Purpose::NaturalHistory);
        let record = sample_infection_record(self.step, &mut rng, &self.model.natural_history);
        if self.infect_with(agent, record) {
            self.seed_events.push(SeedEvent {
                step: self.step,
                agent,
                source: source.to_string(),
            });
            true
        } else {
            false
        }
    }

    /// Precomputes, for every airport, the residents of SLAs whose centroid
    /// lies within the airport's seeding radius.
    pub fn prepare_airports(&mut self, airports: &[Airport]) -> Result<(), SimError> {
        let regions = &self.pop.regions;
        let mut pools = Vec::with_capacity(airports.len());
        for a in airports {
            let home = regions
                .slas
                .iter()
                .find(|s| s.id == a.sla_id)
                .ok_or_else(|| SimError::UnknownSla(a.sla_id.clone()))?;
            let mut pool = Vec::new();
            for (k, sla) in regions.slas.iter().enumerate() {
                if haversine_km(home.centroid, sla.centroid) <= a.seed_radius_km {
                    pool.extend_from_slice(&self.pop.sla_agents[k]);
                }
            }
            pools.push(pool);
        }
        self.airport_pools = pools;
        Ok(())
    }

    /// One day's arrivals: for each airport draws `k ~ Binomial(passengers, p)`
    /// and infects up to `k` susceptible agents from its pool. Applied at the
    /// current step, which should be the first step of `day`.
    pub fn seed_airports(&mut self, airports: &[Airport], p: f64, day: u32) -> usize {
        let mut seeded = 0;
        for (idx, airport) in airports.iter().enumerate() {
            let mut rng = Stream::new(
                self.seed,
                idx as u64,
                day as u64,
                Purpose::AirportSeeding,
            );
            let k = draw_binomial(airport.daily_passengers, p, &mut rng);
            if k == 0 {
                continue;
            }
            let pool = std::mem::take(&mut self.airport_pools[idx]);
            let mut placed = 0u64;
            let mut attempts = 0u64;
            while placed < k && attempts < 64 * k + 64 && !pool.is_empty() {
                attempts += 1;
                let a = pool[rng.below(pool.len() as u64) as usize];
                if self.seed_agent(a, &airport.code) {
                    placed += 1;
                }
            }
            if placed < k {
                let mut left: Vec<AgentId> = pool.iter().copied().filter(|&a| self.is_susceptible(a)).collect();
                while placed < k && !left.is_empty() {
                    let i = rng.below(left.len() as u64) as usize;
                    let a = left.swap_remove(i);
                    self.seed_agent(a, &airport.code);
                    placed += 1;
                }
                if placed < k {
                    log::warn!(
                        "airport {} day {day}: {} of {k} seeds placed, no susceptible agents left in radius",
                        airport.code,
                        placed
                    );
                }
            }
            self.airport_pools[idx] = pool;
            seeded += placed as usize;
        }
        seeded
    }

    /// Infects each resident of the listed SLAs independently with
    /// probability `proportion`.
    pub fn seed_explicit(&mut self, slas: &[String], proportion: f64) -> Result<usize, SimError> {
        if slas.is_empty() {
            return Err(SimError::EmptySlaList);
        }
        let index = self.pop.regions.index();
        let mut seeded = 0;
        for id in slas {
            let k = *index.sla.get(id).ok_or_else(|| SimError::UnknownSla(id.clone()))?;
            for &a in &self.pop.sla_agents[k] {
                let mut rng = Stream::new(self.seed, a as u64, self.step as u64, Purpose::ExplicitSeeding);
                if rng.bernoulli(proportion) && self.seed_agent(a, "explicit") {
                    seeded += 1;
                }
            }
        }
        Ok(seeded)
    }

    /// Infects `count` distinct agents chosen uniformly.
    pub fn seed_random(&mut self, count: usize) -> usize {
        let n = self.pop.len() as u64;
        let mut rng = Stream::new(self.seed, 0, self.step as u64, Purpose::ExplicitSeeding);
        let target = count.min(self.pop.len());
        let mut placed = 0;
        while placed < target {
            if self.seed_agent(rng.below(n) as AgentId, "random") {
                placed += 1;
            }
        }
        placed
    }

    /// Collects infectious (group, agent) pairs for `step` and stores, for
    /// each touched group, the escape probability of a susceptible member
    /// of each age band. Returns the touched groups.
    fn prepare_groups(&mut self, step: u32) -> Vec<GroupId> {
        let cycle = Cycle::of_step(step);
        let pop = self.pop;
        let records = &self.records;
        let sole = self.sole_transmitter;
        self.active
            .retain(|&a| records[a as usize].is_some_and(|r| r.recovery_step() > step));
        self.pairs.clear();
        let mut infectious: Vec<AgentId> = self
            .active
            .iter()
            .copied()
            .filter(|&a| sole.is_none_or(|s| s == a))
            .filter(|&a| records[a as usize].is_some_and(|r| r.state_at(step).is_infectious() && r.step < step))
            .collect();
        infectious.sort_unstable();
        for &j in &infectious {
            let (gs, len) = active_groups(&pop.agents[j as usize], cycle);
            for &g in &gs[..len] {
                self.pairs.push((g, j));
            }
        }
        self.pairs.sort_unstable();
        self.stamp += 1;
        let stamp = self.stamp;
        let mut touched = Vec::new();
        let mut start = 0;
        while start < self.pairs.len() {
            let g = self.pairs[start].0;
            let mut end = start;
            while end < self.pairs.len() && self.pairs[end].0 == g {
                end += 1;
            }
            let group = &pop.groups[g as usize];
            let view = GroupView {
                context: group.context,
                size: group.size(),
            };
            let mut escape = [1.0f64; 5];
            for &(_, j) in &self.pairs[start..end] {
                let rec = self.records[j as usize].as_ref().expect("infectious agent has a record");
                let band_j = pop.agents[j as usize].band;
                for (b, e) in escape.iter_mut().enumerate() {
                    let pp = pairwise_transmission_prob(
                        &self.model,
                        band_j,
                        rec,
                        crate::census::AgeBand::from_index(b),
                        view,
                        step,
                    );
                    if pp.clamped {
                        self.clamp_count += 1;
                    }
                    *e *= 1.0 - pp.p;
                }
            }
            self.group_stamp[g as usize] = stamp;
            self.group_escape[g as usize] = escape;
            self.group_range[g as usize] = (start as u32, end as u32);
            touched.push(g);
            start = end;
        }
        touched
    }

    #[inline]
    fn escape_of(&self, agent: &Agent, cycle: Cycle, stamp: u32) -> f64 {
        let (gs, len) = active_groups(agent, cycle);
        let b = agent.band.index();
        let mut escape = 1.0;
        for &g in &gs[..len] {
            if self.group_stamp[g as usize] == stamp {
                escape *= self.group_escape[g as usize][b];
            }
        }
        escape
    }

    /// Agents worth evaluating at this step; `None` means everyone.
    fn candidates(&mut self, touched: &[GroupId]) -> Option<Vec<AgentId>> {
        let volume: usize = touched.iter().map(|&g| self.pop.groups[g as usize].size()).sum();
        if volume * 2 >= self.pop.len() {
            return None;
        }
        let stamp = self.stamp;
        let mut out = Vec::with_capacity(volume);
        for &g in touched {
            for &m in &self.pop.groups[g as usize].members {
                if self.agent_stamp[m as usize] != stamp {
                    self.agent_stamp[m as usize] = stamp;
                    out.push(m);
                }
            }
        }
        Some(out)
    }

    fn evaluate(&self, i: AgentId, step: u32, cycle: Cycle) -> Option<NewInfection> {
        if self.records[i as usize].is_some() {
            return None;
        }
        let agent = &self.pop.agents[i as usize];
        let escape = self.escape_of(agent, cycle, self.stamp);
        if escape >= 1.0 {
            return None;
        }
        let p = 1.0 - escape;
        let mut rng = Stream::new(self.seed, i as u64, step as u64, Purpose::Infection);
        if rng.uniform() >= p {
            return None;
        }
        Some(self.attribute(agent, step, cycle))
    }

    /// Picks the group in proportion to its hazard and then the infector in
    /// proportion to its pairwise hazard.
    fn attribute(&self, agent: &Agent, step: u32, cycle: Cycle) -> NewInfection {
        let mut rng = Stream::new(self.seed, agent.id as u64, step as u64, Purpose::Infector);
        let (gs, len) = active_groups(agent, cycle);
        let b = agent.band.index();
        let hazard = |e: f64| if e > 0.0 { -e.ln() } else { 1e300 };
        let weights: Vec<f64> = gs[..len]
            .iter()
            .map(|&g| {
                if self.group_stamp[g as usize] == self.stamp {
                    hazard(self.group_escape[g as usize][b])
                } else {
                    0.0
                }
            })
            .collect();
        let g = gs[rng.weighted_index(&weights).expect("an infected agent has a hazard")];
        let group = &self.pop.groups[g as usize];
        let view = GroupView {
            context: group.context,
            size: group.size(),
        };
        let (lo, hi) = self.group_range[g as usize];
        let members = &self.pairs[lo as usize..hi as usize];
        let w: Vec<f64> = members
            .iter()
            .map(|&(_, j)| {
                let rec = self.records[j as usize].as_ref().expect("infector record");
                let pp = pairwise_transmission_prob(
                    &self.model,
                    self.pop.agents[j as usize].band,
                    rec,
                    agent.band,
                    view,
                    step,
                );
                hazard(1.0 - pp.p)
            })
            .collect();
        let j = members[rng.weighted_index(&w).unwrap_or(0)].1;
        NewInfection {
            agent: agent.id,
            infector: j,
            context: group.context,
        }
    }

    /// Infection probability of every agent at `step` given the records
    /// written so far; zero for agents that are not susceptible. Used by
    /// diagnostics and tests.
    pub fn infection_probabilities(&mut self, step: u32) -> Vec<f64> {
        let saved = self.clamp_count;
        self.prepare_groups(step);
        self.clamp_count = saved;
        let cycle = Cycle::of_step(step);
        (0..self.pop.len())
            .map(|i| {
                if self.records[i].is_some() {
                    0.0
                } else {
                    1.0 - self.escape_of(&self.pop.agents[i], cycle, self.stamp)
                }
            })
            .collect()
    }

    /// Runs transmission for the current step and moves the clock forward.
    pub fn advance(&mut self) -> usize {
        let step = self.step;
        let cycle = Cycle::of_step(step);
        let touched = self.prepare_groups(step);
        let mut fresh: Vec<NewInfection> = if touched.is_empty() {
            Vec::new()
        } else {
            match self.candidates(&touched) {
                Some(list) => {
                    let this = &*self;
                    list.par_iter()
                        .with_min_len(512)
                        .filter_map(|&i| this.evaluate(i, step, cycle))
                        .collect()
                }
                None => {
                    let this = &*self;
                    (0..self.pop.len() as AgentId)
                        .into_par_iter()
                        .with_min_len(2048)
                        .filter_map(|i| this.evaluate(i, step, cycle))
                        .collect()
                }
            }
        };
        fresh.sort_unstable_by_key(|n| n.agent);
        for n in &fresh {
            let mut rng = Stream::new(self.seed, n.agent as u64, step as u64, Purpose::NaturalHistory);
            let mut record = sample_infection_record(step, &mut rng, &self.model.natural_history);
            record.infector = Some(n.infector);
            record.context = Some(n.context);
            self.infect_with(n.agent, record);
            self.setting_counts[n.context.index()] += 1;
        }
        self.step += 1;
        fresh.len()
    }

    /// Whether any agent is still latent or infectious.
    pub fn has_active(&self) -> bool {
        let step = self.step;
        self.active
            .iter()
            .any(|&a| self.records[a as usize].is_some_and(|r| r.recovery_step() > step))
    }

    /// Count of infections attributed to `infector`.
    pub fn secondary_cases(&self, infector: AgentId) -> usize {
        self.log
            .iter()
            .filter(|&&a| self.records[a as usize].is_some_and(|r| r.infector == Some(infector)))
            .count()
    }

    pub fn setting_counts(&self) -> [u64; 8] {
        self.setting_counts
    }

    /// Aggregates the run into daily series covering `days`.
    pub fn output(&self, days: u32, sla_series: bool) -> SimOutput {
        let pop = self.pop;
        let nd = days as usize;
        let n_sla = pop.regions.slas.len();
        let last_step = 2 * days;
        let mut incidence = vec![0u64; nd];
        let mut prev_diff = vec![0i64; nd + 1];
        let mut new_inf = vec![0u64; nd];
        let mut sla_inc = if sla_series { vec![vec![0u32; nd]; n_sla] } else { Vec::new() };
        let mut sla_diff = if sla_series { vec![vec![0i32; nd + 1]; n_sla] } else { Vec::new() };
        let mut ill_by_sla_band = vec![[0u64; 5]; n_sla];
        let mut infected_by_band = [0u64; 5];
        let mut infections = Vec::with_capacity(self.log.len());
        for &a in &self.log {
            let r = self.records[a as usize].expect("logged agents have records");
            let agent = &pop.agents[a as usize];
            let sla = agent.sla as usize;
            if r.step < last_step {
                new_inf[(r.step / 2) as usize] += 1;
                infected_by_band[agent.band.index()] += 1;
            }
            let onset = r.onset_step();
            infections.push(InfectionEvent {
                agent: a,
                step: r.step,
                infector: r.infector,
                context: r.context,
                onset_step: onset,
            });
            let Some(onset) = onset else { continue };
            if onset >= last_step {
                continue;
            }
            let d = (onset / 2) as usize;
            incidence[d] += 1;
            ill_by_sla_band[sla][agent.band.index()] += 1;
            let start = (onset / 2) as usize;
            let end = ((r.recovery_step() / 2) as usize).min(nd);
            if start < end {
                prev_diff[start] += 1;
                prev_diff[end] -= 1;
            }
            if sla_series {
                sla_inc[sla][d] += 1;
                if start < end {
                    sla_diff[sla][start] += 1;
                    sla_diff[sla][end] -= 1;
                }
            }
        }
        infections.sort_unstable_by_key(|e| (e.step, e.agent));
        let mut national = Vec::with_capacity(nd);
        let (mut prev, mut cum) = (0i64, 0u64);
        for d in 0..nd {
            prev += prev_diff[d];
            cum += incidence[d];
            national.push(DailyCounts {
                day: d as u32,
                incidence: incidence[d],
                prevalence: prev as u64,
                cumulative: cum,
                new_infections: new_inf[d],
            });
        }
        let sla_prevalence = sla_diff
            .iter()
            .map(|diff| {
                let mut acc = 0i32;
                diff[..nd]
                    .iter()
                    .map(|&x| {
                        acc += x;
                        acc as u32
                    })
                    .collect()
            })
            .collect();
        SimOutput {
            days,
            seed: self.seed,
            kappa: self.model.kappa(),
            national,
            sla_incidence: sla_inc,
            sla_prevalence,
            ill_by_sla_band,
            infected_by_band,
            seed_events: self.seed_events.clone(),
            setting_counts: self.setting_counts,
            infections,
            clamp_count: self.clamp_count,
        }
    }
}

fn draw_binomial(n: u64, p: f64, rng: &mut Stream) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    Binomial::new(n, p).map(|b| b.sample(rng)).unwrap_or(0)
}

/// Runs `config.duration_days` days. Seeds from `Explicit`, `Random` and
/// `Agents` modes enter at step 0; airport seeds enter at the first step of
/// every day, before transmission is evaluated.
pub fn run(pop: &Population, model: &DiseaseModel, config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    model.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    pool.install(|| run_in_pool(pop, model, config))
}

fn run_in_pool(pop: &Population, model: &DiseaseModel, config: &SimConfig) -> Result<SimOutput, SimError> {
    let mut state = SimState::new(pop, model, config.kappa, config.seed);
    let mut airports: Option<(&[Airport], f64)> = None;
    match &config.seeding {
        SeedSpec::None => {}
        SeedSpec::Airports {
            per_arrival_probability,
            airports: table,
        } => {
            state.prepare_airports(table)?;
            airports = Some((table.as_slice(), *per_arrival_probability));
        }
        SeedSpec::Explicit { slas, proportion } => {
            state.seed_explicit(slas, *proportion)?;
        }
        SeedSpec::Random { count } => {
            state.seed_random(*count);
        }
        SeedSpec::Agents { ids } => {
            for &a in ids {
                if (a as usize) >= pop.len() {
                    return Err(SimError::Invalid(format!("seed agent {a} out of range")));
                }
                state.seed_agent(a, "agent");
            }
        }
    }
    for step in 0..2 * config.duration_days {
        if let Some((table, p)) = airports {
            if step % 2 == 0 {
                state.seed_airports(table, p, step / 2);
            }
        }
        state.advance();
    }
    Ok(state.output(config.duration_days, config.outputs.sla_series))
}

/// Writes incidence_national.csv, incidence_sla.csv and summary.json.
pub fn write_outputs(out: &SimOutput, pop: &Population, dir: &Path) -> Result<Vec<String>, SimError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SimError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut national = String::from("day,incidence,prevalence,cumulative\n");
    for d in &out.national {
        let _ = writeln!(national, "{},{},{},{}", d.day, d.incidence, d.prevalence, d.cumulative);
    }
    let mut files = vec![("incidence_national.csv", national)];
    if !out.sla_incidence.is_empty() {
        let mut sla = String::from("day,sla_id,incidence,prevalence\n");
        for d in 0..out.days as usize {
            for (k, s) in pop.regions.slas.iter().enumerate() {
                let _ = writeln!(sla, "{},{},{},{}", d, s.id, out.sla_incidence[k][d], out.sla_prevalence[k][d]);
            }
        }
        files.push(("incidence_sla.csv", sla));
    }
    let summary = crate::analysis::RunSummary::of(out, pop);
    files.push((
        "summary.json",
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    ));
    let mut written = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io(&p))?;
        written.push(name.to_string());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::census::{generate_fixture, FixtureSpec};
    use crate::popgen::build_population;

    fn small_population() -> Population {
        let bundle = generate_fixture(FixtureSpec {
            n_slas: 4,
            n_cds_per_sla: 2,
            population_per_cd: 300,
            seed: 3,
        })
        .unwrap();
        build_population(&bundle, 3).unwrap()
    }

    #[test]
    fn active_groups_match_agent_lists() {
        let pop = small_population();
        for a in &pop.agents {
            for cycle in [Cycle::Day, Cycle::Night] {
                let (gs, len) = active_groups(a, cycle);
                assert_eq!(gs[..len].to_vec(), a.groups_in(cycle));
            }
        }
    }

    #[test]
    fn zero_days_gives_empty_series() {
        let pop = small_population();
        let config = SimConfig {
            duration_days: 0,
            seeding: SeedSpec::Random { count: 5 },
            threads: 1,
            ..SimConfig::default()
        };
        let out = run(&pop, &DiseaseModel::h1n1_2009(), &config).unwrap();
        assert!(out.national.is_empty());
    }

    #[test]
    fn no_infectious_agents_means_no_infections() {
        let pop = small_population();
        let model = DiseaseModel::h1n1_2009();
        let mut st = SimState::new(&pop, &model, 1.0, 9);
        for _ in 0..10 {
            assert_eq!(st.advance(), 0);
        }
        assert_eq!(st.step(), 10);
    }

    #[test]
    fn explicit_seeding_bounds() {
        let pop = small_population();
        let model = DiseaseModel::h1n1_2009();
        let sla = pop.regions.slas[0].id.clone();
        let mut st = SimState::new(&pop, &model, 1.0, 1);
        assert_eq!(st.seed_explicit(&[sla.clone()], 0.0).unwrap(), 0);
        assert_eq!(st.seed_explicit(&[sla.clone()], 1.0).unwrap(), pop.sla_agents[0].len());
        assert!(matches!(st.seed_explicit(&[], 0.5), Err(SimError::EmptySlaList)));
        assert!(st.seed_explicit(&["nowhere".into()], 0.5).is_err());
    }

    #[test]
    fn conservation_and_single_infection() {
        let pop = small_population();
        let model = DiseaseModel::h1n1_2009();
        let mut st = SimState::new(&pop, &model, 2.0, 4);
        st.seed_random(10);
        for _ in 0..120 {
            let step = st.step();
            let mut counts = [0usize; 4];
            for a in 0..pop.len() as AgentId {
                let s = st.state_of(a, step);
                let k = match s {
                    HealthState::Susceptible => 0,
                    HealthState::Latent => 1,
                    HealthState::Recovered => 3,
                    _ => 2,
                };
                counts[k] += 1;
            }
            assert_eq!(counts.iter().sum::<usize>(), pop.len());
            st.advance();
        }
        let mut seen = std::collections::HashSet::new();
        for &a in st.infected() {
            assert!(seen.insert(a));
        }
        let out = st.output(60, true);
        let non_seed = out.infections.iter().filter(|e| e.infector.is_some()).count() as u64;
        assert_eq!(out.setting_counts.iter().sum::<u64>(), non_seed);
        for w in out.national.windows(2) {
            assert!(w[1].cumulative >= w[0].cumulative);
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let config = SimConfig {
            seeding: SeedSpec::Explicit {
                slas: vec!["S1".into()],
                proportion: 0.01,
            },
            ..SimConfig::default()
        };
        let text = serde_json::to_string(&config).unwrap();
        assert!(text.contains("\"mode\":\"explicit\""));
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
        let minimal: SimConfig = serde_json::from_str(
            r#"{"duration_days":10,"kappa":1.5,"seed":3,"seeding":{"mode":"airports"}}"#,
        )
        .unwrap();
        assert_eq!(
            minimal.seeding,
            SeedSpec::Airports {
                per_arrival_probability: 0.0004,
                airports: vec![]
            }
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SimConfig::default();
        c.kappa = -1.0;
        assert!(c.validate().is_err());
        c.kappa = 1.0;
        c.seeding = SeedSpec::Explicit {
            slas: vec!["x".into()],
            proportion: 1.5,
        };
        assert!(c.validate().is_err());
    }
}

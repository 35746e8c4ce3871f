//! Synthetic population and mixing groups.
//!
//! The pipeline runs in fixed phases: households per CD, household clusters,
//! worker-flow assignment, school placement, enrolment with staff selection,
//! work groups, and finally one community per CD and one neighbourhood per
//! SLA. Every phase draws from streams keyed by the build seed, so a
//! [`Population`] is a pure function of its bundle and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::census::{
    haversine_km, AgeBand, CdDemographics, CensusBundle, FamilyType, LatLon, RegionHierarchy,
    SchoolSizeDistribution, Sex, WorkerFlow, MAX_HOUSEHOLD_BUCKET, OPEN_BIN_CAP, SCHOOL_BINS,
};
use crate::rng::{Purpose, Stream};

pub type AgentId = u32;
pub type GroupId = u32;

pub const MAX_CLASS_SIZE: usize = 25;
pub const MAX_WORK_GROUP_SIZE: usize = 20;
pub const HOUSEHOLDS_PER_CLUSTER: usize = 4;
pub const SCHOOL_ATTENDANCE: f64 = 0.987;
pub const STAFF_PER_STUDENT: (u64, u64) = (2, 17);
pub const CATCHMENT_MEAN_KM: f64 = 10.0;
pub const CATCHMENT_SD_KM: f64 = 2.0;
pub const MAX_SEARCH_RADIUS_KM: f64 = 100.0;
const FAMILY_REDRAWS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum PopgenError {
    #[error("bundle has no CDs")]
    EmptyBundle,
    #[error("population of CD `{0}` is zero")]
    EmptyCd(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Preschool,
    Student,
    Worker,
    NonWorkingAdult,
    OlderAdult,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Preschool => "preschool",
            Role::Student => "student",
            Role::Worker => "worker",
            Role::NonWorkingAdult => "non_working_adult",
            Role::OlderAdult => "older_adult",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    Household,
    HouseholdCluster,
    Community,
    Neighbourhood,
    WorkGroup,
    School,
    Grade,
    Class,
}

impl Context {
    pub const ALL: [Context; 8] = [
        Context::Household,
        Context::HouseholdCluster,
        Context::Community,
        Context::Neighbourhood,
        Context::WorkGroup,
        Context::School,
        Context::Grade,
        Context::Class,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Context::Household => "household",
            Context::HouseholdCluster => "household_cluster",
            Context::Community => "community",
            Context::Neighbourhood => "neighbourhood",
            Context::WorkGroup => "work_group",
            Context::School => "school",
            Context::Grade => "grade",
            Context::Class => "class",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_label(s: &str) -> Option<Context> {
        Context::ALL.into_iter().find(|c| c.label() == s)
    }

    pub fn is_school(self) -> bool {
        matches!(self, Context::School | Context::Grade | Context::Class)
    }
}

/// Half-day cycle of the simulation clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cycle {
    Day,
    Night,
}

impl Cycle {
    /// Even steps are days, odd steps nights.
    pub fn of_step(step: u32) -> Cycle {
        if step % 2 == 0 {
            Cycle::Day
        } else {
            Cycle::Night
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentGroups {
    pub household: GroupId,
    pub cluster: GroupId,
    pub community: GroupId,
    pub neighbourhood: GroupId,
    pub work: Option<GroupId>,
    pub school: Option<GroupId>,
    pub grade: Option<GroupId>,
    pub class: Option<GroupId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub age: u8,
    pub band: AgeBand,
    pub sex: Sex,
    pub cd: u32,
    pub sla: u32,
    pub role: Role,
    pub groups: AgentGroups,
}

impl Agent {
    /// Agents without a workplace or school stay in their home groups by day.
    pub fn home_by_day(&self) -> bool {
        self.groups.work.is_none() && self.groups.school.is_none()
    }

    pub fn night_groups(&self) -> Vec<GroupId> {
        let g = &self.groups;
        vec![g.household, g.cluster, g.community, g.neighbourhood]
    }

    pub fn day_groups(&self) -> Vec<GroupId> {
        let g = &self.groups;
        let mut out = Vec::with_capacity(5);
        if let Some(w) = g.work {
            out.push(w);
        } else if let (Some(s), Some(gr), Some(c)) = (g.school, g.grade, g.class) {
            out.extend([s, gr, c]);
        } else {
            out.extend([g.household, g.cluster]);
        }
        out.extend([g.community, g.neighbourhood]);
        out
    }

    pub fn groups_in(&self, cycle: Cycle) -> Vec<GroupId> {
        match cycle {
            Cycle::Day => self.day_groups(),
            Cycle::Night => self.night_groups(),
        }
    }

    /// Every group the agent belongs to, in either cycle.
    pub fn all_groups(&self) -> Vec<GroupId> {
        let g = &self.groups;
        let mut out = vec![g.household, g.cluster, g.community, g.neighbourhood];
        out.extend(g.work);
        out.extend(g.school);
        out.extend(g.grade);
        out.extend(g.class);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixingGroup {
    pub id: GroupId,
    pub context: Context,
    pub members: Vec<AgentId>,
}

impl MixingGroup {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct School {
    pub id: u32,
    pub dzn: u32,
    pub capacity: u32,
    pub enrolled: u32,
    pub staff_count: u32,
    pub catchment_km: f64,
    pub school_group: Option<GroupId>,
    pub grades: Vec<GroupId>,
    pub classes: Vec<GroupId>,
    pub staff_groups: Vec<GroupId>,
}

impl School {
    pub fn required_staff(enrolled: u32) -> u32 {
        let (staff, students) = STAFF_PER_STUDENT;
        (enrolled as u64 * staff).div_ceil(students) as u32
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowShortfall {
    pub cd_id: String,
    pub dzn_id: String,
    pub requested: u64,
    pub assigned: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub seed: u64,
    pub agents: u64,
    pub households: u64,
    pub family_redraws: u64,
    pub family_fallbacks: u64,
    pub worker_shortfalls: Vec<FlowShortfall>,
    pub workers_requested: u64,
    pub workers_assigned: u64,
    pub schools: u64,
    pub school_capacity: u64,
    pub school_age: u64,
    pub non_attenders: u64,
    pub enrolled: u64,
    pub unenrolled: u64,
    pub staff_shortfall: u64,
    pub warnings: Vec<String>,
}

impl SynthesisReport {
    /// Enrolled share of all 5-18 agents.
    pub fn enrolment_rate(&self) -> f64 {
        if self.school_age == 0 {
            0.0
        } else {
            self.enrolled as f64 / self.school_age as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub seed: u64,
    pub regions: RegionHierarchy,
    pub agents: Vec<Agent>,
    pub groups: Vec<MixingGroup>,
    pub schools: Vec<School>,
    pub cd_agents: Vec<Vec<AgentId>>,
    pub sla_agents: Vec<Vec<AgentId>>,
    pub dzn_workers: Vec<Vec<AgentId>>,
    pub report: SynthesisReport,
}

/// A synthesised person before ids are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Person {
    pub age: u8,
    pub band: AgeBand,
    pub sex: Sex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HouseholdDraft {
    pub family: FamilyType,
    pub members: Vec<Person>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HouseholdSynthesis {
    pub households: Vec<HouseholdDraft>,
    pub redraws: u64,
    pub fallbacks: u64,
}

fn adults_children(family: FamilyType, size: usize) -> Option<(usize, usize)> {
    match family {
        FamilyType::Lone => (size == 1).then_some((1, 0)),
        FamilyType::Group | FamilyType::Single => Some((size, 0)),
        FamilyType::Cwoc => (size >= 2).then_some((size, 0)),
        FamilyType::Cwc => (size >= 3).then(|| (2, size - 2)),
        FamilyType::Spf => (size >= 2).then(|| (1, size - 1)),
    }
}

/// Remaining people of a CD, by age band and sex.
struct AgePool {
    counts: [[u64; 2]; 5],
}

impl AgePool {
    fn total(&self, child: bool) -> u64 {
        AgeBand::ALL
            .iter()
            .filter(|b| b.is_child() == child)
            .map(|b| self.counts[b.index()].iter().sum::<u64>())
            .sum()
    }

    fn remaining(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn draw(&mut self, child: Option<bool>, rng: &mut Stream) -> Option<Person> {
        let mut weights = [0.0f64; 10];
        for band in AgeBand::ALL {
            if child.is_some_and(|c| c != band.is_child()) {
                continue;
            }
            for s in 0..2 {
                weights[band.index() * 2 + s] = self.counts[band.index()][s] as f64;
            }
        }
        let k = rng.weighted_index(&weights)?;
        let band = AgeBand::from_index(k / 2);
        let sex = if k % 2 == 0 { Sex::M } else { Sex::F };
        self.counts[band.index()][k % 2] -= 1;
        let (lo, hi) = band.years();
        let age = lo + rng.below((hi - lo + 1) as u64) as u8;
        Some(Person { age, band, sex })
    }
}

fn draw_household_size(cd: &CdDemographics, rng: &mut Stream) -> usize {
    let weights: Vec<f64> = cd.household_sizes.iter().map(|&c| c as f64).collect();
    let bucket = rng.weighted_index(&weights).unwrap_or(0) + 1;
    if bucket == MAX_HOUSEHOLD_BUCKET {
        // Open bucket: 8 to 10 people.
        MAX_HOUSEHOLD_BUCKET + rng.below(3) as usize
    } else {
        bucket
    }
}

fn family_row(cd: &CdDemographics, size: usize) -> &[f64; 6] {
    &cd.family_types[size.min(MAX_HOUSEHOLD_BUCKET) - 1]
}

/// Builds the households of one CD until its age-sex pool is exhausted.
///
/// Each household draws a size, then a family type conditioned on the size,
/// then members from the remaining pool. A family type the pool cannot
/// satisfy is redrawn up to ten times before relaxing to `GROUP`.
pub fn synthesize_households(cd: &CdDemographics, rng: &mut Stream) -> HouseholdSynthesis {
    let mut pool = AgePool { counts: cd.age_sex };
    let mut out = HouseholdSynthesis::default();
    while pool.remaining() > 0 {
        let remaining = pool.remaining() as usize;
        let size = draw_household_size(cd, rng).min(remaining);
        let (adults_left, children_left) = (pool.total(false) as usize, pool.total(true) as usize);
        let feasible = |family: FamilyType| {
            adults_children(family, size).filter(|&(a, c)| a <= adults_left && c <= children_left)
        };
        let row = family_row(cd, size);
        let mut choice = None;
        for attempt in 0..=FAMILY_REDRAWS {
            let family = rng
                .weighted_index(row)
                .map(|i| FamilyType::ALL[i])
                .unwrap_or(if size == 1 { FamilyType::Lone } else { FamilyType::Group });
            if let Some(comp) = feasible(family) {
                choice = Some((family, comp));
                break;
            }
            if attempt < FAMILY_REDRAWS {
                out.redraws += 1;
            }
        }
        let members = match choice {
            Some((family, (a, c))) => {
                let mut m = Vec::with_capacity(size);
                m.extend((0..a).filter_map(|_| pool.draw(Some(false), rng)));
                m.extend((0..c).filter_map(|_| pool.draw(Some(true), rng)));
                out.households.push(HouseholdDraft { family, members: m });
                continue;
            }
            None => {
                out.fallbacks += 1;
                // GROUP with whatever adults remain, topped up from anyone left.
                let mut m = Vec::with_capacity(size);
                while m.len() < size {
                    let p = pool
                        .draw(Some(false), rng)
                        .or_else(|| pool.draw(None, rng))
                        .expect("pool holds at least `size` people");
                    m.push(p);
                }
                m
            }
        };
        out.households.push(HouseholdDraft {
            family: FamilyType::Group,
            members,
        });
    }
    out
}

/// Shuffles households and chunks them into clusters of at most four.
pub fn form_clusters<T: Clone>(households: &[T], rng: &mut Stream) -> Vec<Vec<T>> {
    let mut order = households.to_vec();
    rng.shuffle(&mut order);
    order
        .chunks(HOUSEHOLDS_PER_CLUSTER)
        .map(|c| c.to_vec())
        .collect()
}

/// Result of worker-flow assignment: DZN index per agent (if employed).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkerAssignment {
    pub dzn_of: Vec<Option<u32>>,
    pub shortfalls: Vec<FlowShortfall>,
    pub requested: u64,
    pub assigned: u64,
}

/// Minimal view of an agent needed by the assignment phases.
#[derive(Debug, Clone, Copy)]
pub struct Resident {
    pub band: AgeBand,
    pub cd: u32,
}

/// For each flow entry, draws `min(workers, available)` unassigned working-age
/// residents of the CD and assigns them to the DZN.
pub fn assign_workers(
    flows: &WorkerFlow,
    residents: &[Resident],
    cd_index: &std::collections::HashMap<String, usize>,
    dzn_index: &std::collections::HashMap<String, usize>,
    seed: u64,
) -> WorkerAssignment {
    let n_cds = cd_index.len();
    let mut pools: Vec<Vec<u32>> = vec![Vec::new(); n_cds];
    for (i, r) in residents.iter().enumerate() {
        if r.band.is_working_age() {
            pools[r.cd as usize].push(i as u32);
        }
    }
    let mut streams: Vec<Stream> = (0..n_cds)
        .map(|cd| Stream::new(seed, cd as u64, 0, Purpose::Workers))
        .collect();
    let mut out = WorkerAssignment {
        dzn_of: vec![None; residents.len()],
        ..Default::default()
    };
    for e in &flows.entries {
        let cd = cd_index[&e.cd_id];
        let dzn = dzn_index[&e.dzn_id] as u32;
        let pool = &mut pools[cd];
        let rng = &mut streams[cd];
        let take = (e.workers as usize).min(pool.len());
        for _ in 0..take {
            let k = rng.below(pool.len() as u64) as usize;
            let agent = pool.swap_remove(k);
            out.dzn_of[agent as usize] = Some(dzn);
        }
        out.requested += e.workers;
        out.assigned += take as u64;
        if (take as u64) < e.workers {
            out.shortfalls.push(FlowShortfall {
                cd_id: e.cd_id.clone(),
                dzn_id: e.dzn_id.clone(),
                requested: e.workers,
                assigned: take as u64,
            });
        }
    }
    out
}

/// A DZN eligible to host schools, with its pool of potential students.
#[derive(Debug, Clone, PartialEq)]
pub struct DznCandidate {
    pub dzn: u32,
    pub state: String,
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedSchool {
    pub dzn: u32,
    pub capacity: u32,
    pub catchment_km: f64,
}

/// Draws a capacity uniformly within an enrolment bin.
pub fn draw_capacity(bin: usize, rng: &mut Stream) -> u32 {
    let (lo, hi) = SCHOOL_BINS[bin];
    let hi = hi.unwrap_or(OPEN_BIN_CAP);
    // An empty school is meaningless; the lowest bin starts at 1.
    let lo = lo.max(1);
    lo + rng.below((hi - lo + 1) as u64) as u32
}

/// Folded normal catchment radius.
pub fn draw_catchment(rng: &mut Stream) -> f64 {
    let normal = Normal::new(CATCHMENT_MEAN_KM, CATCHMENT_SD_KM).expect("valid normal");
    let r: f64 = normal.sample(rng);
    r.abs().max(1e-3)
}

/// Picks the index of a candidate with probability proportional to its
/// remaining potential and subtracts the school's capacity from it.
pub fn pick_dzn(potentials: &mut [f64], capacity: u32, rng: &mut Stream) -> Option<usize> {
    let weights: Vec<f64> = potentials.iter().map(|p| p.max(0.0)).collect();
    let k = rng.weighted_index(&weights)?;
    potentials[k] = (potentials[k] - capacity as f64).max(0.0);
    Some(k)
}

/// Places every school of the state distributions, largest bins first.
pub fn place_schools(
    dist: &SchoolSizeDistribution,
    candidates: &[DznCandidate],
    rng: &mut Stream,
) -> (Vec<PlacedSchool>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut schools = Vec::new();
    for (state, counts) in &dist.per_state {
        let local: Vec<&DznCandidate> = candidates.iter().filter(|c| &c.state == state).collect();
        if local.is_empty() {
            if counts.iter().any(|&c| c > 0) {
                warnings.push(format!("state {state}: no DZN can host schools"));
            }
            continue;
        }
        let initial: Vec<f64> = local.iter().map(|c| c.potential.max(0.0)).collect();
        let mut potentials = initial.clone();
        let mut exhausted = false;
        for bin in (0..SCHOOL_BINS.len()).rev() {
            for _ in 0..counts[bin] {
                let capacity = draw_capacity(bin, rng);
                let k = match pick_dzn(&mut potentials, capacity, rng) {
                    Some(k) => k,
                    None => {
                        if !exhausted {
                            warnings.push(format!(
                                "state {state}: school capacity exceeds potential students"
                            ));
                            exhausted = true;
                        }
                        rng.weighted_index(&initial)
                            .unwrap_or_else(|| rng.below(local.len() as u64) as usize)
                    }
                };
                schools.push(PlacedSchool {
                    dzn: local[k].dzn,
                    capacity,
                    catchment_km: draw_catchment(rng),
                });
            }
        }
    }
    (schools, warnings)
}

/// A school as seen by the enrolment search.
#[derive(Debug, Clone, PartialEq)]
pub struct SchoolSlot {
    pub location: LatLon,
    pub catchment_km: f64,
    pub places: u32,
}

/// Searches for a school for a student living at `home`: schools whose
/// catchment covers the student, picked proportionally to free places; if
/// none, every catchment is doubled, up to a 100 km search radius.
pub fn choose_school(
    home: LatLon,
    schools: &[SchoolSlot],
    distances: Option<&[f64]>,
    rng: &mut Stream,
) -> Option<usize> {
    let dist = |k: usize| match distances {
        Some(d) => d[k],
        None => haversine_km(home, schools[k].location),
    };
    let mut scale = 1.0;
    loop {
        let weights: Vec<f64> = schools
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let radius = (s.catchment_km * scale).min(MAX_SEARCH_RADIUS_KM);
                if s.places > 0 && dist(k) <= radius {
                    s.places as f64
                } else {
                    0.0
                }
            })
            .collect();
        if let Some(k) = rng.weighted_index(&weights) {
            return Some(k);
        }
        let all_capped = schools
            .iter()
            .all(|s| s.catchment_km * scale >= MAX_SEARCH_RADIUS_KM);
        if all_capped || schools.is_empty() {
            return None;
        }
        scale *= 2.0;
    }
}

/// Splits `members` into `ceil(n / max)` groups of near-equal size.
pub fn split_even<T: Clone>(members: &[T], max: usize) -> Vec<Vec<T>> {
    if members.is_empty() {
        return Vec::new();
    }
    let k = members.len().div_ceil(max);
    let mut out = vec![Vec::with_capacity(max); k];
    for (i, m) in members.iter().enumerate() {
        out[i % k].push(m.clone());
    }
    out
}

struct GroupBuilder {
    groups: Vec<MixingGroup>,
}

impl GroupBuilder {
    fn add(&mut self, context: Context, members: Vec<AgentId>) -> GroupId {
        let id = self.groups.len() as GroupId;
        self.groups.push(MixingGroup {
            id,
            context,
            members,
        });
        id
    }
}

/// Runs the full synthesis pipeline.
pub fn build_population(bundle: &CensusBundle, seed: u64) -> Result<Population, PopgenError> {
    let regions = &bundle.regions;
    if regions.cds.is_empty() {
        return Err(PopgenError::EmptyBundle);
    }
    let index = regions.index();
    let mut report = SynthesisReport {
        seed,
        ..Default::default()
    };

    // Households, independent per CD.
    let per_cd: Vec<HouseholdSynthesis> = bundle
        .demographics
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut rng = Stream::new(seed, i as u64, 0, Purpose::Households);
            synthesize_households(d, &mut rng)
        })
        .collect();
    for (d, s) in bundle.demographics.iter().zip(&per_cd) {
        if s.households.is_empty() {
            return Err(PopgenError::EmptyCd(d.cd_id.clone()));
        }
    }

    let mut builder = GroupBuilder { groups: Vec::new() };
    let mut agents: Vec<Agent> = Vec::with_capacity(bundle.population() as usize);
    let mut cd_agents: Vec<Vec<AgentId>> = vec![Vec::new(); regions.cds.len()];
    let mut cd_households: Vec<Vec<GroupId>> = vec![Vec::new(); regions.cds.len()];
    let placeholder = AgentGroups {
        household: 0,
        cluster: 0,
        community: 0,
        neighbourhood: 0,
        work: None,
        school: None,
        grade: None,
        class: None,
    };
    for (cd, synth) in per_cd.iter().enumerate() {
        report.family_redraws += synth.redraws;
        report.family_fallbacks += synth.fallbacks;
        let sla = index.cd_sla[cd] as u32;
        for h in &synth.households {
            let ids: Vec<AgentId> = (0..h.members.len())
                .map(|k| (agents.len() + k) as AgentId)
                .collect();
            let gid = builder.add(Context::Household, ids.clone());
            cd_households[cd].push(gid);
            for (p, &id) in h.members.iter().zip(&ids) {
                let role = match p.band {
                    AgeBand::Age0To4 => Role::Preschool,
                    AgeBand::Age5To18 => Role::Student,
                    AgeBand::Age65Plus => Role::OlderAdult,
                    _ => Role::NonWorkingAdult,
                };
                agents.push(Agent {
                    id,
                    age: p.age,
                    band: p.band,
                    sex: p.sex,
                    cd: cd as u32,
                    sla,
                    role,
                    groups: AgentGroups {
                        household: gid,
                        ..placeholder
                    },
                });
                cd_agents[cd].push(id);
            }
        }
    }
    report.agents = agents.len() as u64;
    report.households = builder.groups.len() as u64;
    if per_cd.iter().any(|s| s.fallbacks > 0) {
        report
            .warnings
            .push(format!("{} households relaxed to GROUP", report.family_fallbacks));
    }

    // Household clusters.
    for (cd, households) in cd_households.iter().enumerate() {
        let mut rng = Stream::new(seed, cd as u64, 0, Purpose::Clusters);
        for cluster in form_clusters(households, &mut rng) {
            let members: Vec<AgentId> = cluster
                .iter()
                .flat_map(|&h| builder.groups[h as usize].members.clone())
                .collect();
            let gid = builder.add(Context::HouseholdCluster, members.clone());
            for a in members {
                agents[a as usize].groups.cluster = gid;
            }
        }
    }

    // Workers.
    let residents: Vec<Resident> = agents
        .iter()
        .map(|a| Resident {
            band: a.band,
            cd: a.cd,
        })
        .collect();
    let assignment = assign_workers(&bundle.worker_flow, &residents, &index.cd, &index.dzn, seed);
    let mut dzn_workers: Vec<Vec<AgentId>> = vec![Vec::new(); regions.dzns.len()];
    for (a, dzn) in assignment.dzn_of.iter().enumerate() {
        if let Some(d) = dzn {
            dzn_workers[*d as usize].push(a as AgentId);
            agents[a].role = Role::Worker;
        }
    }
    report.workers_requested = assignment.requested;
    report.workers_assigned = assignment.assigned;
    report.worker_shortfalls = assignment.shortfalls;

    // School placement: potential students of a DZN are the school-age
    // residents of its SLA shared among the SLA's DZNs.
    let mut sla_students = vec![0u64; regions.slas.len()];
    for a in &agents {
        if a.band == AgeBand::Age5To18 {
            sla_students[a.sla as usize] += 1;
        }
    }
    let mut dzns_per_sla = vec![0u64; regions.slas.len()];
    for &s in &index.dzn_sla {
        dzns_per_sla[s] += 1;
    }
    let candidates: Vec<DznCandidate> = index
        .dzn_sla
        .iter()
        .enumerate()
        .map(|(d, &s)| DznCandidate {
            dzn: d as u32,
            state: regions.slas[s].state.clone(),
            potential: sla_students[s] as f64 / dzns_per_sla[s] as f64,
        })
        .collect();
    let mut rng = Stream::new(seed, 0, 0, Purpose::Schools);
    let (placed, warnings) = place_schools(&bundle.school_sizes, &candidates, &mut rng);
    report.warnings.extend(warnings);
    report.schools = placed.len() as u64;
    report.school_capacity = placed.iter().map(|s| s.capacity as u64).sum();

    // Enrolment.
    let mut slots: Vec<SchoolSlot> = placed
        .iter()
        .map(|p| SchoolSlot {
            location: regions.dzns[p.dzn as usize].centroid,
            catchment_km: p.catchment_km,
            places: p.capacity,
        })
        .collect();
    let cd_distances: Vec<Vec<f64>> = regions
        .cds
        .par_iter()
        .map(|z| slots.iter().map(|s| haversine_km(z.centroid, s.location)).collect())
        .collect();
    let mut students: Vec<AgentId> = agents
        .iter()
        .filter(|a| a.band == AgeBand::Age5To18)
        .map(|a| a.id)
        .collect();
    report.school_age = students.len() as u64;
    let mut rng = Stream::new(seed, 0, 0, Purpose::Enrolment);
    rng.shuffle(&mut students);
    let mut enrolled: Vec<Vec<AgentId>> = vec![Vec::new(); slots.len()];
    for &s in &students {
        if !rng.bernoulli(SCHOOL_ATTENDANCE) {
            report.non_attenders += 1;
            continue;
        }
        let cd = agents[s as usize].cd as usize;
        let home = regions.cds[cd].centroid;
        match choose_school(home, &slots, Some(&cd_distances[cd]), &mut rng) {
            Some(k) => {
                slots[k].places -= 1;
                enrolled[k].push(s);
            }
            None => report.unenrolled += 1,
        }
    }
    report.enrolled = enrolled.iter().map(|e| e.len() as u64).sum();

    // Staff selection, then work groups.
    let mut staff_pools: Vec<Vec<AgentId>> = dzn_workers.clone();
    let mut rng = Stream::new(seed, 0, 0, Purpose::WorkGroups);
    for pool in staff_pools.iter_mut() {
        rng.shuffle(pool);
    }
    let mut schools = Vec::with_capacity(placed.len());
    for (k, p) in placed.iter().enumerate() {
        let mut pupils = std::mem::take(&mut enrolled[k]);
        pupils.sort_unstable();
        let staff_count = School::required_staff(pupils.len() as u32);
        let pool = &mut staff_pools[p.dzn as usize];
        let take = (staff_count as usize).min(pool.len());
        report.staff_shortfall += (staff_count as usize - take) as u64;
        let staff: Vec<AgentId> = pool.split_off(pool.len() - take);
        let mut school = School {
            id: k as u32,
            dzn: p.dzn,
            capacity: p.capacity,
            enrolled: pupils.len() as u32,
            staff_count,
            catchment_km: p.catchment_km,
            school_group: None,
            grades: Vec::new(),
            classes: Vec::new(),
            staff_groups: Vec::new(),
        };
        if !pupils.is_empty() {
            let sg = builder.add(Context::School, pupils.clone());
            school.school_group = Some(sg);
            let mut by_age: BTreeMap<u8, Vec<AgentId>> = BTreeMap::new();
            for &s in &pupils {
                by_age.entry(agents[s as usize].age).or_default().push(s);
            }
            for (_, mut cohort) in by_age {
                let gg = builder.add(Context::Grade, cohort.clone());
                school.grades.push(gg);
                rng.shuffle(&mut cohort);
                for class in split_even(&cohort, MAX_CLASS_SIZE) {
                    let mut class = class;
                    class.sort_unstable();
                    let cg = builder.add(Context::Class, class.clone());
                    school.classes.push(cg);
                    for &s in &class {
                        let g = &mut agents[s as usize].groups;
                        g.school = Some(sg);
                        g.grade = Some(gg);
                        g.class = Some(cg);
                    }
                }
            }
        }
        for group in split_even(&staff, MAX_WORK_GROUP_SIZE) {
            let mut group = group;
            group.sort_unstable();
            let wg = builder.add(Context::WorkGroup, group.clone());
            school.staff_groups.push(wg);
            for &a in &group {
                agents[a as usize].groups.work = Some(wg);
            }
        }
        schools.push(school);
    }
    if report.staff_shortfall > 0 {
        report.warnings.push(format!(
            "{} school staff places could not be filled from DZN workers",
            report.staff_shortfall
        ));
    }
    for pool in &staff_pools {
        for group in split_even(pool, MAX_WORK_GROUP_SIZE) {
            let mut group = group;
            group.sort_unstable();
            let wg = builder.add(Context::WorkGroup, group.clone());
            for &a in &group {
                agents[a as usize].groups.work = Some(wg);
            }
        }
    }

    // Communities and neighbourhoods.
    for (cd, members) in cd_agents.iter().enumerate() {
        let g = builder.add(Context::Community, members.clone());
        for &a in members {
            agents[a as usize].groups.community = g;
        }
        let _ = cd;
    }
    let mut sla_agents: Vec<Vec<AgentId>> = vec![Vec::new(); regions.slas.len()];
    for a in &agents {
        sla_agents[a.sla as usize].push(a.id);
    }
    for members in &sla_agents {
        let g = builder.add(Context::Neighbourhood, members.clone());
        for &a in members {
            agents[a as usize].groups.neighbourhood = g;
        }
    }

    Ok(Population {
        seed,
        regions: regions.clone(),
        agents,
        groups: builder.groups,
        schools,
        cd_agents,
        sla_agents,
        dzn_workers,
        report,
    })
}

impl Population {
    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn group(&self, id: GroupId) -> &MixingGroup {
        &self.groups[id as usize]
    }

    /// SHA-256 over agents, groups and schools.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.agents {
            h.update(a.id.to_le_bytes());
            h.update([a.age, a.band as u8, a.sex as u8, a.role as u8]);
            h.update(a.cd.to_le_bytes());
            for g in a.all_groups() {
                h.update(g.to_le_bytes());
            }
        }
        for g in &self.groups {
            h.update([g.context as u8]);
            h.update((g.members.len() as u64).to_le_bytes());
            for m in &g.members {
                h.update(m.to_le_bytes());
            }
        }
        for s in &self.schools {
            h.update(s.dzn.to_le_bytes());
            h.update(s.capacity.to_le_bytes());
            h.update(s.catchment_km.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Agents per age band.
    pub fn band_counts(&self) -> [u64; 5] {
        let mut out = [0u64; 5];
        for a in &self.agents {
            out[a.band.index()] += 1;
        }
        out
    }

    /// Writes agents.csv, groups.csv, members.csv and synthesis_report.json.
    pub fn export_csvset(&self, dir: &Path) -> Result<(), PopgenError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| PopgenError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut agents = String::from("agent_id,age_band,sex,cd_id,role\n");
        for a in &self.agents {
            let _ = writeln!(
                agents,
                "{},{},{},{},{}",
                a.id,
                a.band.label(),
                if a.sex == Sex::M { "M" } else { "F" },
                self.regions.cds[a.cd as usize].id,
                a.role.label()
            );
        }
        let mut groups = String::from("group_id,context,size,offset\n");
        let mut members = String::from("agent_id\n");
        let mut offset = 0usize;
        for g in &self.groups {
            let _ = writeln!(groups, "{},{},{},{}", g.id, g.context.label(), g.size(), offset);
            for m in &g.members {
                let _ = writeln!(members, "{m}");
            }
            offset += g.size();
        }
        let report = serde_json::to_string_pretty(&self.report).expect("report serialises");
        for (name, text) in [
            ("agents.csv", agents),
            ("groups.csv", groups),
            ("members.csv", members),
            ("synthesis_report.json", report),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

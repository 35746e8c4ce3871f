#![allow(dead_code)]

use epiforge::census::{generate_fixture, CensusBundle, FixtureSpec};
use epiforge::popgen::{build_population, Population};

pub fn fixture(n_slas: usize, n_cds_per_sla: usize, population_per_cd: u64, seed: u64) -> (CensusBundle, Population) {
    let bundle = generate_fixture(FixtureSpec {
        n_slas,
        n_cds_per_sla,
        population_per_cd,
        seed,
    })
    .expect("fixture");
    let pop = build_population(&bundle, seed).expect("population");
    (bundle, pop)
}

/// 20k agents in 10 SLAs.
pub fn small() -> (CensusBundle, Population) {
    fixture(10, 4, 500, 7)
}

/// 100k agents in 50 SLAs, the desk-scale fixture used for calibration.
pub fn desk() -> (CensusBundle, Population) {
    fixture(50, 4, 500, 7)
}

/// Structural rules every built population must satisfy. Returns the first
/// violation found.
pub fn check_structure(bundle: &CensusBundle, pop: &Population) -> Result<(), String> {
    use epiforge::census::SCHOOL_BINS;
    use epiforge::popgen::{Context, HOUSEHOLDS_PER_CLUSTER, MAX_CLASS_SIZE, MAX_WORK_GROUP_SIZE};
    use std::collections::{BTreeMap, HashSet};

    for g in &pop.groups {
        for &m in &g.members {
            if !pop.agents[m as usize].all_groups().contains(&g.id) {
                return Err(format!("group {} lists agent {m} which does not list it", g.id));
            }
        }
    }
    for a in &pop.agents {
        for g in a.all_groups() {
            if !pop.groups[g as usize].members.contains(&a.id) {
                return Err(format!("agent {} lists group {g} which does not list it", a.id));
            }
        }
    }
    for g in &pop.groups {
        match g.context {
            Context::Class if g.size() > MAX_CLASS_SIZE => return Err(format!("class {} has {}", g.id, g.size())),
            Context::WorkGroup if g.size() > MAX_WORK_GROUP_SIZE => {
                return Err(format!("work group {} has {}", g.id, g.size()))
            }
            Context::HouseholdCluster => {
                let households: HashSet<u32> = g.members.iter().map(|&m| pop.agents[m as usize].groups.household).collect();
                if households.len() > HOUSEHOLDS_PER_CLUSTER {
                    return Err(format!("cluster {} spans {} households", g.id, households.len()));
                }
            }
            _ => {}
        }
    }
    // Households, communities and neighbourhoods partition the agents.
    for ctx in [Context::Household, Context::Community, Context::Neighbourhood] {
        let total: usize = pop.groups.iter().filter(|g| g.context == ctx).map(|g| g.size()).sum();
        if total != pop.len() {
            return Err(format!("{} groups cover {total} of {} agents", ctx.label(), pop.len()));
        }
    }
    for a in &pop.agents {
        let community = &pop.groups[a.groups.community as usize];
        if community.members.iter().any(|&m| pop.agents[m as usize].cd != a.cd) {
            return Err(format!("community {} mixes CDs", community.id));
        }
        let hood = &pop.groups[a.groups.neighbourhood as usize];
        if hood.members.iter().any(|&m| pop.agents[m as usize].sla != a.sla) {
            return Err(format!("neighbourhood {} mixes SLAs", hood.id));
        }
    }
    let index = pop.regions.index();
    let mut placed: BTreeMap<String, [u64; 9]> = BTreeMap::new();
    for s in &pop.schools {
        let state = &pop.regions.states[index.sla_state[index.dzn_sla[s.dzn as usize]]];
        let bin = SCHOOL_BINS
            .iter()
            .position(|&(lo, hi)| s.capacity >= lo && hi.is_none_or(|h| s.capacity <= h))
            .ok_or_else(|| format!("school {} capacity {} outside every bin", s.id, s.capacity))?;
        placed.entry(state.clone()).or_default()[bin] += 1;
    }
    for (state, expected) in &bundle.school_sizes.per_state {
        let got = placed.get(state).copied().unwrap_or_default();
        if got != *expected {
            return Err(format!("state {state}: schools per bin {got:?}, table {expected:?}"));
        }
    }
    Ok(())
}

use epiforge::census::{LatLon, RegionHierarchy, Sla};
use epiforge::engine::{DailyCounts, SimOutput};

/// A run holding only per-SLA incidence; the national series is their sum.
pub fn synthetic_output(sla_incidence: Vec<Vec<u32>>) -> SimOutput {
    let days = sla_incidence.first().map_or(0, |s| s.len());
    let mut cumulative = 0;
    let national = (0..days)
        .map(|d| {
            let incidence: u64 = sla_incidence.iter().map(|s| s[d] as u64).sum();
            cumulative += incidence;
            DailyCounts {
                day: d as u32,
                incidence,
                prevalence: 0,
                cumulative,
                new_infections: 0,
            }
        })
        .collect();
    SimOutput {
        days: days as u32,
        seed: 0,
        kappa: 1.0,
        national,
        sla_prevalence: vec![vec![0; days]; sla_incidence.len()],
        ill_by_sla_band: vec![[0; 5]; sla_incidence.len()],
        sla_incidence,
        infected_by_band: [0; 5],
        seed_events: Vec::new(),
        setting_counts: [0; 8],
        infections: Vec::new(),
        clamp_count: 0,
    }
}

/// Triangular epidemic curve peaking on `peak`.
pub fn bump(days: usize, peak: u32, height: u32) -> Vec<u32> {
    (0..days as i64)
        .map(|d| (height as i64 - 3 * (d - peak as i64).abs()).max(0) as u32)
        .collect()
}

/// 40 SLAs of growing size in four size classes: the larger the SLA the
/// closer its peak sits to day 60, so synchrony must rise with size.
pub fn hierarchical_outputs(runs: usize) -> (Vec<SimOutput>, Vec<usize>, Vec<String>) {
    let n = 40;
    let sizes: Vec<usize> = (0..n).map(|k| 1000 * (k + 1)).collect();
    let ids: Vec<String> = (0..n).map(|k| format!("S{k:03}")).collect();
    let outputs = (0..runs)
        .map(|r| {
            let series = (0..n)
                .map(|k| {
                    let spread = 4 * (3 - (k / 10) as i64) + 1;
                    let sign = if (k + r) % 2 == 0 { 1 } else { -1 };
                    let offset = sign * spread * ((k % 5) as i64 + 1) / 5;
                    bump(150, (60 + offset) as u32, 200)
                })
                .collect();
            synthetic_output(series)
        })
        .collect();
    (outputs, sizes, ids)
}

/// SLAs on a grid whose peaks are drawn independently of location.
pub fn null_outputs(runs: usize, seed: u64) -> (Vec<SimOutput>, RegionHierarchy) {
    use epiforge::rng::{Purpose, Stream};
    let side = 6;
    let slas: Vec<Sla> = (0..side * side)
        .map(|k| Sla {
            id: format!("N{k:03}"),
            state: "NSW".into(),
            centroid: LatLon::new(-34.0 + 0.3 * (k / side) as f64, 150.0 + 0.3 * (k % side) as f64),
        })
        .collect();
    let regions = RegionHierarchy {
        states: vec!["NSW".into()],
        slas,
        cds: Vec::new(),
        dzns: Vec::new(),
    };
    let outputs = (0..runs)
        .map(|r| {
            let series = (0..side * side)
                .map(|k| {
                    let mut rng = Stream::new(seed, k as u64, r as u64, Purpose::Scan);
                    bump(160, 50 + rng.below(40) as u32, 300)
                })
                .collect();
            synthetic_output(series)
        })
        .collect();
    (outputs, regions)
}

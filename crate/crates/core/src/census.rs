//! Census-style tabular inputs: region hierarchy, per-CD demographics, worker
//! flows, state school-size distributions and international airports.
//!
//! The canonical interchange is a directory of seven CSV files (see
//! [`BundlePaths`]). [`parse_bundle`] validates every cross reference and
//! reports failures with the file, line and violated constraint.
//! [`generate_fixture`] lays out a synthetic region grid for desk-scale runs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::{Purpose, Stream};

/// Largest household-size bucket; the last bucket is open ("8+").
pub const MAX_HOUSEHOLD_BUCKET: usize = 8;
/// Default seeding radius when the airport table leaves it blank.
pub const DEFAULT_SEED_RADIUS_KM: f64 = 50.0;
const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, thiserror::Error)]
pub enum CensusError {
    #[error("{file}: cannot read: {source}")]
    Io {
        file: String,
        #[source]
        source: io::Error,
    },
    #[error("{file}:{line}: malformed row: {message}")]
    Malformed {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}:{line}: unknown {level} id `{id}`")]
    DanglingId {
        file: String,
        line: u64,
        level: &'static str,
        id: String,
    },
    #[error("{file}: {message}")]
    Invalid { file: String, message: String },
    #[error("{file}: family types of CD `{cd}` household size {size} sum to {sum}, expected 1")]
    Distribution {
        file: String,
        cd: String,
        size: usize,
        sum: f64,
    },
    #[error("invalid fixture parameters: {0}")]
    Fixture(String),
}

fn malformed(file: &str, line: u64, message: impl Into<String>) -> CensusError {
    CensusError::Malformed {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeBand {
    #[serde(rename = "0-4")]
    Age0To4,
    #[serde(rename = "5-18")]
    Age5To18,
    #[serde(rename = "19-34")]
    Age19To34,
    #[serde(rename = "35-64")]
    Age35To64,
    #[serde(rename = "65+")]
    Age65Plus,
}

impl AgeBand {
    pub const ALL: [AgeBand; 5] = [
        AgeBand::Age0To4,
        AgeBand::Age5To18,
        AgeBand::Age19To34,
        AgeBand::Age35To64,
        AgeBand::Age65Plus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> AgeBand {
        Self::ALL[i]
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeBand::Age0To4 => "0-4",
            AgeBand::Age5To18 => "5-18",
            AgeBand::Age19To34 => "19-34",
            AgeBand::Age35To64 => "35-64",
            AgeBand::Age65Plus => "65+",
        }
    }

    /// Inclusive year range; the open band closes at 89.
    pub fn years(self) -> (u8, u8) {
        match self {
            AgeBand::Age0To4 => (0, 4),
            AgeBand::Age5To18 => (5, 18),
            AgeBand::Age19To34 => (19, 34),
            AgeBand::Age35To64 => (35, 64),
            AgeBand::Age65Plus => (65, 89),
        }
    }

    pub fn is_child(self) -> bool {
        matches!(self, AgeBand::Age0To4 | AgeBand::Age5To18)
    }

    pub fn is_working_age(self) -> bool {
        matches!(self, AgeBand::Age19To34 | AgeBand::Age35To64)
    }
}

impl fmt::Display for AgeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgeBand {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "0-4" => Ok(AgeBand::Age0To4),
            "5-18" => Ok(AgeBand::Age5To18),
            "19-34" | "19-29" => Ok(AgeBand::Age19To34),
            "35-64" | "30-64" => Ok(AgeBand::Age35To64),
            "65+" | "64+" => Ok(AgeBand::Age65Plus),
            other => Err(format!("unknown age band `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl Sex {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "M" => Ok(Sex::M),
            "F" => Ok(Sex::F),
            other => Err(format!("unknown sex `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FamilyType {
    Lone,
    Group,
    Cwc,
    Cwoc,
    Spf,
    Single,
}

impl FamilyType {
    pub const ALL: [FamilyType; 6] = [
        FamilyType::Lone,
        FamilyType::Group,
        FamilyType::Cwc,
        FamilyType::Cwoc,
        FamilyType::Spf,
        FamilyType::Single,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FamilyType::Lone => "LONE",
            FamilyType::Group => "GROUP",
            FamilyType::Cwc => "CWC",
            FamilyType::Cwoc => "CWOC",
            FamilyType::Spf => "SPF",
            FamilyType::Single => "SINGLE",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for FamilyType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FamilyType::ALL
            .into_iter()
            .find(|t| t.label() == s.trim())
            .ok_or_else(|| format!("unknown family type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sla {
    pub id: String,
    pub state: String,
    pub centroid: LatLon,
}

/// A CD or DZN: both hang off exactly one SLA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub sla: String,
    pub centroid: LatLon,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionHierarchy {
    pub states: Vec<String>,
    pub slas: Vec<Sla>,
    pub cds: Vec<Zone>,
    pub dzns: Vec<Zone>,
}

/// Dense index lookups for a [`RegionHierarchy`].
#[derive(Debug, Clone, Default)]
pub struct RegionIndex {
    pub sla: HashMap<String, usize>,
    pub cd: HashMap<String, usize>,
    pub dzn: HashMap<String, usize>,
    pub state: HashMap<String, usize>,
    /// Parent SLA index of each CD.
    pub cd_sla: Vec<usize>,
    /// Parent SLA index of each DZN.
    pub dzn_sla: Vec<usize>,
    /// State index of each SLA.
    pub sla_state: Vec<usize>,
}

impl RegionHierarchy {
    pub fn index(&self) -> RegionIndex {
        let pos = |ids: Vec<&String>| -> HashMap<String, usize> {
            ids.into_iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), i))
                .collect()
        };
        let state = pos(self.states.iter().collect());
        let sla = pos(self.slas.iter().map(|s| &s.id).collect());
        let cd = pos(self.cds.iter().map(|z| &z.id).collect());
        let dzn = pos(self.dzns.iter().map(|z| &z.id).collect());
        let cd_sla = self.cds.iter().map(|z| sla[&z.sla]).collect();
        let dzn_sla = self.dzns.iter().map(|z| sla[&z.sla]).collect();
        let sla_state = self.slas.iter().map(|s| state[&s.state]).collect();
        RegionIndex {
            sla,
            cd,
            dzn,
            state,
            cd_sla,
            dzn_sla,
            sla_state,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdDemographics {
    pub cd_id: String,
    /// Household counts for sizes 1..=8, the last bucket meaning 8+.
    pub household_sizes: [u64; MAX_HOUSEHOLD_BUCKET],
    /// Family-type probabilities conditional on household size, indexed by
    /// size-1 and then [`FamilyType::index`].
    pub family_types: [[f64; 6]; MAX_HOUSEHOLD_BUCKET],
    /// Person counts indexed by age band then sex.
    pub age_sex: [[u64; 2]; 5],
}

impl CdDemographics {
    pub fn population(&self) -> u64 {
        self.age_sex.iter().flatten().sum()
    }

    pub fn band_count(&self, band: AgeBand) -> u64 {
        self.age_sex[band.index()].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEntry {
    pub cd_id: String,
    pub dzn_id: String,
    pub workers: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorkerFlow {
    pub entries: Vec<FlowEntry>,
}

/// Enrolment bins of the state school tables; `None` marks the open bin.
pub const SCHOOL_BINS: [(u32, Option<u32>); 9] = [
    (0, Some(35)),
    (36, Some(100)),
    (101, Some(200)),
    (201, Some(300)),
    (301, Some(400)),
    (401, Some(600)),
    (601, Some(800)),
    (801, Some(1000)),
    (1001, None),
];

/// Upper bound used when drawing a capacity from the open top bin.
pub const OPEN_BIN_CAP: u32 = 1500;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SchoolSizeDistribution {
    pub per_state: BTreeMap<String, [u64; 9]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Airport {
    pub code: String,
    pub sla_id: String,
    pub daily_passengers: u64,
    pub seed_radius_km: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AirportTable {
    pub rows: Vec<Airport>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CensusBundle {
    pub regions: RegionHierarchy,
    /// One entry per CD, in the order of `regions.cds`.
    pub demographics: Vec<CdDemographics>,
    pub worker_flow: WorkerFlow,
    pub school_sizes: SchoolSizeDistribution,
    pub airports: AirportTable,
}

impl CensusBundle {
    pub fn population(&self) -> u64 {
        self.demographics.iter().map(|d| d.population()).sum()
    }
}

/// Locations of the seven bundle files.
#[derive(Debug, Clone)]
pub struct BundlePaths {
    pub regions: PathBuf,
    pub households: PathBuf,
    pub family_types: PathBuf,
    pub age_sex: PathBuf,
    pub worker_flow: PathBuf,
    pub school_sizes: PathBuf,
    pub airports: PathBuf,
}

impl BundlePaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        BundlePaths {
            regions: d.join("regions.csv"),
            households: d.join("cd_households.csv"),
            family_types: d.join("cd_family_types.csv"),
            age_sex: d.join("cd_age_sex.csv"),
            worker_flow: d.join("worker_flow.csv"),
            school_sizes: d.join("school_sizes.csv"),
            airports: d.join("airports.csv"),
        }
    }

    pub fn all(&self) -> [&PathBuf; 7] {
        [
            &self.regions,
            &self.households,
            &self.family_types,
            &self.age_sex,
            &self.worker_flow,
            &self.school_sizes,
            &self.airports,
        ]
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Reads a CSV file into trimmed string records with their line numbers.
fn read_rows(path: &Path, columns: usize) -> Result<Vec<(u64, Vec<String>)>, CensusError> {
    let name = file_name(path);
    let text = fs::read_to_string(path).map_err(|source| CensusError::Io {
        file: name.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            malformed(&name, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != columns {
            return Err(malformed(
                &name,
                line,
                format!("expected {columns} columns, found {}", rec.len()),
            ));
        }
        rows.push((line, rec.iter().map(|f| f.trim().to_string()).collect()));
    }
    Ok(rows)
}

fn field<T: FromStr>(file: &str, line: u64, column: &str, raw: &str) -> Result<T, CensusError>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| malformed(file, line, format!("column `{column}`: {e} (`{raw}`)")))
}

fn parse_regions(path: &Path) -> Result<RegionHierarchy, CensusError> {
    let name = file_name(path);
    let rows = read_rows(path, 5)?;
    let mut h = RegionHierarchy::default();
    let mut seen: [HashSet<String>; 4] = Default::default();
    // Parents may appear after children; resolve in a second pass.
    let mut pending: Vec<(u64, usize, String)> = Vec::new();
    for (line, r) in rows {
        let level = r[0].as_str();
        let id = r[1].clone();
        if id.is_empty() {
            return Err(malformed(&name, line, "empty id"));
        }
        let slot = match level {
            "STE" => 0,
            "SLA" => 1,
            "CD" => 2,
            "DZN" => 3,
            other => return Err(malformed(&name, line, format!("unknown level `{other}`"))),
        };
        if !seen[slot].insert(id.clone()) {
            return Err(malformed(&name, line, format!("duplicate {level} id `{id}`")));
        }
        if slot == 0 {
            h.states.push(id);
            continue;
        }
        let centroid = LatLon::new(
            field(&name, line, "centroid_lat", &r[3])?,
            field(&name, line, "centroid_lon", &r[4])?,
        );
        if !centroid.is_valid() {
            return Err(malformed(&name, line, "centroid outside valid lat/lon range"));
        }
        let parent = r[2].clone();
        if parent.is_empty() {
            return Err(malformed(&name, line, format!("{level} `{id}` has no parent")));
        }
        match slot {
            1 => h.slas.push(Sla {
                id,
                state: parent.clone(),
                centroid,
            }),
            2 => h.cds.push(Zone {
                id,
                sla: parent.clone(),
                centroid,
            }),
            _ => h.dzns.push(Zone {
                id,
                sla: parent.clone(),
                centroid,
            }),
        }
        pending.push((line, slot, parent));
    }
    for (line, slot, parent) in pending {
        let (set, level) = if slot == 1 {
            (&seen[0], "STE")
        } else {
            (&seen[1], "SLA")
        };
        if !set.contains(&parent) {
            return Err(CensusError::DanglingId {
                file: name.clone(),
                line,
                level,
                id: parent,
            });
        }
    }
    Ok(h)
}

fn dangling(file: &str, line: u64, level: &'static str, id: &str) -> CensusError {
    CensusError::DanglingId {
        file: file.to_string(),
        line,
        level,
        id: id.to_string(),
    }
}

/// Parses and validates a bundle from its seven CSV files.
pub fn parse_bundle(paths: &BundlePaths) -> Result<CensusBundle, CensusError> {
    for p in paths.all() {
        if !p.exists() {
            return Err(CensusError::Io {
                file: file_name(p),
                source: io::Error::new(io::ErrorKind::NotFound, "file does not exist"),
            });
        }
    }
    let regions = parse_regions(&paths.regions)?;
    let index = regions.index();

    let mut demographics: Vec<CdDemographics> = regions
        .cds
        .iter()
        .map(|z| CdDemographics {
            cd_id: z.id.clone(),
            household_sizes: [0; MAX_HOUSEHOLD_BUCKET],
            family_types: [[0.0; 6]; MAX_HOUSEHOLD_BUCKET],
            age_sex: [[0; 2]; 5],
        })
        .collect();

    let name = file_name(&paths.households);
    for (line, r) in read_rows(&paths.households, 3)? {
        let cd = *index
            .cd
            .get(&r[0])
            .ok_or_else(|| dangling(&name, line, "CD", &r[0]))?;
        let size: usize = field(&name, line, "hh_size", &r[1])?;
        if !(1..=MAX_HOUSEHOLD_BUCKET).contains(&size) {
            return Err(malformed(&name, line, format!("hh_size {size} outside 1..=8")));
        }
        demographics[cd].household_sizes[size - 1] = field(&name, line, "count", &r[2])?;
    }

    let name = file_name(&paths.family_types);
    let mut seen_family = vec![[false; MAX_HOUSEHOLD_BUCKET]; demographics.len()];
    for (line, r) in read_rows(&paths.family_types, 4)? {
        let cd = *index
            .cd
            .get(&r[0])
            .ok_or_else(|| dangling(&name, line, "CD", &r[0]))?;
        let size: usize = field(&name, line, "hh_size", &r[1])?;
        if !(1..=MAX_HOUSEHOLD_BUCKET).contains(&size) {
            return Err(malformed(&name, line, format!("hh_size {size} outside 1..=8")));
        }
        let ft: FamilyType = field(&name, line, "family_type", &r[2])?;
        let p: f64 = field(&name, line, "probability", &r[3])?;
        if !(0.0..=1.0).contains(&p) {
            return Err(malformed(&name, line, format!("probability {p} outside [0,1]")));
        }
        demographics[cd].family_types[size - 1][ft.index()] = p;
        seen_family[cd][size - 1] = true;
    }
    for (cd, d) in demographics.iter().enumerate() {
        for size in 0..MAX_HOUSEHOLD_BUCKET {
            if !seen_family[cd][size] && d.household_sizes[size] == 0 {
                continue;
            }
            let sum: f64 = d.family_types[size].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CensusError::Distribution {
                    file: name.clone(),
                    cd: d.cd_id.clone(),
                    size: size + 1,
                    sum,
                });
            }
        }
    }

    let name = file_name(&paths.age_sex);
    for (line, r) in read_rows(&paths.age_sex, 4)? {
        let cd = *index
            .cd
            .get(&r[0])
            .ok_or_else(|| dangling(&name, line, "CD", &r[0]))?;
        let band: AgeBand = field(&name, line, "age_band", &r[1])?;
        let sex: Sex = field(&name, line, "sex", &r[2])?;
        let count: u64 = field(&name, line, "count", &r[3])?;
        // Variant band schemes map onto the standard bands, so accumulate.
        demographics[cd].age_sex[band.index()][sex.index()] += count;
    }

    let name = file_name(&paths.worker_flow);
    let mut flow = WorkerFlow::default();
    let mut pairs = HashSet::new();
    for (line, r) in read_rows(&paths.worker_flow, 3)? {
        if !index.cd.contains_key(&r[0]) {
            return Err(dangling(&name, line, "CD", &r[0]));
        }
        if !index.dzn.contains_key(&r[1]) {
            return Err(dangling(&name, line, "DZN", &r[1]));
        }
        if !pairs.insert((r[0].clone(), r[1].clone())) {
            return Err(malformed(
                &name,
                line,
                format!("duplicate flow entry ({}, {})", r[0], r[1]),
            ));
        }
        flow.entries.push(FlowEntry {
            cd_id: r[0].clone(),
            dzn_id: r[1].clone(),
            workers: field(&name, line, "workers", &r[2])?,
        });
    }

    let name = file_name(&paths.school_sizes);
    let mut schools = SchoolSizeDistribution::default();
    for (line, r) in read_rows(&paths.school_sizes, 4)? {
        if !index.state.contains_key(&r[0]) {
            return Err(dangling(&name, line, "STE", &r[0]));
        }
        let low: u32 = field(&name, line, "bin_low", &r[1])?;
        let high: Option<u32> = if r[2].is_empty() || r[2] == "+" {
            None
        } else {
            Some(field(&name, line, "bin_high", &r[2])?)
        };
        let bin = SCHOOL_BINS
            .iter()
            .position(|&b| b == (low, high))
            .ok_or_else(|| malformed(&name, line, format!("unknown enrolment bin {low}-{}", r[2])))?;
        let count: u64 = field(&name, line, "school_count", &r[3])?;
        schools.per_state.entry(r[0].clone()).or_insert([0; 9])[bin] = count;
    }

    let name = file_name(&paths.airports);
    let mut airports = AirportTable::default();
    for (line, r) in read_rows(&paths.airports, 4)? {
        if !index.sla.contains_key(&r[1]) {
            return Err(dangling(&name, line, "SLA", &r[1]));
        }
        let radius: f64 = if r[3].is_empty() {
            DEFAULT_SEED_RADIUS_KM
        } else {
            field(&name, line, "seed_radius_km", &r[3])?
        };
        if !(radius > 0.0) {
            return Err(malformed(&name, line, "seed_radius_km must be positive"));
        }
        airports.rows.push(Airport {
            code: r[0].clone(),
            sla_id: r[1].clone(),
            daily_passengers: field(&name, line, "daily_passengers", &r[2])?,
            seed_radius_km: radius,
        });
    }

    Ok(CensusBundle {
        regions,
        demographics,
        worker_flow: flow,
        school_sizes: schools,
        airports,
    })
}

/// Writes a bundle as the seven canonical CSV files.
pub fn write_bundle(bundle: &CensusBundle, dir: impl AsRef<Path>) -> Result<BundlePaths, CensusError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| CensusError::Io {
        file: dir.display().to_string(),
        source,
    })?;
    let paths = BundlePaths::in_dir(dir);
    let files = serialize_bundle(bundle);
    for (path, text) in paths.all().into_iter().zip(files.iter()) {
        fs::write(path, text).map_err(|source| CensusError::Io {
            file: file_name(path),
            source,
        })?;
    }
    Ok(paths)
}

/// Renders the seven CSV files in [`BundlePaths::all`] order.
pub fn serialize_bundle(b: &CensusBundle) -> [String; 7] {
    use std::fmt::Write;
    let mut regions = String::from("level,id,parent_id,centroid_lat,centroid_lon\n");
    for s in &b.regions.states {
        let _ = writeln!(regions, "STE,{s},,,");
    }
    for s in &b.regions.slas {
        let _ = writeln!(
            regions,
            "SLA,{},{},{},{}",
            s.id, s.state, s.centroid.lat, s.centroid.lon
        );
    }
    for (level, zones) in [("CD", &b.regions.cds), ("DZN", &b.regions.dzns)] {
        for z in zones {
            let _ = writeln!(
                regions,
                "{level},{},{},{},{}",
                z.id, z.sla, z.centroid.lat, z.centroid.lon
            );
        }
    }

    let mut households = String::from("cd_id,hh_size,count\n");
    let mut families = String::from("cd_id,hh_size,family_type,probability\n");
    let mut ages = String::from("cd_id,age_band,sex,count\n");
    for d in &b.demographics {
        for (i, &c) in d.household_sizes.iter().enumerate() {
            let _ = writeln!(households, "{},{},{}", d.cd_id, i + 1, c);
        }
        for (i, row) in d.family_types.iter().enumerate() {
            if row.iter().all(|&p| p == 0.0) {
                continue;
            }
            for ft in FamilyType::ALL {
                let _ = writeln!(
                    families,
                    "{},{},{},{}",
                    d.cd_id,
                    i + 1,
                    ft.label(),
                    row[ft.index()]
                );
            }
        }
        for band in AgeBand::ALL {
            for (sex, label) in [(Sex::M, "M"), (Sex::F, "F")] {
                let _ = writeln!(
                    ages,
                    "{},{},{},{}",
                    d.cd_id,
                    band.label(),
                    label,
                    d.age_sex[band.index()][sex.index()]
                );
            }
        }
    }

    let mut flows = String::from("cd_id,dzn_id,workers\n");
    for e in &b.worker_flow.entries {
        let _ = writeln!(flows, "{},{},{}", e.cd_id, e.dzn_id, e.workers);
    }

    let mut schools = String::from("state,bin_low,bin_high,school_count\n");
    for (state, counts) in &b.school_sizes.per_state {
        for (bin, &(low, high)) in SCHOOL_BINS.iter().enumerate() {
            let high = high.map(|h| h.to_string()).unwrap_or_default();
            let _ = writeln!(schools, "{state},{low},{high},{}", counts[bin]);
        }
    }

    let mut airports = String::from("code,sla_id,daily_passengers,seed_radius_km\n");
    for a in &b.airports.rows {
        let _ = writeln!(
            airports,
            "{},{},{},{}",
            a.code, a.sla_id, a.daily_passengers, a.seed_radius_km
        );
    }

    [regions, households, families, ages, flows, schools, airports]
}

/// Parameters of a synthetic fixture bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_slas: usize,
    pub n_cds_per_sla: usize,
    pub population_per_cd: u64,
    pub seed: u64,
}

/// Daily international arrivals per airport.
pub const AIRPORT_PASSENGERS: [(&str, &str, u64); 9] = [
    ("SYD", "NSW", 40884),
    ("MEL", "VIC", 25859),
    ("BNE", "QLD", 14250),
    ("PER", "WA", 11449),
    ("OOL", "QLD", 3022),
    ("ADL", "SA", 2214),
    ("CNS", "QLD", 1874),
    ("DRW", "NT", 597),
    ("TSV", "QLD", 105),
];

/// Reference national population used to scale airport traffic in fixtures.
pub const NATIONAL_POPULATION: f64 = 19_800_000.0;

const FIXTURE_AGE_SHARES: [f64; 5] = [0.065, 0.185, 0.22, 0.395, 0.135];
const FIXTURE_HOUSEHOLD_SHARES: [f64; MAX_HOUSEHOLD_BUCKET] =
    [0.24, 0.33, 0.16, 0.16, 0.07, 0.025, 0.01, 0.005];
const FIXTURE_EMPLOYMENT_RATE: f64 = 0.70;
const FIXTURE_SCHOOL_BIN_SHARES: [f64; 9] = [0.08, 0.12, 0.18, 0.16, 0.13, 0.15, 0.09, 0.05, 0.04];
const FIXTURE_SLA_SPACING_KM: f64 = 4.0;
const FIXTURE_AIRPORT_RADIUS_KM: f64 = 8.0;

fn fixture_family_row(size: usize) -> [f64; 6] {
    // LONE, GROUP, CWC, CWOC, SPF, SINGLE
    match size {
        1 => [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        2 => [0.0, 0.15, 0.0, 0.70, 0.15, 0.0],
        3 => [0.0, 0.45, 0.40, 0.0, 0.15, 0.0],
        4 => [0.0, 0.20, 0.75, 0.0, 0.05, 0.0],
        _ => [0.0, 0.10, 0.85, 0.0, 0.05, 0.0],
    }
}

/// Splits `total` into integer parts proportional to `shares`, drawing each
/// unit independently so that parts vary between calls but always sum to
/// `total`.
fn multinomial(total: u64, shares: &[f64], rng: &mut Stream) -> Vec<u64> {
    let mut out = vec![0u64; shares.len()];
    for _ in 0..total {
        let i = rng.weighted_index(shares).unwrap_or(0);
        out[i] += 1;
    }
    out
}

/// Largest-remainder rounding of `total` across `weights`.
fn apportion(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || total == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let mut rest = total - out.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

/// Builds a synthetic bundle on a regular grid of SLAs around Sydney.
///
/// SLA 0 is a commuting hub; worker flows follow a gravity rule; school
/// counts give roughly 25% spare capacity over the expected enrolment; the
/// nine international airports carry traffic scaled to the fixture's share of
/// the national population.
pub fn generate_fixture(spec: FixtureSpec) -> Result<CensusBundle, CensusError> {
    if spec.n_slas == 0 {
        return Err(CensusError::Fixture("n_slas must be at least 1".into()));
    }
    if spec.n_cds_per_sla == 0 {
        return Err(CensusError::Fixture("n_cds_per_sla must be at least 1".into()));
    }
    if spec.population_per_cd == 0 {
        return Err(CensusError::Fixture("population_per_cd must be at least 1".into()));
    }
    let mut rng = Stream::new(spec.seed, 0, 0, Purpose::Fixture);
    let origin = LatLon::new(-33.87, 151.0);
    let km_lat = 1.0 / 111.2;
    let km_lon = 1.0 / (111.2 * origin.lat.to_radians().cos());
    let cols = (spec.n_slas as f64).sqrt().ceil() as usize;

    let states: Vec<String> = if spec.n_slas >= 10 {
        vec!["NSW".into(), "VIC".into()]
    } else {
        vec!["NSW".into()]
    };
    let state_of = |i: usize| -> usize {
        if states.len() > 1 && i >= spec.n_slas.div_ceil(2) {
            1
        } else {
            0
        }
    };

    let mut regions = RegionHierarchy {
        states: states.clone(),
        ..Default::default()
    };
    for i in 0..spec.n_slas {
        let (r, c) = (i / cols, i % cols);
        let centroid = LatLon::new(
            origin.lat - r as f64 * FIXTURE_SLA_SPACING_KM * km_lat,
            origin.lon + c as f64 * FIXTURE_SLA_SPACING_KM * km_lon,
        );
        let sla_id = format!("SLA{i:04}");
        regions.slas.push(Sla {
            id: sla_id.clone(),
            state: states[state_of(i)].clone(),
            centroid,
        });
        for k in 0..spec.n_cds_per_sla {
            let jitter = |rng: &mut Stream| (rng.uniform() - 0.5) * 0.8 * FIXTURE_SLA_SPACING_KM;
            let dy = jitter(&mut rng);
            let dx = jitter(&mut rng);
            regions.cds.push(Zone {
                id: format!("CD{i:04}{k:03}"),
                sla: sla_id.clone(),
                centroid: LatLon::new(centroid.lat + dy * km_lat, centroid.lon + dx * km_lon),
            });
        }
        regions.dzns.push(Zone {
            id: format!("DZN{i:04}"),
            sla: sla_id,
            centroid,
        });
    }

    let mut demographics = Vec::with_capacity(regions.cds.len());
    for cd in &regions.cds {
        let bands = multinomial(spec.population_per_cd, &FIXTURE_AGE_SHARES, &mut rng);
        let mut age_sex = [[0u64; 2]; 5];
        for (b, &n) in bands.iter().enumerate() {
            let males = multinomial(n, &[0.5, 0.5], &mut rng)[0];
            age_sex[b] = [males, n - males];
        }
        let mean_size: f64 = FIXTURE_HOUSEHOLD_SHARES
            .iter()
            .enumerate()
            .map(|(i, s)| s * if i + 1 == MAX_HOUSEHOLD_BUCKET { 9.0 } else { (i + 1) as f64 })
            .sum();
        let n_households = (spec.population_per_cd as f64 / mean_size).round().max(1.0) as u64;
        let sizes = apportion(n_households, &FIXTURE_HOUSEHOLD_SHARES);
        let mut household_sizes = [0u64; MAX_HOUSEHOLD_BUCKET];
        household_sizes.copy_from_slice(&sizes);
        let mut family_types = [[0.0; 6]; MAX_HOUSEHOLD_BUCKET];
        for (s, row) in family_types.iter_mut().enumerate() {
            *row = fixture_family_row(s + 1);
        }
        demographics.push(CdDemographics {
            cd_id: cd.id.clone(),
            household_sizes,
            family_types,
            age_sex,
        });
    }

    // Gravity-model commuting: attractiveness decays with distance, the hub
    // SLA draws extra workers.
    let mut flow = WorkerFlow::default();
    let dzn_weight: Vec<f64> = (0..regions.dzns.len())
        .map(|j| if j == 0 { 6.0 } else { 1.0 })
        .collect();
    for (ci, cd) in regions.cds.iter().enumerate() {
        let d = &demographics[ci];
        let adults = d.band_count(AgeBand::Age19To34) + d.band_count(AgeBand::Age35To64);
        let workers = (adults as f64 * FIXTURE_EMPLOYMENT_RATE).round() as u64;
        let weights: Vec<f64> = regions
            .dzns
            .iter()
            .enumerate()
            .map(|(j, z)| {
                let km = haversine_km(cd.centroid, z.centroid);
                let w = dzn_weight[j] / (1.0 + km / 3.0).powi(3);
                if z.sla == cd.sla {
                    w * 4.0
                } else {
                    w
                }
            })
            .collect();
        let counts = multinomial(workers, &weights, &mut rng);
        for (j, &n) in counts.iter().enumerate() {
            if n > 0 {
                flow.entries.push(FlowEntry {
                    cd_id: cd.id.clone(),
                    dzn_id: regions.dzns[j].id.clone(),
                    workers: n,
                });
            }
        }
    }

    let mut school_sizes = SchoolSizeDistribution::default();
    let bin_means: Vec<f64> = SCHOOL_BINS
        .iter()
        .map(|&(lo, hi)| (lo + hi.unwrap_or(OPEN_BIN_CAP)) as f64 / 2.0)
        .collect();
    let mean_capacity: f64 = FIXTURE_SCHOOL_BIN_SHARES
        .iter()
        .zip(&bin_means)
        .map(|(s, m)| s * m)
        .sum();
    for (si, state) in states.iter().enumerate() {
        let students: u64 = regions
            .cds
            .iter()
            .zip(&demographics)
            .filter(|(z, _)| {
                let sla = regions.slas.iter().position(|s| s.id == z.sla).unwrap();
                state_of(sla) == si
            })
            .map(|(_, d)| d.band_count(AgeBand::Age5To18))
            .sum();
        let needed = students as f64 * 1.25;
        let n = (needed / mean_capacity).round().max(1.0) as u64;
        let mut counts = apportion(n, &FIXTURE_SCHOOL_BIN_SHARES);
        let mut capacity: f64 = counts.iter().zip(&bin_means).map(|(c, m)| *c as f64 * m).sum();
        while capacity < needed {
            let deficit = needed - capacity;
            let bin = bin_means
                .iter()
                .position(|&m| m >= deficit)
                .unwrap_or(bin_means.len() - 1);
            counts[bin] += 1;
            capacity += bin_means[bin];
        }
        let mut arr = [0u64; 9];
        arr.copy_from_slice(&counts);
        school_sizes.per_state.insert(state.clone(), arr);
    }

    let population = spec.population_per_cd as f64 * regions.cds.len() as f64;
    let scale = population / NATIONAL_POPULATION;
    let mut airports = AirportTable::default();
    for (k, &(code, _, passengers)) in AIRPORT_PASSENGERS.iter().enumerate() {
        let sla = (k * spec.n_slas) / AIRPORT_PASSENGERS.len();
        airports.rows.push(Airport {
            code: code.to_string(),
            sla_id: regions.slas[sla].id.clone(),
            daily_passengers: (passengers as f64 * scale).round() as u64,
            seed_radius_km: FIXTURE_AIRPORT_RADIUS_KM,
        });
    }

    Ok(CensusBundle {
        regions,
        demographics,
        worker_flow: flow,
        school_sizes,
        airports,
    })
}

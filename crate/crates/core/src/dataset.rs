//! Survey datasets: paired robot locations and RSS vectors.
//!
//! Datasets come either from a CSV file (`x,y,<ap_1>,...,<ap_m>`, empty cell
//! = AP not heard) or from [`synthesize`], a log-distance path-loss simulator
//! with spatially correlated shadowing.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

/// Fill value for access points that were not heard in a sample.
pub const DEFAULT_FLOOR_DBM: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Location { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Location) -> f64 {
        self.sq_distance(other).sqrt()
    }

    pub fn sq_distance(&self, other: &Location) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// One raw RSS measurement vector; `None` marks an AP that was not heard.
#[derive(Clone, Debug, PartialEq)]
pub struct RssSample {
    pub values: Vec<Option<f64>>,
}

impl RssSample {
    /// Replaces unheard entries with `floor_dbm` and raises anything below
    /// the floor up to it.
    pub fn fill_missing(&self, floor_dbm: f64) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.map_or(floor_dbm, |x| x.max(floor_dbm)))
            .collect()
    }
}

/// Per-AP standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub per_ap_mean: Vec<f64>,
    pub per_ap_std: Vec<f64>,
    /// True where the column was constant and its std was replaced by 1.
    pub degenerate: Vec<bool>,
}

impl NormalizationStats {
    pub fn has_warnings(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    pub fn normalize_matrix(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = z.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (self.per_ap_mean[c], self.per_ap_std[c]);
            col.iter_mut().for_each(|v| *v = (*v - mu) / sd);
        }
        out
    }

    pub fn denormalize_matrix(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = z.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (self.per_ap_mean[c], self.per_ap_std[c]);
            col.iter_mut().for_each(|v| *v = *v * sd + mu);
        }
        out
    }
}

/// Locations (n×2, meters) and RSS matrix (n×m) with AP identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct SurveyDataset {
    locations: DMatrix<f64>,
    rss: DMatrix<f64>,
    ap_ids: Vec<String>,
    normalization: Option<NormalizationStats>,
}

impl SurveyDataset {
    pub fn new(locations: DMatrix<f64>, rss: DMatrix<f64>, ap_ids: Vec<String>) -> Result<Self> {
        if locations.ncols() != 2 {
            return Err(Error::Dimension {
                expected: 2,
                actual: locations.ncols(),
            });
        }
        if locations.nrows() == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if locations.nrows() != rss.nrows() {
            return Err(Error::Dimension {
                expected: locations.nrows(),
                actual: rss.nrows(),
            });
        }
        if rss.ncols() == 0 {
            return Err(Error::Data("dataset has no access points".into()));
        }
        if ap_ids.len() != rss.ncols() {
            return Err(Error::Dimension {
                expected: rss.ncols(),
                actual: ap_ids.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in &ap_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate access point id {id:?}")));
            }
        }
        if locations.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite location".into()));
        }
        Ok(SurveyDataset {
            locations,
            rss,
            ap_ids,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rss.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_aps(&self) -> usize {
        self.rss.ncols()
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn location(&self, row: usize) -> Location {
        Location::new(self.locations[(row, 0)], self.locations[(row, 1)])
    }

    pub fn rss(&self) -> &DMatrix<f64> {
        &self.rss
    }

    pub fn ap_ids(&self) -> &[String] {
        &self.ap_ids
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    pub fn normalization(&self) -> Option<&NormalizationStats> {
        self.normalization.as_ref()
    }

    /// Rows `indices` in the given order, keeping AP ids and normalization.
    pub fn subset(&self, indices: &[usize]) -> SurveyDataset {
        SurveyDataset {
            locations: self.locations.select_rows(indices),
            rss: self.rss.select_rows(indices),
            ap_ids: self.ap_ids.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Axis-aligned bounding box of the locations as (min, max).
    pub fn bounding_box(&self) -> (Location, Location) {
        let xs = self.locations.column(0);
        let ys = self.locations.column(1);
        (Location::new(xs.min(), ys.min()), Location::new(xs.max(), ys.max()))
    }
}

// ---------------------------------------------------------------------------
// CSV

pub fn load_csv(path: &Path) -> Result<SurveyDataset> {
    load_csv_with_floor(path, DEFAULT_FLOOR_DBM)
}

pub fn load_csv_with_floor(path: &Path, floor_dbm: f64) -> Result<SurveyDataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_csv(file, floor_dbm)
}

/// Parses the survey CSV schema from any reader.
pub fn read_csv<R: Read>(reader: R, floor_dbm: f64) -> Result<SurveyDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        Some(rec) => rec.map_err(|e| csv_error(e, 1))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    if header.len() < 3 || header.get(0).map(str::trim) != Some("x") || header.get(1).map(str::trim) != Some("y") {
        return Err(Error::Parse {
            line: 1,
            message: "header must be `x,y,<ap_id_1>,...`".into(),
        });
    }
    let ap_ids: Vec<String> = header.iter().skip(2).map(|s| s.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for id in &ap_ids {
        if id.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "empty access point id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                line: 1,
                message: format!("duplicate access point id {id:?}"),
            });
        }
    }
    let m = ap_ids.len();

    let mut locs = Vec::new();
    let mut rss = Vec::new();
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| csv_error(e, line))?;
        if rec.len() != m + 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", m + 2, rec.len()),
            });
        }
        for c in 0..2 {
            let cell = rec[c].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric coordinate {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: "non-finite coordinate".into(),
                });
            }
            locs.push(v);
        }
        let mut sample = RssSample {
            values: Vec::with_capacity(m),
        };
        for c in 0..m {
            let cell = rec[c + 2].trim();
            if cell.is_empty() {
                sample.values.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric RSS value {cell:?} for {}", ap_ids[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite RSS value for {}", ap_ids[c]),
                });
            }
            sample.values.push(Some(v));
        }
        rss.extend(sample.fill_missing(floor_dbm));
    }
    let n = locs.len() / 2;
    if n == 0 {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    SurveyDataset::new(
        DMatrix::from_row_slice(n, 2, &locs),
        DMatrix::from_row_slice(n, m, &rss),
        ap_ids,
    )
}

fn csv_error(e: csv::Error, line: usize) -> Error {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .filter(|&l| l > 0)
        .unwrap_or(line);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Renders the dataset in the survey CSV schema. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn to_csv_string(ds: &SurveyDataset) -> String {
    let mut out = String::from("x,y");
    for id in &ds.ap_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for r in 0..ds.len() {
        out.push_str(&format!("{},{}", ds.locations[(r, 0)], ds.locations[(r, 1)]));
        for c in 0..ds.n_aps() {
            out.push_str(&format!(",{}", ds.rss[(r, c)]));
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &SurveyDataset, path: &Path) -> Result<()> {
    io_util::write_atomic(path, to_csv_string(ds).as_bytes())
}

// ---------------------------------------------------------------------------
// Synthetic surveys

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub width: f64,
    pub height: f64,
}

/// Polyline the surveying robot follows, sampled every `sample_spacing` m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Location>,
    pub sample_spacing: f64,
}

impl Trajectory {
    /// Back-and-forth lanes parallel to the x axis covering the area with
    /// `margin` meters kept free on every side.
    pub fn lawnmower(area: Area, lanes: usize, margin: f64, sample_spacing: f64) -> Self {
        let lanes = lanes.max(1);
        let (x0, x1) = (margin, area.width - margin);
        let (y0, y1) = (margin, area.height - margin);
        let mut waypoints = Vec::with_capacity(2 * lanes);
        for k in 0..lanes {
            let y = if lanes == 1 {
                0.5 * (y0 + y1)
            } else {
                y0 + (y1 - y0) * k as f64 / (lanes - 1) as f64
            };
            if k % 2 == 0 {
                waypoints.push(Location::new(x0, y));
                waypoints.push(Location::new(x1, y));
            } else {
                waypoints.push(Location::new(x1, y));
                waypoints.push(Location::new(x0, y));
            }
        }
        Trajectory {
            waypoints,
            sample_spacing,
        }
    }

    /// Points every `sample_spacing` meters of arc length, starting at the
    /// first waypoint.
    pub fn sample_points(&self) -> Vec<Location> {
        let mut points = Vec::new();
        let Some(first) = self.waypoints.first() else {
            return points;
        };
        points.push(*first);
        let mut carry = 0.0;
        for pair in self.waypoints.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let seg = a.distance(&b);
            if seg == 0.0 {
                continue;
            }
            let mut t = self.sample_spacing - carry;
            while t <= seg + 1e-12 {
                let f = t / seg;
                points.push(Location::new(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)));
                t += self.sample_spacing;
            }
            carry = seg - (t - self.sample_spacing);
        }
        points
    }
}

/// Fields missing from a config file take their default values; note that
/// the default trajectory is laid out for the default area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthEnvConfig {
    pub area: Area,
    pub n_aps: usize,
    pub tx_power_dbm: f64,
    pub path_loss_exponent: f64,
    pub reference_distance: f64,
    pub shadowing_std_dbm: f64,
    pub shadowing_correlation_length: f64,
    /// Independent per-sample measurement noise added on top of shadowing.
    pub measurement_noise_std_dbm: f64,
    pub floor_dbm: f64,
    pub trajectory: Trajectory,
}

impl Default for SynthEnvConfig {
    /// 91 access points over a 100 m × 60 m area surveyed on 6 lanes,
    /// giving roughly 600 samples.
    fn default() -> Self {
        let area = Area {
            width: 100.0,
            height: 60.0,
        };
        SynthEnvConfig {
            area,
            n_aps: 91,
            tx_power_dbm: -40.0,
            path_loss_exponent: 3.0,
            reference_distance: 1.0,
            shadowing_std_dbm: 4.0,
            shadowing_correlation_length: 8.0,
            measurement_noise_std_dbm: 1.0,
            floor_dbm: DEFAULT_FLOOR_DBM,
            trajectory: Trajectory::lawnmower(area, 6, 4.0, 1.0),
        }
    }
}

impl SynthEnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("area.width", self.area.width),
            ("area.height", self.area.height),
            ("reference_distance", self.reference_distance),
            ("shadowing_correlation_length", self.shadowing_correlation_length),
            ("trajectory.sample_spacing", self.trajectory.sample_spacing),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.n_aps == 0 {
            return Err(Error::Config("n_aps must be > 0".into()));
        }
        if !(1.5..=6.0).contains(&self.path_loss_exponent) {
            return Err(Error::Config(format!(
                "path_loss_exponent must be in [1.5, 6], got {}",
                self.path_loss_exponent
            )));
        }
        if !(self.shadowing_std_dbm >= 0.0) || !(self.measurement_noise_std_dbm >= 0.0) {
            return Err(Error::Config("noise standard deviations must be >= 0".into()));
        }
        if !(self.floor_dbm < self.tx_power_dbm) {
            return Err(Error::Config(format!(
                "floor_dbm ({}) must be below tx_power_dbm ({})",
                self.floor_dbm, self.tx_power_dbm
            )));
        }
        if self.trajectory.waypoints.is_empty() {
            return Err(Error::Config("trajectory has no waypoints".into()));
        }
        if self.trajectory.waypoints.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("trajectory waypoint is not finite".into()));
        }
        Ok(())
    }

    /// Mean received power at distance `d` from an AP.
    pub fn path_loss_rss(&self, d: f64) -> f64 {
        let ratio = d.max(self.reference_distance) / self.reference_distance;
        self.tx_power_dbm - 10.0 * self.path_loss_exponent * ratio.log10()
    }
}

/// Draws AP positions and a survey along the configured trajectory. The
/// output is a pure function of `(config, seed)`.
pub fn synthesize(config: &SynthEnvConfig, seed: u64) -> Result<SurveyDataset> {
    config.validate()?;
    let points = config.trajectory.sample_points();
    let aps = draw_access_points(config, seed);
    synthesize_at(config, &aps, &points, seed)
}

pub fn draw_access_points(config: &SynthEnvConfig, seed: u64) -> Vec<Location> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.n_aps)
        .map(|_| {
            let x = rng.random::<f64>() * config.area.width;
            let y = rng.random::<f64>() * config.area.height;
            Location::new(x, y)
        })
        .collect()
}

/// Synthesizes RSS at explicit sample points for explicit AP positions.
pub fn synthesize_at(
    config: &SynthEnvConfig,
    aps: &[Location],
    points: &[Location],
    seed: u64,
) -> Result<SurveyDataset> {
    config.validate()?;
    let n = points.len();
    let m = aps.len();
    if n == 0 {
        return Err(Error::Config("trajectory yields no samples".into()));
    }
    // Separate streams so the AP layout does not depend on n.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ad0_1f5e_ed00_0001);

    let mut rss = DMatrix::zeros(n, m);
    for (c, ap) in aps.iter().enumerate() {
        for (r, p) in points.iter().enumerate() {
            rss[(r, c)] = config.path_loss_rss(p.distance(ap));
        }
    }

    if config.shadowing_std_dbm > 0.0 {
        let factor = correlation_factor(points, config.shadowing_correlation_length)?;
        let mut white = DMatrix::zeros(n, m);
        for c in 0..m {
            for r in 0..n {
                white[(r, c)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        rss += (factor * white) * config.shadowing_std_dbm;
    }
    if config.measurement_noise_std_dbm > 0.0 {
        for c in 0..m {
            for r in 0..n {
                rss[(r, c)] += config.measurement_noise_std_dbm * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    rss.iter_mut().for_each(|v| *v = v.max(config.floor_dbm));

    let mut locs = DMatrix::zeros(n, 2);
    for (r, p) in points.iter().enumerate() {
        locs[(r, 0)] = p.x;
        locs[(r, 1)] = p.y;
    }
    let width = (m.saturating_sub(1)).to_string().len().max(2);
    let ids = (0..m).map(|i| format!("ap{i:0width$}")).collect();
    SurveyDataset::new(locs, rss, ids)
}

/// Lower Cholesky factor of the squared-exponential correlation matrix over
/// `points`, with the smallest diagonal jitter that makes it factorable.
fn correlation_factor(points: &[Location], length: f64) -> Result<DMatrix<f64>> {
    let n = points.len();
    let l2 = length * length;
    let corr = DMatrix::from_fn(n, n, |i, j| (-points[i].sq_distance(&points[j]) / l2).exp());
    let mut jitter = 1e-10;
    while jitter <= 1e-2 {
        let mut m = corr.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok(ch.l());
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: 1e-2 })
}

// ---------------------------------------------------------------------------
// Normalization and splits

/// Standardizes every AP column to mean 0 and (population) std 1.
pub fn normalize(ds: &SurveyDataset) -> Result<(SurveyDataset, NormalizationStats)> {
    if ds.is_normalized() {
        return Err(Error::Data("dataset is already normalized".into()));
    }
    let (n, m) = ds.rss.shape();
    let mut mean = Vec::with_capacity(m);
    let mut std = Vec::with_capacity(m);
    let mut degenerate = Vec::with_capacity(m);
    for c in 0..m {
        let col = ds.rss.column(c);
        let mu = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        mean.push(mu);
        if sd > 0.0 && sd.is_finite() {
            std.push(sd);
            degenerate.push(false);
        } else {
            std.push(1.0);
            degenerate.push(true);
        }
    }
    let stats = NormalizationStats {
        per_ap_mean: mean,
        per_ap_std: std,
        degenerate,
    };
    let out = apply_normalization(ds, &stats)?;
    Ok((out, stats))
}

/// Standardizes `ds` with previously computed statistics (e.g. a test split
/// with the training statistics).
pub fn apply_normalization(ds: &SurveyDataset, stats: &NormalizationStats) -> Result<SurveyDataset> {
    if ds.is_normalized() {
        return Err(Error::Data("dataset is already normalized".into()));
    }
    if stats.per_ap_mean.len() != ds.n_aps() {
        return Err(Error::Dimension {
            expected: ds.n_aps(),
            actual: stats.per_ap_mean.len(),
        });
    }
    Ok(SurveyDataset {
        locations: ds.locations.clone(),
        rss: stats.normalize_matrix(&ds.rss),
        ap_ids: ds.ap_ids.clone(),
        normalization: Some(stats.clone()),
    })
}

pub fn denormalize(ds: &SurveyDataset) -> Result<SurveyDataset> {
    let stats = ds
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Data("dataset is not normalized".into()))?;
    Ok(SurveyDataset {
        locations: ds.locations.clone(),
        rss: stats.denormalize_matrix(&ds.rss),
        ap_ids: ds.ap_ids.clone(),
        normalization: None,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Uniformly random rows go to the test set.
    #[default]
    Random,
    /// The last contiguous block of trajectory samples is the test set.
    Block,
}

/// Row indices of a split, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, test_fraction: f64, seed: u64, mode: SplitMode) -> Result<SplitIndices> {
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} rows")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (n as f64 * test_fraction).floor() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Data(format!(
            "test_fraction {test_fraction} on {n} rows leaves an empty partition"
        )));
    }
    let (mut train, mut test) = match mode {
        SplitMode::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let test = order[..n_test].to_vec();
            let train = order[n_test..].to_vec();
            (train, test)
        }
        SplitMode::Block => ((0..n - n_test).collect(), (n - n_test..n).collect()),
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn split(ds: &SurveyDataset, test_fraction: f64, seed: u64) -> Result<(SurveyDataset, SurveyDataset)> {
    split_with_mode(ds, test_fraction, seed, SplitMode::Random)
}

pub fn split_with_mode(
    ds: &SurveyDataset,
    test_fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(SurveyDataset, SurveyDataset)> {
    let idx = split_indices(ds.len(), test_fraction, seed, mode)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_config() -> SynthEnvConfig {
        let area = Area {
            width: 20.0,
            height: 10.0,
        };
        SynthEnvConfig {
            area,
            n_aps: 4,
            tx_power_dbm: -30.0,
            path_loss_exponent: 2.5,
            reference_distance: 1.0,
            shadowing_std_dbm: 0.0,
            shadowing_correlation_length: 5.0,
            measurement_noise_std_dbm: 0.0,
            floor_dbm: -100.0,
            trajectory: Trajectory::lawnmower(area, 2, 1.0, 1.0),
        }
    }

    #[test]
    fn csv_fill_rule_uses_default_floor() {
        let text = "x,y,a,b\n0,0,-40,-50\n1,0,,-55\n2,0,-45,-60\n";
        let ds = read_csv(text.as_bytes(), DEFAULT_FLOOR_DBM).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.rss()[(1, 0)], -100.0);
        assert_eq!(ds.rss()[(1, 1)], -55.0);
    }

    #[test]
    fn csv_duplicate_ap_rejected() {
        let text = "x,y,a,a\n0,0,-40,-50\n";
        match read_csv(text.as_bytes(), DEFAULT_FLOOR_DBM) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_errors_name_line() {
        let bad_cell = "x,y,a\n0,0,-40\n1,0,loud\n";
        match read_csv(bad_cell.as_bytes(), DEFAULT_FLOOR_DBM) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let short_row = "x,y,a,b\n0,0,-40,-41\n1,0,-40\n";
        match read_csv(short_row.as_bytes(), DEFAULT_FLOOR_DBM) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let bad_header = "lat,lon,a\n0,0,-40\n";
        match read_csv(bad_header.as_bytes(), DEFAULT_FLOOR_DBM) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fill_never_exceeds_observed() {
        let text = "x,y,a\n0,0,-120\n1,0,\n2,0,-70\n";
        let ds = read_csv(text.as_bytes(), -100.0).unwrap();
        let col: Vec<f64> = ds.rss().column(0).iter().copied().collect();
        assert_eq!(col, vec![-100.0, -100.0, -70.0]);
    }

    #[test]
    fn reference_distance_gives_tx_power() {
        let cfg = quiet_config();
        let aps = [Location::new(5.0, 5.0)];
        let pts = [Location::new(6.0, 5.0)];
        let ds = synthesize_at(&cfg, &aps, &pts, 3).unwrap();
        assert_eq!(ds.rss()[(0, 0)], cfg.tx_power_dbm);
    }

    #[test]
    fn doubling_distance_costs_ten_gamma_log2() {
        let cfg = quiet_config();
        let aps = [Location::new(0.0, 0.0)];
        let pts = [Location::new(3.0, 0.0), Location::new(0.0, 6.0)];
        let ds = synthesize_at(&cfg, &aps, &pts, 3).unwrap();
        let diff = ds.rss()[(1, 0)] - ds.rss()[(0, 0)];
        let expected = -10.0 * cfg.path_loss_exponent * 2f64.log10();
        assert!((diff - expected).abs() < 1e-12, "{diff} vs {expected}");
    }

    #[test]
    fn synthesize_is_deterministic() {
        let mut cfg = quiet_config();
        cfg.shadowing_std_dbm = 3.0;
        cfg.measurement_noise_std_dbm = 1.0;
        let a = synthesize(&cfg, 11).unwrap();
        let b = synthesize(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&cfg, 12).unwrap();
        assert_ne!(a.rss(), c.rss());
    }

    #[test]
    fn noiseless_rss_is_monotone_in_distance() {
        let cfg = quiet_config();
        let ds = synthesize(&cfg, 5).unwrap();
        let aps = draw_access_points(&cfg, 5);
        for (c, ap) in aps.iter().enumerate() {
            let mut pairs: Vec<(f64, f64)> = (0..ds.len())
                .map(|r| (ds.location(r).distance(ap), ds.rss()[(r, c)]))
                .collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in pairs.windows(2) {
                assert!(w[1].1 <= w[0].1 + 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = quiet_config();
        cfg.path_loss_exponent = 7.0;
        assert!(cfg.validate().is_err());
        let mut cfg = quiet_config();
        cfg.floor_dbm = -20.0;
        assert!(cfg.validate().is_err());
        let mut cfg = quiet_config();
        cfg.area.width = 0.0;
        assert!(cfg.validate().is_err());
        assert!(SynthEnvConfig::default().validate().is_ok());
    }

    #[test]
    fn two_point_standardization() {
        let locs = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let rss = DMatrix::from_row_slice(2, 1, &[-50.0, -70.0]);
        let ds = SurveyDataset::new(locs, rss, vec!["a".into()]).unwrap();
        let (norm, stats) = normalize(&ds).unwrap();
        assert_eq!(norm.rss()[(0, 0)], 1.0);
        assert_eq!(norm.rss()[(1, 0)], -1.0);
        assert_eq!(stats.per_ap_mean[0], -60.0);
        assert_eq!(stats.per_ap_std[0], 10.0);
        assert!(!stats.has_warnings());
        assert!(normalize(&norm).is_err());
    }

    #[test]
    fn constant_column_is_flagged() {
        let locs = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let rss = DMatrix::from_row_slice(3, 1, &[-80.0, -80.0, -80.0]);
        let ds = SurveyDataset::new(locs, rss, vec!["a".into()]).unwrap();
        let (norm, stats) = normalize(&ds).unwrap();
        assert!(norm.rss().iter().all(|&v| v == 0.0));
        assert_eq!(stats.per_ap_std[0], 1.0);
        assert!(stats.has_warnings());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let idx = split_indices(10, 0.3, 1, SplitMode::Random).unwrap();
        assert_eq!(idx.train.len(), 7);
        assert_eq!(idx.test.len(), 3);
        assert_eq!(idx, split_indices(10, 0.3, 1, SplitMode::Random).unwrap());
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let block = split_indices(10, 0.3, 1, SplitMode::Block).unwrap();
        assert_eq!(block.test, vec![7, 8, 9]);
        assert!(split_indices(3, 0.2, 1, SplitMode::Random).is_err());
        assert!(split_indices(1, 0.5, 1, SplitMode::Random).is_err());
    }

    #[test]
    fn trajectory_spacing() {
        let t = Trajectory {
            waypoints: vec![
                Location::new(0.0, 0.0),
                Location::new(3.0, 0.0),
                Location::new(3.0, 2.5),
            ],
            sample_spacing: 1.0,
        };
        let pts = t.sample_points();
        assert_eq!(pts.len(), 6);
        for w in pts.windows(2) {
            let d = w[0].distance(&w[1]);
            assert!(d <= 1.0 + 1e-9);
        }
        assert_eq!(pts[3], Location::new(3.0, 0.0));
        assert_eq!(pts[5], Location::new(3.0, 2.0));
    }

    #[test]
    fn default_survey_size() {
        let n = SynthEnvConfig::default().trajectory.sample_points().len();
        assert!((450..=800).contains(&n), "n = {n}");
    }
}

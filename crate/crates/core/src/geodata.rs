//! Geo-referenced samples, distance geometry, positive/negative sets and a
//! synthetic dataset generator.
//!
//! Positives are database samples within `r_pos` of a query (inclusive),
//! negatives are those strictly beyond `r_neg`. Samples in between belong
//! to neither set.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const DEFAULT_R_POS: f64 = 10.0;
pub const DEFAULT_R_NEG: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordMode {
    /// Metric `x`, `y`.
    Planar,
    /// Degrees latitude, longitude.
    Geodetic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    mode: CoordMode,
    a: f64,
    b: f64,
}

impl Position {
    pub fn planar(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid(format!("planar coordinates must be finite, got ({x}, {y})")));
        }
        Ok(Self { mode: CoordMode::Planar, a: x, b: y })
    }

    pub fn geodetic(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!("geodetic position out of range: lat {lat}, lon {lon}")));
        }
        Ok(Self { mode: CoordMode::Geodetic, a: lat, b: lon })
    }

    pub fn new(mode: CoordMode, a: f64, b: f64) -> Result<Self> {
        match mode {
            CoordMode::Planar => Self::planar(a, b),
            CoordMode::Geodetic => Self::geodetic(a, b),
        }
    }

    pub fn mode(&self) -> CoordMode {
        self.mode
    }

    /// `x` in meters, or latitude in degrees.
    pub fn x_or_lat(&self) -> f64 {
        self.a
    }

    /// `y` in meters, or longitude in degrees.
    pub fn y_or_lon(&self) -> f64 {
        self.b
    }
}

/// Euclidean distance for planar positions, haversine for geodetic ones.
pub fn distance_m(a: &Position, b: &Position) -> Result<f64> {
    if a.mode != b.mode {
        return Err(Error::invalid(format!("cannot measure distance between {:?} and {:?} positions", a.mode, b.mode)));
    }
    Ok(match a.mode {
        CoordMode::Planar => (a.a - b.a).hypot(a.b - b.b),
        CoordMode::Geodetic => haversine_m(a.a, a.b, b.a, b.b),
    })
}

fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dlat = (lat2 - lat1).to_radians() / 2.0;
    let dlon = (lon2 - lon1).to_radians() / 2.0;
    let h = dlat.sin().powi(2) + p1.cos() * p2.cos() * dlon.sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Database,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Database => "database",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoSample {
    pub id: u64,
    pub role: Role,
    pub position: Position,
    pub features: Vec<f64>,
}

/// Queries and database with the positive/negative radii.
#[derive(Clone, Debug)]
pub struct GeoDataset {
    queries: Vec<GeoSample>,
    database: Vec<GeoSample>,
    r_pos: f64,
    r_neg: f64,
    index: HashMap<u64, (Role, usize)>,
}

impl PartialEq for GeoDataset {
    fn eq(&self, other: &Self) -> bool {
        self.queries == other.queries
            && self.database == other.database
            && self.r_pos == other.r_pos
            && self.r_neg == other.r_neg
    }
}

impl GeoDataset {
    pub fn new(queries: Vec<GeoSample>, database: Vec<GeoSample>, r_pos: f64, r_neg: f64) -> Result<Self> {
        if !(r_pos > 0.0 && r_pos < r_neg) {
            return Err(Error::invalid(format!(
                "radii must satisfy 0 < r_pos < r_neg, got r_pos={r_pos}, r_neg={r_neg}"
            )));
        }
        let mut index = HashMap::with_capacity(queries.len() + database.len());
        let mut mode = None;
        let mut width = None;
        for (role, list) in [(Role::Query, &queries), (Role::Database, &database)] {
            for (i, s) in list.iter().enumerate() {
                if s.role != role {
                    return Err(Error::invalid(format!(
                        "sample {} has role {:?} but is stored among {:?} samples",
                        s.id, s.role, role
                    )));
                }
                if index.insert(s.id, (role, i)).is_some() {
                    return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
                }
                match mode {
                    None => mode = Some(s.position.mode()),
                    Some(m) if m != s.position.mode() => {
                        return Err(Error::invalid(format!(
                            "sample {} uses {:?} coordinates, dataset uses {m:?}",
                            s.id,
                            s.position.mode()
                        )))
                    }
                    _ => {}
                }
                match width {
                    None => width = Some(s.features.len()),
                    Some(w) if w != s.features.len() => {
                        return Err(Error::invalid(format!(
                            "sample {} has {} features, expected {w}",
                            s.id,
                            s.features.len()
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { queries, database, r_pos, r_neg, index })
    }

    pub fn queries(&self) -> &[GeoSample] {
        &self.queries
    }

    pub fn database(&self) -> &[GeoSample] {
        &self.database
    }

    pub fn r_pos(&self) -> f64 {
        self.r_pos
    }

    pub fn r_neg(&self) -> f64 {
        self.r_neg
    }

    pub fn feature_dim(&self) -> usize {
        self.queries.first().or(self.database.first()).map_or(0, |s| s.features.len())
    }

    pub fn coord_mode(&self) -> CoordMode {
        self.queries.first().or(self.database.first()).map_or(CoordMode::Planar, |s| s.position.mode())
    }

    pub fn sample(&self, id: u64) -> Option<&GeoSample> {
        self.index.get(&id).map(|&(role, i)| match role {
            Role::Query => &self.queries[i],
            Role::Database => &self.database[i],
        })
    }

    /// Index of a database sample within [`GeoDataset::database`].
    pub fn database_index(&self, id: u64) -> Option<usize> {
        match self.index.get(&id) {
            Some(&(Role::Database, i)) => Some(i),
            _ => None,
        }
    }

    fn distances_from<'a>(&'a self, q: &'a GeoSample) -> impl Iterator<Item = (&'a GeoSample, f64)> + 'a {
        self.database.iter().map(move |d| {
            // modes are uniform within a dataset
            let dist = distance_m(&q.position, &d.position).expect("uniform coordinate mode");
            (d, dist)
        })
    }

    /// Database ids within `r_pos` of `q` (inclusive), ascending.
    pub fn positive_set(&self, q: &GeoSample) -> Vec<u64> {
        self.distances_from(q).filter(|&(_, d)| d <= self.r_pos).map(|(s, _)| s.id).collect()
    }

    /// Database ids strictly beyond `r_neg` from `q`, ascending.
    pub fn negative_set(&self, q: &GeoSample) -> Vec<u64> {
        self.distances_from(q).filter(|&(_, d)| d > self.r_neg).map(|(s, _)| s.id).collect()
    }

    /// Database indices within `radius` of `q`.
    pub fn within(&self, q: &GeoSample, radius: f64) -> Vec<usize> {
        self.distances_from(q).enumerate().filter(|(_, (_, d))| *d <= radius).map(|(i, _)| i).collect()
    }

    /// Writes `path` as CSV and the metadata record next to it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = self.feature_dim();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "role".into(), "lat_or_x".into(), "lon_or_y".into()];
        header.extend((0..f).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for s in self.queries.iter().chain(&self.database) {
            let mut rec = vec![
                s.id.to_string(),
                s.role.as_str().to_string(),
                s.position.x_or_lat().to_string(),
                s.position.y_or_lon().to_string(),
            ];
            rec.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let meta = DatasetMeta { mode: self.coord_mode(), r_pos: self.r_pos, r_neg: self.r_neg, feature_dim: f };
        fs::write(meta_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let meta_file = meta_path(path);
        let meta: DatasetMeta = serde_json::from_str(
            &fs::read_to_string(&meta_file)
                .map_err(|e| Error::invalid(format!("cannot read metadata {}: {e}", meta_file.display())))?,
        )?;
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let expected = 4 + meta.feature_dim;
        if headers.len() != expected
            || &headers[0] != "id"
            || &headers[1] != "role"
            || &headers[2] != "lat_or_x"
            || &headers[3] != "lon_or_y"
        {
            return Err(Error::Parse(format!(
                "{}: unexpected header, need id,role,lat_or_x,lon_or_y,f0..f{}",
                path.display(),
                meta.feature_dim.saturating_sub(1)
            )));
        }
        let num = |s: &str, line: usize| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse(format!("line {line}: bad number {s:?}: {e}")))
        };
        let (mut queries, mut database) = (Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let id = rec[0].parse::<u64>().map_err(|e| Error::Parse(format!("line {line}: bad id: {e}")))?;
            let role = match &rec[1] {
                "query" => Role::Query,
                "database" => Role::Database,
                other => return Err(Error::Parse(format!("line {line}: unknown role {other:?}"))),
            };
            let position = Position::new(meta.mode, num(&rec[2], line)?, num(&rec[3], line)?)?;
            let features = (4..expected).map(|c| num(&rec[c], line)).collect::<Result<_>>()?;
            let s = GeoSample { id, role, position, features };
            match role {
                Role::Query => queries.push(s),
                Role::Database => database.push(s),
            }
        }
        Self::new(queries, database, meta.r_pos, meta.r_neg)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    mode: CoordMode,
    r_pos: f64,
    r_neg: f64,
    feature_dim: usize,
}

/// `data.csv` → `data.meta.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Parameters of the synthetic place generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_places: usize,
    pub db_per_place: usize,
    pub query_fraction: f64,
    pub feature_dim: usize,
    pub view_noise: f64,
    pub spacing_m: f64,
    /// Queries generated for each place that receives queries.
    pub queries_per_place: usize,
    /// Database samples per place placed in the `(r_pos, r_neg]` buffer ring
    /// around that place's queries.
    pub buffer_per_place: usize,
    pub r_pos: f64,
    pub r_neg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_places: 20,
            db_per_place: 8,
            query_fraction: 0.5,
            feature_dim: 32,
            view_noise: 0.5,
            spacing_m: 100.0,
            queries_per_place: 1,
            buffer_per_place: 0,
            r_pos: DEFAULT_R_POS,
            r_neg: DEFAULT_R_NEG,
        }
    }
}

/// Places on a square grid `spacing_m` apart. Each place has one latent
/// feature vector; every sample of the place is `latent + N(0, view_noise²)`
/// and lies within `r_pos / 2` of the place center, so same-place samples are
/// mutual positives. Database ids come first, then query ids.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<GeoDataset> {
    if cfg.spacing_m <= 2.0 * cfg.r_neg {
        return Err(Error::invalid(format!("spacing_m ({}) must exceed 2·r_neg ({})", cfg.spacing_m, 2.0 * cfg.r_neg)));
    }
    if cfg.n_places < 2 {
        return Err(Error::invalid(format!("n_places must be at least 2, got {}", cfg.n_places)));
    }
    if !(0.0..=1.0).contains(&cfg.query_fraction) {
        return Err(Error::invalid(format!("query_fraction must lie in [0, 1], got {}", cfg.query_fraction)));
    }
    if cfg.feature_dim == 0 || cfg.view_noise < 0.0 || !cfg.view_noise.is_finite() {
        return Err(Error::invalid("feature_dim must be positive and view_noise non-negative"));
    }
    if !(cfg.r_pos > 0.0 && cfg.r_pos < cfg.r_neg) {
        return Err(Error::invalid(format!(
            "radii must satisfy 0 < r_pos < r_neg, got {} and {}",
            cfg.r_pos, cfg.r_neg
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let grid = (cfg.n_places as f64).sqrt().ceil() as usize;
    let centers: Vec<(f64, f64)> =
        (0..cfg.n_places).map(|p| ((p % grid) as f64 * cfg.spacing_m, (p / grid) as f64 * cfg.spacing_m)).collect();
    let latents: Vec<Vec<f64>> =
        (0..cfg.n_places).map(|_| (0..cfg.feature_dim).map(|_| unit.sample(&mut rng)).collect()).collect();

    let n_query_places = (cfg.query_fraction * cfg.n_places as f64).round_ties_even() as usize;
    let mut order: Vec<usize> = (0..cfg.n_places).collect();
    order.shuffle(&mut rng);
    let mut query_places = order[..n_query_places].to_vec();
    query_places.sort_unstable();

    let view = |rng: &mut ChaCha8Rng, place: usize| -> Vec<f64> {
        latents[place].iter().map(|&l| l + cfg.view_noise * unit.sample(rng)).collect()
    };
    let core_radius = cfg.r_pos / 2.0;
    let point_in_ring = |rng: &mut ChaCha8Rng, center: (f64, f64), lo: f64, hi: f64| {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        // uniform over the annulus area
        let r = (rng.gen_range(lo * lo..=hi * hi)).sqrt();
        Position::planar(center.0 + r * angle.cos(), center.1 + r * angle.sin())
    };

    let mut next_id = 0u64;
    let mut database = Vec::new();
    for (p, &center) in centers.iter().enumerate() {
        for _ in 0..cfg.db_per_place {
            let position = point_in_ring(&mut rng, center, 0.0, core_radius)?;
            let features = view(&mut rng, p);
            database.push(GeoSample { id: next_id, role: Role::Database, position, features });
            next_id += 1;
        }
    }
    if cfg.buffer_per_place > 0 {
        // any core point is then more than r_pos and at most r_neg away
        let (lo, hi) = (cfg.r_pos + core_radius, cfg.r_neg - core_radius);
        if lo >= hi {
            return Err(Error::invalid(format!(
                "buffer ring empty: need 1.5·r_pos < r_neg − r_pos/2 (r_pos={}, r_neg={})",
                cfg.r_pos, cfg.r_neg
            )));
        }
        for (p, &center) in centers.iter().enumerate() {
            for _ in 0..cfg.buffer_per_place {
                let position = point_in_ring(&mut rng, center, lo + 1e-9, hi - 1e-9)?;
                let features = view(&mut rng, p);
                database.push(GeoSample { id: next_id, role: Role::Database, position, features });
                next_id += 1;
            }
        }
    }
    let mut queries = Vec::new();
    for &p in &query_places {
        for _ in 0..cfg.queries_per_place {
            let position = point_in_ring(&mut rng, centers[p], 0.0, core_radius)?;
            let features = view(&mut rng, p);
            queries.push(GeoSample { id: next_id, role: Role::Query, position, features });
            next_id += 1;
        }
    }
    GeoDataset::new(queries, database, cfg.r_pos, cfg.r_neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn planar(x: f64, y: f64) -> Position {
        Position::planar(x, y).unwrap()
    }

    fn sample(id: u64, role: Role, x: f64) -> GeoSample {
        GeoSample { id, role, position: planar(x, 0.0), features: vec![0.0] }
    }

    fn line_dataset(db_x: &[f64]) -> GeoDataset {
        let db = db_x.iter().enumerate().map(|(i, &x)| sample(i as u64, Role::Database, x)).collect();
        GeoDataset::new(vec![sample(100, Role::Query, 0.0)], db, 10.0, 25.0).unwrap()
    }

    #[test]
    fn identical_points_have_zero_distance() {
        let p = planar(3.0, -2.0);
        assert_eq!(distance_m(&p, &p).unwrap(), 0.0);
        let g = Position::geodetic(45.0, 7.0).unwrap();
        assert_eq!(distance_m(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn planar_three_four_five() {
        assert_eq!(distance_m(&planar(0.0, 0.0), &planar(3.0, 4.0)).unwrap(), 5.0);
    }

    #[test]
    fn one_degree_of_equator() {
        let a = Position::geodetic(0.0, 0.0).unwrap();
        let b = Position::geodetic(0.0, 1.0).unwrap();
        // arc of 1° on a 6 371 000 m sphere: 2πR/360
        let expected = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M / 360.0;
        assert!((expected - 111_194.93).abs() < 0.01);
        assert!((distance_m(&a, &b).unwrap() - expected).abs() < 0.01);
    }

    #[test]
    fn mixed_modes_rejected() {
        let a = Position::geodetic(0.0, 0.0).unwrap();
        assert!(matches!(distance_m(&a, &planar(0.0, 0.0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn geodetic_range_checked() {
        assert!(Position::geodetic(91.0, 0.0).is_err());
        assert!(Position::geodetic(0.0, -180.5).is_err());
        assert!(Position::planar(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn positive_and_negative_sets() {
        let ds = line_dataset(&[5.0, 15.0, 30.0]);
        let q = &ds.queries()[0];
        assert_eq!(ds.positive_set(q), vec![0]);
        assert_eq!(ds.negative_set(q), vec![2]);
    }

    #[test]
    fn radius_boundaries() {
        let ds = line_dataset(&[10.0, 25.0]);
        let q = &ds.queries()[0];
        assert_eq!(distance_m(&q.position, &ds.database()[0].position).unwrap(), 10.0);
        assert_eq!(distance_m(&q.position, &ds.database()[1].position).unwrap(), 25.0);
        assert_eq!(ds.positive_set(q), vec![0]);
        assert!(ds.negative_set(q).is_empty());
    }

    #[test]
    fn empty_and_all_near_databases() {
        let ds = line_dataset(&[]);
        assert!(ds.positive_set(&ds.queries()[0]).is_empty());
        let ds = line_dataset(&[1.0, 4.0, 9.0]);
        assert!(ds.negative_set(&ds.queries()[0]).is_empty());
    }

    #[test]
    fn dataset_validation() {
        let q = sample(1, Role::Query, 0.0);
        assert!(GeoDataset::new(vec![q.clone()], vec![sample(1, Role::Database, 0.0)], 10.0, 25.0).is_err());
        assert!(GeoDataset::new(vec![q.clone()], vec![], 25.0, 10.0).is_err());
        let mut g = sample(2, Role::Database, 0.0);
        g.position = Position::geodetic(0.0, 0.0).unwrap();
        assert!(GeoDataset::new(vec![q.clone()], vec![g], 10.0, 25.0).is_err());
        let mut wide = sample(3, Role::Database, 0.0);
        wide.features = vec![0.0, 1.0];
        assert!(GeoDataset::new(vec![q], vec![wide], 10.0, 25.0).is_err());
    }

    fn cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_places: 10,
            db_per_place: 4,
            query_fraction: 0.5,
            feature_dim: 6,
            view_noise: 0.3,
            spacing_m: 60.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_counts_and_determinism() {
        let a = synth_dataset(&cfg(5)).unwrap();
        assert_eq!(a.database().len(), 40);
        assert_eq!(a.queries().len(), 5);
        assert_eq!(a, synth_dataset(&cfg(5)).unwrap());
        assert_ne!(a, synth_dataset(&cfg(6)).unwrap());
    }

    #[test]
    fn synth_zero_noise_shares_features_per_place() {
        let ds = synth_dataset(&SynthConfig { view_noise: 0.0, ..cfg(1) }).unwrap();
        for q in ds.queries() {
            for id in ds.positive_set(q) {
                assert_eq!(ds.sample(id).unwrap().features, q.features);
            }
        }
        for chunk in ds.database().chunks(4) {
            assert!(chunk.iter().all(|s| s.features == chunk[0].features));
        }
    }

    #[test]
    fn synth_rejects_tight_spacing() {
        let err = synth_dataset(&SynthConfig { spacing_m: 50.0, ..cfg(1) }).unwrap_err();
        assert!(err.to_string().contains("2·r_neg"), "{err}");
    }

    #[test]
    fn synth_geometry_separates_places() {
        let c = SynthConfig { buffer_per_place: 2, queries_per_place: 2, ..cfg(3) };
        let ds = synth_dataset(&c).unwrap();
        for q in ds.queries() {
            let pos = ds.positive_set(q);
            let neg = ds.negative_set(q);
            assert_eq!(pos.len(), c.db_per_place);
            // everything except own core and own buffer ring is negative
            assert_eq!(neg.len(), ds.database().len() - c.db_per_place - c.buffer_per_place);
        }
        // cross-place database pairs are beyond r_neg
        for (i, a) in ds.database().iter().enumerate().take(c.n_places * c.db_per_place) {
            for b in ds.database().iter().take(c.n_places * c.db_per_place).skip(i + 1) {
                let same = a.id / c.db_per_place as u64 == b.id / c.db_per_place as u64;
                let d = distance_m(&a.position, &b.position).unwrap();
                if same {
                    assert!(d <= c.r_pos);
                } else {
                    assert!(d > c.r_neg);
                }
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = synth_dataset(&cfg(9)).unwrap();
        ds.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,role,lat_or_x,lon_or_y,f0,f1,f2,f3,f4,f5\n"));
        assert!(meta_path(&path).exists());
        assert_eq!(GeoDataset::read_csv(&path).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn distance_symmetric_and_triangle(
            ax in -1e4..1e4f64, ay in -1e4..1e4f64,
            bx in -1e4..1e4f64, by in -1e4..1e4f64,
            cx in -1e4..1e4f64, cy in -1e4..1e4f64,
        ) {
            let (a, b, c) = (planar(ax, ay), planar(bx, by), planar(cx, cy));
            let ab = distance_m(&a, &b).unwrap();
            prop_assert_eq!(ab, distance_m(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            let ac = distance_m(&a, &c).unwrap();
            let cb = distance_m(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn geodetic_symmetric(lat1 in -89.0..89.0f64, lon1 in -179.0..179.0f64,
                              lat2 in -89.0..89.0f64, lon2 in -179.0..179.0f64) {
            let a = Position::geodetic(lat1, lon1).unwrap();
            let b = Position::geodetic(lat2, lon2).unwrap();
            let d = distance_m(&a, &b).unwrap();
            prop_assert!((d - distance_m(&b, &a).unwrap()).abs() < 1e-6);
            prop_assert!(d >= 0.0);
        }

        #[test]
        fn positive_and_negative_sets_disjoint(xs in proptest::collection::vec(-60.0..60.0f64, 0..30)) {
            let ds = line_dataset(&xs);
            let q = &ds.queries()[0];
            let pos = ds.positive_set(q);
            let neg = ds.negative_set(q);
            prop_assert!(pos.iter().all(|id| !neg.contains(id)));
        }
    }
}

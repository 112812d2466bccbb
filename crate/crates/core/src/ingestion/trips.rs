use std::collections::HashMap;
use std::path::Path;

use chrono::{Duration, NaiveDateTime, Timelike};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::cube::{RegionGeometry, TrafficCube};
use super::grid::{assign_grid_cell, GridCell, GridSpec};
use crate::error::{bail_config, bail_data, bail_input, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    LatLon { lat: f64, lon: f64 },
    Zone(i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub pickup_time: NaiveDateTime,
    pub dropoff_time: NaiveDateTime,
    pub pickup: Location,
    pub dropoff: Location,
}

impl TripRecord {
    pub fn new(
        pickup_time: NaiveDateTime,
        dropoff_time: NaiveDateTime,
        pickup: Location,
        dropoff: Location,
    ) -> Result<Self> {
        if dropoff_time < pickup_time {
            bail_input!("dropoff {dropoff_time} precedes pickup {pickup_time}");
        }
        for loc in [pickup, dropoff] {
            if let Location::LatLon { lat, lon } = loc {
                if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                    bail_input!("coordinates ({lat}, {lon}) out of range");
                }
            }
        }
        Ok(TripRecord {
            pickup_time,
            dropoff_time,
            pickup,
            dropoff,
        })
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Read a trip CSV. Rows that parse but violate record invariants (negative
/// duration, impossible coordinates) are skipped and counted; unparsable rows
/// are errors carrying their line number.
pub fn read_trip_csv(path: &Path) -> Result<(Vec<TripRecord>, usize)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(pt), Some(dt)) = (col("pickup_datetime"), col("dropoff_datetime")) else {
        bail_data!(
            "{}: missing pickup_datetime/dropoff_datetime columns",
            path.display()
        );
    };
    enum Schema {
        LatLon([usize; 4]),
        Zone([usize; 2]),
    }
    let schema = match (
        col("pickup_lat"),
        col("pickup_lon"),
        col("dropoff_lat"),
        col("dropoff_lon"),
        col("pickup_zone"),
        col("dropoff_zone"),
    ) {
        (Some(a), Some(b), Some(c), Some(d), _, _) => Schema::LatLon([a, b, c, d]),
        (_, _, _, _, Some(a), Some(b)) => Schema::Zone([a, b]),
        _ => bail_data!(
            "{}: need pickup_lat/pickup_lon/dropoff_lat/dropoff_lon or pickup_zone/dropoff_zone",
            path.display()
        ),
    };

    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let bad = |what: &str| Error::Data(format!("{}:{line}: unparsable {what}", path.display()));
        let pickup_time = parse_timestamp(field(pt)).ok_or_else(|| bad("pickup_datetime"))?;
        let dropoff_time = parse_timestamp(field(dt)).ok_or_else(|| bad("dropoff_datetime"))?;
        let num = |k: usize, what: &str| field(k).trim().parse::<f64>().map_err(|_| bad(what));
        let (pickup, dropoff) = match schema {
            Schema::LatLon([a, b, c, d]) => (
                Location::LatLon {
                    lat: num(a, "pickup_lat")?,
                    lon: num(b, "pickup_lon")?,
                },
                Location::LatLon {
                    lat: num(c, "dropoff_lat")?,
                    lon: num(d, "dropoff_lon")?,
                },
            ),
            Schema::Zone([a, b]) => {
                let zone =
                    |k: usize, what: &str| field(k).trim().parse::<i64>().map_err(|_| bad(what));
                (
                    Location::Zone(zone(a, "pickup_zone")?),
                    Location::Zone(zone(b, "dropoff_zone")?),
                )
            }
        };
        match TripRecord::new(pickup_time, dropoff_time, pickup, dropoff) {
            Ok(r) => records.push(r),
            Err(_) => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Explicit zone-id to region table, for datasets that ship zone ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneMap {
    pub region_ids: Vec<String>,
    pub zone_to_region: HashMap<i64, usize>,
    /// Optional (lat, lon) centroid per region.
    #[serde(default)]
    pub centroids: Option<Vec<(f64, f64)>>,
}

impl ZoneMap {
    /// One region per listed zone, in the given order.
    pub fn identity(zones: &[i64]) -> Self {
        ZoneMap {
            region_ids: zones.iter().map(|z| format!("zone_{z}")).collect(),
            zone_to_region: zones.iter().enumerate().map(|(i, &z)| (z, i)).collect(),
            centroids: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionMapper {
    Grid(GridSpec),
    Zones(ZoneMap),
}

impl RegionMapper {
    pub fn n_regions(&self) -> usize {
        match self {
            RegionMapper::Grid(g) => g.n_cells(),
            RegionMapper::Zones(z) => z.region_ids.len(),
        }
    }

    fn region_ids(&self) -> Vec<String> {
        match self {
            RegionMapper::Grid(g) => (0..g.n_cells()).map(|i| format!("cell_{i}")).collect(),
            RegionMapper::Zones(z) => z.region_ids.clone(),
        }
    }

    fn geometry(&self) -> Option<RegionGeometry> {
        match self {
            RegionMapper::Grid(g) => Some(RegionGeometry::Grid {
                n_cols: g.n_cols,
                cells: (0..g.n_cells()).collect(),
            }),
            RegionMapper::Zones(z) => z
                .centroids
                .clone()
                .map(|lat_lon| RegionGeometry::Centroids { lat_lon }),
        }
    }

    /// Region of a location, `None` when it falls outside the universe.
    fn region_of(&self, loc: Location) -> Result<Option<usize>> {
        Ok(match (self, loc) {
            (RegionMapper::Grid(g), Location::LatLon { lat, lon }) => {
                match assign_grid_cell(lat, lon, g)? {
                    GridCell::Inside(c) => Some(c),
                    GridCell::OutOfBounds => None,
                }
            }
            (RegionMapper::Zones(z), Location::Zone(id)) => z.zone_to_region.get(&id).copied(),
            (RegionMapper::Grid(_), Location::Zone(_)) => {
                bail_input!("zone-coded trip given a grid mapper")
            }
            (RegionMapper::Zones(_), Location::LatLon { .. }) => {
                bail_input!("lat/lon trip given a zone mapper")
            }
        })
    }
}

/// Half-open hour range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HourWindow {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

impl HourWindow {
    pub fn new(start: NaiveDateTime, end: NaiveDateTime) -> Result<Self> {
        for t in [start, end] {
            if t.minute() != 0 || t.second() != 0 || t.nanosecond() != 0 {
                bail_input!("window bound {t} is not hour-aligned");
            }
        }
        if end <= start {
            bail_input!("empty window [{start}, {end})");
        }
        Ok(HourWindow { start, end })
    }

    /// Smallest hour-aligned window covering every pickup and dropoff.
    pub fn covering(records: &[TripRecord]) -> Result<Self> {
        let lo = records.iter().map(|r| r.pickup_time).min();
        let hi = records.iter().map(|r| r.dropoff_time).max();
        let (Some(lo), Some(hi)) = (lo, hi) else {
            bail_data!("no records to derive a window from");
        };
        let floor = |t: NaiveDateTime| t.date().and_hms_opt(t.hour(), 0, 0).expect("valid hour");
        HourWindow::new(floor(lo), floor(hi) + Duration::hours(1))
    }

    pub fn n_hours(&self) -> usize {
        (self.end - self.start).num_hours() as usize
    }

    fn hour_of(&self, t: NaiveDateTime) -> Option<usize> {
        if t < self.start || t >= self.end {
            return None;
        }
        Some((t - self.start).num_hours() as usize)
    }
}

/// Records that did not land in the cube, per channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropTally {
    pub pickups: usize,
    pub dropoffs: usize,
}

/// Count pickups and dropoffs per region and hour. Events outside the window
/// or the region universe are tallied, not errors.
pub fn aggregate_trips(
    records: &[TripRecord],
    mapper: &RegionMapper,
    window: HourWindow,
) -> Result<(TrafficCube, DropTally)> {
    let n = mapper.n_regions();
    if n == 0 {
        bail_config!("region universe is empty");
    }
    if let RegionMapper::Grid(g) = mapper {
        g.validate()?;
    }
    let mut values = Array3::<f64>::zeros((window.n_hours(), n, 2));
    let mut tally = DropTally::default();
    for rec in records {
        for (channel, time, loc) in [
            (0, rec.pickup_time, rec.pickup),
            (1, rec.dropoff_time, rec.dropoff),
        ] {
            match (window.hour_of(time), mapper.region_of(loc)?) {
                (Some(t), Some(r)) => values[[t, r, channel]] += 1.0,
                _ if channel == 0 => tally.pickups += 1,
                _ => tally.dropoffs += 1,
            }
        }
    }
    let cube = TrafficCube::new(values, window.start, mapper.region_ids(), mapper.geometry())?;
    Ok((cube, tally))
}

/// Keep regions whose mean hourly volume, averaged over the two channels, is
/// at least `min_avg`. Returns the filtered cube and the kept original indices.
pub fn filter_regions(cube: &TrafficCube, min_avg: f64) -> Result<(TrafficCube, Vec<usize>)> {
    let hours = cube.n_hours();
    if hours == 0 || cube.n_regions() == 0 {
        bail_data!("cannot filter an empty cube");
    }
    let v = cube.values();
    let keep: Vec<usize> = (0..cube.n_regions())
        .filter(|&r| {
            let total: f64 = (0..hours).map(|t| v[[t, r, 0]] + v[[t, r, 1]]).sum();
            total / 2.0 / hours as f64 >= min_avg
        })
        .collect();
    if keep.is_empty() {
        bail_data!("every region averages below {min_avg}");
    }
    Ok((cube.select_regions(&keep)?, keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(h: u32, m: u32) -> NaiveDateTime {
        chrono::NaiveDate::from_ymd_opt(2023, 3, 1)
            .unwrap()
            .and_hms_opt(h, m, 0)
            .unwrap()
    }

    fn window(hours: u32) -> HourWindow {
        HourWindow::new(at(0, 0), at(0, 0) + Duration::hours(hours as i64)).unwrap()
    }

    fn zone_trip(p: (u32, u32, i64), d: (u32, u32, i64)) -> TripRecord {
        TripRecord::new(
            at(p.0, p.1),
            at(d.0, d.1),
            Location::Zone(p.2),
            Location::Zone(d.2),
        )
        .unwrap()
    }

    #[test]
    fn empty_records_give_zero_cube() {
        let mapper = RegionMapper::Zones(ZoneMap::identity(&[1, 2, 3]));
        let (cube, tally) = aggregate_trips(&[], &mapper, window(10)).unwrap();
        assert!(cube.values().iter().all(|&v| v == 0.0));
        assert_eq!(tally, DropTally::default());
    }

    #[test]
    fn hand_counted_example() {
        let mapper = RegionMapper::Zones(ZoneMap::identity(&[10, 11, 12]));
        let recs = vec![
            zone_trip((5, 0, 12), (5, 20, 10)),
            zone_trip((5, 10, 12), (5, 50, 10)),
            zone_trip((5, 40, 12), (6, 5, 10)),
        ];
        let (cube, tally) = aggregate_trips(&recs, &mapper, window(24)).unwrap();
        let v = cube.values();
        assert_eq!(v[[5, 2, 0]], 3.0);
        assert_eq!(v[[5, 0, 1]], 2.0);
        assert_eq!(v[[6, 0, 1]], 1.0);
        assert_eq!(v.sum(), 6.0);
        assert_eq!(tally, DropTally::default());
    }

    #[test]
    fn out_of_universe_and_window_are_tallied() {
        let mapper = RegionMapper::Zones(ZoneMap::identity(&[1]));
        let recs = vec![
            zone_trip((1, 0, 1), (1, 10, 99)),
            zone_trip((3, 0, 1), (4, 0, 1)),
        ];
        let (cube, tally) = aggregate_trips(&recs, &mapper, window(4)).unwrap();
        assert_eq!(
            tally,
            DropTally {
                pickups: 0,
                dropoffs: 2
            }
        );
        let picked: f64 = cube.values().slice(ndarray::s![.., .., 0]).sum();
        assert_eq!(picked as usize + tally.pickups, recs.len());
    }

    #[test]
    fn empty_universe_is_config_error() {
        let mapper = RegionMapper::Zones(ZoneMap::identity(&[]));
        assert!(matches!(
            aggregate_trips(&[], &mapper, window(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unaligned_window_rejected() {
        assert!(HourWindow::new(at(0, 30), at(2, 0)).is_err());
    }

    fn cube_with_means(means: &[f64]) -> TrafficCube {
        let mut v = Array3::zeros((4, means.len(), 2));
        for (r, &m) in means.iter().enumerate() {
            for t in 0..4 {
                v[[t, r, 0]] = m + 1.0;
                v[[t, r, 1]] = m - 1.0;
            }
        }
        let ids = (0..means.len()).map(|r| format!("r{r}")).collect();
        TrafficCube::new(v, at(0, 0), ids, None).unwrap()
    }

    #[test]
    fn filter_keeps_busy_regions() {
        let (cube, kept) = filter_regions(&cube_with_means(&[12.0, 3.0]), 10.0).unwrap();
        assert_eq!(kept, vec![0]);
        assert_eq!(cube.region_ids(), ["r0"]);
    }

    #[test]
    fn filter_zero_threshold_is_identity_and_idempotent() {
        let c = cube_with_means(&[12.0, 3.0, 40.0]);
        let (same, kept) = filter_regions(&c, 0.0).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
        assert_eq!(same, c);
        let (once, _) = filter_regions(&c, 10.0).unwrap();
        let (twice, _) = filter_regions(&once, 10.0).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn filter_all_zero_is_data_error() {
        let c = cube_with_means(&[1.0]);
        let zero = c.select_regions(&[0]).unwrap();
        let zero = TrafficCube::new(
            Array3::zeros(zero.values().dim()),
            at(0, 0),
            vec!["z".into()],
            None,
        )
        .unwrap();
        assert!(matches!(filter_regions(&zero, 10.0), Err(Error::Data(_))));
    }

    #[test]
    fn reads_both_csv_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zones.csv");
        std::fs::write(
            &p,
            "pickup_datetime,dropoff_datetime,pickup_zone,dropoff_zone\n\
             2023-03-01T05:00:00,2023-03-01T05:10:00,4,7\n\
             2023-03-01 06:00:00,2023-03-01 05:10:00,4,7\n",
        )
        .unwrap();
        let (recs, skipped) = read_trip_csv(&p).unwrap();
        assert_eq!((recs.len(), skipped), (1, 1));
        assert_eq!(recs[0].dropoff, Location::Zone(7));

        let q = dir.path().join("ll.csv");
        std::fs::write(
            &q,
            "pickup_datetime,dropoff_datetime,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon\n\
             2023-03-01T05:00:00,2023-03-01T05:10:00,40.7,-74.0,40.71,-73.99\n\
             not-a-time,2023-03-01T05:10:00,40.7,-74.0,40.71,-73.99\n",
        )
        .unwrap();
        let err = read_trip_csv(&q).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}

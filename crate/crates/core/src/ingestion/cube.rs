use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use ndarray::{s, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{bail_data, bail_input, Error, Result};

pub const CHANNELS: [&str; 2] = ["pickup", "dropoff"];

/// A calendar month. Ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    /// 1..=12
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            bail_input!("month {month} outside 1..=12");
        }
        Ok(YearMonth { year, month })
    }

    pub fn of(t: &NaiveDateTime) -> Self {
        YearMonth {
            year: t.year(),
            month: t.month(),
        }
    }

    /// Months since year 0, January.
    pub fn index(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_index(idx: i64) -> Self {
        YearMonth {
            year: idx.div_euclid(12) as i32,
            month: idx.rem_euclid(12) as u32 + 1,
        }
    }

    pub fn add_months(self, k: i64) -> Self {
        Self::from_index(self.index() + k)
    }

    pub fn first_hour(self) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(self.year, self.month, 1)
            .expect("valid year-month")
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (y, m) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| Error::Input(format!("expected YYYY-MM, got {s:?}")))?;
        let year = y
            .parse()
            .map_err(|_| Error::Input(format!("bad year in {s:?}")))?;
        let month = m
            .parse()
            .map_err(|_| Error::Input(format!("bad month in {s:?}")))?;
        YearMonth::new(year, month)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Spatial layout of the regions, used to build the static adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionGeometry {
    /// Each region is a cell `row * n_cols + col` of a regular grid.
    Grid { n_cols: usize, cells: Vec<usize> },
    /// Region centroids as (lat, lon) degrees.
    Centroids { lat_lon: Vec<(f64, f64)> },
}

impl RegionGeometry {
    pub fn len(&self) -> usize {
        match self {
            RegionGeometry::Grid { cells, .. } => cells.len(),
            RegionGeometry::Centroids { lat_lon } => lat_lon.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, keep: &[usize]) -> Self {
        match self {
            RegionGeometry::Grid { n_cols, cells } => RegionGeometry::Grid {
                n_cols: *n_cols,
                cells: keep.iter().map(|&k| cells[k]).collect(),
            },
            RegionGeometry::Centroids { lat_lon } => RegionGeometry::Centroids {
                lat_lon: keep.iter().map(|&k| lat_lon[k]).collect(),
            },
        }
    }
}

/// Hourly region x channel volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficCube {
    values: Array3<f64>,
    start_time: NaiveDateTime,
    region_ids: Vec<String>,
    month_of_hour: Vec<u32>,
    geometry: Option<RegionGeometry>,
}

impl TrafficCube {
    /// `values` is `[hours, regions, 2]`; `start_time` must sit on an hour.
    pub fn new(
        values: Array3<f64>,
        start_time: NaiveDateTime,
        region_ids: Vec<String>,
        geometry: Option<RegionGeometry>,
    ) -> Result<Self> {
        let (t, n, c) = values.dim();
        if c != 2 {
            bail_input!("cube needs 2 channels, got {c}");
        }
        if n != region_ids.len() {
            bail_input!("{} region ids for {n} regions", region_ids.len());
        }
        if let Some(g) = &geometry {
            if g.len() != n {
                bail_input!("geometry describes {} regions, cube has {n}", g.len());
            }
        }
        if start_time.minute() != 0 || start_time.second() != 0 || start_time.nanosecond() != 0 {
            bail_input!("cube start {start_time} is not hour-aligned");
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            bail_input!("cube values must be finite and non-negative, found {bad}");
        }
        let first = YearMonth::of(&start_time).index();
        let month_of_hour = (0..t)
            .map(|h| {
                let ts = start_time + Duration::hours(h as i64);
                (YearMonth::of(&ts).index() - first) as u32
            })
            .collect();
        Ok(TrafficCube {
            values,
            start_time,
            region_ids,
            month_of_hour,
            geometry,
        })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn n_hours(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_regions(&self) -> usize {
        self.values.dim().1
    }

    pub fn start_time(&self) -> NaiveDateTime {
        self.start_time
    }

    pub fn start_month(&self) -> YearMonth {
        YearMonth::of(&self.start_time)
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn geometry(&self) -> Option<&RegionGeometry> {
        self.geometry.as_ref()
    }

    /// Month offset of each hour relative to the cube's first month.
    pub fn month_of_hour(&self) -> &[u32] {
        &self.month_of_hour
    }

    pub fn time_at(&self, hour: usize) -> NaiveDateTime {
        self.start_time + Duration::hours(hour as i64)
    }

    pub fn month_at(&self, hour: usize) -> YearMonth {
        self.start_month()
            .add_months(self.month_of_hour[hour] as i64)
    }

    /// `[regions, 2]` slice for one hour.
    pub fn hour(&self, hour: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![hour, .., ..])
    }

    /// Keep only the listed regions, in the given order.
    pub fn select_regions(&self, keep: &[usize]) -> Result<Self> {
        let values = self.values.select(ndarray::Axis(1), keep);
        let ids = keep.iter().map(|&k| self.region_ids[k].clone()).collect();
        TrafficCube::new(
            values,
            self.start_time,
            ids,
            self.geometry.as_ref().map(|g| g.select(keep)),
        )
    }

    /// Write `manifest.json` and `values.csv` into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = CubeManifest {
            start_time: self.start_time,
            region_ids: self.region_ids.clone(),
            n_hours: self.n_hours(),
            channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
            geometry: self.geometry.clone(),
        };
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&mpath, e))?;

        let vpath = dir.join("values.csv");
        let file = fs::File::create(&vpath).map_err(|e| Error::io(&vpath, e))?;
        let mut w = BufWriter::new(file);
        let header: Vec<String> = self
            .region_ids
            .iter()
            .flat_map(|r| CHANNELS.iter().map(move |c| format!("{r}_{c}")))
            .collect();
        let io = |e| Error::io(&vpath, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        let mut line = String::new();
        for t in 0..self.n_hours() {
            line.clear();
            for r in 0..self.n_regions() {
                for c in 0..2 {
                    if r + c > 0 {
                        line.push(',');
                    }
                    line.push_str(&format!("{}", self.values[[t, r, c]].round() as i64));
                }
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CubeManifest = serde_json::from_str(&text)?;
        if manifest.channels != CHANNELS {
            bail_data!("unsupported channel list {:?}", manifest.channels);
        }
        let n = manifest.region_ids.len();
        let vpath = dir.join("values.csv");
        let mut reader = csv::Reader::from_path(&vpath)?;
        let mut values = Array3::<f64>::zeros((manifest.n_hours, n, 2));
        let mut rows = 0;
        for (t, rec) in reader.records().enumerate() {
            let rec = rec?;
            if t >= manifest.n_hours {
                bail_data!(
                    "{}: more rows than n_hours={}",
                    vpath.display(),
                    manifest.n_hours
                );
            }
            if rec.len() != 2 * n {
                bail_data!(
                    "{}: row {} has {} columns, expected {}",
                    vpath.display(),
                    t + 2,
                    rec.len(),
                    2 * n
                );
            }
            for (k, field) in rec.iter().enumerate() {
                let v: i64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "{}: row {} non-integer value {field:?}",
                        vpath.display(),
                        t + 2
                    ))
                })?;
                values[[t, k / 2, k % 2]] = v as f64;
            }
            rows += 1;
        }
        if rows != manifest.n_hours {
            bail_data!(
                "{}: {rows} rows, manifest says {}",
                vpath.display(),
                manifest.n_hours
            );
        }
        TrafficCube::new(
            values,
            manifest.start_time,
            manifest.region_ids,
            manifest.geometry,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CubeManifest {
    start_time: NaiveDateTime,
    region_ids: Vec<String>,
    n_hours: usize,
    channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<RegionGeometry>,
}

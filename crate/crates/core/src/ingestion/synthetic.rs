//! Synthetic cubes with planted covariate and concept shift.
//!
//! For region `r`, channel `c`, hour `t` in calendar month `m` and segment `s`:
//!
//! ```text
//! base[r,c](t)  = amp[r] * (1 + a * sin(2*pi*(hod + phase[r] + c*lag) / 24)) * (1 + slope[r] * m)
//! value[r,c](t) = max(0, round(base[r,c] + sum_{j != r} mix_s[r][j] * base[j,c]
//!                             + offset_s[r] * active(hod) + N(0, (noise * amp[r])^2)))
//! ```
//!
//! `slope` moves the input distribution over time (covariate shift). A change
//! point swaps the mixing matrix and the offsets. When the offsets are active
//! only at a few hours of the day, the jump cannot be read off the preceding
//! six hours, so the input-to-target relation itself changes (concept shift).

use std::f64::consts::PI;

use chrono::{Duration, Timelike};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cube::{RegionGeometry, TrafficCube, YearMonth};
use crate::error::{bail_input, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    /// Month offset (from the cube start) where the new segment begins.
    pub month: u32,
    /// Row-stochastic `n x n`; off-diagonal mass couples neighbours in.
    pub mixing: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

fn default_start() -> YearMonth {
    YearMonth {
        year: 2020,
        month: 1,
    }
}

fn default_daily_amplitude() -> f64 {
    0.5
}

fn default_lag() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_regions: usize,
    pub n_months: u32,
    #[serde(default = "default_start")]
    pub start: YearMonth,
    pub amplitude: Vec<f64>,
    /// Relative amplitude growth per month.
    #[serde(default)]
    pub slope: Vec<f64>,
    #[serde(default)]
    pub phase_hours: Vec<f64>,
    /// Relative depth of the daily cycle; 0 gives a flat profile.
    #[serde(default = "default_daily_amplitude")]
    pub daily_amplitude: f64,
    /// Dropoffs trail pickups by this many hours.
    #[serde(default = "default_lag")]
    pub dropoff_lag_hours: f64,
    /// Offsets of the first segment.
    #[serde(default)]
    pub initial_offsets: Vec<f64>,
    /// Mixing of the first segment; `None` means no coupling.
    #[serde(default)]
    pub initial_mixing: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub change_points: Vec<ChangePoint>,
    /// Hours of day at which segment offsets apply; `None` means all day.
    #[serde(default)]
    pub offset_hours: Option<Vec<u32>>,
    /// Noise standard deviation as a fraction of each region's amplitude.
    #[serde(default)]
    pub noise_scale: f64,
    /// Regions are laid out row-major on a grid this wide (default: one row).
    #[serde(default)]
    pub grid_cols: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticConfig {
    /// Flat-offset, trend-free, noise-free config with equal amplitudes.
    pub fn uniform(n_regions: usize, n_months: u32, amplitude: f64) -> Self {
        SyntheticConfig {
            n_regions,
            n_months,
            start: default_start(),
            amplitude: vec![amplitude; n_regions],
            slope: vec![0.0; n_regions],
            phase_hours: vec![0.0; n_regions],
            daily_amplitude: default_daily_amplitude(),
            dropoff_lag_hours: default_lag(),
            initial_offsets: vec![0.0; n_regions],
            initial_mixing: None,
            change_points: Vec::new(),
            offset_hours: None,
            noise_scale: 0.0,
            grid_cols: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_regions;
        if n == 0 || self.n_months == 0 {
            bail_input!("synthetic cube needs at least one region and one month");
        }
        if self.amplitude.len() != n {
            bail_input!(
                "amplitude has {} entries for {n} regions",
                self.amplitude.len()
            );
        }
        for (name, v) in [
            ("slope", &self.slope),
            ("phase_hours", &self.phase_hours),
            ("initial_offsets", &self.initial_offsets),
        ] {
            if !v.is_empty() && v.len() != n {
                bail_input!("{name} has {} entries for {n} regions", v.len());
            }
        }
        if !(0.0..=1.0).contains(&self.daily_amplitude) {
            bail_input!("daily_amplitude must lie in [0, 1]");
        }
        if self.noise_scale < 0.0 || !self.noise_scale.is_finite() {
            bail_input!("noise_scale must be finite and non-negative");
        }
        if let Some(hours) = &self.offset_hours {
            if hours.iter().any(|&h| h >= 24) {
                bail_input!("offset_hours must be in 0..24");
            }
        }
        if let Some(mix) = &self.initial_mixing {
            check_mixing(mix, n, "initial mixing")?;
        }
        let mut prev = None;
        for cp in &self.change_points {
            if prev.is_some_and(|p| cp.month <= p) {
                bail_input!("change point months must be strictly increasing");
            }
            if cp.month >= self.n_months {
                bail_input!(
                    "change point month {} beyond {} months",
                    cp.month,
                    self.n_months
                );
            }
            prev = Some(cp.month);
            if cp.offsets.len() != n {
                bail_input!("change point at month {} has mis-sized offsets", cp.month);
            }
            check_mixing(&cp.mixing, n, &format!("mixing at month {}", cp.month))?;
        }
        Ok(())
    }

    fn per_region(v: &[f64], r: usize) -> f64 {
        v.get(r).copied().unwrap_or(0.0)
    }
}

fn check_mixing(mix: &[Vec<f64>], n: usize, what: &str) -> Result<()> {
    if mix.len() != n || mix.iter().any(|row| row.len() != n) {
        bail_input!("{what} must be {n} x {n}");
    }
    for row in mix {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&m| m < 0.0) || (sum - 1.0).abs() > 1e-9 {
            bail_input!("{what} is not row-stochastic");
        }
    }
    Ok(())
}

/// Build the cube described by `cfg`. Bit-deterministic in `(cfg, cfg.seed)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<TrafficCube> {
    cfg.validate()?;
    let n = cfg.n_regions;
    let start = cfg.start.first_hour();
    let end = cfg.start.add_months(cfg.n_months as i64).first_hour();
    let hours = (end - start).num_hours() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let first_month = cfg.start.index();

    let mut values = Array3::<f64>::zeros((hours, n, 2));
    let mut base = vec![[0.0f64; 2]; n];
    for t in 0..hours {
        let ts = start + Duration::hours(t as i64);
        let month = (YearMonth::of(&ts).index() - first_month) as f64;
        let hod = ts.hour() as f64;
        let segment = cfg
            .change_points
            .iter()
            .take_while(|cp| (cp.month as f64) <= month)
            .count();
        let (mixing, offsets) = match segment {
            0 => (cfg.initial_mixing.as_ref(), &cfg.initial_offsets),
            s => {
                let cp = &cfg.change_points[s - 1];
                (Some(&cp.mixing), &cp.offsets)
            }
        };
        let active = cfg
            .offset_hours
            .as_ref()
            .is_none_or(|hs| hs.contains(&(ts.hour())));

        for (r, b) in base.iter_mut().enumerate() {
            let trend = 1.0 + SyntheticConfig::per_region(&cfg.slope, r) * month;
            for (c, slot) in b.iter_mut().enumerate() {
                let phase = hod
                    + SyntheticConfig::per_region(&cfg.phase_hours, r)
                    + c as f64 * cfg.dropoff_lag_hours;
                let daily = 1.0 + cfg.daily_amplitude * (2.0 * PI * phase / 24.0).sin();
                *slot = cfg.amplitude[r] * daily * trend;
            }
        }
        for r in 0..n {
            for c in 0..2 {
                let mut v = base[r][c];
                if let Some(mix) = mixing {
                    v += (0..n)
                        .filter(|&j| j != r)
                        .map(|j| mix[r][j] * base[j][c])
                        .sum::<f64>();
                }
                if active {
                    v += SyntheticConfig::per_region(offsets, r);
                }
                let noise: f64 = unit.sample(&mut rng);
                v += noise * cfg.noise_scale * cfg.amplitude[r];
                values[[t, r, c]] = v.round().max(0.0);
            }
        }
    }

    let cols = cfg.grid_cols.unwrap_or(n).max(1);
    let geometry = RegionGeometry::Grid {
        n_cols: cols,
        cells: (0..n).collect(),
    };
    let ids = (0..n).map(|r| format!("r{r}")).collect();
    TrafficCube::new(values, start, ids, Some(geometry))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_noise_free_is_constant() {
        let mut cfg = SyntheticConfig::uniform(3, 2, 20.0);
        cfg.daily_amplitude = 0.0;
        let cube = generate_synthetic(&cfg).unwrap();
        assert!(cube.values().iter().all(|&v| v == 20.0));
        assert_eq!(cube.n_hours(), (31 + 29) * 24);
    }

    #[test]
    fn same_seed_same_cube() {
        let mut cfg = SyntheticConfig::uniform(4, 2, 30.0);
        cfg.noise_scale = 0.1;
        cfg.seed = 11;
        assert_eq!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&cfg).unwrap()
        );
        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn linear_trend_ratio() {
        // whole days average the sinusoid out, so month means scale by (1 + slope*m)
        let mut cfg = SyntheticConfig::uniform(1, 25, 100.0);
        cfg.slope = vec![0.1];
        let cube = generate_synthetic(&cfg).unwrap();
        let month_mean = |m: u32| {
            let hrs: Vec<usize> = (0..cube.n_hours())
                .filter(|&t| cube.month_of_hour()[t] == m)
                .collect();
            hrs.iter().map(|&t| cube.values()[[t, 0, 0]]).sum::<f64>() / hrs.len() as f64
        };
        let ratio = month_mean(24) / month_mean(0);
        assert!((ratio - 3.4).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn change_point_offsets_apply_at_active_hours_only() {
        let mut cfg = SyntheticConfig::uniform(2, 2, 10.0);
        cfg.daily_amplitude = 0.0;
        cfg.offset_hours = Some(vec![18]);
        cfg.change_points = vec![ChangePoint {
            month: 1,
            mixing: vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            offsets: vec![7.0, 0.0],
        }];
        let cube = generate_synthetic(&cfg).unwrap();
        let v = cube.values();
        let jan = 31 * 24;
        assert_eq!(v[[18, 0, 0]], 10.0);
        assert_eq!(v[[jan + 18, 0, 0]], 17.0);
        assert_eq!(v[[jan + 17, 0, 0]], 10.0);
        // region 1 picks up half of region 0's base
        assert_eq!(v[[jan + 17, 1, 0]], 15.0);
    }

    #[test]
    fn rejects_bad_change_points() {
        let mut cfg = SyntheticConfig::uniform(2, 3, 10.0);
        let cp = |month| ChangePoint {
            month,
            mixing: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            offsets: vec![0.0, 0.0],
        };
        cfg.change_points = vec![cp(2), cp(1)];
        assert!(generate_synthetic(&cfg).is_err());
        cfg.change_points = vec![cp(3)];
        assert!(generate_synthetic(&cfg).is_err());
        let mut bad = cp(1);
        bad.mixing[0] = vec![0.7, 0.7];
        cfg.change_points = vec![bad];
        assert!(generate_synthetic(&cfg).is_err());
    }
}

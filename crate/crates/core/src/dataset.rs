//! Supervised windows, month bookkeeping and scenario splits.

use chrono::NaiveDateTime;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{bail_data, bail_input, Result};
use crate::ingestion::TrafficCube;
pub use crate::ingestion::YearMonth;

/// Hours of history per window.
pub const T_IN: usize = 6;
/// Hours predicted per window.
pub const T_OUT: usize = 1;

/// Std values below this are treated as zero spread.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `[regions, t_in, 2]`, raw counts.
    pub x: Array3<f64>,
    /// `[regions, 2]`, the single target hour.
    pub y: Array2<f64>,
    pub target_time: NaiveDateTime,
    /// Calendar month of the target hour.
    pub env_month: YearMonth,
    /// Months before the scenario's test month; set by [`split_scenario`]
    /// for training and validation samples.
    pub delta_months: Option<u32>,
}

/// One sample per target hour in `[t_in, T)`, in time order. Each sample
/// belongs to its target hour's month.
pub fn make_windows(cube: &TrafficCube, t_in: usize, t_out: usize) -> Result<Vec<WindowSample>> {
    if t_out != 1 {
        bail_input!("only single-step targets are supported (t_out = {t_out})");
    }
    if t_in == 0 {
        bail_input!("t_in must be positive");
    }
    let hours = cube.n_hours();
    if hours < t_in + t_out {
        bail_data!("cube has {hours} hours, need at least {}", t_in + t_out);
    }
    let v = cube.values();
    Ok((t_in..hours)
        .map(|t| {
            // [t_in, N, 2] -> [N, t_in, 2]
            let x = v
                .slice(s![t - t_in..t, .., ..])
                .permuted_axes([1, 0, 2])
                .to_owned();
            let y = v.slice(s![t, .., ..]).to_owned();
            WindowSample {
                x,
                y,
                target_time: cube.time_at(t),
                env_month: cube.month_at(t),
                delta_months: None,
            }
        })
        .collect())
}

/// Calendar months from `sample_month` up to `test_month`.
pub fn delta_months(sample_month: YearMonth, test_month: YearMonth) -> Result<u32> {
    let d = test_month.index() - sample_month.index();
    if d < 1 {
        bail_input!("sample month {sample_month} is not before test month {test_month}");
    }
    Ok(d as u32)
}

fn default_t_in() -> usize {
    T_IN
}

fn default_t_out() -> usize {
    T_OUT
}

fn default_stride() -> usize {
    1
}

/// A (test month, training span) pair. `train_months` counts every month
/// before the test month that the scenario may use, including the final
/// validation month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub test_month: YearMonth,
    pub train_months: u32,
    #[serde(default = "default_t_in")]
    pub t_in: usize,
    #[serde(default = "default_t_out")]
    pub t_out: usize,
    /// Keep every k-th training window (1 keeps all). Pick k coprime with 24,
    /// otherwise some hours of the day never appear as forecast origins.
    #[serde(default = "default_stride")]
    pub train_stride: usize,
}

impl ScenarioSpec {
    pub fn new(test_month: YearMonth, train_months: u32) -> Self {
        ScenarioSpec {
            test_month,
            train_months,
            t_in: T_IN,
            t_out: T_OUT,
            train_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_months < 2 {
            bail_input!("train_months must be at least 2 (one month is held out for validation)");
        }
        if self.train_stride == 0 {
            bail_input!("train_stride must be positive");
        }
        Ok(())
    }

    /// First month of the training span.
    pub fn first_month(&self) -> YearMonth {
        self.test_month.add_months(-(self.train_months as i64))
    }

    /// Position of `month` inside the training span: 0 for the first month,
    /// `train_months - 1` for the validation month, `train_months` for the test month.
    pub fn pool_month(&self, month: YearMonth) -> Option<usize> {
        let k = month.index() - self.first_month().index();
        (0..=self.train_months as i64)
            .contains(&k)
            .then_some(k as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSplit {
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Test = the test month; validation = the month right before it (delta 1);
/// train = deltas 2..=train_months. Windows are taken in time order.
pub fn split_scenario(samples: Vec<WindowSample>, spec: &ScenarioSpec) -> Result<ScenarioSplit> {
    spec.validate()?;
    let earliest = samples.iter().map(|s| s.env_month).min();
    match earliest {
        Some(m) if m <= spec.first_month() => {}
        Some(m) => bail_data!(
            "scenario needs data from {} but samples start at {m}",
            spec.first_month()
        ),
        None => bail_data!("no samples to split"),
    }
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut s in samples {
        let d = spec.test_month.index() - s.env_month.index();
        match d {
            0 => test.push(s),
            1 => {
                s.delta_months = Some(1);
                validation.push(s);
            }
            d if d >= 2 && d <= spec.train_months as i64 => {
                s.delta_months = Some(d as u32);
                train.push(s);
            }
            _ => {}
        }
    }
    if spec.train_stride > 1 {
        train = train.into_iter().step_by(spec.train_stride).collect();
    }
    for (name, part) in [
        ("train", &train),
        ("validation", &validation),
        ("test", &test),
    ] {
        if part.is_empty() {
            bail_data!("{name} split is empty for test month {}", spec.test_month);
        }
    }
    Ok(ScenarioSplit {
        train,
        validation,
        test,
    })
}

/// Per-(region, channel) z-scoring fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// `[regions, 2]`
    pub mean: Array2<f64>,
    /// `[regions, 2]`, already clamped.
    pub std: Array2<f64>,
}

impl Normalizer {
    pub fn fit(train: &[WindowSample]) -> Result<Self> {
        let Some(first) = train.first() else {
            bail_data!("cannot fit a normalizer on no samples");
        };
        let (n, t, _) = first.x.dim();
        let count = (train.len() * t) as f64;
        let mut mean = Array2::<f64>::zeros((n, 2));
        for s in train {
            mean += &s.x.sum_axis(Axis(1));
        }
        mean /= count;
        let mut var = Array2::<f64>::zeros((n, 2));
        for s in train {
            for r in 0..n {
                for k in 0..t {
                    for c in 0..2 {
                        let d = s.x[[r, k, c]] - mean[[r, c]];
                        var[[r, c]] += d * d;
                    }
                }
            }
        }
        let std = var.mapv(|v| {
            let sd = (v / count).sqrt();
            if sd < MIN_STD {
                1.0
            } else {
                sd
            }
        });
        Ok(Normalizer { mean, std })
    }

    pub fn identity(n_regions: usize) -> Self {
        Normalizer {
            mean: Array2::zeros((n_regions, 2)),
            std: Array2::ones((n_regions, 2)),
        }
    }

    /// `[regions, t, 2]` window to model space.
    pub fn apply_window(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let mut out = x.to_owned();
        for mut slice in out.axis_iter_mut(Axis(1)) {
            slice -= &self.mean;
            slice /= &self.std;
        }
        out
    }

    /// `[regions, 2]` hour to model space.
    pub fn apply(&self, y: ArrayView2<f64>) -> Array2<f64> {
        (&y - &self.mean) / &self.std
    }

    /// `[regions, 2]` model output back to counts.
    pub fn invert(&self, y: ArrayView2<f64>) -> Array2<f64> {
        &y * &self.std + &self.mean
    }

    pub fn invert_window(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let mut out = x.to_owned();
        for mut slice in out.axis_iter_mut(Axis(1)) {
            slice *= &self.std;
            slice += &self.mean;
        }
        out
    }
}

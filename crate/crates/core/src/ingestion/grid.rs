use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Result};

/// Equirectangular scale: kilometres per degree of latitude.
pub const KM_PER_DEGREE: f64 = 111.32;

/// Regular lat/lon grid anchored at its southwest corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// East-west cell extent.
    pub cell_width_km: f64,
    /// North-south cell extent.
    pub cell_height_km: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_width_km > 0.0 && self.cell_height_km > 0.0) {
            bail_input!("grid cells must have positive size");
        }
        if self.n_rows * self.n_cols == 0 {
            bail_input!("grid must contain at least one cell");
        }
        check_coords(self.origin_lat, self.origin_lon)
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    /// Local (north, east) offset in km from the origin.
    pub fn offset_km(&self, lat: f64, lon: f64) -> (f64, f64) {
        let north = (lat - self.origin_lat) * KM_PER_DEGREE;
        let east = (lon - self.origin_lon) * KM_PER_DEGREE * self.origin_lat.to_radians().cos();
        (north, east)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridCell {
    Inside(usize),
    OutOfBounds,
}

fn check_coords(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        bail_input!("coordinates ({lat}, {lon}) out of range");
    }
    Ok(())
}

/// Cell index `row * n_cols + col`. Points on an interior boundary go to the
/// higher-index cell; the north and east outer edges are outside.
pub fn assign_grid_cell(lat: f64, lon: f64, spec: &GridSpec) -> Result<GridCell> {
    check_coords(lat, lon)?;
    let (north, east) = spec.offset_km(lat, lon);
    let row = (north / spec.cell_height_km).floor();
    let col = (east / spec.cell_width_km).floor();
    if row < 0.0 || col < 0.0 || row >= spec.n_rows as f64 || col >= spec.n_cols as f64 {
        return Ok(GridCell::OutOfBounds);
    }
    Ok(GridCell::Inside(row as usize * spec.n_cols + col as usize))
}

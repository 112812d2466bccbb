//! Raw trip records to hourly region x channel cubes.
//!
//! Channel 0 counts pickups (departures) and channel 1 counts dropoffs
//! (arrivals). Regions come either from a regular lat/lon grid or from an
//! explicit zone table. [`synthetic`] produces cubes with planted shifts for
//! controlled experiments.

mod cube;
mod grid;
pub mod synthetic;
mod trips;

pub use cube::{RegionGeometry, TrafficCube, YearMonth, CHANNELS};
pub use grid::{assign_grid_cell, GridCell, GridSpec, KM_PER_DEGREE};
pub use synthetic::{generate_synthetic, ChangePoint, SyntheticConfig};
pub use trips::{
    aggregate_trips, filter_regions, read_trip_csv, DropTally, HourWindow, Location, RegionMapper,
    TripRecord, ZoneMap,
};

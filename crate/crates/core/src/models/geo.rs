use ndarray::Array2;

use crate::envpool::AdjacencyMatrix;
use crate::ingestion::{RegionGeometry, KM_PER_DEGREE};

/// Row-normalized 0/1 adjacency with self-loops, from region geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoAdjacency {
    values: Array2<f64>,
}

impl GeoAdjacency {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn to_adjacency(&self) -> AdjacencyMatrix {
        AdjacencyMatrix::from_row_stochastic(self.values.clone())
            .expect("row-normalized by construction")
    }
}

/// Edges join 8-neighbour grid cells, or centroids within `threshold_km`
/// (equirectangular distance). Without geometry only self-loops remain.
pub fn build_geo_adjacency(
    n: usize,
    geometry: Option<&RegionGeometry>,
    threshold_km: f64,
) -> GeoAdjacency {
    let mut a = Array2::<f64>::eye(n);
    match geometry {
        Some(RegionGeometry::Grid { n_cols, cells }) => {
            let pos = |i: usize| ((cells[i] / n_cols) as i64, (cells[i] % n_cols) as i64);
            for i in 0..n {
                for j in 0..n {
                    let ((ri, ci), (rj, cj)) = (pos(i), pos(j));
                    if (ri - rj).abs() <= 1 && (ci - cj).abs() <= 1 {
                        a[[i, j]] = 1.0;
                    }
                }
            }
        }
        Some(RegionGeometry::Centroids { lat_lon }) => {
            for i in 0..n {
                for j in 0..n {
                    let (la, lo) = lat_lon[i];
                    let (lb, lob) = lat_lon[j];
                    let mean_lat = ((la + lb) / 2.0).to_radians();
                    let dy = (la - lb) * KM_PER_DEGREE;
                    let dx = (lo - lob) * KM_PER_DEGREE * mean_lat.cos();
                    if (dx * dx + dy * dy).sqrt() <= threshold_km {
                        a[[i, j]] = 1.0;
                    }
                }
            }
        }
        None => {}
    }
    for mut row in a.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    GeoAdjacency { values: a }
}

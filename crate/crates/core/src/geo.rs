//! Planar geospatial primitives: grid-cell mapping, distances and
//! point-to-segment distance.
//!
//! Distances use the equirectangular approximation
//! `R * sqrt(dlat^2 + (cos(lat_mean) * dlon)^2)` with `R = 6_371_000` m.
//! Over the sub-degree extents this crate works with, the error against a
//! geodesic is far below the resolution of anything downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub const fn new(lon: f64, lat: f64) -> Self {
        GeoPoint { lon, lat }
    }

    /// Checks the coordinate ranges.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "coordinate ({}, {}) out of range",
                self.lon, self.lat
            )))
        }
    }

    pub fn midpoint(&self, other: &GeoPoint) -> GeoPoint {
        GeoPoint::new(
            0.5 * (self.lon + other.lon),
            0.5 * (self.lat + other.lat),
        )
    }

    /// Linear interpolation in lon/lat space.
    pub fn lerp(&self, other: &GeoPoint, tau: f64) -> GeoPoint {
        GeoPoint::new(
            self.lon + tau * (other.lon - self.lon),
            self.lat + tau * (other.lat - self.lat),
        )
    }

    /// Point displaced by the given east/north offsets in meters.
    pub fn offset_m(&self, east_m: f64, north_m: f64) -> GeoPoint {
        let dlat = north_m / EARTH_RADIUS_M;
        let dlon = east_m / (EARTH_RADIUS_M * self.lat.to_radians().cos());
        GeoPoint::new(self.lon + dlon.to_degrees(), self.lat + dlat.to_degrees())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoSegment {
    pub a: GeoPoint,
    pub b: GeoPoint,
}

impl GeoSegment {
    pub const fn new(a: GeoPoint, b: GeoPoint) -> Self {
        GeoSegment { a, b }
    }
}

/// Grid cell coordinates: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: u32,
    pub y: u32,
}

impl Cell {
    pub const fn new(x: u32, y: u32) -> Self {
        Cell { x, y }
    }
}

/// Uniform `rows x cols` partition of a lon/lat bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMap {
    /// `(lon_min, lat_min, lon_max, lat_max)` in degrees.
    pub bbox: [f64; 4],
    pub rows: u32,
    pub cols: u32,
}

impl Default for GridMap {
    /// The Beijing grid: 72 rows by 68 columns of roughly 1 km cells.
    fn default() -> Self {
        GridMap {
            bbox: [116.10, 39.69, 116.71, 40.18],
            rows: 72,
            cols: 68,
        }
    }
}

impl GridMap {
    pub fn new(bbox: [f64; 4], rows: u32, cols: u32) -> Result<Self> {
        let grid = GridMap { bbox, rows, cols };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let [lon_min, lat_min, lon_max, lat_max] = self.bbox;
        if !(lon_min < lon_max && lat_min < lat_max) {
            return Err(Error::InvalidArgument(format!(
                "degenerate bounding box {:?}",
                self.bbox
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument("grid needs at least one row and column".into()));
        }
        GeoPoint::new(lon_min, lat_min).validate()?;
        GeoPoint::new(lon_max, lat_max).validate()
    }

    pub fn cell_width_deg(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]) / self.cols as f64
    }

    pub fn cell_height_deg(&self) -> f64 {
        (self.bbox[3] - self.bbox[1]) / self.rows as f64
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        let [lon_min, lat_min, lon_max, lat_max] = self.bbox;
        (lon_min..=lon_max).contains(&p.lon) && (lat_min..=lat_max).contains(&p.lat)
    }

    /// Maps a point to its cell. Points on the maximum edges clamp into the
    /// last row/column so the mapping is total over the closed box.
    pub fn to_cell(&self, p: &GeoPoint) -> Result<Cell> {
        if !self.contains(p) {
            return Err(Error::OutOfBounds {
                lon: p.lon,
                lat: p.lat,
            });
        }
        let fx = ((p.lon - self.bbox[0]) / self.cell_width_deg()).floor() as u32;
        let fy = ((p.lat - self.bbox[1]) / self.cell_height_deg()).floor() as u32;
        Ok(Cell::new(fx.min(self.cols - 1), fy.min(self.rows - 1)))
    }

    pub fn cell_center(&self, cell: Cell) -> GeoPoint {
        GeoPoint::new(
            self.bbox[0] + (cell.x as f64 + 0.5) * self.cell_width_deg(),
            self.bbox[1] + (cell.y as f64 + 0.5) * self.cell_height_deg(),
        )
    }

    pub fn num_cells(&self) -> usize {
        self.rows as usize * self.cols as usize
    }
}

/// Equirectangular distance in meters.
pub fn distance_m(p: &GeoPoint, q: &GeoPoint) -> f64 {
    let lat_mean = (0.5 * (p.lat + q.lat)).to_radians();
    let dlat = (q.lat - p.lat).to_radians();
    let dlon = (q.lon - p.lon).to_radians() * lat_mean.cos();
    EARTH_RADIUS_M * (dlat * dlat + dlon * dlon).sqrt()
}

/// Distance from `p` to the closest point of the closed segment `s`.
///
/// The closest point is located in a local plane projected at the mean
/// latitude of the three points; the returned value is `distance_m` to that
/// point, so a degenerate segment yields exactly `distance_m(p, s.a)`.
pub fn point_to_segment_m(p: &GeoPoint, s: &GeoSegment) -> f64 {
    let lat0 = ((p.lat + s.a.lat + s.b.lat) / 3.0).to_radians();
    let kx = lat0.cos();
    let (ax, ay) = (s.a.lon * kx, s.a.lat);
    let (bx, by) = (s.b.lon * kx, s.b.lat);
    let (px, py) = (p.lon * kx, p.lat);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let da = distance_m(p, &s.a);
    if len2 == 0.0 {
        return da;
    }
    let tau = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    let closest = s.a.lerp(&s.b, tau);
    distance_m(p, &closest).min(da).min(distance_m(p, &s.b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_corners() {
        let g = GridMap::default();
        assert_eq!(g.to_cell(&GeoPoint::new(116.10, 39.69)).unwrap(), Cell::new(0, 0));
        assert_eq!(g.to_cell(&GeoPoint::new(116.71, 40.18)).unwrap(), Cell::new(67, 71));
    }

    #[test]
    fn grid_interior_matches_partition_formula() {
        let g = GridMap::default();
        let p = GeoPoint::new(116.405, 39.935);
        let x = ((116.405f64 - 116.10) / (0.61 / 68.0)).floor() as u32;
        let y = ((39.935f64 - 39.69) / (0.49 / 72.0)).floor() as u32;
        assert_eq!((x, y), (34, 36));
        assert_eq!(g.to_cell(&p).unwrap(), Cell::new(x, y));
    }

    #[test]
    fn outside_is_rejected() {
        let g = GridMap::default();
        assert!(matches!(
            g.to_cell(&GeoPoint::new(116.0, 39.8)),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(g.to_cell(&GeoPoint::new(116.2, 40.19)).is_err());
    }

    #[test]
    fn dense_sample_is_surjective() {
        let g = GridMap::new([0.0, 0.0, 1.0, 1.0], 7, 5).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..=200 {
            for j in 0..=200 {
                let p = GeoPoint::new(i as f64 / 200.0, j as f64 / 200.0);
                let c = g.to_cell(&p).unwrap();
                assert!(c.x < 5 && c.y < 7);
                seen.insert(c);
            }
        }
        assert_eq!(seen.len(), 35);
    }

    #[test]
    fn invalid_grids() {
        assert!(GridMap::new([1.0, 0.0, 1.0, 1.0], 2, 2).is_err());
        assert!(GridMap::new([0.0, 0.0, 1.0, 1.0], 0, 2).is_err());
    }

    #[test]
    fn one_degree_of_latitude() {
        let d = distance_m(&GeoPoint::new(116.3, 39.9), &GeoPoint::new(116.3, 40.9));
        assert!((d - 111_194.9).abs() < 0.1, "{d}");
        assert_eq!(distance_m(&GeoPoint::new(1.0, 2.0), &GeoPoint::new(1.0, 2.0)), 0.0);
    }

    #[test]
    fn point_on_segment_and_degenerate() {
        let a = GeoPoint::new(116.30, 39.90);
        let b = GeoPoint::new(116.32, 39.91);
        let s = GeoSegment::new(a, b);
        assert!(point_to_segment_m(&a.midpoint(&b), &s) < 1e-6);
        let p = GeoPoint::new(116.4, 39.95);
        let deg = GeoSegment::new(a, a);
        assert_eq!(point_to_segment_m(&p, &deg), distance_m(&p, &a));
    }

    #[test]
    fn perpendicular_offset_matches_dense_sampling() {
        let a = GeoPoint::new(116.30, 39.90);
        let b = GeoPoint::new(116.34, 39.93);
        let s = GeoSegment::new(a, b);
        // 400 m to the north-west of the midpoint, roughly perpendicular.
        let p = a.midpoint(&b).offset_m(-240.0, 320.0);
        let n = 1_000_000;
        let brute = (0..=n)
            .map(|i| distance_m(&p, &a.lerp(&b, i as f64 / n as f64)))
            .fold(f64::INFINITY, f64::min);
        let dist = point_to_segment_m(&p, &s);
        assert!((dist - brute).abs() < 0.1, "{dist} vs {brute}");
    }

    fn point() -> impl Strategy<Value = GeoPoint> {
        (116.0f64..116.8, 39.6f64..40.3).prop_map(|(lon, lat)| GeoPoint::new(lon, lat))
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_nonnegative(p in point(), q in point()) {
            let d = distance_m(&p, &q);
            prop_assert!(d >= 0.0 && d.is_finite());
            prop_assert_eq!(d, distance_m(&q, &p));
        }

        #[test]
        fn segment_distance_bounded_by_endpoints(p in point(), a in point(), b in point()) {
            let d = point_to_segment_m(&p, &GeoSegment::new(a, b));
            prop_assert!(d >= 0.0 && d.is_finite());
            prop_assert!(d <= distance_m(&p, &a).min(distance_m(&p, &b)));
        }
    }
}

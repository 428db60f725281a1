//! Regular latitude-longitude grids and multi-channel fields.
//!
//! Coordinates refer to cell centers. Node `(i, j)` sits at
//! `lat0 + i * dlat`, `lon0 + j * dlon`. Field data is stored row-major with
//! channels innermost, the same layout as the EDF1 container.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed when a coordinate lands on the grid edge after rounding.
const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(lat0: f64, lon0: f64, dlat: f64, dlon: f64, height: usize, width: usize) -> Result<Self> {
        let grid = Grid {
            lat0,
            lon0,
            dlat,
            dlon,
            height,
            width,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Argument(format!(
                "grid must be non-empty, got {}x{}",
                self.height, self.width
            )));
        }
        let finite = [self.lat0, self.lon0, self.dlat, self.dlon]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.dlat == 0.0 || self.dlon == 0.0 {
            return Err(Error::Argument(
                "grid origin and spacing must be finite with nonzero spacing".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lat(&self, i: usize) -> f64 {
        self.lat0 + i as f64 * self.dlat
    }

    pub fn lon(&self, j: usize) -> f64 {
        self.lon0 + j as f64 * self.dlon
    }

    /// Fractional (row, column) index of a coordinate, erroring outside the
    /// node bounding box.
    pub fn fractional_index(&self, lat: f64, lon: f64) -> Result<(f64, f64)> {
        let fi = (lat - self.lat0) / self.dlat;
        let fj = (lon - self.lon0) / self.dlon;
        let max_i = (self.height - 1) as f64;
        let max_j = (self.width - 1) as f64;
        if !(fi >= -EDGE_TOL && fi <= max_i + EDGE_TOL && fj >= -EDGE_TOL && fj <= max_j + EDGE_TOL) {
            return Err(Error::Domain(format!(
                "point ({lat}, {lon}) lies outside the grid bounding box"
            )));
        }
        Ok((fi.clamp(0.0, max_i), fj.clamp(0.0, max_j)))
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.fractional_index(lat, lon).is_ok()
    }

    /// True when every node of `other` falls inside this grid's bounding box.
    pub fn covers(&self, other: &Grid) -> bool {
        let corners = [
            (other.lat(0), other.lon(0)),
            (other.lat(0), other.lon(other.width - 1)),
            (other.lat(other.height - 1), other.lon(0)),
            (other.lat(other.height - 1), other.lon(other.width - 1)),
        ];
        corners.iter().all(|&(la, lo)| self.contains(la, lo))
    }

    /// Latitude and longitude extent `(min_lat, max_lat, min_lon, max_lon)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (a, b) = (self.lat(0), self.lat(self.height - 1));
        let (c, d) = (self.lon(0), self.lon(self.width - 1));
        (a.min(b), a.max(b), c.min(d), c.max(d))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub unit: String,
}

impl Channel {
    pub fn new(name: impl Into<String>, unit: impl Into<String>) -> Self {
        Channel {
            name: name.into(),
            unit: unit.into(),
        }
    }
}

/// A C-channel scalar field on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    channels: Vec<Channel>,
    data: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, channels: Vec<Channel>, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if channels.is_empty() {
            return Err(Error::Argument("field needs at least one channel".into()));
        }
        for (k, ch) in channels.iter().enumerate() {
            if channels[..k].iter().any(|c| c.name == ch.name) {
                return Err(Error::Argument(format!("duplicate channel name {:?}", ch.name)));
            }
        }
        let expected = grid.len() * channels.len();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "field data has {} values, expected {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite field value at index {pos}")));
        }
        Ok(Field { grid, channels, data })
    }

    pub fn zeros(grid: Grid, channels: Vec<Channel>) -> Result<Self> {
        let n = grid.len() * channels.len();
        Field::new(grid, channels, vec![0.0; n])
    }

    /// Build from channel-major planes (`planes[c][i * W + j]`).
    pub fn from_planes(grid: Grid, channels: Vec<Channel>, planes: &[Vec<f64>]) -> Result<Self> {
        if planes.len() != channels.len() {
            return Err(Error::Shape(format!(
                "{} planes for {} channels",
                planes.len(),
                channels.len()
            )));
        }
        let c = channels.len();
        let mut data = vec![0.0; grid.len() * c];
        for (k, plane) in planes.iter().enumerate() {
            if plane.len() != grid.len() {
                return Err(Error::Shape(format!(
                    "plane {k} has {} values, expected {}",
                    plane.len(),
                    grid.len()
                )));
            }
            for (p, v) in plane.iter().enumerate() {
                data[p * c + k] = *v;
            }
        }
        Field::new(grid, channels, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.grid.width + j) * self.channels.len() + c]
    }

    /// Copy one channel out as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        let nc = self.channels.len();
        self.data.iter().skip(c).step_by(nc).copied().collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.num_channels()).map(|c| self.plane(c)).collect()
    }

    /// Same grid and channels, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Field> {
        Field::new(self.grid, self.channels.clone(), data)
    }

    /// Apply `f(value, channel)` to every value.
    pub fn map(&self, mut f: impl FnMut(f64, usize) -> f64) -> Result<Field> {
        let nc = self.channels.len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(k, &v)| f(v, k % nc))
            .collect();
        self.with_data(data)
    }

    /// Elementwise combination of two fields on the same grid and channels.
    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_compatible(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        self.with_data(data)
    }

    pub fn check_compatible(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Argument("fields live on different grids".into()));
        }
        if self.channels.len() != other.channels.len() {
            return Err(Error::Argument(format!(
                "channel count mismatch: {} vs {}",
                self.channels.len(),
                other.channels.len()
            )));
        }
        Ok(())
    }

    /// Channel-wise concatenation on a shared grid.
    pub fn concat(parts: &[&Field]) -> Result<Field> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        let grid = first.grid;
        if parts.iter().any(|p| p.grid != grid) {
            return Err(Error::Argument("concatenated fields must share a grid".into()));
        }
        let channels: Vec<Channel> = parts.iter().flat_map(|p| p.channels.iter().cloned()).collect();
        let total = channels.len();
        let mut data = Vec::with_capacity(grid.len() * total);
        for p in 0..grid.len() {
            for part in parts {
                let nc = part.channels.len();
                data.extend_from_slice(&part.data[p * nc..(p + 1) * nc]);
            }
        }
        Field::new(grid, channels, data)
    }

    /// Keep the listed channels, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Field> {
        let nc = self.channels.len();
        if let Some(&bad) = indices.iter().find(|&&c| c >= nc) {
            return Err(Error::Argument(format!("channel index {bad} out of range")));
        }
        let channels = indices.iter().map(|&c| self.channels[c].clone()).collect();
        let mut data = Vec::with_capacity(self.grid.len() * indices.len());
        for p in 0..self.grid.len() {
            data.extend(indices.iter().map(|&c| self.data[p * nc + c]));
        }
        Field::new(self.grid, channels, data)
    }

    /// Round every value through `f32`, the on-disk precision.
    pub fn quantized(&self) -> Field {
        Field {
            grid: self.grid,
            channels: self.channels.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

/// Bilinear blend of the four nodes around `(lat, lon)`.
pub fn bilinear_sample(field: &Field, lat: f64, lon: f64, channel: usize) -> Result<f64> {
    if channel >= field.num_channels() {
        return Err(Error::Argument(format!("channel {channel} out of range")));
    }
    let (fi, fj) = field.grid.fractional_index(lat, lon)?;
    Ok(blend(field, fi, fj, channel))
}

fn blend(field: &Field, fi: f64, fj: f64, c: usize) -> f64 {
    let g = &field.grid;
    let i0 = (fi.floor() as usize).min(g.height.saturating_sub(2));
    let j0 = (fj.floor() as usize).min(g.width.saturating_sub(2));
    let (i1, j1) = ((i0 + 1).min(g.height - 1), (j0 + 1).min(g.width - 1));
    let t = fi - i0 as f64;
    let u = fj - j0 as f64;
    let v00 = field.get(i0, j0, c);
    let v01 = field.get(i0, j1, c);
    let v10 = field.get(i1, j0, c);
    let v11 = field.get(i1, j1, c);
    (1.0 - t) * (1.0 - u) * v00 + (1.0 - t) * u * v01 + t * (1.0 - u) * v10 + t * u * v11
}

/// Resample a field onto `target` by bilinear interpolation at every node.
pub fn upsample_bilinear(field: &Field, target: &Grid) -> Result<Field> {
    target.validate()?;
    if !field.grid.covers(target) {
        return Err(Error::Domain(
            "target grid extends beyond the source grid's coverage".into(),
        ));
    }
    let nc = field.num_channels();
    let mut data = Vec::with_capacity(target.len() * nc);
    for i in 0..target.height {
        for j in 0..target.width {
            let (fi, fj) = field.grid.fractional_index(target.lat(i), target.lon(j))?;
            data.extend((0..nc).map(|c| blend(field, fi, fj, c)));
        }
    }
    Field::new(*target, field.channels.clone(), data)
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn new(channels: Vec<String>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if channels.len() != mean.len() || channels.len() != std.len() {
            return Err(Error::Config("stats vectors differ in length".into()));
        }
        if let Some(k) = std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "standard deviation of channel {:?} must be positive",
                channels[k]
            )));
        }
        Ok(StandardizationStats { channels, mean, std })
    }

    /// (mean, std) for a channel by name.
    pub fn lookup(&self, name: &str) -> Result<(f64, f64)> {
        self.channels
            .iter()
            .position(|c| c == name)
            .map(|k| (self.mean[k], self.std[k]))
            .ok_or_else(|| Error::Config(format!("no standardization stats for channel {name:?}")))
    }

    fn per_channel(&self, field: &Field) -> Result<Vec<(f64, f64)>> {
        field.channels.iter().map(|c| self.lookup(&c.name)).collect()
    }
}

pub fn standardize(field: &Field, stats: &StandardizationStats) -> Result<Field> {
    let ms = stats.per_channel(field)?;
    field.map(|v, c| (v - ms[c].0) / ms[c].1)
}

pub fn destandardize(field: &Field, stats: &StandardizationStats) -> Result<Field> {
    let ms = stats.per_channel(field)?;
    field.map(|v, c| v * ms[c].1 + ms[c].0)
}

/// Statistics pooled over every grid point of every field.
pub fn compute_stats(fields: &[Field]) -> Result<StandardizationStats> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Argument("cannot compute stats of an empty sequence".into()))?;
    let names: Vec<String> = first.channels.iter().map(|c| c.name.clone()).collect();
    for f in fields {
        let these: Vec<&str> = f.channels.iter().map(|c| c.name.as_str()).collect();
        if these != names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Argument("fields have inconsistent channels".into()));
        }
    }
    let nc = names.len();
    let mut count = 0usize;
    let mut sum = vec![0.0; nc];
    for f in fields {
        count += f.grid.len();
        for (k, v) in f.data.iter().enumerate() {
            sum[k % nc] += v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; nc];
    for f in fields {
        for (k, v) in f.data.iter().enumerate() {
            let d = v - mean[k % nc];
            sq[k % nc] += d * d;
        }
    }
    let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    if let Some(k) = std.iter().position(|&s| s <= 0.0) {
        return Err(Error::Config(format!(
            "channel {:?} has zero variance",
            names[k]
        )));
    }
    StandardizationStats::new(names, mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_grid(h: usize, w: usize) -> Grid {
        Grid::new(10.0, 20.0, 1.0, 1.0, h, w).unwrap()
    }

    fn one_channel(h: usize, w: usize, data: Vec<f64>) -> Field {
        Field::new(unit_grid(h, w), vec![Channel::new("t2m", "K")], data).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate_shapes() {
        assert!(Grid::new(0.0, 0.0, 1.0, 1.0, 0, 4).is_err());
        assert!(Grid::new(0.0, 0.0, 1.0, 1.0, 1, 4).is_ok());
        assert!(Grid::new(0.0, 0.0, 0.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn sample_at_node_is_exact() {
        let data: Vec<f64> = (0..12).map(|k| (k as f64).sin() * 3.7).collect();
        let f = one_channel(3, 4, data);
        for i in 0..3 {
            for j in 0..4 {
                let v = bilinear_sample(&f, f.grid().lat(i), f.grid().lon(j), 0).unwrap();
                assert_eq!(v, f.get(i, j, 0));
            }
        }
    }

    #[test]
    fn sample_constant_field() {
        let f = one_channel(4, 4, vec![2.5; 16]);
        assert_relative_eq!(bilinear_sample(&f, 11.3, 22.7, 0).unwrap(), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn sample_cell_center() {
        let f = one_channel(2, 2, vec![0.0, 0.0, 0.0, 4.0]);
        assert_eq!(bilinear_sample(&f, 10.5, 20.5, 0).unwrap(), 1.0);
    }

    #[test]
    fn sample_outside_is_domain_error() {
        let f = one_channel(2, 2, vec![0.0; 4]);
        assert!(matches!(bilinear_sample(&f, 9.0, 20.5, 0), Err(Error::Domain(_))));
        assert!(matches!(bilinear_sample(&f, 10.5, 21.5, 0), Err(Error::Domain(_))));
        assert!(matches!(bilinear_sample(&f, 10.5, 20.5, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn negative_dlat_grid_samples() {
        let g = Grid::new(50.0, 0.0, -1.0, 1.0, 2, 2).unwrap();
        let f = Field::new(g, vec![Channel::new("x", "1")], vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&f, 49.5, 0.5, 0).unwrap(), 1.0);
        assert!(bilinear_sample(&f, 50.5, 0.5, 0).is_err());
    }

    #[test]
    fn upsample_identity_and_center() {
        let f = one_channel(2, 2, vec![1.0, 2.0, 3.0, 6.0]);
        let same = upsample_bilinear(&f, f.grid()).unwrap();
        assert_eq!(same, f);

        let target = Grid::new(10.0, 20.0, 0.5, 0.5, 3, 3).unwrap();
        let up = upsample_bilinear(&f, &target).unwrap();
        assert_relative_eq!(up.get(1, 1, 0), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn upsample_constant() {
        let f = one_channel(3, 3, vec![-4.0; 9]);
        let target = Grid::new(10.2, 20.1, 0.3, 0.35, 6, 5).unwrap();
        let up = upsample_bilinear(&f, &target).unwrap();
        assert!(up.data().iter().all(|&v| (v + 4.0).abs() < 1e-12));
    }

    #[test]
    fn upsample_beyond_coverage_fails() {
        let f = one_channel(2, 2, vec![0.0; 4]);
        let target = Grid::new(9.5, 20.0, 0.5, 0.5, 3, 3).unwrap();
        assert!(matches!(upsample_bilinear(&f, &target), Err(Error::Domain(_))));
    }

    #[test]
    fn standardize_formula_and_identity_stats() {
        let f = one_channel(2, 2, vec![14.0, 10.0, 12.0, 8.0]);
        let stats = StandardizationStats::new(vec!["t2m".into()], vec![10.0], vec![2.0]).unwrap();
        let s = standardize(&f, &stats).unwrap();
        assert_eq!(s.data(), &[2.0, 0.0, 1.0, -1.0]);

        let unit = StandardizationStats::new(vec!["t2m".into()], vec![0.0], vec![1.0]).unwrap();
        assert_eq!(standardize(&f, &unit).unwrap(), f);
    }

    #[test]
    fn missing_channel_stats_is_config_error() {
        let f = one_channel(2, 2, vec![0.0; 4]);
        let stats = StandardizationStats::new(vec!["msl".into()], vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(standardize(&f, &stats), Err(Error::Config(_))));
    }

    #[test]
    fn stats_of_plus_minus_one() {
        let f = one_channel(2, 2, vec![-1.0, 1.0, -1.0, 1.0]);
        let stats = compute_stats(&[f]).unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn stats_of_constant_field_fail() {
        let f = one_channel(2, 2, vec![3.0; 4]);
        assert!(matches!(compute_stats(&[f]), Err(Error::Config(_))));
        assert!(compute_stats(&[]).is_err());
    }

    #[test]
    fn restandardized_stats_are_unit() {
        let fields: Vec<Field> = (0..3)
            .map(|s| {
                let data = (0..20).map(|k| ((k * 7 + s * 3) as f64).cos() * 5.0 + 280.0).collect();
                one_channel(4, 5, data)
            })
            .collect();
        let stats = compute_stats(&fields).unwrap();
        let std_fields: Vec<Field> = fields.iter().map(|f| standardize(f, &stats).unwrap()).collect();
        let again = compute_stats(&std_fields).unwrap();
        assert!(again.mean[0].abs() < 1e-9);
        assert!((again.std[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn field_rejects_duplicates_and_bad_lengths() {
        let g = unit_grid(2, 2);
        let dup = vec![Channel::new("a", "1"), Channel::new("a", "1")];
        assert!(Field::new(g, dup, vec![0.0; 8]).is_err());
        assert!(Field::new(g, vec![Channel::new("a", "1")], vec![0.0; 3]).is_err());
        assert!(Field::new(g, vec![Channel::new("a", "1")], vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn concat_and_select_roundtrip() {
        let g = unit_grid(2, 3);
        let a = Field::new(g, vec![Channel::new("a", "1")], (0..6).map(f64::from).collect()).unwrap();
        let b = Field::new(
            g,
            vec![Channel::new("b", "1"), Channel::new("c", "1")],
            (0..12).map(|k| -(k as f64)).collect(),
        )
        .unwrap();
        let ab = Field::concat(&[&a, &b]).unwrap();
        assert_eq!(ab.num_channels(), 3);
        assert_eq!(ab.select(&[0]).unwrap(), a);
        assert_eq!(ab.select(&[1, 2]).unwrap(), b);
        assert_eq!(Field::from_planes(g, b.channels().to_vec(), &b.planes()).unwrap(), b);
    }

    proptest! {
        #[test]
        fn bilinear_is_linear(
            vals in proptest::collection::vec(-10.0f64..10.0, 32),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            fi in 0.0f64..3.0,
            fj in 0.0f64..3.0,
        ) {
            let f = one_channel(4, 4, vals[..16].to_vec());
            let g = one_channel(4, 4, vals[16..].to_vec());
            let combo = f.zip_with(&g, |x, y| a * x + b * y).unwrap();
            let (lat, lon) = (10.0 + fi, 20.0 + fj);
            let lhs = bilinear_sample(&combo, lat, lon, 0).unwrap();
            let rhs = a * bilinear_sample(&f, lat, lon, 0).unwrap() + b * bilinear_sample(&g, lat, lon, 0).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn upsample_commutes_with_affine(
            vals in proptest::collection::vec(-10.0f64..10.0, 9),
            scale in 0.1f64..5.0,
            shift in -100.0f64..100.0,
        ) {
            let f = one_channel(3, 3, vals);
            let target = Grid::new(10.25, 20.5, 0.4, 0.3, 5, 5).unwrap();
            let a = upsample_bilinear(&f.map(|v, _| scale * v + shift).unwrap(), &target).unwrap();
            let b = upsample_bilinear(&f, &target).unwrap().map(|v, _| scale * v + shift).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn standardize_roundtrip(
            vals in proptest::collection::vec(-1e4f64..1e4, 8),
            mean in -500.0f64..500.0,
            std in 0.01f64..100.0,
        ) {
            let f = one_channel(2, 4, vals);
            let stats = StandardizationStats::new(vec!["t2m".into()], vec![mean], vec![std]).unwrap();
            let back = destandardize(&standardize(&f, &stats).unwrap(), &stats).unwrap();
            for (x, y) in back.data().iter().zip(f.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }
}

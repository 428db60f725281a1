//! Ensemble verification against point observations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bilinear_sample, Field};

pub const VARIABLES: [&str; 5] = ["t2m", "wind_speed", "u10", "v10", "msl"];

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Mean computed about the first value, exact when all values are equal.
fn shifted_mean(values: &[f64]) -> f64 {
    let a = values[0];
    a + values.iter().map(|v| v - a).sum::<f64>() / values.len() as f64
}

/// `(1/n) sum |y_k - y| - (1/(2 n^2)) sum_k sum_l |y_k - y_l|`.
pub fn crps_ensemble(members: &[f64], y: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Argument("CRPS of an empty ensemble".into()));
    }
    check_finite(members, "ensemble")?;
    check_finite(&[y], "observation")?;
    let n = members.len() as f64;
    let errors: Vec<f64> = members.iter().map(|m| (m - y).abs()).collect();
    let skill = shifted_mean(&errors);
    let mut spread = 0.0;
    for a in members {
        for b in members {
            spread += (a - b).abs();
        }
    }
    Ok(skill - spread / (2.0 * n * n))
}

/// `integral (F(z) - 1{z >= y})^2 dz` for the empirical CDF of `members`,
/// evaluated exactly between consecutive breakpoints.
pub fn crps_integral(members: &[f64], y: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Argument("CRPS of an empty ensemble".into()));
    }
    let mut knots: Vec<f64> = members.iter().copied().chain([y]).collect();
    knots.sort_by(f64::total_cmp);
    let n = members.len() as f64;
    let mut total = 0.0;
    for w in knots.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let cdf = members.iter().filter(|&&m| m <= mid).count() as f64 / n;
        let step = if mid >= y { 1.0 } else { 0.0 };
        total += (cdf - step).powi(2) * (w[1] - w[0]);
    }
    Ok(total)
}

/// CRPS of a single deterministic forecast, i.e. the absolute error.
pub fn deterministic_crps_baseline(forecast: f64, y: f64) -> f64 {
    (forecast - y).abs()
}

/// Root mean squared error of ensemble means.
pub fn rmse_of_mean(ensembles: &[Vec<f64>], observations: &[f64]) -> Result<f64> {
    if ensembles.is_empty() || ensembles.len() != observations.len() {
        return Err(Error::Argument(format!(
            "{} ensembles for {} observations",
            ensembles.len(),
            observations.len()
        )));
    }
    let mut sum = 0.0;
    for (e, y) in ensembles.iter().zip(observations) {
        if e.is_empty() {
            return Err(Error::Argument("empty ensemble".into()));
        }
        sum += (shifted_mean(e) - y).powi(2);
    }
    Ok((sum / ensembles.len() as f64).sqrt())
}

/// `1 - down / base`; undefined unless `base > 0`.
pub fn skill_score(metric_down: f64, metric_base: f64) -> Result<f64> {
    if !(metric_base > 0.0) || !metric_down.is_finite() {
        return Err(Error::Domain(format!(
            "skill score undefined for base metric {metric_base}"
        )));
    }
    Ok(1.0 - metric_down / metric_base)
}

pub fn wind_speed(u10: f64, v10: f64) -> f64 {
    u10.hypot(v10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub valid_time: String,
    pub variable: String,
    pub value: f64,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if !VARIABLES.contains(&self.variable.as_str()) {
            return Err(Error::Argument(format!("unknown observed variable {:?}", self.variable)));
        }
        if ![self.lat, self.lon, self.value].iter().all(|v| v.is_finite()) {
            return Err(Error::Argument(format!(
                "observation at station {} has non-finite fields",
                self.station_id
            )));
        }
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::format(p.byte(), e.to_string()),
        None => Error::io(path, std::io::Error::other(e.to_string())),
    }
}

/// CSV with header `station_id,lat,lon,valid_time,variable,value`.
pub fn write_observations(path: &Path, obs: &[Observation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for o in obs {
        w.serialize(o).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let o: Observation = row.map_err(|e| csv_error(path, e))?;
        o.validate()?;
        out.push(o);
    }
    Ok(out)
}

/// Forecast value of `variable` at a point; `wind_speed` is derived from the
/// interpolated `u10` and `v10`.
pub fn point_value(field: &Field, variable: &str, lat: f64, lon: f64) -> Result<f64> {
    let channel = |name: &str| {
        field
            .channel_index(name)
            .ok_or_else(|| Error::Config(format!("field has no {name:?} channel")))
    };
    if variable == "wind_speed" {
        let u = bilinear_sample(field, lat, lon, channel("u10")?)?;
        let v = bilinear_sample(field, lat, lon, channel("v10")?)?;
        Ok(wind_speed(u, v))
    } else {
        bilinear_sample(field, lat, lon, channel(variable)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collocated {
    /// `(index into the observation list, forecast, observed)`.
    pub pairs: Vec<(usize, f64, f64)>,
    /// Observations outside the field's grid.
    pub skipped: usize,
}

/// Bilinearly interpolate `field` to each observation. Out-of-domain
/// stations are skipped and counted.
pub fn collocate(field: &Field, obs: &[Observation]) -> Result<Collocated> {
    let mut pairs = Vec::with_capacity(obs.len());
    let mut skipped = 0;
    for (k, o) in obs.iter().enumerate() {
        if !field.grid().contains(o.lat, o.lon) {
            skipped += 1;
            continue;
        }
        pairs.push((k, point_value(field, &o.variable, o.lat, o.lon)?, o.value));
    }
    Ok(Collocated { pairs, skipped })
}

/// Forecasts verified at one valid time.
#[derive(Debug, Clone)]
pub struct Case<'a> {
    pub lead_time_h: u32,
    pub baseline: &'a Field,
    pub members: &'a [Field],
    pub observations: &'a [Observation],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub variable: String,
    pub lead_time_h: u32,
    pub count: usize,
    pub rmse_base: f64,
    pub rmse_down: f64,
    pub crps_base: f64,
    pub crps_down: f64,
    pub rmsess: Option<f64>,
    pub crpss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub skipped_observations: usize,
    pub config_hash: String,
}

#[derive(Default)]
struct Accum {
    count: usize,
    se_base: f64,
    se_down: f64,
    crps_base: f64,
    crps_down: f64,
}

/// Scores per (variable, lead time), aggregated over stations and cases in a
/// fixed order. Ensemble CRPS is computed in the variable's own space, so
/// wind speed uses the speed of each member.
pub fn score(cases: &[Case<'_>], config_hash: &str) -> Result<ScoreReport> {
    let mut acc: BTreeMap<(String, u32), Accum> = BTreeMap::new();
    let mut skipped = 0;
    for case in cases {
        if case.members.is_empty() {
            return Err(Error::Argument("case without ensemble members".into()));
        }
        let base = collocate(case.baseline, case.observations)?;
        skipped += base.skipped;
        let members = case
            .members
            .iter()
            .map(|m| collocate(m, case.observations))
            .collect::<Result<Vec<_>>>()?;
        for (p, &(k, forecast, y)) in base.pairs.iter().enumerate() {
            let ens: Vec<f64> = members.iter().map(|m| m.pairs[p].1).collect();
            let mean = shifted_mean(&ens);
            let a = acc
                .entry((case.observations[k].variable.clone(), case.lead_time_h))
                .or_default();
            a.count += 1;
            a.se_base += (forecast - y).powi(2);
            a.se_down += (mean - y).powi(2);
            a.crps_base += deterministic_crps_baseline(forecast, y);
            a.crps_down += crps_ensemble(&ens, y)?;
        }
    }
    if acc.is_empty() {
        return Err(Error::Domain(format!(
            "no observation could be collocated ({skipped} outside the domain)"
        )));
    }
    let rows = acc
        .into_iter()
        .map(|((variable, lead_time_h), a)| {
            let n = a.count as f64;
            let rmse_base = (a.se_base / n).sqrt();
            let rmse_down = (a.se_down / n).sqrt();
            let crps_base = a.crps_base / n;
            let crps_down = a.crps_down / n;
            ScoreRow {
                variable,
                lead_time_h,
                count: a.count,
                rmse_base,
                rmse_down,
                crps_base,
                crps_down,
                rmsess: skill_score(rmse_down, rmse_base).ok(),
                crpss: skill_score(crps_down, crps_base).ok(),
            }
        })
        .collect();
    Ok(ScoreReport {
        rows,
        skipped_observations: skipped,
        config_hash: config_hash.to_string(),
    })
}

impl ScoreReport {
    pub fn row(&self, variable: &str, lead_time_h: u32) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.variable == variable && r.lead_time_h == lead_time_h)
    }

    /// CSV with one line per (variable, lead time); undefined scores are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Channel, Grid};
    use proptest::prelude::*;

    #[test]
    fn crps_hand_values() {
        assert_eq!(crps_ensemble(&[2.0], 2.0).unwrap(), 0.0);
        assert_eq!(crps_ensemble(&[1.0, 3.0], 2.0).unwrap(), 0.5);
        assert_eq!(crps_ensemble(&[0.0, 0.0], 1.0).unwrap(), 1.0);
        assert!(crps_ensemble(&[], 1.0).is_err());
    }

    #[test]
    fn single_member_is_absolute_error() {
        for (f, y) in [(1.0, 4.0), (-2.5, 0.25), (3.0, 3.0)] {
            assert_eq!(crps_ensemble(&[f], y).unwrap(), deterministic_crps_baseline(f, y));
        }
        assert_eq!(deterministic_crps_baseline(1.0, 4.0), 3.0);
    }

    #[test]
    fn rmse_hand_values() {
        assert_eq!(rmse_of_mean(&[vec![2.0, 4.0]], &[1.0]).unwrap(), 2.0);
        let r = rmse_of_mean(&[vec![1.0], vec![3.0]], &[0.0, 0.0]).unwrap();
        assert!((r - 5f64.sqrt()).abs() < 1e-15);
        assert!(rmse_of_mean(&[], &[]).is_err());
    }

    #[test]
    fn skill_scores() {
        assert_eq!(skill_score(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(skill_score(1.0, 2.0).unwrap(), 0.5);
        assert!((skill_score(0.95, 1.0).unwrap() - 0.05).abs() < 1e-15);
        assert!(skill_score(1.0, 0.0).is_err());
    }

    #[test]
    fn wind_speed_values() {
        assert_eq!(wind_speed(0.0, 0.0), 0.0);
        assert_eq!(wind_speed(3.0, 4.0), 5.0);
        assert_eq!(wind_speed(-1.5, 2.0), wind_speed(-2.0, -1.5));
    }

    fn cell() -> Field {
        let g = Grid::new(0.0, 0.0, 1.0, 1.0, 2, 2).unwrap();
        Field::new(g, vec![Channel::new("t2m", "K")], vec![0.0, 0.0, 0.0, 4.0]).unwrap()
    }

    fn obs(lat: f64, lon: f64, value: f64) -> Observation {
        Observation {
            station_id: "s".into(),
            lat,
            lon,
            valid_time: "2020-01-01T00:00:00Z".into(),
            variable: "t2m".into(),
            value,
        }
    }

    #[test]
    fn collocation_interpolates_and_skips() {
        let c = collocate(&cell(), &[obs(0.5, 0.5, 0.0), obs(1.0, 1.0, 0.0), obs(3.0, 0.0, 0.0)]).unwrap();
        assert_eq!(c.skipped, 1);
        assert_eq!(c.pairs[0].1, 1.0);
        assert_eq!(c.pairs[1].1, 4.0);
    }

    #[test]
    fn self_comparison_has_zero_skill() {
        let f = cell();
        let members = vec![f.clone(); 16];
        let o = [obs(0.5, 0.5, 2.0), obs(0.2, 0.7, -1.0)];
        let r = score(
            &[Case {
                lead_time_h: 24,
                baseline: &f,
                members: &members,
                observations: &o,
            }],
            "h",
        )
        .unwrap();
        let row = r.row("t2m", 24).unwrap();
        assert_eq!(row.rmsess, Some(0.0));
        assert_eq!(row.crpss, Some(0.0));
    }

    #[test]
    fn all_stations_outside_is_an_error() {
        let f = cell();
        let members = vec![f.clone()];
        let o = [obs(5.0, 5.0, 1.0)];
        let case = Case {
            lead_time_h: 0,
            baseline: &f,
            members: &members,
            observations: &o,
        };
        assert!(matches!(score(&[case], ""), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn closed_form_matches_integral(
            members in proptest::collection::vec(-10.0f64..10.0, 1..9),
            y in -12.0f64..12.0,
        ) {
            let a = crps_ensemble(&members, y).unwrap();
            let b = crps_integral(&members, y).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn crps_invariances(
            members in proptest::collection::vec(-10.0f64..10.0, 1..9),
            y in -12.0f64..12.0,
            c in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let base = crps_ensemble(&members, y).unwrap();
            prop_assert!(base >= 0.0);
            let mut rev = members.clone();
            rev.reverse();
            prop_assert!((crps_ensemble(&rev, y).unwrap() - base).abs() < 1e-12);
            let shifted: Vec<f64> = members.iter().map(|m| m + c).collect();
            prop_assert!((crps_ensemble(&shifted, y + c).unwrap() - base).abs() < 1e-9);
            let scaled: Vec<f64> = members.iter().map(|m| m * scale).collect();
            prop_assert!((crps_ensemble(&scaled, y * scale).unwrap() - scale * base).abs() < 1e-9);
            let mae = members.iter().map(|m| (m - y).abs()).sum::<f64>() / members.len() as f64;
            prop_assert!(base <= mae + 1e-12);
        }
    }
}

//! Comparison utilities: coarse aggregation, field agreement statistics,
//! wavelength conversion and ground-station overpass matching.

use std::io::Read;

use chrono::{DateTime, Utc};

use crate::error::{Error, Result};

/// A gridded field with missing entries, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Option<f64>>,
}

impl Field {
    pub fn new(rows: usize, cols: usize, values: Vec<Option<f64>>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::config(format!(
                "field of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.cols + col]
    }
}

/// Default minimum clear fraction of a coarse pixel; the pixel is valid only
/// when strictly more than this fraction of its footprint is clear.
pub const MIN_CLEAR_FRACTION: f64 = 1.0 / 16.0;

/// Averages `factor x factor` footprints of valid fine pixels. A coarse pixel
/// is missing unless its valid fraction exceeds `min_clear_fraction`.
pub fn aggregate(field: &Field, factor: usize, min_clear_fraction: f64) -> Result<Field> {
    if factor == 0 || field.rows % factor != 0 || field.cols % factor != 0 {
        return Err(Error::config(format!(
            "aggregation factor {factor} does not divide the {}x{} grid",
            field.rows, field.cols
        )));
    }
    let (rows, cols) = (field.rows / factor, field.cols / factor);
    let cells = (factor * factor) as f64;
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut sum = 0.0;
            let mut n = 0usize;
            for i in r * factor..(r + 1) * factor {
                for j in c * factor..(c + 1) * factor {
                    if let Some(v) = field.get(i, j) {
                        sum += v;
                        n += 1;
                    }
                }
            }
            let fraction = n as f64 / cells;
            values.push((n > 0 && fraction > min_clear_fraction).then(|| sum / n as f64));
        }
    }
    Field::new(rows, cols, values)
}

/// Agreement between two fields over their co-valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// `(a, b)` pairs in row-major order.
    pub pairs: Vec<(f64, f64)>,
    pub rms: f64,
    /// Pearson correlation; absent when either side is constant.
    pub correlation: Option<f64>,
    /// Pixels missing on either side.
    pub missing: usize,
}

pub fn compare_fields(a: &Field, b: &Field) -> Result<ComparisonReport> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::config(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut pairs = Vec::new();
    let mut missing = 0;
    for (x, y) in a.values.iter().zip(&b.values) {
        match (x, y) {
            (Some(x), Some(y)) => pairs.push((*x, *y)),
            _ => missing += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate("no co-valid pixels to compare".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rms = (pairs.iter().map(|(x, y)| (x - y).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt();
    Ok(ComparisonReport {
        correlation: pearson(&xs, &ys),
        pairs,
        rms,
        missing,
    })
}

/// Pearson correlation, `None` when either series has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Converts AOD between wavelengths with the Angstrom power law,
/// `tau(to) = tau(from) (to / from)^(-exponent)`.
pub fn angstrom_convert(aod: f64, from_nm: f64, to_nm: f64, exponent: f64) -> Result<f64> {
    if !(from_nm > 0.0 && to_nm > 0.0) {
        return Err(Error::domain(format!("wavelengths must be positive, got {from_nm} and {to_nm}")));
    }
    if from_nm == to_nm {
        return Ok(aod);
    }
    Ok(aod * (to_nm / from_nm).powf(-exponent))
}

/// One ground-station AOD measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundRecord {
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub wavelength_nm: f64,
    pub aod: f64,
    pub angstrom_exponent: f64,
}

impl GroundRecord {
    /// AOD at `to_nm`.
    pub fn aod_at(&self, to_nm: f64) -> Result<f64> {
        angstrom_convert(self.aod, self.wavelength_nm, to_nm, self.angstrom_exponent)
    }
}

const GROUND_COLUMNS: [&str; 4] = ["timestamp", "wavelength_nm", "aod", "angstrom_exponent"];

/// Parses comma-separated ground records whose header names the columns
/// `timestamp` (ISO-8601 UTC), `wavelength_nm`, `aod` and
/// `angstrom_exponent`, in any order. Errors carry the 1-based file line.
pub fn parse_ground_records<R: Read>(reader: R) -> Result<Vec<GroundRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(GROUND_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(1, format!("missing column `{name}`")))?;
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |k: usize| row.get(index[k]).unwrap_or("");
        let number = |k: usize| -> Result<f64> {
            let s = field(k);
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line, format!("bad {} `{s}`", GROUND_COLUMNS[k])))
        };
        let timestamp = DateTime::parse_from_rfc3339(field(0))
            .map_err(|e| Error::parse(line, format!("bad timestamp `{}`: {e}", field(0))))?
            .with_timezone(&Utc)
            .timestamp();
        let wavelength_nm = number(1)?;
        let aod = number(2)?;
        let angstrom_exponent = number(3)?;
        if wavelength_nm <= 0.0 {
            return Err(Error::parse(line, format!("wavelength must be positive, got {wavelength_nm}")));
        }
        if aod < 0.0 {
            return Err(Error::parse(line, format!("aod must be nonnegative, got {aod}")));
        }
        out.push(GroundRecord {
            timestamp,
            wavelength_nm,
            aod,
            angstrom_exponent,
        });
    }
    Ok(out)
}

/// Sorts records by time, stably.
pub fn sort_records(records: &mut [GroundRecord]) {
    records.sort_by_key(|r| r.timestamp);
}

/// Default overpass window, centered on the overpass time.
pub const OVERPASS_WINDOW_SECONDS: i64 = 3600;

#[derive(Debug, Clone, PartialEq)]
pub enum OverpassMatch {
    Matched { mean_aod: f64, count: usize },
    /// No record in the window; `gap_seconds` is the distance to the nearest
    /// record, if any exists.
    Absent { gap_seconds: Option<i64> },
}

/// Mean of the records within `window_seconds / 2` of the overpass, each
/// converted to `to_nm`. Records must be sorted by time.
pub fn match_overpass(records: &[GroundRecord], overpass: i64, window_seconds: i64, to_nm: f64) -> Result<OverpassMatch> {
    if records.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(Error::config("ground records must be sorted by time"));
    }
    let half = window_seconds / 2;
    let start = records.partition_point(|r| r.timestamp < overpass - half);
    let mut sum = 0.0;
    let mut count = 0;
    for r in &records[start..] {
        if r.timestamp > overpass + half {
            break;
        }
        // Odd windows: keep |t - overpass| <= window / 2 exactly.
        if 2 * (r.timestamp - overpass).abs() > window_seconds {
            continue;
        }
        sum += r.aod_at(to_nm)?;
        count += 1;
    }
    if count > 0 {
        return Ok(OverpassMatch::Matched {
            mean_aod: sum / count as f64,
            count,
        });
    }
    let gap_seconds = records.iter().map(|r| (r.timestamp - overpass).abs()).min();
    Ok(OverpassMatch::Absent { gap_seconds })
}

/// Affine mapping from fractional (row, col) to (lat, lon); cell `(r, c)`
/// has its center at `(r + 0.5, c + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Georegistration {
    pub lat0: f64,
    pub lon0: f64,
    pub lat_per_row: f64,
    pub lat_per_col: f64,
    pub lon_per_row: f64,
    pub lon_per_col: f64,
}

impl Georegistration {
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let (r, c) = (row as f64 + 0.5, col as f64 + 0.5);
        (
            self.lat0 + self.lat_per_row * r + self.lat_per_col * c,
            self.lon0 + self.lon_per_row * r + self.lon_per_col * c,
        )
    }

    /// Cell whose center is nearest in grid coordinates to the location, or
    /// `None` outside a `rows x cols` grid.
    pub fn nearest_cell(&self, lat: f64, lon: f64, rows: usize, cols: usize) -> Result<Option<(usize, usize)>> {
        let det = self.lat_per_row * self.lon_per_col - self.lat_per_col * self.lon_per_row;
        if det == 0.0 || !det.is_finite() {
            return Err(Error::config("georegistration is singular"));
        }
        let (dl, dn) = (lat - self.lat0, lon - self.lon0);
        let r = (self.lon_per_col * dl - self.lat_per_col * dn) / det;
        let c = (self.lat_per_row * dn - self.lon_per_row * dl) / det;
        if r < 0.0 || c < 0.0 {
            return Ok(None);
        }
        let (ri, ci) = (r.floor() as usize, c.floor() as usize);
        Ok((ri < rows && ci < cols).then_some((ri, ci)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: i64, aod: f64) -> GroundRecord {
        GroundRecord { timestamp: t, wavelength_nm: 550.0, aod, angstrom_exponent: 1.0 }
    }

    #[test]
    fn aggregate_examples() {
        let f = Field::new(4, 4, vec![Some(0.5); 16]).unwrap();
        assert_eq!(aggregate(&f, 4, MIN_CLEAR_FRACTION).unwrap().values, vec![Some(0.5)]);
        assert_eq!(aggregate(&f, 1, MIN_CLEAR_FRACTION).unwrap(), f);

        let mut v = vec![Some(0.2); 8];
        v.extend(vec![Some(0.6); 8]);
        let f = Field::new(4, 4, v).unwrap();
        let a = aggregate(&f, 4, MIN_CLEAR_FRACTION).unwrap();
        assert!((a.values[0].unwrap() - 0.4).abs() < 1e-15);

        let mut v = vec![None; 16];
        v[5] = Some(0.3);
        let f = Field::new(4, 4, v.clone()).unwrap();
        assert_eq!(aggregate(&f, 4, MIN_CLEAR_FRACTION).unwrap().values, vec![None]);
        v[6] = Some(0.5);
        let f = Field::new(4, 4, v).unwrap();
        assert!((aggregate(&f, 4, MIN_CLEAR_FRACTION).unwrap().values[0].unwrap() - 0.4).abs() < 1e-15);

        assert!(aggregate(&Field::new(4, 6, vec![None; 24]).unwrap(), 4, MIN_CLEAR_FRACTION).is_err());
        let block = Field::new(32, 128, vec![Some(1.0); 4096]).unwrap();
        let coarse = aggregate(&block, 4, MIN_CLEAR_FRACTION).unwrap();
        assert_eq!((coarse.rows, coarse.cols), (8, 32));
    }

    #[test]
    fn compare_examples() {
        let a = Field::new(1, 4, vec![Some(0.1), Some(0.4), None, Some(0.9)]).unwrap();
        let same = compare_fields(&a, &a).unwrap();
        assert_eq!(same.rms, 0.0);
        assert!((same.correlation.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(same.missing, 1);
        let b = Field::new(1, 4, a.values.iter().map(|v| v.map(|x| x + 0.1)).collect()).unwrap();
        let r = compare_fields(&a, &b).unwrap();
        assert!((r.rms - 0.1).abs() < 1e-12);
        assert!((r.correlation.unwrap() - 1.0).abs() < 1e-12);
        let empty = Field::new(1, 4, vec![None; 4]).unwrap();
        assert!(compare_fields(&a, &empty).is_err());
        assert!(compare_fields(&a, &Field::new(2, 2, vec![None; 4]).unwrap()).is_err());
    }

    #[test]
    fn angstrom_examples() {
        assert_eq!(angstrom_convert(0.5, 440.0, 550.0, 0.0).unwrap(), 0.5);
        assert_eq!(angstrom_convert(0.5, 550.0, 550.0, 1.3).unwrap(), 0.5);
        // 0.5 (550/440)^-1.2, evaluated with mpmath at 30 digits.
        let v = angstrom_convert(0.5, 440.0, 550.0, 1.2).unwrap();
        assert!((v - 0.382540999916015).abs() < 1e-12, "{v}");
        assert!(angstrom_convert(0.5, 0.0, 550.0, 1.0).is_err());
    }

    #[test]
    fn overpass_examples() {
        assert_eq!(
            match_overpass(&[rec(1000, 0.3)], 1000, 3600, 550.0).unwrap(),
            OverpassMatch::Matched { mean_aod: 0.3, count: 1 }
        );
        let r = [rec(1000 - 1200, 0.4), rec(1000 + 1200, 0.6)];
        match match_overpass(&r, 1000, 3600, 550.0).unwrap() {
            OverpassMatch::Matched { mean_aod, count } => {
                assert!((mean_aod - 0.5).abs() < 1e-15);
                assert_eq!(count, 2);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            match_overpass(&[rec(0, 0.4)], 10_800, 3600, 550.0).unwrap(),
            OverpassMatch::Absent { gap_seconds: Some(10_800) }
        );
        assert_eq!(match_overpass(&[], 0, 3600, 550.0).unwrap(), OverpassMatch::Absent { gap_seconds: None });
        // Window edges are inclusive.
        assert!(matches!(match_overpass(&[rec(1800, 0.4)], 0, 3600, 550.0).unwrap(), OverpassMatch::Matched { .. }));
        assert!(match_overpass(&[rec(5, 0.1), rec(1, 0.1)], 0, 3600, 550.0).is_err());
    }

    #[test]
    fn ground_record_parsing() {
        let text = "timestamp,wavelength_nm,aod,angstrom_exponent\n\
                    2004-05-25T02:30:00Z,440,0.52,1.2\n\
                    2004-05-25T03:00:00+00:00, 500 ,0.40,1.1\n";
        let recs = parse_ground_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].timestamp - recs[0].timestamp, 1800);
        assert_eq!(recs[1].wavelength_nm, 500.0);

        let bad = "timestamp,wavelength_nm,aod,angstrom_exponent\n2004-05-25T02:30:00Z,440,0.5,1\n2004-05-25T03:00:00Z,-1,0.4,1\n";
        let err = parse_ground_records(bad.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let missing = "timestamp,aod\n";
        assert!(matches!(parse_ground_records(missing.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let bad_time = "timestamp,wavelength_nm,aod,angstrom_exponent\nyesterday,440,0.5,1\n";
        assert!(matches!(parse_ground_records(bad_time.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn georegistration_nearest_cell() {
        let g = Georegistration {
            lat0: 40.0,
            lon0: 116.0,
            lat_per_row: -0.04,
            lat_per_col: 0.0,
            lon_per_row: 0.0,
            lon_per_col: 0.05,
        };
        let (lat, lon) = g.center(3, 7);
        assert_eq!(g.nearest_cell(lat, lon, 32, 128).unwrap(), Some((3, 7)));
        assert_eq!(g.nearest_cell(41.0, 116.0, 32, 128).unwrap(), None);
    }
}

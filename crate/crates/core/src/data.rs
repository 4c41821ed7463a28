//! Price ingestion, log returns, time inputs and sliding-window splits.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How to read a price (or return) CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceSchema {
    /// Name of the time column; the first column when unset.
    pub time_column: Option<String>,
    /// Value columns to keep, in order; all remaining columns when unset.
    pub columns: Option<Vec<String>>,
    /// Replace blank cells with the previous row's value.
    pub forward_fill: bool,
}

impl Default for PriceSchema {
    fn default() -> Self {
        Self {
            time_column: None,
            columns: None,
            forward_fill: true,
        }
    }
}

/// Parsed table, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTable {
    /// Seconds since the Unix epoch for timestamps, or the raw integer index.
    pub times: Vec<i64>,
    pub labels: Vec<String>,
    /// Rows are observations, columns instruments.
    pub values: DMatrix<f64>,
    pub source: String,
}

fn parse_time(cell: &str) -> Option<i64> {
    let s = cell.trim();
    if let Ok(i) = s.parse::<i64>() {
        return Some(i);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

/// Parses CSV text from any reader. `source` labels error messages.
pub fn parse_prices<R: Read>(reader: R, source: &str, schema: &PriceSchema) -> Result<PriceTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 2 {
        return Err(Error::Data(format!(
            "{source}: need a time column and at least one value column"
        )));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{source}: missing column `{name}`")))
    };
    let time_idx = match &schema.time_column {
        Some(name) => find(name)?,
        None => 0,
    };
    let value_idx: Vec<usize> = match &schema.columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != time_idx).collect(),
    };
    if value_idx.is_empty() {
        return Err(Error::Data(format!("{source}: no value columns selected")));
    }

    let mut rows: Vec<(i64, Vec<Option<f64>>)> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = r + 2;
        let cell = rec.get(time_idx).unwrap_or("");
        let t = parse_time(cell).ok_or_else(|| {
            Error::Data(format!(
                "{source}: line {line}, column `{}`: unparseable time `{cell}`",
                headers[time_idx]
            ))
        })?;
        let mut vals = Vec::with_capacity(value_idx.len());
        for &c in &value_idx {
            let raw = rec.get(c).unwrap_or("");
            if raw.is_empty() {
                vals.push(None);
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| {
                Error::Data(format!(
                    "{source}: line {line}, column `{}`: unparseable number `{raw}`",
                    headers[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{source}: line {line}, column `{}`: non-finite value",
                    headers[c]
                )));
            }
            vals.push(Some(v));
        }
        rows.push((t, vals));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{source}: no data rows")));
    }
    rows.sort_by_key(|(t, _)| *t);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("{source}: duplicate timestamp {}", w[0].0)));
    }

    let d = value_idx.len();
    let mut values = DMatrix::zeros(rows.len(), d);
    for (i, (_, vals)) in rows.iter().enumerate() {
        for (j, v) in vals.iter().enumerate() {
            values[(i, j)] = match v {
                Some(v) => *v,
                None if schema.forward_fill && i > 0 => values[(i - 1, j)],
                None => {
                    return Err(Error::Data(format!(
                        "{source}: row {} (time {}), column `{}`: missing value{}",
                        i + 1,
                        rows[i].0,
                        headers[value_idx[j]],
                        if schema.forward_fill { " with nothing to forward-fill from" } else { "" }
                    )))
                }
            };
        }
    }
    Ok(PriceTable {
        times: rows.iter().map(|(t, _)| *t).collect(),
        labels: value_idx.iter().map(|&i| headers[i].clone()).collect(),
        values,
        source: source.to_string(),
    })
}

pub fn load_prices(path: impl AsRef<Path>, schema: &PriceSchema) -> Result<PriceTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_prices(file, &path.display().to_string(), schema)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReturnOptions {
    /// Use log(1 + P_{t+1}/P_t) instead of log(P_{t+1}/P_t).
    pub log_one_plus_ratio: bool,
    pub demean: bool,
    /// The table already holds returns; skip differencing.
    pub input_is_returns: bool,
    /// Space time inputs by timestamp gaps instead of uniformly.
    pub calendar_spacing: bool,
}

impl Default for ReturnOptions {
    fn default() -> Self {
        Self {
            log_one_plus_ratio: false,
            demean: true,
            input_is_returns: false,
            calendar_spacing: false,
        }
    }
}

/// Mean-zero returns with time inputs in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnsDataset {
    pub x: Vec<f64>,
    pub y: DMatrix<f64>,
    pub labels: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub transform: String,
    pub column_means: Vec<f64>,
}

impl ReturnsDataset {
    pub fn new(x: Vec<f64>, y: DMatrix<f64>, labels: Vec<String>, provenance: Provenance) -> Result<Self> {
        if x.len() != y.nrows() {
            return Err(Error::Data(format!("{} inputs for {} rows", x.len(), y.nrows())));
        }
        if labels.len() != y.ncols() {
            return Err(Error::Data(format!("{} labels for {} columns", labels.len(), y.ncols())));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("time inputs must be strictly increasing".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("returns contain non-finite values".into()));
        }
        Ok(Self { x, y, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    /// Writes `x` followed by one column per instrument.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["x".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (i, x) in self.x.iter().enumerate() {
            let mut rec = vec![format!("{x:e}")];
            rec.extend(self.y.row(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a cache file written by [`ReturnsDataset::write_cache`].
    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut x = Vec::new();
        let mut vals = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (c, cell) in rec.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Data(format!("{}: line {}, column {c}: bad number", path.display(), r + 2))
                })?;
                if c == 0 {
                    x.push(v);
                } else {
                    vals.push(v);
                }
            }
        }
        let d = headers.len().saturating_sub(1);
        if d == 0 || vals.len() != x.len() * d {
            return Err(Error::Data(format!("{}: ragged cache file", path.display())));
        }
        let y = DMatrix::from_row_slice(x.len(), d, &vals);
        Self::new(
            x,
            y,
            headers[1..].to_vec(),
            Provenance {
                source: path.display().to_string(),
                transform: "cache".into(),
                column_means: vec![0.0; d],
            },
        )
    }
}

/// Converts a price table to returns (or passes returns through), demeans and
/// attaches time inputs.
pub fn to_log_returns(table: &PriceTable, opts: &ReturnOptions) -> Result<ReturnsDataset> {
    let (n_rows, d) = table.values.shape();
    let (mut y, times, transform) = if opts.input_is_returns {
        (table.values.clone(), table.times.clone(), "returns (as given)")
    } else {
        if n_rows < 2 {
            return Err(Error::Data("need at least two price rows".into()));
        }
        for j in 0..d {
            for i in 0..n_rows {
                let p = table.values[(i, j)];
                if !(p > 0.0) {
                    return Err(Error::Data(format!(
                        "nonpositive price {p} for `{}` at row {}",
                        table.labels[j],
                        i + 1
                    )));
                }
            }
        }
        let y = DMatrix::from_fn(n_rows - 1, d, |i, j| {
            let ratio = table.values[(i + 1, j)] / table.values[(i, j)];
            if opts.log_one_plus_ratio {
                ratio.ln_1p()
            } else {
                ratio.ln()
            }
        });
        let transform = if opts.log_one_plus_ratio {
            "log(1 + P[t+1]/P[t])"
        } else {
            "log(P[t+1]/P[t])"
        };
        (y, table.times.clone(), transform)
    };
    let n = y.nrows();
    let mut means = vec![0.0; d];
    if opts.demean {
        for (j, mean) in means.iter_mut().enumerate() {
            *mean = y.column(j).mean();
            y.column_mut(j).add_scalar_mut(-*mean);
        }
    }
    let x = if opts.calendar_spacing {
        // one duration per output row: its gap from the preceding timestamp
        let offset = times.len() - n;
        let durations: Vec<f64> = if offset == 1 {
            (0..n).map(|i| (times[i + 1] - times[i]) as f64).collect()
        } else {
            (0..n.saturating_sub(1)).map(|i| (times[i + 1] - times[i]) as f64).collect()
        };
        map_time_inputs(n, Some(&durations))?
    } else {
        map_time_inputs(n, None)?
    };
    ReturnsDataset::new(
        x,
        y,
        table.labels.clone(),
        Provenance {
            source: table.source.clone(),
            transform: format!("{transform}{}", if opts.demean { ", demeaned" } else { "" }),
            column_means: means,
        },
    )
}

/// Time inputs in (0, 1]. Uniform by default. `durations` gives each point's
/// gap from its predecessor: N values, or N−1 values with the first gap reused
/// as the leading one.
pub fn map_time_inputs(n: usize, durations: Option<&[f64]>) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("need at least one time point"));
    }
    let gaps: Vec<f64> = match durations {
        None => vec![1.0; n],
        Some(d) if d.len() == n => d.to_vec(),
        Some(d) if d.len() + 1 == n && !d.is_empty() => {
            let mut g = vec![d[0]];
            g.extend_from_slice(d);
            g
        }
        Some(d) if n == 1 && d.is_empty() => vec![1.0],
        Some(d) => {
            return Err(Error::invalid(format!(
                "{} durations for {n} points (need {n} or {})",
                d.len(),
                n - 1
            )))
        }
    };
    if let Some(bad) = gaps.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        return Err(Error::invalid(format!("durations must be positive, got {bad}")));
    }
    let total: f64 = gaps.iter().sum();
    let mut acc = 0.0;
    let mut x: Vec<f64> = gaps
        .iter()
        .map(|g| {
            acc += g;
            acc / total
        })
        .collect();
    x[n - 1] = 1.0;
    Ok(x)
}

/// Extends a grid by `h` points beyond its end with the terminal spacing.
pub fn extend_forecast_grid(x: &[f64], h: usize) -> Result<Vec<f64>> {
    let last = *x.last().ok_or_else(|| Error::invalid("empty input grid"))?;
    let step = if x.len() >= 2 { last - x[x.len() - 2] } else { last };
    if !(step > 0.0) {
        return Err(Error::invalid("grid spacing must be positive"));
    }
    Ok((1..=h).map(|i| last + step * i as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Rows fitted by the model.
    pub train: Range<usize>,
    /// Validation rows (tuning split only), directly after `train`.
    pub validation: Option<Range<usize>>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub splits: Vec<Split>,
    pub horizon: usize,
    /// Index of the split carrying the validation set.
    pub tuning_split: usize,
}

/// Sliding windows of equal training length `N − n_splits·H`, each followed by
/// `H` test points; test ranges tile the last `n_splits·H` rows. The first
/// split is the tuning split: the final `val_fraction` of its window becomes
/// the validation set.
pub fn make_splits(
    n: usize,
    n_splits: usize,
    horizon: usize,
    val_fraction: f64,
    min_train: usize,
) -> Result<SplitPlan> {
    if n_splits == 0 || horizon == 0 {
        return Err(Error::config("splits", "n_splits and horizon must be ≥ 1"));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config("splits.val_fraction", "must lie in [0, 1)"));
    }
    let min_train = min_train.max(1);
    let tested = n_splits * horizon;
    if n < tested + min_train {
        return Err(Error::config(
            "splits",
            format!(
                "N={n} is too short: {n_splits} splits × horizon {horizon} = {tested} test rows plus a minimum of {min_train} training rows"
            ),
        ));
    }
    let window = n - tested;
    let n_val = (val_fraction * window as f64).round() as usize;
    if val_fraction > 0.0 && (n_val == 0 || window - n_val < min_train) {
        return Err(Error::config(
            "splits.val_fraction",
            format!("validation fraction {val_fraction} of a {window}-row window leaves no usable validation or training rows"),
        ));
    }
    let splits = (0..n_splits)
        .map(|i| {
            let start = i * horizon;
            let end = start + window;
            let (train, validation) = if i == 0 && n_val > 0 {
                (start..end - n_val, Some(end - n_val..end))
            } else {
                (start..end, None)
            };
            Split {
                train,
                validation,
                test: end..end + horizon,
            }
        })
        .collect();
    Ok(SplitPlan {
        splits,
        horizon,
        tuning_split: 0,
    })
}

/// Data for one split with inputs affinely remapped so the first training row
/// sits one spacing above 0 and the last sits at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub x_train: Vec<f64>,
    pub y_train: DMatrix<f64>,
    pub x_val: Vec<f64>,
    pub y_val: DMatrix<f64>,
    pub x_test: Vec<f64>,
    pub y_test: DMatrix<f64>,
}

fn rows(y: &DMatrix<f64>, r: &Range<usize>) -> DMatrix<f64> {
    y.rows(r.start, r.len()).into_owned()
}

pub fn split_data(ds: &ReturnsDataset, split: &Split) -> Result<SplitData> {
    let end = split.test.end;
    if end > ds.len() || split.train.is_empty() {
        return Err(Error::invalid("split does not fit the dataset"));
    }
    let t0 = split.train.start;
    let t1 = split.train.end - 1;
    let lead = if t0 > 0 {
        ds.x[t0] - ds.x[t0 - 1]
    } else {
        ds.x[0]
    };
    let origin = ds.x[t0] - lead;
    let span = ds.x[t1] - origin;
    let map = |r: &Range<usize>| -> Vec<f64> { ds.x[r.clone()].iter().map(|x| (x - origin) / span).collect() };
    let val = split.validation.clone().unwrap_or(split.train.end..split.train.end);
    let mut x_train = map(&split.train);
    if let Some(last) = x_train.last_mut() {
        *last = 1.0;
    }
    Ok(SplitData {
        x_train,
        y_train: rows(&ds.y, &split.train),
        x_val: map(&val),
        y_val: rows(&ds.y, &val),
        x_test: map(&split.test),
        y_test: rows(&ds.y, &split.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table(csv: &str, schema: &PriceSchema) -> Result<PriceTable> {
        parse_prices(csv.as_bytes(), "test.csv", schema)
    }

    #[test]
    fn three_rows_parse_and_sort() {
        let t = table("date,a,b\n2024-01-03,3,30\n2024-01-01,1,10\n2024-01-02,2,20\n", &PriceSchema::default()).unwrap();
        assert_eq!(t.values.nrows(), 3);
        assert_eq!(t.values.column(0).as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.labels, vec!["a", "b"]);
        assert_eq!(t.times[1] - t.times[0], 86_400);
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let e = table("t,a\n1,1\n2,2\n2,3\n", &PriceSchema::default()).unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
    }

    #[test]
    fn blank_cell_forward_filled() {
        let t = table("t,a,b\n1,1,5\n2,,6\n3,4,\n", &PriceSchema::default()).unwrap();
        assert_eq!(t.values[(1, 0)], 1.0);
        assert_eq!(t.values[(2, 1)], 6.0);
        let strict = PriceSchema {
            forward_fill: false,
            ..Default::default()
        };
        assert!(table("t,a\n1,1\n2,\n", &strict).is_err());
    }

    #[test]
    fn bad_cell_reports_line_and_column() {
        let e = table("t,a,b\n1,1,2\n2,x,3\n", &PriceSchema::default()).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 3") && msg.contains("`a`"), "{msg}");
    }

    #[test]
    fn missing_column_is_schema_error() {
        let schema = PriceSchema {
            columns: Some(vec!["zzz".into()]),
            ..Default::default()
        };
        let e = table("t,a\n1,1\n", &schema).unwrap_err();
        assert!(e.to_string().contains("missing column"));
    }

    #[test]
    fn iso_datetimes_accepted() {
        let t = table("t,a\n2024-01-01T00:00:00Z,1\n2024-01-01 12:00:00,2\n", &PriceSchema::default()).unwrap();
        assert_eq!(t.times[1] - t.times[0], 43_200);
    }

    fn no_demean() -> ReturnOptions {
        ReturnOptions {
            demean: false,
            ..Default::default()
        }
    }

    #[test]
    fn constant_prices_give_zero_returns() {
        let t = table("t,a\n1,5\n2,5\n3,5\n", &PriceSchema::default()).unwrap();
        let ds = to_log_returns(&t, &no_demean()).unwrap();
        assert!(ds.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn price_one_to_e_is_unit_return() {
        let csv = format!("t,a\n1,1\n2,{}\n", std::f64::consts::E);
        let t = table(&csv, &PriceSchema::default()).unwrap();
        let ds = to_log_returns(&t, &no_demean()).unwrap();
        assert_relative_eq!(ds.y[(0, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(ds.x, vec![1.0]);
    }

    #[test]
    fn literal_formula_flag() {
        let t = table("t,a\n1,2\n2,2\n", &PriceSchema::default()).unwrap();
        let opts = ReturnOptions {
            log_one_plus_ratio: true,
            ..no_demean()
        };
        assert_relative_eq!(to_log_returns(&t, &opts).unwrap().y[(0, 0)], 2f64.ln());
    }

    #[test]
    fn nonpositive_price_names_instrument() {
        let t = table("t,a,b\n1,1,1\n2,1,0\n", &PriceSchema::default()).unwrap();
        let e = to_log_returns(&t, &ReturnOptions::default()).unwrap_err();
        assert!(e.to_string().contains("`b`") && e.to_string().contains("row 2"), "{e}");
    }

    #[test]
    fn random_series_matches_scalar_loop() {
        let prices: [[f64; 2]; 5] = [[10.0, 3.0], [10.5, 2.9], [9.8, 3.3], [11.2, 3.1], [11.0, 3.0]];
        let mut csv = String::from("t,a,b\n");
        for (i, p) in prices.iter().enumerate() {
            csv.push_str(&format!("{i},{},{}\n", p[0], p[1]));
        }
        let t = table(&csv, &PriceSchema::default()).unwrap();
        let ds = to_log_returns(&t, &no_demean()).unwrap();
        for j in 0..2 {
            for i in 0..4 {
                let oracle = (prices[i + 1][j] / prices[i][j]).ln();
                assert_relative_eq!(ds.y[(i, j)], oracle, epsilon = 1e-15);
            }
        }
        // cumulative returns reproduce the price ratios
        let cum: f64 = ds.y.column(0).sum();
        assert_relative_eq!(cum.exp(), prices[4][0] / prices[0][0], epsilon = 1e-12);
    }

    #[test]
    fn demeaned_columns_have_zero_mean() {
        let t = table("t,a,b\n1,1,4\n2,2,3\n3,5,3.5\n4,4.5,3.6\n", &PriceSchema::default()).unwrap();
        let ds = to_log_returns(&t, &ReturnOptions::default()).unwrap();
        for j in 0..2 {
            assert!(ds.y.column(j).mean().abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_time_inputs() {
        assert_eq!(map_time_inputs(4, None).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn durations_preserve_spacing_ratio() {
        let x = map_time_inputs(4, Some(&[1.0, 1.0, 2.0])).unwrap();
        let d: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        assert_relative_eq!(d[1] / d[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(d[2] / d[0], 2.0, epsilon = 1e-12);
        assert_eq!(*x.last().unwrap(), 1.0);
        assert!(map_time_inputs(3, Some(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn forecast_grid_continues_spacing() {
        let x = map_time_inputs(100, None).unwrap();
        let f = extend_forecast_grid(&x, 10).unwrap();
        assert_eq!(f.len(), 10);
        assert_relative_eq!(f[0], 1.01, epsilon = 1e-12);
        assert_relative_eq!(f[9], 1.10, epsilon = 1e-12);
    }

    #[test]
    fn splits_tile_the_tail() {
        let p = make_splits(40, 2, 10, 0.0, 1).unwrap();
        assert_eq!(p.splits[0].test, 20..30);
        assert_eq!(p.splits[1].test, 30..40);
        let one = make_splits(40, 1, 10, 0.0, 1).unwrap();
        assert_eq!(one.splits[0].test, 30..40);
        let fx = make_splits(1565, 10, 10, 0.05, 10).unwrap();
        assert_eq!(fx.splits[0].test.start, 1465);
        assert_eq!(fx.splits[9].test, 1555..1565);
        assert!(make_splits(25, 2, 10, 0.0, 10).is_err());
    }

    #[test]
    fn validation_is_tail_of_tuning_split() {
        let p = make_splits(200, 2, 10, 0.1, 5).unwrap();
        let s0 = &p.splits[0];
        assert_eq!(s0.train, 0..162);
        assert_eq!(s0.validation, Some(162..180));
        assert_eq!(s0.test, 180..190);
        assert!(p.splits[1].validation.is_none());
        assert_eq!(p.splits[1].train, 10..190);
    }

    #[test]
    fn split_inputs_remapped() {
        let x = map_time_inputs(50, None).unwrap();
        let ds = ReturnsDataset::new(
            x,
            DMatrix::zeros(50, 1),
            vec!["a".into()],
            Provenance {
                source: String::new(),
                transform: String::new(),
                column_means: vec![0.0],
            },
        )
        .unwrap();
        let p = make_splits(50, 2, 5, 0.0, 1).unwrap();
        let sd = split_data(&ds, &p.splits[1]).unwrap();
        assert_eq!(sd.x_train.len(), 40);
        assert_relative_eq!(sd.x_train[0], 1.0 / 40.0, epsilon = 1e-12);
        assert_eq!(*sd.x_train.last().unwrap(), 1.0);
        assert_relative_eq!(sd.x_test[0], 41.0 / 40.0, epsilon = 1e-12);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.csv");
        let t = table("t,a,b\n1,1,4\n2,2,3\n3,5,3.5\n", &PriceSchema::default()).unwrap();
        let ds = to_log_returns(&t, &ReturnOptions::default()).unwrap();
        ds.write_cache(&path).unwrap();
        let back = ReturnsDataset::read_cache(&path).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.labels, ds.labels);
    }

    proptest! {
        #[test]
        fn split_plans_are_disjoint_and_tiled(
            n_splits in 1usize..12,
            horizon in 1usize..15,
            extra in 1usize..200,
            val in 0.0f64..0.3,
        ) {
            let n = n_splits * horizon + extra + 5;
            let Ok(plan) = make_splits(n, n_splits, horizon, val, 1) else { return Ok(()); };
            prop_assert_eq!(plan.splits.len(), n_splits);
            for (i, s) in plan.splits.iter().enumerate() {
                prop_assert_eq!(s.test.len(), horizon);
                let fit_end = s.validation.as_ref().map_or(s.train.end, |v| v.end);
                prop_assert_eq!(s.test.start, fit_end);
                if let Some(v) = &s.validation {
                    prop_assert_eq!(v.start, s.train.end);
                }
                if i > 0 {
                    prop_assert_eq!(s.test.start, plan.splits[i - 1].test.end);
                }
            }
            prop_assert_eq!(plan.splits.last().unwrap().test.end, n);
        }
    }
}

//! Series ingestion, chronological splits, and sliding-window extraction.
//!
//! A series is a dense (rows × channels) table with a strictly increasing
//! timestamp column. Splits are contiguous row ranges in time order, and a
//! window only counts for a split when both its lookback and its horizon
//! fall entirely inside that split's rows — no window ever straddles a
//! boundary, so training never sees evaluation data.

use std::ops::Range;
use std::path::Path;

use crate::error::DtError;
use crate::tensor::Tensor;
use crate::Result;

/// A multivariate series, row-major (rows × channels), timestamps dropped
/// after validation.
#[derive(Debug, Clone)]
pub struct SeriesData {
    pub values: Vec<f64>,
    pub rows: usize,
    pub channels: usize,
    pub channel_names: Vec<String>,
    /// Rows whose timestamp spacing differs from the first interval;
    /// reported for diagnostics, never filled in.
    pub gap_rows: Vec<usize>,
}

impl SeriesData {
    pub fn new(values: Vec<f64>, rows: usize, channels: usize) -> Result<Self> {
        if rows * channels != values.len() {
            return Err(DtError::Shape(format!(
                "{} values cannot form {rows} rows x {channels} channels",
                values.len()
            )));
        }
        if channels == 0 {
            return Err(DtError::Data("series needs at least one channel".into()));
        }
        let channel_names = (0..channels).map(|i| format!("c{i}")).collect();
        Ok(SeriesData { values, rows, channels, channel_names, gap_rows: Vec::new() })
    }

    /// Number of complete (lookback + horizon) windows in `rows` rows.
    pub fn window_count(rows: usize, lookback: usize, horizon: usize) -> Result<usize> {
        let need = lookback + horizon;
        if rows < need {
            return Err(DtError::Data(format!(
                "{rows} rows cannot hold a single window: need at least \
                 {need} (lookback {lookback} + horizon {horizon})"
            )));
        }
        Ok(rows - need + 1)
    }

    /// Materializes windows starting at `starts` into a lookback batch
    /// (B, T, N) and a target batch (B, S, N).
    pub fn batch(
        &self,
        starts: &[usize],
        lookback: usize,
        horizon: usize,
    ) -> Result<(Tensor, Tensor)> {
        let b = starts.len();
        let n = self.channels;
        let mut x = Vec::with_capacity(b * lookback * n);
        let mut y = Vec::with_capacity(b * horizon * n);
        for &w in starts {
            let end = w + lookback + horizon;
            if end > self.rows {
                return Err(DtError::Data(format!(
                    "window at row {w} runs to {end}, past the last row {}",
                    self.rows
                )));
            }
            x.extend_from_slice(&self.values[w * n..(w + lookback) * n]);
            y.extend_from_slice(&self.values[(w + lookback) * n..end * n]);
        }
        Ok((
            Tensor::from_vec(vec![b, lookback, n], x)?,
            Tensor::from_vec(vec![b, horizon, n], y)?,
        ))
    }
}

/// How to carve the row axis into train/validation/test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Chronological fractions of the whole series.
    Fractions { train: f64, val: f64, test: f64 },
    /// Exact row counts from the start of the series.
    Rows { train: usize, val: usize, test: usize },
}

/// Contiguous row ranges, in time order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_rows(rows: usize, spec: &SplitSpec) -> Result<Splits> {
    match *spec {
        SplitSpec::Fractions { train, val, test } => {
            for (name, f) in [("train", train), ("val", val), ("test", test)] {
                if !(f.is_finite() && f > 0.0) {
                    return Err(DtError::Config(format!(
                        "{name} fraction must be positive, got {f}"
                    )));
                }
            }
            if train + val + test > 1.0 + 1e-9 {
                return Err(DtError::Config(format!(
                    "split fractions sum to {}, above 1",
                    train + val + test
                )));
            }
            let t_len = (rows as f64 * train).floor() as usize;
            let te_len = (rows as f64 * test).floor() as usize;
            // When the fractions cover the whole series, the validation
            // split absorbs the rounding remainder so no row is dropped.
            let v_len = if (train + val + test - 1.0).abs() <= 1e-9 {
                rows - t_len - te_len
            } else {
                (rows as f64 * val).floor() as usize
            };
            Ok(Splits {
                train: 0..t_len,
                val: t_len..t_len + v_len,
                test: t_len + v_len..t_len + v_len + te_len,
            })
        }
        SplitSpec::Rows { train, val, test } => {
            let need = train + val + test;
            if need > rows {
                return Err(DtError::Data(format!(
                    "split needs {need} rows, series has {rows}"
                )));
            }
            Ok(Splits {
                train: 0..train,
                val: train..train + val,
                test: train + val..need,
            })
        }
    }
}

/// Start rows of every window lying entirely inside `range`. Empty when the
/// range is too short for one window.
pub fn split_window_starts(
    range: &Range<usize>,
    lookback: usize,
    horizon: usize,
) -> Vec<usize> {
    let need = lookback + horizon;
    if range.end - range.start < need {
        return Vec::new();
    }
    (range.start..=range.end - need).collect()
}

fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = y - i64::from(m <= 2);
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = i64::from(if m > 2 { m - 3 } else { m + 9 });
    let doy = (153 * mp + 2) / 5 + i64::from(d) - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

/// Timestamp column codec: plain numbers pass through; ISO-style
/// "YYYY-MM-DD[ T]HH:MM[:SS]" datetimes become seconds on a civil calendar.
fn parse_timestamp(s: &str, row: usize) -> Result<f64> {
    if let Ok(v) = s.trim().parse::<f64>() {
        if !v.is_finite() {
            return Err(DtError::Data(format!(
                "row {row}: non-finite timestamp {s:?}"
            )));
        }
        return Ok(v);
    }
    let t = s.trim();
    let (date, time) = t
        .split_once(' ')
        .or_else(|| t.split_once('T'))
        .ok_or_else(|| DtError::Data(format!("row {row}: unparseable timestamp {s:?}")))?;
    let bad = || DtError::Data(format!("row {row}: unparseable timestamp {s:?}"));
    let mut dp = date.split('-');
    let y: i64 = dp.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let m: u32 = dp.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let d: u32 = dp.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if dp.next().is_some() || !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return Err(bad());
    }
    let mut tp = time.split(':');
    let h: u32 = tp.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let mi: u32 = tp.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let sec: u32 = match tp.next() {
        Some(v) => v.parse().map_err(|_| bad())?,
        None => 0,
    };
    if tp.next().is_some() || h > 23 || mi > 59 || sec > 59 {
        return Err(bad());
    }
    let days = days_from_civil(y, m, d);
    Ok((days * 86_400 + i64::from(h) * 3_600 + i64::from(mi) * 60 + i64::from(sec)) as f64)
}

/// Reads a CSV whose first column is a strictly increasing timestamp and
/// whose remaining columns are numeric channels. Irregular spacing is
/// recorded in `gap_rows`; any other irregularity is an error naming the
/// offending row (1-based, excluding the header) and column.
pub fn ingest_csv(path: &Path) -> Result<SeriesData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DtError::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| DtError::Data(format!("bad header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(DtError::Data(format!(
            "need a timestamp column plus at least one channel, found {} columns",
            headers.len()
        )));
    }
    let channels = headers.len() - 1;
    let channel_names: Vec<String> =
        headers.iter().skip(1).map(|h| h.to_string()).collect();
    let mut values = Vec::new();
    let mut timestamps: Vec<f64> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record =
            record.map_err(|e| DtError::Data(format!("row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(DtError::Data(format!(
                "row {row}: {} fields, expected {}",
                record.len(),
                headers.len()
            )));
        }
        let ts = parse_timestamp(record.get(0).unwrap_or(""), row)?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(DtError::Data(format!(
                    "row {row}: timestamp not strictly increasing \
                     ({ts} follows {prev})"
                )));
            }
        }
        timestamps.push(ts);
        for (col, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                DtError::Data(format!(
                    "row {row}, column {:?}: non-numeric value {field:?}",
                    headers.get(col).unwrap_or("?")
                ))
            })?;
            if !v.is_finite() {
                return Err(DtError::Data(format!(
                    "row {row}, column {:?}: non-finite value {field:?}",
                    headers.get(col).unwrap_or("?")
                )));
            }
            values.push(v);
        }
    }
    let rows = timestamps.len();
    if rows == 0 {
        return Err(DtError::Data("no data rows".into()));
    }
    let mut gap_rows = Vec::new();
    if rows >= 3 {
        let step = timestamps[1] - timestamps[0];
        for i in 2..rows {
            let d = timestamps[i] - timestamps[i - 1];
            if (d - step).abs() > 1e-9 * step.abs().max(1.0) {
                gap_rows.push(i + 1);
            }
        }
    }
    Ok(SeriesData { values, rows, channels, channel_names, gap_rows })
}

/// Canonical benchmark configuration: expected channel count and split.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub channels: usize,
    pub split: SplitSpec,
}

/// Looks up a benchmark preset by name. The hourly and quarter-hourly ETT
/// sets use the fixed 12/4/4-month row convention; the rest split 70/10/20.
pub fn preset(name: &str) -> Result<Preset> {
    let fractions = SplitSpec::Fractions { train: 0.7, val: 0.1, test: 0.2 };
    match name {
        "etth1" | "etth2" => Ok(Preset {
            name: if name == "etth1" { "etth1" } else { "etth2" },
            channels: 7,
            split: SplitSpec::Rows { train: 8640, val: 2880, test: 2880 },
        }),
        "ettm1" | "ettm2" => Ok(Preset {
            name: if name == "ettm1" { "ettm1" } else { "ettm2" },
            channels: 7,
            split: SplitSpec::Rows { train: 34560, val: 11520, test: 11520 },
        }),
        "weather" => Ok(Preset { name: "weather", channels: 21, split: fractions }),
        "exchange" => Ok(Preset { name: "exchange", channels: 8, split: fractions }),
        other => Err(DtError::Config(format!(
            "unknown preset {other:?}; known: etth1, etth2, ettm1, ettm2, \
             weather, exchange"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn ramp(rows: usize, channels: usize) -> SeriesData {
        let values = (0..rows * channels).map(|k| k as f64).collect();
        SeriesData::new(values, rows, channels).unwrap()
    }

    #[test]
    fn window_count_boundaries() {
        assert_eq!(SeriesData::window_count(5, 3, 2).unwrap(), 1);
        assert_eq!(SeriesData::window_count(10, 3, 2).unwrap(), 6);
        let err = SeriesData::window_count(4, 3, 2).unwrap_err();
        match err {
            DtError::Data(msg) => assert!(msg.contains("at least 5"), "{msg}"),
            other => panic!("wrong error class: {other:?}"),
        }
    }

    #[test]
    fn batch_materializes_lookback_then_horizon() {
        let data = ramp(6, 2);
        let (x, y) = data.batch(&[1], 3, 2).unwrap();
        assert_eq!(x.shape(), &[1, 3, 2]);
        assert_eq!(x.data(), &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn fraction_splits_are_chronological_and_leak_free() {
        let splits = split_rows(
            1000,
            &SplitSpec::Fractions { train: 0.7, val: 0.1, test: 0.2 },
        )
        .unwrap();
        assert_eq!(splits.train, 0..700);
        assert_eq!(splits.val, 700..800);
        assert_eq!(splits.test, 800..1000);
        let train_starts = split_window_starts(&splits.train, 96, 96);
        assert_eq!(train_starts.len(), 700 - 192 + 1);
        for &w in &train_starts {
            assert!(w + 192 <= 700, "train window at {w} crosses into validation");
        }
        // 100 validation rows cannot hold a 192-row window: no silent
        // borrowing from neighboring splits.
        assert!(split_window_starts(&splits.val, 96, 96).is_empty());
        let test_starts = split_window_starts(&splits.test, 96, 96);
        assert!(test_starts.iter().all(|&w| w >= 800 && w + 192 <= 1000));
    }

    #[test]
    fn row_splits_respect_exact_counts() {
        let splits = split_rows(
            17420,
            &SplitSpec::Rows { train: 8640, val: 2880, test: 2880 },
        )
        .unwrap();
        assert_eq!(splits.train, 0..8640);
        assert_eq!(splits.val, 8640..11520);
        assert_eq!(splits.test, 11520..14400);
        assert!(split_rows(100, &SplitSpec::Rows { train: 80, val: 15, test: 10 })
            .is_err());
    }

    #[test]
    fn bad_fractions_are_rejected() {
        assert!(matches!(
            split_rows(100, &SplitSpec::Fractions { train: 0.8, val: 0.2, test: 0.2 }),
            Err(DtError::Config(_))
        ));
        assert!(matches!(
            split_rows(100, &SplitSpec::Fractions { train: 0.0, val: 0.5, test: 0.5 }),
            Err(DtError::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip_small_file() {
        let f = write_csv("date,a,b\n1,10,100\n2,20,200\n3,30,300\n");
        let data = ingest_csv(f.path()).unwrap();
        assert_eq!(data.rows, 3);
        assert_eq!(data.channels, 2);
        assert_eq!(data.channel_names, vec!["a", "b"]);
        assert_eq!(data.values, vec![10.0, 100.0, 20.0, 200.0, 30.0, 300.0]);
        assert!(data.gap_rows.is_empty());
    }

    #[test]
    fn iso_timestamps_parse_and_order() {
        let f = write_csv(
            "date,v\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,2\n2016-07-01 02:00:00,3\n",
        );
        let data = ingest_csv(f.path()).unwrap();
        assert_eq!(data.rows, 3);
        assert!(data.gap_rows.is_empty());
        // Same instants, T separator and no seconds field.
        let g = write_csv("date,v\n2016-07-01T00:00,1\n2016-07-01T01:00,2\n");
        assert_eq!(ingest_csv(g.path()).unwrap().rows, 2);
    }

    #[test]
    fn duplicate_timestamp_is_rejected_with_its_row() {
        let f = write_csv("date,v\n1,1\n2,2\n2,3\n");
        match ingest_csv(f.path()).unwrap_err() {
            DtError::Data(msg) => {
                assert!(msg.contains("row 3"), "{msg}");
                assert!(msg.contains("strictly increasing"), "{msg}");
            }
            other => panic!("wrong error class: {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let f = write_csv("date,a,b\n1,10,100\n2,oops,200\n");
        match ingest_csv(f.path()).unwrap_err() {
            DtError::Data(msg) => {
                assert!(msg.contains("row 2"), "{msg}");
                assert!(msg.contains("\"a\""), "{msg}");
            }
            other => panic!("wrong error class: {other:?}"),
        }
    }

    #[test]
    fn irregular_spacing_is_reported_not_filled() {
        // One missing hour: the row after the gap is flagged, the rest are
        // back on the nominal spacing.
        let f = write_csv("date,v\n1,1\n2,2\n4,3\n5,4\n");
        let data = ingest_csv(f.path()).unwrap();
        assert_eq!(data.rows, 4);
        assert_eq!(data.gap_rows, vec![3]);
        // Every interval off-nominal: every following row is flagged.
        let g = write_csv("date,v\n1,1\n2,2\n4,3\n7,4\n");
        assert_eq!(ingest_csv(g.path()).unwrap().gap_rows, vec![3, 4]);
    }

    #[test]
    fn civil_day_arithmetic_matches_known_epochs() {
        assert_eq!(days_from_civil(1970, 1, 1), 0);
        assert_eq!(days_from_civil(2000, 3, 1), 11017);
        assert_eq!(days_from_civil(2016, 7, 1), 16983);
        // Leap handling: 2016-02-29 exists and precedes 2016-03-01 by a day.
        assert_eq!(
            days_from_civil(2016, 3, 1) - days_from_civil(2016, 2, 29),
            1
        );
    }

    #[test]
    fn presets_pin_channels_and_splits() {
        let p = preset("etth1").unwrap();
        assert_eq!(p.channels, 7);
        assert_eq!(p.split, SplitSpec::Rows { train: 8640, val: 2880, test: 2880 });
        let m = preset("ettm2").unwrap();
        assert_eq!(m.split, SplitSpec::Rows { train: 34560, val: 11520, test: 11520 });
        assert_eq!(preset("weather").unwrap().channels, 21);
        assert_eq!(preset("exchange").unwrap().channels, 8);
        assert!(matches!(preset("nope"), Err(DtError::Config(_))));
    }
}

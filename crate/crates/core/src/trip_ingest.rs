//! Trip record parsing, validation, filtering and dataset profiling.
//!
//! Input is a delimited text file with a header row naming the ten trip
//! columns (see [`COLUMNS`]). Rows that fail validation are rejected and
//! tallied by reason in an [`IngestReport`]; they never abort the parse.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::Timestamp;

/// Trip CSV column names, in canonical output order.
pub const COLUMNS: [&str; 10] = [
    "card_id",
    "vehicle_id",
    "board_time",
    "alight_time",
    "board_stop_id",
    "board_lat",
    "board_lon",
    "alight_stop_id",
    "alight_lat",
    "alight_lon",
];

pub const REASON_MISSING_FIELD: &str = "missing field";
pub const REASON_EMPTY_ID: &str = "empty identifier";
pub const REASON_BAD_TIMESTAMP: &str = "bad timestamp";
pub const REASON_BAD_COORDINATE: &str = "bad coordinate";
pub const REASON_NON_POSITIVE_DURATION: &str = "non-positive duration";
pub const REASON_MALFORMED: &str = "malformed row";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRef {
    pub stop_id: String,
    pub lat: f64,
    pub lon: f64,
}

impl StopRef {
    pub fn new(stop_id: impl Into<String>, lat: f64, lon: f64) -> Self {
        Self {
            stop_id: stop_id.into(),
            lat,
            lon,
        }
    }

    pub fn has_valid_coordinates(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// One boarding/alighting episode of one card on one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub card_id: String,
    pub vehicle_id: String,
    pub board_time: Timestamp,
    pub alight_time: Timestamp,
    pub board_stop: StopRef,
    pub alight_stop: StopRef,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub total_rows: usize,
    pub accepted: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
}

impl IngestReport {
    pub fn rejected(&self) -> usize {
        self.rejected_by_reason.values().sum()
    }

    fn reject(&mut self, reason: &str) {
        *self.rejected_by_reason.entry(reason.to_string()).or_default() += 1;
    }
}

/// Describes how the delimited input is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvFormat {
    pub delimiter: u8,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimeFormat {
    EpochSeconds,
    Iso8601,
}

fn parse_epoch(s: &str) -> Option<Timestamp> {
    s.parse::<i64>().ok()
}

fn parse_iso(s: &str) -> Option<Timestamp> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

fn detect_time_format(s: &str) -> Option<TimeFormat> {
    if parse_epoch(s).is_some() {
        Some(TimeFormat::EpochSeconds)
    } else if parse_iso(s).is_some() {
        Some(TimeFormat::Iso8601)
    } else {
        None
    }
}

/// Per-column timestamp format, fixed by the first value that parses.
#[derive(Debug, Default)]
struct TimeColumn {
    format: Option<TimeFormat>,
}

impl TimeColumn {
    fn parse(&mut self, raw: &str) -> Option<Timestamp> {
        let raw = raw.trim();
        let format = match self.format {
            Some(f) => f,
            None => {
                let f = detect_time_format(raw)?;
                self.format = Some(f);
                f
            }
        };
        match format {
            TimeFormat::EpochSeconds => parse_epoch(raw),
            TimeFormat::Iso8601 => parse_iso(raw),
        }
    }
}

pub fn format_timestamp(t: Timestamp) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| t.to_string())
}

struct ColumnMap([usize; 10]);

impl ColumnMap {
    fn from_headers(headers: &csv::StringRecord) -> Result<Self> {
        let index: HashMap<&str, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim(), i))
            .collect();
        let mut cols = [0usize; 10];
        for (slot, name) in cols.iter_mut().zip(COLUMNS) {
            *slot = *index
                .get(name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        }
        Ok(Self(cols))
    }

    fn get<'r>(&self, row: &'r csv::StringRecord, col: usize) -> Option<&'r str> {
        row.get(self.0[col])
    }
}

fn parse_row(
    row: &csv::StringRecord,
    cols: &ColumnMap,
    board_col: &mut TimeColumn,
    alight_col: &mut TimeColumn,
) -> std::result::Result<TripRecord, &'static str> {
    let mut fields = [""; 10];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = cols.get(row, i).ok_or(REASON_MISSING_FIELD)?.trim();
    }
    let [card, vehicle, board_t, alight_t, bstop, blat, blon, astop, alat, alon] = fields;
    if card.is_empty() || vehicle.is_empty() || bstop.is_empty() || astop.is_empty() {
        return Err(REASON_EMPTY_ID);
    }
    let board_time = board_col.parse(board_t).ok_or(REASON_BAD_TIMESTAMP)?;
    let alight_time = alight_col.parse(alight_t).ok_or(REASON_BAD_TIMESTAMP)?;

    let coord = |s: &str| s.parse::<f64>().map_err(|_| REASON_BAD_COORDINATE);
    let board_stop = StopRef::new(bstop, coord(blat)?, coord(blon)?);
    let alight_stop = StopRef::new(astop, coord(alat)?, coord(alon)?);
    if !board_stop.has_valid_coordinates() || !alight_stop.has_valid_coordinates() {
        return Err(REASON_BAD_COORDINATE);
    }
    if alight_time <= board_time {
        return Err(REASON_NON_POSITIVE_DURATION);
    }
    Ok(TripRecord {
        card_id: card.to_string(),
        vehicle_id: vehicle.to_string(),
        board_time,
        alight_time,
        board_stop,
        alight_stop,
    })
}

/// Parses a trip table. Output preserves input order; every data row is
/// either accepted or counted under a rejection reason.
pub fn parse_trip_records<R: Read>(
    input: R,
    format: CsvFormat,
) -> Result<(Vec<TripRecord>, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let cols = ColumnMap::from_headers(&headers)?;

    let mut report = IngestReport::default();
    let mut records = Vec::new();
    let mut board_col = TimeColumn::default();
    let mut alight_col = TimeColumn::default();
    let mut row = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {
                report.total_rows += 1;
                match parse_row(&row, &cols, &mut board_col, &mut alight_col) {
                    Ok(rec) => {
                        report.accepted += 1;
                        records.push(rec);
                    }
                    Err(reason) => report.reject(reason),
                }
            }
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => return Err(e.into()),
                _ => {
                    report.total_rows += 1;
                    report.reject(REASON_MALFORMED);
                }
            },
        }
    }
    Ok((records, report))
}

/// Writes records in the canonical column order with ISO-8601 UTC times.
pub fn write_trip_records<W: Write>(out: W, records: &[TripRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record([
            r.card_id.as_str(),
            r.vehicle_id.as_str(),
            &format_timestamp(r.board_time),
            &format_timestamp(r.alight_time),
            r.board_stop.stop_id.as_str(),
            &r.board_stop.lat.to_string(),
            &r.board_stop.lon.to_string(),
            r.alight_stop.stop_id.as_str(),
            &r.alight_stop.lat.to_string(),
            &r.alight_stop.lon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn trips_per_card(records: &[TripRecord]) -> HashMap<&str, usize> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.card_id.as_str()).or_default() += 1;
    }
    counts
}

/// Keeps only the records of cards with at least `threshold` trips.
pub fn filter_by_min_trips(records: Vec<TripRecord>, threshold: usize) -> Vec<TripRecord> {
    if threshold <= 1 {
        return records;
    }
    let keep: std::collections::HashSet<String> = trips_per_card(&records)
        .into_iter()
        .filter(|&(_, n)| n >= threshold)
        .map(|(c, _)| c.to_string())
        .collect();
    records
        .into_iter()
        .filter(|r| keep.contains(&r.card_id))
        .collect()
}

/// Histogram of trips-per-card to number of cards.
pub fn trip_frequency_distribution(records: &[TripRecord]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for n in trips_per_card(records).into_values() {
        *hist.entry(n).or_default() += 1;
    }
    hist
}

/// Surviving population for each threshold. Thresholds must be strictly
/// increasing.
pub fn population_vs_threshold(
    records: &[TripRecord],
    thresholds: &[usize],
) -> Result<Vec<(usize, usize)>> {
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("thresholds must be strictly increasing"));
    }
    let hist = trip_frequency_distribution(records);
    Ok(thresholds
        .iter()
        .map(|&t| (t, hist.range(t..).map(|(_, c)| c).sum()))
        .collect())
}

/// Writes a two-column histogram table.
pub fn write_histogram<W: Write, K: std::fmt::Display, V: std::fmt::Display>(
    out: W,
    key_header: &str,
    value_header: &str,
    rows: impl IntoIterator<Item = (K, V)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([key_header, value_header])?;
    for (k, v) in rows {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "card_id,vehicle_id,board_time,alight_time,board_stop_id,board_lat,board_lon,alight_stop_id,alight_lat,alight_lon\n";

    fn parse(body: &str) -> (Vec<TripRecord>, IngestReport) {
        parse_trip_records(format!("{HEADER}{body}").as_bytes(), CsvFormat::default()).unwrap()
    }

    fn trip(card: &str, t: i64) -> TripRecord {
        TripRecord {
            card_id: card.into(),
            vehicle_id: "bus".into(),
            board_time: t,
            alight_time: t + 60,
            board_stop: StopRef::new("s1", -33.8, 151.2),
            alight_stop: StopRef::new("s2", -33.9, 151.1),
        }
    }

    #[test]
    fn well_formed_rows_pass_through() {
        let (recs, report) = parse(
            "a,v1,100,200,s1,-33.8,151.2,s2,-33.9,151.1\n\
             b,v1,150,250,s1,-33.8,151.2,s2,-33.9,151.1\n\
             c,v2,1491030000,1491031800,s1,-33.8,151.2,s1,-33.8,151.2\n",
        );
        assert_eq!(recs.len(), 3);
        assert_eq!(report.accepted, 3);
        assert_eq!(report.total_rows, 3);
        assert!(report.rejected_by_reason.is_empty());
        assert_eq!(recs[0].card_id, "a");
        assert_eq!(recs[2].card_id, "c");
    }

    #[test]
    fn iso_column_detected_per_column() {
        let (recs, report) = parse(
            "a,v1,2017-04-01T07:00:00Z,2017-04-01 07:30:00,s1,0,0,s2,0,1\n\
             b,v1,2017-04-01T08:00:00+10:00,2017-04-01 09:30:00,s1,0,0,s2,0,1\n",
        );
        assert_eq!(report.accepted, 2);
        assert_eq!(recs[0].board_time, 1491030000);
        assert_eq!(recs[0].alight_time - recs[0].board_time, 1800);
    }

    #[test]
    fn non_positive_duration_rejected() {
        let (recs, report) = parse(
            "a,v1,200,200,s1,0,0,s2,0,1\n\
             b,v1,300,100,s1,0,0,s2,0,1\n",
        );
        assert!(recs.is_empty());
        assert_eq!(report.rejected_by_reason[REASON_NON_POSITIVE_DURATION], 2);
    }

    #[test]
    fn bad_timestamp_counted() {
        let (recs, report) = parse(
            "a,v1,100,200,s1,0,0,s2,0,1\n\
             b,v1,100,200,s1,0,0,s2,0,1\n\
             c,v1,yesterday,200,s1,0,0,s2,0,1\n\
             d,v1,100,200,s1,0,0,s2,0,1\n\
             e,v1,100,200,s1,0,0,s2,0,1\n",
        );
        assert_eq!(recs.len(), 4);
        assert_eq!(report.accepted, 4);
        assert_eq!(report.rejected_by_reason.len(), 1);
        assert_eq!(report.rejected_by_reason[REASON_BAD_TIMESTAMP], 1);
        assert_eq!(report.accepted + report.rejected(), report.total_rows);
    }

    #[test]
    fn coordinate_and_field_rejections() {
        let (_, report) = parse(
            "a,v1,100,200,s1,95,0,s2,0,1\n\
             b,v1,100,200,s1,0,x,s2,0,1\n\
             c,v1,100,200\n\
             ,v1,100,200,s1,0,0,s2,0,1\n",
        );
        assert_eq!(report.rejected_by_reason[REASON_BAD_COORDINATE], 2);
        assert_eq!(report.rejected_by_reason[REASON_MISSING_FIELD], 1);
        assert_eq!(report.rejected_by_reason[REASON_EMPTY_ID], 1);
        assert_eq!(report.accepted, 0);
    }

    #[test]
    fn missing_column_is_fatal() {
        let input = "card_id,vehicle_id,board_time\na,b,1\n";
        let err = parse_trip_records(input.as_bytes(), CsvFormat::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "alight_time"));
    }

    #[test]
    fn custom_delimiter_and_column_order() {
        let input = "alight_lon;alight_lat;alight_stop_id;board_lon;board_lat;board_stop_id;alight_time;board_time;vehicle_id;card_id\n\
                     1;0;s2;0;0;s1;200;100;v;a\n";
        let (recs, report) =
            parse_trip_records(input.as_bytes(), CsvFormat { delimiter: b';' }).unwrap();
        assert_eq!(report.accepted, 1);
        assert_eq!(recs[0].alight_stop.lon, 1.0);
        assert_eq!(recs[0].board_time, 100);
    }

    #[test]
    fn write_then_parse_is_lossless() {
        let recs = vec![trip("a", 1_491_000_000), trip("b", 1_491_000_123)];
        let mut buf = Vec::new();
        write_trip_records(&mut buf, &recs).unwrap();
        let (back, report) = parse_trip_records(buf.as_slice(), CsvFormat::default()).unwrap();
        assert_eq!(report.accepted, 2);
        assert_eq!(back, recs);
    }

    #[test]
    fn min_trip_filter() {
        let mut recs: Vec<_> = (0..16).map(|i| trip("A", i * 100)).collect();
        recs.extend((0..2).map(|i| trip("B", i * 100)));
        let kept = filter_by_min_trips(recs.clone(), 15);
        assert_eq!(kept.len(), 16);
        assert!(kept.iter().all(|r| r.card_id == "A"));
        assert_eq!(filter_by_min_trips(recs.clone(), 1), recs);
        assert!(filter_by_min_trips(recs, 17).is_empty());
    }

    #[test]
    fn frequency_histogram() {
        let recs = vec![trip("a", 0), trip("b", 0), trip("c", 0), trip("c", 10)];
        let hist = trip_frequency_distribution(&recs);
        assert_eq!(hist, BTreeMap::from([(1, 2), (2, 1)]));
        assert!(trip_frequency_distribution(&[]).is_empty());

        let recs: Vec<_> = ["x", "y", "z"]
            .iter()
            .flat_map(|c| (0..15).map(move |i| trip(c, i)))
            .collect();
        assert_eq!(trip_frequency_distribution(&recs), BTreeMap::from([(15, 3)]));
    }

    #[test]
    fn population_curve() {
        let mut recs = vec![trip("a", 0)];
        recs.extend((0..2).map(|i| trip("b", i)));
        recs.extend((0..16).map(|i| trip("c", i)));
        assert_eq!(
            population_vs_threshold(&recs, &[1, 2, 15]).unwrap(),
            vec![(1, 3), (2, 2), (15, 1)]
        );
        assert_eq!(population_vs_threshold(&recs, &[1]).unwrap(), vec![(1, 3)]);
        assert!(matches!(
            population_vs_threshold(&recs, &[2, 2]),
            Err(Error::InvalidArgument(_))
        ));
    }
}

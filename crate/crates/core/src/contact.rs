//! Vehicle presence timelines and exposure extraction.
//!
//! Passengers and vehicles are interned into dense indices by [`TripIndex`];
//! indices follow the lexicographic order of the original identifiers, so
//! ordering by index is ordering by id.
//!
//! An infectious passenger present on a vehicle during `[a, b]` deposits
//! pathogens that stay viable on that vehicle until `b + d_t`. Every other
//! passenger whose presence on the same vehicle intersects `[a, b + d_t]` is
//! exposed: directly if the presences overlap, indirectly otherwise.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::trip_ingest::{format_timestamp, TripRecord};
use crate::{Seconds, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trip {
    pub card: u32,
    pub vehicle: u32,
    pub enter: Timestamp,
    pub exit: Timestamp,
}

/// Dense, id-ordered view of a validated trip set.
#[derive(Debug, Clone, Default)]
pub struct TripIndex {
    pub cards: Vec<String>,
    pub vehicles: Vec<String>,
    /// One entry per input record, in input order.
    pub trips: Vec<Trip>,
}

fn intern<'a>(ids: impl Iterator<Item = &'a str>) -> (Vec<String>, HashMap<&'a str, u32>) {
    let mut sorted: Vec<&str> = ids.collect();
    sorted.sort_unstable();
    sorted.dedup();
    let lookup = sorted.iter().enumerate().map(|(i, s)| (*s, i as u32)).collect();
    (sorted.into_iter().map(str::to_string).collect(), lookup)
}

impl TripIndex {
    pub fn new(records: &[TripRecord]) -> Self {
        let (cards, card_ix) = intern(records.iter().map(|r| r.card_id.as_str()));
        let (vehicles, veh_ix) = intern(records.iter().map(|r| r.vehicle_id.as_str()));
        let trips = records
            .iter()
            .map(|r| Trip {
                card: card_ix[r.card_id.as_str()],
                vehicle: veh_ix[r.vehicle_id.as_str()],
                enter: r.board_time,
                exit: r.alight_time,
            })
            .collect();
        Self {
            cards,
            vehicles,
            trips,
        }
    }

    pub fn population(&self) -> usize {
        self.cards.len()
    }

    pub fn card_index(&self, card: &str) -> Option<u32> {
        self.cards.binary_search_by(|c| c.as_str().cmp(card)).ok().map(|i| i as u32)
    }

    /// Earliest boarding and latest alighting over all trips.
    pub fn time_span(&self) -> Option<(Timestamp, Timestamp)> {
        let start = self.trips.iter().map(|t| t.enter).min()?;
        let end = self.trips.iter().map(|t| t.exit).max()?;
        Some((start, end))
    }
}

/// One passenger's stay on one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceInterval {
    pub card: u32,
    pub vehicle: u32,
    /// Index of the originating trip in [`TripIndex::trips`].
    pub trip: u32,
    pub enter: Timestamp,
    pub exit: Timestamp,
}

/// Presence intervals grouped by vehicle index, each sorted by entry time.
#[derive(Debug, Clone, Default)]
pub struct Timelines {
    pub by_vehicle: Vec<Vec<PresenceInterval>>,
    /// Longest presence per vehicle; bounds the backward overlap scan.
    max_stay: Vec<Seconds>,
}

impl Timelines {
    pub fn interval_count(&self) -> usize {
        self.by_vehicle.iter().map(Vec::len).sum()
    }
}

pub fn build_presence_intervals(index: &TripIndex) -> Timelines {
    let mut by_vehicle = vec![Vec::new(); index.vehicles.len()];
    for (i, t) in index.trips.iter().enumerate() {
        by_vehicle[t.vehicle as usize].push(PresenceInterval {
            card: t.card,
            vehicle: t.vehicle,
            trip: i as u32,
            enter: t.enter,
            exit: t.exit,
        });
    }
    for tl in &mut by_vehicle {
        tl.sort_by_key(|p| (p.enter, p.card, p.trip));
    }
    let max_stay = by_vehicle
        .iter()
        .map(|tl| tl.iter().map(|p| p.exit - p.enter).max().unwrap_or(0))
        .collect();
    Timelines {
        by_vehicle,
        max_stay,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExposureKind {
    Direct,
    Indirect,
}

impl ExposureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExposureKind::Direct => "direct",
            ExposureKind::Indirect => "indirect",
        }
    }
}

/// A directed opportunity for `source` to infect `target` on one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureEvent {
    pub source: u32,
    pub target: u32,
    pub vehicle: u32,
    pub source_trip: u32,
    pub target_trip: u32,
    pub start: Timestamp,
    pub end: Timestamp,
    pub kind: ExposureKind,
}

impl ExposureEvent {
    /// Identity that does not depend on `d_t`: the pair of presences.
    pub fn key(&self) -> (u32, u32) {
        (self.source_trip, self.target_trip)
    }

    fn sort_key(&self) -> (Timestamp, u32, u32, u32, u32, u32) {
        (
            self.start,
            self.source,
            self.target,
            self.vehicle,
            self.source_trip,
            self.target_trip,
        )
    }
}

/// Exposures caused by one source presence on its vehicle's timeline.
pub fn exposures_from(
    timeline: &[PresenceInterval],
    source: &PresenceInterval,
    d_t: Seconds,
    max_stay: Seconds,
    out: &mut Vec<ExposureEvent>,
) {
    let (a, b) = (source.enter, source.exit);
    let lo = timeline.partition_point(|p| p.enter < a - max_stay);
    let hi = timeline.partition_point(|p| p.enter <= b + d_t);
    for p in &timeline[lo..hi] {
        if p.card == source.card || p.exit < a {
            continue;
        }
        let (start, end, kind) = if p.enter <= b {
            (p.enter.max(a), p.exit.min(b), ExposureKind::Direct)
        } else {
            (p.enter, p.exit.min(b + d_t), ExposureKind::Indirect)
        };
        out.push(ExposureEvent {
            source: source.card,
            target: p.card,
            vehicle: source.vehicle,
            source_trip: source.trip,
            target_trip: p.trip,
            start,
            end,
            kind,
        });
    }
}

/// All exposures for suspension time `d_t`, sorted by start time, then
/// source, target, vehicle and trip indices.
pub fn extract_exposures(timelines: &Timelines, d_t: Seconds) -> Vec<ExposureEvent> {
    assert!(d_t >= 0, "suspension time must be non-negative");
    let mut all: Vec<ExposureEvent> = timelines
        .by_vehicle
        .par_iter()
        .zip(timelines.max_stay.par_iter())
        .flat_map_iter(|(tl, &max_stay)| {
            let mut out = Vec::new();
            for src in tl {
                exposures_from(tl, src, d_t, max_stay, &mut out);
            }
            out
        })
        .collect();
    all.par_sort_unstable_by_key(ExposureEvent::sort_key);
    all
}

/// Direct co-presence episodes per passenger. Each episode shows up as two
/// directed events, one per endpoint, so counting sources counts every
/// episode once for each participant.
pub fn degrees(exposures: &[ExposureEvent], population: usize) -> Vec<u64> {
    let mut deg = vec![0u64; population];
    for e in exposures.iter().filter(|e| e.kind == ExposureKind::Direct) {
        deg[e.source as usize] += 1;
    }
    deg
}

/// Histogram of degree to number of passengers (isolated passengers have
/// degree 0).
pub fn degree_distribution(exposures: &[ExposureEvent], population: usize) -> BTreeMap<u64, usize> {
    let mut hist = BTreeMap::new();
    for d in degrees(exposures, population) {
        *hist.entry(d).or_default() += 1;
    }
    hist
}

/// Sizes of the connected components of the direct-contact graph, largest
/// first. Isolated passengers are components of size one.
pub fn connected_components(exposures: &[ExposureEvent], population: usize) -> Vec<usize> {
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); population];
    for e in exposures.iter().filter(|e| e.kind == ExposureKind::Direct) {
        adj[e.source as usize].push(e.target);
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let mut seen = vec![false; population];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..population {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        while let Some(u) = queue.pop_front() {
            size += 1;
            for &v in &adj[u] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back(v as usize);
                }
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

pub fn write_exposures_csv<W: Write>(
    out: W,
    index: &TripIndex,
    exposures: &[ExposureEvent],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "target", "vehicle_id", "start", "end", "kind"])?;
    for e in exposures {
        w.write_record([
            index.cards[e.source as usize].as_str(),
            index.cards[e.target as usize].as_str(),
            index.vehicles[e.vehicle as usize].as_str(),
            &format_timestamp(e.start),
            &format_timestamp(e.end),
            e.kind.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trip_ingest::StopRef;

    const MIN: i64 = 60;

    pub(crate) fn rec(card: &str, vehicle: &str, enter: i64, exit: i64) -> TripRecord {
        TripRecord {
            card_id: card.into(),
            vehicle_id: vehicle.into(),
            board_time: enter,
            alight_time: exit,
            board_stop: StopRef::new("s", 0.0, 0.0),
            alight_stop: StopRef::new("t", 0.0, 0.0),
        }
    }

    fn exposures(records: &[TripRecord], d_t: Seconds) -> Vec<ExposureEvent> {
        extract_exposures(&build_presence_intervals(&TripIndex::new(records)), d_t)
    }

    #[test]
    fn index_is_id_ordered() {
        let idx = TripIndex::new(&[rec("b", "v2", 0, 1), rec("a", "v1", 0, 1), rec("b", "v1", 2, 3)]);
        assert_eq!(idx.cards, ["a", "b"]);
        assert_eq!(idx.vehicles, ["v1", "v2"]);
        assert_eq!(idx.trips[0].card, 1);
        assert_eq!(idx.card_index("b"), Some(1));
        assert_eq!(idx.card_index("z"), None);
    }

    #[test]
    fn timelines_group_by_vehicle() {
        let recs = [rec("a", "bus", 10, 20), rec("b", "bus", 5, 30), rec("c", "tram", 0, 9)];
        let tl = build_presence_intervals(&TripIndex::new(&recs));
        assert_eq!(tl.by_vehicle.len(), 2);
        assert_eq!(tl.by_vehicle[0].len(), 2);
        assert_eq!(tl.by_vehicle[0][0].enter, 5);
        assert_eq!(tl.interval_count(), 3);
    }

    #[test]
    fn overlapping_presence_is_direct() {
        let ex = exposures(&[rec("A", "bus", 0, 20 * MIN), rec("B", "bus", 10 * MIN, 30 * MIN)], 0);
        assert_eq!(ex.len(), 2);
        for e in &ex {
            assert_eq!(e.kind, ExposureKind::Direct);
            assert_eq!((e.start, e.end), (10 * MIN, 20 * MIN));
        }
    }

    #[test]
    fn later_boarding_within_suspension_is_indirect() {
        let recs = [rec("A", "bus", 0, 10 * MIN), rec("B", "bus", 15 * MIN, 25 * MIN)];
        let ex = exposures(&recs, 15 * MIN);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].kind, ExposureKind::Indirect);
        assert_eq!(ex[0].source, 0);
        assert_eq!((ex[0].start, ex[0].end), (15 * MIN, 25 * MIN));

        assert!(exposures(&recs, 0).is_empty());
        // Window is clipped at the end of suspension.
        let ex = exposures(&recs, 20 * MIN);
        assert_eq!(ex[0].end, 25 * MIN);
        let ex = exposures(&[rec("A", "bus", 0, 10 * MIN), rec("B", "bus", 15 * MIN, 40 * MIN)], 15 * MIN);
        assert_eq!(ex[0].end, 25 * MIN);
    }

    #[test]
    fn touching_presences_meet() {
        let ex = exposures(&[rec("A", "bus", 0, 100), rec("B", "bus", 100, 200)], 0);
        assert_eq!(ex.len(), 2);
        assert_eq!((ex[0].start, ex[0].end), (100, 100));
    }

    #[test]
    fn no_cross_vehicle_or_self_exposure() {
        let ex = exposures(
            &[rec("A", "bus", 0, 100), rec("B", "tram", 0, 100), rec("A", "bus", 50, 150)],
            0,
        );
        assert!(ex.is_empty());
    }

    #[test]
    fn degree_and_components() {
        let recs = [
            rec("a", "bus", 0, 100),
            rec("b", "bus", 10, 100),
            rec("c", "bus", 20, 100),
            rec("d", "tram", 0, 10),
        ];
        let ex = exposures(&recs, 0);
        assert_eq!(degrees(&ex, 4), [2, 2, 2, 0]);
        assert_eq!(degree_distribution(&ex, 4), BTreeMap::from([(0, 1), (2, 3)]));
        assert_eq!(connected_components(&ex, 4), [3, 1]);

        let pairs = [
            rec("a", "x", 0, 10),
            rec("b", "x", 5, 15),
            rec("c", "y", 0, 10),
            rec("d", "y", 5, 15),
        ];
        assert_eq!(connected_components(&exposures(&pairs, 0), 4), [2, 2]);

        let chain = [rec("a", "x", 0, 10), rec("b", "x", 5, 15), rec("b", "y", 20, 30), rec("c", "y", 25, 35)];
        assert_eq!(connected_components(&exposures(&chain, 0), 3), [3]);
    }

    #[test]
    fn repeated_meetings_count_each_time() {
        let recs: Vec<_> = (0..3)
            .flat_map(|i| [rec("A", "bus", i * 1000, i * 1000 + 100), rec("B", "bus", i * 1000 + 50, i * 1000 + 150)])
            .collect();
        assert_eq!(degrees(&exposures(&recs, 0), 2), [3, 3]);
    }
}

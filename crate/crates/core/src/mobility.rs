//! Per-passenger mobility metrics: total radius of gyration, k-radius of
//! gyration and direct encounter counts.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::trip_ingest::TripRecord;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// How visit positions are interpreted when measuring distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceModel {
    /// Positions are `[lat, lon]` in degrees; great-circle distance on a
    /// sphere of radius [`EARTH_RADIUS_M`].
    #[default]
    Haversine,
    /// Positions are `[x, y]` in metres; Euclidean distance.
    Planar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub stop_id: String,
    pub position: [f64; 2],
    pub count: u64,
}

/// Distinct locations a passenger visited together with visit frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitProfile {
    pub card_id: String,
    /// Sorted by stop id.
    pub visits: Vec<Visit>,
}

impl VisitProfile {
    /// Total visit weight, the sum of all visit counts.
    pub fn total_weight(&self) -> u64 {
        self.visits.iter().map(|v| v.count).sum()
    }

    pub fn centre_of_mass(&self, model: DistanceModel) -> [f64; 2] {
        centre_of_mass(&self.visits, model)
    }

    /// The `k` most visited locations; ties broken by stop id.
    pub fn top_k(&self, k: usize) -> Vec<Visit> {
        let mut v = self.visits.clone();
        v.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.stop_id.cmp(&b.stop_id)));
        v.truncate(k);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityVector {
    pub card_id: String,
    /// Total radius of gyration in metres.
    pub rg: f64,
    /// k-radius of gyration in metres.
    pub rgk: f64,
    pub k: usize,
    pub encounters: u64,
}

pub fn distance(a: [f64; 2], b: [f64; 2], model: DistanceModel) -> f64 {
    match model {
        DistanceModel::Planar => (a[0] - b[0]).hypot(a[1] - b[1]),
        DistanceModel::Haversine => {
            let (lat1, lon1) = (a[0].to_radians(), a[1].to_radians());
            let (lat2, lon2) = (b[0].to_radians(), b[1].to_radians());
            let h = ((lat2 - lat1) / 2.0).sin().powi(2)
                + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
            2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
        }
    }
}

fn centre_of_mass(visits: &[Visit], model: DistanceModel) -> [f64; 2] {
    let total: f64 = visits.iter().map(|v| v.count as f64).sum();
    match model {
        DistanceModel::Planar => {
            let mut c = [0.0; 2];
            for v in visits {
                let w = v.count as f64 / total;
                c[0] += w * v.position[0];
                c[1] += w * v.position[1];
            }
            c
        }
        DistanceModel::Haversine => {
            // Weighted mean of unit vectors, projected back onto the sphere.
            let mut s = [0.0f64; 3];
            for v in visits {
                let (lat, lon) = (v.position[0].to_radians(), v.position[1].to_radians());
                let w = v.count as f64;
                s[0] += w * lat.cos() * lon.cos();
                s[1] += w * lat.cos() * lon.sin();
                s[2] += w * lat.sin();
            }
            let norm = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
            if norm < 1e-12 * total {
                return visits[0].position;
            }
            let lat = (s[2] / norm).asin().to_degrees();
            let lon = s[1].atan2(s[0]).to_degrees();
            [lat, lon]
        }
    }
}

fn gyration(visits: &[Visit], model: DistanceModel) -> f64 {
    if visits.len() <= 1 {
        return 0.0;
    }
    let cm = centre_of_mass(visits, model);
    let total: f64 = visits.iter().map(|v| v.count as f64).sum();
    let sum: f64 = visits
        .iter()
        .map(|v| v.count as f64 * distance(v.position, cm, model).powi(2))
        .sum();
    (sum / total).sqrt()
}

/// Tallies visits over one card's trips: every boarding and every alighting
/// counts as one visit to that stop.
pub fn build_visit_profile(records: &[&TripRecord]) -> Result<VisitProfile> {
    let first = records
        .first()
        .ok_or_else(|| invalid("visit profile needs at least one trip"))?;
    let mut tally: BTreeMap<&str, Visit> = BTreeMap::new();
    for r in records {
        for stop in [&r.board_stop, &r.alight_stop] {
            tally
                .entry(stop.stop_id.as_str())
                .or_insert_with(|| Visit {
                    stop_id: stop.stop_id.clone(),
                    position: [stop.lat, stop.lon],
                    count: 0,
                })
                .count += 1;
        }
    }
    Ok(VisitProfile {
        card_id: first.card_id.clone(),
        visits: tally.into_values().collect(),
    })
}

/// Frequency-weighted RMS distance of visited locations from their centre
/// of mass. Zero for a single location.
pub fn radius_of_gyration(profile: &VisitProfile, model: DistanceModel) -> f64 {
    gyration(&profile.visits, model)
}

/// Radius of gyration restricted to the `k` most visited locations, with
/// the centre of mass and total weight recomputed over that subset.
pub fn k_radius_of_gyration(profile: &VisitProfile, k: usize, model: DistanceModel) -> f64 {
    if profile.visits.len() <= k {
        return radius_of_gyration(profile, model);
    }
    gyration(&profile.top_k(k), model)
}

/// Direct co-presence episodes involving `card` in a `d_t = 0` exposure log
/// given as `(source, target)` card pairs. Each episode appears once per
/// direction, so counting the card as source counts each episode once.
pub fn encounter_count<'a>(card: &str, log: impl IntoIterator<Item = (&'a str, &'a str)>) -> u64 {
    log.into_iter().filter(|(s, _)| *s == card).count() as u64
}

/// Builds a mobility vector for every card in `records`, sorted by card id.
/// `encounters` maps card id to direct encounter count (missing means 0).
pub fn mobility_vectors(
    records: &[TripRecord],
    encounters: &HashMap<String, u64>,
    k: usize,
    model: DistanceModel,
) -> Result<Vec<MobilityVector>> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let mut by_card: BTreeMap<&str, Vec<&TripRecord>> = BTreeMap::new();
    for r in records {
        by_card.entry(r.card_id.as_str()).or_default().push(r);
    }
    by_card
        .into_iter()
        .map(|(card, trips)| {
            let profile = build_visit_profile(&trips)?;
            Ok(MobilityVector {
                card_id: card.to_string(),
                rg: radius_of_gyration(&profile, model),
                rgk: k_radius_of_gyration(&profile, k, model),
                k,
                encounters: encounters.get(card).copied().unwrap_or(0),
            })
        })
        .collect()
}

pub fn write_mobility_csv<W: Write>(out: W, vectors: &[MobilityVector]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["card_id", "rg_m", "rgk_m", "k", "encounters"])?;
    for v in vectors {
        w.write_record([
            v.card_id.clone(),
            format!("{:.6}", v.rg),
            format!("{:.6}", v.rgk),
            v.k.to_string(),
            v.encounters.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! Synthetic city generator: a straight-line bus network with fixed
//! headways and a passenger population built from four travel archetypes.
//!
//! * commuter: home and work stops on one route, peak-hour trips
//! * roamer: anchors plus exploration trips to stops it has not visited
//! * long-hauler: anchors at least 15 km apart
//! * off-peak regular: anchors, trips outside the rush hours
//!
//! Output is a pure function of the config (including its seed).

use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mobility::EARTH_RADIUS_M;
use crate::trip_ingest::{StopRef, TripRecord};
use crate::{Seconds, Timestamp};

const HOUR: Seconds = 3600;
const MIN: Seconds = 60;
const BUS_SPEED_KMH: f64 = 22.0;
const DWELL: Seconds = 30;
const LAYOVER: Seconds = 10 * MIN;
const SERVICE_START: Seconds = 5 * HOUR + 30 * MIN;
const SERVICE_END: Seconds = 23 * HOUR;
const LONG_HAUL_KM: f64 = 15.0;
const LOCAL_RADIUS_KM: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Commuter,
    Roamer,
    LongHauler,
    OffPeak,
}

fn d_passengers() -> usize {
    10_000
}
fn d_routes() -> usize {
    30
}
fn d_stops() -> usize {
    20
}
fn d_days() -> usize {
    30
}
fn d_mix() -> BTreeMap<Archetype, f64> {
    BTreeMap::from([
        (Archetype::Commuter, 0.45),
        (Archetype::Roamer, 0.30),
        (Archetype::LongHauler, 0.10),
        (Archetype::OffPeak, 0.15),
    ])
}
fn d_seed() -> u64 {
    7
}
fn d_extent() -> f64 {
    40.0
}
fn d_min_trips() -> usize {
    15
}
fn d_novelty() -> f64 {
    0.5
}
fn d_headway() -> u32 {
    15
}
fn d_start() -> Timestamp {
    // 2017-04-01T00:00:00Z
    1_491_004_800
}
fn d_centre() -> [f64; 2] {
    [-33.8688, 151.2093]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "d_passengers")]
    pub n_passengers: usize,
    #[serde(default = "d_routes")]
    pub n_routes: usize,
    #[serde(default = "d_stops")]
    pub stops_per_route: usize,
    #[serde(default = "d_days")]
    pub days: usize,
    #[serde(default = "d_mix")]
    pub archetype_mix: BTreeMap<Archetype, f64>,
    #[serde(default = "d_seed")]
    pub rng_seed: u64,
    /// Side of the square service area, in kilometres.
    #[serde(default = "d_extent")]
    pub city_extent_km: f64,
    #[serde(default = "d_min_trips")]
    pub min_trips: usize,
    /// Chance per active day that a roamer explores a new destination.
    #[serde(default = "d_novelty")]
    pub novelty_p: f64,
    #[serde(default = "d_headway")]
    pub headway_min: u32,
    /// Midnight (UTC) of the first simulated day.
    #[serde(default = "d_start")]
    pub start_epoch: Timestamp,
    /// `[lat, lon]` of the centre of the service area.
    #[serde(default = "d_centre")]
    pub centre: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SynthConfig {
    pub fn from_json<R: Read>(r: R) -> Result<Self> {
        let c: Self = serde_json::from_reader(r)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.archetype_mix.values().sum();
        if (sum - 1.0).abs() > 1e-9 || self.archetype_mix.values().any(|f| *f < 0.0) {
            return Err(invalid(format!("archetype fractions must sum to 1, got {sum}")));
        }
        for (name, v) in [
            ("n_passengers", self.n_passengers),
            ("n_routes", self.n_routes),
            ("days", self.days),
            ("min_trips", self.min_trips),
            ("headway_min", self.headway_min as usize),
        ] {
            if v < 1 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if self.stops_per_route < 2 {
            return Err(invalid("a route needs at least 2 stops"));
        }
        if !(self.city_extent_km > 0.0) {
            return Err(invalid("city extent must be positive"));
        }
        if !(0.0..=1.0).contains(&self.novelty_p) {
            return Err(invalid("novelty_p must lie in [0, 1]"));
        }
        if self.min_trips > 2 * self.days {
            return Err(invalid("min_trips exceeds two trips per day"));
        }
        Ok(())
    }

    /// Local planar offset in km (east, north) of a coordinate.
    pub fn offset_km(&self, lat: f64, lon: f64) -> [f64; 2] {
        let r_km = EARTH_RADIUS_M / 1000.0;
        let [clat, clon] = self.centre;
        [
            (lon - clon).to_radians() * r_km * clat.to_radians().cos(),
            (lat - clat).to_radians() * r_km,
        ]
    }

    fn to_latlon(&self, p: [f64; 2]) -> (f64, f64) {
        let r_km = EARTH_RADIUS_M / 1000.0;
        let [clat, clon] = self.centre;
        let lat = clat + (p[1] / r_km).to_degrees();
        let lon = clon + (p[0] / (r_km * clat.to_radians().cos())).to_degrees();
        (round6(lat), round6(lon))
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub id: String,
    /// Indices into [`BusNetwork::stops`], in forward order.
    pub stops: Vec<usize>,
    /// Seconds from departure to each stop, forward direction.
    pub forward_offsets: Vec<Seconds>,
    /// Seconds from departure to each stop of the reversed sequence.
    pub reverse_offsets: Vec<Seconds>,
    /// Daily departure times (seconds after midnight), both directions.
    pub departures: Vec<Seconds>,
    pub vehicles_per_direction: usize,
}

impl Route {
    pub fn vehicle_id(&self, dir: Direction, departure: usize) -> String {
        let d = match dir {
            Direction::Forward => 'F',
            Direction::Reverse => 'R',
        };
        format!("{}-{}-V{:02}", self.id, d, departure % self.vehicles_per_direction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusNetwork {
    pub stops: Vec<StopRef>,
    /// Planar position of each stop in km relative to the centre.
    pub stop_km: Vec<[f64; 2]>,
    pub routes: Vec<Route>,
}

fn dist_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn generate_network(config: &SynthConfig, rng: &mut impl Rng) -> Result<BusNetwork> {
    config.validate()?;
    let half = config.city_extent_km / 2.0;
    let margin = 1e-3_f64.min(half / 10.0);
    let bound = half - margin;
    let clamp = |v: f64| v.clamp(-bound, bound);
    let point = |rng: &mut dyn rand::RngCore| [rng.gen_range(-bound..=bound), rng.gen_range(-bound..=bound)];

    let headway = config.headway_min as Seconds * MIN;
    let mut stops = Vec::new();
    let mut stop_km = Vec::new();
    let mut routes = Vec::new();
    for r in 0..config.n_routes {
        let a = point(rng);
        let mut b = point(rng);
        for _ in 0..100 {
            if dist_km(a, b) >= half {
                break;
            }
            b = point(rng);
        }
        let len = dist_km(a, b).max(1e-9);
        let normal = [-(b[1] - a[1]) / len, (b[0] - a[0]) / len];
        let n = config.stops_per_route;
        let id = format!("R{r:02}");
        let mut route_stops = Vec::with_capacity(n);
        for s in 0..n {
            let f = s as f64 / (n - 1) as f64;
            let jitter = if s == 0 || s == n - 1 { 0.0 } else { rng.gen_range(-0.3..=0.3) };
            let p = [
                clamp(a[0] + f * (b[0] - a[0]) + jitter * normal[0]),
                clamp(a[1] + f * (b[1] - a[1]) + jitter * normal[1]),
            ];
            let (lat, lon) = config.to_latlon(p);
            route_stops.push(stops.len());
            stops.push(StopRef::new(format!("{id}S{s:02}"), lat, lon));
            stop_km.push(config.offset_km(lat, lon));
        }
        let offsets = |order: &mut dyn Iterator<Item = usize>| -> Vec<Seconds> {
            let order: Vec<usize> = order.collect();
            let mut out = vec![0];
            for w in order.windows(2) {
                let km = dist_km(stop_km[w[0]], stop_km[w[1]]);
                let ride = (km / BUS_SPEED_KMH * HOUR as f64).round() as Seconds;
                out.push(out.last().unwrap() + ride + DWELL);
            }
            out
        };
        let forward_offsets = offsets(&mut route_stops.iter().copied());
        let reverse_offsets = offsets(&mut route_stops.iter().rev().copied());
        let run_time = *forward_offsets.last().unwrap();
        let phase = rng.gen_range(0..headway);
        let departures = (0..)
            .map(|k| SERVICE_START + phase + k * headway)
            .take_while(|&t| t <= SERVICE_END)
            .collect();
        let vehicles = ((run_time + LAYOVER) as f64 / headway as f64).ceil() as usize;
        routes.push(Route {
            id,
            stops: route_stops,
            forward_offsets,
            reverse_offsets,
            departures,
            vehicles_per_direction: vehicles.max(1),
        });
    }
    Ok(BusNetwork {
        stops,
        stop_km,
        routes,
    })
}

/// Per-passenger travel plan.
struct Plan {
    archetype: Archetype,
    route: usize,
    home: usize,
    work: usize,
    peak: bool,
    citywide: bool,
    outbound: Seconds,
    inbound: Seconds,
}

impl BusNetwork {
    /// Builds the trip from route position `from` to `to` on the first run
    /// leaving `from` at or after `desired` (seconds after midnight).
    fn trip(
        &self,
        card: &str,
        route: usize,
        from: usize,
        to: usize,
        day_start: Timestamp,
        desired: Seconds,
    ) -> TripRecord {
        let r = &self.routes[route];
        let n = r.stops.len();
        let (dir, offs, pf, pt) = if from < to {
            (Direction::Forward, &r.forward_offsets, from, to)
        } else {
            (Direction::Reverse, &r.reverse_offsets, n - 1 - from, n - 1 - to)
        };
        let k = r
            .departures
            .iter()
            .position(|&d| d + offs[pf] >= desired)
            .unwrap_or(r.departures.len() - 1);
        let dep = day_start + r.departures[k];
        TripRecord {
            card_id: card.to_string(),
            vehicle_id: r.vehicle_id(dir, k),
            board_time: dep + offs[pf],
            alight_time: dep + offs[pt],
            board_stop: self.stops[r.stops[from]].clone(),
            alight_stop: self.stops[r.stops[to]].clone(),
        }
    }

    fn route_length_km(&self, route: usize) -> f64 {
        let s = &self.routes[route].stops;
        dist_km(self.stop_km[s[0]], self.stop_km[s[s.len() - 1]])
    }
}

fn pick_archetype(mix: &BTreeMap<Archetype, f64>, u: f64) -> Archetype {
    let mut acc = 0.0;
    let mut last = Archetype::Commuter;
    for (&a, &f) in mix {
        if f <= 0.0 {
            continue;
        }
        acc += f;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

fn uniform_time(rng: &mut impl Rng, from_h: f64, to_h: f64) -> Seconds {
    (rng.gen_range(from_h..to_h) * HOUR as f64) as Seconds
}

fn make_plan(config: &SynthConfig, net: &BusNetwork, rng: &mut impl Rng) -> Plan {
    let archetype = pick_archetype(&config.archetype_mix, rng.gen());
    let n = config.stops_per_route;
    let peak = match archetype {
        Archetype::Commuter => true,
        Archetype::OffPeak => false,
        Archetype::Roamer | Archetype::LongHauler => rng.gen_bool(0.5),
    };
    let citywide = archetype == Archetype::Roamer && rng.gen_bool(0.5);

    let (route, home, work) = if archetype == Archetype::LongHauler {
        let long: Vec<usize> = (0..net.routes.len())
            .filter(|&r| net.route_length_km(r) >= LONG_HAUL_KM)
            .collect();
        let route = match long.choose(rng) {
            Some(&r) => r,
            None => rng.gen_range(0..net.routes.len()),
        };
        let stops = &net.routes[route].stops;
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| dist_km(net.stop_km[stops[i]], net.stop_km[stops[j]]) >= LONG_HAUL_KM)
            .collect();
        let (i, j) = pairs.choose(rng).copied().unwrap_or((0, n - 1));
        if rng.gen_bool(0.5) {
            (route, i, j)
        } else {
            (route, j, i)
        }
    } else {
        let route = rng.gen_range(0..net.routes.len());
        let max_gap = if archetype == Archetype::Roamer && !citywide { 2 } else { 6 };
        let home = rng.gen_range(0..n);
        let gap = rng.gen_range(1..=max_gap.min(n - 1));
        let work = if home + gap < n && (home < gap || rng.gen_bool(0.5)) {
            home + gap
        } else if home >= gap {
            home - gap
        } else {
            home + gap
        };
        (route, home, work.min(n - 1))
    };
    let work = if work == home { (home + 1) % n } else { work };

    let (outbound, inbound) = if peak {
        (uniform_time(rng, 7.0, 9.0), uniform_time(rng, 16.5, 18.5))
    } else if rng.gen_bool(0.5) {
        (uniform_time(rng, 9.75, 11.5), uniform_time(rng, 13.0, 15.0))
    } else {
        (uniform_time(rng, 10.5, 12.5), uniform_time(rng, 19.5, 21.5))
    };
    Plan {
        archetype,
        route,
        home,
        work,
        peak,
        citywide,
        outbound,
        inbound,
    }
}

fn active_days(config: &SynthConfig, plan: &Plan, rng: &mut impl Rng) -> Vec<usize> {
    let (weekday_p, weekend_p) = match plan.archetype {
        Archetype::OffPeak => (0.7, 0.4),
        _ if plan.peak => (0.9, 0.15),
        _ => (0.75, 0.35),
    };
    let mut active: Vec<bool> = (0..config.days)
        .map(|d| rng.gen_bool(if d % 7 < 5 { weekday_p } else { weekend_p }))
        .collect();
    let needed = config.min_trips.div_ceil(2);
    let mut count = active.iter().filter(|a| **a).count();
    let mut order: Vec<usize> = (0..config.days).collect();
    order.shuffle(rng);
    for d in order {
        if count >= needed {
            break;
        }
        if !active[d] {
            active[d] = true;
            count += 1;
        }
    }
    (0..config.days).filter(|&d| active[d]).collect()
}

/// Route positions of stops not yet visited by this passenger; `local`
/// restricts to stops near `home`.
fn exploration_target(
    net: &BusNetwork,
    plan: &Plan,
    visited: &HashSet<usize>,
    rng: &mut impl Rng,
) -> Option<(usize, usize, usize)> {
    let home_km = net.stop_km[net.routes[plan.route].stops[plan.home]];
    for _ in 0..50 {
        let route = rng.gen_range(0..net.routes.len());
        let stops = &net.routes[route].stops;
        let candidates: Vec<usize> = (0..stops.len())
            .filter(|&i| {
                plan.citywide || dist_km(net.stop_km[stops[i]], home_km) <= LOCAL_RADIUS_KM
            })
            .collect();
        if candidates.len() < 2 {
            continue;
        }
        let a = *candidates.choose(rng).unwrap();
        let b = *candidates.choose(rng).unwrap();
        if a == b || visited.contains(&stops[a]) || visited.contains(&stops[b]) {
            continue;
        }
        return Some((route, a, b));
    }
    None
}

pub fn generate_passengers(
    config: &SynthConfig,
    net: &BusNetwork,
    rng: &mut impl Rng,
) -> Result<Vec<TripRecord>> {
    config.validate()?;
    if net.routes.is_empty() {
        return Err(invalid("network has no routes"));
    }
    let jitter = 10 * MIN;
    let mut trips = Vec::new();
    for p in 0..config.n_passengers {
        let card = format!("C{p:06}");
        let plan = make_plan(config, net, rng);
        let days = active_days(config, &plan, rng);
        let mut visited: HashSet<usize> = [plan.home, plan.work]
            .iter()
            .map(|&i| net.routes[plan.route].stops[i])
            .collect();
        for d in days {
            let day_start = config.start_epoch + (d as Timestamp) * 24 * HOUR;
            let out_t = plan.outbound + rng.gen_range(-jitter..=jitter);
            let in_t = plan.inbound + rng.gen_range(-jitter..=jitter);
            trips.push(net.trip(&card, plan.route, plan.home, plan.work, day_start, out_t));
            trips.push(net.trip(&card, plan.route, plan.work, plan.home, day_start, in_t));
            if plan.archetype == Archetype::Roamer && rng.gen_bool(config.novelty_p) {
                if let Some((route, a, b)) = exploration_target(net, &plan, &visited, rng) {
                    let go = if plan.peak {
                        uniform_time(rng, 18.5, 19.5)
                    } else {
                        uniform_time(rng, 15.0, 16.0)
                    };
                    let first = net.trip(&card, route, a, b, day_start, go);
                    let back_at = first.alight_time - day_start + rng.gen_range(30 * MIN..90 * MIN);
                    trips.push(first);
                    trips.push(net.trip(&card, route, b, a, day_start, back_at));
                    let stops = &net.routes[route].stops;
                    visited.insert(stops[a]);
                    visited.insert(stops[b]);
                }
            }
        }
    }
    Ok(trips)
}

/// Network and trips for a config, both drawn from one seeded stream.
pub fn generate(config: &SynthConfig) -> Result<(BusNetwork, Vec<TripRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let net = generate_network(config, &mut rng)?;
    let trips = generate_passengers(config, &net, &mut rng)?;
    Ok((net, trips))
}

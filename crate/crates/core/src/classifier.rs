//! Eight-way mobility classification: exploration (returner/explorer),
//! connectivity (low/high encounters) and distance (short/long radius).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mobility::MobilityVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Exploration {
    Explorer,
    Returner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Distance {
    Long,
    Short,
}

/// One of the eight `{exp|ret}_{high|low}_{long|short}` groups.
///
/// The derived ordering is alphabetical by [`MobilityGroup::name`], which is
/// also the row/column order of every group matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct MobilityGroup {
    pub exploration: Exploration,
    pub connectivity: Connectivity,
    pub distance: Distance,
}

pub const GROUP_COUNT: usize = 8;

impl MobilityGroup {
    pub const ALL: [MobilityGroup; GROUP_COUNT] = {
        let mut all = [MobilityGroup {
            exploration: Exploration::Explorer,
            connectivity: Connectivity::High,
            distance: Distance::Long,
        }; GROUP_COUNT];
        let mut i = 0;
        while i < GROUP_COUNT {
            all[i] = MobilityGroup::from_index(i);
            i += 1;
        }
        all
    };

    pub const fn new(e: Exploration, c: Connectivity, d: Distance) -> Self {
        Self {
            exploration: e,
            connectivity: c,
            distance: d,
        }
    }

    pub const fn from_index(i: usize) -> Self {
        Self {
            exploration: if i & 4 == 0 { Exploration::Explorer } else { Exploration::Returner },
            connectivity: if i & 2 == 0 { Connectivity::High } else { Connectivity::Low },
            distance: if i & 1 == 0 { Distance::Long } else { Distance::Short },
        }
    }

    pub const fn index(self) -> usize {
        (self.exploration as usize) << 2 | (self.connectivity as usize) << 1 | self.distance as usize
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; GROUP_COUNT] = [
            "exp_high_long",
            "exp_high_short",
            "exp_low_long",
            "exp_low_short",
            "ret_high_long",
            "ret_high_short",
            "ret_low_long",
            "ret_low_short",
        ];
        NAMES[self.index()]
    }
}

impl fmt::Display for MobilityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MobilityGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MobilityGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| invalid(format!("unknown mobility group `{s}`")))
    }
}

impl From<MobilityGroup> for String {
    fn from(g: MobilityGroup) -> String {
        g.name().to_string()
    }
}

impl TryFrom<String> for MobilityGroup {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Returner iff the recurrent mobility dominates: `rgk > rg / 2`.
/// A passenger with zero total radius is a returner.
pub fn classify_exploration(rg: f64, rgk: f64) -> Result<Exploration> {
    if !(rg >= 0.0 && rgk >= 0.0) {
        return Err(invalid(format!("radii must be non-negative, got rg={rg}, rgk={rgk}")));
    }
    if rg == 0.0 || rgk > rg / 2.0 {
        Ok(Exploration::Returner)
    } else {
        Ok(Exploration::Explorer)
    }
}

/// Exact two-cluster partition of scalar values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split1d {
    /// `true` for members of the cluster with the larger centroid.
    pub high: Vec<bool>,
    /// `[low, high]` cluster means.
    pub centroids: [f64; 2],
    /// Smallest value assigned to the high cluster.
    pub threshold: f64,
    /// Within-cluster sum of squares of the chosen split.
    pub sse: f64,
}

/// Globally optimal 1-D 2-means.
///
/// Scans every contiguous split of the sorted values (between distinct
/// values) and keeps the one with least within-cluster sum of squares; the
/// first split wins ties.
pub fn kmeans_1d(values: &[f64]) -> Result<Split1d> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("k-means input must be finite"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n < 2 || sorted[0] == sorted[n - 1] {
        return Err(Error::DegenerateClustering(format!(
            "need at least 2 distinct values, got {n} values"
        )));
    }

    // Welford accumulations from both ends: sse_left[i] covers sorted[..i].
    let welford = |iter: &mut dyn Iterator<Item = f64>| -> Vec<f64> {
        let mut out = vec![0.0; n + 1];
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, x) in iter.enumerate() {
            let cnt = (i + 1) as f64;
            let delta = x - mean;
            mean += delta / cnt;
            m2 += delta * (x - mean);
            out[i + 1] = m2;
        }
        out
    };
    let sse_left = welford(&mut sorted.iter().copied());
    let sse_right_rev = welford(&mut sorted.iter().rev().copied());

    let mut best: Option<(usize, f64)> = None;
    for i in 1..n {
        if sorted[i - 1] == sorted[i] {
            continue;
        }
        let sse = sse_left[i] + sse_right_rev[n - i];
        if best.map_or(true, |(_, b)| sse < b) {
            best = Some((i, sse));
        }
    }
    let (split, sse) = best.expect("at least one boundary between distinct values");
    let threshold = sorted[split];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(Split1d {
        high: values.iter().map(|&v| v >= threshold).collect(),
        centroids: [mean(&sorted[..split]), mean(&sorted[split..])],
        threshold,
        sse,
    })
}

fn min_max_normalize(values: &[f64], axis: &str) -> Result<(Vec<f64>, f64, f64)> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::DegenerateClustering(format!(
            "all {axis} values are identical"
        )));
    }
    let span = max - min;
    Ok((values.iter().map(|v| (v - min) / span).collect(), min, max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisCentroids {
    /// `[low, high]` centroids on the min-max normalized axis.
    pub normalized: [f64; 2],
    /// The same centroids in the axis' original units.
    pub raw: [f64; 2],
    pub min: f64,
    pub max: f64,
}

impl AxisCentroids {
    fn new(split: &Split1d, min: f64, max: f64) -> Self {
        let back = |c: f64| min + c * (max - min);
        Self {
            normalized: split.centroids,
            raw: [back(split.centroids[0]), back(split.centroids[1])],
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub distance: AxisCentroids,
    pub connectivity: AxisCentroids,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub assignments: BTreeMap<String, MobilityGroup>,
    pub centroids: Centroids,
    /// Fraction of the population in each group; all eight groups present.
    pub shares: BTreeMap<MobilityGroup, f64>,
}

impl ClassificationResult {
    pub fn group_sizes(&self) -> [usize; GROUP_COUNT] {
        let mut sizes = [0; GROUP_COUNT];
        for g in self.assignments.values() {
            sizes[g.index()] += 1;
        }
        sizes
    }
}

/// Labels every passenger. Distance and connectivity come from 2-means on
/// the min-max normalized radius and encounter axes; exploration uses the
/// raw radii so the bisector rule keeps its meaning.
pub fn classify_population(vectors: &[MobilityVector]) -> Result<ClassificationResult> {
    if vectors.len() < 2 {
        return Err(Error::DegenerateClustering(
            "need at least two passengers".into(),
        ));
    }
    let rg: Vec<f64> = vectors.iter().map(|v| v.rg).collect();
    let enc: Vec<f64> = vectors.iter().map(|v| v.encounters as f64).collect();
    let (rg_norm, rg_min, rg_max) = min_max_normalize(&rg, "radius of gyration")?;
    let (enc_norm, enc_min, enc_max) = min_max_normalize(&enc, "encounter")?;
    let dist_split = kmeans_1d(&rg_norm)?;
    let conn_split = kmeans_1d(&enc_norm)?;

    let mut assignments = BTreeMap::new();
    for (i, v) in vectors.iter().enumerate() {
        let group = MobilityGroup {
            exploration: classify_exploration(v.rg, v.rgk)?,
            connectivity: if conn_split.high[i] { Connectivity::High } else { Connectivity::Low },
            distance: if dist_split.high[i] { Distance::Long } else { Distance::Short },
        };
        if assignments.insert(v.card_id.clone(), group).is_some() {
            return Err(invalid(format!("duplicate card id `{}`", v.card_id)));
        }
    }

    let total = assignments.len() as f64;
    let mut shares: BTreeMap<MobilityGroup, f64> =
        MobilityGroup::ALL.iter().map(|&g| (g, 0.0)).collect();
    for g in assignments.values() {
        *shares.get_mut(g).unwrap() += 1.0;
    }
    shares.values_mut().for_each(|s| *s /= total);

    Ok(ClassificationResult {
        assignments,
        centroids: Centroids {
            distance: AxisCentroids::new(&dist_split, rg_min, rg_max),
            connectivity: AxisCentroids::new(&conn_split, enc_min, enc_max),
        },
        shares,
    })
}

/// Group shares as percentages rounded to one decimal.
pub fn group_shares(result: &ClassificationResult) -> BTreeMap<MobilityGroup, f64> {
    let total = result.assignments.len().max(1) as f64;
    let sizes = result.group_sizes();
    MobilityGroup::ALL
        .iter()
        .map(|&g| (g, (1000.0 * sizes[g.index()] as f64 / total).round() / 10.0))
        .collect()
}

pub fn write_assignments_csv<W: Write>(out: W, result: &ClassificationResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["card_id", "group"])?;
    for (card, g) in &result.assignments {
        w.write_record([card.as_str(), g.name()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(id: &str, rg: f64, rgk: f64, encounters: u64) -> MobilityVector {
        MobilityVector {
            card_id: id.into(),
            rg,
            rgk,
            k: 2,
            encounters,
        }
    }

    #[test]
    fn group_order_is_alphabetical() {
        let names: Vec<_> = MobilityGroup::ALL.iter().map(|g| g.name()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        for (i, g) in MobilityGroup::ALL.iter().enumerate() {
            assert_eq!(g.index(), i);
            assert_eq!(g.name().parse::<MobilityGroup>().unwrap(), *g);
        }
        assert!(MobilityGroup::ALL.windows(2).all(|w| w[0] < w[1]));
        assert!("exp_mid_long".parse::<MobilityGroup>().is_err());
    }

    #[test]
    fn group_serializes_as_name() {
        let g = MobilityGroup::new(Exploration::Returner, Connectivity::High, Distance::Short);
        assert_eq!(serde_json::to_string(&g).unwrap(), "\"ret_high_short\"");
        let back: MobilityGroup = serde_json::from_str("\"ret_high_short\"").unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn bisector_rule() {
        assert_eq!(classify_exploration(1.0, 0.9).unwrap(), Exploration::Returner);
        assert_eq!(classify_exploration(1.0, 0.2).unwrap(), Exploration::Explorer);
        assert_eq!(classify_exploration(0.0, 0.0).unwrap(), Exploration::Returner);
        // Exactly half is not dominant.
        assert_eq!(classify_exploration(1.0, 0.5).unwrap(), Exploration::Explorer);
        assert!(classify_exploration(-1.0, 0.0).is_err());
        assert!(classify_exploration(1.0, f64::NAN).is_err());
    }

    #[test]
    fn kmeans_separated_blobs() {
        let s = kmeans_1d(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.high, [false, false, false, true, true, true]);
        assert_eq!(s.centroids, [0.0, 1.0]);
        assert_eq!(s.sse, 0.0);
    }

    #[test]
    fn kmeans_splits_at_gap() {
        let s = kmeans_1d(&[0.9, 0.0, 1.0, 0.1]).unwrap();
        assert_eq!(s.high, [true, false, true, false]);
        assert_eq!(s.threshold, 0.9);
        assert!((s.centroids[0] - 0.05).abs() < 1e-15);
        assert!((s.centroids[1] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn kmeans_degenerate_inputs() {
        assert!(matches!(kmeans_1d(&[0.3; 5]), Err(Error::DegenerateClustering(_))));
        assert!(matches!(kmeans_1d(&[]), Err(Error::DegenerateClustering(_))));
        assert!(kmeans_1d(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn two_passenger_population_splits() {
        let r = classify_population(&[mv("a", 100.0, 90.0, 3), mv("b", 5000.0, 100.0, 40)]).unwrap();
        let a = r.assignments["a"];
        let b = r.assignments["b"];
        assert_eq!(a.distance, Distance::Short);
        assert_eq!(b.distance, Distance::Long);
        assert_eq!(a.connectivity, Connectivity::Low);
        assert_eq!(b.connectivity, Connectivity::High);
        assert_eq!(a.exploration, Exploration::Returner);
        assert_eq!(b.exploration, Exploration::Explorer);
        assert!((r.shares.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_encounters_are_degenerate() {
        let err = classify_population(&[mv("a", 1.0, 1.0, 3), mv("b", 2.0, 2.0, 3)]).unwrap_err();
        assert!(matches!(err, Error::DegenerateClustering(_)));
    }

    #[test]
    fn shares_in_percent() {
        let mut assignments = BTreeMap::new();
        for (i, g) in MobilityGroup::ALL.iter().take(4).enumerate() {
            assignments.insert(format!("p{i}"), *g);
        }
        let axis = AxisCentroids {
            normalized: [0.0, 1.0],
            raw: [0.0, 1.0],
            min: 0.0,
            max: 1.0,
        };
        let r = ClassificationResult {
            assignments,
            centroids: Centroids {
                distance: axis.clone(),
                connectivity: axis,
            },
            shares: BTreeMap::new(),
        };
        let pct = group_shares(&r);
        for (i, g) in MobilityGroup::ALL.iter().enumerate() {
            assert_eq!(pct[g], if i < 4 { 25.0 } else { 0.0 });
        }
    }
}

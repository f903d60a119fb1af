//! Per-group infection statistics, group-to-group flow matrices, difference
//! matrices and chord-diagram export.
//!
//! Ensemble statistics average event counts over runs first and divide by
//! group size afterwards, which is the same as averaging per-run matrices.

use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassificationResult, MobilityGroup, GROUP_COUNT};
use crate::contact::TripIndex;
use crate::error::{invalid, Error, Result};
use crate::sim::SimOutcome;

/// Group of every passenger in a [`TripIndex`], by passenger index.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    pub of_passenger: Vec<MobilityGroup>,
    pub sizes: [usize; GROUP_COUNT],
}

impl GroupIndex {
    pub fn new(index: &TripIndex, classification: &ClassificationResult) -> Result<Self> {
        let of_passenger = index
            .cards
            .iter()
            .map(|c| {
                classification.assignments.get(c).copied().ok_or_else(|| {
                    Error::DataIntegrity(format!("passenger `{c}` has no mobility group"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_groups(of_passenger))
    }

    pub fn from_groups(of_passenger: Vec<MobilityGroup>) -> Self {
        let mut sizes = [0; GROUP_COUNT];
        for g in &of_passenger {
            sizes[g.index()] += 1;
        }
        Self {
            of_passenger,
            sizes,
        }
    }

    fn group_of(&self, passenger: u32) -> Result<usize> {
        self.of_passenger
            .get(passenger as usize)
            .map(|g| g.index())
            .ok_or_else(|| {
                Error::DataIntegrity(format!("passenger index {passenger} is not classified"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: MobilityGroup,
    pub population: usize,
    pub total_encounters: f64,
    pub total_transmitted: f64,
    pub total_received: f64,
    pub avg_encounters_per_individual: f64,
    pub avg_transmissions_per_individual: f64,
    pub avg_receptions_per_individual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub runs: usize,
    pub rows: Vec<GroupRow>,
}

impl GroupSummary {
    pub fn row(&self, g: MobilityGroup) -> &GroupRow {
        &self.rows[g.index()]
    }
}

fn per_capita(total: f64, size: usize) -> f64 {
    if size == 0 {
        0.0
    } else {
        total / size as f64
    }
}

/// Totals and per-individual averages for every group. `encounters` holds
/// each passenger's direct encounter count; totals are averaged over runs.
pub fn per_group_summary(
    outcomes: &[SimOutcome],
    groups: &GroupIndex,
    encounters: &[u64],
) -> Result<GroupSummary> {
    if encounters.len() != groups.of_passenger.len() {
        return Err(Error::DataIntegrity(format!(
            "{} encounter counts for {} classified passengers",
            encounters.len(),
            groups.of_passenger.len()
        )));
    }
    let runs = outcomes.len();
    let mut enc = [0u64; GROUP_COUNT];
    for (p, &e) in encounters.iter().enumerate() {
        enc[groups.group_of(p as u32)?] += e;
    }
    let mut sent = [0u64; GROUP_COUNT];
    let mut received = [0u64; GROUP_COUNT];
    for o in outcomes {
        for e in &o.infection_events {
            sent[groups.group_of(e.infector)?] += 1;
            received[groups.group_of(e.infectee)?] += 1;
        }
    }
    let per_run = |x: u64| if runs == 0 { 0.0 } else { x as f64 / runs as f64 };
    let rows = MobilityGroup::ALL
        .iter()
        .map(|&g| {
            let i = g.index();
            let size = groups.sizes[i];
            let total_encounters = enc[i] as f64;
            let total_transmitted = per_run(sent[i]);
            let total_received = per_run(received[i]);
            GroupRow {
                group: g,
                population: size,
                total_encounters,
                total_transmitted,
                total_received,
                avg_encounters_per_individual: per_capita(total_encounters, size),
                avg_transmissions_per_individual: per_capita(total_transmitted, size),
                avg_receptions_per_individual: per_capita(total_received, size),
            }
        })
        .collect();
    Ok(GroupSummary { runs, rows })
}

pub fn write_summary_csv<W: Write>(out: W, summary: &GroupSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "group",
        "population",
        "total_encounters",
        "total_transmitted",
        "total_received",
        "avg_encounters_per_individual",
        "avg_transmissions_per_individual",
        "avg_receptions_per_individual",
    ])?;
    for r in &summary.rows {
        w.write_record([
            r.group.name().to_string(),
            r.population.to_string(),
            format!("{:.3}", r.total_encounters),
            format!("{:.3}", r.total_transmitted),
            format!("{:.3}", r.total_received),
            format!("{:.6}", r.avg_encounters_per_individual),
            format!("{:.6}", r.avg_transmissions_per_individual),
            format!("{:.6}", r.avg_receptions_per_individual),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Square group-to-group matrix: rows are sources, columns are targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl FlowMatrix {
    pub fn zeros() -> Self {
        Self {
            labels: MobilityGroup::ALL.iter().map(|g| g.name().to_string()).collect(),
            values: vec![vec![0.0; GROUP_COUNT]; GROUP_COUNT],
        }
    }

    pub fn get(&self, from: MobilityGroup, to: MobilityGroup) -> f64 {
        self.values[from.index()][to.index()]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.values[i].iter().sum()
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.labels.len();
        if self.values.len() != n || self.values.iter().any(|r| r.len() != n) {
            return Err(invalid("matrix is not square with its labels"));
        }
        Ok(())
    }
}

/// Entry `(i, j)`: average number of group-`j` passengers infected by one
/// group-`i` passenger, averaged over runs. Empty groups get zero rows.
pub fn group_flow_matrix(outcomes: &[SimOutcome], groups: &GroupIndex) -> Result<FlowMatrix> {
    let mut counts = [[0u64; GROUP_COUNT]; GROUP_COUNT];
    for o in outcomes {
        for e in &o.infection_events {
            counts[groups.group_of(e.infector)?][groups.group_of(e.infectee)?] += 1;
        }
    }
    let runs = outcomes.len().max(1) as f64;
    let mut m = FlowMatrix::zeros();
    for (i, row) in counts.iter().enumerate() {
        if groups.sizes[i] == 0 {
            if row.iter().any(|&c| c > 0) {
                return Err(Error::DataIntegrity("infections from an empty group".into()));
            }
            warn!(
                "group {} is empty; its flow row is zero",
                MobilityGroup::from_index(i)
            );
            continue;
        }
        for (j, &c) in row.iter().enumerate() {
            m.values[i][j] = c as f64 / runs / groups.sizes[i] as f64;
        }
    }
    Ok(m)
}

/// Elementwise `variant - baseline`. Positive entries mark a gain in
/// transmissions relative to the baseline.
pub fn difference_matrix(baseline: &FlowMatrix, variant: &FlowMatrix) -> Result<FlowMatrix> {
    baseline.check_shape()?;
    variant.check_shape()?;
    if baseline.labels != variant.labels {
        return Err(invalid(format!(
            "group ordering differs: {:?} vs {:?}",
            baseline.labels, variant.labels
        )));
    }
    let values = baseline
        .values
        .iter()
        .zip(&variant.values)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| y - x).collect())
        .collect();
    Ok(FlowMatrix {
        labels: baseline.labels.clone(),
        values,
    })
}

/// Writes a matrix with a label header row and a label column; values have
/// fixed precision so identical inputs give identical bytes.
pub fn write_matrix_csv<W: Write>(out: W, m: &FlowMatrix) -> Result<()> {
    m.check_shape()?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["group".to_string()];
    header.extend(m.labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in m.labels.iter().zip(&m.values) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| format!("{:.9}", v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<FlowMatrix> {
    let mut r = csv::Reader::from_reader(input);
    let labels: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut values = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        if row.get(0) != labels.get(i).map(String::as_str) {
            return Err(invalid(format!("row {i} label does not match column order")));
        }
        let vals = row
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| invalid(format!("bad matrix value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        values.push(vals);
    }
    let m = FlowMatrix { labels, values };
    m.check_shape()?;
    Ok(m)
}

/// Colour key used in chord exports.
pub fn group_color(g: MobilityGroup) -> &'static str {
    const COLORS: [&str; GROUP_COUNT] = [
        "#d62728", // exp_high_long: red
        "#ff7f0e", // exp_high_short: orange
        "#2ca02c", // exp_low_long: green
        "#9467bd", // exp_low_short: purple
        "#17becf", // ret_high_long: cyan
        "#1f77b4", // ret_high_short: blue
        "#bcbd22", // ret_low_long: olive
        "#e377c2", // ret_low_short: pink
    ];
    COLORS[g.index()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChordGroup {
    pub name: String,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChordFlow {
    pub source: String,
    pub target: String,
    pub value: i64,
}

/// Chord diagram input: `{scale, groups: [{name, color}], flows: [{source,
/// target, value}]}` with values scaled and rounded to integers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChordData {
    pub scale: u32,
    pub groups: Vec<ChordGroup>,
    pub flows: Vec<ChordFlow>,
}

pub fn chord_export(m: &FlowMatrix, scale: u32) -> Result<ChordData> {
    m.check_shape()?;
    if m.values.iter().flatten().any(|v| !(*v >= 0.0)) {
        return Err(invalid("chord export needs a non-negative matrix"));
    }
    let groups = m
        .labels
        .iter()
        .map(|name| ChordGroup {
            name: name.clone(),
            color: name
                .parse::<MobilityGroup>()
                .map(group_color)
                .unwrap_or("#7f7f7f")
                .to_string(),
        })
        .collect();
    let mut flows = Vec::with_capacity(m.labels.len().pow(2));
    for (i, row) in m.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            flows.push(ChordFlow {
                source: m.labels[i].clone(),
                target: m.labels[j].clone(),
                value: (v * scale as f64).round() as i64,
            });
        }
    }
    Ok(ChordData {
        scale,
        groups,
        flows,
    })
}

/// Inverse of [`chord_export`] up to rounding.
pub fn chord_rescale(chord: &ChordData) -> Result<FlowMatrix> {
    let labels: Vec<String> = chord.groups.iter().map(|g| g.name.clone()).collect();
    let pos = |name: &str| {
        labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| invalid(format!("flow references unknown group `{name}`")))
    };
    let n = labels.len();
    let mut values = vec![vec![0.0; n]; n];
    for f in &chord.flows {
        values[pos(&f.source)?][pos(&f.target)?] = f.value as f64 / chord.scale as f64;
    }
    Ok(FlowMatrix { labels, values })
}

//! JSONL datasets: records, splitting and validation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CausalGraph;
use crate::rng::seeded;
use crate::scm::{Scm, ScmUnit};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("fractions sum to {0}, expected 1")]
    FractionMismatch(f64),
    #[error("unknown example `{0}`")]
    UnknownId(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Match,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Match, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Match => "match",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One dataset record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    /// Concept name to value; a missing key means the value is unknown.
    #[serde(default)]
    pub concepts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exo_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

fn default_split() -> Split {
    Split::Train
}

impl Example {
    pub fn concept(&self, name: &str) -> Option<&str> {
        self.concepts.get(name).map(String::as_str)
    }

    /// Builds a record from a simulated unit, labelling only observed concepts.
    pub fn from_unit(unit: &ScmUnit, graph: &CausalGraph, split: Split) -> Self {
        let concepts = graph
            .concepts()
            .iter()
            .zip(&unit.concepts)
            .filter(|(c, _)| c.observed)
            .map(|(c, &v)| (c.name.clone(), c.domain[v].clone()))
            .collect();
        Self {
            id: unit.id.clone(),
            features: unit.features.clone(),
            concepts,
            label: unit.label,
            split,
            exo_seed: Some(unit.exo_seed),
            text: None,
        }
    }

    /// Features an explanation method may see: hidden coordinates zeroed.
    pub fn visible_features(&self, hidden: &[usize]) -> Vec<f64> {
        let mut x = self.features.clone();
        for &h in hidden {
            if h < x.len() {
                x[h] = 0.0;
            }
        }
        x
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    /// Samples `n` units and wraps them as train records.
    pub fn simulate(scm: &Scm, n: usize, seed: u64) -> Result<Self, crate::scm::ScmError> {
        let units = scm.sample_units(n, seed)?;
        Ok(Self::new(
            units
                .iter()
                .map(|u| Example::from_unit(u, scm.graph(), Split::Train))
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            examples.push(ex);
        }
        Ok(Self { examples })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.examples {
            serde_json::to_writer(&mut out, e).map_err(|err| DataError::Parse {
                line: 0,
                message: err.to_string(),
            })?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Assigns split tags by `fractions`, stratified by the value of
/// `stratify_by` where present. Each stratum is shuffled with `seed` and cut
/// into consecutive runs whose lengths are the largest-remainder rounding of
/// its share, so every stratum is within one item of the target proportions.
pub fn split_dataset(
    dataset: &mut Dataset,
    fractions: &[(Split, f64)],
    stratify_by: Option<&str>,
    seed: u64,
) -> Result<(), DataError> {
    let total: f64 = fractions.iter().map(|(_, f)| f).sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|(_, f)| *f < 0.0) {
        return Err(DataError::FractionMismatch(total));
    }
    let mut strata: BTreeMap<Option<String>, Vec<usize>> = BTreeMap::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        let key = stratify_by.and_then(|c| e.concepts.get(c).cloned());
        strata.entry(key).or_default().push(i);
    }
    let mut rng = seeded(seed);
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let targets = apportion(members.len(), fractions);
        let mut cursor = members.iter();
        for ((split, _), count) in fractions.iter().zip(targets) {
            for &i in cursor.by_ref().take(count) {
                dataset.examples[i].split = *split;
            }
        }
    }
    Ok(())
}

fn apportion(n: usize, fractions: &[(Split, f64)]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|(_, f)| f * n as f64).collect();
    let mut targets: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n.saturating_sub(targets.iter().sum::<usize>());
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .partial_cmp(&(raw[a] - raw[a].floor()))
            .expect("finite")
            .then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        targets[i] += 1;
        left -= 1;
    }
    targets
}

/// Outcome of [`validate_dataset`].
#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub problems: Vec<String>,
    pub split_counts: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Schema, uniqueness, dimension and split-coverage checks on a JSONL file.
pub fn validate_dataset(
    path: &Path,
    required_splits: &[Split],
) -> Result<ValidationReport, DataError> {
    let file = std::fs::File::open(path)?;
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = match serde_json::from_str(&line) {
            Ok(e) => e,
            Err(e) => {
                report.problems.push(format!("line {n}: schema error: {e}"));
                continue;
            }
        };
        report.records += 1;
        if !seen.insert(ex.id.clone()) {
            report
                .problems
                .push(format!("line {n}: duplicate id `{}`", ex.id));
        }
        match dim {
            None => dim = Some(ex.features.len()),
            Some(d) if d != ex.features.len() => report.problems.push(format!(
                "line {n}: ragged features ({} values, expected {d})",
                ex.features.len()
            )),
            _ => {}
        }
        if ex.features.iter().any(|v| !v.is_finite()) {
            report
                .problems
                .push(format!("line {n}: non-finite feature"));
        }
        *report.split_counts.entry(ex.split.to_string()).or_default() += 1;
    }
    for s in required_splits {
        if !report.split_counts.contains_key(s.as_str()) {
            report.problems.push(format!("split `{s}` is empty"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| Example {
                    id: format!("e{i}"),
                    features: vec![i as f64],
                    concepts: BTreeMap::from([(
                        "T".to_string(),
                        if i % 3 == 0 { "a" } else { "b" }.to_string(),
                    )]),
                    label: None,
                    split: Split::Train,
                    exo_seed: None,
                    text: None,
                })
                .collect(),
        )
    }

    #[test]
    fn even_split_is_exact() {
        let mut d = synthetic(1464);
        split_dataset(
            &mut d,
            &[(Split::Train, 0.5), (Split::Match, 0.5)],
            Some("T"),
            1,
        )
        .unwrap();
        assert_eq!(d.split(Split::Train).count(), 732);
        assert_eq!(d.split(Split::Match).count(), 732);
    }

    #[test]
    fn stratification_keeps_arm_proportions() {
        let mut d = synthetic(1000);
        split_dataset(
            &mut d,
            &[(Split::Train, 0.6), (Split::Dev, 0.4)],
            Some("T"),
            5,
        )
        .unwrap();
        for arm in ["a", "b"] {
            let members: Vec<_> = d
                .examples
                .iter()
                .filter(|e| e.concept("T") == Some(arm))
                .collect();
            let train = members.iter().filter(|e| e.split == Split::Train).count() as f64;
            assert!(
                (train - 0.6 * members.len() as f64).abs() <= 1.0,
                "{arm}: {train}"
            );
        }
    }

    #[test]
    fn resplit_is_deterministic() {
        let mut a = synthetic(300);
        let mut b = synthetic(300);
        let f = [(Split::Train, 0.2), (Split::Match, 0.5), (Split::Test, 0.3)];
        split_dataset(&mut a, &f, Some("T"), 11).unwrap();
        split_dataset(&mut b, &f, Some("T"), 11).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            split_dataset(&mut a, &[(Split::Train, 0.5)], None, 0),
            Err(DataError::FractionMismatch(_))
        ));
    }
}

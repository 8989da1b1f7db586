use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{csv_header_check, parse_field, FormatError, Result};
use crate::io::{sha256_hex, write_atomic};

const COLUMNS: [&str; 5] = ["manifest_version", "task_id", "split_index", "patient_id", "assignment"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    Train,
    Test,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Assignment::Train => "train",
            Assignment::Test => "test",
        })
    }
}

impl std::str::FromStr for Assignment {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "train" => Ok(Assignment::Train),
            "test" => Ok(Assignment::Test),
            _ => Err(()),
        }
    }
}

/// Versioned patient-level train/test assignments for one task.
///
/// `manifest_version` has the form `v1-seed<seed>-<digest12>`, where the
/// digest covers the task id and every assignment. Two manifests with equal
/// versions assign every patient identically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub manifest_version: String,
    pub seed: u64,
    pub task_id: String,
    pub splits: Vec<BTreeMap<String, Assignment>>,
}

impl SplitManifest {
    /// Builds a manifest and stamps its content-derived version.
    pub fn new(task_id: String, seed: u64, splits: Vec<BTreeMap<String, Assignment>>) -> Self {
        let mut m = SplitManifest { manifest_version: String::new(), seed, task_id, splits };
        m.manifest_version = m.compute_version();
        m
    }

    fn compute_version(&self) -> String {
        let mut canon = format!("{}\n{}\n", self.task_id, self.seed);
        for (i, split) in self.splits.iter().enumerate() {
            for (patient, a) in split {
                canon.push_str(&format!("{i},{patient},{a}\n"));
            }
        }
        format!("v1-seed{}-{}", self.seed, &sha256_hex(canon.as_bytes())[..12])
    }

    pub fn patients(&self, split_index: usize, side: Assignment) -> impl Iterator<Item = &str> {
        self.splits[split_index].iter().filter(move |(_, a)| **a == side).map(|(p, _)| p.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.is_empty() {
            return Err(FormatError::Invariant("split manifest has no splits".into()));
        }
        let first: BTreeSet<&String> = self.splits[0].keys().collect();
        for (i, split) in self.splits.iter().enumerate().skip(1) {
            if split.keys().collect::<BTreeSet<_>>() != first {
                return Err(FormatError::Invariant(format!("split {i} covers a different patient set than split 0")));
            }
        }
        if self.manifest_version != self.compute_version() {
            return Err(FormatError::Invariant(format!(
                "manifest_version {} does not match contents",
                self.manifest_version
            )));
        }
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for (i, split) in self.splits.iter().enumerate() {
            let idx = i.to_string();
            for (patient, a) in split {
                w.write_record([self.manifest_version.as_str(), &self.task_id, &idx, patient, &a.to_string()])?;
            }
        }
        w.into_inner().map_err(|e| FormatError::Io(e.into_error()))
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        csv_header_check(rdr.headers()?, &COLUMNS)?;
        let mut version: Option<(String, String)> = None;
        let mut splits: Vec<BTreeMap<String, Assignment>> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let idx: usize = parse_field(&record, 2, "split_index")?;
            let assignment: Assignment = parse_field(&record, 4, "assignment")?;
            let v = (record[0].to_string(), record[1].to_string());
            match &version {
                None => version = Some(v),
                Some(existing) if *existing != v => {
                    return Err(FormatError::Invariant("mixed manifest_version/task_id within one file".into()))
                }
                _ => {}
            }
            if idx >= splits.len() {
                splits.resize_with(idx + 1, BTreeMap::new);
            }
            if splits[idx].insert(record[3].to_string(), assignment).is_some() {
                return Err(FormatError::Invariant(format!("patient {} listed twice in split {idx}", &record[3])));
            }
        }
        let (manifest_version, task_id) =
            version.ok_or_else(|| FormatError::Malformed("empty split manifest".into()))?;
        let seed = parse_seed(&manifest_version)
            .ok_or_else(|| FormatError::Malformed(format!("unrecognized manifest_version `{manifest_version}`")))?;
        let m = SplitManifest { manifest_version, seed, task_id, splits };
        m.validate()?;
        Ok(m)
    }
}

fn parse_seed(version: &str) -> Option<u64> {
    let rest = version.strip_prefix("v1-seed")?;
    let (seed, digest) = rest.split_once('-')?;
    (digest.len() == 12).then_some(())?;
    seed.parse().ok()
}

pub fn write_splits_csv(manifest: &SplitManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    write_atomic(path, &manifest.to_csv_bytes()?)?;
    Ok(())
}

pub fn read_splits_csv(path: &Path) -> Result<SplitManifest> {
    SplitManifest::from_csv_reader(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> SplitManifest {
        let split: BTreeMap<_, _> =
            [("P1".to_string(), Assignment::Train), ("P2".to_string(), Assignment::Test)].into();
        SplitManifest::new("COAD:MSI".into(), 42, vec![split.clone(), split])
    }

    #[test]
    fn version_encodes_seed() {
        let m = manifest();
        assert!(m.manifest_version.starts_with("v1-seed42-"));
        assert_eq!(parse_seed(&m.manifest_version), Some(42));
    }

    #[test]
    fn tampered_assignment_breaks_version() {
        let m = manifest();
        let text = String::from_utf8(m.to_csv_bytes().unwrap()).unwrap();
        let tampered = text.replacen("P2,test", "P2,train", 1);
        assert!(SplitManifest::from_csv_reader(tampered.as_bytes()).is_err());
        assert_eq!(SplitManifest::from_csv_reader(text.as_bytes()).unwrap(), m);
    }
}

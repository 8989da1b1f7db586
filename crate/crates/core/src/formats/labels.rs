use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{csv_header_check, parse_field, FormatError, Result};
use crate::io::write_atomic;

const COLUMNS: [&str; 5] = ["patient_id", "slide_id", "task_id", "label", "evidence_level"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvidenceLevel {
    L1,
    L2,
    L3,
    #[serde(rename = "other")]
    Other,
}

impl fmt::Display for EvidenceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvidenceLevel::L1 => "L1",
            EvidenceLevel::L2 => "L2",
            EvidenceLevel::L3 => "L3",
            EvidenceLevel::Other => "other",
        })
    }
}

impl FromStr for EvidenceLevel {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "L1" => Ok(EvidenceLevel::L1),
            "L2" => Ok(EvidenceLevel::L2),
            "L3" => Ok(EvidenceLevel::L3),
            "other" => Ok(EvidenceLevel::Other),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub patient_id: String,
    pub slide_id: String,
    /// `TUMOR:GENE`
    pub task_id: String,
    pub label: u8,
    pub evidence_level: EvidenceLevel,
}

/// Binary task labels per slide, as delivered by the upstream annotation step.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelManifest {
    pub rows: Vec<LabelRow>,
}

impl LabelManifest {
    pub fn new(rows: Vec<LabelRow>) -> Result<Self> {
        let m = LabelManifest { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if row.label > 1 {
                return Err(FormatError::Invariant(format!(
                    "non-binary label {} for {} / {}",
                    row.label, row.slide_id, row.task_id
                )));
            }
            if !seen.insert((row.slide_id.as_str(), row.task_id.as_str())) {
                return Err(FormatError::Invariant(format!(
                    "duplicate label for slide {} task {}",
                    row.slide_id, row.task_id
                )));
            }
        }
        Ok(())
    }

    pub fn for_task<'a>(&'a self, task_id: &'a str) -> impl Iterator<Item = &'a LabelRow> + 'a {
        self.rows.iter().filter(move |r| r.task_id == task_id)
    }

    /// Keeps only rows whose slide satisfies `keep`.
    pub fn restricted(&self, mut keep: impl FnMut(&str) -> bool) -> LabelManifest {
        LabelManifest { rows: self.rows.iter().filter(|r| keep(&r.slide_id)).cloned().collect() }
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.patient_id.as_str(),
                &r.slide_id,
                &r.task_id,
                &r.label.to_string(),
                &r.evidence_level.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| FormatError::Io(e.into_error()))
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        csv_header_check(rdr.headers()?, &COLUMNS)?;
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let label: u8 = parse_field(&record, 3, "label")?;
            let evidence_level: EvidenceLevel = parse_field(&record, 4, "evidence_level")?;
            rows.push(LabelRow {
                patient_id: record[0].to_string(),
                slide_id: record[1].to_string(),
                task_id: record[2].to_string(),
                label,
                evidence_level,
            });
        }
        LabelManifest::new(rows)
    }
}

pub fn write_labels_csv(labels: &LabelManifest, path: &Path) -> Result<()> {
    labels.validate()?;
    write_atomic(path, &labels.to_csv_bytes()?)?;
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<LabelManifest> {
    LabelManifest::from_csv_reader(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_slide_task_pair_is_rejected() {
        let text = "patient_id,slide_id,task_id,label,evidence_level\n\
                    P1,S1,BLCA:FGFR3,1,L1\nP1,S1,BLCA:FGFR3,0,L1\n";
        assert!(LabelManifest::from_csv_reader(text.as_bytes()).is_err());
    }

    #[test]
    fn non_binary_label_is_rejected() {
        let text = "patient_id,slide_id,task_id,label,evidence_level\nP1,S1,BLCA:FGFR3,2,L1\n";
        assert!(LabelManifest::from_csv_reader(text.as_bytes()).is_err());
    }
}

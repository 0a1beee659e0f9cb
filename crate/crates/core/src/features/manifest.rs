use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Split {
    pub fn is_labeled(self) -> bool {
        self != Split::Unlabeled
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub participant_id: String,
    pub file_path: String,
    pub label: Option<bool>,
    pub split: Split,
}

/// Dataset listing: one recording per entry, sorted by participant then path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Sort and validate: one split per participant, labels exactly on
    /// labeled splits.
    pub fn new(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| {
            (&a.participant_id, &a.file_path).cmp(&(&b.participant_id, &b.file_path))
        });
        let mut splits: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &entries {
            match splits.get(e.participant_id.as_str()) {
                Some(&s) if s != e.split => {
                    return Err(Error::SplitViolation(e.participant_id.clone()));
                }
                _ => {
                    splits.insert(&e.participant_id, e.split);
                }
            }
            if e.split.is_labeled() != e.label.is_some() {
                return Err(Error::InvalidConfig(format!(
                    "participant `{}` file `{}`: split {} {} a label",
                    e.participant_id,
                    e.file_path,
                    e.split,
                    if e.split.is_labeled() { "requires" } else { "forbids" }
                )));
            }
        }
        Ok(DatasetManifest { entries })
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(err("empty participant id or file path".into()));
            }
            let label = match fields[2] {
                "-" => None,
                "1" | "positive" => Some(true),
                "0" | "negative" => Some(false),
                other => return Err(err(format!("bad label `{other}`"))),
            };
            let split = fields[3].parse().map_err(err)?;
            entries.push(ManifestEntry {
                participant_id: fields[0].to_string(),
                file_path: fields[1].to_string(),
                label,
                split,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let label = match e.label {
                None => "-",
                Some(true) => "1",
                Some(false) => "0",
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.participant_id, e.file_path, label, e.split));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn participants(&self) -> Vec<&str> {
        let mut p: Vec<&str> = self.entries.iter().map(|e| e.participant_id.as_str()).collect();
        p.dedup();
        p
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn participants_in(&self, split: Split) -> Vec<&str> {
        let mut p: Vec<&str> = self.split(split).map(|e| e.participant_id.as_str()).collect();
        p.dedup();
        p
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text, &path.display().to_string())
}

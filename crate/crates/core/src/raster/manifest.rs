use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::RasterError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NotIrrigated,
    Irrigated,
}

impl Label {
    /// Class index used by the classifier head.
    pub fn class_index(self) -> usize {
        match self {
            Label::NotIrrigated => 0,
            Label::Irrigated => 1,
        }
    }

    pub fn is_irrigated(self) -> bool {
        self == Label::Irrigated
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Holdout,
    UnlabeledPool,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::UnlabeledPool => "unlabeled_pool",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            "unlabeled_pool" => Ok(Split::UnlabeledPool),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Chip path, relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: Option<Label>,
    pub region: Option<String>,
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn unlabeled(path: impl Into<String>) -> Self {
        Self { path: path.into(), label: None, region: None, split: Some(Split::UnlabeledPool) }
    }

    pub fn labeled(path: impl Into<String>, label: Label) -> Self {
        Self { path: path.into(), label: Some(label), region: None, split: None }
    }
}

/// A list of chips with optional labels, region tags and split names.
///
/// On disk: UTF-8, one record per line, tab-separated
/// `path  label(1|0|-)  region(-)  split(-)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

fn field_ok(s: &str) -> bool {
    !s.is_empty() && s != "-" && !s.contains(['\t', '\n', '\r'])
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, RasterError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !field_ok(&e.path) {
                return Err(RasterError::InvalidManifest(format!("bad chip path `{}`", e.path)));
            }
            if let Some(r) = &e.region {
                if !field_ok(r) {
                    return Err(RasterError::InvalidManifest(format!("bad region tag `{r}`")));
                }
            }
            if !seen.insert(e.path.as_str()) {
                return Err(RasterError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries carrying a label.
    pub fn labeled(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.label.is_some())
    }

    pub fn with_split(&self, split: Split) -> DatasetManifest {
        DatasetManifest { entries: self.entries.iter().filter(|e| e.split == Some(split)).cloned().collect() }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let label = match e.label {
                Some(Label::Irrigated) => "1",
                Some(Label::NotIrrigated) => "0",
                None => "-",
            };
            let region = e.region.as_deref().unwrap_or("-");
            let split = e.split.map(Split::name).unwrap_or("-");
            out.push_str(&format!("{}\t{label}\t{region}\t{split}\n", e.path));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RasterError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| RasterError::ManifestParse { line: i + 1, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let label = match fields[1] {
                "1" => Some(Label::Irrigated),
                "0" => Some(Label::NotIrrigated),
                "-" => None,
                other => return Err(err(format!("label must be 1, 0 or -, got `{other}`"))),
            };
            let region = (fields[2] != "-").then(|| fields[2].to_string());
            let split = match fields[3] {
                "-" => None,
                s => Some(s.parse().map_err(err)?),
            };
            entries.push(ManifestEntry { path: fields[0].to_string(), label, region, split });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let text = fs::read_to_string(path).map_err(|e| RasterError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| RasterError::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| RasterError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let m = DatasetManifest::new(vec![
            ManifestEntry::unlabeled("chips/u0.msc"),
            ManifestEntry {
                path: "l0.msc".into(),
                label: Some(Label::Irrigated),
                region: Some("Brazil".into()),
                split: Some(Split::Holdout),
            },
            ManifestEntry::labeled("l1.msc", Label::NotIrrigated),
        ])
        .unwrap();
        let text = m.to_text();
        assert_eq!(text, "chips/u0.msc\t-\t-\tunlabeled_pool\nl0.msc\t1\tBrazil\tholdout\nl1.msc\t0\t-\t-\n");
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        let dup = "a\t1\t-\t-\na\t0\t-\t-\n";
        assert!(matches!(DatasetManifest::parse(dup), Err(RasterError::DuplicatePath(_))));
        assert!(matches!(DatasetManifest::parse("a\t2\t-\t-\n"), Err(RasterError::ManifestParse { line: 1, .. })));
        assert!(matches!(DatasetManifest::parse("a\t1\t-\n"), Err(RasterError::ManifestParse { .. })));
        assert!(matches!(DatasetManifest::parse("a\t1\t-\tvalidation\n"), Err(RasterError::ManifestParse { .. })));
    }
}

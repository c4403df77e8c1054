//! Dataset manifest: one tab-separated record per preprocessed mesh.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use meshflow_core::rng::SeedStream;
use meshflow_core::{Error, Result};
use rand::seq::SliceRandom;

const HEADER: &str = "# meshflow manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub name: String,
    pub faces: usize,
    pub split: Split,
    /// Canonical mesh file, relative to the manifest's directory.
    pub path: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub resolution: u32,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n# resolution {}\n", self.resolution);
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.name, r.faces, r.split, r.path));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format("missing manifest header".into()));
        }
        let resolution = lines
            .next()
            .and_then(|l| l.strip_prefix("# resolution "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing manifest resolution line".into()))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, faces, split, path] = fields[..] else {
                return Err(Error::Parse { line: i + 3, message: format!("expected 4 tab-separated fields, got {line:?}") });
            };
            let faces = faces.parse().map_err(|_| Error::Parse { line: i + 3, message: format!("bad face count {faces:?}") })?;
            records.push(ManifestRecord { name: name.into(), faces, split: split.parse()?, path: path.into() });
        }
        Ok(Self { resolution, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::validation(format!("cannot read manifest {} ({e}); run `meshflow preprocess` first", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Assigns `round(n / (ratio + 1))` records to validation, chosen by a seeded shuffle
/// of the name-sorted list; the rest train. A ratio of 0 keeps everything in train.
pub fn assign_splits(names: &[String], ratio: u64, seed: u64) -> Vec<Split> {
    let n = names.len();
    let mut out = vec![Split::Train; n];
    if ratio == 0 || n < 2 {
        return out;
    }
    let n_val = ((n as f64 / (ratio + 1) as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| names[a].cmp(&names[b]));
    order.shuffle(&mut SeedStream::new(seed).rng("split"));
    for &i in &order[..n_val] {
        out[i] = Split::Val;
    }
    out
}

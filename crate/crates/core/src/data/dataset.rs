//! Dataset directories: one `.useg` file per sample plus `manifest.csv`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::format::{read_sample, write_sample};
use super::preprocess::{resize_bilinear, resize_nearest};
use super::Sample;
use crate::error::{Error, Result};
use crate::losses::Domain;

pub const MANIFEST: &str = "manifest.csv";
const HEADER: [&str; 4] = ["id", "path", "domain", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid("split", format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub domain: Domain,
    pub split: Split,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// 70/15/15 split of `ids`, ordered by a stable hash of each id.
///
/// With three or more ids every split receives at least one; smaller
/// lists go entirely to training.
pub fn assign_splits(ids: &[String]) -> Vec<Split> {
    let n = ids.len();
    let mut splits = vec![Split::Train; n];
    if n < 3 {
        return splits;
    }
    let held_out = ((0.15 * n as f64).round() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (fnv1a(ids[i].as_bytes()), i));
    for &i in &order[n - 2 * held_out..n - held_out] {
        splits[i] = Split::Val;
    }
    for &i in &order[n - held_out..] {
        splits[i] = Split::Test;
    }
    splits
}

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Dataset {
    /// Writes samples and a manifest into `root`, splitting each domain
    /// independently. Refuses to touch an existing manifest unless `force`.
    pub fn create(root: &Path, samples: &[Sample], force: bool) -> Result<Self> {
        let manifest = root.join(MANIFEST);
        if manifest.exists() && !force {
            return Err(Error::invalid(
                "output",
                format!("{} already exists (use --force to overwrite)", manifest.display()),
            ));
        }
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut entries = Vec::with_capacity(samples.len());
        for domain in Domain::ALL {
            let of_domain: Vec<&Sample> = samples.iter().filter(|s| s.domain == domain).collect();
            let ids: Vec<String> = of_domain.iter().map(|s| s.id.clone()).collect();
            for (sample, split) in of_domain.iter().zip(assign_splits(&ids)) {
                let rel = PathBuf::from(format!("{}.useg", sample.id));
                write_sample(&root.join(&rel), sample)?;
                entries.push(ManifestEntry {
                    id: sample.id.clone(),
                    path: rel,
                    domain,
                    split,
                });
            }
        }
        let dataset = Self {
            root: root.to_path_buf(),
            entries,
        };
        dataset.write_manifest()?;
        Ok(dataset)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST);
        let mut reader = csv::Reader::from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
        let header = reader.headers().map_err(|e| csv_error(&manifest, e))?.clone();
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Format {
                context: manifest.display().to_string(),
                offset: 0,
                reason: format!("expected header {}, found {:?}", HEADER.join(","), header),
            });
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(&manifest, e))?;
            let bad = |reason: String| Error::Format {
                context: manifest.display().to_string(),
                offset: record.position().map_or(0, |p| p.byte()),
                reason,
            };
            if record.len() != HEADER.len() {
                return Err(bad(format!("expected 4 fields, found {}", record.len())));
            }
            entries.push(ManifestEntry {
                id: record[0].to_string(),
                path: PathBuf::from(&record[1]),
                domain: record[2].parse().map_err(|e: Error| bad(e.to_string()))?,
                split: record[3].parse().map_err(|e: Error| bad(e.to_string()))?,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        writer.write_record(HEADER).map_err(|e| csv_error(&path, e))?;
        for e in &self.entries {
            writer
                .write_record([
                    e.id.as_str(),
                    &e.path.to_string_lossy(),
                    e.domain.name(),
                    e.split.name(),
                ])
                .map_err(|err| csv_error(&path, err))?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn count(&self, split: Split, domain: Domain) -> usize {
        self.entries
            .iter()
            .filter(|e| e.split == split && e.domain == domain)
            .count()
    }

    /// Loads every sample of `split`, resizing to `size` when given.
    pub fn load(&self, split: Split, size: Option<usize>) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let mut s = read_sample(&self.root.join(&e.path))?;
                if s.domain != e.domain {
                    return Err(Error::invalid(
                        "manifest",
                        format!("{} is listed as {} but the file says {}", e.id, e.domain, s.domain),
                    ));
                }
                s.id = e.id.clone();
                match size {
                    Some(size) if size != s.size() => Sample::new(
                        s.id,
                        s.domain,
                        resize_bilinear(&s.image, size)?,
                        resize_nearest(&s.mask, size)?,
                    ),
                    _ => Ok(s),
                }
            })
            .collect()
    }
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let offset = err.position().map_or(0, |p| p.byte());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        kind => Error::Format {
            context: path.display().to_string(),
            offset,
            reason: format!("{kind:?}"),
        },
    }
}

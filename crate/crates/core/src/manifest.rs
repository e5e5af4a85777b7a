//! Manifest CSV: one retained image per row with its label and split.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg32;

use crate::error::{Error, ParseIssue, Result};
use crate::ratings::Task;

pub const MANIFEST_HEADER: [&str; 6] = ["image_id", "path", "task", "mean_rating", "label", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split '{other}' (expected train or val)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub task: Task,
    pub mean_rating: f64,
    pub label: usize,
    pub split: Split,
}

/// Shuffles with a seeded PCG32 and assigns the first `⌈n/2⌉` entries to
/// train, the rest to val. Input order does not matter: entries are ordered
/// by image id before shuffling, and the result is returned in that order.
pub fn split_train_val(mut entries: Vec<ManifestEntry>, seed: u64) -> Result<Vec<ManifestEntry>> {
    if entries.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 entries to split, got {}",
            entries.len()
        )));
    }
    entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut Pcg32::seed_from_u64(seed));
    let n_train = entries.len().div_ceil(2);
    for (rank, &idx) in order.iter().enumerate() {
        entries[idx].split = if rank < n_train { Split::Train } else { Split::Val };
    }
    Ok(entries)
}

/// Writes rows sorted by image id, `mean_rating` with 6 decimals.
pub fn write_manifest_to<W: Write>(writer: W, entries: &[ManifestEntry]) -> Result<()> {
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let wrap = |source| Error::Csv {
        path: PathBuf::from("<manifest>"),
        source,
    };
    wtr.write_record(MANIFEST_HEADER).map_err(wrap)?;
    for e in sorted {
        wtr.write_record([
            e.image_id.as_str(),
            &e.path.to_string_lossy(),
            &e.task.to_string(),
            &format!("{:.6}", e.mean_rating),
            &e.label.to_string(),
            &e.split.to_string(),
        ])
        .map_err(wrap)?;
    }
    wtr.flush().map_err(|e| Error::io("<manifest>", e))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest_to(std::io::BufWriter::new(file), entries).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Csv { source, .. } => Error::Csv {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parses manifest rows; paths are returned exactly as written.
pub fn parse_manifest<R: Read>(reader: R) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse(vec![ParseIssue { line: 1, message: e.to_string() }]))?
        .clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::Parse(vec![ParseIssue {
            line: 1,
            message: format!("expected header {}", MANIFEST_HEADER.join(",")),
        }]));
    }
    let mut entries = Vec::new();
    let mut issues = Vec::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                issues.push(ParseIssue { line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parsed = (|| -> std::result::Result<ManifestEntry, String> {
            let label: usize = row[4].parse().map_err(|_| format!("bad label '{}'", &row[4]))?;
            if label > 1 {
                return Err(format!("label {label} is not 0 or 1"));
            }
            Ok(ManifestEntry {
                image_id: row[0].to_string(),
                path: PathBuf::from(&row[1]),
                task: row[2].parse()?,
                mean_rating: row[3]
                    .parse()
                    .map_err(|_| format!("bad mean_rating '{}'", &row[3]))?,
                label,
                split: row[5].parse()?,
            })
        })();
        match parsed {
            Ok(e) => entries.push(e),
            Err(message) => issues.push(ParseIssue { line, message }),
        }
    }
    if issues.is_empty() {
        Ok(entries)
    } else {
        Err(Error::Parse(issues))
    }
}

/// Reads a manifest file, resolving relative image paths against the
/// manifest's own directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = parse_manifest(std::io::BufReader::new(file))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

pub fn filter_split(entries: &[ManifestEntry], split: Split) -> Vec<ManifestEntry> {
    entries.iter().filter(|e| e.split == split).cloned().collect()
}

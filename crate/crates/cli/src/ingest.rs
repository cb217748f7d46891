//! Sequence ingestion: one CSV per sequence (one frame per row, no header)
//! and a manifest CSV with columns `path,label[,split]`. Relative paths are
//! resolved against the manifest's directory; `split` is `train` (default)
//! or `test`.

use std::path::{Path, PathBuf};

use smsa_core::data::{covariance_descriptor, SpdDataset, Split, VectorSequence};
use smsa_core::optim::{Sample, SampleMap};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u32,
    pub split: Split,
}

fn input_error(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Input {
        path: path.into(),
        reason: reason.into(),
    }
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rd = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_error(path, e.to_string()))?;
    let mut entries = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(|e| input_error(path, e.to_string()))?;
        let line = i + 2;
        let (Some(p), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(input_error(
                path,
                format!("line {line}: expected path,label[,split]"),
            ));
        };
        let label: u32 = label.parse().ok().filter(|&l| l > 0).ok_or_else(|| {
            input_error(
                path,
                format!("line {line}: label `{label}` is not a positive integer"),
            )
        })?;
        let split = match row.get(2).unwrap_or("train") {
            "" | "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(input_error(
                    path,
                    format!("line {line}: unknown split `{other}`"),
                ))
            }
        };
        entries.push(ManifestEntry {
            path: base.join(p),
            label,
            split,
        });
    }
    if entries.is_empty() {
        return Err(input_error(path, "manifest lists no sequences"));
    }
    Ok(entries)
}

pub fn read_sequence(path: &Path, label: u32) -> CliResult<VectorSequence> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_error(path, e.to_string()))?;
    let mut frames = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(|e| input_error(path, e.to_string()))?;
        let frame = row
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| input_error(path, format!("row {}: {e}", i + 1)))?;
        frames.push(frame);
    }
    VectorSequence::new(frames, label).map_err(|e| input_error(path, e.to_string()))
}

/// Builds train and test datasets from a manifest; covariance descriptors
/// are computed per sequence through `mapper`. Both splits share the class
/// count given by the largest label.
pub fn ingest<M: SampleMap>(
    manifest: &Path,
    mapper: &M,
) -> CliResult<(SpdDataset, Option<SpdDataset>)> {
    let entries = read_manifest(manifest)?;
    let results = mapper.map(entries.len(), |i| -> CliResult<Sample> {
        let e = &entries[i];
        let seq = read_sequence(&e.path, e.label)?;
        let x = covariance_descriptor(&seq).map_err(|err| input_error(&e.path, err.to_string()))?;
        Ok(Sample { x, label: e.label })
    });
    let classes = entries.iter().map(|e| e.label as usize).max().unwrap_or(0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut dim = None;
    for (r, e) in results.into_iter().zip(&entries) {
        let s = r?;
        match dim {
            None => dim = Some(s.x.dim()),
            Some(d) if d != s.x.dim() => {
                return Err(input_error(
                    &e.path,
                    format!(
                        "frames have {} values, earlier sequences have {d}",
                        s.x.dim()
                    ),
                ))
            }
            _ => {}
        }
        match e.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    let dim = dim.expect("manifest is non-empty");
    if train.is_empty() {
        return Err(input_error(manifest, "no training sequences"));
    }
    let train = SpdDataset::new(dim, classes, train)?;
    let test = if test.is_empty() {
        None
    } else {
        Some(SpdDataset::new(dim, classes, test)?.with_split(Split::Test))
    };
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use smsa_core::optim::Sequential;
    use std::fs;

    #[test]
    fn manifest_with_splits() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,0\n0,1\n1,1\n").unwrap();
        fs::write(dir.path().join("b.csv"), "2,0\n0,2\n0,0\n").unwrap();
        fs::write(dir.path().join("c.csv"), "1,2\n3,1\n").unwrap();
        let manifest = dir.path().join("manifest.csv");
        fs::write(
            &manifest,
            "path,label,split\na.csv,1,train\nb.csv,2\nc.csv,2,test\n",
        )
        .unwrap();
        let (train, test) = ingest(&manifest, &Sequential).unwrap();
        assert_eq!((train.len(), train.dim(), train.classes()), (2, 2, 2));
        let test = test.unwrap();
        assert_eq!(test.len(), 1);
        assert_eq!(test.items()[0].label, 2);
    }

    #[test]
    fn bad_rows_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,x\n0,1\n").unwrap();
        let manifest = dir.path().join("m.csv");
        fs::write(&manifest, "path,label\na.csv,1\n").unwrap();
        let err = ingest(&manifest, &Sequential).unwrap_err().to_string();
        assert!(err.contains("a.csv") && err.contains("row 1"), "{err}");
        fs::write(&manifest, "path,label\na.csv,0\n").unwrap();
        assert!(ingest(&manifest, &Sequential)
            .unwrap_err()
            .to_string()
            .contains("line 2"));
    }

    #[test]
    fn ragged_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,0\n0,1\n").unwrap();
        fs::write(dir.path().join("b.csv"), "1,0,2\n0,1,1\n").unwrap();
        let manifest = dir.path().join("m.csv");
        fs::write(&manifest, "path,label\na.csv,1\nb.csv,2\n").unwrap();
        assert!(ingest(&manifest, &Sequential).is_err());
    }
}

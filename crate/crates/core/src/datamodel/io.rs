use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;

use super::{
    label_set, validate_dataset, ClaimRecord, Dataset, EvidenceRecord, ImageRecord, IssueKind, NEI, REFUTE,
    SUPPORT,
};
use crate::error::{Error, Result};

const CLAIMS: &str = "claims.jsonl";
const EVIDENCE: &str = "evidence.jsonl";
const IMAGES: &str = "images";
const SPLITS: &str = "splits.json";

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            file: name.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn load_images(dir: &Path) -> Result<Vec<ImageRecord>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let pixels = image::open(&p)?.to_rgb8();
            Ok(ImageRecord::new(id, pixels))
        })
        .collect()
}

/// Reads a corpus directory (`claims.jsonl`, `evidence.jsonl`, `images/`,
/// `splits.json`). Record order follows file order; images are ordered by
/// file name. The label set is three-way when any claim is labelled NEI.
pub fn load_corpus(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let claims: Vec<ClaimRecord> = read_jsonl(&root.join(CLAIMS))?;
    let evidence: Vec<EvidenceRecord> = read_jsonl(&root.join(EVIDENCE))?;
    let images = load_images(&root.join(IMAGES))?;
    let splits_path = root.join(SPLITS);
    let splits_text =
        fs::read_to_string(&splits_path).map_err(|_| Error::MissingFile(splits_path.clone()))?;
    let splits: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&splits_text).map_err(|e| Error::MalformedRecord {
            file: SPLITS.into(),
            line: e.line(),
            reason: e.to_string(),
        })?;

    for (i, c) in claims.iter().enumerate() {
        if ![SUPPORT, REFUTE, NEI].contains(&c.label.as_str()) {
            return Err(Error::MalformedRecord {
                file: CLAIMS.into(),
                line: i + 1,
                reason: format!("unknown label {:?} on claim {}", c.label, c.id),
            });
        }
    }
    let with_nei = claims.iter().any(|c| c.label == NEI);
    let dataset = Dataset {
        claims,
        evidence,
        images,
        splits,
        label_set: label_set(with_nei),
    };

    let report = validate_dataset(&dataset);
    if let Some(issue) = report
        .errors
        .iter()
        .find(|e| e.kind == IssueKind::DanglingReference)
    {
        return Err(Error::DanglingReference(issue.message.clone()));
    }
    if let Some(issue) = report.errors.first() {
        return Err(Error::InvalidDataset(format!("{}: {}", issue.record_id, issue.message)));
    }
    Ok(dataset)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes `d` in the canonical corpus layout, creating `root` if needed.
pub fn save_corpus(d: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let images = root.join(IMAGES);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    write_jsonl(&root.join(CLAIMS), &d.claims)?;
    write_jsonl(&root.join(EVIDENCE), &d.evidence)?;
    for img in &d.images {
        let path = images.join(format!("{}.png", img.id));
        img.pixels.save(&path)?;
    }
    let path = root.join(SPLITS);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer(&mut f, &d.splits)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn write(root: &Path, claims: &str, evidence: &str) {
        fs::create_dir_all(root.join(IMAGES)).unwrap();
        fs::write(root.join(CLAIMS), claims).unwrap();
        fs::write(root.join(EVIDENCE), evidence).unwrap();
        fs::write(root.join(SPLITS), r#"{"train":["c1"],"val":[],"test":[]}"#).unwrap();
        RgbImage::new(8, 8).save(root.join(IMAGES).join("i1.png")).unwrap();
    }

    #[test]
    fn loads_minimal_corpus() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            r#"{"id":"c1","text":"x","image_ids":["i1"],"gold_evidence_ids":["e1"],"label":"SUPPORT"}"#,
            r#"{"id":"e1","text":"y","image_ids":[]}"#,
        );
        let d = load_corpus(dir.path()).unwrap();
        assert_eq!((d.claims.len(), d.evidence.len(), d.images.len()), (1, 1, 1));
        assert_eq!(d.label_set.len(), 2);
    }

    #[test]
    fn empty_evidence_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            r#"{"id":"c1","text":"x","image_ids":[],"gold_evidence_ids":["e1"],"label":"SUPPORT"}"#,
            "",
        );
        assert!(matches!(
            load_corpus(dir.path()),
            Err(Error::DanglingReference(_)) | Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "\n{\"id\":\"c1\"",
            r#"{"id":"e1","text":"y","image_ids":[]}"#,
        );
        match load_corpus(dir.path()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::MissingFile(_))));
    }
}

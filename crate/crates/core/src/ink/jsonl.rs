use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgcnError};

use super::trajectory::{Point, Trajectory};
use super::{Dataset, Sample};

/// One line of a JSONL ink file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InkRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub strokes: Vec<Vec<Point>>,
}

fn classes_path(path: &Path) -> PathBuf {
    path.with_file_name("classes.json")
}

/// Parses every non-blank line; errors name the 1-based line number.
pub fn read_records(path: &Path) -> Result<Vec<(usize, InkRecord)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InkRecord = serde_json::from_str(&line).map_err(|e| SgcnError::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Loads a dataset. Class names come from a sibling `classes.json` when
/// present, otherwise from the sorted set of labels in the file.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let records = read_records(path)?;
    let cpath = classes_path(path);
    let class_names: Vec<String> = if cpath.exists() {
        serde_json::from_reader(BufReader::new(File::open(&cpath)?))?
    } else {
        let mut names: Vec<String> = records.iter().filter_map(|(_, r)| r.label.clone()).collect();
        names.sort();
        names.dedup();
        names
    };
    let index: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut samples = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let malformed = |message: String| SgcnError::MalformedLine {
            path: path.to_path_buf(),
            line,
            message,
        };
        let label = rec.label.ok_or_else(|| malformed("missing label".into()))?;
        let label = *index
            .get(label.as_str())
            .ok_or(SgcnError::UnknownLabel(label.clone()))?;
        let trajectory = Trajectory::new(rec.strokes).map_err(|e| malformed(e.to_string()))?;
        samples.push(Sample {
            label,
            trajectory,
            id: rec.id.unwrap_or_else(|| format!("line-{line}")),
        });
    }
    Dataset::new(samples, class_names)
}

/// Writes the dataset and its `classes.json` next to it.
pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &dataset.samples {
        let rec = InkRecord {
            label: Some(dataset.class_names[s.label].clone()),
            id: Some(s.id.clone()),
            strokes: s.trajectory.strokes().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut c = BufWriter::new(File::create(classes_path(path))?);
    serde_json::to_writer(&mut c, &dataset.class_names)?;
    c.write_all(b"\n")?;
    c.flush()?;
    Ok(())
}

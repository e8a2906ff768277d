//! JSON manifest plus one CSV per view and one for targets.
//!
//! Temporal CSVs hold one row per `(sample_id, t)` followed by the channel
//! columns. Static and categorical CSVs hold one row per sample, optionally
//! led by a `sample_id` column. The targets CSV has a `target` column, also
//! optionally led by `sample_id`. Paths resolve relative to the manifest.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{MultiViewDataset, Targets, Task};
use super::normalize::NormStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::views::{ViewKind, ViewSet, ViewSpec};

const SAMPLE_ID: &str = "sample_id";
const STEP: &str = "t";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub id: String,
    pub kind: ViewKind,
    pub path: PathBuf,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTargets {
    pub path: PathBuf,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub views: Vec<ManifestView>,
    pub targets: ManifestTargets,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<NormStats>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = open(path)?;
        Ok(serde_json::from_reader(file)?)
    }

    pub fn view_set(&self) -> Result<ViewSet> {
        ViewSet::new(
            self.views
                .iter()
                .map(|v| ViewSpec {
                    id: v.id.clone(),
                    kind: v.kind,
                    dims: v.dims.clone(),
                })
                .collect(),
        )
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::MalformedNumber {
                        path: path.to_path_buf(),
                        line,
                        column: headers.get(c).cloned().unwrap_or_else(|| c.to_string()),
                        value: field.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { headers, rows })
}

fn as_index(x: f64, what: &str, limit: usize) -> Result<usize> {
    if x < 0.0 || x.fract() != 0.0 || x as usize >= limit {
        return Err(Error::InvalidArgument(format!("{what} {x} outside 0..{limit}")));
    }
    Ok(x as usize)
}

/// Orders rows by an optional leading `sample_id` column and strips it.
fn keyed_rows(table: Table, view: &str, n: usize, width: usize) -> Result<Vec<f64>> {
    if table.rows.len() != n {
        return Err(Error::RowCount {
            view: view.to_string(),
            expected: n,
            found: table.rows.len(),
        });
    }
    let keyed = table.headers.first().map(String::as_str) == Some(SAMPLE_ID);
    let offset = usize::from(keyed);
    if table.headers.len() != width + offset {
        return Err(Error::shape(
            "load_dataset",
            format!(
                "`{view}` has {} value columns, {width} expected",
                table.headers.len() - offset
            ),
        ));
    }
    let mut out = vec![f64::NAN; n * width];
    for (r, row) in table.rows.iter().enumerate() {
        let i = if keyed { as_index(row[0], "sample_id", n)? } else { r };
        out[i * width..(i + 1) * width].copy_from_slice(&row[offset..]);
    }
    if out.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument(format!("`{view}` repeats a sample_id")));
    }
    Ok(out)
}

fn temporal_rows(table: Table, view: &str, n: usize, steps: usize, channels: usize) -> Result<Vec<f64>> {
    if table.headers.len() < 2 || table.headers[0] != SAMPLE_ID || table.headers[1] != STEP {
        return Err(Error::InvalidArgument(format!(
            "temporal view `{view}` needs leading `{SAMPLE_ID},{STEP}` columns"
        )));
    }
    if table.rows.len() != n * steps {
        return Err(Error::RowCount {
            view: view.to_string(),
            expected: n * steps,
            found: table.rows.len(),
        });
    }
    if table.headers.len() != channels + 2 {
        return Err(Error::shape(
            "load_dataset",
            format!("`{view}` has {} channels, {channels} expected", table.headers.len() - 2),
        ));
    }
    let mut out = vec![f64::NAN; n * steps * channels];
    for row in &table.rows {
        let i = as_index(row[0], "sample_id", n)?;
        let t = as_index(row[1], "t", steps)?;
        let at = (i * steps + t) * channels;
        out[at..at + channels].copy_from_slice(&row[2..]);
    }
    if out.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "`{view}` repeats a (sample_id, t) pair"
        )));
    }
    Ok(out)
}

pub fn load_dataset(manifest_path: &Path) -> Result<MultiViewDataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let views = manifest.view_set()?;

    let table = read_table(&base.join(&manifest.targets.path))?;
    let n = table.rows.len();
    let column = keyed_rows(table, "targets", n, 1)?;
    let targets = match manifest.targets.task {
        Task::Regression => Targets::Values(column),
        Task::Classification => {
            let limit = manifest.targets.classes.unwrap_or(usize::MAX);
            let labels = column
                .iter()
                .map(|&y| as_index(y, "class label", limit))
                .collect::<Result<Vec<_>>>()?;
            let classes = manifest
                .targets
                .classes
                .unwrap_or_else(|| labels.iter().max().map_or(2, |&c| (c + 1).max(2)));
            Targets::classes(labels, classes)?
        }
    };

    let data = manifest
        .views
        .iter()
        .zip(views.iter())
        .map(|(mv, spec)| {
            let table = read_table(&base.join(&mv.path))?;
            let values = match spec.kind {
                ViewKind::Temporal => temporal_rows(table, &spec.id, n, spec.dims[0], spec.dims[1])?,
                _ => keyed_rows(table, &spec.id, n, spec.raw_width())?,
            };
            Tensor::matrix(n, spec.raw_width(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(stats) = &manifest.norm_stats {
        for id in stats.views.keys() {
            views.index_of(id)?;
        }
    }
    MultiViewDataset::new(views, data, targets)
}

/// Writes `manifest.json`, one CSV per view and `targets.csv` into `dir`.
pub fn write_dataset(ds: &MultiViewDataset, dir: &Path, norm_stats: Option<&NormStats>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let n = ds.len();
    let mut manifest_views = Vec::new();
    for (v, spec) in ds.views().iter().enumerate() {
        let file = PathBuf::from(format!("{}.csv", spec.id));
        let mut w = csv::Writer::from_path(dir.join(&file))?;
        let x = ds.view(v);
        match spec.kind {
            ViewKind::Temporal => {
                let (steps, channels) = (spec.dims[0], spec.dims[1]);
                let mut header = vec![SAMPLE_ID.to_string(), STEP.to_string()];
                header.extend((0..channels).map(|c| format!("c{c}")));
                w.write_record(&header)?;
                for i in 0..n {
                    let row = x.row_slice(i);
                    for t in 0..steps {
                        let mut rec = vec![i.to_string(), t.to_string()];
                        rec.extend(row[t * channels..(t + 1) * channels].iter().map(f64::to_string));
                        w.write_record(&rec)?;
                    }
                }
            }
            _ => {
                let mut header = vec![SAMPLE_ID.to_string()];
                header.extend((0..spec.raw_width()).map(|c| format!("c{c}")));
                w.write_record(&header)?;
                for i in 0..n {
                    let mut rec = vec![i.to_string()];
                    rec.extend(x.row_slice(i).iter().map(f64::to_string));
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        manifest_views.push(ManifestView {
            id: spec.id.clone(),
            kind: spec.kind,
            path: file,
            dims: spec.dims.clone(),
        });
    }
    let mut w = csv::Writer::from_path(dir.join("targets.csv"))?;
    w.write_record([SAMPLE_ID, "target"])?;
    for (i, y) in ds.targets().as_column().iter().enumerate() {
        w.write_record([i.to_string(), y.to_string()])?;
    }
    w.flush()?;
    let classes = match ds.targets() {
        Targets::Classes { classes, .. } => Some(*classes),
        Targets::Values(_) => None,
    };
    let manifest = DatasetManifest {
        views: manifest_views,
        targets: ManifestTargets {
            path: "targets.csv".into(),
            task: ds.task(),
            classes,
        },
        norm_stats: norm_stats.cloned(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

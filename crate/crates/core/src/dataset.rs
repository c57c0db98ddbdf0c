//! Labeled scanpath collections and their on-disk layout.
//!
//! A dataset directory holds
//!
//! ```text
//! manifest.json                      item list, grid, provenance
//! scanpaths/<subject>__<image>.csv   fix_index,x_deg,y_deg,dur_ms
//! features/<subject>__<image>.csv    per-saccade channels (optional)
//! saliency/<image>.json + .csv       {rows, cols, extent_deg} + row-major grid (optional)
//! ```
//!
//! Raw recordings are `<name>.csv` with header `t_ms,x_deg,y_deg` next to a
//! `<name>.json` sidecar `{subject_id, image_id, sampling_rate}`.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{extract_features, Fixation, GazeRecording, GazeSample, SaccadeFeatures, SaccadeType, Scanpath};
use crate::scenewalk::{Grid, SaliencyMap};

const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;
const SCANPATH_HEADER: [&str; 4] = ["fix_index", "x_deg", "y_deg", "dur_ms"];
const FEATURE_HEADER: [&str; 11] = ["saccade_index", "type", "direction_deg", "a", "d", "v", "w", "rx", "ry", "gx", "gy"];
const RECORDING_HEADER: [&str; 3] = ["t_ms", "x_deg", "y_deg"];

/// Tool version, configuration hash and seed embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

/// One viewer on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub path: Scanpath,
    /// Per-saccade features with dynamics channels, when available.
    pub features: Option<Vec<SaccadeFeatures>>,
}

impl Item {
    pub fn subject_id(&self) -> &str {
        &self.path.subject_id
    }

    pub fn image_id(&self) -> &str {
        &self.path.image_id
    }

    /// Stored features, or base channels derived from the fixations.
    pub fn saccade_features(&self) -> Result<Cow<'_, [SaccadeFeatures]>> {
        match &self.features {
            Some(f) => Ok(Cow::Borrowed(f)),
            None => extract_features(&self.path, None, None).map(Cow::Owned),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub items: Vec<Item>,
    /// Grid and image extent shared by all images.
    pub grid: Option<Grid>,
    /// Saliency maps by image id.
    pub saliency: BTreeMap<String, SaliencyMap>,
}

impl Dataset {
    /// Sorted distinct subject ids; class `i` is `subjects()[i]`.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.items.iter().map(|i| i.subject_id()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Ids must be usable in file names, and each (subject, image) pair may
    /// occur once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            check_id(item.subject_id())?;
            check_id(item.image_id())?;
            if !seen.insert((item.subject_id(), item.image_id())) {
                return Err(Error::InvalidInput(format!(
                    "duplicate scanpath for subject {} on image {}",
                    item.subject_id(),
                    item.image_id()
                )));
            }
            if let Some(f) = &item.features {
                if f.len() + 1 != item.path.len() {
                    return Err(Error::InvalidInput(format!(
                        "{}/{}: {} feature rows for {} fixations",
                        item.subject_id(),
                        item.image_id(),
                        f.len(),
                        item.path.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Grid extent covering every fixation, used when no grid is stored.
    pub fn fixation_extent(&self) -> [f64; 2] {
        let mut ext = [0.0f64; 2];
        for f in self.items.iter().flat_map(|i| &i.path.fixations) {
            ext[0] = ext[0].max(f.x);
            ext[1] = ext[1].max(f.y);
        }
        [ext[0].ceil().max(1.0), ext[1].ceil().max(1.0)]
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.contains("__")
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "id {id:?} must be non-empty ASCII letters, digits, '-', '_' or '.', without \"__\""
        )))
    }
}

fn stem(subject: &str, image: &str) -> String {
    format!("{subject}__{image}")
}

/// Writes via a temporary file in the same directory and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

/// CSV rows with header check; yields `(line, fields)`.
fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let found = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if found.len() != header.len() || found.iter().zip(header).any(|(a, b)| a != *b) {
        return Err(Error::Parse {
            path: path.into(),
            row: 1,
            column: "header".into(),
            message: format!("expected `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(String::from).collect()));
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.into(),
            row,
            column: String::new(),
            message: format!("{kind:?}"),
        },
    }
}

fn parse_f64(path: &Path, row: usize, column: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| !v.is_nan())
        .ok_or_else(|| Error::Parse {
            path: path.into(),
            row,
            column: column.into(),
            message: format!("expected a number, found {s:?}"),
        })
}

fn parse_opt(path: &Path, row: usize, column: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(path, row, column, s).map(Some)
    }
}

/// Reads a Fisher feature table `subject_id,image_id,phi_1,…,phi_d` as
/// written by [`crate::fisher::features_csv`].
pub fn read_feature_table(path: &Path) -> Result<Vec<(String, String, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    let expected: Vec<String> = ["subject_id".to_string(), "image_id".to_string()]
        .into_iter()
        .chain((1..=header.len().saturating_sub(2)).map(|i| format!("phi_{i}")))
        .collect();
    if header.len() < 3 || header != expected {
        return Err(Error::Parse {
            path: path.into(),
            row: 1,
            column: "header".into(),
            message: format!("expected `subject_id,image_id,phi_1,...`, found `{}`", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let phi = rec
            .iter()
            .enumerate()
            .skip(2)
            .map(|(j, v)| parse_f64(path, line, &header[j], v))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((rec[0].to_string(), rec[1].to_string(), phi));
    }
    Ok(rows)
}

pub fn scanpath_to_csv(path: &Scanpath) -> String {
    let mut out = SCANPATH_HEADER.join(",");
    out.push('\n');
    for (i, f) in path.fixations.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", f.x, f.y, f.duration_ms));
    }
    out
}

pub fn read_scanpath_csv(file: &Path, subject_id: &str, image_id: &str) -> Result<Scanpath> {
    let mut fixations = Vec::new();
    for (line, row) in read_csv(file, &SCANPATH_HEADER)? {
        let index = parse_f64(file, line, "fix_index", &row[0])?;
        if index != fixations.len() as f64 {
            return Err(Error::Parse {
                path: file.into(),
                row: line,
                column: "fix_index".into(),
                message: format!("expected {}, found {}", fixations.len(), row[0]),
            });
        }
        let x = parse_f64(file, line, "x_deg", &row[1])?;
        let y = parse_f64(file, line, "y_deg", &row[2])?;
        let d = parse_f64(file, line, "dur_ms", &row[3])?;
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Parse {
                path: file.into(),
                row: line,
                column: "dur_ms".into(),
                message: format!("duration must be positive, found {d}"),
            });
        }
        fixations.push(Fixation::new(x, y, d));
    }
    Ok(Scanpath::new(fixations, subject_id, image_id))
}

pub fn features_to_csv(features: &[SaccadeFeatures]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = FEATURE_HEADER.join(",");
    out.push('\n');
    for (i, f) in features.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{}\n",
            f.kind.code(),
            f.direction,
            f.amplitude,
            f.duration,
            opt(f.velocity),
            opt(f.acceleration),
            opt(f.ratio_x),
            opt(f.ratio_y),
            opt(f.vigor_x),
            opt(f.vigor_y),
        ));
    }
    out
}

pub fn read_features_csv(file: &Path) -> Result<Vec<SaccadeFeatures>> {
    let mut out = Vec::new();
    for (line, row) in read_csv(file, &FEATURE_HEADER)? {
        let code = row[1]
            .parse::<u8>()
            .ok()
            .and_then(|c| SaccadeType::try_from(c).ok())
            .ok_or_else(|| Error::Parse {
                path: file.into(),
                row: line,
                column: "type".into(),
                message: format!("expected a saccade type 1-4, found {:?}", row[1]),
            })?;
        let num = |k: usize| parse_f64(file, line, FEATURE_HEADER[k], &row[k]);
        let opt = |k: usize| parse_opt(file, line, FEATURE_HEADER[k], &row[k]);
        let mut f = SaccadeFeatures::base(code, num(2)?, num(3)?, num(4)?);
        f.velocity = opt(5)?;
        f.acceleration = opt(6)?;
        f.ratio_x = opt(7)?;
        f.ratio_y = opt(8)?;
        f.vigor_x = opt(9)?;
        f.vigor_y = opt(10)?;
        out.push(f);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaliencyHeader {
    rows: usize,
    cols: usize,
    extent_deg: [f64; 2],
}

pub fn write_saliency(dir: &Path, image_id: &str, map: &SaliencyMap) -> Result<()> {
    let g = map.grid;
    let header = SaliencyHeader {
        rows: g.rows,
        cols: g.cols,
        extent_deg: g.extent_deg,
    };
    write_json(&dir.join(format!("{image_id}.json")), &header)?;
    let mut csv = String::new();
    for row in map.values().chunks(g.cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    write_atomic(&dir.join(format!("{image_id}.csv")), csv.as_bytes())
}

pub fn read_saliency(dir: &Path, image_id: &str) -> Result<SaliencyMap> {
    let header: SaliencyHeader = read_json(&dir.join(format!("{image_id}.json")))?;
    let grid = Grid::new(header.rows, header.cols, header.extent_deg)?;
    let file = dir.join(format!("{image_id}.csv"));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(&file)
        .map_err(|e| csv_error(&file, e))?;
    let mut values = Vec::with_capacity(grid.n_cells());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(&file, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != grid.cols {
            return Err(Error::Parse {
                path: file.clone(),
                row: line,
                column: String::new(),
                message: format!("expected {} columns, found {}", grid.cols, rec.len()),
            });
        }
        for (j, v) in rec.iter().enumerate() {
            values.push(parse_f64(&file, line, &format!("col {}", j + 1), v)?);
        }
    }
    SaliencyMap::from_values(grid, values)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordingSidecar {
    subject_id: String,
    image_id: String,
    sampling_rate: f64,
}

/// Reads `<stem>.csv` and its `<stem>.json` sidecar.
pub fn read_recording(csv_file: &Path) -> Result<GazeRecording> {
    let meta: RecordingSidecar = read_json(&csv_file.with_extension("json"))?;
    let mut samples = Vec::new();
    for (line, row) in read_csv(csv_file, &RECORDING_HEADER)? {
        // Rows with a missing coordinate (blinks, track loss) are dropped.
        if row[1].is_empty() || row[2].is_empty() || row[1] == "NaN" || row[2] == "NaN" {
            continue;
        }
        samples.push(GazeSample {
            t_ms: parse_f64(csv_file, line, "t_ms", &row[0])?,
            x: parse_f64(csv_file, line, "x_deg", &row[1])?,
            y: parse_f64(csv_file, line, "y_deg", &row[2])?,
        });
    }
    GazeRecording::new(samples, meta.sampling_rate, meta.subject_id, meta.image_id)
}

pub fn write_recording(csv_file: &Path, rec: &GazeRecording) -> Result<()> {
    let meta = RecordingSidecar {
        subject_id: rec.subject_id.clone(),
        image_id: rec.image_id.clone(),
        sampling_rate: rec.sampling_rate(),
    };
    write_json(&csv_file.with_extension("json"), &meta)?;
    let mut out = RECORDING_HEADER.join(",");
    out.push('\n');
    for s in rec.samples() {
        out.push_str(&format!("{},{},{}\n", s.t_ms, s.x, s.y));
    }
    write_atomic(csv_file, out.as_bytes())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    subject_id: String,
    image_id: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<Grid>,
    items: Vec<ManifestItem>,
}

pub fn write_dataset(dir: &Path, data: &Dataset, provenance: Option<&Provenance>) -> Result<()> {
    data.validate()?;
    for item in &data.items {
        let name = format!("{}.csv", stem(item.subject_id(), item.image_id()));
        write_atomic(&dir.join("scanpaths").join(&name), scanpath_to_csv(&item.path).as_bytes())?;
        if let Some(f) = &item.features {
            write_atomic(&dir.join("features").join(&name), features_to_csv(f).as_bytes())?;
        }
    }
    for (image, map) in &data.saliency {
        check_id(image)?;
        write_saliency(&dir.join("saliency"), image, map)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        provenance: provenance.cloned(),
        grid: data.grid,
        items: data
            .items
            .iter()
            .map(|i| ManifestItem {
                subject_id: i.subject_id().into(),
                image_id: i.image_id().into(),
            })
            .collect(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Item list from the manifest, or from `scanpaths/*.csv` when there is none.
fn list_items(dir: &Path) -> Result<(Vec<(String, String)>, Option<Grid>)> {
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        let m: Manifest = read_json(&manifest_path)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported format_version {}",
                manifest_path.display(),
                m.format_version
            )));
        }
        return Ok((m.items.into_iter().map(|i| (i.subject_id, i.image_id)).collect(), m.grid));
    }
    let sp = dir.join("scanpaths");
    let mut out = Vec::new();
    if sp.is_dir() {
        for entry in fs::read_dir(&sp).map_err(|e| Error::io(&sp, e))? {
            let p = entry.map_err(|e| Error::io(&sp, e))?.path();
            if p.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let (s, i) = name.split_once("__").ok_or_else(|| {
                Error::InvalidInput(format!("{}: expected <subject>__<image>.csv", p.display()))
            })?;
            out.push((s.to_string(), i.to_string()));
        }
    }
    out.sort();
    Ok((out, None))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (items, grid) = list_items(dir)?;
    if items.is_empty() {
        return Err(Error::InvalidInput(format!("no scanpaths found in {}", dir.display())));
    }
    let mut data = Dataset {
        items: Vec::with_capacity(items.len()),
        grid,
        saliency: BTreeMap::new(),
    };
    for (s, i) in &items {
        check_id(s)?;
        check_id(i)?;
        let name = format!("{}.csv", stem(s, i));
        let path = read_scanpath_csv(&dir.join("scanpaths").join(&name), s, i)?;
        let fpath: PathBuf = dir.join("features").join(&name);
        let features = if fpath.exists() { Some(read_features_csv(&fpath)?) } else { None };
        data.items.push(Item { path, features });
    }
    let sal_dir = dir.join("saliency");
    let images: BTreeSet<&str> = data.items.iter().map(|i| i.image_id()).collect();
    for image in images {
        if sal_dir.join(format!("{image}.json")).exists() {
            data.saliency.insert(image.to_string(), read_saliency(&sal_dir, image)?);
        }
    }
    data.validate()?;
    Ok(data)
}

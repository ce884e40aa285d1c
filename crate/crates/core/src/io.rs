//! File formats: point clouds, distance matrices, diagrams, configs,
//! checkpoints, datasets, manifests and SVG figures.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! reader reproduces the written values bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Checkpoint;
use crate::geometry::{DistanceMatrix, LabeledCloud, PointCloud};
use crate::persistence::{DiagramPoint, PersistenceDiagram};
use crate::training::{Dataset, Sample};
use crate::{Error, Result};

/// Tolerance for asymmetric distance-matrix entries, which are averaged.
pub const SYMMETRY_TOL: f64 = 1e-12;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn content_lines(s: &str) -> impl Iterator<Item = (usize, &str)> {
    s.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_float(line: usize, field: &str) -> Result<f64> {
    let t = field.trim();
    let v = match t {
        "inf" | "+inf" => f64::INFINITY,
        "-inf" => f64::NEG_INFINITY,
        _ => t.parse::<f64>().map_err(|_| parse_err(line, format!("not a number: {t:?}")))?,
    };
    if v.is_nan() {
        return Err(parse_err(line, "NaN is not allowed"));
    }
    Ok(v)
}

fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

/// Point cloud CSV: a header `x0,...,x{d-1},outlier` and one point per line.
pub fn cloud_to_csv(pc: &PointCloud) -> String {
    let mut out = String::new();
    for k in 0..pc.dim() {
        let _ = write!(out, "x{k},");
    }
    out.push_str("outlier\n");
    for (p, &o) in pc.points().zip(pc.outliers()) {
        for v in p {
            out.push_str(&fmt_float(*v));
            out.push(',');
        }
        out.push_str(if o { "1\n" } else { "0\n" });
    }
    out
}

/// Reads a point cloud. The header is optional; a last header column named
/// `outlier` holds 0/1 flags, and without a header every column is a
/// coordinate.
pub fn cloud_from_csv(s: &str) -> Result<PointCloud> {
    let mut lines = content_lines(s).peekable();
    let mut has_flag = false;
    let mut width = None;
    if let Some(&(ln, first)) = lines.peek() {
        let fields: Vec<&str> = first.split(',').map(str::trim).collect();
        if fields.iter().any(|f| f.parse::<f64>().is_err()) {
            has_flag = fields.last() == Some(&"outlier");
            if fields.iter().filter(|f| **f == "outlier").count() > usize::from(has_flag) {
                return Err(parse_err(ln, "outlier must be the last column"));
            }
            width = Some(fields.len());
            lines.next();
        }
    }
    let (mut points, mut flags) = (Vec::new(), Vec::new());
    for (ln, l) in lines {
        let fields: Vec<&str> = l.split(',').collect();
        let w = *width.get_or_insert(fields.len());
        if fields.len() != w {
            return Err(parse_err(ln, format!("expected {w} columns, found {}", fields.len())));
        }
        let ncoord = if has_flag { w - 1 } else { w };
        if ncoord == 0 {
            return Err(parse_err(ln, "no coordinate columns"));
        }
        let p = fields[..ncoord]
            .iter()
            .map(|f| parse_float(ln, f))
            .collect::<Result<Vec<_>>>()?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(ln, "coordinates must be finite"));
        }
        points.push(p);
        flags.push(if has_flag {
            match fields[w - 1].trim() {
                "0" => false,
                "1" => true,
                f => return Err(parse_err(ln, format!("outlier flag must be 0 or 1, found {f:?}"))),
            }
        } else {
            false
        });
    }
    if points.is_empty() {
        return Err(parse_err(0, "no points"));
    }
    PointCloud::with_outliers(points, flags)
}

/// Distance matrix CSV: `n` lines of `n` comma-separated values.
pub fn distances_to_csv(d: &DistanceMatrix) -> String {
    let mut out = String::new();
    for i in 0..d.len() {
        let row: Vec<String> = d.row(i).iter().map(|v| fmt_float(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads a distance matrix. Entries that differ from their transpose by at
/// most [`SYMMETRY_TOL`] are replaced by the average of the two, as are
/// diagonal entries within the same tolerance of zero.
pub fn distances_from_csv(s: &str) -> Result<DistanceMatrix> {
    let mut rows = Vec::new();
    for (ln, l) in content_lines(s) {
        let row = l.split(',').map(|f| parse_float(ln, f)).collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(parse_err(ln, format!("expected {first} columns, found {}", row.len())));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(parse_err(0, "empty matrix"));
    }
    if rows[0].len() != n {
        return Err(Error::InvalidDistanceMatrix(format!("{n} rows but {} columns", rows[0].len())));
    }
    let mut flat: Vec<f64> = rows.into_iter().flatten().collect();
    for i in 0..n {
        let dii = flat[i * n + i];
        if dii.abs() > SYMMETRY_TOL {
            return Err(Error::InvalidDistanceMatrix(format!("diagonal entry {i} is {dii}")));
        }
        flat[i * n + i] = 0.0;
        for j in (i + 1)..n {
            let (a, b) = (flat[i * n + j], flat[j * n + i]);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidDistanceMatrix(format!("entry ({i},{j}) is not finite")));
            }
            if (a - b).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidDistanceMatrix(format!(
                    "entries ({i},{j}) = {a} and ({j},{i}) = {b} differ by more than {SYMMETRY_TOL:e}"
                )));
            }
            let m = if a == b { a } else { (a + b) / 2.0 };
            flat[i * n + j] = m;
            flat[j * n + i] = m;
        }
    }
    DistanceMatrix::from_flat(n, flat)
}

const DIAGRAM_HEADER: &str = "degree,birth,death,birth_cell,death_cell";

/// Diagram CSV: `degree,birth,death,birth_cell,death_cell`, with `inf` and
/// `-` as the death value and cell of essential classes.
pub fn diagram_to_csv(diag: &PersistenceDiagram) -> String {
    let mut out = format!("{DIAGRAM_HEADER}\n");
    for p in &diag.points {
        let dc = p.death_cell.map_or("-".to_string(), |c| c.to_string());
        let _ = writeln!(out, "{},{},{},{},{dc}", p.degree, fmt_float(p.birth), fmt_float(p.death), p.birth_cell);
    }
    out
}

pub fn diagram_from_csv(s: &str) -> Result<PersistenceDiagram> {
    let mut lines = content_lines(s);
    match lines.next() {
        Some((_, h)) if h.replace(' ', "") == DIAGRAM_HEADER => {}
        Some((ln, _)) => return Err(parse_err(ln, format!("expected header {DIAGRAM_HEADER:?}"))),
        None => return Err(parse_err(0, "missing header")),
    }
    let mut points = Vec::new();
    for (ln, l) in lines {
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(parse_err(ln, format!("expected 5 columns, found {}", f.len())));
        }
        let int = |v: &str| v.parse::<usize>().map_err(|_| parse_err(ln, format!("not an index: {v:?}")));
        let degree = int(f[0])?;
        let birth = parse_float(ln, f[1])?;
        let death = parse_float(ln, f[2])?;
        let birth_cell = int(f[3])?;
        let death_cell = if f[4] == "-" { None } else { Some(int(f[4])?) };
        if death_cell.is_none() != (death == f64::INFINITY) {
            return Err(parse_err(ln, "infinite death must come with a missing death cell"));
        }
        if !birth.is_finite() || death < birth {
            return Err(parse_err(ln, "need finite birth <= death"));
        }
        points.push(DiagramPoint {
            birth,
            death,
            degree,
            birth_cell,
            death_cell,
        });
    }
    Ok(PersistenceDiagram { points })
}

/// Parses the flat config format:
///
/// ```text
/// # comment
/// top_level = value
/// [section]
/// key = value          # becomes "section.key"
/// ```
///
/// Keys and section names are `[A-Za-z0-9_-]+`. Values are trimmed and run to
/// the end of the line or to a `#` that starts the value or follows
/// whitespace. Duplicate keys are errors.
pub fn parse_config(s: &str) -> Result<BTreeMap<String, String>> {
    let valid = |k: &str| !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (ln, l) in content_lines(s) {
        if let Some(rest) = strip_comment(l).strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| parse_err(ln, "unterminated section header"))?
                .trim();
            if !valid(name) {
                return Err(parse_err(ln, format!("bad section name {name:?}")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| parse_err(ln, "expected key = value"))?;
        let (k, v) = (k.trim(), strip_comment(v));
        if !valid(k) {
            return Err(parse_err(ln, format!("bad key {k:?}")));
        }
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if out.insert(key.clone(), v.to_string()).is_some() {
            return Err(parse_err(ln, format!("duplicate key {key:?}")));
        }
    }
    Ok(out)
}

/// Drops a comment: a `#` that opens the text or follows whitespace.
fn strip_comment(v: &str) -> &str {
    let v = v.trim_start();
    if v.starts_with('#') {
        return "";
    }
    let cut = v.char_indices().find(|&(i, c)| c == '#' && v[..i].ends_with(char::is_whitespace));
    cut.map_or(v, |(i, _)| &v[..i]).trim_end()
}

/// Writes a map in the format read by [`parse_config`], grouping dotted keys
/// under their first component.
pub fn write_config(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for (k, v) in map.iter().filter(|(k, _)| !k.contains('.')) {
        let _ = writeln!(out, "{k} = {v}");
    }
    for (k, v) in map {
        let Some((sec, key)) = k.split_once('.') else { continue };
        if current != Some(sec) {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{sec}]");
            current = Some(sec);
        }
        let _ = writeln!(out, "{key} = {v}");
    }
    out
}

/// Writes `contents` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, ckpt.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    Checkpoint::from_json(&text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance record written once per output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub revision: String,
    pub seeds: Vec<u64>,
    /// Content hashes of the inputs, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    /// Content hashes of the outputs, keyed by path relative to the directory.
    pub outputs: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seeds: Vec<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            revision: env!("CARGO_PKG_VERSION").into(),
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        for f in files {
            self.inputs.insert(f.display().to_string(), sha256_hex(&fs::read(&f)?));
        }
        Ok(())
    }

    /// Hashes every file under `dir` except the manifest and lock.
    pub fn record_outputs(&mut self, dir: &Path) -> Result<()> {
        self.outputs = hash_tree(dir)?;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }

    /// Recomputes output hashes and reports the first mismatch.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let now = hash_tree(dir)?;
        for (k, v) in &self.outputs {
            match now.get(k) {
                Some(h) if h == v => {}
                Some(_) => return Err(Error::Checkpoint(format!("{k} changed since the manifest was written"))),
                None => return Err(Error::Checkpoint(format!("{k} is missing"))),
            }
        }
        Ok(())
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        if rel == MANIFEST_FILE || rel == LOCK_FILE || rel.ends_with(".tmp") {
            continue;
        }
        out.insert(rel, sha256_hex(&fs::read(&f)?));
    }
    Ok(out)
}

pub const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Checkpoint(format!(
                "{} is locked by another run; remove {} if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub const LABELS_FILE: &str = "labels.csv";

/// Writes `cloud_NNNN.csv` files and a `labels.csv` of `file,label` lines.
/// Returns the written paths.
pub fn save_dataset(dir: &Path, clouds: &[LabeledCloud]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut labels = String::from("file,label\n");
    let mut written = Vec::with_capacity(clouds.len() + 1);
    for (k, c) in clouds.iter().enumerate() {
        let name = format!("cloud_{k:04}.csv");
        let path = dir.join(&name);
        fs::write(&path, cloud_to_csv(&c.cloud))?;
        let _ = writeln!(labels, "{name},{}", c.label);
        written.push(path);
    }
    let lp = dir.join(LABELS_FILE);
    fs::write(&lp, labels)?;
    written.push(lp);
    Ok(written)
}

/// Parses a `file,label` index. File names must stay inside the dataset
/// directory.
pub fn parse_labels(text: &str) -> Result<Vec<(String, usize)>> {
    let mut lines = content_lines(text);
    if let Some((ln, h)) = lines.next() {
        if h.replace(' ', "") != "file,label" {
            return Err(parse_err(ln, "expected header \"file,label\""));
        }
    }
    let mut out = Vec::new();
    for (ln, l) in lines {
        let (file, label) = l.split_once(',').ok_or_else(|| parse_err(ln, "expected file,label"))?;
        let file = file.trim();
        if file.is_empty() || file.contains("..") || Path::new(file).is_absolute() {
            return Err(parse_err(ln, format!("file {file:?} must stay inside the dataset directory")));
        }
        let label: usize = label.trim().parse().map_err(|_| parse_err(ln, "label must be a class index"))?;
        out.push((file.to_string(), label));
    }
    Ok(out)
}

/// Loads a dataset directory. Each `labels.csv` line names a file relative to
/// the directory; files ending in `.dist.csv` hold distance matrices, all
/// others point clouds.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (file, label) in parse_labels(&fs::read_to_string(dir.join(LABELS_FILE))?)? {
        let file = file.as_str();
        let body = fs::read_to_string(dir.join(file))?;
        let with_file = |e: Error| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{file}: {msg}"),
            },
            e => e,
        };
        samples.push(if file.ends_with(".dist.csv") {
            Sample {
                cloud: None,
                distances: distances_from_csv(&body).map_err(with_file)?,
                label,
            }
        } else {
            let cloud = cloud_from_csv(&body).map_err(with_file)?;
            Sample {
                distances: crate::geometry::pairwise_distances(&cloud),
                cloud: Some(cloud),
                label,
            }
        });
    }
    Dataset::new(samples)
}

const PALETTE: [(f64, f64, f64); 3] = [(0.23, 0.30, 0.75), (0.87, 0.87, 0.87), (0.71, 0.02, 0.15)];

/// Blue-white-red ramp over `[0, 1]`.
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * 2.0;
    let (a, b, u) = if t <= 1.0 { (PALETTE[0], PALETTE[1], t) } else { (PALETTE[1], PALETTE[2], t - 1.0) };
    let mix = |x: f64, y: f64| ((x + (y - x) * u) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Static scatter plot. Points are colored by `values` when given, flagged
/// points get a black ring, and `diagonal` draws `y = x` for diagrams.
pub fn scatter_svg(points: &[(f64, f64)], values: Option<&[f64]>, flags: Option<&[bool]>, diagonal: bool, title: &str) -> String {
    let (size, pad) = (480.0, 40.0);
    let finite: Vec<&(f64, f64)> = points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &finite {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.1);
        y1 = y1.max(p.1);
    }
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if diagonal {
        (x0, y0) = (x0.min(y0), x0.min(y0));
        (x1, y1) = (x1.max(y1), x1.max(y1));
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let sx = |x: f64| pad + (x - x0) / span * (size - 2.0 * pad);
    let sy = |y: f64| size - pad - (y - y0) / span * (size - 2.0 * pad);
    let (vmin, vmax) = values.map_or((0.0, 1.0), |v| {
        v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)))
    });
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, xml_escape(title));
    if diagonal {
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
            sx(x0),
            sy(x0),
            sx(x0 + span),
            sy(x0 + span)
        );
    }
    for (k, p) in points.iter().enumerate() {
        if !(p.0.is_finite() && p.1.is_finite()) {
            continue;
        }
        let fill = match values {
            Some(v) if vmax > vmin => ramp((v[k] - vmin) / (vmax - vmin)),
            Some(_) => ramp(0.5),
            None => "#3b4cc0".into(),
        };
        let ring = flags.is_some_and(|f| f[k]);
        let stroke = if ring { r#" stroke="black" stroke-width="1.5""# } else { "" };
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{fill}"{stroke}/>"#, sx(p.0), sy(p.1));
    }
    if values.is_some() {
        let _ = writeln!(
            out,
            r#"<text x="{pad}" y="{}" font-family="sans-serif" font-size="11">min {vmin:.4} max {vmax:.4}</text>"#,
            size - 12.0
        );
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Diagram scatter of one degree's finite points.
pub fn diagram_svg(diag: &PersistenceDiagram, degree: usize) -> String {
    let pts = diag.finite(degree);
    scatter_svg(&pts, None, None, true, &format!("degree {degree} diagram"))
}

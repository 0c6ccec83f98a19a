//! File formats: sinogram and image CSV, little-endian binary sinograms,
//! 16-bit PGM images, plain tables and the TOML output manifest.
//!
//! Encoders return bytes so that callers can hash exactly what is written.
//! Floats are printed with Rust's shortest round-trip representation, so a
//! CSV written here reads back bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Image, Sinogram, SinogramKind};

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse number {field:?}")))
}

fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse integer {field:?}")))
}

fn join_row(out: &mut String, values: impl Iterator<Item = f64>) {
    for (k, v) in values.enumerate() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Sinogram as CSV: a `rows,cols,kind` header line, then one line per
/// detector row holding the values for every column.
pub fn encode_sinogram_csv(sino: &Sinogram) -> Vec<u8> {
    let (r, p) = (sino.rows(), sino.cols());
    let mut out = format!("rows,cols,kind\n{r},{p},{}\n", sino.kind().as_str());
    for i in 0..r {
        join_row(&mut out, (0..p).map(|j| sino.get(i, j)));
    }
    out.into_bytes()
}

pub fn decode_sinogram_csv(text: &str) -> Result<Sinogram> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "rows,cols,kind" => {}
        _ => return format_err("line 1: expected header rows,cols,kind"),
    }
    let (ln, dims) = lines.next().ok_or_else(|| Error::Format("missing dimension line".into()))?;
    let fields: Vec<&str> = dims.split(',').collect();
    if fields.len() != 3 {
        return format_err(format!("line {}: expected rows,cols,kind", ln + 1));
    }
    let r = parse_usize(fields[0], ln + 1)?;
    let p = parse_usize(fields[1], ln + 1)?;
    let kind = SinogramKind::parse(fields[2].trim())
        .ok_or_else(|| Error::Format(format!("line {}: unknown sinogram kind {:?}", ln + 1, fields[2])))?;
    let mut values = vec![0.0; r * p];
    let mut seen = 0;
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if seen == r {
            return format_err(format!("line {}: more than {r} rows", ln + 1));
        }
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != p {
            return format_err(format!("line {}: expected {p} values, found {}", ln + 1, row.len()));
        }
        for (j, f) in row.iter().enumerate() {
            values[j * r + seen] = parse_f64(f, ln + 1)?;
        }
        seen += 1;
    }
    if seen != r {
        return format_err(format!("expected {r} rows, found {seen}"));
    }
    Sinogram::from_values(r, p, kind, values)
}

const BINARY_MAGIC: f64 = 1.0;
const BINARY_HEADER: usize = 8;

/// Sinogram as little-endian `f64`: an 8-value header
/// `[format version, rows, cols, kind code, 0, 0, 0, 0]` followed by the
/// values in storage order (detector index fastest).
pub fn encode_sinogram_bin(sino: &Sinogram) -> Vec<u8> {
    let header = [
        BINARY_MAGIC,
        sino.rows() as f64,
        sino.cols() as f64,
        f64::from(sino.kind().code()),
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    header
        .iter()
        .chain(sino.values())
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

pub fn decode_sinogram_bin(bytes: &[u8]) -> Result<Sinogram> {
    if !bytes.len().is_multiple_of(8) || bytes.len() < BINARY_HEADER * 8 {
        return format_err(format!("binary sinogram has invalid length {}", bytes.len()));
    }
    let all: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if all[0] != BINARY_MAGIC {
        return format_err(format!("unsupported binary format version {}", all[0]));
    }
    let as_count = |x: f64, what: &str| {
        if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
            Ok(x as usize)
        } else {
            format_err(format!("invalid {what} {x} in binary header"))
        }
    };
    let r = as_count(all[1], "row count")?;
    let p = as_count(all[2], "column count")?;
    let kind = SinogramKind::from_code(as_count(all[3], "kind code")? as u32)
        .ok_or_else(|| Error::Format(format!("unknown sinogram kind code {}", all[3])))?;
    let data = &all[BINARY_HEADER..];
    if data.len() != r * p {
        return format_err(format!("header says {r}x{p} values, file holds {}", data.len()));
    }
    Sinogram::from_values(r, p, kind, data.to_vec())
}

/// Image as CSV: header `n,domain_side`, then `n` rows top to bottom.
pub fn encode_image_csv(img: &Image) -> Vec<u8> {
    let n = img.n();
    let mut out = format!("n,domain_side\n{n},{}\n", img.domain_side());
    for row in img.values().chunks(n) {
        join_row(&mut out, row.iter().copied());
    }
    out.into_bytes()
}

pub fn decode_image_csv(text: &str) -> Result<Image> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "n,domain_side" => {}
        _ => return format_err("line 1: expected header n,domain_side"),
    }
    let (ln, dims) = lines.next().ok_or_else(|| Error::Format("missing size line".into()))?;
    let (a, b) = dims
        .split_once(',')
        .ok_or_else(|| Error::Format(format!("line {}: expected n,domain_side", ln + 1)))?;
    let n = parse_usize(a, ln + 1)?;
    let side = parse_f64(b, ln + 1)?;
    let mut values = Vec::with_capacity(n * n);
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for f in line.split(',') {
            values.push(parse_f64(f, ln + 1)?);
        }
        if values.len() - before != n {
            return format_err(format!("line {}: expected {n} values", ln + 1));
        }
    }
    Image::from_values(n, side, values).map_err(|e| Error::Format(e.to_string()))
}

/// Linear grey-level mapping used when writing PGM images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub low: f64,
    pub high: f64,
}

impl Window {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && high > low) {
            return Err(Error::InvalidArgument(format!("invalid display window [{low}, {high}]")));
        }
        Ok(Self { low, high })
    }

    /// Symmetric window `[-m, m]` around zero, `m` the largest magnitude
    /// (or 1 for an all-zero image).
    pub fn symmetric(values: &[f64]) -> Self {
        let m = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let m = if m > 0.0 && m.is_finite() { m } else { 1.0 };
        Self { low: -m, high: m }
    }

    pub fn level(&self, v: f64) -> u16 {
        let t = ((v - self.low) / (self.high - self.low)).clamp(0.0, 1.0);
        if t.is_nan() {
            0
        } else {
            (t * 65535.0).round() as u16
        }
    }
}

/// Binary 16-bit PGM (big-endian samples, as the format prescribes).
pub fn encode_pgm16(img: &Image, window: Window) -> Vec<u8> {
    let n = img.n();
    let mut out = format!("P5\n{n} {n}\n65535\n").into_bytes();
    out.reserve(2 * n * n);
    for &v in img.values() {
        out.extend_from_slice(&window.level(v).to_be_bytes());
    }
    out
}

/// Reads a 16-bit PGM written by [`encode_pgm16`]; returns the side length
/// and grey levels.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return format_err("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return format_err("not a 16-bit binary PGM");
    }
    let w = parse_usize(&fields[1], 2)?;
    let h = parse_usize(&fields[2], 2)?;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != 2 * w * h {
        return format_err(format!("PGM body has {} bytes, expected {}", data.len(), 2 * w * h));
    }
    Ok((w, h, data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

/// A small CSV table of preformatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format("empty table".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return format_err(format!("line {}: expected {} fields", k + 2, header.len()));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("table has no column {name:?}")))
    }

    /// Parses column `name` as floats.
    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows.iter().enumerate().map(|(k, r)| parse_f64(&r[c], k + 2)).collect()
    }
}

/// Formats a float for a metrics table (fixed six decimals, `nan` kept).
pub fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub path: String,
    pub window_low: f64,
    pub window_high: f64,
    pub unit: String,
}

/// One measurement set (or job) recorded with its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEntry {
    pub label: String,
    pub intensity: f64,
    /// Seeds the true flat-field, the flat samples and the counts (each
    /// on its own stream).
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub set: String,
    pub model: String,
    pub error: String,
    pub detectors: Vec<usize>,
}

/// Record of one pipeline stage: what was run, with which configuration,
/// and every file written, with its hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub experiment: String,
    pub config_fingerprint: String,
    pub tool_version: String,
    #[serde(default)]
    pub config: Option<toml::Table>,
    #[serde(default)]
    pub sets: Vec<SetEntry>,
    #[serde(default)]
    pub failures: Vec<FailureEntry>,
    #[serde(default)]
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("cannot read manifest {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn entry(&self, rel: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == rel)
    }

    /// Reads a listed file and checks its hash.
    pub fn read_verified(&self, dir: &Path, rel: &str) -> Result<Vec<u8>> {
        let entry = self
            .entry(rel)
            .ok_or_else(|| Error::Format(format!("{rel} is not listed in {}", dir.join(MANIFEST_NAME).display())))?;
        let bytes = fs::read(dir.join(rel))?;
        let got = sha256_hex(&bytes);
        if got != entry.sha256 {
            return format_err(format!("{rel}: content hash {got} does not match manifest {}", entry.sha256));
        }
        Ok(bytes)
    }

    pub fn read_verified_text(&self, dir: &Path, rel: &str) -> Result<String> {
        String::from_utf8(self.read_verified(dir, rel)?).map_err(|_| Error::Format(format!("{rel} is not UTF-8")))
    }
}

/// Owner of one output directory: the only writer, so every file ends up in
/// the manifest.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutputDir {
    /// Creates (or reuses) `root`; an existing manifest there is replaced
    /// when [`OutputDir::finish`] runs.
    pub fn create(root: &Path, manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        let entry = FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        };
        match self.manifest.files.iter_mut().find(|f| f.path == rel) {
            Some(f) => *f = entry,
            None => self.manifest.files.push(entry),
        }
        Ok(())
    }

    /// Writes a PGM and records its window.
    pub fn write_image_pgm(&mut self, rel: &str, img: &Image, window: Window, unit: &str) -> Result<()> {
        self.write(rel, &encode_pgm16(img, window))?;
        self.manifest.images.retain(|e| e.path != rel);
        self.manifest.images.push(ImageEntry {
            path: rel.to_string(),
            window_low: window.low,
            window_high: window.high,
            unit: unit.to_string(),
        });
        Ok(())
    }

    pub fn finish(mut self) -> Result<Manifest> {
        self.manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        self.manifest.images.sort_by(|a, b| a.path.cmp(&b.path));
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        fs::write(self.root.join(MANIFEST_NAME), text)?;
        Ok(self.manifest)
    }
}

//! On-disk formats: radar cubes, segment tables and the dataset manifest.
//!
//! A cube is stored as `<name>.bin` (interleaved little-endian `f32` I/Q,
//! frame-major) with a `<name>.json` sidecar holding its [`RadarMeta`].
//! Segment tables are CSV with columns `scene,offset,y_0..y_{l-1}` and,
//! when the truth is known, `x_0..x_{l-1}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{PairedSegment, RadarCube, RadarMeta};
use crate::synth::Split;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.into(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format { path: path.into(), msg: msg.into() }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_cube(path: &Path, cube: &RadarCube) -> Result<()> {
    let meta = serde_json::to_string_pretty(&cube.meta).expect("meta serializes");
    std::fs::write(sidecar(path), meta).map_err(io_err(&sidecar(path)))?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for s in &cube.samples {
        w.write_all(&s.re.to_le_bytes()).map_err(io_err(path))?;
        w.write_all(&s.im.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_cube(path: &Path) -> Result<RadarCube> {
    let side = sidecar(path);
    let text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta: RadarMeta = serde_json::from_str(&text).map_err(|e| format_err(&side, e.to_string()))?;
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() % 8 != 0 {
        return Err(format_err(path, "cube size is not a whole number of I/Q pairs"));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let samples = bytes.chunks_exact(8).map(|c| Complex32::new(f(&c[..4]), f(&c[4..]))).collect();
    RadarCube::new(meta, samples).map_err(|e| format_err(path, e.to_string()))
}

/// Writes segments as a CSV table. Ground-truth columns are written only if
/// every segment has a truth.
pub fn write_segments(path: &Path, segments: &[PairedSegment]) -> Result<()> {
    let l = segments.first().map_or(0, PairedSegment::len);
    let with_x = !segments.is_empty() && segments.iter().all(|s| s.x.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["scene".to_string(), "offset".to_string()];
    header.extend((0..l).map(|i| format!("y_{i}")));
    if with_x {
        header.extend((0..l).map(|i| format!("x_{i}")));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in segments {
        if s.len() != l {
            return Err(format_err(path, "segments of different lengths"));
        }
        let mut row = vec![s.scene.to_string(), s.offset.to_string()];
        row.extend(s.y.iter().map(f64::to_string));
        if with_x {
            row.extend(s.x.iter().flatten().map(f64::to_string));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    format_err(path, e.to_string())
}

/// Reads a segment table. `x_*` columns are optional.
pub fn read_segments(path: &Path) -> Result<Vec<PairedSegment>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (scene_col, offset_col) = (col("scene"), col("offset"));
    let ys: Vec<usize> = (0..).map_while(|i| col(&format!("y_{i}"))).collect();
    let xs: Vec<usize> = (0..).map_while(|i| col(&format!("x_{i}"))).collect();
    if ys.is_empty() {
        return Err(format_err(path, "no y_0.. columns"));
    }
    if !xs.is_empty() && xs.len() != ys.len() {
        return Err(format_err(path, format!("{} y columns but {} x columns", ys.len(), xs.len())));
    }
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = row + 2;
        let num = |c: usize| -> Result<f64> {
            let v = rec.get(c).unwrap_or("");
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(path, format!("row {line}, column {}: not a finite number: {v:?}", header[c].to_string())))
        };
        let int = |c: Option<usize>| -> Result<usize> {
            match c {
                None => Ok(0),
                Some(c) => rec
                    .get(c)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| format_err(path, format!("row {line}: bad {}", &header[c]))),
            }
        };
        let y = ys.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let x = if xs.is_empty() { None } else { Some(xs.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?) };
        out.push(PairedSegment::new(y, x).with_origin(int(scene_col)?, int(offset_col)?));
    }
    Ok(out)
}

/// Writes reconstructions as CSV `scene,offset,xhat_0..`, preceded by a
/// `#`-comment line with `key=value` metadata.
pub fn write_reconstructions(
    path: &Path,
    meta: &[(&str, String)],
    segments: &[PairedSegment],
    recon: &[Vec<f64>],
) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let line: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(f, "# {}", line.join(" ")).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(f);
    let l = recon.first().map_or(0, Vec::len);
    let mut header = vec!["scene".to_string(), "offset".to_string()];
    header.extend((0..l).map(|i| format!("xhat_{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (s, r) in segments.iter().zip(recon) {
        let mut row = vec![s.scene.to_string(), s.offset.to_string()];
        row.extend(r.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub split: Split,
    /// Dataset-wide scene id, as used in the segment tables.
    pub id: usize,
    pub seed: u64,
    pub segments: usize,
    pub cube: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub master_seed: u64,
    pub config_hash: String,
    pub train_segments: String,
    pub test_segments: String,
    pub scenes: Vec<SceneRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train_segments.csv";
pub const TEST_FILE: &str = "test_segments.csv";

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.scenes.iter().filter(|s| s.split == split).count()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    /// Checks that no scene id or seed is shared between the splits.
    pub fn check_disjoint(&self) -> std::result::Result<(), String> {
        for a in self.scenes.iter().filter(|s| s.split == Split::Test) {
            if let Some(b) = self.scenes.iter().find(|b| b.split == Split::Train && (b.id == a.id || b.seed == a.seed)) {
                return Err(format!("test scene {} overlaps train scene {}", a.id, b.id));
            }
        }
        Ok(())
    }
}

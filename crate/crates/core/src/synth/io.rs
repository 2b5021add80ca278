//! Binary window files and the JSON manifest.
//!
//! Record file layout, all little-endian:
//!
//! ```text
//! "ADMR1"  u64 record_count
//! per record:
//!   u32 robot, sequence, style, start, frames, human_width, robot_width
//!   f64 dt, beta[10], human[frames × human_width], target[frames × robot_width],
//!       p[frames × 3], R[frames × 9] (row-major)
//! u64 FNV-1a of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::dataset::{DataConfig, Dataset, Split, Window};
use super::embodiment::EmbodimentDescriptor;
use super::motion::StyleFamily;
use crate::error::{Error, Result};
use crate::features::{human_width, robot_width, HumanFeatureSeq, RobotTarget, ROOT_WIDTH, BETA_DIM};
use crate::rng::{fnv1a, Fnv1a};
use crate::so3::Rotation;

pub const MAGIC: &[u8; 5] = b"ADMR1";
pub const MANIFEST_FORMAT: &str = "ADMR1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Passes bytes through while hashing them.
struct Hashing<W> {
    inner: W,
    hash: Fnv1a,
}

impl<W: Write> Write for Hashing<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hash.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Streams the record file to `out` and returns its checksum.
pub fn write_records<W: Write>(out: W, windows: &[Window]) -> std::io::Result<u64> {
    let mut w = Hashing {
        inner: out,
        hash: Fnv1a::default(),
    };
    w.write_all(MAGIC)?;
    w.write_all(&(windows.len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for win in windows {
        buf.clear();
        let header = [
            win.robot as u32,
            win.sequence,
            win.style.code(),
            win.start,
            win.len() as u32,
            human_width(win.human.joints) as u32,
            robot_width(win.target.dof) as u32,
        ];
        for h in header {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        let reals = std::iter::once(win.dt)
            .chain(win.beta.iter().copied())
            .chain(win.human.data.iter().copied())
            .chain(win.target.data.iter().copied())
            .chain(win.p.iter().flat_map(|p| [p.x, p.y, p.z]))
            .chain(win.r.iter().flat_map(|r| r.to_row_array()));
        for x in reals {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    let checksum = w.hash.finish();
    w.inner.write_all(&checksum.to_le_bytes())?;
    w.inner.flush()?;
    Ok(checksum)
}

pub fn encode_windows(windows: &[Window]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(&mut buf, windows).expect("writing to memory cannot fail");
    buf
}

/// Checksum the record file of `windows` would carry.
pub fn checksum_windows(windows: &[Window]) -> u64 {
    write_records(std::io::sink(), windows).expect("writing to a sink cannot fail")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode_windows(bytes: &[u8], path: &Path) -> Result<Vec<Window>> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != b"ADMR" {
        return Err(malformed("missing ADMR magic".into()));
    }
    if bytes.len() < MAGIC.len() || bytes[4..5] != MAGIC[4..5] {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(5)]).into_owned();
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found,
        });
    }
    if bytes.len() < MAGIC.len() + 16 {
        return Err(malformed("file shorter than header and checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
        path,
    };
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let robot = r.u32()? as usize;
        let sequence = r.u32()?;
        let style = StyleFamily::from_code(r.u32()?)
            .ok_or_else(|| malformed(format!("record {i}: unknown style code")))?;
        let start = r.u32()?;
        let frames = r.u32()? as usize;
        let hw = r.u32()? as usize;
        let rw = r.u32()? as usize;
        if hw < ROOT_WIDTH || !(hw - ROOT_WIDTH).is_multiple_of(6) || rw < ROOT_WIDTH {
            return Err(malformed(format!("record {i}: invalid widths {hw}, {rw}")));
        }
        let dt = r.f64()?;
        let beta: [f64; BETA_DIM] = r.f64s(BETA_DIM)?.try_into().expect("beta width");
        let human = r.f64s(frames * hw)?;
        let target = r.f64s(frames * rw)?;
        let p = (0..frames)
            .map(|_| Ok(Vector3::from_vec(r.f64s(3)?)))
            .collect::<Result<Vec<_>>>()?;
        let rot = (0..frames)
            .map(|_| Ok(Rotation::from_matrix_unchecked(Matrix3::from_row_slice(&r.f64s(9)?))))
            .collect::<Result<Vec<_>>>()?;
        out.push(Window {
            robot,
            sequence,
            style,
            start,
            dt,
            beta,
            human: HumanFeatureSeq {
                joints: (hw - ROOT_WIDTH) / 6,
                data: human,
            },
            target: RobotTarget {
                dof: rw - ROOT_WIDTH,
                data: target,
            },
            p,
            r: rot,
        });
    }
    if r.pos != body.len() {
        return Err(malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

/// Writes one split file and returns its checksum.
pub fn write_windows(path: &Path, windows: &[Window]) -> Result<u64> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(std::io::BufWriter::new(file), windows).map_err(|e| Error::io(path, e))
}

pub fn read_windows(path: &Path) -> Result<Vec<Window>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_windows(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub records: usize,
    pub windows_per_robot: usize,
    /// FNV-1a, 16 lowercase hex digits.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub robots: Vec<EmbodimentDescriptor>,
    #[serde(rename = "T")]
    pub window: usize,
    pub dt: f64,
    pub stride: usize,
    pub joints: usize,
    pub config: DataConfig,
    pub splits: BTreeMap<String, SplitEntry>,
}

pub fn split_file(split: Split) -> String {
    format!("{}.admr", split.name())
}

/// Writes every split plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let file = split_file(split);
        let checksum = write_windows(&dir.join(&file), ds.split(split))?;
        splits.insert(
            split.name().to_string(),
            SplitEntry {
                file,
                records: ds.split(split).len(),
                windows_per_robot: ds.config.windows_per_robot(split),
                checksum: format!("{checksum:016x}"),
            },
        );
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        seed: ds.seed,
        robots: ds.robots.clone(),
        window: ds.config.window,
        dt: ds.config.dt(),
        stride: ds.config.stride(),
        joints: ds.joints(),
        config: ds.config.clone(),
        splits,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::VersionMismatch {
            path,
            found: manifest.format,
        });
    }
    Ok(manifest)
}

/// Reads a dataset directory, verifying each file against the manifest too.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut ds = Dataset {
        seed: manifest.seed,
        config: manifest.config.clone(),
        robots: manifest.robots.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        zero_shot: Vec::new(),
    };
    for split in Split::ALL {
        let Some(entry) = manifest.splits.get(split.name()) else {
            continue;
        };
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let windows = decode_windows(&bytes, &path)?;
        let stored = u64::from_str_radix(&entry.checksum, 16).map_err(|_| Error::Malformed {
            path: dir.join(MANIFEST_FILE),
            reason: format!("bad checksum string {:?}", entry.checksum),
        })?;
        let computed = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if stored != computed {
            return Err(Error::ChecksumMismatch {
                path,
                stored,
                computed,
            });
        }
        if windows.iter().any(|w| w.robot >= ds.robots.len()) {
            return Err(Error::Malformed {
                path,
                reason: "record references an unknown robot".into(),
            });
        }
        *ds.split_mut(split) = windows;
    }
    Ok(ds)
}

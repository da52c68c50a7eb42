//! Regular scalar volumes: `<name>.f32` raw little-endian payload plus a
//! `<name>.json` header, x-fastest layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolumeError};
use crate::field::domain::Bounds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub bounds: [Bounds; 3],
    pub dtype: String,
    pub order: String,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], bounds: [Bounds; 3]) -> Self {
        Self { dims, bounds, dtype: "f32le".into(), order: "x-fastest".into() }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<(), VolumeError> {
        if self.dtype != "f32le" {
            return Err(VolumeError::Header(format!("dtype `{}`", self.dtype)));
        }
        if self.order != "x-fastest" {
            return Err(VolumeError::Header(format!("order `{}`", self.order)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub bounds: [Bounds; 3],
    pub values: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], bounds: [Bounds; 3], values: Vec<f32>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if values.len() != want {
            return Err(VolumeError::Truncated { expected: want, found: values.len() }.into());
        }
        Ok(Self { dims, bounds, values })
    }

    pub fn zeros(dims: [usize; 3], bounds: [Bounds; 3]) -> Self {
        Self { dims, bounds, values: vec![0.0; dims.iter().product()] }
    }

    /// Fills every voxel from `f(i, j, k)`.
    pub fn from_fn(dims: [usize; 3], bounds: [Bounds; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    values.push(f(i, j, k) as f32);
                }
            }
        }
        Self { dims, bounds, values }
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader::new(self.dims, self.bounds)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords_of(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    /// Physical position of a voxel center.
    pub fn voxel_position(&self, idx: [usize; 3]) -> [f64; 3] {
        voxel_position(self.dims, &self.bounds, idx)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        })
    }
}

/// Physical position of voxel center `idx` in a `dims` grid over `bounds`.
pub fn voxel_position(dims: [usize; 3], bounds: &[Bounds; 3], idx: [usize; 3]) -> [f64; 3] {
    let mut x = [0.0; 3];
    for a in 0..3 {
        x[a] = bounds[a].min + (idx[a] as f64 + 0.5) / dims[a] as f64 * bounds[a].width();
    }
    x
}

/// `base.f32` and `base.json` for a volume path given with or without extension.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().is_some_and(|e| e == "f32" || e == "json") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let mut raw = base.clone().into_os_string();
    raw.push(".f32");
    let mut header = base.into_os_string();
    header.push(".json");
    (raw.into(), header.into())
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (_, hp) = volume_paths(path);
    let header: VolumeHeader = serde_json::from_reader(BufReader::new(File::open(hp)?))
        .map_err(|e| VolumeError::Header(e.to_string()))?;
    header.validate()?;
    Ok(header)
}

pub fn save_volume(grid: &VolumeGrid, path: &Path) -> Result<()> {
    let (rp, hp) = volume_paths(path);
    serde_json::to_writer_pretty(BufWriter::new(File::create(hp)?), &grid.header())?;
    let mut w = VolumeWriter::create(&rp, grid.header())?;
    w.write(&grid.values)?;
    w.finish()
}

pub fn load_volume(path: &Path) -> Result<VolumeGrid> {
    let header = read_header(path)?;
    let mut r = VolumeReader::open(path)?;
    let mut values = vec![0f32; header.len()];
    r.read_into(&mut values)?;
    Ok(VolumeGrid { dims: header.dims, bounds: header.bounds, values })
}

/// Loads a volume and checks it has the expected dimensions.
pub fn load_volume_expect(path: &Path, dims: [usize; 3]) -> Result<VolumeGrid> {
    let header = read_header(path)?;
    if header.dims != dims {
        return Err(VolumeError::DimMismatch { expected: dims, found: header.dims }.into());
    }
    load_volume(path)
}

/// Streams a raw payload in chunks without holding the whole volume.
pub struct VolumeReader {
    inner: BufReader<File>,
    remaining: usize,
    total: usize,
}

impl VolumeReader {
    pub fn open(path: &Path) -> Result<Self> {
        let header = read_header(path)?;
        let (rp, _) = volume_paths(path);
        let file = File::open(rp)?;
        let bytes = file.metadata()?.len() as usize;
        let total = header.len();
        if bytes < total * 4 {
            return Err(VolumeError::Truncated { expected: total, found: bytes / 4 }.into());
        }
        Ok(Self { inner: BufReader::with_capacity(1 << 20, file), remaining: total, total })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    /// Fills `out` (up to the remaining count); returns floats read.
    pub fn read_into(&mut self, out: &mut [f32]) -> Result<usize> {
        let n = out.len().min(self.remaining);
        let mut buf = vec![0u8; n * 4];
        self.inner.read_exact(&mut buf).map_err(|_| VolumeError::Truncated {
            expected: self.total,
            found: self.total - self.remaining,
        })?;
        for (o, c) in out.iter_mut().zip(buf.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
        self.remaining -= n;
        Ok(n)
    }
}

/// Streams a raw payload to disk; `finish` checks the float count.
pub struct VolumeWriter {
    inner: BufWriter<File>,
    written: usize,
    total: usize,
}

impl VolumeWriter {
    pub fn create(raw_path: &Path, header: VolumeHeader) -> Result<Self> {
        Ok(Self {
            inner: BufWriter::with_capacity(1 << 20, File::create(raw_path)?),
            written: 0,
            total: header.len(),
        })
    }

    pub fn write(&mut self, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        self.written += values.len();
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        if self.written != self.total {
            return Err(VolumeError::Truncated { expected: self.total, found: self.written }.into());
        }
        Ok(())
    }
}

/// Writes a header and streams `f(i, j, k)` slice by slice.
pub fn save_volume_streaming(
    path: &Path,
    dims: [usize; 3],
    bounds: [Bounds; 3],
    mut f: impl FnMut(usize, usize, usize) -> f32,
) -> Result<()> {
    let (rp, hp) = volume_paths(path);
    let header = VolumeHeader::new(dims, bounds);
    serde_json::to_writer_pretty(BufWriter::new(File::create(hp)?), &header)?;
    let mut w = VolumeWriter::create(&rp, header)?;
    let mut slice = Vec::with_capacity(dims[0] * dims[1]);
    for k in 0..dims[2] {
        slice.clear();
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                slice.push(f(i, j, k));
            }
        }
        w.write(&slice)?;
    }
    w.finish()
}

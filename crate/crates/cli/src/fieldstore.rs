//! Chunked on-disk storage of forward fields.
//!
//! Each chunk file holds the fields of consecutive sources behind a fixed
//! 64-byte little-endian header:
//!
//! | bytes  | content                                  |
//! |--------|------------------------------------------|
//! | 0..8   | magic `GIFIELD1`                         |
//! | 8..12  | format version (u32)                     |
//! | 12..16 | precision tag (u32): 0 = f64, 1 = f32    |
//! | 16..24 | entries per field (u64)                  |
//! | 24..32 | number of sources in the chunk (u64)     |
//! | 32..36 | complex flag (u32)                       |
//! | 36..40 | reserved                                 |
//! | 40..48 | index of the first source (u64)          |
//! | 48..56 | payload length in bytes (u64)            |
//! | 56..64 | reserved                                 |
//!
//! Fields follow column by column; complex entries are stored as (re, im).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use geoinvert::forward::{DcProblem, HelmholtzProblem};
use geoinvert::Complex64;

use crate::error::{core_err, io_err, CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"GIFIELD1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Full,
    /// Values demoted to 32-bit floats on write.
    Single,
}

impl Precision {
    fn tag(self) -> u32 {
        match self {
            Self::Full => 0,
            Self::Single => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Self::Full),
            1 => Some(Self::Single),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::Full => 8,
            Self::Single => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHeader {
    pub precision: Precision,
    pub rows: usize,
    pub cols: usize,
    pub complex: bool,
    pub first_source: usize,
}

impl ChunkHeader {
    fn payload_bytes(&self) -> usize {
        self.rows * self.cols * self.precision.width() * if self.complex { 2 } else { 1 }
    }

    pub fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut h = [0u8; HEADER_BYTES];
        h[0..8].copy_from_slice(MAGIC);
        h[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        h[12..16].copy_from_slice(&self.precision.tag().to_le_bytes());
        h[16..24].copy_from_slice(&(self.rows as u64).to_le_bytes());
        h[24..32].copy_from_slice(&(self.cols as u64).to_le_bytes());
        h[32..36].copy_from_slice(&u32::from(self.complex).to_le_bytes());
        h[40..48].copy_from_slice(&(self.first_source as u64).to_le_bytes());
        h[48..56].copy_from_slice(&(self.payload_bytes() as u64).to_le_bytes());
        h
    }

    pub fn decode(h: &[u8; HEADER_BYTES], path: &Path) -> CliResult<Self> {
        let fail = |reason: &str| CliError::Format { path: path.to_path_buf(), reason: reason.into() };
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(h[o..o + 8].try_into().expect("8 bytes"));
        if &h[0..8] != MAGIC {
            return Err(fail("bad magic"));
        }
        if u32_at(8) != FORMAT_VERSION {
            return Err(fail(&format!("unsupported version {}", u32_at(8))));
        }
        let precision = Precision::from_tag(u32_at(12)).ok_or_else(|| fail("unknown precision tag"))?;
        let complex = match u32_at(32) {
            0 => false,
            1 => true,
            _ => return Err(fail("bad complex flag")),
        };
        let header = Self {
            precision,
            rows: u64_at(16) as usize,
            cols: u64_at(24) as usize,
            complex,
            first_source: u64_at(40) as usize,
        };
        if u64_at(48) as usize != header.payload_bytes() {
            return Err(fail("payload length disagrees with the dimensions"));
        }
        Ok(header)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChunkData {
    Real(Vec<Vec<f64>>),
    Complex(Vec<Vec<Complex64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub header: ChunkHeader,
    pub data: ChunkData,
}

impl Chunk {
    pub fn sources(&self) -> std::ops::Range<usize> {
        self.header.first_source..self.header.first_source + self.header.cols
    }
}

#[derive(Debug, Clone)]
pub struct FieldStore {
    dir: PathBuf,
    precision: Precision,
    batch: usize,
}

impl FieldStore {
    /// `batch` is the number of sources per chunk file.
    pub fn new(dir: impl Into<PathBuf>, precision: Precision, batch: usize) -> CliResult<Self> {
        let dir = dir.into();
        if batch == 0 {
            return Err(CliError::Config { path: "field_store.batch".into(), reason: "must be positive".into() });
        }
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir, precision, batch })
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn chunk_path(&self, name: &str, first: usize) -> PathBuf {
        self.dir.join(format!("{name}.{first:08}.fld"))
    }

    fn write_chunk(&self, path: &Path, header: ChunkHeader, values: impl Iterator<Item = f64>) -> CliResult<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        w.write_all(&header.encode()).map_err(io_err(path))?;
        for x in values {
            match self.precision {
                Precision::Full => w.write_all(&x.to_le_bytes()),
                Precision::Single => w.write_all(&(x as f32).to_le_bytes()),
            }
            .map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    /// Writes fields of sources `first_source..` in chunks of the store's batch
    /// size. `name` distinguishes writers (for example one name per worker).
    pub fn write_real(&self, name: &str, first_source: usize, fields: &[Vec<f64>]) -> CliResult<Vec<PathBuf>> {
        let rows = fields.first().map_or(0, Vec::len);
        self.check_rows(fields.iter().map(Vec::len), rows)?;
        fields
            .chunks(self.batch)
            .enumerate()
            .map(|(k, cols)| {
                let first = first_source + k * self.batch;
                let header = ChunkHeader { precision: self.precision, rows, cols: cols.len(), complex: false, first_source: first };
                let path = self.chunk_path(name, first);
                self.write_chunk(&path, header, cols.iter().flatten().copied())?;
                Ok(path)
            })
            .collect()
    }

    pub fn write_complex(&self, name: &str, first_source: usize, fields: &[Vec<Complex64>]) -> CliResult<Vec<PathBuf>> {
        let rows = fields.first().map_or(0, Vec::len);
        self.check_rows(fields.iter().map(Vec::len), rows)?;
        fields
            .chunks(self.batch)
            .enumerate()
            .map(|(k, cols)| {
                let first = first_source + k * self.batch;
                let header = ChunkHeader { precision: self.precision, rows, cols: cols.len(), complex: true, first_source: first };
                let path = self.chunk_path(name, first);
                self.write_chunk(&path, header, cols.iter().flatten().flat_map(|z| [z.re, z.im]))?;
                Ok(path)
            })
            .collect()
    }

    fn check_rows(&self, lens: impl Iterator<Item = usize>, rows: usize) -> CliResult<()> {
        if lens.into_iter().any(|l| l != rows) {
            return Err(CliError::Format { path: self.dir.clone(), reason: "fields differ in length".into() });
        }
        Ok(())
    }

    /// Chunk files written under `name`, in source order.
    pub fn chunk_files(&self, name: &str) -> CliResult<Vec<PathBuf>> {
        let prefix = format!("{name}.");
        let mut files: Vec<PathBuf> = std::fs::read_dir(&self.dir)
            .map_err(io_err(&self.dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let f = p.file_name().and_then(|f| f.to_str()).unwrap_or("");
                f.starts_with(&prefix) && f.ends_with(".fld") && f[prefix.len()..f.len() - 4].chars().all(|c| c.is_ascii_digit())
            })
            .collect();
        files.sort();
        Ok(files)
    }

    /// Streams the chunks of `name`; only one chunk is held at a time.
    pub fn stream(&self, name: &str) -> CliResult<impl Iterator<Item = CliResult<Chunk>>> {
        Ok(self.chunk_files(name)?.into_iter().map(|p| read_chunk(&p)))
    }

    pub fn read_real(&self, name: &str) -> CliResult<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for chunk in self.stream(name)? {
            match chunk?.data {
                ChunkData::Real(cols) => out.extend(cols),
                ChunkData::Complex(_) => {
                    return Err(CliError::Format { path: self.dir.clone(), reason: format!("{name} holds complex fields") })
                }
            }
        }
        Ok(out)
    }

    pub fn read_complex(&self, name: &str) -> CliResult<Vec<Vec<Complex64>>> {
        let mut out = Vec::new();
        for chunk in self.stream(name)? {
            match chunk?.data {
                ChunkData::Complex(cols) => out.extend(cols),
                ChunkData::Real(_) => {
                    return Err(CliError::Format { path: self.dir.clone(), reason: format!("{name} holds real fields") })
                }
            }
        }
        Ok(out)
    }
}

pub fn read_chunk(path: &Path) -> CliResult<Chunk> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut h = [0u8; HEADER_BYTES];
    r.read_exact(&mut h).map_err(|_| CliError::Format { path: path.to_path_buf(), reason: "truncated header".into() })?;
    let header = ChunkHeader::decode(&h, path)?;
    let mut payload = Vec::with_capacity(header.payload_bytes());
    r.read_to_end(&mut payload).map_err(io_err(path))?;
    if payload.len() != header.payload_bytes() {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} payload bytes, found {}", header.payload_bytes(), payload.len()),
        });
    }
    let values: Vec<f64> = match header.precision {
        Precision::Full => payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
        Precision::Single => {
            payload.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))).collect()
        }
    };
    let data = if header.complex {
        let per = 2 * header.rows;
        ChunkData::Complex(
            values.chunks(per.max(1)).take(header.cols).map(|c| c.chunks_exact(2).map(|z| Complex64::new(z[0], z[1])).collect()).collect(),
        )
    } else {
        ChunkData::Real(values.chunks(header.rows.max(1)).take(header.cols).map(<[f64]>::to_vec).collect())
    };
    Ok(Chunk { header, data })
}

fn real_chunk(chunk: Chunk) -> CliResult<(usize, Vec<Vec<f64>>)> {
    match chunk.data {
        ChunkData::Real(c) => Ok((chunk.header.first_source, c)),
        ChunkData::Complex(_) => Err(CliError::Format { path: PathBuf::new(), reason: "expected real fields".into() }),
    }
}

fn complex_chunk(chunk: Chunk) -> CliResult<(usize, Vec<Vec<Complex64>>)> {
    match chunk.data {
        ChunkData::Complex(c) => Ok((chunk.header.first_source, c)),
        ChunkData::Real(_) => Err(CliError::Format { path: PathBuf::new(), reason: "expected complex fields".into() }),
    }
}

/// `J v` of a DC survey from fields streamed out of `store`.
pub fn dc_sens_matvec_streamed(
    store: &FieldStore,
    name: &str,
    problem: &DcProblem,
    sigma: &[f64],
    v: &[f64],
) -> CliResult<Vec<f64>> {
    let np = problem.n_receivers();
    let mut out = vec![0.0; np * problem.sources().rows()];
    for chunk in store.stream(name)? {
        let (first, cols) = real_chunk(chunk?)?;
        for (k, u) in cols.iter().enumerate() {
            let d = problem.sens_matvec_field(sigma, u, v).map_err(core_err("streamed DC sensitivity"))?;
            out[(first + k) * np..(first + k + 1) * np].copy_from_slice(&d);
        }
    }
    Ok(out)
}

/// `Jᵀ r` of a DC survey from streamed fields; contributions add in source order.
pub fn dc_sens_tmatvec_streamed(
    store: &FieldStore,
    name: &str,
    problem: &DcProblem,
    sigma: &[f64],
    r: &[f64],
) -> CliResult<Vec<f64>> {
    let np = problem.n_receivers();
    let mut out = vec![0.0; sigma.len()];
    for chunk in store.stream(name)? {
        let (first, cols) = real_chunk(chunk?)?;
        for (k, u) in cols.iter().enumerate() {
            let j = first + k;
            let g = problem.sens_tmatvec_field(sigma, u, &r[j * np..(j + 1) * np]).map_err(core_err("streamed DC adjoint"))?;
            out.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok(out)
}

/// `J v` of a Helmholtz survey (interleaved re/im data) from streamed fields.
pub fn helmholtz_sens_matvec_streamed(
    store: &FieldStore,
    name: &str,
    problem: &HelmholtzProblem,
    m: &[f64],
    v: &[f64],
) -> CliResult<Vec<f64>> {
    let np = 2 * problem.receivers().rows();
    let mut out = vec![0.0; np * problem.sources().rows()];
    for chunk in store.stream(name)? {
        let (first, cols) = complex_chunk(chunk?)?;
        for (k, u) in cols.iter().enumerate() {
            let d = problem.sens_matvec_field(m, u, v).map_err(core_err("streamed Helmholtz sensitivity"))?;
            out[(first + k) * np..(first + k + 1) * np].copy_from_slice(&d);
        }
    }
    Ok(out)
}

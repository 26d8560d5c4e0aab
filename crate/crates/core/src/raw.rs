//! The raw data file: headerless little-endian `f32` values, series after
//! series. Series `i` occupies bytes `[i * 4n, (i + 1) * 4n)`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::error::{Error, IoContext, Result};
use crate::series::decode_le;

/// Random access to series stored in a raw data file.
#[derive(Debug)]
pub struct RawFile {
    file: File,
    path: PathBuf,
    series_len: usize,
    count: u64,
}

impl RawFile {
    pub fn open(path: impl AsRef<Path>, series_len: usize) -> Result<RawFile> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).with_path(&path)?;
        let bytes = file.metadata().with_path(&path)?.len();
        let count = series_count(&path, bytes, series_len)?;
        Ok(RawFile {
            file,
            path,
            series_len,
            count,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn series_len(&self) -> usize {
        self.series_len
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Reads series `pos` into `out` with a positioned read; `scratch` holds
    /// the raw bytes and is resized as needed.
    pub fn read_into(&self, pos: u64, scratch: &mut Vec<u8>, out: &mut [f32]) -> Result<()> {
        if pos >= self.count {
            return Err(Error::InvalidInput(format!(
                "series {pos} out of range ({} series in {})",
                self.count,
                self.path.display()
            )));
        }
        let bytes = self.series_len * 4;
        scratch.resize(bytes, 0);
        self.file
            .read_exact_at(scratch, pos * bytes as u64)
            .with_path(&self.path)?;
        decode_le(scratch, out);
        Ok(())
    }

    pub fn read(&self, pos: u64) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.series_len];
        self.read_into(pos, &mut Vec::new(), &mut out)?;
        Ok(out)
    }
}

fn series_count(path: &Path, bytes: u64, series_len: usize) -> Result<u64> {
    if series_len == 0 {
        return Err(Error::Config("series length must be positive".into()));
    }
    let per = series_len as u64 * 4;
    if !bytes.is_multiple_of(per) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("size {bytes} is not a multiple of {per} bytes (series length {series_len})"),
        });
    }
    Ok(bytes / per)
}

/// Sequential reader handing out whole series in blocks. An optional
/// throughput cap simulates a slow device.
#[derive(Debug)]
pub struct SeriesReader {
    file: File,
    path: PathBuf,
    series_len: usize,
    count: u64,
    next: u64,
    /// Simulated device throughput in bytes per second.
    throttle: Option<f64>,
}

impl SeriesReader {
    pub fn open(path: impl AsRef<Path>, series_len: usize) -> Result<SeriesReader> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).with_path(&path)?;
        let bytes = file.metadata().with_path(&path)?.len();
        let count = series_count(&path, bytes, series_len)?;
        Ok(SeriesReader {
            file,
            path,
            series_len,
            count,
            next: 0,
            throttle: None,
        })
    }

    /// Makes every read take at least `bytes / bytes_per_sec`. Time spent
    /// between reads is not credited to later ones, as with a real device
    /// that sits idle.
    pub fn throttled(mut self, bytes_per_sec: Option<f64>) -> SeriesReader {
        self.throttle = bytes_per_sec.filter(|r| *r > 0.0);
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn total(&self) -> u64 {
        self.count
    }

    /// Position of the next series to be read.
    pub fn position(&self) -> u64 {
        self.next
    }

    /// Fills `buf` with up to `max_series` whole series (raw bytes) and
    /// returns how many were read; 0 at end of file.
    pub fn read_block(&mut self, buf: &mut Vec<u8>, max_series: usize) -> Result<usize> {
        let take = (self.count - self.next).min(max_series as u64) as usize;
        let bytes = take * self.series_len * 4;
        buf.resize(bytes, 0);
        if take == 0 {
            return Ok(0);
        }
        let started = Instant::now();
        self.file.read_exact(&mut buf[..bytes]).with_path(&self.path)?;
        self.next += take as u64;
        if let Some(rate) = self.throttle {
            let due = Duration::from_secs_f64(bytes as f64 / rate);
            let elapsed = started.elapsed();
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
        }
        Ok(take)
    }
}

/// Time for a plain sequential pass over `path` in blocks of `block_series`
/// series, with the same throttle the builders use.
pub fn timed_read_pass(
    path: impl AsRef<Path>,
    series_len: usize,
    block_series: usize,
    bytes_per_sec: Option<f64>,
) -> Result<Duration> {
    let start = Instant::now();
    let mut reader = SeriesReader::open(path, series_len)?.throttled(bytes_per_sec);
    let mut buf = Vec::new();
    while reader.read_block(&mut buf, block_series.max(1))? > 0 {}
    Ok(start.elapsed())
}

/// Streaming writer for raw data files.
pub struct RawWriter {
    out: BufWriter<File>,
    path: PathBuf,
    series_len: usize,
    written: u64,
}

impl RawWriter {
    pub fn create(path: impl AsRef<Path>, series_len: usize) -> Result<RawWriter> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).with_path(&path)?;
        Ok(RawWriter {
            out: BufWriter::with_capacity(1 << 20, file),
            path,
            series_len,
            written: 0,
        })
    }

    pub fn write(&mut self, series: &[f32]) -> Result<()> {
        if !series.len().is_multiple_of(self.series_len) {
            return Err(Error::InvalidInput(format!(
                "{} values is not a whole number of length-{} series",
                series.len(),
                self.series_len
            )));
        }
        let mut bytes = Vec::with_capacity(series.len() * 4);
        for v in series {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&bytes).with_path(&self.path)?;
        self.written += (series.len() / self.series_len) as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        self.out.flush().with_path(&self.path)?;
        Ok(self.written)
    }
}

/// Reads a whole raw file into memory.
pub fn read_all(path: impl AsRef<Path>, series_len: usize) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).with_path(path)?;
    series_count(path, bytes.len() as u64, series_len)?;
    let mut out = vec![0.0; bytes.len() / 4];
    decode_le(&bytes, &mut out);
    Ok(out)
}

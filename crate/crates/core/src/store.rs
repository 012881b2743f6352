//! Append-only JSON-lines files with a single serialized writer.
//!
//! On open, a torn final line (crash mid-append) is truncated away so later
//! appends start on a clean line boundary.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {source}")]
    Corrupt { path: PathBuf, line: usize, source: serde_json::Error },
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io { path: path.to_path_buf(), source }
    }
}

/// Reads every complete record and truncates an unterminated or unparsable
/// final line. Corruption before the last line is an error.
pub fn recover<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::io(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut good_len: u64 = 0;
    let mut buf = String::new();
    let mut line_no = 0;
    let mut pending_err: Option<(usize, serde_json::Error)> = None;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| StoreError::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if let Some((line, source)) = pending_err.take() {
            return Err(StoreError::Corrupt { path: path.to_path_buf(), line, source });
        }
        if !buf.ends_with('\n') {
            break;
        }
        let text = buf.trim();
        if text.is_empty() {
            good_len += n as u64;
            continue;
        }
        match serde_json::from_str(text) {
            Ok(r) => {
                records.push(r);
                good_len += n as u64;
            }
            Err(e) => pending_err = Some((line_no, e)),
        }
    }
    let actual = std::fs::metadata(path).map_err(|e| StoreError::io(path, e))?.len();
    if actual != good_len {
        log::warn!("{}: truncating torn tail ({} bytes)", path.display(), actual - good_len);
        let f = OpenOptions::new().write(true).open(path).map_err(|e| StoreError::io(path, e))?;
        f.set_len(good_len).map_err(|e| StoreError::io(path, e))?;
        f.sync_all().map_err(|e| StoreError::io(path, e))?;
    }
    Ok(records)
}

/// Typed append handle. Each record is written with one `write_all` under the
/// writer lock; `durable` adds an fsync per append.
#[derive(Debug)]
pub struct JsonlWriter<T> {
    path: PathBuf,
    file: Mutex<File>,
    durable: bool,
    _marker: PhantomData<fn(&T)>,
}

impl<T: Serialize + DeserializeOwned> JsonlWriter<T> {
    /// Opens (creating if needed) and returns the recovered records.
    pub fn open(path: impl Into<PathBuf>, durable: bool) -> Result<(Self, Vec<T>), StoreError> {
        let path = path.into();
        let records = recover(&path)?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| StoreError::io(&path, e))?;
        Ok((JsonlWriter { path, file: Mutex::new(file), durable, _marker: PhantomData }, records))
    }

    pub fn append(&self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&line).map_err(|e| StoreError::io(&self.path, e))?;
        if self.durable {
            file.sync_data().map_err(|e| StoreError::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Writes `bytes` to `path` via a temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    if let Some(parent) = path.parent() {
        if let Ok(d) = File::open(parent) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

//! Append-only response cache.
//!
//! One file per digest. Each file holds a single record: the byte length
//! of the JSON body in ASCII decimal, a newline, then the UTF-8 JSON body.
//! Files are written to a temporary name and renamed into place; existing
//! records are never rewritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CacheKey, GatewayError, Task};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub backend_id: String,
    pub model_tag: String,
    pub task: Task,
    pub response: String,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GatewayError + '_ {
    move |source| GatewayError::Cache {
        path: path.to_path_buf(),
        source,
    }
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.rec", key.as_str()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheRecord>, GatewayError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        decode_record(&bytes)
            .map(Some)
            .map_err(|m| GatewayError::Malformed(format!("{}: {m}", path.display())))
    }

    pub fn put(&self, key: &CacheKey, record: &CacheRecord) -> Result<(), GatewayError> {
        let path = self.path_for(key);
        let _guard = self.write_lock.lock().expect("cache write lock");
        if path.exists() {
            return Ok(());
        }
        let tmp = self.dir.join(format!(".{}.tmp", key.as_str()));
        let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        file.write_all(&encode_record(record)).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "rec"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn encode_record(record: &CacheRecord) -> Vec<u8> {
    let body = serde_json::to_string(record).expect("record serializes");
    let mut out = format!("{}\n", body.len()).into_bytes();
    out.extend_from_slice(body.as_bytes());
    out
}

pub(crate) fn decode_record(bytes: &[u8]) -> Result<CacheRecord, String> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or("missing length prefix")?;
    let len: usize = std::str::from_utf8(&bytes[..newline])
        .map_err(|e| e.to_string())?
        .trim()
        .parse()
        .map_err(|e: std::num::ParseIntError| e.to_string())?;
    let body = &bytes[newline + 1..];
    if body.len() < len {
        return Err(format!("truncated record: expected {len} bytes, found {}", body.len()));
    }
    serde_json::from_slice(&body[..len]).map_err(|e| e.to_string())
}

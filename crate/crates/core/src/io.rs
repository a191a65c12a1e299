//! File formats: JSON Lines for episodes and bundles, JSON for metadata,
//! CSV helpers, and atomic output files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{EnvMeta, Episode, EvalBundle};
use crate::error::{Error, Result};

pub const PARTIAL_SUFFIX: &str = "partial";
pub const QUARANTINE_SUFFIX: &str = "quarantine";

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Output file written under `<path>.partial` and renamed into place by
/// [`AtomicFile::commit`]. Dropping it uncommitted moves the partial
/// contents to `<path>.quarantine`, so a valid file at `path` is never
/// clobbered by a failed run.
pub struct AtomicFile {
    path: PathBuf,
    partial: PathBuf,
    writer: Option<BufWriter<File>>,
}

impl AtomicFile {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let partial = with_suffix(&path, PARTIAL_SUFFIX);
        let f = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        Ok(AtomicFile {
            path,
            partial,
            writer: Some(BufWriter::new(f)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn writer(&mut self) -> &mut BufWriter<File> {
        self.writer.as_mut().expect("writer present until commit")
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        let w = self.writer.take().expect("commit called once");
        let f = w
            .into_inner()
            .map_err(|e| Error::io(&self.partial, e.into_error()))?;
        f.sync_all().map_err(|e| Error::io(&self.partial, e))?;
        drop(f);
        fs::rename(&self.partial, &self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path.clone())
    }
}

impl Write for AtomicFile {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.writer().write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.writer().flush()
    }
}

impl Drop for AtomicFile {
    fn drop(&mut self) {
        if let Some(mut w) = self.writer.take() {
            let _ = w.flush();
            drop(w);
            let q = with_suffix(&self.path, QUARANTINE_SUFFIX);
            match fs::rename(&self.partial, &q) {
                Ok(()) => log::warn!("incomplete output moved to {}", q.display()),
                Err(e) => log::warn!("could not quarantine {}: {e}", self.partial.display()),
            }
        }
    }
}

/// Write a file atomically with `f` producing the contents.
pub fn write_atomic<F>(path: impl AsRef<Path>, f: F) -> Result<PathBuf>
where
    F: FnOnce(&mut AtomicFile) -> Result<()>,
{
    let mut out = AtomicFile::create(path)?;
    let p = out.path().to_path_buf();
    f(&mut out)?;
    out.flush().map_err(|e| Error::io(&p, e))?;
    out.commit()
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
    let path = path.as_ref();
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_jsonl_line<W: Write, T: Serialize>(w: &mut W, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Invalid(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<PathBuf> {
    let path = path.as_ref();
    write_atomic(path, |w| {
        for it in items {
            write_jsonl_line(w, path, it)?;
        }
        Ok(())
    })
}

/// Stream records from a JSON Lines reader; blank lines are skipped and
/// errors carry 1-based line numbers.
pub fn for_each_jsonl<T, R, F>(reader: R, source: &Path, mut f: F) -> Result<()>
where
    T: DeserializeOwned,
    R: Read,
    F: FnMut(usize, T) -> Result<()>,
{
    let mut buf = String::new();
    let mut r = BufReader::new(reader);
    let mut line = 0;
    loop {
        buf.clear();
        let n = r.read_line(&mut buf).map_err(|e| Error::io(source, e))?;
        if n == 0 {
            return Ok(());
        }
        line += 1;
        if buf.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            path: source.to_path_buf(),
            line,
            message,
        };
        let v: T = serde_json::from_str(&buf).map_err(|e| schema(e.to_string()))?;
        f(line, v).map_err(|e| match e {
            e @ Error::Schema { .. } => e,
            e => schema(e.to_string()),
        })?;
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for_each_jsonl(f, path, |_, v| {
        out.push(v);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for_each_jsonl(f, path, |_, ep: Episode| {
        ep.validate()?;
        out.push(ep);
        Ok(())
    })?;
    if out.is_empty() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 0,
            message: "no episodes".into(),
        });
    }
    Ok(out)
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<EnvMeta> {
    let path = path.as_ref();
    let meta: EnvMeta = read_json(path)?;
    meta.validate().map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    Ok(meta)
}

/// Stream validated bundles from one JSON Lines file.
pub fn for_each_bundle<F>(path: impl AsRef<Path>, mut f: F) -> Result<()>
where
    F: FnMut(EvalBundle) -> Result<()>,
{
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for_each_jsonl(file, path, |_, b: EvalBundle| {
        b.validate()?;
        f(b)
    })
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

pub fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Schema {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Write a CSV atomically from a header and string records.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], records: &[Vec<String>]) -> Result<PathBuf> {
    let path = path.as_ref();
    write_atomic(path, |out| {
        let mut w = csv_writer(out);
        w.write_record(header).map_err(|e| csv_err(path, e))?;
        for r in records {
            w.write_record(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    })
}

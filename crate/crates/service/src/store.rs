//! File-backed persistence: one directory per session holding the session
//! document, the uploaded data and the append-only episode log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use aftercast_core::data::{PredictionFile, PredictionMeta};
use aftercast_core::optimize::Episode;

use crate::session::SessionDoc;

const DOC: &str = "session.json";
const DATA: &str = "data.csv";
const PREDICTIONS: &str = "predictions.csv";
const TRACE: &str = "trace.jsonl";
const AUDIT: &str = "audit.jsonl";

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    audit: Mutex<()>,
}

fn io_err(path: &Path, e: std::io::Error) -> std::io::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

/// Write to a sibling temp file, then rename over the target.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

impl Store {
    pub fn open(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root.join("sessions")).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            audit: Mutex::new(()),
        })
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn save(&self, doc: &SessionDoc) -> std::io::Result<()> {
        let dir = self.dir(&doc.id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let json = serde_json::to_vec_pretty(doc).map_err(std::io::Error::other)?;
        write_atomic(&dir.join(DOC), &json)
    }

    /// Every readable session document; unreadable ones are logged and skipped.
    pub fn load_all(&self) -> std::io::Result<Vec<SessionDoc>> {
        let base = self.root.join("sessions");
        let mut docs = Vec::new();
        for entry in fs::read_dir(&base).map_err(|e| io_err(&base, e))? {
            let path = entry?.path().join(DOC);
            match fs::read(&path).map(|b| serde_json::from_slice::<SessionDoc>(&b)) {
                Ok(Ok(doc)) => docs.push(doc),
                Ok(Err(e)) => log::warn!("skipping {}: {e}", path.display()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        docs.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(docs)
    }

    pub fn write_data(&self, id: &str, csv: &[u8], predictions: Option<&PredictionFile>) -> std::io::Result<()> {
        let dir = self.dir(id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write_atomic(&dir.join(DATA), csv)?;
        if let Some(p) = predictions {
            let csv = p.to_csv().map_err(std::io::Error::other)?;
            write_atomic(&dir.join(PREDICTIONS), csv.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_data(&self, id: &str) -> std::io::Result<Vec<u8>> {
        let path = self.dir(id).join(DATA);
        fs::read(&path).map_err(|e| io_err(&path, e))
    }

    pub fn read_predictions(&self, id: &str, meta: PredictionMeta) -> std::io::Result<PredictionFile> {
        let path = self.dir(id).join(PREDICTIONS);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        PredictionFile::from_csv(&bytes, meta).map_err(std::io::Error::other)
    }

    pub fn append_episode(&self, id: &str, line: &str) -> std::io::Result<()> {
        let path = self.dir(id).join(TRACE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        writeln!(f, "{line}")
    }

    /// Episode lines in append order. A torn final line is dropped.
    pub fn read_episodes(&self, id: &str) -> std::io::Result<Vec<(Episode, String)>> {
        let path = self.dir(id).join(TRACE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path, e)),
        };
        Ok(text
            .lines()
            .filter_map(|l| serde_json::from_str::<Episode>(l).ok().map(|e| (e, l.to_string())))
            .collect())
    }

    pub fn rewrite_episodes(&self, id: &str, lines: &[String]) -> std::io::Result<()> {
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        write_atomic(&self.dir(id).join(TRACE), text.as_bytes())
    }

    pub fn audit(&self, record: &serde_json::Value) -> std::io::Result<()> {
        let _guard = self.audit.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.root.join(AUDIT);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        writeln!(f, "{record}")
    }
}

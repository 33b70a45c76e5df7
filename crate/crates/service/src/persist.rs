//! Durable session log.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use holonav_core::session::{parse_log, LogEntry, Session};
use holonav_core::{Error, Result};

/// Where applied events go before anyone hears about them.
pub trait LogSink: Send {
    /// Must not return until the entry is durable.
    fn append(&mut self, entry: &LogEntry) -> io::Result<()>;
}

/// Keeps nothing. For sessions started without a log path.
#[derive(Debug, Default)]
pub struct NoLog;

impl LogSink for NoLog {
    fn append(&mut self, _: &LogEntry) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug)]
pub struct FileLog {
    file: File,
    path: PathBuf,
}

impl FileLog {
    /// Opens or creates the log and replays what is already in it. A torn
    /// trailing line left by a crash is cut off so new appends start on a
    /// fresh line.
    pub fn open(path: impl AsRef<Path>) -> Result<(FileLog, Session)> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if keep < bytes.len() {
            file.set_len(keep as u64)?;
            bytes.truncate(keep);
        }
        let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
        let entries = parse_log(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let session = Session::replay(entries).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok((FileLog { file, path }, session))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl LogSink for FileLog {
    fn append(&mut self, entry: &LogEntry) -> io::Result<()> {
        self.file.write_all(entry.to_json_line().as_bytes())?;
        self.file.sync_data()
    }
}

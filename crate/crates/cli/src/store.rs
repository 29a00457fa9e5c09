//! Session logs on disk: one `<id>.jsonl` per session plus an append-only
//! `index.jsonl` with one entry per persisted session.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vibrotwin::experiment::SessionLog;
use vibrotwin::{Protocol, SiteName};

use crate::Error;

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub session_id: String,
    pub participant: String,
    pub protocol: Protocol,
    pub site: SiteName,
    pub complete: bool,
    pub records: usize,
    pub file: String,
}

#[derive(Debug, Clone)]
pub struct LogStore {
    dir: PathBuf,
}

impl LogStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, Error> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::Io(dir.display().to_string(), e))?;
        Ok(LogStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Rejects ids that could escape the store directory.
    fn checked_id(id: &str) -> Result<&str, Error> {
        let ok = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !id.starts_with('.');
        if ok {
            Ok(id)
        } else {
            Err(Error::BadRequest(format!("invalid session id {id:?}")))
        }
    }

    pub fn path_of(&self, id: &str) -> Result<PathBuf, Error> {
        Ok(self.dir.join(format!("{}.jsonl", Self::checked_id(id)?)))
    }

    /// Writes the log and appends its index entry. An existing log with the
    /// same id is an error; logs are never rewritten.
    pub fn save(&self, log: &SessionLog) -> Result<PathBuf, Error> {
        let h = &log.header;
        let path = self.path_of(&h.session_id)?;
        let io = |e| Error::Io(path.display().to_string(), e);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(io)?;
        f.write_all(log.to_jsonl().as_bytes()).map_err(io)?;

        let entry = IndexEntry {
            session_id: h.session_id.clone(),
            participant: h.participant.clone(),
            protocol: h.protocol,
            site: h.site.name.clone(),
            complete: h.complete,
            records: log.records.len(),
            file: format!("{}.jsonl", h.session_id),
        };
        let index = self.dir.join(INDEX_FILE);
        let mut line = serde_json::to_string(&entry).expect("index entry serializes");
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::Io(index.display().to_string(), e))?;
        Ok(path)
    }

    pub fn index(&self) -> Result<Vec<IndexEntry>, Error> {
        let index = self.dir.join(INDEX_FILE);
        let text = match fs::read_to_string(&index) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::Io(index.display().to_string(), e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::BadLog(index.display().to_string(), e.to_string()))
            })
            .collect()
    }

    pub fn raw(&self, id: &str) -> Result<Option<String>, Error> {
        let path = self.path_of(id)?;
        match fs::read_to_string(&path) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::Io(path.display().to_string(), e)),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.path_of(id).is_ok_and(|p| p.exists())
    }
}

/// Reads one log file.
pub fn read_log(path: &Path) -> Result<SessionLog, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    SessionLog::from_jsonl(&text)
        .map_err(|e| Error::BadLog(path.display().to_string(), e.to_string()))
}

/// Every session log under `input`: the file itself, or each `*.jsonl` in
/// the directory except the index, in name order.
pub fn read_logs(input: &Path) -> Result<Vec<SessionLog>, Error> {
    if input.is_file() {
        return Ok(vec![read_log(input)?]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::Io(input.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "jsonl")
                && p.file_name().is_some_and(|n| n != INDEX_FILE)
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_log(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use vibrotwin::experiment::{run_session, RecordingSink, VirtualClock};
    use vibrotwin::{gen_plan, BodySite, Responder, ResponderKind, ResponderModel, SessionConfig};

    fn log(id: &str) -> SessionLog {
        let site = BodySite::upper_arm();
        let plan = gen_plan(Protocol::Intensity, &site, 1, None);
        let mut responder =
            Responder::new(ResponderModel::new(ResponderKind::Perfect, site, 1).unwrap());
        run_session(
            id,
            "p",
            &plan,
            &SessionConfig::default(),
            &mut RecordingSink::default(),
            &mut responder,
            &mut VirtualClock::new(0),
        )
        .unwrap()
    }

    #[test]
    fn save_index_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let store = LogStore::open(dir.path()).unwrap();
        let a = log("a-1");
        store.save(&a).unwrap();
        store.save(&log("b-2")).unwrap();
        assert!(store.save(&a).is_err(), "logs are write-once");
        let index = store.index().unwrap();
        assert_eq!(index.len(), 2);
        assert_eq!(index[0].records, 30);
        assert!(index[0].complete);
        assert_eq!(read_logs(dir.path()).unwrap()[0], a);
        assert_eq!(store.raw("a-1").unwrap().unwrap(), a.to_jsonl());
        assert_eq!(store.raw("zzz").unwrap(), None);
    }

    #[test]
    fn hostile_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = LogStore::open(dir.path()).unwrap();
        for id in ["../x", "a/b", "", ".hidden"] {
            assert!(store.path_of(id).is_err(), "{id}");
        }
    }
}

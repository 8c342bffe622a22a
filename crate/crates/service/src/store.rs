//! On-disk state: uploaded sets under `<data>/sets/<set_id>.set`, sessions
//! as JSON under `<data>/sessions/<session_id>.json`. Writes are atomic
//! (temp file + rename).

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use protoid::classify::RankingRecord;
use serde::{Deserialize, Serialize};

/// One confirmation. Entries are never removed; undo stamps `undone_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query_ref: Option<String>,
    pub predicted: Option<String>,
    pub confirmed_id: String,
    pub timestamp: String,
    pub undone_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub set_id: String,
    pub created_at: String,
    pub remaining_ids: BTreeSet<String>,
    pub history: Vec<HistoryEntry>,
    /// Most recent classify result, for reconnecting clients.
    pub last_ranking: Option<RankingRecord>,
}

impl Session {
    pub fn new(session_id: String, set_id: String, object_ids: impl IntoIterator<Item = String>) -> Self {
        Session {
            session_id,
            set_id,
            created_at: now(),
            remaining_ids: object_ids.into_iter().collect(),
            history: Vec::new(),
            last_ranking: None,
        }
    }

    /// Ids confirmed and not undone, in confirmation order.
    pub fn confirmed(&self) -> Vec<&HistoryEntry> {
        self.history.iter().filter(|h| h.undone_at.is_none()).collect()
    }

    /// Moves `object_id` from the pool to the history. `false` if it is not
    /// in the pool.
    pub fn confirm(&mut self, object_id: &str, query_ref: Option<String>, predicted: Option<String>) -> bool {
        if !self.remaining_ids.remove(object_id) {
            return false;
        }
        self.history.push(HistoryEntry {
            query_ref,
            predicted,
            confirmed_id: object_id.to_string(),
            timestamp: now(),
            undone_at: None,
        });
        true
    }

    /// Returns the most recent live confirmation to the pool.
    pub fn undo(&mut self) -> Option<String> {
        let entry = self.history.iter_mut().rev().find(|h| h.undone_at.is_none())?;
        entry.undone_at = Some(now());
        self.remaining_ids.insert(entry.confirmed_id.clone());
        Some(entry.confirmed_id.clone())
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Ids double as file names, so they are limited to `[A-Za-z0-9._-]`.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("sets"))?;
        std::fs::create_dir_all(root.join("sessions"))?;
        Ok(Store { root })
    }

    pub fn set_path(&self, set_id: &str) -> PathBuf {
        self.root.join("sets").join(format!("{set_id}.set"))
    }

    fn session_path(&self, session_id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{session_id}.json"))
    }

    pub fn write_set(&self, set_id: &str, bytes: &[u8]) -> std::io::Result<()> {
        atomic_write(&self.set_path(set_id), bytes)
    }

    pub fn write_session(&self, s: &Session) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(s).expect("session serializes");
        atomic_write(&self.session_path(&s.session_id), &json)
    }

    pub fn set_files(&self) -> std::io::Result<Vec<PathBuf>> {
        list(&self.root.join("sets"), "set")
    }

    /// Every readable session file; unreadable ones are reported and skipped.
    pub fn load_sessions(&self) -> std::io::Result<Vec<Session>> {
        let mut out = Vec::new();
        for p in list(&self.root.join("sessions"), "json")? {
            match std::fs::read(&p).map(|b| serde_json::from_slice::<Session>(&b)) {
                Ok(Ok(s)) => out.push(s),
                Ok(Err(e)) => eprintln!("skipping session {}: {e}", p.display()),
                Err(e) => eprintln!("skipping session {}: {e}", p.display()),
            }
        }
        Ok(out)
    }
}

fn list(dir: &Path, ext: &str) -> std::io::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    Ok(v)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("o{i}")).collect()
    }

    #[test]
    fn confirm_and_undo_conserve_the_pool() {
        let mut s = Session::new("s".into(), "set".into(), ids(3));
        assert!(s.confirm("o1", None, Some("o1".into())));
        assert!(!s.confirm("o1", None, None));
        assert!(!s.confirm("zz", None, None));
        assert!(s.confirm("o0", None, None));
        assert_eq!(s.remaining_ids.len() + s.confirmed().len(), 3);
        let before_second = {
            let mut t = Session::new("s".into(), "set".into(), ids(3));
            t.confirm("o1", None, None);
            t.remaining_ids
        };
        assert_eq!(s.undo().as_deref(), Some("o0"));
        assert_eq!(s.remaining_ids, before_second);
        assert_eq!(s.undo().as_deref(), Some("o1"));
        assert_eq!(s.undo(), None);
        assert_eq!(s.remaining_ids.len(), 3);
        assert_eq!(s.history.len(), 2, "history is append-only");
    }

    #[test]
    fn ids_are_file_safe() {
        assert!(valid_id("set-0a1b.v2_x"));
        for bad in ["", "../x", "a/b", ".hidden", "a b"] {
            assert!(!valid_id(bad), "{bad}");
        }
    }

    #[test]
    fn sessions_round_trip_through_disk() {
        let d = tempfile::tempdir().unwrap();
        let store = Store::open(d.path()).unwrap();
        let mut s = Session::new("abc".into(), "set".into(), ids(2));
        s.confirm("o0", Some("q".into()), None);
        store.write_session(&s).unwrap();
        std::fs::write(d.path().join("sessions/bad.json"), b"{").unwrap();
        assert_eq!(store.load_sessions().unwrap(), vec![s]);
    }
}

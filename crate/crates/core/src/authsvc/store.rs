use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AuthError;
use crate::dtw::Template;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub templates: BTreeMap<u8, Template>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    #[serde(default)]
    pub threshold_override: Option<f64>,
}

impl UserRecord {
    pub fn new(user_id: impl Into<String>) -> Self {
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            user_id: user_id.into(),
            templates: BTreeMap::new(),
            created_at,
            threshold_override: None,
        }
    }

    /// Total stored enrolment matrices.
    pub fn sample_count(&self) -> usize {
        self.templates.values().map(Template::len).sum()
    }

    /// Re-checks what deserialization cannot.
    fn check(self) -> Result<Self, AuthError> {
        for (&digit, t) in &self.templates {
            let bad = digit > 9
                || t.digit != digit
                || t.user_id != self.user_id
                || Template::new(t.user_id.clone(), t.digit, t.enrolment().to_vec()).is_err();
            if bad {
                return Err(AuthError::StorageFailure(format!(
                    "corrupt template for digit {digit} of {}",
                    self.user_id
                )));
            }
        }
        Ok(self)
    }
}

pub(crate) fn check_user_id(user: &str) -> Result<(), AuthError> {
    let ok = !user.is_empty()
        && user.len() <= 128
        && !user.starts_with('.')
        && user
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(AuthError::InvalidUserId(user.to_string()))
    }
}

/// One JSON document per user in a single directory. Writes go to a
/// temporary file in the same directory that is then renamed over the old
/// document.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    dir: PathBuf,
}

fn storage(e: impl std::fmt::Display) -> AuthError {
    AuthError::StorageFailure(e.to_string())
}

impl TemplateStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, AuthError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(storage)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, user: &str) -> PathBuf {
        self.dir.join(format!("{user}.json"))
    }

    pub fn load(&self, user: &str) -> Result<Option<UserRecord>, AuthError> {
        check_user_id(user)?;
        let bytes = match std::fs::read(self.path(user)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(storage(e)),
        };
        let record: UserRecord = serde_json::from_slice(&bytes).map_err(storage)?;
        if record.user_id != user {
            return Err(AuthError::StorageFailure(format!(
                "{} holds the record of {}",
                self.path(user).display(),
                record.user_id
            )));
        }
        record.check().map(Some)
    }

    pub fn save(&self, record: &UserRecord) -> Result<(), AuthError> {
        check_user_id(&record.user_id)?;
        let json = serde_json::to_vec(record).map_err(storage)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(storage)?;
        tmp.write_all(&json).map_err(storage)?;
        tmp.as_file().sync_all().map_err(storage)?;
        tmp.persist(self.path(&record.user_id))
            .map_err(|e| storage(e.error))?;
        Ok(())
    }

    /// Ids of all stored users, sorted.
    pub fn users(&self) -> Result<Vec<String>, AuthError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir).map_err(storage)? {
            let name = entry.map_err(storage)?.file_name();
            let name = name.to_string_lossy();
            if let Some(user) = name.strip_suffix(".json") {
                if check_user_id(user).is_ok() {
                    out.push(user.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn user_ids() {
        for ok in ["alice", "u_01", "a.b-c"] {
            assert!(check_user_id(ok).is_ok(), "{ok}");
        }
        for bad in ["", "../x", "a/b", ".hidden", "sp ace"] {
            assert!(check_user_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn missing_user_loads_none() {
        let dir = tempfile::tempdir().unwrap();
        let store = TemplateStore::open(dir.path()).unwrap();
        assert_eq!(store.load("nobody").unwrap(), None);
        assert!(store.users().unwrap().is_empty());
    }

    #[test]
    fn corrupt_file_is_storage_failure() {
        let dir = tempfile::tempdir().unwrap();
        let store = TemplateStore::open(dir.path()).unwrap();
        std::fs::write(dir.path().join("bob.json"), b"{not json").unwrap();
        assert!(matches!(store.load("bob"), Err(AuthError::StorageFailure(_))));
    }
}

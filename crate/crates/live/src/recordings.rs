//! Exported session recordings, stored in the dataset episode format.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use phri_core::dynamics::Episode;

use crate::ServiceError;
use crate::store::valid_id;

const META_SUFFIX: &str = ".meta.json";

#[derive(Debug, Clone)]
pub struct RecordingStore {
    dir: PathBuf,
    // Serializes id allocation so concurrent exports never share a stem.
    alloc: Arc<Mutex<()>>,
}

/// Keeps the characters allowed in ids; anything else becomes `_`.
pub fn sanitize(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() { "session".into() } else { s }
}

impl RecordingStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RecordingStore {
            dir: dir.into(),
            alloc: Arc::default(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn list(&self) -> Vec<String> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(META_SUFFIX).map(str::to_string))
            .filter(|id| valid_id(id) && Episode::record_path(&self.dir, id).is_file())
            .collect();
        ids.sort();
        ids
    }

    pub fn load(&self, id: &str) -> Result<Episode, ServiceError> {
        if !valid_id(id) || !Episode::meta_path(&self.dir, id).is_file() {
            return Err(ServiceError::UnknownRecording(id.to_string()));
        }
        Ok(Episode::load(&self.dir, id)?)
    }

    /// Writes the episode under the first free `<prefix>-NNN` id.
    pub fn save(&self, episode: &Episode, prefix: &str) -> Result<String, ServiceError> {
        let _guard = self.alloc.lock().expect("recording lock");
        let prefix = sanitize(prefix);
        let id = (1..)
            .map(|n| format!("{prefix}-{n:03}"))
            .find(|id| !Episode::meta_path(&self.dir, id).exists())
            .expect("unbounded range");
        episode.save(&self.dir, &id)?;
        Ok(id)
    }

    /// Every recording whose human model carries `human_id`, in id order.
    pub fn for_human(&self, human_id: &str) -> Result<Vec<(String, Episode)>, ServiceError> {
        let mut out = Vec::new();
        for id in self.list() {
            let ep = self.load(&id)?;
            if ep.meta.human.id == human_id {
                out.push((id, ep));
            }
        }
        Ok(out)
    }
}

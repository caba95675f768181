//! Replay backend: serves responses recorded in a session file, and
//! nothing else. Any request whose key is absent is a hard error, which
//! is what makes replayed runs trustworthy end to end.

use std::path::Path;

use super::{BackendError, BackendReply, GenerationBackend, GenerationRequest, SessionStore};

pub struct ReplayBackend {
    store: SessionStore,
}

impl ReplayBackend {
    pub fn new(store: SessionStore) -> ReplayBackend {
        ReplayBackend { store }
    }

    pub fn from_session_file(path: &Path) -> Result<ReplayBackend, BackendError> {
        Ok(ReplayBackend::new(SessionStore::load(path)?))
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}

impl GenerationBackend for ReplayBackend {
    fn id(&self) -> &'static str {
        "replay"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<BackendReply, BackendError> {
        let key = request.cache_key();
        let entry = self
            .store
            .get(&key)
            .ok_or(BackendError::ReplayMiss { key })?;
        // Replayed responses report zero latency so traces built from
        // them are byte-identical across runs and machines.
        Ok(BackendReply {
            text: entry.response.text.clone(),
            usage: entry.response.usage,
            latency_ms: 0,
            served_from_replay: true,
        })
    }
}

//! Live sessions. Each session is serialized by its own mutex; a step that
//! finds the mutex held is refused rather than queued.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock, TryLockError};
use std::time::{Duration, Instant};

use tokio::sync::broadcast;
use uuid::Uuid;

use crate::error::GatewayError;
use crate::session::{Session, SessionView, StepOutcome};

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

pub struct SessionEntry {
    session: Mutex<Session>,
    touched: Mutex<Instant>,
    updates: broadcast::Sender<Arc<StepOutcome>>,
}

impl SessionEntry {
    fn touch(&self) {
        *self.touched.lock().expect("touch lock") = Instant::now();
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<StepOutcome>> {
        self.touch();
        self.updates.subscribe()
    }

    pub fn view(&self) -> Result<SessionView, GatewayError> {
        self.touch();
        let s = match self.session.try_lock() {
            Ok(s) => s,
            Err(TryLockError::WouldBlock) => {
                return Err(GatewayError::Conflict("a step is in progress".into()))
            }
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        s.view()
    }

    /// Run one step unless another is already in flight.
    pub fn step(
        &self,
        run: impl FnOnce(&mut Session) -> Result<StepOutcome, GatewayError>,
    ) -> Result<Arc<StepOutcome>, GatewayError> {
        self.touch();
        let mut s = match self.session.try_lock() {
            Ok(s) => s,
            Err(TryLockError::WouldBlock) => {
                return Err(GatewayError::Conflict("another step for this session is in flight".into()))
            }
            Err(TryLockError::Poisoned(_)) => {
                return Err(GatewayError::Internal("session state was poisoned by a failed step".into()))
            }
        };
        let out = Arc::new(run(&mut s)?);
        // No subscribers is not an error.
        let _ = self.updates.send(out.clone());
        Ok(out)
    }

    fn idle_for(&self, now: Instant) -> Duration {
        now.saturating_duration_since(*self.touched.lock().expect("touch lock"))
    }
}

pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
    idle_timeout: Duration,
}

impl SessionStore {
    pub fn new(idle_timeout: Duration) -> Self {
        Self {
            sessions: RwLock::default(),
            idle_timeout,
        }
    }

    pub fn new_id() -> String {
        Uuid::new_v4().to_string()
    }

    pub fn insert(&self, session: Session) -> Arc<SessionEntry> {
        let (updates, _) = broadcast::channel(64);
        let id = session.id().to_string();
        let entry = Arc::new(SessionEntry {
            session: Mutex::new(session),
            touched: Mutex::new(Instant::now()),
            updates,
        });
        self.sessions.write().expect("store lock").insert(id, entry.clone());
        entry
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionEntry>, GatewayError> {
        self.expire();
        self.sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| GatewayError::NotFound(format!("unknown session {id:?}")))
    }

    /// Drop sessions idle longer than the timeout; returns how many went.
    pub fn expire(&self) -> usize {
        let now = Instant::now();
        let mut map = self.sessions.write().expect("store lock");
        let before = map.len();
        map.retain(|_, e| e.idle_for(now) < self.idle_timeout);
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

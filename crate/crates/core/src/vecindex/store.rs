use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::RwLock;

use super::{IndexSnapshot, VecIndexError};

/// Holds the current snapshot. Readers clone the `Arc` and keep a consistent
/// view for as long as they hold it; [`SnapshotStore::swap`] replaces the
/// pointer without touching snapshots already handed out.
#[derive(Debug)]
pub struct SnapshotStore {
    current: RwLock<Arc<IndexSnapshot>>,
}

impl SnapshotStore {
    pub fn new(snapshot: IndexSnapshot) -> Self {
        Self {
            current: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn current(&self) -> Arc<IndexSnapshot> {
        Arc::clone(&self.current.read())
    }

    /// Installs `next` and returns the snapshot it replaced.
    pub fn swap(&self, next: IndexSnapshot) -> Arc<IndexSnapshot> {
        std::mem::replace(&mut *self.current.write(), Arc::new(next))
    }
}

/// Background rebuild-then-swap loop. Dropping the handle stops the thread.
pub struct Refresher {
    stop: Option<mpsc::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

/// One hour.
pub const DEFAULT_REFRESH_INTERVAL: Duration = Duration::from_secs(3600);

impl Refresher {
    /// Calls `rebuild` every `interval` and swaps the result into `store`.
    /// A failed rebuild keeps the previous snapshot in service.
    pub fn spawn<F>(store: Arc<SnapshotStore>, interval: Duration, rebuild: F) -> Self
    where
        F: Fn() -> Result<IndexSnapshot, VecIndexError> + Send + 'static,
    {
        let (tx, rx) = mpsc::channel::<()>();
        let handle = thread::Builder::new()
            .name("index-refresher".into())
            .spawn(move || loop {
                match rx.recv_timeout(interval) {
                    Err(RecvTimeoutError::Timeout) => match rebuild() {
                        Ok(next) => {
                            let entries = next.len();
                            store.swap(next);
                            tracing::info!(entries, "index snapshot refreshed");
                        }
                        Err(e) => tracing::warn!(error = %e, "index refresh failed; keeping previous snapshot"),
                    },
                    Ok(()) | Err(RecvTimeoutError::Disconnected) => break,
                }
            })
            .expect("spawn refresher thread");
        Self {
            stop: Some(tx),
            handle: Some(handle),
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Refresher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

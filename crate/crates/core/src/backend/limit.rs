use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Condvar, Mutex};
use std::thread;

use super::{Backend, BackendError, BackendRequest, Completion};

/// Caps the number of in-flight calls into `inner` across all callers.
#[derive(Debug)]
pub struct Limited<B> {
    inner: B,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct Permit<'a, B> {
    owner: &'a Limited<B>,
}

impl<B> Drop for Permit<'_, B> {
    fn drop(&mut self) {
        let mut n = self.owner.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.owner.freed.notify_one();
    }
}

impl<B> Limited<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    /// Highest number of simultaneous calls observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn acquire(&self) -> Permit<'_, B> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Permit { owner: self }
    }
}

impl<B: Backend> Backend for Limited<B> {
    fn complete(&self, request: &BackendRequest) -> Result<Completion, BackendError> {
        let _permit = self.acquire();
        self.inner.complete(request)
    }

    fn score_tokens(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let _permit = self.acquire();
        self.inner.score_tokens(prefix, continuation)
    }
}

/// Applies `f` to every item on at most `limit` worker threads.
///
/// Each job carries its input index as a correlation id; results are slotted
/// back by that id, so the output order is the input order regardless of
/// completion order.
pub fn map_bounded<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            scope.spawn(move || loop {
                let id = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(id) else { break };
                if tx.send((id, f(id, item))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    for (id, r) in rx {
        slots[id] = Some(r);
    }
    slots
        .into_iter()
        .map(|r| r.expect("every job reports exactly once"))
        .collect()
}

//! Byte accounting for tensor payloads.
//!
//! Every [`Buffer`] registers its payload size with the ledger of the thread
//! that allocated it and deregisters on drop (from whichever thread drops
//! it). Peak memory is therefore the maximum number of concurrently live
//! payload bytes allocated by one thread, which is what training-time
//! memory measurements report. OS-level RSS is never consulted.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Ledger {
    live: AtomicI64,
    peak: AtomicI64,
}

impl Ledger {
    fn add(&self, bytes: i64) {
        let now = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(now, Ordering::Relaxed);
    }

    fn sub(&self, bytes: i64) {
        self.live.fetch_sub(bytes, Ordering::Relaxed);
    }
}

thread_local! {
    static LEDGER: Arc<Ledger> = Arc::new(Ledger::default());
}

fn current() -> Arc<Ledger> {
    LEDGER.with(Arc::clone)
}

/// Payload bytes currently live on this thread's ledger.
pub fn live_bytes() -> usize {
    LEDGER.with(|l| l.live.load(Ordering::Relaxed).max(0) as usize)
}

/// High-water mark of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    LEDGER.with(|l| l.peak.load(Ordering::Relaxed).max(0) as usize)
}

/// Restart peak tracking from the current live byte count.
pub fn reset_peak() {
    LEDGER.with(|l| {
        let live = l.live.load(Ordering::Relaxed);
        l.peak.store(live, Ordering::Relaxed);
    });
}

/// A heap buffer whose size is visible to the memory ledger.
#[derive(Debug)]
pub struct Buffer<T> {
    data: Vec<T>,
    ledger: Arc<Ledger>,
}

impl<T> Buffer<T> {
    pub fn from_vec(data: Vec<T>) -> Self {
        let ledger = current();
        ledger.add(Self::bytes_of(&data));
        Buffer { data, ledger }
    }

    fn bytes_of(data: &[T]) -> i64 {
        std::mem::size_of_val(data) as i64
    }

    pub fn bytes(&self) -> usize {
        std::mem::size_of_val(self.data.as_slice())
    }

    pub fn into_vec(mut self) -> Vec<T> {
        self.ledger.sub(Self::bytes_of(&self.data));
        std::mem::take(&mut self.data)
    }
}

impl<T: Clone + Default> Buffer<T> {
    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![T::default(); len])
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::from_vec(self.data.clone())
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        self.ledger.sub(Self::bytes_of(&self.data));
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_and_drop_balance() {
        let before = live_bytes();
        reset_peak();
        {
            let a = Buffer::<f32>::zeros(1000);
            assert_eq!(live_bytes(), before + 4000);
            let b = a.clone();
            assert_eq!(live_bytes(), before + 8000);
            drop(b);
        }
        assert_eq!(live_bytes(), before);
        assert_eq!(peak_bytes(), before + 8000);
        reset_peak();
        assert_eq!(peak_bytes(), before);
    }

    #[test]
    fn cross_thread_drop_returns_to_owner() {
        let before = live_bytes();
        let buf = Buffer::<f64>::zeros(16);
        std::thread::spawn(move || drop(buf)).join().unwrap();
        assert_eq!(live_bytes(), before);
    }

    #[test]
    fn into_vec_releases() {
        let before = live_bytes();
        let v = Buffer::<f32>::zeros(10).into_vec();
        assert_eq!(v.len(), 10);
        assert_eq!(live_bytes(), before);
    }
}

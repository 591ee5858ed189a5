//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan work out over rayon's pool,
//! unless the process-wide mode has been switched to [`Mode::Sequential`].
//! Without the feature everything runs on the calling thread.
//!
//! Work is always split into chunks whose size depends only on the problem,
//! never on the thread count, so results are bit-identical across modes.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_mode(mode: Mode) {
    MODE.store(matches!(mode, Mode::Parallel) as u8, Ordering::SeqCst);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::SeqCst) == 1 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Runs `f` with the given mode, restoring the previous one afterwards.
pub fn with_mode<R>(m: Mode, f: impl FnOnce() -> R) -> R {
    let prev = mode();
    set_mode(m);
    let out = f();
    set_mode(prev);
    out
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

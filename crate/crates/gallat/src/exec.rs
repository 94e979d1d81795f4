//! Scoped-thread executor for per-target work.

use gallat_core::training::Executor;

/// Splits jobs into contiguous blocks, one per worker. Results come back in
/// job order, so reductions over them do not depend on the thread count.
#[derive(Clone, Copy, Debug)]
pub struct Threaded {
    pub threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Self { threads: threads.max(1) }
    }
}

impl Executor for Threaded {
    fn map<T, F>(&self, jobs: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let workers = self.threads.min(jobs);
        if workers <= 1 {
            return (0..jobs).map(f).collect();
        }
        let block = jobs.div_ceil(workers);
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs)
                .step_by(block)
                .map(|lo| s.spawn(move || (lo..(lo + block).min(jobs)).map(f).collect::<Vec<T>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

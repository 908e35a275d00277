//! Process-level tuning for long training runs.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Keeps multi-megabyte tensor buffers on the allocator's free lists
/// instead of round-tripping them through mmap/munmap on every step.
/// Idempotent; safe to call from any entry point.
pub fn tune_allocator() {
    TUNE.call_once(|| {
        #[cfg(target_os = "linux")]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
        }
    });
}

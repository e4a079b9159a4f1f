//! Exponential backoff with full jitter.

use rand::Rng;

/// Upper bound of the sleep before retry number `attempt` (1-based):
/// `base * 2^(attempt - 1)`, saturating.
pub fn backoff_cap_ms(base_ms: u64, attempt: u32) -> u64 {
    let shift = attempt.saturating_sub(1).min(63);
    base_ms.saturating_mul(1u64 << shift)
}

/// Full jitter: a uniform draw from `[0, cap]`.
pub fn full_jitter_ms(base_ms: u64, attempt: u32, rng: &mut impl Rng) -> u64 {
    let cap = backoff_cap_ms(base_ms, attempt);
    rng.random_range(0..=cap)
}

/// Whether an HTTP status is worth retrying.
pub fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

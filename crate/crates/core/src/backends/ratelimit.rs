//! Token bucket with capacity one, i.e. strict pacing.
//!
//! Dispatches are spaced at least `ceil(60000 / per_min)` ms apart, so any
//! half-open 60 s window holds at most `per_min` of them.

use std::sync::Mutex;

use super::clock::Clock;

#[derive(Debug)]
pub struct TokenBucket {
    interval_ms: u64,
    next_free_ms: Mutex<Option<u64>>,
}

impl TokenBucket {
    pub fn per_minute(limit: u32) -> Self {
        let limit = u64::from(limit.max(1));
        Self {
            interval_ms: 60_000u64.div_ceil(limit),
            next_free_ms: Mutex::new(None),
        }
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    /// Block (on `clock`) until a token is available and take it. Returns
    /// the dispatch time.
    pub fn acquire(&self, clock: &dyn Clock) -> u64 {
        let mut next = self.next_free_ms.lock().unwrap_or_else(|e| e.into_inner());
        let now = clock.now_ms();
        let at = match *next {
            Some(free) if free > now => {
                clock.sleep_ms(free - now);
                free
            }
            _ => now,
        };
        *next = Some(at + self.interval_ms);
        at
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::clock::ManualClock;
    use proptest::prelude::*;

    fn max_in_window(times: &[u64], window: u64) -> usize {
        let mut best = 0;
        let mut lo = 0;
        for hi in 0..times.len() {
            while times[hi] - times[lo] >= window {
                lo += 1;
            }
            best = best.max(hi - lo + 1);
        }
        best
    }

    #[test]
    fn first_dispatch_is_immediate() {
        let clock = ManualClock::new(1000);
        let bucket = TokenBucket::per_minute(30);
        assert_eq!(bucket.acquire(&clock), 1000);
        assert_eq!(bucket.acquire(&clock), 3000);
        assert_eq!(clock.sleeps(), vec![2000]);
    }

    proptest! {
        #[test]
        fn any_minute_holds_at_most_the_limit(
            limit in 1u32..200,
            gaps in prop::collection::vec(0u64..5_000, 1..300),
        ) {
            let clock = ManualClock::new(0);
            let bucket = TokenBucket::per_minute(limit);
            let mut times = Vec::new();
            for g in gaps {
                clock.advance(g);
                times.push(bucket.acquire(&clock));
            }
            prop_assert!(max_in_window(&times, 60_000) <= limit as usize);
        }
    }
}

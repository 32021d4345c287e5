use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecStats {
    pub proposed: u64,
    pub accepted: u64,
    pub accept_ratio: f64,
    pub cycles: u64,
}

impl SpecStats {
    pub fn from_counts(proposed: u64, accepted: u64, cycles: u64) -> Self {
        Self {
            proposed,
            accepted,
            accept_ratio: if proposed == 0 {
                0.0
            } else {
                accepted as f64 / proposed as f64
            },
            cycles,
        }
    }
}

/// Latency decomposition and token counts of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestStats {
    pub prefill_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
    pub prompt_tokens: usize,
    pub new_tokens: usize,
    pub per_step_ms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speculative: Option<SpecStats>,
}

/// Phase boundaries of one request.
#[derive(Debug, Clone, Copy)]
pub struct Timers {
    pub start: Instant,
    pub prefill_end: Instant,
    pub decode_end: Instant,
}

pub fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl RequestStats {
    pub fn collect(
        timers: Timers,
        prompt_tokens: usize,
        new_tokens: usize,
        per_step_ms: Vec<f64>,
        speculative: Option<SpecStats>,
    ) -> Self {
        let prefill_ms = ms(timers.prefill_end - timers.start);
        Self {
            prefill_ms,
            decode_ms: ms(timers.decode_end - timers.prefill_end),
            total_ms: ms(timers.decode_end - timers.start),
            prompt_tokens,
            new_tokens,
            per_step_ms,
            speculative,
        }
    }

    /// `|total - (prefill + decode)| <= tol * total`.
    pub fn decomposition_holds(&self, tol: f64) -> bool {
        (self.total_ms - (self.prefill_ms + self.decode_ms)).abs() <= tol * self.total_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_accept_ratio() {
        // three cycles of m = 4 accepting 4, 2 and 4 drafts
        let s = SpecStats::from_counts(12, 4 + 2 + 4, 3);
        assert!((s.accept_ratio - 10.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn zero_decode() {
        let t = Instant::now();
        let s = RequestStats::collect(
            Timers {
                start: t,
                prefill_end: t + Duration::from_millis(2),
                decode_end: t + Duration::from_millis(2),
            },
            4,
            0,
            vec![],
            None,
        );
        assert_eq!(s.decode_ms, 0.0);
        assert!(s.decomposition_holds(0.05));
    }
}

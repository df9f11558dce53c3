//! Sliding-window event rates with one-second buckets.

use std::collections::VecDeque;

use crate::node::Millis;

/// Counts events into whole-second buckets and reports the mean rate over
/// the last `window_secs` complete seconds. Before a full window has elapsed
/// the mean is taken over the complete seconds seen so far.
#[derive(Debug, Clone)]
pub struct RateWindow {
    window_secs: u64,
    start_sec: u64,
    /// (second, count), oldest first.
    buckets: VecDeque<(u64, u64)>,
}

impl RateWindow {
    pub fn new(window_secs: u64, start: Millis) -> Self {
        RateWindow {
            window_secs: window_secs.max(1),
            start_sec: start / 1000,
            buckets: VecDeque::new(),
        }
    }

    pub fn record(&mut self, now: Millis, count: u64) {
        if count == 0 {
            return;
        }
        let sec = now / 1000;
        match self.buckets.back_mut() {
            Some((s, c)) if *s == sec => *c += count,
            _ => self.buckets.push_back((sec, count)),
        }
        self.prune(sec);
    }

    fn prune(&mut self, sec: u64) {
        let keep_from = sec.saturating_sub(self.window_secs);
        while matches!(self.buckets.front(), Some((s, _)) if *s < keep_from) {
            self.buckets.pop_front();
        }
    }

    pub fn rate(&self, now: Millis) -> f64 {
        let sec = now / 1000;
        let span = sec.saturating_sub(self.start_sec).min(self.window_secs);
        if span == 0 {
            return 0.0;
        }
        let from = sec - span;
        let total: u64 = self
            .buckets
            .iter()
            .filter(|(s, _)| *s >= from && *s < sec)
            .map(|(_, c)| c)
            .sum();
        total as f64 / span as f64
    }
}

pub fn format_rate(rate: f64) -> String {
    format!("{rate:.2}/s")
}

//! Reduction schedules: which blocks merge, and by how much.

use serde::{Deserialize, Serialize};

use crate::baselines::{StrategyKind, StrategySpec};
use crate::error::{Error, Result};

/// Where and how much to reduce in each stage.
///
/// Encoder blocks listed in `encoder_layers` each drop `r_v` tokens from
/// their output; the LM drops `r_t` image tokens after block `lm_layer`.
/// Block indices are 1-based. A schedule with `strategy.kind = none` or all
/// reductions zero is a no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSchedule {
    pub encoder_layers: Vec<usize>,
    pub r_v: usize,
    pub lm_layer: usize,
    pub r_t: usize,
    pub strategy: StrategySpec,
}

impl Default for MergeSchedule {
    fn default() -> Self {
        MergeSchedule {
            encoder_layers: vec![3, 4, 5, 6],
            r_v: 92,
            lm_layer: 2,
            r_t: 108,
            strategy: StrategySpec::default(),
        }
    }
}

impl MergeSchedule {
    /// The paired reference schedule: same shape, no reduction anywhere.
    pub fn noop() -> Self {
        MergeSchedule {
            encoder_layers: Vec::new(),
            r_v: 0,
            lm_layer: 1,
            r_t: 0,
            strategy: StrategySpec {
                kind: StrategyKind::None,
                ..StrategySpec::default()
            },
        }
    }

    pub fn is_noop(&self) -> bool {
        let (r_v, r_t) = self.effective_reductions();
        (r_v == 0 || self.encoder_layers.is_empty()) && r_t == 0
    }

    /// Per-stage reduction counts after accounting for the `none` strategy.
    pub fn effective_reductions(&self) -> (usize, usize) {
        if self.strategy.kind == StrategyKind::None {
            (0, 0)
        } else {
            (self.r_v, self.r_t)
        }
    }

    /// True if the encoder should reduce after (1-based) block `b`.
    pub fn encoder_reduces_at(&self, b: usize) -> bool {
        self.effective_reductions().0 > 0 && self.encoder_layers.contains(&b)
    }

    /// True if the LM should reduce after (1-based) block `b`.
    pub fn lm_reduces_at(&self, b: usize) -> bool {
        self.effective_reductions().1 > 0 && self.lm_layer == b
    }

    /// Token count entering each encoder block (index 0 = block 1), with the
    /// final output count appended last.
    pub fn encoder_block_counts(&self, total_layers: usize, n0: usize) -> Vec<usize> {
        let (r_v, _) = self.effective_reductions();
        let mut counts = Vec::with_capacity(total_layers + 1);
        let mut n = n0;
        for b in 1..=total_layers {
            counts.push(n);
            if r_v > 0 && self.encoder_layers.contains(&b) {
                n = n.saturating_sub(r_v);
            }
        }
        counts.push(n);
        counts
    }

    /// Encoder output length for an `n0`-token frame.
    pub fn encoder_output_len(&self, n0: usize) -> usize {
        let (r_v, _) = self.effective_reductions();
        let events = if r_v > 0 { self.encoder_layers.len() } else { 0 };
        n0.saturating_sub(events * r_v)
    }

    /// Token count entering each LM block, with the final count appended.
    pub fn lm_block_counts(&self, total_layers: usize, prompt_len: usize) -> Vec<usize> {
        let (_, r_t) = self.effective_reductions();
        let mut counts = Vec::with_capacity(total_layers + 1);
        let mut n = prompt_len;
        for b in 1..=total_layers {
            counts.push(n);
            if r_t > 0 && self.lm_layer == b {
                n = n.saturating_sub(r_t);
            }
        }
        counts.push(n);
        counts
    }

    /// Validates the schedule against model shape and workload, naming the
    /// offending field in the error.
    pub fn validate(
        &self,
        encoder_layers_total: usize,
        lm_layers_total: usize,
        encoder_tokens: usize,
        image_span_len: usize,
    ) -> Result<()> {
        self.strategy.validate()?;
        if self.encoder_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule(
                "schedule.encoder_layers must be strictly increasing".into(),
            ));
        }
        for &b in &self.encoder_layers {
            if b < 1 || b > encoder_layers_total {
                return Err(Error::Schedule(format!(
                    "schedule.encoder_layers entry {b} outside [1, {encoder_layers_total}]"
                )));
            }
        }
        if self.lm_layer < 1 || self.lm_layer > lm_layers_total {
            return Err(Error::Schedule(format!(
                "schedule.lm_layer {} outside [1, {lm_layers_total}]",
                self.lm_layer
            )));
        }
        let (r_v, r_t) = self.effective_reductions();
        if r_v > 0 {
            let kept = encoder_tokens as i64 - (self.encoder_layers.len() * r_v) as i64;
            if kept < 2 {
                return Err(Error::Schedule(format!(
                    "schedule.r_v={r_v} over {} layers leaves {kept} of {encoder_tokens} \
                     encoder tokens (minimum 2)",
                    self.encoder_layers.len()
                )));
            }
        }
        if r_t > 0 && r_t + 2 > image_span_len {
            return Err(Error::Schedule(format!(
                "schedule.r_t={r_t} too large for an image span of {image_span_len} \
                 (needs r_t <= {})",
                image_span_len.saturating_sub(2)
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_produces_the_published_counts() {
        let s = MergeSchedule::default();
        let counts = s.encoder_block_counts(12, 729);
        assert_eq!(
            counts,
            vec![729, 729, 729, 637, 545, 453, 361, 361, 361, 361, 361, 361, 361]
        );
        assert_eq!(s.encoder_output_len(729), 361);
        let lm = s.lm_block_counts(8, 396);
        assert_eq!(lm, vec![396, 396, 288, 288, 288, 288, 288, 288, 288]);
    }

    #[test]
    fn none_strategy_disables_all_reductions() {
        let s = MergeSchedule {
            strategy: StrategySpec {
                kind: StrategyKind::None,
                ..StrategySpec::default()
            },
            ..MergeSchedule::default()
        };
        assert!(s.is_noop());
        assert_eq!(s.encoder_output_len(729), 729);
        assert!(!s.encoder_reduces_at(3));
    }

    #[test]
    fn validation_names_bad_fields() {
        let mut s = MergeSchedule::default();
        s.encoder_layers = vec![3, 99];
        let err = s.validate(12, 8, 729, 361).unwrap_err();
        assert!(err.to_string().contains("encoder_layers"));

        let mut s = MergeSchedule::default();
        s.lm_layer = 0;
        let err = s.validate(12, 8, 729, 361).unwrap_err();
        assert!(err.to_string().contains("lm_layer"));

        let mut s = MergeSchedule::default();
        s.r_v = 200;
        let err = s.validate(12, 8, 729, 361).unwrap_err();
        assert!(err.to_string().contains("r_v"));

        let mut s = MergeSchedule::default();
        s.r_t = 360;
        let err = s.validate(12, 8, 729, 361).unwrap_err();
        assert!(err.to_string().contains("r_t"));
        assert_eq!(err.kind(), "schedule");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn noop_schedule_validates_anywhere() {
        MergeSchedule::noop().validate(12, 8, 729, 729).unwrap();
    }

    #[test]
    fn serde_round_trips() {
        let s = MergeSchedule::default();
        let json = serde_json::to_string(&s).unwrap();
        let back: MergeSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}

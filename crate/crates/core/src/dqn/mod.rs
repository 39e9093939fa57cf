//! Deep Q-network offloading policy.
//!
//! The network reads only the arrival/metric history `X` and emits one
//! Q-value per feasible `(n_bar, action)` pair, so a single forward pass
//! scores every token state at once. Because token states evolve
//! deterministically from actions, training needs no policy rollouts: every
//! output of every sampled segment is regressed against its bootstrap
//! target in each step.

mod network;
mod train;

pub use network::{Architecture, Dense, Gradients, QNetwork};
pub use train::{
    loss_and_gradient, train, train_step, train_with, Adam, ReplayBuffer, TrainOutcome, TrainerConfig,
};

use crate::error::{Error, Result};
use crate::token_bucket::{BucketParams, BucketState};
use crate::trace_gen::TraceEntry;

/// Bijection between `(n_bar, action)` pairs and network output indices.
///
/// States `N..P-1` only allow `a = 0`; states `P..=M` allow both actions.
/// Indices run over states in increasing order, `a = 0` before `a = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputLayout {
    params: BucketParams,
}

impl OutputLayout {
    pub fn new(params: BucketParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> BucketParams {
        self.params
    }

    /// `2M - P - N + 2`.
    pub fn len(&self) -> usize {
        let BucketParams {
            fill,
            cost,
            capacity,
        } = self.params;
        (2 * capacity + 2 - cost - fill) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, n_bar: u64, offload: bool) -> Option<usize> {
        let BucketParams {
            fill,
            cost,
            capacity,
        } = self.params;
        if n_bar < fill || n_bar > capacity {
            return None;
        }
        if n_bar < cost {
            return (!offload).then_some((n_bar - fill) as usize);
        }
        Some(((cost - fill) + 2 * (n_bar - cost) + offload as u64) as usize)
    }

    pub fn pair(&self, index: usize) -> Option<(u64, bool)> {
        let BucketParams { fill, cost, .. } = self.params;
        let low = (cost - fill) as usize;
        if index >= self.len() {
            return None;
        }
        if index < low {
            return Some((fill + index as u64, false));
        }
        let k = index - low;
        Some((cost + (k / 2) as u64, k % 2 == 1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, bool)> + '_ {
        (0..self.len()).map(|i| self.pair(i).expect("index in range"))
    }

    /// `max_a Q(n_bar, a)` over actions feasible at `n_bar`.
    pub fn best_value(&self, q: &[f64], n_bar: u64) -> f64 {
        let stay = q[self.index(n_bar, false).expect("state in layout")];
        match self.index(n_bar, true) {
            Some(i) => stay.max(q[i]),
            None => stay,
        }
    }
}

/// The last `T - 1` (gap, metric) pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub gaps: Vec<u32>,
    pub metrics: Vec<f64>,
}

impl HistoryWindow {
    /// Window of `len` entries ending at `trace[end]`; positions before the
    /// start of the trace are zero-padded.
    pub fn ending_at(trace: &[TraceEntry], end: usize, len: usize) -> Self {
        let mut gaps = vec![0; len];
        let mut metrics = vec![0.0; len];
        for k in 0..len {
            // slot k holds trace[end + 1 - len + k]
            if let Some(i) = (end + 1 + k).checked_sub(len) {
                gaps[k] = trace[i].gap;
                metrics[k] = trace[i].metric;
            }
        }
        Self { gaps, metrics }
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }

    /// Writes `[gaps..., metrics...]` into `row`, gaps clipped and scaled.
    pub fn encode_into(&self, gap_clip: u32, row: &mut [f64]) {
        let n = self.len();
        for (k, g) in self.gaps.iter().enumerate() {
            row[k] = encode_gap(*g, gap_clip);
        }
        row[n..2 * n].copy_from_slice(&self.metrics);
    }
}

pub(crate) fn encode_gap(gap: u32, clip: u32) -> f64 {
    gap.min(clip) as f64 / clip as f64
}

/// `T` consecutive trace entries; `X` is the first `T - 1`, `X'` the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub entries: Vec<TraceEntry>,
}

pub(crate) const PAD: TraceEntry = TraceEntry {
    gap: 0,
    metric: 0.0,
    reward: 0,
    weak_loss: 0,
};

impl Segment {
    /// Segment whose last entry is `trace[end]` (`end >= 1`), zero-padded
    /// at the front.
    pub fn ending_at(trace: &[TraceEntry], end: usize, window: usize) -> Self {
        let entries = (0..window)
            .map(|k| match (end + 1 + k).checked_sub(window) {
                Some(i) => trace[i],
                None => PAD,
            })
            .collect();
        Self { entries }
    }

    pub fn window(&self) -> usize {
        self.entries.len()
    }

    pub fn x(&self) -> HistoryWindow {
        self.slice(0)
    }

    pub fn x_next(&self) -> HistoryWindow {
        self.slice(1)
    }

    fn slice(&self, from: usize) -> HistoryWindow {
        let part = &self.entries[from..from + self.window() - 1];
        HistoryWindow {
            gaps: part.iter().map(|e| e.gap).collect(),
            metrics: part.iter().map(|e| e.metric).collect(),
        }
    }

    /// Reward of the image being decided (last entry of `X`).
    pub fn reward(&self) -> f64 {
        self.entries[self.window() - 2].reward as f64
    }

    /// Gap before the next arrival (last entry of `X'`).
    pub fn next_gap(&self) -> u32 {
        self.entries[self.window() - 1].gap
    }
}

/// Bootstrap targets for every output index given the target network's
/// outputs on `X'`:
/// `a R + gamma max_a' Q'(n_bar', a')` with
/// `n_bar' = min(M, n_bar - P a + N I_T)`.
pub fn fill_targets(
    layout: &OutputLayout,
    q_next: &[f64],
    reward: f64,
    next_gap: u32,
    gamma: f64,
    out: &mut [f64],
) {
    let BucketParams {
        fill,
        cost,
        capacity,
    } = layout.params();
    for (i, slot) in out.iter_mut().enumerate().take(layout.len()) {
        let (n_bar, offload) = layout.pair(i).expect("index in range");
        let spent = if offload { n_bar - cost } else { n_bar };
        let next = (spent + fill * next_gap as u64).min(capacity);
        let gain = if offload { reward } else { 0.0 };
        *slot = gain + gamma * layout.best_value(q_next, next);
    }
}

/// Regression targets for one transition, reading every `n_bar'` from a
/// single target-network pass on `X'`.
pub fn q_target_update(
    x_next: &HistoryWindow,
    reward: f64,
    next_gap: u32,
    target: &QNetwork,
    gamma: f64,
) -> Result<Vec<f64>> {
    if next_gap == 0 {
        return Err(Error::InvalidConfig("next gap must be >= 1".into()));
    }
    let q_next = target.forward(x_next)?;
    let layout = target.layout();
    let mut out = vec![0.0; layout.len()];
    fill_targets(&layout, &q_next, reward, next_gap, gamma, &mut out);
    Ok(out)
}

/// Greedy action from a Q-vector: offload only if feasible and strictly
/// better than waiting.
pub fn greedy_action(layout: &OutputLayout, q: &[f64], n_bar: BucketState) -> bool {
    match layout.index(n_bar.0, true) {
        Some(i) => q[i] > q[layout.index(n_bar.0, false).expect("state in layout")],
        None => false,
    }
}

/// Greedy decision of the network for a history and bucket state.
pub fn act(net: &QNetwork, history: &HistoryWindow, n_bar: BucketState) -> Result<bool> {
    let layout = net.layout();
    if !layout.params().can_offload(n_bar) {
        return Ok(false);
    }
    let q = net.forward(history)?;
    Ok(greedy_action(&layout, &q, n_bar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n: u64, p: u64, m: u64) -> OutputLayout {
        OutputLayout::new(BucketParams::new(n, p, m).unwrap())
    }

    #[test]
    fn layout_size_formula() {
        assert_eq!(layout(1, 10, 40).len(), 71);
        assert_eq!(layout(1, 2, 4).len(), 7);
        assert_eq!(layout(1, 1, 1).len(), 2);
        assert_eq!(layout(3, 3, 3).len(), 2);
    }

    #[test]
    fn layout_is_bijective() {
        for (n, p, m) in [(1, 10, 40), (1, 2, 4), (2, 5, 9), (4, 4, 12), (1, 1, 1)] {
            let l = layout(n, p, m);
            let mut seen = vec![false; l.len()];
            for s in n..=m {
                for a in [false, true] {
                    match l.index(s, a) {
                        Some(i) => {
                            assert!(!seen[i]);
                            seen[i] = true;
                            assert_eq!(l.pair(i), Some((s, a)));
                        }
                        None => assert!(a && s < p),
                    }
                }
            }
            assert!(seen.iter().all(|&x| x));
            assert_eq!(l.index(n - 1, false), None);
            assert_eq!(l.index(m + 1, false), None);
        }
    }

    fn entry(gap: u32, metric: f64) -> TraceEntry {
        TraceEntry {
            gap,
            metric,
            reward: 1,
            weak_loss: 1,
        }
    }

    #[test]
    fn windows_are_zero_padded() {
        let trace = vec![entry(1, 0.1), entry(2, 0.2), entry(3, 0.3)];
        let w = HistoryWindow::ending_at(&trace, 1, 4);
        assert_eq!(w.gaps, vec![0, 0, 1, 2]);
        assert_eq!(w.metrics, vec![0.0, 0.0, 0.1, 0.2]);
        let seg = Segment::ending_at(&trace, 1, 4);
        assert_eq!(seg.entries[0], PAD);
        assert_eq!(seg.entries[1], PAD);
        assert_eq!(seg.x().gaps, vec![0, 0, 1]);
        assert_eq!(seg.x_next().gaps, vec![0, 1, 2]);
        assert_eq!(seg.next_gap(), 2);
        assert_eq!(seg.reward(), 1.0);
    }

    #[test]
    fn segment_windows_overlap() {
        let trace: Vec<_> = (0..10).map(|i| entry(i + 1, i as f64 / 10.0)).collect();
        let seg = Segment::ending_at(&trace, 7, 5);
        assert_eq!(seg.x().gaps[1..], seg.x_next().gaps[..3]);
        assert_eq!(seg.x(), HistoryWindow::ending_at(&trace, 6, 4));
        assert_eq!(seg.x_next(), HistoryWindow::ending_at(&trace, 7, 4));
    }

    #[test]
    fn zero_gamma_targets_are_immediate_rewards() {
        let l = layout(1, 2, 4);
        let q_next = [5.0, -3.0, 2.0, 7.0, 1.0, 0.5, 9.0];
        let mut out = [0.0; 7];
        fill_targets(&l, &q_next, 1.0, 1, 0.0, &mut out);
        for (i, (_, a)) in l.iter().enumerate() {
            assert_eq!(out[i], if a { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn greedy_action_masks_and_ties() {
        let l = layout(1, 2, 4);
        // index order: (1,0) (2,0) (2,1) (3,0) (3,1) (4,0) (4,1)
        let q = [9.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0];
        assert!(!greedy_action(&l, &q, BucketState(1)));
        assert!(greedy_action(&l, &q, BucketState(2)));
        assert!(!greedy_action(&l, &q, BucketState(3)));
        assert!(!greedy_action(&l, &q, BucketState(4)));
    }
}

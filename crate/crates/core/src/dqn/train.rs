use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{Dense, Gradients};
use super::{encode_gap, fill_targets, Architecture, QNetwork, Segment};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::token_bucket::BucketParams;
use crate::trace_gen::{rng_for, TraceEntry};

const SAMPLE_STREAM: u64 = 3;
/// Rows per gradient work item. Fixed so that results do not depend on the
/// number of worker threads.
const CHUNK_ROWS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub segments_per_sync: usize,
    pub sync_count: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// History window length `T`.
    pub window: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub gap_clip: u32,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            gamma: 0.99,
            segments_per_sync: 1 << 12,
            sync_count: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            window: arch.window,
            hidden_layers: arch.hidden_layers,
            hidden_units: arch.hidden_units,
            gap_clip: arch.gap_clip,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            window: self.window,
            hidden_layers: self.hidden_layers,
            hidden_units: self.hidden_units,
            gap_clip: self.gap_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.segments_per_sync == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "segments_per_sync and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam with the usual `(0.9, 0.999, 1e-8)` moments.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &QNetwork, learning_rate: f64) -> Self {
        let zeros = Gradients::zeros_like(net).layers;
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, net: &mut QNetwork, grads: &Gradients) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let (lr, eps) = (self.learning_rate, self.eps);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, m), v), g) in net
            .layers_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(&grads.layers)
        {
            Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

/// The training trace with zero-padded, pre-encoded columns so segment
/// inputs can be copied straight into batch matrices.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<'a> {
    trace: &'a [TraceEntry],
    window: usize,
    enc_gaps: Vec<f64>,
    metrics: Vec<f64>,
}

impl<'a> ReplayBuffer<'a> {
    pub fn new(trace: &'a [TraceEntry], arch: Architecture) -> Result<Self> {
        arch.validate()?;
        if trace.len() < 2 {
            return Err(Error::Empty("replay buffer needs at least two arrivals"));
        }
        Self::padded(trace, arch)
    }

    /// Padded columns without the two-arrival requirement of training.
    pub(crate) fn padded(trace: &'a [TraceEntry], arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let pad = arch.window - 1;
        let mut enc_gaps = vec![0.0; pad];
        let mut metrics = vec![0.0; pad];
        enc_gaps.extend(trace.iter().map(|e| encode_gap(e.gap, arch.gap_clip)));
        metrics.extend(trace.iter().map(|e| e.metric));
        Ok(Self {
            trace,
            window: arch.window,
            enc_gaps,
            metrics,
        })
    }

    /// Valid segment ends are `1..len`.
    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.is_empty()
    }

    pub fn segment(&self, end: usize) -> Segment {
        Segment::ending_at(self.trace, end, self.window)
    }

    /// Encoded window of `T - 1` entries ending at `trace[end]`.
    fn fill_row(&self, end: usize, row: &mut [f64]) {
        let n = self.window - 1;
        // padded index of trace[i] is i + n, so the window starts at end + 1
        let start = end + 1;
        row[..n].copy_from_slice(&self.enc_gaps[start..start + n]);
        row[n..2 * n].copy_from_slice(&self.metrics[start..start + n]);
    }

    /// Encoded network inputs for the windows ending at each index in
    /// `ends`, one row per index.
    pub fn inputs(&self, ends: std::ops::Range<usize>) -> Array2<f64> {
        let mut x = Array2::zeros((ends.len(), 2 * (self.window - 1)));
        for (r, end) in ends.enumerate() {
            self.fill_row(end, x.row_mut(r).as_slice_mut().expect("standard layout"));
        }
        x
    }

    fn batch(&self, ends: &[usize]) -> Batch {
        let width = 2 * (self.window - 1);
        let mut x = Array2::zeros((ends.len(), width));
        let mut x_next = Array2::zeros((ends.len(), width));
        for (r, &end) in ends.iter().enumerate() {
            self.fill_row(end - 1, x.row_mut(r).as_slice_mut().expect("standard layout"));
            self.fill_row(end, x_next.row_mut(r).as_slice_mut().expect("standard layout"));
        }
        Batch {
            x,
            x_next,
            rewards: ends.iter().map(|&e| self.trace[e - 1].reward as f64).collect(),
            next_gaps: ends.iter().map(|&e| self.trace[e].gap).collect(),
        }
    }
}

struct Batch {
    x: Array2<f64>,
    x_next: Array2<f64>,
    rewards: Vec<f64>,
    next_gaps: Vec<u32>,
}

impl Batch {
    fn from_segments(segments: &[Segment], arch: Architecture) -> Self {
        let width = arch.input_width();
        let mut x = Array2::zeros((segments.len(), width));
        let mut x_next = Array2::zeros((segments.len(), width));
        for (r, seg) in segments.iter().enumerate() {
            seg.x()
                .encode_into(arch.gap_clip, x.row_mut(r).as_slice_mut().expect("standard layout"));
            seg.x_next()
                .encode_into(arch.gap_clip, x_next.row_mut(r).as_slice_mut().expect("standard layout"));
        }
        Self {
            x,
            x_next,
            rewards: segments.iter().map(Segment::reward).collect(),
            next_gaps: segments.iter().map(Segment::next_gap).collect(),
        }
    }
}

/// Gradient of the batch-mean squared error for one chunk, plus the chunk's
/// summed squared error. `total_rows` is the size of the whole batch.
fn chunk_gradient(
    net: &QNetwork,
    target: &QNetwork,
    batch: Batch,
    gamma: f64,
    total_rows: usize,
) -> (Gradients, f64) {
    let layout = net.layout();
    let q_next = target.forward_batch(batch.x_next.view());
    let mut targets = Array2::zeros(q_next.raw_dim());
    for (r, mut row) in targets.rows_mut().into_iter().enumerate() {
        fill_targets(
            &layout,
            q_next.row(r).as_slice().expect("standard layout"),
            batch.rewards[r],
            batch.next_gaps[r],
            gamma,
            row.as_slice_mut().expect("standard layout"),
        );
    }
    let cache = net.forward_cached(batch.x);
    let residual = cache.output() - &targets;
    let sq_sum: f64 = residual.iter().map(|d| d * d).sum();
    let scale = 2.0 / (total_rows * layout.len()) as f64;
    let grads = net.backward(&cache, residual * scale);
    (grads, sq_sum)
}

fn batch_gradient<C, B>(
    net: &QNetwork,
    target: &QNetwork,
    chunks: &[C],
    build: B,
    gamma: f64,
    total_rows: usize,
    exec: Execution,
) -> (Gradients, f64)
where
    C: Sync,
    B: Fn(&C) -> Batch + Sync + Send,
{
    let parts = exec.map(chunks, |c| chunk_gradient(net, target, build(c), gamma, total_rows));
    let mut iter = parts.into_iter();
    let (mut grads, mut sq) = iter.next().expect("at least one chunk");
    for (g, s) in iter {
        grads.add_assign(&g);
        sq += s;
    }
    let loss = sq / (total_rows * net.output_width()) as f64;
    (grads, loss)
}

fn check_segments(segments: &[Segment], arch: Architecture) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    for seg in segments {
        if seg.window() != arch.window {
            return Err(Error::Dimension {
                expected: arch.window,
                actual: seg.window(),
            });
        }
        if seg.next_gap() == 0 {
            return Err(Error::InvalidConfig("segment ends on a padding entry".into()));
        }
    }
    Ok(())
}

/// One optimiser step on the mean squared error between the network's
/// outputs on `X` and the bootstrap targets from `target` on `X'`, over all
/// output indices of all segments. Returns the pre-step loss.
pub fn train_step(
    net: &mut QNetwork,
    target: &QNetwork,
    segments: &[Segment],
    cfg: &TrainerConfig,
    optimizer: &mut Adam,
) -> Result<f64> {
    let arch = net.architecture();
    check_segments(segments, arch)?;
    let chunks: Vec<&[Segment]> = segments.chunks(CHUNK_ROWS).collect();
    let (grads, loss) = batch_gradient(
        net,
        target,
        &chunks,
        |c| Batch::from_segments(c, arch),
        cfg.gamma,
        segments.len(),
        Execution::default(),
    );
    if !loss.is_finite() {
        return Err(Error::Divergence {
            sync: 0,
            step: 0,
            loss,
        });
    }
    optimizer.step(net, &grads);
    Ok(loss)
}

/// Loss and gradient without updating anything. Used by gradient checks.
pub fn loss_and_gradient(
    net: &QNetwork,
    target: &QNetwork,
    segments: &[Segment],
    gamma: f64,
) -> Result<(f64, Gradients)> {
    let arch = net.architecture();
    check_segments(segments, arch)?;
    let (g, loss) = batch_gradient(
        net,
        target,
        &[segments],
        |c| Batch::from_segments(c, arch),
        gamma,
        segments.len(),
        Execution::Sequential,
    );
    Ok((loss, g))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: QNetwork,
    /// Mean training loss of each sync interval.
    pub loss_history: Vec<f64>,
}

pub fn train(trace: &[TraceEntry], params: BucketParams, cfg: &TrainerConfig) -> Result<TrainOutcome> {
    train_with(trace, params, cfg, Execution::default(), |_, _| {})
}

/// Runs `sync_count` target-network intervals of `segments_per_sync`
/// uniformly sampled segments each. `progress` is called after every sync
/// with the sync index and its mean loss.
pub fn train_with(
    trace: &[TraceEntry],
    params: BucketParams,
    cfg: &TrainerConfig,
    exec: Execution,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = cfg.architecture();
    let buffer = ReplayBuffer::new(trace, arch)?;
    let mut net = QNetwork::new(arch, params, cfg.seed)?;
    let mut optimizer = Adam::new(&net, cfg.learning_rate);
    let mut rng = rng_for(cfg.seed, SAMPLE_STREAM);
    let mut loss_history = Vec::with_capacity(cfg.sync_count);
    let mut ends = Vec::with_capacity(cfg.batch_size);
    for sync in 0..cfg.sync_count {
        let target = net.clone();
        let mut remaining = cfg.segments_per_sync;
        let mut weighted = 0.0;
        let mut step = 0;
        while remaining > 0 {
            let rows = remaining.min(cfg.batch_size);
            remaining -= rows;
            ends.clear();
            ends.extend((0..rows).map(|_| rng.random_range(1..buffer.len())));
            let chunks: Vec<&[usize]> = ends.chunks(CHUNK_ROWS).collect();
            let (grads, loss) = batch_gradient(
                &net,
                &target,
                &chunks,
                |c| buffer.batch(c),
                cfg.gamma,
                rows,
                exec,
            );
            if !loss.is_finite() {
                return Err(Error::Divergence { sync, step, loss });
            }
            optimizer.step(&mut net, &grads);
            weighted += loss * rows as f64;
            step += 1;
        }
        let mean = weighted / cfg.segments_per_sync as f64;
        loss_history.push(mean);
        progress(sync, mean);
    }
    Ok(TrainOutcome { net, loss_history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dqn::HistoryWindow;

    fn small_cfg() -> TrainerConfig {
        TrainerConfig {
            gamma: 0.9,
            segments_per_sync: 64,
            sync_count: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            window: 4,
            hidden_layers: 2,
            hidden_units: 8,
            gap_clip: 8,
            seed: 5,
        }
    }

    fn small_trace(n: usize) -> Vec<TraceEntry> {
        (0..n)
            .map(|i| TraceEntry {
                gap: 1 + (i % 3) as u32,
                metric: ((i * 37) % 11) as f64 / 10.0 - 0.5,
                reward: ((i * 7) % 3) as i8 - 1,
                weak_loss: (i % 2) as u8,
            })
            .collect()
    }

    fn params() -> BucketParams {
        BucketParams::new(1, 2, 4).unwrap()
    }

    #[test]
    fn replay_rows_match_history_windows() {
        let trace = small_trace(10);
        let cfg = small_cfg();
        let buf = ReplayBuffer::new(&trace, cfg.architecture()).unwrap();
        let batch = buf.batch(&[1, 2, 9]);
        for (r, &end) in [1usize, 2, 9].iter().enumerate() {
            let seg = buf.segment(end);
            let mut x = vec![0.0; 6];
            seg.x().encode_into(8, &mut x);
            assert_eq!(batch.x.row(r).to_vec(), x);
            assert_eq!(
                seg.x(),
                HistoryWindow::ending_at(&trace, end - 1, 3),
            );
            assert_eq!(batch.rewards[r], trace[end - 1].reward as f64);
            assert_eq!(batch.next_gaps[r], trace[end].gap);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let trace = small_trace(40);
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.0;
        let mut net = QNetwork::new(cfg.architecture(), params(), 1).unwrap();
        let before = net.clone();
        let target = net.clone();
        let segs: Vec<_> = (1..9).map(|e| Segment::ending_at(&trace, e, 4)).collect();
        let mut opt = Adam::new(&net, 0.0);
        let loss = train_step(&mut net, &target, &segs, &cfg, &mut opt).unwrap();
        assert!(loss > 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn zero_syncs_returns_initial_net() {
        let trace = small_trace(30);
        let mut cfg = small_cfg();
        cfg.sync_count = 0;
        let out = train(&trace, params(), &cfg).unwrap();
        assert_eq!(out.net, QNetwork::new(cfg.architecture(), params(), cfg.seed).unwrap());
        assert!(out.loss_history.is_empty());
    }

    #[test]
    fn training_is_deterministic_across_execution_modes() {
        let trace = small_trace(200);
        let cfg = small_cfg();
        let a = train_with(&trace, params(), &cfg, Execution::Sequential, |_, _| {}).unwrap();
        let b = train_with(&trace, params(), &cfg, Execution::Parallel, |_, _| {}).unwrap();
        let c = train(&trace, params(), &cfg).unwrap();
        assert_eq!(a.net.to_bytes(), b.net.to_bytes());
        assert_eq!(a.net.to_bytes(), c.net.to_bytes());
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.loss_history.len(), 3);
    }

    #[test]
    fn short_traces_are_rejected() {
        let cfg = small_cfg();
        assert!(train(&small_trace(1), params(), &cfg).is_err());
        assert!(train(&small_trace(2), params(), &cfg).is_ok());
    }

    #[test]
    fn divergence_is_reported() {
        let trace = small_trace(50);
        let mut cfg = small_cfg();
        cfg.learning_rate = 1e300;
        cfg.sync_count = 50;
        assert!(matches!(train(&trace, params(), &cfg), Err(Error::Divergence { .. })));
    }
}

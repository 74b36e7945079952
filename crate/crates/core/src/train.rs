//! Minibatch training of both embedding heads under the alignment loss.
//!
//! Every epoch draws its sample order from its own generator stream, so a run
//! resumed from a [`TrainerState`] checkpoint replays exactly the batches an
//! uninterrupted run would have seen.
//!
//! # State checkpoint layout (`JET1`)
//!
//! ```text
//! "JET1" | version u8 = 1 | epochs_done u64
//! | visual head (JEH1 record) | sentence head (JEH1 record)
//! | visual velocity | sentence velocity   (f64 arrays in parameter order)
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::head::{EmbeddingHead, HeadGradients};
use crate::loss::{loss_backward, loss_forward_stats, mine_triplets, LossConfig, MiniBatch};
use crate::tensor::{Matrix, Rng};
use crate::ClassId;

pub const STATE_MAGIC: &[u8; 4] = b"JET1";
const STATE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Epoch interval for state checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Interleave groups so every batch holds at least two of them.
    pub balanced_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
            checkpoint_every: 0,
            balanced_batches: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub mean_loss: Vec<f64>,
    pub wall_time: Vec<Duration>,
    pub active_fraction: Vec<f64>,
}

impl TrainLog {
    pub fn epochs(&self) -> usize {
        self.mean_loss.len()
    }

    /// `epoch<TAB>mean_loss<TAB>active_fraction`, epochs numbered from `first_epoch`.
    pub fn to_lines(&self, first_epoch: usize) -> String {
        let mut out = String::new();
        for (i, (loss, active)) in self.mean_loss.iter().zip(&self.active_fraction).enumerate() {
            out.push_str(&format_log_line(first_epoch + i, *loss, *active));
            out.push('\n');
        }
        out
    }
}

pub fn format_log_line(epoch: usize, mean_loss: f64, active_fraction: f64) -> String {
    format!("{epoch}\t{mean_loss:.17e}\t{active_fraction:.6}")
}

/// Statistics of one finished epoch (1-based `epoch`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub batches: usize,
    pub wall_time: Duration,
}

/// `velocity ← momentum·velocity − lr·grad; params ← params + velocity`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dims(
            "sgd_step",
            params.len(),
            format!("grads {} / velocity {}", grads.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - learning_rate * g;
        *p += *v;
    }
    Ok(())
}

pub fn sgd_step_head(
    head: &mut EmbeddingHead,
    grads: &HeadGradients,
    velocity: &mut HeadGradients,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    if !grads.is_congruent(head) || !velocity.is_congruent(head) {
        return Err(Error::dims("sgd_step_head", "gradients shaped like the head", "mismatch"));
    }
    for ((p, g), v) in head
        .params_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(velocity.slices_mut())
    {
        sgd_step(p, g, v, learning_rate, momentum)?;
    }
    Ok(())
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub head_v: EmbeddingHead,
    pub head_s: EmbeddingHead,
    pub velocity_v: HeadGradients,
    pub velocity_s: HeadGradients,
    pub epochs_done: usize,
}

impl TrainerState {
    pub fn new(head_v: EmbeddingHead, head_s: EmbeddingHead) -> Self {
        Self {
            velocity_v: HeadGradients::zeros_like(&head_v),
            velocity_s: HeadGradients::zeros_like(&head_s),
            head_v,
            head_s,
            epochs_done: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(STATE_MAGIC);
        w.u8(STATE_VERSION);
        w.u64(self.epochs_done as u64);
        self.head_v.encode(&mut w);
        self.head_s.encode(&mut w);
        self.velocity_v.encode(&mut w);
        self.velocity_s.encode(&mut w);
        w.into_inner()
    }

    fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(STATE_MAGIC)?;
        r.version(STATE_VERSION)?;
        let epochs_done = r.u64("epochs_done")? as usize;
        let head_v = EmbeddingHead::decode(r)?;
        let head_s = EmbeddingHead::decode(r)?;
        let velocity_v = HeadGradients::decode_like(&head_v, r)?;
        let velocity_s = HeadGradients::decode_like(&head_s, r)?;
        r.finish()?;
        Ok(Self {
            head_v,
            head_s,
            velocity_v,
            velocity_s,
            epochs_done,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(&mut ByteReader::new(bytes, "<memory>"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::decode(&mut ByteReader::new(&bytes, path))
    }
}

/// Paired training features. Row `i` of both matrices belongs to `groups[i]`.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub visual: &'a Matrix,
    pub sentences: &'a Matrix,
    pub groups: &'a [ClassId],
}

impl TrainData<'_> {
    fn validate(&self, state: &TrainerState) -> Result<()> {
        let n = self.visual.rows();
        if self.sentences.rows() != n || self.groups.len() != n {
            return Err(Error::dims(
                "train_joint rows",
                format!("{n} visual rows"),
                format!("{} sentence rows / {} groups", self.sentences.rows(), self.groups.len()),
            ));
        }
        if self.visual.cols() != state.head_v.d_in() {
            return Err(Error::dims("visual head input", state.head_v.d_in(), self.visual.cols()));
        }
        if self.sentences.cols() != state.head_s.d_in() {
            return Err(Error::dims("sentence head input", state.head_s.d_in(), self.sentences.cols()));
        }
        if state.head_v.d_out() != state.head_s.d_out() {
            return Err(Error::dims("head output widths", state.head_v.d_out(), state.head_s.d_out()));
        }
        Ok(())
    }
}

/// Sample order for one epoch (0-based `epoch`).
pub fn epoch_order(groups: &[ClassId], cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let n = groups.len();
    let mut rng = Rng::with_stream(cfg.seed, epoch as u64);
    if !cfg.balanced_batches {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        return order;
    }
    let mut by_group: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut lists: Vec<Vec<usize>> = by_group.into_values().collect();
    if cfg.shuffle {
        for l in &mut lists {
            rng.shuffle(l);
        }
        rng.shuffle(&mut lists);
    }
    let mut order = Vec::with_capacity(n);
    let mut cursor = 0;
    while order.len() < n {
        for l in &lists {
            if let Some(&i) = l.get(cursor) {
                order.push(i);
            }
        }
        cursor += 1;
    }
    order
}

fn non_finite(epoch: usize, batch: usize, what: &str) -> Error {
    Error::NonFinite {
        context: format!("{what} at epoch {epoch}, batch {batch}"),
    }
}

/// Trains one epoch in place and returns its statistics.
fn run_epoch(
    state: &mut TrainerState,
    data: &TrainData<'_>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let start = Instant::now();
    let epoch = state.epochs_done + 1;
    let order = epoch_order(data.groups, cfg, state.epochs_done);
    let mut loss_sum = 0.0;
    let mut active = 0usize;
    let mut total = 0usize;
    let mut batches = 0usize;
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        if idx.len() < 2 {
            continue;
        }
        let xv = data.visual.select_rows(idx);
        let xs = data.sentences.select_rows(idx);
        let groups: Vec<ClassId> = idx.iter().map(|&i| data.groups[i]).collect();

        let (ev, trace_v) = state.head_v.forward_train(&xv)?;
        let (es, trace_s) = state.head_s.forward_train(&xs)?;
        let batch = MiniBatch::new(ev, es, groups)?;
        let triplets = mine_triplets(&batch);
        let value = loss_forward_stats(&batch, &triplets, loss_cfg)
            .map_err(|_| non_finite(epoch, b, "alignment loss"))?;
        let (dv, ds) = loss_backward(&batch, &triplets, loss_cfg).map_err(|e| match e {
            Error::NonFinite { .. } => non_finite(epoch, b, "embedding gradient"),
            other => other,
        })?;
        let (gv, _) = state.head_v.backward(&trace_v, &dv)?;
        let (gs, _) = state.head_s.backward(&trace_s, &ds)?;
        if !gv.is_finite() || !gs.is_finite() {
            return Err(non_finite(epoch, b, "head gradient"));
        }
        sgd_step_head(&mut state.head_v, &gv, &mut state.velocity_v, cfg.learning_rate, cfg.momentum)?;
        sgd_step_head(&mut state.head_s, &gs, &mut state.velocity_s, cfg.learning_rate, cfg.momentum)?;
        if state.head_v.validate().is_err() || state.head_s.validate().is_err() {
            return Err(non_finite(epoch, b, "head parameters"));
        }

        loss_sum += value.loss;
        active += value.active;
        total += value.total;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::InvalidArgument(
            "no minibatch of at least 2 samples could be formed".into(),
        ));
    }
    state.epochs_done = epoch;
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / batches as f64,
        active_fraction: if total == 0 { 0.0 } else { active as f64 / total as f64 },
        batches,
        wall_time: start.elapsed(),
    })
}

/// Continues training from `state` until `cfg.epochs` epochs are done.
///
/// `on_epoch` runs after every epoch; returning an error aborts training.
pub fn train_from<F>(
    mut state: TrainerState,
    data: TrainData<'_>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(TrainerState, TrainLog)>
where
    F: FnMut(&TrainerState, &EpochStats) -> Result<()>,
{
    loss_cfg.validate()?;
    cfg.validate()?;
    data.validate(&state)?;
    let mut log = TrainLog::default();
    while state.epochs_done < cfg.epochs {
        let stats = run_epoch(&mut state, &data, loss_cfg, cfg)?;
        log.mean_loss.push(stats.mean_loss);
        log.active_fraction.push(stats.active_fraction);
        log.wall_time.push(stats.wall_time);
        on_epoch(&state, &stats)?;
    }
    Ok((state, log))
}

/// Trains both heads from scratch and returns them with the per-epoch log.
pub fn train_joint(
    visual: &Matrix,
    sentences: &Matrix,
    groups: &[ClassId],
    head_v: EmbeddingHead,
    head_s: EmbeddingHead,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<(EmbeddingHead, EmbeddingHead, TrainLog)> {
    let data = TrainData {
        visual,
        sentences,
        groups,
    };
    let (state, log) = train_from(TrainerState::new(head_v, head_s), data, loss_cfg, train_cfg, |_, _| Ok(()))?;
    Ok((state.head_v, state.head_s, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadConfig;

    #[test]
    fn sgd_plain_step() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 + 0.1 * 1.0]);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = vec![3.0, 4.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.5, 0.9).unwrap();
        assert_eq!(p, vec![3.0, 4.0]);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn sgd_two_step_recurrence() {
        let (lr, mu) = (0.05, 0.9);
        let (p0, g1, g2) = (0.7, 1.3, -0.4);
        // v1 = −lr·g1, p1 = p0 + v1, v2 = mu·v1 − lr·g2, p2 = p1 + v2
        let v1 = -lr * g1;
        let p1 = p0 + v1;
        let v2 = mu * v1 - lr * g2;
        let p2 = p1 + v2;
        let mut p = vec![p0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g1], &mut v, lr, mu).unwrap();
        sgd_step(&mut p, &[g2], &mut v, lr, mu).unwrap();
        assert!((p[0] - p2).abs() <= 1e-12);
        assert!((v[0] - v2).abs() <= 1e-12);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        assert!(sgd_step(&mut p, &[0.0; 2], &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn balanced_order_alternates_groups() {
        let groups = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let cfg = TrainConfig {
            balanced_batches: true,
            ..Default::default()
        };
        let order = epoch_order(&groups, &cfg, 3);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        for pair in order.chunks(2) {
            assert_ne!(groups[pair[0]], groups[pair[1]]);
        }
    }

    #[test]
    fn unshuffled_order_is_identity() {
        let cfg = TrainConfig {
            shuffle: false,
            ..Default::default()
        };
        assert_eq!(epoch_order(&[1, 2, 3], &cfg, 0), vec![0, 1, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn state_round_trip() {
        let mut rng = Rng::new(1);
        let hv = EmbeddingHead::new(HeadConfig::new(4, 3), &mut rng).unwrap();
        let hs = EmbeddingHead::new(HeadConfig::new(5, 3), &mut rng).unwrap();
        let mut state = TrainerState::new(hv, hs);
        state.velocity_v.b1[0] = 0.25;
        state.epochs_done = 7;
        let bytes = state.to_bytes();
        assert_eq!(&bytes[..4], b"JET1");
        assert_eq!(TrainerState::from_bytes(&bytes).unwrap(), state);
        assert!(TrainerState::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}

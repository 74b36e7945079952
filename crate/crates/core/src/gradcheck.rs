//! Central finite-difference checks for every analytic gradient in the crate.
//!
//! Each check draws random small instances, perturbs one scalar at a time by
//! `±step` and compares `(L(θ+h) − L(θ−h)) / 2h` against the analytic value
//! using [`relative_error`]. Instances that sit within reach of a ReLU or hinge
//! kink are redrawn, since the loss is not differentiable there.

use crate::error::{Error, Result};
use crate::head::{EmbeddingHead, HeadConfig};
use crate::loss::{loss_backward, loss_forward, mine_triplets, LossConfig, MiniBatch, TripletSet};
use crate::tensor::{dot, Matrix, Rng};
use crate::zsl::{ranking_loss, ranking_loss_grad, AttributeTable, LabeledEmbeddings};
use crate::ClassId;

/// Denominator floor of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-5;
const MAX_REDRAWS: usize = 200;
const MIN_BATCH_VAR: f64 = 1e-2;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Deliberately perturb one analytic gradient entry per trial (negative control).
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub component: &'static str,
    pub trials: usize,
    pub entries_checked: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

struct Tracker {
    report: ComponentReport,
}

impl Tracker {
    fn new(component: &'static str, cfg: &GradcheckConfig) -> Self {
        Self {
            report: ComponentReport {
                component,
                trials: 0,
                entries_checked: 0,
                worst_rel_err: 0.0,
                tolerance: cfg.tolerance,
            },
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.report.entries_checked += 1;
        if e > self.report.worst_rel_err || e.is_nan() {
            self.report.worst_rel_err = if e.is_nan() { f64::INFINITY } else { e };
        }
    }
}

fn corrupt_first(values: &mut [f64], cfg: &GradcheckConfig) {
    if cfg.corrupt {
        if let Some(v) = values.first_mut() {
            *v = 1.5 * *v + 1.0;
        }
    }
}

fn central_difference<F>(value: f64, step: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let plus = eval(value + step)?;
    let minus = eval(value - step)?;
    Ok((plus - minus) / (2.0 * step))
}

fn head_loss(head: &EmbeddingHead, x: &Matrix, upstream: &Matrix) -> Result<f64> {
    let mut h = head.clone();
    let (e, _) = h.forward_train(x)?;
    Ok(dot(e.data(), upstream.data()))
}

fn random_head(rng: &mut Rng) -> Result<(EmbeddingHead, Matrix, Matrix)> {
    let d_in = 2 + rng.below(7);
    let d_hidden = 2 + rng.below(7);
    let d_out = 2 + rng.below(7);
    let batch = 2 + rng.below(3);
    for _ in 0..MAX_REDRAWS {
        let mut head = EmbeddingHead::new(HeadConfig::new(d_in, d_out).with_hidden(d_hidden), rng)?;
        for v in head.bn_gamma.iter_mut().chain(head.bn_beta.iter_mut()).chain(head.b2.iter_mut()) {
            *v += 0.5 * rng.normal();
        }
        let x = rng.normal_matrix(batch, d_in, 1.0);
        let upstream = rng.normal_matrix(batch, d_out, 1.0);
        let (_, trace) = head.clone().forward_train(&x)?;
        let near_kink = trace.hidden_pre.data().iter().any(|v| v.abs() < 1e-3);
        let dead = trace.hidden.data().iter().all(|&v| v == 0.0);
        // A nearly constant channel makes batch-norm amplify rounding noise past the tolerance.
        let flat = trace.batch_var.iter().any(|&v| v < MIN_BATCH_VAR);
        if !near_kink && !dead && !flat {
            return Ok((head, x, upstream));
        }
    }
    Err(Error::InvalidArgument("could not draw a kink-free head instance".into()))
}

/// Both heads per trial: every learnable parameter and the input gradient.
pub fn check_heads(cfg: &GradcheckConfig) -> Result<ComponentReport> {
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let mut t = Tracker::new("embedding heads", cfg);
    for _ in 0..cfg.trials {
        for _stream in 0..2 {
            let (head, x, upstream) = random_head(&mut rng)?;
            let mut work = head.clone();
            let (_, trace) = work.forward_train(&x)?;
            let (mut grads, d_input) = head.backward(&trace, &upstream)?;
            corrupt_first(&mut grads.w1.data_mut()[..], cfg);

            for (slot, analytic) in grads.slices().iter().enumerate() {
                for (i, &a) in analytic.iter().enumerate() {
                    let base = head.params()[slot][i];
                    let n = central_difference(base, cfg.step, |v| {
                        let mut h = head.clone();
                        h.params_mut()[slot][i] = v;
                        head_loss(&h, &x, &upstream)
                    })?;
                    t.record(a, n);
                }
            }
            for (i, &a) in d_input.data().iter().enumerate() {
                let n = central_difference(x.data()[i], cfg.step, |v| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] = v;
                    head_loss(&head, &xp, &upstream)
                })?;
                t.record(a, n);
            }
        }
        t.report.trials += 1;
    }
    Ok(t.report)
}

fn unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = rng.normal_matrix(rows, cols, 1.0);
    for r in 0..rows {
        let n = dot(m.row(r), m.row(r)).sqrt();
        for v in m.row_mut(r) {
            *v /= n;
        }
    }
    m
}

fn hinge_values(batch: &MiniBatch, set: &TripletSet, margin: f64) -> Vec<f64> {
    use crate::tensor::distance_unchecked as d;
    let (x, y) = (&batch.visual, &batch.sentence);
    let mut out = Vec::new();
    for t in &set.term1 {
        out.push(margin + d(x.row(t.anchor), y.row(t.positive)) - d(x.row(t.anchor), y.row(t.negative)));
    }
    for t in &set.term2 {
        out.push(margin + d(x.row(t.positive), y.row(t.anchor)) - d(x.row(t.negative), y.row(t.anchor)));
    }
    for t in &set.term3 {
        out.push(margin + d(x.row(t.anchor), x.row(t.positive)) - d(x.row(t.anchor), x.row(t.negative)));
    }
    for t in &set.term4 {
        out.push(margin + d(y.row(t.anchor), y.row(t.positive)) - d(y.row(t.anchor), y.row(t.negative)));
    }
    out
}

/// Distances are not differentiable at zero; nearby pairs wreck the central difference.
const MIN_DISTANCE: f64 = 0.05;

fn min_distance(batch: &MiniBatch) -> f64 {
    use crate::tensor::distance_unchecked as d;
    let rows: Vec<&[f64]> = batch.visual.iter_rows().chain(batch.sentence.iter_rows()).collect();
    let mut closest = f64::INFINITY;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            closest = closest.min(d(a, b));
        }
    }
    closest
}

fn random_alignment_instance(rng: &mut Rng) -> Result<(MiniBatch, TripletSet, LossConfig)> {
    let b = 3 + rng.below(6);
    let d = 2 + rng.below(5);
    loop {
        let groups: Vec<ClassId> = (0..b).map(|_| rng.below(3) as ClassId).collect();
        let batch = MiniBatch::new(unit_rows(rng, b, d), unit_rows(rng, b, d), groups)?;
        let set = mine_triplets(&batch);
        if set.is_empty() {
            continue;
        }
        // Move the margin until no hinge sits near its kink.
        for _ in 0..MAX_REDRAWS {
            let cfg = LossConfig {
                margin: rng.uniform_range(0.05, 1.0),
                lambda1: rng.uniform_range(0.5, 3.0),
                lambda2: rng.uniform_range(0.0, 1.0),
                lambda3: rng.uniform_range(0.0, 1.0),
            };
            let hinges = hinge_values(&batch, &set, cfg.margin);
            if min_distance(&batch) > MIN_DISTANCE && hinges.iter().all(|h| h.abs() > 1e-3) && hinges.iter().any(|&h| h > 0.0) {
                return Ok((batch, set, cfg));
            }
        }
    }
}

/// The four-term alignment loss with respect to every embedding entry.
pub fn check_alignment_loss(cfg: &GradcheckConfig) -> Result<ComponentReport> {
    let mut rng = Rng::with_stream(cfg.seed, 2);
    let mut t = Tracker::new("alignment loss", cfg);
    for _ in 0..cfg.trials {
        let (batch, set, loss_cfg) = random_alignment_instance(&mut rng)?;
        let (mut dv, ds) = loss_backward(&batch, &set, &loss_cfg)?;
        corrupt_first(dv.data_mut(), cfg);
        for (which, analytic) in [(0, &dv), (1, &ds)] {
            for (i, &a) in analytic.data().iter().enumerate() {
                let base = if which == 0 { batch.visual.data()[i] } else { batch.sentence.data()[i] };
                let n = central_difference(base, cfg.step, |v| {
                    let mut p = batch.clone();
                    let m = if which == 0 { &mut p.visual } else { &mut p.sentence };
                    m.data_mut()[i] = v;
                    loss_forward(&p, &set, &loss_cfg)
                })?;
                t.record(a, n);
            }
        }
        t.report.trials += 1;
    }
    Ok(t.report)
}

fn random_ranking_instance(rng: &mut Rng) -> Result<(Matrix, LabeledEmbeddings, AttributeTable, f64)> {
    let d_embed = 2 + rng.below(7);
    let d_attr = 2 + rng.below(7);
    let classes = 2 + rng.below(4);
    let n = 3 + rng.below(6);
    let table = AttributeTable::new(
        (0..classes as ClassId).collect(),
        rng.normal_matrix(classes, d_attr, 1.0),
        (0..classes as ClassId).collect(),
        Default::default(),
    )?;
    let w = rng.normal_matrix(d_embed, d_attr, 0.5);
    let labels: Vec<ClassId> = (0..n).map(|_| rng.below(classes) as ClassId).collect();
    let data = LabeledEmbeddings::new(rng.normal_matrix(n, d_embed, 1.0), labels)?;
    for _ in 0..MAX_REDRAWS {
        let margin = rng.uniform_range(0.05, 1.0);
        let mut ok = true;
        let mut any_active = false;
        for (x, &y) in data.embeddings.iter_rows().zip(&data.labels) {
            let score = |c: ClassId| {
                let a = table.attribute(c).expect("class exists");
                (0..d_embed).map(|r| x[r] * dot(w.row(r), a)).sum::<f64>()
            };
            let sy = score(y);
            for c in 0..classes as ClassId {
                if c != y {
                    let h = margin + score(c) - sy;
                    ok &= h.abs() > 1e-3;
                    any_active |= h > 0.0;
                }
            }
        }
        if ok && any_active {
            return Ok((w, data, table, margin));
        }
    }
    Err(Error::InvalidArgument("could not draw a kink-free ranking instance".into()))
}

/// The compatibility ranking loss with respect to `W`.
pub fn check_ranking_loss(cfg: &GradcheckConfig) -> Result<ComponentReport> {
    let mut rng = Rng::with_stream(cfg.seed, 3);
    let mut t = Tracker::new("ranking loss", cfg);
    let mut done = 0;
    while done < cfg.trials {
        let Ok((w, data, table, margin)) = random_ranking_instance(&mut rng) else {
            continue;
        };
        let (_, mut grad) = ranking_loss_grad(&w, &data, &table, margin)?;
        corrupt_first(grad.data_mut(), cfg);
        for (i, &a) in grad.data().iter().enumerate() {
            let n = central_difference(w.data()[i], cfg.step, |v| {
                let mut wp = w.clone();
                wp.data_mut()[i] = v;
                ranking_loss(&wp, &data, &table, margin)
            })?;
            t.record(a, n);
        }
        done += 1;
        t.report.trials += 1;
    }
    Ok(t.report)
}

pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<ComponentReport>> {
    Ok(vec![check_heads(cfg)?, check_alignment_loss(cfg)?, check_ranking_loss(cfg)?])
}

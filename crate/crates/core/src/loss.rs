//! Structure-preserving alignment loss over one minibatch of paired embeddings.
//!
//! Four hinge families share the margin `m` and the Euclidean distance `d`:
//!
//! | term | anchor            | positive          | negative          | weight |
//! |------|-------------------|-------------------|-------------------|--------|
//! | 1    | image `x_i`       | sentence `y_j`    | sentence `y_k`    | 1      |
//! | 2    | sentence `y_i'`   | image `x_j'`      | image `x_k'`      | λ₁     |
//! | 3    | image `x_i`       | image `x_j`, j≠i  | image `x_k`       | λ₂     |
//! | 4    | sentence `y_i'`   | sentence `y_j'`   | sentence `y_k'`   | λ₃     |
//!
//! Each contributes `max(0, m + d(anchor, positive) − d(anchor, negative))`.
//! Positives share the anchor's group id, negatives do not, and triplets never
//! leave the minibatch.

use crate::error::{Error, Result};
use crate::tensor::{distance_unchecked, Matrix};

pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_LAMBDA1: f64 = 2.0;
pub const DEFAULT_LAMBDA2: f64 = 0.1;
pub const DEFAULT_LAMBDA3: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            lambda3: DEFAULT_LAMBDA3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletSet {
    /// image anchor, positive sentence, negative sentence
    pub term1: Vec<Triplet>,
    /// sentence anchor, positive image, negative image
    pub term2: Vec<Triplet>,
    /// image-only neighborhood triplets
    pub term3: Vec<Triplet>,
    /// sentence-only neighborhood triplets
    pub term4: Vec<Triplet>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.term1.len() + self.term2.len() + self.term3.len() + self.term4.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn max_index(&self) -> Option<usize> {
        [&self.term1, &self.term2, &self.term3, &self.term4]
            .iter()
            .flat_map(|t| t.iter())
            .map(|t| t.anchor.max(t.positive).max(t.negative))
            .max()
    }
}

/// Paired embeddings of one minibatch. Row `i` of both matrices belongs to `groups[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub visual: Matrix,
    pub sentence: Matrix,
    pub groups: Vec<u32>,
}

impl MiniBatch {
    pub fn new(visual: Matrix, sentence: Matrix, groups: Vec<u32>) -> Result<Self> {
        if visual.rows() != sentence.rows() || visual.rows() != groups.len() {
            return Err(Error::dims(
                "MiniBatch rows",
                format!("{} rows everywhere", visual.rows()),
                format!("sentence {} / groups {}", sentence.rows(), groups.len()),
            ));
        }
        if visual.cols() != sentence.cols() {
            return Err(Error::dims("MiniBatch embedding width", visual.cols(), sentence.cols()));
        }
        Ok(Self {
            visual,
            sentence,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Enumerates every valid triplet of all four families, lexicographic in (anchor, positive, negative).
pub fn mine_triplets(batch: &MiniBatch) -> TripletSet {
    let g = &batch.groups;
    let n = g.len();
    let mut set = TripletSet::default();
    for i in 0..n {
        for j in 0..n {
            if g[j] != g[i] {
                continue;
            }
            for k in 0..n {
                if g[k] == g[i] {
                    continue;
                }
                let t = Triplet::new(i, j, k);
                set.term1.push(t);
                set.term2.push(t);
                if j != i {
                    set.term3.push(t);
                    set.term4.push(t);
                }
            }
        }
    }
    set
}

#[derive(Debug, Clone, Copy)]
enum Space {
    /// anchor visual, others sentence
    VisualToSentence,
    /// anchor sentence, others visual
    SentenceToVisual,
    VisualOnly,
    SentenceOnly,
}

struct Term<'a> {
    name: &'static str,
    triplets: &'a [Triplet],
    weight: f64,
    space: Space,
}

fn terms<'a>(triplets: &'a TripletSet, cfg: &LossConfig) -> [Term<'a>; 4] {
    [
        Term {
            name: "term1",
            triplets: &triplets.term1,
            weight: 1.0,
            space: Space::VisualToSentence,
        },
        Term {
            name: "term2",
            triplets: &triplets.term2,
            weight: cfg.lambda1,
            space: Space::SentenceToVisual,
        },
        Term {
            name: "term3",
            triplets: &triplets.term3,
            weight: cfg.lambda2,
            space: Space::VisualOnly,
        },
        Term {
            name: "term4",
            triplets: &triplets.term4,
            weight: cfg.lambda3,
            space: Space::SentenceOnly,
        },
    ]
}

/// Pairwise distance tables: visual–sentence, visual–visual and sentence–sentence.
struct Distances {
    n: usize,
    vs: Vec<f64>,
    vv: Vec<f64>,
    ss: Vec<f64>,
}

impl Distances {
    fn new(batch: &MiniBatch) -> Self {
        let n = batch.len();
        let table = |a: &Matrix, b: &Matrix| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = distance_unchecked(a.row(i), b.row(j));
                }
            }
            out
        };
        Self {
            n,
            vs: table(&batch.visual, &batch.sentence),
            vv: table(&batch.visual, &batch.visual),
            ss: table(&batch.sentence, &batch.sentence),
        }
    }

    /// (d(anchor, positive), d(anchor, negative))
    fn pair(&self, space: Space, t: &Triplet) -> (f64, f64) {
        let n = self.n;
        let (a, p, q) = (t.anchor, t.positive, t.negative);
        match space {
            Space::VisualToSentence => (self.vs[a * n + p], self.vs[a * n + q]),
            Space::SentenceToVisual => (self.vs[p * n + a], self.vs[q * n + a]),
            Space::VisualOnly => (self.vv[a * n + p], self.vv[a * n + q]),
            Space::SentenceOnly => (self.ss[a * n + p], self.ss[a * n + q]),
        }
    }
}

fn check_indices(batch: &MiniBatch, triplets: &TripletSet) -> Result<()> {
    if let Some(max) = triplets.max_index() {
        if max >= batch.len() {
            return Err(Error::IndexOutOfRange {
                index: max,
                len: batch.len(),
            });
        }
    }
    Ok(())
}

/// Loss value and number of active (strictly positive) hinge terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub active: usize,
    pub total: usize,
}

pub fn loss_forward(batch: &MiniBatch, triplets: &TripletSet, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_forward_stats(batch, triplets, cfg)?.loss)
}

pub fn loss_forward_stats(
    batch: &MiniBatch,
    triplets: &TripletSet,
    cfg: &LossConfig,
) -> Result<LossValue> {
    check_indices(batch, triplets)?;
    let dist = Distances::new(batch);
    let mut loss = 0.0;
    let mut active = 0;
    for term in terms(triplets, cfg) {
        let mut sum = 0.0;
        for t in term.triplets {
            let (dp, dn) = dist.pair(term.space, t);
            let h = cfg.margin + dp - dn;
            if h > 0.0 {
                sum += h;
                active += 1;
            }
        }
        loss += term.weight * sum;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "alignment loss".into(),
        });
    }
    Ok(LossValue {
        loss,
        active,
        total: triplets.len(),
    })
}

/// Gradients of the loss with respect to every visual and sentence embedding row.
///
/// Tight hinges (value exactly 0) are treated as inactive.
pub fn loss_backward(
    batch: &MiniBatch,
    triplets: &TripletSet,
    cfg: &LossConfig,
) -> Result<(Matrix, Matrix)> {
    check_indices(batch, triplets)?;
    let n = batch.len();
    let dist = Distances::new(batch);
    // Coefficient tables: grad of Σ c·d(a, b) accumulated per distance pair.
    let mut c_vs = vec![0.0; n * n];
    let mut c_vv = vec![0.0; n * n];
    let mut c_ss = vec![0.0; n * n];
    for term in terms(triplets, cfg) {
        if term.weight == 0.0 {
            continue;
        }
        for t in term.triplets {
            let (dp, dn) = dist.pair(term.space, t);
            if cfg.margin + dp - dn <= 0.0 {
                continue;
            }
            if dp == 0.0 || dn == 0.0 {
                return Err(Error::ZeroDistance { term: term.name });
            }
            let (a, p, q) = (t.anchor, t.positive, t.negative);
            let w = term.weight;
            match term.space {
                Space::VisualToSentence => {
                    c_vs[a * n + p] += w;
                    c_vs[a * n + q] -= w;
                }
                Space::SentenceToVisual => {
                    c_vs[p * n + a] += w;
                    c_vs[q * n + a] -= w;
                }
                Space::VisualOnly => {
                    c_vv[a * n + p] += w;
                    c_vv[a * n + q] -= w;
                }
                Space::SentenceOnly => {
                    c_ss[a * n + p] += w;
                    c_ss[a * n + q] -= w;
                }
            }
        }
    }

    let d = batch.visual.cols();
    let mut d_visual = Matrix::zeros(n, d);
    let mut d_sentence = Matrix::zeros(n, d);
    let x = &batch.visual;
    let y = &batch.sentence;
    for i in 0..n {
        for j in 0..n {
            let c = c_vs[i * n + j];
            if c != 0.0 {
                let s = c / dist.vs[i * n + j];
                for f in 0..d {
                    let g = s * (x.get(i, f) - y.get(j, f));
                    d_visual.row_mut(i)[f] += g;
                    d_sentence.row_mut(j)[f] -= g;
                }
            }
            let c = c_vv[i * n + j];
            if c != 0.0 {
                let s = c / dist.vv[i * n + j];
                for f in 0..d {
                    let g = s * (x.get(i, f) - x.get(j, f));
                    d_visual.row_mut(i)[f] += g;
                    d_visual.row_mut(j)[f] -= g;
                }
            }
            let c = c_ss[i * n + j];
            if c != 0.0 {
                let s = c / dist.ss[i * n + j];
                for f in 0..d {
                    let g = s * (y.get(i, f) - y.get(j, f));
                    d_sentence.row_mut(i)[f] += g;
                    d_sentence.row_mut(j)[f] -= g;
                }
            }
        }
    }
    if !d_visual.is_finite() || !d_sentence.is_finite() {
        return Err(Error::NonFinite {
            context: "alignment loss gradient".into(),
        });
    }
    Ok((d_visual, d_sentence))
}

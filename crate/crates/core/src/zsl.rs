//! Bilinear compatibility backbone for zero-shot classification.
//!
//! Scores are `s(x, a) = xᵀ·W·a`. Training minimizes the multiclass hinge
//! ranking risk over seen classes
//!
//! ```text
//! Σᵢ Σ_{c ∈ seen, c ≠ cᵢ} max(0, Δ + s(xᵢ, a_c) − s(xᵢ, a_{cᵢ}))
//! ```
//!
//! and prediction takes the argmax of `s` over the candidate classes of the
//! chosen regime. Ties go to the lowest class id.
//!
//! # Model layout (`JEC1`)
//!
//! ```text
//! "JEC1" | version u8 = 1 | d_embed u32 | d_attr u32
//! | margin f64 | learning_rate f64 | epochs u64 | seed u64 | W (d_embed·d_attr f64)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, Rng};
use crate::ClassId;

pub const MODEL_MAGIC: &[u8; 4] = b"JEC1";
const MODEL_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    class_ids: Vec<ClassId>,
    attributes: Matrix,
    seen: BTreeSet<ClassId>,
    unseen: BTreeSet<ClassId>,
    index: BTreeMap<ClassId, usize>,
}

impl AttributeTable {
    pub fn new(
        class_ids: Vec<ClassId>,
        attributes: Matrix,
        seen: BTreeSet<ClassId>,
        unseen: BTreeSet<ClassId>,
    ) -> Result<Self> {
        if class_ids.len() != attributes.rows() {
            return Err(Error::dims("AttributeTable rows", class_ids.len(), attributes.rows()));
        }
        let mut index = BTreeMap::new();
        for (row, &c) in class_ids.iter().enumerate() {
            if index.insert(c, row).is_some() {
                return Err(Error::Split(format!("class {c} has more than one attribute row")));
            }
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Split(format!("class {c} is both seen and unseen")));
        }
        if let Some(c) = seen.iter().chain(&unseen).find(|c| !index.contains_key(c)) {
            return Err(Error::Split(format!("class {c} has no attribute row")));
        }
        Ok(Self {
            class_ids,
            attributes,
            seen,
            unseen,
            index,
        })
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn attributes(&self) -> &Matrix {
        &self.attributes
    }

    pub fn seen(&self) -> &BTreeSet<ClassId> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<ClassId> {
        &self.unseen
    }

    pub fn d_attr(&self) -> usize {
        self.attributes.cols()
    }

    pub fn attribute(&self, class: ClassId) -> Option<&[f64]> {
        self.index.get(&class).map(|&r| self.attributes.row(r))
    }

    pub fn candidates(&self, regime: Regime) -> BTreeSet<ClassId> {
        match regime {
            Regime::Zsl => self.unseen.clone(),
            Regime::Gzsl => self.seen.union(&self.unseen).copied().collect(),
        }
    }

    /// Same table with every attribute row multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            attributes: self.attributes.scale(factor),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Candidates are the unseen classes only.
    Zsl,
    /// Candidates are seen and unseen classes.
    Gzsl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub embeddings: Matrix,
    pub labels: Vec<ClassId>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: Matrix, labels: Vec<ClassId>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::dims("LabeledEmbeddings", embeddings.rows(), labels.len()));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompatConfig {
    /// Ranking margin Δ.
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CompatConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            learning_rate: 0.01,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityModel {
    /// `d_embed × d_attr`
    pub w: Matrix,
    pub config: CompatConfig,
}

/// `W·a_c` for every class, keyed by class id.
fn projections(w: &Matrix, table: &AttributeTable, classes: &BTreeSet<ClassId>) -> Vec<(ClassId, Vec<f64>)> {
    classes
        .iter()
        .map(|&c| {
            let a = table.attribute(c).expect("candidate classes have attribute rows");
            let p = (0..w.rows()).map(|r| dot(w.row(r), a)).collect();
            (c, p)
        })
        .collect()
}

fn check_training_data(w: &Matrix, data: &LabeledEmbeddings, table: &AttributeTable) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    if data.embeddings.cols() != w.rows() || table.d_attr() != w.cols() {
        return Err(Error::dims(
            "compatibility training",
            format!("{}-dim embeddings and {}-dim attributes", w.rows(), w.cols()),
            format!("{} / {}", data.embeddings.cols(), table.d_attr()),
        ));
    }
    if let Some(c) = data.labels.iter().find(|c| !table.seen().contains(c)) {
        return Err(Error::Split(format!("training label {c} is not a seen class")));
    }
    Ok(())
}

/// Per-sample hinge contributions and the matching gradient, accumulated into `grad`.
fn sample_loss(
    x: &[f64],
    label: ClassId,
    proj: &[(ClassId, Vec<f64>)],
    table: &AttributeTable,
    margin: f64,
    grad: Option<&mut Matrix>,
) -> f64 {
    let true_proj = &proj.iter().find(|(c, _)| *c == label).expect("label is seen").1;
    let s_true = dot(x, true_proj);
    let a_true = table.attribute(label).expect("label has attributes");
    let mut loss = 0.0;
    let mut active = Vec::new();
    for (c, p) in proj {
        if *c == label {
            continue;
        }
        let h = margin + dot(x, p) - s_true;
        if h > 0.0 {
            loss += h;
            active.push(*c);
        }
    }
    if let Some(g) = grad {
        let d_attr = a_true.len();
        for c in active {
            let a_c = table.attribute(c).expect("seen class has attributes");
            for (r, &xr) in x.iter().enumerate() {
                let row = &mut g.data_mut()[r * d_attr..(r + 1) * d_attr];
                for k in 0..d_attr {
                    row[k] += xr * (a_c[k] - a_true[k]);
                }
            }
        }
    }
    loss
}

/// Total ranking risk of `w` over `data`.
pub fn ranking_loss(w: &Matrix, data: &LabeledEmbeddings, table: &AttributeTable, margin: f64) -> Result<f64> {
    Ok(ranking_loss_grad(w, data, table, margin)?.0)
}

/// Ranking risk and its gradient with respect to `w`. Tight hinges count as inactive.
pub fn ranking_loss_grad(
    w: &Matrix,
    data: &LabeledEmbeddings,
    table: &AttributeTable,
    margin: f64,
) -> Result<(f64, Matrix)> {
    check_training_data(w, data, table)?;
    let proj = projections(w, table, table.seen());
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    let mut loss = 0.0;
    for (x, &y) in data.embeddings.iter_rows().zip(&data.labels) {
        loss += sample_loss(x, y, &proj, table, margin, Some(&mut grad));
    }
    Ok((loss, grad))
}

/// Per-sample SGD on the ranking risk, starting from `W = 0`.
pub fn train_compatibility(
    data: &LabeledEmbeddings,
    table: &AttributeTable,
    config: CompatConfig,
) -> Result<CompatibilityModel> {
    if !(config.margin > 0.0) || !(config.learning_rate >= 0.0) {
        return Err(Error::InvalidArgument(
            "compatibility margin must be positive and learning rate non-negative".into(),
        ));
    }
    let mut w = Matrix::zeros(data.embeddings.cols(), table.d_attr());
    check_training_data(&w, data, table)?;
    let n = data.len();
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::with_stream(config.seed, epoch as u64).shuffle(&mut order);
        for i in order {
            let proj = projections(&w, table, table.seen());
            grad.data_mut().fill(0.0);
            let loss = sample_loss(data.embeddings.row(i), data.labels[i], &proj, table, config.margin, Some(&mut grad));
            if loss > 0.0 {
                for (p, g) in w.data_mut().iter_mut().zip(grad.data()) {
                    *p -= config.learning_rate * g;
                }
            }
        }
        if !w.is_finite() {
            return Err(Error::NonFinite {
                context: format!("compatibility weights after epoch {}", epoch + 1),
            });
        }
    }
    Ok(CompatibilityModel { w, config })
}

impl CompatibilityModel {
    pub fn d_embed(&self) -> usize {
        self.w.rows()
    }

    pub fn d_attr(&self) -> usize {
        self.w.cols()
    }

    pub fn score(&self, x: &[f64], a: &[f64]) -> f64 {
        let mut s = 0.0;
        for (r, &xr) in x.iter().enumerate() {
            s += xr * dot(self.w.row(r), a);
        }
        s
    }

    fn check_dims(&self, d_x: usize, table: &AttributeTable) -> Result<()> {
        if d_x != self.d_embed() {
            return Err(Error::dims("infer embedding width", self.d_embed(), d_x));
        }
        if table.d_attr() != self.d_attr() {
            return Err(Error::dims("infer attribute width", self.d_attr(), table.d_attr()));
        }
        Ok(())
    }

    /// Argmax class over the regime's candidates; ties resolve to the lowest id.
    pub fn infer(&self, x: &[f64], table: &AttributeTable, regime: Regime) -> Result<ClassId> {
        Ok(self.predict(&Matrix::from_vec(1, x.len(), x.to_vec())?, table, regime)?[0])
    }

    pub fn predict(&self, xs: &Matrix, table: &AttributeTable, regime: Regime) -> Result<Vec<ClassId>> {
        self.check_dims(xs.cols(), table)?;
        let candidates = table.candidates(regime);
        if candidates.is_empty() {
            return Err(Error::InvalidArgument(format!("no candidate classes for {regime:?}")));
        }
        let proj = projections(&self.w, table, &candidates);
        Ok(xs
            .iter_rows()
            .map(|x| {
                let mut best = (proj[0].0, dot(x, &proj[0].1));
                for (c, p) in &proj[1..] {
                    let s = dot(x, p);
                    if s > best.1 {
                        best = (*c, s);
                    }
                }
                best.0
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u8(MODEL_VERSION);
        w.u32(self.d_embed() as u32);
        w.u32(self.d_attr() as u32);
        w.f64(self.config.margin);
        w.f64(self.config.learning_rate);
        w.u64(self.config.epochs as u64);
        w.u64(self.config.seed);
        w.f64s(self.w.data());
        w.into_inner()
    }

    fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(MODEL_MAGIC)?;
        r.version(MODEL_VERSION)?;
        let d_embed = r.u32("d_embed")? as usize;
        let d_attr = r.u32("d_attr")? as usize;
        let margin = r.f64("margin")?;
        let learning_rate = r.f64("learning_rate")?;
        let epochs = r.u64("epochs")? as usize;
        let seed = r.u64("seed")?;
        let w = Matrix::from_vec(d_embed, d_attr, r.f64s(d_embed * d_attr, "W")?)?;
        r.finish()?;
        Ok(Self {
            w,
            config: CompatConfig {
                margin,
                learning_rate,
                epochs,
                seed,
            },
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

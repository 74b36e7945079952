//! Seeded synthetic multimodal dataset.
//!
//! Every class owns a latent semantic code `z_c` (random unit vector of width
//! `d_attr`). From it:
//!
//! * the attribute row is `z_c`, except inside a collision group, where all
//!   members share the normalized mean of their codes, so attributes alone
//!   cannot tell them apart;
//! * the visual prototype is `normalize(V·z_c)` for a fixed random map `V`;
//!   images are the prototype plus isotropic Gaussian noise of std
//!   `cluster_spread`;
//! * the caption direction is `normalize(S·z_c)` for a second random map `S`;
//!   a caption is `caption_signal·direction + (1 − caption_signal)·shared +
//!   noise`, where `shared` is one direction common to all captions.
//!
//! Seen-class samples are split into `train` and `test_seen`; every
//! unseen-class sample is `test_unseen`.

use std::collections::BTreeSet;

use crate::data::{Assignment, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, Rng};
use crate::zsl::AttributeTable;
use crate::ClassId;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_seen: usize,
    pub samples_per_class: usize,
    pub d_visual: usize,
    pub d_sentence: usize,
    pub d_attr: usize,
    pub cluster_spread: f64,
    /// Classes inside one group receive identical attribute rows.
    pub collision_groups: Vec<Vec<ClassId>>,
    pub caption_signal: f64,
    /// Captions per image; images are repeated once per caption.
    pub captions_per_image: usize,
    /// Fraction of each seen class held out as `test_seen`.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_seen: 7,
            samples_per_class: 50,
            d_visual: 32,
            d_sentence: 24,
            d_attr: 16,
            cluster_spread: 0.3,
            collision_groups: Vec::new(),
            caption_signal: 0.9,
            captions_per_image: 1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Five tight classes of 20 pairs each, no held-out seen samples.
    pub fn separable(seed: u64) -> Self {
        Self {
            n_classes: 5,
            n_seen: 4,
            samples_per_class: 20,
            cluster_spread: 0.1,
            test_fraction: 0.0,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_seen >= self.n_classes {
            return bad(format!(
                "n_seen ({}) must be smaller than n_classes ({})",
                self.n_seen, self.n_classes
            ));
        }
        if self.n_seen == 0 {
            return bad("at least one seen class is required".into());
        }
        if self.samples_per_class == 0 || self.captions_per_image == 0 {
            return bad("samples_per_class and captions_per_image must be positive".into());
        }
        if self.d_visual < 2 || self.d_sentence < 2 || self.d_attr < 2 {
            return bad("all feature dimensions must be at least 2".into());
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return bad(format!("cluster_spread must be positive, got {}", self.cluster_spread));
        }
        if !(0.0..=1.0).contains(&self.caption_signal) {
            return bad(format!("caption_signal must lie in [0, 1], got {}", self.caption_signal));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        let mut used = BTreeSet::new();
        for g in &self.collision_groups {
            if g.len() < 2 {
                return bad("collision groups need at least two classes".into());
            }
            for &c in g {
                if c as usize >= self.n_classes {
                    return bad(format!("collision class {c} does not exist"));
                }
                if !used.insert(c) {
                    return bad(format!("class {c} appears in more than one collision slot"));
                }
            }
        }
        Ok(())
    }

    pub fn seen_classes(&self) -> BTreeSet<ClassId> {
        (0..self.n_seen as ClassId).collect()
    }

    pub fn unseen_classes(&self) -> BTreeSet<ClassId> {
        (self.n_seen as ClassId..self.n_classes as ClassId).collect()
    }
}

fn unit_vector(rng: &mut Rng, len: usize) -> Vec<f64> {
    loop {
        let v = rng.normal_vec(len);
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn apply(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|row| dot(row, v)).collect()
}

/// Generated dataset plus the generator's hidden per-class quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// Unit visual prototype per class, row `c` for class `c`.
    pub prototypes: Matrix,
    /// Latent semantic code per class.
    pub codes: Matrix,
}

/// Builds the dataset; a pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let c = cfg.n_classes;

    let codes: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(&mut rng, cfg.d_attr)).collect();
    let visual_map = rng.normal_matrix(cfg.d_visual, cfg.d_attr, 1.0);
    let caption_map = rng.normal_matrix(cfg.d_sentence, cfg.d_attr, 1.0);
    let shared = unit_vector(&mut rng, cfg.d_sentence);

    let mut attributes = codes.clone();
    for group in &cfg.collision_groups {
        let mut mean = vec![0.0; cfg.d_attr];
        for &m in group {
            for (acc, v) in mean.iter_mut().zip(&codes[m as usize]) {
                *acc += v;
            }
        }
        let n = dot(&mean, &mean).sqrt();
        let row = if n > 1e-9 {
            mean.iter().map(|v| v / n).collect()
        } else {
            codes[group[0] as usize].clone()
        };
        for &m in group {
            attributes[m as usize] = row.clone();
        }
    }

    let prototypes: Vec<Vec<f64>> = codes.iter().map(|z| normalize(apply(&visual_map, z))).collect();
    let directions: Vec<Vec<f64>> = codes.iter().map(|z| normalize(apply(&caption_map, z))).collect();

    let per_class = cfg.samples_per_class;
    let n_test_seen = ((per_class as f64) * cfg.test_fraction).round() as usize;
    let k = cfg.captions_per_image;
    let mut visual = Vec::with_capacity(c * per_class * k);
    let mut sentences = Vec::with_capacity(c * per_class * k);
    let mut labels = Vec::with_capacity(c * per_class * k);
    let mut assignment = Vec::with_capacity(c * per_class * k);
    for class in 0..c {
        let seen = class < cfg.n_seen;
        for s in 0..per_class {
            let x: Vec<f64> = prototypes[class]
                .iter()
                .map(|p| p + cfg.cluster_spread * rng.normal())
                .collect();
            let which = if !seen {
                Assignment::TestUnseen
            } else if s < per_class - n_test_seen {
                Assignment::Train
            } else {
                Assignment::TestSeen
            };
            for _ in 0..k {
                let y: Vec<f64> = directions[class]
                    .iter()
                    .zip(&shared)
                    .map(|(d, sh)| {
                        cfg.caption_signal * d
                            + (1.0 - cfg.caption_signal) * sh
                            + cfg.cluster_spread * rng.normal()
                    })
                    .collect();
                visual.push(x.clone());
                sentences.push(y);
                labels.push(class as ClassId);
                assignment.push(which);
            }
        }
    }

    let table = AttributeTable::new(
        (0..c as ClassId).collect(),
        Matrix::from_rows(&attributes)?,
        cfg.seen_classes(),
        cfg.unseen_classes(),
    )?;
    let dataset = Dataset {
        visual: Matrix::from_rows(&visual)?,
        sentences: Matrix::from_rows(&sentences)?,
        labels,
        attributes: table,
        assignment,
    };
    dataset.validate()?;
    Ok(SynthOutput {
        dataset,
        prototypes: Matrix::from_rows(&prototypes)?,
        codes: Matrix::from_rows(&codes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::distance_unchecked;

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig::default();
        assert!(SynthConfig { n_seen: 10, ..base.clone() }.validate().is_err());
        assert!(SynthConfig { d_attr: 1, ..base.clone() }.validate().is_err());
        assert!(SynthConfig { cluster_spread: 0.0, ..base.clone() }.validate().is_err());
        assert!(SynthConfig { collision_groups: vec![vec![3]], ..base.clone() }.validate().is_err());
        assert!(SynthConfig { collision_groups: vec![vec![3, 42]], ..base.clone() }.validate().is_err());
        assert!(SynthConfig { caption_signal: 1.5, ..base }.validate().is_err());
    }

    #[test]
    fn collision_rows_are_identical() {
        let cfg = SynthConfig {
            collision_groups: vec![vec![3, 8]],
            ..Default::default()
        };
        let out = generate(&cfg).unwrap();
        let t = &out.dataset.attributes;
        assert_eq!(t.attribute(3).unwrap(), t.attribute(8).unwrap());
        assert_ne!(t.attribute(2).unwrap(), t.attribute(3).unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().dataset.visual, generate(&other).unwrap().dataset.visual);
    }

    #[test]
    fn tiny_spread_makes_prototype_nn_exact() {
        let cfg = SynthConfig {
            cluster_spread: 1e-9,
            ..Default::default()
        };
        let out = generate(&cfg).unwrap();
        let ds = &out.dataset;
        for (x, &y) in ds.visual.iter_rows().zip(&ds.labels) {
            let nearest = (0..cfg.n_classes)
                .min_by(|&a, &b| {
                    distance_unchecked(x, out.prototypes.row(a))
                        .total_cmp(&distance_unchecked(x, out.prototypes.row(b)))
                })
                .unwrap();
            assert_eq!(nearest as ClassId, y);
        }
    }

    #[test]
    fn class_means_recover_prototypes() {
        let cfg = SynthConfig::default();
        let out = generate(&cfg).unwrap();
        let ds = &out.dataset;
        for class in 0..cfg.n_classes {
            let mut mean = vec![0.0; cfg.d_visual];
            let mut n = 0.0;
            for (x, &y) in ds.visual.iter_rows().zip(&ds.labels) {
                if y as usize == class {
                    for (m, v) in mean.iter_mut().zip(x) {
                        *m += v;
                    }
                    n += 1.0;
                }
            }
            let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
            let p = out.prototypes.row(class);
            let cos = dot(&mean, p) / (dot(&mean, &mean).sqrt() * dot(p, p).sqrt());
            assert!(cos >= 0.95, "class {class}: cosine {cos}");
        }
    }

    #[test]
    fn split_discipline() {
        let cfg = SynthConfig {
            captions_per_image: 3,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap().dataset;
        assert_eq!(ds.visual.rows(), 10 * 50 * 3);
        for (i, a) in ds.assignment.iter().enumerate() {
            let unseen = ds.attributes.unseen().contains(&ds.labels[i]);
            assert_eq!(unseen, *a == Assignment::TestUnseen);
        }
        // Captions of one image share its visual row but not their noise.
        assert_eq!(ds.visual.row(0), ds.visual.row(1));
        assert_ne!(ds.sentences.row(0), ds.sentences.row(1));
    }
}

//! End-to-end experiment: the same compatibility backbone trained on raw
//! visual features and on caption-grounded joint embeddings.

use crate::data::{Assignment, Dataset};
use crate::error::Result;
use crate::head::{EmbeddingHead, HeadConfig};
use crate::loss::LossConfig;
use crate::metrics::{evaluate, GzslReport};
use crate::tensor::{derive_seed, Matrix, Rng};
use crate::train::{train_joint, TrainConfig, TrainLog};
use crate::zsl::{train_compatibility, CompatConfig, LabeledEmbeddings};

/// Sub-seed offsets derived from one run seed.
/// Embedding (and hidden) width used when none is given. Narrower heads
/// often start with rows whose hidden units are all dead, which collapses
/// them onto one embedding.
pub const DEFAULT_EMBED_DIM: usize = 32;

pub const VISUAL_HEAD_SEED_OFFSET: u64 = 1;
pub const SENTENCE_HEAD_SEED_OFFSET: u64 = 2;
pub const SHUFFLE_SEED_OFFSET: u64 = 3;
pub const COMPAT_SEED_OFFSET: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub embed_dim: usize,
    pub hidden_dim: Option<usize>,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub compat: CompatConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: None,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            compat: CompatConfig::default(),
        }
    }
}

/// Freshly initialized visual and sentence heads for `seed`.
pub fn init_heads(
    d_visual: usize,
    d_sentence: usize,
    embed_dim: usize,
    hidden_dim: Option<usize>,
    seed: u64,
) -> Result<(EmbeddingHead, EmbeddingHead)> {
    let hidden = hidden_dim.unwrap_or(embed_dim);
    let hv = EmbeddingHead::new(
        HeadConfig::new(d_visual, embed_dim).with_hidden(hidden),
        &mut Rng::new(derive_seed(seed, VISUAL_HEAD_SEED_OFFSET)),
    )?;
    let hs = EmbeddingHead::new(
        HeadConfig::new(d_sentence, embed_dim).with_hidden(hidden),
        &mut Rng::new(derive_seed(seed, SENTENCE_HEAD_SEED_OFFSET)),
    )?;
    Ok((hv, hs))
}

/// Trains both heads on the `train` split of `ds`.
pub fn train_heads(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<(EmbeddingHead, EmbeddingHead, TrainLog)> {
    let (hv, hs) = init_heads(ds.visual.cols(), ds.sentences.cols(), cfg.embed_dim, cfg.hidden_dim, seed)?;
    let idx = ds.indices(Assignment::Train);
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, SHUFFLE_SEED_OFFSET),
        ..cfg.train
    };
    train_joint(
        &ds.visual.select_rows(&idx),
        &ds.sentences.select_rows(&idx),
        &ds.labels_at(&idx),
        hv,
        hs,
        &cfg.loss,
        &train_cfg,
    )
}

fn split_of(features: &Matrix, ds: &Dataset, which: Assignment) -> LabeledEmbeddings {
    let idx = ds.indices(which);
    LabeledEmbeddings {
        embeddings: features.select_rows(&idx),
        labels: ds.labels_at(&idx),
    }
}

/// Trains the backbone on the train rows of `features` and evaluates it.
pub fn backbone_report(features: &Matrix, ds: &Dataset, compat: CompatConfig) -> Result<GzslReport> {
    let train = split_of(features, ds, Assignment::Train);
    let model = train_compatibility(&train, &ds.attributes, compat)?;
    evaluate(
        &model,
        &split_of(features, ds, Assignment::TestSeen),
        &split_of(features, ds, Assignment::TestUnseen),
        &ds.attributes,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub raw: GzslReport,
    pub grounded: GzslReport,
    pub log: TrainLog,
}

/// Raw-feature arm versus joint-embedding arm on one dataset.
pub fn grounded_vs_raw(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<Comparison> {
    let compat = CompatConfig {
        seed: derive_seed(seed, COMPAT_SEED_OFFSET),
        ..cfg.compat
    };
    let raw = backbone_report(&ds.visual, ds, compat)?;
    let (head_v, _, log) = train_heads(ds, cfg, seed)?;
    let embedded = head_v.embed(&ds.visual)?;
    let grounded = backbone_report(&embedded, ds, compat)?;
    Ok(Comparison { raw, grounded, log })
}

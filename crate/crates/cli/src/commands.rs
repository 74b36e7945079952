use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use jezsl_core::data::{self, Assignment, Dataset, VISUAL_FILE};
use jezsl_core::gradcheck::{self, GradcheckConfig};
use jezsl_core::metrics::evaluate;
use jezsl_core::pipeline::{init_heads, COMPAT_SEED_OFFSET, DEFAULT_EMBED_DIM, SHUFFLE_SEED_OFFSET};
use jezsl_core::synth::{self, SynthConfig};
use jezsl_core::tensor::derive_seed;
use jezsl_core::train::{format_log_line, train_from, TrainConfig, TrainData, TrainerState};
use jezsl_core::zsl::{train_compatibility, CompatConfig, CompatibilityModel, LabeledEmbeddings};
use jezsl_core::{ClassId, EmbeddingHead, Error, LossConfig, Matrix};

use crate::settings::{manifest_beside, Settings, MANIFEST_FILE};
use crate::{CliError, EmbedArgs, EvalArgs, GenSynthArgs, GradcheckArgs, TrainEmbedArgs, TrainZslArgs};

pub const HEAD_V_FILE: &str = "head_v.jeh";
pub const HEAD_S_FILE: &str = "head_s.jeh";
pub const STATE_FILE: &str = "state.jet";
pub const LOG_FILE: &str = "train_log.tsv";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";

type CmdResult = Result<(), CliError>;

/// Collision groups as `3,4;5,6`; empty means none.
#[derive(Debug, Clone, Default, PartialEq)]
struct Groups(Vec<Vec<ClassId>>);

impl FromStr for Groups {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let group = part
                .split(',')
                .map(|id| id.trim().parse::<ClassId>().map_err(|e| format!("bad class id {id:?}: {e}")))
                .collect::<Result<Vec<_>, _>>()?;
            out.push(group);
        }
        Ok(Groups(out))
    }
}

impl fmt::Display for Groups {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|g| g.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","))
            .collect();
        f.write_str(&parts.join(";"))
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn create_parent(file: &Path) -> CmdResult {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn gen_synth(a: GenSynthArgs) -> CmdResult {
    let mut s = Settings::new("gen-synth", a.config.as_deref())?;
    let d = SynthConfig::default();
    let collide = if a.collide.is_empty() {
        None
    } else {
        Some(a.collide.join(";").parse::<Groups>().map_err(CliError::Usage)?)
    };
    let cfg = SynthConfig {
        n_classes: s.value("classes", a.classes, d.n_classes)?,
        n_seen: s.value("seen", a.seen, d.n_seen)?,
        samples_per_class: s.value("per_class", a.per_class, d.samples_per_class)?,
        d_visual: s.value("d_visual", a.d_visual, d.d_visual)?,
        d_sentence: s.value("d_sentence", a.d_sentence, d.d_sentence)?,
        d_attr: s.value("d_attr", a.d_attr, d.d_attr)?,
        cluster_spread: s.value("spread", a.spread, d.cluster_spread)?,
        collision_groups: s.value("collide", collide, Groups::default())?.0,
        caption_signal: s.value("caption_signal", a.caption_signal, d.caption_signal)?,
        captions_per_image: s.value("captions_per_image", a.captions_per_image, d.captions_per_image)?,
        test_fraction: s.value("test_fraction", a.test_fraction, d.test_fraction)?,
        seed: s.value("seed", a.seed, d.seed)?,
    };
    let out = s.path("out", a.out)?;
    s.finish()?;

    let generated = synth::generate(&cfg)?;
    let ds = &generated.dataset;
    ds.save(&out)?;
    s.write_manifest(&out.join(MANIFEST_FILE))?;
    log::info!(
        "wrote {} samples ({} classes, {} seen) to {}",
        ds.labels.len(),
        cfg.n_classes,
        cfg.n_seen,
        out.display()
    );
    Ok(())
}

pub fn train_embed(a: TrainEmbedArgs) -> CmdResult {
    let mut s = Settings::new("train-embed", a.config.as_deref())?;
    let data_dir = s.path("data", a.data)?;
    let out = s.path("out", a.out)?;
    let dim = s.value("dim", a.dim, DEFAULT_EMBED_DIM)?;
    let hidden = s.value("hidden", a.hidden, dim)?;
    let dl = LossConfig::default();
    let loss_cfg = LossConfig {
        margin: s.value("margin", a.margin, dl.margin)?,
        lambda1: s.value("lambda1", a.lambda1, dl.lambda1)?,
        lambda2: s.value("lambda2", a.lambda2, dl.lambda2)?,
        lambda3: s.value("lambda3", a.lambda3, dl.lambda3)?,
    };
    let dt = TrainConfig::default();
    let epochs = s.value("epochs", a.epochs, dt.epochs)?;
    let batch_size = s.value("batch_size", a.batch_size, dt.batch_size)?;
    let learning_rate = s.value("lr", a.lr, dt.learning_rate)?;
    let momentum = s.value("momentum", a.momentum, dt.momentum)?;
    let seed = s.value("seed", a.seed, dt.seed)?;
    let train_cfg = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        momentum,
        seed: derive_seed(seed, SHUFFLE_SEED_OFFSET),
        shuffle: s.value("shuffle", a.shuffle, dt.shuffle)?,
        checkpoint_every: s.value("checkpoint_every", a.checkpoint_every, dt.checkpoint_every)?,
        balanced_batches: s.value("balanced_batches", a.balanced_batches, dt.balanced_batches)?,
    };
    let resume = s.optional_path("resume", a.resume)?;
    s.finish()?;
    loss_cfg.validate()?;
    train_cfg.validate()?;

    let ds = Dataset::load(&data_dir)?;
    let idx = ds.indices(Assignment::Train);
    let visual = ds.visual.select_rows(&idx);
    let sentences = ds.sentences.select_rows(&idx);
    let groups = ds.labels_at(&idx);

    let state = match &resume {
        Some(path) => {
            let st = TrainerState::load(path)?;
            log::info!("resuming from {} after epoch {}", path.display(), st.epochs_done);
            st
        }
        None => {
            let (hv, hs) = init_heads(visual.cols(), sentences.cols(), dim, Some(hidden), seed)?;
            TrainerState::new(hv, hs)
        }
    };
    let first_epoch = state.epochs_done + 1;

    create_dir(&out)?;
    let log_path = out.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|source| Error::Io {
        path: log_path.clone(),
        source,
    })?;
    let data = TrainData {
        visual: &visual,
        sentences: &sentences,
        groups: &groups,
    };
    let every = train_cfg.checkpoint_every;
    let (state, _log) = train_from(state, data, &loss_cfg, &train_cfg, |st, stats| {
        let line = format_log_line(stats.epoch, stats.mean_loss, stats.active_fraction);
        println!("{line}");
        writeln!(log_file, "{line}").map_err(|source| Error::Io {
            path: log_path.clone(),
            source,
        })?;
        log::debug!("epoch {} took {:?}", stats.epoch, stats.wall_time);
        if every > 0 && stats.epoch % every == 0 {
            st.save(&out.join(checkpoint_name(stats.epoch)))?;
        }
        Ok(())
    })?;
    log::info!("trained epochs {first_epoch}..={}", state.epochs_done);

    state.head_v.save(&out.join(HEAD_V_FILE))?;
    state.head_s.save(&out.join(HEAD_S_FILE))?;
    state.save(&out.join(STATE_FILE))?;
    s.write_manifest(&out.join(MANIFEST_FILE))
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_{epoch:04}.jet")
}

pub fn embed(a: EmbedArgs) -> CmdResult {
    let mut s = Settings::new("embed", a.config.as_deref())?;
    let raw = s.value("raw_passthrough", a.raw_passthrough, false)?;
    let head_path = if raw {
        s.optional_path("head", a.head)?
    } else {
        Some(s.path("head", a.head)?)
    };
    let input = s.path("input", a.input)?;
    let out = s.path("out", a.out)?;
    s.finish()?;

    let features = data::read_features(&input)?;
    let result = match head_path {
        Some(path) if !raw => {
            let head = EmbeddingHead::load(&path)?;
            if head.d_in() != features.cols() {
                return Err(Error::DimensionMismatch {
                    op: "embed",
                    expected: format!("{} feature columns (from {})", head.d_in(), path.display()),
                    actual: format!("{} in {}", features.cols(), input.display()),
                }
                .into());
            }
            head.embed(&features)?
        }
        _ => features,
    };
    create_parent(&out)?;
    data::write_features(&result, &out)?;
    s.write_manifest(&manifest_beside(&out))?;
    log::info!("wrote {}x{} features to {}", result.rows(), result.cols(), out.display());
    Ok(())
}

fn split_rows(features: &Matrix, ds: &Dataset, which: Assignment) -> LabeledEmbeddings {
    let idx = ds.indices(which);
    LabeledEmbeddings {
        embeddings: features.select_rows(&idx),
        labels: ds.labels_at(&idx),
    }
}

fn load_aligned(ds: &Dataset, path: &Path) -> Result<Matrix, CliError> {
    let features = data::read_features(path)?;
    if features.rows() != ds.labels.len() {
        return Err(Error::DimensionMismatch {
            op: "feature rows vs dataset samples",
            expected: ds.labels.len().to_string(),
            actual: format!("{} in {}", features.rows(), path.display()),
        }
        .into());
    }
    Ok(features)
}

pub fn train_zsl(a: TrainZslArgs) -> CmdResult {
    let mut s = Settings::new("train-zsl", a.config.as_deref())?;
    let data_dir = s.path("data", a.data)?;
    let features_path = s.path_or("features", a.features, data_dir.join(VISUAL_FILE))?;
    let out = s.path("out", a.out)?;
    let d = CompatConfig::default();
    let margin = s.value("margin", a.margin, d.margin)?;
    let learning_rate = s.value("lr", a.lr, d.learning_rate)?;
    let epochs = s.value("epochs", a.epochs, d.epochs)?;
    let seed = s.value("seed", a.seed, d.seed)?;
    s.finish()?;
    let cfg = CompatConfig {
        margin,
        learning_rate,
        epochs,
        seed: derive_seed(seed, COMPAT_SEED_OFFSET),
    };

    let ds = Dataset::load(&data_dir)?;
    let features = load_aligned(&ds, &features_path)?;
    let train = split_rows(&features, &ds, Assignment::Train);
    let model = train_compatibility(&train, &ds.attributes, cfg)?;
    create_parent(&out)?;
    model.save(&out)?;
    s.write_manifest(&manifest_beside(&out))?;
    log::info!("trained on {} samples; model at {}", train.len(), out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let mut s = Settings::new("eval", a.config.as_deref())?;
    let data_dir = s.path("data", a.data)?;
    let features_path = s.path_or("features", a.features, data_dir.join(VISUAL_FILE))?;
    let model_path = s.path("model", a.model)?;
    let out = s.path("out", a.out)?;
    s.finish()?;

    let ds = Dataset::load(&data_dir)?;
    let features = load_aligned(&ds, &features_path)?;
    let model = CompatibilityModel::load(&model_path)?;
    let report = evaluate(
        &model,
        &split_rows(&features, &ds, Assignment::TestSeen),
        &split_rows(&features, &ds, Assignment::TestUnseen),
        &ds.attributes,
    )?;
    let table = report.to_table();
    print!("{table}");
    create_dir(&out)?;
    write_text(&out.join(REPORT_TABLE_FILE), &table)?;
    write_text(&out.join(REPORT_KV_FILE), &report.to_key_values())?;
    s.write_manifest(&out.join(MANIFEST_FILE))
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut s = Settings::new("gradcheck", a.config.as_deref())?;
    let d = GradcheckConfig::default();
    let cfg = GradcheckConfig {
        trials: s.value("trials", a.trials, d.trials)?,
        seed: s.value("seed", a.seed, d.seed)?,
        step: s.value("step", a.step, d.step)?,
        tolerance: s.value("tolerance", a.tolerance, d.tolerance)?,
        corrupt: s.value("corrupt", a.corrupt, d.corrupt)?,
    };
    let out: Option<PathBuf> = s.optional_path("out", a.out)?;
    s.finish()?;
    if cfg.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }

    let reports = gradcheck::run_all(&cfg)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!(
            "{:<16} trials={} entries={} worst_rel_err={:.3e} tolerance={:.0e} {}\n",
            r.component,
            r.trials,
            r.entries_checked,
            r.worst_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    print!("{text}");
    if let Some(dir) = &out {
        create_dir(dir)?;
        write_text(&dir.join(REPORT_TABLE_FILE), &text)?;
        s.write_manifest(&dir.join(MANIFEST_FILE))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_round_trip() {
        let g: Groups = "3,4; 5,6,7".parse().unwrap();
        assert_eq!(g.0, vec![vec![3, 4], vec![5, 6, 7]]);
        assert_eq!(g.to_string(), "3,4;5,6,7");
        assert_eq!("".parse::<Groups>().unwrap(), Groups::default());
        assert!("3,x".parse::<Groups>().is_err());
    }
}

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jezsl_core::data::{Assignment, Dataset};
use jezsl_core::zsl::AttributeTable;
use jezsl_core::{Matrix, Rng};

pub fn jezsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jezsl"))
        .args(args)
        .env("JEZSL_LOG", "quiet")
        .output()
        .expect("binary runs")
}

/// Runs and asserts success, returning stdout.
pub fn ok(args: &[&str]) -> String {
    let out = jezsl(args);
    assert!(
        out.status.success(),
        "jezsl {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn code(args: &[&str]) -> i32 {
    jezsl(args).status.code().expect("exit code")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every regular file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn small_synth(dir: &Path, seed: u64) {
    ok(&["gen-synth", "--per-class", "12", "--seed", &seed.to_string(), "--out", s(dir)]);
}

/// Ten classes whose visual rows equal their unit attribute rows exactly.
pub fn perfect_dataset(seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let d = 5;
    let attrs: Vec<Vec<f64>> = (0..10)
        .map(|_| {
            let v = rng.normal_vec(d);
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / n).collect()
        })
        .collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut assignment = Vec::new();
    for c in 0..10u32 {
        for k in 0..6 {
            rows.push(attrs[c as usize].clone());
            labels.push(c);
            assignment.push(match (c < 7, k < 4) {
                (true, true) => Assignment::Train,
                (true, false) => Assignment::TestSeen,
                (false, _) => Assignment::TestUnseen,
            });
        }
    }
    let visual = Matrix::from_rows(&rows).unwrap();
    Dataset {
        sentences: visual.clone(),
        visual,
        labels,
        attributes: AttributeTable::new((0..10).collect(), Matrix::from_rows(&attrs).unwrap(), (0..7).collect(), (7..10).collect())
            .unwrap(),
        assignment,
    }
}

pub fn report_value(report_kv: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(report_kv).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}

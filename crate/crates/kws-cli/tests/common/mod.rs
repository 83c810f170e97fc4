#![allow(dead_code)] // each test binary uses a subset of these helpers

//! Shared fixtures: synthetic corpora written as WAV files with manifests,
//! and helpers for driving the `kws` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kws_core::audio::write_wav;
use kws_core::synth::{self, CorpusSpec};

pub fn kws_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kws"))
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Write a corpus to `dir/<name>/` and return (positives.csv, negatives.csv).
pub fn write_corpus(dir: &Path, name: &str, spec: &CorpusSpec) -> (PathBuf, PathBuf) {
    let root = dir.join(name);
    std::fs::create_dir_all(&root).unwrap();
    let (pos, neg) = synth::corpus(spec).unwrap();
    let mut pos_rows = String::new();
    for (i, clip) in pos.iter().enumerate() {
        let file = format!("pos_{i:04}.wav");
        write_wav(&root.join(&file), &clip.clip).unwrap();
        writeln!(pos_rows, "{file},pos,{:.3}", clip.keyword_end_s.unwrap()).unwrap();
    }
    let mut neg_rows = String::new();
    for (i, clip) in neg.iter().enumerate() {
        let file = format!("neg_{i:04}.wav");
        write_wav(&root.join(&file), &clip.clip).unwrap();
        writeln!(neg_rows, "{file},neg,").unwrap();
    }
    let pos_manifest = root.join("positives.csv");
    let neg_manifest = root.join("negatives.csv");
    std::fs::write(&pos_manifest, pos_rows).unwrap();
    std::fs::write(&neg_manifest, neg_rows).unwrap();
    (pos_manifest, neg_manifest)
}

/// A small model shaped for real 40-dim audio features; cheap enough for
/// CLI round-trip tests.
pub fn small_model_toml() -> &'static str {
    "[model]\n\
     conv_blocks = 2\n\
     attn_blocks = 2\n\
     model_dim = 8\n\
     lrd_rank = 4\n\
     heads = 2\n\
     ffn_groups = 2\n\
     ffn_dim = 16\n\
     look_back = 4\n\
     conv_channels = 4\n\
     feature_dim = 40\n"
}

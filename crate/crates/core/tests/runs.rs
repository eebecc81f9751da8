use std::fs;
use std::path::Path;

use crossgan::corpus::synth_corpus;
use crossgan::train::state::{checkpoint_fingerprint, list_checkpoints};
use crossgan::train::{resume, train, Regime, TrainConfig, TrainState};

fn config(regime: Regime, iterations: u64) -> TrainConfig {
    TrainConfig {
        regime,
        resolution: 16,
        z_dim: 8,
        base_channels: 4,
        classifier_width: 8,
        batch_size: 2,
        sample_count: 4,
        iterations,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

fn log_rows(run: &Path) -> Vec<String> {
    fs::read_to_string(run.join("losses.tsv")).unwrap().lines().map(String::from).collect()
}

#[test]
fn run_directory_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&tmp.path().join("c"), 2, 4, 16, 1).unwrap();
    let run = tmp.path().join("run");
    let summary = train(config(Regime::Cogan, 4), &corpus, &run).unwrap();

    let saved = TrainConfig::from_kv(&crossgan::kv::KvMap::parse(&fs::read_to_string(run.join("config.txt")).unwrap()).unwrap()).unwrap();
    assert_eq!(saved, config(Regime::Cogan, 4));
    assert!(run.join("fixed_z.sha256").is_file());

    let ckpts = list_checkpoints(&run.join("checkpoints")).unwrap();
    let names: Vec<_> = ckpts.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["iter_00000002", "iter_00000004"]);
    assert_eq!(summary.final_checkpoint(), Some(ckpts[1].as_path()));
    assert_eq!(checkpoint_fingerprint(&ckpts[1]).unwrap(), summary.state.fingerprint());
    assert!(summary.samples.iter().all(|p| p.is_file()));

    let iterations: Vec<u64> = log_rows(&run).iter().map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iterations.first(), Some(&0));
    assert_eq!(iterations.last(), Some(&3));
}

#[test]
fn checkpoint_round_trips_state() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&tmp.path().join("c"), 2, 4, 16, 2).unwrap();
    let summary = train(config(Regime::Dann, 2), &corpus, &tmp.path().join("run")).unwrap();
    let loaded = TrainState::load(summary.final_checkpoint().unwrap()).unwrap();
    assert_eq!(loaded.model.params, summary.state.model.params);
    assert_eq!(loaded.optimizers, summary.state.optimizers);
    assert_eq!(loaded.iteration, summary.state.iteration);
    assert_eq!(loaded.config, summary.state.config);

    let again = tmp.path().join("copy");
    loaded.save(&again).unwrap();
    assert_eq!(TrainState::load(&again).unwrap().fingerprint(), loaded.fingerprint());
}

#[test]
fn unfinished_checkpoints_are_ignored() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&tmp.path().join("c"), 2, 4, 16, 3).unwrap();
    let run = tmp.path().join("run");
    train(config(Regime::Single, 2), &corpus, &run).unwrap();
    fs::create_dir_all(run.join("checkpoints/iter_00000009.partial")).unwrap();
    let ckpts = list_checkpoints(&run.join("checkpoints")).unwrap();
    assert_eq!(ckpts.len(), 1);
    let resumed = resume(&run, &corpus, Some(4)).unwrap();
    assert_eq!(resumed.state.iteration, 4);
    assert_eq!(log_rows(&run).len(), 8);
}

#[test]
fn resume_without_checkpoints_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&tmp.path().join("c"), 2, 4, 16, 4).unwrap();
    assert!(resume(&tmp.path().join("empty"), &corpus, None).is_err());
}

use std::fs;

use tempfile::tempdir;

use vlad_core::checkpoint::{Checkpoint, CheckpointError};
use vlad_core::data::{decode_pgm, write_dataset};
use vlad_core::pipeline::{
    self, cmd_eval, cmd_sample, cmd_train, parse_prompt_lines, renders, Evaluator, CHECKPOINT_FILE, CSV_HEADER, EPOCH_LOG, STEP_LOG,
};
use vlad_core::train::{records_for, test_records, train, training_records, Objective};
use vlad_core::{Ablation, Error, RunConfig, Vlad};

fn tiny() -> RunConfig {
    RunConfig {
        dataset_size: 48,
        test_size: 16,
        epochs: 1,
        batch_size: 16,
        hidden: 32,
        enc_hidden: 16,
        noise_draws: 1,
        ..RunConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = tiny();
    let run = train(&cfg, &training_records(&cfg).unwrap(), Objective::Joint, |_| {}).unwrap();
    let ck = run.checkpoint();
    let bytes = ck.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode(), bytes);

    let (model, store) = back.restore().unwrap();
    let scenes: Vec<_> = test_records(&cfg).unwrap().into_iter().map(|r| r.scene).collect();
    let a = run.model.text_embeddings(&run.store, &scenes).unwrap();
    let b = model.text_embeddings(&store, &scenes).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let cfg = tiny();
    let (_, store) = Vlad::build(&cfg);
    let bytes = Checkpoint::from_store(&cfg, &store, None).encode();
    let cut = &bytes[..bytes.len() - 7];
    match Checkpoint::decode(cut) {
        Err(Error::Checkpoint(CheckpointError::Corrupt(_))) => {}
        other => panic!("expected corrupt checkpoint, got {other:?}"),
    }
}

#[test]
fn tampered_config_fails_hash_check() {
    let cfg = tiny();
    let (_, store) = Vlad::build(&cfg);
    let mut bytes = Checkpoint::from_store(&cfg, &store, None).encode();
    let needle = b"config lr = 0.001";
    let at = bytes.windows(needle.len()).position(|w| w == needle).expect("manifest lists lr");
    bytes[at + needle.len() - 1] = b'2';
    let err = Checkpoint::decode(&bytes).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::Hash { .. })), "{err}");
}

#[test]
fn prompt_errors_name_the_line() {
    let err = parse_prompt_lines("SCENE plain ; GLYPH A AT 1 1\nSCENE plain ; GLYPH Q AT 1 1\n").unwrap_err();
    assert!(err.to_string().contains("prompt line 2"), "{err}");
    assert!(parse_prompt_lines("\n\n").is_err());
    assert_eq!(parse_prompt_lines("SCENE invert ; GLYPH B AT 0 0\n\n").unwrap().len(), 1);
}

#[test]
fn train_sample_eval_write_their_artifacts() {
    let dir = tempdir().unwrap();
    let cfg = tiny();
    let run_dir = dir.path().join("run");
    let outcome = cmd_train(&cfg, &run_dir).unwrap();
    let epochs = fs::read_to_string(run_dir.join(EPOCH_LOG)).unwrap();
    assert_eq!(epochs.lines().count(), 1 + cfg.epochs);
    let steps = fs::read_to_string(run_dir.join(STEP_LOG)).unwrap();
    assert_eq!(steps.lines().count(), 1 + outcome.steps.len());

    let prompts = dir.path().join("p.txt");
    fs::write(
        &prompts,
        "SCENE plain ; GLYPH A AT 2 3\nSCENE invert ; GLYPH D AT 5 5 ; GLYPH E AT 11 0\n",
    )
    .unwrap();
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let files = cmd_sample(&ckpt, &prompts, &dir.path().join("img"), true).unwrap();
    assert_eq!(files.len(), 2);
    for f in &files {
        let c = decode_pgm(&fs::read(f).unwrap()).unwrap();
        assert!(c.pixels().iter().all(|&p| p == 0.0 || p == 1.0));
    }

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "SCENE plain ; GLYPH A AT 2 3\nSCENE plain ; GLYPH A AT 2 30\n").unwrap();
    let err = cmd_sample(&ckpt, &bad, &dir.path().join("img2"), true).unwrap_err();
    assert!(err.to_string().contains("prompt line 2"), "{err}");

    let test = dir.path().join("test.vgly");
    write_dataset(&test, &test_records(&cfg).unwrap()).unwrap();
    let out = dir.path().join("eval.csv");
    let report = cmd_eval(&ckpt, &test, &out).unwrap();
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.next(), Some(report.csv_row().as_str()));
    assert!(report.csv_row().starts_with("model,"));
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let cfg = tiny();
    let run = train(&cfg, &training_records(&cfg).unwrap(), Objective::AlignOnly, |_| {}).unwrap();
    let test = records_for(4242, 64).unwrap();
    let images = renders(&test).unwrap();
    let report = pipeline::evaluate_images(&Evaluator::of_model(&run.model, &run.store), "gt", &test, &images).unwrap();
    assert!(report.fid_proxy.abs() < 1e-6, "fid {}", report.fid_proxy);
    assert_eq!(report.ocr.accuracy, 1.0);
    assert_eq!(report.ocr.f_measure, 1.0);
}

#[test]
fn lambda_zero_keeps_the_diffusion_term_out_of_the_total() {
    let cfg = RunConfig { lambda: 0.0, ..tiny() };
    let run = train(&cfg, &training_records(&cfg).unwrap(), Objective::Joint, |_| {}).unwrap();
    for s in &run.steps {
        assert!(s.diff > 0.0);
        assert!((s.total - (s.align + s.tlg)).abs() < 1e-6, "{s:?}");
    }
    let cfg = tiny();
    let run = train(&cfg, &training_records(&cfg).unwrap(), Objective::Joint, |_| {}).unwrap();
    for s in &run.steps {
        assert!((s.total - (s.align + s.diff + s.tlg)).abs() < 1e-6, "{s:?}");
    }
}

#[test]
fn ablations_share_initial_weights() {
    let cfg = tiny();
    let (_, full) = Vlad::build(&cfg);
    for ab in [Ablation::NoCcm, Ablation::NoGuidance] {
        let (_, other) = Vlad::build(&cfg.with_ablation(ab));
        assert_eq!(full.values(), other.values(), "{}", ab.as_str());
    }
}

#[test]
fn init_checkpoint_seeds_a_lora_run() {
    let dir = tempdir().unwrap();
    let cfg = tiny();
    let run = cmd_train(&cfg, dir.path()).unwrap();
    let lora = RunConfig {
        lora: true,
        init_ckpt: Some(dir.path().join(CHECKPOINT_FILE)),
        ..tiny()
    };
    let tuned = train(&lora, &training_records(&lora).unwrap(), Objective::Joint, |_| {}).unwrap();
    for p in run.store.iter() {
        let id = tuned.store.index_of(&p.name).unwrap();
        if tuned.store.get(id).frozen {
            assert_eq!(tuned.store.value(id), &p.value, "{}", p.name);
        }
    }
}

#[test]
fn generation_ignores_thread_count() {
    let cfg = tiny();
    let (model, store) = Vlad::build(&cfg);
    let records = records_for(8, 40).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| pipeline::generate_for(&model, &store, &cfg, &records, false).unwrap())
    };
    assert_eq!(run(1), run(4));
}

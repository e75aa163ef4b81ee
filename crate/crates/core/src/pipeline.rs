//! Commands behind the CLI: train, sample, eval and ablate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::align::{parse_prompt, Encoders};
use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, RunConfig};
use crate::data::{read_dataset, render_scene, write_pgm, Canvas, Record, SceneSpec};
use crate::error::{Error, Result};
use crate::metrics::{clip_proxy_score, fid_proxy, ocr_detect, ocr_metrics, FeatureMoments, OcrReport, POSITION_TOLERANCE};
use crate::model::{sampler_for, schedule_for, Vlad};
use crate::nn::ParamStore;
use crate::train::{test_records, train, training_records, Objective, TrainOutcome};

pub const CSV_HEADER: &str = "run_id,fid_proxy,clip_proxy,ocr_accuracy,precision,recall,f_measure";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const STEP_LOG: &str = "steps.csv";

/// One CSV row of evaluation results.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub run_id: String,
    pub fid_proxy: f64,
    pub clip_proxy: f64,
    pub ocr: OcrReport,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.run_id, self.fid_proxy, self.clip_proxy, self.ocr.accuracy, self.ocr.precision, self.ocr.recall, self.ocr.f_measure
        )
    }
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Encoders that embed prompts and images for the clip/FID proxies.
#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub enc: &'a Encoders,
    pub store: &'a ParamStore,
    pub use_ccm: bool,
}

impl<'a> Evaluator<'a> {
    pub fn of_model(model: &'a Vlad, store: &'a ParamStore) -> Self {
        Evaluator {
            enc: &model.enc,
            store,
            use_ccm: model.uses_ccm(),
        }
    }

    fn image_features(&self, images: &[Canvas]) -> Result<crate::tensor::Tensor<f32>> {
        let rows: Vec<Vec<f32>> = images.iter().map(|c| c.pixels().to_vec()).collect();
        self.enc.encode_images(self.store, &rows)
    }
}

/// Scores `images` against the ground truth in `records` (same order).
pub fn evaluate_images(ev: &Evaluator, run_id: &str, records: &[Record], images: &[Canvas]) -> Result<EvalReport> {
    if records.len() != images.len() {
        return Err(Error::Metric(format!("{} images for {} records", images.len(), records.len())));
    }
    let scenes: Vec<SceneSpec> = records.iter().map(|r| r.scene.clone()).collect();
    let truth: Vec<Canvas> = records.iter().map(|r| r.canvas.clone()).collect();
    let gen_feat = ev.image_features(images)?;
    let ref_feat = ev.image_features(&truth)?;
    let fid = fid_proxy(&FeatureMoments::from_rows(&gen_feat)?, &FeatureMoments::from_rows(&ref_feat)?)?;
    let t = ev.enc.encode_scenes(ev.store, &scenes, ev.use_ccm)?;
    let clip = clip_proxy_score(&t, &gen_feat)?;
    let dets: Vec<_> = crate::par::map_indexed(images.len(), |i| ocr_detect(&images[i]));
    let truths: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
    let ocr = ocr_metrics(&dets, &truths, POSITION_TOLERANCE)?;
    Ok(EvalReport {
        run_id: run_id.to_string(),
        fid_proxy: fid,
        clip_proxy: clip,
        ocr,
    })
}

/// Samples one image per record (deterministic sampler, run seed) and scores it.
pub fn evaluate_model(
    model: &Vlad,
    store: &ParamStore,
    cfg: &RunConfig,
    ev: &Evaluator,
    run_id: &str,
    records: &[Record],
) -> Result<EvalReport> {
    let images = generate_for(model, store, cfg, records, true)?;
    evaluate_images(ev, run_id, records, &images)
}

pub fn generate_for(model: &Vlad, store: &ParamStore, cfg: &RunConfig, records: &[Record], deterministic: bool) -> Result<Vec<Canvas>> {
    let scenes: Vec<SceneSpec> = records.iter().map(|r| r.scene.clone()).collect();
    model.generate(store, &schedule_for(cfg)?, &scenes, cfg.seed, sampler_for(cfg, deterministic))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Trains, then writes the checkpoint plus per-epoch and per-step loss logs to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let records = training_records(cfg)?;
    let outcome = train(cfg, &records, Objective::Joint, |_| {})?;
    outcome.checkpoint().save(out.join(CHECKPOINT_FILE))?;

    let mut epochs = String::from("epoch,steps,mean_total,median_total,mean_align,mean_diff,median_diff,mean_tlg\n");
    for e in &outcome.epochs {
        let _ = writeln!(
            epochs,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            e.epoch, e.steps, e.mean_total, e.median_total, e.mean_align, e.mean_diff, e.median_diff, e.mean_tlg
        );
    }
    write_file(&out.join(EPOCH_LOG), epochs)?;
    let mut steps = String::from("epoch,step,align,diff,tlg,total\n");
    for s in &outcome.steps {
        let _ = writeln!(
            steps,
            "{},{},{:.9},{:.9},{:.9},{:.9}",
            s.epoch, s.step, s.align, s.diff, s.tlg, s.total
        );
    }
    write_file(&out.join(STEP_LOG), steps)?;
    Ok(outcome)
}

/// Reads prompts (one per line; trailing blank lines ignored).
pub fn read_prompts(path: &Path) -> Result<Vec<SceneSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompt_lines(&text)
}

pub fn parse_prompt_lines(text: &str) -> Result<Vec<SceneSpec>> {
    let lines: Vec<&str> = text.trim_end_matches(['\n', '\r', ' ']).lines().collect();
    if text.trim().is_empty() {
        return Err(Error::Scene("prompt file is empty".into()));
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| parse_prompt(l.trim()).map_err(|e| Error::Scene(format!("prompt line {}: {e}", i + 1))))
        .collect()
}

/// Writes `<index>.pgm` per prompt line (zero-based, zero-padded to 4 digits).
pub fn cmd_sample(ckpt: &Path, prompts: &Path, out: &Path, deterministic: bool) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(ckpt)?;
    let scenes = read_prompts(prompts)?;
    let (model, store) = ck.restore()?;
    let images = model.generate(
        &store,
        &schedule_for(&ck.config)?,
        &scenes,
        ck.config.seed,
        sampler_for(&ck.config, deterministic),
    )?;
    create_dir(out)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = out.join(format!("{i:04}.pgm"));
            write_pgm(&path, img)?;
            Ok(path)
        })
        .collect()
}

/// Evaluates a checkpoint on a dataset file with the checkpoint's own encoders
/// and writes a header plus one row to `out`.
pub fn cmd_eval(ckpt: &Path, testset: &Path, out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let records = read_dataset(testset)?;
    let (model, store) = ck.restore()?;
    let run_id = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let report = evaluate_model(&model, &store, &ck.config, &Evaluator::of_model(&model, &store), &run_id, &records)?;
    write_file(out, reports_csv(std::slice::from_ref(&report)))?;
    Ok(report)
}

/// Encoders fitted with the alignment loss alone on ground-truth renders,
/// shared by every ablation variant so their proxies are comparable.
pub fn reference_evaluator(cfg: &RunConfig, records: &[Record]) -> Result<TrainOutcome> {
    train(&cfg.with_ablation(Ablation::Full), records, Objective::AlignOnly, |_| {})
}

/// Trains and evaluates the three variants on identical data and seeds.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let records = training_records(cfg)?;
    let test = test_records(cfg)?;
    let reference = reference_evaluator(cfg, &records)?;
    let ev = Evaluator::of_model(&reference.model, &reference.store);
    Ablation::ALL
        .iter()
        .map(|&ab| {
            let vcfg = cfg.with_ablation(ab);
            let run = train(&vcfg, &records, Objective::Joint, |_| {})?;
            evaluate_model(&run.model, &run.store, &vcfg, &ev, ab.as_str(), &test)
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<EvalReport>> {
    let reports = ablate(cfg)?;
    write_file(out, reports_csv(&reports))?;
    Ok(reports)
}

/// Ground-truth renders of `records`, for self-comparison.
pub fn renders(records: &[Record]) -> Result<Vec<Canvas>> {
    records.iter().map(|r| render_scene(&r.scene)).collect()
}

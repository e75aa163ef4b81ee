//! The joint training loop: alignment + λ·diffusion + layout loss.

use crate::align::{contrastive_loss, AlignConfig};
use crate::checkpoint::{load_into, Checkpoint, OptimState};
use crate::config::RunConfig;
use crate::data::{generate_scenes, read_dataset, Record, SceneConfig, PIXELS};
use crate::diffusion::{diffusion_loss_tape, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{tlg_loss, LayoutLatent, LAYOUT_DIM};
use crate::model::{prompt_clauses, schedule_for, streams, Vlad};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{splitmix64, RngStream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which loss terms are optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `L_align + λ·L_diff + L_tlg`.
    Joint,
    /// `L_align` only; used to fit evaluation encoders.
    AlignOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub align: f64,
    pub diff: f64,
    pub tlg: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub median_total: f64,
    pub mean_align: f64,
    pub mean_diff: f64,
    pub median_diff: f64,
    pub mean_tlg: f64,
}

impl EpochSummary {
    fn from_steps(epoch: usize, steps: &[StepLoss]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepLoss) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let median = |f: fn(&StepLoss) -> f64| {
            let mut v: Vec<f64> = steps.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            match v.len() {
                0 => 0.0,
                k if k % 2 == 1 => v[k / 2],
                k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
            }
        };
        EpochSummary {
            epoch,
            steps: steps.len(),
            mean_total: mean(|s| s.total),
            median_total: median(|s| s.total),
            mean_align: mean(|s| s.align),
            mean_diff: mean(|s| s.diff),
            median_diff: median(|s| s.diff),
            mean_tlg: mean(|s| s.tlg),
        }
    }
}

pub struct TrainOutcome {
    pub config: RunConfig,
    pub model: Vlad,
    pub store: ParamStore,
    pub steps: Vec<StepLoss>,
    pub epochs: Vec<EpochSummary>,
    pub optim: OptimState,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.config, &self.store, Some(self.optim.clone()))
    }
}

/// Training records: the configured dataset file, or scenes generated from
/// the run seed.
pub fn training_records(cfg: &RunConfig) -> Result<Vec<Record>> {
    match &cfg.dataset {
        Some(path) => read_dataset(path),
        None => records_for(splitmix64(cfg.seed ^ streams::DATA), cfg.dataset_size),
    }
}

/// Held-out scenes, disjoint in seed from any training set.
pub fn test_records(cfg: &RunConfig) -> Result<Vec<Record>> {
    records_for(cfg.test_seed, cfg.test_size)
}

pub fn records_for(seed: u64, count: usize) -> Result<Vec<Record>> {
    generate_scenes(seed, count, &SceneConfig::default())
        .into_iter()
        .map(Record::from_scene)
        .collect()
}

/// Pixels in model space `[-1, 1]`.
pub fn to_model_space(pixels: &[f32]) -> Vec<f32> {
    pixels.iter().map(|&p| 2.0 * p - 1.0).collect()
}

/// Trains from the config's seed on `records`; `on_step` sees every logged step.
pub fn train(cfg: &RunConfig, records: &[Record], objective: Objective, mut on_step: impl FnMut(&StepLoss)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Scene("training set is empty".into()));
    }
    let schedule = schedule_for(cfg)?;
    let (model, mut store) = Vlad::build(cfg);
    if let Some(path) = &cfg.init_ckpt {
        let ck = Checkpoint::load(path)?;
        load_into(&mut store, &ck.params, false)?;
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &store.values())?;
    let root = RngStream::new(cfg.seed);
    let align_cfg = AlignConfig {
        tau: cfg.tau,
        batch_size: cfg.batch_size,
    };
    align_cfg.validate()?;

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = root.split(streams::ORDER).split(epoch as u64).permutation(records.len());
        let mut noise = root.split(streams::NOISE).split(epoch as u64);
        let first = steps.len();
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Record> = idx.iter().map(|&i| &records[i]).collect();
            let mut tape = Tape::<f32>::new();
            let p = store.bind(&mut tape);
            let terms = step_losses(&model, &mut tape, &p, &batch, cfg, &align_cfg, &schedule, &mut noise, objective)
                .map_err(|e| diverged(epoch, step, e))?;
            let grads = tape.backward(terms.total).map_err(|e| diverged(epoch, step, e.into()))?;
            let g: Vec<Option<Tensor<f32>>> = store
                .iter()
                .zip(&p)
                .map(|(param, &v)| if param.frozen { None } else { grads.get(v).cloned() })
                .collect();
            let mut values = store.values();
            adam.update(&mut values, &g).map_err(|e| diverged(epoch, step, e.into()))?;
            if let Some(bad) = store.iter().zip(&values).find(|(_, v)| !v.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("parameter {} became non-finite", bad.0.name),
                });
            }
            store.set_values(values);
            let scalar = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item() as f64);
            let (align, diff, tlg) = (scalar(Some(terms.align)), scalar(terms.diff), scalar(terms.tlg));
            let rec = StepLoss {
                epoch,
                step,
                align,
                diff,
                tlg,
                total: tape.value(terms.total).item() as f64,
            };
            on_step(&rec);
            steps.push(rec);
        }
        epochs.push(EpochSummary::from_steps(epoch, &steps[first..]));
    }
    let (m, v) = adam.moments();
    let optim = OptimState {
        step: adam.step_count(),
        m: m.to_vec(),
        v: v.to_vec(),
    };
    Ok(TrainOutcome {
        config: cfg.clone(),
        model,
        store,
        steps,
        epochs,
        optim,
    })
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(t) => Error::Diverged {
            epoch,
            step,
            detail: t.to_string(),
        },
        other => other,
    }
}

struct Terms {
    align: Var,
    diff: Option<Var>,
    tlg: Option<Var>,
    total: Var,
}

#[allow(clippy::too_many_arguments)]
fn step_losses(
    model: &Vlad,
    tape: &mut Tape<f32>,
    p: &[Var],
    batch: &[&Record],
    cfg: &RunConfig,
    align_cfg: &AlignConfig,
    schedule: &NoiseSchedule,
    noise: &mut RngStream,
    objective: Objective,
) -> Result<Terms> {
    let b = batch.len();
    let scenes: Vec<_> = batch.iter().map(|r| r.scene.clone()).collect();
    let prompts = prompt_clauses(&scenes);
    let (_, t) = model.enc.text_forward(tape, p, &prompts, model.uses_ccm())?;
    let pixels: Vec<f32> = batch.iter().flat_map(|r| r.canvas.pixels().iter().copied()).collect();
    let img = tape.constant(Tensor::new(vec![b, PIXELS], pixels)?);
    let v = model.enc.image.forward(tape, p, img)?;
    let align = contrastive_loss(tape, t, v, align_cfg)?;
    if objective == Objective::AlignOnly {
        return Ok(Terms {
            align,
            diff: None,
            tlg: None,
            total: align,
        });
    }

    let layouts: Vec<LayoutLatent> = scenes.iter().map(LayoutLatent::from_scene).collect();
    let pred = model.tlg.forward(tape, p, t)?;
    let tlg = tlg_loss(tape, pred, &layouts)?;

    // K noise draws per scene share the scene's conditioning rows.
    let k = cfg.noise_draws;
    let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let n = rep.len();
    let mut xt = Vec::with_capacity(n * PIXELS);
    let mut eps = Vec::with_capacity(n * PIXELS);
    let mut timesteps = Vec::with_capacity(n);
    for &i in &rep {
        let ts = 1 + noise.below(schedule.steps() as u64) as usize;
        let ab = schedule.alpha_bar(ts);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for &px in batch[i].canvas.pixels() {
            let e = noise.gauss();
            xt.push((a * (2.0 * px as f64 - 1.0) + s * e) as f32);
            eps.push(e as f32);
        }
        timesteps.push(ts);
    }
    let xt = tape.constant(Tensor::new(vec![n, PIXELS], xt)?);
    let eps = tape.constant(Tensor::new(vec![n, PIXELS], eps)?);
    let z_rows: Vec<f32> = if model.uses_guidance() {
        rep.iter().flat_map(|&i| layouts[i].values().to_vec()).collect()
    } else {
        vec![0.0; n * LAYOUT_DIM]
    };
    let z = tape.constant(Tensor::new(vec![n, LAYOUT_DIM], z_rows)?);
    let t_text = tape.gather_rows(t, &rep)?;
    let eps_hat = model.den.forward(tape, p, xt, z, t_text, &timesteps, schedule)?;
    let diff = diffusion_loss_tape(tape, eps_hat, eps)?;

    let weighted = tape.scale(diff, cfg.lambda)?;
    let total = tape.add(align, weighted)?;
    let total = tape.add(total, tlg)?;
    Ok(Terms {
        align,
        diff: Some(diff),
        tlg: Some(tlg),
        total,
    })
}

//! The assembled model: encoders, CCM, TLG and the guided denoiser.

use crate::align::{scene_clauses, Encoders};
use crate::config::{Ablation, RunConfig};
use crate::data::{Canvas, SceneSpec, PIXELS};
use crate::diffusion::{reverse_sample, NoiseSchedule, SamplerOptions, Variance};
use crate::error::Result;
use crate::guidance::{Conditioned, GuidedDenoiser, LayoutLatent, Tlg, LAYOUT_DIM};
use crate::nn::{Linear, ParamStore};
use crate::par;
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Stream indices split off the run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const ORDER: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const LORA: u64 = 5;
    pub const SAMPLE: u64 = 6;
}

/// Images per sampling task.
pub const SAMPLE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vlad {
    pub enc: Encoders,
    pub tlg: Tlg,
    pub den: GuidedDenoiser,
    pub ablation: Ablation,
}

impl Vlad {
    /// Fresh weights from the run seed. Every ablation builds the same
    /// parameters in the same order, so variants share their initialisation.
    pub fn build(cfg: &RunConfig) -> (Vlad, ParamStore) {
        let root = RngStream::new(cfg.seed);
        let mut rng = root.split(streams::INIT);
        let mut store = ParamStore::new();
        let enc = Encoders::new(&mut store, &mut rng, cfg.d, cfg.enc_hidden);
        let tlg = Tlg::new(&mut store, &mut rng, cfg.d, cfg.enc_hidden);
        let den = GuidedDenoiser::new(&mut store, &mut rng, cfg.d, cfg.hidden, cfg.head);
        let mut model = Vlad {
            enc,
            tlg,
            den,
            ablation: cfg.ablation,
        };
        if cfg.lora {
            let mut lrng = root.split(streams::LORA);
            for layer in model.lora_targets_mut() {
                layer.attach_lora(&mut store, &mut lrng, cfg.lora_rank);
            }
        }
        (model, store)
    }

    /// Layers that take adapters: the guidance matrix and both encoder perceptrons.
    fn lora_targets_mut(&mut self) -> [&mut Linear; 5] {
        [
            &mut self.den.w,
            &mut self.enc.text.l1,
            &mut self.enc.text.l2,
            &mut self.enc.image.l1,
            &mut self.enc.image.l2,
        ]
    }

    pub fn lora_targets(&self) -> [&Linear; 5] {
        [
            &self.den.w,
            &self.enc.text.l1,
            &self.enc.text.l2,
            &self.enc.image.l1,
            &self.enc.image.l2,
        ]
    }

    pub fn uses_ccm(&self) -> bool {
        self.ablation != Ablation::NoCcm
    }

    pub fn uses_guidance(&self) -> bool {
        self.ablation != Ablation::NoGuidance
    }

    /// Composed text embeddings (rows) under this model's ablation.
    pub fn text_embeddings(&self, store: &ParamStore, scenes: &[SceneSpec]) -> Result<Tensor<f32>> {
        self.enc.encode_scenes(store, scenes, self.uses_ccm())
    }

    /// Deterministic TLG layouts for rows of `t`.
    pub fn layouts(&self, store: &ParamStore, t: &Tensor<f32>) -> Result<Vec<LayoutLatent>> {
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(t.clone());
        let z = self.tlg.forward(&mut tape, &p, x)?;
        let z = tape.value(z);
        (0..z.rows()).map(|i| LayoutLatent::from_values(z.row(i))).collect()
    }

    /// The conditioning actually fed to the denoiser.
    pub fn conditioning(&self, layouts: &[LayoutLatent]) -> Tensor<f32> {
        let rows: Vec<f32> = if self.uses_guidance() {
            layouts.iter().flat_map(|l| l.values().to_vec()).collect()
        } else {
            vec![0.0; layouts.len() * LAYOUT_DIM]
        };
        Tensor::new(vec![layouts.len(), LAYOUT_DIM], rows).expect("non-empty layouts")
    }

    /// One image per scene. Image `i` draws its noise from
    /// `seed → SAMPLE → i`, so results do not depend on chunking or threads.
    pub fn generate(
        &self,
        store: &ParamStore,
        schedule: &NoiseSchedule,
        scenes: &[SceneSpec],
        seed: u64,
        opts: SamplerOptions,
    ) -> Result<Vec<Canvas>> {
        let base = RngStream::new(seed).split(streams::SAMPLE);
        let chunks = scenes.len().div_ceil(SAMPLE_CHUNK);
        let parts = par::map_indexed(chunks, |c| -> Result<Vec<Canvas>> {
            let lo = c * SAMPLE_CHUNK;
            let hi = (lo + SAMPLE_CHUNK).min(scenes.len());
            let batch = &scenes[lo..hi];
            let t = self.text_embeddings(store, batch)?;
            let layouts = self.layouts(store, &t)?;
            let den = Conditioned {
                net: &self.den,
                store,
                schedule,
                z: self.conditioning(&layouts),
                t_text: t,
            };
            let mut rngs: Vec<RngStream> = (lo..hi).map(|i| base.split(i as u64)).collect();
            let x = reverse_sample(&den, schedule, &mut rngs, PIXELS, opts)?;
            (0..x.rows()).map(|i| Canvas::new(x.row(i).to_vec())).collect()
        });
        let mut out = Vec::with_capacity(scenes.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

pub fn schedule_for(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)
}

pub fn sampler_for(cfg: &RunConfig, deterministic: bool) -> SamplerOptions {
    SamplerOptions {
        deterministic,
        variance: if cfg.posterior_variance {
            Variance::Posterior
        } else {
            Variance::Beta
        },
    }
}

/// Padded clauses for each scene.
pub fn prompt_clauses(scenes: &[SceneSpec]) -> Vec<Vec<[usize; crate::align::CLAUSE_LEN]>> {
    scenes.iter().map(scene_clauses).collect()
}

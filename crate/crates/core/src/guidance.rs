//! Layout latents, the text layout generator (TLG) and the layout-guided
//! denoiser.

use crate::data::{Glyph, SceneSpec, MAX_OBJECTS, MAX_POS, PIXELS};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{mismatch, Error, Result, TensorError};
use crate::nn::{Linear, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const SLOT: usize = 8;
pub const LAYOUT_DIM: usize = MAX_OBJECTS * SLOT;
pub const TEMB_DIM: usize = 8;

/// Three slots of `(presence, row/11, col/11, one-hot glyph ×5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutLatent {
    values: [f32; LAYOUT_DIM],
}

impl LayoutLatent {
    pub fn zeros() -> Self {
        LayoutLatent { values: [0.0; LAYOUT_DIM] }
    }

    /// Ground-truth encoding; slots follow (row, col) order.
    pub fn from_scene(spec: &SceneSpec) -> Self {
        let mut values = [0.0; LAYOUT_DIM];
        for (k, o) in spec.canonical().objects.iter().enumerate().take(MAX_OBJECTS) {
            let s = &mut values[k * SLOT..(k + 1) * SLOT];
            s[0] = 1.0;
            s[1] = o.row as f32 / MAX_POS as f32;
            s[2] = o.col as f32 / MAX_POS as f32;
            s[3 + o.glyph.id()] = 1.0;
        }
        LayoutLatent { values }
    }

    /// Clamps every coordinate into `[0, 1]`.
    pub fn from_values(v: &[f32]) -> Result<Self> {
        if v.len() != LAYOUT_DIM {
            return Err(mismatch("layout", &[LAYOUT_DIM], &[v.len()]).into());
        }
        let mut values = [0.0; LAYOUT_DIM];
        for (o, &x) in values.iter_mut().zip(v) {
            *o = x.clamp(0.0, 1.0);
        }
        Ok(LayoutLatent { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Decoded objects: slots with presence > 0.5, rounded to grid positions.
    pub fn decode(&self) -> Vec<(Glyph, u8, u8)> {
        self.values
            .chunks(SLOT)
            .filter(|s| s[0] > 0.5)
            .map(|s| {
                let g = (0..5).max_by(|&a, &b| s[3 + a].total_cmp(&s[3 + b])).unwrap();
                let pos = |v: f32| (v * MAX_POS as f32).round().clamp(0.0, MAX_POS as f32) as u8;
                (Glyph::ALL[g], pos(s[1]), pos(s[2]))
            })
            .collect()
    }

    /// Loss weights: a slot without an object only scores its presence.
    pub fn mask(&self) -> [f32; LAYOUT_DIM] {
        let mut m = [1.0; LAYOUT_DIM];
        for (k, s) in self.values.chunks(SLOT).enumerate() {
            if s[0] == 0.0 {
                m[k * SLOT + 1..(k + 1) * SLOT].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        m
    }
}

/// Two-layer perceptron from the composed embedding to a sigmoid-squashed layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tlg {
    pub l1: Linear,
    pub l2: Linear,
    pub d: usize,
}

impl Tlg {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, d: usize, hidden: usize) -> Self {
        Tlg {
            l1: Linear::new(store, rng, "tlg.l1", d, hidden),
            l2: Linear::new(store, rng, "tlg.l2", hidden, LAYOUT_DIM),
            d,
        }
    }

    /// Layout means for rows of `t`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], t: Var) -> Result<Var, TensorError> {
        let h = self.l1.forward(tape, p, t)?;
        let h = tape.relu(h)?;
        let y = self.l2.forward(tape, p, h)?;
        tape.sigmoid(y)
    }

    pub fn mean(&self, store: &ParamStore, t: &[f32]) -> Result<Vec<f32>> {
        if t.len() != self.d {
            return Err(mismatch("tlg_forward", &[self.d], &[t.len()]).into());
        }
        let n = t.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::NotUnitNorm(n));
        }
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, self.d], t.to_vec())?);
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).data().to_vec())
    }
}

/// Result of [`tlg_forward`]: the mean, the reparameterised draw before
/// squashing, and the clamped latent.
#[derive(Clone, Debug, PartialEq)]
pub struct TlgSample {
    pub mean: Vec<f32>,
    pub raw: Vec<f32>,
    pub latent: LayoutLatent,
}

/// `z = g(t) + σ·ξ`, `ξ ~ N(0, I)`; `ξ = 0` when deterministic.
pub fn tlg_forward(tlg: &Tlg, store: &ParamStore, t: &[f32], sigma2: f64, rng: &mut RngStream, deterministic: bool) -> Result<TlgSample> {
    if sigma2 < 0.0 {
        return Err(Error::Metric(format!("TLG variance must be non-negative, got {sigma2}")));
    }
    let mean = tlg.mean(store, t)?;
    let raw: Vec<f32> = if deterministic || sigma2 == 0.0 {
        mean.clone()
    } else {
        let s = sigma2.sqrt();
        mean.iter().map(|&m| (m as f64 + s * rng.gauss()) as f32).collect()
    };
    let latent = LayoutLatent::from_values(&raw)?;
    Ok(TlgSample { mean, raw, latent })
}

/// Masked squared error with a fixed denominator of 24 per row, averaged over rows.
pub fn tlg_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, targets: &[LayoutLatent]) -> Result<Var> {
    let b = targets.len();
    if tape.shape(pred) != [b, LAYOUT_DIM] {
        return Err(mismatch("tlg_loss", tape.shape(pred), &[b, LAYOUT_DIM]).into());
    }
    let tgt: Vec<T> = targets
        .iter()
        .flat_map(|l| l.values().iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    let mask: Vec<T> = targets.iter().flat_map(|l| l.mask().map(|v| T::from_f64(v as f64))).collect();
    let tgt = tape.constant(Tensor::new(vec![b, LAYOUT_DIM], tgt)?);
    let mask = tape.constant(Tensor::new(vec![b, LAYOUT_DIM], mask)?);
    let diff = tape.sub(pred, tgt)?;
    let sq = tape.square(diff)?;
    let masked = tape.mul(sq, mask)?;
    let total = tape.sum(masked)?;
    Ok(tape.scale(total, 1.0 / (LAYOUT_DIM * b) as f64)?)
}

/// Value-only [`tlg_loss`].
pub fn tlg_loss_value(pred: &[Vec<f32>], targets: &[LayoutLatent]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let rows: Vec<Vec<f64>> = pred.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let p = tape.constant(Tensor::stack_rows(&rows)?);
    let l = tlg_loss(&mut tape, p, targets)?;
    Ok(tape.value(l).item())
}

/// 8-dim sinusoidal embedding: `sin(t·f_i)` then `cos(t·f_i)`, `f_i = 1000^{−i/4}`.
pub fn timestep_embedding(t: usize) -> [f64; TEMB_DIM] {
    let mut out = [0.0; TEMB_DIM];
    let half = TEMB_DIM / 2;
    for i in 0..half {
        let f = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[i + half] = (t as f64 * f).cos();
    }
    out
}

/// How the network output becomes ε̂.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Head {
    /// The network output is ε̂.
    Linear,
    /// The network output `ℓ` sets `x̂₀ = tanh(√ᾱ·x_t/(1−ᾱ) + ℓ)` and
    /// `ε̂ = (x_t − √ᾱ·x̂₀)/√(1−ᾱ)`.
    #[default]
    Tanh,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Linear => "linear",
            Head::Tanh => "tanh",
        }
    }
}

/// ε̂ = MLP(W·concat(x_t, z, t_text, emb(t))).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidedDenoiser {
    pub w: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub d: usize,
    pub head: Head,
}

impl GuidedDenoiser {
    pub fn input_width(d: usize) -> usize {
        PIXELS + LAYOUT_DIM + d + TEMB_DIM
    }

    pub fn new(store: &mut ParamStore, rng: &mut RngStream, d: usize, hidden: usize, head: Head) -> Self {
        GuidedDenoiser {
            w: Linear::new(store, rng, "den.w", Self::input_width(d), hidden),
            l2: Linear::new(store, rng, "den.l2", hidden, hidden),
            l3: Linear::new(store, rng, "den.l3", hidden, PIXELS),
            d,
            head,
        }
    }

    /// ε̂ for rows `xt` (n×256), `z` (n×24), `t_text` (n×d) at per-row timesteps.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        xt: Var,
        z: Var,
        t_text: Var,
        timesteps: &[usize],
        s: &NoiseSchedule,
    ) -> Result<Var> {
        let n = timesteps.len();
        for (v, w) in [(xt, PIXELS), (z, LAYOUT_DIM), (t_text, self.d)] {
            if tape.shape(v) != [n, w] {
                return Err(mismatch("guided_denoise", tape.shape(v), &[n, w]).into());
            }
        }
        for &t in timesteps {
            if t == 0 || t > s.steps() {
                return Err(Error::Timestep { t, max: s.steps() });
            }
        }
        let temb: Vec<T> = timesteps.iter().flat_map(|&t| timestep_embedding(t).map(T::from_f64)).collect();
        let temb = tape.constant(Tensor::new(vec![n, TEMB_DIM], temb)?);
        let x = tape.concat(&[xt, z, t_text, temb], 1)?;
        let h = self.w.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.l2.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let out = self.l3.forward(tape, p, h)?;
        match self.head {
            Head::Linear => Ok(out),
            Head::Tanh => {
                let col = |f: &dyn Fn(f64) -> f64| -> Tensor<T> {
                    Tensor::vector(timesteps.iter().map(|&t| T::from_f64(f(s.alpha_bar(t)))).collect())
                };
                let c_in = tape.constant(col(&|ab| ab.sqrt() / (1.0 - ab)));
                let c_x0 = tape.constant(col(&|ab| ab.sqrt()));
                let c_out = tape.constant(col(&|ab| 1.0 / (1.0 - ab).sqrt()));
                let skip = tape.scale_rows(xt, c_in)?;
                let pre = tape.add(skip, out)?;
                let x0 = tape.tanh(pre)?;
                let x0 = tape.scale_rows(x0, c_x0)?;
                let resid = tape.sub(xt, x0)?;
                Ok(tape.scale_rows(resid, c_out)?)
            }
        }
    }
}

/// A [`GuidedDenoiser`] bound to its weights and a batch of conditioning rows.
pub struct Conditioned<'a> {
    pub net: &'a GuidedDenoiser,
    pub store: &'a ParamStore,
    pub schedule: &'a NoiseSchedule,
    pub z: Tensor<f32>,
    pub t_text: Tensor<f32>,
}

impl Denoiser for Conditioned<'_> {
    fn predict_eps(&self, xt: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.store.bind(&mut tape);
        let x = tape.constant(xt.clone());
        let z = tape.constant(self.z.clone());
        let tt = tape.constant(self.t_text.clone());
        let ts = vec![t; xt.rows()];
        let e = self.net.forward(&mut tape, &p, x, z, tt, &ts, self.schedule)?;
        Ok(tape.value(e).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Placed, Style};

    #[test]
    fn layout_encoding() {
        let spec = SceneSpec::new(Style::Plain, vec![Placed::new(Glyph::C, 11, 0), Placed::new(Glyph::B, 0, 11)]).unwrap();
        let z = LayoutLatent::from_scene(&spec);
        let v = z.values();
        assert_eq!(&v[..8], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&v[8..16], &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(v[16..].iter().all(|&x| x == 0.0));
        assert_eq!(z.decode(), vec![(Glyph::B, 0, 11), (Glyph::C, 11, 0)]);
        let m = z.mask();
        assert_eq!(m[16], 1.0);
        assert!(m[17..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tlg_loss_single_presence_error() {
        let spec = SceneSpec::new(Style::Plain, vec![Placed::new(Glyph::A, 3, 4)]).unwrap();
        let z = LayoutLatent::from_scene(&spec);
        let mut pred = z.values().to_vec();
        assert_eq!(tlg_loss_value(&[pred.clone()], std::slice::from_ref(&z)).unwrap(), 0.0);
        pred[0] = 0.0;
        assert!((tlg_loss_value(&[pred], &[z]).unwrap() - 1.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn timestep_embedding_shape() {
        let e = timestep_embedding(0);
        assert_eq!(e, [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(7);
        for i in 0..4 {
            assert!((e[i].powi(2) + e[i + 4].powi(2) - 1.0).abs() < 1e-12);
        }
    }
}

//! Linear-β noise schedules, the closed-form forward process, the
//! ε-parameterised reverse step and an ancestral sampler.

use crate::error::{mismatch, Error, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t = β_start + (t−1)/(T−1)·(β_end − β_start)`, `α_t = 1 − β_t`,
    /// `ᾱ_t = Π_{s≤t} α_s`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let beta: Vec<f64> = (0..t_steps)
            .map(|i| {
                if i + 1 == t_steps && t_steps > 1 {
                    beta_end
                } else if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 / (t_steps - 1) as f64 * (beta_end - beta_start)
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        NoiseSchedule { beta, alpha, alpha_bar }
    }

    pub fn constant(t_steps: usize, beta: f64) -> Result<Self> {
        Self::linear(t_steps, beta, beta)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(())
    }

    /// 1-based accessors; `t` must lie in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// One draw of the forward process.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSample {
    pub x0: Tensor<f32>,
    pub t: usize,
    pub eps: Tensor<f32>,
    pub xt: Tensor<f32>,
}

fn check_model_space(x0: &Tensor<f32>) -> Result<()> {
    if let Some(v) = x0.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::Scene(format!("x0 value {v} outside [-1, 1]")));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` for a given ε. `t = 0` returns `x0`.
pub fn forward_with_noise(x0: &Tensor<f32>, t: usize, eps: &Tensor<f32>, s: &NoiseSchedule) -> Result<DiffusionSample> {
    if t > s.steps() {
        return Err(Error::Timestep { t, max: s.steps() });
    }
    if x0.shape() != eps.shape() {
        return Err(mismatch("forward_diffuse", x0.shape(), eps.shape()).into());
    }
    check_model_space(x0)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Ok(DiffusionSample {
        x0: x0.clone(),
        t,
        eps: eps.clone(),
        xt: Tensor::new(x0.shape().to_vec(), data)?,
    })
}

/// Draws ε ~ N(0, I) and applies the closed-form marginal.
pub fn forward_diffuse(x0: &Tensor<f32>, t: usize, s: &NoiseSchedule, rng: &mut RngStream) -> Result<DiffusionSample> {
    if t > s.steps() {
        return Err(Error::Timestep { t, max: s.steps() });
    }
    let eps = rng.gauss_sample::<f32>(x0.shape());
    forward_with_noise(x0, t, &eps, s)
}

/// One transition `x_t = √α_t·x_{t−1} + √β_t·ε`.
pub fn forward_step(x_prev: &[f64], t: usize, s: &NoiseSchedule, rng: &mut RngStream) -> Result<Vec<f64>> {
    s.check(t)?;
    let (a, b) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
    Ok(x_prev.iter().map(|&x| a * x + b * rng.gauss()).collect())
}

/// Reverse-step variance choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variance {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β̃_t`.
    Posterior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReverseStep {
    pub mu: Tensor<f32>,
    pub sigma2: f64,
}

/// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn mu_from_eps(xt: &Tensor<f32>, eps_hat: &Tensor<f32>, t: usize, s: &NoiseSchedule, var: Variance) -> Result<ReverseStep> {
    s.check(t)?;
    if xt.shape() != eps_hat.shape() {
        return Err(mismatch("mu_from_eps", xt.shape(), eps_hat.shape()).into());
    }
    let c = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / s.alpha(t).sqrt();
    let data = xt
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| ((x as f64 - c * e as f64) * inv) as f32)
        .collect();
    let sigma2 = match var {
        Variance::Beta => s.beta(t),
        Variance::Posterior => s.posterior_variance(t),
    };
    Ok(ReverseStep {
        mu: Tensor::new(xt.shape().to_vec(), data)?,
        sigma2,
    })
}

/// Mean over batch and elements of `(ε − ε̂)²`.
pub fn diffusion_loss(eps: &[Tensor<f32>], eps_hat: &[Tensor<f32>]) -> Result<f64> {
    if eps.len() != eps_hat.len() || eps.is_empty() {
        return Err(mismatch("diffusion_loss", &[eps.len()], &[eps_hat.len()]).into());
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (e, h) in eps.iter().zip(eps_hat) {
        if e.shape() != h.shape() {
            return Err(mismatch("diffusion_loss", e.shape(), h.shape()).into());
        }
        total += e
            .data()
            .iter()
            .zip(h.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>();
        count += e.len();
    }
    Ok(total / count as f64)
}

/// Recorded form of [`diffusion_loss`] over stacked rows.
pub fn diffusion_loss_tape<T: Scalar>(tape: &mut Tape<T>, eps_hat: Var, eps: Var) -> Result<Var> {
    let diff = tape.sub(eps_hat, eps)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

/// Predicts ε for a batch of rows at one timestep. Conditioning lives inside
/// the implementor.
pub trait Denoiser {
    fn predict_eps(&self, xt: &Tensor<f32>, t: usize) -> Result<Tensor<f32>>;
}

/// Always predicts zero noise.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_eps(&self, xt: &Tensor<f32>, _t: usize) -> Result<Tensor<f32>> {
        Ok(Tensor::zeros(xt.shape().to_vec()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SamplerOptions {
    pub deterministic: bool,
    pub variance: Variance,
}

/// Ancestral sampling from `x_T ~ N(0, I)`. Row `i` draws all of its noise
/// from `rngs[i]`, so a row's result does not depend on the batch around it.
/// Returns rows clamped to `[−1, 1]` and mapped to `[0, 1]`.
pub fn reverse_sample<D: Denoiser + ?Sized>(
    den: &D,
    s: &NoiseSchedule,
    rngs: &mut [RngStream],
    width: usize,
    opts: SamplerOptions,
) -> Result<Tensor<f32>> {
    let n = rngs.len();
    if n == 0 {
        return Err(Error::Metric("reverse_sample needs at least one row".into()));
    }
    let init: Vec<f32> = rngs
        .iter_mut()
        .flat_map(|r| (0..width).map(|_| r.gauss() as f32).collect::<Vec<_>>())
        .collect();
    let mut x = Tensor::new(vec![n, width], init)?;
    for t in (1..=s.steps()).rev() {
        let eps_hat = den.predict_eps(&x, t)?;
        let step = mu_from_eps(&x, &eps_hat, t, s, opts.variance)?;
        x = step.mu;
        if !opts.deterministic && t > 1 && step.sigma2 > 0.0 {
            let sigma = step.sigma2.sqrt();
            for (row, r) in x.data_mut().chunks_mut(width).zip(rngs.iter_mut()) {
                for v in row {
                    *v = (*v as f64 + sigma * r.gauss()) as f32;
                }
            }
        }
        if !x.all_finite() {
            return Err(crate::error::TensorError::NonFinite { op: "reverse_sample" }.into());
        }
    }
    Ok(x.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::linear(1, 0.3, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.3]);
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        let s = NoiseSchedule::constant(2, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
        for t in 1..=2 {
            assert_eq!(s.alpha(t) + s.beta(t), 1.0);
        }
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn noise_free_and_t0() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let x0 = Tensor::<f32>::from_f64(vec![3], &[-1.0, 0.5, 1.0]).unwrap();
        let zero = Tensor::zeros(vec![3]);
        let d = forward_with_noise(&x0, 10, &zero, &s).unwrap();
        let a = s.alpha_bar(10).sqrt();
        for (x, y) in d.xt.data().iter().zip(x0.data()) {
            assert_eq!(*x, (a * *y as f64) as f32);
        }
        let mut rng = RngStream::new(0);
        assert_eq!(forward_diffuse(&x0, 0, &s, &mut rng).unwrap().xt, x0);
        assert!(forward_diffuse(&x0, 51, &s, &mut rng).is_err());
    }

    #[test]
    fn mu_examples() {
        let s = NoiseSchedule::constant(2, 0.1).unwrap();
        let one = Tensor::<f32>::scalar(1.0);
        let r = mu_from_eps(&one, &one, 2, &s, Variance::Beta).unwrap();
        let want = (1.0 - 0.1 / 0.19f64.sqrt()) / 0.9f64.sqrt();
        assert!((r.mu.item() as f64 - want).abs() < 1e-6);
        assert!((want - 0.812268).abs() < 1e-6);
        let r = mu_from_eps(&one, &Tensor::zeros(vec![1]), 1, &s, Variance::Beta).unwrap();
        assert!((r.mu.item() as f64 - 1.0 / 0.9f64.sqrt()).abs() < 1e-6);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn loss_examples() {
        let e = vec![Tensor::<f32>::from_f64(vec![2], &[0.5, -1.0]).unwrap()];
        assert_eq!(diffusion_loss(&e, &e).unwrap(), 0.0);
        let shifted = vec![e[0].map(|v| v + 1.0)];
        assert!((diffusion_loss(&e, &shifted).unwrap() - 1.0).abs() < 1e-12);
    }
}

//! The diffusion process: forward noising, prediction-type algebra, DDPM and
//! DDIM reverse steps, the full sampling loops, and the weighted ELBO
//! training loss.
//!
//! Masks live in diffusion space as {-1, +1}; samples binarize the final
//! state at threshold 0, so an all-zero network output decodes to the
//! all-ones mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{LossWeighting, NoiseSchedule};
use crate::tensor::{elem, no_grad, Element, Tensor};

/// Training times are drawn from U(T_MIN, 1); the clamp keeps the SNR
/// singularity at t = 0 out of the sampled range.
pub const T_MIN: f64 = 1e-4;

/// Floor on alpha when the sampler recovers x0 from an epsilon prediction.
/// At t = 1 the conversion divides by alpha = 0 exactly; the floor only
/// matters on that first step and keeps the estimate finite before clamping.
const SAMPLER_ALPHA_FLOOR: f64 = 1e-3;

/// What the network regresses: the clean mask, the noise, or the velocity
/// `v = alpha * eps - sigma * x0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    X0,
    Epsilon,
    V,
}

impl PredictionKind {
    pub fn name(&self) -> &'static str {
        match self {
            PredictionKind::X0 => "x0",
            PredictionKind::Epsilon => "epsilon",
            PredictionKind::V => "v",
        }
    }
}

impl std::str::FromStr for PredictionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x0" | "x" => Ok(PredictionKind::X0),
            "epsilon" | "eps" => Ok(PredictionKind::Epsilon),
            "v" => Ok(PredictionKind::V),
            other => Err(Error::Config(format!("unknown prediction kind '{other}'"))),
        }
    }
}

/// A network output tagged with its parameterization.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub value: Tensor<f32>,
}

/// A conditional denoiser the sampler and the loss can drive.
pub trait Denoiser {
    fn prediction_kind(&self) -> PredictionKind;

    /// Predict from the noisy mask, the conditioning image, and one time
    /// value per batch row.
    fn forward(&self, x_t: &Tensor<f32>, image: &Tensor<f32>, t: &[f64]) -> Result<Prediction>;
}

/// Draw `x_t = alpha(t) x0 + sigma(t) eps` from the forward process.
pub fn forward_sample(
    x0: &Tensor<f32>,
    t: f64,
    eps: &Tensor<f32>,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "forward_sample: x0 shape {:?} does not match eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let c = sched.coefficients(t)?;
    x0.scale(elem(c.alpha)).add(&eps.scale(elem(c.sigma)))
}

/// Convert a prediction to another parameterization at fixed coefficients.
///
/// Conversions that divide by a vanished coefficient (alpha at t = 1,
/// sigma at t = 0) are domain errors at the exact endpoint.
pub fn convert(
    pred: &Prediction,
    target: PredictionKind,
    x_t: &Tensor<f32>,
    coeffs: &crate::schedule::Coefficients,
) -> Result<Prediction> {
    use PredictionKind::*;
    if pred.value.shape() != x_t.shape() {
        return Err(Error::Shape(format!(
            "convert: prediction shape {:?} does not match x_t shape {:?}",
            pred.value.shape(),
            x_t.shape()
        )));
    }
    let alpha = elem::<f32>(coeffs.alpha);
    let sigma = elem::<f32>(coeffs.sigma);
    let nonzero = |v: f64, name: &str| -> Result<()> {
        if v == 0.0 {
            return Err(Error::Domain(format!(
                "convert: {name} = 0 at t = {}, conversion undefined",
                coeffs.t
            )));
        }
        Ok(())
    };
    let value = match (pred.kind, target) {
        (a, b) if a == b => pred.value.clone(),
        (X0, Epsilon) => {
            nonzero(coeffs.sigma, "sigma")?;
            x_t.sub(&pred.value.scale(alpha))?.scale(1.0 / sigma)
        }
        (X0, V) => {
            nonzero(coeffs.sigma, "sigma")?;
            x_t.scale(alpha).sub(&pred.value)?.scale(1.0 / sigma)
        }
        (Epsilon, X0) => {
            nonzero(coeffs.alpha, "alpha")?;
            x_t.sub(&pred.value.scale(sigma))?.scale(1.0 / alpha)
        }
        (Epsilon, V) => {
            nonzero(coeffs.alpha, "alpha")?;
            pred.value.sub(&x_t.scale(sigma))?.scale(1.0 / alpha)
        }
        (V, X0) => x_t.scale(alpha).sub(&pred.value.scale(sigma))?,
        (V, Epsilon) => x_t.scale(sigma).add(&pred.value.scale(alpha))?,
        _ => unreachable!("all kind pairs covered"),
    };
    Ok(Prediction {
        kind: target,
        value,
    })
}

/// Coefficients of the reverse posterior
/// `x_s = coef_xt * x_t + coef_x0 * x0_hat + noise_std * eps`.
///
/// `c = 1 - SNR(t)/SNR(s)`; the x0 coefficient carries a plus sign, which
/// the single-step marginal-consistency test pins down (the flipped sign
/// breaks the mean as c approaches 1).
#[derive(Debug, Clone, Copy)]
pub struct PosteriorCoefficients {
    pub coef_xt: f64,
    pub coef_x0: f64,
    pub noise_std: f64,
}

pub fn posterior_coefficients(
    sched: &NoiseSchedule,
    t: f64,
    s: f64,
) -> Result<PosteriorCoefficients> {
    if s > t {
        return Err(Error::Usage(format!(
            "posterior step requires s <= t, got s = {s}, t = {t}"
        )));
    }
    let ct = sched.coefficients(t)?;
    let cs = sched.coefficients(s)?;
    let snr_t = sched.snr(t)?;
    let snr_s = sched.snr(s)?;
    let c = if snr_s.is_infinite() {
        1.0
    } else {
        1.0 - snr_t / snr_s
    };
    Ok(PosteriorCoefficients {
        coef_xt: (ct.alpha / cs.alpha) * (cs.sigma * cs.sigma) / (ct.sigma * ct.sigma),
        coef_x0: cs.alpha * c,
        noise_std: (c * cs.sigma * cs.sigma).sqrt(),
    })
}

/// One ancestral (DDPM) step from time t to s < t with fresh noise `eps`.
pub fn ddpm_step(
    x_t: &Tensor<f32>,
    x0_hat: &Tensor<f32>,
    t: f64,
    s: f64,
    eps: &Tensor<f32>,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let pc = posterior_coefficients(sched, t, s)?;
    x_t.scale(elem(pc.coef_xt))
        .add(&x0_hat.scale(elem(pc.coef_x0)))?
        .add(&eps.scale(elem(pc.noise_std)))
}

/// One deterministic (DDIM, eta = 0) step from time t to s < t.
pub fn ddim_step(
    x_t: &Tensor<f32>,
    x0_hat: &Tensor<f32>,
    t: f64,
    s: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    if s > t {
        return Err(Error::Usage(format!(
            "ddim step requires s <= t, got s = {s}, t = {t}"
        )));
    }
    let ct = sched.coefficients(t)?;
    let cs = sched.coefficients(s)?;
    if ct.sigma == 0.0 {
        return Err(Error::Domain(format!(
            "ddim step undefined at sigma(t) = 0 (t = {t})"
        )));
    }
    let eps_hat = x_t
        .sub(&x0_hat.scale(elem(ct.alpha)))?
        .scale(elem(1.0 / ct.sigma));
    x0_hat
        .scale(elem(cs.alpha))
        .add(&eps_hat.scale(elem(cs.sigma)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub t_min: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(SamplerConfig {
            kind,
            steps,
            t_min: T_MIN,
            seed,
        })
    }

    /// Strictly decreasing times `t_i = t_min + (1 - t_min) i / N` for
    /// i = N .. 0.
    pub fn timesteps(&self) -> Vec<f64> {
        let n = self.steps;
        (0..=n)
            .rev()
            .map(|i| self.t_min + (1.0 - self.t_min) * i as f64 / n as f64)
            .collect()
    }
}

/// Mix a base seed with an index into an independent stream seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Recover an x0 estimate from the raw model output for every batch row,
/// using per-row coefficients. `alpha_floor` guards the epsilon conversion
/// at the pure-noise endpoint; training passes `None` to keep the ELBO
/// algebra exact.
fn prediction_to_x0_rows(
    pred: &Prediction,
    x_t: &Tensor<f32>,
    alphas: &[f32],
    sigmas: &[f32],
    alpha_floor: Option<f32>,
) -> Result<Tensor<f32>> {
    match pred.kind {
        PredictionKind::X0 => Ok(pred.value.clone()),
        PredictionKind::Epsilon => {
            let floored: Vec<f32> = match alpha_floor {
                Some(floor) => alphas.iter().map(|a| a.max(floor)).collect(),
                None => alphas.to_vec(),
            };
            let inv_alpha: Vec<f32> = floored.iter().map(|a| 1.0 / a).collect();
            x_t.sub(&pred.value.mul_batch(sigmas)?)?.mul_batch(&inv_alpha)
        }
        PredictionKind::V => x_t.mul_batch(alphas)?.sub(&pred.value.mul_batch(sigmas)?),
    }
}

/// Run the reverse process for `n_preds` independent masks conditioned on
/// one image.
///
/// Each prediction draws from its own RNG stream derived from `cfg.seed`,
/// so the result is a pure function of (model parameters, image, seed,
/// config) regardless of how rows are batched.
pub fn sample_n(
    model: &dyn Denoiser,
    image: &Tensor<f32>,
    n_preds: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Tensor<f32>>> {
    if n_preds == 0 {
        return Err(Error::Usage("sample_n needs n_preds >= 1".into()));
    }
    let ishape = image.shape();
    if ishape.len() != 4 || ishape[0] != 1 {
        return Err(Error::Shape(format!(
            "sample_n expects a [1,1,H,W] image, got {ishape:?}"
        )));
    }
    let (h, w) = (ishape[2], ishape[3]);
    let hw = h * w;

    no_grad(|| {
        let mut rngs: Vec<ChaCha12Rng> = (0..n_preds)
            .map(|i| ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, i as u64)))
            .collect();

        let draw_rows = |rngs: &mut [ChaCha12Rng]| -> Tensor<f32> {
            let mut data = Vec::with_capacity(n_preds * hw);
            for rng in rngs.iter_mut() {
                data.extend((0..hw).map(|_| f32::sample_standard_normal(rng)));
            }
            Tensor::from_vec(&[n_preds, 1, h, w], data).expect("consistent")
        };

        let image_rows = {
            let mut data = Vec::with_capacity(n_preds * hw);
            for _ in 0..n_preds {
                data.extend_from_slice(image.data());
            }
            Tensor::from_vec(&[n_preds, 1, h, w], data).expect("consistent")
        };

        let times = cfg.timesteps();
        let mut x = draw_rows(&mut rngs);
        for step in 0..cfg.steps {
            let t = times[step];
            let s = times[step + 1];
            let pred = model.forward(&x, &image_rows, &vec![t; n_preds])?;
            if !pred.value.data().iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite model output at sampler step {step} (t = {t})"
                )));
            }
            let c = sched.coefficients(t)?;
            let alphas = vec![c.alpha as f32; n_preds];
            let sigmas = vec![c.sigma as f32; n_preds];
            let x0_hat = prediction_to_x0_rows(
                &pred,
                &x,
                &alphas,
                &sigmas,
                Some(SAMPLER_ALPHA_FLOOR as f32),
            )?
            .clamp(-1.0, 1.0);
            x = match cfg.kind {
                SamplerKind::Ddim => ddim_step(&x, &x0_hat, t, s, sched)?,
                SamplerKind::Ddpm => {
                    let eps = draw_rows(&mut rngs);
                    ddpm_step(&x, &x0_hat, t, s, &eps, sched)?
                }
            };
        }

        // Decode each row into a {0,1} mask.
        let binary = x.binarize(0.0);
        Ok((0..n_preds)
            .map(|i| {
                Tensor::from_vec(&[1, h, w], binary.data()[i * hw..(i + 1) * hw].to_vec())
                    .expect("consistent")
            })
            .collect())
    })
}

/// Single-mask convenience wrapper around [`sample_n`].
pub fn sample(
    model: &dyn Denoiser,
    image: &Tensor<f32>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    Ok(sample_n(model, image, 1, cfg, sched)?.remove(0))
}

/// One training batch: conditioning images and their {-1,+1} target masks.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Tensor<f32>,
    pub targets_pm: Tensor<f32>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weighted ELBO loss: mean over the batch of `w(t) * MSE(x0, x0_hat)` with
/// t ~ U(T_MIN, 1) i.i.d. per element and the model output converted to
/// x0 form.
pub fn training_loss(
    model: &dyn Denoiser,
    batch: &TrainBatch,
    sched: &NoiseSchedule,
    lw: &LossWeighting,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor<f32>> {
    if batch.images.shape() != batch.targets_pm.shape() {
        return Err(Error::Shape(format!(
            "training batch: image shape {:?} does not match target shape {:?}",
            batch.images.shape(),
            batch.targets_pm.shape()
        )));
    }
    let n = batch.len();
    let times: Vec<f64> = (0..n)
        .map(|_| T_MIN + (1.0 - T_MIN) * rng.gen::<f64>())
        .collect();
    let mut alphas = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for &t in &times {
        let c = sched.coefficients(t)?;
        alphas.push(c.alpha as f32);
        sigmas.push(c.sigma as f32);
        weights.push(lw.weight(sched, t)? as f32);
    }

    let eps = Tensor::randn(batch.targets_pm.shape(), rng);
    let x_t = batch
        .targets_pm
        .mul_batch(&alphas)?
        .add(&eps.mul_batch(&sigmas)?)?;

    let pred = model.forward(&x_t, &batch.images, &times)?;
    let x0_hat = prediction_to_x0_rows(&pred, &x_t, &alphas, &sigmas, None)?;
    let sq = {
        let diff = batch.targets_pm.sub(&x0_hat)?;
        diff.mul(&diff)?
    };
    // mean over batch of w_i * (per-pixel mean of row i) equals the global
    // mean of the row-weighted squares.
    Ok(sq.mul_batch(&weights)?.mean_all())
}

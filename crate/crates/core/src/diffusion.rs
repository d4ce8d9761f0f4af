//! Noise schedules, the closed-form forward process, x̂₀ recovery and the
//! ancestral reverse sampler.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ensure_same_shape, per_item, randn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Per-step variances and their cumulative signal-retention products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be positive".into()));
        }
        let in_range = |b: f64| b.is_finite() && b > 0.0 && b < 1.0;
        if !in_range(beta_start) || !in_range(beta_end) {
            return Err(Error::Schedule(format!(
                "beta bounds must lie in (0, 1), got [{beta_start}, {beta_end}]"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::Schedule(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => {
                let span = beta_end - beta_start;
                let last = (steps - 1) as f64;
                (0..steps)
                    .map(|i| beta_start + span * i as f64 / last)
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::build(steps, beta_start, beta_end, ScheduleKind::Linear)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta array".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if *alpha_bars.last().unwrap() <= 0.0 {
            return Err(Error::Schedule("cumulative signal underflows to zero".into()));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// Coefficients of the Gaussian posterior mean `c0·x̂₀ + ct·x_t` at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t];
        let ab_prev = if t == 0 { 1.0 } else { self.alpha_bars[t - 1] };
        let c0 = ab_prev.sqrt() * self.betas[t] / (1.0 - ab);
        let ct = self.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct))
    }

    fn coefficient_columns(&self, t: &[usize], batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if t.len() != batch {
            return Err(shape_err(format!(
                "{} timesteps for a batch of {batch}",
                t.len()
            )));
        }
        let mut signal = Vec::with_capacity(batch);
        let mut noise = Vec::with_capacity(batch);
        for &ti in t {
            self.check_t(ti)?;
            let ab = self.alpha_bars[ti];
            assert!(ab > 0.0, "alpha_bar must stay positive");
            signal.push(ab.sqrt());
            noise.push((1.0 - ab).sqrt());
        }
        Ok((signal, noise))
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`, one timestep per batch item. No clamping.
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure_same_shape(x0, eps, "q_sample x0/eps")?;
    let batch = x0.dim(0)?;
    let (signal, noise) = sched.coefficient_columns(t, batch)?;
    let rank = x0.rank();
    let s = per_item(&signal, rank, x0.dtype(), x0.device())?;
    let n = per_item(&noise, rank, x0.dtype(), x0.device())?;
    Ok((x0.broadcast_mul(&s)? + eps.broadcast_mul(&n)?)?)
}

/// Algebraic inverse of [`q_sample`] given a noise estimate.
pub fn recover_x0(x_t: &Tensor, t: &[usize], eps_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure_same_shape(x_t, eps_pred, "recover_x0 x_t/eps_pred")?;
    let batch = x_t.dim(0)?;
    let (signal, noise) = sched.coefficient_columns(t, batch)?;
    let rank = x_t.rank();
    let inv_s: Vec<f64> = signal.iter().map(|s| 1.0 / s).collect();
    let inv_s = per_item(&inv_s, rank, x_t.dtype(), x_t.device())?;
    let n = per_item(&noise, rank, x_t.dtype(), x_t.device())?;
    Ok((x_t - eps_pred.broadcast_mul(&n)?)?.broadcast_mul(&inv_s)?)
}

/// A noise-prediction function with its conditioning already bound.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &[usize]) -> Result<Tensor>,
{
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self(x_t, t)
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SampleOptions {
    /// Clamp each x̂₀ estimate to [−1, 1] before forming the posterior mean.
    pub clamp_x0: bool,
}

/// Ancestral sampling from pure noise, `t = T−1 … 0`, with reverse variance `β_t`.
pub fn sample(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    seed: u64,
    shape: &[usize],
    options: SampleOptions,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(shape_err(format!("invalid sample shape {shape:?}")));
    }
    let batch = shape[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = randn(&mut rng, shape, dtype, device)?;
    for t in (0..sched.steps()).rev() {
        let ts = vec![t; batch];
        let eps = predictor.predict_noise(&x, &ts)?;
        if eps.dims() != shape {
            return Err(shape_err(format!(
                "denoiser returned {:?}, expected {shape:?}",
                eps.dims()
            )));
        }
        let mut x0 = recover_x0(&x, &ts, &eps, sched)?;
        if options.clamp_x0 {
            x0 = x0.clamp(-1.0, 1.0)?;
        }
        let (c0, ct) = sched.posterior_coefficients(t)?;
        let mean = ((x0 * c0)? + (&x * ct)?)?;
        // Weights are vars, so without the detach every step's graph stays reachable.
        x = if t > 0 {
            let z = randn(&mut rng, shape, dtype, device)?;
            (mean + (z * sched.betas()[t].sqrt())?)?
        } else {
            mean
        }
        .detach();
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, to_f64_vec};
    use proptest::prelude::*;

    fn cumprod_oracle(betas: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..betas.len() {
            let mut p = 1.0;
            for b in &betas[..=i] {
                p *= 1.0 - b;
            }
            out.push(p);
        }
        out
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn three_step_hand_product() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        for (got, want) in s.betas().iter().zip([0.1, 0.2, 0.3]) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn thousand_step_schedule_matches_oracle() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bars()[0] - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let oracle = cumprod_oracle(s.betas());
        for (a, b) in s.alpha_bars().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.2).is_err());
    }

    fn schedule_with_alpha_bar_quarter() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.75]).unwrap()
    }

    #[test]
    fn q_sample_hand_value_and_inverse() {
        let dev = Device::Cpu;
        let s = schedule_with_alpha_bar_quarter();
        let x0 = Tensor::new(&[[[[1.0f64]]]], &dev).unwrap();
        let eps = Tensor::new(&[[[[2.0f64]]]], &dev).unwrap();
        let xt = q_sample(&x0, &[0], &eps, &s).unwrap();
        let v = to_f64_vec(&xt).unwrap()[0];
        assert!((v - (0.5 + 0.75f64.sqrt() * 2.0)).abs() < 1e-12);
        assert!((v - 2.2320508).abs() < 1e-7);
        let back = recover_x0(&xt, &[0], &eps, &s).unwrap();
        assert!((to_f64_vec(&back).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_cases() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(10, 0.1, 0.3).unwrap();
        let x0 = Tensor::new(&[[[[0.3f64, -0.7]]], [[[0.1, 0.9]]]], &dev).unwrap();
        let zeros = x0.zeros_like().unwrap();
        let xt = q_sample(&x0, &[4, 7], &zeros, &s).unwrap();
        let got = to_f64_vec(&xt).unwrap();
        let want = [
            0.3 * s.alpha_bars()[4].sqrt(),
            -0.7 * s.alpha_bars()[4].sqrt(),
            0.1 * s.alpha_bars()[7].sqrt(),
            0.9 * s.alpha_bars()[7].sqrt(),
        ];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let r = recover_x0(&x0, &[4, 7], &zeros, &s).unwrap();
        let got = to_f64_vec(&r).unwrap();
        assert!((got[0] - 0.3 / s.alpha_bars()[4].sqrt()).abs() < 1e-12);
    }

    #[test]
    fn near_identity_step_stays_close() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(5, 1e-8, 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn(&mut rng, &[2, 3, 4, 4], DType::F64, &dev).unwrap();
        let eps = randn(&mut rng, &[2, 3, 4, 4], DType::F64, &dev).unwrap();
        let xt = q_sample(&x0, &[0, 0], &eps, &s).unwrap();
        let bound = (1.0 - s.alpha_bars()[0]).sqrt() * crate::tensor::scalar(&eps.abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap();
        assert!(max_abs_diff(&xt, &x0).unwrap() <= bound + 1e-6);
    }

    #[test]
    fn out_of_range_and_shape_errors() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        let x = Tensor::zeros((1, 1, 2, 2), DType::F32, &dev).unwrap();
        let y = Tensor::zeros((1, 1, 2, 3), DType::F32, &dev).unwrap();
        assert!(matches!(
            q_sample(&x, &[4], &x, &s),
            Err(Error::TimestepOutOfRange { t: 4, steps: 4 })
        ));
        assert!(matches!(q_sample(&x, &[0], &y, &s), Err(Error::Shape(_))));
        assert!(matches!(q_sample(&x, &[0, 1], &x, &s), Err(Error::Shape(_))));
        assert!(recover_x0(&x, &[9], &x, &s).is_err());
    }

    #[test]
    fn marginal_variance_matches_schedule() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let x0 = Tensor::zeros((n, 1, 1, 1), DType::F64, &dev).unwrap();
        let eps = randn(&mut rng, &[n, 1, 1, 1], DType::F64, &dev).unwrap();
        for t in [0usize, 10, 50, 99] {
            let xt = q_sample(&x0, &vec![t; n], &eps, &s).unwrap();
            let v = to_f64_vec(&xt).unwrap();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let want = 1.0 - s.alpha_bars()[t];
            assert!((var - want).abs() / want < 0.05, "t={t}: {var} vs {want}");
        }
    }

    #[test]
    fn sampler_is_deterministic_and_shaped() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(8, 1e-3, 0.1).unwrap();
        let pred = |x: &Tensor, _t: &[usize]| -> Result<Tensor> { Ok((x * 0.1)?) };
        for batch in [1usize, 3] {
            let shape = [batch, 3, 4, 4];
            let a = sample(&pred, &s, 5, &shape, SampleOptions::default(), DType::F32, &dev).unwrap();
            let b = sample(&pred, &s, 5, &shape, SampleOptions::default(), DType::F32, &dev).unwrap();
            assert_eq!(a.dims(), &shape);
            let va: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn single_step_sampler_inverts_true_noise() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let x0 = Tensor::new(&[[[[0.25f64, -0.5], [0.75, 0.0]]]], &dev).unwrap();
        let ab = s.alpha_bars()[0];
        let truth = x0.clone();
        let pred = move |x: &Tensor, _t: &[usize]| -> Result<Tensor> {
            Ok(((x - (&truth * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        };
        let out = sample(&pred, &s, 9, &[1, 1, 2, 2], SampleOptions::default(), DType::F64, &dev).unwrap();
        assert!(max_abs_diff(&out, &x0).unwrap() < 1e-4);
    }

    #[test]
    fn sampler_rejects_wrong_prediction_shape() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let pred = |x: &Tensor, _t: &[usize]| -> Result<Tensor> { Ok(x.narrow(3, 0, 1)?) };
        let r = sample(&pred, &s, 0, &[1, 1, 2, 2], SampleOptions::default(), DType::F32, &dev);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn clamp_flag_changes_only_out_of_range_estimates() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let pred = |x: &Tensor, _t: &[usize]| -> Result<Tensor> { Ok(x.zeros_like()?) };
        let free = sample(&pred, &s, 1, &[1, 1, 8, 8], SampleOptions { clamp_x0: false }, DType::F64, &dev).unwrap();
        let clamped = sample(&pred, &s, 1, &[1, 1, 8, 8], SampleOptions { clamp_x0: true }, DType::F64, &dev).unwrap();
        let m = crate::tensor::scalar(&clamped.abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap();
        assert!(m <= 1.0 + 1e-12);
        assert!(max_abs_diff(&free, &clamped).unwrap() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn recover_inverts_q_sample(seed in 0u64..10_000, t in 0usize..100) {
            let dev = Device::Cpu;
            let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = randn(&mut rng, &[2, 3, 4, 4], DType::F64, &dev).unwrap();
            let eps = randn(&mut rng, &[2, 3, 4, 4], DType::F64, &dev).unwrap();
            let xt = q_sample(&x0, &[t, 99 - t], &eps, &s).unwrap();
            let back = recover_x0(&xt, &[t, 99 - t], &eps, &s).unwrap();
            prop_assert!(max_abs_diff(&back, &x0).unwrap() < 1e-5);
        }
    }
}

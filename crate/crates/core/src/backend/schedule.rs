use super::BackendError;

/// Discrete forward-noising schedule with `abar_0 = 1`, so step 0 is the clean latent.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-variance schedule: beta rises linearly from `beta_start` (step 1) to `beta_end` (last step).
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(num_steps >= 2, "schedule needs at least two steps");
        let mut betas = vec![0.0; num_steps];
        for (t, beta) in betas.iter_mut().enumerate().skip(1) {
            let frac = (t - 1) as f64 / (num_steps - 2).max(1) as f64;
            *beta = beta_start + frac * (beta_end - beta_start);
        }
        let mut alpha_bars = Vec::with_capacity(num_steps);
        let mut acc = 1.0;
        for beta in &betas {
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `(signal weight, noise weight)` at step `t`.
    pub fn mixing(&self, t: usize) -> Result<(f64, f64), BackendError> {
        if t >= self.num_steps() {
            return Err(BackendError::Timestep {
                t,
                num_steps: self.num_steps(),
            });
        }
        let ab = self.alpha_bars[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Step at a fraction of the schedule, e.g. 0.5 -> the middle step.
    pub fn step_at(&self, fraction: f64) -> usize {
        ((self.num_steps() - 1) as f64 * fraction.clamp(0.0, 1.0)).round() as usize
    }
}

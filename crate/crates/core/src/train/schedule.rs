//! Piecewise-constant learning-rate schedules.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// 1e-3, then 1e-4 from step 10K, then 1e-5 from step 80K.
    CasiaB,
    /// 1e-3, then 1e-4 from step 50K, then 1e-5 from step 200K.
    OuMvlp,
    /// `base`, multiplied by `gamma` at each milestone reached.
    Custom {
        base: f64,
        milestones: Vec<u64>,
        gamma: f64,
    },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let (base, milestones, gamma): (f64, &[u64], f64) = match self {
            LrSchedule::CasiaB => (1e-3, &[10_000, 80_000], 0.1),
            LrSchedule::OuMvlp => (1e-3, &[50_000, 200_000], 0.1),
            LrSchedule::Custom {
                base,
                milestones,
                gamma,
            } => (*base, milestones, *gamma),
        };
        let passed = milestones.iter().filter(|&&m| step >= m).count();
        // Repeated division keeps the published values exact (1e-3 → 1e-4 → 1e-5).
        if gamma == 0.1 {
            (0..passed).fold(base, |lr, _| lr / 10.0)
        } else {
            base * gamma.powi(passed as i32)
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::CasiaB => "casia_b",
            LrSchedule::OuMvlp => "ou_mvlp",
            LrSchedule::Custom { .. } => "custom",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LrSchedule::Custom {
            base,
            milestones,
            gamma,
        } = self
        {
            if !(*base > 0.0 && base.is_finite() && *gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!(
                    "custom schedule needs positive lr and gamma, got {base} and {gamma}"
                )));
            }
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "schedule milestones {milestones:?} must be strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

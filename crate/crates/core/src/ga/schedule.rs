use crate::error::{Error, Result};
use crate::fitness::EpsilonSchedule;
use crate::ga::GaConfig;
use crate::scalar::Scalar;

/// `start + (end - start) * g / horizon`, exact at both endpoints.
pub fn schedule_linear<T: Scalar>(start: T, end: T, g: usize, horizon: usize) -> Result<T> {
    if g > horizon {
        return Err(Error::ScheduleExhausted {
            generation: g,
            horizon,
        });
    }
    if g == 0 {
        return Ok(start);
    }
    if g == horizon {
        return Ok(end);
    }
    Ok(start + (end - start) * T::from_usize_lossy(g) / T::from_usize_lossy(horizon))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: usize,
}

impl LinearSchedule {
    pub fn at(&self, g: usize) -> Result<f64> {
        schedule_linear(self.start, self.end, g, self.horizon)
    }
}

/// Operator rates and the norm budget in force at one generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationRates<T> {
    pub p_cross: f64,
    pub p_mut: f64,
    pub epsilon: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules<T> {
    pub crossover: LinearSchedule,
    pub mutation: LinearSchedule,
    pub epsilon: EpsilonSchedule<T>,
}

impl<T: Scalar> Schedules<T> {
    pub fn from_config(cfg: &GaConfig) -> Result<Self> {
        let horizon = cfg.horizon();
        Ok(Self {
            crossover: LinearSchedule {
                start: cfg.p_cross_start,
                end: cfg.p_cross_end,
                horizon,
            },
            mutation: LinearSchedule {
                start: cfg.p_mut_start,
                end: cfg.p_mut_end,
                horizon,
            },
            epsilon: EpsilonSchedule::new(T::lit(cfg.eps_start), T::lit(cfg.eps_end), horizon)?,
        })
    }

    pub fn at(&self, g: usize) -> Result<GenerationRates<T>> {
        Ok(GenerationRates {
            p_cross: self.crossover.at(g)?,
            p_mut: self.mutation.at(g)?,
            epsilon: self.epsilon.at(g)?,
        })
    }
}

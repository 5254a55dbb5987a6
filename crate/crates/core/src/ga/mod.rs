//! Float-coded genetic search without elitism.

mod checkpoint;
mod config;
mod engine;
mod operators;
mod schedule;

pub use checkpoint::{Checkpoint, ConvergenceState, RngState};
pub use config::GaConfig;
pub use engine::{
    best_index, breed_pair, step_generation, BatchProvider, Engine, GenerationObserver, Population, RunFailure,
    RunResult, TerminationReason,
};
pub use operators::{
    init_population, mutate, pixel_clean, pixel_clean_with_report, random_chromosome, tournament_select,
    tournament_winner, uniform_crossover,
};
pub use schedule::{schedule_linear, GenerationRates, LinearSchedule, Schedules};

//! Multiscale finite elements for the acoustic wave equation.
//!
//! The crate builds a problem-adapted coarse space from localized corrector
//! problems on top of a fine Q1 discretization and time-steps the wave
//! equation in that space with a θ-weighted two-step scheme.

pub mod coarse;
pub mod coefficient;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod multiscale;
pub mod reference;
pub mod wave;

pub use error::{Error, Result};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// The output order always matches the input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Wall-clock timer; always reads zero on targets without a clock.
#[derive(Clone, Copy, Debug)]
pub struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

//! Seeded Brownian sampling.
//!
//! The generator is ChaCha20 (`rand_chacha::ChaCha20Rng`), a counter-based
//! stream cipher RNG. The 64-bit `seed` is expanded to a 256-bit key by
//! `SeedableRng::seed_from_u64`; independent replicates use the same key
//! with distinct 64-bit stream ids (`set_stream`), so replicate `k` of seed
//! `s` never overlaps replicate `j != k`. Gaussian variates come from
//! `rand_distr::StandardNormal` (ziggurat), drawn node by node and component
//! by component. Output is bit-reproducible for a given seed and stream.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::{ObservationPath, SampledPath, TimeGrid};
use crate::{Error, Result};

/// The generator for `(seed, stream)`.
pub fn wiener_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard `dim`-dimensional Wiener path with `W(0) = 0`, stream 0.
pub fn sample_wiener(grid: TimeGrid, dim: usize, seed: u64) -> SampledPath {
    sample_wiener_stream(grid, dim, seed, 0)
}

pub fn sample_wiener_stream(grid: TimeGrid, dim: usize, seed: u64, stream: u64) -> SampledPath {
    let mut rng = wiener_rng(seed, stream);
    let sd = grid.dt().sqrt();
    let mut w = DVector::zeros(dim);
    let mut values = Vec::with_capacity(grid.n_nodes());
    values.push(w.clone());
    for _ in 0..grid.n_steps() {
        for c in w.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *c += sd * z;
        }
        values.push(w.clone());
    }
    SampledPath::from_parts_unchecked(grid, dim, values)
}

/// `eta(t_i) = zeta(t_i) + noise_scale * W(t_i)` with `W` drawn from `seed`.
pub fn build_observation(zeta: &SampledPath, noise_scale: f64, seed: u64) -> Result<ObservationPath> {
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise_scale must be nonnegative, got {noise_scale}"
        )));
    }
    let path = if noise_scale == 0.0 {
        zeta.clone()
    } else {
        let w = sample_wiener(*zeta.grid(), zeta.dim(), seed);
        let values = zeta
            .values()
            .iter()
            .zip(w.values())
            .map(|(z, w)| z + w * noise_scale)
            .collect();
        SampledPath::new(*zeta.grid(), values)?
    };
    Ok(ObservationPath {
        path,
        seed,
        noise_scale,
    })
}

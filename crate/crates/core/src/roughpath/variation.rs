use super::SampledPath;
use crate::{Error, Result};

/// Largest step count [`p_variation`] accepts; the dynamic program is O(N^2).
pub const MAX_VARIATION_STEPS: usize = 4096;

/// Exact p-variation over all dissections built from grid nodes.
///
/// `V[j] = max_{i<j} (V[i] + |y(t_j) - y(t_i)|^p)` with `V[0] = 0`; the
/// result is `V[N]^(1/p)`. Costs O(N^2 * dim) time and O(N) memory, so grids
/// above [`MAX_VARIATION_STEPS`] are rejected; use [`p_variation_capped`] to
/// raise the limit explicitly.
pub fn p_variation(path: &SampledPath, p: f64) -> Result<f64> {
    p_variation_capped(path, p, MAX_VARIATION_STEPS)
}

pub fn p_variation_capped(path: &SampledPath, p: f64, max_steps: usize) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidParameter(format!("p-variation needs p >= 1, got {p}")));
    }
    let n = path.grid().n_steps();
    if n > max_steps {
        return Err(Error::InvalidParameter(format!(
            "p-variation on {n} steps exceeds the cap of {max_steps}"
        )));
    }
    let dim = path.dim();
    let flat: Vec<f64> = path.values().iter().flat_map(|v| v.iter().copied()).collect();
    let node = |i: usize| &flat[i * dim..(i + 1) * dim];

    let nodes = n + 1;
    let mut best = vec![0.0_f64; nodes];
    for j in 1..nodes {
        let yj = node(j);
        let mut acc = f64::NEG_INFINITY;
        for (i, &vi) in best.iter().enumerate().take(j) {
            let d2: f64 = node(i).iter().zip(yj).map(|(a, b)| (b - a) * (b - a)).sum();
            let cand = vi + pow_of_norm(d2, p);
            if cand > acc {
                acc = cand;
            }
        }
        best[j] = acc;
    }
    Ok(best[n].powf(1.0 / p))
}

/// `|d|^p` given `|d|^2`.
#[inline]
fn pow_of_norm(d2: f64, p: f64) -> f64 {
    if d2 == 0.0 {
        0.0
    } else if p == 2.0 {
        d2
    } else if p == 1.0 {
        d2.sqrt()
    } else {
        d2.powf(0.5 * p)
    }
}

/// `sup_{s,t} |y(t) - y(s)|` over grid nodes.
pub fn oscillation(path: &SampledPath) -> f64 {
    let v = path.values();
    let mut osc = 0.0_f64;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            osc = osc.max((&v[j] - &v[i]).norm());
        }
    }
    osc
}

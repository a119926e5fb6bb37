//! Negative SI-SDR as a graph loss.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Added to both energies so a silent estimate yields a finite loss.
pub const LOSS_EPS: f64 = 1e-8;

/// `-ρ(ŷ, y)` in dB, built from primitive ops so it differentiates through
/// the projection coefficient as well as the residual.
pub fn neg_si_sdr<T: Real>(g: &mut Graph<T>, estimate: Var, reference: &[T]) -> Result<Var> {
    let shape = g.shape(estimate).to_vec();
    let energy: f64 = reference.iter().map(|v| v.as_f64() * v.as_f64()).sum();
    if energy == 0.0 {
        return Err(Error::DegenerateSignal("silent reference in loss".into()));
    }
    let y = g.constant(Tensor::new(shape, reference.to_vec())?);
    let prod = g.mul(estimate, y)?;
    let dot = g.sum(prod);
    let alpha = g.scale(dot, T::from_f64_lossy(1.0 / energy));
    let proj = g.scalar_mul(alpha, y)?;
    let resid = g.sub(proj, estimate)?;
    let eps = g.constant(Tensor::scalar(T::from_f64_lossy(LOSS_EPS)));
    let num = {
        let sq = g.square(proj);
        let s = g.sum(sq);
        g.add(s, eps)?
    };
    let den = {
        let sq = g.square(resid);
        let s = g.sum(sq);
        g.add(s, eps)?
    };
    let (ln_num, ln_den) = (g.log(num), g.log(den));
    let diff = g.sub(ln_den, ln_num)?;
    Ok(g.scale(diff, T::from_f64_lossy(10.0 / std::f64::consts::LN_10)))
}

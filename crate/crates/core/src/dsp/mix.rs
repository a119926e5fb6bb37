use super::{check_pair, Waveform};
use crate::error::{Error, Result};

pub fn rms(w: &Waveform) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    (w.energy() / w.len() as f64).sqrt()
}

/// `10·log10(‖signal‖² / ‖noise‖²)`.
pub fn snr_db(signal: &Waveform, noise: &Waveform) -> f64 {
    10.0 * (signal.energy() / noise.energy()).log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    pub scaled_interferer: Waveform,
    /// Gain applied to the interferer.
    pub gain: f64,
}

/// Adds `interferer` to `target`, rescaled so the target-to-interferer
/// power ratio is exactly `snr_db`.
pub fn mix_at_snr(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<Mixture> {
    check_pair(target, interferer)?;
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!("SNR {snr_db} is not finite")));
    }
    let (rt, ri) = (rms(target), rms(interferer));
    if rt == 0.0 {
        return Err(Error::DegenerateSignal("target is silent".into()));
    }
    if ri == 0.0 {
        return Err(Error::DegenerateSignal("interferer is silent".into()));
    }
    let gain = (rt / ri) * 10f64.powf(-snr_db / 20.0);
    let scaled_interferer = interferer.scaled(gain);
    let mixture = target.add(&scaled_interferer)?;
    Ok(Mixture {
        mixture,
        scaled_interferer,
        gain,
    })
}

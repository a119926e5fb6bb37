//! Rational-ratio resampling with a Kaiser-windowed sinc polyphase filter.

use std::f64::consts::PI;

const ZERO_CROSSINGS: f64 = 16.0;
const KAISER_BETA: f64 = 8.0;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Resamples `x` from `from` Hz to `to` Hz. Output length is
/// `ceil(len · to / from)`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    assert!(from > 0 && to > 0, "sample rates must be positive");
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(from, to);
    let up = (to / g) as usize;
    let down = (from / g) as usize;
    // Cutoff relative to the input Nyquist frequency.
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let reach = half_width.ceil() as isize;
    let i0_beta = bessel_i0(KAISER_BETA);

    // One tap table per fractional phase p/up.
    let taps_per_phase = (2 * reach + 1) as usize;
    let table: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps_per_phase)
                .map(|i| {
                    let offset = i as isize - reach;
                    let tau = frac - offset as f64;
                    let r = tau / half_width;
                    if r.abs() > 1.0 {
                        0.0
                    } else {
                        let win = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                        cutoff * sinc(cutoff * tau) * win
                    }
                })
                .collect()
        })
        .collect();

    let out_len = (x.len() * up).div_ceil(down);
    let n_in = x.len() as isize;
    (0..out_len)
        .map(|n| {
            let pos = n * down;
            let base = (pos / up) as isize;
            let taps = &table[pos % up];
            let mut acc = 0.0;
            for (i, &h) in taps.iter().enumerate() {
                let j = base + i as isize - reach;
                if j >= 0 && j < n_in {
                    acc += h * x[j as usize];
                }
            }
            acc
        })
        .collect()
}

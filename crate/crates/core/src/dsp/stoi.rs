//! Short-time objective intelligibility.
//!
//! Standard recipe: resample to 10 kHz, drop frames more than 40 dB below
//! the loudest reference frame, 256-sample Hann STFT (hop 128, 512-point
//! FFT), 15 one-third-octave bands from 150 Hz, 30-frame (384 ms)
//! segments, clipping at -15 dB signal-to-distortion, and the mean
//! normalized correlation over bands and segments.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{check_pair, resample, MetricName, MetricValue, Waveform};
use crate::error::{Error, Result};

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// `numpy.hanning(FRAME + 2)[1:-1]`.
fn hann() -> Vec<f64> {
    let m = FRAME + 2;
    (1..=FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (m - 1) as f64).cos())
        .collect()
}

/// Frame start offsets `0, hop, ...` strictly below `len - FRAME`.
fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

fn remove_silent_frames(x: &[f64], y: &[f64], win: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let frames: Vec<usize> = frame_starts(x.len()).collect();
    let energies: Vec<f64> = frames
        .iter()
        .map(|&s| {
            let e: f64 = x[s..s + FRAME]
                .iter()
                .zip(win)
                .map(|(v, w)| (v * w) * (v * w))
                .sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = frames
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * HOP + FRAME;
    let mut xo = vec![0.0; out_len];
    let mut yo = vec![0.0; out_len];
    for (k, &s) in kept.iter().enumerate() {
        let o = k * HOP;
        for i in 0..FRAME {
            xo[o + i] += x[s + i] * win[i];
            yo[o + i] += y[s + i] * win[i];
        }
    }
    (xo, yo)
}

/// Magnitude-squared one-sided spectra, one row per frame.
fn power_spectra(x: &[f64], win: &[f64], planner: &mut FftPlanner<f64>) -> Vec<Vec<f64>> {
    let fft = planner.plan_fft_forward(NFFT);
    frame_starts(x.len())
        .map(|s| {
            let mut buf: Vec<Complex<f64>> = (0..NFFT)
                .map(|i| {
                    let v = if i < FRAME { x[s + i] * win[i] } else { 0.0 };
                    Complex::new(v, 0.0)
                })
                .collect();
            fft.process(&mut buf);
            buf[..=NFFT / 2].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Inclusive-exclusive bin ranges of the one-third-octave bands.
fn band_bins() -> Vec<(usize, usize)> {
    let bins = NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|i| i as f64 * STOI_RATE as f64 / NFFT as f64)
        .collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        for (i, f) in freqs.iter().enumerate() {
            if (f - target).powi(2) < (freqs[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn band_envelopes(spectra: &[Vec<f64>], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    bands
        .iter()
        .map(|&(lo, hi)| {
            spectra
                .iter()
                .map(|frame| frame[lo..hi].iter().sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn center_and_normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let n = norm(v) + EPS;
    v.iter_mut().for_each(|x| *x /= n);
}

/// STOI of `estimate` against the clean `reference`.
pub fn stoi(estimate: &Waveform, reference: &Waveform) -> Result<MetricValue> {
    check_pair(estimate, reference)?;
    let min_len = (0.384 * reference.sample_rate() as f64).ceil() as usize;
    if reference.len() < min_len {
        return Err(Error::TooShort(format!(
            "STOI needs at least 384 ms, got {:.1} ms",
            reference.duration_s() * 1000.0
        )));
    }
    let rate = reference.sample_rate();
    let x = resample(reference.samples(), rate, STOI_RATE);
    let y = resample(estimate.samples(), rate, STOI_RATE);
    let win = hann();
    let (x, y) = remove_silent_frames(&x, &y, &win);

    let mut planner = FftPlanner::new();
    let xs = power_spectra(&x, &win, &mut planner);
    let ys = power_spectra(&y, &win, &mut planner);
    if xs.len() < SEGMENT {
        return Err(Error::TooShort(format!(
            "only {} non-silent STFT frames, need {SEGMENT}",
            xs.len()
        )));
    }
    let bands = band_bins();
    let xb = band_envelopes(&xs, &bands);
    let yb = band_envelopes(&ys, &bands);

    let clip = 10f64.powf(-BETA_DB / 20.0);
    let segments = xs.len() - SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..segments {
        for (xr, yr) in xb.iter().zip(&yb) {
            let xseg = &xr[m..m + SEGMENT];
            let yseg = &yr[m..m + SEGMENT];
            let scale = norm(xseg) / (norm(yseg) + EPS);
            let mut yp: Vec<f64> = yseg
                .iter()
                .zip(xseg)
                .map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip)))
                .collect();
            let mut xn = xseg.to_vec();
            center_and_normalize(&mut yp);
            center_and_normalize(&mut xn);
            total += yp.iter().zip(&xn).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(MetricValue {
        name: MetricName::Stoi,
        value: total / (segments * BANDS) as f64,
    })
}

//! Viseme-driven formant synthesizer and the matching visual features.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, IDENTITY, LIP, UPPER, VISUAL_FEATURES};
use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::FeatureFrames;

pub const VISEME_CLASSES: usize = 8;
pub const MEAN_DWELL_MS: f64 = 120.0;
pub const DEFAULT_FPS: u32 = 25;
pub const MIN_DURATION_S: f64 = 0.5;
const MIN_DWELL_MS: f64 = 40.0;
const SILENCE_PROB: f64 = 0.25;
const TARGET_RMS: f64 = 0.1;
const SMOOTH_S: f64 = 0.012;
const ENVELOPE_S: f64 = 0.15;

/// Acoustic and visual targets of one viseme class. Class 0 is silence.
struct Viseme {
    formants: [f64; 3],
    amplitude: f64,
    voicing: f64,
    noise: f64,
    opening: f64,
}

const VISEMES: [Viseme; VISEME_CLASSES] = [
    Viseme { formants: [500.0, 1500.0, 2500.0], amplitude: 0.0, voicing: 0.0, noise: 0.0, opening: 0.0 },
    Viseme { formants: [730.0, 1090.0, 2440.0], amplitude: 1.0, voicing: 1.0, noise: 0.03, opening: 1.0 },
    Viseme { formants: [270.0, 2290.0, 3010.0], amplitude: 0.9, voicing: 1.0, noise: 0.03, opening: 0.35 },
    Viseme { formants: [300.0, 870.0, 2240.0], amplitude: 0.85, voicing: 1.0, noise: 0.03, opening: 0.3 },
    Viseme { formants: [530.0, 1840.0, 2480.0], amplitude: 0.95, voicing: 1.0, noise: 0.03, opening: 0.6 },
    Viseme { formants: [570.0, 840.0, 2410.0], amplitude: 0.95, voicing: 1.0, noise: 0.03, opening: 0.7 },
    Viseme { formants: [2500.0, 3000.0, 3400.0], amplitude: 0.5, voicing: 0.0, noise: 1.0, opening: 0.2 },
    Viseme { formants: [250.0, 1100.0, 2300.0], amplitude: 0.45, voicing: 1.0, noise: 0.0, opening: 0.0 },
];

const FORMANT_BANDWIDTH: [f64; 3] = [90.0, 130.0, 200.0];
const FORMANT_GAIN: [f64; 3] = [1.0, 0.6, 0.3];

/// A synthetic talker. Every field follows from `seed`; pitch and formant
/// scale are functions of the identity vector, so the identity channels of
/// the visual stream carry real acoustic information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: u32,
    pub seed: u64,
    pub base_pitch_hz: f64,
    pub formant_scale: f64,
    /// Per-formant multiplicative offsets around `formant_scale`.
    pub formant_offsets: [f64; 3],
    pub lip_gain: f64,
    pub identity: [f64; 4],
}

impl SpeakerProfile {
    pub fn from_seed(id: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identity: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        Self {
            id,
            seed,
            base_pitch_hz: 100.0 + 70.0 * (identity[0] + 1.0),
            formant_scale: 0.88 + 0.12 * (identity[1] + 1.0),
            formant_offsets: std::array::from_fn(|_| rng.random_range(0.96..1.04)),
            lip_gain: rng.random_range(0.85..1.15),
            identity,
        }
    }
}

/// Waveform and clean visual features generated from one viseme sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub waveform: Waveform,
    pub frames: FeatureFrames,
    pub speaker: u32,
}

/// Second-order resonator with unit peak gain.
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bandwidth: f64, sr: f64) -> f64 {
        let r = (-PI * bandwidth / sr).exp();
        let theta = 2.0 * PI * freq / sr;
        let y = (1.0 - r) * x + 2.0 * r * theta.cos() * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn viseme_track(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut track = Vec::with_capacity(len);
    let lead = (rng.random_range(0.0..0.2) * sr) as usize;
    track.resize(lead.min(len), 0u8);
    let mut class = rng.random_range(1..VISEME_CLASSES) as u8;
    while track.len() < len {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let dwell_ms = MIN_DWELL_MS - (MEAN_DWELL_MS - MIN_DWELL_MS) * u.ln();
        let n = ((dwell_ms / 1000.0 * sr) as usize).max(1);
        let end = (track.len() + n).min(len);
        track.resize(end, class);
        class = if class != 0 && rng.random_bool(SILENCE_PROB) {
            0
        } else if class == 0 {
            rng.random_range(1..VISEME_CLASSES) as u8
        } else {
            let next = rng.random_range(1..VISEME_CLASSES - 1) as u8;
            next + (next >= class) as u8
        };
    }
    track
}

fn smoother(tau_s: f64, sr: f64) -> f64 {
    1.0 - (-1.0 / (tau_s * sr)).exp()
}

/// [`gen_utterance_at`] at 8 kHz and 25 frames per second.
pub fn gen_utterance(profile: &SpeakerProfile, duration_s: f64, seed: u64) -> Result<Utterance> {
    gen_utterance_at(profile, duration_s, seed, DEFAULT_SAMPLE_RATE, DEFAULT_FPS)
}

pub fn gen_utterance_at(
    profile: &SpeakerProfile,
    duration_s: f64,
    seed: u64,
    sample_rate: u32,
    fps: u32,
) -> Result<Utterance> {
    if !(duration_s >= MIN_DURATION_S) {
        return Err(Error::TooShort(format!(
            "utterances need at least {MIN_DURATION_S} s, got {duration_s}"
        )));
    }
    if sample_rate == 0 || fps == 0 {
        return Err(Error::Parameter("sample rate and fps must be positive".into()));
    }
    let sr = sample_rate as f64;
    let len = (duration_s * sr).round() as usize;
    let n_frames = (duration_s * fps as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(profile.seed, seed));
    let track = viseme_track(len, sr, &mut rng);

    let nyquist_guard = 0.45 * sr;
    let a_fast = smoother(SMOOTH_S, sr);
    let a_env = smoother(ENVELOPE_S, sr);
    let vibrato_hz = rng.random_range(0.4..1.2);
    let vibrato_phase = rng.random_range(0.0..2.0 * PI);
    let mut res = [Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }];
    let mut fric = Resonator { y1: 0.0, y2: 0.0 };
    let first = &VISEMES[track[0] as usize];
    let (mut formants, mut amp, mut voicing, mut noise, mut opening) =
        (first.formants, 0.0, 0.0, 0.0, 0.0);
    let mut envelope = 0.0;
    let mut phase = 0.0;

    let mut samples = vec![0.0; len];
    let mut opening_track = vec![0.0; len];
    let mut envelope_track = vec![0.0; len];
    let mut pitch_track = vec![0.0; len];
    for i in 0..len {
        let v = &VISEMES[track[i] as usize];
        for k in 0..3 {
            formants[k] += a_fast * (v.formants[k] - formants[k]);
        }
        amp += a_fast * (v.amplitude - amp);
        voicing += a_fast * (v.voicing - voicing);
        noise += a_fast * (v.noise - noise);
        opening += a_fast * (v.opening - opening);

        let t = i as f64 / sr;
        let declination = 1.0 - 0.1 * t / duration_s;
        let wobble = 1.0 + 0.06 * (2.0 * PI * vibrato_hz * t + vibrato_phase).sin();
        let f0 = profile.base_pitch_hz * wobble * declination;
        phase += f0 / sr;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        let white: f64 = rng.random_range(-1.0..1.0);
        let excitation = voicing * pulse * 4.0 + noise * white * 0.5;
        let mut y = 0.0;
        for k in 0..3 {
            let f = (formants[k] * profile.formant_scale * profile.formant_offsets[k]).min(nyquist_guard);
            y += FORMANT_GAIN[k] * res[k].step(excitation, f, FORMANT_BANDWIDTH[k], sr);
        }
        let hiss = fric.step(noise * white, (3200.0 * profile.formant_scale).min(nyquist_guard), 700.0, sr);
        let s = amp * (y + 0.8 * hiss);
        samples[i] = s;
        envelope += a_env * (s.abs() - envelope);
        opening_track[i] = opening;
        envelope_track[i] = envelope;
        pitch_track[i] = voicing * (wobble * declination - 1.0);
    }

    let rms = (samples.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    let gain = if rms > 0.0 { TARGET_RMS / rms } else { 0.0 };
    samples.iter_mut().for_each(|x| *x *= gain);
    let env_peak = envelope_track.iter().copied().fold(0.0, f64::max);
    let env_norm = if env_peak > 0.0 { 1.0 / env_peak } else { 0.0 };

    let mut frames = FeatureFrames::zeros(n_frames, VISUAL_FEATURES);
    let blink_every = rng.random_range(2.0..4.0);
    let blink_phase = rng.random_range(0.0..blink_every);
    let mut prev_env = 0.0;
    for f in 0..n_frames {
        let lo = (f * len / n_frames).min(len);
        let hi = ((f + 1) * len / n_frames).max(lo + 1).min(len);
        let span = (hi - lo).max(1) as f64;
        let frame = frames.frame_mut(f);
        let mut counts = [0usize; VISEME_CLASSES];
        for &c in &track[lo..hi] {
            counts[c as usize] += 1;
        }
        let g = profile.lip_gain;
        for c in 1..VISEME_CLASSES {
            frame[LIP.start + c - 1] = (g * counts[c] as f64 / span) as f32;
        }
        let mean = |x: &[f64]| x[lo..hi].iter().sum::<f64>() / span;
        frame[LIP.end - 1] = (g * mean(&opening_track)) as f32;

        let env = mean(&envelope_track) * env_norm;
        let t = f as f64 / fps as f64;
        let blink = ((t + blink_phase) % blink_every) < 0.12;
        frame[UPPER.start] = env as f32;
        frame[UPPER.start + 1] = (10.0 * mean(&pitch_track)) as f32;
        frame[UPPER.start + 2] = if blink { 1.0 } else { 0.0 };
        frame[UPPER.start + 3] = (5.0 * (env - prev_env)) as f32;
        prev_env = env;
        for (k, &x) in profile.identity.iter().enumerate() {
            frame[IDENTITY.start + k] = x as f32;
        }
    }

    Ok(Utterance {
        waveform: Waveform::new(samples, sample_rate)?,
        frames,
        speaker: profile.id,
    })
}

/// Pearson correlation between per-frame lip-block energy and the audio
/// energy over the same frame spans.
pub fn lip_audio_correlation(u: &Utterance) -> f64 {
    let n = u.frames.frames();
    let x = u.waveform.samples();
    let len = x.len();
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for f in 0..n {
        let lo = f * len / n;
        let hi = ((f + 1) * len / n).max(lo + 1).min(len);
        a.push(x[lo..hi].iter().map(|v| v * v).sum::<f64>());
        b.push(u.frames.frame(f)[LIP].iter().map(|&v| (v as f64).powi(2)).sum::<f64>());
    }
    pearson(&a, &b)
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

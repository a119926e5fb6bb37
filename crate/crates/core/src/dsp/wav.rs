//! 16-bit PCM mono WAV files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        // The file is already open, so read failures mean short data.
        hound::Error::IoError(io) => {
            Error::MalformedWav(format!("{}: truncated data ({io})", path.display()))
        }
        hound::Error::Unsupported => {
            Error::UnsupportedWav(format!("{}: unsupported encoding", path.display()))
        }
        other => Error::MalformedWav(format!("{}: {other}", path.display())),
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedWav(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedWav(format!(
            "{}: {}-bit {:?}, only 16-bit PCM is supported",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let expected = reader.duration() as usize;
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| map_hound(path, e))?;
    if samples.len() != expected {
        return Err(Error::MalformedWav(format!(
            "{}: header declares {expected} samples, found {}",
            path.display(),
            samples.len()
        )));
    }
    Waveform::new(samples, spec.sample_rate)
}

fn map_write(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedWav(format!("{}: {other}", path.display())),
    }
}

/// Writes `w` as 16-bit PCM, rounding to the nearest step and clamping to
/// full scale.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer =
        hound::WavWriter::new(BufWriter::new(file), spec).map_err(|e| map_write(path, e))?;
    for &v in w.samples() {
        let q = (v * FULL_SCALE).round().clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16;
        writer.write_sample(q).map_err(|e| map_write(path, e))?;
    }
    writer.finalize().map_err(|e| map_write(path, e))
}

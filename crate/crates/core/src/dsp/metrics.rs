use std::fmt;

use serde::{Deserialize, Serialize};

use super::{check_pair, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "SI-SDR")]
    SiSdr,
    #[serde(rename = "SDR")]
    Sdr,
    #[serde(rename = "STOI")]
    Stoi,
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricName::SiSdr => "SI-SDR",
            MetricName::Sdr => "SDR",
            MetricName::Stoi => "STOI",
        })
    }
}

/// A metric result. Perfect reconstruction is reported as `+inf` with
/// `infinite` set; JSON carries `"value": null` in that case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub name: MetricName,
    pub value: f64,
}

impl MetricValue {
    pub fn is_infinite(&self) -> bool {
        self.value == f64::INFINITY
    }
}

#[derive(Serialize, Deserialize)]
struct MetricRecord {
    name: MetricName,
    value: Option<f64>,
    infinite: bool,
}

impl Serialize for MetricValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MetricRecord {
            name: self.name,
            value: (!self.is_infinite()).then_some(self.value),
            infinite: self.is_infinite(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MetricRecord::deserialize(d)?;
        let value = match (r.infinite, r.value) {
            (true, _) => f64::INFINITY,
            (false, Some(v)) => v,
            (false, None) => return Err(serde::de::Error::custom("finite metric without value")),
        };
        Ok(MetricValue {
            name: r.name,
            value,
        })
    }
}

fn check_reference(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(estimate, reference)?;
    if reference.is_empty() {
        return Err(Error::Empty("zero-length signals".into()));
    }
    let energy = reference.energy();
    if energy == 0.0 {
        return Err(Error::DegenerateSignal("reference is silent".into()));
    }
    Ok(energy)
}

fn power_ratio_db(signal: f64, residual: f64) -> f64 {
    if residual == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / residual).log10()
    }
}

/// Scale-invariant SDR: the estimate is projected onto the reference and
/// the projection is compared with what remains. No mean removal.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<MetricValue> {
    let ref_energy = check_reference(estimate, reference)?;
    let (est, refs) = (estimate.samples(), reference.samples());
    let dot: f64 = est.iter().zip(refs).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;
    let mut target = 0.0;
    let mut residual = 0.0;
    for (&e, &r) in est.iter().zip(refs) {
        let p = alpha * r;
        target += p * p;
        residual += (p - e) * (p - e);
    }
    Ok(MetricValue {
        name: MetricName::SiSdr,
        value: power_ratio_db(target, residual),
    })
}

/// Plain signal-to-distortion ratio without any allowed distortion filter.
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<MetricValue> {
    let ref_energy = check_reference(estimate, reference)?;
    let residual: f64 = estimate
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| (r - e) * (r - e))
        .sum();
    Ok(MetricValue {
        name: MetricName::Sdr,
        value: power_ratio_db(ref_energy, residual),
    })
}

//! Corpus generation, on-disk layout and loading.
//!
//! ```text
//! <root>/manifest.json
//! <root>/{train,val,test}/<item_id>/{mix,target,interf}.wav
//! <root>/{train,val,test}/<item_id>/{visual_orig,visual_pi}.bin
//! ```
//!
//! Feature files hold `n` and `v` as little-endian `u32`, then `n·v`
//! little-endian `f32` values, frame-major.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gen_utterance_at, mix_seed, pose_invariant_view, SpeakerProfile, ViewLevel};
use crate::dsp::{mix_at_snr, read_wav, write_wav, Waveform};
use crate::error::{Error, Result};
use crate::model::FeatureFrames;

pub const MANIFEST_VERSION: u32 = 1;
const PEAK_LIMIT: f64 = 0.9;
const SPEAKER_SALT: u64 = 0x5_0ea_4e25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive SNR range in dB.
    pub snr_range: [f64; 2],
    pub duration_s: f64,
    pub seed: u64,
    pub sample_rate: u32,
    pub fps: u32,
    /// Half-open speaker id ranges `[start, end)` per split.
    pub train_speakers: [u32; 2],
    pub val_speakers: [u32; 2],
    pub test_speakers: [u32; 2],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            snr_range: [-10.0, 10.0],
            duration_s: 3.0,
            seed: 0,
            sample_rate: crate::dsp::DEFAULT_SAMPLE_RATE,
            fps: super::DEFAULT_FPS,
            train_speakers: [0, 50],
            val_speakers: [50, 60],
            test_speakers: [60, 70],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("invalid SNR range [{lo}, {hi}]")));
        }
        if !(self.duration_s >= super::MIN_DURATION_S) {
            return Err(Error::Config(format!(
                "duration_s must be at least {}",
                super::MIN_DURATION_S
            )));
        }
        if self.sample_rate == 0 || self.fps == 0 {
            return Err(Error::Config("sample_rate and fps must be positive".into()));
        }
        let pools = [
            ("train", self.train_speakers),
            ("val", self.val_speakers),
            ("test", self.test_speakers),
        ];
        for (name, [a, b]) in pools {
            if b < a + 2 {
                return Err(Error::Config(format!(
                    "{name} speaker pool [{a}, {b}) needs at least two speakers"
                )));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let ([a0, a1], [b0, b1]) = (pools[i].1, pools[j].1);
                if a0 < b1 && b0 < a1 {
                    return Err(Error::Config(format!(
                        "{} and {} speaker pools overlap",
                        pools[i].0, pools[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn pool(&self, split: Split) -> std::ops::Range<u32> {
        let [a, b] = match split {
            Split::Train => self.train_speakers,
            Split::Val => self.val_speakers,
            Split::Test => self.test_speakers,
        };
        a..b
    }

    pub fn speaker(&self, id: u32) -> SpeakerProfile {
        SpeakerProfile::from_seed(id, mix_seed(self.seed ^ SPEAKER_SALT, id as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub snr_db: f64,
    pub target_speaker: u32,
    pub interferer_speaker: u32,
    /// View of the stored original stream.
    pub view: ViewLevel,
    pub samples: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn items(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn speakers(&self, split: Split) -> std::collections::BTreeSet<u32> {
        self.items(split)
            .flat_map(|i| [i.target_speaker, i.interferer_speaker])
            .collect()
    }
}

/// One mixture with its references and both visual streams, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedItem {
    pub meta: ManifestItem,
    pub mixture: Waveform,
    pub target: Waveform,
    pub interferer: Waveform,
    pub original: FeatureFrames,
    pub pose_invariant: FeatureFrames,
}

/// Generates item `index` of `split`; a pure function of the config.
pub fn gen_item(config: &CorpusConfig, split: Split, index: usize) -> Result<GeneratedItem> {
    let seed = mix_seed(mix_seed(config.seed, split as u64 + 1), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = config.pool(split);
    let target_id = rng.random_range(pool.clone());
    let mut interferer_id = rng.random_range(pool.start..pool.end - 1);
    if interferer_id >= target_id {
        interferer_id += 1;
    }
    let [lo, hi] = config.snr_range;
    let snr_db = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (ts, is) = (rng.random::<u64>(), rng.random::<u64>());

    let fmt = (config.duration_s, config.sample_rate, config.fps);
    let target = gen_utterance_at(&config.speaker(target_id), fmt.0, ts, fmt.1, fmt.2)?;
    let interferer = gen_utterance_at(&config.speaker(interferer_id), fmt.0, is, fmt.1, fmt.2)?;
    let mix = mix_at_snr(&target.waveform, &interferer.waveform, snr_db)?;

    let peak = [&mix.mixture, &target.waveform, &mix.scaled_interferer]
        .iter()
        .flat_map(|w| w.samples())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };

    let meta = ManifestItem {
        id: format!("{}_{index:05}", split.name()),
        split,
        seed,
        snr_db,
        target_speaker: target_id,
        interferer_speaker: interferer_id,
        view: ViewLevel::Front,
        samples: target.waveform.len(),
        frames: target.frames.frames(),
    };
    Ok(GeneratedItem {
        meta,
        mixture: mix.mixture.scaled(g),
        target: target.waveform.scaled(g),
        interferer: mix.scaled_interferer.scaled(g),
        pose_invariant: pose_invariant_view(&target.frames),
        original: target.frames,
    })
}

pub fn write_features(path: &Path, frames: &FeatureFrames) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(&(frames.frames() as u32).to_le_bytes())?;
    put(&(frames.features() as u32).to_le_bytes())?;
    for v in frames.data() {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureFrames> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Config(format!("{}: feature header truncated", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, v) = (word(0), word(4));
    let body = &bytes[8..];
    if body.len() != n * v * 4 {
        return Err(Error::Config(format!(
            "{}: header says {n}×{v} frames, body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureFrames::new(n, v, data)
}

fn item_dir(root: &Path, meta: &ManifestItem) -> PathBuf {
    root.join(meta.split.name()).join(&meta.id)
}

fn write_item(root: &Path, item: &GeneratedItem) -> Result<()> {
    let dir = item_dir(root, &item.meta);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_wav(&dir.join("mix.wav"), &item.mixture)?;
    write_wav(&dir.join("target.wav"), &item.target)?;
    write_wav(&dir.join("interf.wav"), &item.interferer)?;
    write_features(&dir.join("visual_orig.bin"), &item.original)?;
    write_features(&dir.join("visual_pi.bin"), &item.pose_invariant)
}

/// Generates every split under `root` and writes `manifest.json` last.
pub fn build_corpus(config: &CorpusConfig, root: &Path) -> Result<Manifest> {
    config.validate()?;
    let jobs: Vec<(Split, usize)> = Split::ALL
        .into_iter()
        .flat_map(|s| (0..config.count(s)).map(move |i| (s, i)))
        .collect();
    let items = crate::parallel::pool().install(|| {
        jobs.par_iter()
            .map(|&(split, i)| {
                let item = gen_item(config, split, i)?;
                write_item(root, &item)?;
                Ok(item.meta)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        config: config.clone(),
        items,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// An item loaded from disk. Audio is kept at `f32` for training.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub meta: ManifestItem,
    pub mixture: Vec<f32>,
    pub target: Vec<f32>,
    pub original: FeatureFrames,
    pub pose_invariant: FeatureFrames,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    manifest: Manifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn load(&self, meta: &ManifestItem) -> Result<CorpusItem> {
        let dir = item_dir(&self.root, meta);
        let mixture = read_wav(&dir.join("mix.wav"))?;
        let target = read_wav(&dir.join("target.wav"))?;
        crate::dsp::check_pair(&mixture, &target)?;
        let original = read_features(&dir.join("visual_orig.bin"))?;
        let pose_invariant = read_features(&dir.join("visual_pi.bin"))?;
        if original.frames() != pose_invariant.frames() || original.features() != pose_invariant.features() {
            return Err(Error::Dimension(format!("{}: visual streams differ in shape", meta.id)));
        }
        Ok(CorpusItem {
            meta: meta.clone(),
            mixture: mixture.to_f32(),
            target: target.to_f32(),
            original,
            pose_invariant,
        })
    }

    /// Loads a whole split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<CorpusItem>> {
        let metas: Vec<&ManifestItem> = self.manifest.items(split).collect();
        crate::parallel::pool().install(|| metas.par_iter().map(|m| self.load(m)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_train: 4,
            n_val: 2,
            n_test: 2,
            duration_s: 1.0,
            seed: 7,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn overlapping_pools_rejected() {
        let c = CorpusConfig {
            test_speakers: [40, 55],
            ..CorpusConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let one = CorpusConfig {
            val_speakers: [50, 51],
            ..CorpusConfig::default()
        };
        assert!(one.validate().is_err());
    }

    #[test]
    fn item_is_pure_and_in_range() {
        let c = small();
        let a = gen_item(&c, Split::Test, 1).unwrap();
        assert_eq!(a, gen_item(&c, Split::Test, 1).unwrap());
        assert!(c.pool(Split::Test).contains(&a.meta.target_speaker));
        assert_ne!(a.meta.target_speaker, a.meta.interferer_speaker);
        assert!((-10.0..=10.0).contains(&a.meta.snr_db));
        let peak = a.mixture.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= PEAK_LIMIT + 1e-12);
    }

    #[test]
    fn build_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_corpus(&small(), dir.path()).unwrap();
        assert_eq!(m.items.len(), 8);
        let corpus = Corpus::open(dir.path()).unwrap();
        assert_eq!(corpus.manifest(), &m);
        let test = corpus.load_split(Split::Test).unwrap();
        assert_eq!(test.len(), 2);
        let fresh = gen_item(&small(), Split::Test, 0).unwrap();
        for (a, b) in test[0].target.iter().zip(fresh.target.samples()) {
            assert!((*a as f64 - b).abs() <= 1.0 / 32768.0 + 1e-9);
        }
        assert_eq!(test[0].original, fresh.original);
        assert!(m.speakers(Split::Train).is_disjoint(&m.speakers(Split::Test)));
    }

    #[test]
    fn features_file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let f = FeatureFrames::new(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap();
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_features(&p).is_err());
    }
}

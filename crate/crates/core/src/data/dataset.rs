//! On-disk paired datasets: `raw/`, `clean/`, optional `mask/` PNGs plus a
//! `manifest.json` array of `{id, raw_path, clean_path, mask_path?, split}`
//! with paths relative to the dataset root.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{BinaryMask, ImageTensor};
use super::synth::{synth_pair, BlemishSpec, PairedSample};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub raw_path: String,
    pub clean_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub split: Split,
}

/// Synthesizes `n` pairs in memory. Sample `k` has id `s{k:05}`; a seeded
/// shuffle puts `n / 10` of them in the test split.
pub fn synth_dataset(n: usize, spec: &BlemishSpec, seed: u64, resolution: usize) -> Result<Vec<(PairedSample, Split)>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5EED])));
    let mut split = vec![Split::Train; n];
    for &k in &order[..n / 10] {
        split[k] = Split::Test;
    }
    (0..n)
        .map(|k| {
            let mut s = synth_pair(derive_seed(seed, &[k as u64]), spec, resolution)?;
            s.id = format!("s{k:05}");
            Ok((s, split[k]))
        })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic dataset to `out_dir` and returns its manifest.
pub fn dataset_build(n: usize, spec: &BlemishSpec, seed: u64, resolution: usize, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be positive".into()));
    }
    for sub in ["raw", "clean", "mask"] {
        create_dir(&out_dir.join(sub))?;
    }
    let mut manifest = Vec::with_capacity(n);
    for (sample, split) in synth_dataset(n, spec, seed, resolution)? {
        let entry = ManifestEntry {
            raw_path: format!("raw/{}.png", sample.id),
            clean_path: format!("clean/{}.png", sample.id),
            mask_path: sample.blemish_mask.as_ref().map(|_| format!("mask/{}.png", sample.id)),
            id: sample.id.clone(),
            split,
        };
        sample.raw.save_png(&out_dir.join(&entry.raw_path))?;
        sample.clean.save_png(&out_dir.join(&entry.clean_path))?;
        if let (Some(m), Some(p)) = (&sample.blemish_mask, &entry.mask_path) {
            m.save_png(&out_dir.join(p))?;
        }
        manifest.push(entry);
    }
    let path = out_dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory with a parsed manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::Sample { id: MANIFEST.into(), message: format!("corrupt manifest: {e}") })?;
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Sample { id: e.id.clone(), message: "duplicate id in manifest".into() });
            }
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Entries of `split` in manifest order, or shuffled by `shuffle_seed`.
    pub fn split(&self, split: Split, shuffle_seed: Option<u64>) -> Vec<&ManifestEntry> {
        let mut out: Vec<_> = self.entries.iter().filter(|e| e.split == split).collect();
        if let Some(seed) = shuffle_seed {
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        out
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<PairedSample> {
        let named = |e: Error| Error::Sample { id: entry.id.clone(), message: e.to_string() };
        let raw = ImageTensor::load_png(&self.root.join(&entry.raw_path)).map_err(named)?;
        let clean = ImageTensor::load_png(&self.root.join(&entry.clean_path)).map_err(named)?;
        let mask = match &entry.mask_path {
            Some(p) => Some(BinaryMask::load_png(&self.root.join(p)).map_err(named)?),
            None => None,
        };
        PairedSample::new(entry.id.clone(), raw, clean, mask)
    }

    /// Deterministic stream of the samples in `split`.
    pub fn iterate(&self, split: Split, shuffle_seed: Option<u64>) -> impl Iterator<Item = Result<PairedSample>> + '_ {
        self.split(split, shuffle_seed).into_iter().map(move |e| self.load(e))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<PairedSample>> {
        self.iterate(split, None).collect()
    }
}

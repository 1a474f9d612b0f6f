//! Frozen test sets: one container file per burst plus a text manifest.
//!
//! ```text
//! # mkpn test set
//! gain=4
//! burst_len=8
//! patch=128
//! seed=7
//! sample 0 <sample seed> sample_0000.mkpn
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::corpus::SourcePool;
use crate::error::{Error, Result};
use crate::synth::{derive_seed, gain_preset, make_burst, seeded_rng, BurstSample, BurstSpec, Gain};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub gain: Gain,
    pub burst_len: usize,
    pub patch: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# mkpn test set\n");
        let _ = writeln!(s, "gain={}", self.gain.level());
        let _ = writeln!(s, "burst_len={}", self.burst_len);
        let _ = writeln!(s, "patch={}", self.patch);
        let _ = writeln!(s, "seed={}", self.seed);
        for e in &self.entries {
            let _ = writeln!(s, "sample {} {} {}", e.id, e.seed, e.file);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad manifest line `{line}`"));
        let (mut gain, mut burst_len, mut patch, mut seed) = (None, None, None, None);
        let mut entries = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("sample ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(bad(line));
                }
                entries.push(ManifestEntry {
                    id: parts[0].parse().map_err(|_| bad(line))?,
                    seed: parts[1].parse().map_err(|_| bad(line))?,
                    file: parts[2].to_string(),
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k {
                "gain" => gain = Some(Gain::from_level(v.parse().map_err(|_| bad(line))?)?),
                "burst_len" => burst_len = Some(v.parse().map_err(|_| bad(line))?),
                "patch" => patch = Some(v.parse().map_err(|_| bad(line))?),
                "seed" => seed = Some(v.parse().map_err(|_| bad(line))?),
                _ => return Err(bad(line)),
            }
        }
        let missing = |k: &str| Error::Format(format!("manifest lacks `{k}`"));
        Ok(Self {
            gain: gain.ok_or_else(|| missing("gain"))?,
            burst_len: burst_len.ok_or_else(|| missing("burst_len"))?,
            patch: patch.ok_or_else(|| missing("patch"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            entries,
        })
    }
}

/// Generates `count` bursts at `gain` and writes them with a manifest to
/// `dir`. Sample `i` depends only on `(seed, i)`.
pub fn write_testset(
    dir: &Path,
    gain: Gain,
    count: usize,
    seed: u64,
    spec: &BurstSpec,
    pool: &SourcePool,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let noise = gain_preset(gain);
    let mut entries = Vec::with_capacity(count);
    for id in 0..count {
        let sample_seed = derive_seed(seed, id as u64);
        let mut rng = seeded_rng(sample_seed);
        let src = pool.pick(spec, &mut rng)?;
        let sample = make_burst(&src, spec, &noise, &mut rng)?;
        let file = format!("sample_{id:04}.mkpn");
        sample.to_container()?.save(&dir.join(&file))?;
        entries.push(ManifestEntry {
            id,
            seed: sample_seed,
            file,
        });
    }
    let manifest = Manifest {
        gain,
        burst_len: spec.burst_len,
        patch: spec.patch,
        seed,
        entries,
    };
    fs::write(dir.join(MANIFEST), manifest.to_text())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(dir.join(MANIFEST))?)
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<BurstSample> {
    BurstSample::from_container(&Container::load(&dir.join(&entry.file))?)
}

/// SHA-256 of the manifest file, hex encoded.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(dir.join(MANIFEST))?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// `root` itself when it holds a manifest, otherwise its immediate
/// subdirectories that do, sorted by path.
pub fn discover_testsets(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("no test set under {}", root.display())));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BurstSpec {
        BurstSpec {
            burst_len: 3,
            patch: 16,
            poisson_lambda: 1.5,
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_testset(a.path(), Gain::X4, 3, 11, &spec(), &SourcePool::Procedural).unwrap();
        write_testset(b.path(), Gain::X4, 3, 11, &spec(), &SourcePool::Procedural).unwrap();
        for f in ["manifest.txt", "sample_0000.mkpn", "sample_0002.mkpn"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(manifest_hash(a.path()).unwrap(), manifest_hash(b.path()).unwrap());
        let m = read_manifest(a.path()).unwrap();
        assert_eq!(m.entries.len(), 3);
        let s = load_sample(a.path(), &m.entries[1]).unwrap();
        assert_eq!(s.frames.shape(), &[16, 16, 3]);
        assert_eq!(s.noise, gain_preset(Gain::X4));
    }

    #[test]
    fn manifest_parse_errors() {
        assert!(Manifest::parse("gain=4\nburst_len=8\npatch=8\n").is_err());
        assert!(Manifest::parse("gain=3\nburst_len=8\npatch=8\nseed=1\n").is_err());
        assert!(Manifest::parse("gain=4\nburst_len=8\npatch=8\nseed=1\nsample 0 1\n").is_err());
        assert!(Manifest::parse("gain=4\nburst_len=8\npatch=8\nseed=1\ncolor=1\n").is_err());
    }

    #[test]
    fn discovery() {
        let root = tempfile::tempdir().unwrap();
        write_testset(&root.path().join("gain8"), Gain::X8, 1, 0, &spec(), &SourcePool::Procedural).unwrap();
        write_testset(&root.path().join("gain1"), Gain::X1, 1, 0, &spec(), &SourcePool::Procedural).unwrap();
        let found = discover_testsets(root.path()).unwrap();
        assert_eq!(found.len(), 2);
        assert!(found[0].ends_with("gain1"));
        assert_eq!(discover_testsets(&found[1]).unwrap(), vec![found[1].clone()]);
    }
}

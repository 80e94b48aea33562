//! On-disk triplet datasets: a manifest of sources and seeds, and the
//! `pairs/<id>/` layout regenerated from it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::flow::FlowField;
use crate::image::{Image, Modality};
use crate::synth::{generate_triplet, procedural_pair, KindChoice, SynthRanges, TransformSpec, Triplet};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where the aligned pair behind a triplet comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PairSource {
    Procedural { seed: u64, height: usize, width: usize },
    Files { visible: PathBuf, thermal: PathBuf },
}

impl PairSource {
    pub fn load(&self) -> Result<(Image, Image)> {
        match self {
            PairSource::Procedural { seed, height, width } => procedural_pair(*height, *width, *seed),
            PairSource::Files { visible, thermal } => {
                let v = Image::load(visible, Modality::Visible)?;
                let t = Image::load(thermal, Modality::Thermal)?;
                if v.tensor().shape() != t.tensor().shape() {
                    return Err(Error::Data {
                        path: thermal.clone(),
                        reason: format!(
                            "size {}x{} differs from the visible image {}x{}",
                            t.height(),
                            t.width(),
                            v.height(),
                            v.width()
                        ),
                    });
                }
                Ok((v, t))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub source: PairSource,
    /// Seed of the misalignment drawn for this pair.
    pub seed: u64,
}

/// Everything needed to regenerate a dataset byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub kind: KindChoice,
    pub magnitude: f64,
    pub ranges: SynthRanges,
    pub entries: Vec<ManifestEntry>,
}

/// Shared synthesis settings for a new manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPlan {
    pub seed: u64,
    pub kind: KindChoice,
    pub magnitude: f64,
    pub ranges: SynthRanges,
    pub test_fraction: f64,
}

impl Manifest {
    /// Assigns per-pair seeds and splits for `sources`, in order.
    pub fn plan(plan: &SynthPlan, sources: Vec<(String, PairSource)>) -> Result<Self> {
        contract!(
            (0.0..=1.0).contains(&plan.test_fraction),
            "test fraction must lie in [0, 1]"
        );
        contract!(plan.magnitude >= 0.0, "magnitude must be non-negative");
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let n_test = (sources.len() as f64 * plan.test_fraction).round() as usize;
        let first_test = sources.len() - n_test;
        let entries = sources
            .into_iter()
            .enumerate()
            .map(|(i, (id, source))| ManifestEntry {
                id,
                split: if i >= first_test { Split::Test } else { Split::Train },
                source,
                seed: rng.gen(),
            })
            .collect();
        Ok(Self {
            version: MANIFEST_VERSION,
            seed: plan.seed,
            kind: plan.kind,
            magnitude: plan.magnitude,
            ranges: plan.ranges,
            entries,
        })
    }

    /// `n` procedural scenes of size `h×w`, ids `p0000`, `p0001`, ...
    pub fn procedural(plan: &SynthPlan, n: usize, h: usize, w: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5ce4e);
        let sources = (0..n)
            .map(|i| {
                let source = PairSource::Procedural {
                    seed: rng.gen(),
                    height: h,
                    width: w,
                };
                (format!("p{i:04}"), source)
            })
            .collect();
        Self::plan(plan, sources)
    }

    /// One entry per subdirectory of `dir` holding `visible.png` and
    /// `thermal.png`, sorted by name. Subdirectories missing either file are
    /// returned separately.
    pub fn from_aligned_dir(plan: &SynthPlan, dir: &Path) -> Result<(Self, Vec<(PathBuf, String)>)> {
        let read = fs::read_dir(dir).map_err(|e| Error::Data {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut dirs: Vec<PathBuf> = read
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut sources = Vec::new();
        let mut skipped = Vec::new();
        for d in dirs {
            let (v, t) = (d.join("visible.png"), d.join("thermal.png"));
            if v.is_file() && t.is_file() {
                let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                sources.push((id, PairSource::Files { visible: v, thermal: t }));
            } else {
                skipped.push((d, "missing visible.png or thermal.png".to_string()));
            }
        }
        Ok((Self::plan(plan, sources)?, skipped))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Schema(format!(
                "manifest version {}, expected {MANIFEST_VERSION}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn ids(&self, split: Option<Split>) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn triplet(&self, entry: &ManifestEntry) -> Result<Triplet> {
        let (v, t) = entry.source.load()?;
        generate_triplet(&v, &t, self.kind, self.magnitude, &self.ranges, entry.seed)
    }
}

/// Transform record stored next to each triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecRecord {
    pub transform: TransformSpec,
    pub seed: u64,
    pub magnitude: f64,
}

pub fn pair_dir(root: &Path, id: &str) -> PathBuf {
    root.join("pairs").join(id)
}

/// Writes `visible.png`, `thermal.png` (the warped thermal image, 16-bit),
/// `gt.flo` and `spec.json`.
pub fn write_triplet(dir: &Path, t: &Triplet) -> Result<()> {
    fs::create_dir_all(dir)?;
    t.visible.save_png16(dir.join("visible.png"))?;
    t.warped_thermal.save_png16(dir.join("thermal.png"))?;
    t.gt_flow.save(dir.join("gt.flo"))?;
    let rec = SpecRecord {
        transform: t.spec.clone(),
        seed: t.seed,
        magnitude: t.magnitude,
    };
    let mut s = serde_json::to_string_pretty(&rec)?;
    s.push('\n');
    fs::write(dir.join("spec.json"), s)?;
    Ok(())
}

/// Outcome of writing a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthSummary {
    pub written: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Generates every manifest entry under `root` and writes the manifest.
/// Entries whose sources fail are reported, not fatal. Work is spread over
/// `workers` threads; output does not depend on the worker count.
pub fn synthesize(manifest: &Manifest, root: &Path, workers: usize) -> Result<SynthSummary> {
    fs::create_dir_all(root)?;
    manifest.save(root.join(MANIFEST_FILE))?;
    let workers = workers.clamp(1, manifest.entries.len().max(1));
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                scope.spawn(move || {
                    manifest
                        .entries
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % workers == k)
                        .map(|(i, e)| (i, manifest.triplet(e).and_then(|t| write_triplet(&pair_dir(root, &e.id), &t))))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<(usize, Result<()>)> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("synthesis worker panicked"))
            .collect();
        all.sort_by_key(|(i, _)| *i);
        all.into_iter().map(|(_, r)| r).collect()
    });
    let mut summary = SynthSummary::default();
    for (e, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(()) => summary.written.push(e.id.clone()),
            Err(err) => summary.failed.push((e.id.clone(), err.to_string())),
        }
    }
    Ok(summary)
}

/// A stored triplet read back from disk.
#[derive(Clone, Debug)]
pub struct StoredPair {
    pub id: String,
    pub split: Split,
    pub visible: Image,
    pub thermal: Image,
    pub gt: FlowField,
}

/// A synthesized dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = Manifest::load(root.join(MANIFEST_FILE))?;
        Ok(Self { root, manifest })
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<StoredPair> {
        let dir = pair_dir(&self.root, &entry.id);
        let visible = Image::load(dir.join("visible.png"), Modality::Visible)?;
        let thermal = Image::load(dir.join("thermal.png"), Modality::Thermal)?;
        let gt = FlowField::load(dir.join("gt.flo"))?;
        contract!(
            gt.height() == visible.height() && gt.width() == visible.width(),
            "pair `{}`: flow and image sizes differ",
            entry.id
        );
        Ok(StoredPair {
            id: entry.id.clone(),
            split: entry.split,
            visible,
            thermal,
            gt,
        })
    }

    pub fn entries(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .filter(move |e| split.is_none_or(|s| e.split == s))
    }
}

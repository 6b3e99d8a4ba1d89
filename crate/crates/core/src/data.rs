//! Feature bags, their on-disk format, manifests, and a synthetic corpus.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! "LVAD" | version u32 | T u32 | D_V u32 | D_A u32 | label u8 | has_truth u8
//! T*D_V f32 visual (row-major) | T*D_A f32 audio | [16*T u8 frame truth]
//! ```
//!
//! Manifests are UTF-8 text with one `<path>\t<label>\t<split>` entry per
//! line. Relative paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classifier::FRAMES_PER_SNIPPET;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LVAD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 22;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatureBag {
    pub id: String,
    pub visual: Tensor,
    pub audio: Tensor,
    pub label: bool,
    /// One 0/1 entry per frame (`16 * T`), when known.
    pub frame_truth: Option<Vec<u8>>,
}

impl VideoFeatureBag {
    pub fn new(
        id: impl Into<String>,
        visual: Tensor,
        audio: Tensor,
        label: bool,
        frame_truth: Option<Vec<u8>>,
    ) -> Result<Self> {
        let bag = VideoFeatureBag {
            id: id.into(),
            visual,
            audio,
            label,
            frame_truth,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.visual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let (v, a) = (self.visual.shape(), self.audio.shape());
        if v.len() != 2 || a.len() != 2 {
            return Err(Error::Contract(format!(
                "bag {}: features must be matrices, got {v:?} and {a:?}",
                self.id
            )));
        }
        if v[0] != a[0] {
            return Err(Error::Contract(format!(
                "bag {}: visual has {} snippets but audio has {}",
                self.id, v[0], a[0]
            )));
        }
        if v[0] == 0 {
            return Err(Error::Contract(format!("bag {}: no snippets", self.id)));
        }
        if !self.visual.is_finite() || !self.audio.is_finite() {
            return Err(Error::Contract(format!(
                "bag {}: non-finite features",
                self.id
            )));
        }
        if let Some(truth) = &self.frame_truth {
            if truth.len() != FRAMES_PER_SNIPPET * v[0] {
                return Err(Error::Contract(format!(
                    "bag {}: {} truth frames for {} snippets",
                    self.id,
                    truth.len(),
                    v[0]
                )));
            }
            if truth.iter().any(|&t| t > 1) {
                return Err(Error::Contract(format!(
                    "bag {}: truth must be 0 or 1",
                    self.id
                )));
            }
            if !self.label && truth.contains(&1) {
                return Err(Error::Contract(format!(
                    "bag {}: normal video with anomalous frames",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

pub fn save_bag(bag: &VideoFeatureBag, path: &Path) -> Result<()> {
    bag.validate()?;
    let (t, dv, da) = (bag.len(), bag.visual.cols(), bag.audio.cols());
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * (dv + da) + FRAMES_PER_SNIPPET * t);
    buf.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, t as u32, dv as u32, da as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(bag.label as u8);
    buf.push(bag.frame_truth.is_some() as u8);
    for &x in bag.visual.data().iter().chain(bag.audio.data()) {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(truth) = &bag.frame_truth {
        buf.extend_from_slice(truth);
    }
    fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, field: &'static str, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            field,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(
                field,
                format!(
                    "needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn flag(&mut self, field: &'static str) -> Result<bool> {
        match self.take(1, field)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(self.err(field, format!("expected 0 or 1, got {other}"))),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize, field: &'static str) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.err(field, "size overflows"))?;
        let raw = self.take(n, field)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(self.err(field, format!("non-finite value at element {i}")));
        }
        Tensor::matrix(rows, cols, data)
    }
}

pub fn load_bag(path: &Path) -> Result<VideoFeatureBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err("magic", "not an LVAD feature file"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.err("version", format!("unsupported version {version}")));
    }
    let t = r.u32("T")? as usize;
    if t == 0 {
        return Err(r.err("T", "bag has no snippets"));
    }
    let dv = r.u32("D_V")? as usize;
    let da = r.u32("D_A")? as usize;
    if dv == 0 || da == 0 {
        return Err(r.err("D_V/D_A", "feature widths must be positive"));
    }
    let label = r.flag("label")?;
    let has_truth = r.flag("has_truth")?;
    let visual = r.matrix(t, dv, "visual")?;
    let audio = r.matrix(t, da, "audio")?;
    let frame_truth = if has_truth {
        let truth = r.take(FRAMES_PER_SNIPPET * t, "truth")?.to_vec();
        if truth.iter().any(|&v| v > 1) {
            return Err(r.err("truth", "frame truth must be 0 or 1"));
        }
        if !label && truth.contains(&1) {
            return Err(r.err("truth", "normal video has anomalous frames"));
        }
        Some(truth)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(r.err(
            "T",
            format!(
                "{} trailing bytes after a {t}-snippet payload",
                bytes.len() - r.pos
            ),
        ));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoFeatureBag::new(id, visual, audio, label, frame_truth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: bool,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.path) {
                return Err(Error::Contract(format!(
                    "duplicate manifest path {}",
                    e.path.display()
                )));
            }
        }
        Ok(Manifest { entries })
    }

    /// Parses a manifest, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let err = |field, detail: String| Error::Parse {
            path: path.to_path_buf(),
            field,
            detail,
        };
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(
                    "entry",
                    format!("line {}: expected 3 tab-separated fields", n + 1),
                ));
            }
            let label = match cols[1] {
                "0" => false,
                "1" => true,
                other => return Err(err("label", format!("line {}: {other:?}", n + 1))),
            };
            let split = match cols[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(err("split", format!("line {}: {other:?}", n + 1))),
            };
            let p = Path::new(cols[0]);
            let resolved = if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            };
            entries.push(ManifestEntry {
                path: resolved,
                label,
                split,
            });
        }
        Manifest::new(entries)
    }

    /// Writes entries with their paths as stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.path.display(),
                e.label as u8,
                e.split.as_str()
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads every bag of a split, checking labels against the manifest.
    pub fn load_split(&self, split: Split) -> Result<Vec<VideoFeatureBag>> {
        self.split(split)
            .map(|e| {
                let bag = load_bag(&e.path)?;
                if bag.label != e.label {
                    return Err(Error::Contract(format!(
                        "{}: manifest label {} disagrees with file label {}",
                        e.path.display(),
                        e.label as u8,
                        bag.label as u8
                    )));
                }
                Ok(bag)
            })
            .collect()
    }
}

/// Parameters of the synthetic corpus.
///
/// Snippets of both modalities are drawn from a Gaussian mixture shared by
/// the whole corpus. Anomalous snippets are shifted by `separation` along a
/// fixed random unit direction per modality, with fresh modality noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Inclusive range of snippet counts.
    pub t_range: (usize, usize),
    pub d_visual: usize,
    pub d_audio: usize,
    pub anomaly_rate: f64,
    pub separation: f64,
    pub components: usize,
    pub component_spread: f64,
    pub visual_noise: f64,
    pub audio_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_normal: 60,
            n_abnormal: 60,
            t_range: (20, 60),
            d_visual: 1024,
            d_audio: 128,
            anomaly_rate: 0.3,
            separation: 4.0,
            components: 4,
            component_spread: 0.5,
            visual_noise: 1.0,
            audio_noise: 0.25,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.t_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid snippet range {lo}..={hi}")));
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate <= 1.0) {
            return Err(Error::Config(format!(
                "anomaly rate must be in (0, 1], got {}",
                self.anomaly_rate
            )));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Config(format!(
                "separation must be finite and >= 0, got {}",
                self.separation
            )));
        }
        if self.d_visual == 0 || self.d_audio == 0 || self.components == 0 {
            return Err(Error::Config(
                "widths and component count must be positive".into(),
            ));
        }
        if !(self.visual_noise >= 0.0 && self.audio_noise >= 0.0 && self.component_spread >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Values are rounded through `f32` so that saved files reload exactly.
pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<Vec<VideoFeatureBag>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (dv, da) = (config.d_visual, config.d_audio);
    let means_v: Vec<Vec<f64>> = (0..config.components)
        .map(|_| gaussian(&mut rng, dv, config.component_spread))
        .collect();
    let means_a: Vec<Vec<f64>> = (0..config.components)
        .map(|_| gaussian(&mut rng, da, config.component_spread))
        .collect();
    let dir_v = unit_direction(&mut rng, dv);
    let dir_a = unit_direction(&mut rng, da);

    let mut bags = Vec::with_capacity(config.n_normal + config.n_abnormal);
    for i in 0..config.n_normal + config.n_abnormal {
        let abnormal = i >= config.n_normal;
        let t = rng.random_range(config.t_range.0..=config.t_range.1);
        let anomalous = if abnormal {
            let len = ((config.anomaly_rate * t as f64).round() as usize).clamp(1, t);
            let start = rng.random_range(0..=t - len);
            start..start + len
        } else {
            0..0
        };
        let mut visual = Vec::with_capacity(t * dv);
        let mut audio = Vec::with_capacity(t * da);
        for s in 0..t {
            let k = rng.random_range(0..config.components);
            let shift = if anomalous.contains(&s) {
                config.separation
            } else {
                0.0
            };
            let nv = gaussian(&mut rng, dv, config.visual_noise);
            let na = gaussian(&mut rng, da, config.audio_noise);
            visual.extend((0..dv).map(|j| means_v[k][j] + shift * dir_v[j] + nv[j]));
            audio.extend((0..da).map(|j| means_a[k][j] + shift * dir_a[j] + na[j]));
        }
        let round = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x as f32 as f64).collect() };
        let truth: Vec<u8> = (0..t)
            .flat_map(|s| std::iter::repeat_n(anomalous.contains(&s) as u8, FRAMES_PER_SNIPPET))
            .collect();
        let id = if abnormal {
            format!("abnormal_{:04}", i - config.n_normal)
        } else {
            format!("normal_{i:04}")
        };
        bags.push(VideoFeatureBag::new(
            id,
            Tensor::matrix(t, dv, round(visual))?,
            Tensor::matrix(t, da, round(audio))?,
            abnormal,
            Some(truth),
        )?);
    }
    Ok(bags)
}

/// Assigns `round(test_fraction * n)` bags of each label to the test split,
/// chosen by a seeded shuffle.
pub fn split_corpus(bags: &[VideoFeatureBag], test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0, 1], got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Train; bags.len()];
    for label in [false, true] {
        let mut idx: Vec<usize> = (0..bags.len())
            .filter(|&i| bags[i].label == label)
            .collect();
        idx.shuffle(&mut rng);
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_test] {
            splits[i] = Split::Test;
        }
    }
    Ok(splits)
}

/// Writes every bag as `<id>.lvad` under `dir` plus a `manifest.tsv` with
/// relative paths, returning the manifest path.
pub fn write_corpus(bags: &[VideoFeatureBag], splits: &[Split], dir: &Path) -> Result<PathBuf> {
    if bags.len() != splits.len() {
        return Err(Error::Contract("one split per bag required".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::with_capacity(bags.len());
    for (bag, &split) in bags.iter().zip(splits) {
        let name = format!("{}.lvad", bag.id);
        save_bag(bag, &dir.join(&name))?;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            label: bag.label,
            split,
        });
    }
    let manifest = dir.join("manifest.tsv");
    Manifest::new(entries)?.save(&manifest)?;
    Ok(manifest)
}

//! Dataset ingestion, stratified splitting and the synthetic generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::ImageSample;
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Mask, Tensor3};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "eval" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}' (train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// `None` for generated samples.
    pub path: Option<PathBuf>,
    pub label: u8,
    /// Evaluation-only annotation.
    pub mask: Option<PathBuf>,
}

/// Generator parameters of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split_assignment: BTreeMap<String, Split>,
    pub seed: u64,
    pub synthetic: Option<SynthParams>,
}

impl DatasetManifest {
    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| self.split_assignment.get(&e.id) == Some(&split))
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.entries.iter().filter(|e| e.label == 1).count();
        (pos, self.entries.len() - pos)
    }

    /// One line per entry: `id path label mask split`, tab separated, `-`
    /// for absent fields.
    pub fn to_text(&self) -> String {
        let mut out = format!("# weakseg manifest v1 seed={}\n", self.seed);
        if let Some(p) = self.synthetic {
            out.push_str(&format!("# synthetic n={} size={} seed={}\n", p.n, p.image_size, p.seed));
        }
        for e in &self.entries {
            let path = e.path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into());
            let mask = e.mask.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into());
            let split = self.split_assignment.get(&e.id).map(|s| s.as_str()).unwrap_or("-");
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.id, path, e.label, mask, split));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = DatasetManifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Dataset(format!("manifest line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix("# weakseg manifest v1 seed=") {
                m.seed = rest.trim().parse().map_err(|_| bad("bad seed"))?;
                continue;
            }
            if let Some(rest) = line.strip_prefix("# synthetic ") {
                let kv: HashMap<&str, &str> = rest.split_whitespace().filter_map(|t| t.split_once('=')).collect();
                let get = |k: &str| -> Result<u64> {
                    kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad synthetic header"))
                };
                m.synthetic = Some(SynthParams {
                    n: get("n")? as usize,
                    image_size: get("size")? as usize,
                    seed: get("seed")?,
                });
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let opt = |s: &str| (s != "-").then(|| PathBuf::from(s));
            let label = match f[2] {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad("label must be 0 or 1")),
            };
            m.entries.push(ManifestEntry {
                id: f[0].to_string(),
                path: opt(f[1]),
                label,
                mask: opt(f[3]),
            });
            if f[4] != "-" {
                m.split_assignment.insert(f[0].to_string(), f[4].parse()?);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Samples plus the manifest that describes them, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<ImageSample> {
        self.samples
            .iter()
            .filter(|s| self.manifest.split_assignment.get(s.id()) == Some(&split))
            .cloned()
            .collect()
    }

    pub fn with_split(mut self, fractions: (f64, f64, f64), seed: u64) -> Result<Self> {
        self.manifest = split(&self.manifest, fractions, seed)?;
        Ok(self)
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if p.is_file() && is_image {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Builds a manifest from a positive and a negative image directory, with
/// optional masks paired to positives by filename stem.
pub fn ingest_directory(pos_dir: &Path, neg_dir: &Path, mask_dir: Option<&Path>) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (dir, label) in [(pos_dir, 1u8), (neg_dir, 0u8)] {
        for p in list_images(dir)? {
            let id = stem(&p);
            if !seen.insert(id.clone()) {
                return Err(Error::Dataset(format!("duplicate image id '{id}' ({})", p.display())));
            }
            entries.push(ManifestEntry {
                id,
                path: Some(p),
                label,
                mask: None,
            });
        }
    }
    if let Some(md) = mask_dir {
        let positives: HashMap<String, usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == 1)
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        for p in list_images(md)? {
            let id = stem(&p);
            match positives.get(&id) {
                Some(&i) => entries[i].mask = Some(p),
                None => {
                    return Err(Error::Dataset(format!(
                        "mask {} has no matching positive image",
                        p.display()
                    )))
                }
            }
        }
    }
    Ok(DatasetManifest {
        entries,
        split_assignment: BTreeMap::new(),
        seed: 0,
        synthetic: None,
    })
}

/// Decodes every manifest entry at `size × size`.
pub fn load_samples(manifest: &DatasetManifest, size: usize) -> Result<Vec<ImageSample>> {
    if let Some(p) = manifest.synthetic {
        if p.image_size != size {
            return Err(Error::Dataset(format!(
                "synthetic images are {}x{}, requested {size}x{size}",
                p.image_size, p.image_size
            )));
        }
        let generated = synth_dataset(p.n, p.image_size, p.seed)?;
        return Ok(generated.samples);
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = e
                .path
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("{}: entry has no image path", e.id)))?;
            let pixels = io::read_rgb(path, Some((size, size)))?;
            let mask = e.mask.as_ref().map(|m| io::read_mask(m, Some((size, size)))).transpose()?;
            ImageSample::new(e.id.clone(), pixels, e.label, mask)
        })
        .collect()
}

/// Largest-remainder allocation of `n` items over `fractions`; ties go to
/// the earlier slot.
pub fn allocate(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| (r + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - counts[a] as f64;
        let fb = raw[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified train/val/test assignment keyed by id.
///
/// Split totals are allocated over the whole set; positives are allocated
/// the same way and negatives fill the rest, so every split is within one
/// sample of its target size and of the global positive ratio. The result
/// depends only on the set of ids, their labels, the fractions and `seed`.
pub fn split(manifest: &DatasetManifest, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|v| !(*v > 0.0)) || ((f[0] + f[1] + f[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n = manifest.entries.len();
    let totals = allocate(n, &f);
    if let Some(i) = totals.iter().position(|&c| c == 0) {
        return Err(Error::Dataset(format!(
            "{} split would be empty with {n} samples",
            Split::ALL[i]
        )));
    }
    let mut pos: Vec<&str> = manifest.entries.iter().filter(|e| e.label == 1).map(|e| e.id.as_str()).collect();
    let mut neg: Vec<&str> = manifest.entries.iter().filter(|e| e.label == 0).map(|e| e.id.as_str()).collect();
    pos.sort_unstable();
    neg.sort_unstable();
    let mut pos_quota = allocate(pos.len(), &f);
    for s in 0..3 {
        pos_quota[s] = pos_quota[s].min(totals[s]);
    }
    // Reassign any positives displaced by the cap above.
    let mut spare = pos.len() - pos_quota.iter().sum::<usize>();
    for s in 0..3 {
        let room = totals[s] - pos_quota[s];
        let take = room.min(spare);
        pos_quota[s] += take;
        spare -= take;
    }
    let neg_quota: Vec<usize> = (0..3).map(|s| totals[s] - pos_quota[s]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut assignment = BTreeMap::new();
    for (ids, quota) in [(&pos, &pos_quota), (&neg, &neg_quota)] {
        let mut it = ids.iter();
        for (s, &q) in quota.iter().enumerate() {
            for id in it.by_ref().take(q) {
                assignment.insert(id.to_string(), Split::ALL[s]);
            }
        }
    }
    let mut out = manifest.clone();
    out.split_assignment = assignment;
    out.seed = seed;
    Ok(out)
}

/// Warm hue band of positive blobs, degrees.
pub const WARM_HUE: (f64, f64) = (0.0, 50.0);
/// Cool hue band of negative distractors, degrees.
pub const COOL_HUE: (f64, f64) = (180.0, 260.0);
/// Blob radius range as a fraction of the image side.
pub const BLOB_RADIUS: (f64, f64) = (0.09, 0.17);

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    color: [f64; 3],
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, size: usize, hue: (f64, f64)) -> Self {
        let s = size as f64;
        let radius = rng.gen_range(BLOB_RADIUS.0..BLOB_RADIUS.1) * s;
        let cy = rng.gen_range(radius..s - radius);
        let cx = rng.gen_range(radius..s - radius);
        let color = hsv_to_rgb(rng.gen_range(hue.0..hue.1), rng.gen_range(0.8..1.0), rng.gen_range(0.85..1.0));
        Blob { cy, cx, radius, color }
    }

    /// Opacity at a pixel centre; zero exactly outside the support.
    fn alpha(&self, i: usize, j: usize) -> f64 {
        let dy = i as f64 + 0.5 - self.cy;
        let dx = j as f64 + 0.5 - self.cx;
        let d = (dy * dy + dx * dx).sqrt() / self.radius;
        if d >= 1.0 {
            0.0
        } else if d <= 0.6 {
            1.0
        } else {
            let t = (d - 0.6) / 0.4;
            1.0 - 0.6 * t * t * (3.0 - 2.0 * t)
        }
    }
}

fn background<R: Rng>(rng: &mut R, size: usize) -> Tensor3 {
    let base = [rng.gen_range(0.25..0.5), rng.gen_range(0.3..0.55), rng.gen_range(0.2..0.45)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.07),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.03..0.03)).collect();
    Tensor3::from_fn(3, size, size, |c, i, j| {
        let mut v = base[c] + noise[i * size + j];
        for &(amp, fy, fx, phase) in &waves {
            v += amp * (fy * i as f64 + fx * j as f64 + phase + c as f64 * 0.7).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

fn paint(pixels: &mut Tensor3, blobs: &[Blob]) -> Mask {
    let size = pixels.height();
    let mut support = Mask::zeros(size, size);
    for b in blobs {
        for i in 0..size {
            for j in 0..size {
                let a = b.alpha(i, j);
                if a > 0.0 {
                    support.set(i, j, true);
                    for c in 0..3 {
                        let v = (1.0 - a) * pixels.get(c, i, j) + a * b.color[c];
                        pixels.set(c, i, j, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    support
}

/// One generated sample; positives carry the union of their blob supports
/// as ground truth.
fn synth_sample(index: usize, positive: bool, size: usize, seed: u64) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut pixels = background(&mut rng, size);
    let id = format!("synth_{index:04}");
    if positive {
        let count = rng.gen_range(1..=3);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(&mut rng, size, WARM_HUE)).collect();
        let gt = paint(&mut pixels, &blobs);
        ImageSample::new(id, pixels, 1, Some(gt))
    } else {
        let count = rng.gen_range(0..=2);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(&mut rng, size, COOL_HUE)).collect();
        paint(&mut pixels, &blobs);
        ImageSample::new(id, pixels, 0, None)
    }
}

/// `n / 2` warm-blob positives followed by `n / 2` negatives.
pub fn synth_dataset(n: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("synthetic set size {n} must be even")));
    }
    if image_size < crate::datamodel::MIN_IMAGE_SIDE {
        return Err(Error::InvalidArgument(format!("image size {image_size} is below 32")));
    }
    let samples = (0..n)
        .map(|i| synth_sample(i, i < n / 2, image_size, seed))
        .collect::<Result<Vec<_>>>()?;
    let entries = samples
        .iter()
        .map(|s| ManifestEntry {
            id: s.id().to_string(),
            path: None,
            label: s.label(),
            mask: None,
        })
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            entries,
            split_assignment: BTreeMap::new(),
            seed: 0,
            synthetic: Some(SynthParams { n, image_size, seed }),
        },
        samples,
    })
}

//! Deterministic synthetic images with a continuous sensitive attribute.
//!
//! Each sample draws an attribute `t ~ U[0, 1]`; its group is `t >= threshold`.
//! The class is drawn from that group's class prior. Class `y` is rendered as
//! a blend of two disjoint block templates, `(1 - d t) T_y + d t T_{y+1}`,
//! scaled by the gain `g(t) = offset + slope * t`, plus uniform noise, then
//! clamped to `[0, 1]`. With drift `d > 0` the same class looks different at
//! the two ends of the attribute range (at `t = 1` class `y` occupies the block
//! that means class `y + 1` at `t = 0`), so the best decision rule depends on
//! the group while samples near the threshold share features with both groups.
//!
//! On disk a dataset is a little-endian binary file (magic `FMDS`) plus a
//! manifest CSV (`sample_id,label,group,t`) next to it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::moe::GroupStats;

pub const MAGIC: &[u8; 4] = b"FMDS";
pub const VERSION: u16 = 1;
const GROUPS: usize = 2;

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Attribute value separating group 0 (below) from group 1.
    pub threshold: f64,
    /// Half-width of the boundary band `|t - threshold| < beta` used in reports.
    pub band_halfwidth: f64,
    /// One class distribution per group.
    pub class_priors: Vec<Vec<f64>>,
    pub gain_offset: f64,
    pub gain_slope: f64,
    /// Template intensity before gain.
    pub amplitude: f64,
    /// How far the class appearance moves toward the next template as `t` goes 0 -> 1.
    pub drift: f64,
    /// Half-width of the additive uniform noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            channels: 1,
            height: 16,
            width: 16,
            classes: 4,
            threshold: 0.5,
            band_halfwidth: 0.1,
            class_priors: vec![vec![0.4, 0.3, 0.2, 0.1], vec![0.1, 0.2, 0.3, 0.4]],
            gain_offset: 0.5,
            gain_slope: 1.0,
            amplitude: 0.6,
            drift: 1.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "SynthConfig";
        if self.samples == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return invalid(op, "sample count and image dimensions must be positive");
        }
        if self.classes < 2 {
            return invalid(op, "at least two classes are required");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return invalid(op, format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(self.band_halfwidth >= 0.0 && self.band_halfwidth < self.threshold) {
            return invalid(op, format!("band half-width {} must lie in [0, threshold)", self.band_halfwidth));
        }
        if self.class_priors.len() != GROUPS {
            return invalid(op, format!("need {GROUPS} class priors, got {}", self.class_priors.len()));
        }
        for (g, p) in self.class_priors.iter().enumerate() {
            if p.len() != self.classes {
                return invalid(op, format!("group {g} prior has {} entries for {} classes", p.len(), self.classes));
            }
            if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return invalid(op, format!("group {g} prior {p:?} is not a distribution"));
            }
        }
        if !(self.noise >= 0.0) || !(self.amplitude >= 0.0) || !(0.0..=1.0).contains(&self.drift) {
            return invalid(op, "noise and amplitude must be nonnegative, drift within [0, 1]");
        }
        Ok(())
    }

    pub fn group_of(&self, t: f64) -> usize {
        usize::from(t >= self.threshold)
    }

    pub fn in_band(&self, t: f64) -> bool {
        (t - self.threshold).abs() < self.band_halfwidth
    }

    pub fn gain(&self, t: f64) -> f64 {
        self.gain_offset + self.gain_slope * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub t: f64,
    pub label: usize,
    pub group: usize,
    /// `C x H x W`, row-major.
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub groups: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn group_stats(&self) -> Result<GroupStats> {
        GroupStats::from_labels(self.samples.iter().map(|s| s.group), self.groups)
    }

    fn empty_like(&self) -> Self {
        Self {
            classes: self.classes,
            groups: self.groups,
            channels: self.channels,
            height: self.height,
            width: self.width,
            samples: Vec::new(),
        }
    }
}

/// Cell of a `ceil(sqrt K)`-square grid assigned to class `k`: `(row0, row1, col0, col1)`.
fn template_cell(k: usize, classes: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let side = (classes as f64).sqrt().ceil() as usize;
    let (r, c) = (k / side, k % side);
    (r * height / side, (r + 1) * height / side, c * width / side, (c + 1) * width / side)
}

/// Noise-free rendering of class `label` at attribute `t`, one channel.
pub fn clean_image(cfg: &SynthConfig, label: usize, t: f64) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut plane = vec![0.0; h * w];
    let next = (label + 1) % cfg.classes;
    let scale = cfg.gain(t) * cfg.amplitude;
    for (k, weight) in [(label, 1.0 - cfg.drift * t), (next, cfg.drift * t)] {
        let (r0, r1, c0, c1) = template_cell(k, cfg.classes, h, w);
        for r in r0..r1 {
            for c in c0..c1 {
                plane[r * w + c] += scale * weight;
            }
        }
    }
    plane
}

fn draw_class(rng: &mut impl Rng, prior: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws a dataset; identical configs give bit-identical output.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroupStats)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.samples);
    for id in 0..cfg.samples {
        let t: f64 = rng.random();
        let group = cfg.group_of(t);
        let label = draw_class(&mut rng, &cfg.class_priors[group]);
        let plane = clean_image(cfg, label, t);
        let mut image = Vec::with_capacity(cfg.channels * plane.len());
        for _ in 0..cfg.channels {
            for &v in &plane {
                let noise = if cfg.noise > 0.0 {
                    rng.random_range(-cfg.noise..cfg.noise)
                } else {
                    0.0
                };
                image.push((v + noise).clamp(0.0, 1.0));
            }
        }
        samples.push(Sample {
            id: id as u64,
            t,
            label,
            group,
            image,
        });
    }
    let ds = Dataset {
        classes: cfg.classes,
        groups: GROUPS,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        samples,
    };
    let stats = ds.group_stats()?;
    Ok((ds, stats))
}

/// Sidecar manifest path: `train.fmds` -> `train.manifest.csv`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.csv")
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invalid {
        op: "save",
        detail: format!("{what} {v} does not fit in u32"),
    })
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Invalid {
        op: "save",
        detail: format!("{what} {v} does not fit in u16"),
    })
}

/// FMDS bytes of a dataset.
pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(30 + ds.len() * (12 + 8 * ds.image_len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (v, what) in [
        (ds.len(), "sample count"),
        (ds.classes, "class count"),
        (ds.groups, "group count"),
        (ds.channels, "channels"),
        (ds.height, "height"),
        (ds.width, "width"),
    ] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for s in &ds.samples {
        if s.image.len() != ds.image_len() {
            return invalid("save", format!("sample {} has {} pixels", s.id, s.image.len()));
        }
        buf.extend_from_slice(&s.t.to_le_bytes());
        buf.extend_from_slice(&to_u16(s.label, "label")?.to_le_bytes());
        buf.extend_from_slice(&to_u16(s.group, "group")?.to_le_bytes());
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail<T>(&self, at: usize, detail: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: at as u64,
            detail: detail.into(),
        })
    }
}

/// Parses FMDS bytes; sample ids are assigned in file order.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return cur.fail(0, "bad magic, expected FMDS");
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return cur.fail(4, format!("unsupported version {version}"));
    }
    let n = cur.u32("sample count")?;
    let classes = cur.u32("class count")?;
    let groups = cur.u32("group count")?;
    let channels = cur.u32("channels")?;
    let height = cur.u32("height")?;
    let width = cur.u32("width")?;
    if classes == 0 || groups == 0 || channels == 0 || height == 0 || width == 0 {
        return cur.fail(10, "zero class/group count or image dimension");
    }
    let pixels = channels * height * width;
    let mut samples = Vec::with_capacity(n.min(bytes.len() / (12 + 8 * pixels) + 1));
    for id in 0..n {
        let start = cur.pos;
        let t = cur.f64("attribute")?;
        let label = cur.u16("label")? as usize;
        let group = cur.u16("group")? as usize;
        if label >= classes || group >= groups {
            return cur.fail(start + 8, format!("sample {id}: label {label} or group {group} out of range"));
        }
        let raw = cur.take(8 * pixels, "pixels")?;
        let image = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        samples.push(Sample {
            id: id as u64,
            t,
            label,
            group,
            image,
        });
    }
    if cur.pos != bytes.len() {
        return cur.fail(cur.pos, format!("{} trailing bytes after {n} samples", bytes.len() - cur.pos));
    }
    Ok(Dataset {
        classes,
        groups,
        channels,
        height,
        width,
        samples,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: u64,
    label: usize,
    group: usize,
    t: f64,
}

/// Writes `path` (FMDS) and its manifest CSV.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(ds)?)?;
    let mut w = csv::Writer::from_path(manifest_path(path)).map_err(csv_io)?;
    for s in &ds.samples {
        w.serialize(ManifestRow {
            sample_id: s.id,
            label: s.label,
            group: s.group,
            t: s.t,
        })
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads `path` and checks it against its manifest, which supplies sample ids.
pub fn load(path: &Path) -> Result<Dataset> {
    let mut ds = decode(&fs::read(path)?)?;
    let mut rd = csv::Reader::from_path(manifest_path(path)).map_err(csv_io)?;
    let mut rows = 0;
    for (i, row) in rd.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Manifest {
            line,
            detail: e.to_string(),
        })?;
        let Some(s) = ds.samples.get_mut(i) else {
            return Err(Error::Manifest {
                line,
                detail: format!("more manifest rows than the {} samples in the header", ds.len()),
            });
        };
        if row.label != s.label || row.group != s.group || row.t.to_bits() != s.t.to_bits() {
            return Err(Error::Manifest {
                line,
                detail: format!("row for sample {} disagrees with the binary record", row.sample_id),
            });
        }
        s.id = row.sample_id;
        rows += 1;
    }
    if rows != ds.len() {
        return Err(Error::Manifest {
            line: rows + 1,
            detail: format!("{rows} manifest rows but header declares {} samples", ds.len()),
        });
    }
    Ok(ds)
}

/// Stratified split by (group, class). Each stratum contributes within one
/// sample of its exact share; the train side has `round(fraction * N)` samples.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return invalid("split", format!("train fraction {train_fraction} outside (0, 1)"));
    }
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); ds.groups * ds.classes];
    for (i, s) in ds.samples.iter().enumerate() {
        strata[s.group * ds.classes + s.label].push(i);
    }
    let target = (train_fraction * ds.len() as f64).round() as usize;
    let exact: Vec<f64> = strata.iter().map(|s| s.len() as f64 * train_fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..strata.len()).collect();
    // largest remainder first, stratum index breaks ties
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(take.iter().sum());
    for &k in &order {
        if missing == 0 {
            break;
        }
        if take[k] < strata[k].len() && exact[k] > exact[k].floor() {
            take[k] += 1;
            missing -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ds.len()];
    for (stratum, &n) in strata.iter_mut().zip(&take) {
        stratum.shuffle(&mut rng);
        for &i in &stratum[..n] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (ds.empty_like(), ds.empty_like());
    for (s, &tr) in ds.samples.iter().zip(&in_train) {
        if tr {
            train.samples.push(s.clone());
        } else {
            test.samples.push(s.clone());
        }
    }
    Ok((train, test))
}

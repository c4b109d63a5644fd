//! Synthetic crowd scenes: Gaussian head blobs over a noisy scalar field,
//! plus the binary dataset format used to persist them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point2D, PointSet};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATASET_MAGIC: &[u8; 4] = b"CPDS";

/// Share of generated scenes reserved for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.2;

/// Row-major scalar field, `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Field {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "field data has {} values, expected {height}×{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Value at a signed pixel coordinate, zero outside the field.
    #[inline]
    pub fn get_padded(&self, row: isize, col: isize) -> f32 {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            0.0
        } else {
            self.data[row as usize * self.width + col as usize]
        }
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    /// Window with top-left corner at `(top, left)`; pixels past the border are zero.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Field {
        let mut out = Field::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                out.data[r * width + c] = self.get_padded((top + r) as isize, (left + c) as isize);
            }
        }
        out
    }

    /// Mirror left-right: column `c` moves to `width - 1 - c`.
    pub fn flip_horizontal(&self) -> Field {
        let mut out = Field::zeros(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[r * self.width + c] = self.data[r * self.width + (self.width - 1 - c)];
            }
        }
        out
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Horizontal mirror of a point under [`Field::flip_horizontal`] on a field of
/// the given width. Pixel centres sit on integer coordinates, so column `c`
/// maps to `width - 1 - c`.
pub fn flip_point(p: Point2D, width: usize) -> Point2D {
    Point2D::new((width as f64 - 1.0) - p.x, p.y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub field: Field,
    /// Ground truth. Unlabeled scenes keep it only as hidden evaluation data.
    pub gt_points: Option<PointSet>,
    pub scene_id: String,
    pub is_labeled: bool,
}

impl Scene {
    /// Annotations visible to training, i.e. `None` for unlabeled scenes.
    pub fn labels(&self) -> Option<&PointSet> {
        if self.is_labeled {
            self.gt_points.as_ref()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub field_size: usize,
    pub n_scenes: usize,
    pub heads_per_scene: [usize; 2],
    pub cluster_count: [usize; 2],
    pub cluster_spread: f64,
    pub blob_sigma: f64,
    pub amplitude_range: [f64; 2],
    pub ambiguous_fraction: f64,
    pub ambiguous_amplitude_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub labeled_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            field_size: 64,
            n_scenes: 200,
            heads_per_scene: [8, 24],
            cluster_count: [1, 4],
            cluster_spread: 10.0,
            blob_sigma: 2.0,
            amplitude_range: [0.6, 1.0],
            ambiguous_fraction: 0.2,
            ambiguous_amplitude_scale: 0.45,
            noise_std: 0.1,
            seed: 42,
            labeled_ratio: 0.1,
        }
    }
}

fn check_range(field: &'static str, lo: f64, hi: f64, v: f64, inclusive_lo: bool) -> Result<()> {
    let lo_ok = if inclusive_lo { v >= lo } else { v > lo };
    if !(lo_ok && v <= hi) {
        let open = if inclusive_lo { '[' } else { '(' };
        return Err(Error::config(field, format!("{v} not in {open}{lo}, {hi}]")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.field_size == 0 {
            return Err(Error::config("field_size", "must be positive"));
        }
        if self.n_scenes == 0 {
            return Err(Error::config("n_scenes", "must be positive"));
        }
        let [hmin, hmax] = self.heads_per_scene;
        if hmin > hmax {
            return Err(Error::config("heads_per_scene", "min exceeds max"));
        }
        let capacity = self.field_size * self.field_size / 4;
        if hmax > capacity {
            return Err(Error::config(
                "heads_per_scene",
                format!("max {hmax} exceeds capacity {capacity} (one head per 4 px²)"),
            ));
        }
        let [cmin, cmax] = self.cluster_count;
        if cmin == 0 || cmin > cmax {
            return Err(Error::config("cluster_count", "need 1 <= min <= max"));
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread >= 0.0) {
            return Err(Error::config("cluster_spread", "must be finite and >= 0"));
        }
        if !(self.blob_sigma.is_finite() && self.blob_sigma > 0.0) {
            return Err(Error::config("blob_sigma", "must be finite and > 0"));
        }
        let [amin, amax] = self.amplitude_range;
        if !(amin > 0.0 && amin <= amax && amax.is_finite()) {
            return Err(Error::config("amplitude_range", "need 0 < a_min <= a_max"));
        }
        check_range("ambiguous_fraction", 0.0, 1.0, self.ambiguous_fraction, true)?;
        check_range("ambiguous_amplitude_scale", 0.0, 1.0, self.ambiguous_amplitude_scale, false)?;
        if self.ambiguous_amplitude_scale >= 1.0 {
            return Err(Error::config(
                "ambiguous_amplitude_scale",
                "must be < 1 so ambiguous heads are fainter",
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be finite and >= 0"));
        }
        check_range("labeled_ratio", 0.0, 1.0, self.labeled_ratio, false)?;
        Ok(())
    }

    pub fn n_labeled(&self) -> usize {
        ((self.labeled_ratio * self.n_scenes as f64).round() as usize).clamp(1, self.n_scenes)
    }

    pub fn n_holdout(&self) -> usize {
        ((HOLDOUT_FRACTION * self.n_scenes as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: Option<SynthConfig>,
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<Scene>,
    pub holdout: Vec<Scene>,
}

/// Sum of isotropic Gaussian blobs sampled at integer pixel coordinates,
/// plus optional i.i.d. pixel noise.
pub fn render_field(
    size: usize,
    heads: &[Point2D],
    amplitudes: &[f64],
    blob_sigma: f64,
    noise: Option<&Normal<f64>>,
    rng: &mut impl Rng,
) -> Field {
    let inv_two_rho2 = 1.0 / (2.0 * blob_sigma * blob_sigma);
    let mut field = Field::zeros(size, size);
    for v in 0..size {
        for u in 0..size {
            let (uf, vf) = (u as f64, v as f64);
            let mut value: f64 = heads
                .iter()
                .zip(amplitudes)
                .map(|(h, a)| a * (-((uf - h.x).powi(2) + (vf - h.y).powi(2)) * inv_two_rho2).exp())
                .sum();
            if let Some(n) = noise {
                value += n.sample(rng);
            }
            field.set(v, u, value as f32);
        }
    }
    field
}

/// Places heads and renders one scene.
fn render_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng, scene_id: String, is_labeled: bool) -> Scene {
    let size = cfg.field_size;
    let extent = size as f64;
    let n_heads = rng.random_range(cfg.heads_per_scene[0]..=cfg.heads_per_scene[1]);
    let n_clusters = rng.random_range(cfg.cluster_count[0]..=cfg.cluster_count[1]);
    let centers: Vec<Point2D> = (0..n_clusters)
        .map(|_| Point2D::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
        .collect();
    let spread = Normal::new(0.0, cfg.cluster_spread.max(f64::MIN_POSITIVE)).expect("finite spread");

    let mut heads = Vec::with_capacity(n_heads);
    let mut amplitudes = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let center = centers[rng.random_range(0..n_clusters)];
        // Resample until the head lands inside the field.
        let p = loop {
            let p = Point2D::new(center.x + spread.sample(rng), center.y + spread.sample(rng));
            if p.x >= 0.0 && p.x < extent && p.y >= 0.0 && p.y < extent {
                break p;
            }
        };
        let mut amp = rng.random_range(cfg.amplitude_range[0]..=cfg.amplitude_range[1]);
        if rng.random_bool(cfg.ambiguous_fraction) {
            amp *= cfg.ambiguous_amplitude_scale;
        }
        heads.push(p);
        amplitudes.push(amp);
    }

    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("finite noise"));
    let field = render_field(size, &heads, &amplitudes, cfg.blob_sigma, noise.as_ref(), rng);

    Scene {
        field,
        gt_points: Some(PointSet::new(heads)),
        scene_id,
        is_labeled,
    }
}

/// Generates labeled, unlabeled and holdout scenes; a pure function of `cfg`.
///
/// `cfg.n_scenes` training scenes are split by `labeled_ratio`; a further
/// `round(0.2 · n_scenes)` holdout scenes carry ground truth for evaluation.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_labeled = cfg.n_labeled();
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(cfg.n_scenes - n_labeled);
    for i in 0..cfg.n_scenes {
        let is_labeled = i < n_labeled;
        let scene = render_scene(cfg, &mut rng, format!("train-{i:05}"), is_labeled);
        if is_labeled {
            labeled.push(scene);
        } else {
            unlabeled.push(scene);
        }
    }
    let holdout = (0..cfg.n_holdout())
        .map(|i| render_scene(cfg, &mut rng, format!("holdout-{i:05}"), true))
        .collect();
    Ok(Dataset {
        config: Some(cfg.clone()),
        labeled,
        unlabeled,
        holdout,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub scene_id: String,
    pub is_labeled: bool,
    pub height: usize,
    pub width: usize,
    pub n_points: Option<usize>,
    pub byte_offset: usize,
    pub byte_len: usize,
}

/// Human-readable sidecar describing a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub config: Option<SynthConfig>,
    pub records: Vec<IndexEntry>,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

/// Encodes scenes; returns the file bytes and the index describing them.
pub fn encode_scenes(scenes: &[Scene], config: Option<&SynthConfig>) -> Result<(Vec<u8>, DatasetIndex)> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
    let cfg_json = match config {
        Some(c) => serde_json::to_vec(c)?,
        None => Vec::new(),
    };
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(scenes.len() as u32).to_le_bytes());

    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        let start = buf.len();
        let id = s.scene_id.as_bytes();
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id);
        buf.push(s.is_labeled as u8);
        buf.extend_from_slice(&(s.field.height as u32).to_le_bytes());
        buf.extend_from_slice(&(s.field.width as u32).to_le_bytes());
        for v in &s.field.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match &s.gt_points {
            Some(ps) => {
                buf.push(1);
                buf.extend_from_slice(&(ps.len() as u32).to_le_bytes());
                for p in ps.iter() {
                    buf.extend_from_slice(&p.x.to_le_bytes());
                    buf.extend_from_slice(&p.y.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        records.push(IndexEntry {
            scene_id: s.scene_id.clone(),
            is_labeled: s.is_labeled,
            height: s.field.height,
            width: s.field.width,
            n_points: s.gt_points.as_ref().map(PointSet::len),
            byte_offset: start,
            byte_len: buf.len() - start,
        });
    }
    let index = DatasetIndex {
        format_version: DATASET_FORMAT_VERSION,
        config: config.cloned(),
        records,
    };
    Ok((buf, index))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            what: "dataset",
            record: self.record,
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.fail(format!("invalid flag byte {b}"))),
        }
    }
}

/// Decodes a dataset file produced by [`encode_scenes`].
pub fn decode_scenes(bytes: &[u8]) -> Result<(Option<SynthConfig>, Vec<Scene>)> {
    let mut r = Reader { bytes, pos: 0, record: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format {
            what: "dataset",
            record: 0,
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let config = if cfg_len == 0 {
        None
    } else {
        Some(serde_json::from_slice(cfg_bytes).map_err(|e| r.fail(format!("header config: {e}")))?)
    };
    let n = r.u32()? as usize;
    let mut scenes = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        r.record = i + 1;
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| r.fail("scene_id is not utf-8"))?
            .to_owned();
        let is_labeled = r.flag()?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let raw = r.take(
            height
                .checked_mul(width)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.fail("field too large"))?,
        )?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let gt_points = if r.flag()? {
            let np = r.u32()? as usize;
            let mut pts = Vec::with_capacity(np.min(1 << 16));
            for _ in 0..np {
                let x = r.f64()?;
                let y = r.f64()?;
                pts.push(Point2D::new(x, y));
            }
            Some(PointSet::new(pts))
        } else {
            None
        };
        scenes.push(Scene {
            field: Field { height, width, data },
            gt_points,
            scene_id: id,
            is_labeled,
        });
    }
    if r.pos != bytes.len() {
        r.record = n + 1;
        return Err(r.fail("trailing bytes after last record"));
    }
    Ok((config, scenes))
}

/// Writes the binary file at `path` and its JSON index beside it.
pub fn save_dataset(scenes: &[Scene], config: Option<&SynthConfig>, path: &Path) -> Result<()> {
    let (bytes, index) = encode_scenes(scenes, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let ipath = index_path(path);
    fs::write(&ipath, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(ipath, e))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Option<SynthConfig>, Vec<Scene>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scenes(&bytes)
}

pub const SPLIT_FILES: [&str; 3] = ["labeled.cpds", "unlabeled.cpds", "holdout.cpds"];

impl Dataset {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = self.config.as_ref();
        for (name, scenes) in SPLIT_FILES.iter().zip([&self.labeled, &self.unlabeled, &self.holdout]) {
            save_dataset(scenes, cfg, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let (config, labeled) = load_dataset(&dir.join(SPLIT_FILES[0]))?;
        let (_, unlabeled) = load_dataset(&dir.join(SPLIT_FILES[1]))?;
        let (_, holdout) = load_dataset(&dir.join(SPLIT_FILES[2]))?;
        Ok(Self {
            config,
            labeled,
            unlabeled,
            holdout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            field_size: 32,
            n_scenes: 10,
            heads_per_scene: [2, 6],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn ratio_split() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(ds.labeled.len(), 1);
        assert_eq!(ds.unlabeled.len(), 9);
        assert_eq!(ds.holdout.len(), 2);
        assert!(ds.labeled.iter().chain(&ds.holdout).all(|s| s.labels().is_some()));
        assert!(ds.unlabeled.iter().all(|s| s.labels().is_none()));
    }

    #[test]
    fn isolated_blob_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = render_field(64, &[Point2D::new(32.0, 32.0)], &[1.0], 2.0, None, &mut rng);
        assert!((f.get(32, 32) - 1.0).abs() < 1e-6);
        assert_eq!(f.max(), f.get(32, 32));
    }

    #[test]
    fn nearest_pixel_floor() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small_cfg()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let floor = cfg.amplitude_range[0] * cfg.ambiguous_amplitude_scale * (-0.5f64).exp();
        for s in ds.labeled.iter().chain(&ds.unlabeled).chain(&ds.holdout) {
            for p in s.gt_points.as_ref().unwrap().iter() {
                assert!(p.x >= 0.0 && p.x < 32.0 && p.y >= 0.0 && p.y < 32.0);
                let r = (p.y.round() as usize).min(31);
                let c = (p.x.round() as usize).min(31);
                assert!(s.field.get(r, c) as f64 >= floor - 1e-6);
            }
        }
    }

    #[test]
    fn capacity_rejected() {
        let cfg = SynthConfig {
            field_size: 8,
            heads_per_scene: [1, 17],
            ..small_cfg()
        };
        assert!(matches!(
            generate_dataset(&cfg),
            Err(Error::Config {
                field: "heads_per_scene",
                ..
            })
        ));
    }

    #[test]
    fn zero_labeled_ratio_rejected() {
        let cfg = SynthConfig {
            labeled_ratio: 0.0,
            ..small_cfg()
        };
        assert!(matches!(
            cfg.validate(),
            Err(Error::Config {
                field: "labeled_ratio",
                ..
            })
        ));
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = SynthConfig { seed: 42, ..small_cfg() };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        let enc = |d: &Dataset| encode_scenes(&d.unlabeled, d.config.as_ref()).unwrap().0;
        assert_eq!(enc(&a), enc(&b));
    }

    #[test]
    fn empty_file_round_trip() {
        let (bytes, index) = encode_scenes(&[], None).unwrap();
        assert!(index.records.is_empty());
        let (cfg, scenes) = decode_scenes(&bytes).unwrap();
        assert!(cfg.is_none() && scenes.is_empty());
    }

    #[test]
    fn truncated_record_is_error() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let (bytes, _) = encode_scenes(&ds.labeled, ds.config.as_ref()).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 9, bytes.len() / 2] {
            match decode_scenes(&bytes[..cut]) {
                Err(Error::Format { record, offset, .. }) => {
                    assert_eq!(record, 1);
                    assert!(offset <= cut);
                }
                other => panic!("expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn flip_is_involution() {
        let f = Field::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let g = f.flip_horizontal();
        assert_eq!(g.data, vec![3., 2., 1., 6., 5., 4.]);
        assert_eq!(g.flip_horizontal(), f);
        let p = Point2D::new(0.25, 1.0);
        assert_eq!(flip_point(flip_point(p, 3), 3), p);
    }
}

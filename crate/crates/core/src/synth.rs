//! Procedural source/target segmentation domains.
//!
//! Both domains draw scenes from the same geometry distribution: a
//! background (class 0) with circles, rectangles and diagonal bands of the
//! foreground classes, plus small specks of an optional rare class. Only
//! appearance differs between domains.
//!
//! Class colours sit on a hue wheel around mid-grey. The target domain
//! rotates every hue by `palette_shift` times the spacing between
//! neighbouring classes, so target pixels of class `k` drift towards the
//! source colour of class `k + 1`. Each foreground class also carries a
//! faint domain-invariant texture.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{read_crat, write_crat, Dtype, Tensor};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const CHANNELS: usize = 3;
const HUE_RADIUS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Domain::Source => 0x5eed_0000_0000_0001,
            Domain::Target => 0x5eed_0000_0000_0002,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Foreground shapes per image (the rare class is drawn separately).
    pub shapes_per_image: usize,
    /// Target hue rotation as a fraction of the hue spacing between classes.
    pub palette_shift: f64,
    pub noise_source: f64,
    pub noise_target: f64,
    /// Amplitude of the per-class texture pattern.
    pub texture: f64,
    /// Class drawn only as small specks; `None` disables it.
    pub rare_class: Option<usize>,
    /// Expected number of 3x3 rare specks per image.
    pub rare_specks: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            height: 64,
            width: 64,
            shapes_per_image: 6,
            palette_shift: 0.35,
            noise_source: 0.05,
            noise_target: 0.08,
            texture: 0.06,
            rare_class: Some(4),
            rare_specks: 2.5,
            seed: 42,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("scene needs at least 2 classes".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scene must be at least 8x8".into()));
        }
        if let Some(r) = self.rare_class {
            if r == 0 || r >= self.classes {
                return Err(Error::Config(format!("rare class {r} must be a foreground class")));
            }
            if self.classes < 3 {
                return Err(Error::Config("a rare class needs at least 3 classes".into()));
            }
        }
        if self.noise_source < 0.0 || self.noise_target < 0.0 || self.texture < 0.0 {
            return Err(Error::Config("noise and texture must be non-negative".into()));
        }
        Ok(())
    }

    fn regular_foreground(&self) -> Vec<usize> {
        (1..self.classes).filter(|&k| Some(k) != self.rare_class).collect()
    }

    /// Mean RGB colour of `class` in `domain`.
    pub fn palette(&self, domain: Domain, class: usize) -> [f64; 3] {
        let spacing = 2.0 * PI / self.classes as f64;
        let shift = match domain {
            Domain::Source => 0.0,
            Domain::Target => self.palette_shift * spacing,
        };
        let theta = class as f64 * spacing + shift;
        // orthonormal basis of the plane orthogonal to the grey axis
        let u = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
        let v = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
        let (c, s) = (theta.cos(), theta.sin());
        std::array::from_fn(|i| 0.5 + HUE_RADIUS * (c * u[i] + s * v[i]))
    }

    /// Mean distance between each class's source and target colour.
    pub fn palette_gap(&self) -> f64 {
        (0..self.classes)
            .map(|k| {
                let (a, b) = (self.palette(Domain::Source, k), self.palette(Domain::Target, k));
                a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / self.classes as f64
    }

    fn noise(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Source => self.noise_source,
            Domain::Target => self.noise_target,
        }
    }

    fn image_seed(&self, domain: Domain, index: usize) -> u64 {
        splitmix64(self.seed ^ domain.salt() ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Texture value of `class` at `(y, x)`, in `[-1, 1]`.
fn texture(class: usize, y: usize, x: usize) -> f64 {
    let (y, x) = (y as f64, x as f64);
    match class % 4 {
        0 => 0.0,
        1 => (y * PI / 2.0).sin(),
        2 => (x * PI / 2.0).sin(),
        _ => ((x + y) * PI / 3.0).cos(),
    }
}

fn draw_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u32; h * w];
    let fg = spec.regular_foreground();
    let hf = h as f64;
    if !fg.is_empty() {
        for i in 0..spec.shapes_per_image.max(1) {
            let class = fg[(i + rng.gen_range(0..fg.len())) % fg.len()] as u32;
            match rng.gen_range(0..3) {
                0 => {
                    let r = rng.gen_range(0.08 * hf..0.2 * hf);
                    let cy = rng.gen_range(0.0..hf);
                    let cx = rng.gen_range(0.0..w as f64);
                    for y in 0..h {
                        for x in 0..w {
                            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                            if dy * dy + dx * dx <= r * r {
                                labels[y * w + x] = class;
                            }
                        }
                    }
                }
                1 => {
                    let rh = rng.gen_range(h / 8..h / 3);
                    let rw = rng.gen_range(w / 8..w / 3);
                    let y0 = rng.gen_range(0..h - rh);
                    let x0 = rng.gen_range(0..w - rw);
                    for y in y0..y0 + rh {
                        labels[y * w + x0..y * w + x0 + rw].fill(class);
                    }
                }
                _ => {
                    let thick = rng.gen_range(0.05 * hf..0.1 * hf);
                    let off = rng.gen_range(-0.5 * hf..0.5 * hf);
                    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    for y in 0..h {
                        for x in 0..w {
                            let d = (y as f64 - dir * x as f64 - off) / 2f64.sqrt();
                            if d.abs() <= thick {
                                labels[y * w + x] = class;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(rare) = spec.rare_class {
        let specks = rng.gen_range(0.0..2.0 * spec.rare_specks).round() as usize;
        for _ in 0..specks {
            let y0 = rng.gen_range(0..h - 3);
            let x0 = rng.gen_range(0..w - 3);
            for y in y0..y0 + 3 {
                labels[y * w + x0..y * w + x0 + 3].fill(rare as u32);
            }
        }
    }
    labels
}

/// Renders one image `[3, H, W]` in `[0, 1]` and its label map `[1, H, W]`.
pub fn generate_image(spec: &SceneSpec, domain: Domain, index: usize) -> Result<(Tensor, LabelMap)> {
    let (h, w) = (spec.height, spec.width);
    let mut geo = ChaCha8Rng::seed_from_u64(spec.image_seed(domain, index));
    let mut labels = draw_labels(spec, &mut geo);
    // Guarantee both background and some foreground.
    if !labels.contains(&0) {
        labels[0] = 0;
    }
    if labels.iter().all(|&l| l == 0) {
        let k = spec.regular_foreground().first().copied().unwrap_or(1) as u32;
        labels[(h / 2) * w + w / 2] = k;
    }
    let noise = Normal::new(0.0, spec.noise(domain).max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let palette: Vec<[f64; 3]> = (0..spec.classes).map(|k| spec.palette(domain, k)).collect();
    let mut img = vec![0.0; CHANNELS * h * w];
    for y in 0..h {
        for x in 0..w {
            let k = labels[y * w + x] as usize;
            let tex = spec.texture * texture(k, y, x);
            for c in 0..CHANNELS {
                let v = palette[k][c] + tex + noise.sample(&mut geo);
                img[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((Tensor::new(vec![CHANNELS, h, w], img)?, LabelMap::new(1, h, w, labels)?))
}

/// Counts recorded in `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub source_train: usize,
    pub target_train: usize,
    pub target_eval: usize,
}

fn image_path(root: &Path, domain: Domain, sub: &str, index: usize) -> PathBuf {
    root.join(domain.as_str()).join(sub).join(format!("{index:06}.crat"))
}

/// Writes both domains under `root`. Target images `0..target_train` are the
/// unlabelled training pool, `target_train..target_train + target_eval` the
/// held-out evaluation images; all target labels go to `eval_labels/`.
pub fn generate_dataset(
    spec: &SceneSpec,
    root: &Path,
    source_train: usize,
    target_train: usize,
    target_eval: usize,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if source_train == 0 || target_train == 0 || target_eval == 0 {
        return Err(Error::Config("every split needs at least one image".into()));
    }
    for (domain, sub) in [
        (Domain::Source, "images"),
        (Domain::Source, "labels"),
        (Domain::Target, "images"),
        (Domain::Target, "eval_labels"),
    ] {
        let dir = root.join(domain.as_str()).join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for i in 0..source_train {
        let (img, lab) = generate_image(spec, Domain::Source, i)?;
        write_crat(&image_path(root, Domain::Source, "images", i), &img, Dtype::F64)?;
        write_crat(&image_path(root, Domain::Source, "labels", i), &lab.to_tensor(), Dtype::F64)?;
    }
    for i in 0..target_train + target_eval {
        let (img, lab) = generate_image(spec, Domain::Target, i)?;
        write_crat(&image_path(root, Domain::Target, "images", i), &img, Dtype::F64)?;
        write_crat(&image_path(root, Domain::Target, "eval_labels", i), &lab.to_tensor(), Dtype::F64)?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: spec.clone(),
        source_train,
        target_train,
        target_eval,
    };
    let path = root.join("dataset.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A batch of images with labels where the access path allows them.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub images: Tensor,
    pub labels: Option<LabelMap>,
    pub domain: Domain,
}

/// Read access to a generated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("dataset at {}", root.display()),
                command: "gen-data",
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format {
                path,
                msg: format!("unsupported dataset version {}", manifest.format_version),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.manifest.spec
    }

    fn len(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.manifest.source_train,
            Domain::Target => self.manifest.target_train,
        }
    }

    fn load_images(&self, domain: Domain, indices: &[usize]) -> Result<Tensor> {
        let parts = indices
            .iter()
            .map(|&i| {
                let t = read_crat(&image_path(&self.root, domain, "images", i))?;
                let s = t.shape().to_vec();
                t.reshaped(&[1, s[0], s[1], s[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&parts)
    }

    fn load_labels(&self, domain: Domain, sub: &str, indices: &[usize]) -> Result<LabelMap> {
        let parts = indices
            .iter()
            .map(|&i| LabelMap::from_tensor(&read_crat(&image_path(&self.root, domain, sub, i))?))
            .collect::<Result<Vec<_>>>()?;
        LabelMap::stack(&parts)
    }

    fn check_range(&self, indices: &[usize], len: usize, what: &str) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::invalid("load_batch", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::invalid("load_batch", format!("{what} index {bad} out of range (len {len})")));
        }
        Ok(())
    }

    /// Training access. Source batches carry labels; target batches never do.
    pub fn load_batch(&self, domain: Domain, indices: &[usize]) -> Result<DomainBatch> {
        self.check_range(indices, self.len(domain), domain.as_str())?;
        let images = self.load_images(domain, indices)?;
        let labels = match domain {
            Domain::Source => Some(self.load_labels(domain, "labels", indices)?),
            Domain::Target => None,
        };
        Ok(DomainBatch { images, labels, domain })
    }

    pub fn load_all(&self, domain: Domain) -> Result<DomainBatch> {
        let idx: Vec<usize> = (0..self.len(domain)).collect();
        self.load_batch(domain, &idx)
    }

    /// Evaluation access to the held-out target images, with labels.
    pub fn load_eval(&self) -> Result<DomainBatch> {
        let start = self.manifest.target_train;
        let idx: Vec<usize> = (start..start + self.manifest.target_eval).collect();
        Ok(DomainBatch {
            images: self.load_images(Domain::Target, &idx)?,
            labels: Some(self.load_labels(Domain::Target, "eval_labels", &idx)?),
            domain: Domain::Target,
        })
    }

    /// Ground truth of the target training pool, for diagnostics that
    /// measure pseudo-label quality. Never used for training.
    pub fn load_target_train_truth(&self) -> Result<LabelMap> {
        let idx: Vec<usize> = (0..self.manifest.target_train).collect();
        self.load_labels(Domain::Target, "eval_labels", &idx)
    }
}

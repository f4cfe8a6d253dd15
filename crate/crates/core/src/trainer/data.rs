use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Stage;
use crate::error::{Error, Result};
use crate::labels::{crop_tensor, LabelMap};
use crate::region::SplitSummary;
use crate::synth::{splitmix64, DomainBatch};
use crate::tensor::{read_crat, write_crat, Dtype, Tensor};

/// Deterministic RNG for one draw of one iteration of one stage.
pub fn iteration_rng(seed: u64, stage: Stage, stream: u64, iteration: usize) -> ChaCha8Rng {
    let mut z = splitmix64(seed);
    for part in [stage as u64 + 1, stream, iteration as u64] {
        z = splitmix64(z ^ part);
    }
    ChaCha8Rng::seed_from_u64(z)
}

/// Image indices and per-image crop corners of one minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Draw {
    pub indices: Vec<usize>,
    pub corners: Vec<(usize, usize)>,
    pub size: (usize, usize),
}

/// Samples `batch` distinct images (with replacement only when `batch`
/// exceeds the pool) and one crop window per image.
pub fn draw(rng: &mut ChaCha8Rng, pool: usize, batch: usize, image: (usize, usize), crop: Option<usize>) -> Draw {
    let indices: Vec<usize> = if batch <= pool {
        index::sample(rng, pool, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..pool)).collect()
    };
    let (h, w) = image;
    let size = crop.map_or((h, w), |c| (c, c));
    let corners = indices
        .iter()
        .map(|_| (rng.gen_range(0..=h - size.0), rng.gen_range(0..=w - size.1)))
        .collect();
    Draw { indices, corners, size }
}

/// Per-image tensors of one domain, held in memory.
pub struct ImageStore {
    images: Vec<Tensor>,
    labels: Option<Vec<LabelMap>>,
}

impl ImageStore {
    pub fn new(batch: DomainBatch) -> Result<Self> {
        let n = batch.images.dims4()?.0;
        let images = (0..n).map(|i| batch.images.batch_slice(i, i + 1)).collect::<Result<Vec<_>>>()?;
        let labels = batch.labels.map(|l| (0..n).map(|i| l.image(i)).collect());
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[2], s[3])
    }

    pub fn images(&self, d: &Draw) -> Result<Tensor> {
        let parts = d
            .indices
            .iter()
            .zip(&d.corners)
            .map(|(&i, &(y, x))| crop_tensor(&self.images[i], y, x, d.size.0, d.size.1))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&parts)
    }

    pub fn labels(&self, d: &Draw) -> Result<LabelMap> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("image store", "this domain carries no labels"))?;
        let parts = d
            .indices
            .iter()
            .zip(&d.corners)
            .map(|(&i, &(y, x))| labels[i].crop(y, x, d.size.0, d.size.1))
            .collect::<Result<Vec<_>>>()?;
        LabelMap::stack(&parts)
    }

    /// Images `start..end` uncropped.
    pub fn range(&self, start: usize, end: usize) -> Result<Tensor> {
        Tensor::stack_batch(&self.images[start..end])
    }
}

pub const SPLIT_SUMMARY: &str = "summary.json";

fn artifact(dir: &Path, kind: &str, index: usize) -> PathBuf {
    dir.join(kind).join(format!("{index:06}.crat"))
}

/// Writes the per-image entropy, trusted mask and pseudo-labels of images
/// `first..first + B`.
pub fn write_split_images(dir: &Path, first: usize, entropy: &Tensor, trusted: &Tensor, pseudo: &LabelMap) -> Result<()> {
    for kind in ["entropy", "trusted", "pseudo"] {
        let d = dir.join(kind);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let b = pseudo.batch();
    let hw = [pseudo.shape()[1], pseudo.shape()[2]];
    let per = hw[0] * hw[1];
    for i in 0..b {
        let slice = |t: &Tensor| Tensor::new(vec![1, hw[0], hw[1]], t.data()[i * per..(i + 1) * per].to_vec());
        write_crat(&artifact(dir, "entropy", first + i), &slice(entropy)?, Dtype::F64)?;
        write_crat(&artifact(dir, "trusted", first + i), &slice(trusted)?, Dtype::F64)?;
        write_crat(&artifact(dir, "pseudo", first + i), &pseudo.image(i).to_tensor(), Dtype::F64)?;
    }
    Ok(())
}

pub fn write_split_summary(dir: &Path, summary: &SplitSummary) -> Result<()> {
    let path = dir.join(SPLIT_SUMMARY);
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_split_summary(dir: &Path) -> Result<SplitSummary> {
    let path = dir.join(SPLIT_SUMMARY);
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            what: format!("region split at {}", dir.display()),
            command: "split-regions",
        });
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Persisted trusted masks and pseudo-labels of the target training pool.
pub struct RegionStore {
    trusted: Vec<Tensor>,
    pseudo: Vec<LabelMap>,
}

/// One CRA minibatch: images with their pseudo-labels and region masks.
pub struct RegionBatch {
    pub images: Tensor,
    pub pseudo: LabelMap,
    /// `[B, H, W]`, 1 on trusted pixels.
    pub trusted: Tensor,
    /// `1 - trusted`.
    pub untrusted: Tensor,
}

impl RegionStore {
    pub fn load(dir: &Path, images: usize) -> Result<Self> {
        let summary = read_split_summary(dir)?;
        if summary.images != images {
            return Err(Error::Config(format!(
                "region split covers {} images, the target pool has {images}",
                summary.images
            )));
        }
        let mut trusted = Vec::with_capacity(images);
        let mut pseudo = Vec::with_capacity(images);
        for i in 0..images {
            let m = read_crat(&artifact(dir, "trusted", i))?;
            let s = m.shape().to_vec();
            if s.len() != 3 {
                return Err(Error::Format {
                    path: artifact(dir, "trusted", i),
                    msg: format!("mask shape {s:?}"),
                });
            }
            trusted.push(m.reshaped(&[1, 1, s[1], s[2]])?);
            pseudo.push(LabelMap::from_tensor(&read_crat(&artifact(dir, "pseudo", i))?)?);
        }
        Ok(Self { trusted, pseudo })
    }

    pub fn len(&self) -> usize {
        self.trusted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trusted.is_empty()
    }

    /// Trusted masks `[N, H, W]` of the whole pool.
    pub fn trusted_all(&self) -> Result<Tensor> {
        let t = Tensor::stack_batch(&self.trusted)?;
        let (n, _, h, w) = t.dims4()?;
        t.reshaped(&[n, h, w])
    }

    pub fn batch(&self, images: &ImageStore, d: &Draw) -> Result<RegionBatch> {
        let (h, w) = d.size;
        let masks = d
            .indices
            .iter()
            .zip(&d.corners)
            .map(|(&i, &(y, x))| crop_tensor(&self.trusted[i], y, x, h, w))
            .collect::<Result<Vec<_>>>()?;
        let trusted = Tensor::stack_batch(&masks)?.reshaped(&[d.indices.len(), h, w])?;
        let untrusted = Tensor::new(trusted.shape().to_vec(), trusted.data().iter().map(|m| 1.0 - m).collect())?;
        let pseudo = d
            .indices
            .iter()
            .zip(&d.corners)
            .map(|(&i, &(y, x))| self.pseudo[i].crop(y, x, h, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionBatch {
            images: images.images(d)?,
            pseudo: LabelMap::stack(&pseudo)?,
            trusted,
            untrusted,
        })
    }
}

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{hwc_batch_to_nchw, DomainDataset};
use crate::error::{Error, Result};
use crate::hashing::ContentHasher;
use crate::nn::{io, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySource {
    pub domain: String,
    pub index: usize,
}

/// The fixed batch of N images submitted to every model.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    /// `[H, W, channels]`
    pub shape: [usize; 3],
    pub images: Vec<f32>,
    pub sources: Vec<QuerySource>,
    pub seed: u64,
    pub hash: String,
}

#[derive(Serialize, Deserialize)]
struct QuerySidecar {
    shape: [usize; 3],
    sources: Vec<QuerySource>,
    seed: u64,
    hash: String,
}

fn content_hash(shape: &[usize; 3], images: &[f32], sources: &[QuerySource]) -> String {
    let mut h = ContentHasher::new();
    for &d in shape {
        h.u64(d as u64);
    }
    h.f32s(images);
    for s in sources {
        h.str(&s.domain).u64(s.index as u64);
    }
    h.finish()
}

/// Picks `m` indices of `data`, spread as evenly as possible over classes.
fn stratified(data: &DomainDataset, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let c = data.class_count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    // water-fill quotas so classes with few images give their share away
    let mut quota = vec![0usize; c];
    let mut left = m;
    while left > 0 {
        let open: Vec<usize> = (0..c).filter(|&k| quota[k] < by_class[k].len()).collect();
        if open.is_empty() {
            break;
        }
        for &k in open.iter().take(left) {
            quota[k] += 1;
            left -= 1;
        }
    }
    let mut picked = Vec::with_capacity(m);
    for (members, &q) in by_class.iter().zip(&quota) {
        picked.extend(sample(rng, members.len(), q).into_iter().map(|j| members[j]));
    }
    picked.sort_unstable();
    picked
}

impl QuerySet {
    /// Draws `n / M` images from each of the `M` source domains, stratified
    /// by class. Order is domain-major, then image index.
    pub fn build(datasets: &[&DomainDataset], n: usize, seed: u64) -> Result<Self> {
        let m = datasets.len();
        if m == 0 {
            return Err(Error::QuerySet("no source domains".into()));
        }
        if n == 0 || n % m != 0 {
            return Err(Error::QuerySet(format!(
                "N = {n} is not divisible by the {m} source domains"
            )));
        }
        DomainDataset::ensure_shared_label_space(datasets)?;
        let per = n / m;
        let shape = datasets[0].image_shape();
        let mut images = Vec::with_capacity(n * datasets[0].image_len());
        let mut sources = Vec::with_capacity(n);
        for (d, data) in datasets.iter().enumerate() {
            if data.len() < per {
                return Err(Error::QuerySet(format!(
                    "domain {} has {} images, {per} needed",
                    data.name,
                    data.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            for i in stratified(data, per, &mut rng) {
                images.extend_from_slice(data.image(i));
                sources.push(QuerySource {
                    domain: data.name.clone(),
                    index: i,
                });
            }
        }
        let hash = content_hash(&shape, &images, &sources);
        Ok(Self {
            shape,
            images,
            sources,
            seed,
            hash,
        })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// All queries as an `[N, channels, H, W]` tensor.
    pub fn batch_nchw(&self) -> Tensor {
        let imgs: Vec<&[f32]> = (0..self.len()).map(|i| self.image(i)).collect();
        let [h, w, c] = self.shape;
        hwc_batch_to_nchw(&imgs, h, w, c)
    }

    pub fn ensure_hash(&self, expected: &str) -> Result<()> {
        if self.hash != expected {
            return Err(Error::QueryHashMismatch {
                expected: expected.to_string(),
                got: self.hash.clone(),
            });
        }
        Ok(())
    }

    /// Writes `<stem>.drm` (images) and `<stem>.json` (provenance and hash).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let [h, w, c] = self.shape;
        let t = Tensor::new(vec![self.len(), h, w, c], self.images.clone())?;
        io::save_records(&stem.with_extension("drm"), &[("queries".to_string(), t)])?;
        let side = QuerySidecar {
            shape: self.shape,
            sources: self.sources.clone(),
            seed: self.seed,
            hash: self.hash.clone(),
        };
        io::write_atomic(&stem.with_extension("json"), &serde_json::to_vec_pretty(&side)?)
    }

    /// Loads and re-verifies the content hash.
    pub fn load(stem: &Path) -> Result<Self> {
        let json_path = stem.with_extension("json");
        let text = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let side: QuerySidecar = serde_json::from_slice(&text)?;
        let records = io::load_records(&stem.with_extension("drm"))?;
        let (_, t) = records
            .into_iter()
            .find(|(k, _)| k == "queries")
            .ok_or_else(|| Error::QuerySet("container has no \"queries\" record".into()))?;
        let images = t.into_data();
        let got = content_hash(&side.shape, &images, &side.sources);
        if got != side.hash {
            return Err(Error::QueryHashMismatch {
                expected: side.hash,
                got,
            });
        }
        Ok(Self {
            shape: side.shape,
            images,
            sources: side.sources,
            seed: side.seed,
            hash: side.hash,
        })
    }
}

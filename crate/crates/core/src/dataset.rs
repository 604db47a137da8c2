//! Synthetic paired two-view data with a known latent correspondence.
//!
//! Each sample `i` of class `c` has latent `z_i = μ_c + s·σ·u_i`, where `s`
//! is the instance spread and `σ` the noise level. The
//! "pixel" view is `squash(M_v z_i + σ·e_v)` and the "text" view is
//! `M_w z_i + σ·e_w`, with `M_v`, `M_w`, the class centres and all noise
//! drawn from the `data` stream of the generator seed. The squash is one
//! affine min-max map computed over the pixel views of all three splits, so
//! every split shares the same scale and lies in `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"ADVL";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub num_classes: usize,
    pub d_latent: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub noise_sigma: f64,
    /// Per-sample latent jitter in units of `noise_sigma`. Shared by both
    /// views, so it is what tells pairs of the same class apart.
    pub instance_spread: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            num_classes: 32,
            d_latent: 16,
            d_v: 64,
            d_w: 48,
            noise_sigma: 0.05,
            instance_spread: 3.0,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.d_latent == 0 || self.d_latent > self.d_v.min(self.d_w) {
            return Err(Error::config(format!(
                "d_latent ({}) must be in 1..=min(d_v, d_w) = {}",
                self.d_latent,
                self.d_v.min(self.d_w)
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        if !(self.instance_spread >= 0.0 && self.instance_spread.is_finite()) {
            return Err(Error::config("instance_spread must be finite and non-negative"));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("every split needs at least one sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    fn tag(self) -> u8 {
        match self {
            SplitKind::Train => 0,
            SplitKind::Val => 1,
            SplitKind::Test => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub view_v: Vec<f64>,
    pub view_w: Vec<f64>,
    pub latent_id: u32,
    pub pair_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<PairedSample>,
    pub split: SplitKind,
    pub generator_seed: u64,
    pub params: GeneratorParams,
    /// `(lo, hi)` of the affine squash `x -> (x - lo) / (hi - lo)`.
    pub squash: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &DatasetSplit {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

fn gaussian_vec(rng: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * { let x: f64 = StandardNormal.sample(rng); x })
        .collect::<Vec<f64>>()
}

fn apply(m: &[f64], rows: usize, cols: usize, z: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

/// Generates train/val/test splits. Identical `(params, seed)` gives identical output.
pub fn generate(params: &GeneratorParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let mut rng = rng::stream(seed, rng::DATA);
    let p = params;
    let map_scale = 1.0 / (p.d_latent as f64).sqrt();
    let m_v = gaussian_vec(&mut rng, p.d_v * p.d_latent, map_scale);
    let m_w = gaussian_vec(&mut rng, p.d_w * p.d_latent, map_scale);
    let centers: Vec<Vec<f64>> = (0..p.num_classes)
        .map(|_| gaussian_vec(&mut rng, p.d_latent, 1.0))
        .collect();

    let sizes = [p.n_train, p.n_val, p.n_test];
    let mut raw: Vec<Vec<PairedSample>> = Vec::with_capacity(3);
    let mut next_pair = 0u64;
    for &n in &sizes {
        let mut labels: Vec<usize> = (0..n).map(|i| i % p.num_classes).collect();
        labels.shuffle(&mut rng);
        let mut samples = Vec::with_capacity(n);
        for label in labels {
            let jitter = gaussian_vec(&mut rng, p.d_latent, p.instance_spread * p.noise_sigma);
            let z: Vec<f64> = centers[label].iter().zip(&jitter).map(|(c, j)| c + j).collect();
            let mut view_v = apply(&m_v, p.d_v, p.d_latent, &z);
            for (x, e) in view_v.iter_mut().zip(gaussian_vec(&mut rng, p.d_v, p.noise_sigma)) {
                *x += e;
            }
            let mut view_w = apply(&m_w, p.d_w, p.d_latent, &z);
            for (x, e) in view_w.iter_mut().zip(gaussian_vec(&mut rng, p.d_w, p.noise_sigma)) {
                *x += e;
            }
            samples.push(PairedSample {
                view_v,
                view_w,
                latent_id: label as u32,
                pair_id: next_pair,
            });
            next_pair += 1;
        }
        raw.push(samples);
    }

    let (lo, hi) = raw
        .iter()
        .flatten()
        .flat_map(|s| s.view_v.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for s in raw.iter_mut().flatten() {
        for x in &mut s.view_v {
            *x = ((*x - lo) / span).clamp(0.0, 1.0);
        }
    }

    let mut splits = raw.into_iter().zip(SplitKind::ALL).map(|(samples, split)| DatasetSplit {
        samples,
        split,
        generator_seed: seed,
        params: *params,
        squash: (lo, lo + span),
    });
    Ok(Dataset {
        train: splits.next().expect("three splits"),
        val: splits.next().expect("three splits"),
        test: splits.next().expect("three splits"),
    })
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pixel views stacked as an `n × d_v` matrix.
    pub fn views_v(&self) -> Tensor {
        let data = self.samples.iter().flat_map(|s| s.view_v.iter().copied()).collect();
        Tensor::matrix(self.len(), self.params.d_v, data).expect("views have d_v entries")
    }

    /// Text views stacked as an `n × d_w` matrix.
    pub fn views_w(&self) -> Tensor {
        let data = self.samples.iter().flat_map(|s| s.view_w.iter().copied()).collect();
        Tensor::matrix(self.len(), self.params.d_w, data).expect("views have d_w entries")
    }

    /// Copy of this split restricted to (and reordered by) `indices`.
    pub fn subset(&self, indices: &[usize]) -> Result<DatasetSplit> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::dim(format!("sample index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Ok(DatasetSplit {
            samples,
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> DatasetSplit {
        DatasetSplit {
            samples: Vec::new(),
            split: self.split,
            generator_seed: self.generator_seed,
            params: self.params,
            squash: self.squash,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.params.num_classes];
        for s in &self.samples {
            counts[s.latent_id as usize] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut e = Encoder::new(DATASET_MAGIC);
        e.u8(self.split.tag());
        e.u64(self.generator_seed);
        e.u32(p.num_classes as u32);
        e.u32(p.d_latent as u32);
        e.u32(p.d_v as u32);
        e.u32(p.d_w as u32);
        e.f64(p.noise_sigma);
        e.f64(p.instance_spread);
        e.u64(p.n_train as u64);
        e.u64(p.n_val as u64);
        e.u64(p.n_test as u64);
        e.f64(self.squash.0);
        e.f64(self.squash.1);
        e.u64(self.samples.len() as u64);
        for s in &self.samples {
            e.u64(s.pair_id);
            e.u32(s.latent_id);
            e.f64s(&s.view_v);
            e.f64s(&s.view_w);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, DATASET_MAGIC)?;
        let at = d.offset();
        let split = SplitKind::from_tag(d.u8()?)
            .ok_or_else(|| Error::format(at, "unknown split tag"))?;
        let generator_seed = d.u64()?;
        let at = d.offset();
        let params = GeneratorParams {
            num_classes: d.u32()? as usize,
            d_latent: d.u32()? as usize,
            d_v: d.u32()? as usize,
            d_w: d.u32()? as usize,
            noise_sigma: d.f64()?,
            instance_spread: d.f64()?,
            n_train: d.len_u64(u32::MAX.into())?,
            n_val: d.len_u64(u32::MAX.into())?,
            n_test: d.len_u64(u32::MAX.into())?,
        };
        params
            .validate()
            .map_err(|e| Error::format(at, format!("invalid header: {e}")))?;
        let squash = (d.f64()?, d.f64()?);
        let n = d.len_u64(u32::MAX.into())?;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let pair_id = d.u64()?;
            let at = d.offset();
            let latent_id = d.u32()?;
            if latent_id as usize >= params.num_classes {
                return Err(Error::format(at, format!("latent id {latent_id} out of range")));
            }
            let view_v = d.f64s(params.d_v)?;
            let view_w = d.f64s(params.d_w)?;
            samples.push(PairedSample {
                view_v,
                view_w,
                latent_id,
                pair_id,
            });
        }
        d.expect_end()?;
        Ok(Self {
            samples,
            split,
            generator_seed,
            params,
            squash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

use rand_distr::{Distribution, Normal};
use s3im_tensor::{Bindings, ParameterSet, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub const FEATURE_CHANNELS: usize = 64;
pub const EMBED_DIM: usize = 64;
pub const PROJ_HIDDEN: usize = 128;
/// Smallest square patch the encoder accepts.
pub const MIN_PATCH: usize = 16;

const CHANNELS: [usize; 5] = [3, 16, 32, 64, 64];
const STRIDES: [usize; 4] = [1, 2, 1, 2];

/// Per-channel mean and standard deviation of the encoder's last feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeature {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

/// Unit-norm style vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding(pub Vec<f32>);

impl StyleEmbedding {
    pub fn dot(&self, o: &StyleEmbedding) -> f32 {
        self.0.iter().zip(&o.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f32 {
        self.dot(self).sqrt()
    }

    /// Re-normalized mean of several embeddings.
    pub fn pooled(items: &[StyleEmbedding]) -> Result<StyleEmbedding> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument("no embeddings to pool".into()))?;
        let mut m = vec![0.0f64; first.0.len()];
        for e in items {
            m.iter_mut().zip(&e.0).for_each(|(a, &b)| *a += b as f64);
        }
        let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= 1e-12 {
            return Err(s3im_tensor::TensorError::DegenerateEmbedding.into());
        }
        Ok(StyleEmbedding(m.iter().map(|v| (v / n) as f32).collect()))
    }
}

pub fn is_projector(path: &str) -> bool {
    path.starts_with("projector.")
}

/// Style encoder `E` (four 3×3 conv blocks with replicate padding) and
/// projector `P` (two affine layers), in one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleNet<T> {
    pub params: ParameterSet<T>,
}

fn normal<T: Real>(shape: &[usize], std: f64, r: &mut impl rand::Rng) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(d.sample(r))).collect()).expect("shape matches")
}

impl<T: Real> StyleNet<T> {
    /// He-normal convolutions and affine layers, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut r = rng::stream(seed, "style-net-init", 0);
        let mut params = ParameterSet::new();
        for i in 0..4 {
            let (ci, co) = (CHANNELS[i], CHANNELS[i + 1]);
            let std = (2.0 / (ci * 9) as f64).sqrt();
            params.insert(format!("encoder.conv{i}.weight"), normal(&[co, ci, 3, 3], std, &mut r)).expect("unique");
            params.insert(format!("encoder.conv{i}.bias"), Tensor::zeros(&[co])).expect("unique");
        }
        let dims = [(2 * FEATURE_CHANNELS, PROJ_HIDDEN), (PROJ_HIDDEN, EMBED_DIM)];
        for (i, (fi, fo)) in dims.into_iter().enumerate() {
            let std = (2.0 / fi as f64).sqrt();
            params.insert(format!("projector.fc{i}.weight"), normal(&[fo, fi], std, &mut r)).expect("unique");
            params.insert(format!("projector.fc{i}.bias"), Tensor::zeros(&[fo])).expect("unique");
        }
        Self { params }
    }

    pub fn cast<U: Real>(&self) -> StyleNet<U> {
        StyleNet { params: self.params.cast() }
    }

    /// Records patches as a `[B, 3, P, P]` constant centered at zero.
    pub fn input(tape: &mut Tape<T>, patches: &[&Image]) -> Result<Var> {
        let p = patches.first().map_or(0, |i| i.height);
        if patches.iter().any(|i| i.height != p || i.width != p) {
            return Err(Error::InvalidArgument("patches must be square and equally sized".into()));
        }
        if p < MIN_PATCH {
            return Err(Error::InvalidArgument(format!("patch size {p} below the encoder minimum {MIN_PATCH}")));
        }
        let t = Image::batch_tensor::<T>(patches, 1.0, -0.5)?;
        Ok(tape.leaf(&t))
    }

    /// Encoder feature map for `x: [B, 3, P, P]`.
    pub fn encode_map(tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &stride) in STRIDES.iter().enumerate() {
            let padded = tape.pad_replicate(h, 1)?;
            let w = b.get(&format!("encoder.conv{i}.weight"))?;
            let bias = b.get(&format!("encoder.conv{i}.bias"))?;
            h = tape.conv2d(padded, w, Some(bias), stride, 0)?;
            if i < 3 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// `(mu, sigma)`, each `[B, 64]`.
    pub fn stats(tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<(Var, Var)> {
        let h = Self::encode_map(tape, b, x)?;
        Ok((tape.channel_mean(h)?, tape.channel_std(h)?))
    }

    /// Projector on `[mu; sigma]`, L2-normalized: `[B, 64]`.
    pub fn project(tape: &mut Tape<T>, b: &Bindings, mu: Var, sigma: Var) -> Result<Var> {
        let f = tape.concat(&[mu, sigma], 1)?;
        let h = tape.linear(f, b.get("projector.fc0.weight")?, Some(b.get("projector.fc0.bias")?))?;
        let h = tape.relu(h);
        let z = tape.linear(h, b.get("projector.fc1.weight")?, Some(b.get("projector.fc1.bias")?))?;
        Ok(tape.l2_normalize(z)?)
    }

    pub fn encode_batch(&self, patches: &[&Image]) -> Result<Vec<StyleFeature>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let x = Self::input(&mut tape, patches)?;
        let (mu, sigma) = Self::stats(&mut tape, &b, x)?;
        Ok(split_rows(tape.value(mu), FEATURE_CHANNELS)
            .zip(split_rows(tape.value(sigma), FEATURE_CHANNELS))
            .map(|(m, s)| StyleFeature { mu: m, sigma: s })
            .collect())
    }

    pub fn encode(&self, patch: &Image) -> Result<StyleFeature> {
        Ok(self.encode_batch(&[patch])?.remove(0))
    }

    pub fn project_features(&self, features: &[StyleFeature]) -> Result<Vec<StyleEmbedding>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let n = features.len();
        let flat = |f: &dyn Fn(&StyleFeature) -> &Vec<f32>| -> Vec<T> { features.iter().flat_map(|x| f(x).iter().map(|&v| T::of(v as f64))).collect() };
        let mu = tape.constant(&[n, FEATURE_CHANNELS], flat(&|f| &f.mu))?;
        let sigma = tape.constant(&[n, FEATURE_CHANNELS], flat(&|f| &f.sigma))?;
        let z = Self::project(&mut tape, &b, mu, sigma)?;
        Ok(split_rows(tape.value(z), EMBED_DIM).map(StyleEmbedding).collect())
    }

    pub fn project_feature(&self, f: &StyleFeature) -> Result<StyleEmbedding> {
        Ok(self.project_features(std::slice::from_ref(f))?.remove(0))
    }

    /// Encoder then projector for a batch of patches.
    pub fn embed_batch(&self, patches: &[&Image]) -> Result<Vec<StyleEmbedding>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let x = Self::input(&mut tape, patches)?;
        let (mu, sigma) = Self::stats(&mut tape, &b, x)?;
        let z = Self::project(&mut tape, &b, mu, sigma)?;
        Ok(split_rows(tape.value(z), EMBED_DIM).map(StyleEmbedding).collect())
    }
}

fn split_rows<T: Real>(v: &[T], d: usize) -> impl Iterator<Item = Vec<f32>> + '_ {
    v.chunks(d).map(|r| r.iter().map(|x| x.to_f64c() as f32).collect())
}

use s3im_tensor::{ParameterSet, Real, Tape, Tensor, Var};

use super::arch::{init_params, NsdArch, ATTN_DIM};
use super::net::{denoiser_forward, reference_sites, semantic_encode, CondVars};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::psrl::StyleEmbedding;

/// Conditioning for a batch: captions, optional style token sequences and
/// the fusion weight `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub tokens: Vec<Vec<u8>>,
    pub style: Option<Vec<Vec<StyleEmbedding>>>,
    pub lambda: f64,
}

impl ConditioningBundle {
    pub fn semantic(tokens: Vec<Vec<u8>>) -> Self {
        Self {
            tokens,
            style: None,
            lambda: 0.0,
        }
    }
}

/// Denoiser, semantic encoder, reference network and connectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NsdModel<T> {
    pub arch: NsdArch,
    pub schedule: NoiseSchedule,
    pub params: ParameterSet<T>,
}

impl<T: Real> NsdModel<T> {
    pub fn new(arch: NsdArch, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            schedule,
            params: init_params(&arch, seed),
        })
    }

    pub fn cast<U: Real>(&self) -> NsdModel<U> {
        NsdModel {
            arch: self.arch,
            schedule: self.schedule.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_timesteps(&self, t: &[usize]) -> Result<()> {
        match t.iter().find(|&&v| v >= self.schedule.steps()) {
            Some(bad) => Err(Error::InvalidArgument(format!("timestep {bad} outside [0, {})", self.schedule.steps()))),
            None => Ok(()),
        }
    }

    /// Records the bundle on the tape.
    pub fn bind_cond(&self, tape: &mut Tape<T>, b: &s3im_tensor::Bindings, bundle: &ConditioningBundle) -> Result<CondVars> {
        let f_sem = semantic_encode(tape, b, &self.arch, &bundle.tokens)?;
        let f_sty = match &bundle.style {
            Some(seqs) => Some(style_tokens(tape, seqs, bundle.tokens.len())?),
            None => None,
        };
        Ok(CondVars {
            f_sem,
            f_sty,
            lambda: bundle.lambda,
        })
    }

    /// Full forward on a tape; `ref_input` is the `[B, 7, H, W]` reference
    /// input when the reference path is active.
    pub fn forward(&self, tape: &mut Tape<T>, b: &s3im_tensor::Bindings, x_t: Var, t: &[usize], cond: &CondVars, ref_input: Option<Var>) -> Result<Var> {
        self.check_timesteps(t)?;
        let sites = match ref_input {
            Some(r) => Some(reference_sites(tape, b, &self.arch, r, t)?),
            None => None,
        };
        denoiser_forward(tape, b, &self.arch, x_t, t, cond, sites.as_ref())
    }

    /// `eps_hat(x_t, t, c)`, optionally with reference injection.
    pub fn predict_noise(&self, x_t: &Tensor<T>, t: &[usize], bundle: &ConditioningBundle, ref_input: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let x = tape.leaf(x_t);
        let cond = self.bind_cond(&mut tape, &b, bundle)?;
        let r = ref_input.map(|r| tape.leaf(r));
        let out = self.forward(&mut tape, &b, x, t, &cond, r)?;
        Ok(tape.tensor(out))
    }

    /// Raw reference-network features at the five injection sites.
    pub fn extract_reference_features(&self, ref_input: &Tensor<T>, t: &[usize]) -> Result<Vec<Tensor<T>>> {
        self.check_timesteps(t)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let r = tape.leaf(ref_input);
        let sites = reference_sites(&mut tape, &b, &self.arch, r, t)?;
        Ok(sites.iter().map(|&v| tape.tensor(v)).collect())
    }
}

/// Stacks per-sample style token sequences into `[B, K, 64]`.
pub fn style_tokens<T: Real>(tape: &mut Tape<T>, seqs: &[Vec<StyleEmbedding>], batch: usize) -> Result<Var> {
    if seqs.len() != batch {
        return Err(Error::InvalidArgument(format!("{} style sequences for a batch of {batch}", seqs.len())));
    }
    let k = seqs.first().map_or(0, Vec::len);
    if k == 0 || seqs.iter().any(|s| s.len() != k) {
        return Err(Error::InvalidArgument("style sequences must be non-empty and of equal length".into()));
    }
    if let Some(bad) = seqs.iter().flatten().find(|e| e.0.len() != ATTN_DIM) {
        return Err(Error::InvalidArgument(format!("style token dim {} != attention dim {ATTN_DIM}", bad.0.len())));
    }
    let data = seqs.iter().flatten().flat_map(|e| e.0.iter().map(|&v| T::of(v as f64))).collect();
    Ok(tape.constant(&[batch, k, ATTN_DIM], data)?)
}

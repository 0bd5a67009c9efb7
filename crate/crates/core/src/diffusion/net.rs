use s3im_tensor::{Bindings, Real, Tape, Var};

use super::arch::{NsdArch, ATTN_DIM, PATCH, SITES};
use crate::error::{Error, Result};

/// Conditioning recorded on a tape: semantic tokens `[B, L, 64]`, optional
/// style tokens `[B, K, 64]` and the fusion weight.
#[derive(Debug, Clone, Copy)]
pub struct CondVars {
    pub f_sem: Var,
    pub f_sty: Option<Var>,
    pub lambda: f64,
}

/// Sinusoidal embedding of integer timesteps, `[B, 64]`.
pub fn timestep_features<T: Real>(t: &[usize]) -> Vec<T> {
    let half = ATTN_DIM / 2;
    let mut out = Vec::with_capacity(t.len() * ATTN_DIM);
    for &ti in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::of((ti as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::of((ti as f64 * freq).cos()));
        }
    }
    out
}

fn lin<T: Real>(tape: &mut Tape<T>, b: &Bindings, p: &str, x: Var) -> Result<Var> {
    Ok(tape.linear(x, b.get(&format!("{p}.weight"))?, Some(b.get(&format!("{p}.bias"))?))?)
}

fn conv<T: Real>(tape: &mut Tape<T>, b: &Bindings, p: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    Ok(tape.conv2d(x, b.get(&format!("{p}.weight"))?, Some(b.get(&format!("{p}.bias"))?), stride, pad)?)
}

pub(crate) fn temb_mlp<T: Real>(tape: &mut Tape<T>, b: &Bindings, p: &str, t: &[usize]) -> Result<Var> {
    let feats = tape.constant(&[t.len(), ATTN_DIM], timestep_features(t))?;
    let h = lin(tape, b, &format!("{p}.temb.fc0"), feats)?;
    let h = tape.relu(h);
    lin(tape, b, &format!("{p}.temb.fc1"), h)
}

pub(crate) fn resblock<T: Real>(tape: &mut Tape<T>, b: &Bindings, p: &str, x: Var, temb: Var, has_skip: bool) -> Result<Var> {
    let h = tape.relu(x);
    let h = conv(tape, b, &format!("{p}.res.conv0"), h, 1, 1)?;
    let e = tape.relu(temb);
    let e = lin(tape, b, &format!("{p}.res.temb"), e)?;
    let h = tape.add_channel(h, e)?;
    let h = tape.relu(h);
    let h = conv(tape, b, &format!("{p}.res.conv1"), h, 1, 1)?;
    let skip = if has_skip { conv(tape, b, &format!("{p}.res.skip"), x, 1, 0)? } else { x };
    Ok(tape.add(skip, h)?)
}

/// `[B, C, H, W] -> [B, H*W, C]`.
pub fn to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    Ok(tape.reshape(t, &[s[0], s[2] * s[3], s[1]])?)
}

/// `[B, H*W, C] -> [B, C, H, W]`.
pub fn from_tokens<T: Real>(tape: &mut Tape<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(t).to_vec();
    let r = tape.reshape(t, &[s[0], h, w, s[2]])?;
    Ok(tape.permute(r, &[0, 3, 1, 2])?)
}

pub(crate) fn self_attention<T: Real>(tape: &mut Tape<T>, b: &Bindings, p: &str, x: Var) -> Result<Var> {
    let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
    let tok = to_tokens(tape, x)?;
    let q = lin(tape, b, &format!("{p}.attn.q"), tok)?;
    let k = lin(tape, b, &format!("{p}.attn.k"), tok)?;
    let v = lin(tape, b, &format!("{p}.attn.v"), tok)?;
    let a = tape.attention(q, k, v)?;
    let o = lin(tape, b, &format!("{p}.attn.o"), a)?;
    let o = from_tokens(tape, o, h, w)?;
    Ok(tape.add(x, o)?)
}

/// Self-attention over a token sequence `[B, L, 64]` with residual.
pub(crate) fn token_self_attention<T: Real>(tape: &mut Tape<T>, b: &Bindings, p: &str, x: Var) -> Result<Var> {
    let q = lin(tape, b, &format!("{p}.attn.q"), x)?;
    let k = lin(tape, b, &format!("{p}.attn.k"), x)?;
    let v = lin(tape, b, &format!("{p}.attn.v"), x)?;
    let a = tape.attention(q, k, v)?;
    let o = lin(tape, b, &format!("{p}.attn.o"), a)?;
    Ok(tape.add(x, o)?)
}

/// Two cross-attention paths sharing one query projection:
/// `z = CA(q, f_sem) + lambda * CA(q, f_sty)`, `[B, L, 64]`. With
/// `lambda = 0` or no style tokens the style path is not evaluated.
pub fn dual_cross_attention<T: Real>(tape: &mut Tape<T>, b: &Bindings, p: &str, tokens: Var, cond: &CondVars) -> Result<Var> {
    if !(cond.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", cond.lambda)));
    }
    for (name, v) in [("semantic", Some(cond.f_sem)), ("style", cond.f_sty)] {
        if let Some(v) = v {
            let d = *tape.shape(v).last().unwrap_or(&0);
            if d != ATTN_DIM {
                return Err(Error::InvalidArgument(format!("{name} token dim {d} != attention dim {ATTN_DIM}")));
            }
        }
    }
    let q = lin(tape, b, &format!("{p}.cross.q"), tokens)?;
    let k_sem = lin(tape, b, &format!("{p}.cross.k_sem"), cond.f_sem)?;
    let v_sem = lin(tape, b, &format!("{p}.cross.v_sem"), cond.f_sem)?;
    let z_sem = tape.attention(q, k_sem, v_sem)?;
    match cond.f_sty {
        Some(f_sty) if cond.lambda != 0.0 => {
            let k_sty = lin(tape, b, &format!("{p}.cross.k_sty"), f_sty)?;
            let v_sty = lin(tape, b, &format!("{p}.cross.v_sty"), f_sty)?;
            let z_sty = tape.attention(q, k_sty, v_sty)?;
            let scaled = tape.scale(z_sty, cond.lambda);
            Ok(tape.add(z_sem, scaled)?)
        }
        _ => Ok(z_sem),
    }
}

fn cross_block<T: Real>(tape: &mut Tape<T>, b: &Bindings, p: &str, x: Var, cond: &CondVars) -> Result<Var> {
    let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
    let tok = to_tokens(tape, x)?;
    let z = dual_cross_attention(tape, b, p, tok, cond)?;
    let o = lin(tape, b, &format!("{p}.cross.o"), z)?;
    let o = from_tokens(tape, o, h, w)?;
    Ok(tape.add(x, o)?)
}

/// `h + connector(reference_feature)`; connectors are 1×1 convolutions.
pub fn inject<T: Real>(tape: &mut Tape<T>, b: &Bindings, site: &str, h: Var, reference: Var) -> Result<Var> {
    if tape.shape(h) != tape.shape(reference) {
        return Err(Error::InvalidArgument(format!(
            "injection at {site}: denoiser features {:?} vs reference features {:?}",
            tape.shape(h),
            tape.shape(reference)
        )));
    }
    let c = conv(tape, b, &format!("conn.{site}"), reference, 1, 0)?;
    Ok(tape.add(h, c)?)
}

/// Token ids to `[B, L, 64]` semantic features.
pub fn semantic_encode<T: Real>(tape: &mut Tape<T>, b: &Bindings, arch: &NsdArch, tokens: &[Vec<u8>]) -> Result<Var> {
    let bsz = tokens.len();
    let len = tokens.first().map_or(0, Vec::len);
    if bsz == 0 || len == 0 {
        return Err(Error::InvalidArgument("empty caption".into()));
    }
    if tokens.iter().any(|t| t.len() != len) {
        return Err(Error::InvalidArgument("captions in a batch must have equal length".into()));
    }
    if len > arch.max_tokens {
        return Err(Error::InvalidArgument(format!("caption of {len} tokens exceeds the maximum {}", arch.max_tokens)));
    }
    if let Some(&bad) = tokens.iter().flatten().find(|&&t| t as usize >= arch.vocab) {
        return Err(Error::InvalidArgument(format!("caption token {bad} outside the vocabulary of {}", arch.vocab)));
    }
    let idx: Vec<usize> = tokens.iter().flatten().map(|&t| t as usize).collect();
    let e = tape.index_select(b.get("sem.embed")?, &idx)?;
    let pos_idx: Vec<usize> = (0..bsz).flat_map(|_| 0..len).collect();
    let pe = tape.index_select(b.get("sem.pos")?, &pos_idx)?;
    let x = tape.add(e, pe)?;
    let x = tape.reshape(x, &[bsz, len, ATTN_DIM])?;
    token_self_attention(tape, b, "sem", x)
}

/// Reference-network features at the five sites, taken after each block's
/// residual convolutions and before its attention.
pub fn reference_sites<T: Real>(tape: &mut Tape<T>, b: &Bindings, arch: &NsdArch, ref_input: Var, t: &[usize]) -> Result<[Var; 5]> {
    let c_in = tape.shape(ref_input)[1];
    if c_in != 7 {
        return Err(Error::InvalidArgument(format!("reference input has {c_in} channels, expected 7")));
    }
    let temb = temb_mlp(tape, b, "ref", t)?;
    let chans = arch.block_channels();
    let mut sites = Vec::with_capacity(5);
    let mut h = conv(tape, b, "ref.stem", ref_input, PATCH, 0)?;
    let mut skips = Vec::new();
    for (i, site) in SITES.iter().enumerate() {
        let p = format!("ref.{site}");
        if i >= 3 {
            let up = tape.upsample2x(h)?;
            let skip = skips.pop().expect("matching down block");
            h = tape.concat(&[up, skip], 1)?;
        }
        h = resblock(tape, b, &p, h, temb, chans[i].0 != chans[i].1)?;
        sites.push(h);
        if *site == "up1" {
            break;
        }
        h = self_attention(tape, b, &p, h)?;
        if i < 2 {
            skips.push(h);
            h = conv(tape, b, &format!("{p}.downsample"), h, 2, 1)?;
        }
    }
    Ok(sites.try_into().expect("five sites"))
}

/// Noise prediction `[B, 3, H, W]`. `reference`, when given, holds the raw
/// reference-network site features to inject through the connectors.
pub fn denoiser_forward<T: Real>(
    tape: &mut Tape<T>,
    b: &Bindings,
    arch: &NsdArch,
    x_t: Var,
    t: &[usize],
    cond: &CondVars,
    reference: Option<&[Var; 5]>,
) -> Result<Var> {
    let s = tape.shape(x_t).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != arch.image || s[3] != arch.image {
        return Err(Error::InvalidArgument(format!(
            "denoiser input {s:?}, expected [B, 3, {}, {}]",
            arch.image, arch.image
        )));
    }
    if t.len() != s[0] {
        return Err(Error::InvalidArgument(format!("{} timesteps for a batch of {}", t.len(), s[0])));
    }
    let temb = temb_mlp(tape, b, "unet", t)?;
    let chans = arch.block_channels();
    let mut h = conv(tape, b, "unet.stem", x_t, PATCH, 0)?;
    let mut skips = Vec::new();
    for (i, site) in SITES.iter().enumerate() {
        let p = format!("unet.{site}");
        if i >= 3 {
            let up = tape.upsample2x(h)?;
            let skip = skips.pop().expect("matching down block");
            h = tape.concat(&[up, skip], 1)?;
        }
        h = resblock(tape, b, &p, h, temb, chans[i].0 != chans[i].1)?;
        if let Some(r) = reference {
            h = inject(tape, b, site, h, r[i])?;
        }
        h = self_attention(tape, b, &p, h)?;
        h = cross_block(tape, b, &p, h, cond)?;
        if i < 2 {
            skips.push(h);
            h = conv(tape, b, &format!("{p}.downsample"), h, 2, 1)?;
        }
    }
    let h = tape.relu(h);
    let out = conv(tape, b, "unet.out", h, 1, 1)?;
    Ok(tape.depth_to_space(out, PATCH)?)
}

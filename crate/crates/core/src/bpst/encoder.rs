//! Spatial transformer with class-wise projections and body-part masked
//! attention, followed by strided temporal convolutions; plus the mirrored decoder.

use rand::Rng;

use crate::autodiff::{AttnMask, AttnSpec, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::motion::{rearrange_frames, BodyPartition, TokenLayout};
use crate::nn::{conv, ffn, init_ffn, layer_norm, linear};
use crate::tensor::Tensor;

use super::config::BpstConfig;
use super::mask::{build_adjacency_mask, AdjacencyMask};

/// Token classes with their own projections.
pub const TOKEN_CLASSES: [&str; 3] = ["root", "other", "contact"];

/// Class index of token `t` among `n+1` tokens.
pub fn token_class(t: usize, n: usize) -> usize {
    if t == 0 {
        0
    } else if t < n {
        1
    } else {
        2
    }
}

/// Output of [`Bpst::spatial_encode`].
#[derive(Debug, Clone, Copy)]
pub struct SpatialFeatures {
    /// `(T·(n+1)) × D` token features; `None` when the spatial stage is ablated.
    pub tokens: Option<Var>,
    /// `T × D` per-frame features `f_s`.
    pub pooled: Var,
}

/// Encoder/decoder for one skeleton layout.
#[derive(Debug, Clone)]
pub struct Bpst {
    pub cfg: BpstConfig,
    pub layout: TokenLayout,
    pub joints: usize,
    pub code_dim: usize,
    mask: AdjacencyMask,
}

impl Bpst {
    pub fn new(cfg: BpstConfig, layout: TokenLayout, partition: &BodyPartition, code_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if code_dim == 0 {
            return Err(Error::config("stage1.code_dim", "must be positive"));
        }
        Ok(Self {
            cfg,
            layout,
            joints: partition.joint_count(),
            code_dim,
            mask: build_adjacency_mask(partition),
        })
    }

    pub fn mask(&self) -> &AdjacencyMask {
        &self.mask
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.joints + 1
    }

    pub fn width(&self) -> usize {
        self.layout.width(self.joints)
    }

    fn token_classes(&self, frames: usize) -> Vec<usize> {
        let per = self.tokens_per_frame();
        (0..frames * per).map(|r| token_class(r % per, self.joints)).collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        let d = self.cfg.d_model;
        if self.cfg.ablate_bpst {
            p.init_linear("bpst.spatial.flat_proj", self.width(), d, rng);
        } else {
            let dt = self.layout.token_width();
            for class in TOKEN_CLASSES {
                p.init_linear(&format!("bpst.spatial.embed.{class}"), dt, d, rng);
            }
            p.insert("bpst.spatial.pos", Tensor::randn(&[self.tokens_per_frame(), d], 0.1, rng));
            for l in 0..self.cfg.spatial_layers {
                init_body_part_layer(&mut p, &format!("bpst.spatial.l{l}"), d, rng);
            }
        }

        let chans = &self.cfg.tcn_channels;
        p.init_conv("bpst.enc.in", 3, d, chans[0], rng);
        let mut prev = chans[0];
        for (i, &c) in chans.iter().enumerate() {
            p.init_conv(&format!("bpst.enc.down{i}"), 4, prev, c, rng);
            init_res_block(&mut p, &format!("bpst.enc.res{i}"), c, rng);
            prev = c;
        }
        p.init_conv("bpst.enc.out", 3, prev, self.code_dim, rng);

        p.init_conv("bpst.dec.in", 3, self.code_dim, prev, rng);
        for (i, &c) in chans.iter().enumerate().rev() {
            let next = if i == 0 { chans[0] } else { chans[i - 1] };
            init_res_block(&mut p, &format!("bpst.dec.res{i}"), c, rng);
            p.init_conv(&format!("bpst.dec.up{i}"), 3, c, next, rng);
        }
        p.init_conv("bpst.dec.post", 3, chans[0], chans[0], rng);
        p.init_linear("bpst.dec.out", chans[0], self.width(), rng);
        p
    }

    /// Per-frame spatial features for flat frames `T × width`.
    pub fn spatial_encode(&self, g: &mut Graph, p: &ParamStore, frames: &Tensor) -> Result<SpatialFeatures> {
        let t = frames.rows();
        if self.cfg.ablate_bpst {
            if frames.cols() != self.width() {
                return Err(Error::Layout(format!(
                    "frame width {} does not match layout width {}",
                    frames.cols(),
                    self.width()
                )));
            }
            let x = g.constant(frames.clone());
            let pooled = linear(g, p, "bpst.spatial.flat_proj", x)?;
            return Ok(SpatialFeatures { tokens: None, pooled });
        }
        let per = self.tokens_per_frame();
        let tokens = rearrange_frames(frames, &self.layout, self.joints)?;
        let tokens = tokens.reshape(&[t * per, self.layout.token_width()])?;
        let x = g.constant(tokens);
        let classes = self.token_classes(t);

        let mut embedded = Vec::with_capacity(3);
        for class in TOKEN_CLASSES {
            embedded.push(linear(g, p, &format!("bpst.spatial.embed.{class}"), x)?);
        }
        let h = g.select_rows(&embedded, &classes)?;
        let pos = g.param(p, "bpst.spatial.pos")?;
        let pos_rows: Vec<usize> = (0..t * per).map(|r| r % per).collect();
        let pos = g.gather(pos, &pos_rows)?;
        let mut h = g.add(h, pos)?;
        for l in 0..self.cfg.spatial_layers {
            h = body_part_attention(
                g,
                p,
                &format!("bpst.spatial.l{l}"),
                h,
                &classes,
                &self.mask,
                self.cfg.heads,
                t,
            )?
            .0;
        }
        let pooled = g.group_mean(h, per)?;
        Ok(SpatialFeatures {
            tokens: Some(h),
            pooled,
        })
    }

    /// `f_s[T×D] → F_st[(T/rate) × D_C]`.
    pub fn temporal_encode(&self, g: &mut Graph, p: &ParamStore, f_s: Var) -> Result<Var> {
        let t = g.shape(f_s)[0];
        if t % self.cfg.downsample_rate != 0 {
            return Err(Error::SequenceLength {
                len: t,
                rate: self.cfg.downsample_rate,
            });
        }
        let h = conv(g, p, "bpst.enc.in", f_s, 1, 1)?;
        let mut h = g.relu(h);
        for i in 0..self.cfg.tcn_channels.len() {
            h = conv(g, p, &format!("bpst.enc.down{i}"), h, 2, 1)?;
            h = res_block(g, p, &format!("bpst.enc.res{i}"), h)?;
        }
        let h = g.relu(h);
        conv(g, p, "bpst.enc.out", h, 1, 1)
    }

    /// `codes[m×D_C] → X̂[(m·rate) × width]`.
    pub fn temporal_decode(&self, g: &mut Graph, p: &ParamStore, z: Var) -> Result<Var> {
        let h = conv(g, p, "bpst.dec.in", z, 1, 1)?;
        let mut h = g.relu(h);
        for i in (0..self.cfg.tcn_channels.len()).rev() {
            h = res_block(g, p, &format!("bpst.dec.res{i}"), h)?;
            h = g.upsample(h, 2)?;
            h = conv(g, p, &format!("bpst.dec.up{i}"), h, 1, 1)?;
        }
        let h = g.relu(h);
        let h = conv(g, p, "bpst.dec.post", h, 1, 1)?;
        let h = g.relu(h);
        linear(g, p, "bpst.dec.out", h)
    }

    /// Spatial then temporal encoding of flat frames.
    pub fn encode(&self, g: &mut Graph, p: &ParamStore, frames: &Tensor) -> Result<Var> {
        let s = self.spatial_encode(g, p, frames)?;
        self.temporal_encode(g, p, s.pooled)
    }
}

fn init_res_block<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, c: usize, rng: &mut R) {
    p.init_conv(&format!("{name}.c1"), 3, c, c, rng);
    p.init_conv(&format!("{name}.c2"), 1, c, c, rng);
}

/// `x + c2(relu(c1(relu(x))))`.
fn res_block(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let h = g.relu(x);
    let h = conv(g, p, &format!("{name}.c1"), h, 1, 1)?;
    let h = g.relu(h);
    let h = conv(g, p, &format!("{name}.c2"), h, 1, 0)?;
    g.add(x, h)
}

pub fn init_body_part_layer<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, d: usize, rng: &mut R) {
    p.init_layer_norm(&format!("{name}.ln1"), d);
    for proj in ["wq", "wk", "wv"] {
        for class in TOKEN_CLASSES {
            p.init_matrix(&format!("{name}.attn.{proj}.{class}"), d, d, rng);
        }
    }
    p.init_linear(&format!("{name}.attn.wo"), d, d, rng);
    p.init_layer_norm(&format!("{name}.ln2"), d);
    init_ffn(p, &format!("{name}.ffn"), d, 2 * d, rng);
}

/// One body-part attention layer over `frames` stacked frames of `n+1` tokens each.
///
/// Queries, keys and values of each token come from its class's projection;
/// the adjacency mask is added to the scaled logits of every frame and head.
/// Returns the layer output and the attention node (for inspecting weights).
#[allow(clippy::too_many_arguments)]
pub fn body_part_attention(
    g: &mut Graph,
    p: &ParamStore,
    name: &str,
    x: Var,
    classes: &[usize],
    mask: &AdjacencyMask,
    heads: usize,
    frames: usize,
) -> Result<(Var, Var)> {
    let h = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let mut qkv = Vec::with_capacity(3);
    for proj in ["wq", "wk", "wv"] {
        let mut per_class = Vec::with_capacity(3);
        for class in TOKEN_CLASSES {
            let w = g.param(p, &format!("{name}.attn.{proj}.{class}"))?;
            per_class.push(g.matmul(h, w)?);
        }
        qkv.push(g.select_rows(&per_class, classes)?);
    }
    let att = g.attention(
        qkv[0],
        qkv[1],
        qkv[2],
        AttnSpec {
            batch: frames,
            heads,
            mask: AttnMask::Additive(mask.values().clone()),
        },
    )?;
    let o = linear(g, p, &format!("{name}.attn.wo"), att)?;
    let x1 = g.add(x, o)?;
    let h2 = layer_norm(g, p, &format!("{name}.ln2"), x1)?;
    let f = ffn(g, p, &format!("{name}.ffn"), h2)?;
    Ok((g.add(x1, f)?, att))
}

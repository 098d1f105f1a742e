//! Small layer helpers shared by both stages. Parameters follow `name.w` / `name.b`.

use rand::Rng;

use crate::autodiff::{AttnMask, AttnSpec, Graph, PadMode, ParamStore, Var};
use crate::error::Result;

pub fn linear(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(p, &format!("{name}.gamma"))?;
    let beta = g.param(p, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn init_ffn<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) {
    p.init_linear(&format!("{name}.fc1"), d, hidden, rng);
    p.init_linear(&format!("{name}.fc2"), hidden, d, rng);
}

/// `fc2(gelu(fc1(x)))`.
pub fn ffn(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{name}.fc2"), h)
}

/// Conv with bias; kernel `name.w` is `width × d_in × d_out`.
pub fn conv(g: &mut Graph, p: &ParamStore, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    let y = g.conv1d(x, w, stride, padding, PadMode::Replicate)?;
    g.add_row(y, b)
}

pub fn init_self_attention<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, d: usize, rng: &mut R) {
    for proj in ["wq", "wk", "wv"] {
        p.init_matrix(&format!("{name}.{proj}"), d, d, rng);
    }
    p.init_linear(&format!("{name}.wo"), d, d, rng);
}

pub struct BlockIo<'a> {
    pub name: &'a str,
    pub heads: usize,
    pub batch: usize,
    pub mask: AttnMask,
}

/// Pre-norm transformer block: `x + attn(ln1 x)`, then `+ ffn(ln2 ·)`.
/// Returns the block output and the raw attention output.
pub fn self_attention_block(g: &mut Graph, p: &ParamStore, io: BlockIo<'_>, x: Var) -> Result<(Var, Var)> {
    let name = io.name;
    let h = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let wq = g.param(p, &format!("{name}.attn.wq"))?;
    let wk = g.param(p, &format!("{name}.attn.wk"))?;
    let wv = g.param(p, &format!("{name}.attn.wv"))?;
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let att = g.attention(
        q,
        k,
        v,
        AttnSpec {
            batch: io.batch,
            heads: io.heads,
            mask: io.mask,
        },
    )?;
    let o = linear(g, p, &format!("{name}.attn.wo"), att)?;
    let x1 = g.add(x, o)?;
    let h2 = layer_norm(g, p, &format!("{name}.ln2"), x1)?;
    let f = ffn(g, p, &format!("{name}.ffn"), h2)?;
    Ok((g.add(x1, f)?, att))
}

pub fn init_block<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, d: usize, rng: &mut R) {
    p.init_layer_norm(&format!("{name}.ln1"), d);
    init_self_attention(p, &format!("{name}.attn"), d, rng);
    p.init_layer_norm(&format!("{name}.ln2"), d);
    init_ffn(p, &format!("{name}.ffn"), d, 2 * d, rng);
}

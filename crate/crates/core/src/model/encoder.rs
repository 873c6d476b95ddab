//! Image encoder: patch embedding, windowed/global transformer blocks with
//! optional per-layer prompt tokens, and the convolutional neck.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

use super::{Model, Overlay};

/// Gather indices that regroup a row-major `g x g` token grid into
/// contiguous windows of `win x win` cells. Returns `(perm, inv)` where
/// `perm[new] = old` partitions and `inv` restores the original order.
pub fn window_permutation(g: usize, win: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if win == 0 || g % win != 0 {
        return Err(Error::Dim(format!("grid {g} not divisible by window {win}")));
    }
    let per_side = g / win;
    let mut perm = Vec::with_capacity(g * g);
    for wr in 0..per_side {
        for wc in 0..per_side {
            for r in 0..win {
                for c in 0..win {
                    perm.push((wr * win + r) * g + (wc * win + c));
                }
            }
        }
    }
    let mut inv = vec![0usize; g * g];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    Ok((perm, inv))
}

/// Regroups `[g*g, d]` tokens so each window's `win*win` tokens are
/// contiguous rows. Lossless; see [`window_merge`] for the inverse.
pub fn window_partition(g: &mut Graph, x: &Tensor, grid: usize, win: usize) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[0] != grid * grid {
        return Err(Error::Dim(format!(
            "window_partition expects [{}, d] tokens, got {:?}",
            grid * grid,
            x.shape()
        )));
    }
    let (perm, _) = window_permutation(grid, win)?;
    g.gather_rows(x, Rc::new(perm))
}

/// Inverse of [`window_partition`]; bitwise roundtrip.
pub fn window_merge(g: &mut Graph, x: &Tensor, grid: usize, win: usize) -> Result<Tensor> {
    let (_, inv) = window_permutation(grid, win)?;
    if x.shape()[0] != grid * grid {
        return Err(Error::Dim(format!(
            "window_merge expects {} rows, got {}",
            grid * grid,
            x.shape()[0]
        )));
    }
    g.gather_rows(x, Rc::new(inv))
}

impl Model {
    /// Encodes an image into the neck feature map, shape
    /// `[neck_dim, grid, grid]`. When the overlay carries encoder prompts,
    /// layer `l`'s prompt rows join every window (or the full sequence in
    /// global blocks) as extra attention keys/values and are dropped from
    /// the stream before the next layer.
    pub fn encode_image(&self, g: &mut Graph, image: &Tensor, overlay: &Overlay) -> Result<Tensor> {
        let cfg = &self.cfg;
        let s = cfg.image_size;
        if image.shape() != [cfg.in_channels, s, s] {
            return Err(Error::Dim(format!(
                "encoder expects [{}x{s}x{s}] input, got {:?}",
                cfg.in_channels,
                image.shape()
            )));
        }
        let prompt_names = match &overlay.enc_prompts {
            Some(names) if names.len() != cfg.enc_layers => {
                return Err(Error::Config(format!(
                    "encoder prompts must name one tensor per layer: got {} for {} layers",
                    names.len(),
                    cfg.enc_layers
                )));
            }
            Some(names) => Some(names.as_slice()),
            None => None,
        };

        // Patch embedding and learned positional table.
        let pw = self.reg.get("enc.patch.w")?;
        let pb = self.reg.get("enc.patch.b")?;
        let patches = g.conv2d(image, pw, cfg.patch_size, 0)?;
        let patches = g.add_channel_bias(&patches, pb)?;
        let grid = self.plan.grid;
        let flat = g.reshape(&patches, &[cfg.enc_dim, grid * grid])?;
        let mut x = g.transpose2d(&flat)?;
        let pos = self.reg.get("enc.pos")?;
        x = g.add(&x, pos)?;

        let (perm, inv) = window_permutation(grid, cfg.window_size)?;
        let (perm, inv) = (Rc::new(perm), Rc::new(inv));
        for l in 0..cfg.enc_layers {
            let prompts = match prompt_names {
                Some(names) => {
                    let p = self.reg.get(&names[l])?;
                    if p.shape().len() != 2 || p.shape()[1] != cfg.enc_dim {
                        return Err(Error::Config(format!(
                            "encoder prompt '{}' must be [n, {}], got {:?}",
                            names[l],
                            cfg.enc_dim,
                            p.shape()
                        )));
                    }
                    Some(p)
                }
                None => None,
            };
            x = self.encoder_block(g, &x, l, prompts, &perm, &inv, overlay)?;
        }
        self.neck(g, &x)
    }

    /// One pre-norm transformer block. Prompts are normalized with the
    /// block's first layernorm, exactly as if they had been concatenated to
    /// the block input, and serve as extra keys/values only; their own
    /// output rows are never formed, which is equivalent to forming and
    /// then discarding them since every later stage is row-local.
    #[allow(clippy::too_many_arguments)]
    fn encoder_block(
        &self,
        g: &mut Graph,
        x: &Tensor,
        l: usize,
        prompts: Option<&Tensor>,
        perm: &Rc<Vec<usize>>,
        inv: &Rc<Vec<usize>>,
        overlay: &Overlay,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let p = format!("enc.blk{l}");
        let attn_prefix = format!("{p}.attn");
        let h = self.norm(g, x, &format!("{p}.ln1"))?;
        // Prompt rows pass through the same pre-attention norm as the grid
        // tokens, so they enter each window at unit scale.
        let prompts_ln = match prompts {
            Some(pt) => Some(self.norm(g, pt, &format!("{p}.ln1"))?),
            None => None,
        };
        let attn_out = if cfg.global_block_indices.contains(&l) {
            let kv = match &prompts_ln {
                Some(pl) => g.concat_rows(&[&h, pl])?,
                None => h.clone(),
            };
            self.attention(g, &h, &kv, &attn_prefix, cfg.enc_heads, overlay)?
        } else {
            let parts = g.gather_rows(&h, perm.clone())?;
            let wt = self.plan.window_tokens;
            let mut outs = Vec::with_capacity(self.plan.windows);
            for w in 0..self.plan.windows {
                let hw = g.slice_rows(&parts, w * wt, wt)?;
                let kv = match &prompts_ln {
                    Some(pl) => g.concat_rows(&[&hw, pl])?,
                    None => hw.clone(),
                };
                outs.push(self.attention(g, &hw, &kv, &attn_prefix, cfg.enc_heads, overlay)?);
            }
            let refs: Vec<&Tensor> = outs.iter().collect();
            let merged = g.concat_rows(&refs)?;
            g.gather_rows(&merged, inv.clone())?
        };
        let x = g.add(x, &attn_out)?;

        let h2 = self.norm(g, &x, &format!("{p}.ln2"))?;
        let m = self.project(g, &h2, &format!("{p}.mlp.fc1"), overlay)?;
        let m = g.gelu(&m)?;
        let m = self.project(g, &m, &format!("{p}.mlp.fc2"), overlay)?;
        g.add(&x, &m)
    }

    /// Two bias-free convolutions with channel layernorms, mapping encoder
    /// tokens to the `[neck_dim, grid, grid]` feature map.
    fn neck(&self, g: &mut Graph, tokens: &Tensor) -> Result<Tensor> {
        let grid = self.plan.grid;
        let t = g.transpose2d(tokens)?;
        let map = g.reshape(&t, &[self.cfg.enc_dim, grid, grid])?;
        let c1 = self.reg.get("neck.conv1.w")?;
        let y = g.conv2d(&map, c1, 1, 0)?;
        let y = self.norm_2d(g, &y, "neck.ln1")?;
        let c2 = self.reg.get("neck.conv2.w")?;
        let y = g.conv2d(&y, c2, 1, 1)?;
        self.norm_2d(g, &y, "neck.ln2")
    }
}

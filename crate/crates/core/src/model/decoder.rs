//! Mask decoder: two-way transformer over the token stream and image
//! embedding, transposed-convolution upscaler, per-mask hypernetworks, and
//! the IoU prediction head.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

use super::{Model, Overlay};

/// Decoder input tokens in their fixed order:
/// `[adapter prompts (prompt_len) | no-prompt (1) | IoU (1) | mask (3)]`.
///
/// Mask and IoU slots are indexed from the end of the stream, so their
/// positions never move when the prompt block grows or shrinks.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub tokens: Tensor,
    pub prompt_len: usize,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row of the IoU token: fourth from the end.
    pub fn iou_index(&self) -> usize {
        self.len() - 4
    }

    /// Row of mask token `i`, counted from the end of the stream.
    pub fn mask_index(&self, i: usize) -> usize {
        self.len() - 3 + i
    }
}

impl Model {
    /// Assembles the decoder token stream from registered tensors. With an
    /// empty overlay this is the bare `[no-prompt | IoU | mask]` stream.
    pub fn build_stream(&self, g: &mut Graph, overlay: &Overlay) -> Result<TokenStream> {
        let noprompt = self.reg.get("dec.noprompt")?;
        let iou = self.reg.get("dec.iou_token")?;
        let masks = self.reg.get("dec.mask_tokens")?;
        let (tokens, prompt_len) = match &overlay.dec_prompts {
            Some(name) => {
                let p = self.reg.get(name)?;
                if p.shape().len() != 2 || p.shape()[1] != self.cfg.dec_dim {
                    return Err(Error::Config(format!(
                        "decoder prompts '{name}' must be [n, {}], got {:?}",
                        self.cfg.dec_dim,
                        p.shape()
                    )));
                }
                (g.concat_rows(&[p, noprompt, iou, masks])?, p.shape()[0])
            }
            None => (g.concat_rows(&[noprompt, iou, masks])?, 0),
        };
        Ok(TokenStream { tokens, prompt_len })
    }

    /// Runs the two-way transformer and mask heads. Returns
    /// `(mask_logits [3, 4*grid, 4*grid], iou_pred [3])`.
    pub fn decode_masks(
        &self,
        g: &mut Graph,
        image_emb: &Tensor,
        stream: &TokenStream,
        overlay: &Overlay,
    ) -> Result<(Tensor, Tensor)> {
        let cfg = &self.cfg;
        let grid = self.plan.grid;
        let dm = cfg.dec_dim;
        if image_emb.shape() != [dm, grid, grid] {
            return Err(Error::Dim(format!(
                "decoder expects [{dm}x{grid}x{grid}] image embedding, got {:?}",
                image_emb.shape()
            )));
        }
        if stream.tokens.shape().len() != 2 || stream.tokens.shape()[1] != dm {
            return Err(Error::Dim(format!(
                "token stream must be [t, {dm}], got {:?}",
                stream.tokens.shape()
            )));
        }

        // Image tokens: one row per grid cell.
        let flat = g.reshape(image_emb, &[dm, grid * grid])?;
        let mut keys = g.transpose2d(&flat)?;
        let mut queries = stream.tokens.clone();

        for l in 0..cfg.dec_layers {
            let p = format!("dec.blk{l}");
            let a = self.attention(g, &queries, &queries, &format!("{p}.self"), cfg.dec_heads, overlay)?;
            queries = g.add(&queries, &a)?;
            queries = self.norm(g, &queries, &format!("{p}.ln1"))?;

            let a = self.attention(g, &queries, &keys, &format!("{p}.t2i"), cfg.dec_heads, overlay)?;
            queries = g.add(&queries, &a)?;
            queries = self.norm(g, &queries, &format!("{p}.ln2"))?;

            let m = self.project(g, &queries, &format!("{p}.mlp.fc1"), overlay)?;
            let m = g.relu(&m)?;
            let m = self.project(g, &m, &format!("{p}.mlp.fc2"), overlay)?;
            queries = g.add(&queries, &m)?;
            queries = self.norm(g, &queries, &format!("{p}.ln3"))?;

            let a = self.attention(g, &keys, &queries, &format!("{p}.i2t"), cfg.dec_heads, overlay)?;
            keys = g.add(&keys, &a)?;
            keys = self.norm(g, &keys, &format!("{p}.ln4"))?;
        }

        let a = self.attention(g, &queries, &keys, "dec.final_t2i", cfg.dec_heads, overlay)?;
        queries = g.add(&queries, &a)?;
        queries = self.norm(g, &queries, "dec.final_ln")?;

        // Upscale the updated image stream back to a spatial map.
        let kt = g.transpose2d(&keys)?;
        let map = g.reshape(&kt, &[dm, grid, grid])?;
        let up1w = self.reg.get("dec.up1.w")?;
        let up1b = self.reg.get("dec.up1.b")?;
        let up = g.conv_transpose2d(&map, up1w, 2)?;
        let up = g.add_channel_bias(&up, up1b)?;
        let up = self.norm_2d(g, &up, "dec.upln")?;
        let up = g.gelu(&up)?;
        let up2w = self.reg.get("dec.up2.w")?;
        let up2b = self.reg.get("dec.up2.b")?;
        let up = g.conv_transpose2d(&up, up2w, 2)?;
        let up = g.add_channel_bias(&up, up2b)?;
        let up = g.gelu(&up)?;

        let d8 = dm / 8;
        let ms = self.plan.mask_size;
        let up_flat = g.reshape(&up, &[d8, ms * ms])?;

        // Each mask token parameterizes a classifier over upscaled pixels.
        let mut mask_rows = Vec::with_capacity(cfg.num_mask_tokens);
        for i in 0..cfg.num_mask_tokens {
            let tok = g.slice_rows(&queries, stream.mask_index(i), 1)?;
            let hyper = self.mlp3_relu(g, &tok, &format!("dec.hyper{i}"), overlay)?;
            mask_rows.push(g.matmul(&hyper, &up_flat)?);
        }
        let refs: Vec<&Tensor> = mask_rows.iter().collect();
        let logits = g.concat_rows(&refs)?;
        let logits = g.reshape(&logits, &[cfg.num_mask_tokens, ms, ms])?;

        let iou_tok = g.slice_rows(&queries, stream.iou_index(), 1)?;
        let iou = self.mlp3_relu(g, &iou_tok, "dec.iou", overlay)?;
        let iou = g.reshape(&iou, &[cfg.num_mask_tokens])?;
        Ok((logits, iou))
    }

    /// Three linear layers with ReLU between them and none at the end.
    fn mlp3_relu(&self, g: &mut Graph, x: &Tensor, prefix: &str, overlay: &Overlay) -> Result<Tensor> {
        let y = self.project(g, x, &format!("{prefix}.fc1"), overlay)?;
        let y = g.relu(&y)?;
        let y = self.project(g, &y, &format!("{prefix}.fc2"), overlay)?;
        let y = g.relu(&y)?;
        self.project(g, &y, &format!("{prefix}.fc3"), overlay)
    }
}

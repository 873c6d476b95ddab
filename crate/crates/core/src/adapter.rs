//! Fine-tuning adapters over a frozen base model: prompt tokens, low-rank
//! attention deltas, and full decoder unfreezing, plus the bookkeeping that
//! decides exactly which tensors train.
//!
//! Applying an adapter freezes every base group, registers the adapter's
//! tensors (metadata first, storage on the next materialize call), flips
//! the right trainable flags, and returns the [`Overlay`] that wires the
//! new tensors into forward passes. Parameter counting needs only the
//! metadata, so full-scale configurations can be audited without
//! allocating a single weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, Init, LoraRef, Model, Overlay};

/// Which parameters train. Names follow the experiment grid: `MD` touches
/// the mask decoder, `IE` the image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Prompt tokens in the decoder stream only.
    PtMd,
    /// Decoder prompts plus per-layer encoder prompts.
    PtMdIe,
    /// Low-rank deltas on decoder attention q/v projections.
    LoraMd,
    /// Decoder plus encoder attention deltas.
    LoraMdIe,
    /// Every decoder parameter trains; encoder and neck stay frozen.
    FullMd,
    /// Full decoder plus low-rank deltas on encoder attention.
    FullMdLoraIe,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::PtMd,
        Mode::PtMdIe,
        Mode::LoraMd,
        Mode::LoraMdIe,
        Mode::FullMd,
        Mode::FullMdLoraIe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PtMd => "PT_MD",
            Mode::PtMdIe => "PT_MD_IE",
            Mode::LoraMd => "LORA_MD",
            Mode::LoraMdIe => "LORA_MD_IE",
            Mode::FullMd => "FULL_MD",
            Mode::FullMdLoraIe => "FULL_MD_LORA_IE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown adapter mode '{s}' (expected one of PT_MD, PT_MD_IE, \
                 LORA_MD, LORA_MD_IE, FULL_MD, FULL_MD_LORA_IE)"
            ))
        })
    }

    pub fn uses_dec_prompts(self) -> bool {
        matches!(self, Mode::PtMd | Mode::PtMdIe)
    }

    pub fn uses_enc_prompts(self) -> bool {
        matches!(self, Mode::PtMdIe)
    }

    pub fn uses_dec_lora(self) -> bool {
        matches!(self, Mode::LoraMd | Mode::LoraMdIe)
    }

    pub fn uses_enc_lora(self) -> bool {
        matches!(self, Mode::LoraMdIe | Mode::FullMdLoraIe)
    }

    pub fn unfreezes_decoder(self) -> bool {
        matches!(self, Mode::FullMd | Mode::FullMdLoraIe)
    }
}

/// Adapter hyperparameters. Defaults follow the published recipe: eight
/// prompts per site and rank-4 deltas with alpha equal to the rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub mode: Mode,
    /// Decoder prompt count.
    pub n_md: usize,
    /// Per-encoder-layer prompt count.
    pub n_ie: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl AdapterConfig {
    pub fn new(mode: Mode) -> Self {
        AdapterConfig { mode, n_md: 8, n_ie: 8, lora_rank: 4, lora_alpha: 4.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_dec_prompts() && self.n_md == 0 {
            return Err(Error::Config(
                "prompt modes need n_md >= 1; evaluate the unadapted base model for the zero case"
                    .into(),
            ));
        }
        if self.mode.uses_enc_prompts() && self.n_ie == 0 {
            return Err(Error::Config("PT_MD_IE needs n_ie >= 1".into()));
        }
        let lora = self.mode.uses_dec_lora() || self.mode.uses_enc_lora();
        if lora && self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        if lora && !(self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Attention prefixes in the decoder, in registration order: three per
/// two-way block plus the final token-to-image attention.
pub fn decoder_attention_prefixes(model: &Model) -> Vec<String> {
    let mut v = Vec::new();
    for l in 0..model.cfg.dec_layers {
        for kind in ["self", "t2i", "i2t"] {
            v.push(format!("dec.blk{l}.{kind}"));
        }
    }
    v.push("dec.final_t2i".to_string());
    v
}

/// Attention prefixes in the encoder, one per transformer block.
pub fn encoder_attention_prefixes(model: &Model) -> Vec<String> {
    (0..model.cfg.enc_layers).map(|l| format!("enc.blk{l}.attn")).collect()
}

/// Freezes the base model, registers adapter parameters, and returns the
/// forward-pass wiring. Storage for the new entries appears on the next
/// `materialize` call, so metadata-only flows (parameter counting) never
/// allocate. Exclusive access required; re-applying on the same model is
/// rejected by the duplicate-name check.
pub fn apply_adapter(model: &mut Model, acfg: &AdapterConfig) -> Result<Overlay> {
    acfg.validate()?;
    for g in [Group::Encoder, Group::Neck, Group::Decoder, Group::Adapter] {
        model.reg.set_group_trainable(g, false);
    }

    let mut overlay = Overlay::none();
    if acfg.mode.uses_dec_prompts() {
        let d = model.cfg.dec_dim;
        let bound = 0.5 / (d as f64).sqrt();
        model.reg.register(
            "adapter.p_md",
            &[acfg.n_md, d],
            Group::Adapter,
            true,
            Init::Uniform { bound },
        )?;
        overlay.dec_prompts = Some("adapter.p_md".into());
    }
    if acfg.mode.uses_enc_prompts() {
        let d = model.cfg.enc_dim;
        let bound = 0.5 / (d as f64).sqrt();
        let mut names = Vec::with_capacity(model.cfg.enc_layers);
        for l in 0..model.cfg.enc_layers {
            let name = format!("adapter.p_ie.{l}");
            model.reg.register(&name, &[acfg.n_ie, d], Group::Adapter, true, Init::Uniform { bound })?;
            names.push(name);
        }
        overlay.enc_prompts = Some(names);
    }

    let mut lora_targets: Vec<String> = Vec::new();
    if acfg.mode.uses_dec_lora() {
        lora_targets.extend(decoder_attention_prefixes(model));
    }
    if acfg.mode.uses_enc_lora() {
        lora_targets.extend(encoder_attention_prefixes(model));
    }
    for prefix in &lora_targets {
        for proj in ["q", "v"] {
            let wname = format!("{prefix}.{proj}.w");
            let wshape = model.reg.shape_of(&wname)?.to_vec();
            let (d_out, d_in) = (wshape[0], wshape[1]);
            let r = acfg.lora_rank;
            let a_name = format!("adapter.lora.{prefix}.{proj}.a");
            let b_name = format!("adapter.lora.{prefix}.{proj}.b");
            model.reg.register(&a_name, &[r, d_in], Group::Adapter, true, Init::TruncNormal { std: 0.02 })?;
            model.reg.register(&b_name, &[d_out, r], Group::Adapter, true, Init::Zeros)?;
            overlay.lora.insert(
                wname,
                LoraRef { a: a_name, b: b_name, scale: acfg.lora_alpha / r as f64 },
            );
        }
    }

    if acfg.mode.unfreezes_decoder() {
        model.reg.set_group_trainable(Group::Decoder, true);
    }
    Ok(overlay)
}

/// Trainable parameter count from registry metadata alone.
pub fn count_trainable(model: &Model) -> usize {
    model.reg.count_trainable()
}

//! Checkpoint files: a plain-text manifest over concatenated binary tensor
//! payloads, plus the configuration echo needed to rebuild the run.
//!
//! Two flavors share one format. A full checkpoint stores every registry
//! entry; an adapter checkpoint stores only the trainable ones, relying on
//! the echoed seeds to re-materialize the frozen base bit-exactly. Entries
//! appear in registry order, and every payload is an NT1 blob whose shape
//! is cross-checked against both the manifest and the receiving registry.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::model::{Group, Model, ModelConfig, Overlay, ParamRegistry};
use crate::tensor::nt1;

const MAGIC: &str = "PTCKPT1";

/// Everything needed to reconstruct the model around the stored tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptMeta {
    pub model: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    /// Seed that materialized the frozen base weights.
    pub base_seed: u64,
    /// Seed that materialized the adapter weights.
    pub adapter_seed: u64,
    /// Run seed recorded for provenance.
    pub run_seed: u64,
    /// Training-set size, kept so evaluation can rebuild the exact split.
    #[serde(default = "default_train_n")]
    pub train_n: usize,
}

fn default_train_n() -> usize {
    1
}

/// Parsed checkpoint: metadata plus named tensors in file order.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CkptMeta,
    pub kind: CkptKind,
    pub entries: Vec<CkptEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkptKind {
    Full,
    Adapter,
}

impl CkptKind {
    fn as_str(self) -> &'static str {
        match self {
            CkptKind::Full => "full",
            CkptKind::Adapter => "adapter",
        }
    }
}

#[derive(Debug)]
pub struct CkptEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub trainable: bool,
    pub data: Vec<f32>,
}

/// Serializes the registry to `path`. `kind` selects whether all entries or
/// only trainable ones are stored.
pub fn write_checkpoint(
    path: &Path,
    meta: &CkptMeta,
    reg: &ParamRegistry,
    kind: CkptKind,
) -> Result<()> {
    let rows = reg.manifest_rows();
    let selected: Vec<_> = rows
        .into_iter()
        .filter(|(_, _, _, trainable)| kind == CkptKind::Full || *trainable)
        .collect();

    // Payload blobs first so manifest offsets are known.
    let mut payload = Vec::new();
    let mut offsets = Vec::with_capacity(selected.len());
    for (name, shape, _, _) in &selected {
        offsets.push(payload.len());
        let data = reg.get(name)?.to_vec();
        nt1::write_nt1(&mut payload, shape, &data)?;
    }

    let mut out = Vec::new();
    let meta_json = serde_json::to_string(meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization failed: {e}")))?;
    writeln!(out, "{MAGIC} {}", kind.as_str())?;
    writeln!(out, "config {meta_json}")?;
    writeln!(out, "entries {}", selected.len())?;
    for ((name, shape, group, trainable), offset) in selected.iter().zip(&offsets) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        writeln!(
            out,
            "{name} {} {} {} {} {offset}",
            group.as_str(),
            u8::from(*trainable),
            shape.len(),
            dims.join(" "),
        )?;
    }
    writeln!(out, "payload {}", payload.len())?;
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a checkpoint file, verifying the manifest against each payload.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let pstr = path.display().to_string();
    let fail = |offset: usize, msg: String| Error::Format { path: pstr.clone(), offset, msg };

    let mut pos = 0usize;
    let mut next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail(start, "unterminated header line".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| fail(start, "non-UTF-8 header line".into()))?;
        *pos = start + end + 1;
        Ok((start, line.to_string()))
    };

    let (at, magic_line) = next_line(&mut pos)?;
    let kind = match magic_line.strip_prefix(MAGIC).map(str::trim) {
        Some("full") => CkptKind::Full,
        Some("adapter") => CkptKind::Adapter,
        _ => return Err(fail(at, format!("bad magic line '{magic_line}'"))),
    };

    let (at, cfg_line) = next_line(&mut pos)?;
    let meta_json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| fail(at, "expected 'config <json>' line".into()))?;
    let meta: CkptMeta = serde_json::from_str(meta_json)
        .map_err(|e| fail(at, format!("config echo does not parse: {e}")))?;

    let (at, count_line) = next_line(&mut pos)?;
    let count: usize = count_line
        .strip_prefix("entries ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fail(at, "expected 'entries <n>' line".into()))?;

    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let (at, line) = next_line(&mut pos)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 5 {
            return Err(fail(at, format!("manifest row too short: '{line}'")));
        }
        let name = toks[0].to_string();
        let group = Group::parse(toks[1])?;
        let trainable = match toks[2] {
            "0" => false,
            "1" => true,
            other => return Err(fail(at, format!("bad trainable flag '{other}'"))),
        };
        let rank: usize = toks[3]
            .parse()
            .map_err(|_| fail(at, format!("bad rank '{}'", toks[3])))?;
        if toks.len() != 5 + rank {
            return Err(fail(at, format!("manifest row expects {rank} dims: '{line}'")));
        }
        let mut shape = Vec::with_capacity(rank);
        for t in &toks[4..4 + rank] {
            shape.push(t.parse::<usize>().map_err(|_| fail(at, format!("bad dim '{t}'")))?);
        }
        let offset: usize = toks[4 + rank]
            .parse()
            .map_err(|_| fail(at, format!("bad offset '{}'", toks[4 + rank])))?;
        manifest.push((name, group, trainable, shape, offset));
    }

    let (at, payload_line) = next_line(&mut pos)?;
    let payload_len: usize = payload_line
        .strip_prefix("payload ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fail(at, "expected 'payload <bytes>' line".into()))?;
    if bytes.len() - pos != payload_len {
        return Err(fail(
            pos,
            format!("payload is {} bytes, header claims {payload_len}", bytes.len() - pos),
        ));
    }
    let payload = &bytes[pos..];

    let mut entries = Vec::with_capacity(count);
    for (name, group, trainable, shape, offset) in manifest {
        if offset > payload.len() {
            return Err(fail(pos + offset, format!("offset for '{name}' past end of payload")));
        }
        let (got_shape, data, _) = nt1::parse_nt1(&payload[offset..], &pstr, pos + offset)?;
        if got_shape != shape {
            return Err(Error::Checkpoint(format!(
                "'{name}': manifest shape {shape:?} but payload shape {got_shape:?}"
            )));
        }
        entries.push(CkptEntry { name, shape, group, trainable, data });
    }
    Ok(Checkpoint { meta, kind, entries })
}

/// Copies checkpoint tensors into a registry, verifying name and shape.
pub fn load_into(reg: &ParamRegistry, ckpt: &Checkpoint) -> Result<()> {
    for e in &ckpt.entries {
        if !reg.contains(&e.name) {
            return Err(Error::Checkpoint(format!(
                "checkpoint entry '{}' has no slot in the registry",
                e.name
            )));
        }
        let want = reg.shape_of(&e.name)?;
        if want != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "'{}': registry expects {:?}, checkpoint holds {:?}",
                e.name, want, e.shape
            )));
        }
        reg.get(&e.name)?.set_data(&e.data);
    }
    Ok(())
}

/// Reconstructs a ready-to-run model from a checkpoint: rebuilds the base
/// from the echoed config and seeds, re-applies the adapter, then loads the
/// stored tensors over the top.
pub fn rebuild_model(ckpt: &Checkpoint) -> Result<(Model, Overlay)> {
    let mut model = Model::new(ckpt.meta.model.clone())?;
    model.materialize(ckpt.meta.base_seed);
    let overlay = match &ckpt.meta.adapter {
        Some(acfg) => {
            let ov = crate::adapter::apply_adapter(&mut model, acfg)?;
            model.materialize(ckpt.meta.adapter_seed);
            ov
        }
        None => Overlay::none(),
    };
    load_into(&model.reg, ckpt)?;
    Ok((model, overlay))
}

//! Run configuration files: plain-text `key = value` lines under
//! `[section]` headers, mapping 1:1 onto the library's typed configs.
//! Unknown sections and unknown keys are errors that name the offender, and
//! the resolved configuration can be rendered back out in the same format
//! (the render/parse pair round-trips).

use std::path::PathBuf;

use ptseg::adapter::{AdapterConfig, Mode};
use ptseg::data::GenSpec;
use ptseg::error::{Error, Result};
use ptseg::eval::AblationParam;
use ptseg::model::ModelConfig;
use ptseg::train::TrainConfig;

/// Data source for train/matrix/ablate runs: an inline generator spec or a
/// corpus directory written by `gen`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub gen: GenSpec,
    pub corpus_seed: u64,
    pub train_n: usize,
    /// When set, the corpus is loaded from disk instead of generated; the
    /// inline generator keys must then be absent.
    pub corpus_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            gen: GenSpec::default(),
            corpus_seed: 0,
            train_n: 16,
            corpus_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSection {
    /// Write PGM triptychs (input, ground truth, confusion map) per image.
    pub maps: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSection {
    pub methods: Vec<Mode>,
    pub train_ns: Vec<usize>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            methods: Mode::ALL.to_vec(),
            train_ns: vec![16, 32, 64],
            seeds: vec![0, 1, 2],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSection {
    pub param: AblationParam,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            param: AblationParam::NMd,
            values: vec![0, 1, 2, 4, 8, 16, 32],
            seeds: vec![0, 1, 2],
            jobs: 1,
        }
    }
}

/// Fully resolved run configuration: defaults overlaid with the file's
/// settings. `adapter` is `None` when the file has no `[adapter]` section
/// (commands that need one say so).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub train: TrainConfig,
    /// Run seed; the `--seed` flag overrides it.
    pub run_seed: u64,
    pub data: DataSection,
    pub eval: EvalSection,
    pub matrix: MatrixSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            adapter: None,
            train: TrainConfig::default(),
            run_seed: 0,
            data: DataSection::default(),
            eval: EvalSection::default(),
            matrix: MatrixSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn cerr(msg: String) -> Error {
    Error::Config(msg)
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| cerr(format!("[{section}] {key}: cannot parse '{value}'")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cerr(format!(
            "[{section}] {key}: expected true or false, got '{value}'"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for item in value.split(',') {
        let item = item.trim();
        if item.is_empty() {
            return Err(cerr(format!("[{section}] {key}: empty list item")));
        }
        out.push(
            item.parse()
                .map_err(|_| cerr(format!("[{section}] {key}: cannot parse '{item}'")))?,
        );
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        // The model section applies `preset` by replacing the whole config,
        // so it must precede any field override in that section.
        let mut model_keys_seen = false;
        let mut gen_keys_seen = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cerr(format!("line {}: unterminated section header", lineno + 1)))?
                    .trim();
                match name {
                    "model" | "adapter" | "train" | "data" | "eval" | "matrix" | "ablate" => {
                        section = Some(name.to_string());
                    }
                    other => return Err(cerr(format!("unknown section [{other}]"))),
                }
                continue;
            }
            let sec = section
                .as_deref()
                .ok_or_else(|| cerr(format!("line {}: key before any [section]", lineno + 1)))?;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cerr(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match sec {
                "model" => {
                    cfg.apply_model_key(key, value, &mut model_keys_seen)?;
                }
                "adapter" => cfg.apply_adapter_key(key, value)?,
                "train" => cfg.apply_train_key(key, value)?,
                "data" => cfg.apply_data_key(key, value, &mut gen_keys_seen)?,
                "eval" => match key {
                    "maps" => cfg.eval.maps = parse_bool(sec, key, value)?,
                    _ => return Err(cerr(format!("[eval] has no key '{key}'"))),
                },
                "matrix" => cfg.apply_matrix_key(key, value)?,
                "ablate" => cfg.apply_ablate_key(key, value)?,
                _ => unreachable!("section names are validated above"),
            }
        }
        cfg.model.validate()?;
        if let Some(a) = &cfg.adapter {
            a.validate()?;
        }
        cfg.train.validate()?;
        if cfg.data.corpus_dir.is_some() && gen_keys_seen {
            return Err(cerr(
                "[data] corpus and inline generator keys are mutually exclusive".into(),
            ));
        }
        cfg.data.gen.validate().map_err(|e| cerr(format!("[data] {e}")))?;
        if cfg.data.train_n == 0 {
            return Err(cerr("[data] train_n must be positive".into()));
        }
        Ok(cfg)
    }

    fn apply_model_key(&mut self, key: &str, value: &str, seen: &mut bool) -> Result<()> {
        if key == "preset" {
            if *seen {
                return Err(cerr(
                    "[model] preset must come before any field override".into(),
                ));
            }
            self.model = ModelConfig::preset(value)?;
            *seen = true;
            return Ok(());
        }
        *seen = true;
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = parse_num("model", key, value)?,
            "patch_size" => m.patch_size = parse_num("model", key, value)?,
            "in_channels" => m.in_channels = parse_num("model", key, value)?,
            "enc_dim" => m.enc_dim = parse_num("model", key, value)?,
            "enc_layers" => m.enc_layers = parse_num("model", key, value)?,
            "enc_heads" => m.enc_heads = parse_num("model", key, value)?,
            "window_size" => m.window_size = parse_num("model", key, value)?,
            "global_block_indices" => {
                m.global_block_indices = parse_list("model", key, value)?;
            }
            "enc_mlp_ratio" => m.enc_mlp_ratio = parse_num("model", key, value)?,
            "dec_dim" => m.dec_dim = parse_num("model", key, value)?,
            "dec_layers" => m.dec_layers = parse_num("model", key, value)?,
            "dec_heads" => m.dec_heads = parse_num("model", key, value)?,
            "dec_internal_dim" => m.dec_internal_dim = parse_num("model", key, value)?,
            "num_mask_tokens" => m.num_mask_tokens = parse_num("model", key, value)?,
            _ => return Err(cerr(format!("[model] has no key '{key}'"))),
        }
        Ok(())
    }

    fn apply_adapter_key(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "mode" {
            let mode = Mode::parse(value)?;
            self.adapter = Some(match self.adapter.take() {
                Some(mut a) => {
                    a.mode = mode;
                    a
                }
                None => AdapterConfig::new(mode),
            });
            return Ok(());
        }
        let a = self
            .adapter
            .get_or_insert_with(|| AdapterConfig::new(Mode::PtMd));
        match key {
            "n_md" => a.n_md = parse_num("adapter", key, value)?,
            "n_ie" => a.n_ie = parse_num("adapter", key, value)?,
            "lora_rank" => a.lora_rank = parse_num("adapter", key, value)?,
            "lora_alpha" => a.lora_alpha = parse_num("adapter", key, value)?,
            _ => return Err(cerr(format!("[adapter] has no key '{key}'"))),
        }
        Ok(())
    }

    fn apply_train_key(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = parse_num("train", key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = parse_num("train", key, value)?,
            "batch_size" => t.batch_size = parse_num("train", key, value)?,
            "lr" => {
                t.lr = if value == "default" {
                    None
                } else {
                    Some(parse_num("train", key, value)?)
                }
            }
            "weight_decay" => t.weight_decay = parse_num("train", key, value)?,
            "bce_weight" => t.bce_weight = parse_num("train", key, value)?,
            "dice_weight" => t.dice_weight = parse_num("train", key, value)?,
            "dice_smooth" => t.dice_smooth = parse_num("train", key, value)?,
            "augment" => t.augment = parse_bool("train", key, value)?,
            "eval_every" => {
                t.eval_every = if value == "never" {
                    None
                } else {
                    Some(parse_num("train", key, value)?)
                }
            }
            "seed" => self.run_seed = parse_num("train", key, value)?,
            _ => return Err(cerr(format!("[train] has no key '{key}'"))),
        }
        Ok(())
    }

    fn apply_data_key(&mut self, key: &str, value: &str, gen_seen: &mut bool) -> Result<()> {
        match key {
            "corpus_seed" => self.data.corpus_seed = parse_num("data", key, value)?,
            "train_n" => self.data.train_n = parse_num("data", key, value)?,
            "corpus" => self.data.corpus_dir = Some(PathBuf::from(value)),
            _ => {
                self.data
                    .gen
                    .set(key, value)
                    .map_err(|e| cerr(format!("[data] {e}")))?;
                *gen_seen = true;
            }
        }
        Ok(())
    }

    fn apply_matrix_key(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.matrix;
        match key {
            "methods" => {
                let names: Vec<String> = parse_list("matrix", key, value)?;
                m.methods = names
                    .iter()
                    .map(|n| Mode::parse(n))
                    .collect::<Result<Vec<_>>>()?;
            }
            "train_ns" => m.train_ns = parse_list("matrix", key, value)?,
            "seeds" => m.seeds = parse_list("matrix", key, value)?,
            "jobs" => m.jobs = parse_num("matrix", key, value)?,
            _ => return Err(cerr(format!("[matrix] has no key '{key}'"))),
        }
        Ok(())
    }

    fn apply_ablate_key(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.ablate;
        match key {
            "param" => {
                a.param = match value {
                    "n_md" => AblationParam::NMd,
                    "n_ie" => AblationParam::NIe,
                    _ => {
                        return Err(cerr(format!(
                            "[ablate] param: expected n_md or n_ie, got '{value}'"
                        )))
                    }
                }
            }
            "values" => a.values = parse_list("ablate", key, value)?,
            "seeds" => a.seeds = parse_list("ablate", key, value)?,
            "jobs" => a.jobs = parse_num("ablate", key, value)?,
            _ => return Err(cerr(format!("[ablate] has no key '{key}'"))),
        }
        Ok(())
    }

    /// Renders the resolved configuration; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        out.push_str("[model]\n");
        out.push_str(&format!("image_size = {}\n", m.image_size));
        out.push_str(&format!("patch_size = {}\n", m.patch_size));
        out.push_str(&format!("in_channels = {}\n", m.in_channels));
        out.push_str(&format!("enc_dim = {}\n", m.enc_dim));
        out.push_str(&format!("enc_layers = {}\n", m.enc_layers));
        out.push_str(&format!("enc_heads = {}\n", m.enc_heads));
        out.push_str(&format!("window_size = {}\n", m.window_size));
        let globals: Vec<String> =
            m.global_block_indices.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("global_block_indices = {}\n", globals.join(",")));
        out.push_str(&format!("enc_mlp_ratio = {}\n", m.enc_mlp_ratio));
        out.push_str(&format!("dec_dim = {}\n", m.dec_dim));
        out.push_str(&format!("dec_layers = {}\n", m.dec_layers));
        out.push_str(&format!("dec_heads = {}\n", m.dec_heads));
        out.push_str(&format!("dec_internal_dim = {}\n", m.dec_internal_dim));
        out.push_str(&format!("num_mask_tokens = {}\n", m.num_mask_tokens));

        if let Some(a) = &self.adapter {
            out.push_str("\n[adapter]\n");
            out.push_str(&format!("mode = {}\n", a.mode.as_str()));
            out.push_str(&format!("n_md = {}\n", a.n_md));
            out.push_str(&format!("n_ie = {}\n", a.n_ie));
            out.push_str(&format!("lora_rank = {}\n", a.lora_rank));
            out.push_str(&format!("lora_alpha = {}\n", a.lora_alpha));
        }

        let t = &self.train;
        out.push_str("\n[train]\n");
        out.push_str(&format!("epochs = {}\n", t.epochs));
        out.push_str(&format!("steps_per_epoch = {}\n", t.steps_per_epoch));
        out.push_str(&format!("batch_size = {}\n", t.batch_size));
        match t.lr {
            Some(lr) => out.push_str(&format!("lr = {lr}\n")),
            None => out.push_str("lr = default\n"),
        }
        out.push_str(&format!("weight_decay = {}\n", t.weight_decay));
        out.push_str(&format!("bce_weight = {}\n", t.bce_weight));
        out.push_str(&format!("dice_weight = {}\n", t.dice_weight));
        out.push_str(&format!("dice_smooth = {}\n", t.dice_smooth));
        out.push_str(&format!("augment = {}\n", t.augment));
        match t.eval_every {
            Some(k) => out.push_str(&format!("eval_every = {k}\n")),
            None => out.push_str("eval_every = never\n"),
        }
        out.push_str(&format!("seed = {}\n", self.run_seed));

        out.push_str("\n[data]\n");
        match &self.data.corpus_dir {
            Some(dir) => out.push_str(&format!("corpus = {}\n", dir.display())),
            None => out.push_str(&self.data.gen.echo()),
        }
        out.push_str(&format!("corpus_seed = {}\n", self.data.corpus_seed));
        out.push_str(&format!("train_n = {}\n", self.data.train_n));

        out.push_str("\n[eval]\n");
        out.push_str(&format!("maps = {}\n", self.eval.maps));

        let mx = &self.matrix;
        out.push_str("\n[matrix]\n");
        let methods: Vec<&str> = mx.methods.iter().map(|m| m.as_str()).collect();
        out.push_str(&format!("methods = {}\n", methods.join(",")));
        let ns: Vec<String> = mx.train_ns.iter().map(|n| n.to_string()).collect();
        out.push_str(&format!("train_ns = {}\n", ns.join(",")));
        let seeds: Vec<String> = mx.seeds.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("seeds = {}\n", seeds.join(",")));
        out.push_str(&format!("jobs = {}\n", mx.jobs));

        let ab = &self.ablate;
        out.push_str("\n[ablate]\n");
        out.push_str(&format!(
            "param = {}\n",
            match ab.param {
                AblationParam::NMd => "n_md",
                AblationParam::NIe => "n_ie",
            }
        ));
        let vals: Vec<String> = ab.values.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("values = {}\n", vals.join(",")));
        let seeds: Vec<String> = ab.seeds.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("seeds = {}\n", seeds.join(",")));
        out.push_str(&format!("jobs = {}\n", ab.jobs));
        out
    }
}

//! Evaluation: Dice scoring, confusion maps, threshold oracles, and the
//! experiment drivers (few-shot matrix and prompt-count ablations).

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{apply_adapter, AdapterConfig, Mode};
use crate::data::{self, generate, pgm::write_pgm, GenSpec, ImageBuf, MaskBuf, Sample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Overlay};
use crate::tensor::Graph;
use crate::train::{train, TrainConfig};

/// Dice coefficient between binary masks given as `{0,1}` float slices.
/// Two empty masks count as a perfect match.
pub fn dice_score(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dim(format!(
            "dice_score: mask sizes differ ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    let mut p = 0u64;
    let mut g = 0u64;
    let mut inter = 0u64;
    for (a, b) in pred.iter().zip(gt) {
        let pa = *a >= 0.5;
        let gb = *b >= 0.5;
        p += u64::from(pa);
        g += u64::from(gb);
        inter += u64::from(pa && gb);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Pixel confusion label. Discriminants double as sort keys in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLabel {
    TrueNeg,
    FalseNeg,
    FalsePos,
    TruePos,
}

/// Per-pixel confusion labels plus the four counts.
#[derive(Debug)]
pub struct ErrorMap {
    pub labels: Vec<PixelLabel>,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn error_map(pred: &[f32], gt: &[f32]) -> Result<ErrorMap> {
    if pred.len() != gt.len() {
        return Err(Error::Dim("error_map: mask sizes differ".into()));
    }
    let mut labels = Vec::with_capacity(pred.len());
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (a, b) in pred.iter().zip(gt) {
        let l = match (*a >= 0.5, *b >= 0.5) {
            (true, true) => {
                tp += 1;
                PixelLabel::TruePos
            }
            (false, false) => {
                tn += 1;
                PixelLabel::TrueNeg
            }
            (true, false) => {
                fp += 1;
                PixelLabel::FalsePos
            }
            (false, true) => {
                fn_ += 1;
                PixelLabel::FalseNeg
            }
        };
        labels.push(l);
    }
    Ok(ErrorMap { labels, tp, tn, fp, fn_ })
}

/// Gray level used when rendering a confusion label into a PGM panel.
pub fn label_gray(l: PixelLabel) -> u8 {
    match l {
        PixelLabel::TrueNeg => 0,
        PixelLabel::FalseNeg => 85,
        PixelLabel::FalsePos => 170,
        PixelLabel::TruePos => 255,
    }
}

/// Best achievable Dice for a one-sided threshold rule `pred = value >= t`,
/// searched over all distinct pixel values. This is the "how separable is
/// the image" oracle used to validate generator settings and domain shifts.
pub fn best_threshold_dice(values: &[f32], gt: &[f32]) -> Result<f64> {
    if values.len() != gt.len() {
        return Err(Error::Dim("best_threshold_dice: sizes differ".into()));
    }
    let g_total: u64 = gt.iter().map(|&b| u64::from(b >= 0.5)).sum();
    // Empty prediction first: matches the both-empty convention.
    let mut best = if g_total == 0 { 1.0 } else { 0.0 };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut p = 0u64;
    let mut inter = 0u64;
    let mut i = 0;
    while i < order.len() {
        // Admit every pixel sharing this value; thresholds sit between
        // distinct values.
        let v = values[order[i]];
        while i < order.len() && values[order[i]] == v {
            p += 1;
            inter += u64::from(gt[order[i]] >= 0.5);
            i += 1;
        }
        if p + g_total > 0 {
            let d = 2.0 * inter as f64 / (p + g_total) as f64;
            if d > best {
                best = d;
            }
        }
    }
    Ok(best)
}

/// Forward pass and 0.5-threshold Dice for each sample; no gradients.
pub fn evaluate_model(
    model: &Model,
    overlay: &Overlay,
    samples: &[crate::data::Sample],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let mut g = Graph::no_grad();
        let img = s.image.to_tensor();
        let logits = model.forward_segment(&mut g, &img, overlay)?;
        let pred: Vec<f32> = logits
            .to_vec()
            .iter()
            .map(|&v| if v >= 0.0 { 1.0 } else { 0.0 })
            .collect();
        out.push(dice_score(&pred, &s.mask.data)?);
    }
    Ok(out)
}

/// Mean and sample standard deviation; std of fewer than two values is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Writes a side-by-side PGM: input image, ground-truth mask, and the
/// prediction rendered as confusion gray levels, separated by 1 px white
/// columns.
pub fn write_triptych(path: &Path, image: &ImageBuf, gt: &MaskBuf, pred: &[f32]) -> Result<()> {
    let s = image.size;
    if gt.data.len() != s * s || pred.len() != s * s {
        return Err(Error::Dim(format!(
            "triptych panels disagree: image {}x{s}, gt {}, pred {}",
            s,
            gt.data.len(),
            pred.len()
        )));
    }
    let em = error_map(pred, &gt.data)?;
    let w = 3 * s + 2;
    let mut px = vec![255u8; w * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            px[y * w + x] = (image.data[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            px[y * w + s + 1 + x] = if gt.data[i] >= 0.5 { 255 } else { 0 };
            px[y * w + 2 * s + 2 + x] = label_gray(em.labels[i]);
        }
    }
    write_pgm(path, w, s, &px)
}

/// Bounded worker pool over an indexed job list. Jobs run on scoped threads;
/// each job is internally deterministic so the output order is fixed by the
/// index, not by scheduling.
fn run_jobs<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = jobs.max(1).min(n.max(1));
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..n).collect());
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().unwrap().pop_front();
                let Some(i) = next else { break };
                let r = f(i);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker pool ran every job"))
        .collect()
}

// ---------------------------------------------------------------------------
// Few-shot experiment matrix.

/// One training method evaluated at several train-set sizes and seeds.
#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub model: ModelConfig,
    pub methods: Vec<AdapterConfig>,
    pub train_ns: Vec<usize>,
    pub seeds: Vec<u64>,
    pub gen: GenSpec,
    pub corpus_seed: u64,
    pub train: TrainConfig,
    pub jobs: usize,
}

/// Result of one matrix cell. `dice` is the mean over held-out images;
/// numerical aborts leave it empty and carry the message instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub method: String,
    pub train_n: usize,
    pub seed: u64,
    pub dice: Option<f64>,
    pub per_image: Vec<f64>,
    pub abort: Option<String>,
}

#[derive(Debug)]
pub struct MatrixSummary {
    pub dataset: String,
    pub shift: String,
    pub cells: Vec<CellOutcome>,
    pub csv: String,
    pub table: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content checksum that names a cell file. Covers everything that affects
/// the cell's numbers so stale results can never be resumed.
fn cell_checksum(
    cfg: &MatrixConfig,
    method: &AdapterConfig,
    train_n: usize,
    seed: u64,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(cfg.gen.echo().as_bytes());
    h.update(cfg.corpus_seed.to_le_bytes());
    h.update(serde_json::to_string(&cfg.model).map_err(|e| Error::Config(e.to_string()))?);
    h.update(serde_json::to_string(&cfg.train).map_err(|e| Error::Config(e.to_string()))?);
    h.update(serde_json::to_string(method).map_err(|e| Error::Config(e.to_string()))?);
    h.update(train_n.to_le_bytes());
    h.update(seed.to_le_bytes());
    Ok(hex(&h.finalize()))
}

/// Trains one configuration from scratch and scores the held-out split.
/// Seeds follow the single-run convention: base weights from `seed`,
/// adapter weights from `seed + 1`, batches from `seed`.
fn run_cell(
    model_cfg: &ModelConfig,
    method: &AdapterConfig,
    samples: &[Sample],
    corpus_seed: u64,
    train_n: usize,
    seed: u64,
    tcfg: &TrainConfig,
) -> Result<CellOutcome> {
    let split = data::split(samples, corpus_seed, train_n, seed)?;
    let mut model = Model::new(model_cfg.clone())?;
    model.materialize(seed);
    let overlay = apply_adapter(&mut model, method)?;
    model.materialize(seed.wrapping_add(1));
    match train(&model, &overlay, method.mode, &split, tcfg, seed) {
        Ok(_) => {
            let per_image = evaluate_model(&model, &overlay, &split.test)?;
            let (mean, _) = mean_std(&per_image);
            Ok(CellOutcome {
                method: method.mode.as_str().to_string(),
                train_n,
                seed,
                dice: Some(mean),
                per_image,
                abort: None,
            })
        }
        Err(e) if e.is_numerical() => Ok(CellOutcome {
            method: method.mode.as_str().to_string(),
            train_n,
            seed,
            dice: None,
            per_image: Vec::new(),
            abort: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

/// Runs every (method, train_n, seed) cell, resuming completed ones from
/// `out_dir/cells/<checksum>.json`, and writes `summary.csv` plus
/// `table.txt`.
pub fn run_matrix(cfg: &MatrixConfig, out_dir: &Path) -> Result<MatrixSummary> {
    if cfg.methods.is_empty() || cfg.train_ns.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config(
            "matrix needs at least one method, train size, and seed".into(),
        ));
    }
    let max_n = *cfg.train_ns.iter().max().unwrap();
    let holdout = cfg.gen.count / 5;
    if holdout == 0 || max_n + holdout > cfg.gen.count {
        return Err(Error::Config(format!(
            "corpus of {} images cannot hold train_n={max_n} plus a {holdout}-image test set",
            cfg.gen.count
        )));
    }
    for m in &cfg.methods {
        m.validate()?;
    }
    cfg.train.validate()?;

    let samples = generate(&cfg.gen, cfg.corpus_seed)?;
    let cells_dir = out_dir.join("cells");
    std::fs::create_dir_all(&cells_dir)?;

    struct Job {
        method: AdapterConfig,
        train_n: usize,
        seed: u64,
        path: std::path::PathBuf,
        cached: Option<CellOutcome>,
    }
    let mut job_list = Vec::new();
    for method in &cfg.methods {
        for &train_n in &cfg.train_ns {
            for &seed in &cfg.seeds {
                let sum = cell_checksum(cfg, method, train_n, seed)?;
                let path = cells_dir.join(format!("{sum}.json"));
                let cached = if path.exists() {
                    let text = std::fs::read_to_string(&path)?;
                    Some(serde_json::from_str(&text).map_err(|e| {
                        Error::Format {
                            path: path.display().to_string(),
                            offset: 0,
                            msg: format!("bad cell file: {e}"),
                        }
                    })?)
                } else {
                    None
                };
                job_list.push(Job { method: method.clone(), train_n, seed, path, cached });
            }
        }
    }

    let cells: Vec<CellOutcome> = run_jobs(cfg.jobs, job_list.len(), |i| {
        let job = &job_list[i];
        if let Some(c) = &job.cached {
            return Ok(c.clone());
        }
        let cell = run_cell(
            &cfg.model,
            &job.method,
            &samples,
            cfg.corpus_seed,
            job.train_n,
            job.seed,
            &cfg.train,
        )?;
        let text = serde_json::to_string(&cell).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&job.path, text)?;
        Ok(cell)
    })?;

    let dataset = format!("{}{}", cfg.gen.kind.as_str(), cfg.gen.size);
    let shift = cfg.gen.shift.as_str().to_string();
    let mut csv = String::from("dataset,shift,method,train_n,seed,dice\n");
    for c in &cells {
        let dice = match c.dice {
            Some(d) => format!("{d:.6}"),
            None => "nan".into(),
        };
        csv.push_str(&format!(
            "{dataset},{shift},{},{},{},{dice}\n",
            c.method, c.train_n, c.seed
        ));
    }
    let table = render_table(cfg, &cells, &dataset, &shift);
    std::fs::write(out_dir.join("summary.csv"), &csv)?;
    std::fs::write(out_dir.join("table.txt"), &table)?;
    Ok(MatrixSummary { dataset, shift, cells, csv, table })
}

/// Mean over seeds for one (method, train_n) entry, or None if any seed
/// aborted.
fn cell_mean_std(cells: &[CellOutcome], method: &str, train_n: usize) -> Option<(f64, f64)> {
    let seeds: Vec<f64> = cells
        .iter()
        .filter(|c| c.method == method && c.train_n == train_n)
        .map(|c| c.dice)
        .collect::<Option<Vec<f64>>>()?;
    if seeds.is_empty() {
        return None;
    }
    Some(mean_std(&seeds))
}

/// Method pairs differing only in whether the image encoder is tuned.
const IE_PAIRS: [(Mode, Mode); 3] = [
    (Mode::PtMdIe, Mode::PtMd),
    (Mode::LoraMdIe, Mode::LoraMd),
    (Mode::FullMdLoraIe, Mode::FullMd),
];

/// Plain-text report: Dice percent per cell aggregated over seeds, the
/// encoder-tuning deltas, and the degradation from the largest to the
/// smallest train size.
fn render_table(cfg: &MatrixConfig, cells: &[CellOutcome], dataset: &str, shift: &str) -> String {
    let methods: Vec<&str> = cfg.methods.iter().map(|m| m.mode.as_str()).collect();
    let mut out = format!(
        "dataset {dataset}, shift {shift}; Dice percent, mean +- std over {} seeds\n\n",
        cfg.seeds.len()
    );
    out.push_str(&format!("{:<16}", "method"));
    for &n in &cfg.train_ns {
        out.push_str(&format!(" {:>14}", format!("n={n}")));
    }
    out.push('\n');
    for &m in &methods {
        out.push_str(&format!("{m:<16}"));
        for &n in &cfg.train_ns {
            let entry = match cell_mean_std(cells, m, n) {
                Some((mean, std)) => format!("{:.1} +- {:.1}", mean * 100.0, std * 100.0),
                None => "nan".into(),
            };
            out.push_str(&format!(" {entry:>14}"));
        }
        out.push('\n');
    }

    let pairs: Vec<(&str, &str)> = IE_PAIRS
        .iter()
        .map(|&(t, f)| (t.as_str(), f.as_str()))
        .filter(|(t, f)| methods.contains(t) && methods.contains(f))
        .collect();
    if !pairs.is_empty() {
        out.push_str("\nencoder-tuning gain (tuned minus frozen, Dice points)\n");
        for (tuned, frozen) in pairs {
            out.push_str(&format!("{:<32}", format!("{tuned} - {frozen}")));
            for &n in &cfg.train_ns {
                let entry = match (cell_mean_std(cells, tuned, n), cell_mean_std(cells, frozen, n))
                {
                    (Some((a, _)), Some((b, _))) => format!("{:+.1}", (a - b) * 100.0),
                    _ => "nan".into(),
                };
                out.push_str(&format!(" {entry:>8}"));
            }
            out.push('\n');
        }
    }

    if cfg.train_ns.len() >= 2 {
        let lo = *cfg.train_ns.iter().min().unwrap();
        let hi = *cfg.train_ns.iter().max().unwrap();
        out.push_str(&format!(
            "\nchange from n={hi} to n={lo} (Dice points; closer to zero degrades least)\n"
        ));
        for &m in &methods {
            let entry = match (cell_mean_std(cells, m, lo), cell_mean_std(cells, m, hi)) {
                (Some((a, _)), Some((b, _))) => format!("{:+.1}", (a - b) * 100.0),
                _ => "nan".into(),
            };
            out.push_str(&format!("{m:<16} {entry:>8}\n"));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Prompt-count ablation sweep.

/// Which prompt count the sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationParam {
    NMd,
    NIe,
}

impl AblationParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationParam::NMd => "n_md",
            AblationParam::NIe => "n_ie",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub model: ModelConfig,
    /// Source of the fixed hyperparameters (the non-swept prompt count,
    /// LoRA settings are unused here).
    pub base: AdapterConfig,
    pub param: AblationParam,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub gen: GenSpec,
    pub corpus_seed: u64,
    pub train_n: usize,
    pub train: TrainConfig,
    pub jobs: usize,
}

/// Adapter for one sweep point, or None for the untrained base model.
/// The decoder sweep keeps the encoder frozen; the encoder sweep fixes the
/// decoder prompt count at its default and falls back to decoder-only
/// tuning at zero.
fn ablation_method(cfg: &AblationConfig, value: usize) -> Option<AdapterConfig> {
    match (cfg.param, value) {
        (AblationParam::NMd, 0) => None,
        (AblationParam::NMd, v) => {
            let mut a = AdapterConfig::new(Mode::PtMd);
            a.n_md = v;
            Some(a)
        }
        (AblationParam::NIe, 0) => {
            let mut a = AdapterConfig::new(Mode::PtMd);
            a.n_md = cfg.base.n_md;
            Some(a)
        }
        (AblationParam::NIe, v) => {
            let mut a = AdapterConfig::new(Mode::PtMdIe);
            a.n_md = cfg.base.n_md;
            a.n_ie = v;
            Some(a)
        }
    }
}

/// Sweeps one prompt count over `values x seeds`, writes
/// `out_dir/ablation.csv`, and returns the CSV text. Reruns with the same
/// configuration produce identical bytes.
pub fn ablation_sweep(cfg: &AblationConfig, out_dir: &Path) -> Result<String> {
    if cfg.values.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one value and seed".into()));
    }
    cfg.train.validate()?;
    let samples = generate(&cfg.gen, cfg.corpus_seed)?;

    let mut job_list = Vec::new();
    for &value in &cfg.values {
        for &seed in &cfg.seeds {
            job_list.push((value, seed));
        }
    }
    let dices: Vec<Option<f64>> = run_jobs(cfg.jobs, job_list.len(), |i| {
        let (value, seed) = job_list[i];
        match ablation_method(cfg, value) {
            Some(method) => {
                let cell = run_cell(
                    &cfg.model,
                    &method,
                    &samples,
                    cfg.corpus_seed,
                    cfg.train_n,
                    seed,
                    &cfg.train,
                )?;
                Ok(cell.dice)
            }
            None => {
                // Unadapted floor: frozen base weights, no training step.
                let split = data::split(&samples, cfg.corpus_seed, cfg.train_n, seed)?;
                let mut model = Model::new(cfg.model.clone())?;
                model.materialize(seed);
                let per = evaluate_model(&model, &Overlay::default(), &split.test)?;
                Ok(Some(mean_std(&per).0))
            }
        }
    })?;

    let mut csv = String::from("param,value,seed,dice\n");
    let name = cfg.param.as_str();
    let mut k = 0;
    for &value in &cfg.values {
        let mut seed_dices = Vec::new();
        for &seed in &cfg.seeds {
            let cell = match dices[k] {
                Some(d) => {
                    seed_dices.push(d);
                    format!("{d:.6}")
                }
                None => "nan".into(),
            };
            csv.push_str(&format!("{name},{value},{seed},{cell}\n"));
            k += 1;
        }
        if seed_dices.len() == cfg.seeds.len() {
            let (mean, std) = mean_std(&seed_dices);
            csv.push_str(&format!("{name},{value},mean,{mean:.6}\n"));
            csv.push_str(&format!("{name},{value},std,{std:.6}\n"));
        } else {
            csv.push_str(&format!("{name},{value},mean,nan\n"));
            csv.push_str(&format!("{name},{value},std,nan\n"));
        }
    }
    std::fs::write(out_dir.join("ablation.csv"), &csv)?;
    Ok(csv)
}

//! Pre-training loop (AdamW, task sampling, checkpointing) and fine-tuning
//! for the recognition heads.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{
    read_named_tensor, read_u32, read_u64, save_parameters, write_named_tensor, write_u32,
    write_u64,
};
use crate::autodiff::{Graph, ParameterSet, Tensor, Value};
use crate::corpus::{build_text_input, ItemRecord, TextInput, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::classification_metrics;
use crate::model::{FashionFae, Head};
use crate::objectives::{
    loss_aetp, loss_apir, loss_itc, loss_itm, loss_mlm, mask_attributes, mask_patches,
    mask_subwords, sample_task, MaskedImageBatch, MaskedText, Task, TaskSchedule,
};
use crate::patches::{extract_patches, Codebook, PatchGrid};

const OPTIMIZER_MAGIC: &[u8; 4] = b"FFOS";

/// Hyperparameter profile. The paper profile records the published values;
/// the desk profile is practical at this scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::invalid(format!("unknown profile `{other}`"))),
        }
    }
}

/// Run configuration, loadable from a key=value file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    /// 0 disables cadence checkpoints.
    pub checkpoint_every: usize,
    pub task_probs: [f64; 5],
    /// Optimize the attribute and subword losses together whenever either
    /// is drawn.
    pub simultaneous_aetp_mlm: bool,
    pub mlm_ratio: f64,
    /// N: title subattributes masked per draw.
    pub n_title_mask: usize,
    pub itc_temperature: f64,
    pub embed_dim: usize,
    pub n_layers_text_fusion: usize,
    pub split_point: usize,
    pub n_layers_image: usize,
    pub n_heads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Desk,
            lr: 3e-4,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            steps: 3000,
            seed: 0,
            checkpoint_every: 0,
            task_probs: [0.2; 5],
            simultaneous_aetp_mlm: false,
            mlm_ratio: 0.15,
            n_title_mask: 2,
            itc_temperature: 1.0,
            embed_dim: 64,
            n_layers_text_fusion: 4,
            split_point: 2,
            n_layers_image: 2,
            n_heads: 4,
        }
    }
}

impl RunConfig {
    pub fn paper_profile() -> Self {
        RunConfig {
            profile: Profile::Paper,
            lr: 1e-5,
            batch_size: 128,
            ..RunConfig::default()
        }
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        TaskSchedule::new(self.task_probs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size < 2 && self.task_probs[Task::Itm.index()] > 0.0 {
            return Err(Error::invalid(
                "batch size must be at least 2 while the matching task is active",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.schedule()?;
        Ok(())
    }

    /// Parses a key=value file. The `profile` key is applied first so its
    /// defaults can be overridden by explicit keys; unknown keys are errors.
    pub fn from_kv_str(content: &str, path: &Path) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "expected key=value".into(),
            })?;
            entries.push((idx + 1, key.trim().to_string(), value.trim().to_string()));
        }

        let mut cfg = RunConfig::default();
        for (line, key, value) in &entries {
            if key == "profile" {
                cfg = match Profile::parse(value) {
                    Ok(Profile::Desk) => RunConfig::default(),
                    Ok(Profile::Paper) => RunConfig::paper_profile(),
                    Err(e) => {
                        return Err(Error::Config {
                            path: path.to_path_buf(),
                            line: *line,
                            message: e.to_string(),
                        })
                    }
                };
            }
        }

        for (line, key, value) in &entries {
            let err = |message: String| Error::Config {
                path: path.to_path_buf(),
                line: *line,
                message,
            };
            let parse_f64 =
                |v: &str| v.parse::<f64>().map_err(|_| err(format!("invalid number `{v}`")));
            let parse_usize =
                |v: &str| v.parse::<usize>().map_err(|_| err(format!("invalid integer `{v}`")));
            let parse_u64 =
                |v: &str| v.parse::<u64>().map_err(|_| err(format!("invalid integer `{v}`")));
            let parse_bool = |v: &str| match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(err(format!("invalid boolean `{v}`"))),
            };
            match key.as_str() {
                "profile" => {}
                "lr" => cfg.lr = parse_f64(value)?,
                "batch_size" => cfg.batch_size = parse_usize(value)?,
                "beta1" => cfg.beta1 = parse_f64(value)?,
                "beta2" => cfg.beta2 = parse_f64(value)?,
                "eps" => cfg.eps = parse_f64(value)?,
                "weight_decay" => cfg.weight_decay = parse_f64(value)?,
                "steps" => cfg.steps = parse_usize(value)?,
                "seed" => cfg.seed = parse_u64(value)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_usize(value)?,
                "p_aetp" => cfg.task_probs[Task::Aetp.index()] = parse_f64(value)?,
                "p_apir" => cfg.task_probs[Task::Apir.index()] = parse_f64(value)?,
                "p_itc" => cfg.task_probs[Task::Itc.index()] = parse_f64(value)?,
                "p_mlm" => cfg.task_probs[Task::Mlm.index()] = parse_f64(value)?,
                "p_itm" => cfg.task_probs[Task::Itm.index()] = parse_f64(value)?,
                "simultaneous_aetp_mlm" => cfg.simultaneous_aetp_mlm = parse_bool(value)?,
                "mlm_ratio" => cfg.mlm_ratio = parse_f64(value)?,
                "n_title_mask" => cfg.n_title_mask = parse_usize(value)?,
                "itc_temperature" => cfg.itc_temperature = parse_f64(value)?,
                "embed_dim" => cfg.embed_dim = parse_usize(value)?,
                "n_layers_text_fusion" => cfg.n_layers_text_fusion = parse_usize(value)?,
                "split_point" => cfg.split_point = parse_usize(value)?,
                "n_layers_image" => cfg.n_layers_image = parse_usize(value)?,
                "n_heads" => cfg.n_heads = parse_usize(value)?,
                other => {
                    return Err(err(format!("unknown key `{other}`")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "profile={}\nlr={}\nbatch_size={}\nbeta1={}\nbeta2={}\neps={}\nweight_decay={}\n\
             steps={}\nseed={}\ncheckpoint_every={}\np_aetp={}\np_apir={}\np_itc={}\np_mlm={}\n\
             p_itm={}\nsimultaneous_aetp_mlm={}\nmlm_ratio={}\nn_title_mask={}\n\
             itc_temperature={}\nembed_dim={}\nn_layers_text_fusion={}\nsplit_point={}\n\
             n_layers_image={}\nn_heads={}\n",
            self.profile.as_str(),
            self.lr,
            self.batch_size,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.steps,
            self.seed,
            self.checkpoint_every,
            self.task_probs[0],
            self.task_probs[1],
            self.task_probs[2],
            self.task_probs[3],
            self.task_probs[4],
            self.simultaneous_aetp_mlm,
            self.mlm_ratio,
            self.n_title_mask,
            self.itc_temperature,
            self.embed_dim,
            self.n_layers_text_fusion,
            self.split_point,
            self.n_layers_image,
            self.n_heads,
        )
    }
}

/// Loads and validates a run configuration file; an empty file yields all
/// defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_kv_str(&content, path)
}

/// Decoupled-weight-decay Adam with bias correction.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParameterSet, cfg: &RunConfig) -> Self {
        Self::with_hyperparams(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn with_hyperparams(
        params: &ParameterSet,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| {
                let (r, c) = p.shape();
                Tensor::zeros(r, c)
            })
            .collect();
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over a parameter set. Gradients align with set order;
/// `None` means zero gradient (the parameter still sees weight decay and
/// moment decay).
pub fn adamw_step(
    params: &ParameterSet,
    grads: &[Option<Tensor>],
    opt: &mut AdamW,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid("gradient list does not align with the parameter set"));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (idx, p) in params.iter().enumerate() {
        if let Some(g) = &grads[idx] {
            if g.shape() != p.shape() {
                return Err(Error::invalid(format!(
                    "gradient shape {:?} does not match parameter `{}`",
                    g.shape(),
                    p.name()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name())));
            }
        }
        let mut value = p.value_mut();
        let data = value.data_mut();
        let m = opt.m[idx].data_mut();
        let v = opt.v[idx].data_mut();
        for i in 0..data.len() {
            let g = grads[idx].as_ref().map_or(0.0, |t| t.data()[i]);
            data[i] *= 1.0 - opt.lr * opt.weight_decay;
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Tokenized text inputs and patch grids for every corpus item, computed
/// once per run.
pub struct PreparedCorpus {
    pub inputs: Vec<TextInput>,
    pub grids: Vec<PatchGrid>,
    pub ids: Vec<String>,
    pub categories: Vec<String>,
}

impl PreparedCorpus {
    pub fn prepare(
        corpus: &[ItemRecord],
        vocab: &Vocabulary,
        patch_size: usize,
    ) -> Result<Self> {
        let mut inputs = Vec::with_capacity(corpus.len());
        let mut grids = Vec::with_capacity(corpus.len());
        let mut ids = Vec::with_capacity(corpus.len());
        let mut categories = Vec::with_capacity(corpus.len());
        for item in corpus {
            inputs.push(build_text_input(item, vocab)?);
            grids.push(extract_patches(&item.image, patch_size)?);
            ids.push(item.item_id.clone());
            categories.push(item.attributes.category.clone());
        }
        Ok(PreparedCorpus {
            inputs,
            grids,
            ids,
            categories,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// One loss-log entry; serialized as a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub task: String,
    pub loss: f64,
}

pub fn save_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "step,task,loss").map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(w, "{},{},{}", row.step, row.task, row.loss).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let r = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, ',').collect();
        if parts.len() != 3 {
            return Err(Error::Config {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "expected step,task,loss".into(),
            });
        }
        rows.push(LossRow {
            step: parts[0].parse().map_err(|_| Error::Config {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "bad step".into(),
            })?,
            task: parts[1].to_string(),
            loss: parts[2].parse().map_err(|_| Error::Config {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "bad loss".into(),
            })?,
        });
    }
    Ok(rows)
}

/// Mutable training state: step counter, optimizer moments, the run's PRNG,
/// and running per-task loss statistics.
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub loss_stats: BTreeMap<String, (u64, f64)>,
}

impl TrainState {
    pub fn fresh(params: &ParameterSet, cfg: &RunConfig) -> Self {
        TrainState {
            step: 0,
            optimizer: AdamW::new(params, cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            loss_stats: BTreeMap::new(),
        }
    }

    /// FFOS container: step counter, PRNG state, loss statistics, and the
    /// optimizer moments.
    pub fn save(&self, path: &Path, params: &ParameterSet) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        w.write_all(OPTIMIZER_MAGIC).map_err(io_err)?;
        write_u64(&mut w, self.step).map_err(io_err)?;
        w.write_all(&self.rng.get_seed()).map_err(io_err)?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())
            .map_err(io_err)?;
        write_u32(&mut w, self.loss_stats.len() as u32).map_err(io_err)?;
        for (task, (count, sum)) in &self.loss_stats {
            write_u32(&mut w, task.len() as u32).map_err(io_err)?;
            w.write_all(task.as_bytes()).map_err(io_err)?;
            write_u64(&mut w, *count).map_err(io_err)?;
            w.write_all(&sum.to_le_bytes()).map_err(io_err)?;
        }
        write_u32(&mut w, params.len() as u32).map_err(io_err)?;
        for (idx, p) in params.iter().enumerate() {
            write_named_tensor(&mut w, p.name(), &self.optimizer.m[idx]).map_err(io_err)?;
            write_named_tensor(&mut w, p.name(), &self.optimizer.v[idx]).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path, params: &ParameterSet, cfg: &RunConfig) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != OPTIMIZER_MAGIC {
            return Err(Error::format(path, "bad magic, expected FFOS"));
        }
        let step = read_u64(&mut r).map_err(io_err)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(io_err)?;
        let mut pos_bytes = [0u8; 16];
        r.read_exact(&mut pos_bytes).map_err(io_err)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(u128::from_le_bytes(pos_bytes));

        let n_stats = read_u32(&mut r).map_err(io_err)? as usize;
        let mut loss_stats = BTreeMap::new();
        for _ in 0..n_stats {
            let len = read_u32(&mut r).map_err(io_err)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io_err)?;
            let task = String::from_utf8(buf)
                .map_err(|_| Error::format(path, "task name is not utf-8"))?;
            let count = read_u64(&mut r).map_err(io_err)?;
            let mut sum_bytes = [0u8; 8];
            r.read_exact(&mut sum_bytes).map_err(io_err)?;
            loss_stats.insert(task, (count, f64::from_le_bytes(sum_bytes)));
        }

        let n_params = read_u32(&mut r).map_err(io_err)? as usize;
        if n_params != params.len() {
            return Err(Error::format(
                path,
                format!("optimizer has {n_params} entries, model has {}", params.len()),
            ));
        }
        let mut optimizer = AdamW::new(params, cfg);
        for (idx, p) in params.iter().enumerate() {
            let (name_m, m) = read_named_tensor(&mut r, path)?;
            let (name_v, v) = read_named_tensor(&mut r, path)?;
            if name_m != p.name() || name_v != p.name() {
                return Err(Error::format(
                    path,
                    format!("optimizer entry `{name_m}` does not match parameter `{}`", p.name()),
                ));
            }
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::format(path, "moment shape mismatch"));
            }
            optimizer.m[idx] = m;
            optimizer.v[idx] = v;
        }
        optimizer.step = step;
        Ok(TrainState {
            step,
            optimizer,
            rng,
            loss_stats,
        })
    }
}

fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..batch_size.min(n) {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(batch_size.min(n));
    pool
}

fn masked_attr_batch(
    data: &PreparedCorpus,
    batch: &[usize],
    mask_id: usize,
    n_title: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<MaskedText> {
    batch
        .iter()
        .map(|&i| mask_attributes(&data.inputs[i], mask_id, n_title, rng))
        .collect()
}

fn masked_subword_batch(
    data: &PreparedCorpus,
    batch: &[usize],
    mask_id: usize,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<MaskedText> {
    batch
        .iter()
        .map(|&i| mask_subwords(&data.inputs[i], mask_id, ratio, rng))
        .collect()
}

/// Runs `steps` additional pre-training iterations: per step one task is
/// drawn (Aetp and Mlm jointly when the simultaneous flag is set), its
/// masked batch built, the loss backpropagated, and AdamW applied.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    model: &FashionFae,
    data: &PreparedCorpus,
    codebook: &Codebook,
    mask_id: usize,
    cfg: &RunConfig,
    state: &mut TrainState,
    steps: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot pretrain on an empty corpus"));
    }
    if cfg.batch_size > data.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds corpus size {}",
            cfg.batch_size,
            data.len()
        )));
    }
    let schedule = cfg.schedule()?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.config().save(&dir.join("model.cfg"))?;
    }

    let mut rows = Vec::with_capacity(steps);
    let mut g = Graph::new();
    for _ in 0..steps {
        let batch = sample_batch(&mut state.rng, data.len(), cfg.batch_size);
        let task = sample_task(&schedule, &mut state.rng);
        g.clear();
        let (loss_value, label): (Value, String) = match task {
            Task::Aetp | Task::Mlm if cfg.simultaneous_aetp_mlm => {
                let attr = masked_attr_batch(data, &batch, mask_id, cfg.n_title_mask, &mut state.rng);
                let sub = masked_subword_batch(data, &batch, mask_id, cfg.mlm_ratio, &mut state.rng);
                let attr_refs: Vec<(&MaskedText, &PatchGrid)> = attr
                    .iter()
                    .zip(batch.iter())
                    .map(|(m, &i)| (m, &data.grids[i]))
                    .collect();
                let sub_refs: Vec<(&MaskedText, &PatchGrid)> = sub
                    .iter()
                    .zip(batch.iter())
                    .map(|(m, &i)| (m, &data.grids[i]))
                    .collect();
                let a = loss_aetp(&mut g, model, &attr_refs)?;
                let m = loss_mlm(&mut g, model, &sub_refs)?;
                (g.add(a, m)?, "aetp+mlm".to_string())
            }
            Task::Aetp => {
                let attr = masked_attr_batch(data, &batch, mask_id, cfg.n_title_mask, &mut state.rng);
                let refs: Vec<(&MaskedText, &PatchGrid)> = attr
                    .iter()
                    .zip(batch.iter())
                    .map(|(m, &i)| (m, &data.grids[i]))
                    .collect();
                (loss_aetp(&mut g, model, &refs)?, task.as_str().to_string())
            }
            Task::Mlm => {
                let sub = masked_subword_batch(data, &batch, mask_id, cfg.mlm_ratio, &mut state.rng);
                let refs: Vec<(&MaskedText, &PatchGrid)> = sub
                    .iter()
                    .zip(batch.iter())
                    .map(|(m, &i)| (m, &data.grids[i]))
                    .collect();
                (loss_mlm(&mut g, model, &refs)?, task.as_str().to_string())
            }
            Task::Apir => {
                let plans: Vec<MaskedImageBatch> = batch
                    .iter()
                    .map(|&i| mask_patches(&data.grids[i], codebook, &mut state.rng))
                    .collect::<Result<_>>()?;
                let refs: Vec<(&TextInput, &PatchGrid, &MaskedImageBatch)> = batch
                    .iter()
                    .zip(plans.iter())
                    .map(|(&i, p)| (&data.inputs[i], &data.grids[i], p))
                    .collect();
                (loss_apir(&mut g, model, &refs)?, task.as_str().to_string())
            }
            Task::Itc => {
                let mut pooled_v = Vec::with_capacity(batch.len());
                let mut pooled_w = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let pair =
                        model.forward_contrastive(&mut g, &data.inputs[i].tokens, &data.grids[i])?;
                    pooled_v.push(pair.pooled_v);
                    pooled_w.push(pair.pooled_w);
                }
                (
                    loss_itc(&mut g, &pooled_v, &pooled_w, cfg.itc_temperature)?,
                    task.as_str().to_string(),
                )
            }
            Task::Itm => {
                let pairs: Vec<(&TextInput, &PatchGrid)> = batch
                    .iter()
                    .map(|&i| (&data.inputs[i], &data.grids[i]))
                    .collect();
                (
                    loss_itm(&mut g, model, &pairs, &mut state.rng)?,
                    task.as_str().to_string(),
                )
            }
        };

        let loss = g.scalar_value(loss_value);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "{label} loss at step {}",
                state.step + 1
            )));
        }
        g.backward(loss_value)?;
        let grads: Vec<Option<Tensor>> =
            model.params().iter().map(|p| g.param_grad(p)).collect();
        adamw_step(model.params(), &grads, &mut state.optimizer)?;

        state.step += 1;
        let entry = state.loss_stats.entry(label.clone()).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += loss;
        rows.push(LossRow {
            step: state.step,
            task: label,
            loss,
        });

        if let (Some(dir), true) = (
            checkpoint_dir,
            cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every as u64),
        ) {
            let stem = format!("checkpoint_{:06}", state.step);
            save_parameters(&dir.join(format!("{stem}.ffck")), model.params())?;
            state.save(&dir.join(format!("{stem}.ffos")), model.params())?;
        }
    }
    Ok(rows)
}

/// Which attribute labels the classifier predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelField {
    Category,
    Subcategory,
}

impl LabelField {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelField::Category => "category",
            LabelField::Subcategory => "subcategory",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(LabelField::Category),
            "subcategory" => Ok(LabelField::Subcategory),
            other => Err(Error::invalid(format!("unknown label field `{other}`"))),
        }
    }

    fn value(self, item: &ItemRecord) -> &str {
        match self {
            LabelField::Category => &item.attributes.category,
            LabelField::Subcategory => &item.attributes.subcategory,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 500,
            lr: 1e-3,
            batch_size: 8,
            freeze_backbone: false,
            seed: 0,
        }
    }
}

pub struct FinetuneOutput {
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Trains a linear head over the fused CLS state with cross-entropy;
/// optionally freezes the backbone. Returns training-set metrics.
pub fn finetune_classifier(
    model: &FashionFae,
    data: &PreparedCorpus,
    corpus: &[ItemRecord],
    label_field: LabelField,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutput> {
    if corpus.len() != data.len() || corpus.is_empty() {
        return Err(Error::invalid("corpus and prepared data must align and be nonempty"));
    }
    // classes ordered by first occurrence
    let mut classes: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(corpus.len());
    for item in corpus {
        let v = label_field.value(item);
        let idx = match classes.iter().position(|c| c == v) {
            Some(i) => i,
            None => {
                classes.push(v.to_string());
                classes.len() - 1
            }
        };
        labels.push(idx);
    }

    let d = model.config().embed_dim;
    let mut train_set = ParameterSet::new();
    if !cfg.freeze_backbone {
        for p in model.params().iter() {
            train_set.adopt(p.clone())?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = {
        let init = Tensor::from_fn(d, classes.len(), |_, _| rng.gen_range(-0.05..0.05));
        Head {
            w: train_set.create("finetune_head.w", init)?,
            b: train_set.create("finetune_head.b", Tensor::zeros(1, classes.len()))?,
        }
    };
    let mut opt =
        AdamW::with_hyperparams(&train_set, cfg.lr, 0.9, 0.999, 1e-8, 0.01);

    let mut g = Graph::new();
    for step in 0..cfg.steps {
        let batch = sample_batch(&mut rng, data.len(), cfg.batch_size.min(data.len()));
        g.clear();
        let mut logit_parts = Vec::with_capacity(batch.len());
        let mut target_parts = Vec::with_capacity(batch.len());
        for &i in &batch {
            let img = model.encode_image(&mut g, &data.grids[i])?;
            let fused = model.forward_fusion(&mut g, &data.inputs[i].tokens, img)?;
            let cls = g.select_rows(fused, &[0])?;
            logit_parts.push(head.apply(&mut g, cls)?);
            target_parts.push(labels[i]);
        }
        let logits = g.concat_rows(&logit_parts)?;
        let loss = g.cross_entropy_rows(logits, &target_parts)?;
        if !g.scalar_value(loss).is_finite() {
            return Err(Error::NonFinite(format!("finetune loss at step {}", step + 1)));
        }
        g.backward(loss)?;
        let grads: Vec<Option<Tensor>> =
            train_set.iter().map(|p| g.param_grad(p)).collect();
        adamw_step(&train_set, &grads, &mut opt)?;
    }

    // training-set predictions
    let mut predictions = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        g.clear();
        let img = model.encode_image(&mut g, &data.grids[i])?;
        let fused = model.forward_fusion(&mut g, &data.inputs[i].tokens, img)?;
        let cls = g.select_rows(fused, &[0])?;
        let logits = head.apply(&mut g, cls)?;
        let row = g.data(logits);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("nonempty class set");
        predictions.push(argmax);
    }
    let (accuracy, macro_f1) = classification_metrics(&predictions, &labels, classes.len())?;
    let head_w = head.w.value().clone();
    let head_b = head.b.value().clone();
    Ok(FinetuneOutput {
        classes,
        labels,
        predictions,
        accuracy,
        macro_f1,
        head_w,
        head_b,
    })
}

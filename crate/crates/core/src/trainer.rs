//! Paired-block datasets, the AdamW training loop with validation-based
//! early stopping, and resumable checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward_train, ModelConfig, ModelState};
use crate::nn::{adamw_step, read_archive, write_archive, AdamW, LambdaSchedule, ParamStore};
use crate::octree::Octree;
use crate::pcio::{pair_blocks, Frame, Point3, PointCloud};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub weight_decay: f64,
    /// Blocks whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Tiling edge (m) the training blocks were cut with; inference must reuse it.
    pub block_edge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            initial_lr: 5e-4,
            weight_decay: 0.05,
            batch_size: 1,
            patience: 50,
            val_fraction: 0.1,
            seed: 0,
            block_edge: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.patience == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs, patience and batch size must be >= 1".into()));
        }
        if !(self.block_edge > 0.0 && self.block_edge.is_finite()) {
            return Err(Error::InvalidArgument(format!("block edge must be > 0, got {}", self.block_edge)));
        }
        if !(self.initial_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("learning rate and weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// One LR/HR block pair, normalized in its shared cell frame.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Position of the pair in lattice order.
    pub id: usize,
    pub origin: Point3,
    pub lr: Octree,
    pub hr: Octree,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Deterministic shuffled split of `0..n`; the validation side gets
/// `round(n * fraction)` items, at least one, leaving at least one to train.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Dataset(format!("need at least 2 block pairs, got {n}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    Ok((idx, val))
}

pub fn make_dataset(
    lr: &PointCloud,
    hr: &PointCloud,
    edge: f64,
    depth: u8,
    val_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let paired = pair_blocks(lr, hr, edge)?;
    let samples = paired
        .pairs
        .iter()
        .enumerate()
        .map(|(id, (l, h))| {
            let frame = Frame::of_cell(l);
            let ln = frame.normalize(&l.points.points)?;
            let hn = frame.normalize(&h.points.points)?;
            Ok(Sample {
                id,
                origin: l.origin,
                lr: Octree::build(&ln.points, depth)?,
                hr: Octree::build(&hn.points, depth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (tr, va) = split_indices(samples.len(), val_fraction, seed)?;
    Ok(Dataset {
        train: tr.iter().map(|&i| samples[i].clone()).collect(),
        val: va.iter().map(|&i| samples[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Effective learning rate of the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Epoch with the smallest validation loss (first on ties).
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<&EpochRecord> = None;
        for r in &self.records {
            if best.is_none_or(|b| r.val_loss < b.val_loss) {
                best = Some(r);
            }
        }
        best.map(|r| r.epoch)
    }

    /// Deterministic part of the history: no wall-clock column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# forestsr history v1\nepoch,train_loss,val_loss,lr\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("# forestsr timing v1\nepoch,seconds\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.3}\n", r.epoch, r.seconds));
        }
        s
    }
}

/// Full training state; everything needed to continue bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub current: ModelState<f32>,
    pub best: ParamStore<f32>,
    pub best_val: f64,
    pub history: TrainHistory,
    pub next_epoch: usize,
    pub since_improvement: usize,
    pub finished: bool,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let current = ModelState::new(model, config.seed)?;
        Ok(Trainer {
            best: current.params.clone(),
            current,
            config,
            best_val: f64::INFINITY,
            history: TrainHistory::default(),
            next_epoch: 0,
            since_improvement: 0,
            finished: false,
        })
    }

    pub fn best_model(&self) -> ModelState<f32> {
        ModelState {
            config: self.current.config.clone(),
            params: self.best.clone(),
        }
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        self.config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    /// Mean loss over `samples` without touching gradients.
    pub fn evaluate(state: &ModelState<f32>, samples: &[Sample], epoch: usize) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let step = forward_train(state, &s.lr, &s.hr)?;
            if !step.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, block: s.id });
            }
            total += step.breakdown.total;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Dataset("training and validation sets must be non-empty".into()));
        }
        let started = Instant::now();
        let epoch = self.next_epoch;
        let schedule = LambdaSchedule::for_epochs(self.config.epochs);
        let lr = self.config.initial_lr * schedule.multiplier(epoch);
        let opt = AdamW {
            weight_decay: self.config.weight_decay,
            ..AdamW::default()
        };
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.epoch_seed(epoch)));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            self.current.params.zero_grad();
            for &i in chunk {
                let s = &data.train[i];
                let step = forward_train(&self.current, &s.lr, &s.hr)?;
                if !step.breakdown.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, block: s.id });
                }
                loss_sum += step.breakdown.total;
                step.tape.backward(step.loss, &mut self.current.params)?;
            }
            self.current.params.scale_grad(1.0 / chunk.len() as f32);
            adamw_step(&mut self.current.params, lr, &opt);
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let val_loss = Self::evaluate(&self.current, &data.val, epoch)?;

        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best = self.current.params.clone();
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.next_epoch += 1;
        if self.since_improvement >= self.config.patience || self.next_epoch >= self.config.epochs {
            self.finished = true;
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.history.records.push(rec);
        Ok(rec)
    }

    /// Runs until early stopping, the epoch budget, or `max_epochs` more epochs.
    pub fn run(
        &mut self,
        data: &Dataset,
        max_epochs: Option<usize>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        let mut n = 0;
        while !self.finished && max_epochs.is_none_or(|m| n < m) {
            let rec = self.run_epoch(data)?;
            on_epoch(&rec);
            n += 1;
        }
        Ok(())
    }
}

/// Trains to completion and returns the best-validation model.
pub fn train(data: &Dataset, model: ModelConfig, config: TrainConfig) -> Result<(ModelState<f32>, TrainHistory)> {
    let mut t = Trainer::new(model, config)?;
    t.run(data, None, |_| {})?;
    Ok((t.best_model(), t.history))
}

// ---------------------------------------------------------------------------
// checkpoint container: magic, version, header length, key=value header,
// then parameter archives for best values, current values and both moments.

fn header(t: &Trainer) -> String {
    let c = &t.config;
    let mut s = t.current.config.to_kv();
    s.push_str(&format!("train.epochs={}\n", c.epochs));
    s.push_str(&format!("train.initial_lr={}\n", c.initial_lr));
    s.push_str(&format!("train.weight_decay={}\n", c.weight_decay));
    s.push_str(&format!("train.batch_size={}\n", c.batch_size));
    s.push_str(&format!("train.patience={}\n", c.patience));
    s.push_str(&format!("train.val_fraction={}\n", c.val_fraction));
    s.push_str(&format!("train.seed={}\n", c.seed));
    s.push_str(&format!("train.block_edge={}\n", c.block_edge));
    s.push_str(&format!("state.next_epoch={}\n", t.next_epoch));
    s.push_str(&format!("state.since_improvement={}\n", t.since_improvement));
    s.push_str(&format!("state.best_val={}\n", t.best_val));
    s.push_str(&format!("state.finished={}\n", t.finished));
    let step = t.current.params.iter().next().map_or(0, |p| p.step);
    s.push_str(&format!("state.adam_step={step}\n"));
    for r in &t.history.records {
        s.push_str(&format!(
            "history={},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        ));
    }
    s
}

fn moment_records(p: &ParamStore<f32>, second: bool) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    p.iter()
        .map(|p| (p.name.clone(), p.shape.clone(), if second { p.v.clone() } else { p.m.clone() }))
        .collect()
}

pub fn write_checkpoint(t: &Trainer, w: &mut impl Write) -> std::io::Result<()> {
    let h = header(t);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(h.len() as u32).to_le_bytes())?;
    w.write_all(h.as_bytes())?;
    let best = ModelState {
        config: t.current.config.clone(),
        params: t.best.clone(),
    };
    write_archive(w, &best.params.records())?;
    write_archive(w, &t.current.params.records())?;
    write_archive(w, &moment_records(&t.current.params, false))?;
    write_archive(w, &moment_records(&t.current.params, true))?;
    Ok(())
}

fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::CorruptArchive(format!("bad checkpoint value {k}={v}")))
}

fn load_moments(p: &mut ParamStore<f32>, recs: &[(String, Vec<usize>, Vec<f32>)], second: bool) -> Result<()> {
    for (name, shape, vals) in recs {
        let id = p
            .id(name)
            .ok_or_else(|| Error::CorruptArchive(format!("unknown parameter {name}")))?;
        let q = p.get_mut(id);
        if &q.shape != shape {
            return Err(Error::CorruptArchive(format!("moment shape mismatch for {name}")));
        }
        if second {
            q.v = vals.clone();
        } else {
            q.m = vals.clone();
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Trainer> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CorruptArchive("truncated checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptArchive("not a checkpoint file".into()));
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::CorruptArchive("truncated checkpoint".into()))?;
    let version = u32::from_le_bytes(b);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    r.read_exact(&mut b)
        .map_err(|_| Error::CorruptArchive("truncated checkpoint".into()))?;
    let len = u32::from_le_bytes(b) as usize;
    if len > 1 << 28 {
        return Err(Error::CorruptArchive("implausible header length".into()));
    }
    let mut hb = vec![0u8; len];
    r.read_exact(&mut hb)
        .map_err(|_| Error::CorruptArchive("truncated checkpoint header".into()))?;
    let text = String::from_utf8(hb).map_err(|_| Error::CorruptArchive("header is not utf-8".into()))?;

    let model = ModelConfig::from_kv(&text)?;
    let mut config = TrainConfig::default();
    let mut t_state = (0usize, 0usize, f64::INFINITY, false, 0u64);
    let mut history = TrainHistory::default();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        match k {
            "train.epochs" => config.epochs = parse(k, v)?,
            "train.initial_lr" => config.initial_lr = parse(k, v)?,
            "train.weight_decay" => config.weight_decay = parse(k, v)?,
            "train.batch_size" => config.batch_size = parse(k, v)?,
            "train.patience" => config.patience = parse(k, v)?,
            "train.val_fraction" => config.val_fraction = parse(k, v)?,
            "train.seed" => config.seed = parse(k, v)?,
            "train.block_edge" => config.block_edge = parse(k, v)?,
            "state.next_epoch" => t_state.0 = parse(k, v)?,
            "state.since_improvement" => t_state.1 = parse(k, v)?,
            "state.best_val" => t_state.2 = parse(k, v)?,
            "state.finished" => t_state.3 = parse(k, v)?,
            "state.adam_step" => t_state.4 = parse(k, v)?,
            "history" => {
                let f: Vec<&str> = v.split(',').collect();
                if f.len() != 5 {
                    return Err(Error::CorruptArchive(format!("bad history line {v}")));
                }
                history.records.push(EpochRecord {
                    epoch: parse(k, f[0])?,
                    train_loss: parse(k, f[1])?,
                    val_loss: parse(k, f[2])?,
                    lr: parse(k, f[3])?,
                    seconds: parse(k, f[4])?,
                });
            }
            _ => {}
        }
    }

    let mut current = ModelState::<f32>::new(model, 0)?;
    let mut best = current.params.clone();
    let n = current.params.len();
    let archives = (0..4).map(|_| read_archive(r)).collect::<Result<Vec<_>>>()?;
    if archives.iter().any(|a| a.len() != n) {
        return Err(Error::CorruptArchive("parameter count does not match the model config".into()));
    }
    best.load_values(&archives[0])?;
    current.params.load_values(&archives[1])?;
    load_moments(&mut current.params, &archives[2], false)?;
    load_moments(&mut current.params, &archives[3], true)?;
    for p in current.params.iter_mut() {
        p.step = t_state.4;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::CorruptArchive(e.to_string()))? != 0 {
        return Err(Error::CorruptArchive("trailing bytes after checkpoint".into()));
    }
    Ok(Trainer {
        config,
        current,
        best,
        best_val: t_state.2,
        history,
        next_epoch: t_state.0,
        since_improvement: t_state.1,
        finished: t_state.3,
    })
}

pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(t, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}

/// Best-validation model and history stored in a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState<f32>, TrainHistory)> {
    let t = load_trainer(path)?;
    Ok((t.best_model(), t.history))
}

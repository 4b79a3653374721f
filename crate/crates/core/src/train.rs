//! Training loop: AdamW with step decay, gradient clipping, CSV logging and
//! per-epoch checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::Sample;
use crate::detection::GroundTruth;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{flip_gts, preprocess, Detector};
use crate::params::{round_f32, ParamStore};
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam. Moments are kept at f32 precision so a
/// checkpoint captures the optimizer exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update from the gradients held in `store`. Only parameters marked
    /// for decay are decayed.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let decay = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[j] = round_f32(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g);
                v[j] = round_f32(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g);
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                *w = round_f32(*w * decay - lr * update);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub lr: f64,
    pub ap50: Option<f64>,
}

pub const CSV_HEADER: &str = "epoch,mean_loss,cls_loss,reg_loss,lr,ap50";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let ap = self.ap50.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.mean_loss, self.cls_loss, self.reg_loss, self.lr, ap
        )
    }
}

/// Model, optimizer and progress counters.
#[derive(Clone)]
pub struct TrainState {
    pub detector: Detector,
    pub opt: AdamW,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let detector = Detector::new(cfg)?;
        let opt = AdamW::new(&detector.store);
        Ok(Self {
            detector,
            opt,
            epoch: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let store = &self.detector.store;
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (prefix, moments) in [("adam.m", &self.opt.m), ("adam.v", &self.opt.v)] {
            for (p, t) in store.iter().zip(moments) {
                tensors.push((format!("{prefix}/{}", p.name), t.clone()));
            }
        }
        Checkpoint {
            config: self.detector.cfg.clone(),
            epoch: self.epoch as u64,
            step: self.opt.step,
            tensors,
        }
    }

    /// Rebuilds the model and optimizer; every parameter must be present
    /// with its configured shape. Missing optimizer moments start at zero.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut detector = Detector::new(ckpt.config.clone())?;
        let mut opt = AdamW::new(&detector.store);
        opt.step = ckpt.step;
        let known: usize = detector.store.len();
        let mut used = 0;
        for (i, p) in detector.store.iter_mut().enumerate() {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::MissingParam(p.name.clone()))?;
            check_shape(&p.name, p.value.shape(), t)?;
            p.value = t.clone();
            used += 1;
            for (prefix, moments) in [("adam.m", &mut opt.m), ("adam.v", &mut opt.v)] {
                if let Some(t) = ckpt.get(&format!("{prefix}/{}", p.name)) {
                    check_shape(&p.name, p.value.shape(), t)?;
                    moments[i] = t.clone();
                    used += 1;
                }
            }
        }
        if used != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but the configured model uses {used} (of {known} parameters)",
                ckpt.tensors.len()
            )));
        }
        Ok(Self {
            detector,
            opt,
            epoch: ckpt.epoch as usize,
        })
    }
}

fn check_shape(name: &str, expected: &[usize], t: &Tensor) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ParamShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `train_log.csv` and checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    /// Train up to this epoch instead of `train.epochs`.
    pub until_epoch: Option<usize>,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    /// Per-step total losses.
    pub step_losses: Vec<f64>,
    /// Parameters whose gradient was zero at every step.
    pub dead_params: Vec<String>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.dfft";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.dfft")
}

/// Fresh training run.
pub fn train(cfg: ModelConfig, data: &[Sample], opts: &TrainOptions) -> Result<(TrainState, TrainReport)> {
    let mut state = TrainState::new(cfg)?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(LOG_FILE), format!("{CSV_HEADER}\n"))?;
    }
    let report = train_from(&mut state, data, opts)?;
    Ok((state, report))
}

/// Continues training `state` from its current epoch. The batch order of an
/// epoch depends only on the seed and the epoch number, so a resumed run
/// repeats an uninterrupted one exactly.
pub fn train_from(state: &mut TrainState, data: &[Sample], opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = state.detector.cfg.clone();
    let tc = &cfg.train;
    for s in data {
        if s.height() != cfg.image_size || s.width() != cfg.image_size {
            return Err(Error::Data(format!(
                "sample {} is {}x{}, config expects {}",
                s.id,
                s.height(),
                s.width(),
                cfg.image_size
            )));
        }
        if let Some(t) = s.gts.iter().find(|t| t.class >= cfg.num_classes) {
            return Err(Error::Data(format!("sample {}: class {} >= {}", s.id, t.class, cfg.num_classes)));
        }
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        if !dir.join(LOG_FILE).exists() {
            std::fs::write(dir.join(LOG_FILE), format!("{CSV_HEADER}\n"))?;
        }
    }
    let last_epoch = opts.until_epoch.unwrap_or(tc.epochs);
    let mut seen = vec![false; state.detector.store.len()];
    let mut logs = Vec::new();
    let mut step_losses = Vec::new();

    'epochs: while state.epoch < last_epoch {
        let epoch = state.epoch + 1;
        let lr = tc.lr_at_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut sum_cls, mut sum_reg, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            if opts.max_steps.is_some_and(|m| state.opt.step >= m) {
                break 'epochs;
            }
            let flips: Vec<bool> = chunk.iter().map(|_| tc.hflip && rng.random_bool(0.5)).collect();
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &data[i].image).collect();
            let gts: Vec<Vec<GroundTruth>> = chunk
                .iter()
                .zip(&flips)
                .map(|(&i, &f)| {
                    if f {
                        flip_gts(&data[i].gts, cfg.image_size as f64)
                    } else {
                        data[i].gts.clone()
                    }
                })
                .collect();
            let batch = preprocess(&images, &cfg.preprocess, &flips)?;
            let (total, cls, reg, grads) = {
                let det = &state.detector;
                let mut g = Graph::new(&det.store);
                let terms = det.loss(&mut g, batch, &gts)?;
                let vals = (
                    g.value(terms.total).item(),
                    g.value(terms.cls).item(),
                    g.value(terms.reg).item(),
                );
                (vals.0, vals.1, vals.2, g.backward(terms.total))
            };
            let store = &mut state.detector.store;
            store.zero_grad();
            grads.accumulate_into(store);
            let grad_ok = store.iter().all(|p| p.grad.all_finite());
            if !total.is_finite() || !grad_ok {
                let detail = format!("loss {total}, gradients finite: {grad_ok}");
                if let Some(dir) = &opts.out_dir {
                    state.to_checkpoint().save(dir.join("last_good.dfft"))?;
                }
                return Err(Error::Diverged {
                    epoch,
                    step: state.opt.step as usize + 1,
                    detail,
                });
            }
            for (i, p) in store.iter().enumerate() {
                seen[i] |= p.grad.data().iter().any(|&g| g != 0.0);
            }
            clip_grad_norm(store, tc.grad_clip);
            state.opt.update(store, lr, tc);
            sum += total;
            sum_cls += cls;
            sum_reg += reg;
            steps += 1;
            step_losses.push(total);
        }
        state.epoch = epoch;
        let n = steps.max(1) as f64;
        let ap50 = if tc.eval_every > 0 && epoch % tc.eval_every == 0 {
            Some(evaluate(&state.detector, data)?.ap50)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            mean_loss: sum / n,
            cls_loss: sum_cls / n,
            reg_loss: sum_reg / n,
            lr,
            ap50,
        };
        if !opts.quiet {
            log::info!(
                "epoch {epoch}: loss {:.5} (cls {:.5}, reg {:.5}) lr {lr:e}{}",
                log.mean_loss,
                log.cls_loss,
                log.reg_loss,
                ap50.map(|a| format!(" ap50 {a:.4}")).unwrap_or_default()
            );
        }
        if let Some(dir) = &opts.out_dir {
            append_log(dir, &log)?;
            let ckpt = state.to_checkpoint();
            ckpt.save(dir.join(epoch_checkpoint_name(epoch)))?;
            ckpt.save(dir.join(LAST_CHECKPOINT))?;
        }
        logs.push(log);
    }
    let dead_params = state
        .detector
        .store
        .iter()
        .zip(&seen)
        .filter(|(_, &s)| !s)
        .map(|(p, _)| p.name.clone())
        .collect();
    Ok(TrainReport {
        logs,
        step_losses,
        dead_params,
    })
}

fn append_log(dir: &Path, log: &EpochLog) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(dir.join(LOG_FILE))?;
    writeln!(f, "{}", log.csv_row())?;
    Ok(())
}

/// Parses a training log written by [`train`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Data(format!("{}: missing CSV header", path.as_ref().display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Data(format!("log line {}: malformed row {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(EpochLog {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                mean_loss: num(f[1])?,
                cls_loss: num(f[2])?,
                reg_loss: num(f[3])?,
                lr: num(f[4])?,
                ap50: if f[5].trim().is_empty() { None } else { Some(num(f[5])?) },
            })
        })
        .collect()
}

/// Summary line for each epoch log, for console output.
pub fn format_logs(logs: &[EpochLog]) -> String {
    let mut s = String::new();
    for l in logs {
        let _ = writeln!(s, "{}", l.csv_row());
    }
    s
}

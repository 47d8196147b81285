//! Instance-level pretraining: the online branch predicts the target
//! branch's projection of another view of the same image.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use landmark_tensor::optim::{Sgd, WarmupCosine};
use landmark_tensor::{Backward, BackwardCtx, Scalar, Session, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{derive_seed, make_two_views, AugmentationConfig, ImageSample};
use crate::encoder::{Branch, EncoderState};
use crate::image::{images_to_batch, Image};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub symmetric_loss: bool,
    /// Raw squared distance instead of the normalized form.
    pub unnormalized: bool,
    /// Save an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            base_lr: 3e-2,
            warmup_epochs: 2,
            momentum: 0.9,
            weight_decay: 1e-4,
            symmetric_loss: true,
            unnormalized: false,
            checkpoint_every: 0,
            seed: 0,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage1 epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        self.augmentation.validate()
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> WarmupCosine {
        WarmupCosine {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.epochs * steps_per_epoch,
        }
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `||p/|p| - z/|z|||^2 = 2 - 2 cos(p, z)`.
pub fn byol_loss<T: Scalar>(p: &[T], z: &[T]) -> Result<T> {
    if p.len() != z.len() {
        return Err(Error::Invalid(format!("embedding sizes {} and {} differ", p.len(), z.len())));
    }
    let (np, nz) = (norm(p), norm(z));
    if np == T::zero() || nz == T::zero() {
        return Err(Error::Degenerate("zero-norm embedding in instance loss".into()));
    }
    let cos = p.iter().zip(z).map(|(&a, &b)| a * b).sum::<T>() / (np * nz);
    Ok(T::of(2.0) - T::of(2.0) * cos)
}

struct ByolRule<T> {
    normalized: bool,
    _p: std::marker::PhantomData<T>,
}

/// Column `i` of a `[D, N]` tensor.
fn column<T: Scalar>(x: &Tensor<T>, i: usize) -> Vec<T> {
    let (d, n) = (x.dim(0), x.dim(1));
    (0..d).map(|k| x.data()[k * n + i]).collect()
}

impl<T: Scalar> Backward<T> for ByolRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (p, z) = (ctx.inputs[0], ctx.inputs[1]);
        let (d, n) = (p.dim(0), p.dim(1));
        let scale = ctx.grad.item() / T::of(n as f64);
        let mut gp = vec![T::zero(); d * n];
        let mut gz = vec![T::zero(); d * n];
        let two = T::of(2.0);
        for i in 0..n {
            let (pc, zc) = (column(p, i), column(z, i));
            if self.normalized {
                let (np, nz) = (norm(&pc), norm(&zc));
                let cos = pc.iter().zip(&zc).map(|(&a, &b)| a * b).sum::<T>() / (np * nz);
                for k in 0..d {
                    let (ph, zh) = (pc[k] / np, zc[k] / nz);
                    gp[k * n + i] = -two * scale / np * (zh - cos * ph);
                    gz[k * n + i] = -two * scale / nz * (ph - cos * zh);
                }
            } else {
                for k in 0..d {
                    let diff = two * scale * (pc[k] - zc[k]);
                    gp[k * n + i] = diff;
                    gz[k * n + i] = -diff;
                }
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::from_vec(&[d, n], gp).expect("shape")),
            ctx.needs[1].then(|| Tensor::from_vec(&[d, n], gz).expect("shape")),
        ]
    }
}

/// Batch-mean instance loss between prediction and target columns of two
/// `[D, N]` tensors.
pub fn byol_loss_var<T: Scalar>(tape: &mut Tape<T>, p: Var, z: Var, normalized: bool) -> Result<Var> {
    let (pt, zt) = (tape.value(p), tape.value(z));
    if pt.shape() != zt.shape() || pt.rank() != 2 {
        return Err(Error::Invalid(format!("loss inputs {:?} and {:?} must be equal [D, N]", pt.shape(), zt.shape())));
    }
    let n = pt.dim(1);
    let mut total = T::zero();
    for i in 0..n {
        let (pc, zc) = (column(pt, i), column(zt, i));
        total += if normalized {
            byol_loss(&pc, &zc)?
        } else {
            pc.iter().zip(&zc).map(|(&a, &b)| (a - b) * (a - b)).sum()
        };
    }
    let value = Tensor::scalar(total / T::of(n as f64));
    Ok(tape.apply(&[p, z], value, ByolRule { normalized, _p: std::marker::PhantomData }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Stage1Report {
    pub steps: Vec<StepLog>,
    pub epoch_means: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_hash: Option<String>,
}

/// Appends `step,epoch,lr,loss` rows, flushed once per epoch.
pub(crate) struct MetricsLog {
    file: Option<fs::File>,
    path: PathBuf,
    pending: String,
}

impl MetricsLog {
    pub(crate) fn create(dir: Option<&Path>, header: &str) -> Result<Self> {
        let Some(dir) = dir else { return Ok(Self { file: None, path: PathBuf::new(), pending: String::new() }) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{header}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { file: Some(file), path, pending: String::new() })
    }

    pub(crate) fn row(&mut self, line: String) {
        if self.file.is_some() {
            self.pending.push_str(&line);
            self.pending.push('\n');
        }
    }

    pub(crate) fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.write_all(self.pending.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
            f.flush().map_err(|e| Error::io(&self.path, e))?;
            self.pending.clear();
        }
        Ok(())
    }
}

fn views_for_batch(
    data: &[ImageSample],
    batch: &[usize],
    cfg: &Stage1Config,
    epoch: usize,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let mut q = Vec::with_capacity(batch.len());
    let mut k = Vec::with_capacity(batch.len());
    for &i in batch {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + epoch as u64, i as u64));
        let pair = make_two_views(&data[i], &cfg.augmentation, &mut rng)?;
        q.push(pair.query_view.image);
        k.push(pair.key_view.image);
    }
    Ok((q, k))
}

/// Train `state` in place. Resumes from `state.step` when it is nonzero.
pub fn train_stage1(
    data: &[ImageSample],
    state: &mut EncoderState<f32>,
    cfg: &Stage1Config,
    out_dir: Option<&Path>,
) -> Result<Stage1Report> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("stage 1 needs at least one image".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = cfg.schedule(steps_per_epoch);
    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut log = MetricsLog::create(out_dir, "step,epoch,lr,loss")?;
    let mut report = Stage1Report::default();
    let start_epoch = state.step as usize / steps_per_epoch;
    let normalized = !cfg.unnormalized;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let step = state.step as usize;
            let lr = schedule.lr(step);
            let (q, k) = views_for_batch(data, batch, cfg, epoch)?;
            let qr: Vec<&Image> = q.iter().collect();
            let kr: Vec<&Image> = k.iter().collect();
            let xq = images_to_batch::<f32>(&qr, &state.config.normalization)?;
            let xk = images_to_batch::<f32>(&kr, &state.config.normalization)?;

            let mut ts = Session::new(true);
            ts.freeze(&state.target);
            let vk = ts.input(xk.clone());
            let zk = state.embed(&mut ts, Branch::Target, vk, false)?;
            let zk = ts.value(zk).clone();
            let zq = if cfg.symmetric_loss {
                let vq = ts.input(xq.clone());
                let zq = state.embed(&mut ts, Branch::Target, vq, false)?;
                Some(ts.value(zq).clone())
            } else {
                None
            };

            let mut s = Session::new(true);
            let vq = s.input(xq);
            let pq = state.embed(&mut s, Branch::Online, vq, true)?;
            let tk = s.input(zk);
            let mut loss = byol_loss_var(&mut s.tape, pq, tk, normalized)?;
            if let Some(zq) = zq {
                let vk = s.input(xk);
                let pk = state.embed(&mut s, Branch::Online, vk, true)?;
                let tq = s.input(zq);
                let l2 = byol_loss_var(&mut s.tape, pk, tq, normalized)?;
                loss = s.tape.add(loss, l2)?;
            }
            let value = s.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { what: "stage-1 loss".into(), location: format!("step {step} (lr {lr})") });
            }
            let grads = s.backward(loss)?;
            let pg = s.param_grads(&state.online, &grads);
            if !pg.all_finite() {
                return Err(Error::NonFinite { what: "stage-1 gradient".into(), location: format!("step {step} (lr {lr})") });
            }
            sgd.step(&mut state.online, &pg, lr as f32)?;
            state.online.apply_bn_updates(s.bn_updates());
            state.target.apply_bn_updates(ts.bn_updates());
            state.momentum = state.momentum_at(step, total_steps);
            state.ema_update();
            state.step += 1;

            log.row(format!("{step},{epoch},{lr},{value}"));
            report.steps.push(StepLog { step: step as u64, epoch, lr, loss: value });
            epoch_loss += value;
            epoch_steps += 1;
        }
        log.flush()?;
        report.epoch_means.push(epoch_loss / epoch_steps as f64);
        log::info!("stage1 epoch {epoch}: mean loss {:.4}", epoch_loss / epoch_steps as f64);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                state.save_checkpoint(&dir.join(format!("encoder_epoch{:03}.ckpt", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("encoder.ckpt");
        report.checkpoint_hash = Some(state.save_checkpoint(&path)?);
        report.checkpoint = Some(path);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert!(byol_loss(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert!((byol_loss(&[1.0f64, 2.0], &[-1.0, -2.0]).unwrap() - 4.0).abs() < 1e-12);
        let s = 1.0 / 2f64.sqrt();
        let expected = 2.0 - 2.0 * s;
        assert!((byol_loss(&[1.0f64, 0.0], &[s, s]).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(byol_loss(&[0.0f64, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn warmup_must_be_shorter_than_training() {
        let cfg = Stage1Config { epochs: 2, warmup_epochs: 2, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schedule_starts_at_fraction_of_base() {
        let cfg = Stage1Config::default();
        let s = cfg.schedule(7);
        assert!((s.lr(0) - 3e-2 / 14.0).abs() < 1e-15);
        assert!(s.lr(cfg.epochs * 7) < 1e-12);
    }
}

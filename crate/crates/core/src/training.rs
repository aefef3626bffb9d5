//! Losses and the two-stage optimization loop.
//!
//! Stage 1 fits the encoder and decoder to per-frame velocity fields. Stage 2
//! encodes the first frame of each window, rolls the full model forward and
//! backpropagates the displacement and reconstruction losses through the
//! whole unroll.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::checkpoint::TrainState;
use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{accumulate, clip_grad_norm, cosine_lr, Adam};
use crate::trajectory::{vecs_to_mat, MassPointCloud, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub clip_norm: f64,
    /// Weight on the displacement loss.
    pub c1: f64,
    /// Weight on the reconstruction loss.
    pub c2: f64,
    /// Steps per window; a window spans `window + 1` frames.
    pub window: usize,
    /// Offset between window starts; 0 means non-overlapping windows.
    pub stride: usize,
    pub seed: u64,
    pub non_equivariant_attr: bool,
    pub static_adjacency: bool,
    /// Frames drawn per window in stage 1; 0 uses every frame.
    pub stage1_frames_per_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            schedule: Schedule::Cosine,
            clip_norm: 1.0,
            c1: 1.0,
            c2: 1.0,
            window: 20,
            stride: 0,
            seed: 0,
            non_equivariant_attr: false,
            static_adjacency: false,
            stage1_frames_per_window: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::validation(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) {
            return Err(Error::validation("loss weights c1 and c2 must be non-negative"));
        }
        if self.window < 2 {
            return Err(Error::validation("window must be at least 2 steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::validation("learning_rate and clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn effective_stride(&self) -> usize {
        if self.stride == 0 {
            self.window
        } else {
            self.stride
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(self.learning_rate, epoch, self.epochs),
            Schedule::Constant => self.learning_rate,
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// `steps` steps starting at frame `start` of trajectory `traj`, i.e. frames
/// `start ..= start + steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
    pub steps: usize,
}

impl Window {
    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.start + self.steps
    }
}

pub fn windows(dataset: &[Trajectory], steps: usize, stride: usize) -> Result<Vec<Window>> {
    if dataset.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    let mut out = Vec::new();
    for (i, traj) in dataset.iter().enumerate() {
        if traj.n_frames() <= steps {
            return Err(Error::validation(format!(
                "trajectory {i} has {} frames, too few for a window of {steps} steps",
                traj.n_frames()
            )));
        }
        let mut start = 0;
        while start + steps < traj.n_frames() {
            out.push(Window { traj: i, start, steps });
            start += stride;
        }
    }
    Ok(out)
}

/// Mean over points of the squared error norm between two `N × 2` arrays.
pub fn mean_sq_error(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    (a - b).iter().map(|d| d * d).sum::<f64>() / a.nrows() as f64
}

fn mean_sq_error_var(t: &mut Tape, a: Var, target: &Mat) -> Var {
    let n = target.nrows() as f64;
    let b = t.constant(target.clone());
    let d = t.sub(a, b);
    let d2 = t.mul(d, d);
    let s = t.sum_all(d2);
    t.scale(s, 1.0 / n)
}

/// Mean over frames of the per-frame velocity reconstruction error, with the
/// field for each frame supplied by `field`.
pub fn reconstruction_loss_with(
    traj: &Trajectory,
    mut field: impl FnMut(&MassPointCloud) -> Result<Mat>,
) -> Result<f64> {
    if traj.frames.is_empty() {
        return Err(Error::validation("trajectory has no frames"));
    }
    let mut total = 0.0;
    for f in &traj.frames {
        let v = field(f)?;
        total += mean_sq_error(&v, &vecs_to_mat(&f.velocities));
    }
    Ok(total / traj.n_frames() as f64)
}

/// Reconstruction loss with each frame re-encoded from the data.
pub fn reconstruction_loss(traj: &Trajectory, model: &Model) -> Result<f64> {
    reconstruction_loss_with(traj, |f| {
        let z = model.encode(f)?;
        model.decode(&f.positions_mat(), &z)
    })
}

/// Mean over frames of the per-frame position error.
pub fn displacement_loss(pred: &[Mat], gt: &[Mat]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::validation(
            "displacement loss needs equally long, non-empty sequences",
        ));
    }
    if pred.iter().zip(gt).any(|(a, b)| a.dim() != b.dim()) {
        return Err(Error::validation("displacement loss shapes differ"));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| mean_sq_error(a, b)).sum::<f64>() / pred.len() as f64)
}

/// Stage-1 loss of a single frame on a tape.
pub fn frame_reconstruction_var(t: &mut Tape, model: &Model, frame: &MassPointCloud) -> Result<Var> {
    let z = model.encode_vars(t, frame)?;
    let x = t.constant(frame.positions_mat());
    let v = model.decode_vars(t, x, &z);
    Ok(mean_sq_error_var(t, v, &frame.velocities_mat()))
}

pub struct WindowLoss {
    pub total: Var,
    pub displacement: f64,
    pub reconstruction: f64,
}

/// Stage-2 loss of one window: encode the first frame, roll `steps` steps,
/// compare positions against the later frames and decoded velocities against
/// the ground truth at each step.
pub fn window_loss_var(
    t: &mut Tape,
    model: &Model,
    traj: &Trajectory,
    window: Window,
    c1: f64,
    c2: f64,
) -> Result<WindowLoss> {
    let frames = &traj.frames[window.frames()];
    let first = &frames[0];
    let mut z = model.encode_vars(t, first)?;
    let mut x = t.constant(first.positions_mat());
    let mut dis = Vec::new();
    let mut rec = Vec::new();
    for (k, pair) in frames.windows(2).enumerate() {
        let out = model.step_vars(t, x, &first.object_ids, &z, traj.dt, k)?;
        rec.push(mean_sq_error_var(t, out.velocities, &pair[0].velocities_mat()));
        dis.push(mean_sq_error_var(t, out.positions, &pair[1].positions_mat()));
        x = out.positions;
        z = out.latent;
    }
    let steps = dis.len() as f64;
    let sum = |t: &mut Tape, parts: &[Var]| {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = t.add(acc, p);
        }
        t.scale(acc, 1.0 / steps)
    };
    let l_dis = sum(t, &dis);
    let l_rec = sum(t, &rec);
    let a = t.scale(l_dis, c1);
    let b = t.scale(l_rec, c2);
    let total = t.add(a, b);
    Ok(WindowLoss {
        total,
        displacement: t.scalar(l_dis),
        reconstruction: t.scalar(l_rec),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    #[serde(rename = "L_dis")]
    pub l_dis: f64,
    #[serde(rename = "L_recons")]
    pub l_recons: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = stage;
    key[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn check_loss(value: f64, epoch: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(epoch, format!("{what} became non-finite ({value})")))
    }
}

fn apply_update(state: &mut TrainState, mut grads: Vec<Option<Mat>>, cfg: &TrainConfig, epoch: usize) -> Result<()> {
    let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    check_loss(norm, epoch, "gradient norm")?;
    let lr = cfg.lr(epoch);
    state.optimizer.step(&mut state.model.store, &grads, lr);
    Ok(())
}

/// Names of parameter groups that received no gradient at all.
pub fn groups_without_gradient(model: &Model, grads: &[Option<Mat>]) -> Vec<&'static str> {
    ["encoder.", "decoder.", "processor."]
        .into_iter()
        .filter(|prefix| {
            !model.store.ids().any(|id| {
                model.store.name(id).starts_with(prefix)
                    && grads
                        .get(id.index())
                        .and_then(|g| g.as_ref())
                        .is_some_and(|g| g.iter().any(|&x| x != 0.0))
            })
        })
        .collect()
}

/// Run stage-1 epochs from `state.epoch` up to `cfg.epochs`. `on_epoch` is
/// called after each epoch with the state already advanced.
pub fn train_stage1(
    state: &mut TrainState,
    dataset: &[Trajectory],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let all = windows(dataset, cfg.window, cfg.effective_stride())?;
    state.stage = 1;
    state.train_config_hash = cfg.hash();
    let started = Instant::now();
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, 1, epoch);
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut sum_rec = 0.0;
        let mut n_frames = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut picks = Vec::new();
            for w in batch {
                let mut frames: Vec<usize> = w.frames().collect();
                let k = cfg.stage1_frames_per_window;
                if k > 0 && k < frames.len() {
                    frames.shuffle(&mut rng);
                    frames.truncate(k);
                    frames.sort_unstable();
                }
                picks.extend(frames.into_iter().map(|f| (w.traj, f)));
            }
            let weight = 1.0 / picks.len() as f64;
            let mut grads = Vec::new();
            for &(ti, fi) in &picks {
                let mut t = Tape::new();
                let loss = frame_reconstruction_var(&mut t, &state.model, &dataset[ti].frames[fi])?;
                let value = t.scalar(loss);
                check_loss(value, epoch, "reconstruction loss")?;
                sum_rec += value;
                n_frames += 1;
                accumulate(&mut grads, t.backward(loss).into_param_grads(), weight);
            }
            apply_update(state, grads, cfg, epoch)?;
        }
        state.epoch += 1;
        let l_recons = sum_rec / n_frames as f64;
        let log = EpochLog {
            epoch: state.epoch,
            stage: 1,
            l_dis: 0.0,
            l_recons,
            total: cfg.c2 * l_recons,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log, state)?;
        history.push(log);
    }
    Ok(history)
}

/// Start stage 2 from a finished stage-1 state with a fresh optimizer.
pub fn begin_stage2(stage1: TrainState) -> Result<TrainState> {
    if stage1.stage < 1 {
        return Err(Error::validation("stage 2 needs a stage-1 checkpoint"));
    }
    let optimizer = Adam::new(&stage1.model.store);
    Ok(TrainState {
        model: stage1.model,
        optimizer,
        stage: 2,
        epoch: 0,
        train_config_hash: String::new(),
    })
}

/// Run stage-2 epochs from `state.epoch` up to `cfg.epochs`.
pub fn train_stage2(
    state: &mut TrainState,
    dataset: &[Trajectory],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if state.stage < 1 {
        return Err(Error::validation("stage 2 needs a stage-1 checkpoint"));
    }
    let all = windows(dataset, cfg.window, cfg.effective_stride())?;
    state.stage = 2;
    state.train_config_hash = cfg.hash();
    let started = Instant::now();
    let mut history = Vec::new();
    let mut checked_groups = false;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, 2, epoch);
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let (mut sum_dis, mut sum_rec) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut grads = Vec::new();
            for w in batch {
                let mut t = Tape::new();
                let loss = window_loss_var(&mut t, &state.model, &dataset[w.traj], *w, cfg.c1, cfg.c2)?;
                check_loss(t.scalar(loss.total), epoch, "stage-2 loss")?;
                sum_dis += loss.displacement;
                sum_rec += loss.reconstruction;
                accumulate(&mut grads, t.backward(loss.total).into_param_grads(), weight);
            }
            if !checked_groups {
                let missing = groups_without_gradient(&state.model, &grads);
                if !missing.is_empty() {
                    return Err(Error::numerical(
                        epoch,
                        format!("no gradient reaches {}", missing.join(", ")),
                    ));
                }
                checked_groups = true;
            }
            apply_update(state, grads, cfg, epoch)?;
        }
        state.epoch += 1;
        let n = all.len() as f64;
        let (l_dis, l_recons) = (sum_dis / n, sum_rec / n);
        let log = EpochLog {
            epoch: state.epoch,
            stage: 2,
            l_dis,
            l_recons,
            total: cfg.c1 * l_dis + cfg.c2 * l_recons,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log, state)?;
        history.push(log);
    }
    Ok(history)
}

/// The first `ceil(fraction · n)` trajectories, at least one.
pub fn finetune_subset(dataset: &[Trajectory], fraction: f64) -> Result<&[Trajectory]> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(format!(
            "finetune fraction must be in (0, 1], got {fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    let n = ((fraction * dataset.len() as f64).ceil() as usize).clamp(1, dataset.len());
    Ok(&dataset[..n])
}

/// Append rows to a loss CSV, writing the header when the file is new.
pub fn append_loss_log(path: &std::path::Path, rows: &[EpochLog]) -> Result<()> {
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::validation(format!("writing {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::GroupVariant;
    use crate::model::tests::{small_config, two_blobs};
    use crate::trajectory::Provenance;

    fn tiny_traj(seed: u64, frames: usize) -> Trajectory {
        let f: Vec<MassPointCloud> = (0..frames).map(|k| two_blobs(seed + k as u64, 20, 0.0)).collect();
        Trajectory::new(f, 0.002, Provenance::default()).unwrap()
    }

    #[test]
    fn reconstruction_loss_stubs() {
        let traj = tiny_traj(1, 3);
        let exact = reconstruction_loss_with(&traj, |f| Ok(f.velocities_mat())).unwrap();
        assert_eq!(exact, 0.0);
        let off = reconstruction_loss_with(&traj, |f| Ok(f.velocities_mat() + &ndarray::arr2(&[[0.1, 0.0]]))).unwrap();
        assert!((off - 0.01).abs() < 1e-12);
    }

    #[test]
    fn displacement_loss_offset() {
        let a = vec![Mat::zeros((5, 2)); 3];
        let b: Vec<Mat> = a.iter().map(|m| m + &ndarray::arr2(&[[0.0, 0.2]])).collect();
        assert_eq!(displacement_loss(&a, &a).unwrap(), 0.0);
        assert!((displacement_loss(&a, &b).unwrap() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn windows_cover_trajectory() {
        let d = vec![tiny_traj(1, 7)];
        let w = windows(&d, 3, 3).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 3]);
        assert!(windows(&d, 7, 7).is_err());
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let model = Model::new(&small_config(GroupVariant::Translation)).unwrap();
        let before = model.store.clone();
        let mut state = TrainState::fresh(model);
        let cfg = TrainConfig {
            epochs: 0,
            window: 2,
            ..TrainConfig::default()
        };
        let h = train_stage1(&mut state, &[tiny_traj(2, 3)], &cfg, |_, _| Ok(())).unwrap();
        assert!(h.is_empty());
        for id in before.ids() {
            assert_eq!(before.value(id), state.model.store.value(id));
        }
    }

    #[test]
    fn stage2_requires_stage1() {
        let state = TrainState::fresh(Model::new(&small_config(GroupVariant::Translation)).unwrap());
        assert!(begin_stage2(state).is_err());
    }

    #[test]
    fn self_generated_data_has_zero_displacement() {
        let model = Model::new(&small_config(GroupVariant::Se2)).unwrap();
        let first = two_blobs(3, 30, 0.0);
        let mut frames = vec![first.clone()];
        let mut z = model.encode(&first).unwrap();
        let mut c = first;
        for k in 0..3 {
            let (c2, z2) = model.step(&c, &z, 0.002, k).unwrap();
            frames.push(c2.clone());
            c = c2;
            z = z2;
        }
        let traj = Trajectory::new(frames, 0.002, Provenance::default()).unwrap();
        let mut t = Tape::new();
        let w = Window {
            traj: 0,
            start: 0,
            steps: 3,
        };
        let loss = window_loss_var(&mut t, &model, &traj, w, 1.0, 1.0).unwrap();
        assert_eq!(loss.displacement, 0.0);
        assert!((t.scalar(loss.total) - loss.reconstruction).abs() < 1e-15);
    }

    #[test]
    fn finetune_fraction() {
        let d: Vec<Trajectory> = (0..10).map(|s| tiny_traj(s, 2)).collect();
        assert_eq!(finetune_subset(&d, 0.1).unwrap().len(), 1);
        assert_eq!(finetune_subset(&d, 0.25).unwrap().len(), 3);
        assert!(finetune_subset(&d, 0.0).is_err());
    }
}

//! Rollouts, error reports, the two-pipeline equivariance check and the
//! ablation switches.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GroupElement;
use crate::latent::{AttributeMode, GroupVariant};
use crate::model::{Model, ModelConfig};
use crate::processor::Adjacency;
use crate::training::mean_sq_error;
use crate::trajectory::{write_file, MassPointCloud, Provenance, Trajectory};

/// Horizons reported by default.
pub const DEFAULT_SCHEDULE: [usize; 6] = [1, 5, 10, 15, 20, 25];

/// Positions outside this square abort a rollout.
pub const DOMAIN_GUARD: (f64, f64) = (-1.0, 2.0);

/// Encode `frame0` once and step `n_steps` times.
pub fn rollout(model: &Model, frame0: &MassPointCloud, n_steps: usize, dt: f64) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::validation("a rollout needs at least one step"));
    }
    if !(dt > 0.0) {
        return Err(Error::validation("rollout dt must be positive"));
    }
    let mut z = model.encode(frame0)?;
    let mut cloud = frame0.clone();
    let mut frames = vec![frame0.clone()];
    for k in 0..n_steps {
        let (next, z2) = model.step(&cloud, &z, dt, k)?;
        let escaped = next
            .positions
            .iter()
            .any(|p| p.iter().any(|&c| !(DOMAIN_GUARD.0..=DOMAIN_GUARD.1).contains(&c)));
        if escaped {
            return Err(Error::numerical(k + 1, "rollout diverged outside the domain guard"));
        }
        frames.push(next.clone());
        cloud = next;
        z = z2;
    }
    Trajectory::new(
        frames,
        dt,
        Provenance {
            generator: "rollout".into(),
            config_hash: model.config.hash(),
            seed: model.config.seed,
            content_sha256: String::new(),
        },
    )
}

/// Position error at exactly each step of `schedule`.
pub fn rollout_mse(pred: &Trajectory, gt: &Trajectory, schedule: &[usize]) -> Result<Vec<f64>> {
    if pred.dt != gt.dt {
        return Err(Error::validation("predicted and reference dt differ"));
    }
    if pred.n_points() != gt.n_points() {
        return Err(Error::validation("predicted and reference point counts differ"));
    }
    schedule
        .iter()
        .map(|&s| {
            if s >= pred.n_frames() || s >= gt.n_frames() {
                return Err(Error::validation(format!(
                    "schedule step {s} is beyond the trajectory length ({} predicted, {} reference frames)",
                    pred.n_frames(),
                    gt.n_frames()
                )));
            }
            Ok(mean_sq_error(
                &pred.frames[s].positions_mat(),
                &gt.frames[s].positions_mat(),
            ))
        })
        .collect()
}

pub fn parse_schedule(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let s: usize = part
            .parse()
            .map_err(|_| Error::validation(format!("bad schedule entry `{part}`")))?;
        if s == 0 {
            return Err(Error::validation("schedule steps start at 1"));
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::validation("schedule is empty"));
    }
    if out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("schedule must be strictly ascending"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMse {
    pub sample_id: String,
    pub mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub split: String,
    pub checkpoint_hash: String,
    pub schedule: Vec<usize>,
    pub samples: Vec<SampleMse>,
}

impl RolloutReport {
    /// Mean over samples at each horizon.
    pub fn means(&self) -> Vec<f64> {
        let n = self.samples.len().max(1) as f64;
        (0..self.schedule.len())
            .map(|k| self.samples.iter().map(|s| s.mse[k]).sum::<f64>() / n)
            .collect()
    }

    /// Rows of `split,sample_id,step,mse`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,sample_id,step,mse\n");
        for s in &self.samples {
            for (step, mse) in self.schedule.iter().zip(&s.mse) {
                let _ = writeln!(out, "{},{},{},{:e}", self.split, s.sample_id, step, mse);
            }
        }
        out
    }

    /// Header plus one row per report: `split,step_1,step_5,...`. Each column
    /// is the mean error at exactly that step, not averaged up to it.
    pub fn summary_csv(reports: &[RolloutReport]) -> Result<String> {
        let first = reports
            .first()
            .ok_or_else(|| Error::validation("no reports to summarize"))?;
        if reports.iter().any(|r| r.schedule != first.schedule) {
            return Err(Error::validation("reports use different schedules"));
        }
        let mut out = String::from("split");
        for s in &first.schedule {
            let _ = write!(out, ",step_{s}");
        }
        out.push('\n');
        for r in reports {
            out.push_str(&r.split);
            for m in r.means() {
                let _ = write!(out, ",{m:e}");
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, csv_path: &Path, summary_path: &Path) -> Result<()> {
        write_file(csv_path, self.to_csv().as_bytes())?;
        write_file(summary_path, Self::summary_csv(std::slice::from_ref(self))?.as_bytes())
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Roll out every sample from its first frame and score it. Results are
/// ordered like `samples` whatever the worker count.
pub fn evaluate(
    model: &Model,
    samples: &[(String, Trajectory)],
    split: &str,
    schedule: &[usize],
    checkpoint_hash: &str,
    workers: usize,
) -> Result<RolloutReport> {
    if samples.is_empty() {
        return Err(Error::validation(format!("split `{split}` has no samples")));
    }
    let horizon = *schedule.last().ok_or_else(|| Error::validation("schedule is empty"))?;
    let run = |(id, gt): &(String, Trajectory)| -> Result<SampleMse> {
        if gt.n_frames() <= horizon {
            return Err(Error::validation(format!(
                "sample {id} has {} frames, the schedule needs {}",
                gt.n_frames(),
                horizon + 1
            )));
        }
        let pred = rollout(model, &gt.frames[0], horizon, gt.dt)?;
        Ok(SampleMse {
            sample_id: id.clone(),
            mse: rollout_mse(&pred, gt, schedule)?,
        })
    };
    let rows: Vec<Result<SampleMse>> = pool(workers)?.install(|| samples.par_iter().map(run).collect());
    Ok(RolloutReport {
        split: split.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
        schedule: schedule.to_vec(),
        samples: rows.into_iter().collect::<Result<_>>()?,
    })
}

fn frobenius(frame: &MassPointCloud) -> f64 {
    frame
        .positions
        .iter()
        .map(|p| p[0] * p[0] + p[1] * p[1])
        .sum::<f64>()
        .sqrt()
}

/// `‖a − b‖ / (‖a‖ + ‖b‖ + 1e-12)` over all positions, maximized over frames.
pub fn relative_deviation(a: &Trajectory, b: &Trajectory) -> f64 {
    a.frames
        .iter()
        .zip(&b.frames)
        .map(|(fa, fb)| {
            let diff = fa
                .positions
                .iter()
                .zip(&fb.positions)
                .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                .sum::<f64>()
                .sqrt();
            diff / (frobenius(fa) + frobenius(fb) + 1e-12)
        })
        .fold(0.0, f64::max)
}

/// Run `rollout(g · x)` and `g · rollout(x)` for each `g` and report the
/// maximum relative position deviation per element.
pub fn verify_equivariance(
    model: &Model,
    frame0: &MassPointCloud,
    group_elements: &[GroupElement],
    n_steps: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    for g in group_elements {
        if !model.config.variant.admits(g) {
            return Err(Error::validation(format!(
                "group element with rotation {} is outside the {:?} group of this model",
                g.rotation_angle, model.config.variant
            )));
        }
    }
    let base = rollout(model, frame0, n_steps, dt)?;
    group_elements
        .iter()
        .map(|g| {
            let acted_first = rollout(model, &frame0.transformed(g), n_steps, dt)?;
            Ok(relative_deviation(&acted_first, &base.transformed(g)))
        })
        .collect()
}

/// Random group elements for `variant`: rotations about the domain centre
/// plus small translations, or translations only.
pub fn random_group_elements(variant: GroupVariant, n: usize, rng: &mut ChaCha8Rng) -> Vec<GroupElement> {
    (0..n)
        .map(|_| {
            let t = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
            match variant {
                GroupVariant::Translation => GroupElement::translation(t),
                GroupVariant::Se2 => {
                    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    GroupElement::rotation_about(angle, [0.5, 0.5], t)
                }
            }
        })
        .collect()
}

/// Parse `;`-separated group elements. Each is `identity` or a comma list of
/// `angle=`, `tx=`, `ty=`, `cx=`, `cy=` (rotation about `(cx, cy)`, then
/// translation).
pub fn parse_group_spec(text: &str) -> Result<Vec<GroupElement>> {
    let mut out = Vec::new();
    for item in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "identity" {
            out.push(GroupElement::identity());
            continue;
        }
        let (mut angle, mut tx, mut ty, mut cx, mut cy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for kv in item.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("bad group term `{kv}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad number in `{kv}`")))?;
            match k.trim() {
                "angle" => angle = v,
                "tx" => tx = v,
                "ty" => ty = v,
                "cx" => cx = v,
                "cy" => cy = v,
                other => return Err(Error::validation(format!("unknown group key `{other}`"))),
            }
        }
        out.push(if angle == 0.0 {
            GroupElement::translation([tx, ty])
        } else {
            GroupElement::rotation_about(angle, [cx, cy], [tx, ty])
        });
    }
    if out.is_empty() {
        return Err(Error::validation("group spec is empty"));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NonEquivariantAttr,
    StaticAdjacency,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_equivariant_attr" => Ok(Ablation::NonEquivariantAttr),
            "static_adjacency" => Ok(Ablation::StaticAdjacency),
            other => Err(Error::validation(format!(
                "unknown ablation `{other}` (expected non_equivariant_attr or static_adjacency)"
            ))),
        }
    }
}

/// Return `cfg` with the ablation switch set; `None` leaves it unchanged.
pub fn ablation_configure(cfg: &ModelConfig, which: Option<&str>) -> Result<ModelConfig> {
    let mut out = cfg.clone();
    match which.map(Ablation::from_str).transpose()? {
        None => {}
        Some(Ablation::NonEquivariantAttr) => out.attributes = AttributeMode::NonEquivariant,
        Some(Ablation::StaticAdjacency) => out.adjacency = Adjacency::Static,
    }
    Ok(out)
}

//! Moving-least-squares material point method for 2D elastic bodies, used to
//! generate ground-truth trajectories of objects dropped onto a floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::geometry::{rotate, SpatialHash, Vec2};
use crate::shapes::{sample_shape, ShapeFamily};
use crate::trajectory::{MassPointCloud, Provenance, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Velocity into a wall is removed; tangential and outward motion is free.
    #[default]
    Separating,
    /// Boundary nodes are fully stopped.
    Sticky,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpmConfig {
    /// Grid cells per side of the unit square.
    pub grid_resolution: usize,
    pub substeps: usize,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
    /// Downward acceleration in domain units per second squared.
    pub gravity: f64,
    pub boundary: BoundaryMode,
    /// Thickness of the wall layer in cells.
    pub boundary_cells: usize,
    /// Seconds between recorded frames.
    pub frame_dt: f64,
    /// Largest admissible `c·dt/dx` for the elastic wave speed `c`.
    pub cfl_limit: f64,
}

impl Default for MpmConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 64,
            substeps: 20,
            youngs_modulus: 1e4,
            poisson_ratio: 0.2,
            density: 1.0,
            gravity: 10.0,
            boundary: BoundaryMode::Separating,
            boundary_cells: 3,
            frame_dt: 0.002,
            cfl_limit: 1.0,
        }
    }
}

impl MpmConfig {
    pub fn dx(&self) -> f64 {
        1.0 / self.grid_resolution as f64
    }

    pub fn substep_dt(&self) -> f64 {
        self.frame_dt / self.substeps as f64
    }

    /// Lamé parameters `(mu, lambda)`.
    pub fn lame(&self) -> (f64, f64) {
        let (e, nu) = (self.youngs_modulus, self.poisson_ratio);
        (e / (2.0 * (1.0 + nu)), e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))
    }

    pub fn wave_speed(&self) -> f64 {
        let (mu, lambda) = self.lame();
        ((lambda + 2.0 * mu) / self.density).sqrt()
    }

    /// Lowest (and, mirrored, highest) coordinate a particle may occupy.
    pub fn wall(&self) -> f64 {
        (self.boundary_cells.max(2) - 1) as f64 * self.dx()
    }

    pub fn particle_volume(&self) -> f64 {
        (0.5 * self.dx()).powi(2)
    }

    pub fn particle_mass(&self) -> f64 {
        self.density * self.particle_volume()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_resolution < 16 {
            return Err(Error::validation("grid_resolution must be at least 16"));
        }
        if self.substeps == 0 {
            return Err(Error::validation("substeps must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.poisson_ratio) {
            return Err(Error::validation("poisson_ratio must lie in [0, 0.5)"));
        }
        if !(self.youngs_modulus > 0.0 && self.density > 0.0 && self.frame_dt > 0.0) {
            return Err(Error::validation(
                "youngs_modulus, density and frame_dt must be positive",
            ));
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::validation("gravity must be finite and non-negative"));
        }
        if self.boundary_cells < 2 || 2 * self.boundary_cells >= self.grid_resolution {
            return Err(Error::validation("boundary_cells out of range"));
        }
        let courant = self.wave_speed() * self.substep_dt() / self.dx();
        if courant > self.cfl_limit {
            return Err(Error::validation(format!(
                "substep too large: wave Courant number {courant:.3} exceeds {}; raise substeps",
                self.cfl_limit
            )));
        }
        Ok(())
    }
}

type Mat2 = [f64; 4];

const IDENTITY: Mat2 = [1.0, 0.0, 0.0, 1.0];

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

fn transpose(a: &Mat2) -> Mat2 {
    [a[0], a[2], a[1], a[3]]
}

/// Rotation factor of the polar decomposition `F = R S`.
fn polar_rotation(f: &Mat2) -> Mat2 {
    let x = f[0] + f[3];
    let y = f[2] - f[1];
    let n = (x * x + y * y).sqrt();
    if n < 1e-300 {
        return IDENTITY;
    }
    let (c, s) = (x / n, y / n);
    [c, -s, s, c]
}

/// Particle state of a running simulation.
///
/// Velocities are stored half a substep of gravity ahead of the frame times
/// (leapfrog offset), which makes free fall match `½ g t²` exactly at every
/// substep. [`MpmState::frame_velocities`] removes the offset.
#[derive(Clone, Debug)]
pub struct MpmState {
    pub x: Vec<Vec2>,
    pub v: Vec<Vec2>,
    pub affine: Vec<Mat2>,
    pub deformation: Vec<Mat2>,
    pub object_ids: Vec<u32>,
    pub substeps_taken: usize,
}

impl MpmState {
    pub fn new(positions: Vec<Vec2>, velocities: Vec<Vec2>, object_ids: Vec<u32>, cfg: &MpmConfig) -> Self {
        let h = 0.5 * cfg.gravity * cfg.substep_dt();
        let n = positions.len();
        Self {
            x: positions,
            v: velocities.iter().map(|v| [v[0], v[1] + h]).collect(),
            affine: vec![[0.0; 4]; n],
            deformation: vec![IDENTITY; n],
            object_ids,
            substeps_taken: 0,
        }
    }

    pub fn frame_velocities(&self, cfg: &MpmConfig) -> Vec<Vec2> {
        let h = 0.5 * cfg.gravity * cfg.substep_dt();
        self.v.iter().map(|v| [v[0], v[1] - h]).collect()
    }

    pub fn cloud(&self, cfg: &MpmConfig) -> MassPointCloud {
        MassPointCloud {
            positions: self.x.clone(),
            velocities: self.frame_velocities(cfg),
            object_ids: self.object_ids.clone(),
        }
    }
}

/// Background grid buffers reused across substeps.
pub struct Grid {
    n: usize,
    momentum: Vec<Vec2>,
    mass: Vec<f64>,
}

impl Grid {
    pub fn new(cfg: &MpmConfig) -> Self {
        let n = cfg.grid_resolution;
        Self {
            n,
            momentum: vec![[0.0; 2]; n * n],
            mass: vec![0.0; n * n],
        }
    }
}

fn weights(fx: f64) -> [f64; 3] {
    [
        0.5 * (1.5 - fx).powi(2),
        0.75 - (fx - 1.0).powi(2),
        0.5 * (fx - 0.5).powi(2),
    ]
}

/// Advance one substep: particle-to-grid with APIC affine momentum and
/// fixed-corotated stress, grid update with gravity and walls, grid-to-particle
/// and deformation-gradient update.
pub fn mpm_substep(state: &mut MpmState, grid: &mut Grid, cfg: &MpmConfig) -> Result<()> {
    let n = grid.n;
    let dx = cfg.dx();
    let inv_dx = 1.0 / dx;
    let dt = cfg.substep_dt();
    let vol = cfg.particle_volume();
    let mass = cfg.particle_mass();
    let (mu, lambda) = cfg.lame();
    grid.momentum.fill([0.0; 2]);
    grid.mass.fill(0.0);

    for p in 0..state.x.len() {
        let xp = state.x[p];
        let base = [(xp[0] * inv_dx - 0.5).floor(), (xp[1] * inv_dx - 0.5).floor()];
        let fx = [xp[0] * inv_dx - base[0], xp[1] * inv_dx - base[1]];
        let (wx, wy) = (weights(fx[0]), weights(fx[1]));
        let f = &state.deformation[p];
        let r = polar_rotation(f);
        let j = f[0] * f[3] - f[1] * f[2];
        // Kirchhoff stress: 2 mu (F - R) F^T + lambda (J - 1) J I.
        let fr = [f[0] - r[0], f[1] - r[1], f[2] - r[2], f[3] - r[3]];
        let mut tau = mat_mul(&fr, &transpose(f));
        for t in tau.iter_mut() {
            *t *= 2.0 * mu;
        }
        tau[0] += lambda * (j - 1.0) * j;
        tau[3] += lambda * (j - 1.0) * j;
        let k = -dt * vol * 4.0 * inv_dx * inv_dx;
        let c = &state.affine[p];
        let a = [
            k * tau[0] + mass * c[0],
            k * tau[1] + mass * c[1],
            k * tau[2] + mass * c[2],
            k * tau[3] + mass * c[3],
        ];
        let vp = state.v[p];
        for (i, wxi) in wx.iter().enumerate() {
            for (jj, wyj) in wy.iter().enumerate() {
                let w = wxi * wyj;
                let dpos = [(i as f64 - fx[0]) * dx, (jj as f64 - fx[1]) * dx];
                let gi = base[0] as usize + i;
                let gj = base[1] as usize + jj;
                let idx = gi * n + gj;
                grid.momentum[idx][0] += w * (mass * vp[0] + a[0] * dpos[0] + a[1] * dpos[1]);
                grid.momentum[idx][1] += w * (mass * vp[1] + a[2] * dpos[0] + a[3] * dpos[1]);
                grid.mass[idx] += w * mass;
            }
        }
    }

    let b = cfg.boundary_cells;
    for gi in 0..n {
        for gj in 0..n {
            let idx = gi * n + gj;
            let m = grid.mass[idx];
            if m <= 0.0 {
                continue;
            }
            let mut v = [grid.momentum[idx][0] / m, grid.momentum[idx][1] / m - dt * cfg.gravity];
            let walls = [
                (gi < b, 0, -1.0),
                (gi >= n - b, 0, 1.0),
                (gj < b, 1, -1.0),
                (gj >= n - b, 1, 1.0),
            ];
            for (hit, axis, outward) in walls {
                if !hit {
                    continue;
                }
                match cfg.boundary {
                    BoundaryMode::Separating => {
                        if v[axis] * outward > 0.0 {
                            v[axis] = 0.0;
                        }
                    }
                    BoundaryMode::Sticky => v = [0.0, 0.0],
                }
            }
            grid.momentum[idx] = v;
        }
    }

    let lo = cfg.wall();
    let hi = 1.0 - lo;
    for p in 0..state.x.len() {
        let xp = state.x[p];
        let base = [(xp[0] * inv_dx - 0.5).floor(), (xp[1] * inv_dx - 0.5).floor()];
        let fx = [xp[0] * inv_dx - base[0], xp[1] * inv_dx - base[1]];
        let (wx, wy) = (weights(fx[0]), weights(fx[1]));
        let mut v = [0.0; 2];
        let mut c = [0.0; 4];
        for (i, wxi) in wx.iter().enumerate() {
            for (jj, wyj) in wy.iter().enumerate() {
                let w = wxi * wyj;
                let dpos = [i as f64 - fx[0], jj as f64 - fx[1]];
                let gv = grid.momentum[(base[0] as usize + i) * n + base[1] as usize + jj];
                v[0] += w * gv[0];
                v[1] += w * gv[1];
                let k = 4.0 * inv_dx * w;
                c[0] += k * gv[0] * dpos[0];
                c[1] += k * gv[0] * dpos[1];
                c[2] += k * gv[1] * dpos[0];
                c[3] += k * gv[1] * dpos[1];
            }
        }
        let x = [(xp[0] + dt * v[0]).clamp(lo, hi), (xp[1] + dt * v[1]).clamp(lo, hi)];
        let step = [1.0 + dt * c[0], dt * c[1], dt * c[2], 1.0 + dt * c[3]];
        let f = mat_mul(&step, &state.deformation[p]);
        if !(x.iter().chain(&v).chain(&f).all(|a| a.is_finite())) {
            return Err(Error::numerical(
                state.substeps_taken,
                format!("non-finite particle state at particle {p}"),
            ));
        }
        state.x[p] = x;
        state.v[p] = v;
        state.affine[p] = c;
        state.deformation[p] = f;
    }
    state.substeps_taken += 1;
    Ok(())
}

/// One substep with a freshly allocated grid.
pub fn mpm_step(state: &mut MpmState, cfg: &MpmConfig) -> Result<()> {
    cfg.validate()?;
    let mut grid = Grid::new(cfg);
    mpm_substep(state, &mut grid, cfg)
}

/// Initial-condition recipe for dropped-object scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Families drawn uniformly per object.
    pub shapes: Vec<ShapeFamily>,
    /// Range of object sizes (edge of the bounding square before rotation).
    pub diameter: [f64; 2],
    /// Range of vertical gaps below each object (floor or object beneath).
    pub gap: [f64; 2],
    /// Range of horizontal centre positions.
    pub center_x: [f64; 2],
    /// Upper bound of the random initial speed; zero drops objects from rest.
    pub initial_speed_max: f64,
    /// Distance below which two objects count as touching.
    pub contact_distance: f64,
    pub placement_attempts: usize,
    /// How many reseeded simulations to try before giving up on a contact.
    pub contact_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            shapes: vec![
                ShapeFamily::ConvexPolygon { vertices: 6 },
                ShapeFamily::StarPolygon { spikes: 5 },
                ShapeFamily::RoundedRectangle,
            ],
            diameter: [0.16, 0.24],
            gap: [0.005, 0.03],
            center_x: [0.35, 0.65],
            initial_speed_max: 0.0,
            contact_distance: 0.05,
            placement_attempts: 100,
            contact_attempts: 10,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

/// Stack `n_objects` random shapes above the floor without overlap.
pub fn place_objects(
    rng: &mut ChaCha8Rng,
    n_objects: usize,
    points_per_object: usize,
    mpm: &MpmConfig,
    scene: &SceneConfig,
) -> Result<MassPointCloud> {
    if n_objects == 0 || points_per_object == 0 {
        return Err(Error::validation("need at least one object and one point"));
    }
    if scene.shapes.is_empty() {
        return Err(Error::validation("scene needs at least one shape family"));
    }
    let lo = mpm.wall();
    for _ in 0..scene.placement_attempts.max(1) {
        let mut positions = Vec::with_capacity(n_objects * points_per_object);
        let mut velocities = Vec::with_capacity(n_objects * points_per_object);
        let mut ids = Vec::with_capacity(n_objects * points_per_object);
        let mut floor = lo;
        let mut fits = true;
        for o in 0..n_objects {
            let family = &scene.shapes[rng.random_range(0..scene.shapes.len())];
            let shape = sample_shape(rng.random(), family, points_per_object)?;
            let d = uniform(rng, scene.diameter);
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let pts: Vec<Vec2> = shape.iter().map(|&p| rotate(angle, [p[0] * d, p[1] * d])).collect();
            let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for p in &pts {
                xmin = xmin.min(p[0]);
                xmax = xmax.max(p[0]);
                ymin = ymin.min(p[1]);
                ymax = ymax.max(p[1]);
            }
            let cx = uniform(rng, scene.center_x);
            let base = floor + uniform(rng, scene.gap);
            let shift = [cx, base - ymin];
            if cx + xmin < lo || cx + xmax > 1.0 - lo || base + ymax - ymin > 1.0 - lo {
                fits = false;
                break;
            }
            // Each object sits entirely above the previous one's top, so the
            // stack cannot overlap.
            floor = base + ymax - ymin;
            let speed = scene.initial_speed_max * rng.random::<f64>();
            let dir = rng.random::<f64>() * std::f64::consts::TAU;
            let vel = [speed * dir.cos(), speed * dir.sin()];
            for p in pts {
                positions.push([(p[0] + shift[0]) as f32 as f64, (p[1] + shift[1]) as f32 as f64]);
                velocities.push([vel[0] as f32 as f64, vel[1] as f32 as f64]);
                ids.push(o as u32);
            }
        }
        if fits {
            return MassPointCloud::new(positions, velocities, ids);
        }
    }
    Err(Error::validation(
        "object placement exceeded its retry budget; reduce object count or size",
    ))
}

/// Whether any frame shows an object near the floor or two objects closer
/// than the contact distance.
pub fn has_contact(traj: &Trajectory, mpm: &MpmConfig, contact_distance: f64) -> bool {
    let floor = mpm.wall() + 2.0 * mpm.dx();
    traj.frames.iter().any(|f| {
        if f.positions.iter().any(|p| p[1] <= floor) {
            return true;
        }
        let hash = SpatialHash::new(&f.positions, contact_distance);
        let mut hit = false;
        hash.for_each_pair_within(&f.positions, contact_distance, |i, j| {
            hit |= f.object_ids[i] != f.object_ids[j];
        });
        hit
    })
}

/// Simulate `n_frames` frames (frame 0 is the initial state).
pub fn simulate(initial: &MassPointCloud, n_frames: usize, cfg: &MpmConfig) -> Result<Vec<MassPointCloud>> {
    cfg.validate()?;
    let mut state = MpmState::new(
        initial.positions.clone(),
        initial.velocities.clone(),
        initial.object_ids.clone(),
        cfg,
    );
    let mut grid = Grid::new(cfg);
    let mut frames = Vec::with_capacity(n_frames);
    frames.push(initial.clone());
    for _ in 1..n_frames {
        for _ in 0..cfg.substeps {
            mpm_substep(&mut state, &mut grid, cfg)?;
        }
        frames.push(state.cloud(cfg));
    }
    Ok(frames)
}

#[derive(Serialize)]
struct GeneratorKey<'a> {
    mpm: &'a MpmConfig,
    scene: &'a SceneConfig,
    n_objects: usize,
    points_per_object: usize,
    n_frames: usize,
}

/// Generate one trajectory of objects dropped under gravity.
///
/// With gravity on, the run is reseeded until some contact (floor or
/// inter-object) occurs within the horizon.
pub fn generate_trajectory(
    seed: u64,
    n_objects: usize,
    points_per_object: usize,
    n_frames: usize,
    cfg: &MpmConfig,
    scene: &SceneConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if n_frames == 0 {
        return Err(Error::validation("n_frames must be at least 1"));
    }
    let key = GeneratorKey {
        mpm: cfg,
        scene,
        n_objects,
        points_per_object,
        n_frames,
    };
    let provenance = Provenance {
        generator: "mls-mpm".into(),
        config_hash: config_hash(&key),
        seed,
        content_sha256: String::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..scene.contact_attempts.max(1) {
        let initial = place_objects(&mut rng, n_objects, points_per_object, cfg, scene)?;
        let frames = simulate(&initial, n_frames, cfg)?;
        let mut traj = Trajectory::new(frames, cfg.frame_dt, provenance.clone())?;
        traj.quantize();
        if cfg.gravity == 0.0 || has_contact(&traj, cfg, scene.contact_distance) {
            return Ok(traj);
        }
    }
    Err(Error::validation(
        "no contact occurred within the horizon; increase n_frames or reduce drop gaps",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_stable() {
        MpmConfig::default().validate().unwrap();
        let cfg = MpmConfig {
            substeps: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn polar_of_rotation_is_itself() {
        let a: f64 = 0.7;
        let r = [a.cos(), -a.sin(), a.sin(), a.cos()];
        let p = polar_rotation(&r);
        for k in 0..4 {
            assert!((p[k] - r[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn isolated_particle_free_fall() {
        let cfg = MpmConfig::default();
        let mut state = MpmState::new(vec![[0.5, 0.8]], vec![[0.0, 0.0]], vec![0], &cfg);
        let mut grid = Grid::new(&cfg);
        let steps = 400;
        for _ in 0..steps {
            mpm_substep(&mut state, &mut grid, &cfg).unwrap();
        }
        let t = steps as f64 * cfg.substep_dt();
        let v = state.frame_velocities(&cfg)[0];
        assert!((v[1].abs() - cfg.gravity * t).abs() <= 0.01 * cfg.gravity * t);
        let drop = 0.8 - state.x[0][1];
        assert!((drop - 0.5 * cfg.gravity * t * t).abs() <= 1e-3 * drop);
    }

    #[test]
    fn floor_clamp_holds() {
        let cfg = MpmConfig::default();
        let mut state = MpmState::new(vec![[0.5, 0.035]], vec![[0.0, -50.0]], vec![0], &cfg);
        let mut grid = Grid::new(&cfg);
        mpm_substep(&mut state, &mut grid, &cfg).unwrap();
        assert!(state.x[0][1] >= cfg.wall());
    }
}

//! Synthetic 2D kinematic assembly world.
//!
//! A scripted expert performs six primitives in order (ReachBase, GripMoveBase,
//! ReachLeg, GripMoveLeg, Insert, Screw) inside the unit arena. Observations
//! are deliberately modality-differentiated: the contact force is identically
//! zero during the two reach phases, the vibration channel fires only during
//! Insert and Screw, and the wrist angle moves only during Screw. The Insert
//! descent speed and the Screw pause events are driven by seeded force noise
//! that is visible to the policy only through the tactile channel.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rawio::{self, RawArray};
use crate::rng::{rng_from_seed, SeedRng};
use crate::{Error, Result};

pub const IMG3_SIZE: usize = 32;
pub const IMGG_SIZE: usize = 16;
pub const STATE_DIM: usize = 6;
pub const TACTILE_DIM: usize = 4;
pub const ACTION_DIM: usize = 4;
pub const NUM_PRIMITIVES: usize = 6;

pub const PRIMITIVE_NAMES: [&str; NUM_PRIMITIVES] = [
    "ReachBase",
    "GripMoveBase",
    "ReachLeg",
    "GripMoveLeg",
    "Insert",
    "Screw",
];

pub fn primitive_code(name: &str) -> Option<u8> {
    PRIMITIVE_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
        .map(|i| i as u8)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Trajectories in the dataset.
    pub count: usize,
    /// Leading trajectories tagged train; the rest val.
    pub train_count: usize,
    /// Nominal per-primitive durations in frames.
    pub nominal_durations: [usize; NUM_PRIMITIVES],
    /// Uniform jitter applied to each duration, as a fraction of nominal.
    pub duration_jitter: f64,
    pub contact_radius: f64,
    /// Additive Gaussian sigma on state and tactile observations.
    pub obs_noise: f32,
    /// Minimum pairwise distance between initial object placements.
    pub min_separation: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 50,
            train_count: 45,
            nominal_durations: [50, 40, 50, 50, 40, 70],
            duration_jitter: 0.2,
            contact_radius: 0.03,
            obs_noise: 0.01,
            min_separation: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.train_count >= self.count {
            return Err(Error::Config(format!(
                "need 0 < train_count < count, got {}/{}",
                self.train_count, self.count
            )));
        }
        if self.nominal_durations.iter().any(|&d| d == 0) {
            return Err(Error::Config("primitive durations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.duration_jitter) {
            return Err(Error::Config("duration_jitter must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper_pos: [f64; 2],
    pub gripper_vel: [f64; 2],
    pub aperture: f64,
    pub wrist_angle: f64,
    pub base_pos: [f64; 2],
    pub leg_pos: [f64; 2],
    pub leg_attached: bool,
    pub screw_progress: f64,
    /// (normal, shear-x, shear-y, vibration)
    pub contact_force: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// 32x32 third-person view, row-major, values in [0,1].
    pub img3: Vec<f32>,
    /// 16x16 grip-camera crop at 2x zoom.
    pub imgg: Vec<f32>,
    /// (pos-x, pos-y, vel-x, vel-y, aperture, wrist).
    pub state: [f32; STATE_DIM],
    pub tactile: [f32; TACTILE_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    /// (dpos-x, dpos-y, dwrist, aperture-command)
    pub actions: Vec<[f32; ACTION_DIM]>,
    pub labels: Vec<u8>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Frame indices where the label changes (ground-truth boundaries).
    pub fn gt_boundaries(&self) -> Vec<usize> {
        (1..self.len())
            .filter(|&i| self.labels[i] != self.labels[i - 1])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub gen_seed: u64,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

const ARENA_LO: f64 = 0.15;
const ARENA_HI: f64 = 0.85;
const MAX_STEP: f64 = 0.045;
const STANDOFF: f64 = 0.06;
const APERTURE_RATE: f64 = 0.25;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn step_toward(pos: [f64; 2], target: [f64; 2], gain: f64) -> [f64; 2] {
    let mut d = [target[0] - pos[0], target[1] - pos[1]];
    d[0] *= gain;
    d[1] *= gain;
    let m = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if m > MAX_STEP {
        let s = MAX_STEP / m;
        d[0] *= s;
        d[1] *= s;
    }
    d
}

fn unit_from(to: [f64; 2], from: [f64; 2]) -> [f64; 2] {
    let d = [from[0] - to[0], from[1] - to[1]];
    let m = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if m < 1e-9 {
        [1.0, 0.0]
    } else {
        [d[0] / m, d[1] / m]
    }
}

struct PhasePlan {
    durations: [usize; NUM_PRIMITIVES],
}

fn plan_phases(rng: &mut SeedRng, cfg: &GenConfig) -> PhasePlan {
    let mut durations = [0usize; NUM_PRIMITIVES];
    for (i, &nom) in cfg.nominal_durations.iter().enumerate() {
        let f = 1.0 + rng.gen_range(-cfg.duration_jitter..cfg.duration_jitter);
        durations[i] = ((nom as f64 * f).round() as usize).max(2);
    }
    PhasePlan { durations }
}

fn sample_placements(rng: &mut SeedRng, cfg: &GenConfig) -> Result<([f64; 2], [f64; 2], [f64; 2])> {
    for _ in 0..100 {
        let mut pts = [[0.0; 2]; 3];
        for p in pts.iter_mut() {
            p[0] = rng.gen_range(ARENA_LO..ARENA_HI);
            p[1] = rng.gen_range(ARENA_LO..ARENA_HI);
        }
        let ok = dist(pts[0], pts[1]) >= cfg.min_separation
            && dist(pts[0], pts[2]) >= cfg.min_separation
            && dist(pts[1], pts[2]) >= cfg.min_separation;
        if ok {
            return Ok((pts[0], pts[1], pts[2]));
        }
    }
    Err(Error::Data(format!(
        "could not place objects at least {} apart after 100 attempts",
        cfg.min_separation
    )))
}

/// Generate one expert demonstration. Pure function of `(seed, cfg)`.
pub fn generate_trajectory(seed: u64, cfg: &GenConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let plan = plan_phases(&mut rng, cfg);
    let (gripper0, base0, leg0) = sample_placements(&mut rng, cfg)?;

    let mut w = WorldState {
        gripper_pos: gripper0,
        gripper_vel: [0.0, 0.0],
        aperture: 1.0,
        wrist_angle: 0.0,
        base_pos: base0,
        leg_pos: leg0,
        leg_attached: false,
        screw_progress: 0.0,
        contact_force: [0.0; 4],
    };

    let center = [0.5, 0.5];
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut labels = Vec::new();

    // AR(1) force-noise state shared by the contact phases.
    let mut force_noise = 0.0f64;
    let mut pulse_remaining = 0usize;
    let mut carrying = false;
    let mut approach_dir = [0.0; 2];

    for phase in 0..NUM_PRIMITIVES {
        let dur = plan.durations[phase];
        if phase == 0 || phase == 2 {
            let target_obj = if phase == 0 { w.base_pos } else { w.leg_pos };
            approach_dir = unit_from(target_obj, w.gripper_pos);
            carrying = false;
        }
        let hover = [
            clamp01(w.base_pos[0]).clamp(0.05, 0.95),
            (w.base_pos[1] - 0.08).clamp(0.05, 0.95),
        ];
        for t in 0..dur {
            force_noise = 0.9 * force_noise + 0.3 * rng.sample::<f64, _>(StandardNormal);
            force_noise = force_noise.clamp(-1.5, 1.5);

            let mut delta = [0.0f64; 2];
            let mut dwrist = 0.0f64;
            let mut aperture_cmd;
            let mut force = [0.0f64; 4];

            match phase {
                0 | 2 => {
                    // Contact-free reach to a standoff point outside the
                    // contact radius.
                    let obj = if phase == 0 { w.base_pos } else { w.leg_pos };
                    let standoff = [
                        obj[0] + STANDOFF * approach_dir[0],
                        obj[1] + STANDOFF * approach_dir[1],
                    ];
                    delta = step_toward(w.gripper_pos, standoff, 0.25);
                    aperture_cmd = 1.0;
                }
                1 | 3 => {
                    let obj = if phase == 1 { w.base_pos } else { w.leg_pos };
                    if !carrying {
                        delta = step_toward(w.gripper_pos, obj, 0.4);
                        aperture_cmd = 0.15;
                        let after = [w.gripper_pos[0] + delta[0], w.gripper_pos[1] + delta[1]];
                        if dist(after, obj) < 0.004 && w.aperture < 0.35 {
                            carrying = true;
                        }
                    } else {
                        let target = if phase == 1 { center } else { hover };
                        delta = step_toward(w.gripper_pos, target, 0.2);
                        aperture_cmd = 0.15;
                        let vel = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
                        force[0] = (0.5 + 0.05 * force_noise).max(0.05);
                        force[1] = (25.0 * delta[0]).clamp(-0.8, 0.8);
                        force[2] = (25.0 * delta[1]).clamp(-0.8, 0.8);
                        let _ = vel;
                    }
                }
                4 => {
                    // Slow descent into the hole; the commanded speed tracks
                    // the (noisy) normal force, so tactile predicts the action.
                    let ramp = t as f64 / (dur - 1).max(1) as f64;
                    let normal = (0.25 + 0.75 * ramp + 0.12 * force_noise).clamp(0.05, 1.2);
                    let speed = (0.012 * (1.15 - normal)).clamp(0.0015, 0.012);
                    let d = dist(w.gripper_pos, w.base_pos);
                    if d > 1e-6 {
                        let dir = unit_from(w.gripper_pos, w.base_pos);
                        let m = speed.min(d);
                        delta = [dir[0] * m, dir[1] * m];
                    }
                    aperture_cmd = 0.15;
                    force[0] = normal;
                    force[1] = 0.05 * force_noise;
                    force[3] = 0.18 * (1.0 + (std::f64::consts::TAU * t as f64 / 7.0).sin())
                        * (0.75 + 0.25 * ramp)
                        + 0.02;
                }
                _ => {
                    // Screw: oscillatory wrist rotation, paused by seeded
                    // resistance pulses that show up only in the shear channel.
                    let base_rate = 0.042 * (std::f64::consts::TAU * t as f64 / 20.0).sin();
                    if pulse_remaining == 0 && rng.gen_bool(0.06) {
                        pulse_remaining = 3;
                    }
                    let mut shear = 0.05 * force_noise;
                    dwrist = base_rate;
                    if pulse_remaining > 0 {
                        pulse_remaining -= 1;
                        shear += 0.7;
                        dwrist *= 0.15;
                    }
                    aperture_cmd = 0.15;
                    force[0] = (0.55 + 0.08 * force_noise).max(0.05);
                    force[1] = shear;
                    force[3] = 0.12 + 0.22 * (std::f64::consts::TAU * t as f64 / 5.0).sin().abs();
                    w.screw_progress = if t + 1 == dur {
                        1.0
                    } else {
                        (t + 1) as f64 / dur as f64
                    };
                }
            }

            delta[0] = delta[0].clamp(-0.05, 0.05);
            delta[1] = delta[1].clamp(-0.05, 0.05);
            dwrist = dwrist.clamp(-0.05, 0.05);
            aperture_cmd = clamp01(aperture_cmd);
            w.contact_force = force;

            // Observe the current state, then apply the action.
            observations.push(observe(&w, cfg, &mut rng));
            actions.push([
                delta[0] as f32,
                delta[1] as f32,
                dwrist as f32,
                aperture_cmd as f32,
            ]);
            labels.push(phase as u8);

            let prev = w.gripper_pos;
            w.gripper_pos[0] = clamp01(w.gripper_pos[0] + delta[0]);
            w.gripper_pos[1] = clamp01(w.gripper_pos[1] + delta[1]);
            w.gripper_vel = [w.gripper_pos[0] - prev[0], w.gripper_pos[1] - prev[1]];
            w.wrist_angle += dwrist;
            let da = (aperture_cmd - w.aperture).clamp(-APERTURE_RATE, APERTURE_RATE);
            w.aperture = clamp01(w.aperture + da);
            if carrying {
                match phase {
                    1 => w.base_pos = w.gripper_pos,
                    3 | 4 | 5 => w.leg_pos = w.gripper_pos,
                    _ => {}
                }
            }
            if phase == 4 && t + 1 == dur {
                w.leg_attached = true;
            }
            if phase >= 4 {
                carrying = true;
                w.leg_pos = w.gripper_pos;
            }
        }
    }

    Ok(Trajectory {
        observations,
        actions,
        labels,
    })
}

fn observe(w: &WorldState, cfg: &GenConfig, rng: &mut SeedRng) -> Observation {
    let (img3, imgg) = render(w, cfg);
    let mut state = [
        w.gripper_pos[0] as f32,
        w.gripper_pos[1] as f32,
        w.gripper_vel[0] as f32,
        w.gripper_vel[1] as f32,
        w.aperture as f32,
        w.wrist_angle as f32,
    ];
    let mut tactile = [
        w.contact_force[0] as f32,
        w.contact_force[1] as f32,
        w.contact_force[2] as f32,
        w.contact_force[3] as f32,
    ];
    for v in state.iter_mut() {
        *v += cfg.obs_noise * rng.sample::<f32, _>(StandardNormal);
    }
    for v in tactile.iter_mut() {
        *v += cfg.obs_noise * rng.sample::<f32, _>(StandardNormal);
    }
    Observation {
        img3,
        imgg,
        state,
        tactile,
    }
}

const BLOB_SIGMA_PX: f64 = 1.5;
const INTENSITY: [f64; 3] = [1.0, 0.7, 0.4]; // gripper, base, leg

/// Render the scene. `img3` is a 32x32 top-down view of the unit arena;
/// `imgg` is a 16x16 crop centered on the gripper at 2x zoom. Objects are
/// isotropic Gaussian blobs summed then clamped to [0,1].
pub fn render(w: &WorldState, _cfg: &GenConfig) -> (Vec<f32>, Vec<f32>) {
    let objects = [w.gripper_pos, w.base_pos, w.leg_pos];

    let mut img3 = vec![0f32; IMG3_SIZE * IMG3_SIZE];
    let scale3 = IMG3_SIZE as f64; // pixels per world unit
    for row in 0..IMG3_SIZE {
        for col in 0..IMG3_SIZE {
            let wx = (col as f64 + 0.5) / IMG3_SIZE as f64;
            let wy = (row as f64 + 0.5) / IMG3_SIZE as f64;
            let mut v = 0.0;
            for (obj, inten) in objects.iter().zip(INTENSITY) {
                let dpx = dist([wx, wy], *obj) * scale3;
                v += inten * (-dpx * dpx / (2.0 * BLOB_SIGMA_PX * BLOB_SIGMA_PX)).exp();
            }
            img3[row * IMG3_SIZE + col] = v.min(1.0) as f32;
        }
    }

    let mut imgg = vec![0f32; IMGG_SIZE * IMGG_SIZE];
    let scaleg = 2.0 * IMG3_SIZE as f64; // 2x zoom
    let span = IMGG_SIZE as f64 / scaleg; // world units covered by the crop
    for row in 0..IMGG_SIZE {
        for col in 0..IMGG_SIZE {
            let wx = w.gripper_pos[0] + ((col as f64 + 0.5) / IMGG_SIZE as f64 - 0.5) * span;
            let wy = w.gripper_pos[1] + ((row as f64 + 0.5) / IMGG_SIZE as f64 - 0.5) * span;
            let mut v = 0.0;
            for (obj, inten) in objects.iter().zip(INTENSITY) {
                let dpx = dist([wx, wy], *obj) * scaleg;
                v += inten * (-dpx * dpx / (2.0 * BLOB_SIGMA_PX * BLOB_SIGMA_PX)).exp();
            }
            imgg[row * IMGG_SIZE + col] = v.min(1.0) as f32;
        }
    }

    (img3, imgg)
}

/// Generate a dataset; trajectory `i` is a pure function of `gen_seed + i`.
pub fn generate_dataset(gen_seed: u64, cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut trajectories = Vec::with_capacity(cfg.count);
    let mut split = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        trajectories.push(generate_trajectory(gen_seed.wrapping_add(i as u64), cfg)?);
        split.push(if i < cfg.train_count {
            Split::Train
        } else {
            Split::Val
        });
    }
    Ok(Dataset {
        trajectories,
        gen_seed,
        split,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    gen_seed: u64,
    count: usize,
    split: Vec<Split>,
    config: GenConfig,
    config_hash: String,
}

pub fn write_dataset(ds: &Dataset, cfg: &GenConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_json =
        serde_json::to_string(cfg).map_err(|e| Error::Data(format!("config encode: {e}")))?;
    let header = DatasetHeader {
        gen_seed: ds.gen_seed,
        count: ds.trajectories.len(),
        split: ds.split.clone(),
        config: cfg.clone(),
        config_hash: format!("{:016x}", crate::rng::fnv1a(cfg_json.as_bytes())),
    };
    let hpath = dir.join("dataset.json");
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Data(format!("header encode: {e}")))?;
    fs::write(&hpath, json).map_err(|e| Error::io(&hpath, e))?;

    for (i, traj) in ds.trajectories.iter().enumerate() {
        let tdir = dir.join(format!("traj_{i:03}"));
        let l = traj.len();
        let mut img3 = Vec::with_capacity(l * IMG3_SIZE * IMG3_SIZE);
        let mut imgg = Vec::with_capacity(l * IMGG_SIZE * IMGG_SIZE);
        let mut state = Vec::with_capacity(l * STATE_DIM);
        let mut tactile = Vec::with_capacity(l * TACTILE_DIM);
        let mut action = Vec::with_capacity(l * ACTION_DIM);
        for (obs, act) in traj.observations.iter().zip(&traj.actions) {
            img3.extend_from_slice(&obs.img3);
            imgg.extend_from_slice(&obs.imgg);
            state.extend_from_slice(&obs.state);
            tactile.extend_from_slice(&obs.tactile);
            action.extend_from_slice(act);
        }
        let arrays = vec![
            (
                "img3".to_string(),
                RawArray::F32 {
                    shape: vec![l, IMG3_SIZE, IMG3_SIZE],
                    data: img3,
                },
            ),
            (
                "imgg".to_string(),
                RawArray::F32 {
                    shape: vec![l, IMGG_SIZE, IMGG_SIZE],
                    data: imgg,
                },
            ),
            (
                "state".to_string(),
                RawArray::F32 {
                    shape: vec![l, STATE_DIM],
                    data: state,
                },
            ),
            (
                "tactile".to_string(),
                RawArray::F32 {
                    shape: vec![l, TACTILE_DIM],
                    data: tactile,
                },
            ),
            (
                "action".to_string(),
                RawArray::F32 {
                    shape: vec![l, ACTION_DIM],
                    data: action,
                },
            ),
            (
                "label".to_string(),
                RawArray::U8 {
                    shape: vec![l],
                    data: traj.labels.clone(),
                },
            ),
        ];
        rawio::write_arrays(&tdir, &arrays)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let hpath = dir.join("dataset.json");
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: DatasetHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("malformed dataset.json: {e}")))?;
    let mut trajectories = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let tdir = dir.join(format!("traj_{i:03}"));
        let arrays = rawio::read_arrays(&tdir)?;
        let labels = rawio::find(&arrays, "label")?.as_u8()?.to_vec();
        let l = labels.len();
        let img3 = rawio::find(&arrays, "img3")?;
        let imgg = rawio::find(&arrays, "imgg")?;
        let state = rawio::find(&arrays, "state")?;
        let tactile = rawio::find(&arrays, "tactile")?;
        let action = rawio::find(&arrays, "action")?;
        for (name, arr, cols) in [
            ("img3", img3, IMG3_SIZE * IMG3_SIZE),
            ("imgg", imgg, IMGG_SIZE * IMGG_SIZE),
            ("state", state, STATE_DIM),
            ("tactile", tactile, TACTILE_DIM),
            ("action", action, ACTION_DIM),
        ] {
            if arr.len() != l * cols {
                return Err(Error::Data(format!(
                    "traj_{i:03}: {name} has {} values, expected {}",
                    arr.len(),
                    l * cols
                )));
            }
        }
        let img3 = img3.as_f32()?;
        let imgg = imgg.as_f32()?;
        let state = state.as_f32()?;
        let tactile = tactile.as_f32()?;
        let action = action.as_f32()?;
        let mut observations = Vec::with_capacity(l);
        let mut actions = Vec::with_capacity(l);
        for f in 0..l {
            let mut st = [0f32; STATE_DIM];
            st.copy_from_slice(&state[f * STATE_DIM..(f + 1) * STATE_DIM]);
            let mut ta = [0f32; TACTILE_DIM];
            ta.copy_from_slice(&tactile[f * TACTILE_DIM..(f + 1) * TACTILE_DIM]);
            let mut ac = [0f32; ACTION_DIM];
            ac.copy_from_slice(&action[f * ACTION_DIM..(f + 1) * ACTION_DIM]);
            observations.push(Observation {
                img3: img3[f * IMG3_SIZE * IMG3_SIZE..(f + 1) * IMG3_SIZE * IMG3_SIZE].to_vec(),
                imgg: imgg[f * IMGG_SIZE * IMGG_SIZE..(f + 1) * IMGG_SIZE * IMGG_SIZE].to_vec(),
                state: st,
                tactile: ta,
            });
            actions.push(ac);
        }
        trajectories.push(Trajectory {
            observations,
            actions,
            labels,
        });
    }
    Ok(Dataset {
        trajectories,
        gen_seed: header.gen_seed,
        split: header.split,
    })
}

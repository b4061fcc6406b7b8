//! Full policy: observation encoders + CMA fusion + diffusion head, with
//! checkpointing and receding-horizon chunk execution.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::cma::{Cma, CmaConfig, CmaOutput};
use crate::diffusion::{
    diffusion_loss, make_schedule, sample, NoiseSchedule, Normalizer, ScheduleKind, UNet,
    UNetConfig, ACTION_DIM, ACTION_HORIZON, EXEC_HORIZON,
};
use crate::encoders::{FrameFeats, ObsEncoder};
use crate::params::ParamStore;
use crate::rng::{rng_from_seed, SeedRng};
use crate::synthworld::{Observation, IMG3_SIZE, IMGG_SIZE};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub cma: CmaConfig,
    pub unet: UNetConfig,
    pub k_steps: usize,
    pub action_horizon: usize,
    pub exec_horizon: usize,
    /// Seed for the frozen conv feature extractors; independent of the
    /// trainable-parameter init seed so the frozen features are reproducible
    /// across otherwise different runs.
    pub frozen_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cma: CmaConfig::default(),
            unet: UNetConfig::desk(),
            k_steps: 100,
            action_horizon: ACTION_HORIZON,
            exec_horizon: EXEC_HORIZON,
            frozen_seed: 7777,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.cma.validate()?;
        self.unet.validate()?;
        if self.k_steps < 2 {
            return Err(Error::Config(format!(
                "k_steps must be >= 2, got {}",
                self.k_steps
            )));
        }
        if self.action_horizon == 0 || self.action_horizon % 4 != 0 {
            return Err(Error::Config(format!(
                "action_horizon must be a positive multiple of 4, got {}",
                self.action_horizon
            )));
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.action_horizon {
            return Err(Error::Config(format!(
                "exec_horizon must be in 1..={}, got {}",
                self.action_horizon, self.exec_horizon
            )));
        }
        Ok(())
    }
}

pub struct Policy {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub enc: ObsEncoder,
    pub cma: Cma,
    pub unet: UNet,
    pub sched: NoiseSchedule,
    pub normalizer: Normalizer,
    pub step: u64,
}

impl Policy {
    pub fn init(cfg: ModelConfig, init_seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = rng_from_seed(init_seed);
        let enc = ObsEncoder::init(&mut store, &mut rng, cfg.frozen_seed)?;
        let cma = Cma::init(&mut store, &mut rng, cfg.cma.clone())?;
        let unet = UNet::init(
            &mut store,
            &mut rng,
            cfg.unet.clone(),
            ACTION_DIM,
            cfg.cma.cond_dim,
        )?;
        let sched = make_schedule(cfg.k_steps, ScheduleKind::Linear)?;
        let normalizer = Normalizer {
            lo: vec![-1.0; ACTION_DIM],
            hi: vec![1.0; ACTION_DIM],
        };
        Ok(Policy {
            cfg,
            store,
            enc,
            cma,
            unet,
            sched,
            normalizer,
            step: 0,
        })
    }

    /// Frozen features + raw vectors for one observation (batch of 1).
    pub fn frame_feats(&self, obs: &Observation) -> Result<FrameFeats> {
        let dev = self.store.device();
        let img3 = Tensor::from_vec(obs.img3.clone(), (1, 1, IMG3_SIZE, IMG3_SIZE), dev)?
            .to_dtype(self.store.dtype())?;
        let imgg = Tensor::from_vec(obs.imgg.clone(), (1, 1, IMGG_SIZE, IMGG_SIZE), dev)?
            .to_dtype(self.store.dtype())?;
        Ok(FrameFeats {
            f3: self.enc.img3.frozen.features(&img3)?,
            fg: self.enc.imgg.frozen.features(&imgg)?,
            state: Tensor::from_vec(obs.state.to_vec(), (1, obs.state.len()), dev)?
                .to_dtype(self.store.dtype())?,
            tactile: Tensor::from_vec(obs.tactile.to_vec(), (1, obs.tactile.len()), dev)?
                .to_dtype(self.store.dtype())?,
        })
    }

    /// Encode a (prev, cur) frame pair and fuse through the CMA transformer.
    pub fn fuse(&self, prev: &FrameFeats, cur: &FrameFeats) -> Result<CmaOutput> {
        let tokens = self.enc.build_tokens(prev, cur)?;
        self.cma.forward(&tokens)
    }

    /// Training loss on a batch: x0 is a normalized action chunk
    /// (B, ACTION_DIM, action_horizon).
    pub fn loss_on_batch(
        &self,
        prev: &FrameFeats,
        cur: &FrameFeats,
        x0: &Tensor,
        rng: &mut SeedRng,
    ) -> Result<Tensor> {
        let fused = self.fuse(prev, cur)?;
        diffusion_loss(&self.unet, &self.sched, x0, &fused.cond, rng)
    }

    /// Validation loss with caller-fixed diffusion draws.
    pub fn loss_with_draws(
        &self,
        prev: &FrameFeats,
        cur: &FrameFeats,
        x0: &Tensor,
        ks: &[usize],
        eps: &Tensor,
    ) -> Result<Tensor> {
        let fused = self.fuse(prev, cur)?;
        crate::diffusion::loss_with_draws(&self.unet, &self.sched, x0, &fused.cond, ks, eps)
    }

    /// Sample a denormalized action chunk for a batch-of-1 frame pair.
    /// Also returns the CMA output so callers can record attention.
    pub fn sample_chunk(
        &self,
        prev: &FrameFeats,
        cur: &FrameFeats,
        rng: &mut SeedRng,
    ) -> Result<(Vec<[f32; ACTION_DIM]>, CmaOutput)> {
        let fused = self.fuse(prev, cur)?;
        let x = sample(
            &self.unet,
            &self.sched,
            &fused.cond,
            ACTION_DIM,
            self.cfg.action_horizon,
            rng,
        )?;
        let vals: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite sampled action chunk".into()));
        }
        let h = self.cfg.action_horizon;
        let mut actions = Vec::with_capacity(h);
        for t in 0..h {
            let mut a = [0f32; ACTION_DIM];
            for d in 0..ACTION_DIM {
                a[d] = vals[d * h + t];
            }
            actions.push(self.normalizer.denormalize(&a));
        }
        Ok((actions, fused))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            step: self.step,
            normalizer: self.normalizer.clone(),
        };
        let hpath = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header)
            .map_err(|e| Error::Data(format!("serialize checkpoint header: {e}")))?;
        fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))?;
        crate::rawio::write_arrays(dir, &self.store.to_arrays()?)
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let hpath = dir.join("header.json");
        let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("malformed checkpoint header: {e}")))?;
        let mut policy = Policy::init(header.config, 0, dtype)?;
        let arrays = crate::rawio::read_arrays(dir)?;
        policy.store.load_arrays(&arrays)?;
        policy.normalizer = header.normalizer;
        policy.step = header.step;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
    normalizer: Normalizer,
}

/// Receding-horizon execution: keep the first `exec_horizon` actions of each
/// sampled chunk, then ask for a replan.
pub struct ChunkExecutor {
    pending: VecDeque<[f32; ACTION_DIM]>,
    exec_horizon: usize,
}

impl ChunkExecutor {
    pub fn new(exec_horizon: usize) -> Self {
        ChunkExecutor {
            pending: VecDeque::new(),
            exec_horizon,
        }
    }

    pub fn needs_replan(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn push_chunk(&mut self, chunk: &[[f32; ACTION_DIM]]) -> Result<()> {
        if chunk.len() < self.exec_horizon {
            return Err(Error::Data(format!(
                "chunk of {} actions is shorter than the execution horizon {}",
                chunk.len(),
                self.exec_horizon
            )));
        }
        self.pending.clear();
        self.pending.extend(chunk.iter().take(self.exec_horizon));
        Ok(())
    }

    pub fn next_action(&mut self) -> Option<[f32; ACTION_DIM]> {
        self.pending.pop_front()
    }
}

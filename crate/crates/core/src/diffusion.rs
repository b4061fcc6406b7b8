//! Conditional 1D U-Net DDPM over action chunks.
//!
//! Epsilon-prediction objective, linear beta schedule, ancestral sampling
//! with sigma_k = sqrt(beta_k). Residual blocks are kernel-3 1D convolutions
//! with GroupNorm + SiLU, FiLM-modulated by the CMA conditioning vector
//! concatenated with a sinusoidal diffusion-step embedding.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::params::{conv_init, LinearP, ParamStore};
use crate::rng::{normal_tensor, SeedRng};
use crate::{Error, Result};

pub const ACTION_DIM: usize = 4;
pub const ACTION_HORIZON: usize = 8;
pub const EXEC_HORIZON: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// Linear beta schedule from 1e-4 to 0.02 inclusive over `k_steps` steps.
pub fn make_schedule(k_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if k_steps < 2 {
        return Err(Error::Config(format!(
            "diffusion needs at least 2 steps, got {k_steps}"
        )));
    }
    let ScheduleKind::Linear = kind;
    let (b0, b1) = (1e-4f64, 2e-2f64);
    let betas: Vec<f64> = (0..k_steps)
        .map(|k| b0 + (b1 - b0) * k as f64 / (k_steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(k_steps);
    let mut acc = 1.0f64;
    for a in &alphas {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bar,
    })
}

/// Forward noising: `x_k = sqrt(abar_k) x0 + sqrt(1-abar_k) eps`, with a
/// per-batch-element step index.
pub fn q_sample(x0: &Tensor, ks: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let dims = x0.dims();
    if eps.dims() != dims {
        return Err(Error::Shape(format!(
            "eps shape {:?} != x0 shape {:?}",
            eps.dims(),
            dims
        )));
    }
    if dims[0] != ks.len() {
        return Err(Error::Shape(format!(
            "{} step indices for batch of {}",
            ks.len(),
            dims[0]
        )));
    }
    let mut sa = Vec::with_capacity(ks.len());
    let mut sb = Vec::with_capacity(ks.len());
    for &k in ks {
        if k >= sched.len() {
            return Err(Error::Config(format!(
                "step index {k} out of range 0..{}",
                sched.len()
            )));
        }
        sa.push(sched.alpha_bar[k].sqrt() as f32);
        sb.push((1.0 - sched.alpha_bar[k]).sqrt() as f32);
    }
    let dev = x0.device();
    let bshape: Vec<usize> = std::iter::once(ks.len())
        .chain(std::iter::repeat(1).take(dims.len() - 1))
        .collect();
    let sa = Tensor::from_vec(sa, bshape.as_slice(), dev)?.to_dtype(x0.dtype())?;
    let sb = Tensor::from_vec(sb, bshape.as_slice(), dev)?.to_dtype(x0.dtype())?;
    Ok(x0.broadcast_mul(&sa)?.add(&eps.broadcast_mul(&sb)?)?)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub down_dims: [usize; 3],
    pub kernel: usize,
    pub groupnorm_groups: usize,
    pub step_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig::desk()
    }
}

impl UNetConfig {
    /// Desk-scale preset, the default for acceptance runs.
    pub fn desk() -> Self {
        UNetConfig {
            down_dims: [64, 128, 256],
            kernel: 3,
            groupnorm_groups: 8,
            step_embed_dim: 64,
        }
    }

    /// Paper-scale downsampling dimensions.
    pub fn paper() -> Self {
        UNetConfig {
            down_dims: [256, 512, 1024],
            ..UNetConfig::desk()
        }
    }

    /// Minimal preset for gradient checks.
    pub fn tiny() -> Self {
        UNetConfig {
            down_dims: [8, 16, 32],
            kernel: 3,
            groupnorm_groups: 8,
            step_embed_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [d1, d2, d3] = self.down_dims;
        if !(d1 < d2 && d2 < d3) {
            return Err(Error::Config(format!(
                "down_dims must be strictly increasing, got {:?}",
                self.down_dims
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel must be odd".into()));
        }
        for d in self.down_dims {
            if d % self.groupnorm_groups != 0 {
                return Err(Error::Config(format!(
                    "groupnorm groups {} must divide every down dim ({:?})",
                    self.groupnorm_groups, self.down_dims
                )));
            }
        }
        if self.step_embed_dim < 4 || self.step_embed_dim % 2 != 0 {
            return Err(Error::Config("step_embed_dim must be even and >= 4".into()));
        }
        Ok(())
    }
}

fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    if c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels, {groups} groups")));
    }
    let xg = x.reshape((b, groups, c / groups * l))?;
    let mean = xg.mean_keepdim(2)?;
    let centered = xg.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let norm = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    let norm = norm.reshape((b, c, l))?;
    let gamma = gamma.reshape((1, c, 1))?;
    let beta = beta.reshape((1, c, 1))?;
    Ok(norm.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// 1D convolution built from im2col + matmul rather than `Tensor::conv1d`:
/// candle 0.8's CPU conv kernel silently misreads non-contiguous kernel
/// tensors, and its conv1d backward passes a transposed gradient as the
/// kernel, which corrupts every weight gradient (bias and input gradients
/// take other paths and are fine). index_select/stack/matmul all have sound
/// backward implementations.
fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, c_in, l) = x.dims3()?;
    let (c_out, wc_in, k) = w.dims3()?;
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv input has {c_in} channels, kernel expects {wc_in}"
        )));
    }
    let xp = if pad > 0 {
        x.pad_with_zeros(2, pad, pad)?
    } else {
        x.clone()
    };
    let lp = l + 2 * pad;
    if lp < k {
        return Err(Error::Shape(format!(
            "padded length {lp} shorter than kernel {k}"
        )));
    }
    let l_out = (lp - k) / stride + 1;
    let mut taps = Vec::with_capacity(k);
    for t in 0..k {
        if stride == 1 {
            taps.push(xp.narrow(2, t, l_out)?);
        } else {
            let idx: Vec<u32> = (0..l_out).map(|j| (t + j * stride) as u32).collect();
            let idx = Tensor::from_vec(idx, l_out, x.device())?;
            taps.push(xp.index_select(&idx, 2)?);
        }
    }
    // (B, C_in, k, L_out) -> (C_in*k, B*L_out): one large matmul instead of a
    // batch of tiny ones
    let cols = Tensor::stack(&taps, 2)?
        .reshape((batch, c_in * k, l_out))?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((c_in * k, batch * l_out))?;
    let y = w
        .reshape((c_out, c_in * k))?
        .matmul(&cols)?
        .reshape((c_out, batch, l_out))?
        .transpose(0, 1)?
        .contiguous()?;
    Ok(y.broadcast_add(&b.reshape((1, c_out, 1))?)?)
}

struct ResBlock {
    conv1_w: Tensor,
    conv1_b: Tensor,
    gn1_g: Tensor,
    gn1_b: Tensor,
    film: LinearP,
    conv2_w: Tensor,
    conv2_b: Tensor,
    gn2_g: Tensor,
    gn2_b: Tensor,
    skip: Option<(Tensor, Tensor)>,
    groups: usize,
    kernel: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        g_dim: usize,
        cfg: &UNetConfig,
    ) -> Result<Self> {
        let k = cfg.kernel;
        let (w1, b1) = conv_init(rng, c_out, c_in, k);
        let (w2, b2) = conv_init(rng, c_out, c_out, k);
        let skip = if c_in != c_out {
            let (ws, bs) = conv_init(rng, c_out, c_in, 1);
            Some((
                store.add(&format!("{name}.skip.weight"), &[c_out, c_in, 1], ws, false)?,
                store.add(&format!("{name}.skip.bias"), &[c_out], bs, false)?,
            ))
        } else {
            None
        };
        Ok(ResBlock {
            conv1_w: store.add(&format!("{name}.conv1.weight"), &[c_out, c_in, k], w1, false)?,
            conv1_b: store.add(&format!("{name}.conv1.bias"), &[c_out], b1, false)?,
            gn1_g: store.add(&format!("{name}.gn1.gamma"), &[c_out], vec![1.0; c_out], false)?,
            gn1_b: store.add(&format!("{name}.gn1.beta"), &[c_out], vec![0.0; c_out], false)?,
            film: LinearP::init(store, rng, &format!("{name}.film"), g_dim, 2 * c_out)?,
            conv2_w: store.add(&format!("{name}.conv2.weight"), &[c_out, c_out, k], w2, false)?,
            conv2_b: store.add(&format!("{name}.conv2.bias"), &[c_out], b2, false)?,
            gn2_g: store.add(&format!("{name}.gn2.gamma"), &[c_out], vec![1.0; c_out], false)?,
            gn2_b: store.add(&format!("{name}.gn2.beta"), &[c_out], vec![0.0; c_out], false)?,
            skip,
            groups: cfg.groupnorm_groups,
            kernel: k,
        })
    }

    fn forward(&self, x: &Tensor, gfeat: &Tensor) -> Result<Tensor> {
        let pad = (self.kernel - 1) / 2;
        let c_out = self.conv1_w.dims()[0];
        let mut h = conv1d(x, &self.conv1_w, &self.conv1_b, 1, pad)?;
        h = group_norm(&h, &self.gn1_g, &self.gn1_b, self.groups)?;
        h = candle_nn::ops::silu(&h)?;
        let film = self.film.forward(gfeat)?; // (B, 2*c_out)
        let scale = film.narrow(1, 0, c_out)?.unsqueeze(2)?;
        let shift = film.narrow(1, c_out, c_out)?.unsqueeze(2)?;
        h = h
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        h = conv1d(&h, &self.conv2_w, &self.conv2_b, 1, pad)?;
        h = group_norm(&h, &self.gn2_g, &self.gn2_b, self.groups)?;
        h = candle_nn::ops::silu(&h)?;
        let res = match &self.skip {
            Some((w, b)) => conv1d(x, w, b, 1, 0)?,
            None => x.clone(),
        };
        Ok((h + res)?)
    }
}

struct DownConv {
    w: Tensor,
    b: Tensor,
}

impl DownConv {
    fn init(store: &mut ParamStore, rng: &mut SeedRng, name: &str, c: usize, k: usize) -> Result<Self> {
        let (w, b) = conv_init(rng, c, c, k);
        Ok(DownConv {
            w: store.add(&format!("{name}.weight"), &[c, c, k], w, false)?,
            b: store.add(&format!("{name}.bias"), &[c], b, false)?,
        })
    }
}

/// Sinusoidal embedding of the diffusion step indices.
pub fn step_embedding(ks: &[usize], dim: usize, dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ks.len() * dim);
    for &k in ks {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            data.push((k as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            data.push((k as f64 * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(data, (ks.len(), dim), dev)?.to_dtype(dtype)?)
}

pub struct UNet {
    pub cfg: UNetConfig,
    pub cond_dim: usize,
    pub channels: usize,
    step_l1: LinearP,
    step_l2: LinearP,
    r1: ResBlock,
    down1: DownConv,
    r2: ResBlock,
    down2: DownConv,
    r3: ResBlock,
    mid: ResBlock,
    u3: ResBlock,
    u2: ResBlock,
    u1: ResBlock,
    final_w: Tensor,
    final_b: Tensor,
    dtype: DType,
}

impl UNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        cfg: UNetConfig,
        channels: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let [d1, d2, d3] = cfg.down_dims;
        let sed = cfg.step_embed_dim;
        let g_dim = sed + cond_dim;
        let k = cfg.kernel;
        let dtype = store.dtype();
        let step_l1 = LinearP::init(store, rng, "unet.step.l1", sed, sed * 4)?;
        let step_l2 = LinearP::init(store, rng, "unet.step.l2", sed * 4, sed)?;
        let r1 = ResBlock::init(store, rng, "unet.down1.res", channels, d1, g_dim, &cfg)?;
        let down1 = DownConv::init(store, rng, "unet.down1.pool", d1, k)?;
        let r2 = ResBlock::init(store, rng, "unet.down2.res", d1, d2, g_dim, &cfg)?;
        let down2 = DownConv::init(store, rng, "unet.down2.pool", d2, k)?;
        let r3 = ResBlock::init(store, rng, "unet.down3.res", d2, d3, g_dim, &cfg)?;
        let mid = ResBlock::init(store, rng, "unet.mid.res", d3, d3, g_dim, &cfg)?;
        let u3 = ResBlock::init(store, rng, "unet.up3.res", d3 * 2, d3, g_dim, &cfg)?;
        let u2 = ResBlock::init(store, rng, "unet.up2.res", d3 + d2, d2, g_dim, &cfg)?;
        let u1 = ResBlock::init(store, rng, "unet.up1.res", d2 + d1, d1, g_dim, &cfg)?;
        let (fw, fb) = conv_init(rng, channels, d1, 1);
        let final_w = store.add("unet.final.weight", &[channels, d1, 1], fw, false)?;
        let final_b = store.add("unet.final.bias", &[channels], fb, false)?;
        Ok(UNet {
            cfg,
            cond_dim,
            channels,
            step_l1,
            step_l2,
            r1,
            down1,
            r2,
            down2,
            r3,
            mid,
            u3,
            u2,
            u1,
            final_w,
            final_b,
            dtype,
        })
    }

    /// x: (B, channels, H) with H divisible by 4; ks: per-element step index;
    /// cond: (B, cond_dim). Output has the same shape as x.
    pub fn forward(&self, x: &Tensor, ks: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, c, h) = x.dims3()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "unet expects {} channels, got {c}",
                self.channels
            )));
        }
        if h % 4 != 0 || h < 4 {
            return Err(Error::Shape(format!(
                "horizon {h} must be a positive multiple of 4"
            )));
        }
        if ks.len() != b {
            return Err(Error::Shape(format!("{} step indices for batch {b}", ks.len())));
        }
        if cond.dims() != [b, self.cond_dim] {
            return Err(Error::Shape(format!(
                "cond shape {:?}, expected ({b}, {})",
                cond.dims(),
                self.cond_dim
            )));
        }
        let semb = step_embedding(ks, self.cfg.step_embed_dim, self.dtype, x.device())?;
        let semb = self
            .step_l2
            .forward(&candle_nn::ops::silu(&self.step_l1.forward(&semb)?)?)?;
        let g = Tensor::cat(&[&semb, cond], 1)?;

        let pad = (self.cfg.kernel - 1) / 2;
        let d1 = self.r1.forward(x, &g)?;
        let x2 = conv1d(&d1, &self.down1.w, &self.down1.b, 2, pad)?;
        let d2 = self.r2.forward(&x2, &g)?;
        let x3 = conv1d(&d2, &self.down2.w, &self.down2.b, 2, pad)?;
        let d3 = self.r3.forward(&x3, &g)?;
        let m = self.mid.forward(&d3, &g)?;
        let mut u = self.u3.forward(&Tensor::cat(&[&m, &d3], 1)?, &g)?;
        u = u.upsample_nearest1d(h / 2)?;
        u = self.u2.forward(&Tensor::cat(&[&u, &d2], 1)?, &g)?;
        u = u.upsample_nearest1d(h)?;
        u = self.u1.forward(&Tensor::cat(&[&u, &d1], 1)?, &g)?;
        conv1d(&u, &self.final_w, &self.final_b, 1, 0)
    }
}

/// Anything that predicts epsilon from (x_k, k, cond). Lets tests drive the
/// loss and sampler with oracle stubs.
pub trait EpsModel {
    fn predict(&self, x_k: &Tensor, ks: &[usize], cond: &Tensor) -> Result<Tensor>;
}

impl EpsModel for UNet {
    fn predict(&self, x_k: &Tensor, ks: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.forward(x_k, ks, cond)
    }
}

/// Epsilon-prediction MSE with caller-provided draws (used for validation and
/// gradient checks, where draws must be fixed).
pub fn loss_with_draws(
    model: &dyn EpsModel,
    sched: &NoiseSchedule,
    x0: &Tensor,
    cond: &Tensor,
    ks: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let x_k = q_sample(x0, ks, eps, sched)?;
    let eps_hat = model.predict(&x_k, ks, cond)?;
    Ok(eps.sub(&eps_hat)?.sqr()?.mean_all()?)
}

/// Training loss: k ~ U[0, K), eps ~ N(0, I), per batch element.
pub fn diffusion_loss(
    model: &dyn EpsModel,
    sched: &NoiseSchedule,
    x0: &Tensor,
    cond: &Tensor,
    rng: &mut SeedRng,
) -> Result<Tensor> {
    use rand::Rng;
    let b = x0.dims()[0];
    let ks: Vec<usize> = (0..b).map(|_| rng.gen_range(0..sched.len())).collect();
    let eps = normal_tensor(rng, x0.dims(), x0.device())?.to_dtype(x0.dtype())?;
    loss_with_draws(model, sched, x0, cond, &ks, &eps)
}

/// One reverse step: posterior mean with the epsilon estimate substituted,
/// plus `sqrt(beta_k) * noise` (noise must be None at k = 0).
pub fn denoise_step(
    model: &dyn EpsModel,
    sched: &NoiseSchedule,
    x: &Tensor,
    k: usize,
    cond: &Tensor,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let b = x.dims()[0];
    let ks = vec![k; b];
    let eps_hat = model.predict(x, &ks, cond)?;
    let beta = sched.betas[k];
    let alpha = sched.alphas[k];
    let abar = sched.alpha_bar[k];
    let coef = beta / (1.0 - abar).sqrt();
    let mean = ((x - (eps_hat * coef)?)? * (1.0 / alpha.sqrt()))?;
    match noise {
        Some(z) => Ok((mean + (z * beta.sqrt())?)?),
        None => Ok(mean),
    }
}

/// Full ancestral sampling from pure noise down to x0 (normalized space).
pub fn sample(
    model: &dyn EpsModel,
    sched: &NoiseSchedule,
    cond: &Tensor,
    channels: usize,
    horizon: usize,
    rng: &mut SeedRng,
) -> Result<Tensor> {
    let b = cond.dims()[0];
    let dev = cond.device();
    let mut x = normal_tensor(rng, &[b, channels, horizon], dev)?.to_dtype(cond.dtype())?;
    for k in (0..sched.len()).rev() {
        let noise = if k > 0 {
            Some(normal_tensor(rng, &[b, channels, horizon], dev)?.to_dtype(cond.dtype())?)
        } else {
            None
        };
        x = denoise_step(model, sched, &x, k, cond, noise.as_ref())?;
    }
    Ok(x)
}

/// Per-dimension min/max normalizer mapping training actions into [-1, 1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl Normalizer {
    pub fn fit(actions: impl Iterator<Item = [f32; ACTION_DIM]>) -> Self {
        let mut lo = [f32::MAX; ACTION_DIM];
        let mut hi = [f32::MIN; ACTION_DIM];
        for a in actions {
            for d in 0..ACTION_DIM {
                lo[d] = lo[d].min(a[d]);
                hi[d] = hi[d].max(a[d]);
            }
        }
        for d in 0..ACTION_DIM {
            if !(hi[d] - lo[d]).is_finite() || hi[d] - lo[d] < 1e-6 {
                // degenerate dimension: widen so the map stays invertible
                let c = if lo[d].is_finite() { lo[d] } else { 0.0 };
                lo[d] = c - 0.5;
                hi[d] = c + 0.5;
            }
        }
        Normalizer {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        }
    }

    pub fn normalize(&self, a: &[f32; ACTION_DIM]) -> [f32; ACTION_DIM] {
        let mut out = [0f32; ACTION_DIM];
        for d in 0..ACTION_DIM {
            out[d] = 2.0 * (a[d] - self.lo[d]) / (self.hi[d] - self.lo[d]) - 1.0;
        }
        out
    }

    pub fn denormalize(&self, a: &[f32; ACTION_DIM]) -> [f32; ACTION_DIM] {
        let mut out = [0f32; ACTION_DIM];
        for d in 0..ACTION_DIM {
            out[d] = (a[d] + 1.0) * 0.5 * (self.hi[d] - self.lo[d]) + self.lo[d];
        }
        out
    }
}

//! Cross-modality attention transformer.
//!
//! Two pre-norm encoder layers over the 8-token (2 timesteps x 4 modalities)
//! batch. The forward pass returns the 256-d conditioning vector together
//! with the last layer's attention weights averaged over heads, which the
//! analysis stack turns into per-modality allocations.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{MODALITIES, NUM_TOKENS, TIMESTEPS};
use crate::params::{LinearP, ParamStore};
use crate::rng::SeedRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CmaConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub cond_dim: usize,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            layers: 2,
            heads: 8,
            model_dim: 128,
            head_dim: 16,
            mlp_hidden: 512,
            cond_dim: 256,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Config(format!(
                "heads ({}) * head_dim ({}) must equal model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("cma needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(d_k)) V`.
///
/// Accepts rank-2 `(n, d)` or rank-3 batched `(g, n, d)` inputs. Returns the
/// output together with the row-stochastic attention weights.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let rank = q.dims().len();
    if rank != k.dims().len() || rank != v.dims().len() || !(rank == 2 || rank == 3) {
        return Err(Error::Shape(format!(
            "attend expects matching rank-2 or rank-3 inputs, got {:?} {:?} {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let d_k = q.dims()[rank - 1];
    if k.dims()[rank - 1] != d_k {
        return Err(Error::Shape(format!(
            "query dim {} != key dim {}",
            d_k,
            k.dims()[rank - 1]
        )));
    }
    if k.dims()[rank - 2] != v.dims()[rank - 2] {
        return Err(Error::Shape(format!(
            "key rows {} != value rows {}",
            k.dims()[rank - 2],
            v.dims()[rank - 2]
        )));
    }
    let k_t = if rank == 2 { k.t()? } else { k.transpose(1, 2)? };
    let scale = 1.0 / (d_k as f64).sqrt();
    let logits = (q.matmul(&k_t)? * scale)?;
    let weights = candle_nn::ops::softmax(&logits, rank - 1)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

struct LayerNormP {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNormP {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNormP {
            gamma: store.add(&format!("{name}.gamma"), &[dim], vec![1.0; dim], false)?,
            beta: store.add(&format!("{name}.beta"), &[dim], vec![0.0; dim], false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ln = candle_nn::LayerNorm::new(self.gamma.clone(), self.beta.clone(), 1e-5);
        Ok(candle_nn::Module::forward(&ln, x)?)
    }
}

struct CmaBlock {
    ln1: LayerNormP,
    wq: LinearP,
    wk: LinearP,
    wv: LinearP,
    wo: LinearP,
    ln2: LayerNormP,
    fc1: LinearP,
    fc2: LinearP,
}

impl CmaBlock {
    fn init(store: &mut ParamStore, rng: &mut SeedRng, name: &str, cfg: &CmaConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(CmaBlock {
            ln1: LayerNormP::init(store, &format!("{name}.ln1"), d)?,
            wq: LinearP::init(store, rng, &format!("{name}.wq"), d, d)?,
            wk: LinearP::init(store, rng, &format!("{name}.wk"), d, d)?,
            wv: LinearP::init(store, rng, &format!("{name}.wv"), d, d)?,
            wo: LinearP::init(store, rng, &format!("{name}.wo"), d, d)?,
            ln2: LayerNormP::init(store, &format!("{name}.ln2"), d)?,
            fc1: LinearP::init(store, rng, &format!("{name}.fc1"), d, cfg.mlp_hidden)?,
            fc2: LinearP::init(store, rng, &format!("{name}.fc2"), cfg.mlp_hidden, d)?,
        })
    }

    /// x: (B, S, D). Returns (x', per-head weights (B, H, S, S)).
    fn forward(&self, x: &Tensor, cfg: &CmaConfig) -> Result<(Tensor, Tensor)> {
        let (b, s, d) = x.dims3()?;
        let h = cfg.heads;
        let hd = cfg.head_dim;
        let norm = self.ln1.forward(x)?;
        let split = |t: Tensor| -> Result<Tensor> {
            // (B,S,D) -> (B*H, S, hd)
            Ok(t.reshape((b, s, h, hd))?
                .transpose(1, 2)?
                .reshape((b * h, s, hd))?
                .contiguous()?)
        };
        let q = split(self.wq.forward(&norm)?)?;
        let k = split(self.wk.forward(&norm)?)?;
        let v = split(self.wv.forward(&norm)?)?;
        let (ctx, weights) = attend(&q, &k, &v)?;
        let ctx = ctx
            .reshape((b, h, s, hd))?
            .transpose(1, 2)?
            .reshape((b, s, d))?
            .contiguous()?;
        let x = (x + self.wo.forward(&ctx)?)?;
        let norm2 = self.ln2.forward(&x)?;
        let mlp = self
            .fc2
            .forward(&candle_nn::ops::silu(&self.fc1.forward(&norm2)?)?)?;
        let x = (x + mlp)?;
        Ok((x, weights.reshape((b, h, s, s))?))
    }
}

pub struct Cma {
    pub cfg: CmaConfig,
    blocks: Vec<CmaBlock>,
    final_ln: LayerNormP,
    cond_proj: LinearP,
}

/// Everything the CMA forward pass exposes.
pub struct CmaOutput {
    /// (B, cond_dim) conditioning vector for the diffusion head.
    pub cond: Tensor,
    /// (B, S, D) output tokens after the final norm.
    pub tokens: Tensor,
    /// (B, S, S) last-layer attention weights averaged over heads.
    pub attn: Tensor,
}

impl Cma {
    pub fn init(store: &mut ParamStore, rng: &mut SeedRng, cfg: CmaConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(CmaBlock::init(store, rng, &format!("cma.layer{i}"), &cfg)?);
        }
        let final_ln = LayerNormP::init(store, "cma.final_ln", cfg.model_dim)?;
        let cond_proj = LinearP::init(
            store,
            rng,
            "cma.cond_proj",
            NUM_TOKENS * cfg.model_dim,
            cfg.cond_dim,
        )?;
        Ok(Cma {
            cfg,
            blocks,
            final_ln,
            cond_proj,
        })
    }

    /// tokens: (S, B, D) with S = T*N = 8.
    pub fn forward(&self, tokens: &Tensor) -> Result<CmaOutput> {
        let dims = tokens.dims();
        if dims.len() != 3 || dims[0] != NUM_TOKENS || dims[2] != self.cfg.model_dim {
            return Err(Error::Shape(format!(
                "cma expects ({NUM_TOKENS}, B, {}), got {dims:?}",
                self.cfg.model_dim
            )));
        }
        let mut x = tokens.transpose(0, 1)?.contiguous()?; // (B, S, D)
        let mut last_weights = None;
        for block in &self.blocks {
            let (nx, w) = block.forward(&x, &self.cfg)?;
            x = nx;
            last_weights = Some(w);
        }
        let tokens_out = self.final_ln.forward(&x)?;
        let (b, s, d) = tokens_out.dims3()?;
        let cond = self.cond_proj.forward(&tokens_out.reshape((b, s * d))?)?;
        let attn = last_weights
            .expect("at least one layer")
            .mean(1)?; // (B, S, S), head-averaged
        Ok(CmaOutput {
            cond,
            tokens: tokens_out,
            attn,
        })
    }
}

/// Fold an 8x8 row-stochastic attention matrix into the fraction of attention
/// paid to each of the four modalities: sum the two key columns (both
/// timesteps) per modality, then average over the 8 query rows. The result is
/// non-negative and sums to 1.
pub fn allocation(attn: &[f32]) -> Result<[f32; MODALITIES]> {
    if attn.len() != NUM_TOKENS * NUM_TOKENS {
        return Err(Error::Shape(format!(
            "allocation expects an 8x8 matrix, got {} values",
            attn.len()
        )));
    }
    let mut out = [0f32; MODALITIES];
    for row in 0..NUM_TOKENS {
        for m in 0..MODALITIES {
            for t in 0..TIMESTEPS {
                out[m] += attn[row * NUM_TOKENS + t * MODALITIES + m];
            }
        }
    }
    for v in out.iter_mut() {
        *v /= NUM_TOKENS as f32;
    }
    Ok(out)
}

/// Attention weights for a single frame, plus the derived allocation.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub matrix: Vec<f32>,
    pub allocation: [f32; MODALITIES],
}

impl AttentionRecord {
    pub fn from_matrix(matrix: Vec<f32>) -> Result<Self> {
        let allocation = allocation(&matrix)?;
        Ok(AttentionRecord { matrix, allocation })
    }
}

pub fn default_dtype() -> DType {
    DType::F32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EMBED_DIM;
    use crate::rng::rng_from_seed;
    use candle_core::Device;

    fn vecf(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn attend_equal_logits_is_uniform() {
        let dev = Device::Cpu;
        let q = Tensor::zeros(&[3usize, 4], DType::F32, &dev).unwrap();
        let k = Tensor::zeros(&[3usize, 4], DType::F32, &dev).unwrap();
        let v = Tensor::from_vec(vec![1f32, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], &dev).unwrap();
        let (out, w) = attend(&q, &k, &v).unwrap();
        for x in vecf(&w) {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
        let o = vecf(&out);
        for row in 0..3 {
            assert!((o[row * 2] - 3.0).abs() < 1e-6); // column means of V
            assert!((o[row * 2 + 1] - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attend_two_token_oracle() {
        // n=2, d_k=1, Q=[[1],[0]], K=[[1],[0]], V=I2.
        // Row 1 logits (1, 0) -> (e/(e+1), 1/(e+1)); row 2 -> (0.5, 0.5).
        let dev = Device::Cpu;
        let q = Tensor::from_vec(vec![1f32, 0.0], &[2, 1], &dev).unwrap();
        let k = q.clone();
        let v = Tensor::from_vec(vec![1f32, 0.0, 0.0, 1.0], &[2, 2], &dev).unwrap();
        let (out, w) = attend(&q, &k, &v).unwrap();
        let e = std::f64::consts::E;
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5];
        for (got, want) in vecf(&w).iter().zip(expect) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
        // V = I so output equals the weights
        for (a, b) in vecf(&out).iter().zip(vecf(&w)) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn attend_scales_by_sqrt_dk() {
        // d_k=4: rows built from a 2*I pattern; logits must be divided by 2.
        let dev = Device::Cpu;
        let mut qv = vec![0f32; 2 * 4];
        qv[0] = 2.0; // row0 = 2*e1
        qv[5] = 2.0; // row1 = 2*e2
        let q = Tensor::from_vec(qv.clone(), &[2, 4], &dev).unwrap();
        let k = Tensor::from_vec(qv, &[2, 4], &dev).unwrap();
        let v = Tensor::from_vec(vec![1f32, 0.0, 0.0, 1.0], &[2, 2], &dev).unwrap();
        let (_, w) = attend(&q, &k, &v).unwrap();
        // high-precision oracle: logit matrix = [[4,0],[0,4]]/sqrt(4)=[[2,0],[0,2]]
        let p = (2f64).exp() / ((2f64).exp() + 1.0);
        let expect = [p, 1.0 - p, 1.0 - p, p];
        for (got, want) in vecf(&w).iter().zip(expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn attend_dimension_mismatch() {
        let dev = Device::Cpu;
        let q = Tensor::zeros(&[2usize, 3], DType::F32, &dev).unwrap();
        let k = Tensor::zeros(&[2usize, 4], DType::F32, &dev).unwrap();
        let v = Tensor::zeros(&[2usize, 2], DType::F32, &dev).unwrap();
        assert!(attend(&q, &k, &v).is_err());
    }

    fn tiny_cma(seed: u64) -> (ParamStore, Cma) {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(seed);
        let cma = Cma::init(&mut store, &mut rng, CmaConfig::default()).unwrap();
        (store, cma)
    }

    fn random_tokens(b: usize, seed: u64) -> Tensor {
        let data = crate::rng::normal_vec(&mut rng_from_seed(seed), NUM_TOKENS * b * EMBED_DIM);
        Tensor::from_vec(data, &[NUM_TOKENS, b, EMBED_DIM], &Device::Cpu).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let (_store, cma) = tiny_cma(0);
        let out = cma.forward(&random_tokens(1, 1)).unwrap();
        assert_eq!(out.cond.dims(), &[1, 256]);
        assert_eq!(out.attn.dims(), &[1, 8, 8]);
        assert_eq!(out.tokens.dims(), &[1, 8, 128]);
    }

    #[test]
    fn attn_rows_sum_to_one() {
        let (_store, cma) = tiny_cma(0);
        let out = cma.forward(&random_tokens(4, 2)).unwrap();
        let w = vecf(&out.attn);
        for b in 0..4 {
            for row in 0..8 {
                let s: f32 = (0..8).map(|c| w[b * 64 + row * 8 + c]).sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
                for c in 0..8 {
                    assert!(w[b * 64 + row * 8 + c] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn batch_elements_are_independent() {
        let (_store, cma) = tiny_cma(0);
        let toks = random_tokens(3, 5);
        let out = cma.forward(&toks).unwrap();
        // permute batch: swap elements 0 and 2
        let perm = Tensor::from_vec(vec![2u32, 1, 0], 3, &Device::Cpu).unwrap();
        let toks_p = toks.index_select(&perm, 1).unwrap();
        let out_p = cma.forward(&toks_p).unwrap();
        let c = vecf(&out.cond);
        let cp = vecf(&out_p.cond);
        let d = 256;
        for i in 0..d {
            assert!((c[i] - cp[2 * d + i]).abs() < 1e-5);
            assert!((c[2 * d + i] - cp[i]).abs() < 1e-5);
            assert!((c[d + i] - cp[d + i]).abs() < 1e-5);
        }
    }

    #[test]
    fn allocation_uniform_and_identity() {
        let uniform = vec![1.0f32 / 8.0; 64];
        let a = allocation(&uniform).unwrap();
        for v in a {
            assert!((v - 0.25).abs() < 1e-6);
        }
        // identity matrix: each modality owns 2 of the 8 diagonal entries.
        // brute-force check of the definition done by hand: rows r attend
        // fully to key r; modality of key r is r % 4; averaging over rows
        // gives 2/8 = 0.25 per modality.
        let mut ident = vec![0f32; 64];
        for i in 0..8 {
            ident[i * 8 + i] = 1.0;
        }
        let a = allocation(&ident).unwrap();
        for v in a {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn allocation_sums_to_one() {
        let (_store, cma) = tiny_cma(1);
        let out = cma.forward(&random_tokens(2, 9)).unwrap();
        let w = vecf(&out.attn);
        for b in 0..2 {
            let a = allocation(&w[b * 64..(b + 1) * 64]).unwrap();
            let s: f32 = a.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(a.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        // adding a constant to all logits of one row leaves that row's
        // softmax unchanged
        let dev = Device::Cpu;
        let logits =
            Tensor::from_vec(vec![0.3f32, -0.7, 1.1, 2.0, 0.0, -1.5], &[2, 3], &dev).unwrap();
        let shift = Tensor::from_vec(vec![5.0f32, 0.0], &[2, 1], &dev).unwrap();
        let a = candle_nn::ops::softmax(&logits, 1).unwrap();
        let b = candle_nn::ops::softmax(&logits.broadcast_add(&shift).unwrap(), 1).unwrap();
        for (x, y) in vecf(&a).iter().zip(vecf(&b)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

//! Per-modality encoders into the shared 128-d token space.
//!
//! Images go through a frozen randomly-initialized conv stack (a stand-in for
//! a frozen pretrained backbone) followed by a trainable affine projection;
//! state and tactile vectors go through trainable affine maps. `build_tokens`
//! stacks the two-timestep, four-modality embeddings into the (T*N, B, D)
//! token batch consumed by the CMA module, adding a learned slot embedding
//! per (timestep, modality) position.

use candle_core::Tensor;

use crate::params::{orthogonal_rows, LinearP, ParamStore};
use crate::rng::{rng_from_seed, SeedRng};
use crate::synthworld::{IMG3_SIZE, IMGG_SIZE, STATE_DIM, TACTILE_DIM};
use crate::{Error, Result};

pub const EMBED_DIM: usize = 128;
pub const TIMESTEPS: usize = 2;
pub const MODALITIES: usize = 4;
pub const NUM_TOKENS: usize = TIMESTEPS * MODALITIES;

/// Fixed token order: (t-1, img3), (t-1, imgg), (t-1, state), (t-1, tactile),
/// then the same four for t.
pub const MODALITY_NAMES: [&str; MODALITIES] = ["img3", "imgg", "state", "tactile"];

const CONV_CHANNELS: [usize; 3] = [8, 16, 32];

/// Frozen conv feature extractor: three 3x3 stride-2 stages with SiLU
/// (f(0)=0, so an all-zero image yields all-zero features), no biases,
/// weights fixed at init from a dedicated seed.
pub struct FrozenConvEncoder {
    stages: Vec<Tensor>,
    pub input_size: usize,
    pub feat_dim: usize,
}

impl FrozenConvEncoder {
    pub fn init(store: &mut ParamStore, name: &str, input_size: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut stages = Vec::new();
        let mut c_in = 1usize;
        let mut hw = input_size;
        for (i, &c_out) in CONV_CHANNELS.iter().enumerate() {
            let w = orthogonal_rows(&mut rng, c_out, c_in * 9, 1.0);
            let t = store.add(
                &format!("{name}.conv{i}.weight"),
                &[c_out, c_in, 3, 3],
                w,
                true,
            )?;
            stages.push(t);
            c_in = c_out;
            hw = hw.div_ceil(2);
        }
        Ok(FrozenConvEncoder {
            stages,
            input_size,
            feat_dim: hw * hw * CONV_CHANNELS[2],
        })
    }

    /// (B, 1, H, W) -> (B, feat_dim) flattened frozen features.
    pub fn features(&self, img: &Tensor) -> Result<Tensor> {
        let dims = img.dims();
        if dims.len() != 4 || dims[2] != self.input_size || dims[3] != self.input_size {
            return Err(Error::Shape(format!(
                "image encoder expects (B,1,{0},{0}), got {dims:?}",
                self.input_size
            )));
        }
        let mut x = img.clone();
        for w in &self.stages {
            x = x.conv2d(w, 1, 2, 1, 1)?;
            x = candle_nn::ops::silu(&x)?;
        }
        Ok(x.flatten_from(1)?)
    }
}

pub struct ImageEncoder {
    pub frozen: FrozenConvEncoder,
    pub proj: LinearP,
}

impl ImageEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        name: &str,
        input_size: usize,
        frozen_seed: u64,
    ) -> Result<Self> {
        let frozen = FrozenConvEncoder::init(store, &format!("{name}.frozen"), input_size, frozen_seed)?;
        let proj = LinearP::init(store, rng, &format!("{name}.proj"), frozen.feat_dim, EMBED_DIM)?;
        Ok(ImageEncoder { frozen, proj })
    }

    /// Full path: (B,1,H,W) image -> (B,128) embedding.
    pub fn encode(&self, img: &Tensor) -> Result<Tensor> {
        let feats = self.frozen.features(img)?;
        self.proj.forward(&feats)
    }

    /// Projection only, for precomputed frozen features.
    pub fn project(&self, feats: &Tensor) -> Result<Tensor> {
        self.proj.forward(feats)
    }
}

pub struct VecEncoder {
    pub linear: LinearP,
    pub in_dim: usize,
}

impl VecEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut SeedRng, name: &str, in_dim: usize) -> Result<Self> {
        Ok(VecEncoder {
            linear: LinearP::init(store, rng, name, in_dim, EMBED_DIM)?,
            in_dim,
        })
    }

    /// (B, in_dim) -> (B, 128). Rejects non-finite input.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 2 || dims[1] != self.in_dim {
            return Err(Error::Shape(format!(
                "vector encoder expects (B,{}), got {dims:?}",
                self.in_dim
            )));
        }
        let vals: Vec<f32> = x.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder input".into()));
        }
        self.linear.forward(x)
    }
}

/// One timestep of per-modality inputs with the image features already
/// through the frozen stages.
pub struct FrameFeats {
    pub f3: Tensor,
    pub fg: Tensor,
    pub state: Tensor,
    pub tactile: Tensor,
}

pub struct ObsEncoder {
    pub img3: ImageEncoder,
    pub imgg: ImageEncoder,
    pub state: VecEncoder,
    pub tactile: VecEncoder,
    pub slots: Tensor,
}

impl ObsEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut SeedRng, frozen_seed: u64) -> Result<Self> {
        let img3 = ImageEncoder::init(store, rng, "enc.img3", IMG3_SIZE, frozen_seed)?;
        let imgg = ImageEncoder::init(
            store,
            rng,
            "enc.imgg",
            IMGG_SIZE,
            frozen_seed.wrapping_add(1),
        )?;
        let state = VecEncoder::init(store, rng, "enc.state", STATE_DIM)?;
        let tactile = VecEncoder::init(store, rng, "enc.tactile", TACTILE_DIM)?;
        let slots = store.add(
            "enc.slots",
            &[NUM_TOKENS, EMBED_DIM],
            crate::rng::normal_vec(rng, NUM_TOKENS * EMBED_DIM)
                .into_iter()
                .map(|v| v * 0.02)
                .collect(),
            false,
        )?;
        Ok(ObsEncoder {
            img3,
            imgg,
            state,
            tactile,
            slots,
        })
    }

    /// Stack the 8 modality/timestep embeddings into (T*N, B, D) and add the
    /// learned slot table.
    pub fn build_tokens(&self, prev: &FrameFeats, cur: &FrameFeats) -> Result<Tensor> {
        let toks = [
            self.img3.project(&prev.f3)?,
            self.imgg.project(&prev.fg)?,
            self.state.linear.forward(&prev.state)?,
            self.tactile.linear.forward(&prev.tactile)?,
            self.img3.project(&cur.f3)?,
            self.imgg.project(&cur.fg)?,
            self.state.linear.forward(&cur.state)?,
            self.tactile.linear.forward(&cur.tactile)?,
        ];
        let stacked = Tensor::stack(&toks, 0)?; // (8, B, D)
        let slots = self.slots.reshape((NUM_TOKENS, 1, EMBED_DIM))?;
        Ok(stacked.broadcast_add(&slots)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap()
    }

    fn vecf(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn encode_state_zero_cases() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(0);
        let enc = VecEncoder::init(&mut store, &mut rng, "enc.state", STATE_DIM).unwrap();
        // zero bias, zero input -> zero output
        store
            .set("enc.state.bias", &zeros(&[EMBED_DIM]))
            .unwrap();
        let out = enc.encode(&zeros(&[1, STATE_DIM])).unwrap();
        assert!(vecf(&out).iter().all(|&v| v == 0.0));
        // arbitrary bias, zero input -> bias
        let b: Vec<f32> = (0..EMBED_DIM).map(|i| i as f32 * 0.5).collect();
        store
            .set(
                "enc.state.bias",
                &Tensor::from_vec(b.clone(), &[EMBED_DIM], &Device::Cpu).unwrap(),
            )
            .unwrap();
        let out = enc.encode(&zeros(&[1, STATE_DIM])).unwrap();
        assert_eq!(vecf(&out), b);
    }

    #[test]
    fn encode_state_identity_padded() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(0);
        let enc = VecEncoder::init(&mut store, &mut rng, "enc.state", STATE_DIM).unwrap();
        let mut w = vec![0f32; EMBED_DIM * STATE_DIM];
        for i in 0..STATE_DIM {
            w[i * STATE_DIM + i] = 1.0;
        }
        store
            .set(
                "enc.state.weight",
                &Tensor::from_vec(w, &[EMBED_DIM, STATE_DIM], &Device::Cpu).unwrap(),
            )
            .unwrap();
        store.set("enc.state.bias", &zeros(&[EMBED_DIM])).unwrap();
        let x = Tensor::from_vec(vec![1f32, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, STATE_DIM], &Device::Cpu)
            .unwrap();
        let out = vecf(&enc.encode(&x).unwrap());
        assert_eq!(&out[..6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(out[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_tactile_zero_and_bias() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(0);
        let enc = VecEncoder::init(&mut store, &mut rng, "enc.tactile", TACTILE_DIM).unwrap();
        store.set("enc.tactile.bias", &zeros(&[EMBED_DIM])).unwrap();
        let out = enc.encode(&zeros(&[2, TACTILE_DIM])).unwrap();
        assert!(vecf(&out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(0);
        let enc = VecEncoder::init(&mut store, &mut rng, "enc.state", STATE_DIM).unwrap();
        let x = Tensor::from_vec(
            vec![0f32, f32::NAN, 0.0, 0.0, 0.0, 0.0],
            &[1, STATE_DIM],
            &Device::Cpu,
        )
        .unwrap();
        assert!(matches!(enc.encode(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn image_zero_propagation() {
        // zero image, zero projection bias -> zero embedding (SiLU(0)=0)
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(3);
        let enc = ImageEncoder::init(&mut store, &mut rng, "enc.img3", IMG3_SIZE, 99).unwrap();
        store.set("enc.img3.proj.bias", &zeros(&[EMBED_DIM])).unwrap();
        let img = zeros(&[1, 1, IMG3_SIZE, IMG3_SIZE]);
        let out = vecf(&enc.encode(&img).unwrap());
        assert!(out.iter().all(|&v| v == 0.0), "max {:?}", out.iter().cloned().fold(0f32, f32::max));
    }

    #[test]
    fn image_encode_is_pure_and_shape_checked() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(3);
        let enc = ImageEncoder::init(&mut store, &mut rng, "enc.imgg", IMGG_SIZE, 100).unwrap();
        let img = Tensor::rand(0f32, 1f32, &[2, 1, IMGG_SIZE, IMGG_SIZE], &Device::Cpu).unwrap();
        let a = vecf(&enc.encode(&img).unwrap());
        let b = vecf(&enc.encode(&img).unwrap());
        assert_eq!(a, b);
        let wrong = zeros(&[1, 1, IMG3_SIZE, IMG3_SIZE]);
        assert!(enc.encode(&wrong).is_err());
    }

    #[test]
    fn token_batch_shape_and_zero_case() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(0);
        let enc = ObsEncoder::init(&mut store, &mut rng, 7).unwrap();
        for b in [1usize, 32] {
            let frame = FrameFeats {
                f3: zeros(&[b, enc.img3.frozen.feat_dim]),
                fg: zeros(&[b, enc.imgg.frozen.feat_dim]),
                state: zeros(&[b, STATE_DIM]),
                tactile: zeros(&[b, TACTILE_DIM]),
            };
            let toks = enc.build_tokens(&frame, &frame).unwrap();
            assert_eq!(toks.dims(), &[NUM_TOKENS, b, EMBED_DIM]);
        }
        // zero slots + zero biases + zero inputs -> all-zero tokens
        store.set("enc.slots", &zeros(&[NUM_TOKENS, EMBED_DIM])).unwrap();
        for name in [
            "enc.img3.proj.bias",
            "enc.imgg.proj.bias",
            "enc.state.bias",
            "enc.tactile.bias",
        ] {
            store.set(name, &zeros(&[EMBED_DIM])).unwrap();
        }
        let frame = FrameFeats {
            f3: zeros(&[1, enc.img3.frozen.feat_dim]),
            fg: zeros(&[1, enc.imgg.frozen.feat_dim]),
            state: zeros(&[1, STATE_DIM]),
            tactile: zeros(&[1, TACTILE_DIM]),
        };
        let toks = enc.build_tokens(&frame, &frame).unwrap();
        assert!(vecf(&toks).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_feat_dims() {
        let mut store = ParamStore::new(DType::F32);
        let enc3 = FrozenConvEncoder::init(&mut store, "f3", IMG3_SIZE, 1).unwrap();
        let encg = FrozenConvEncoder::init(&mut store, "fg", IMGG_SIZE, 2).unwrap();
        assert_eq!(enc3.feat_dim, 4 * 4 * 32);
        assert_eq!(encg.feat_dim, 2 * 2 * 32);
        let img = Tensor::rand(0f32, 1f32, &[3, 1, IMG3_SIZE, IMG3_SIZE], &Device::Cpu).unwrap();
        assert_eq!(enc3.features(&img).unwrap().dims(), &[3, 512]);
    }
}

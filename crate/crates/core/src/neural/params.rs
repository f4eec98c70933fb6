//! Parameter bookkeeping, seeded initialization and the forward context.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::quant::QuantizedTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

impl Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default for linear and conv layers.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }

    /// He normal for ReLU-family networks.
    pub fn kaiming(fan_in: usize) -> Self {
        Init::Normal((2.0 / fan_in as f64).sqrt())
    }
}

/// Every named tensor of a model, split by role.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    pub trainable: BTreeMap<String, Var>,
    pub frozen: BTreeMap<String, Tensor>,
    pub quantized: BTreeMap<String, std::sync::Arc<QuantizedTensor>>,
    /// Non-trainable state updated during training (batch-norm statistics).
    pub buffers: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn n_trainable(&self) -> usize {
        self.trainable.values().map(|v| v.elem_count()).sum()
    }

    pub fn n_frozen(&self) -> usize {
        self.frozen.values().map(|t| t.elem_count()).sum::<usize>()
            + self.quantized.values().map(|q| q.len()).sum::<usize>()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.trainable.values().cloned().collect()
    }

    /// SHA-256 over frozen and quantized weights in name order.
    pub fn frozen_checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.frozen {
            h.update(name.as_bytes());
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        for (name, q) in &self.quantized {
            h.update(name.as_bytes());
            for v in q.dequantize() {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Trainable tensors and buffers, for checkpoints.
    pub fn state(&self) -> HashMap<String, Tensor> {
        self.trainable
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.trainable
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites trainable tensors and buffers present in `state`.
    pub fn restore(&self, state: &HashMap<String, Tensor>) -> Result<usize> {
        let mut n = 0;
        for (k, v) in self.trainable.iter().chain(&self.buffers) {
            if let Some(t) = state.get(k) {
                if t.dims() != v.dims() {
                    return Err(Error::Format(format!("{k}: shape {:?} vs {:?}", t.dims(), v.dims())));
                }
                v.set(&t.to_dtype(v.dtype())?.to_device(v.device())?)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Creates parameters, either from a loaded weight map or from a seeded initializer.
pub struct Builder<'a> {
    pub params: ParamSet,
    seed: u64,
    rng: ChaCha8Rng,
    loaded: Option<&'a HashMap<String, Tensor>>,
    device: Device,
    dtype: DType,
}

impl<'a> Builder<'a> {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Self {
        Self {
            params: ParamSet::default(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loaded: None,
            device: device.clone(),
            dtype,
        }
    }

    /// Frozen tensors must then come from `weights`; trainable ones are taken
    /// from it when present.
    pub fn with_weights(mut self, weights: &'a HashMap<String, Tensor>) -> Self {
        self.loaded = Some(weights);
        self
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn has_weights(&self) -> bool {
        self.loaded.is_some()
    }

    /// Draws from the builder's sequential stream.
    pub fn init(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut rng = self.rng.clone();
        let t = self.sample(&mut rng, shape, init);
        self.rng = rng;
        t
    }

    /// Draws from a stream keyed by the parameter name, so a parameter's
    /// initial value does not depend on which other parameters exist.
    fn init_named(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        let d = h.finalize();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")));
        self.sample(&mut rng, shape, init)
    }

    fn sample(&self, rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        Ok(Tensor::from_vec(v, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn from_loaded(&self, name: &str, shape: &[usize]) -> Result<Option<Tensor>> {
        let Some(map) = self.loaded else { return Ok(None) };
        let Some(t) = map.get(name) else { return Ok(None) };
        if t.dims() != shape {
            return Err(Error::Format(format!(
                "weight {name} has shape {:?}, expected {shape:?}",
                t.dims()
            )));
        }
        Ok(Some(t.to_dtype(self.dtype)?.to_device(&self.device)?))
    }

    fn raw_frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match self.from_loaded(name, shape)? {
            Some(t) => Ok(t),
            None if self.loaded.is_some() => Err(Error::Format(format!("checkpoint lacks weight {name}"))),
            None => self.init_named(name, shape, init),
        }
    }

    pub fn frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.raw_frozen(name, shape, init)?;
        self.params.frozen.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn quantized(&mut self, name: &str, shape: &[usize], init: Init, block: usize) -> Result<std::sync::Arc<QuantizedTensor>> {
        let t = self.raw_frozen(name, shape, init)?;
        let q = std::sync::Arc::new(QuantizedTensor::from_tensor(&t, block)?);
        self.params.quantized.insert(name.to_string(), q.clone());
        Ok(q)
    }

    pub fn trainable(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = match self.from_loaded(name, shape)? {
            Some(t) => t,
            None => self.init_named(name, shape, init)?,
        };
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.params.trainable.insert(name.to_string(), v);
        Ok(out)
    }

    /// Frozen or trainable depending on `train`.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, train: bool) -> Result<Tensor> {
        if train {
            self.trainable(name, shape, init)
        } else {
            self.frozen(name, shape, init)
        }
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let t = match self.from_loaded(name, shape)? {
            Some(t) => t,
            None => self.init_named(name, shape, init)?,
        };
        let v = Var::from_tensor(&t)?;
        self.params.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }
}

/// Forward-pass mode and the dropout random stream.
pub struct Ctx {
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Inverted dropout; identity in eval mode or for `p == 0`.
    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

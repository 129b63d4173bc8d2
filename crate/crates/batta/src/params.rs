//! Named parameter storage and deterministic initialisation.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Named weight tensors in a stable (sorted) order.
pub type Weights = BTreeMap<String, Tensor>;

/// Parameters that are stored with the model but never trained.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".pe_gaussian")
}

/// `VarBuilder` backend that creates trainable variables on first request,
/// drawing initial values from a seeded ChaCha stream.
///
/// Construction order is deterministic, so the same seed always yields the
/// same weights.
pub struct SeededParams {
    inner: Mutex<(ChaCha8Rng, BTreeMap<String, Var>)>,
}

impl SeededParams {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Mutex::new((ChaCha8Rng::seed_from_u64(seed), BTreeMap::new())),
        }
    }

    pub fn var_builder(&self) -> VarBuilder<'_> {
        VarBuilder::from_backend(Box::new(self), DType::F32, Device::Cpu)
    }

    pub fn vars(&self) -> BTreeMap<String, Var> {
        self.inner.lock().expect("param lock").1.clone()
    }

    /// Variables that the optimiser should update.
    pub fn trainable(&self) -> Vec<Var> {
        self.vars()
            .into_iter()
            .filter(|(name, _)| !is_buffer(name))
            .map(|(_, v)| v)
            .collect()
    }

    /// Detached copy of the current values.
    pub fn snapshot(&self) -> candle_core::Result<Weights> {
        self.vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every variable with the value of the same name in `weights`.
    pub fn load(&self, weights: &Weights) -> candle_core::Result<()> {
        for (name, var) in self.vars() {
            match weights.get(&name) {
                Some(t) => var.set(t)?,
                None => candle_core::bail!("missing weight {name}"),
            }
        }
        Ok(())
    }
}

fn sample_init(rng: &mut ChaCha8Rng, shape: &Shape, init: Init) -> Vec<f32> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f32> {
        let d = Normal::new(mean, std.max(f64::MIN_POSITIVE)).expect("finite std");
        (0..n).map(|_| d.sample(rng) as f32).collect()
    };
    match init {
        Init::Const(v) => vec![v as f32; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up) as f32).collect(),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = fan.for_shape(shape).max(1) as f64;
            let std = non_linearity.gain() / fan.sqrt();
            match dist {
                candle_nn::init::NormalOrUniform::Normal => normal(rng, 0.0, std),
                candle_nn::init::NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                }
            }
        }
    }
}

impl SimpleBackend for &SeededParams {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut guard = self.inner.lock().expect("param lock");
        let (rng, vars) = &mut *guard;
        if let Some(v) = vars.get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", v.shape(), s);
            }
            return Ok(v.as_tensor().clone());
        }
        let data = sample_init(rng, &s, h);
        let t = Tensor::from_vec(data, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let guard = self.inner.lock().expect("param lock");
        match guard.1.get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.lock().expect("param lock").1.contains_key(name)
    }
}

/// Builder over fixed tensors. Whatever is passed in is used as-is, so a
/// mixture of `Var`-backed and detached tensors yields a partially frozen
/// model.
pub fn fixed_builder(weights: HashMap<String, Tensor>) -> VarBuilder<'static> {
    VarBuilder::from_tensors(weights, DType::F32, &Device::Cpu)
}

/// Detached view of `weights`, suitable for inference.
pub fn frozen(weights: &Weights) -> HashMap<String, Tensor> {
    weights.iter().map(|(k, v)| (k.clone(), v.detach())).collect()
}

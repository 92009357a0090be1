//! Parameter storage and the few layer types the networks need.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops;
use crate::{Error, Result};

/// Non-trainable state such as batch-norm running statistics.
pub type Buffer = Arc<Mutex<Tensor>>;

/// Named trainable parameters and buffers, ordered by name.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Buffer>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert_param(&mut self, name: String, value: Tensor) -> Result<Var> {
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.params.insert(name, var.clone());
        Ok(var)
    }

    /// Registers a parameter drawn from `values`, row-major in `shape`.
    pub fn param(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.insert_param(name.to_string(), t)
    }

    pub fn param_from(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        self.insert_param(name.to_string(), value.clone())
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<Buffer> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid(format!("duplicate buffer name {name}")));
        }
        let b = Arc::new(Mutex::new(value.to_dtype(self.dtype)?));
        self.buffers.insert(name.to_string(), b.clone());
        Ok(b)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Buffer> {
        &self.buffers
    }

    /// Parameters whose name starts with `prefix`.
    pub fn params_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.params.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Copies of every parameter and buffer.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        for (k, b) in &self.buffers {
            out.insert(k.clone(), b.lock().expect("buffer lock").copy()?);
        }
        Ok(out)
    }

    /// Overwrites values from `tensors`; every stored name must be present.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.params {
            let t = tensors
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {k}")))?;
            if t.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {k}: expected shape {:?}, found {:?}",
                    v.dims(),
                    t.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        for (k, b) in &self.buffers {
            let t = tensors
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {k}")))?;
            let mut guard = b.lock().expect("buffer lock");
            if t.dims() != guard.dims() {
                return Err(Error::Checkpoint(format!("buffer {k}: shape mismatch")));
            }
            *guard = t.to_dtype(self.dtype)?.to_device(&self.device)?;
        }
        Ok(())
    }
}

/// Weight initialisers.
pub mod init {
    use super::*;

    /// He-normal with fan-out, as used for ReLU convolution stacks.
    pub fn kaiming_normal_fan_out(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
        let fan_out = shape[0] * shape[2..].iter().product::<usize>();
        let std = (2.0 / fan_out as f64).sqrt();
        let n = Normal::new(0.0, std).expect("positive std");
        (0..shape.iter().product()).map(|_| n.sample(rng)).collect()
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..shape.iter().product()).map(|_| rng.random_range(-bound..bound)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvInit {
    /// He-normal weights (fan-out), no bias.
    KaimingNoBias,
    /// Fan-in uniform weights and bias.
    Uniform,
}

/// 2-D convolution, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: ConvInit,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch, kernel, kernel];
        let fan_in = in_ch * kernel * kernel;
        let (w, bias) = match init {
            ConvInit::KaimingNoBias => (init::kaiming_normal_fan_out(rng, &shape), None),
            ConvInit::Uniform => {
                let w = init::uniform_fan_in(rng, &shape, fan_in);
                let b = init::uniform_fan_in(rng, &[out_ch], fan_in);
                (w, Some(b))
            }
        };
        let weight = store.param(&format!("{name}.weight"), &shape, w)?;
        let bias = match bias {
            Some(b) => Some(store.param(&format!("{name}.bias"), &[out_ch], b)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// A new parameter set initialised with a copy of `other`'s values.
    pub fn copy_of(store: &mut ParamStore, name: &str, other: &Conv2d, stride: usize) -> Result<Self> {
        let weight = store.param_from(&format!("{name}.weight"), &other.weight.as_tensor().copy()?)?;
        let bias = match &other.bias {
            Some(b) => Some(store.param_from(&format!("{name}.bias"), &b.as_tensor().copy()?)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: other.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(ops::bias_add(&y, b.as_tensor())?),
            None => Ok(y),
        }
    }
}

/// Batch normalisation over `(B, H, W)` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let dev = store.device().clone();
        let gamma = store.param(&format!("{name}.weight"), &[channels], vec![1.0; channels])?;
        let beta = store.param(&format!("{name}.bias"), &[channels], vec![0.0; channels])?;
        let running_mean = store.buffer(&format!("{name}.running_mean"), Tensor::zeros(channels, DType::F64, &dev)?)?;
        let running_var = store.buffer(&format!("{name}.running_var"), Tensor::ones(channels, DType::F64, &dev)?)?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode normalises with batch statistics and updates the running
    /// estimates; evaluation mode uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let dev = x.device();
        if train {
            let (mean, var) = ops::channel_stats(x)?;
            let n = (b * h * w) as f64;
            let m = self.momentum;
            let unbiased = n / (n - 1.0).max(1.0);
            let mean = Tensor::from_vec(mean, c, dev)?.to_dtype(DType::F64)?;
            let var = (Tensor::from_vec(var, c, dev)? * unbiased)?;
            {
                let mut rm = self.running_mean.lock().expect("buffer lock");
                *rm = ((&*rm * (1.0 - m))? + (mean.to_dtype(rm.dtype())? * m)?)?;
            }
            {
                let mut rv = self.running_var.lock().expect("buffer lock");
                *rv = ((&*rv * (1.0 - m))? + (var.to_dtype(rv.dtype())? * m)?)?;
            }
            return Ok(ops::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)?);
        }
        let dt = x.dtype();
        let rm = self.running_mean.lock().expect("buffer lock").to_dtype(dt)?;
        let rv = self.running_var.lock().expect("buffer lock").to_dtype(dt)?;
        let scale = self.gamma.as_tensor().mul(&(rv + self.eps)?.sqrt()?.recip()?)?;
        let shift = self.beta.as_tensor().sub(&rm.mul(&scale)?)?;
        let y = x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?;
        Ok(ops::bias_add(&y, &shift)?)
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let w = init::uniform_fan_in(rng, &[outputs, inputs], inputs);
        let b = init::uniform_fan_in(rng, &[outputs], inputs);
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[outputs, inputs], w)?,
            bias: store.param(&format!("{name}.bias"), &[outputs], b)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Logistic function written with `tanh`, which has an autodiff rule.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn batchnorm_train_and_eval() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.random_range(-2.0..5.0)).collect();
        let x = Tensor::from_vec(v, (2, 2, 3, 3), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = y.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        for v in m.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!(v.abs() < 1e-12);
        }
        let rm = bn.running_mean.lock().unwrap().to_vec1::<f64>().unwrap();
        let want = x.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in rm.iter().zip(want) {
            assert_relative_eq!(*a, 0.1 * b, epsilon = 1e-12);
        }
        // evaluation uses the stored statistics
        let e = bn.forward(&x, false).unwrap();
        assert_eq!(e.dims(), x.dims());
    }

    #[test]
    fn store_snapshot_round_trip() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3, 1, 1, ConvInit::Uniform).unwrap();
        let _bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
        let snap = store.snapshot().unwrap();
        assert_eq!(snap.len(), 6);
        conv.weight.set(&conv.weight.as_tensor().zeros_like().unwrap()).unwrap();
        store.load(&snap).unwrap();
        assert_eq!(
            conv.weight.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            snap["c.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(store.param("c.weight", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn sigmoid_values() {
        let x = Tensor::new(&[0.0f64, 2.0, -3.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in y.iter().zip([0.0f64, 2.0, -3.0]) {
            assert_relative_eq!(*a, 1.0 / (1.0 + (-b).exp()), epsilon = 1e-15);
        }
    }
}

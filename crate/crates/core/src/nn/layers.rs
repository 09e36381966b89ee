use candle_core::Tensor;

use super::ops;
use super::params::{Init, Scope};
use crate::error::Result;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(scope: &Scope<T>, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = cin * k * k;
        Ok(Self {
            weight: scope.get("weight", &[cout, cin, k, k], Init::FanIn(fan_in))?,
            bias: scope.get("bias", &[cout], Init::Zeros)?,
            stride,
            pad: (k - 1) / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn num_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(scope: &Scope<T>, channels: usize, max_groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.get("gamma", &[channels], Init::Ones)?,
            beta: scope.get("beta", &[channels], Init::Zeros)?,
            groups: num_groups(channels, max_groups),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::group_norm(x, self.groups, 1e-6)?;
        let y = y.broadcast_mul(&self.gamma.reshape((1, (), 1, 1))?)?;
        Ok(y.broadcast_add(&self.beta.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new<T: Real>(scope: &Scope<T>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let weight = scope.get("weight", &[dout, din], Init::FanIn(din))?;
        let bias = if bias {
            Some(scope.get("bias", &[dout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().expect("linear input must have a feature dimension");
        let rows = x.reshape(((), din))?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dims()[0];
        let y = rows.matmul(&self.weight.t()?)?.reshape(out_dims)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new<T: Real>(scope: &Scope<T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.get("gamma", &[dim], Init::Ones)?,
            beta: scope.get("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::layer_norm(x, 1e-6)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new<T: Real>(scope: &Scope<T>, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: scope.get("table", &[rows, dim], Init::Normal(0.02))?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Rows for `ids` (a 1-D u32 tensor).
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.table.index_select(ids, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn group_count_divides() {
        assert_eq!(num_groups(128, 32), 32);
        assert_eq!(num_groups(16, 32), 16);
        assert_eq!(num_groups(24, 32), 24);
        assert_eq!(num_groups(48, 32), 24);
        assert_eq!(num_groups(3, 32), 3);
    }

    #[test]
    fn linear_applies_to_last_dim() {
        let store = ParamStore::<f64>::new(0);
        let lin = Linear::new(&store.scope("l"), 3, 5, true).unwrap();
        let x = Tensor::ones((2, 4, 3), candle_core::DType::F64, store.device()).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 4, 5]);
        assert_eq!(store.num_params(""), 20);
    }
}

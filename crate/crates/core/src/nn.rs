//! Layer building blocks shared by the encoder, decoder and heads.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::graph::{BnParams, Graph, Var};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Fan-in scaled uniform initialization bound for a ReLU network.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Adds a kernel of dims (out, in/groups, k, k) with fan-in scaled init.
pub fn add_kernel<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: impl Into<String>,
    dims: [usize; 4],
) -> ParamId {
    let fan_in = dims[1] * dims[2] * dims[3];
    store.add(name, Tensor::uniform(dims, init_bound(fan_in), rng), ParamKind::Weight)
}

pub fn add_bias<T: Scalar>(store: &mut ParamStore<T>, name: impl Into<String>, channels: usize) -> ParamId {
    store.add(name, Tensor::zeros([1, channels, 1, 1]), ParamKind::Bias)
}

/// gamma = 1, beta = 0, running mean 0, running var 1.
pub fn add_batch_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> BnParams {
    let d = [1, channels, 1, 1];
    BnParams {
        gamma: store.add(format!("{prefix}.gamma"), Tensor::full(d, 1.0), ParamKind::Norm),
        beta: store.add(format!("{prefix}.beta"), Tensor::zeros(d), ParamKind::Norm),
        running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(d), ParamKind::Buffer),
        running_var: store.add(format!("{prefix}.running_var"), Tensor::full(d, 1.0), ParamKind::Buffer),
    }
}

/// Convolution with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let weight = add_kernel(store, rng, name, [cout, cin / spec.groups, kernel, kernel]);
        let bias = bias.then(|| add_bias(store, format!("{name}_bias"), cout));
        Self { weight, bias, spec }
    }

    pub fn pointwise<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 1, ConvSpec::pointwise(), bias)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.conv2d(x, w, self.spec)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn weight_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).numel()
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BnParams,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv::new(
            store,
            rng,
            &format!("{prefix}.conv"),
            cin,
            cout,
            kernel,
            ConvSpec::same(kernel, stride, 1, 1),
            false,
        );
        let bn = add_batch_norm(store, &format!("{prefix}.bn"), cout);
        Self { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = g.batch_norm(y, &self.bn)?;
        g.relu(y)
    }
}

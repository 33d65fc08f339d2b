//! Dense layers with explicit backward passes.
//!
//! Every hidden layer is `Linear → LayerNorm → LeakyReLU`; output layers are
//! plain linear maps.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};

pub const LEAKY_SLOPE: f32 = 0.01;
const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng),
            b: store.add_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng),
            fan_in,
            fan_out,
        }
    }

    /// Zero weights and bias; used for the last layer of every head.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add_const(format!("{name}.weight"), &[fan_in, fan_out], 0.0),
            b: store.add_const(format!("{name}.bias"), &[fan_out], 0.0),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&store.view2(self.w));
        y += &store.view1(self.b);
        y
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, x: ArrayView2<f32>, dy: ArrayView2<f32>) -> Array2<f32> {
        {
            let mut gw = grads.view2_mut(self.w, (self.fan_in, self.fan_out));
            general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut gw);
        }
        {
            let mut gb = grads.view1_mut(self.b);
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&store.view2(self.w).t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f32>,
    inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[width], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[width], 0.0),
            width,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f32>) -> (Array2<f32>, LayerNormCache) {
        let n = x.ncols() as f32;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f32>() / n;
            *s = 1.0 / (var + LN_EPS).sqrt();
            let inv = *s;
            row.mapv_inplace(|v| v * inv);
        }
        let mut y = &normalized * &store.view1(self.gamma);
        y += &store.view1(self.beta);
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &LayerNormCache, dy: ArrayView2<f32>) -> Array2<f32> {
        {
            let mut gg = grads.view1_mut(self.gamma);
            gg += &(&dy * &cache.normalized).sum_axis(Axis(0));
        }
        {
            let mut gb = grads.view1_mut(self.beta);
            gb += &dy.sum_axis(Axis(0));
        }
        let gamma = store.view1(self.gamma);
        let n = dy.ncols() as f32;
        let mut dx = &dy * &gamma;
        for ((mut row, xhat), s) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f32>() / n;
            for (d, xh) in row.iter_mut().zip(xhat.iter()) {
                *d = s * (*d - mean_d - xh * mean_dx);
            }
        }
        dx
    }
}

pub fn leaky_relu(x: &mut Array2<f32>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
}

/// Backward of [`leaky_relu`] given its output (the sign is preserved).
pub fn leaky_relu_backward(out: ArrayView2<f32>, dy: &mut Array2<f32>) {
    dy.zip_mut_with(&out, |d, &o| {
        if o <= 0.0 {
            *d *= LEAKY_SLOPE
        }
    });
}

/// `Linear → LayerNorm → LeakyReLU`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub linear: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Array2<f32>,
    norm: LayerNormCache,
    output: Array2<f32>,
}

impl BlockCache {
    pub fn output(&self) -> &Array2<f32> {
        &self.output
    }
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Block {
            linear: Linear::new(store, &format!("{name}.linear"), fan_in, fan_out, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), fan_out),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: Array2<f32>) -> BlockCache {
        let h = self.linear.forward(store, x.view());
        let (mut y, norm) = self.norm.forward(store, h.view());
        leaky_relu(&mut y);
        BlockCache {
            input: x,
            norm,
            output: y,
        }
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &BlockCache, mut dy: Array2<f32>) -> Array2<f32> {
        leaky_relu_backward(cache.output.view(), &mut dy);
        let dh = self.norm.backward(store, grads, &cache.norm, dy.view());
        self.linear.backward(store, grads, cache.input.view(), dh.view())
    }
}

/// Three-layer perceptron with a zero-initialised output layer.
#[derive(Debug, Clone, Copy)]
pub struct Mlp3 {
    pub hidden: [Block; 2],
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct Mlp3Cache {
    hidden: [BlockCache; 2],
}

impl Mlp3 {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, out: usize, rng: &mut impl Rng) -> Self {
        Mlp3 {
            hidden: [
                Block::new(store, &format!("{name}.0"), width, width, rng),
                Block::new(store, &format!("{name}.1"), width, width, rng),
            ],
            out: Linear::zeros(store, &format!("{name}.2"), width, out),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: Array2<f32>) -> (Array2<f32>, Mlp3Cache) {
        let h0 = self.hidden[0].forward(store, x);
        let h1 = self.hidden[1].forward(store, h0.output.clone());
        let y = self.out.forward(store, h1.output.view());
        (y, Mlp3Cache { hidden: [h0, h1] })
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &Mlp3Cache, dy: ArrayView2<f32>) -> Array2<f32> {
        let d1 = self.out.backward(store, grads, cache.hidden[1].output.view(), dy);
        let d0 = self.hidden[1].backward(store, grads, &cache.hidden[1], d1);
        self.hidden[0].backward(store, grads, &cache.hidden[0], d0)
    }
}

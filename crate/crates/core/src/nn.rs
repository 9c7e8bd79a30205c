//! Layer descriptors. A layer only knows its parameter names and geometry;
//! the values live in a [`ParamStore`].

use rand::Rng;

use crate::graph::Var;
use crate::params::{init, ParamStore, Session};
use crate::tensor::Tensor;

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Fan-in scaled uniform, for layers followed by a ReLU.
    Kaiming,
    /// Glorot uniform.
    Xavier,
    Zeros,
    /// Identity map (square linear layers, or the center tap of a conv).
    Identity,
}

/// Affine map over the last axis: `y = x W^T + b`, `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, scheme: Init, rng: &mut impl Rng) {
        let shape = [self.out_dim, self.in_dim];
        let w = match scheme {
            Init::Kaiming => init::kaiming_uniform(&shape, self.in_dim, rng),
            Init::Xavier => init::xavier_uniform(&shape, self.in_dim, self.out_dim, rng),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Identity => {
                assert_eq!(
                    self.in_dim, self.out_dim,
                    "identity init needs a square layer"
                );
                Tensor::eye(self.in_dim)
            }
        };
        store.insert(self.weight_name(), w);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]));
        }
    }

    /// `x` is `[rows, in_dim]`.
    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul_nt(s.param(&self.weight_name()));
        if self.bias {
            y.add_row_bias(s.param(&self.bias_name()))
        } else {
            y
        }
    }
}

/// Square-kernel 2-D convolution over `[C, H, W]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    /// Stride 1 with "same" padding.
    pub fn same(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
            bias: true,
        }
    }

    pub fn strided(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            stride,
            ..Self::same(name, in_ch, out_ch, kernel)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, scheme: Init, rng: &mut impl Rng) {
        let shape = [self.out_ch, self.in_ch, self.kernel, self.kernel];
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let fan_out = self.out_ch * self.kernel * self.kernel;
        let w = match scheme {
            Init::Kaiming => init::kaiming_uniform(&shape, fan_in, rng),
            Init::Xavier => init::xavier_uniform(&shape, fan_in, fan_out, rng),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Identity => identity_kernel(self.out_ch, self.in_ch, self.kernel),
        };
        store.insert(self.weight_name(), w);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_ch]));
        }
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Var<'g> {
        let b = self.bias.then(|| s.param(&self.bias_name()));
        x.conv2d(s.param(&self.weight_name()), b, self.stride, self.pad)
    }
}

/// Kernel whose center tap copies channel `i` to channel `i`.
pub fn identity_kernel(out_ch: usize, in_ch: usize, k: usize) -> Tensor {
    assert_eq!(out_ch, in_ch, "identity kernel needs equal channel counts");
    let mut t = Tensor::zeros(&[out_ch, in_ch, k, k]);
    for c in 0..out_ch {
        t.set(&[c, c, k / 2, k / 2], 1.0);
    }
    t
}

/// Layer normalization over the last axis of a `[rows, dim]` matrix.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.dim]));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm_rows(
            s.param(&format!("{}.gamma", self.name)),
            s.param(&format!("{}.beta", self.name)),
            Self::EPS,
        )
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.init(
                store,
                if i == last {
                    Init::Xavier
                } else {
                    Init::Kaiming
                },
                rng,
            );
        }
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Var<'g> {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(x, |h, (i, l)| {
            let y = l.forward(s, h);
            if i == last {
                y
            } else {
                y.relu()
            }
        })
    }
}

//! Layer descriptors shared by the attention blocks and the network.
//!
//! A descriptor knows its parameter names and shapes; it declares them into
//! an [`Initializer`] once and later reads them back from a [`Bound`] set on
//! every forward pass.

use thiserror::Error;

use crate::autodiff::{Conv2dOptions, Var};
use crate::hvi::HviError;
use crate::params::{Bound, Initializer, ParamError};
use crate::tensor::{Scalar, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input {h}x{w} is smaller than the 8x8 minimum")]
    TooSmall { h: usize, w: usize },
    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Hvi(#[from] HviError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Parameter declaration and cost accounting common to every block.
pub trait Module {
    fn declare(&self, init: &mut Initializer) -> Result<()>;

    /// Multiply-accumulate count for an `h×w` input.
    fn macs(&self, h: usize, w: usize) -> u64;
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub opts: Conv2dOptions,
    pub bias: bool,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            opts: Conv2dOptions::same(kernel.0, kernel.1, 1),
            bias: true,
            zero_init: false,
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, (1, 1))
    }

    pub fn dilated(mut self, d: usize) -> Self {
        self.opts = Conv2dOptions::same(self.kernel.0, self.kernel.1, d);
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.opts.stride = s;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = p.get(&self.weight_name())?;
        let b = if self.bias {
            Some(p.get(&self.bias_name())?)
        } else {
            None
        };
        Ok(x.conv2d(w, b, self.opts)?)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.opts
            .output_size(h, w, self.kernel.0, self.kernel.1)
            .unwrap_or((0, 0))
    }
}

impl Module for Conv {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        let fan_in = self.cin / self.opts.groups * self.kernel.0 * self.kernel.1;
        init.uniform(
            &self.weight_name(),
            &[self.cout, self.cin / self.opts.groups, self.kernel.0, self.kernel.1],
            fan_in,
            self.zero_init,
        )?;
        if self.bias {
            init.uniform(&self.bias_name(), &[self.cout], fan_in, self.zero_init)?;
        }
        Ok(())
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_size(h, w);
        (oh * ow * self.cout * (self.cin / self.opts.groups) * self.kernel.0 * self.kernel.1) as u64
    }
}

/// Layer normalization across channels at every pixel of a B×C×H×W map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub name: String,
    pub channels: usize,
}

impl ChannelNorm {
    const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mu = x.mean(&[1], true)?;
        let var = x.variance(&[1], true)?;
        let norm = x.sub(mu)?.div(var.shift(Self::EPS).sqrt())?;
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        Ok(norm.mul(w)?.add(b)?)
    }
}

impl Module for ChannelNorm {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        init.constant(&format!("{}.weight", self.name), &[1, self.channels, 1, 1], 1.0)?;
        init.constant(&format!("{}.bias", self.name), &[1, self.channels, 1, 1], 0.0)?;
        Ok(())
    }

    fn macs(&self, _h: usize, _w: usize) -> u64 {
        0
    }
}

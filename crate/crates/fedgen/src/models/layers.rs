//! Minimal layer zoo over candle tensors with parameters owned by a
//! [`ParamStore`](super::ParamStore).

use candle_core::{Tensor, Var};
use candle_nn::ops::silu;

use crate::error::Result;
use crate::models::ParamStore;

pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f32;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            bound,
        )?;
        let bias = store.uniform(&format!("{name}.bias"), &[cout], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let cout = self.bias.as_tensor().dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, cout, 1, 1))?)?)
    }
}

pub struct GroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        assert!(channels % groups == 0, "channels must divide into groups");
        let gamma = store.constant(&format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = store.constant(&format!("{name}.beta"), &[channels], 0.0)?;
        Ok(Self {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xs = x.reshape((b, g, c / g * h * w))?;
        let mean = xs.mean_keepdim(2)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        let scale = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let shift = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f32).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[dout, din], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[dout], bound)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Learned per-class embedding table.
pub struct Embedding {
    table: Var,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, entries: usize, dim: usize) -> Result<Self> {
        let table = store.uniform(&format!("{name}.table"), &[entries, dim], 0.05)?;
        Ok(Self { table })
    }

    pub fn forward(&self, indices: &Tensor) -> Result<Tensor> {
        Ok(self.table.as_tensor().index_select(indices, 0)?)
    }
}

/// GN -> SiLU -> conv -> GN -> SiLU -> conv with identity/1x1 shortcut.
/// `stride` applies to the first conv and the shortcut.
pub struct ResidualBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        stride: usize,
    ) -> Result<Self> {
        let gn1 = GroupNorm::new(store, &format!("{name}.gn1"), cin, groups)?;
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1)?;
        let gn2 = GroupNorm::new(store, &format!("{name}.gn2"), cout, groups)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?;
        let shortcut = if cin != cout || stride != 1 {
            Some(Conv2d::new(
                store,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                stride,
                0,
            )?)
        } else {
            None
        };
        Ok(Self {
            gn1,
            conv1,
            gn2,
            conv2,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.gn1.forward(x)?)?)?;
        let h = self.conv2.forward(&silu(&self.gn2.forward(&h)?)?)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Residual-block parameter count for analytic FLOP estimates.
pub(crate) fn resblock_flops(cin: usize, cout: usize, out_h: usize, out_w: usize) -> f64 {
    let mut f = crate::models::conv_flops(cin, cout, 3, out_h, out_w)
        + crate::models::conv_flops(cout, cout, 3, out_h, out_w);
    if cin != cout {
        f += crate::models::conv_flops(cin, cout, 1, out_h, out_w);
    }
    f
}

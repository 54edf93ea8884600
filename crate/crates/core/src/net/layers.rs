//! Convolutional building blocks. All convolutions are zero-padded; odd
//! kernels with stride 1 preserve the spatial extent.

use super::params::{Bound, ParamId, ParamSet};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvInit {
    /// `N(0, 2 / fan_in)` weights, zero bias.
    He,
    Zero,
    /// Centre-tap identity (requires `cin == cout`), zero bias.
    Identity,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        group: &str,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: ConvInit,
        rng: &mut R,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let weight = match init {
            ConvInit::He => Tensor::randn(&shape, 0.0, (2.0 / (cin * k * k) as f64).sqrt(), rng),
            ConvInit::Zero => Tensor::zeros(&shape),
            ConvInit::Identity => {
                assert_eq!(cin, cout, "identity init needs a channel-preserving conv");
                let mut t = Tensor::zeros(&shape);
                let c = k / 2;
                for ch in 0..cout {
                    t.data_mut()[((ch * cin + ch) * k + c) * k + c] = 1.0;
                }
                t
            }
        };
        Conv {
            weight: ps.add(group, &format!("{name}.weight"), weight),
            bias: ps.add(group, &format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding: (k - 1) / 2,
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.padding)
    }
}

/// `x + conv_b(relu(conv_a(x)))`, channel preserving.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv_a: Conv,
    pub conv_b: Conv,
}

impl ResBlock {
    /// `zero_tail` zero-initializes the second conv so the block starts as the identity.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, group: &str, name: &str, ch: usize, zero_tail: bool, rng: &mut R) -> Self {
        let tail = if zero_tail { ConvInit::Zero } else { ConvInit::He };
        ResBlock {
            conv_a: Conv::new(ps, group, &format!("{name}.conv_a"), ch, ch, 3, 1, ConvInit::He, rng),
            conv_b: Conv::new(ps, group, &format!("{name}.conv_b"), ch, ch, 3, 1, tail, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let a = self.conv_a.apply(g, p, x)?;
        let a = g.relu(a);
        let b = self.conv_b.apply(g, p, a)?;
        g.add(x, b)
    }
}

/// Learned channel-preserving stack: conv, residual blocks, conv.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub head: Conv,
    pub blocks: Vec<ResBlock>,
    pub tail: Conv,
}

pub const SENSING_RES_BLOCKS: usize = 4;

impl FeatureStack {
    /// With `identity` set the whole stack is the identity map at init.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, group: &str, ch: usize, identity: bool, rng: &mut R) -> Self {
        let outer = if identity { ConvInit::Identity } else { ConvInit::He };
        let head = Conv::new(ps, group, &format!("{group}.head"), ch, ch, 3, 1, outer, rng);
        let blocks = (0..SENSING_RES_BLOCKS)
            .map(|i| ResBlock::new(ps, group, &format!("{group}.res{i}"), ch, identity, rng))
            .collect();
        let tail = Conv::new(ps, group, &format!("{group}.tail"), ch, ch, 3, 1, outer, rng);
        FeatureStack { head, blocks, tail }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.head.apply(g, p, x)?;
        for b in &self.blocks {
            h = b.apply(g, p, h)?;
        }
        self.tail.apply(g, p, h)
    }
}

fn check_even(g: &Graph, x: Var, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape(op, format!("spatial extents of {s:?} must be even")));
    }
    Ok(())
}

/// `relu(conv_stride2(x))`: halves height and width.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub conv: Conv,
}

impl DownBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, group: &str, name: &str, ch: usize, rng: &mut R) -> Self {
        DownBlock { conv: Conv::new(ps, group, name, ch, ch, 3, 2, ConvInit::He, rng) }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_even(g, x, "downsample_block")?;
        let y = self.conv.apply(g, p, x)?;
        Ok(g.relu(y))
    }
}

/// `relu(conv(nearest_upsample_2x(x)))`: doubles height and width.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: Conv,
}

impl UpBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, group: &str, name: &str, ch: usize, rng: &mut R) -> Self {
        UpBlock { conv: Conv::new(ps, group, name, ch, ch, 3, 1, ConvInit::He, rng) }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let u = g.upsample2x(x)?;
        let y = self.conv.apply(g, p, u)?;
        Ok(g.relu(y))
    }
}

/// Encoder/decoder with a residual bottleneck and additive skips between
/// matching levels. Channel count is constant throughout.
#[derive(Clone, Debug)]
pub struct Enhancement {
    pub down: Vec<DownBlock>,
    pub bottleneck: Vec<ResBlock>,
    pub up: Vec<UpBlock>,
}

impl Enhancement {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, group: &str, ch: usize, levels: usize, res_blocks: usize, rng: &mut R) -> Self {
        let down = (0..levels).map(|i| DownBlock::new(ps, group, &format!("{group}.down{i}"), ch, rng)).collect();
        let bottleneck = (0..res_blocks)
            .map(|i| ResBlock::new(ps, group, &format!("{group}.res{i}"), ch, false, rng))
            .collect();
        let up = (0..levels).map(|i| UpBlock::new(ps, group, &format!("{group}.up{i}"), ch, rng)).collect();
        Enhancement { down, bottleneck, up }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let factor = 1usize << self.down.len();
        if s.len() != 4 || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::shape(
                "enhancement",
                format!("spatial extents of {s:?} must be divisible by {factor}"),
            ));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for d in &self.down {
            skips.push(h);
            h = d.apply(g, p, h)?;
        }
        for r in &self.bottleneck {
            h = r.apply(g, p, h)?;
        }
        // up[i] undoes down[i]; apply deepest first
        for (u, skip) in self.up.iter().rev().zip(skips.into_iter().rev()) {
            let up = u.apply(g, p, h)?;
            h = g.add(up, skip)?;
        }
        Ok(h)
    }
}

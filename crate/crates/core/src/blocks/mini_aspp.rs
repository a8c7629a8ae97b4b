use rand::Rng;

use crate::autograd::{concat, Conv2dGeom, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, ParamStore};
use crate::tensor::Element;

/// Channel widths of a [`MiniAspp`] block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiniAsppSpec {
    pub in_channels: usize,
    pub branch_channels: usize,
    pub out_channels: usize,
}

impl MiniAsppSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.branch_channels == 0 || self.out_channels == 0 {
            return Err(Error::Spec(format!("mini-ASPP channel counts must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// `(kernel, dilation, padding)` of the three parallel branches. Padding
/// keeps the spatial extent unchanged.
pub const MINI_ASPP_BRANCHES: [(usize, usize, usize); 3] = [(1, 1, 0), (3, 1, 1), (3, 2, 2)];

/// Three parallel dilated convolutions (1x1; 3x3 rate 1; 3x3 rate 2), each
/// followed by ReLU, concatenated and reduced by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct MiniAspp {
    pub spec: MiniAsppSpec,
    pub branches: [Conv2d; 3],
    pub reduce: Conv2d,
}

impl MiniAspp {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: MiniAsppSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let mut make = |i: usize| {
            let (k, d, p) = MINI_ASPP_BRANCHES[i];
            Conv2d::new(
                store,
                rng,
                &format!("{name}.branch{i}"),
                spec.in_channels,
                spec.branch_channels,
                k,
                Conv2dGeom::new(1, p, d),
                true,
            )
        };
        let branches = [make(0)?, make(1)?, make(2)?];
        let reduce =
            Conv2d::pointwise(store, rng, &format!("{name}.reduce"), 3 * spec.branch_channels, spec.out_channels)?;
        Ok(Self { spec, branches, reduce })
    }

    fn check_input<T: Element>(&self, x: &Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Dimension(format!(
                "mini-ASPP expects [N, {}, H, W], got {shape:?}",
                self.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Raw convolution output of each branch, before the activation.
    pub fn branch_outputs<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<[Var<'t, T>; 3]> {
        self.check_input(&x)?;
        Ok([self.branches[0].forward(fwd, x)?, self.branches[1].forward(fwd, x)?, self.branches[2].forward(fwd, x)?])
    }

    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [a, b, c] = self.branch_outputs(fwd, x)?;
        let cat = concat(&[a.relu(), b.relu(), c.relu()], 1)?;
        self.reduce.forward(fwd, cat)
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().map(Conv2d::num_params).sum::<usize>() + self.reduce.num_params()
    }
}

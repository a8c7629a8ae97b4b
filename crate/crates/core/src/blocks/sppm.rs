use rand::Rng;

use crate::autograd::{concat, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Forward, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SppmSpec {
    pub in_channels: usize,
    pub branch_channels: usize,
    pub out_channels: usize,
    pub pyramid_sizes: Vec<usize>,
    pub strip_branches: bool,
}

impl SppmSpec {
    pub const DEFAULT_PYRAMID: [usize; 4] = [1, 2, 4, 8];

    pub fn new(in_channels: usize, branch_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            branch_channels,
            out_channels,
            pyramid_sizes: Self::DEFAULT_PYRAMID.to_vec(),
            strip_branches: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.branch_channels == 0 || self.out_channels == 0 {
            return Err(Error::Spec(format!("SPPM channel counts must be >= 1: {self:?}")));
        }
        if self.pyramid_sizes.is_empty()
            || self.pyramid_sizes[0] == 0
            || self.pyramid_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Spec(format!(
                "SPPM pyramid sizes must be strictly increasing and >= 1, got {:?}",
                self.pyramid_sizes
            )));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        self.pyramid_sizes.len() + if self.strip_branches { 2 } else { 0 }
    }

    /// Pooled extent of every branch for an `h x w` input, pyramid first,
    /// then the row strip (`h x 1`) and the column strip (`1 x w`).
    pub fn pooled_extents(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self.pyramid_sizes.iter().map(|&s| (s, s)).collect();
        if self.strip_branches {
            v.push((h, 1));
            v.push((1, w));
        }
        v
    }
}

/// Strip pyramid pooling: adaptive average pools over a pyramid of grid
/// sizes plus full-row and full-column strips, each projected by
/// conv-BN-ReLU and resized back, fused with the input by a 1x1 conv-BN-ReLU.
#[derive(Clone, Debug)]
pub struct Sppm {
    pub spec: SppmSpec,
    branches: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
}

pub struct SppmParts<'t, T: Element> {
    /// Pooled map of each branch before its projection.
    pub pooled: Vec<Var<'t, T>>,
    pub output: Var<'t, T>,
}

impl Sppm {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: SppmSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let mut branches = Vec::with_capacity(spec.branch_count());
        for &s in &spec.pyramid_sizes {
            branches.push(ConvBnRelu::pointwise(
                store,
                rng,
                &format!("{name}.pool{s}"),
                spec.in_channels,
                spec.branch_channels,
            )?);
        }
        if spec.strip_branches {
            for strip in ["rows", "cols"] {
                branches.push(ConvBnRelu::pointwise(
                    store,
                    rng,
                    &format!("{name}.strip_{strip}"),
                    spec.in_channels,
                    spec.branch_channels,
                )?);
            }
        }
        let fuse_in = spec.in_channels + spec.branch_count() * spec.branch_channels;
        let fuse = ConvBnRelu::pointwise(store, rng, &format!("{name}.fuse"), fuse_in, spec.out_channels)?;
        Ok(Self { spec, branches, fuse })
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn forward_parts<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<SppmParts<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Dimension(format!("SPPM expects [N, {}, H, W], got {shape:?}", self.spec.in_channels)));
        }
        let (h, w) = (shape[2], shape[3]);
        let largest = *self.spec.pyramid_sizes.last().expect("validated non-empty");
        if h < largest || w < largest {
            return Err(Error::Geometry(format!(
                "SPPM input {h}x{w} is smaller than the {largest}x{largest} pyramid bin"
            )));
        }
        let mut pooled = Vec::with_capacity(self.branches.len());
        let mut paths = vec![x];
        for ((ph, pw), branch) in self.spec.pooled_extents(h, w).into_iter().zip(&self.branches) {
            let p = x.adaptive_avg_pool2d(ph, pw)?;
            pooled.push(p);
            paths.push(branch.forward(fwd, p)?.upsample_bilinear(h, w)?);
        }
        let output = self.fuse.forward(fwd, concat(&paths, 1)?)?;
        Ok(SppmParts { pooled, output })
    }

    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_parts(fwd, x)?.output)
    }
}

use rand::Rng;

use crate::autograd::{Conv2dGeom, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Forward, ParamStore};
use crate::tensor::Element;

use super::EncoderSpec;

/// Two 3x3 conv-BN layers with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
    pub shortcut: Option<ConvBnRelu>,
}

impl BasicBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 =
            ConvBnRelu::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, Conv2dGeom::new(stride, 1, 1), true)?;
        let conv2 =
            ConvBnRelu::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, Conv2dGeom::new(1, 1, 1), false)?;
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                Conv2dGeom::new(stride, 0, 1),
                false,
            )?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv2.forward(fwd, self.conv1.forward(fwd, x)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(fwd, x)?,
            None => x,
        };
        Ok(y.add(skip)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub stem: ConvBnRelu,
    pub stages: [Vec<BasicBlock>; 3],
}

impl Encoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: &EncoderSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let c = spec.stage_channels;
        let stem = ConvBnRelu::new(store, rng, &format!("{name}.stem"), 3, c[0], 3, Conv2dGeom::new(2, 1, 1), true)?;
        let mut stages: [Vec<BasicBlock>; 3] = Default::default();
        for (s, blocks) in stages.iter_mut().enumerate() {
            let mut cin = if s == 0 { c[0] } else { c[s - 1] };
            for b in 0..spec.blocks_per_stage[s] {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    store,
                    rng,
                    &format!("{name}.stage{}.block{b}", s + 1),
                    cin,
                    c[s],
                    stride,
                )?);
                cin = c[s];
            }
        }
        Ok(Self { spec: spec.clone(), stem, stages })
    }

    /// Feature maps at strides 4, 8 and 16.
    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, image: Var<'t, T>) -> Result<[Var<'t, T>; 3]> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension(format!("encoder expects an [N,3,H,W] image, got {shape:?}")));
        }
        let m = EncoderSpec::INPUT_MULTIPLE;
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::Geometry(format!("input extents {}x{} are not multiples of {m}", shape[2], shape[3])));
        }
        let mut x = self.stem.forward(fwd, image)?.max_pool2d(2, 2)?;
        let mut out = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(fwd, x)?;
            }
            out.push(x);
        }
        Ok([out[0], out[1], out[2]])
    }
}

//! The full segmentation network: encoder, enhancement connectors and a
//! two-level decoder with deep-supervision heads.

mod config;
mod encoder;

pub use config::{EncoderSpec, NetworkConfig};
pub use encoder::{BasicBlock, Encoder};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{concat, Var};
use crate::blocks::{MiniAspp, Psa, Sppm};
use crate::error::{Error, Result};
use crate::labels::{argmax_classes, LabelMap};
use crate::nn::{Conv2d, ConvBnRelu, Forward, Mode, ParamStore};
use crate::tensor::{Element, Tensor};

/// Layer layout of the network; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub encoder: Encoder,
    pub aspp: [MiniAspp; 2],
    pub psa: [Psa; 2],
    pub sppm: Sppm,
    pub fuse2: ConvBnRelu,
    pub fuse1: ConvBnRelu,
    pub head: Conv2d,
    pub proj_d2: ConvBnRelu,
    pub proj_e3: ConvBnRelu,
    aux_head: Conv2d,
}

/// Decoder state kept for the auxiliary heads.
pub struct Decoded<'t, T: Element> {
    pub logits: Var<'t, T>,
    pub d2: Var<'t, T>,
}

impl Network {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: &NetworkConfig,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let encoder = Encoder::new(store, rng, "encoder", &c.encoder)?;
        let aspp = [
            MiniAspp::new(store, rng, "enhance.aspp1", c.mini_aspp[0])?,
            MiniAspp::new(store, rng, "enhance.aspp2", c.mini_aspp[1])?,
        ];
        let psa = [Psa::new(store, rng, "enhance.psa1", c.psa[0])?, Psa::new(store, rng, "enhance.psa2", c.psa[1])?];
        let sppm = Sppm::new(store, rng, "enhance.sppm", c.sppm.clone())?;
        let [w2, w1] = c.decoder_channels;
        let fuse2 = ConvBnRelu::pointwise(store, rng, "decoder.fuse2", c.sppm.out_channels + c.psa[1].channels, w2)?;
        let fuse1 = ConvBnRelu::pointwise(store, rng, "decoder.fuse1", w2 + c.psa[0].channels, w1)?;
        let head = Conv2d::pointwise(store, rng, "decoder.head", w1, c.num_classes)?;
        let proj_d2 = ConvBnRelu::pointwise(store, rng, "aux.proj_d2", w2, c.aux_channels)?;
        let proj_e3 = ConvBnRelu::pointwise(store, rng, "aux.proj_e3", c.sppm.out_channels, c.aux_channels)?;
        let aux_head = Conv2d::pointwise(store, rng, "aux.head", c.aux_channels, c.num_classes)?;
        Ok(Self { config: c.clone(), encoder, aspp, psa, sppm, fuse2, fuse1, head, proj_d2, proj_e3, aux_head })
    }

    pub fn encode<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, image: Var<'t, T>) -> Result<[Var<'t, T>; 3]> {
        self.encoder.forward(fwd, image)
    }

    /// Levels 1 and 2 go through Mini-ASPP then PSA, level 3 through SPPM.
    pub fn enhance<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, f: [Var<'t, T>; 3]) -> Result<[Var<'t, T>; 3]> {
        let e1 = self.psa[0].forward(fwd, self.aspp[0].forward(fwd, f[0])?)?;
        let e2 = self.psa[1].forward(fwd, self.aspp[1].forward(fwd, f[1])?)?;
        let e3 = self.sppm.forward(fwd, f[2])?;
        Ok([e1, e2, e3])
    }

    /// Unnormalized logits at `out` resolution.
    pub fn decode<'t, T: Element>(
        &self,
        fwd: &Forward<'t, '_, T>,
        e: [Var<'t, T>; 3],
        out: (usize, usize),
    ) -> Result<Decoded<'t, T>> {
        let d2 = self.fuse2.forward(fwd, concat(&[upsample_x2(e[2])?, e[1]], 1)?)?;
        let d1 = self.fuse1.forward(fwd, concat(&[upsample_x2(d2)?, e[0]], 1)?)?;
        let logits = self.head.forward(fwd, d1)?.upsample_bilinear(out.0, out.1)?;
        Ok(Decoded { logits, d2 })
    }

    /// The head shared by both auxiliary taps.
    pub fn aux_head(&self, level: usize) -> &Conv2d {
        debug_assert!(level < 2);
        &self.aux_head
    }

    /// Main logits followed by the auxiliary predictions from D2 and E3,
    /// all at input resolution.
    pub fn forward_deep<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, image: Var<'t, T>) -> Result<[Var<'t, T>; 3]> {
        let (h, w) = spatial(&image)?;
        let e = self.enhance(fwd, self.encode(fwd, image)?)?;
        let e3 = e[2];
        let dec = self.decode(fwd, e, (h, w))?;
        let aux_d2 = self.aux_head(0).forward(fwd, self.proj_d2.forward(fwd, dec.d2)?)?.upsample_bilinear(h, w)?;
        let aux_e3 = self.aux_head(1).forward(fwd, self.proj_e3.forward(fwd, e3)?)?.upsample_bilinear(h, w)?;
        Ok([dec.logits, aux_d2, aux_e3])
    }

    /// Main logits only.
    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let (h, w) = spatial(&image)?;
        let e = self.enhance(fwd, self.encode(fwd, image)?)?;
        Ok(self.decode(fwd, e, (h, w))?.logits)
    }

    /// Every supervised output in train mode, only the main logits in eval.
    pub fn forward_outputs<'t, T: Element>(
        &self,
        fwd: &Forward<'t, '_, T>,
        image: Var<'t, T>,
    ) -> Result<Vec<Var<'t, T>>> {
        if fwd.training() {
            Ok(self.forward_deep(fwd, image)?.to_vec())
        } else {
            Ok(vec![self.forward(fwd, image)?])
        }
    }
}

fn spatial<T: Element>(x: &Var<'_, T>) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected an [N,C,H,W] tensor, got {s:?}")));
    }
    Ok((s[2], s[3]))
}

fn upsample_x2<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let (h, w) = spatial(&x)?;
    x.upsample_bilinear(2 * h, 2 * w)
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), config)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.net.config
    }

    /// Same layout, values converted to another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { net: self.net.clone(), store: self.store.cast() }
    }

    /// Replaces every batch-norm running statistic with the statistics of
    /// `images` (a train-mode pass with momentum 1).
    pub fn calibrate_batch_norm(&mut self, images: &Tensor<T>) -> Result<()> {
        let tape = crate::autograd::Tape::new();
        let bn = crate::nn::BatchNormSettings { momentum: 1.0, ..Default::default() };
        let fwd = Forward::new(&tape, &self.store, Mode::Train).with_param_tracking(false).with_batch_norm(bn);
        self.net.forward_deep(&fwd, tape.constant(images.clone()))?;
        let updates = fwd.take_updates();
        self.store.apply_updates(updates)
    }

    /// Eval-mode logits for a batch of images `[N,3,H,W]`.
    pub fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = crate::autograd::Tape::new();
        let fwd = Forward::new(&tape, &self.store, Mode::Eval);
        Ok(self.net.forward(&fwd, tape.constant(images.clone()))?.value())
    }

    /// Per-pixel argmax class ids, shape `[N,H,W]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<LabelMap> {
        argmax_classes(&self.predict_logits(images)?)
    }

    /// Class ids `[1,H,W]` for one `[3,H,W]` image. With `auto_pad` the
    /// image is edge-padded to an admissible extent and the prediction
    /// cropped back; without it an inadmissible extent is a geometry error.
    pub fn predict_image(&self, image: &Tensor<T>, auto_pad: bool) -> Result<LabelMap> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("expected a [3,H,W] image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let (ph, pw) = (self.admissible_extent(h), self.admissible_extent(w));
        if (ph, pw) == (h, w) {
            return self.predict(&image.reshape(&[1, 3, h, w])?);
        }
        if !auto_pad {
            return Err(Error::Geometry(format!(
                "image is {h}x{w}; extents must be multiples of {} and at least {} (or enable auto-pad)",
                EncoderSpec::INPUT_MULTIPLE,
                self.config().min_input_extent()
            )));
        }
        let src = image.data();
        let padded = Tensor::from_fn(&[1, 3, ph, pw], |i| {
            let (c, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
            src[c * h * w + y.min(h - 1) * w + x.min(w - 1)]
        })?;
        let full = self.predict(&padded)?;
        let data = (0..h * w).map(|p| full.data()[(p / w) * pw + p % w]).collect();
        LabelMap::new([1, h, w], data)
    }

    /// Smallest extent >= `n` the network accepts.
    pub fn admissible_extent(&self, n: usize) -> usize {
        let m = EncoderSpec::INPUT_MULTIPLE;
        n.max(self.config().min_input_extent()).div_ceil(m) * m
    }
}

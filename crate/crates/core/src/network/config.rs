use crate::blocks::{MiniAsppSpec, PsaSpec, SppmSpec};
use crate::error::{Error, Result};

/// Residual encoder emitting feature maps at strides 4, 8 and 16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub stage_channels: [usize; 3],
    pub blocks_per_stage: [usize; 3],
}

impl EncoderSpec {
    /// Downsampling of the stem (stride-2 conv followed by a stride-2 pool).
    pub const STEM_STRIDE: usize = 4;
    /// Input extents must be multiples of this.
    pub const INPUT_MULTIPLE: usize = 16;

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(Error::Spec(format!("encoder stages need >= 1 channel and block: {self:?}")));
        }
        Ok(())
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { stage_channels: [64, 128, 256], blocks_per_stage: [2, 2, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub encoder: EncoderSpec,
    pub mini_aspp: [MiniAsppSpec; 2],
    pub psa: [PsaSpec; 2],
    pub sppm: SppmSpec,
    /// Fusion widths of the two decoder levels (stride 8, then stride 4).
    pub decoder_channels: [usize; 2],
    /// Common width the deep-supervision taps are projected to before the
    /// shared head.
    pub aux_channels: usize,
    pub num_classes: usize,
}

impl NetworkConfig {
    /// Derives block and decoder widths from the encoder widths.
    pub fn from_encoder(encoder: EncoderSpec, num_classes: usize) -> Self {
        let [c1, c2, c3] = encoder.stage_channels;
        let aspp = |c: usize| MiniAsppSpec { in_channels: c, branch_channels: (c / 2).max(1), out_channels: c };
        Self {
            mini_aspp: [aspp(c1), aspp(c2)],
            psa: [PsaSpec::new(c1), PsaSpec::new(c2)],
            sppm: SppmSpec::new(c3, (c3 / 4).max(1), c3),
            decoder_channels: [c2, c1],
            aux_channels: c1,
            encoder,
            num_classes,
        }
    }

    /// Stage widths 16/32/64, one residual block per stage.
    pub fn micro(num_classes: usize) -> Self {
        Self::from_encoder(EncoderSpec { stage_channels: [16, 32, 64], blocks_per_stage: [1, 1, 1] }, num_classes)
    }

    /// Stage widths 64/128/256, two residual blocks per stage.
    pub fn desk(num_classes: usize) -> Self {
        Self::from_encoder(EncoderSpec::default(), num_classes)
    }

    /// ResNet50-like widths and depths (basic blocks, no pretrained weights).
    pub fn full(num_classes: usize) -> Self {
        Self::from_encoder(EncoderSpec { stage_channels: [256, 512, 1024], blocks_per_stage: [3, 4, 6] }, num_classes)
    }

    /// Smallest configuration that still exercises every block: widths
    /// 8/16/32 and pyramid sizes 1 and 2 so a 32x32 input fits.
    pub fn tiny(num_classes: usize) -> Self {
        let mut cfg =
            Self::from_encoder(EncoderSpec { stage_channels: [8, 16, 32], blocks_per_stage: [1, 1, 1] }, num_classes);
        cfg.sppm.pyramid_sizes = vec![1, 2];
        cfg
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(num_classes)),
            "micro" => Ok(Self::micro(num_classes)),
            "desk" => Ok(Self::desk(num_classes)),
            "full" => Ok(Self::full(num_classes)),
            other => Err(Error::Config(format!("unknown network preset {other:?} (tiny, micro, desk, full)"))),
        }
    }

    /// Checks that connector widths chain from encoder to decoder.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Spec(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let stages = self.encoder.stage_channels;
        for level in 0..2 {
            let aspp = &self.mini_aspp[level];
            aspp.validate()?;
            self.psa[level].validate()?;
            if aspp.in_channels != stages[level] {
                return Err(Error::Spec(format!(
                    "level {} Mini-ASPP expects {} channels but the encoder emits {}",
                    level + 1,
                    aspp.in_channels,
                    stages[level]
                )));
            }
            if self.psa[level].channels != aspp.out_channels {
                return Err(Error::Spec(format!(
                    "level {} PSA expects {} channels but Mini-ASPP emits {}",
                    level + 1,
                    self.psa[level].channels,
                    aspp.out_channels
                )));
            }
        }
        self.sppm.validate()?;
        if self.sppm.in_channels != stages[2] {
            return Err(Error::Spec(format!(
                "SPPM expects {} channels but the encoder emits {}",
                self.sppm.in_channels, stages[2]
            )));
        }
        if self.decoder_channels.contains(&0) || self.aux_channels == 0 {
            return Err(Error::Spec("decoder and aux widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Smallest input extent for which SPPM's largest bin fits at stride 16.
    pub fn min_input_extent(&self) -> usize {
        let largest = self.sppm.pyramid_sizes.iter().copied().max().unwrap_or(1);
        largest * EncoderSpec::INPUT_MULTIPLE
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How speaker identity reaches the separator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Blind separation; output order is arbitrary.
    None,
    /// Embeddings modulate mid-separator features and the mask heads.
    Multiply,
    /// Embeddings are repeated per frame and appended to the encoder output.
    Concat,
    /// A dedicated speaker stack turns embeddings into sequential features.
    Split,
}

impl Conditioning {
    pub fn is_conditioned(self) -> bool {
        self != Conditioning::None
    }

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Multiply => "multiply",
            Conditioning::Concat => "concat",
            Conditioning::Split => "split",
        }
    }
}

impl std::fmt::Display for Conditioning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every architecture hyperparameter of the extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spectral encoder output channels (N).
    pub spectral_dim: usize,
    /// Spatial encoder output channels (S). Zero disables the spatial branch.
    pub spatial_dim: usize,
    /// Encoder/decoder kernel length in samples (L).
    pub kernel: usize,
    /// Encoder hop in samples.
    pub stride: usize,
    /// Number of stacked U-ConvBlocks (B).
    pub blocks: usize,
    /// Down/upsampling steps inside each U-ConvBlock (Q).
    pub depth: usize,
    /// Separator channels (C).
    pub channels: usize,
    /// Expanded channels inside a U-ConvBlock (C_U).
    pub expanded_channels: usize,
    /// Speaker-stack output channels (E).
    pub speaker_dim: usize,
    /// Speaker embedding size.
    pub embedding_dim: usize,
    /// Speakers per mixture (K).
    pub speakers: usize,
    /// Microphones.
    pub mics: usize,
    pub conditioning: Conditioning,
}

impl ModelConfig {
    /// CPU-trainable defaults that keep every architectural mechanism.
    pub fn desk() -> Self {
        Self {
            spectral_dim: 32,
            spatial_dim: 8,
            kernel: 16,
            stride: 8,
            blocks: 4,
            depth: 3,
            channels: 32,
            expanded_channels: 64,
            speaker_dim: 16,
            embedding_dim: 32,
            speakers: 2,
            mics: 2,
            conditioning: Conditioning::Split,
        }
    }

    /// The configuration used for the published system (U-ConvBlock
    /// separator, S = 128, E = 128). The embedding size depends on the
    /// external speaker model; 256 is a placeholder.
    pub fn full_scale() -> Self {
        Self {
            spectral_dim: 256,
            spatial_dim: 128,
            kernel: 21,
            stride: 10,
            blocks: 16,
            depth: 4,
            channels: 256,
            expanded_channels: 512,
            speaker_dim: 128,
            embedding_dim: 256,
            speakers: 2,
            mics: 2,
            conditioning: Conditioning::Split,
        }
    }

    /// The small configuration used by structural and gradient tests.
    pub fn tiny() -> Self {
        Self {
            spectral_dim: 8,
            spatial_dim: 4,
            kernel: 16,
            stride: 8,
            blocks: 2,
            depth: 2,
            channels: 8,
            expanded_channels: 16,
            speaker_dim: 8,
            embedding_dim: 8,
            speakers: 2,
            mics: 2,
            conditioning: Conditioning::Split,
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("spectral_dim", self.spectral_dim),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("blocks", self.blocks),
            ("depth", self.depth),
            ("channels", self.channels),
            ("expanded_channels", self.expanded_channels),
            ("speaker_dim", self.speaker_dim),
            ("embedding_dim", self.embedding_dim),
            ("speakers", self.speakers),
            ("mics", self.mics),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.stride > self.kernel {
            return Err(Error::config(format!(
                "stride {} exceeds kernel {}",
                self.stride, self.kernel
            )));
        }
        Ok(())
    }

    /// Channels of the concatenated encoder representation (N + S).
    pub fn rep_dim(&self) -> usize {
        self.spectral_dim + self.spatial_dim
    }

    /// Channels entering the separator for the configured conditioning.
    pub fn separator_input_dim(&self) -> usize {
        match self.conditioning {
            Conditioning::None | Conditioning::Multiply => self.rep_dim(),
            Conditioning::Split => self.rep_dim() + self.speaker_dim,
            Conditioning::Concat => self.rep_dim() + self.embedding_dim * self.speakers,
        }
    }

    /// Encoder frames for `len` input samples.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| (len - self.kernel) / self.stride + 1)
    }

    /// Smallest length `>= len` that the encoder frames without remainder.
    pub fn padded_len(&self, len: usize) -> usize {
        if len <= self.kernel {
            return self.kernel;
        }
        let steps = (len - self.kernel).div_ceil(self.stride);
        self.kernel + steps * self.stride
    }

    /// Minimum frame count accepted by the U-ConvBlocks.
    pub fn min_frames(&self) -> usize {
        1 << self.depth
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

//! Forward pass of the unified color-event transformer tracker.
//!
//! Four inputs (template/search crops of the color frame and of the voxel
//! tensor) are projected to tokens, position embeddings shared between the two
//! modalities are added, and the concatenated sequence runs through a stack of
//! transformer blocks, each followed by a cross-attention adapter. The search
//! tokens then feed a three-branch convolutional head.

mod backbone;
mod head;
pub mod ops;
mod params;
mod track;

use serde::{Deserialize, Serialize};

pub use backbone::{
    adapter_block, forward_backbone, project_frame_tokens, project_voxel_tokens, transformer_block,
    unify, BackboneInput,
};
pub use head::{decode_box, tracking_head, HeadOutput};
pub use params::{
    AdapterParams, BlockParams, BranchParams, ConvStage, HeadParams, ModelParams, TensorEntry,
    PARAMS_MAGIC,
};
pub use track::{
    prepare_frame_patch, sequence_voxel_inputs, track_sequence, voxel_input, SequenceVoxels,
    TrackerSettings, MIN_BOX_SIDE,
};

use crate::error::{Error, Result};
use ops::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width.
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the adapter feed-forward layer.
    pub adapter_hidden: usize,
    pub template_px: usize,
    pub search_px: usize,
    pub frame_patch: usize,
    pub voxel_patch: usize,
    pub template_voxel_side: usize,
    pub search_voxel_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(64, 4)
    }
}

impl ModelConfig {
    /// Paper-geometry model at a reduced token width.
    pub fn toy(width: usize, n_heads: usize) -> Self {
        Self {
            width,
            n_layers: 12,
            n_heads,
            mlp_ratio: 4,
            adapter_hidden: width,
            template_px: 128,
            search_px: 256,
            frame_patch: 16,
            voxel_patch: 4,
            template_voxel_side: 32,
            search_voxel_side: 64,
        }
    }

    /// Full ViT-B width.
    pub fn base() -> Self {
        Self::toy(768, 12)
    }

    pub fn n_template_tokens(&self) -> usize {
        (self.template_px / self.frame_patch).pow(2)
    }

    pub fn n_search_tokens(&self) -> usize {
        (self.search_px / self.frame_patch).pow(2)
    }

    pub fn unified_len(&self) -> usize {
        2 * (self.n_template_tokens() + self.n_search_tokens())
    }

    /// Side of the square score map.
    pub fn map_side(&self) -> usize {
        self.search_px / self.frame_patch
    }

    pub fn template_k(&self) -> usize {
        self.template_voxel_side.pow(2)
    }

    pub fn search_k(&self) -> usize {
        self.search_voxel_side.pow(2)
    }

    pub fn frame_patch_dim(&self) -> usize {
        self.frame_patch * self.frame_patch * 3
    }

    pub fn voxel_patch_dim(&self) -> usize {
        self.voxel_patch * self.voxel_patch * crate::voxel::ROW_LEN
    }

    /// Output channels of the four head stages.
    pub fn head_channels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| (self.width >> i).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.width == 0 || self.n_heads == 0 || !self.width.is_multiple_of(self.n_heads) {
            return bad(format!(
                "width {} must be a positive multiple of n_heads {}",
                self.width, self.n_heads
            ));
        }
        if self.mlp_ratio == 0 || self.adapter_hidden == 0 {
            return bad("mlp ratio and adapter width must be positive".into());
        }
        if self.frame_patch == 0 || self.voxel_patch == 0 {
            return bad("patch sizes must be positive".into());
        }
        if !self.template_px.is_multiple_of(self.frame_patch)
            || !self.search_px.is_multiple_of(self.frame_patch)
        {
            return bad("crop sizes must be multiples of the frame patch".into());
        }
        if !self.template_voxel_side.is_multiple_of(self.voxel_patch)
            || !self.search_voxel_side.is_multiple_of(self.voxel_patch)
        {
            return bad("voxel grid sides must be multiples of the voxel patch".into());
        }
        if (self.template_voxel_side / self.voxel_patch).pow(2) != self.n_template_tokens()
            || (self.search_voxel_side / self.voxel_patch).pow(2) != self.n_search_tokens()
        {
            return bad("voxel token counts must equal frame token counts".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    FrameTemplate,
    FrameSearch,
    VoxelTemplate,
    VoxelSearch,
    Unified,
}

/// A sequence of width-C tokens with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub role: TokenRole,
    pub tokens: Matrix,
}

impl TokenTensor {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_template_tokens(), 64);
        assert_eq!(c.n_search_tokens(), 256);
        assert_eq!(c.unified_len(), 640);
        assert_eq!((c.template_k(), c.search_k()), (1024, 4096));
        ModelConfig::base().validate().unwrap();
        assert!(ModelConfig::toy(10, 4).validate().is_err());
        let skewed = ModelConfig {
            voxel_patch: 8,
            ..ModelConfig::default()
        };
        assert!(skewed.validate().is_err());
    }
}

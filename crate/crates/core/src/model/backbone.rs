use super::ops::Matrix;
use super::params::{AdapterParams, BlockParams, ModelParams};
use super::{TokenRole, TokenTensor};
use crate::error::{Error, Result};
use crate::repr::Image;
use crate::voxel::{VoxelTensor, ROW_LEN};

/// The four per-frame model inputs.
#[derive(Debug, Clone)]
pub struct BackboneInput {
    pub frame_template: Image,
    pub frame_search: Image,
    pub voxel_template: VoxelTensor,
    pub voxel_search: VoxelTensor,
}

/// Splits a 3-channel image into non-overlapping square patches (row-major
/// patch order, each patch flattened as `(dy, dx, channel)`) and projects
/// every patch to a token.
pub fn project_frame_tokens(
    patch: &Image,
    params: &ModelParams,
    role: TokenRole,
) -> Result<TokenTensor> {
    let cfg = &params.config;
    let (side, proj) = match role {
        TokenRole::FrameTemplate => (cfg.template_px, &params.frame_template_proj),
        TokenRole::FrameSearch => (cfg.search_px, &params.frame_search_proj),
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other:?} is not a frame role"
            )))
        }
    };
    if patch.w != side || patch.h != side || patch.channels != 3 {
        return Err(Error::Shape(format!(
            "{role:?} patch must be {side}x{side}x3, got {}x{}x{}",
            patch.w, patch.h, patch.channels
        )));
    }
    let p = cfg.frame_patch;
    let per_side = side / p;
    let mut flat = Matrix::zeros(per_side * per_side, p * p * 3);
    for py in 0..per_side {
        for px in 0..per_side {
            let row = flat.row_mut(py * per_side + px);
            for dy in 0..p {
                let src = patch.index(px * p, py * p + dy, 0);
                row[dy * p * 3..(dy + 1) * p * 3].copy_from_slice(&patch.data[src..src + p * 3]);
            }
        }
    }
    Ok(TokenTensor {
        role,
        tokens: proj.forward(&flat)?,
    })
}

/// Lays the `k` voxel rows out row-major on a square grid of 19-channel
/// cells, then projects non-overlapping square patches of cells to tokens.
pub fn project_voxel_tokens(
    vt: &VoxelTensor,
    params: &ModelParams,
    role: TokenRole,
) -> Result<TokenTensor> {
    let cfg = &params.config;
    let (side, proj) = match role {
        TokenRole::VoxelTemplate => (cfg.template_voxel_side, &params.voxel_template_proj),
        TokenRole::VoxelSearch => (cfg.search_voxel_side, &params.voxel_search_proj),
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other:?} is not a voxel role"
            )))
        }
    };
    if vt.k() != side * side {
        return Err(Error::Shape(format!(
            "{role:?} voxel tensor must have {} rows, got {}",
            side * side,
            vt.k()
        )));
    }
    let p = cfg.voxel_patch;
    let per_side = side / p;
    let mut flat = Matrix::zeros(per_side * per_side, p * p * ROW_LEN);
    for py in 0..per_side {
        for px in 0..per_side {
            let row = flat.row_mut(py * per_side + px);
            for dy in 0..p {
                for dx in 0..p {
                    let cell = (py * p + dy) * side + px * p + dx;
                    let at = (dy * p + dx) * ROW_LEN;
                    row[at..at + ROW_LEN].copy_from_slice(&vt.rows[cell].row());
                }
            }
        }
    }
    Ok(TokenTensor {
        role,
        tokens: proj.forward(&flat)?,
    })
}

/// Concatenates `[frame_template + Pz, frame_search + Px, voxel_template + Pz,
/// voxel_search + Px]`.
pub fn unify(
    frame_template: &TokenTensor,
    frame_search: &TokenTensor,
    voxel_template: &TokenTensor,
    voxel_search: &TokenTensor,
    pos_template: &Matrix,
    pos_search: &Matrix,
) -> Result<TokenTensor> {
    let parts = [
        (frame_template, pos_template),
        (frame_search, pos_search),
        (voxel_template, pos_template),
        (voxel_search, pos_search),
    ];
    let mut with_pos = Vec::with_capacity(4);
    for (t, pos) in parts {
        t.tokens
            .check_same(pos, &format!("{:?} tokens vs position embedding", t.role))?;
        with_pos.push(t.tokens.add(pos)?);
    }
    let refs: Vec<&Matrix> = with_pos.iter().collect();
    Ok(TokenTensor {
        role: TokenRole::Unified,
        tokens: Matrix::vstack(&refs)?,
    })
}

/// Pre-norm transformer block: `U~ = U + MSA(LN(U))`, `U' = U~ + MLP(LN(U~))`.
pub fn transformer_block(u: &Matrix, p: &BlockParams) -> Result<Matrix> {
    let h = p.norm1.forward(u);
    let attended = u.add(&p.attn.forward(&h, &h)?)?;
    let out = attended.add(&p.mlp.forward(&p.norm2.forward(&attended))?)?;
    out.ensure_finite("transformer block output")?;
    Ok(out)
}

/// Adapter: `A = U_out + CrossAttn(LN(U_out) + P, LN(U_in) + P)`,
/// `U'' = A + FFN(LN(A))`, where `P` holds the position embedding of every
/// token of the sequence.
pub fn adapter_block(
    u_in: &Matrix,
    u_out: &Matrix,
    p: &AdapterParams,
    pos: &Matrix,
) -> Result<Matrix> {
    u_in.check_same(u_out, "adapter input vs output")?;
    u_out.check_same(pos, "adapter tokens vs position embedding")?;
    let query = p.norm1.forward(u_out).add(pos)?;
    let key_value = p.norm1.forward(u_in).add(pos)?;
    let a = u_out.add(&p.attn.forward(&query, &key_value)?)?;
    let out = a.add(&p.ffn.forward(&p.norm2.forward(&a))?)?;
    out.ensure_finite("adapter output")?;
    Ok(out)
}

impl ModelParams {
    /// Position embeddings aligned with the unified token layout.
    pub fn unified_positions(&self) -> Matrix {
        Matrix::vstack(&[
            &self.pos_template,
            &self.pos_search,
            &self.pos_template,
            &self.pos_search,
        ])
        .expect("position embeddings share a width")
    }
}

/// Projection, unification, then each layer's block followed by its adapter.
pub fn forward_backbone(input: &BackboneInput, params: &ModelParams) -> Result<TokenTensor> {
    let ffz = project_frame_tokens(&input.frame_template, params, TokenRole::FrameTemplate)?;
    let ffx = project_frame_tokens(&input.frame_search, params, TokenRole::FrameSearch)?;
    let fvz = project_voxel_tokens(&input.voxel_template, params, TokenRole::VoxelTemplate)?;
    let fvx = project_voxel_tokens(&input.voxel_search, params, TokenRole::VoxelSearch)?;
    let unified = unify(
        &ffz,
        &ffx,
        &fvz,
        &fvx,
        &params.pos_template,
        &params.pos_search,
    )?;
    let pos = params.unified_positions();
    let mut u = unified.tokens;
    for (block, adapter) in params.blocks.iter().zip(&params.adapters) {
        let out = transformer_block(&u, block)?;
        u = adapter_block(&u, &out, adapter, &pos)?;
        debug_assert_eq!(
            (u.rows, u.cols),
            (params.config.unified_len(), params.config.width)
        );
    }
    Ok(TokenTensor {
        role: TokenRole::Unified,
        tokens: u,
    })
}

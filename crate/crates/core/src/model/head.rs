use super::ops::{sigmoid, Matrix};
use super::params::{BranchParams, HeadParams};
use super::{ModelConfig, TokenTensor};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::voxel::Region;

/// Head maps on a `side x side` grid, all after the sigmoid. `offset` and
/// `size` interleave `(x, y)` / `(w, h)` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub side: usize,
    pub score: Vec<f64>,
    pub offset: Vec<f64>,
    pub size: Vec<f64>,
}

impl HeadOutput {
    pub fn from_logits(side: usize, score: &[f64], offset: &[f64], size: &[f64]) -> Result<Self> {
        let n = side * side;
        if score.len() != n || offset.len() != 2 * n || size.len() != 2 * n {
            return Err(Error::Shape(format!(
                "head maps for a {side}x{side} grid need {n}/{}/{} values",
                2 * n,
                2 * n
            )));
        }
        let s = |v: &[f64]| v.iter().map(|&x| sigmoid(x)).collect::<Vec<_>>();
        Ok(Self {
            side,
            score: s(score),
            offset: s(offset),
            size: s(size),
        })
    }

    /// First cell holding the maximum score, row-major.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.score.iter().enumerate() {
            if v > self.score[best] {
                best = i;
            }
        }
        (best / self.side, best % self.side)
    }
}

fn run_branch(branch: &BranchParams, input: &[f64], side: usize) -> Result<Vec<f64>> {
    let mut x = input.to_vec();
    for stage in &branch.stages {
        let mut y = stage.conv.forward(&x, side)?;
        let ch = stage.conv.out_ch;
        for px in y.chunks_exact_mut(ch) {
            for (c, v) in px.iter_mut().enumerate() {
                *v = (stage.norm_scale[c] * *v + stage.norm_shift[c]).max(0.0);
            }
        }
        x = y;
    }
    branch.out.forward(&x, side)
}

/// Averages the frame-search and voxel-search tokens, lays them on the score
/// grid and runs the score, offset and size branches.
pub fn tracking_head(
    unified: &TokenTensor,
    head: &HeadParams,
    config: &ModelConfig,
) -> Result<HeadOutput> {
    let (nz, nx) = (config.n_template_tokens(), config.n_search_tokens());
    if unified.len() != config.unified_len() || unified.width() != config.width {
        return Err(Error::Shape(format!(
            "head expects {}x{} unified tokens, got {}x{}",
            config.unified_len(),
            config.width,
            unified.len(),
            unified.width()
        )));
    }
    let frame = unified.tokens.slice_rows(nz, nz + nx);
    let voxel = unified.tokens.slice_rows(2 * nz + nx, 2 * (nz + nx));
    let fused = Matrix {
        rows: nx,
        cols: config.width,
        data: frame
            .data
            .iter()
            .zip(&voxel.data)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    };
    let side = config.map_side();
    let score = run_branch(&head.score, &fused.data, side)?;
    let offset = run_branch(&head.offset, &fused.data, side)?;
    let size = run_branch(&head.size, &fused.data, side)?;
    HeadOutput::from_logits(side, &score, &offset, &size)
}

/// Box at the score peak, mapped from normalized search coordinates into
/// pixels of the search region.
pub fn decode_box(head: &HeadOutput, region: &Region) -> BBox {
    let (i, j) = head.argmax();
    let cell = i * head.side + j;
    let side = head.side as f64;
    let cx = (j as f64 + head.offset[2 * cell]) / side;
    let cy = (i as f64 + head.offset[2 * cell + 1]) / side;
    let (w, h) = (head.size[2 * cell], head.size[2 * cell + 1]);
    let (left, top) = region.top_left();
    BBox::from_center(
        left + cx * region.side_w,
        top + cy * region.side_h,
        w * region.side_w,
        h * region.side_h,
    )
}

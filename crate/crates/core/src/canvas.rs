//! 2×2 canvas geometry.
//!
//! A canvas over sub-image grids of `G_h × G_w` cells is a `2G_h × 2G_w`
//! grid whose cells are stored row-major. Quadrants follow the in-context
//! layout `[prompt image, prompt label; query image, answer]`.

use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrant {
    /// top-left
    PromptImage,
    /// top-right
    PromptLabel,
    /// bottom-left
    QueryImage,
    /// bottom-right, the cells to be predicted
    Answer,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::PromptImage,
        Quadrant::PromptLabel,
        Quadrant::QueryImage,
        Quadrant::Answer,
    ];

    /// (block row, block column)
    pub fn block(self) -> (usize, usize) {
        match self {
            Quadrant::PromptImage => (0, 0),
            Quadrant::PromptLabel => (0, 1),
            Quadrant::QueryImage => (1, 0),
            Quadrant::Answer => (1, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CanvasLayout {
    pub grid_h: usize,
    pub grid_w: usize,
}

impl CanvasLayout {
    pub fn new(grid_h: usize, grid_w: usize) -> Self {
        CanvasLayout { grid_h, grid_w }
    }

    /// Cells per sub-image.
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Cells on the whole canvas.
    pub fn canvas_cells(&self) -> usize {
        4 * self.cells()
    }

    pub fn canvas_width(&self) -> usize {
        2 * self.grid_w
    }

    /// Canvas row index of every cell of `q`, in the quadrant's own
    /// row-major order.
    pub fn quadrant_rows(&self, q: Quadrant) -> Vec<usize> {
        let (br, bc) = q.block();
        let mut rows = Vec::with_capacity(self.cells());
        for i in 0..self.grid_h {
            for j in 0..self.grid_w {
                rows.push((br * self.grid_h + i) * self.canvas_width() + bc * self.grid_w + j);
            }
        }
        rows
    }

    /// Permutation taking the quadrant-major stack
    /// `[PromptImage; PromptLabel; QueryImage; Answer]` to canvas order:
    /// canvas row `r` is stack row `perm[r]`.
    pub fn assemble_permutation(&self) -> Vec<usize> {
        let mut perm = alloc::vec![0; self.canvas_cells()];
        for (k, q) in Quadrant::ALL.iter().enumerate() {
            for (i, r) in self.quadrant_rows(*q).into_iter().enumerate() {
                perm[r] = k * self.cells() + i;
            }
        }
        perm
    }
}

//! Conversions among the partition tree, the variable-length mode sequence
//! and the fixed-length 480-element basic-edge vector, plus the (30,16)
//! reshape consumed by the decoder as attention memory.

use thiserror::Error;

use crate::constraints::{allowed_modes, ConstraintRules};
use crate::partition::{child_rects, CuRect, PartitionTree, SplitMode};

/// 4x4 cells per side of a 64x64 LCU.
pub const EDGE_GRID: usize = 16;
/// Interior grid lines per orientation.
pub const EDGE_LINES: usize = EDGE_GRID - 1;
/// Basic edges in a 64x64 LCU: 15 lines x 16 cells x 2 orientations.
pub const EDGE_COUNT: usize = 2 * EDGE_LINES * EDGE_GRID;

/// Rows of the reshaped edge vector (15 horizontal + 15 vertical lines).
pub const MEM_ROWS: usize = 2 * EDGE_LINES;
/// Columns of the reshaped edge vector (one full grid line per row).
pub const MEM_COLS: usize = EDGE_GRID;

/// Pre-order list of split-mode tokens, one per tree node.
pub type ModeSequence = Vec<SplitMode>;

/// The fixed-length basic-edge map of a 64x64 LCU: 1 marks an edge on an
/// internal boundary between two leaf CUs. Labels are exactly 0/1;
/// inference-time entries are probabilities in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeVector(pub [f32; EDGE_COUNT]);

impl EdgeVector {
    pub fn zeros() -> EdgeVector {
        EdgeVector([0.0; EDGE_COUNT])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Number of entries at or above 0.5.
    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Packs labels to 60 bytes, LSB-first within each byte.
    pub fn pack_bits(&self) -> [u8; EDGE_COUNT / 8] {
        let mut out = [0u8; EDGE_COUNT / 8];
        for (i, &v) in self.0.iter().enumerate() {
            if v >= 0.5 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack_bits(bytes: &[u8; EDGE_COUNT / 8]) -> EdgeVector {
        let mut v = EdgeVector::zeros();
        for i in 0..EDGE_COUNT {
            if bytes[i / 8] & (1 << (i % 8)) != 0 {
                v.0[i] = 1.0;
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeOrientation {
    Horizontal,
    Vertical,
}

/// Position of one basic edge: `line` is the interior grid line (1..=15,
/// at 4*line pixels), `cell` the 4-pixel step along it (0..=15).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeIndex {
    pub orientation: EdgeOrientation,
    pub line: usize,
    pub cell: usize,
}

impl EdgeIndex {
    pub fn flat(&self) -> usize {
        debug_assert!((1..=EDGE_LINES).contains(&self.line) && self.cell < EDGE_GRID);
        let base = match self.orientation {
            EdgeOrientation::Horizontal => 0,
            EdgeOrientation::Vertical => EDGE_LINES * EDGE_GRID,
        };
        base + (self.line - 1) * EDGE_GRID + self.cell
    }

    pub fn from_flat(flat: usize) -> EdgeIndex {
        debug_assert!(flat < EDGE_COUNT);
        let (orientation, rel) = if flat < EDGE_LINES * EDGE_GRID {
            (EdgeOrientation::Horizontal, flat)
        } else {
            (EdgeOrientation::Vertical, flat - EDGE_LINES * EDGE_GRID)
        };
        EdgeIndex {
            orientation,
            line: rel / EDGE_GRID + 1,
            cell: rel % EDGE_GRID,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("mode sequence exhausted after {consumed} token(s) with CUs still pending")]
    TruncatedSequence { consumed: usize },
    #[error("{extra} token(s) remain after the tree completed")]
    TrailingTokens { extra: usize },
    #[error("token {mode} at position {position} is not allowed for its CU")]
    IllegalMode { position: usize, mode: SplitMode },
}

/// Pre-order serialization; every node including NS leaves emits one token.
pub fn tree_to_modes(tree: &PartitionTree) -> ModeSequence {
    let mut out = Vec::with_capacity(tree.node_count());
    fn walk(node: &PartitionTree, out: &mut ModeSequence) {
        out.push(node.mode);
        for c in &node.children {
            walk(c, out);
        }
    }
    walk(tree, &mut out);
    out
}

/// Exact inverse of `tree_to_modes`: parses a pre-order token stream into a
/// tree rooted at `rules.lcu_size`, validating each token against the
/// allowed modes of its CU context.
pub fn modes_to_tree(tokens: &[SplitMode], rules: &ConstraintRules) -> Result<PartitionTree, CodecError> {
    let mut pos = 0usize;
    let tree = parse_cu(CuRect::lcu_root(rules.lcu_size), tokens, &mut pos, rules)?;
    if pos != tokens.len() {
        return Err(CodecError::TrailingTokens {
            extra: tokens.len() - pos,
        });
    }
    Ok(tree)
}

fn parse_cu(
    cu: CuRect,
    tokens: &[SplitMode],
    pos: &mut usize,
    rules: &ConstraintRules,
) -> Result<PartitionTree, CodecError> {
    let mode = *tokens
        .get(*pos)
        .ok_or(CodecError::TruncatedSequence { consumed: *pos })?;
    if !allowed_modes(&cu, rules).allows(mode) {
        return Err(CodecError::IllegalMode {
            position: *pos,
            mode,
        });
    }
    *pos += 1;
    if mode == SplitMode::Ns {
        return Ok(PartitionTree::leaf(cu));
    }
    let children = child_rects(&cu, mode)
        .expect("allowed mode must split")
        .into_iter()
        .map(|c| parse_cu(c, tokens, pos, rules))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PartitionTree {
        rect: cu,
        mode,
        children,
    })
}

/// Binary basic-edge map of a legal 64x64 tree. An entry is 1 iff the edge
/// lies on an internal boundary between two distinct leaves; the LCU's
/// outer border is not represented.
pub fn tree_to_edges(tree: &PartitionTree) -> EdgeVector {
    let mut v = EdgeVector::zeros();
    mark_edges(tree, 64, &mut v.0);
    v
}

/// Number of basic edges in an `lcu_size` LCU.
pub fn edge_count_for(lcu_size: u32) -> usize {
    let grid = lcu_size as usize / 4;
    2 * (grid - 1) * grid
}

/// Generalized edge map for the test-scale LCU sizes; index layout follows
/// the 64x64 convention with `grid = lcu_size/4`.
pub fn tree_to_edges_sized(tree: &PartitionTree, lcu_size: u32) -> Vec<f32> {
    let mut v = vec![0.0f32; edge_count_for(lcu_size)];
    mark_edges(tree, lcu_size, &mut v);
    v
}

fn mark_edges(tree: &PartitionTree, lcu_size: u32, out: &mut [f32]) {
    let grid = lcu_size as usize / 4;
    // Each internal boundary is the top or left edge of exactly one leaf,
    // so marking those covers every boundary exactly once.
    for leaf in tree.leaf_rects() {
        let (x, y) = (leaf.x as usize / 4, leaf.y as usize / 4);
        let (cw, ch) = (leaf.w as usize / 4, leaf.h as usize / 4);
        if y > 0 {
            for c in x..x + cw {
                out[(y - 1) * grid + c] = 1.0;
            }
        }
        if x > 0 {
            for r in y..y + ch {
                out[(grid - 1) * grid + (x - 1) * grid + r] = 1.0;
            }
        }
    }
}

/// Reshapes the 480-vector into 30 rows of 16: rows 0-14 are the horizontal
/// grid lines top to bottom, rows 15-29 the vertical lines left to right.
pub fn reshape_edges(v: &EdgeVector) -> [[f32; MEM_COLS]; MEM_ROWS] {
    let mut m = [[0.0f32; MEM_COLS]; MEM_ROWS];
    for (i, &val) in v.0.iter().enumerate() {
        m[i / MEM_COLS][i % MEM_COLS] = val;
    }
    m
}

/// Inverse of `reshape_edges`.
pub fn flatten_edges(m: &[[f32; MEM_COLS]; MEM_ROWS]) -> EdgeVector {
    let mut v = EdgeVector::zeros();
    for r in 0..MEM_ROWS {
        for c in 0..MEM_COLS {
            v.0[r * MEM_COLS + c] = m[r][c];
        }
    }
    v
}

//! Coding-unit partition geometry: the six split modes, child rectangle
//! computation and the fixed pre-order traversal that makes the
//! variable-length mode vector well defined.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{allowed_modes, ConstraintRules};

/// Minimum CU side and the basic-edge grid pitch, in luma samples.
pub const MIN_CU_SIDE: u32 = 4;

/// The six partitioning modes. Integer codes 0..=5 are stable and double
/// as the decoder token alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum SplitMode {
    /// No split: the CU is a leaf.
    Ns = 0,
    /// Quad-tree split into four equal quadrants.
    Qt = 1,
    /// Horizontal binary split (top / bottom halves).
    BtH = 2,
    /// Vertical binary split (left / right halves).
    BtV = 3,
    /// Horizontal extended quad-tree split, 1:2:1 proportions.
    EqtH = 4,
    /// Vertical extended quad-tree split, 1:2:1 proportions.
    EqtV = 5,
}

impl SplitMode {
    pub const COUNT: usize = 6;
    pub const ALL: [SplitMode; 6] = [
        SplitMode::Ns,
        SplitMode::Qt,
        SplitMode::BtH,
        SplitMode::BtV,
        SplitMode::EqtH,
        SplitMode::EqtV,
    ];

    #[inline]
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<SplitMode> {
        SplitMode::ALL.get(code as usize).copied()
    }

    /// Number of children this mode produces (0 for NS).
    pub fn child_count(self) -> usize {
        match self {
            SplitMode::Ns => 0,
            SplitMode::BtH | SplitMode::BtV => 2,
            SplitMode::Qt | SplitMode::EqtH | SplitMode::EqtV => 4,
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SplitMode::Ns => "NS",
            SplitMode::Qt => "QT",
            SplitMode::BtH => "BT_H",
            SplitMode::BtV => "BT_V",
            SplitMode::EqtH => "EQT_H",
            SplitMode::EqtV => "EQT_V",
        };
        f.write_str(name)
    }
}

/// Geometry and split context of one CU inside its LCU.
///
/// `depth` counts every split (QT and non-QT alike) from the root;
/// `qt_allowed` is false once any non-QT split occurred on the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CuRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub depth: u8,
    pub qt_allowed: bool,
}

impl CuRect {
    /// Root CU of an LCU: (0,0,size,size) at depth 0 with QT allowed.
    pub fn lcu_root(size: u32) -> CuRect {
        CuRect {
            x: 0,
            y: 0,
            w: size,
            h: size,
            depth: 0,
            qt_allowed: true,
        }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// max(w,h) / min(w,h).
    pub fn aspect_ratio(&self) -> u32 {
        self.w.max(self.h) / self.w.min(self.h)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("illegal geometry: {mode} of {w}x{h} CU produces a side below {MIN_CU_SIDE} or off the 4-pixel grid")]
    IllegalGeometry { mode: SplitMode, w: u32, h: u32 },
    #[error("malformed tree: {0}")]
    MalformedTree(String),
}

/// Child rectangles of `parent` under `mode`, in the fixed traversal order
/// (raster order: QT TL,TR,BL,BR; BT_H top,bottom; BT_V left,right;
/// EQT_H top,mid-left,mid-right,bottom; EQT_V left,mid-top,mid-bottom,right).
pub fn child_rects(parent: &CuRect, mode: SplitMode) -> Result<Vec<CuRect>, PartitionError> {
    let CuRect { x, y, w, h, .. } = *parent;
    let err = || PartitionError::IllegalGeometry { mode, w, h };
    let child = |cx: u32, cy: u32, cw: u32, ch: u32| CuRect {
        x: cx,
        y: cy,
        w: cw,
        h: ch,
        depth: parent.depth + 1,
        qt_allowed: parent.qt_allowed && mode == SplitMode::Qt,
    };

    let rects = match mode {
        SplitMode::Ns => return Err(err()),
        SplitMode::Qt => {
            let (hw, hh) = (w / 2, h / 2);
            vec![
                child(x, y, hw, hh),
                child(x + hw, y, hw, hh),
                child(x, y + hh, hw, hh),
                child(x + hw, y + hh, hw, hh),
            ]
        }
        SplitMode::BtH => {
            let hh = h / 2;
            vec![child(x, y, w, hh), child(x, y + hh, w, hh)]
        }
        SplitMode::BtV => {
            let hw = w / 2;
            vec![child(x, y, w / 2, h), child(x + hw, y, hw, h)]
        }
        SplitMode::EqtH => {
            let (qh, hh, hw) = (h / 4, h / 2, w / 2);
            vec![
                child(x, y, w, qh),
                child(x, y + qh, hw, hh),
                child(x + hw, y + qh, hw, hh),
                child(x, y + qh + hh, w, qh),
            ]
        }
        SplitMode::EqtV => {
            let (qw, hw, hh) = (w / 4, w / 2, h / 2);
            vec![
                child(x, y, qw, h),
                child(x + qw, y, hw, hh),
                child(x + qw, y + hh, hw, hh),
                child(x + qw + hw, y, qw, h),
            ]
        }
    };

    // Every produced coordinate must stay on the 4-pixel grid with sides >= 4,
    // and the children must tile the parent exactly.
    let on_grid = |v: u32| v % MIN_CU_SIDE == 0;
    for c in &rects {
        if c.w < MIN_CU_SIDE || c.h < MIN_CU_SIDE {
            return Err(err());
        }
        if !(on_grid(c.x) && on_grid(c.y) && on_grid(c.w) && on_grid(c.h)) {
            return Err(err());
        }
    }
    if rects.iter().map(|c| c.area()).sum::<u64>() != parent.area() {
        return Err(err());
    }
    Ok(rects)
}

/// One node of a partition tree. `children` is empty iff `mode` is NS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionTree {
    pub rect: CuRect,
    pub mode: SplitMode,
    pub children: Vec<PartitionTree>,
}

impl PartitionTree {
    /// A single-leaf tree.
    pub fn leaf(rect: CuRect) -> PartitionTree {
        PartitionTree {
            rect,
            mode: SplitMode::Ns,
            children: Vec::new(),
        }
    }

    /// Total node count including leaves; equals the serialized sequence length.
    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|c| c.node_count()).sum::<usize>()
    }

    /// Leaf rectangles in traversal order.
    pub fn leaf_rects(&self) -> Vec<CuRect> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<CuRect>) {
        if self.children.is_empty() {
            out.push(self.rect);
        } else {
            for c in &self.children {
                c.collect_leaves(out);
            }
        }
    }

    /// Maximum node depth in the tree.
    pub fn max_depth(&self) -> u8 {
        self.children
            .iter()
            .map(|c| c.max_depth())
            .max()
            .unwrap_or(self.rect.depth)
    }
}

/// Checks a structurally well-formed tree against the partitioning rules.
///
/// Returns `Ok(false)` when some node uses a mode the rules forbid for its
/// CU context; returns `MalformedTree` when the tree is not even structurally
/// consistent (wrong child count, child rects not matching `child_rects`).
pub fn validate_tree(tree: &PartitionTree, rules: &ConstraintRules) -> Result<bool, PartitionError> {
    if tree.mode == SplitMode::Ns {
        if !tree.children.is_empty() {
            return Err(PartitionError::MalformedTree(
                "NS node with children".into(),
            ));
        }
        return Ok(true);
    }
    let expected = match child_rects(&tree.rect, tree.mode) {
        Ok(r) => r,
        Err(_) => {
            return Err(PartitionError::MalformedTree(format!(
                "{} split of {}x{} CU is geometrically impossible",
                tree.mode, tree.rect.w, tree.rect.h
            )))
        }
    };
    if expected.len() != tree.children.len() {
        return Err(PartitionError::MalformedTree(format!(
            "{} node with {} children",
            tree.mode,
            tree.children.len()
        )));
    }
    for (child, rect) in tree.children.iter().zip(&expected) {
        if child.rect != *rect {
            return Err(PartitionError::MalformedTree(format!(
                "child rect {:?} does not match expected {:?}",
                child.rect, rect
            )));
        }
    }
    if !allowed_modes(&tree.rect, rules).allows(tree.mode) {
        return Ok(false);
    }
    for child in &tree.children {
        if !validate_tree(child, rules)? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintRules;

    fn rect(x: u32, y: u32, w: u32, h: u32) -> CuRect {
        CuRect {
            x,
            y,
            w,
            h,
            depth: 0,
            qt_allowed: true,
        }
    }

    #[test]
    fn qt_of_root_gives_equal_quadrants() {
        let kids = child_rects(&CuRect::lcu_root(64), SplitMode::Qt).unwrap();
        let got: Vec<_> = kids.iter().map(|c| (c.x, c.y, c.w, c.h)).collect();
        assert_eq!(
            got,
            vec![(0, 0, 32, 32), (32, 0, 32, 32), (0, 32, 32, 32), (32, 32, 32, 32)]
        );
        assert!(kids.iter().all(|c| c.depth == 1 && c.qt_allowed));
    }

    #[test]
    fn eqt_h_of_root_has_one_two_one_proportions() {
        let kids = child_rects(&CuRect::lcu_root(64), SplitMode::EqtH).unwrap();
        let got: Vec<_> = kids.iter().map(|c| (c.x, c.y, c.w, c.h)).collect();
        assert_eq!(
            got,
            vec![(0, 0, 64, 16), (0, 16, 32, 32), (32, 16, 32, 32), (0, 48, 64, 16)]
        );
        // children tile the parent
        assert_eq!(kids.iter().map(|c| c.area()).sum::<u64>(), 64 * 64);
        assert!(kids.iter().all(|c| !c.qt_allowed));
    }

    #[test]
    fn eqt_v_is_the_transpose_of_eqt_h() {
        let kids = child_rects(&rect(0, 0, 32, 32), SplitMode::EqtV).unwrap();
        let got: Vec<_> = kids.iter().map(|c| (c.x, c.y, c.w, c.h)).collect();
        assert_eq!(
            got,
            vec![(0, 0, 8, 32), (8, 0, 16, 16), (8, 16, 16, 16), (24, 0, 8, 32)]
        );
    }

    #[test]
    fn bt_v_of_8x8_halves() {
        let kids = child_rects(&rect(0, 0, 8, 8), SplitMode::BtV).unwrap();
        let got: Vec<_> = kids.iter().map(|c| (c.x, c.y, c.w, c.h)).collect();
        assert_eq!(got, vec![(0, 0, 4, 8), (4, 0, 4, 8)]);
    }

    #[test]
    fn undersized_splits_are_rejected() {
        assert!(matches!(
            child_rects(&rect(0, 0, 4, 4), SplitMode::BtV),
            Err(PartitionError::IllegalGeometry { .. })
        ));
        // EQT_H needs h >= 16 for the 1:2:1 strips to stay on the grid
        assert!(child_rects(&rect(0, 0, 64, 8), SplitMode::EqtH).is_err());
        assert!(child_rects(&rect(0, 0, 8, 8), SplitMode::EqtH).is_err());
        assert!(child_rects(&rect(0, 0, 8, 8), SplitMode::Ns).is_err());
    }

    #[test]
    fn node_counts() {
        let rules = ConstraintRules::default();
        let leaf = PartitionTree::leaf(CuRect::lcu_root(64));
        assert_eq!(leaf.node_count(), 1);

        let root = split_all_qt(CuRect::lcu_root(64), 1);
        assert_eq!(root.node_count(), 5);
        assert!(validate_tree(&root, &rules).unwrap());

        // full QT descent to 4x4 leaves: 1 + 4 + 16 + 64 + 256
        let full = split_all_qt(CuRect::lcu_root(64), 4);
        assert_eq!(full.node_count(), 341);
        assert!(validate_tree(&full, &rules).unwrap());
    }

    fn split_all_qt(rect: CuRect, levels: u32) -> PartitionTree {
        if levels == 0 {
            return PartitionTree::leaf(rect);
        }
        let children = child_rects(&rect, SplitMode::Qt)
            .unwrap()
            .into_iter()
            .map(|c| split_all_qt(c, levels - 1))
            .collect();
        PartitionTree {
            rect,
            mode: SplitMode::Qt,
            children,
        }
    }

    /// Chain of alternating BT splits to depth 7; geometry is legal all the
    /// way down but the depth rule caps at 6.
    #[test]
    fn depth_seven_chain_fails_validation() {
        let rules = ConstraintRules::default();
        let mut root = PartitionTree::leaf(CuRect::lcu_root(64));
        {
            let mut node = &mut root;
            for i in 0..7 {
                let mode = if i % 2 == 0 { SplitMode::BtH } else { SplitMode::BtV };
                let kids = child_rects(&node.rect, mode).unwrap();
                node.mode = mode;
                node.children = kids.into_iter().map(PartitionTree::leaf).collect();
                node = &mut node.children[0];
            }
        }
        assert_eq!(root.max_depth(), 7);
        assert_eq!(validate_tree(&root, &rules), Ok(false));
    }

    #[test]
    fn root_ns_is_legal() {
        let rules = ConstraintRules::default();
        let t = PartitionTree::leaf(CuRect::lcu_root(64));
        assert!(validate_tree(&t, &rules).unwrap());
    }

    #[test]
    fn qt_under_bt_fails_validation() {
        let rules = ConstraintRules::default();
        // BT_V then BT_H reaches a square 32x32 with qt_allowed = false
        let root_rect = CuRect::lcu_root(64);
        let halves = child_rects(&root_rect, SplitMode::BtV).unwrap();
        let quarters = child_rects(&halves[0], SplitMode::BtH).unwrap();
        assert!(!quarters[0].qt_allowed);
        let qt_kids = child_rects(&quarters[0], SplitMode::Qt).unwrap();
        let bad = PartitionTree {
            rect: root_rect,
            mode: SplitMode::BtV,
            children: vec![
                PartitionTree {
                    rect: halves[0],
                    mode: SplitMode::BtH,
                    children: vec![
                        PartitionTree {
                            rect: quarters[0],
                            mode: SplitMode::Qt,
                            children: qt_kids.into_iter().map(PartitionTree::leaf).collect(),
                        },
                        PartitionTree::leaf(quarters[1]),
                    ],
                },
                PartitionTree::leaf(halves[1]),
            ],
        };
        assert_eq!(validate_tree(&bad, &rules), Ok(false));
    }

    #[test]
    fn malformed_trees_are_distinguished_from_illegal_ones() {
        let rules = ConstraintRules::default();
        let root_rect = CuRect::lcu_root(64);
        let kids = child_rects(&root_rect, SplitMode::Qt).unwrap();
        let missing_child = PartitionTree {
            rect: root_rect,
            mode: SplitMode::Qt,
            children: kids[..3].iter().copied().map(PartitionTree::leaf).collect(),
        };
        assert!(matches!(
            validate_tree(&missing_child, &rules),
            Err(PartitionError::MalformedTree(_))
        ));
    }

    #[test]
    fn leaves_tile_the_lcu() {
        // rasterize leaf ids onto the 16x16 grid of 4x4 cells
        let tree = split_all_qt(CuRect::lcu_root(64), 2);
        let leaves = tree.leaf_rects();
        let mut grid = [usize::MAX; 16 * 16];
        for (id, r) in leaves.iter().enumerate() {
            for cy in r.y / 4..(r.y + r.h) / 4 {
                for cx in r.x / 4..(r.x + r.w) / 4 {
                    let cell = (cy * 16 + cx) as usize;
                    assert_eq!(grid[cell], usize::MAX, "leaves overlap at cell {cell}");
                    grid[cell] = id;
                }
            }
        }
        assert!(grid.iter().all(|&id| id != usize::MAX), "grid not covered");
        assert_eq!(leaves.iter().map(|r| r.area()).sum::<u64>(), 4096);
    }
}

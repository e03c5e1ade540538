//! Block-partitioning legality: which split modes a CU context admits,
//! constraint-masked mode selection, and exhaustive enumeration of the
//! legal tree space (test oracle for decoding).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::partition::{child_rects, CuRect, PartitionTree, SplitMode};

/// The closed constraint set applied to every split decision: minimum CU
/// side, child aspect ratio, total depth, QT-after-non-QT and
/// QT-requires-square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintRules {
    /// Maximum max(w,h)/min(w,h) of any child CU after the split.
    pub max_aspect_ratio: u32,
    /// Maximum number of splits on any root-to-leaf path.
    pub max_depth: u8,
    /// Minimum CU side in luma samples.
    pub min_cu_side: u32,
    /// Root LCU size; 16 and 32 are supported for test scaling.
    pub lcu_size: u32,
}

impl Default for ConstraintRules {
    fn default() -> Self {
        ConstraintRules {
            max_aspect_ratio: 8,
            max_depth: 6,
            min_cu_side: 4,
            lcu_size: 64,
        }
    }
}

impl ConstraintRules {
    /// Same rules rooted at a different LCU size.
    pub fn with_lcu_size(self, lcu_size: u32) -> Self {
        ConstraintRules { lcu_size, ..self }
    }
}

/// Set of allowed split modes, indexed by mode code. NS is always allowed,
/// so the mask is never empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeMask {
    bits: u8,
}

impl ModeMask {
    /// Mask containing only NS.
    pub fn ns_only() -> ModeMask {
        ModeMask { bits: 1 }
    }

    pub fn allows(&self, mode: SplitMode) -> bool {
        self.bits & (1 << mode.code()) != 0
    }

    fn insert(&mut self, mode: SplitMode) {
        self.bits |= 1 << mode.code();
    }

    pub fn iter(&self) -> impl Iterator<Item = SplitMode> + '_ {
        SplitMode::ALL.into_iter().filter(|m| self.allows(*m))
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        false // NS is always present
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConstraintError {
    #[error("legal tree enumeration exceeded cap of {cap}")]
    CapExceeded { cap: usize },
}

/// Legal split modes for a CU context.
///
/// A non-NS mode is allowed iff its geometry works (all child sides on the
/// 4-pixel grid and >= `min_cu_side`), every child aspect ratio stays within
/// `max_aspect_ratio`, the depth budget is not exhausted, and QT is only
/// taken on square CUs with no non-QT split above.
pub fn allowed_modes(cu: &CuRect, rules: &ConstraintRules) -> ModeMask {
    let mut mask = ModeMask::ns_only();
    if cu.depth >= rules.max_depth {
        return mask;
    }
    for mode in SplitMode::ALL.into_iter().skip(1) {
        if mode == SplitMode::Qt && !(cu.qt_allowed && cu.w == cu.h) {
            continue;
        }
        let children = match child_rects(cu, mode) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let ok = children.iter().all(|c| {
            c.w >= rules.min_cu_side
                && c.h >= rules.min_cu_side
                && c.aspect_ratio() <= rules.max_aspect_ratio
        });
        if ok {
            mask.insert(mode);
        }
    }
    mask
}

/// The allowed mode with maximum probability; ties break to the smallest
/// mode code. Total because NS is always allowed.
pub fn masked_argmax(probs: &[f32; 6], mask: ModeMask) -> SplitMode {
    let mut best = SplitMode::Ns;
    let mut best_p = f32::NEG_INFINITY;
    for mode in SplitMode::ALL {
        if mask.allows(mode) && probs[mode.code() as usize] > best_p {
            best = mode;
            best_p = probs[mode.code() as usize];
        }
    }
    best
}

/// Exact number of distinct legal trees rooted at an `lcu_size` square,
/// by the recursive product rule with memoization. Intended for the small
/// test sizes (<= 32); counts grow far too fast beyond that.
pub fn count_legal_trees(lcu_size: u32, rules: &ConstraintRules) -> u128 {
    let rules = rules.with_lcu_size(lcu_size);
    let mut memo = std::collections::HashMap::new();
    count_rec(&CuRect::lcu_root(lcu_size), &rules, &mut memo)
}

fn count_rec(
    cu: &CuRect,
    rules: &ConstraintRules,
    memo: &mut std::collections::HashMap<(u32, u32, u8, bool), u128>,
) -> u128 {
    // position does not affect the count, only shape and split context
    let key = (cu.w, cu.h, cu.depth, cu.qt_allowed);
    if let Some(&n) = memo.get(&key) {
        return n;
    }
    let mut total: u128 = 1; // NS
    for mode in allowed_modes(cu, rules).iter().skip(1) {
        let children = child_rects(cu, mode).expect("allowed mode must split");
        let mut prod: u128 = 1;
        for c in &children {
            prod *= count_rec(c, rules, memo);
        }
        total += prod;
    }
    memo.insert(key, total);
    total
}

/// Materializes every legal tree rooted at `lcu_size`, aborting with
/// `CapExceeded` once more than `cap` trees exist. Independent of
/// `count_legal_trees` on purpose: the two are checked against each other.
pub fn enumerate_legal_trees(
    lcu_size: u32,
    rules: &ConstraintRules,
    cap: usize,
) -> Result<Vec<PartitionTree>, ConstraintError> {
    let rules = rules.with_lcu_size(lcu_size);
    let mut budget = cap;
    enumerate_rec(&CuRect::lcu_root(lcu_size), &rules, &mut budget)
}

fn enumerate_rec(
    cu: &CuRect,
    rules: &ConstraintRules,
    budget: &mut usize,
) -> Result<Vec<PartitionTree>, ConstraintError> {
    fn spend(budget: &mut usize) -> Result<(), ConstraintError> {
        if *budget == 0 {
            return Err(ConstraintError::CapExceeded { cap: 0 });
        }
        *budget -= 1;
        Ok(())
    }

    let mut out = Vec::new();
    spend(budget)?;
    out.push(PartitionTree::leaf(*cu));
    for mode in allowed_modes(cu, rules).iter().skip(1) {
        let children = child_rects(cu, mode).expect("allowed mode must split");
        let per_child: Vec<Vec<PartitionTree>> = children
            .iter()
            .map(|c| enumerate_rec(c, rules, budget))
            .collect::<Result<_, _>>()?;
        // cartesian product over child alternatives
        let mut combos: Vec<Vec<PartitionTree>> = vec![Vec::new()];
        for alternatives in &per_child {
            let mut next = Vec::with_capacity(combos.len() * alternatives.len());
            for prefix in &combos {
                for alt in alternatives {
                    let mut row = prefix.clone();
                    row.push(alt.clone());
                    next.push(row);
                }
            }
            combos = next;
        }
        for children in combos {
            spend(budget)?;
            out.push(PartitionTree {
                rect: *cu,
                mode,
                children,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::validate_tree;

    fn cu(x: u32, y: u32, w: u32, h: u32, depth: u8, qt: bool) -> CuRect {
        CuRect {
            x,
            y,
            w,
            h,
            depth,
            qt_allowed: qt,
        }
    }

    #[test]
    fn root_allows_all_six_modes() {
        let rules = ConstraintRules::default();
        let mask = allowed_modes(&CuRect::lcu_root(64), &rules);
        assert_eq!(mask.len(), 6);
    }

    #[test]
    fn minimum_cu_allows_only_ns() {
        let rules = ConstraintRules::default();
        let mask = allowed_modes(&cu(0, 0, 4, 4, 3, false), &rules);
        assert_eq!(mask.iter().collect::<Vec<_>>(), vec![SplitMode::Ns]);
    }

    #[test]
    fn wide_cu_is_limited_by_aspect_and_geometry() {
        let rules = ConstraintRules::default();
        // 64x8: BT_H child 64x4 has aspect 16 > 8; EQT_H strip height 2 < 4;
        // QT is not square; BT_V and EQT_V survive.
        let mask = allowed_modes(&cu(0, 0, 64, 8, 1, true), &rules);
        let got: Vec<_> = mask.iter().collect();
        assert_eq!(got, vec![SplitMode::Ns, SplitMode::BtV, SplitMode::EqtV]);
    }

    #[test]
    fn depth_cap_forces_ns() {
        let rules = ConstraintRules::default();
        let mask = allowed_modes(&cu(0, 0, 32, 32, 6, true), &rules);
        assert_eq!(mask.len(), 1);
        assert!(mask.allows(SplitMode::Ns));
    }

    #[test]
    fn masked_argmax_picks_best_allowed() {
        let all = allowed_modes(&CuRect::lcu_root(64), &ConstraintRules::default());
        let probs = [0.1, 0.6, 0.1, 0.1, 0.05, 0.05];
        assert_eq!(masked_argmax(&probs, all), SplitMode::Qt);

        let mut limited = ModeMask::ns_only();
        limited.insert(SplitMode::BtH);
        limited.insert(SplitMode::BtV);
        let probs = [0.1, 0.6, 0.3, 0.0, 0.0, 0.0];
        assert_eq!(masked_argmax(&probs, limited), SplitMode::BtH);

        let uniform = [1.0 / 6.0; 6];
        assert_eq!(masked_argmax(&uniform, all), SplitMode::Ns);
    }

    #[test]
    fn lcu4_has_one_tree_and_lcu8_has_ten() {
        let rules = ConstraintRules::default();
        assert_eq!(count_legal_trees(4, &rules), 1);
        assert_eq!(enumerate_legal_trees(4, &rules, 10).unwrap().len(), 1);

        // NS, QT, and 4 variants under each BT root (each half splits or not)
        assert_eq!(count_legal_trees(8, &rules), 10);
        let trees = enumerate_legal_trees(8, &rules, 100).unwrap();
        assert_eq!(trees.len(), 10);
        for t in &trees {
            assert!(validate_tree(t, &rules.with_lcu_size(8)).unwrap());
        }
    }

    #[test]
    fn dual_enumeration_agrees_at_lcu16() {
        let rules = ConstraintRules::default();
        let count = count_legal_trees(16, &rules);
        let trees = enumerate_legal_trees(16, &rules, 1_000_000).unwrap();
        assert_eq!(count, trees.len() as u128);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let rules = ConstraintRules::default();
        assert!(matches!(
            enumerate_legal_trees(16, &rules, 100),
            Err(ConstraintError::CapExceeded { .. })
        ));
    }
}

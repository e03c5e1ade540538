//! Brute-force ground truth: exhaustive RD-proxy partition search over the
//! legal tree space (labels at desk scale), plus seeded random legal trees
//! for property tests.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{tree_to_edges, tree_to_modes, EdgeVector, ModeSequence};
use crate::constraints::{allowed_modes, ConstraintRules};
use crate::frame::LcuInput;
use crate::partition::{child_rects, CuRect, PartitionTree, SplitMode};

/// Rate constant charged per leaf (intra mode + header signalling proxy).
pub const LEAF_HEADER_BITS: f64 = 8.0;

/// The four intra predictors the proxy cost minimizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Dc,
    Horizontal,
    Vertical,
    Planar,
}

impl Predictor {
    pub const ALL: [Predictor; 4] = [
        Predictor::Dc,
        Predictor::Horizontal,
        Predictor::Vertical,
        Predictor::Planar,
    ];
}

/// Configuration of the RD-proxy search: `lambda` weighs rate against SSE
/// distortion, `split_bits` is charged once per non-NS node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RdProxyConfig {
    pub lambda: f64,
    pub split_bits: f64,
}

impl Default for RdProxyConfig {
    fn default() -> Self {
        RdProxyConfig {
            lambda: 25.0,
            split_bits: 8.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("exhaustive search exceeded the node cap of {cap}")]
    CapExceeded { cap: usize },
}

/// One labeled dataset record: the input block, the proxy-optimal tree and
/// both label vectors derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLcu {
    pub input: LcuInput,
    pub best_tree: PartitionTree,
    pub mode_labels: ModeSequence,
    pub edge_labels: EdgeVector,
    pub cost: f64,
}

/// Intra-prediction cost of coding `rect` as one leaf: minimum SSE over the
/// four predictors plus the per-leaf rate constant. Neighbor samples are the
/// originals stored in the 66x66 block (row above, column left).
pub fn leaf_cost(pixels: &LcuInput, rect: &CuRect, cfg: &RdProxyConfig) -> f64 {
    let (x, y) = (rect.x as usize, rect.y as usize);
    let (w, h) = (rect.w as usize, rect.h as usize);
    // 66x66 coordinates: LCU pixel (x,y) sits at (y+2, x+2)
    let top: Vec<f64> = (0..w).map(|j| pixels.sample(y + 1, x + 2 + j) as f64).collect();
    let left: Vec<f64> = (0..h).map(|i| pixels.sample(y + 2 + i, x + 1) as f64).collect();
    let top_right = if x + 2 + w < 66 {
        pixels.sample(y + 1, x + 2 + w) as f64
    } else {
        top[w - 1]
    };
    let bottom_left = if y + 2 + h < 66 {
        pixels.sample(y + 2 + h, x + 1) as f64
    } else {
        left[h - 1]
    };
    let dc = (top.iter().sum::<f64>() + left.iter().sum::<f64>()) / (w + h) as f64;

    let mut best_sse = f64::INFINITY;
    for pred in Predictor::ALL {
        let mut sse = 0.0;
        for i in 0..h {
            for j in 0..w {
                let p = match pred {
                    Predictor::Dc => dc,
                    Predictor::Horizontal => left[i],
                    Predictor::Vertical => top[j],
                    Predictor::Planar => {
                        let ph = ((w - 1 - j) as f64 * left[i] + (j + 1) as f64 * top_right)
                            / w as f64;
                        let pv = ((h - 1 - i) as f64 * top[j] + (i + 1) as f64 * bottom_left)
                            / h as f64;
                        0.5 * (ph + pv)
                    }
                };
                let d = pixels.lcu_pixel(x + j, y + i) as f64 - p;
                sse += d * d;
            }
        }
        if sse < best_sse {
            best_sse = sse;
        }
    }
    best_sse + cfg.lambda * LEAF_HEADER_BITS
}

type MemoKey = (u32, u32, u32, u32, u8, bool);

/// Exact minimizer of total leaf cost plus split rate over all legal trees
/// rooted at `rules.lcu_size`, by memoized recursion. Ties break to NS
/// first, then the smallest mode code.
pub fn best_partition(
    pixels: &LcuInput,
    rules: &ConstraintRules,
    cfg: &RdProxyConfig,
) -> (PartitionTree, f64) {
    let mut memo: HashMap<MemoKey, (f64, SplitMode)> = HashMap::new();
    let mut leaf_memo: HashMap<(u32, u32, u32, u32), f64> = HashMap::new();
    let root = CuRect::lcu_root(rules.lcu_size);
    let cost = search(pixels, &root, rules, cfg, &mut memo, &mut leaf_memo);
    let tree = rebuild(&root, &memo);
    (tree, cost)
}

fn search(
    pixels: &LcuInput,
    cu: &CuRect,
    rules: &ConstraintRules,
    cfg: &RdProxyConfig,
    memo: &mut HashMap<MemoKey, (f64, SplitMode)>,
    leaf_memo: &mut HashMap<(u32, u32, u32, u32), f64>,
) -> f64 {
    let key = (cu.x, cu.y, cu.w, cu.h, cu.depth, cu.qt_allowed);
    if let Some(&(cost, _)) = memo.get(&key) {
        return cost;
    }
    let leaf_key = (cu.x, cu.y, cu.w, cu.h);
    let mut best = *leaf_memo
        .entry(leaf_key)
        .or_insert_with(|| leaf_cost(pixels, cu, cfg));
    let mut best_mode = SplitMode::Ns;
    for mode in allowed_modes(cu, rules).iter().skip(1) {
        let children = child_rects(cu, mode).expect("allowed mode must split");
        let mut cost = cfg.lambda * cfg.split_bits;
        for c in &children {
            cost += search(pixels, c, rules, cfg, memo, leaf_memo);
            if cost >= best {
                break;
            }
        }
        if cost < best {
            best = cost;
            best_mode = mode;
        }
    }
    memo.insert(key, (best, best_mode));
    best
}

fn rebuild(cu: &CuRect, memo: &HashMap<MemoKey, (f64, SplitMode)>) -> PartitionTree {
    let key = (cu.x, cu.y, cu.w, cu.h, cu.depth, cu.qt_allowed);
    let (_, mode) = memo[&key];
    if mode == SplitMode::Ns {
        return PartitionTree::leaf(*cu);
    }
    let children = child_rects(cu, mode)
        .expect("memoized mode must split")
        .iter()
        .map(|c| rebuild(c, memo))
        .collect();
    PartitionTree {
        rect: *cu,
        mode,
        children,
    }
}

/// Plain exhaustive recursion without memoization; equivalence oracle for
/// `best_partition`. `cap` bounds the number of visited contexts.
pub fn best_partition_exhaustive(
    pixels: &LcuInput,
    rules: &ConstraintRules,
    cfg: &RdProxyConfig,
    cap: usize,
) -> Result<(PartitionTree, f64), OracleError> {
    let mut visited = 0usize;
    let root = CuRect::lcu_root(rules.lcu_size);
    exhaustive(pixels, &root, rules, cfg, cap, &mut visited)
}

fn exhaustive(
    pixels: &LcuInput,
    cu: &CuRect,
    rules: &ConstraintRules,
    cfg: &RdProxyConfig,
    cap: usize,
    visited: &mut usize,
) -> Result<(PartitionTree, f64), OracleError> {
    *visited += 1;
    if *visited > cap {
        return Err(OracleError::CapExceeded { cap });
    }
    let mut best = leaf_cost(pixels, cu, cfg);
    let mut best_tree = PartitionTree::leaf(*cu);
    for mode in allowed_modes(cu, rules).iter().skip(1) {
        let children = child_rects(cu, mode).expect("allowed mode must split");
        let mut cost = cfg.lambda * cfg.split_bits;
        let mut sub = Vec::with_capacity(children.len());
        for c in &children {
            let (t, c_cost) = exhaustive(pixels, c, rules, cfg, cap, visited)?;
            cost += c_cost;
            sub.push(t);
        }
        if cost < best {
            best = cost;
            best_tree = PartitionTree {
                rect: *cu,
                mode,
                children: sub,
            };
        }
    }
    Ok((best_tree, best))
}

/// Labels one 64x64 input: proxy-optimal tree plus both serialized label
/// vectors.
pub fn label_lcu(input: &LcuInput, rules: &ConstraintRules, cfg: &RdProxyConfig) -> LabeledLcu {
    assert_eq!(rules.lcu_size, 64, "edge labels are defined for 64x64 LCUs");
    let (best_tree, cost) = best_partition(input, rules, cfg);
    LabeledLcu {
        mode_labels: tree_to_modes(&best_tree),
        edge_labels: tree_to_edges(&best_tree),
        input: input.clone(),
        best_tree,
        cost,
    }
}

/// Uniform random legal tree: at each CU a split happens with a
/// depth-decaying probability, choosing uniformly among the allowed non-NS
/// modes. Deterministic per seed.
pub fn random_legal_tree(lcu_size: u32, rules: &ConstraintRules, seed: u64) -> PartitionTree {
    random_legal_tree_with(lcu_size, rules, 0.9, seed)
}

/// `split_prob` is the depth-0 split probability; it decays by 0.75 per
/// level. 0 always yields a single NS leaf.
pub fn random_legal_tree_with(
    lcu_size: u32,
    rules: &ConstraintRules,
    split_prob: f64,
    seed: u64,
) -> PartitionTree {
    let rules = rules.with_lcu_size(lcu_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grow(&CuRect::lcu_root(lcu_size), &rules, split_prob, &mut rng)
}

fn grow(cu: &CuRect, rules: &ConstraintRules, split_prob: f64, rng: &mut ChaCha8Rng) -> PartitionTree {
    let splits: Vec<SplitMode> = allowed_modes(cu, rules).iter().skip(1).collect();
    let p = split_prob * 0.75f64.powi(cu.depth as i32);
    if splits.is_empty() || rng.gen::<f64>() >= p {
        return PartitionTree::leaf(*cu);
    }
    let mode = splits[rng.gen_range(0..splits.len())];
    let children = child_rects(cu, mode)
        .expect("allowed mode must split")
        .iter()
        .map(|c| grow(c, rules, split_prob, rng))
        .collect();
    PartitionTree {
        rect: *cu,
        mode,
        children,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::LCU_INPUT_SIDE;
    use crate::partition::validate_tree;

    fn cu(x: u32, y: u32, w: u32, h: u32) -> CuRect {
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
    fn constant_block_costs_only_header_bits() {
        let input = LcuInput::flat(128, 32);
        let cfg = RdProxyConfig {
            lambda: 3.0,
            split_bits: 8.0,
        };
        // references are 128 too, so DC predicts exactly
        let c = leaf_cost(&input, &cu(0, 0, 64, 64), &cfg);
        assert!((c - 3.0 * LEAF_HEADER_BITS).abs() < 1e-9, "cost {c}");
    }

    #[test]
    fn vertical_predictor_is_exact_on_column_constant_blocks() {
        let mut input = LcuInput::flat(0, 32);
        // column-dependent ramp, constant down each column; the reference row
        // above extends it exactly
        for c in 0..LCU_INPUT_SIDE {
            for r in 0..LCU_INPUT_SIDE {
                input.set_sample(r, c, (40 + 2 * c) as u8);
            }
        }
        let cfg = RdProxyConfig {
            lambda: 2.0,
            split_bits: 8.0,
        };
        let c = leaf_cost(&input, &cu(0, 0, 64, 64), &cfg);
        assert!((c - 2.0 * LEAF_HEADER_BITS).abs() < 1e-9, "cost {c}");
        let c = leaf_cost(&input, &cu(16, 32, 32, 16), &cfg);
        assert!((c - 2.0 * LEAF_HEADER_BITS).abs() < 1e-9, "cost {c}");
    }

    #[test]
    fn cost_is_monotone_in_lambda() {
        let mut input = LcuInput::flat(90, 32);
        input.set_sample(30, 30, 200); // one outlier so SSE > 0
        let rect = cu(0, 0, 64, 64);
        let mut last = f64::NEG_INFINITY;
        for lambda in [0.0, 0.5, 2.0, 10.0, 1000.0] {
            let c = leaf_cost(&input, &rect, &RdProxyConfig { lambda, split_bits: 8.0 });
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn constant_lcu_stays_unsplit() {
        let input = LcuInput::flat(128, 32);
        let rules = ConstraintRules::default();
        for lambda in [0.01, 1.0, 25.0, 1e6] {
            let (tree, _) = best_partition(&input, &rules, &RdProxyConfig { lambda, split_bits: 8.0 });
            assert_eq!(tree.node_count(), 1, "lambda {lambda}");
            assert_eq!(tree.mode, SplitMode::Ns);
        }
    }

    /// Quadrants laid out so one QT makes every child exactly predictable:
    /// TL by DC from its references, TR by vertical, BL by horizontal, and
    /// BR by DC from the two interior neighbor quadrants.
    pub(crate) fn quadrant_input() -> LcuInput {
        let (tl, tr, bl) = (40u8, 90u8, 160u8);
        let br = ((tr as u32 + bl as u32) / 2) as u8; // 125
        let mut input = LcuInput::flat(0, 32);
        for r in 2..LCU_INPUT_SIDE {
            for c in 2..LCU_INPUT_SIDE {
                let v = match (r < 34, c < 34) {
                    (true, true) => tl,
                    (true, false) => tr,
                    (false, true) => bl,
                    (false, false) => br,
                };
                input.set_sample(r, c, v);
            }
        }
        // reference border extends the adjacent quadrant values
        for c in 2..LCU_INPUT_SIDE {
            let v = if c < 34 { tl } else { tr };
            input.set_sample(0, c, v);
            input.set_sample(1, c, v);
        }
        for r in 2..LCU_INPUT_SIDE {
            let v = if r < 34 { tl } else { bl };
            input.set_sample(r, 0, v);
            input.set_sample(r, 1, v);
        }
        input
    }

    #[test]
    fn quadrant_image_splits_once() {
        let input = quadrant_input();
        let rules = ConstraintRules::default();
        let cfg = RdProxyConfig {
            lambda: 10.0,
            split_bits: 8.0,
        };
        let (tree, cost) = best_partition(&input, &rules, &cfg);
        assert_eq!(tree.mode, SplitMode::Qt);
        assert_eq!(tree.node_count(), 5);
        assert!(tree.children.iter().all(|c| c.mode == SplitMode::Ns));
        // 4 leaf headers + 1 split flag, zero residual
        let expect = 10.0 * (4.0 * LEAF_HEADER_BITS + 8.0);
        assert!((cost - expect).abs() < 1e-9, "cost {cost}");
    }

    #[test]
    fn huge_lambda_forces_ns() {
        let input = quadrant_input();
        let rules = ConstraintRules::default();
        let cfg = RdProxyConfig {
            lambda: 1e12,
            split_bits: 8.0,
        };
        let (tree, _) = best_partition(&input, &rules, &cfg);
        assert_eq!(tree.node_count(), 1);
    }

    #[test]
    fn memoized_equals_exhaustive_at_16() {
        let rules = ConstraintRules::default().with_lcu_size(16);
        let cfg = RdProxyConfig {
            lambda: 4.0,
            split_bits: 8.0,
        };
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut input = LcuInput::flat(0, 32);
            for r in 0..LCU_INPUT_SIDE {
                for c in 0..LCU_INPUT_SIDE {
                    input.set_sample(r, c, rng.gen());
                }
            }
            let (t_m, c_m) = best_partition(&input, &rules, &cfg);
            let (t_e, c_e) = best_partition_exhaustive(&input, &rules, &cfg, 1_000_000).unwrap();
            assert_eq!(t_m, t_e, "seed {seed}");
            assert!((c_m - c_e).abs() < 1e-9);
            assert!(validate_tree(&t_m, &rules).unwrap());
        }
    }

    #[test]
    fn exhaustive_cap_is_reported() {
        let input = LcuInput::flat(50, 32);
        let rules = ConstraintRules::default().with_lcu_size(16);
        let cfg = RdProxyConfig::default();
        assert!(matches!(
            best_partition_exhaustive(&input, &rules, &cfg, 10),
            Err(OracleError::CapExceeded { cap: 10 })
        ));
    }

    #[test]
    fn random_trees_are_deterministic_and_legal() {
        let rules = ConstraintRules::default();
        let a = random_legal_tree(64, &rules, 42);
        let b = random_legal_tree(64, &rules, 42);
        assert_eq!(a, b);
        for seed in 0..200 {
            let t = random_legal_tree(64, &rules, seed);
            assert!(validate_tree(&t, &rules).unwrap(), "seed {seed}");
        }
        let leaf = random_legal_tree_with(64, &rules, 0.0, 7);
        assert_eq!(leaf.node_count(), 1);
    }

    #[test]
    fn labels_are_consistent_with_the_codecs() {
        let input = quadrant_input();
        let rules = ConstraintRules::default();
        let labeled = label_lcu(&input, &rules, &RdProxyConfig::default());
        assert_eq!(labeled.mode_labels, tree_to_modes(&labeled.best_tree));
        assert_eq!(labeled.edge_labels, tree_to_edges(&labeled.best_tree));
    }
}

//! Query-dependent dynamic binary trees over chunk token ranges.
//!
//! A tree is built by walking one root-to-leaf path: each visited node is
//! split in two around a (possibly noised) midpoint, a policy picks the
//! child to keep expanding, and the unselected sibling is preserved at its
//! level. At the final level both children are preserved. Preserved nodes
//! tile the chunk exactly and are compressed with level-dependent keep
//! ratios that halve per level toward the leaves.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Expanded,
    Preserved,
}

/// A node over a chunk-local token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeNode {
    pub start: usize,
    pub end: usize,
    pub level: usize,
    pub status: NodeStatus,
}

impl TreeNode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// The result of one dynamic construction-and-search pass over a chunk.
#[derive(Debug, Clone)]
pub struct ContextTree {
    pub chunk_index: usize,
    /// Requested number of split levels (0 only for the degenerate
    /// whole-chunk tree built when the chunk is too short to split).
    pub depth: usize,
    /// Preserved nodes in document order (sorted by start offset).
    pub preserved: Vec<TreeNode>,
    /// True when the walk stopped before the requested depth because a
    /// selected node fell below twice the minimum length.
    pub early_stopped: bool,
}

impl ContextTree {
    pub fn chunk_len(&self) -> usize {
        self.preserved.last().map(|n| n.end).unwrap_or(0)
    }
}

/// Node-splitting noise parameters. The split noise is drawn per node as
/// `ε ~ Normal(0, σ²)` with `σ = l/gamma` for a node of length `l`.
#[derive(Debug, Clone, Copy)]
pub struct SplitParams {
    pub gamma: f64,
    pub min_len: usize,
    pub rng_seed: u64,
}

impl SplitParams {
    pub fn new(gamma: f64, min_len: usize, rng_seed: u64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(Error::config("split gamma must be positive"));
        }
        if min_len < 1 {
            return Err(Error::config("min node length must be at least 1"));
        }
        Ok(SplitParams {
            gamma,
            min_len,
            rng_seed,
        })
    }

    pub fn sigma(&self, node_len: usize) -> f64 {
        node_len as f64 / self.gamma
    }
}

/// Branch-selection policy for the expansion path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Keep expanding the right branch (language-modeling mode).
    AlwaysRight,
    /// Keep expanding the left branch (ablation).
    AlwaysLeft,
    /// Fair coin per split (ablation).
    Random,
    /// Pick the child whose representation has higher cosine similarity to
    /// the query representation (instruction mode).
    QueryAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Left,
    Right,
}

/// Per-level keep ratios `α_w ≥ 1`, level 1 at index 0.
#[derive(Debug, Clone)]
pub struct CompressionSchedule {
    pub depth: usize,
    pub alpha_per_level: Vec<f64>,
    /// Tree-level ratio chunk_len / Σ compressed lengths for the balanced
    /// deterministic tree (exact when the chunk divides evenly).
    pub beta: f64,
}

impl CompressionSchedule {
    pub fn alpha_for_level(&self, level: usize) -> Result<f64> {
        if level == 0 || level > self.depth {
            return Err(Error::config(format!(
                "no keep ratio for level {level} in a depth-{} schedule",
                self.depth
            )));
        }
        Ok(self.alpha_per_level[level - 1])
    }

    /// Constant keep ratio at every level. The level-doubling rule cannot
    /// express tree ratios below 2, so whole-tree ratios β ∈ {1, 2} use a
    /// uniform per-level ratio equal to β instead.
    pub fn uniform(depth: usize, alpha: f64) -> Result<Self> {
        if depth < 1 {
            return Err(Error::config("schedule depth must be at least 1"));
        }
        if alpha < 1.0 {
            return Err(Error::config("keep ratio must be at least 1"));
        }
        Ok(CompressionSchedule {
            depth,
            alpha_per_level: vec![alpha; depth],
            beta: alpha,
        })
    }
}

/// Level-doubling schedule: `α_depth = alpha_leaf`, `α_w = 2·α_{w+1}`.
pub fn schedule_for(depth: usize, alpha_leaf: u32) -> Result<CompressionSchedule> {
    if depth < 1 {
        return Err(Error::config("schedule depth must be at least 1"));
    }
    if alpha_leaf < 1 || !alpha_leaf.is_power_of_two() {
        return Err(Error::config(format!(
            "leaf keep ratio must be a power of two ≥ 1, got {alpha_leaf}"
        )));
    }
    let alpha_per_level: Vec<f64> = (1..=depth)
        .map(|w| (alpha_leaf as f64) * 2f64.powi((depth - w) as i32))
        .collect();
    // For a balanced deterministic tree every preserved node compresses to
    // chunk/(2^depth·alpha_leaf) tokens, and there are depth+1 of them.
    let beta = 2f64.powi(depth as i32) * alpha_leaf as f64 / (depth + 1) as f64;
    Ok(CompressionSchedule {
        depth,
        alpha_per_level,
        beta,
    })
}

/// Deterministic split point for a node of length `l` with noise `ε`:
/// `b = floor(l/2 − ε)`, clamped to `[min_len, l − min_len]`.
pub fn split_point(l: usize, eps: f64, min_len: usize) -> usize {
    let raw = (l as f64 / 2.0 - eps).floor();
    let b = if raw < min_len as f64 {
        min_len
    } else if raw > (l - min_len) as f64 {
        l - min_len
    } else {
        raw as usize
    };
    b
}

/// Splits a node in two children that partition its range.
pub fn split_node(
    node: &TreeNode,
    params: &SplitParams,
    deterministic: bool,
    rng: &mut impl Rng,
) -> Result<(TreeNode, TreeNode)> {
    let l = node.len();
    if l < 2 * params.min_len {
        return Err(Error::SplitTooShort {
            len: l,
            min_len: params.min_len,
        });
    }
    let eps = if deterministic {
        0.0
    } else {
        let sigma = params.sigma(l);
        Normal::new(0.0, sigma)
            .map_err(|e| Error::config(format!("invalid split noise sigma: {e}")))?
            .sample(rng)
    };
    let b = split_point(l, eps, params.min_len);
    let left = TreeNode {
        start: node.start,
        end: node.start + b,
        level: node.level + 1,
        status: NodeStatus::Preserved,
    };
    let right = TreeNode {
        start: node.start + b,
        end: node.end,
        level: node.level + 1,
        status: NodeStatus::Preserved,
    };
    Ok((left, right))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Picks the branch to keep expanding. Similarity scores are returned for
/// the query-aware policy so callers can trace the decision.
pub fn select_branch(
    policy: PolicyKind,
    left_repr: Option<&[f64]>,
    right_repr: Option<&[f64]>,
    query_repr: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Result<(Branch, Option<(f64, f64)>)> {
    match policy {
        PolicyKind::AlwaysRight => Ok((Branch::Right, None)),
        PolicyKind::AlwaysLeft => Ok((Branch::Left, None)),
        PolicyKind::Random => Ok((
            if rng.gen::<bool>() {
                Branch::Right
            } else {
                Branch::Left
            },
            None,
        )),
        PolicyKind::QueryAware => {
            let (Some(l), Some(r), Some(q)) = (left_repr, right_repr, query_repr) else {
                return Err(Error::usage(
                    "query-aware selection requires left, right and query representations",
                ));
            };
            if l.len() != r.len() || l.len() != q.len() {
                return Err(Error::usage(format!(
                    "representation dimensions disagree: {} / {} / {}",
                    l.len(),
                    r.len(),
                    q.len()
                )));
            }
            let sim_l = cosine(l, q);
            let sim_r = cosine(r, q);
            // Ties break Left, preserving document order preference.
            let branch = if sim_r > sim_l { Branch::Right } else { Branch::Left };
            Ok((branch, Some((sim_l, sim_r))))
        }
    }
}

/// One recorded split decision, for tree dumps and selection audits.
#[derive(Debug, Clone, Serialize)]
pub struct SplitRecord {
    pub level: usize,
    pub parent_start: usize,
    pub parent_end: usize,
    pub split_at: usize,
    pub selected: Branch,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_left: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_right: Option<f64>,
}

/// Node-representation callback for the query-aware policy: maps a
/// chunk-local token range to a representation vector.
pub type ReprFn<'a> = dyn FnMut(usize, usize) -> Result<Vec<f64>> + 'a;

/// Builds the dynamic tree and returns the split trace alongside it.
pub fn build_tree_traced(
    chunk_index: usize,
    chunk_len: usize,
    depth: usize,
    params: &SplitParams,
    policy: PolicyKind,
    node_repr: Option<&mut ReprFn<'_>>,
    query_repr: Option<&[f64]>,
    deterministic: bool,
) -> Result<(ContextTree, Vec<SplitRecord>)> {
    if depth < 1 {
        return Err(Error::config("tree depth must be at least 1"));
    }
    if chunk_len == 0 {
        return Err(Error::usage("cannot build a tree over an empty chunk"));
    }
    if policy == PolicyKind::QueryAware && (node_repr.is_none() || query_repr.is_none()) {
        return Err(Error::usage(
            "query-aware tree construction requires representation callbacks",
        ));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(params.rng_seed);
    let mut preserved: Vec<TreeNode> = Vec::with_capacity(depth + 1);
    let mut trace = Vec::new();

    // Degenerate chunk: too short for even one split.
    if chunk_len < 2 * params.min_len {
        preserved.push(TreeNode {
            start: 0,
            end: chunk_len,
            level: 1,
            status: NodeStatus::Preserved,
        });
        return Ok((
            ContextTree {
                chunk_index,
                depth: 0,
                preserved,
                early_stopped: true,
            },
            trace,
        ));
    }

    let mut node_repr = node_repr;
    let mut current = TreeNode {
        start: 0,
        end: chunk_len,
        level: 0,
        status: NodeStatus::Expanded,
    };

    let mut early_stopped = false;
    for w in 1..=depth {
        if current.len() < 2 * params.min_len {
            // Early stop: the selected node cannot be split further; it is
            // preserved at the level it already sits on.
            preserved.push(TreeNode {
                status: NodeStatus::Preserved,
                ..current
            });
            early_stopped = true;
            break;
        }
        let (left, right) = split_node(&current, params, deterministic, &mut rng)?;
        if w == depth {
            preserved.push(left);
            preserved.push(right);
            break;
        }
        let (sim_l, sim_r, branch) = if policy == PolicyKind::QueryAware {
            let repr = node_repr
                .as_mut()
                .expect("checked above: query-aware requires callbacks");
            let lr = repr(left.start, left.end)?;
            let rr = repr(right.start, right.end)?;
            let (branch, sims) =
                select_branch(policy, Some(&lr), Some(&rr), query_repr, &mut rng)?;
            let (sl, sr) = sims.expect("query-aware selection always scores");
            (Some(sl), Some(sr), branch)
        } else {
            let (branch, _) = select_branch(policy, None, None, None, &mut rng)?;
            (None, None, branch)
        };
        trace.push(SplitRecord {
            level: w,
            parent_start: current.start,
            parent_end: current.end,
            split_at: left.end,
            selected: branch,
            sim_left: sim_l,
            sim_right: sim_r,
        });
        let (selected, sibling) = match branch {
            Branch::Left => (left, right),
            Branch::Right => (right, left),
        };
        preserved.push(sibling);
        current = TreeNode {
            status: NodeStatus::Expanded,
            ..selected
        };
    }

    preserved.sort_by_key(|n| n.start);
    Ok((
        ContextTree {
            chunk_index,
            depth,
            preserved,
            early_stopped,
        },
        trace,
    ))
}

/// See [`build_tree_traced`]; discards the trace.
#[allow(clippy::too_many_arguments)]
pub fn build_tree(
    chunk_index: usize,
    chunk_len: usize,
    depth: usize,
    params: &SplitParams,
    policy: PolicyKind,
    node_repr: Option<&mut ReprFn<'_>>,
    query_repr: Option<&[f64]>,
    deterministic: bool,
) -> Result<ContextTree> {
    build_tree_traced(
        chunk_index,
        chunk_len,
        depth,
        params,
        policy,
        node_repr,
        query_repr,
        deterministic,
    )
    .map(|(tree, _)| tree)
}

/// Uniform downsampling by fractional strided selection: keeps
/// `l′ = max(1, floor(l/α))` indices `floor((j + 0.5)·l/l′)`.
pub fn downsample_indices(l: usize, alpha: f64) -> Vec<usize> {
    assert!(l >= 1 && alpha >= 1.0, "downsample preconditions violated");
    let l_prime = ((l as f64 / alpha).floor() as usize).max(1);
    (0..l_prime)
        .map(|j| ((j as f64 + 0.5) * l as f64 / l_prime as f64).floor() as usize)
        .collect()
}

/// Compressed length of one node under its level's keep ratio.
pub fn node_compressed_len(node_len: usize, alpha: f64) -> usize {
    ((node_len as f64 / alpha).floor() as usize).max(1)
}

/// Total compressed length of a tree under a schedule.
pub fn tree_compressed_length(tree: &ContextTree, schedule: &CompressionSchedule) -> Result<usize> {
    if tree.depth > schedule.depth {
        return Err(Error::config(format!(
            "tree depth {} exceeds schedule depth {}",
            tree.depth, schedule.depth
        )));
    }
    let mut total = 0;
    for node in &tree.preserved {
        let alpha = schedule.alpha_for_level(node.level)?;
        total += node_compressed_len(node.len(), alpha);
    }
    Ok(total)
}

/// JSON-serializable tree dump (the `inspect-tree` output format).
#[derive(Debug, Serialize)]
pub struct TreeDump {
    pub chunk_index: usize,
    pub depth: usize,
    pub preserved: Vec<PreservedDump>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<SplitRecord>,
}

#[derive(Debug, Serialize)]
pub struct PreservedDump {
    pub start: usize,
    pub end: usize,
    pub level: usize,
    pub alpha: f64,
    pub compressed_len: usize,
}

pub fn dump_tree(
    tree: &ContextTree,
    schedule: &CompressionSchedule,
    splits: Vec<SplitRecord>,
) -> Result<TreeDump> {
    let preserved = tree
        .preserved
        .iter()
        .map(|n| {
            let alpha = schedule.alpha_for_level(n.level)?;
            Ok(PreservedDump {
                start: n.start,
                end: n.end,
                level: n.level,
                alpha,
                compressed_len: node_compressed_len(n.len(), alpha),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TreeDump {
        chunk_index: tree.chunk_index,
        depth: tree.depth,
        preserved,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::mock::StepRng;

    fn params(min_len: usize) -> SplitParams {
        SplitParams::new(5.0, min_len, 7).unwrap()
    }

    #[test]
    fn split_point_halves_without_noise() {
        assert_eq!(split_point(1024, 0.0, 16), 512);
    }

    #[test]
    fn split_point_applies_noise() {
        // b = floor(512 − 12.7) = 499
        assert_eq!(split_point(1024, 12.7, 16), 499);
    }

    #[test]
    fn split_point_clamps_to_min_len() {
        // l=10, min_len=4, ε=+8 → floor(5 − 8) = −3 → clamped to 4
        assert_eq!(split_point(10, 8.0, 4), 4);
        assert_eq!(split_point(10, -8.0, 4), 6);
    }

    #[test]
    fn split_node_rejects_short_nodes() {
        let node = TreeNode {
            start: 0,
            end: 10,
            level: 0,
            status: NodeStatus::Expanded,
        };
        let mut rng = StepRng::new(0, 1);
        let err = split_node(&node, &params(8), true, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SplitTooShort { len: 10, .. }));
    }

    #[test]
    fn split_children_partition_parent() {
        let node = TreeNode {
            start: 100,
            end: 612,
            level: 2,
            status: NodeStatus::Expanded,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for det in [true, false] {
            let (l, r) = split_node(&node, &params(16), det, &mut rng).unwrap();
            assert_eq!(l.start, node.start);
            assert_eq!(l.end, r.start);
            assert_eq!(r.end, node.end);
            assert_eq!(l.level, 3);
            assert!(l.len() >= 16 && r.len() >= 16);
        }
    }

    #[test]
    fn select_branch_fixed_policies() {
        let mut rng = StepRng::new(0, 1);
        assert_eq!(
            select_branch(PolicyKind::AlwaysRight, None, None, None, &mut rng)
                .unwrap()
                .0,
            Branch::Right
        );
        assert_eq!(
            select_branch(PolicyKind::AlwaysLeft, None, None, None, &mut rng)
                .unwrap()
                .0,
            Branch::Left
        );
    }

    #[test]
    fn query_aware_picks_higher_cosine() {
        let mut rng = StepRng::new(0, 1);
        let q = [1.0, 0.0];
        let orth = [0.0, 1.0];
        let (b, sims) = select_branch(
            PolicyKind::QueryAware,
            Some(&q),
            Some(&orth),
            Some(&q),
            &mut rng,
        )
        .unwrap();
        assert_eq!(b, Branch::Left);
        let (sl, sr) = sims.unwrap();
        assert!((sl - 1.0).abs() < 1e-12 && sr.abs() < 1e-12);
    }

    #[test]
    fn query_aware_tie_breaks_left_under_scaling() {
        // left = 2·right = 2·query: cosine is scale-invariant, both equal 1.
        let mut rng = StepRng::new(0, 1);
        let q = [0.5, -0.25, 1.0];
        let left: Vec<f64> = q.iter().map(|v| v * 2.0).collect();
        let (b, sims) = select_branch(
            PolicyKind::QueryAware,
            Some(&left),
            Some(&q),
            Some(&q),
            &mut rng,
        )
        .unwrap();
        assert_eq!(b, Branch::Left);
        let (sl, sr) = sims.unwrap();
        assert!((sl - sr).abs() < 1e-12);
    }

    #[test]
    fn query_aware_requires_representations() {
        let mut rng = StepRng::new(0, 1);
        assert!(matches!(
            select_branch(PolicyKind::QueryAware, None, None, None, &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn deterministic_always_right_tree_matches_trace() {
        let tree = build_tree(
            0,
            1024,
            3,
            &params(16),
            PolicyKind::AlwaysRight,
            None,
            None,
            true,
        )
        .unwrap();
        let ranges: Vec<(usize, usize, usize)> = tree
            .preserved
            .iter()
            .map(|n| (n.start, n.end, n.level))
            .collect();
        assert_eq!(
            ranges,
            vec![(0, 512, 1), (512, 768, 2), (768, 896, 3), (896, 1024, 3)]
        );
    }

    #[test]
    fn depth_one_preserves_two_halves() {
        let tree = build_tree(
            0,
            256,
            1,
            &params(16),
            PolicyKind::AlwaysRight,
            None,
            None,
            true,
        )
        .unwrap();
        assert_eq!(tree.preserved.len(), 2);
        assert_eq!(tree.preserved[0].level, 1);
        assert_eq!(tree.preserved[1].level, 1);
        assert_eq!(tree.preserved[0].end, 128);
    }

    #[test]
    fn same_seed_same_tree_with_noise() {
        let p = params(16);
        let build = || {
            build_tree(0, 777, 3, &p, PolicyKind::Random, None, None, false).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a.preserved, b.preserved);
    }

    #[test]
    fn degenerate_chunk_becomes_single_preserved_node() {
        let tree = build_tree(
            2,
            20,
            3,
            &params(16),
            PolicyKind::AlwaysRight,
            None,
            None,
            true,
        )
        .unwrap();
        assert_eq!(tree.depth, 0);
        assert_eq!(tree.preserved.len(), 1);
        let n = tree.preserved[0];
        assert_eq!((n.start, n.end, n.level), (0, 20, 1));
    }

    #[test]
    fn partition_and_count_invariants_over_random_builds() {
        let mut seed = 1u64;
        for chunk_len in [32usize, 65, 128, 500, 1024, 4096] {
            for depth in 1..=4 {
                for policy in [PolicyKind::AlwaysRight, PolicyKind::AlwaysLeft, PolicyKind::Random]
                {
                    seed = seed.wrapping_mul(6364136223846793005).wrapping_add(7);
                    let p = SplitParams::new(5.0, 16, seed).unwrap();
                    let tree =
                        build_tree(0, chunk_len, depth, &p, policy, None, None, false).unwrap();
                    // Partition: sorted nodes tile [0, chunk_len) exactly.
                    let mut cursor = 0;
                    for n in &tree.preserved {
                        assert_eq!(n.start, cursor, "gap or overlap at {cursor}");
                        assert!(n.end > n.start);
                        cursor = n.end;
                    }
                    assert_eq!(cursor, chunk_len);
                    // Count: depth+1 preserved nodes absent early stop.
                    if tree.early_stopped {
                        assert!(tree.preserved.len() <= depth);
                    } else {
                        assert_eq!(tree.preserved.len(), depth + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn schedule_doubles_per_level() {
        let s = schedule_for(3, 4).unwrap();
        assert_eq!(s.alpha_per_level, vec![16.0, 8.0, 4.0]);
        assert!((s.beta - 8.0).abs() < 1e-12);
        let s1 = schedule_for(1, 1).unwrap();
        assert!((s1.beta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_non_power_of_two() {
        assert!(schedule_for(3, 3).is_err());
        assert!(schedule_for(0, 4).is_err());
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(downsample_indices(8, 4.0), vec![2, 6]);
        assert_eq!(downsample_indices(8, 1.0), (0..8).collect::<Vec<_>>());
        assert_eq!(downsample_indices(5, 4.0), vec![2]);
    }

    #[test]
    fn downsample_indices_strictly_increasing_in_range() {
        for l in 1..80 {
            for alpha in [1.0, 1.5, 2.0, 4.0, 7.0, 16.0] {
                let idx = downsample_indices(l, alpha);
                assert_eq!(idx.len(), ((l as f64 / alpha).floor() as usize).max(1));
                for w in idx.windows(2) {
                    assert!(w[0] < w[1]);
                }
                assert!(*idx.last().unwrap() < l);
            }
        }
    }

    #[test]
    fn compressed_length_depth3_canonical() {
        let p = params(16);
        let tree =
            build_tree(0, 1024, 3, &p, PolicyKind::AlwaysRight, None, None, true).unwrap();
        let s = schedule_for(3, 4).unwrap();
        assert_eq!(tree_compressed_length(&tree, &s).unwrap(), 128);
    }

    #[test]
    fn compressed_length_identity_schedule() {
        let p = params(16);
        let tree =
            build_tree(0, 1000, 2, &p, PolicyKind::AlwaysRight, None, None, true).unwrap();
        let s = CompressionSchedule::uniform(2, 1.0).unwrap();
        assert_eq!(tree_compressed_length(&tree, &s).unwrap(), 1000);
    }

    #[test]
    fn compressed_length_depth2() {
        // 512/8 + 256/4 + 256/4 = 192
        let p = params(16);
        let tree =
            build_tree(0, 1024, 2, &p, PolicyKind::AlwaysRight, None, None, true).unwrap();
        let s = schedule_for(2, 4).unwrap();
        assert_eq!(tree_compressed_length(&tree, &s).unwrap(), 192);
    }

    #[test]
    fn query_aware_tree_follows_query() {
        // Node representations: mean token offset scaled; query matches the
        // left end, so the expansion path should hug the left edge and the
        // trace should carry similarity scores.
        let p = params(4);
        let mut repr = |start: usize, end: usize| -> Result<Vec<f64>> {
            let mid = (start + end) as f64 / 2.0;
            Ok(vec![1.0, mid])
        };
        let query = vec![1.0, 0.0];
        let (tree, trace) = build_tree_traced(
            0,
            256,
            3,
            &p,
            PolicyKind::QueryAware,
            Some(&mut repr),
            Some(&query),
            true,
        )
        .unwrap();
        for rec in &trace {
            assert_eq!(rec.selected, Branch::Left);
            assert!(rec.sim_left.unwrap() > rec.sim_right.unwrap());
        }
        // Left-hugging path: finest nodes at the start of the chunk.
        assert_eq!(tree.preserved[0].level, 3);
    }
}

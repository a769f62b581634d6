//! Order-sensitive alignment of an executed call sequence against a gold
//! trajectory.

use serde::Serialize;

use crate::ledger::ToolCall;
use crate::taskgen::CallMatcher;

/// Result of aligning an executed sequence against a gold trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMatch {
    /// |LCS| / max(|gold|, |executed|); 1.0 when both sides are empty.
    pub correctness: f64,
    /// Matched (gold index, executed index) pairs, ascending on both sides.
    pub alignment: Vec<(usize, usize)>,
}

/// Longest common subsequence between the gold matchers and the executed
/// calls, where a pair matches per [`CallMatcher::matches`]. Correctness is
/// the LCS length over the longer of the two sequences, so both omissions
/// and spurious calls cost score.
pub fn match_trajectory(gold: &[CallMatcher], executed: &[ToolCall]) -> TrajectoryMatch {
    let n = gold.len();
    let m = executed.len();
    if n == 0 && m == 0 {
        return TrajectoryMatch { correctness: 1.0, alignment: Vec::new() };
    }
    // dp[i][j] = LCS length of gold[i..] vs executed[j..].
    let mut dp = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            let skip = dp[i + 1][j].max(dp[i][j + 1]);
            let take = if gold[i].matches(&executed[j]) { dp[i + 1][j + 1] + 1 } else { 0 };
            dp[i][j] = skip.max(take);
        }
    }
    let mut alignment = Vec::with_capacity(dp[0][0] as usize);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if gold[i].matches(&executed[j]) && dp[i][j] == dp[i + 1][j + 1] + 1 {
            alignment.push((i, j));
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    TrajectoryMatch {
        correctness: f64::from(dp[0][0]) / n.max(m) as f64,
        alignment,
    }
}

//! Outlier-aware split of a cluster's pixel budget among its classes.
//!
//! Classes whose point count is at most `tau_o * N_avg` are outliers, with
//! `tau_o = (1 - tau_ns) * n / (n - 1)` chosen so non-outlier classes keep at
//! least a `tau_ns` share of the cluster. Outliers always get a pixel (ST1)
//! or are emphasized by a factor `h` up to `h_max`, the largest factor at
//! which the densest outlier still does not out-cover the sparsest
//! non-outlier (ST2). Non-outliers share what is left in proportion to
//! their counts.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::equalize::round_half_up;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "UPPERCASE")]
pub enum EmphasisPattern {
    /// Proportional allocation with a one-pixel floor for outliers.
    #[value(name = "ST1", alias = "st1")]
    St1,
    /// Outliers scaled by `min(h, h_max)`.
    #[value(name = "ST2", alias = "st2")]
    St2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocParams {
    pub pattern: EmphasisPattern,
    pub h: f64,
    pub tau_ns: f64,
}

impl Default for AllocParams {
    fn default() -> Self {
        AllocParams {
            pattern: EmphasisPattern::St2,
            h: 10.0,
            tau_ns: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierFilter {
    pub outliers: Vec<ClassId>,
    pub non_outliers: Vec<ClassId>,
    pub tau_o: f64,
}

/// Splits the present classes (`count >= 1`) into outliers and non-outliers.
///
/// If every class would qualify as an outlier, the largest class (lowest id
/// on ties) is kept as a non-outlier.
pub fn filter_outliers(class_counts: &[(ClassId, u32)], tau_ns: f64) -> OutlierFilter {
    let present: Vec<(ClassId, u32)> = class_counts.iter().copied().filter(|&(_, c)| c > 0).collect();
    let n = present.len();
    if n < 2 {
        return OutlierFilter {
            outliers: Vec::new(),
            non_outliers: present.iter().map(|&(c, _)| c).collect(),
            tau_o: 0.0,
        };
    }
    let total: u64 = present.iter().map(|&(_, c)| c as u64).sum();
    let tau_o = (1.0 - tau_ns) * n as f64 / (n - 1) as f64;
    let n_avg = total as f64 / n as f64;
    let threshold = tau_o * n_avg;

    let mut is_outlier: Vec<bool> = present.iter().map(|&(_, c)| c as f64 <= threshold).collect();
    if is_outlier.iter().all(|&o| o) {
        let largest = present
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.cmp(&b.1 .1).then(b.1 .0.cmp(&a.1 .0)))
            .map(|(i, _)| i)
            .unwrap();
        is_outlier[largest] = false;
    }

    let mut out = OutlierFilter {
        outliers: Vec::new(),
        non_outliers: Vec::new(),
        tau_o,
    };
    for (&(c, _), o) in present.iter().zip(is_outlier) {
        if o {
            out.outliers.push(c);
        } else {
            out.non_outliers.push(c);
        }
    }
    out
}

/// Closed-form density-reversal threshold.
///
/// Solves `max(op) * h = min(np) / sum(np) * (1 - h * sum(op))` for `h`,
/// where `op` and `np` are the outlier and non-outlier shares of the
/// cluster's points. Infinite when there are no outliers.
pub fn compute_h_max(op: &[f64], np: &[f64]) -> f64 {
    if op.is_empty() || np.is_empty() {
        return f64::INFINITY;
    }
    let max_op = op.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_np = np.iter().copied().fold(f64::INFINITY, f64::min);
    let sum_op: f64 = op.iter().sum();
    let sum_np: f64 = np.iter().sum();
    min_np / (max_op * sum_np + min_np * sum_op)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassAllocation {
    pub class: ClassId,
    pub points: u32,
    pub pixels: u32,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    pub cluster: usize,
    /// Sorted by class id; only classes with points in the cluster.
    pub per_class: Vec<ClassAllocation>,
    pub h_used: f64,
    pub h_max: f64,
    /// The budget was smaller than the number of classes present.
    pub infeasible: bool,
}

impl ClassSplit {
    pub fn budget(&self) -> u32 {
        self.per_class.iter().map(|a| a.pixels).sum()
    }

    pub fn pixels_of(&self, class: ClassId) -> u32 {
        self.per_class
            .iter()
            .find(|a| a.class == class)
            .map_or(0, |a| a.pixels)
    }
}

/// Largest-remainder apportionment of `total` by `weights`, then raising any
/// share below `floor` by taking from the largest shares.
///
/// Requires `total >= floor * weights.len()`. Zero total weight splits evenly.
pub(crate) fn apportion(weights: &[u64], total: u64, floor: u64) -> Vec<u64> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(total >= floor * n as u64);
    let uniform;
    let weights = if weights.iter().all(|&w| w == 0) {
        uniform = vec![1u64; n];
        &uniform[..]
    } else {
        weights
    };
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    let mut alloc = Vec::with_capacity(n);
    let mut rems = Vec::with_capacity(n);
    for &w in weights {
        let q = w as u128 * total as u128;
        alloc.push((q / sum) as u64);
        rems.push(q % sum);
    }
    let leftover = total - alloc.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in order.iter().take(leftover as usize) {
        alloc[i] += 1;
    }

    for i in 0..n {
        while alloc[i] < floor {
            let donor = (0..n)
                .filter(|&j| alloc[j] > floor)
                .max_by(|&a, &b| alloc[a].cmp(&alloc[b]).then(a.cmp(&b)))
                .expect("total covers the floor");
            alloc[donor] -= 1;
            alloc[i] += 1;
        }
    }
    alloc
}

/// Divides a cluster's budget `m` among its classes.
///
/// `class_counts` lists per-class point counts; zero counts are ignored.
/// The result always sums to `m`.
pub fn split_budget(
    cluster: usize,
    class_counts: &[(ClassId, u32)],
    m: u32,
    params: &AllocParams,
) -> ClassSplit {
    let mut present: Vec<(ClassId, u32)> = class_counts.iter().copied().filter(|&(_, c)| c > 0).collect();
    present.sort_by_key(|&(c, _)| c);
    let filter = filter_outliers(&present, params.tau_ns);
    let is_outlier = |c: ClassId| filter.outliers.contains(&c);

    let total: f64 = present.iter().map(|&(_, c)| c as f64).sum();
    let share = |c: u32| c as f64 / total;
    let op: Vec<f64> = present.iter().filter(|p| is_outlier(p.0)).map(|p| share(p.1)).collect();
    let np: Vec<f64> = present.iter().filter(|p| !is_outlier(p.0)).map(|p| share(p.1)).collect();
    let h_max = compute_h_max(&op, &np);
    let h_used = match params.pattern {
        EmphasisPattern::St1 => 1.0,
        EmphasisPattern::St2 => params.h.min(h_max).max(1.0),
    };

    let mut per_class: Vec<ClassAllocation> = present
        .iter()
        .map(|&(class, points)| ClassAllocation {
            class,
            points,
            pixels: 0,
            outlier: is_outlier(class),
        })
        .collect();

    let n = per_class.len() as u32;
    if (m as u64) < n as u64 {
        let mut rank: Vec<usize> = (0..per_class.len()).collect();
        rank.sort_by(|&a, &b| per_class[b].points.cmp(&per_class[a].points).then(a.cmp(&b)));
        for &i in rank.iter().take(m as usize) {
            per_class[i].pixels = 1;
        }
        return ClassSplit {
            cluster,
            per_class,
            h_used,
            h_max,
            infeasible: true,
        };
    }

    let out_idx: Vec<usize> = (0..per_class.len()).filter(|&i| per_class[i].outlier).collect();
    let non_idx: Vec<usize> = (0..per_class.len()).filter(|&i| !per_class[i].outlier).collect();

    let mut out_px: Vec<u64> = out_idx
        .iter()
        .map(|&i| {
            let ideal = h_used * share(per_class[i].points) * m as f64;
            round_half_up(ideal).max(1.0) as u64
        })
        .collect();
    // every non-outlier keeps at least one pixel
    let outlier_room = m as u64 - non_idx.len() as u64;
    if out_px.iter().sum::<u64>() > outlier_room {
        out_px = apportion(&out_px, outlier_room, 1);
    }

    let non_weights: Vec<u64> = non_idx.iter().map(|&i| per_class[i].points as u64).collect();
    let rest = m as u64 - out_px.iter().sum::<u64>();
    let mut non_px = apportion(&non_weights, rest, 1);

    // rounding may still let an outlier overtake the sparsest non-outlier
    if let Some(&floor) = non_px.iter().min() {
        let mut freed = 0;
        for px in &mut out_px {
            if *px > floor {
                freed += *px - floor;
                *px = floor;
            }
        }
        if freed > 0 {
            for (px, extra) in non_px.iter_mut().zip(apportion(&non_weights, freed, 0)) {
                *px += extra;
            }
        }
    }

    for (&i, &px) in out_idx.iter().zip(&out_px) {
        per_class[i].pixels = px as u32;
    }
    for (&i, &px) in non_idx.iter().zip(&non_px) {
        per_class[i].pixels = px as u32;
    }
    ClassSplit {
        cluster,
        per_class,
        h_used,
        h_max,
        infeasible: false,
    }
}

/// Writes `cluster_id,class_id,points,pixels,is_outlier,h_max` rows.
pub fn write_allocation_dump(splits: &[ClassSplit], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "cluster_id,class_id,points,pixels,is_outlier,h_max").map_err(io)?;
    for s in splits {
        for a in &s.per_class {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.cluster, a.class, a.points, a.pixels, a.outlier, s.h_max
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(v: &[u32]) -> Vec<(ClassId, u32)> {
        v.iter().enumerate().map(|(i, &c)| (ClassId(i as u16), c)).collect()
    }

    fn pixels(s: &ClassSplit) -> Vec<u32> {
        s.per_class.iter().map(|a| a.pixels).collect()
    }

    fn params(pattern: EmphasisPattern, h: f64) -> AllocParams {
        AllocParams {
            pattern,
            h,
            tau_ns: 0.5,
        }
    }

    /// Residual of the reversal-threshold equation at `h`.
    fn residual(op: &[f64], np: &[f64], h: f64) -> f64 {
        let max_op = op.iter().copied().fold(0.0, f64::max);
        let min_np = np.iter().copied().fold(f64::INFINITY, f64::min);
        let lhs = max_op * h;
        let rhs = min_np / np.iter().sum::<f64>() * (1.0 - h * op.iter().sum::<f64>());
        (lhs - rhs).abs()
    }

    #[test]
    fn two_class_outlier() {
        let f = filter_outliers(&counts(&[90, 10]), 0.5);
        assert_eq!(f.tau_o, 1.0);
        assert_eq!(f.outliers, vec![ClassId(1)]);
        assert_eq!(f.non_outliers, vec![ClassId(0)]);
    }

    #[test]
    fn single_class_has_no_outliers() {
        let f = filter_outliers(&counts(&[42]), 0.5);
        assert!(f.outliers.is_empty());
        assert_eq!(f.non_outliers, vec![ClassId(0)]);
    }

    #[test]
    fn tau_ns_one_disables_outliers() {
        let f = filter_outliers(&counts(&[1000, 1, 3]), 1.0);
        assert_eq!(f.tau_o, 0.0);
        assert!(f.outliers.is_empty());
    }

    #[test]
    fn all_outliers_forces_largest() {
        let f = filter_outliers(&counts(&[50, 50]), 0.5);
        assert_eq!(f.non_outliers, vec![ClassId(0)]);
        assert_eq!(f.outliers, vec![ClassId(1)]);
    }

    #[test]
    fn h_max_examples() {
        assert!((compute_h_max(&[0.1], &[0.9]) - 5.0).abs() < 1e-12);
        assert!((compute_h_max(&[0.05, 0.05], &[0.45, 0.45]) - 5.0).abs() < 1e-12);
        assert!(residual(&[0.1], &[0.9], compute_h_max(&[0.1], &[0.9])) < 1e-12);
        assert_eq!(compute_h_max(&[], &[1.0]), f64::INFINITY);
        for eps in [1e-2, 1e-4, 1e-6] {
            let h = compute_h_max(&[eps], &[1.0 - eps]);
            assert!((h * 2.0 * eps - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn proportional_without_outliers() {
        let s = split_budget(0, &counts(&[30, 10]), 4, &AllocParams { tau_ns: 1.0, ..params(EmphasisPattern::St2, 10.0) });
        assert_eq!(pixels(&s), vec![3, 1]);
    }

    #[test]
    fn st1_keeps_proportion() {
        let s = split_budget(0, &counts(&[98, 2]), 100, &params(EmphasisPattern::St1, 10.0));
        assert_eq!(pixels(&s), vec![98, 2]);
        assert!(s.per_class[1].outlier);
    }

    #[test]
    fn st2_emphasizes_within_h_max() {
        // op = 0.02, np = 0.98: h_max = 0.98 / (0.02 * 0.98 + 0.98 * 0.02) = 25
        let s = split_budget(0, &counts(&[98, 2]), 100, &params(EmphasisPattern::St2, 10.0));
        assert!((s.h_max - 25.0).abs() < 1e-9);
        assert_eq!(s.h_used, 10.0);
        assert_eq!(pixels(&s), vec![80, 20]);

        let s = split_budget(0, &counts(&[98, 2]), 100, &params(EmphasisPattern::St2, 40.0));
        assert_eq!(s.h_used, s.h_max);
        assert_eq!(pixels(&s), vec![50, 50]);
    }

    #[test]
    fn tiny_outliers_get_one_pixel() {
        let s = split_budget(0, &counts(&[996, 2, 2]), 10, &params(EmphasisPattern::St1, 1.0));
        assert_eq!(pixels(&s), vec![8, 1, 1]);
    }

    #[test]
    fn outliers_scale_down_when_over_budget() {
        let s = split_budget(0, &counts(&[60, 20, 20]), 3, &params(EmphasisPattern::St2, 10.0));
        assert_eq!(s.budget(), 3);
        assert!(s.per_class.iter().all(|a| a.pixels == 1));
    }

    #[test]
    fn infeasible_budget_ranks_by_count() {
        let s = split_budget(0, &counts(&[5, 50, 20]), 2, &params(EmphasisPattern::St2, 10.0));
        assert!(s.infeasible);
        assert_eq!(pixels(&s), vec![0, 1, 1]);
    }

    #[test]
    fn apportion_basics() {
        assert_eq!(apportion(&[30, 10], 4, 0), vec![3, 1]);
        assert_eq!(apportion(&[1, 1, 1], 10, 0), vec![4, 3, 3]);
        assert_eq!(apportion(&[1000, 1, 1], 5, 1), vec![3, 1, 1]);
        assert_eq!(apportion(&[0, 0], 3, 1), vec![2, 1]);
    }

    fn arb_counts() -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(prop_oneof![1u32..5, 1u32..200, 1u32..20_000], 1..12)
    }

    proptest! {
        #[test]
        fn budget_is_conserved(c in arb_counts(), m in 0u32..3000, h in 1.0f64..40.0, st2 in any::<bool>(), tau in 0.5f64..=1.0) {
            let pattern = if st2 { EmphasisPattern::St2 } else { EmphasisPattern::St1 };
            let s = split_budget(0, &counts(&c), m, &AllocParams { pattern, h, tau_ns: tau });
            prop_assert_eq!(s.budget(), m);
            if !s.infeasible {
                prop_assert!(s.per_class.iter().all(|a| a.pixels >= 1));
            }
        }

        #[test]
        fn no_density_reversal(c in arb_counts(), m in 1u32..3000, h in 1.0f64..40.0, st2 in any::<bool>()) {
            let pattern = if st2 { EmphasisPattern::St2 } else { EmphasisPattern::St1 };
            let s = split_budget(0, &counts(&c), m, &params(pattern, h));
            prop_assert!(s.h_used <= s.h_max);
            if !s.infeasible {
                let max_out = s.per_class.iter().filter(|a| a.outlier).map(|a| a.pixels).max();
                let min_non = s.per_class.iter().filter(|a| !a.outlier).map(|a| a.pixels).min().unwrap();
                if let Some(max_out) = max_out {
                    prop_assert!(max_out <= min_non, "{:?}", s);
                }
            }
        }

        #[test]
        fn st1_matches_st2_at_h_one(c in arb_counts(), m in 0u32..3000) {
            let a = split_budget(0, &counts(&c), m, &params(EmphasisPattern::St1, 7.0));
            let b = split_budget(0, &counts(&c), m, &params(EmphasisPattern::St2, 1.0));
            prop_assert_eq!(pixels(&a), pixels(&b));
        }

        #[test]
        fn single_outlier_monotone_in_h(
            big in prop::collection::vec(200u32..5000, 1..5),
            small in 1u32..60,
            m in 1u32..2000,
            hs in prop::collection::vec(1.0f64..60.0, 2..12),
        ) {
            let mut c = big.clone();
            c.push(small);
            let cc = counts(&c);
            let f = filter_outliers(&cc, 0.5);
            prop_assume!(f.outliers == vec![ClassId(big.len() as u16)]);
            prop_assume!(m as usize >= c.len());
            let mut hs = hs;
            hs.sort_by(f64::total_cmp);
            let mut prev = 0;
            for h in hs {
                let s = split_budget(0, &cc, m, &params(EmphasisPattern::St2, h));
                let px = s.pixels_of(ClassId(big.len() as u16));
                prop_assert!(px >= prev, "h={} px={} prev={}", h, px, prev);
                prev = px;
            }
        }

        #[test]
        fn h_max_residual(raw in prop::collection::vec(1u32..10_000, 2..20), split in 1usize..19) {
            let split = split.min(raw.len() - 1);
            let total: f64 = raw.iter().map(|&v| v as f64).sum();
            let shares: Vec<f64> = raw.iter().map(|&v| v as f64 / total).collect();
            let (op, np) = shares.split_at(split);
            let h = compute_h_max(op, np);
            prop_assert!(residual(op, np, h) < 1e-9);
        }
    }
}

//! Independent reference computations used to check the engine.
//!
//! Everything here is deliberately written without touching the code paths
//! it verifies: gradients come from central finite differences, assignments
//! from exhaustive permutation enumeration, overlaps from scalar interval
//! arithmetic, and average precision from a naive quadratic matcher.

/// Relative error with a unit floor, so tiny gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Central finite differences of a scalar function of flat parameter blocks.
///
/// `f` must rebuild its computation from scratch on every call; `h` is the
/// half step (the probe evaluates at `x + h` and `x - h`).
pub fn finite_difference_grads(
    f: &dyn Fn(&[Vec<f64>]) -> f64,
    params: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for (i, slot) in g.iter_mut().enumerate() {
            let mut plus = params.to_vec();
            plus[p][i] += h;
            let mut minus = params.to_vec();
            minus[p][i] -= h;
            *slot = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between analytic and finite-difference gradients.
pub fn max_grad_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (&av, &nv) in a.iter().zip(n.iter()) {
            worst = worst.max(rel_err(av, nv));
        }
    }
    worst
}

/// Minimum-cost injective assignment of every column (ground truth) to a row
/// (prediction) by exhaustive enumeration. Lexicographically smallest pair
/// list among the minimal ones, pairs sorted by row index.
pub fn brute_force_assignment(costs: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
    let rows = costs.len();
    let cols = if rows == 0 { 0 } else { costs[0].len() };
    assert!(cols <= rows, "needs at least as many rows as columns");
    if cols == 0 {
        return (Vec::new(), 0.0);
    }
    let mut best: Option<(Vec<(usize, usize)>, f64)> = None;
    let mut chosen = vec![usize::MAX; cols];
    let mut used = vec![false; rows];
    fn recurse(
        costs: &[Vec<f64>],
        col: usize,
        chosen: &mut [usize],
        used: &mut [bool],
        best: &mut Option<(Vec<(usize, usize)>, f64)>,
    ) {
        let cols = chosen.len();
        if col == cols {
            let mut pairs: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(c, &r)| (r, c)).collect();
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(r, c)| costs[r][c]).sum();
            let better = match best {
                None => true,
                Some((bp, bt)) => total < *bt || (total == *bt && pairs < *bp),
            };
            if better {
                *best = Some((pairs, total));
            }
            return;
        }
        for r in 0..costs.len() {
            if !used[r] {
                used[r] = true;
                chosen[col] = r;
                recurse(costs, col + 1, chosen, used, best);
                used[r] = false;
            }
        }
    }
    recurse(costs, 0, &mut chosen, &mut used, &mut best);
    best.unwrap()
}

/// Scalar interval-arithmetic overlap of two corner-form boxes.
/// Returns (intersection, union, hull) volumes.
pub fn interval_overlap(amin: [f64; 3], amax: [f64; 3], bmin: [f64; 3], bmax: [f64; 3]) -> (f64, f64, f64) {
    let mut inter = 1.0;
    let mut hull = 1.0;
    for a in 0..3 {
        inter *= f64::max(0.0, f64::min(amax[a], bmax[a]) - f64::max(amin[a], bmin[a]));
        hull *= f64::max(amax[a], bmax[a]) - f64::min(amin[a], bmin[a]);
    }
    let va: f64 = (0..3).map(|a| amax[a] - amin[a]).product();
    let vb: f64 = (0..3).map(|a| bmax[a] - bmin[a]).product();
    (inter, va + vb - inter, hull)
}

/// One record for the naive average-precision reference.
#[derive(Clone, Debug)]
pub struct NaiveBox {
    pub volume: String,
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: usize,
    pub score: f64,
}

/// Brute-force average precision: quadratic greedy matcher plus a
/// precision-envelope integral, written independently of the evaluation
/// module.
pub fn naive_ap(preds: &[NaiveBox], gts: &[NaiveBox], class: usize, iou_thresh: f64) -> Option<f64> {
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class == class).collect();
    if gt_idx.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == class).collect();
    order.sort_by(|&a, &b| {
        preds[b].score.partial_cmp(&preds[a].score).unwrap().then_with(|| preds[a].volume.cmp(&preds[b].volume)).then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut tps = Vec::new();
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(f64, usize)> = None;
        for &gi in &gt_idx {
            if taken[gi] || gts[gi].volume != p.volume {
                continue;
            }
            let (inter, union, _) = interval_overlap(p.min, p.max, gts[gi].min, gts[gi].max);
            let iou = if union > 0.0 { inter / union } else { 0.0 };
            if iou >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((bi, bg)) => iou > bi || (iou == bi && gi < bg),
                };
                if better {
                    best = Some((iou, gi));
                }
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
            tps.push(true);
        } else {
            tps.push(false);
        }
    }
    let total_gt = gt_idx.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut points = Vec::new(); // (recall, precision)
    for &is_tp in &tps {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        points.push((tp / total_gt, tp / (tp + fp)));
    }
    // Integrate the running precision envelope over recall.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let env = points[i..].iter().map(|&(_, p)| p).fold(0.0f64, f64::max);
            ap += (r - prev_recall) * env;
            prev_recall = r;
        }
    }
    Some(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_identity_matrix() {
        let c = vec![vec![0.0, 9.0], vec![9.0, 0.0]];
        let (pairs, total) = brute_force_assignment(&c);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn naive_ap_hand_case() {
        // 1 gt; TP at 0.9 then FP at 0.8 -> AP 1.0; swapped -> 0.5.
        let gt = vec![NaiveBox { volume: "v".into(), min: [0.0; 3], max: [1.0; 3], class: 0, score: 1.0 }];
        let tp = NaiveBox { volume: "v".into(), min: [0.0; 3], max: [1.0; 3], class: 0, score: 0.9 };
        let fp = NaiveBox { volume: "v".into(), min: [5.0; 3], max: [6.0; 3], class: 0, score: 0.8 };
        assert_eq!(naive_ap(&[tp.clone(), fp.clone()], &gt, 0, 0.1), Some(1.0));
        let mut tp2 = tp;
        let mut fp2 = fp;
        tp2.score = 0.8;
        fp2.score = 0.9;
        assert_eq!(naive_ap(&[tp2, fp2], &gt, 0, 0.1), Some(0.5));
    }
}

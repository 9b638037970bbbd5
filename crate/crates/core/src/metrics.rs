//! Detection metrics: one-to-one instance matching at an IoU threshold and
//! the F1 scores built on it.
//!
//! Matching uses strict IoU > tau. For tau >= 0.5 at most one ground-truth
//! instance can exceed the threshold with any given prediction (their
//! overlaps would otherwise sum past the prediction's area), so greedy
//! matching by descending IoU is already optimal; an augmenting-path matcher
//! backs this as a cross-check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::labelmap::LabelMap;

/// The five evaluation thresholds; their mean F1 is the summary score.
pub const F1_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tau: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// (pred label, gt label, IoU) per matched pair.
    pub matches: Vec<(u32, u32, f64)>,
}

/// Pairwise IoUs between pred and gt instances, sparse over intersecting
/// pairs only, plus the instance counts.
fn candidate_ious(pred: &LabelMap, gt: &LabelMap) -> (Vec<(u32, u32, f64)>, usize, usize) {
    let mut pred_area: HashMap<u32, usize> = HashMap::new();
    let mut gt_area: HashMap<u32, usize> = HashMap::new();
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p > 0 {
            *pred_area.entry(p).or_insert(0) += 1;
        }
        if g > 0 {
            *gt_area.entry(g).or_insert(0) += 1;
        }
        if p > 0 && g > 0 {
            *inter.entry((p, g)).or_insert(0) += 1;
        }
    }
    let mut ious: Vec<(u32, u32, f64)> = inter
        .into_iter()
        .map(|((p, g), i)| {
            let u = pred_area[&p] + gt_area[&g] - i;
            (p, g, i as f64 / u as f64)
        })
        .collect();
    // descending IoU, ties broken by label for a deterministic greedy order
    ious.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    (ious, pred_area.len(), gt_area.len())
}

fn check_dims(pred: &LabelMap, gt: &LabelMap, tau: f64) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch {
            op: "match_instances",
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![gt.height(), gt.width()],
        });
    }
    if !(0.5..1.0).contains(&tau) {
        return Err(Error::invalid("match_instances", format!("tau {tau} outside [0.5, 1)")));
    }
    Ok(())
}

/// Greedy one-to-one matching by descending IoU over pairs with IoU > tau.
pub fn match_instances(pred: &LabelMap, gt: &LabelMap, tau: f64) -> Result<MatchResult> {
    check_dims(pred, gt, tau)?;
    let (ious, n_pred, n_gt) = candidate_ious(pred, gt);
    let mut used_p: HashMap<u32, ()> = HashMap::new();
    let mut used_g: HashMap<u32, ()> = HashMap::new();
    let mut matches = Vec::new();
    for &(p, g, iou) in &ious {
        if iou > tau && !used_p.contains_key(&p) && !used_g.contains_key(&g) {
            used_p.insert(p, ());
            used_g.insert(g, ());
            matches.push((p, g, iou));
        }
    }
    let tp = matches.len();
    debug_assert_eq!(tp, assignment_match_count(pred, gt, tau)?, "greedy fell short of optimal");
    Ok(MatchResult {
        tau,
        true_positives: tp,
        false_positives: n_pred - tp,
        false_negatives: n_gt - tp,
        matches,
    })
}

/// Maximum-cardinality matching over the same candidate pairs, by augmenting
/// paths. Independent of the greedy path; used to cross-check it.
pub fn assignment_match_count(pred: &LabelMap, gt: &LabelMap, tau: f64) -> Result<usize> {
    check_dims(pred, gt, tau)?;
    let (ious, _, _) = candidate_ious(pred, gt);
    let mut pred_ids: Vec<u32> = ious.iter().filter(|t| t.2 > tau).map(|t| t.0).collect();
    let mut gt_ids: Vec<u32> = ious.iter().filter(|t| t.2 > tau).map(|t| t.1).collect();
    pred_ids.sort_unstable();
    pred_ids.dedup();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    let gt_index: HashMap<u32, usize> = gt_ids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); pred_ids.len()];
    for &(p, g, iou) in &ious {
        if iou > tau {
            let pi = pred_ids.binary_search(&p).unwrap();
            adj[pi].push(gt_index[&g]);
        }
    }

    fn augment(p: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &g in &adj[p] {
            if !seen[g] {
                seen[g] = true;
                if owner[g].is_none() || augment(owner[g].unwrap(), adj, seen, owner) {
                    owner[g] = Some(p);
                    return true;
                }
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; gt_ids.len()];
    let mut count = 0;
    for p in 0..adj.len() {
        let mut seen = vec![false; gt_ids.len()];
        if augment(p, &adj, &mut seen, &mut owner) {
            count += 1;
        }
    }
    Ok(count)
}

fn f1_from_counts(tp: usize, fp: usize, fneg: usize) -> f64 {
    if tp + fp + fneg == 0 {
        // no instances anywhere: nothing was missed or invented
        return 1.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64)
}

pub fn f1_at(pred: &LabelMap, gt: &LabelMap, tau: f64) -> Result<f64> {
    let m = match_instances(pred, gt, tau)?;
    Ok(f1_from_counts(m.true_positives, m.false_positives, m.false_negatives))
}

/// Mean F1 over the five thresholds 0.5 .. 0.9.
pub fn f1_mu(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let mut sum = 0.0;
    for &tau in &F1_THRESHOLDS {
        sum += f1_at(pred, gt, tau)?;
    }
    Ok(sum / F1_THRESHOLDS.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub f1_05: f64,
    pub f1_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPool {
    pub tau: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledScores {
    pub f1_05: f64,
    pub f1_mu: f64,
    pub per_tau: Vec<TauPool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub per_image: Vec<ImageScores>,
    pub pooled: PooledScores,
}

/// Per-image scores plus a micro-average: TP/FP/FN pooled over all images at
/// each threshold, then the F1 formula applied once.
pub fn evaluate_dataset(preds: &[LabelMap], gts: &[LabelMap]) -> Result<DatasetReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate_dataset",
            format!("{} predictions vs {} ground truths", preds.len(), gts.len()),
        ));
    }
    type TauCounts = Vec<(usize, usize, usize)>;
    let per: Vec<(ImageScores, TauCounts)> = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| -> Result<_> {
            let mut counts = Vec::with_capacity(F1_THRESHOLDS.len());
            let mut sum = 0.0;
            for &tau in &F1_THRESHOLDS {
                let m = match_instances(p, g, tau)?;
                sum += f1_from_counts(m.true_positives, m.false_positives, m.false_negatives);
                counts.push((m.true_positives, m.false_positives, m.false_negatives));
            }
            let f1_05 = f1_from_counts(counts[0].0, counts[0].1, counts[0].2);
            Ok((ImageScores { f1_05, f1_mu: sum / F1_THRESHOLDS.len() as f64 }, counts))
        })
        .collect::<Result<_>>()?;

    let mut per_tau = Vec::with_capacity(F1_THRESHOLDS.len());
    for (ti, &tau) in F1_THRESHOLDS.iter().enumerate() {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for (_, counts) in &per {
            tp += counts[ti].0;
            fp += counts[ti].1;
            fneg += counts[ti].2;
        }
        per_tau.push(TauPool {
            tau,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fneg,
            f1: f1_from_counts(tp, fp, fneg),
        });
    }
    let pooled = PooledScores {
        f1_05: per_tau[0].f1,
        f1_mu: per_tau.iter().map(|t| t.f1).sum::<f64>() / per_tau.len() as f64,
        per_tau,
    };
    Ok(DatasetReport { per_image: per.into_iter().map(|(s, _)| s).collect(), pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_sample, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// pred = gt shifted, thinned, with extra blobs and permuted labels.
    fn perturbed_pair(seed: u64) -> (LabelMap, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SynthConfig {
            size: 64,
            count_min: 3,
            count_max: 9,
            seed: rng.gen(),
            ..Default::default()
        };
        let (_, gt) = gen_sample(&cfg, 0).unwrap();
        let (h, w) = (gt.height(), gt.width());
        let (dy, dx) = (rng.gen_range(-4i64..=4), rng.gen_range(-4i64..=4));
        let mut pred = LabelMap::new(h, w);
        let drop_p: Vec<bool> = (0..=gt.instance_ids().len()).map(|_| rng.gen_bool(0.2)).collect();
        for y in 0..h {
            for x in 0..w {
                let l = gt.get(y, x);
                if l == 0 || drop_p[l as usize] {
                    continue;
                }
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    pred.set(ny as usize, nx as usize, l);
                }
            }
        }
        if rng.gen_bool(0.5) {
            // spurious blob on background
            let by = rng.gen_range(0..h.saturating_sub(4));
            let bx = rng.gen_range(0..w.saturating_sub(4));
            let l = 1000;
            for y in by..by + 3 {
                for x in bx..bx + 3 {
                    if pred.get(y, x) == 0 {
                        pred.set(y, x, l);
                    }
                }
            }
        }
        (pred.relabel_sequential(), gt)
    }

    #[test]
    fn perfect_prediction_counts_and_score() {
        let cfg = SynthConfig { size: 64, count_min: 4, count_max: 8, ..Default::default() };
        let (_, gt) = gen_sample(&cfg, 0).unwrap();
        let k = gt.instance_ids().len();
        let m = match_instances(&gt, &gt, 0.5).unwrap();
        assert_eq!(m.true_positives, k);
        assert_eq!(m.false_positives, 0);
        assert_eq!(m.false_negatives, 0);
        assert!(m.matches.iter().all(|&(_, _, iou)| iou == 1.0));
        assert_eq!(f1_at(&gt, &gt, 0.9).unwrap(), 1.0);
        assert_eq!(f1_mu(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn empty_prediction_is_all_false_negatives() {
        let cfg = SynthConfig { size: 64, count_min: 4, count_max: 8, ..Default::default() };
        let (_, gt) = gen_sample(&cfg, 1).unwrap();
        let k = gt.instance_ids().len();
        let empty = LabelMap::new(64, 64);
        let m = match_instances(&empty, &gt, 0.5).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (0, 0, k));
        assert_eq!(f1_at(&empty, &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn both_empty_scores_one() {
        let empty = LabelMap::new(16, 16);
        assert_eq!(f1_at(&empty, &empty, 0.5).unwrap(), 1.0);
        assert_eq!(f1_mu(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn borderline_iou_pair_is_excluded_at_half() {
        // 1x29 strips overlapping by 18 px: IoU = 18/40 = 0.45
        let mut gt = LabelMap::new(8, 64);
        let mut pred = LabelMap::new(8, 64);
        for x in 0..29 {
            gt.set(0, x, 1);
            pred.set(0, x + 11, 1);
        }
        // two exact pairs elsewhere
        for (row, l) in [(3usize, 2u32), (5, 3)] {
            for x in 0..10 {
                gt.set(row, x, l);
                pred.set(row, x, l + 5);
            }
        }
        let m = match_instances(&pred.relabel_sequential(), &gt, 0.5).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (2, 1, 1));
    }

    #[test]
    fn f1_arithmetic_eight_of_ten() {
        // 10 GT singletons; pred hits 8 exactly and invents 2 elsewhere
        let mut gt = LabelMap::new(16, 16);
        let mut pred = LabelMap::new(16, 16);
        for i in 0..10 {
            gt.set(i, 0, i as u32 + 1);
        }
        for i in 0..8 {
            pred.set(i, 0, i as u32 + 1);
        }
        pred.set(0, 8, 11);
        pred.set(4, 8, 12);
        let m = match_instances(&pred.relabel_sequential(), &gt, 0.5).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (8, 2, 2));
        assert!((f1_at(&pred, &gt, 0.5).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn controlled_iou_makes_mean_score_one_fifth() {
        // single pair at IoU 22/40 = 0.55: counted at tau 0.5 only
        let mut gt = LabelMap::new(4, 64);
        let mut pred = LabelMap::new(4, 64);
        for x in 0..31 {
            gt.set(0, x, 1);
            pred.set(0, x + 9, 1);
        }
        assert_eq!(F1_THRESHOLDS.len(), 5);
        assert!((f1_mu(&pred, &gt).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn score_never_increases_with_threshold() {
        for seed in 0..20 {
            let (pred, gt) = perturbed_pair(seed);
            let mut prev = f64::INFINITY;
            for &tau in &F1_THRESHOLDS {
                let f = f1_at(&pred, &gt, tau).unwrap();
                assert!(f <= prev + 1e-12, "seed {seed}: f1 rose from {prev} to {f} at {tau}");
                prev = f;
            }
        }
    }

    #[test]
    fn matching_ignores_label_permutation() {
        let (pred, gt) = perturbed_pair(40);
        let max = *pred.data().iter().max().unwrap();
        let permuted_data: Vec<u32> =
            pred.data().iter().map(|&l| if l == 0 { 0 } else { max + 1 - l }).collect();
        let permuted = LabelMap::from_raw(pred.height(), pred.width(), permuted_data).unwrap();
        for &tau in &F1_THRESHOLDS {
            let a = match_instances(&pred, &gt, tau).unwrap();
            let b = match_instances(&permuted, &gt, tau).unwrap();
            assert_eq!(a.true_positives, b.true_positives);
            assert_eq!(a.false_positives, b.false_positives);
            assert_eq!(a.false_negatives, b.false_negatives);
            assert_eq!(f1_at(&pred, &gt, tau).unwrap(), f1_at(&permuted, &gt, tau).unwrap());
        }
    }

    #[test]
    fn greedy_agrees_with_assignment_matching() {
        for seed in 0..50 {
            let (pred, gt) = perturbed_pair(seed);
            for &tau in &F1_THRESHOLDS {
                let greedy = match_instances(&pred, &gt, tau).unwrap().true_positives;
                let optimal = assignment_match_count(&pred, &gt, tau).unwrap();
                assert_eq!(greedy, optimal, "seed {seed} tau {tau}");
            }
        }
    }

    #[test]
    fn dimension_and_threshold_preconditions() {
        let a = LabelMap::new(8, 8);
        let b = LabelMap::new(8, 9);
        assert!(match_instances(&a, &b, 0.5).is_err());
        assert!(match_instances(&a, &a, 0.4).is_err());
        assert!(match_instances(&a, &a, 1.0).is_err());
    }

    #[test]
    fn dataset_report_pools_counts() {
        let (p1, g1) = perturbed_pair(7);
        let (p2, g2) = perturbed_pair(8);

        // single pair: pooled equals per-image
        let solo = evaluate_dataset(std::slice::from_ref(&p1), std::slice::from_ref(&g1)).unwrap();
        assert_eq!(solo.per_image.len(), 1);
        assert!((solo.pooled.f1_05 - solo.per_image[0].f1_05).abs() < 1e-12);
        assert!((solo.pooled.f1_mu - solo.per_image[0].f1_mu).abs() < 1e-12);

        // identical pairs: pooling leaves the score unchanged
        let twice = evaluate_dataset(&[p1.clone(), p1.clone()], &[g1.clone(), g1.clone()]).unwrap();
        assert!((twice.pooled.f1_05 - solo.pooled.f1_05).abs() < 1e-12);

        // mixed: pooled counts equal hand-summed per-image counts
        let mixed = evaluate_dataset(&[p1.clone(), p2.clone()], &[g1.clone(), g2.clone()]).unwrap();
        for (ti, &tau) in F1_THRESHOLDS.iter().enumerate() {
            let ma = match_instances(&p1, &g1, tau).unwrap();
            let mb = match_instances(&p2, &g2, tau).unwrap();
            let pool = &mixed.pooled.per_tau[ti];
            assert_eq!(pool.true_positives, ma.true_positives + mb.true_positives);
            assert_eq!(pool.false_positives, ma.false_positives + mb.false_positives);
            assert_eq!(pool.false_negatives, ma.false_negatives + mb.false_negatives);
        }
        assert!(evaluate_dataset(&[p1], &[]).is_err());
    }
}

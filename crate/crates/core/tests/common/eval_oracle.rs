//! Straight-line mask AP evaluator used as a second implementation.
//!
//! Everything is recomputed from pixels for every threshold and area range;
//! interpolated precision at recall `r` is the maximum precision over all
//! operating points with recall >= r.

#![allow(dead_code)]

use shipseg_core::Mask;

pub struct OracleImage {
    pub gts: Vec<Mask>,
    pub dts: Vec<(Mask, f64)>,
}

fn area(m: &Mask) -> usize {
    let mut a = 0;
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) {
                a += 1;
            }
        }
    }
    a
}

fn iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height {
        for x in 0..a.width {
            let (p, q) = (a.get(y, x), b.get(y, x));
            if p && q {
                inter += 1;
            }
            if p || q {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP at one threshold over one half-open area range; `None` without gt.
pub fn oracle_ap(images: &[OracleImage], t: f64, lo: f64, hi: f64) -> Option<f64> {
    let in_range = |a: usize| (a as f64) >= lo && (a as f64) < hi;
    // (score, is_tp) of every counted detection, in image order then score
    let mut counted: Vec<(f64, bool)> = Vec::new();
    let mut positives = 0usize;
    for img in images {
        let ignored: Vec<bool> = img.gts.iter().map(|g| !in_range(area(g))).collect();
        positives += ignored.iter().filter(|&&i| !i).count();
        let mut order: Vec<usize> = (0..img.dts.len()).collect();
        // insertion sort: stable, descending score
        for i in 1..order.len() {
            let mut j = i;
            while j > 0 && img.dts[order[j - 1]].1 < img.dts[order[j]].1 {
                order.swap(j - 1, j);
                j -= 1;
            }
        }
        order.truncate(100);
        let mut taken = vec![false; img.gts.len()];
        for &d in &order {
            let (dm, score) = (&img.dts[d].0, img.dts[d].1);
            let pick = |want_ignored: bool, taken: &[bool]| -> Option<usize> {
                let mut best: Option<(usize, f64)> = None;
                for g in 0..img.gts.len() {
                    if taken[g] || ignored[g] != want_ignored {
                        continue;
                    }
                    let v = iou(dm, &img.gts[g]);
                    if v >= t && best.is_none_or(|(_, b)| v >= b) {
                        best = Some((g, v));
                    }
                }
                best.map(|(g, _)| g)
            };
            match pick(false, &taken) {
                Some(g) => {
                    taken[g] = true;
                    counted.push((score, true));
                }
                None => match pick(true, &taken) {
                    Some(g) => taken[g] = true,
                    None => {
                        if in_range(area(dm)) {
                            counted.push((score, false));
                        }
                    }
                },
            }
        }
    }
    if positives == 0 {
        return None;
    }
    // stable descending sort across images
    let mut idx: Vec<usize> = (0..counted.len()).collect();
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && counted[idx[j - 1]].0 < counted[idx[j]].0 {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &idx {
        if counted[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut total = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

pub fn thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        None
    } else {
        Some(d.iter().sum::<f64>() / d.len() as f64)
    }
}

/// `[AP_m, AP50, AP75, AP_S, AP_M, AP_L]` with the given S/M and M/L
/// boundaries.
pub fn oracle_summary(images: &[OracleImage], small: f64, large: f64) -> [Option<f64>; 6] {
    let inf = f64::INFINITY;
    let over = |lo: f64, hi: f64| -> Option<f64> {
        let v: Vec<Option<f64>> = thresholds()
            .iter()
            .map(|&t| oracle_ap(images, t, lo, hi))
            .collect();
        mean_defined(&v)
    };
    [
        over(0.0, inf),
        oracle_ap(images, 0.5, 0.0, inf),
        oracle_ap(images, 0.75, 0.0, inf),
        over(0.0, small),
        over(small, large),
        over(large, inf),
    ]
}

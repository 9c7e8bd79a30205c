//! Mask average precision in the COCO style.
//!
//! Per image, detections are visited in descending score order and each
//! takes the highest-IoU unmatched ground truth with IoU >= t. Within an
//! area range, ground truths outside the range are ignored: a detection
//! matched to one is dropped, and an unmatched detection is dropped when its
//! own area is outside the range. Across images, detections are ranked by
//! score (stable), precision is made non-increasing in recall, and sampled
//! at the 101 recall levels `0, 0.01, ..., 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{InstanceSet, Mask};

/// Detections per image considered (highest scores first).
pub const MAX_DETECTIONS: usize = 100;

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Size-bucket boundaries on mask pixel area: S is `area < small`, M is
/// `small <= area < large`, L is `area >= large`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaBuckets {
    pub small: f64,
    pub large: f64,
}

impl AreaBuckets {
    /// 32² and 64².
    pub const NARROW: Self = Self {
        small: 1024.0,
        large: 4096.0,
    };
    /// 10² and 16²: splits ships in 128-pixel synthetic scenes into
    /// roughly equal thirds.
    pub const DESK: Self = Self {
        small: 100.0,
        large: 256.0,
    };
    /// Standard COCO: 32² and 96².
    pub const COCO: Self = Self {
        small: 1024.0,
        large: 9216.0,
    };

    pub fn ranges(&self) -> [(f64, f64); 3] {
        [
            (0.0, self.small),
            (self.small, self.large),
            (self.large, f64::INFINITY),
        ]
    }
}

impl Default for AreaBuckets {
    fn default() -> Self {
        Self::NARROW
    }
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "mask sizes {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Outcome of greedy matching in one image at one threshold.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// Detection indices in visiting order (descending score, stable).
    pub order: Vec<usize>,
    /// Per visited detection: matched to a ground truth.
    pub tp: Vec<bool>,
    /// Per visited detection: excluded from counting (area-range rules).
    pub ignored: Vec<bool>,
    /// Ground-truth index matched by each visited detection.
    pub matched_gt: Vec<Option<usize>>,
    /// Counted ground truths left unmatched.
    pub false_negatives: usize,
    /// Counted ground truths.
    pub positives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.tp
            .iter()
            .zip(&self.ignored)
            .filter(|(t, i)| **t && !**i)
            .count()
    }

    pub fn false_positives(&self) -> usize {
        self.tp
            .iter()
            .zip(&self.ignored)
            .filter(|(t, i)| !**t && !**i)
            .count()
    }
}

/// Detection indices sorted by descending score; ties keep input order.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(MAX_DETECTIONS);
    order
}

/// Per-image state shared by every threshold and area range.
struct ImageEval {
    ious: Vec<f64>,
    n_gt: usize,
    gt_area: Vec<usize>,
    dt_area: Vec<usize>,
    order: Vec<usize>,
}

impl ImageEval {
    fn new(preds: &InstanceSet, gts: &InstanceSet) -> Result<Self> {
        let scores = preds
            .scores
            .as_ref()
            .ok_or_else(|| Error::Input("predictions carry no scores".into()))?;
        let gt_area: Vec<usize> = gts.masks.iter().map(Mask::area).collect();
        let dt_area: Vec<usize> = preds.masks.iter().map(Mask::area).collect();
        let mut ious = Vec::with_capacity(preds.len() * gts.len());
        for d in &preds.masks {
            for g in &gts.masks {
                ious.push(mask_iou(d, g)?);
            }
        }
        Ok(Self {
            ious,
            n_gt: gts.len(),
            gt_area,
            dt_area,
            order: score_order(scores),
        })
    }

    fn run(&self, t: f64, (lo, hi): (f64, f64)) -> MatchResult {
        let in_range = |a: usize| (a as f64) >= lo && (a as f64) < hi;
        let gt_ignored: Vec<bool> = self.gt_area.iter().map(|&a| !in_range(a)).collect();
        // counted ground truths first, original order otherwise
        let mut gt_order: Vec<usize> = (0..self.n_gt).collect();
        gt_order.sort_by_key(|&g| gt_ignored[g]);
        let mut taken = vec![false; self.n_gt];
        let mut res = MatchResult {
            order: self.order.clone(),
            positives: gt_ignored.iter().filter(|&&i| !i).count(),
            ..Default::default()
        };
        for &d in &self.order {
            let mut best: Option<usize> = None;
            let mut best_iou = t;
            for &g in &gt_order {
                if taken[g] {
                    continue;
                }
                if let Some(m) = best {
                    if !gt_ignored[m] && gt_ignored[g] {
                        break;
                    }
                }
                let v = self.ious[d * self.n_gt + g];
                if v < best_iou {
                    continue;
                }
                best_iou = v;
                best = Some(g);
            }
            if let Some(g) = best {
                taken[g] = true;
            }
            res.tp.push(best.is_some());
            res.ignored.push(match best {
                Some(g) => gt_ignored[g],
                None => !in_range(self.dt_area[d]),
            });
            res.matched_gt.push(best);
        }
        res.false_negatives = (0..self.n_gt)
            .filter(|&g| !gt_ignored[g] && !taken[g])
            .count();
        res
    }
}

/// Greedy matching of one image's predictions to its ground truth.
pub fn match_at_threshold(preds: &InstanceSet, gts: &InstanceSet, t: f64) -> Result<MatchResult> {
    Ok(ImageEval::new(preds, gts)?.run(t, (0.0, f64::INFINITY)))
}

/// 101-point interpolated precision over recall.
pub fn precision_curve(tp: &[bool], scores: &[f64], positives: usize) -> [f64; 101] {
    assert_eq!(tp.len(), scores.len());
    let mut q = [0.0; 101];
    if positives == 0 {
        return q;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &i in &order {
        if tp[i] {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / positives as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    for (j, slot) in q.iter_mut().enumerate() {
        let r = j as f64 / 100.0;
        let k = recall.partition_point(|&v| v < r);
        if k < precision.len() {
            *slot = precision[k];
        }
    }
    q
}

/// Area under the interpolated precision-recall curve. `tp` flags and
/// `scores` describe counted detections; `positives` is the number of
/// counted ground truths.
pub fn average_precision(tp: &[bool], scores: &[f64], positives: usize) -> f64 {
    precision_curve(tp, scores, positives).iter().sum::<f64>() / 101.0
}

/// Summary numbers for one set of images. `None` marks a value with no
/// ground truth to measure against.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "AP_m")]
    pub ap: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75")]
    pub ap75: Option<f64>,
    #[serde(rename = "AP_S")]
    pub ap_small: Option<f64>,
    #[serde(rename = "AP_M")]
    pub ap_medium: Option<f64>,
    #[serde(rename = "AP_L")]
    pub ap_large: Option<f64>,
    /// Interpolated precision per IoU threshold over all areas.
    #[serde(skip)]
    pub curves: Vec<[f64; 101]>,
}

impl EvalReport {
    pub fn fields(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("AP_m", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_S", self.ap_small),
            ("AP_M", self.ap_medium),
            ("AP_L", self.ap_large),
        ]
    }

    /// Fixed-width text table row.
    pub fn table_row(&self, label: &str) -> String {
        let mut s = format!("{label:<12}");
        for (_, v) in self.fields() {
            match v {
                Some(x) => s.push_str(&format!(" {:>7.4}", x)),
                None => s.push_str(&format!(" {:>7}", "n/a")),
            }
        }
        s
    }

    /// Header line matching [`EvalReport::table_row`]; `label` names the
    /// first column.
    pub fn table_header(label: &str) -> String {
        let mut s = format!("{label:<12}");
        for (k, _) in Self::default().fields() {
            s.push_str(&format!(" {k:>7}"));
        }
        s
    }
}

/// Pools per-image matches and returns the AP, or `None` without counted
/// ground truth; also the precision curve.
fn accumulate(
    evals: &[ImageEval],
    scores: &[&[f64]],
    t: f64,
    range: (f64, f64),
) -> (Option<f64>, [f64; 101]) {
    let mut tp = Vec::new();
    let mut sc = Vec::new();
    let mut positives = 0;
    for (e, s) in evals.iter().zip(scores) {
        let r = e.run(t, range);
        positives += r.positives;
        for (k, &d) in r.order.iter().enumerate() {
            if !r.ignored[k] {
                tp.push(r.tp[k]);
                sc.push(s[d]);
            }
        }
    }
    if positives == 0 {
        return (None, [0.0; 101]);
    }
    let curve = precision_curve(&tp, &sc, positives);
    (Some(curve.iter().sum::<f64>() / 101.0), curve)
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Evaluates `(predictions, ground truth)` pairs, one per image.
pub fn coco_summary(
    images: &[(InstanceSet, InstanceSet)],
    buckets: AreaBuckets,
) -> Result<EvalReport> {
    let evals = images
        .iter()
        .map(|(p, g)| ImageEval::new(p, g))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<&[f64]> = images
        .iter()
        .map(|(p, _)| p.scores.as_deref().unwrap_or(&[]))
        .collect();
    let all = (0.0, f64::INFINITY);
    let thresholds = iou_thresholds();
    let mut per_t = Vec::new();
    let mut curves = Vec::new();
    for &t in &thresholds {
        let (ap, c) = accumulate(&evals, &scores, t, all);
        per_t.push(ap);
        curves.push(c);
    }
    let bucket = |range| {
        let v: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| accumulate(&evals, &scores, t, range).0)
            .collect();
        mean_defined(&v)
    };
    let [s, m, l] = buckets.ranges();
    Ok(EvalReport {
        ap: mean_defined(&per_t),
        ap50: per_t[0],
        ap75: per_t[5],
        ap_small: bucket(s),
        ap_medium: bucket(m),
        ap_large: bucket(l),
        curves,
    })
}

//! Set-prediction training loss with deep supervision.
//!
//! Every prediction set (the initial one and one per decoder layer) is
//! matched to the ground truth by minimum cost, then scored with a weighted
//! sum of class cross-entropy over all queries and mask BCE plus soft dice
//! over the matched pairs. Masks are compared at input resolution by
//! default, or at stride 4 (see [`MaskLossResolution`]).

use serde::{Deserialize, Serialize};

use crate::graph::Var;
use crate::matching::hungarian_match;
use crate::ops::logistic;
use crate::pipeline::LayerPrediction;
use crate::tensor::Tensor;
use crate::types::{Mask, NO_OBJECT, SHIP};

/// Smoothing term in the dice denominator.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    /// Cross-entropy weight of the no-object class.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            bce: 5.0,
            dice: 5.0,
            no_object: 0.1,
        }
    }
}

/// Where mask BCE and dice are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLossResolution {
    /// Ground truth downsampled to the stride-4 mask logits.
    Logits,
    /// Mask logits bilinearly upsampled to the input size, the same
    /// resampling inference uses, against full-resolution ground truth.
    #[default]
    Input,
}

/// Unweighted matching-cost components for one (query, ground truth) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCost {
    /// Negative probability of the ground-truth class.
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean BCE between `sigmoid(logits)` and `target`.
pub fn bce_value(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&l, &t)| softplus(l) - l * t)
        .sum::<f64>()
        / n
}

/// Soft dice loss; 0 when the target is empty and no probability exceeds
/// one half.
pub fn dice_value(logits: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut sp, mut st, mut any) = (0.0, 0.0, 0.0, false);
    for (&l, &t) in logits.iter().zip(target) {
        let p = logistic(l);
        inter += p * t;
        sp += p;
        st += t;
        any |= p > 0.5;
    }
    if st == 0.0 && !any {
        return 0.0;
    }
    1.0 - 2.0 * inter / (sp + st + DICE_EPS)
}

pub fn pair_cost(class_logits: &[f64], mask_logits: &[f64], target: &[f64]) -> PairCost {
    let p_ship = logistic(class_logits[SHIP] - class_logits[NO_OBJECT]);
    PairCost {
        cls: -p_ship,
        bce: bce_value(mask_logits, target),
        dice: dice_value(mask_logits, target),
    }
}

/// Weighted `[N_q, N_gt]` matching costs; entrywise equal to [`pair_cost`]
/// up to summation order. Per-query sums are computed once, so each pair
/// only visits its target's nonzero pixels.
pub fn cost_matrix(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    targets: &[Tensor],
    w: &LossWeights,
) -> Tensor {
    let nq = class_logits.dim(0);
    let p = mask_logits.dim(1);
    let support: Vec<(Vec<(usize, f64)>, f64)> = targets
        .iter()
        .map(|t| {
            let nz: Vec<(usize, f64)> = t
                .data()
                .iter()
                .copied()
                .enumerate()
                .filter(|&(_, v)| v != 0.0)
                .collect();
            let st = nz.iter().map(|&(_, v)| v).sum();
            (nz, st)
        })
        .collect();
    let mut out = Tensor::zeros(&[nq, targets.len()]);
    let mut prob = vec![0.0; p];
    for q in 0..nq {
        let cl = &class_logits.data()[q * 2..q * 2 + 2];
        let ml = &mask_logits.data()[q * p..(q + 1) * p];
        let p_ship = logistic(cl[SHIP] - cl[NO_OBJECT]);
        let (mut soft, mut sp, mut any) = (0.0, 0.0, false);
        for (pr, &l) in prob.iter_mut().zip(ml) {
            soft += softplus(l);
            *pr = logistic(l);
            sp += *pr;
            any |= *pr > 0.5;
        }
        for (g, (nz, st)) in support.iter().enumerate() {
            let (mut lt, mut inter) = (0.0, 0.0);
            for &(i, t) in nz {
                lt += ml[i] * t;
                inter += prob[i] * t;
            }
            let bce = (soft - lt) / p as f64;
            let dice = if *st == 0.0 && !any {
                0.0
            } else {
                1.0 - 2.0 * inter / (sp + st + DICE_EPS)
            };
            out.set(&[q, g], -w.cls * p_ship + w.bce * bce + w.dice * dice);
        }
    }
    out
}

/// Reduces a full-resolution mask to `factor`-sized blocks: a block is
/// foreground when at least half of it is covered. A nonempty mask that
/// would vanish keeps its best-covered block.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Tensor {
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut cover = vec![0usize; h * w];
    for y in 0..h * factor {
        for x in 0..w * factor {
            if mask.get(y, x) {
                cover[(y / factor) * w + x / factor] += 1;
            }
        }
    }
    let half = factor * factor;
    let mut out: Vec<f64> = cover
        .iter()
        .map(|&c| if 2 * c >= half { 1.0 } else { 0.0 })
        .collect();
    if out.iter().all(|&v| v == 0.0) {
        if let Some((i, &c)) = cover
            .iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
        {
            if c > 0 {
                out[i] = 1.0;
            }
        }
    }
    Tensor::new(&[h * w], out)
}

/// Weighted loss components, each summed over prediction sets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
}

impl std::ops::AddAssign for LossReport {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.cls += o.cls;
        self.bce += o.bce;
        self.dice += o.dice;
    }
}

/// Loss of one prediction set against ground-truth masks at mask
/// resolution (`targets[g]` has `P` entries, matching the mask logits).
pub fn layer_loss<'g>(
    class_logits: Var<'g>,
    mask_logits: Var<'g>,
    targets: &[Tensor],
    w: &LossWeights,
) -> (Var<'g>, LossReport) {
    let nq = class_logits.shape()[0];
    let mut labels = vec![NO_OBJECT; nq];
    let pairs = if targets.is_empty() {
        Vec::new()
    } else {
        let costs = cost_matrix(&class_logits.value(), &mask_logits.value(), targets, w);
        hungarian_match(costs.data(), nq, targets.len())
    };
    for &(q, _) in &pairs {
        labels[q] = SHIP;
    }
    let mut weights = [0.0; 2];
    weights[SHIP] = 1.0;
    weights[NO_OBJECT] = w.no_object;
    let ce = class_logits
        .cross_entropy_rows(&labels, &weights)
        .scale(w.cls);
    let mut report = LossReport {
        cls: ce.item(),
        ..Default::default()
    };
    let mut total = ce;
    if !pairs.is_empty() {
        let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
        let selected = mask_logits.select_rows(&rows);
        let parts: Vec<&Tensor> = pairs.iter().map(|&(_, g)| &targets[g]).collect();
        let stacked = Tensor::concat0(&parts);
        let bce = selected.bce_with_logits_mean(&stacked).scale(w.bce);
        let k = pairs.len();
        let dice_sum = (0..k)
            .map(|i| selected.slice0(i, i + 1).dice_loss_with_logits(parts[i]))
            .reduce(|a, b| a.add(b))
            .expect("nonempty");
        let dice = dice_sum.scale(w.dice / k as f64);
        report.bce = bce.item();
        report.dice = dice.item();
        total = total.add(bce).add(dice);
    }
    report.total = total.item();
    (total, report)
}

/// Sum of [`layer_loss`] over every prediction set.
pub fn total_loss<'g>(
    predictions: &[LayerPrediction<'g>],
    targets: &[Tensor],
    w: &LossWeights,
) -> (Var<'g>, LossReport) {
    let mut report = LossReport::default();
    let mut sum: Option<Var<'g>> = None;
    for p in predictions {
        let (l, r) = layer_loss(p.class_logits, p.mask_logits, targets, w);
        report += r;
        sum = Some(match sum {
            Some(s) => s.add(l),
            None => l,
        });
    }
    report.total = sum.map_or(0.0, |s| s.item());
    (sum.expect("at least one prediction set"), report)
}

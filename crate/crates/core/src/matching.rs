//! One-to-one assignment of queries to ground-truth objects and the training
//! objective built on it: focal classification, L1 and GIoU box terms.

use serde::{Deserialize, Serialize};

use crate::autograd::{focal_term, Graph, Var};
use crate::boxes::{box_convert, giou, CxCyWh};
use crate::decoder::Detections;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Elem, Tensor};

/// Objects of one image: normalized centre-size boxes and class indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(dim_err!("{} boxes but {} labels", self.boxes.len(), self.labels.len()));
        }
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            if l >= num_classes {
                return Err(Error::Domain(format!("label {l} outside {num_classes} classes")));
            }
            let [cx, cy, w, h] = *b;
            if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
                return Err(Error::Domain(format!("box size {w}x{h} outside (0, 1]")));
            }
            let eps = 1e-9;
            if cx - w / 2.0 < -eps || cy - h / 2.0 < -eps || cx + w / 2.0 > 1.0 + eps || cy + h / 2.0 > 1.0 + eps {
                return Err(Error::Domain(format!("box {b:?} leaves the unit square")));
            }
        }
        Ok(())
    }

    pub fn boxes_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.boxes.len(), 4], |i| self.boxes[i / 4][i % 4])
    }
}

/// `(query, ground truth)` pairs, injective on both sides.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

/// Relative weights of the three loss terms (also used for the matching cost).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// `-alpha (1 - p_t)^gamma log p_t`, with `p_t` clamped below at `1e-12`.
pub fn focal_loss(p: &[f64], target: usize, alpha: f64, gamma: f64) -> Result<f64> {
    if target >= p.len() {
        return Err(dim_err!("target {target} outside {} classes", p.len()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) || !(gamma >= 0.0) {
        return Err(Error::Domain(format!("focal parameters alpha = {alpha}, gamma = {gamma}")));
    }
    Ok(focal_term(p[target], alpha, gamma).0)
}

pub fn l1_loss(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `[Nq, Ngt]` matching cost:
/// `w_cls * (-p_i(c_j)) + w_l1 * L1(b_i, b_j) + w_giou * (1 - GIoU(b_i, b_j))`.
pub fn match_cost(det: &Detections, gt: &GroundTruth, w: LossWeights) -> Result<Tensor> {
    det.validate()?;
    let probs = det.probabilities();
    let n = det.num_queries();
    let m = gt.len();
    let gt_xyxy = gt
        .boxes
        .iter()
        .map(|b| box_convert(CxCyWh(*b)))
        .collect::<Result<Vec<_>>>()?;
    let mut cost = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let bi: [f64; 4] = std::array::from_fn(|k| det.boxes.at2(i, k));
        let xi = box_convert(CxCyWh(bi))?;
        for j in 0..m {
            let c = gt.labels[j];
            if c >= det.num_classes() {
                return Err(Error::Domain(format!("label {c} outside {} classes", det.num_classes())));
            }
            cost.data_mut()[i * m + j] = w.cls * -probs[i][c]
                + w.l1 * l1_loss(&bi, &gt.boxes[j])
                + w.giou * (1.0 - giou(&xi, &gt_xyxy[j]));
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of `min(rows, cols)` pairs (shortest augmenting
/// paths with potentials, O(n^2 m)).
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let (rows, cols) = cost.dims2()?;
    if rows == 0 || cols == 0 {
        return Ok(Assignment::default());
    }
    if !cost.all_finite() {
        return Err(Error::Domain("matching costs must be finite".into()));
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let a = |i: usize, j: usize| -> f64 {
        if transposed {
            cost.at2(j, i)
        } else {
            cost.at2(i, j)
        }
    };
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            let (r, c) = (p[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

/// Weighted total and its three unweighted terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Differentiable loss of one image's head outputs against an assignment.
///
/// Every query takes a focal term (its matched class, or background when
/// unmatched) averaged over all queries; matched queries also take L1 and
/// GIoU terms averaged over matched pairs.
pub fn loss_var<'g, T: Elem>(
    logits: Var<'g, T>,
    boxes: Var<'g, T>,
    gt: &GroundTruth,
    assignment: &Assignment,
    w: LossWeights,
    focal: FocalParams,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    let (n, c1) = logits.dims2()?;
    let background = c1 - 1;
    let mut targets = vec![background; n];
    let mut seen_q = vec![false; n];
    let mut seen_g = vec![false; gt.len()];
    for &(q, g) in &assignment.pairs {
        if q >= n || g >= gt.len() {
            return Err(dim_err!("pair ({q}, {g}) outside {n} queries x {} objects", gt.len()));
        }
        if std::mem::replace(&mut seen_q[q], true) || std::mem::replace(&mut seen_g[g], true) {
            return Err(Error::Domain(format!("assignment repeats an index in ({q}, {g})")));
        }
        if gt.labels[g] >= background {
            return Err(Error::Domain(format!("label {} outside {background} classes", gt.labels[g])));
        }
        targets[q] = gt.labels[g];
    }
    let cls = logits.focal_loss(&targets, focal.alpha, focal.gamma)?;
    let mut total = cls.scale(w.cls);
    let mut br = LossBreakdown {
        cls: cls.value().data()[0].f64(),
        ..Default::default()
    };
    if !assignment.pairs.is_empty() {
        let qs: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let tgt = Tensor::from_fn(&[qs.len(), 4], |i| T::of(gt.boxes[assignment.pairs[i / 4].1][i % 4]));
        let matched = boxes.select_rows(&qs)?;
        let l1 = matched.l1_loss(&tgt)?;
        let gi = matched.giou_loss(&tgt)?;
        br.l1 = l1.value().data()[0].f64();
        br.giou = gi.value().data()[0].f64();
        total = total.add(l1.scale(w.l1))?.add(gi.scale(w.giou))?;
    }
    br.total = total.value().data()[0].f64();
    if !br.total.is_finite() {
        return Err(Error::Evaluation("non-finite loss".into()));
    }
    Ok((total, br))
}

/// Value-level loss of [`Detections`] against ground truth.
pub fn total_loss(
    det: &Detections,
    gt: &GroundTruth,
    assignment: &Assignment,
    w: LossWeights,
    focal: FocalParams,
) -> Result<LossBreakdown> {
    det.validate()?;
    let g = Graph::<f64>::inference();
    let l = g.constant(det.class_logits.clone());
    let b = g.constant(det.boxes.clone());
    Ok(loss_var(l, b, gt, assignment, w, focal)?.1)
}

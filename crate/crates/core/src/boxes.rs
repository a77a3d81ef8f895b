//! Box conventions and overlap geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized centre-size box `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CxCyWh(pub [f64; 4]);

/// Corner box `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Xyxy(pub [f64; 4]);

impl CxCyWh {
    pub fn to_xyxy(self) -> Result<Xyxy> {
        box_convert(self)
    }

    pub fn area(self) -> f64 {
        self.0[2] * self.0[3]
    }
}

/// Centre-size to corner form.
pub fn box_convert(b: CxCyWh) -> Result<Xyxy> {
    let [cx, cy, w, h] = b.0;
    if w < 0.0 || h < 0.0 || !w.is_finite() || !h.is_finite() {
        return Err(Error::Domain(format!(
            "box width/height must be non-negative, got w={w}, h={h}"
        )));
    }
    Ok(Xyxy([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]))
}

/// Corner form back to centre-size.
pub fn box_unconvert(b: Xyxy) -> CxCyWh {
    let [x1, y1, x2, y2] = b.0;
    CxCyWh([0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1])
}

impl Xyxy {
    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.0;
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    /// Clip to the unit square.
    pub fn clip_unit(self) -> Xyxy {
        Xyxy(self.0.map(|v| v.clamp(0.0, 1.0)))
    }
}

fn intersection(a: &Xyxy, b: &Xyxy) -> (f64, f64) {
    let iw = (a.0[2].min(b.0[2]) - a.0[0].max(b.0[0])).max(0.0);
    let ih = (a.0[3].min(b.0[3]) - a.0[1].max(b.0[1])).max(0.0);
    (iw, ih)
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &Xyxy, b: &Xyxy) -> f64 {
    let (iw, ih) = intersection(a, b);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: `IoU - |hull \ union| / |hull|`.
///
/// Zero-area boxes have IoU 0; when the enclosing hull itself has zero area
/// the penalty term is taken as 0, so two coincident degenerate boxes score 0.
pub fn giou(a: &Xyxy, b: &Xyxy) -> f64 {
    giou_grad(a, b).0
}

/// GIoU and its (sub)gradient with respect to the corners of `a`.
pub fn giou_grad(a: &Xyxy, b: &Xyxy) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = a.0;
    let [tx1, ty1, tx2, ty2] = b.0;
    let (iw, ih) = intersection(a, b);
    let inter = iw * ih;
    let (w, h) = ((x2 - x1).max(0.0), (y2 - y1).max(0.0));
    let area_a = w * h;
    let union = area_a + b.area() - inter;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let hull = cw * ch;

    // d(iw)/d(x1, x2), d(ih)/d(y1, y2)
    let diw = if iw > 0.0 {
        [if x1 > tx1 { -1.0 } else { 0.0 }, if x2 < tx2 { 1.0 } else { 0.0 }]
    } else {
        [0.0, 0.0]
    };
    let dih = if ih > 0.0 {
        [if y1 > ty1 { -1.0 } else { 0.0 }, if y2 < ty2 { 1.0 } else { 0.0 }]
    } else {
        [0.0, 0.0]
    };
    // order: x1, y1, x2, y2
    let d_inter = [diw[0] * ih, dih[0] * iw, diw[1] * ih, dih[1] * iw];
    let d_area = [-h, -w, h, w];
    let d_union: [f64; 4] = std::array::from_fn(|i| d_area[i] - d_inter[i]);
    let dcw = [if x1 < tx1 { -1.0 } else { 0.0 }, if x2 > tx2 { 1.0 } else { 0.0 }];
    let dch = [if y1 < ty1 { -1.0 } else { 0.0 }, if y2 > ty2 { 1.0 } else { 0.0 }];
    let d_hull = [dcw[0] * ch, dch[0] * cw, dcw[1] * ch, dch[1] * cw];

    let (iou_v, d_iou) = if union > 0.0 {
        (
            inter / union,
            std::array::from_fn(|i| (d_inter[i] * union - inter * d_union[i]) / (union * union)),
        )
    } else {
        (0.0, [0.0; 4])
    };
    // GIoU = IoU - 1 + U / C
    let (penalty, d_ratio) = if hull > 0.0 {
        (
            (hull - union) / hull,
            std::array::from_fn(|i| (d_union[i] * hull - union * d_hull[i]) / (hull * hull)),
        )
    } else {
        (0.0, [0.0; 4])
    };
    let grad: [f64; 4] = std::array::from_fn(|i| d_iou[i] + d_ratio[i]);
    (iou_v - penalty, grad)
}

/// Chain a corner-space gradient back to centre-size coordinates.
pub(crate) fn xyxy_grad_to_cxcywh(g: [f64; 4]) -> [f64; 4] {
    let [gx1, gy1, gx2, gy2] = g;
    [gx1 + gx2, gy1 + gy2, 0.5 * (gx2 - gx1), 0.5 * (gy2 - gy1)]
}

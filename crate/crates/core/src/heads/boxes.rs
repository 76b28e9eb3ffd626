//! Normalised `(cx, cy, w, h)` boxes: scalar IoU/gIoU and a differentiable gIoU.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub type BoxCxCyWh = [f64; 4];

pub fn to_corners(b: &BoxCxCyWh) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn area(b: &BoxCxCyWh) -> f64 {
    b[2].max(0.0) * b[3].max(0.0)
}

fn intersection(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let (a, b) = (to_corners(a), to_corners(b));
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let (ca, cb) = (to_corners(a), to_corners(b));
    let enclose = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if enclose > 0.0 {
        iou - (enclose - union) / enclose
    } else {
        iou
    }
}

/// Row-wise gIoU `[n×1]` between predicted boxes `pred[n×4]` and fixed
/// targets `gt[n×4]`, built from differentiable primitives. Boxes must have
/// positive extent.
pub fn giou_graph(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    let target = g.constant(gt.clone());
    let corners = |g: &mut Graph, b: Var| -> Result<[Var; 4]> {
        let cx = g.slice(b, 1, 0, 1)?;
        let cy = g.slice(b, 1, 1, 1)?;
        let w = g.slice(b, 1, 2, 1)?;
        let h = g.slice(b, 1, 3, 1)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        Ok([
            g.sub(cx, hw)?,
            g.sub(cy, hh)?,
            g.add(cx, hw)?,
            g.add(cy, hh)?,
        ])
    };
    let area = |g: &mut Graph, c: &[Var; 4]| -> Result<Var> {
        let w = g.sub(c[2], c[0])?;
        let h = g.sub(c[3], c[1])?;
        Ok(g.mul(w, h)?)
    };
    let p = corners(g, pred)?;
    let t = corners(g, target)?;
    let ix0 = g.maximum(p[0], t[0])?;
    let iy0 = g.maximum(p[1], t[1])?;
    let ix1 = g.minimum(p[2], t[2])?;
    let iy1 = g.minimum(p[3], t[3])?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let ap = area(g, &p)?;
    let at = area(g, &t)?;
    let sum = g.add(ap, at)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;
    let ex0 = g.minimum(p[0], t[0])?;
    let ey0 = g.minimum(p[1], t[1])?;
    let ex1 = g.maximum(p[2], t[2])?;
    let ey1 = g.maximum(p[3], t[3])?;
    let e = area(g, &[ex0, ey0, ex1, ey1])?;
    let gap = g.sub(e, union)?;
    let frac = g.div(gap, e)?;
    Ok(g.sub(iou, frac)?)
}

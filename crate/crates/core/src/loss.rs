//! Reconstruction and velocity losses on x0 predictions.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{ensure, Result};

fn same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    ensure!(a.dim() == b.dim(), Shape, "{what}: {:?} vs {:?}", a.dim(), b.dim());
    Ok(())
}

/// Mean squared error over all entries.
pub fn loss_simple(x0: &Mat, x0_hat: &Mat) -> Result<f64> {
    same_shape(x0, x0_hat, "loss_simple")?;
    ensure!(!x0.is_empty(), Shape, "loss_simple of an empty matrix");
    Ok((x0 - x0_hat).iter().map(|d| d * d).sum::<f64>() / x0.len() as f64)
}

/// Squared L2 distance between frame differences, averaged over `N − 1`.
pub fn loss_velocity(h: &Mat, h_hat: &Mat) -> Result<f64> {
    same_shape(h, h_hat, "loss_velocity")?;
    let n = h.nrows();
    ensure!(n >= 2, InvalidArgument, "velocity loss needs at least 2 frames, got {n}");
    let r = h - h_hat;
    let mut acc = 0.0;
    for i in 0..n - 1 {
        for c in 0..r.ncols() {
            let d = r[[i + 1, c]] - r[[i, c]];
            acc += d * d;
        }
    }
    Ok(acc / (n - 1) as f64)
}

/// Per-head losses and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_h: f64,
    pub l_f: f64,
    pub l_b: f64,
    pub total: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(f: &Mat, f_hat: &Mat, b: &Mat, b_hat: &Mat, h: &Mat, h_hat: &Mat, lambda_f: f64, lambda_b: f64) -> Result<LossParts> {
    ensure!(
        h.nrows() == f.nrows() && h.nrows() == b.nrows() && h.ncols() == f.ncols() + b.ncols(),
        Shape,
        "holistic {:?} is not face {:?} beside body {:?}",
        h.dim(),
        f.dim(),
        b.dim()
    );
    let l_h = loss_simple(h, h_hat)? + loss_velocity(h, h_hat)?;
    let l_f = loss_simple(f, f_hat)? + loss_velocity(f, f_hat)?;
    let l_b = loss_simple(b, b_hat)? + loss_velocity(b, b_hat)?;
    Ok(LossParts {
        l_h,
        l_f,
        l_b,
        total: l_h + lambda_f * l_f + lambda_b * l_b,
    })
}

/// `L_simple + L_vel` recorded on a graph.
pub fn head_loss_graph(g: &mut Graph<'_>, target: Var, pred: Var) -> Var {
    let (n, d) = g.shape(target);
    let r = g.sub(pred, target);
    let sq = g.sum_sq(r);
    let simple = g.scale(sq, 1.0 / (n * d) as f64);
    let next = g.slice_rows(r, 1, n);
    let prev = g.slice_rows(r, 0, n - 1);
    let dv = g.sub(next, prev);
    let vsq = g.sum_sq(dv);
    let vel = g.scale(vsq, 1.0 / (n - 1) as f64);
    g.add(simple, vel)
}

/// Graph handles of the three head losses and the total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_h: Var,
    pub l_f: Var,
    pub l_b: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph<'_>) -> LossParts {
        LossParts {
            l_h: g.scalar(self.l_h),
            l_f: g.scalar(self.l_f),
            l_b: g.scalar(self.l_b),
            total: g.scalar(self.total),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph(g: &mut Graph<'_>, f: Var, f_hat: Var, b: Var, b_hat: Var, h: Var, h_hat: Var, lambda_f: f64, lambda_b: f64) -> LossVars {
    let l_h = head_loss_graph(g, h, h_hat);
    let l_f = head_loss_graph(g, f, f_hat);
    let l_b = head_loss_graph(g, b, b_hat);
    let wf = g.scale(l_f, lambda_f);
    let wb = g.scale(l_b, lambda_b);
    let t = g.add(l_h, wf);
    let total = g.add(t, wb);
    LossVars { l_h, l_f, l_b, total }
}

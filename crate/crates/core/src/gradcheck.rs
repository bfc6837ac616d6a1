//! Central finite-difference check of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{NodeId, Precision, Tensor};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter, flat coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new(Precision::F64);
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p)).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Numeric(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    Ok(y)
}

/// Analytic gradients of `f` with respect to `params`; parameters the output does
/// not depend on get zeros.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new(Precision::F64);
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| g.leaf(&p.detached().trainable()))
        .collect();
    let out = f(&mut g, &ids)?;
    let value = g.value(out).item();
    let grads = g.backward(out)?;
    let tensors = ids
        .iter()
        .zip(params)
        .map(|(id, p)| {
            grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape(), p.tag()))
        })
        .collect();
    Ok((value, tensors))
}

/// Compares analytic gradients with central differences at every coordinate of
/// every parameter. The stencil is the fourth-order one at offsets ±step and
/// ±2·step. `f` receives the leaf ids of `params`, in order, and must return a
/// scalar node.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    check(f, params, &[step])
}

/// Like [`finite_diff_check`], but each coordinate is differenced on the
/// ladder `step, step·ratio, …` (`rungs` steps) and the estimate whose
/// neighbour on the ladder agrees with it best is kept. Small steps lose
/// coordinates with tiny gradients to rounding; large ones lose curved
/// coordinates to truncation.
pub fn ladder_diff_check<F>(f: F, params: &[Tensor], step: f64, ratio: f64, rungs: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if rungs < 2 || ratio <= 1.0 {
        return Err(Error::Numeric("a step ladder needs at least two rungs and ratio > 1".into()));
    }
    let steps: Vec<f64> = (0..rungs).map(|j| step * ratio.powi(j as i32)).collect();
    check(f, params, &steps)
}

fn check<F>(f: F, params: &[Tensor], steps: &[f64]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("parameters must be finite".into()));
    }
    if steps.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::Numeric("finite-difference step must be positive".into()));
    }
    let (_, analytic) = analytic_gradients(&f, params)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut at = |offset: f64| -> Result<f64> {
                let mut shifted = base.clone();
                shifted[i] += offset;
                work[pi] = p.detached().with_data(shifted)?;
                evaluate(&f, &work)
            };
            let mut estimates = Vec::with_capacity(steps.len());
            for &h in steps {
                let near = at(h)? - at(-h)?;
                let far = at(2.0 * h)? - at(-2.0 * h)?;
                estimates.push((8.0 * near - far) / (12.0 * h));
            }
            let numeric = if estimates.len() == 1 {
                estimates[0]
            } else {
                let j = (0..estimates.len() - 1)
                    .min_by(|&a, &b| {
                        let da = (estimates[a + 1] - estimates[a]).abs();
                        let db = (estimates[b + 1] - estimates[b]).abs();
                        da.total_cmp(&db)
                    })
                    .expect("at least two rungs");
                estimates[j]
            };
            let a = analytic[pi].data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (pi, i);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
        work[pi] = p.detached();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tag;

    #[test]
    fn quadratic_agrees() {
        // f(w) = wᵀw: central differences are exact up to rounding.
        let w = Tensor::new(vec![3, 1], vec![0.3, -1.2, 2.0], Tag::Adaptation).unwrap();
        let r = finite_diff_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let m = g.mean_all(sq)?;
                Ok(g.scale(m, 3.0)?)
            },
            &[w],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let w = Tensor::new(vec![2], vec![1.0, 2.0], Tag::Adaptation).unwrap();
        let c = Tensor::scalar(5.0, Tag::Data).trainable();
        let r = finite_diff_check(
            |g, ids| Ok(g.scale(ids[1], 1.0)?),
            &[w, c],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn ladder_resolves_a_gradient_below_the_rounding_floor() {
        let w = Tensor::new(vec![1], vec![0.7], Tag::Adaptation).unwrap();
        let f = |g: &mut Graph, ids: &[NodeId]| {
            let c = g.constant(&Tensor::new(vec![1], vec![1.6], Tag::Data).unwrap(), Tag::Data);
            let sq = g.mul(ids[0], ids[0])?;
            let small = g.scale(sq, 1e-7)?;
            let y = g.add(c, small)?;
            Ok(g.mean_all(y)?)
        };
        let plain = finite_diff_check(f, &[w.clone()], 1e-4).unwrap();
        let ladder = ladder_diff_check(f, &[w], 1e-4, 5.0, 6).unwrap();
        assert!(plain.max_rel_err > 1e-6, "{plain:?}");
        assert!(ladder.max_rel_err < 1e-6, "{ladder:?}");
    }

    #[test]
    fn non_finite_function_is_rejected() {
        let w = Tensor::new(vec![1], vec![f64::NAN], Tag::Adaptation).unwrap();
        assert!(finite_diff_check(|g, ids| Ok(g.mean_all(ids[0])?), &[w], 1e-4).is_err());
    }
}

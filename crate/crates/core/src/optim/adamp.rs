//! AdamP projection: for scale-invariant weights, remove the radial component
//! of the update so it moves along the sphere instead of growing the norm.

use crate::tensor::Real;

/// The view under which the projection criterion fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionView {
    /// One row per output channel (`dims[0]` rows).
    Channel,
    /// The whole tensor as a single row.
    Layer,
}

impl ProjectionView {
    pub fn rows(self, dims: &[usize]) -> usize {
        match self {
            ProjectionView::Channel => dims[0],
            ProjectionView::Layer => 1,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn widen<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

/// Per-row `|⟨w, g⟩| / (‖w‖‖g‖ + eps)` under `view`.
pub fn cosine_criterion<T: Real>(
    weight: &[T],
    grad: &[T],
    dims: &[usize],
    view: ProjectionView,
    eps: f64,
) -> Vec<f64> {
    let rows = view.rows(dims);
    let row_dim = weight.len() / rows;
    let (w, g) = (widen(weight), widen(grad));
    w.chunks(row_dim)
        .zip(g.chunks(row_dim))
        .map(|(wr, gr)| dot(wr, gr).abs() / (dot(wr, wr).sqrt() * dot(gr, gr).sqrt() + eps))
        .collect()
}

/// Project `perturb` in place when the gradient is nearly orthogonal to the
/// weight (every row's cosine below `delta / sqrt(row_dim)`), trying the
/// channel view first and the layer view second.
///
/// Returns the view that fired, or `None` when the update is left untouched.
pub fn project<T: Real>(
    weight: &[T],
    grad: &[T],
    perturb: &mut [T],
    dims: &[usize],
    delta: f64,
    eps: f64,
) -> Option<ProjectionView> {
    if dims.len() < 2 {
        return None;
    }
    for view in [ProjectionView::Channel, ProjectionView::Layer] {
        let rows = view.rows(dims);
        let row_dim = weight.len() / rows;
        let cos = cosine_criterion(weight, grad, dims, view, eps);
        let max = cos.iter().copied().fold(0.0, f64::max);
        if max < delta / (row_dim as f64).sqrt() {
            let w = widen(weight);
            for (wr, pr) in w.chunks(row_dim).zip(perturb.chunks_mut(row_dim)) {
                let norm = dot(wr, wr).sqrt();
                if norm == 0.0 {
                    continue;
                }
                let p = widen(pr);
                let along: f64 = wr.iter().zip(&p).map(|(a, b)| a / norm * b).sum();
                for ((dst, &pv), &wv) in pr.iter_mut().zip(&p).zip(wr) {
                    *dst = T::from_f64(pv - along * wv / norm);
                }
            }
            return Some(view);
        }
    }
    None
}

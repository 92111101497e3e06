use crate::error::Result;

use super::{Graph, Tensor, Var};

/// Compares the analytic gradient of `f` with central differences
/// `(f(p + h) - f(p - h)) / 2h` at every coordinate of every parameter.
///
/// `f` builds the scalar loss on a fresh graph from the leaf handles of
/// `params` (in order). Returns the maximum relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn finite_diff_check<F>(params: &[Tensor], h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad()).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = work.iter().map(|p| g.leaf(p)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&work)
        .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut eval = |work: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = work.iter().map(|p| g.constant(p)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut worst = 0.0f64;
    for pi in 0..work.len() {
        for k in 0..work[pi].numel() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

use serde::Serialize;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

const MAX_CHECKED: usize = 50_000;

/// Finite-difference comparison for one parameter (or differentiable input) block.
#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU kink or changed a max-pool
    /// winner, where the difference quotient is meaningless.
    pub excluded: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the analytic gradient of `loss` with central differences for every
/// parameter and every gradient-carrying input of `graph`.
///
/// Each entry `v` is perturbed by `±h, ±2h` with `h = step·max(1, |v|)` and
/// differenced with the fourth-order stencil. Plain two-point differences
/// lose about 1e-4 relative accuracy on entries whose gradient is small
/// through cancellation, and a fixed step is too small for inputs in the
/// hundreds.
pub fn grad_check(
    graph: &mut Graph,
    feeds: &[(&str, &Tensor)],
    loss: NodeId,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut owned: Vec<(String, Tensor)> = feeds.iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect();
    let run = |g: &mut Graph, owned: &[(String, Tensor)]| -> Result<(f64, u64)> {
        let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        g.forward(&refs)?;
        Ok((g.value(loss)?.item(), g.branch_signature()))
    };

    let (_, base_sig) = run(graph, &owned)?;
    graph.backward(loss)?;

    let mut blocks_to_check: Vec<(NodeId, Option<usize>)> = graph.params().into_iter().map(|p| (p, None)).collect();
    for (id, name) in graph.grad_inputs() {
        let fi = owned
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no value fed for input `{name}`")))?;
        blocks_to_check.push((id, Some(fi)));
    }
    let total: usize = blocks_to_check.iter().map(|(id, _)| graph.shape(*id).iter().product::<usize>()).sum();
    if total > MAX_CHECKED {
        return Err(Error::InvalidArgument(format!(
            "grad_check over {total} values exceeds the {MAX_CHECKED} limit"
        )));
    }
    let analytic: Vec<Vec<f64>> = blocks_to_check
        .iter()
        .map(|(id, _)| graph.grad(*id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut blocks = Vec::new();
    for ((id, feed_idx), grad) in blocks_to_check.iter().zip(&analytic) {
        let name = graph.leaf_name(*id).unwrap_or("?").to_string();
        let len = grad.len();
        let mut report = BlockReport {
            name,
            len,
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
        };
        for j in 0..len {
            let eval_at = |delta: f64, g: &mut Graph, owned: &mut Vec<(String, Tensor)>| -> Result<(f64, u64)> {
                let orig = match feed_idx {
                    Some(fi) => {
                        let d = owned[*fi].1.data_mut();
                        let o = d[j];
                        d[j] = o + delta;
                        o
                    }
                    None => {
                        let d = g.leaf_data_mut(*id).expect("param leaf");
                        let o = d[j];
                        d[j] = o + delta;
                        o
                    }
                };
                let out = run(g, owned);
                match feed_idx {
                    Some(fi) => owned[*fi].1.data_mut()[j] = orig,
                    None => g.leaf_data_mut(*id).expect("param leaf")[j] = orig,
                }
                out
            };
            // fourth-order stencil; the step grows with the entry's magnitude
            let orig = match feed_idx {
                Some(fi) => owned[*fi].1.data()[j],
                None => graph.leaf_data_mut(*id).expect("param leaf")[j],
            };
            let h = step * orig.abs().max(1.0);
            let mut f = [0.0; 4];
            let mut crossed = false;
            for (slot, delta) in f.iter_mut().zip([2.0 * h, h, -h, -2.0 * h]) {
                let (v, sig) = eval_at(delta, graph, &mut owned)?;
                *slot = v;
                crossed |= sig != base_sig;
            }
            if crossed {
                report.excluded += 1;
                continue;
            }
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(grad[j], numeric));
        }
        blocks.push(report);
    }
    // leave the graph evaluated at the unperturbed point
    run(graph, &owned)?;
    graph.backward(loss)?;

    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step,
        tolerance,
        passed: max_rel_error < tolerance,
        max_rel_error,
        blocks,
    })
}

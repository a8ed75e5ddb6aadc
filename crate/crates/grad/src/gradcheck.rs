//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GradError, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::{Real, Tensor};

/// What to perturb.
#[derive(Clone, Debug)]
pub enum FdTarget {
    Param(String),
    Input(NodeId),
}

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub epsilon: Real,
    /// Entries checked; larger tensors are sampled with `seed`.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_entries: 64,
            seed: 0,
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between analytic and central-difference gradients
/// of a scalar objective over the checked entries of `target`.
///
/// A scalar `objective` node is used as is; otherwise the objective is its
/// inner product with a fixed seeded random tensor.
pub fn finite_difference_check(
    graph: &Graph,
    params: &ParamStore,
    feeds: &[(NodeId, Tensor)],
    objective: NodeId,
    target: &FdTarget,
    cfg: FdConfig,
) -> Result<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe = graph.forward(params, feeds, &[objective])?;
    let out = probe
        .get(objective)
        .ok_or_else(|| GradError::Graph("objective not evaluated".into()))?;
    let projection = if out.len() == 1 {
        Tensor::full(out.shape(), 1.0)
    } else {
        let data = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(out.shape(), data)?
    };

    let mut work = params.clone();
    work.zero_grad();
    let grads = graph.backward(&mut work, &probe, &[(objective, projection.clone())])?;
    let analytic: Vec<Real> = match target {
        FdTarget::Param(name) => work
            .get(name)?
            .grad()
            .ok_or_else(|| GradError::MissingGradient(name.clone()))?
            .to_vec(),
        FdTarget::Input(id) => grads
            .get(*id)
            .ok_or_else(|| GradError::MissingGradient(graph.node(*id).name.clone()))?
            .data()
            .to_vec(),
    };

    let n = analytic.len();
    let entries: Vec<usize> = if n <= cfg.max_entries {
        (0..n).collect()
    } else {
        (0..cfg.max_entries).map(|_| rng.gen_range(0..n)).collect()
    };

    let objective_at = |params: &ParamStore, feeds: &[(NodeId, Tensor)]| -> Result<Real> {
        let acts = graph.forward(params, feeds, &[objective])?;
        Ok(acts.get(objective).expect("evaluated").dot(&projection))
    };

    let mut worst: Real = 0.0;
    for i in entries {
        let mut values = [0.0; 2];
        for (slot, sign) in values.iter_mut().zip([1.0, -1.0]) {
            let delta = sign * cfg.epsilon;
            *slot = match target {
                FdTarget::Param(name) => {
                    let mut p = params.clone();
                    p.get_mut(name)?.data_mut()[i] += delta;
                    objective_at(&p, feeds)?
                }
                FdTarget::Input(id) => {
                    let mut f = feeds.to_vec();
                    let (_, t) = f
                        .iter_mut()
                        .find(|(fid, _)| fid == id)
                        .ok_or_else(|| GradError::Graph("target input not fed".into()))?;
                    t.data_mut()[i] += delta;
                    objective_at(params, &f)?
                }
            };
        }
        let numeric = (values[0] - values[1]) / (2.0 * cfg.epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

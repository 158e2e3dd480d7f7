//! Self-replicating and auxiliary losses with exact reverse-mode gradients for
//! the fixed quine architecture.
//!
//! Losses are sums over the batch, never means, so per-batch values add up to
//! the full-coordinate loss. The replication target is a frozen snapshot and
//! receives no gradient.

use crate::error::{QuineError, Result};
use crate::net::{
    check_temperature, forward_batch, AuxBatch, Coordinate, FixedProjections, Layer, NetworkSpec, ParamVector,
    Workspace,
};
use crate::numeric::{axpy, dot, selu_derivative};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_sr: f64,
    pub l_task: f64,
    pub l_total: f64,
}

/// Frozen copy of the parameters used as the replication target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSnapshot(Vec<f64>);

impl TargetSnapshot {
    pub fn of(params: &ParamVector) -> Self {
        Self(params.as_slice().to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        crate::net::fingerprint(&self.0)
    }
}

/// How the terms of the auxiliary objective are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// Weight of the task (cross-entropy) term.
    pub lambda: f64,
    pub temperature: f64,
    /// Include the self-replication term. Disabled for classifier-only runs.
    pub replication: bool,
}

impl Objective {
    pub fn replication_only() -> Self {
        Self {
            lambda: 0.0,
            temperature: 1.0,
            replication: true,
        }
    }
}

/// Labels and projected images that accompany a coordinate batch.
#[derive(Debug, Clone, Copy)]
pub struct TaskBatch<'a> {
    /// `batch x image_embed_dim`, already passed through the image projection.
    pub projected_images: &'a [f64],
    pub labels: &'a [u8],
}

pub fn cross_entropy_temp(logits: &[f64], label: usize, temperature: f64) -> Result<f64> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(QuineError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if label >= logits.len() {
        return Err(QuineError::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_softmax_terms(logits, temperature).nll(label))
}

struct LogSoftmax {
    scaled: Vec<f64>,
    log_norm: f64,
}

impl LogSoftmax {
    fn nll(&self, label: usize) -> f64 {
        (self.log_norm - self.scaled[label]).max(0.0)
    }

    fn prob(&self, k: usize) -> f64 {
        (self.scaled[k] - self.log_norm).exp()
    }
}

/// Stabilised `log Σ exp(logits / τ)`: the maximum is factored out and the
/// remaining mass goes through `ln_1p`.
fn log_softmax_terms(logits: &[f64], temperature: f64) -> LogSoftmax {
    let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
    let top = crate::net::argmax(&scaled);
    let max = scaled[top];
    let rest: f64 = scaled
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, &s)| (s - max).exp())
        .sum();
    LogSoftmax {
        log_norm: max + rest.ln_1p(),
        scaled,
    }
}

fn coord_indices(coords: &[Coordinate]) -> Vec<usize> {
    coords.iter().map(|c| c.0).collect()
}

fn check_target(target: &TargetSnapshot, spec: &NetworkSpec) -> Result<()> {
    if target.len() != spec.n_params() {
        return Err(QuineError::InvalidArgument(format!(
            "target has {} entries, spec needs {}",
            target.len(),
            spec.n_params()
        )));
    }
    Ok(())
}

/// Self-replicating loss over `coords` against a frozen target (vanilla quine).
pub fn loss_sr(
    params: &ParamVector,
    proj: &FixedProjections,
    target: &TargetSnapshot,
    coords: &[Coordinate],
    spec: &NetworkSpec,
) -> Result<f64> {
    check_target(target, spec)?;
    let idx = coord_indices(coords);
    let mut ws = Workspace::new();
    forward_batch(params, proj, spec, &idx, AuxBatch::None, &mut ws)?;
    Ok(squared_error(ws.predictions(), &idx, target.values()))
}

pub(crate) fn squared_error(pred: &[f64], coords: &[usize], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (p, &c) in pred.iter().zip(coords) {
        let r = p - target[c];
        acc += r * r;
    }
    acc
}

/// Gradient of [`loss_sr`] with the target held constant.
pub fn grad_sr(
    params: &ParamVector,
    proj: &FixedProjections,
    target: &TargetSnapshot,
    coords: &[Coordinate],
    spec: &NetworkSpec,
) -> Result<ParamVector> {
    check_target(target, spec)?;
    let idx = coord_indices(coords);
    let mut ws = Workspace::new();
    let mut grad = vec![0.0; spec.n_params()];
    loss_and_grad(
        params,
        proj,
        spec,
        target.values(),
        &idx,
        None,
        Objective::replication_only(),
        &mut ws,
        &mut grad,
    )?;
    ParamVector::from_vec(spec, grad)
}

fn project_batch(proj: &FixedProjections, images: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for im in images {
        out.extend(proj.project_image(im)?);
    }
    Ok(out)
}

fn check_aux_batch(coords: &[Coordinate], images: &[Vec<f64>], labels: &[u8], spec: &NetworkSpec) -> Result<()> {
    if !spec.is_auxiliary() {
        return Err(QuineError::InvalidArgument("auxiliary loss needs an auxiliary spec".into()));
    }
    if images.len() != labels.len() || coords.len() != images.len() {
        return Err(QuineError::InvalidArgument(format!(
            "batch sizes differ: {} coordinates, {} images, {} labels",
            coords.len(),
            images.len(),
            labels.len()
        )));
    }
    if let Some(im) = images.iter().find(|im| im.len() != spec.image_dim) {
        return Err(QuineError::InvalidArgument(format!(
            "image has {} values, expected {}",
            im.len(),
            spec.image_dim
        )));
    }
    Ok(())
}

/// Auxiliary loss `L_SR + λ L_task` for paired coordinates, images and labels.
#[allow(clippy::too_many_arguments)]
pub fn loss_aux(
    params: &ParamVector,
    proj: &FixedProjections,
    target: &TargetSnapshot,
    coords: &[Coordinate],
    images: &[Vec<f64>],
    labels: &[u8],
    spec: &NetworkSpec,
    lambda: f64,
    temperature: f64,
) -> Result<LossBreakdown> {
    grad_aux(params, proj, target, coords, images, labels, spec, lambda, temperature).map(|(l, _)| l)
}

/// Gradient of [`loss_aux`], returned together with the loss.
#[allow(clippy::too_many_arguments)]
pub fn grad_aux(
    params: &ParamVector,
    proj: &FixedProjections,
    target: &TargetSnapshot,
    coords: &[Coordinate],
    images: &[Vec<f64>],
    labels: &[u8],
    spec: &NetworkSpec,
    lambda: f64,
    temperature: f64,
) -> Result<(LossBreakdown, ParamVector)> {
    check_target(target, spec)?;
    check_aux_batch(coords, images, labels, spec)?;
    let projected = project_batch(proj, images)?;
    let idx = coord_indices(coords);
    let mut ws = Workspace::new();
    let mut grad = vec![0.0; spec.n_params()];
    let objective = Objective {
        lambda,
        temperature,
        replication: true,
    };
    let task = TaskBatch {
        projected_images: &projected,
        labels,
    };
    let loss = loss_and_grad(params, proj, spec, target.values(), &idx, Some(task), objective, &mut ws, &mut grad)?;
    Ok((loss, ParamVector::from_vec(spec, grad)?))
}

/// Loss of one batch and its gradient, accumulated into `grad` (which is
/// overwritten). This is the trainers' hot path.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    params: &ParamVector,
    proj: &FixedProjections,
    spec: &NetworkSpec,
    target: &[f64],
    coords: &[usize],
    task: Option<TaskBatch<'_>>,
    objective: Objective,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    let aux = match task {
        Some(t) => {
            if t.labels.len() != coords.len() {
                return Err(QuineError::InvalidArgument("labels and coordinates differ in length".into()));
            }
            check_temperature(objective.temperature)?;
            AuxBatch::Projected(t.projected_images)
        }
        None => AuxBatch::None,
    };
    forward_batch(params, proj, spec, coords, aux, ws)?;
    grad.fill(0.0);

    let (e, h) = (spec.embed_dim, spec.hidden_dim);
    let layout = spec.layout();
    let b1 = layout.blocks()[0];
    let b2 = layout.blocks()[1];
    let bo = layout.blocks()[2];
    let batch = coords.len();

    // dL/dh2, one row per batch element
    ws.dh.fill(0.0);
    let mut l_sr = 0.0;
    let w_out = params.block(bo);
    for (i, &c) in coords.iter().enumerate() {
        let r = ws.pred[i] - target[c];
        l_sr += r * r;
        if objective.replication {
            let dr = 2.0 * r;
            axpy(dr, &ws.h2[i * h..(i + 1) * h], &mut grad[bo.range()]);
            axpy(dr, w_out, &mut ws.dh[i * h..(i + 1) * h]);
        }
    }

    let mut l_task = 0.0;
    if let (Some(t), Some(ba)) = (task, layout.block(Layer::WAux)) {
        let k = spec.n_classes;
        let scale = objective.lambda / objective.temperature;
        let w_aux = params.block(ba);
        let mut delta = vec![0.0; k];
        for i in 0..batch {
            let label = t.labels[i] as usize;
            if label >= k {
                return Err(QuineError::InvalidArgument(format!("label {label} out of range for {k} classes")));
            }
            let ls = log_softmax_terms(&ws.logits[i * k..(i + 1) * k], objective.temperature);
            l_task += ls.nll(label);
            if scale == 0.0 {
                continue;
            }
            for (j, d) in delta.iter_mut().enumerate() {
                let y = if j == label { 1.0 } else { 0.0 };
                *d = scale * (ls.prob(j) - y);
            }
            let h2 = &ws.h2[i * h..(i + 1) * h];
            let g_aux = &mut grad[ba.range()];
            for (j, &d) in delta.iter().enumerate() {
                axpy(d, h2, &mut g_aux[j * h..(j + 1) * h]);
                axpy(d, &w_aux[j * h..(j + 1) * h], &mut ws.dh[i * h..(i + 1) * h]);
            }
        }
    }

    // through hidden layer 2
    for ((d2, dh), z2) in ws.d2.iter_mut().zip(&ws.dh).zip(&ws.z2) {
        *d2 = dh * selu_derivative(*z2);
    }
    let w2 = params.block(b2);
    {
        let g2 = &mut grad[b2.range()];
        for i in 0..batch {
            let h1 = &ws.h1[i * h..(i + 1) * h];
            for j in 0..h {
                let d = ws.d2[i * h + j];
                if d != 0.0 {
                    axpy(d, h1, &mut g2[j * h..(j + 1) * h]);
                }
            }
        }
    }
    ws.dh.fill(0.0);
    for i in 0..batch {
        let dh1 = &mut ws.dh[i * h..(i + 1) * h];
        for j in 0..h {
            let d = ws.d2[i * h + j];
            if d != 0.0 {
                axpy(d, &w2[j * h..(j + 1) * h], dh1);
            }
        }
    }

    // through hidden layer 1
    for ((d1, dh), z1) in ws.d1.iter_mut().zip(&ws.dh).zip(&ws.z1) {
        *d1 = dh * selu_derivative(*z1);
    }
    let g1 = &mut grad[b1.range()];
    for i in 0..batch {
        let h0 = &ws.h0[i * e..(i + 1) * e];
        for j in 0..h {
            let d = ws.d1[i * h + j];
            if d != 0.0 {
                axpy(d, h0, &mut g1[j * e..(j + 1) * e]);
            }
        }
    }

    let l_total = if objective.replication { l_sr } else { 0.0 } + objective.lambda * l_task;
    Ok(LossBreakdown {
        l_sr,
        l_task,
        l_total,
    })
}

/// Dot product of two gradients; handy for directional derivative checks.
pub fn directional(grad: &ParamVector, direction: &[f64]) -> f64 {
    dot(grad.as_slice(), direction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_projections, forward_vanilla, init_params, Init};
    use crate::numeric::Rng;

    fn toy() -> (NetworkSpec, FixedProjections, ParamVector) {
        let spec = NetworkSpec::vanilla_with(4, 3).with_coord_proj_std(1.0);
        let proj = build_projections(&spec, 5);
        let params = init_params(&spec, Init::he_relu(), &mut Rng::new(6));
        (spec, proj, params)
    }

    #[test]
    fn zero_quine_has_zero_loss_and_gradient() {
        let spec = NetworkSpec::vanilla_with(4, 3);
        let proj = build_projections(&spec, 1);
        let p = ParamVector::zeros(&spec);
        let t = TargetSnapshot::of(&p);
        let coords: Vec<Coordinate> = (0..spec.n_params()).map(Coordinate).collect();
        assert_eq!(loss_sr(&p, &proj, &t, &coords, &spec).unwrap(), 0.0);
        let g = grad_sr(&p, &proj, &t, &coords, &spec).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_matches_hand_summed_squares() {
        let (spec, proj, p) = toy();
        let mut rng = Rng::new(3);
        let target: Vec<f64> = (0..spec.n_params()).map(|_| rng.normal()).collect();
        let t = TargetSnapshot(target.clone());
        let coords = [Coordinate(1), Coordinate(9), Coordinate(20)];
        let mut want = 0.0;
        for c in coords {
            let r = forward_vanilla(&p, &proj, c, &spec).unwrap().prediction - target[c.0];
            want += r * r;
        }
        let got = loss_sr(&p, &proj, &t, &coords, &spec).unwrap();
        assert!((got - want).abs() <= 1e-15 * want.max(1.0));
    }

    #[test]
    fn gradient_zero_at_a_fixpoint() {
        let (spec, proj, p) = toy();
        let coords = [Coordinate(2), Coordinate(5)];
        // target equal to the current predictions
        let mut target = vec![0.0; spec.n_params()];
        for c in coords {
            target[c.0] = forward_vanilla(&p, &proj, c, &spec).unwrap().prediction;
        }
        let g = grad_sr(&p, &proj, &TargetSnapshot(target), &coords, &spec).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_single_gradients() {
        let (spec, proj, p) = toy();
        let t = TargetSnapshot::of(&p);
        let coords: Vec<Coordinate> = [0, 3, 11, 23].into_iter().map(Coordinate).collect();
        let g = grad_sr(&p, &proj, &t, &coords, &spec).unwrap();
        let mut sum = vec![0.0; spec.n_params()];
        for c in &coords {
            let gi = grad_sr(&p, &proj, &t, std::slice::from_ref(c), &spec).unwrap();
            axpy(1.0, gi.as_slice(), &mut sum);
        }
        for (a, b) in g.as_slice().iter().zip(&sum) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let zeros = [0.0; 10];
        for tau in [0.01, 1.0, 7.0] {
            let ce = cross_entropy_temp(&zeros, 3, tau).unwrap();
            assert!((ce - 10f64.ln()).abs() < 1e-12);
        }
        let mut logits = [0.0; 10];
        logits[0] = 1.0;
        let direct = -(1f64.exp() / (1f64.exp() + 9.0)).ln();
        assert!((cross_entropy_temp(&logits, 0, 1.0).unwrap() - direct).abs() < 1e-12);
        assert!(cross_entropy_temp(&logits, 0, 0.01).unwrap() <= 1e-12);
        assert!(cross_entropy_temp(&logits, 0, 0.0).is_err());
        assert!(cross_entropy_temp(&logits, 0, -1.0).is_err());
        let big = cross_entropy_temp(&logits, 1, 0.01).unwrap();
        assert!((big - 100.0).abs() < 1e-9);
    }

    fn aux_toy() -> (NetworkSpec, FixedProjections, ParamVector, Vec<Vec<f64>>, Vec<u8>) {
        let spec = NetworkSpec::auxiliary_with(2, 3, 4, 5, 3).with_coord_proj_std(1.0);
        let proj = build_projections(&spec, 2);
        let p = init_params(&spec, Init::he_relu(), &mut Rng::new(3));
        let mut rng = Rng::new(9);
        let images = (0..3).map(|_| (0..5).map(|_| rng.uniform()).collect()).collect();
        (spec, proj, p, images, vec![0, 2, 1])
    }

    #[test]
    fn aux_with_zero_lambda_reduces_to_replication() {
        let (spec, proj, p, images, labels) = aux_toy();
        let t = TargetSnapshot::of(&p);
        let coords = [Coordinate(0), Coordinate(7), Coordinate(30)];
        let (loss, g) = grad_aux(&p, &proj, &t, &coords, &images, &labels, &spec, 0.0, 0.01).unwrap();
        assert_eq!(loss.l_total, loss.l_sr);
        let w_aux = spec.layout().block(Layer::WAux).unwrap();
        assert!(g.block(w_aux).iter().all(|&v| v == 0.0));
        let w_out = spec.layout().block(Layer::WOut).unwrap();
        assert!(g.block(w_out).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_aux_quine_loss_is_lambda_b_ln10() {
        let spec = NetworkSpec::auxiliary_with(2, 3, 4, 5, 10);
        let proj = build_projections(&spec, 2);
        let p = ParamVector::zeros(&spec);
        let t = TargetSnapshot::of(&p);
        let images = vec![vec![0.3; 5]; 4];
        let labels = [0u8, 5, 9, 2];
        let coords = [Coordinate(0), Coordinate(1), Coordinate(2), Coordinate(3)];
        let loss = loss_aux(&p, &proj, &t, &coords, &images, &labels, &spec, 0.01, 0.01).unwrap();
        assert_eq!(loss.l_sr, 0.0);
        assert!((loss.l_total - 0.01 * 4.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_batch_size_mismatch_is_rejected() {
        let (spec, proj, p, images, _) = aux_toy();
        let t = TargetSnapshot::of(&p);
        let coords = [Coordinate(0), Coordinate(7), Coordinate(30)];
        assert!(loss_aux(&p, &proj, &t, &coords, &images, &[0, 1], &spec, 0.01, 0.01).is_err());
    }
}

//! Quine quality measures.
//!
//! * full self-replicating loss: squared self-prediction error summed over
//!   every coordinate, with the current parameters as their own target;
//! * weight prediction margin: the RMS prediction error `sqrt(L / n)`;
//! * self-replicating quotient: `ln(n / L)`;
//! * classification accuracy of the auxiliary head.

use rayon::prelude::*;

use crate::error::{QuineError, Result};
use crate::grad::cross_entropy_temp;
use crate::net::{argmax, forward_batch, AuxBatch, FixedProjections, NetworkSpec, ParamVector, Workspace};

/// Coordinates per evaluation chunk.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub l_sr: f64,
    pub margin: f64,
    pub srq: f64,
    pub l_task: Option<f64>,
    pub accuracy: Option<f64>,
    pub seconds: Option<f64>,
    /// Accepted hill-climbing proposals in the epoch.
    pub accepted: Option<u64>,
}

impl MetricsRecord {
    pub fn from_loss(epoch: u64, l_sr: f64, n_params: usize) -> Self {
        Self {
            epoch,
            l_sr,
            margin: margin(l_sr, n_params),
            srq: srq(l_sr, n_params),
            ..Self::default()
        }
    }
}

/// RMS weight prediction error.
pub fn margin(l_sr: f64, n: usize) -> f64 {
    (l_sr / n as f64).sqrt()
}

/// Self-replicating quotient `ln(n / l_sr)`; `+inf` for a perfect replicator.
pub fn srq(l_sr: f64, n: usize) -> f64 {
    if l_sr == 0.0 {
        f64::INFINITY
    } else {
        (n as f64 / l_sr).ln()
    }
}

/// Images already passed through the fixed image projection, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedImages {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<u8>,
}

impl ProjectedImages {
    /// Projects `images` (`N x image_dim`, row-major).
    pub fn new(proj: &FixedProjections, images: &[f64], labels: &[u8]) -> Result<Self> {
        let m = proj
            .image_proj()
            .ok_or_else(|| QuineError::InvalidArgument("vanilla quines have no image projection".into()))?;
        let image_dim = m.cols();
        if images.len() != labels.len() * image_dim {
            return Err(QuineError::Consistency(format!(
                "{} pixel values for {} labels of {image_dim} pixels",
                images.len(),
                labels.len()
            )));
        }
        let data: Vec<f64> = images
            .par_chunks(image_dim)
            .flat_map_iter(|im| m.matvec(im).expect("width checked above"))
            .collect();
        Ok(Self {
            dim: m.rows(),
            data,
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Auxiliary input used when evaluating weight predictions.
#[derive(Debug, Clone, Copy)]
pub enum AuxInput<'a> {
    /// Vanilla quine.
    None,
    /// Auxiliary quine fed an all-zero image.
    Zero,
    /// Coordinate `c` is paired with image `c mod N`.
    Cycled(&'a ProjectedImages),
}

impl<'a> AuxInput<'a> {
    pub fn for_spec(spec: &NetworkSpec, images: Option<&'a ProjectedImages>) -> Self {
        match (spec.is_auxiliary(), images) {
            (false, _) => AuxInput::None,
            (true, Some(im)) => AuxInput::Cycled(im),
            (true, None) => AuxInput::Zero,
        }
    }

    fn fill(&self, spec: &NetworkSpec, coords: std::ops::Range<usize>, buf: &mut Vec<f64>) {
        buf.clear();
        match self {
            AuxInput::None => {}
            AuxInput::Zero => buf.resize(coords.len() * spec.image_embed_dim, 0.0),
            AuxInput::Cycled(images) => {
                for c in coords {
                    buf.extend_from_slice(images.row(c % images.len()));
                }
            }
        }
    }
}

/// Weight predictions for every coordinate, in coordinate order.
pub fn predict_all(
    params: &ParamVector,
    proj: &FixedProjections,
    spec: &NetworkSpec,
    aux: AuxInput<'_>,
) -> Result<Vec<f64>> {
    if let AuxInput::Cycled(images) = aux {
        if images.is_empty() {
            return Err(QuineError::InvalidArgument("empty image set".into()));
        }
    }
    let n = spec.n_params();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let chunks: Result<Vec<Vec<f64>>> = starts
        .par_iter()
        .map_init(
            || (Workspace::new(), Vec::new()),
            |(ws, buf), &start| {
                let range = start..(start + EVAL_CHUNK).min(n);
                let coords: Vec<usize> = range.clone().collect();
                aux.fill(spec, range, buf);
                let batch = if spec.is_auxiliary() {
                    AuxBatch::Projected(buf)
                } else {
                    AuxBatch::None
                };
                forward_batch(params, proj, spec, &coords, batch, ws)?;
                Ok(ws.predictions().to_vec())
            },
        )
        .collect();
    Ok(chunks?.concat())
}

/// Sum of squared self-prediction errors, accumulated in coordinate order.
pub fn loss_against(predictions: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (p, t) in predictions.iter().zip(target) {
        let r = p - t;
        acc += r * r;
    }
    acc
}

/// Full self-replicating loss of a vanilla quine (auxiliary quines are fed a
/// zero image; see [`full_loss_with`]).
pub fn full_loss(params: &ParamVector, proj: &FixedProjections, spec: &NetworkSpec) -> Result<f64> {
    full_loss_with(params, proj, spec, AuxInput::for_spec(spec, None))
}

pub fn full_loss_with(
    params: &ParamVector,
    proj: &FixedProjections,
    spec: &NetworkSpec,
    aux: AuxInput<'_>,
) -> Result<f64> {
    let pred = predict_all(params, proj, spec, aux)?;
    Ok(loss_against(&pred, params.as_slice()))
}

/// Task metrics of the auxiliary head over a labelled set. Image `i` is paired
/// with coordinate `i mod n_params`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    /// Summed cross-entropy at the given temperature.
    pub l_task: f64,
    pub accuracy: f64,
}

pub fn task_metrics(
    params: &ParamVector,
    proj: &FixedProjections,
    spec: &NetworkSpec,
    images: &ProjectedImages,
    temperature: f64,
) -> Result<TaskMetrics> {
    if !spec.is_auxiliary() {
        return Err(QuineError::InvalidArgument("task metrics need an auxiliary spec".into()));
    }
    if images.is_empty() {
        return Err(QuineError::InvalidArgument("empty test set".into()));
    }
    let n = spec.n_params();
    let k = spec.n_classes;
    let total = images.len();
    let starts: Vec<usize> = (0..total).step_by(EVAL_CHUNK).collect();
    let per_chunk: Result<Vec<Vec<(f64, bool)>>> = starts
        .par_iter()
        .map_init(
            || (Workspace::new(), Vec::new()),
            |(ws, buf), &start| {
                let range = start..(start + EVAL_CHUNK).min(total);
                let coords: Vec<usize> = range.clone().map(|i| i % n).collect();
                buf.clear();
                for i in range.clone() {
                    buf.extend_from_slice(images.row(i));
                }
                forward_batch(params, proj, spec, &coords, AuxBatch::Projected(buf), ws)?;
                let logits = ws.logits(k);
                range
                    .enumerate()
                    .map(|(j, i)| {
                        let lg = &logits[j * k..(j + 1) * k];
                        let label = images.label(i) as usize;
                        Ok((cross_entropy_temp(lg, label, temperature)?, argmax(lg) == label))
                    })
                    .collect()
            },
        )
        .collect();
    let mut l_task = 0.0;
    let mut correct = 0usize;
    for (ce, ok) in per_chunk?.into_iter().flatten() {
        l_task += ce;
        correct += ok as usize;
    }
    Ok(TaskMetrics {
        l_task,
        accuracy: correct as f64 / total as f64,
    })
}

/// Fraction of images whose highest-scoring class equals the label.
pub fn accuracy(
    params: &ParamVector,
    proj: &FixedProjections,
    spec: &NetworkSpec,
    images: &ProjectedImages,
) -> Result<f64> {
    task_metrics(params, proj, spec, images, 1.0).map(|m| m.accuracy)
}

//! Quantitative equivariance diagnostics.
//!
//! Three quantities are measured for a layer `f` and group element `j`:
//!
//! * the equivariance error `|| f(act_j(y)) - act_j(f(y)) ||`,
//! * the identity check: for a relaxed layer that error must equal the
//!   response of the input to the bias discrepancy `B - act_j(B)`,
//! * the projection error: the output difference between the relaxed and the
//!   strict bank on the same input, which by linearity equals the bias-only
//!   response.
//!
//! Norms are plain L2 over all elements. Exactness is only claimed where
//! feature-map rotation is grid-exact (quarter-turn groups); on `C_6`/`C_8`
//! residuals are reported and attributable to bilinear interpolation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::filters::{add_gbiases, GBiases};
use crate::group::rotate_spatial;
use crate::layers::{conv_apply, ConvKind, ConvLayer};
use crate::model::Model;
use crate::tensor::Tensor;

/// Absolute and input-normalized equivariance error of one layer at one
/// group element.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ElementError {
    pub j: usize,
    pub absolute: f64,
    pub normalized: f64,
}

/// `|| f(act_j(y)) - act_j(f(y)) ||_2`, and the same normalized by
/// `|| f(y) ||_2` (zero when the denominator vanishes).
pub fn equivariance_error(layer: &ConvLayer, y: &Tensor, j: usize) -> Result<(f64, f64)> {
    let base = layer.forward(y)?;
    let lhs = layer.forward(&layer.act_input(y, j)?)?;
    let rhs = layer.act_output(&base, j)?;
    let absolute = lhs.sub(&rhs)?.l2_norm();
    let denom = base.l2_norm();
    let normalized = if denom == 0.0 { 0.0 } else { absolute / denom };
    Ok((absolute, normalized))
}

fn bank_shape(layer: &ConvLayer) -> Vec<usize> {
    let n = layer.group.order();
    let cfg = &layer.cfg;
    match cfg.kind {
        ConvKind::Lift => vec![cfg.c_out, n, cfg.c_in, cfg.k, cfg.k],
        ConvKind::Group => vec![cfg.c_out, n, cfg.c_in, n, cfg.k, cfg.k],
        ConvKind::Depthwise => vec![cfg.c_out, n, 1, n, cfg.k, cfg.k],
    }
}

fn bias_only_bank(layer: &ConvLayer, b: &GBiases) -> Result<Tensor> {
    let mut bank = Tensor::zeros(&bank_shape(layer));
    add_gbiases(&mut bank, b)?;
    Ok(bank)
}

/// The right-hand side of the relaxed-equivariance identity: the rotated
/// input convolved with the bias discrepancy `B - act_j(B)`, summed over the
/// input channel (and input group) axes.
///
/// For a relaxed layer this equals `f(act_j(y)) - act_j(f(y))` exactly on
/// quarter-turn groups. A layer without biases gets a zero response.
pub fn bias_discrepancy_response(layer: &ConvLayer, y: &Tensor, j: usize) -> Result<Tensor> {
    let g = &layer.group;
    g.check_element(j)?;
    let acted_input = layer.act_input(y, j)?;
    let b = match &layer.bias {
        Some(b) => b.clone(),
        None => {
            // no biases: the discrepancy bank is zero, as is the response
            let out = layer.forward(&acted_input)?;
            return Ok(Tensor::zeros(out.shape()));
        }
    };
    let diff = b.tensor().sub(b.acted(g, j)?.tensor())?;
    let d_bank = bias_only_bank(layer, &GBiases::from_tensor(diff)?)?;
    conv_apply(&acted_input, &d_bank, &layer.cfg, g)
}

/// Measured left-hand side of the identity: `f(act_j(y)) - act_j(f(y))`.
pub fn equivariance_defect(layer: &ConvLayer, y: &Tensor, j: usize) -> Result<Tensor> {
    let lhs = layer.forward(&layer.act_input(y, j)?)?;
    let rhs = layer.act_output(&layer.forward(y)?, j)?;
    lhs.sub(&rhs)
}

/// Projection error of a relaxed layer against its strict counterpart on one
/// input, computed two ways.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProjectionError {
    /// `|| conv(y, relaxed) - conv(y, strict) ||_2`.
    pub value: f64,
    /// Same number through the bias-only bank; must agree with `value` up to
    /// rounding.
    pub bias_only: f64,
}

pub fn projection_error(
    layer: &ConvLayer,
    y: &Tensor,
    strict_bank: &Tensor,
    relaxed_bank: &Tensor,
) -> Result<ProjectionError> {
    if strict_bank.shape() != relaxed_bank.shape() {
        return Err(Error::DimensionMismatch {
            op: "projection_error",
            lhs: strict_bank.shape().to_vec(),
            rhs: relaxed_bank.shape().to_vec(),
        });
    }
    let g = &layer.group;
    let out_relaxed = conv_apply(y, relaxed_bank, &layer.cfg, g)?;
    let out_strict = conv_apply(y, strict_bank, &layer.cfg, g)?;
    let value = out_relaxed.sub(&out_strict)?.l2_norm();
    let diff_bank = relaxed_bank.sub(strict_bank)?;
    let bias_only = conv_apply(y, &diff_bank, &layer.cfg, g)?.l2_norm();
    Ok(ProjectionError { value, bias_only })
}

/// Convenience: projection error of a layer from its own banks.
pub fn layer_projection_error(layer: &ConvLayer, y: &Tensor) -> Result<ProjectionError> {
    let strict = layer.strict_bank()?;
    let relaxed = layer.bank()?;
    projection_error(layer, y, &strict, &relaxed)
}

/// End-to-end relaxation bound estimate: the largest L2 logits difference
/// between a rotated and an unrotated input, over every sample of the batch
/// and every nontrivial group element.
///
/// The model head is rotation invariant, so the output representation is
/// trivial and the defect is measured directly on the logits. For a strict
/// model this is rounding-level provided every spatial extent seen by a
/// strided layer is odd.
pub fn epsilon_estimate(model: &mut Model, batch: &Tensor, exec: Exec) -> Result<f64> {
    if batch.rank() != 4 || batch.shape()[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = model.group.order();
    let g = model.group;
    let base = model.infer(batch, exec)?;
    let bsz = batch.shape()[0];
    let classes = base.shape()[1];
    let mut worst = 0.0f64;
    for j in 1..n {
        let rotated = rotate_spatial(batch, &g, j)?;
        let logits = model.infer(&rotated, exec)?;
        for s in 0..bsz {
            let mut acc = 0.0;
            for c in 0..classes {
                let d = logits.data()[s * classes + c] - base.data()[s * classes + c];
                acc += d * d;
            }
            worst = worst.max(acc.sqrt());
        }
    }
    Ok(worst)
}

/// Full diagnostics for one layer on one probe input.
#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub per_element: Vec<ElementError>,
    /// Max over `j` of the absolute errors.
    pub epsilon: f64,
    /// Max over `j` of the max-abs difference between the measured defect
    /// and the bias-discrepancy response.
    pub identity_residual: f64,
    pub projection_error: f64,
    pub projection_cross_check: f64,
}

pub fn layer_report(name: &str, layer: &ConvLayer, y: &Tensor) -> Result<LayerReport> {
    let n = layer.group.order();
    let mut per_element = Vec::with_capacity(n);
    let mut epsilon = 0.0f64;
    let mut identity_residual = 0.0f64;
    for j in 0..n {
        let (absolute, normalized) = equivariance_error(layer, y, j)?;
        epsilon = epsilon.max(absolute);
        let defect = equivariance_defect(layer, y, j)?;
        let predicted = bias_discrepancy_response(layer, y, j)?;
        identity_residual = identity_residual.max(defect.sub(&predicted)?.max_abs());
        per_element.push(ElementError {
            j,
            absolute,
            normalized,
        });
    }
    let pe = layer_projection_error(layer, y)?;
    Ok(LayerReport {
        layer: name.to_string(),
        per_element,
        epsilon,
        identity_residual,
        projection_error: pe.value,
        projection_cross_check: (pe.value - pe.bias_only).abs(),
    })
}

/// CSV rendering of a set of layer reports, one row per (layer, j).
pub fn reports_to_csv(reports: &[LayerReport]) -> String {
    let mut out = String::from(
        "layer,j,absolute,normalized,epsilon,identity_residual,projection_error\n",
    );
    for r in reports {
        for e in &r.per_element {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.layer,
                e.j,
                e.absolute,
                e.normalized,
                r.epsilon,
                r.identity_residual,
                r.projection_error
            ));
        }
    }
    out
}

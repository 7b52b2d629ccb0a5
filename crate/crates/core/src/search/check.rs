//! Finite-difference check of the architecture gradient.
//!
//! The forward value of a gate is piecewise constant in α, so plain
//! differences vanish. The check holds each bridge `m = h - p` at its value
//! from the unperturbed point and differentiates `L(m + softmax(α))`, which
//! agrees with the straight-through gradient wherever the top-k set is
//! locally constant.

use crate::error::Result;
use crate::tensor::{Element, Tensor};

use super::alpha::AlphaParams;
use super::gate::{GateMode, GateState};
use super::searcher::Searcher;

/// Perturbation of one α entry.
pub const ALPHA_FD_STEP: f64 = 1e-6;
/// Layers whose k-th and (k+1)-th probabilities are closer than this are skipped.
pub const GATE_GAP_MIN: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlphaGradReport {
    /// Norm-wise relative error per checked layer.
    pub relative_errors: Vec<f64>,
    pub skipped_layers: usize,
    pub skipped_entries: usize,
}

impl AlphaGradReport {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn check_alpha_gradient<T: Element>(
    searcher: &Searcher<'_, T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<AlphaGradReport> {
    let base = searcher.alpha.clone();
    let k = searcher.cfg.k;
    let pass = searcher.alpha_pass(images, labels)?;
    let bridges: Vec<Vec<f64>> = pass.gates.iter().map(|g| g.m.clone()).collect();
    let active: Vec<Vec<usize>> = pass
        .gates
        .iter()
        .map(|g| match searcher.cfg.gate_mode {
            GateMode::Sparse => g.selected(),
            GateMode::Masked => (0..g.p.len()).collect(),
        })
        .collect();
    let mut report = AlphaGradReport::default();
    for (i, gate) in pass.gates.iter().enumerate() {
        if gate.threshold_gap() < GATE_GAP_MIN {
            report.skipped_layers += 1;
            continue;
        }
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for j in 0..base.layer(i).len() {
            let shifted = |d: f64| {
                let mut a = base.clone();
                a.layer_mut(i)[j] += d;
                a
            };
            let (plus, minus) = (shifted(ALPHA_FD_STEP), shifted(-ALPHA_FD_STEP));
            let stable = |a: &AlphaParams| -> Result<bool> { Ok(GateState::new(a.layer(i), k)?.h == gate.h) };
            if !stable(&plus)? || !stable(&minus)? {
                report.skipped_entries += 1;
                continue;
            }
            let lp = searcher.frozen_gate_loss(&plus, &bridges, &active, images, labels)?;
            let lm = searcher.frozen_gate_loss(&minus, &bridges, &active, images, labels)?;
            numeric.push((lp - lm) / (2.0 * ALPHA_FD_STEP));
            analytic.push(pass.grads[i][j]);
        }
        report.relative_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(report)
}

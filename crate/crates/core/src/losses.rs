//! Training objectives and dynamic task weighting.
//!
//! Losses are evaluated in f64 on prediction arrays of any dimensionality.
//! Each `*_grad` variant returns the loss together with its gradient with
//! respect to the prediction.

use ndarray::{Array, ArrayView, ArrayView3, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::codec::{CH_BACKGROUND, CH_BIFURCATION, CH_CONFIDENCE, CH_CROSSING};
use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;

fn same_shape<D: Dimension>(a: &ArrayView<f64, D>, b: &ArrayView<f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Geometry(format!(
            "prediction {:?} vs target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1-ε]`.
pub fn bce_loss<D: Dimension>(pred: ArrayView<f64, D>, target: ArrayView<f64, D>) -> Result<f64> {
    Ok(bce_loss_grad(pred, target)?.0)
}

pub fn bce_loss_grad<D: Dimension>(
    pred: ArrayView<f64, D>,
    target: ArrayView<f64, D>,
) -> Result<(f64, Array<f64, D>)> {
    same_shape(&pred, &target)?;
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let grad = Zip::from(&pred).and(&target).map_collect(|&p, &t| {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        // The clamp is flat outside [ε, 1-ε].
        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
            0.0
        } else {
            (-t / pc + (1.0 - t) / (1.0 - pc)) / n
        }
    });
    Ok((total / n, grad))
}

pub fn mse_loss<D: Dimension>(pred: ArrayView<f64, D>, target: ArrayView<f64, D>) -> Result<f64> {
    Ok(mse_loss_grad(pred, target)?.0)
}

pub fn mse_loss_grad<D: Dimension>(
    pred: ArrayView<f64, D>,
    target: ArrayView<f64, D>,
) -> Result<(f64, Array<f64, D>)> {
    same_shape(&pred, &target)?;
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let grad = Zip::from(&pred).and(&target).map_collect(|&p, &t| {
        total += (p - t) * (p - t);
        2.0 * (p - t) / n
    });
    Ok((total / n, grad))
}

/// Which cells contribute to the class term of the grid loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassTerm {
    /// Every cell, as the loss is written.
    #[default]
    AllCells,
    /// Only cells that contain a junction (YOLO convention).
    OccupiedCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridLossParams {
    /// Weight of the confidence error in occupied cells.
    pub lambda_a: f64,
    /// Weight of the confidence error in empty cells.
    pub lambda_b: f64,
    pub class_term: ClassTerm,
}

impl Default for GridLossParams {
    fn default() -> Self {
        Self {
            lambda_a: 5.0,
            lambda_b: 1.0,
            class_term: ClassTerm::AllCells,
        }
    }
}

/// Grid loss on `[rows, cols, 4]` tensors: weighted squared confidence
/// error (occupancy taken from the target) plus squared class error. Sums
/// over cells, not means.
pub fn grid_loss(pred: ArrayView3<f64>, target: ArrayView3<f64>, p: &GridLossParams) -> Result<f64> {
    Ok(grid_loss_grad(pred, target, p)?.0)
}

pub fn grid_loss_grad(
    pred: ArrayView3<f64>,
    target: ArrayView3<f64>,
    p: &GridLossParams,
) -> Result<(f64, ndarray::Array3<f64>)> {
    same_shape(&pred, &target)?;
    if pred.dim().2 != 4 {
        return Err(Error::Geometry(format!("grid needs 4 channels, got {}", pred.dim().2)));
    }
    if p.lambda_a < 0.0 || p.lambda_b < 0.0 {
        return Err(Error::Range("grid loss weights must be non-negative".into()));
    }
    let mut grad = ndarray::Array3::<f64>::zeros(pred.raw_dim());
    let mut total = 0.0;
    for ((pc, tc), mut gc) in pred
        .lanes(ndarray::Axis(2))
        .into_iter()
        .zip(target.lanes(ndarray::Axis(2)))
        .zip(grad.lanes_mut(ndarray::Axis(2)))
    {
        let occupied = tc[CH_CONFIDENCE] > 0.5;
        let lambda = if occupied { p.lambda_a } else { p.lambda_b };
        let d = tc[CH_CONFIDENCE] - pc[CH_CONFIDENCE];
        total += lambda * d * d;
        gc[CH_CONFIDENCE] = -2.0 * lambda * d;
        if occupied || p.class_term == ClassTerm::AllCells {
            for ch in [CH_BIFURCATION, CH_CROSSING, CH_BACKGROUND] {
                let d = tc[ch] - pc[ch];
                total += d * d;
                gc[ch] = -2.0 * d;
            }
        }
    }
    Ok((total, grad))
}

/// Per-task losses of one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskLossVector {
    pub rv: f64,
    pub faz: f64,
    pub rvj_heatmap: f64,
    pub rvj_grid: f64,
}

impl TaskLossVector {
    pub const TASKS: usize = 3;

    /// Task-level losses `[rv, faz, rvj]`; the junction task sums its two
    /// branch losses.
    pub fn task_losses(&self) -> [f64; 3] {
        [self.rv, self.faz, self.rvj_heatmap + self.rvj_grid]
    }

    pub fn is_finite(&self) -> bool {
        [self.rv, self.faz, self.rvj_heatmap, self.rvj_grid]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rv: self.rv * k,
            faz: self.faz * k,
            rvj_heatmap: self.rvj_heatmap * k,
            rvj_grid: self.rvj_grid * k,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            rv: self.rv + o.rv,
            faz: self.faz + o.faz,
            rvj_heatmap: self.rvj_heatmap + o.rvj_heatmap,
            rvj_grid: self.rvj_grid + o.rvj_grid,
        }
    }
}

/// Dynamic Weight Average: task weights from the ratio of each task's two
/// most recent epoch losses, passed through a tempered softmax scaled to sum
/// to the number of tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwaState {
    pub temperature: f64,
    /// Mean task losses of the last two completed epochs, oldest first.
    pub history: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DwaState {
    pub fn new(n_tasks: usize, temperature: f64) -> Self {
        Self {
            temperature,
            history: Vec::new(),
            weights: vec![1.0; n_tasks],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.weights.len()
    }

    /// Records one epoch's mean task losses and recomputes the weights for
    /// the next epoch. A zero loss in the history makes the descent ratio
    /// undefined; weights fall back to uniform and the error is returned.
    pub fn update(&mut self, epoch_losses: &[f64]) -> Result<()> {
        let n = self.n_tasks();
        if epoch_losses.len() != n {
            return Err(Error::Geometry(format!(
                "expected {n} task losses, got {}",
                epoch_losses.len()
            )));
        }
        if let Some(v) = epoch_losses.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!("task loss {v} is not a finite non-negative value")));
        }
        self.history.push(epoch_losses.to_vec());
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        if self.history.len() < 2 {
            self.weights = vec![1.0; n];
            return Ok(());
        }
        let (prev, last) = (&self.history[0], &self.history[1]);
        if let Some(task) = prev.iter().position(|&v| v == 0.0) {
            self.weights = vec![1.0; n];
            return Err(Error::DegenerateHistory { task });
        }
        let ratios: Vec<f64> = last.iter().zip(prev).map(|(l, p)| l / p).collect();
        self.weights = dwa_weights(&ratios, self.temperature);
        Ok(())
    }
}

/// `λ_n = N · softmax(w / T)_n`.
pub fn dwa_weights(ratios: &[f64], temperature: f64) -> Vec<f64> {
    let n = ratios.len() as f64;
    let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = ratios.iter().map(|r| ((r - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| n * v / z).collect()
}

/// `Σ λ_n L_n` over the three tasks.
pub fn total_loss(v: &TaskLossVector, weights: &[f64]) -> Result<f64> {
    if !v.is_finite() || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss input {v:?} / {weights:?}")));
    }
    if weights.len() != TaskLossVector::TASKS {
        return Err(Error::Geometry(format!("expected 3 task weights, got {}", weights.len())));
    }
    Ok(v.task_losses().iter().zip(weights).map(|(l, w)| l * w).sum())
}

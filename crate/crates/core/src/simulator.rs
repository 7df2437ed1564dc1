//! Inference front end over a frozen checkpoint.

use crate::checkpoint::Checkpoint;
use crate::dataset::WindowData;
use crate::dynamics::{rollout, simulate, Trajectory};
use crate::emission::{StepDistribution, VarDistribution};
use crate::encoder::{encode_context, BeliefState, RawDrivers};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::series::{TypedSeries, Window};
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct Simulator {
    pub checkpoint: Checkpoint,
    pub model: Model,
    /// Windows per inference batch.
    pub batch_size: usize,
}

impl Simulator {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let model = checkpoint.model()?;
        Ok(Simulator {
            checkpoint,
            model,
            batch_size: 16,
        })
    }

    /// Checks that `series` was recorded under the checkpoint's schema.
    pub fn check_series(&self, series: &TypedSeries) -> Result<()> {
        if series.schema().hash() != self.checkpoint.schema.hash() {
            return Err(Error::Schema("series schema differs from the checkpoint schema".into()));
        }
        Ok(())
    }

    pub fn prepare(&self, series: &TypedSeries, window: &Window) -> Result<WindowData> {
        self.check_series(series)?;
        if window.context_len != self.checkpoint.config.context_len {
            return Err(Error::Range(format!(
                "window context {} differs from the model's {}",
                window.context_len, self.checkpoint.config.context_len
            )));
        }
        WindowData::new(series, window, &self.checkpoint.stats, &self.checkpoint.config)
    }

    /// Replaces a window's drivers with a plan.
    pub fn with_plan(&self, data: &WindowData, plan: RawDrivers) -> Result<WindowData> {
        data.with_drivers(plan, &self.checkpoint.stats, &self.model.roles, &self.checkpoint.config)
    }

    pub fn belief(&self, data: &WindowData) -> Result<BeliefState> {
        encode_context(&self.model, &self.checkpoint.params, &data.tokens)
    }

    pub fn rollout_from_belief(&self, belief: &BeliefState, data: &WindowData) -> Result<Trajectory> {
        rollout(&self.model, &self.checkpoint.params, belief, &data.drivers)
    }

    /// Rollouts for many windows; results are independent of batching.
    pub fn run(&self, items: &[&WindowData]) -> Result<Vec<Trajectory>> {
        let mut out = Vec::with_capacity(items.len());
        // group by horizon so batches are rectangular
        let mut start = 0;
        while start < items.len() {
            let h = items[start].drivers.steps;
            let mut end = start;
            while end < items.len() && end - start < self.batch_size && items[end].drivers.steps == h {
                end += 1;
            }
            let chunk = &items[start..end];
            let ctx: Vec<_> = chunk.iter().map(|w| &w.tokens).collect();
            let drv: Vec<_> = chunk.iter().map(|w| &w.drivers).collect();
            out.extend(simulate(&self.model, &self.checkpoint.params, &ctx, &drv)?);
            start = end;
        }
        Ok(out)
    }

    /// Distribution of every state variable at `step`, in transformed units.
    pub fn step_distribution(&self, traj: &Trajectory, step: usize) -> StepDistribution {
        let stats = &self.checkpoint.stats;
        StepDistribution {
            vars: self
                .model
                .roles
                .state
                .iter()
                .enumerate()
                .map(|(k, &j)| {
                    let v = &stats.vars[j];
                    VarDistribution {
                        mu: v.mean + v.sd * traj.mu.at(step, k),
                        sigma: v.sd * traj.sigma.at(step, k),
                        nu: traj.nu[k],
                        pi: self.model.roles.hurdle.contains(&k).then(|| traj.pi.at(step, k)),
                        log_space: v.log_space,
                    }
                })
                .collect(),
        }
    }

    /// Point prediction in original units (`H×S`).
    pub fn point_original(&self, traj: &Trajectory) -> Mat {
        let pred = point_prediction(&self.model, &self.checkpoint.stats, traj);
        let mut out = Mat::zeros(pred.rows, pred.cols);
        for t in 0..pred.rows {
            for (k, &j) in self.model.roles.state.iter().enumerate() {
                out.set(t, k, self.checkpoint.stats.destandardize(j, pred.at(t, k)));
            }
        }
        out
    }
}

/// Standardized point prediction: the mean of the continuous part, mixed with
/// the standardized zero for hurdle variables.
pub fn point_prediction(model: &Model, stats: &crate::series::StandardizationStats, traj: &Trajectory) -> Mat {
    let mut out = traj.mu.clone();
    for &k in &model.roles.hurdle {
        let zero = stats.standardize(model.roles.state[k], 0.0);
        for t in 0..traj.steps {
            let pi = traj.pi.at(t, k);
            out.set(t, k, pi * zero + (1.0 - pi) * traj.mu.at(t, k));
        }
    }
    out
}

//! Per-window model inputs: context tokens, standardized drivers and targets.

use crate::emission::ZERO_THRESHOLD;
use crate::encoder::{tokenize, DriverFrame, RawDrivers, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Roles};
use crate::series::{StandardizationStats, TypedSeries, Window};
use crate::tensor::Mat;

/// Observed rollout states, standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFrame {
    pub steps: usize,
    /// `H×S` standardized values (0 where missing).
    pub y: Mat,
    /// `H×S` 1 where observed.
    pub mask: Mat,
    /// `H×S` original units (0 where missing).
    pub raw: Mat,
}

impl TargetFrame {
    pub fn new(series: &TypedSeries, window: &Window, stats: &StandardizationStats, roles: &Roles) -> Result<Self> {
        let range = window.rollout_range();
        if range.end > series.len() {
            return Err(Error::Range(format!("rollout rows {range:?} beyond series end {}", series.len())));
        }
        let (h, s) = (range.len(), roles.n_state());
        let mut y = Mat::zeros(h, s);
        let mut mask = Mat::zeros(h, s);
        let mut raw = Mat::zeros(h, s);
        for (t, row) in range.enumerate() {
            for (k, &j) in roles.state.iter().enumerate() {
                if let Some(x) = series.get(row, j) {
                    y.set(t, k, stats.standardize(j, x));
                    mask.set(t, k, 1.0);
                    raw.set(t, k, x);
                }
            }
        }
        Ok(TargetFrame { steps: h, y, mask, raw })
    }

    pub fn is_zero(&self, t: usize, k: usize) -> bool {
        self.raw.at(t, k).abs() < ZERO_THRESHOLD
    }
}

/// Everything the model needs for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowData {
    pub window: Window,
    pub tokens: TokenSequence,
    pub raw_drivers: RawDrivers,
    pub drivers: DriverFrame,
    pub targets: TargetFrame,
    /// Last observed context value per schema variable (original units).
    pub last_observed: Vec<Option<f64>>,
}

impl WindowData {
    pub fn new(series: &TypedSeries, window: &Window, stats: &StandardizationStats, config: &ModelConfig) -> Result<Self> {
        let roles = Roles::from_schema(series.schema())?;
        let tokens = tokenize(series, window, stats, config)?;
        let raw_drivers = RawDrivers::observed(series, window)?;
        let drivers = DriverFrame::new(&raw_drivers, stats, &roles, config)?;
        let targets = TargetFrame::new(series, window, stats, &roles)?;
        let ctx = window.context_range();
        let last_observed = (0..series.n_vars())
            .map(|j| ctx.clone().rev().find_map(|row| series.get(row, j)))
            .collect();
        Ok(WindowData {
            window: *window,
            tokens,
            raw_drivers,
            drivers,
            targets,
            last_observed,
        })
    }

    /// Same window with replacement drivers (a what-if plan).
    pub fn with_drivers(&self, raw: RawDrivers, stats: &StandardizationStats, roles: &Roles, config: &ModelConfig) -> Result<Self> {
        if raw.timestamps != self.raw_drivers.timestamps {
            return Err(Error::Plan("plan grid differs from the window's rollout grid".into()));
        }
        let drivers = DriverFrame::new(&raw, stats, roles, config)?;
        Ok(WindowData {
            raw_drivers: raw,
            drivers,
            ..self.clone()
        })
    }
}

//! Adam with decoupled weight decay, learning-rate schedules, and gradient
//! norm monitoring.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupGrads, GroupSettings, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this. Off by default.
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) {
            return Err(Error::config("optim.beta1", "must lie in (0, 1)"));
        }
        if !open_unit(self.beta2) {
            return Err(Error::config("optim.beta2", "must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("optim.grad_clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment buffers, zero-initialized on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<GroupGrads>,
    v: Vec<GroupGrads>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure_shapes(&mut self, groups: &[ParamGroup<'_>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = groups
                .iter()
                .map(|g| g.params.iter().map(|p| vec![0.0; p.len()]).collect())
                .collect();
            self.v = self.m.clone();
            return Ok(());
        }
        let matches =
            self.m.len() == groups.len()
                && self.m.iter().zip(groups).all(|(m, g)| {
                    m.len() == g.params.len() && m.iter().zip(&g.params).all(|(a, b)| a.len() == b.len())
                });
        if matches {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("optimizer state does not match parameters".into()))
        }
    }
}

fn check_grads(groups: &[ParamGroup<'_>], grads: &[GroupGrads]) -> Result<()> {
    let ok = grads.len() == groups.len()
        && grads
            .iter()
            .zip(groups)
            .all(|(gg, g)| gg.len() == g.params.len() && gg.iter().zip(&g.params).all(|(a, b)| a.len() == b.len()));
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch("gradients do not match parameters".into()))
    }
}

/// One Adam step with bias correction and decoupled decay:
/// `θ ← θ − lr·mult·(m̂/(√v̂ + ε) + wd·wd_mult·θ)`. Frozen groups are skipped
/// entirely, including their moment buffers.
pub fn adam_step(
    state: &mut AdamState,
    groups: &mut [ParamGroup<'_>],
    grads: &[GroupGrads],
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    state.ensure_shapes(groups)?;
    check_grads(groups, grads)?;
    state.step += 1;
    let clip = match cfg.grad_clip_norm {
        Some(max) => {
            let n = global_grad_norm(grads);
            if n > max {
                max / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let step = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(step);
    let bc2 = 1.0 - cfg.beta2.powi(step);
    for (gi, group) in groups.iter_mut().enumerate() {
        let s = group.settings;
        if s.frozen {
            continue;
        }
        let lr_g = lr * s.lr_multiplier;
        let decay = cfg.weight_decay * s.weight_decay_multiplier;
        for (pi, param) in group.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut state.m[gi][pi], &mut state.v[gi][pi], &grads[gi][pi]);
            for k in 0..param.len() {
                let grad = g[k] * clip;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad * grad;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                param[k] -= lr_g * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * param[k]);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    WarmupCosine,
    WarmupLinear,
    Constant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup_cosine" => Ok(ScheduleKind::WarmupCosine),
            "warmup_linear" => Ok(ScheduleKind::WarmupLinear),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(Error::config("schedule.kind", format!("unknown `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::WarmupCosine => "warmup_cosine",
            ScheduleKind::WarmupLinear => "warmup_linear",
            ScheduleKind::Constant => "constant",
        })
    }
}

/// Linear warmup to `peak_lr`, then cosine or linear decay to zero at
/// `total_steps` (or hold, for [`ScheduleKind::Constant`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
}

/// Learning rate at `step`.
pub fn lr_at(s: &Schedule, step: usize) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: s.total_steps,
        });
    }
    if step < s.warmup_steps {
        return Ok(s.peak_lr * step as f64 / s.warmup_steps as f64);
    }
    let decay_len = s.total_steps - s.warmup_steps;
    let progress = if decay_len == 0 {
        1.0
    } else {
        (step - s.warmup_steps) as f64 / decay_len as f64
    };
    Ok(match s.kind {
        ScheduleKind::Constant => s.peak_lr,
        ScheduleKind::WarmupCosine if decay_len == 0 => s.peak_lr,
        ScheduleKind::WarmupLinear if decay_len == 0 => s.peak_lr,
        ScheduleKind::WarmupCosine => 0.5 * s.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos()),
        ScheduleKind::WarmupLinear => s.peak_lr * (1.0 - progress),
    })
}

/// Euclidean norm over every entry of every group.
pub fn global_grad_norm(grads: &[GroupGrads]) -> f64 {
    let mut acc = 0.0;
    for v in grads.iter().flatten().flatten() {
        acc += v * v;
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradStatus {
    Ok,
    Spike,
}

/// Flags gradient norms that jump above `spike_factor ×` the rolling median
/// of the previous `window` norms. Monitoring only; nothing is skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMonitor {
    history: VecDeque<f64>,
    window: usize,
    pub spike_factor: f64,
    pub spikes: usize,
}

impl Default for GradMonitor {
    fn default() -> Self {
        GradMonitor::new(32, 5.0)
    }
}

impl GradMonitor {
    pub fn new(window: usize, spike_factor: f64) -> Self {
        GradMonitor {
            history: VecDeque::with_capacity(window),
            window: window.max(1),
            spike_factor,
            spikes: 0,
        }
    }

    fn median(&self) -> Option<f64> {
        if self.history.is_empty() {
            return None;
        }
        let mut sorted: Vec<f64> = self.history.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        Some(if sorted.len().is_multiple_of(2) {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        })
    }
}

pub fn monitor_update(mon: &mut GradMonitor, norm: f64) -> GradStatus {
    let status = match mon.median() {
        Some(median) if norm > mon.spike_factor * median => GradStatus::Spike,
        _ => GradStatus::Ok,
    };
    if status == GradStatus::Spike {
        mon.spikes += 1;
    }
    if mon.history.len() == mon.window {
        mon.history.pop_front();
    }
    mon.history.push_back(norm);
    status
}

/// How an Adam update stream behaves after a single gradient spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpikeRecovery {
    /// Post-spike steps whose update is below half the steady-state update.
    pub suppressed_steps: usize,
    /// First post-spike step after which the update never again drops below
    /// half the steady state (within the horizon).
    pub recovery_step: usize,
}

/// Feeds a single scalar parameter a constant gradient of 1 for
/// `warm_steps`, then one gradient of `spike`, then `horizon` more steps of 1.
pub fn spike_recovery(beta2: f64, warm_steps: usize, spike: f64, horizon: usize) -> SpikeRecovery {
    let cfg = OptimConfig {
        beta2,
        weight_decay: 0.0,
        grad_clip_norm: None,
        ..OptimConfig::default()
    };
    let mut state = AdamState::new();
    let mut param = [0.0f64];
    let mut update = |g: f64| {
        let before = param[0];
        let mut groups = [ParamGroup {
            name: "probe".into(),
            params: vec![&mut param[..]],
            settings: GroupSettings::default(),
        }];
        adam_step(&mut state, &mut groups, &[vec![vec![g]]], 1.0, &cfg).expect("scalar group");
        before - param[0]
    };
    let mut steady = 0.0;
    for _ in 0..warm_steps {
        steady = update(1.0);
    }
    update(spike);
    let mut out = SpikeRecovery {
        suppressed_steps: 0,
        recovery_step: 0,
    };
    for k in 0..horizon {
        if update(1.0).abs() < 0.5 * steady.abs() {
            out.suppressed_steps += 1;
            out.recovery_step = k + 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GroupSettings;

    fn group<'a>(params: Vec<&'a mut [f64]>, settings: GroupSettings) -> ParamGroup<'a> {
        ParamGroup {
            name: "g".into(),
            params,
            settings,
        }
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = vec![1.5, -2.0];
        let before = p.clone();
        let mut state = AdamState::new();
        let settings = GroupSettings {
            weight_decay_multiplier: 0.0,
            ..GroupSettings::default()
        };
        for _ in 0..5 {
            let mut groups = vec![group(vec![&mut p[..]], settings)];
            adam_step(
                &mut state,
                &mut groups,
                &[vec![vec![0.0, 0.0]]],
                0.1,
                &OptimConfig::default(),
            )
            .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        for g in [0.003, 1.0, -250.0] {
            let mut p = [0.0];
            let cfg = OptimConfig {
                weight_decay: 0.0,
                ..OptimConfig::default()
            };
            let mut groups = vec![group(vec![&mut p[..]], GroupSettings::default())];
            adam_step(&mut AdamState::new(), &mut groups, &[vec![vec![g]]], 0.01, &cfg).unwrap();
            let expected = -0.01 * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn three_step_trace_matches_scalar_recurrence() {
        let cfg = OptimConfig {
            weight_decay: 0.01,
            ..OptimConfig::default()
        };
        let lr = 0.05;
        let grads = [1.0, -1.0, 1.0];
        // Hand-rolled oracle.
        let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        let mut trace = vec![];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.9f64.powf(t));
            let vh = v / (1.0 - 0.95f64.powf(t));
            theta -= lr * (mh / (vh.sqrt() + 1e-8) + 0.01 * theta);
            trace.push(theta);
        }
        let mut p = [0.7];
        let mut state = AdamState::new();
        for (g, want) in grads.iter().zip(trace) {
            let mut groups = vec![group(vec![&mut p[..]], GroupSettings::default())];
            adam_step(&mut state, &mut groups, &[vec![vec![*g]]], lr, &cfg).unwrap();
            assert!((p[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn decoupled_decay_is_geometric() {
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let settings = GroupSettings {
            weight_decay_multiplier: 0.5,
            ..GroupSettings::default()
        };
        let mut p = [2.0];
        let mut expected = 2.0;
        let mut state = AdamState::new();
        for _ in 0..10 {
            let mut groups = vec![group(vec![&mut p[..]], settings)];
            adam_step(&mut state, &mut groups, &[vec![vec![0.0]]], 0.2, &cfg).unwrap();
            expected -= 0.2 * (0.0 + 0.1 * 0.5 * expected);
            assert_eq!(p[0], expected);
        }
        assert!((p[0] - 2.0 * (1.0f64 - 0.2 * 0.1 * 0.5).powi(10)).abs() < 1e-14);
    }

    #[test]
    fn frozen_and_lr_multiplier() {
        let mut a = [1.0];
        let mut b = [1.0];
        let mut c = [1.0];
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let frozen = GroupSettings {
            frozen: true,
            ..GroupSettings::default()
        };
        let slow = GroupSettings {
            lr_multiplier: 0.1,
            ..GroupSettings::default()
        };
        let mut state = AdamState::new();
        let mut groups = vec![
            group(vec![&mut a[..]], frozen),
            group(vec![&mut b[..]], slow),
            group(vec![&mut c[..]], GroupSettings::default()),
        ];
        let g = vec![vec![vec![1.0]], vec![vec![1.0]], vec![vec![1.0]]];
        adam_step(&mut state, &mut groups, &g, 0.1, &cfg).unwrap();
        assert_eq!(a[0], 1.0);
        assert!(((1.0 - b[0]) / (1.0 - c[0]) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = [1.0, 2.0];
        let mut groups = vec![group(vec![&mut p[..]], GroupSettings::default())];
        let err = adam_step(
            &mut AdamState::new(),
            &mut groups,
            &[vec![vec![1.0]]],
            0.1,
            &OptimConfig::default(),
        );
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule {
            kind: ScheduleKind::WarmupCosine,
            warmup_steps: 100,
            total_steps: 300,
            peak_lr: 1e-3,
        };
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 100).unwrap(), 1e-3);
        assert!((lr_at(&s, 200).unwrap() - 5e-4).abs() < 1e-18);
        assert!(lr_at(&s, 300).unwrap().abs() < 1e-18);
        assert!(matches!(lr_at(&s, 301), Err(Error::StepOutOfRange { .. })));
        // Continuity across the end of warmup.
        assert!((lr_at(&s, 99).unwrap() - lr_at(&s, 100).unwrap()).abs() < 1.1e-5);
        let lin = Schedule {
            kind: ScheduleKind::WarmupLinear,
            ..s
        };
        assert!((lr_at(&lin, 200).unwrap() - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(&lin, 300).unwrap(), 0.0);
        let c = Schedule {
            kind: ScheduleKind::Constant,
            ..s
        };
        assert_eq!(lr_at(&c, 300).unwrap(), 1e-3);
    }

    #[test]
    fn grad_norm_and_monitor() {
        assert_eq!(global_grad_norm(&[vec![vec![0.0; 3]]]), 0.0);
        assert_eq!(global_grad_norm(&[vec![vec![3.0, 4.0]]]), 5.0);
        let mut mon = GradMonitor::new(8, 5.0);
        for _ in 0..4 {
            assert_eq!(monitor_update(&mut mon, 1.0), GradStatus::Ok);
        }
        assert_eq!(monitor_update(&mut mon, 10.0), GradStatus::Spike);
        assert_eq!(mon.spikes, 1);
        assert_eq!(monitor_update(&mut mon, 4.0), GradStatus::Ok);
    }

    #[test]
    fn lower_beta2_recovers_faster() {
        let fast = spike_recovery(0.95, 2000, 100.0, 20_000);
        let slow = spike_recovery(0.999, 2000, 100.0, 20_000);
        assert!(fast.suppressed_steps < slow.suppressed_steps, "{fast:?} vs {slow:?}");
        assert!(fast.recovery_step < slow.recovery_step);
        assert!(slow.recovery_step < 20_000);
    }
}

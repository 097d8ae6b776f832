//! Scaling factors: injection, the sparsity penalty on unimportant factors and
//! the ramp schedule of its weight.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkSpec;
use crate::scoring::{site_id, PruningPlan, UnitKind};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ramping,
    Holding,
    Done,
}

/// `alpha` grows by `delta` every `t1` iterations until it reaches `tau`,
/// then holds for `t2` iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub delta: f64,
    pub tau: f64,
    pub t1: u64,
    pub t2: u64,
    pub alpha: f64,
    pub iteration: u64,
    pub reached_at: Option<u64>,
}

impl AlphaSchedule {
    pub fn new(delta: f64, tau: f64, t1: u64, t2: u64) -> Result<Self> {
        if !(delta > 0.0 && tau > 0.0 && t1 > 0) || !delta.is_finite() || !tau.is_finite() {
            return Err(Error::Config(format!(
                "schedule needs delta > 0, tau > 0, t1 > 0 (got {delta}, {tau}, {t1})"
            )));
        }
        Ok(AlphaSchedule {
            delta,
            tau,
            t1,
            t2,
            alpha: 0.0,
            iteration: 0,
            reached_at: None,
        })
    }

    /// Increments needed to reach `tau`.
    pub fn increments(&self) -> u64 {
        ((self.tau / self.delta) - 1e-9).ceil().max(1.0) as u64
    }

    /// Iteration at which `alpha` first equals `tau`.
    pub fn ramp_end(&self) -> u64 {
        self.increments() * self.t1
    }

    /// Total iterations of a sparsify stage driven by this schedule.
    pub fn total_iterations(&self) -> u64 {
        self.ramp_end() + self.t2
    }

    pub fn phase(&self) -> Phase {
        match self.reached_at {
            None => Phase::Ramping,
            Some(r) if self.iteration < r + self.t2 => Phase::Holding,
            Some(_) => Phase::Done,
        }
    }

    pub fn step(&mut self) {
        self.iteration += 1;
        if self.reached_at.is_none() && self.iteration % self.t1 == 0 {
            let k = self.iteration / self.t1;
            if k >= self.increments() {
                self.alpha = self.tau;
                self.reached_at = Some(self.iteration);
            } else {
                self.alpha = (k as f64 * self.delta).min(self.tau);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRole {
    /// Input channels of a block's first conv.
    Read,
    /// Output filters of a block's first conv.
    Mid,
    /// Output filters of a block's second conv.
    Write,
    /// Output filters of a recurrent cell's entry conv.
    Entry,
    /// Groups of four filters feeding a pixel shuffle.
    ShuffleGroup,
    /// Output filters of a plain head conv.
    Filter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSite {
    pub id: String,
    pub layer_id: String,
    pub kind: UnitKind,
    pub role: SiteRole,
    pub len: usize,
}

/// Every scaling-factor site the spec exposes, in execution order.
pub fn gamma_sites(spec: &NetworkSpec) -> Vec<GammaSite> {
    let mut out = Vec::new();
    let mut push = |layer_id: &str, kind, role, len| {
        out.push(GammaSite {
            id: site_id(layer_id, kind),
            layer_id: layer_id.to_string(),
            kind,
            role,
            len,
        })
    };
    for cell in spec.cells() {
        let e = &cell.entry_conv;
        if e.prunable.output_filters {
            push(&e.id, UnitKind::OutputFilter, SiteRole::Entry, e.extents().c_out);
        }
        for b in &cell.blocks {
            let (f, s) = (&b.first_conv, &b.second_conv);
            if f.prunable.input_channels {
                push(&f.id, UnitKind::InputChannel, SiteRole::Read, f.extents().c_in);
            }
            if f.prunable.output_filters {
                push(&f.id, UnitKind::OutputFilter, SiteRole::Mid, f.extents().c_out);
            }
            if s.prunable.output_filters {
                push(&s.id, UnitKind::OutputFilter, SiteRole::Write, s.extents().c_out);
            }
        }
    }
    for l in spec.upsampler.iter().filter(|l| l.kind.is_conv()) {
        if l.prunable.shuffle_groups {
            push(&l.id, UnitKind::ShuffleGroup, SiteRole::ShuffleGroup, l.extents().c_out / 4);
        }
        if l.prunable.output_filters {
            push(&l.id, UnitKind::OutputFilter, SiteRole::Filter, l.extents().c_out);
        }
    }
    out
}

/// Scaling factors of an instrumented network together with the unimportant
/// set and the penalty schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingState {
    /// Factor vectors keyed by site id. Stored in the checkpoint blob.
    #[serde(skip)]
    pub gammas: BTreeMap<String, Vec<f32>>,
    /// Unimportant indices per site (empty when all are kept).
    pub unimportant: BTreeMap<String, Vec<usize>>,
    pub schedule: Option<AlphaSchedule>,
}

/// All-ones factors at every site of `spec`.
pub fn inject_scaling(spec: &NetworkSpec) -> Result<ScalingState> {
    spec.ensure_valid()?;
    let mut gammas = BTreeMap::new();
    let mut unimportant = BTreeMap::new();
    for site in gamma_sites(spec) {
        if gammas.insert(site.id.clone(), vec![1.0; site.len]).is_some() {
            return Err(Error::Config(format!("two scaling factors on site `{}`", site.id)));
        }
        unimportant.insert(site.id, Vec::new());
    }
    Ok(ScalingState {
        gammas,
        unimportant,
        schedule: None,
    })
}

impl ScalingState {
    pub fn alpha(&self) -> f64 {
        self.schedule.as_ref().map_or(0.0, |s| s.alpha)
    }

    /// Marks the plan's pruned units as unimportant.
    pub fn apply_plan(&mut self, plan: &PruningPlan) -> Result<()> {
        for v in self.unimportant.values_mut() {
            v.clear();
        }
        for (site, sp) in &plan.sites {
            let g = self
                .gammas
                .get(site)
                .ok_or_else(|| Error::Plan(format!("plan site `{site}` has no scaling factors")))?;
            if sp.total != g.len() {
                return Err(Error::Plan(format!(
                    "plan site `{site}` has {} units but {} scaling factors",
                    sp.total,
                    g.len()
                )));
            }
            self.unimportant.insert(site.clone(), sp.pruned.clone());
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        for (site, idx) in &self.unimportant {
            let g = self.gammas.get(site).ok_or_else(|| Error::Checkpoint {
                tensor: format!("gamma/{site}"),
                detail: "missing scaling factors".into(),
            })?;
            if let Some(i) = idx.iter().find(|&&i| i >= g.len()) {
                return Err(Error::Index(format!("unimportant index {i} at site `{site}` >= {}", g.len())));
            }
        }
        if let Some((site, _)) = self.gammas.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("scaling factors at `{site}`")));
        }
        Ok(())
    }

    /// `alpha * sum(gamma^2)` over unimportant entries.
    pub fn sir_penalty(&self) -> f64 {
        let sum: f64 = self
            .unimportant
            .iter()
            .flat_map(|(site, idx)| idx.iter().map(move |&i| self.gammas[site][i] as f64))
            .map(|g| g * g)
            .sum();
        self.alpha() * sum
    }

    /// Mean |gamma| over unimportant and over kept entries (0 when a set is empty).
    pub fn gamma_means(&self) -> (f64, f64) {
        let (mut ps, mut pn, mut ks, mut kn) = (0.0, 0usize, 0.0, 0usize);
        for (site, g) in &self.gammas {
            let bad = self.unimportant.get(site).map(Vec::as_slice).unwrap_or(&[]);
            for (i, v) in g.iter().enumerate() {
                if bad.contains(&i) {
                    ps += v.abs() as f64;
                    pn += 1;
                } else {
                    ks += v.abs() as f64;
                    kn += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        (mean(ps, pn), mean(ks, kn))
    }

    /// Copy with every unimportant factor set to exactly zero.
    pub fn masked(&self) -> ScalingState {
        let mut out = self.clone();
        for (site, idx) in &self.unimportant {
            let g = out.gammas.get_mut(site).expect("checked site");
            for &i in idx {
                g[i] = 0.0;
            }
        }
        out
    }

    pub fn step_schedule(&mut self) {
        if let Some(s) = &mut self.schedule {
            s.step();
        }
    }

    pub fn metadata_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ScalingState serializes")
    }

    pub fn from_metadata_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn trajectory_record(&self) -> GammaRecord {
        let (pruned, kept) = self.gamma_means();
        GammaRecord {
            iter: self.schedule.as_ref().map_or(0, |s| s.iteration),
            alpha: self.alpha(),
            mean_gamma_pruned: pruned,
            mean_gamma_kept: kept,
        }
    }
}

/// Adds `alpha * sum(gamma^2)` over unimportant entries to the tape.
pub fn sir_penalty_on_tape(tape: &mut Tape, gammas: &BTreeMap<String, Var>, state: &ScalingState) -> Result<Var> {
    let alpha = state.alpha();
    let mut terms = Vec::new();
    for (site, idx) in &state.unimportant {
        if idx.is_empty() {
            continue;
        }
        let g = *gammas
            .get(site)
            .ok_or_else(|| Error::Plan(format!("no scaling-factor variable for site `{site}`")))?;
        terms.push(tape.squared_penalty(g, idx, alpha as f32)?);
    }
    tape.add_all(&terms)
}

/// Scaling factors of a site as a `(1, len, 1, 1)` tensor.
pub fn gamma_tensor(values: &[f32]) -> Tensor {
    Tensor::vector(values.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaRecord {
    pub iter: u64,
    pub alpha: f64,
    pub mean_gamma_pruned: f64,
    pub mean_gamma_kept: f64,
}

pub fn write_gamma_trajectory<W: Write>(records: &[GammaRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["iter", "alpha", "mean_gamma_pruned", "mean_gamma_kept"])?;
    }
    w.flush().map_err(|e| Error::io("<gamma trajectory>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkConfig;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_reaches_tau_at_derived_iterations() {
        let mut s = AlphaSchedule::new(1e-4, 0.1, 5, 3375).unwrap();
        assert_eq!(s.increments(), 1000);
        let mut first_tau = None;
        let mut done_at = None;
        for _ in 0..9000 {
            s.step();
            assert!(s.alpha <= s.tau);
            if first_tau.is_none() && s.alpha == s.tau {
                first_tau = Some(s.iteration);
            }
            if done_at.is_none() && s.phase() == Phase::Done {
                done_at = Some(s.iteration);
            }
        }
        assert_eq!(first_tau, Some(5000));
        assert_eq!(done_at, Some(8375));
        assert_eq!(s.total_iterations(), 8375);
    }

    #[test]
    fn schedule_clamps_large_delta() {
        let mut s = AlphaSchedule::new(0.5, 0.1, 3, 2).unwrap();
        s.step();
        s.step();
        assert_eq!(s.alpha, 0.0);
        assert_eq!(s.phase(), Phase::Ramping);
        s.step();
        assert_eq!(s.alpha, 0.1);
        assert_eq!(s.phase(), Phase::Holding);
        s.step();
        s.step();
        assert_eq!(s.phase(), Phase::Done);
    }

    #[test]
    fn schedule_rejects_bad_constants() {
        assert!(AlphaSchedule::new(0.0, 0.1, 5, 1).is_err());
        assert!(AlphaSchedule::new(1e-3, 0.1, 0, 1).is_err());
    }

    fn toy_state() -> ScalingState {
        inject_scaling(&NetworkConfig::toy().build()).unwrap()
    }

    #[test]
    fn sir_penalty_hand_value() {
        let mut st = toy_state();
        assert_eq!(st.sir_penalty(), 0.0);
        let site = "fwd.b0.conv1.out".to_string();
        st.gammas.get_mut(&site).unwrap()[..2].copy_from_slice(&[0.5, -0.5]);
        st.unimportant.insert(site, vec![0, 1]);
        let mut sched = AlphaSchedule::new(0.1, 0.1, 1, 0).unwrap();
        sched.step();
        st.schedule = Some(sched);
        assert!((st.sir_penalty() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn sir_penalty_matches_loop_oracle_and_gradient() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let idx = vec![1usize, 4];
            let alpha = 0.3f32;
            let mut tape = Tape::new();
            let v = tape.param(Tensor::vector(g.clone()));
            let loss = tape.squared_penalty(v, &idx, alpha).unwrap();
            let oracle: f64 = idx.iter().map(|&i| (g[i] as f64).powi(2)).sum::<f64>() * alpha as f64;
            assert!((tape.value(loss).item() as f64 - oracle).abs() < 1e-6);
            let grads = tape.backward(loss).unwrap();
            let gv = grads.get(v).unwrap();
            for i in 0..6 {
                let expect = if idx.contains(&i) { 2.0 * alpha * g[i] } else { 0.0 };
                assert_eq!(gv.data()[i], expect);
            }
            let report = grad_check(
                |t, p| t.squared_penalty(p[0], &[1, 4], 0.3),
                &[Tensor::vector(g)],
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn toy_sites_cover_blocks_and_head() {
        let spec = NetworkConfig::toy().build();
        let sites = gamma_sites(&spec);
        // Per direction: entry + 3 blocks x 3; head: 2 shuffle sites + conv_hr.
        assert_eq!(sites.len(), 2 * (1 + 9) + 3);
        let g = sites.iter().find(|s| s.id == "up.upconv1.groups").unwrap();
        assert_eq!(g.len, 16);
        let uni = NetworkConfig {
            bidirectional: false,
            ..NetworkConfig::toy()
        };
        assert!(gamma_sites(&uni.build()).iter().all(|s| !s.layer_id.starts_with("bwd.")));
    }

    #[test]
    fn gamma_means_and_trajectory_csv() {
        let mut st = toy_state();
        let site = "fwd.b1.conv2.out".to_string();
        st.unimportant.insert(site, (0..8).collect());
        assert_eq!(st.gamma_means(), (1.0, 1.0));
        let mut buf = Vec::new();
        write_gamma_trajectory(&[st.trajectory_record()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iter,alpha,mean_gamma_pruned,mean_gamma_kept");
        assert_eq!(text.lines().nth(1).unwrap(), "0,0.0,1.0,1.0");
        let masked = st.masked();
        assert_eq!(masked.gamma_means().0, 0.0);
        assert_eq!(masked.gammas["fwd.b1.conv2.out"][8], 1.0);
    }

    #[test]
    fn metadata_roundtrip_excludes_gammas() {
        let mut st = toy_state();
        st.schedule = Some(AlphaSchedule::new(1e-3, 0.1, 5, 100).unwrap());
        let back = ScalingState::from_metadata_json(&st.metadata_json()).unwrap();
        assert!(back.gammas.is_empty());
        assert_eq!(back.unimportant, st.unimportant);
        assert_eq!(back.schedule, st.schedule);
    }
}

//! Stage 1, stage 2 and formal verification chained under one seed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cegis::{train_stage2, CegisConfig, Stage2Result};
use crate::checkpoint::Checkpoint;
use crate::domain::BoxDomain;
use crate::dynamics::{build_system, SystemSpec};
use crate::error::{Error, Result};
use crate::train::{train_stage1, Stage1Result, TrainConfig};
use crate::verify::{bab_verify, VerdictReport, VerifyConfig, VerifyTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub system: String,
    pub seed: u64,
    pub train: TrainConfig,
    pub cegis: CegisConfig,
    pub verify: VerifyConfig,
    /// Initial verification thresholds; `c1` defaults to stage 2's c′ and
    /// `c2` to its outer level.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    /// Training start box; the system default when absent.
    pub start_domain: Option<BoxDomain>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: "van_der_pol".into(),
            seed: 0,
            train: TrainConfig::default(),
            cegis: CegisConfig::default(),
            verify: VerifyConfig::default(),
            c1: None,
            c2: None,
            start_domain: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        build_system(&self.system)?;
        self.train.validate()?;
        self.cegis.validate()?;
        for c in [self.c1, self.c2].into_iter().flatten() {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::Config(format!("threshold {c} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Starting `(c₁, c₂)` given stage 2's c′.
    pub fn initial_levels(&self, c_inner: f64) -> (f64, f64) {
        (self.c1.unwrap_or(c_inner), self.c2.unwrap_or(self.cegis.c_outer))
    }

    /// Desk-scale settings for the 2D benchmarks.
    pub fn desk(system: &str, seed: u64) -> Self {
        let mut c = Self {
            system: system.into(),
            seed,
            ..Self::default()
        };
        c.train.max_iters = 3000;
        c.train.n_points = 512;
        c.train.n_data = 128;
        c.train.n_boundary = 256;
        c.train.n_traj = 256;
        c.train.controller_hidden = vec![16, 16];
        c.train.lyapunov_hidden = vec![32, 32];
        // p = 1 keeps lingering near x* expensive, so the controller learns a
        // usable local rate; a smaller a widens V ≤ c and lets the box grow.
        c.train.p = 1.0;
        c.train.a = if system == "double_integrator" { 0.05 } else { 0.2 };
        c.train.origin_fraction = 0.3;
        c.train.origin_scale = 0.02;
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stage1: f64,
    pub stage2: f64,
    pub verify: f64,
}

pub struct PipelineOutcome {
    pub system: SystemSpec,
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
    pub task: VerifyTask,
    pub report: VerdictReport,
    pub timings: Timings,
}

impl PipelineOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.system.name,
            self.stage2.lyapunov.clone(),
            self.stage2.controller.clone(),
            self.stage1.domain.clone(),
        )
    }
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let sys = build_system(&cfg.system)?;
    let start = cfg.start_domain.clone().unwrap_or_else(|| sys.default_start_domain.clone());
    let t0 = Instant::now();
    let s1 = train_stage1(&sys, &cfg.train, &start, cfg.seed)?;
    let t1 = Instant::now();
    log::info!("stage 1 done in {:.1}s, domain {:?} .. {:?}", (t1 - t0).as_secs_f64(), s1.domain.lo(), s1.domain.hi());
    let s2 = train_stage2(
        s1.lyapunov.clone(),
        s1.controller.clone(),
        &sys,
        &s1.domain,
        &cfg.cegis,
        cfg.seed.wrapping_add(1),
    )?;
    let t2 = Instant::now();
    log::info!("stage 2 done in {:.1}s after {} rounds (clean: {})", (t2 - t1).as_secs_f64(), s2.rounds, s2.clean);
    let (c1, c2) = cfg.initial_levels(s2.c_inner);
    let task = VerifyTask::new(&s2.lyapunov, &s2.controller, &sys, s1.domain.clone(), c1, c2, cfg.verify.clone())?;
    let report = bab_verify(&task)?;
    let t3 = Instant::now();
    log::info!("verification {:?} with ({}, {}) in {:.1}s", report.status, report.c1, report.c2, (t3 - t2).as_secs_f64());
    Ok(PipelineOutcome {
        system: sys,
        stage1: s1,
        stage2: s2,
        task,
        report,
        timings: Timings {
            stage1: (t1 - t0).as_secs_f64(),
            stage2: (t2 - t1).as_secs_f64(),
            verify: (t3 - t2).as_secs_f64(),
        },
    })
}

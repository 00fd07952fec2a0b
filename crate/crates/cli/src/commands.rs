use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zubov::cegis::{train_stage2, RoundRecord};
use zubov::certify::{
    estimate_volume, pgd_verify, sample_sublevel, slice_grid, trajectory_verify, unverifiable_hole_report,
    write_slice_csv, EmpiricalReport, HoleReport, PgdBudget, VolumeEstimate,
};
use zubov::checkpoint::Checkpoint;
use zubov::dynamics::{build_system, simulate, ClosedLoop, SimConfig, SystemSpec};
use zubov::train::{train_stage1, DomainRecord, LossRecord};
use zubov::verify::{bab_verify, certify_theorem, Status, VerdictReport, VerifyTask};

use crate::config::{CliConfig, SchemeName};
use crate::error::{CliError, CliResult, EXIT_FALSIFIED};
use crate::manifest::RunManifest;

pub const CEGIS_SCHEMA: &str = "zubov.cegis.v1";
pub const VERDICT_SCHEMA: &str = "zubov.verdict.v1";
pub const EMPIRICAL_SCHEMA: &str = "zubov.empirical.v1";
pub const VOLUME_SCHEMA: &str = "zubov.volume.v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CegisRecord {
    pub schema: String,
    pub rounds: usize,
    pub clean: bool,
    pub v0: f64,
    pub c_inner: f64,
    pub history: Vec<RoundRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub schema: String,
    pub thin_band: bool,
    pub report: VerdictReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmpiricalRecord {
    pub schema: String,
    pub c2: f64,
    pub report: EmpiricalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub schema: String,
    pub roa: VolumeEstimate,
    pub hole: HoleReport,
}

/// A run directory with its effective configuration.
pub struct Run {
    pub cfg: CliConfig,
    pub dir: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path, schema: &str) -> CliResult<T> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)?;
    let found = v.get("schema").and_then(|s| s.as_str()).unwrap_or("");
    if found != schema {
        return Err(CliError::Integrity(format!("{}: schema `{found}`, expected `{schema}`", p.display())));
    }
    Ok(serde_json::from_value(v)?)
}

fn write_json(p: &Path, v: &impl Serialize) -> CliResult<()> {
    std::fs::write(p, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

impl Run {
    pub fn new(cfg: CliConfig, dir: Option<PathBuf>) -> CliResult<Self> {
        let dir = dir
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}-s{}", cfg.run.system, cfg.run.seed)));
        std::fs::create_dir_all(&dir)?;
        Ok(Self { cfg, dir })
    }

    fn manifest(&self) -> CliResult<RunManifest> {
        RunManifest::load_or_new(&self.dir, serde_json::to_value(&self.cfg)?)
    }

    fn system(&self) -> CliResult<SystemSpec> {
        Ok(build_system(&self.cfg.run.system)?)
    }

    fn checkpoint(&self, m: &RunManifest, name: &str) -> CliResult<Checkpoint> {
        let ck = Checkpoint::load(&m.verified_path(&self.dir, name)?)?;
        if ck.system != self.cfg.run.system {
            return Err(CliError::Config(format!(
                "checkpoint is for `{}`, config names `{}`",
                ck.system, self.cfg.run.system
            )));
        }
        Ok(ck)
    }

    fn verdict(&self, m: &RunManifest) -> CliResult<VerdictRecord> {
        read_json(&m.verified_path(&self.dir, "verdict")?, VERDICT_SCHEMA)
    }

    /// The verdict, refusing anything short of a verified one.
    fn verified(&self, m: &RunManifest) -> CliResult<VerdictReport> {
        let v = self.verdict(m)?.report;
        if v.status != Status::Verified {
            return Err(CliError::NotVerified(format!("last verify ended {:?}", v.status)));
        }
        Ok(v)
    }

    pub fn train(&self) -> CliResult<i32> {
        let mut m = self.manifest()?;
        let sys = self.system()?;
        let start = self.cfg.run.start_domain.clone().unwrap_or_else(|| sys.default_start_domain.clone());
        let t = Instant::now();
        let s1 = train_stage1(&sys, &self.cfg.run.train, &start, self.cfg.run.seed)?;
        m.timings.insert("stage1".into(), t.elapsed().as_secs_f64());
        Checkpoint::new(&sys.name, s1.lyapunov, s1.controller, s1.domain.clone()).save(&self.dir.join("stage1.json"))?;
        write_losses(&self.dir.join("losses.csv"), &s1.history)?;
        write_domains(&self.dir.join("domain.csv"), &s1.domain_history)?;
        for (name, file) in [("stage1", "stage1.json"), ("losses", "losses.csv"), ("domains", "domain.csv")] {
            m.record(&self.dir, name, file)?;
        }
        m.metric("domain_lo", s1.domain.lo())?;
        m.metric("domain_hi", s1.domain.hi())?;
        m.save(&self.dir)?;
        println!("stage 1: domain {:?} .. {:?}", s1.domain.lo(), s1.domain.hi());
        Ok(0)
    }

    pub fn cegis(&self) -> CliResult<i32> {
        let mut m = self.manifest()?;
        let sys = self.system()?;
        let ck = self.checkpoint(&m, "stage1")?;
        let t = Instant::now();
        let s2 = train_stage2(
            ck.lyapunov,
            ck.controller,
            &sys,
            &ck.domain,
            &self.cfg.run.cegis,
            self.cfg.run.seed.wrapping_add(1),
        )?;
        m.timings.insert("stage2".into(), t.elapsed().as_secs_f64());
        Checkpoint::new(&sys.name, s2.lyapunov, s2.controller, ck.domain).save(&self.dir.join("stage2.json"))?;
        s2.buffer.to_csv(&self.dir.join("cex.csv"))?;
        let rec = CegisRecord {
            schema: CEGIS_SCHEMA.into(),
            rounds: s2.rounds,
            clean: s2.clean,
            v0: s2.v0,
            c_inner: s2.c_inner,
            history: s2.history,
        };
        write_json(&self.dir.join("cegis.json"), &rec)?;
        for (name, file) in [("stage2", "stage2.json"), ("cegis", "cegis.json"), ("counterexamples", "cex.csv")] {
            m.record(&self.dir, name, file)?;
        }
        m.metric("cegis_clean", rec.clean)?;
        m.metric("cegis_rounds", rec.rounds)?;
        m.save(&self.dir)?;
        if !rec.clean {
            log::warn!("no clean streak within {} rounds", self.cfg.run.cegis.max_rounds);
        }
        println!("stage 2: {} rounds, clean {}, c' = {:.6}", rec.rounds, rec.clean, rec.c_inner);
        Ok(0)
    }

    pub fn verify(&self, thin_band: bool) -> CliResult<i32> {
        let mut m = self.manifest()?;
        let sys = self.system()?;
        let ck = self.checkpoint(&m, "stage2")?;
        let c_inner = read_json::<CegisRecord>(&m.verified_path(&self.dir, "cegis")?, CEGIS_SCHEMA)?.c_inner;
        let (c1, c2) = self.cfg.run.initial_levels(c_inner);
        let c2 = if thin_band { c1 + self.cfg.run.verify.eps } else { c2 };
        let mut task = VerifyTask::new(&ck.lyapunov, &ck.controller, &sys, ck.domain.clone(), c1, c2, self.cfg.run.verify.clone())?;
        if thin_band {
            task = task.thin_band();
        }
        let t = Instant::now();
        let report = bab_verify(&task)?;
        m.timings.insert("verify".into(), t.elapsed().as_secs_f64());
        let status = report.status;
        println!(
            "{:?}: c1 = {:.6}, c2 = {:.6}, {} boundings in {:.2}s",
            status, report.c1, report.c2, report.stats.boundings, report.stats.wall_secs
        );
        if status == Status::Verified {
            let cert = certify_theorem(&sys, &ck, &task, &report)?;
            std::fs::write(self.dir.join("certificate.json"), cert.to_json()?)?;
            m.record(&self.dir, "certificate", "certificate.json")?;
        } else {
            m.artifacts.remove("certificate");
        }
        m.metric("c1", report.c1)?;
        m.metric("c2", report.c2)?;
        m.metric("formal", status)?;
        let rec = VerdictRecord {
            schema: VERDICT_SCHEMA.into(),
            thin_band,
            report,
        };
        write_json(&self.dir.join("verdict.json"), &rec)?;
        m.record(&self.dir, "verdict", "verdict.json")?;
        m.save(&self.dir)?;
        Ok(status.exit_code())
    }

    pub fn certify(&self, schemes: &[SchemeName]) -> CliResult<i32> {
        let mut m = self.manifest()?;
        let sys = self.system()?;
        let ck = self.checkpoint(&m, "stage2")?;
        let verdict = self.verified(&m)?;
        let mut code = 0;
        for scheme in schemes {
            let t = Instant::now();
            let (name, report) = match scheme {
                SchemeName::Pgd => {
                    let task = VerifyTask::new(&ck.lyapunov, &ck.controller, &sys, ck.domain.clone(), verdict.c1, verdict.c2, self.cfg.run.verify.clone())?;
                    let budget = PgdBudget {
                        restarts: self.cfg.pgd_restarts,
                        ..PgdBudget::default()
                    };
                    ("pgd", pgd_verify(&task, &budget, self.cfg.run.seed)?)
                }
                SchemeName::Trajectory => {
                    let sim = self.trajectory_sim();
                    let r = trajectory_verify(&ck.lyapunov, &ck.controller, &sys, &ck.domain, verdict.c2, self.cfg.trajectories, &sim, self.cfg.run.seed)?;
                    ("trajectory", r)
                }
            };
            m.timings.insert(name.into(), t.elapsed().as_secs_f64());
            println!("{name}: {} samples, {} violations, pass {}", report.samples, report.violations, report.pass);
            if !report.pass {
                code = EXIT_FALSIFIED;
            }
            m.metric(name, report.pass)?;
            let file = format!("{name}.json");
            write_json(
                &self.dir.join(&file),
                &EmpiricalRecord {
                    schema: EMPIRICAL_SCHEMA.into(),
                    c2: verdict.c2,
                    report,
                },
            )?;
            m.record(&self.dir, name, &file)?;
        }
        m.save(&self.dir)?;
        Ok(code)
    }

    fn trajectory_sim(&self) -> SimConfig {
        SimConfig {
            horizon: self.cfg.trajectory_horizon,
            settle_tol: Some(1e-3),
            ..SimConfig::default()
        }
    }

    /// Rollouts started inside `V ≤ c₂`, written as `(traj, t, x…, V)` rows
    /// every `stride` steps.
    pub fn simulate(&self, n: usize, stride: usize) -> CliResult<i32> {
        let mut m = self.manifest()?;
        let sys = self.system()?;
        let ck = self.checkpoint(&m, "stage2")?;
        let c2 = match self.verdict(&m) {
            Ok(v) => v.report.c2,
            Err(_) => self.cfg.run.cegis.c_outer,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.run.seed);
        let x0 = sample_sublevel(&ck.lyapunov, &ck.domain, c2, n, &mut rng)?;
        let f = ClosedLoop::new(&sys, &ck.controller)?;
        let sim = SimConfig {
            horizon: self.cfg.trajectory_horizon,
            ..SimConfig::default()
        };
        let mut w = csv::Writer::from_path(self.dir.join("trajectories.csv"))?;
        let mut header = vec!["traj".to_string(), "t".into()];
        header.extend((0..sys.state_dim).map(|d| format!("x{d}")));
        header.push("v".into());
        w.write_record(&header)?;
        let mut converged = 0;
        for (k, row) in x0.rows().into_iter().enumerate() {
            let traj = simulate(&f, row.as_slice().expect("row"), &sys.x_star, sim.steps(), &sim)?;
            converged += traj.converged as usize;
            let v = ck.lyapunov.eval(traj.states.view())?;
            for (i, s) in traj.states.rows().into_iter().enumerate().step_by(stride.max(1)) {
                let mut rec = vec![k.to_string(), format!("{}", i as f64 * sim.dt)];
                rec.extend(s.iter().map(|x| x.to_string()));
                rec.push(v[i].to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        m.record(&self.dir, "trajectories", "trajectories.csv")?;
        m.save(&self.dir)?;
        println!("{converged}/{n} trajectories converged");
        Ok(0)
    }

    pub fn volume(&self) -> CliResult<i32> {
        let mut m = self.manifest()?;
        let ck = self.checkpoint(&m, "stage2")?;
        let v = self.verified(&m)?;
        let n = self.cfg.volume_samples;
        let roa = estimate_volume(&ck.lyapunov, &ck.domain, v.c2, n, self.cfg.run.seed)?;
        let hole = unverifiable_hole_report(&ck.lyapunov, &ck.domain, v.c1, roa.volume.max(f64::MIN_POSITIVE), n, self.cfg.run.seed + 1)?;
        println!("ROA volume {:.4} ± {:.4}, hole {:.4}%", roa.volume, roa.std_err, 100.0 * hole.fraction);
        m.metric("roa_volume", roa.volume)?;
        m.metric("roa_std_err", roa.std_err)?;
        m.metric("hole_fraction", hole.fraction)?;
        write_json(
            &self.dir.join("volume.json"),
            &VolumeRecord {
                schema: VOLUME_SCHEMA.into(),
                roa,
                hole,
            },
        )?;
        m.record(&self.dir, "volume", "volume.json")?;
        m.save(&self.dir)?;
        Ok(0)
    }

    pub fn report(&self) -> CliResult<i32> {
        let mut m = RunManifest::load(&self.dir)?;
        m.verify_all(&self.dir)?;
        let row = summary_row(&m)?;
        let ck = self.checkpoint(&m, "stage2")?;
        let sys = self.system()?;
        let mut w = csv::Writer::from_path(self.dir.join("summary.csv"))?;
        w.serialize(&row)?;
        w.flush()?;
        m.record(&self.dir, "summary", "summary.csv")?;
        let n = sys.state_dim;
        for i in 0..n {
            for j in i + 1..n {
                let grid = slice_grid(&ck.lyapunov, &ck.domain, (i, j), &sys.x_star, 101)?;
                let file = format!("slice_x{i}_x{j}.csv");
                write_slice_csv(&self.dir.join(&file), &grid, (&format!("x{i}"), &format!("x{j}")))?;
                m.record(&self.dir, &format!("slice_x{i}_x{j}"), &file)?;
            }
        }
        m.save(&self.dir)?;
        println!("{}", row.line());
        Ok(0)
    }

    /// Every stage in order; stops at the first non-zero stage code.
    pub fn run_all(&self) -> CliResult<i32> {
        for step in [Self::train, Self::cegis] {
            step(self)?;
        }
        let code = self.verify(false)?;
        if code != 0 {
            return Ok(code);
        }
        let code = self.certify(&self.cfg.schemes)?;
        self.volume()?;
        self.report()?;
        Ok(code)
    }
}

/// One results line per run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: String,
    pub seed: u64,
    pub roa_volume: Option<f64>,
    pub roa_std_err: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub formal: Option<String>,
    pub pgd: Option<bool>,
    pub trajectory: Option<bool>,
    pub hole_fraction: Option<f64>,
}

impl SummaryRow {
    pub fn line(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".into(), |x| format!("{x:.p$}"));
        let flag = |b: Option<bool>| b.map_or("-", |b| if b { "pass" } else { "fail" });
        format!(
            "{} seed {}: ROA {} ± {} | c1 {} c2 {} | formal {} | pgd {} | trajectory {}",
            self.system,
            self.seed,
            opt(self.roa_volume, 3),
            opt(self.roa_std_err, 3),
            opt(self.c1, 4),
            opt(self.c2, 4),
            self.formal.as_deref().unwrap_or("-"),
            flag(self.pgd),
            flag(self.trajectory),
        )
    }
}

pub fn summary_row(m: &RunManifest) -> CliResult<SummaryRow> {
    let cfg: CliConfig = serde_json::from_value(m.config.clone())?;
    let get = |k: &str| m.metrics.get(k).cloned();
    let f = |k: &str| get(k).and_then(|v| v.as_f64());
    let b = |k: &str| get(k).and_then(|v| v.as_bool());
    Ok(SummaryRow {
        system: cfg.run.system,
        seed: cfg.run.seed,
        roa_volume: f("roa_volume"),
        roa_std_err: f("roa_std_err"),
        c1: f("c1"),
        c2: f("c2"),
        formal: get("formal").and_then(|v| v.as_str().map(String::from)),
        pgd: b("pgd"),
        trajectory: b("trajectory"),
        hole_fraction: f("hole_fraction"),
    })
}

fn write_losses(p: &Path, h: &[LossRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(p)?;
    w.write_record(["iter", "total", "zero", "pde", "data", "controller", "boundary", "s_zero", "s_pde", "s_data", "s_boundary"])?;
    for r in h {
        let t = &r.terms;
        let mut rec = vec![r.iter.to_string()];
        rec.extend([r.total, t.zero, t.pde, t.data, t.controller, t.boundary].iter().map(|v| v.to_string()));
        rec.extend(r.log_var.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_domains(p: &Path, h: &[DomainRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(p)?;
    let n = h.first().map_or(0, |r| r.lo.len());
    let mut header = vec!["iter".to_string(), "converged".into(), "manual".into()];
    for d in 0..n {
        header.push(format!("lo{d}"));
        header.push(format!("hi{d}"));
    }
    w.write_record(&header)?;
    for r in h {
        let mut rec = vec![r.iter.to_string(), r.converged.to_string(), r.manual.to_string()];
        for d in 0..n {
            rec.push(r.lo[d].to_string());
            rec.push(r.hi[d].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

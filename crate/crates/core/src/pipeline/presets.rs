use log::info;

use super::{evaluate_net, run_train_stage, Report, ReportRow};
use crate::config::StageConfig;
use crate::data::CompositeSample;
use crate::error::{Error, Result};
use crate::losses::KdMethod;
use crate::netgraph::NetworkGraph;
use crate::pruner::{prune_student, run_prune_stage, uniform_prune, UniformScope};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Uniform pruning of low- vs high-level encoder layers.
    Motivation,
    /// UNI vs ours for each distillation method.
    Main,
    /// UNI and ours at 30, 50 and 70 percent.
    RatioSweep,
    /// Every pruning-stage method against every training-stage method.
    Mismatch,
    /// Ours trained with and without distillation.
    NoKdBaseline,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Motivation,
        Preset::Main,
        Preset::RatioSweep,
        Preset::Mismatch,
        Preset::NoKdBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Motivation => "motivation",
            Preset::Main => "main",
            Preset::RatioSweep => "ratio_sweep",
            Preset::Mismatch => "mismatch",
            Preset::NoKdBaseline => "no_kd_baseline",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset `{name}`")))
    }
}

pub struct PresetInputs<'a> {
    pub cfg: &'a StageConfig,
    pub teacher: &'a NetworkGraph,
    pub train: &'a [CompositeSample],
    pub test: &'a [CompositeSample],
}

/// The config with another KD method. A KD weight set for a different method
/// does not carry over; the new method's default is used instead.
fn with_method(cfg: &StageConfig, kd: &KdMethod) -> StageConfig {
    let mut c = cfg.clone();
    if &c.kd != kd {
        c.kd = kd.clone();
        c.lambdas.kd = None;
        c.weights.kd = None;
    }
    c
}

/// Training-stage config without teacher terms.
fn supervised(cfg: &StageConfig) -> StageConfig {
    let mut c = cfg.clone();
    c.weights.teacher = 0.0;
    c.weights.kd = Some(0.0);
    c
}

fn methods() -> [KdMethod; 3] {
    [KdMethod::nst(), KdMethod::Ofd, KdMethod::spkd()]
}

struct Runner<'a> {
    inp: &'a PresetInputs<'a>,
    size: (usize, usize),
}

impl Runner<'_> {
    fn train_eval(
        &self,
        label: String,
        arch: &NetworkGraph,
        cfg: &StageConfig,
    ) -> Result<ReportRow> {
        info!("training `{label}`");
        let (net, _) = run_train_stage(arch, self.inp.teacher, cfg, self.inp.train)?;
        let eval = evaluate_net(&net, self.inp.test, cfg.batch_size)?;
        Ok(ReportRow::from_eval(label, &eval))
    }

    fn sparsified(&self, cfg: &StageConfig) -> Result<NetworkGraph> {
        info!("pruning stage with {}", cfg.kd.name());
        Ok(run_prune_stage(self.inp.teacher, cfg, self.inp.train)?.0)
    }

    fn ours(&self, student: &NetworkGraph, ratio: f64, cfg: &StageConfig) -> Result<NetworkGraph> {
        Ok(prune_student(student, ratio, cfg.min_keep_fraction, self.size)?.0)
    }
}

/// Runs one preset. The first row is always the teacher.
pub fn run_experiment_preset(preset: Preset, inp: &PresetInputs) -> Result<Report> {
    let cfg = inp.cfg;
    cfg.validate()?;
    let first = inp
        .test
        .first()
        .ok_or_else(|| Error::EmptyRegion("preset needs test samples".into()))?;
    let run = Runner {
        inp,
        size: first.size(),
    };
    let mut report = Report::new(format!("Preset {}", preset.name()), cfg);
    let teacher_eval = evaluate_net(inp.teacher, inp.test, cfg.batch_size)?;
    report
        .rows
        .push(ReportRow::from_eval("Teacher", &teacher_eval));

    match preset {
        Preset::Motivation => {
            report.notes.push(
                "uniform 50% pruning of the selected layers, trained without distillation".into(),
            );
            let plain = supervised(cfg);
            for (label, scope) in [
                ("Low-level pruned", UniformScope::Low),
                ("High-level pruned", UniformScope::High),
            ] {
                let arch = uniform_prune(inp.teacher, 0.5, scope)?;
                report
                    .rows
                    .push(run.train_eval(label.into(), &arch, &plain)?);
            }
        }
        Preset::Main => {
            report.notes.push(format!("pruning ratio {}", cfg.ratio));
            let uni = uniform_prune(inp.teacher, cfg.ratio, UniformScope::All)?;
            for m in methods() {
                let c = with_method(cfg, &m);
                report
                    .rows
                    .push(run.train_eval(format!("{} UNI", m.name()), &uni, &c)?);
                let ours = run.ours(&run.sparsified(&c)?, cfg.ratio, &c)?;
                report
                    .rows
                    .push(run.train_eval(format!("{} Ours", m.name()), &ours, &c)?);
            }
        }
        Preset::RatioSweep => {
            report.notes.push(format!("distillation {}", cfg.kd.name()));
            let student = run.sparsified(cfg)?;
            for ratio in [0.3f64, 0.5, 0.7] {
                let pct = (ratio * 100.0).round();
                let uni = uniform_prune(inp.teacher, ratio, UniformScope::All)?;
                report
                    .rows
                    .push(run.train_eval(format!("UNI {pct}%"), &uni, cfg)?);
                let ours = run.ours(&student, ratio, cfg)?;
                report
                    .rows
                    .push(run.train_eval(format!("Ours {pct}%"), &ours, cfg)?);
            }
        }
        Preset::Mismatch => {
            report.notes.push(format!("pruning ratio {}", cfg.ratio));
            for pm in methods() {
                let pc = with_method(cfg, &pm);
                let ours = run.ours(&run.sparsified(&pc)?, cfg.ratio, &pc)?;
                for tm in methods() {
                    let tc = with_method(cfg, &tm);
                    let label = format!("prune {} / train {}", pm.name(), tm.name());
                    report.rows.push(run.train_eval(label, &ours, &tc)?);
                }
            }
        }
        Preset::NoKdBaseline => {
            report.notes.push(format!(
                "pruning ratio {}, distillation {}",
                cfg.ratio,
                cfg.kd.name()
            ));
            let ours = run.ours(&run.sparsified(cfg)?, cfg.ratio, cfg)?;
            report
                .rows
                .push(run.train_eval(format!("Ours + {}", cfg.kd.name()), &ours, cfg)?);
            report.rows.push(run.train_eval(
                "Ours from scratch".into(),
                &ours,
                &supervised(cfg),
            )?);
        }
    }
    Ok(report)
}

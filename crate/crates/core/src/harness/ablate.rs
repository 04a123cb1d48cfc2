use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::evaluate::{evaluate, MetricReport, ModelPredictor};
use super::train::train;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::BackboneVariant;

/// Trained checkpoints and losses of every seed with the joint report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub epoch_losses: Vec<Vec<f64>>,
    pub report: MetricReport,
}

/// Per seed: split, train on the train side, evaluate on the test side.
pub fn run_protocol(config: &TrainConfig, data: &Dataset) -> Result<ProtocolOutcome> {
    let mut checkpoints = Vec::new();
    let mut epoch_losses = Vec::new();
    let report = evaluate(config, data, |seed, train_side| {
        let out = train(config, train_side, seed)?;
        let predictor = ModelPredictor::from_checkpoint(&out.checkpoint)?;
        checkpoints.push(out.checkpoint);
        epoch_losses.push(out.epoch_losses);
        Ok(predictor)
    })?;
    Ok(ProtocolOutcome {
        checkpoints,
        epoch_losses,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Scale,
    EnableTab,
    EnableSstb,
    EnableDualBranch,
    Backbone,
    /// Joint module toggle: `none`, `all`, or `+`-joined subsets of
    /// `tab`, `sstb`, `dual`.
    Modules,
}

impl SweepParam {
    pub const ALL: [SweepParam; 6] = [
        SweepParam::Scale,
        SweepParam::EnableTab,
        SweepParam::EnableSstb,
        SweepParam::EnableDualBranch,
        SweepParam::Backbone,
        SweepParam::Modules,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Scale => "scale",
            SweepParam::EnableTab => "enable_tab",
            SweepParam::EnableSstb => "enable_sstb",
            SweepParam::EnableDualBranch => "enable_dual_branch",
            SweepParam::Backbone => "backbone",
            SweepParam::Modules => "modules",
        }
    }

    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        let bad = || Error::Config(format!("invalid value {value:?} for {}", self.name()));
        let flag = |v: &str| v.parse::<bool>().map_err(|_| bad());
        match self {
            SweepParam::Scale => m.scale = value.parse().map_err(|_| bad())?,
            SweepParam::EnableTab => m.enable_tab = flag(value)?,
            SweepParam::EnableSstb => m.enable_sstb = flag(value)?,
            SweepParam::EnableDualBranch => m.enable_dual_branch = flag(value)?,
            SweepParam::Backbone => m.backbone = value.parse::<BackboneVariant>()?,
            SweepParam::Modules => {
                let (mut tab, mut sstb, mut dual) = (false, false, false);
                match value {
                    "none" => {}
                    "all" => (tab, sstb, dual) = (true, true, true),
                    _ => {
                        for part in value.split('+') {
                            match part.trim() {
                                "tab" => tab = true,
                                "sstb" => sstb = true,
                                "dual" => dual = true,
                                _ => return Err(bad()),
                            }
                        }
                    }
                }
                m.enable_tab = tab;
                m.enable_sstb = sstb;
                m.enable_dual_branch = dual;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepParam::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let known: Vec<&str> = SweepParam::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown sweep parameter {s:?}; expected one of {}", known.join(", ")))
        })
    }
}

pub const SCALE_SWEEP: [&str; 6] = ["0.1", "0.2", "0.4", "0.6", "0.8", "1.0"];
pub const MODULE_SWEEP: [&str; 6] = ["none", "tab", "sstb", "tab+sstb", "tab+dual", "all"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub parameter: SweepParam,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
        let width = self.rows.iter().map(|r| r.value.len()).max().unwrap_or(0).max(self.parameter.name().len());
        let mut s = format!("{:<width$} {:>10} {:>10}\n", self.parameter.name(), "PLCC", "SROCC");
        for row in &self.rows {
            s.push_str(&format!(
                "{:<width$} {:>10} {:>10}\n",
                row.value,
                fmt(row.report.mean_plcc),
                fmt(row.report.mean_srocc)
            ));
        }
        s
    }
}

/// One train+evaluate run per value, all sharing the base config's seeds.
pub fn ablate(base: &TrainConfig, parameter: &str, values: &[String], data: &Dataset) -> Result<AblationTable> {
    let parameter: SweepParam = parameter.parse()?;
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| parameter.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let rows = values
        .iter()
        .zip(&configs)
        .map(|(v, cfg)| {
            Ok(AblationRow {
                value: v.clone(),
                report: run_protocol(cfg, data)?.report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { parameter, rows })
}

//! Ablation runner: enumerates config variants along one axis, trains each
//! over a shared seed set and tabulates test metrics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{split, LabelMask};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::train::train;
use crate::model::ArchMode;
use crate::par;
use crate::params::write_atomic;
use crate::spectra::{DerivativeSpec, HsiCube};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Components,
    InputFormat,
    DerivativeOrder,
    Lambda,
    Stages,
    FusedChannels,
    Kernel,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::Components,
        AblationAxis::InputFormat,
        AblationAxis::DerivativeOrder,
        AblationAxis::Lambda,
        AblationAxis::Stages,
        AblationAxis::FusedChannels,
        AblationAxis::Kernel,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationAxis::Components => "components",
            AblationAxis::InputFormat => "input-format",
            AblationAxis::DerivativeOrder => "derivative-order",
            AblationAxis::Lambda => "lambda",
            AblationAxis::Stages => "stages",
            AblationAxis::FusedChannels => "fused-channels",
            AblationAxis::Kernel => "kernel",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let alias = match s {
            "λ" => "lambda",
            "n" | "N" => "stages",
            "c_f" | "C_f" | "cf" => "fused-channels",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == alias)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

/// A named config variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

fn variant(name: impl Into<String>, config: TrainConfig) -> Variant {
    Variant {
        name: name.into(),
        config,
    }
}

/// Channel schedule with `n` stages: a prefix of `base`, or `base` continued
/// with its first increment when `n` is longer.
pub fn schedule_for_stages(base: &[usize], n: usize) -> Vec<usize> {
    let step = base[1].saturating_sub(base[0]).max(1);
    (0..n)
        .map(|i| base.get(i).copied().unwrap_or_else(|| base[base.len() - 1] + step * (i + 1 - base.len())))
        .collect()
}

/// Variants along `axis` derived from `base`.
///
/// Component rows: magnitude-only baseline, then the dual encoder with
/// averaged fusion and cross-entropy only, then learned point weights, then
/// the disparity-enhancing losses. The fused-width axis scales `base` by
/// 1/2, 1, 3/2 and 2, which gives 64..256 for the default width of 128.
pub fn variants(base: &TrainConfig, axis: AblationAxis) -> Vec<Variant> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let dual = |cpfm: bool, hd: bool| {
        with(&|c| {
            c.mode = ArchMode::Dual;
            c.cpfm = cpfm;
            c.hd_loss = hd;
        })
    };
    match axis {
        AblationAxis::Components => vec![
            variant("baseline", with(&|c| c.mode = ArchMode::SingleMagnitude)),
            variant("+dual", dual(false, false)),
            variant("+cpfm", dual(true, false)),
            variant("+hdloss", dual(true, true)),
        ],
        AblationAxis::InputFormat => vec![
            variant("concat", with(&|c| c.mode = ArchMode::ConcatInput)),
            variant(
                "shared-params",
                with(&|c| {
                    c.mode = ArchMode::SharedParams;
                    c.cpfm = false;
                    c.hd_loss = false;
                }),
            ),
            variant("dual", dual(false, false)),
        ],
        AblationAxis::DerivativeOrder => {
            let mut out = Vec::new();
            for order in [1, 2] {
                let set = |mut c: TrainConfig| {
                    c.derivative = DerivativeSpec {
                        order,
                        step: base.derivative.step,
                    };
                    c
                };
                out.push(variant(
                    format!("order{order}/single"),
                    set(with(&|c| c.mode = ArchMode::SingleDerivative)),
                ));
                out.push(variant(format!("order{order}/dual"), set(dual(false, false))));
                out.push(variant(format!("order{order}/full"), set(dual(true, true))));
            }
            out
        }
        AblationAxis::Lambda => [0.5, 1.0, 2.0, 3.0]
            .into_iter()
            .map(|l| variant(format!("lambda={l}"), with(&|c| c.lambda = l)))
            .collect(),
        AblationAxis::Stages => (3..=6)
            .map(|n| {
                variant(
                    format!("N={n}"),
                    with(&|c| c.channel_schedule = schedule_for_stages(&base.channel_schedule, n)),
                )
            })
            .collect(),
        AblationAxis::FusedChannels => [1, 2, 3, 4]
            .into_iter()
            .map(|k| {
                let cf = (base.fused_channels * k / 2).max(1);
                variant(format!("C_f={cf}"), with(&|c| c.fused_channels = cf))
            })
            .collect(),
        AblationAxis::Kernel => [3, 5]
            .into_iter()
            .map(|k| variant(format!("kernel={k}"), with(&|c| c.kernel = k)))
            .collect(),
    }
}

/// Test metrics of one (variant, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub cf1: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    /// Variant names in enumeration order.
    pub variants: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Mean of each metric over seeds for one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantMean {
    pub variant: String,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub cf1: f64,
}

impl AblationTable {
    pub fn means(&self) -> Vec<VariantMean> {
        self.variants
            .iter()
            .map(|name| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| &r.variant == name).collect();
                let n = rows.len() as f64;
                let avg = |f: fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                VariantMean {
                    variant: name.clone(),
                    oa: avg(|r| r.oa),
                    aa: avg(|r| r.aa),
                    kappa: avg(|r| r.kappa),
                    cf1: avg(|r| r.cf1),
                }
            })
            .collect()
    }

    pub fn mean_cf1(&self, variant: &str) -> Option<f64> {
        self.means().into_iter().find(|m| m.variant == variant).map(|m| m.cf1)
    }

    /// Per-seed rows followed by one `mean` row per variant.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "seed", "oa", "aa", "kappa", "cf1"])?;
        let fmt = |v: f64| format!("{v:.6}");
        for r in &self.rows {
            w.write_record([r.variant.clone(), r.seed.to_string(), fmt(r.oa), fmt(r.aa), fmt(r.kappa), fmt(r.cf1)])?;
        }
        for m in self.means() {
            w.write_record([m.variant, "mean".into(), fmt(m.oa), fmt(m.aa), fmt(m.kappa), fmt(m.cf1)])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

/// Trains every variant of `axis` once per seed. Each seed draws its own
/// train/test split with `train_ratio` and its own initialization; runs are
/// independent and execute in parallel.
pub fn ablate(
    cube: &HsiCube,
    mask: &LabelMask,
    base: &TrainConfig,
    axis: AblationAxis,
    seeds: &[u64],
    train_ratio: f64,
) -> Result<AblationTable> {
    run_variants(cube, mask, axis, &variants(base, axis), seeds, train_ratio)
}

/// Like [`ablate`] over an explicit variant list.
pub fn run_variants(
    cube: &HsiCube,
    mask: &LabelMask,
    axis: AblationAxis,
    variants: &[Variant],
    seeds: &[u64],
    train_ratio: f64,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let rows = par::map_slice(&jobs, |&(v, seed)| -> Result<AblationRow> {
        let sp = split(mask, train_ratio, seed)?;
        let cfg = TrainConfig {
            seed,
            ..v.config.clone()
        };
        let run = train(cube, mask, &sp, &cfg)?;
        let r = &run.record.report;
        Ok(AblationRow {
            variant: v.name.clone(),
            seed,
            oa: r.oa,
            aa: r.aa,
            kappa: r.kappa,
            cf1: r.cf1,
            final_loss: run.record.trace.last().map_or(f64::NAN, |b| b.total),
        })
    });
    Ok(AblationTable {
        axis,
        variants: variants.iter().map(|v| v.name.clone()).collect(),
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_rows() {
        let v = variants(&TrainConfig::default(), AblationAxis::Components);
        let names: Vec<&str> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["baseline", "+dual", "+cpfm", "+hdloss"]);
        assert_eq!(v[0].config.mode, ArchMode::SingleMagnitude);
        assert!(!v[1].config.cpfm && !v[1].config.hd_loss);
        assert!(v[2].config.cpfm && !v[2].config.hd_loss);
        assert!(v[3].config.cpfm && v[3].config.hd_loss);
    }

    #[test]
    fn axis_sizes() {
        let base = TrainConfig::default();
        let sizes: Vec<usize> = AblationAxis::ALL.iter().map(|&a| variants(&base, a).len()).collect();
        assert_eq!(sizes, [4, 3, 6, 4, 4, 4, 2]);
        let cf: Vec<usize> = variants(&base, AblationAxis::FusedChannels)
            .iter()
            .map(|v| v.config.fused_channels)
            .collect();
        assert_eq!(cf, [64, 128, 192, 256]);
    }

    #[test]
    fn stage_schedules() {
        assert_eq!(schedule_for_stages(&[64, 128, 192, 256], 3), [64, 128, 192]);
        assert_eq!(schedule_for_stages(&[64, 128, 192, 256], 6), [64, 128, 192, 256, 320, 384]);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("input-format".parse::<AblationAxis>().unwrap(), AblationAxis::InputFormat);
        assert_eq!("C_f".parse::<AblationAxis>().unwrap(), AblationAxis::FusedChannels);
        assert!("colour".parse::<AblationAxis>().is_err());
    }
}

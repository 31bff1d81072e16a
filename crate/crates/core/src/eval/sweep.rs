use std::io::Write;

use serde::{Deserialize, Serialize};

use super::cv::{cross_validate, Method};
use super::metrics::{mean_std, Gain};
use crate::error::{Error, Result};
use crate::factorization::lambda_b_for_weight;
use crate::ingest::Dataset;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Depth,
    LatentDim,
    /// Relative BPR weight.
    Phi,
    NFeatures,
    /// 1 keeps parent factors, 0 fits children from scratch.
    ParentFactors,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Depth => "depth",
            Axis::LatentDim => "latent_dim",
            Axis::Phi => "phi",
            Axis::NFeatures => "n_features",
            Axis::ParentFactors => "parent_factors",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Axis::Depth),
            "latent_dim" | "dim" => Ok(Axis::LatentDim),
            "phi" => Ok(Axis::Phi),
            "n_features" => Ok(Axis::NFeatures),
            "parent_factors" => Ok(Axis::ParentFactors),
            other => Err(Error::Validation(format!("unknown sweep axis {other:?}"))),
        }
    }
}

fn whole(value: f64, axis: Axis) -> Result<usize> {
    if value >= 0.0 && value.fract() == 0.0 {
        Ok(value as usize)
    } else {
        Err(Error::Validation(format!("{} needs a whole number, got {value}", axis.name())))
    }
}

/// Config (and, for `n_features`, dataset) for one sweep cell. Exactly one
/// setting differs from the inputs.
pub fn apply_axis(cfg: &TrainConfig, ds: &Dataset, axis: Axis, value: f64) -> Result<(TrainConfig, Option<Dataset>)> {
    let mut c = cfg.clone();
    let mut data = None;
    match axis {
        Axis::Depth => c.h = whole(value, axis)?,
        Axis::LatentDim => c.hp.d = whole(value, axis)?,
        Axis::Phi => c.hp.lambda_b = lambda_b_for_weight(value, &c.hp, ds.n_users(), ds.n_items()),
        Axis::NFeatures => data = Some(ds.keep_top_features(whole(value, axis)?)),
        Axis::ParentFactors => c.use_parent_factors = value != 0.0,
    }
    c.validate()?;
    Ok((c, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `(value, error message)` for cells that failed.
    pub failures: Vec<(f64, String)>,
}

impl SweepTable {
    pub fn get(&self, value: f64, metric: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value && r.metric == metric)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["axis", "value", "metric", "mean", "std", "folds"])?;
        for r in &self.rows {
            out.write_record([
                r.axis.clone(),
                r.value.to_string(),
                r.metric.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                r.folds.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// One cross-validated training run per value. Failed cells are recorded
/// and the sweep continues.
pub fn sweep(
    ds: &Dataset,
    cfg: &TrainConfig,
    axis: Axis,
    values: &[f64],
    folds: usize,
    ks: &[usize],
    base_seed: u64,
) -> SweepTable {
    let mut table = SweepTable::default();
    for &value in values {
        let cell = apply_axis(cfg, ds, axis, value).and_then(|(c, data)| {
            cross_validate(data.as_ref().unwrap_or(ds), &Method::Fact(c), folds, ks, Gain::Rating, base_seed)
        });
        match cell {
            Ok(report) => {
                for (c, &k) in ks.iter().enumerate() {
                    table.rows.push(SweepRow {
                        axis: axis.name().into(),
                        value,
                        metric: format!("ndcg@{k}"),
                        mean: report.mean[c],
                        std: report.std[c],
                        folds,
                    });
                }
                let (mean, std) = mean_std(&report.objectives);
                table.rows.push(SweepRow {
                    axis: axis.name().into(),
                    value,
                    metric: "objective".into(),
                    mean,
                    std,
                    folds,
                });
            }
            Err(e) => {
                log::warn!("sweep cell {}={value} failed: {e}", axis.name());
                table.failures.push((value, e.to_string()));
            }
        }
    }
    table
}

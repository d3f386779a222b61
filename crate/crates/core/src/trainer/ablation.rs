//! Component ablations and hyperparameter sweeps over a base config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{version, Trainer, TrainConfig};
use crate::error::{GeoLinkError, Result};
use crate::retrieval::{Direction, ResultRecord, RetrievalResult};
use crate::synthetic::Dataset;

/// A named set of overrides applied on top of a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub overrides: BTreeMap<String, toml::Value>,
}

impl Variant {
    fn new(label: impl Into<String>, pairs: &[(&str, toml::Value)]) -> Self {
        Self {
            label: label.into(),
            overrides: pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut table: toml::Table =
            toml::Table::try_from(base).map_err(|e| GeoLinkError::ConfigError(e.to_string()))?;
        for (k, v) in &self.overrides {
            if !table.contains_key(k) {
                return Err(GeoLinkError::ConfigError(format!("unknown config key `{k}` in grid")));
            }
            table.insert(k.clone(), v.clone());
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| GeoLinkError::ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which variants to run. Axes are swept one at a time around the base
/// config unless `cartesian` is set.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub components: bool,
    #[serde(default)]
    pub cartesian: bool,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

impl GridSpec {
    /// `components`, `sensitivity`, `cartesian`, or a path to a file such as
    ///
    /// ```toml
    /// cartesian = false
    /// [axes]
    /// expert_count = [1, 3]
    /// lambda_sc = [0.0, 4.0]
    /// ```
    pub fn parse(arg: &str) -> Result<Self> {
        match arg {
            "components" => Ok(Self { components: true, ..Self::default() }),
            "sensitivity" => Ok(Self::sensitivity(false)),
            "cartesian" => Ok(Self::sensitivity(true)),
            path => {
                let text = fs::read_to_string(path)
                    .map_err(|e| GeoLinkError::ConfigError(format!("grid `{path}`: {e}")))?;
                toml::from_str(&text).map_err(|e| GeoLinkError::ConfigError(e.to_string()))
            }
        }
    }

    pub fn sensitivity(cartesian: bool) -> Self {
        let ints = |v: &[i64]| v.iter().map(|&x| toml::Value::Integer(x)).collect();
        let floats = |v: &[f64]| v.iter().map(|&x| toml::Value::Float(x)).collect();
        let mut axes = BTreeMap::new();
        axes.insert("expert_count".to_string(), ints(&[1, 3, 7, 15]));
        axes.insert("lambda_sc".to_string(), floats(&[0.0, 1.0, 2.0, 4.0, 8.0]));
        axes.insert("vclub_hidden".to_string(), ints(&[16, 64, 256]));
        Self { components: false, cartesian, axes }
    }

    pub fn variants(&self, base: &TrainConfig) -> Result<Vec<Variant>> {
        let mut out = if self.components { ablation_matrix() } else { Vec::new() };
        if self.cartesian {
            let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
            for (k, values) in &self.axes {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        values.iter().map(move |v| {
                            let mut c = c.clone();
                            c.push((k.clone(), v.clone()));
                            c
                        })
                    })
                    .collect();
            }
            if !self.axes.is_empty() {
                out.extend(combos.into_iter().map(|c| Variant {
                    label: c.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(","),
                    overrides: c.into_iter().collect(),
                }));
            }
        } else {
            for (k, values) in &self.axes {
                out.extend(values.iter().map(|v| Variant::new(format!("{k}={v}"), &[(k.as_str(), v.clone())])));
            }
        }
        for v in &out {
            v.apply(base)?;
        }
        if out.is_empty() {
            return Err(GeoLinkError::ConfigError("grid has no variants".into()));
        }
        Ok(out)
    }
}

/// The component ladder: 2D baseline without the fusion block, then cross
/// view only, and each refinement added in turn.
pub fn ablation_matrix() -> Vec<Variant> {
    let b = toml::Value::Boolean;
    vec![
        Variant::new("baseline", &[("mme", b(false)), ("sc", b(false)), ("ga", b(false)), ("rd", b(false))]),
        Variant::new("cc", &[("mme", b(true)), ("sc", b(false)), ("ga", b(false)), ("rd", b(false))]),
        Variant::new("cc+sc", &[("mme", b(true)), ("sc", b(true)), ("ga", b(false)), ("rd", b(false))]),
        Variant::new("cc+sc+ga", &[("mme", b(true)), ("sc", b(true)), ("ga", b(true)), ("rd", b(false))]),
        Variant::new("cc+sc+ga+rd", &[("mme", b(true)), ("sc", b(true)), ("ga", b(true)), ("rd", b(true))]),
    ]
}

/// Sensitivity sweep around `base`, one factor at a time.
pub fn sensitivity_grid(base: &TrainConfig) -> Result<Vec<Variant>> {
    GridSpec::sensitivity(false).variants(base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub label: String,
    pub overrides: BTreeMap<String, toml::Value>,
    pub config_hash: String,
    /// Ranking key: drone→satellite R@1 in percent.
    pub score: f64,
    pub records: Vec<ResultRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub base_config_hash: String,
    pub ranked_by: String,
    pub rows: Vec<SweepRow>,
}

/// Train and evaluate every variant, saving one checkpoint per variant under
/// `out/<label>/` when `out` is given. Variants that resolve to the same
/// config (the base point of each sweep axis) are trained once.
pub fn run_sweep(
    base: &TrainConfig,
    variants: &[Variant],
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<SweepReport> {
    let ks = [1, 5, 10];
    let mut rows = Vec::new();
    let mut done: BTreeMap<String, (Vec<RetrievalResult>, super::Checkpoint)> = BTreeMap::new();
    for v in variants {
        let cfg = v.apply(base)?;
        let hash = cfg.config_hash();
        if !done.contains_key(&hash) {
            log::info!("ablation variant {} ({hash})", v.label);
            let mut t = Trainer::new(cfg.clone(), dataset)?;
            t.run(None)?;
            done.insert(hash.clone(), (t.evaluate_both(&ks)?, t.checkpoint()));
        }
        let (results, checkpoint) = &done[&hash];
        if let Some(dir) = out {
            let sub = dir.join(sanitize(&v.label));
            fs::create_dir_all(&sub)?;
            checkpoint.save(&sub.join("checkpoint.json"))?;
            fs::write(sub.join("config.toml"), cfg.to_toml())?;
        }
        let score = results
            .iter()
            .find(|r| r.direction == Direction::DroneToSatellite)
            .and_then(|r| r.recall_at.get(&1))
            .copied()
            .unwrap_or(0.0)
            * 100.0;
        rows.push(SweepRow {
            rank: 0,
            label: v.label.clone(),
            overrides: v.overrides.clone(),
            config_hash: hash.clone(),
            score,
            records: results.iter().flat_map(|r| r.records(&hash)).collect(),
        });
    }
    // stable sort keeps grid order among ties
    rows.sort_by(|a, b| b.score.total_cmp(&a.score));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(SweepReport {
        version: version().to_string(),
        base_config_hash: base.config_hash(),
        ranked_by: "d2s R@1".into(),
        rows,
    })
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "+-_.=".contains(c) { c } else { '_' })
        .collect()
}

/// Structural checks on a report read back from JSON.
pub fn validate_report(value: &serde_json::Value) -> Result<SweepReport> {
    let report: SweepReport = serde_json::from_value(value.clone())?;
    let bad = |m: String| Err(GeoLinkError::ConfigError(format!("invalid report: {m}")));
    if report.rows.is_empty() {
        return bad("no rows".into());
    }
    for (i, row) in report.rows.iter().enumerate() {
        if row.rank != i + 1 {
            return bad(format!("row {i} has rank {}", row.rank));
        }
        if i > 0 && row.score > report.rows[i - 1].score {
            return bad(format!("row {i} outranks its predecessor"));
        }
        if !(0.0..=100.0).contains(&row.score) {
            return bad(format!("score {} out of range", row.score));
        }
        if row.records.is_empty() || row.records.iter().any(|r| r.config_hash != row.config_hash) {
            return bad(format!("row {} records do not match its config", row.label));
        }
    }
    Ok(report)
}

/// `report.json`, a Markdown table `report.md`, plus the flat result
/// records and the aggregate CSV.
pub fn write_report(report: &SweepReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut md = format!("| rank | variant | {} | config |\n|---|---|---|---|\n", report.ranked_by);
    for r in &report.rows {
        md.push_str(&format!("| {} | {} | {:.2} | {} |\n", r.rank, r.label, r.score, r.config_hash));
    }
    fs::write(dir.join("report.md"), md)?;
    let records: Vec<&ResultRecord> = report.rows.iter().flat_map(|r| &r.records).collect();
    fs::write(dir.join("results.json"), serde_json::to_string_pretty(&records)?)?;

    let mut w = csv::Writer::from_path(dir.join("aggregate.csv")).map_err(csv_err)?;
    w.write_record(["variant", "direction", "R@1", "R@5", "R@10", "AP"]).map_err(csv_err)?;
    for row in &report.rows {
        for dir_name in [Direction::DroneToSatellite, Direction::SatelliteToDrone] {
            let of = |k: usize| {
                row.records
                    .iter()
                    .find(|r| r.direction == dir_name && r.k == k)
                    .map(|r| format!("{:.2}", r.recall * 100.0))
                    .unwrap_or_default()
            };
            let ap = row
                .records
                .iter()
                .find(|r| r.direction == dir_name)
                .map(|r| format!("{:.2}", r.ap * 100.0))
                .unwrap_or_default();
            w.write_record([row.label.clone(), dir_name.to_string(), of(1), of(5), of(10), ap])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> GeoLinkError {
    GeoLinkError::ConfigError(format!("csv: {e}"))
}

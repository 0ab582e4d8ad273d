//! Parameter audit table and loss-curve plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;

use crate::backbone::BackboneConfig;
use crate::datamodel::TaskId;
use crate::distillation::DistillMode;
use crate::error::{invalid, Error, Result};
use crate::models::{Model, ModelConfig, ModelKind, ParamCount};
use crate::nn::ParamGroup;
use crate::trainer::RunLog;

pub const LOSS_PLOT: &str = "loss_curve.svg";

/// Label of the row that sums the three single-task networks.
pub const ONE_TASK_SUM: &str = "one_task_sum";

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub label: String,
    pub count: ParamCount,
    /// `total / mtan total`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamAudit {
    pub rows: Vec<AuditRow>,
}

fn count_of(
    kind: ModelKind,
    backbone: &BackboneConfig,
    num_classes: usize,
    mode: DistillMode,
) -> Result<ParamCount> {
    let cfg = ModelConfig::new(kind, backbone.clone(), num_classes).with_distill_mode(mode);
    Ok(Model::build(&cfg, 0)?.count_parameters())
}

impl ParamAudit {
    /// Counts every variant; `distill_mode` applies to atinet.
    pub fn run(
        backbone: &BackboneConfig,
        num_classes: usize,
        distill_mode: DistillMode,
    ) -> Result<Self> {
        let mut counts: Vec<(String, ParamCount)> = Vec::new();
        let mut sum = ParamCount {
            groups: ParamGroup::ALL.iter().map(|&g| (g, 0)).collect(),
            total: 0,
        };
        for t in TaskId::ALL {
            let kind = ModelKind::OneTask(t);
            let c = count_of(kind, backbone, num_classes, distill_mode)?;
            for (g, n) in &c.groups {
                *sum.groups.entry(*g).or_default() += n;
            }
            sum.total += c.total;
            counts.push((kind.to_string(), c));
        }
        counts.push((ONE_TASK_SUM.to_string(), sum));
        for kind in [
            ModelKind::Split,
            ModelKind::Mtan,
            ModelKind::PadNet,
            ModelKind::AtiNet,
        ] {
            counts.push((
                kind.to_string(),
                count_of(kind, backbone, num_classes, distill_mode)?,
            ));
        }
        let mtan = counts
            .iter()
            .find(|(l, _)| l == "mtan")
            .map(|(_, c)| c.total)
            .expect("mtan row present") as f64;
        let rows = counts
            .into_iter()
            .map(|(label, count)| AuditRow {
                ratio: count.total as f64 / mtan,
                label,
                count,
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn row(&self, label: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn ratio(&self, label: &str) -> Result<f64> {
        self.row(label)
            .map(|r| r.ratio)
            .ok_or_else(|| invalid!("no audit row {label:?}"))
    }

    /// Fixed-width table with one column per parameter group and the
    /// ratio to mtan at three decimals.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<22}{:>12}", "variant", "total");
        for g in ParamGroup::ALL {
            let _ = write!(s, "{:>14}", g.name());
        }
        let _ = writeln!(s, "{:>9}", "vs_mtan");
        for r in &self.rows {
            let _ = write!(s, "{:<22}{:>12}", r.label, r.count.total);
            for g in ParamGroup::ALL {
                let _ = write!(s, "{:>14}", r.count.groups.get(&g).copied().unwrap_or(0));
            }
            let _ = writeln!(s, "{:>9.3}", r.ratio);
        }
        s
    }
}

/// Per-epoch training losses as an SVG line chart.
pub fn write_loss_plot(log: &RunLog, path: &Path) -> Result<()> {
    if log.records.is_empty() {
        return Err(invalid!("cannot plot an empty run log"));
    }
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &log.records {
        let x = r.epoch as f64;
        series
            .entry("total".into())
            .or_default()
            .push((x, r.total_loss));
        for (t, &v) in r.train_loss.iter() {
            if r.lambda[t] != 0.0 {
                series.entry(t.short().into()).or_default().push((x, v));
            }
        }
    }
    let ys = series
        .values()
        .flatten()
        .map(|p| p.1)
        .filter(|v| v.is_finite());
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let last = log.records.last().map_or(1, |r| r.epoch) as f64;
    let first = log.records[0].epoch as f64;

    let plot_err =
        |e: &dyn std::fmt::Display| Error::Format(format!("{}: plot failed: {e}", path.display()));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(first..last.max(first + 1.0), (lo - pad)..(hi + pad))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::PerTask;
    use crate::trainer::EpochRecord;

    #[test]
    fn tiny_audit_partitions_and_ratios() {
        let audit = ParamAudit::run(&BackboneConfig::tiny(), 5, DistillMode::AdditiveGate).unwrap();
        for r in &audit.rows {
            assert_eq!(
                r.count.groups.values().sum::<usize>(),
                r.count.total,
                "{}",
                r.label
            );
        }
        assert_eq!(audit.ratio("mtan").unwrap(), 1.0);
        let singles: usize = TaskId::ALL
            .iter()
            .map(|t| {
                audit
                    .row(&ModelKind::OneTask(*t).to_string())
                    .unwrap()
                    .count
                    .total
            })
            .sum();
        assert_eq!(audit.row(ONE_TASK_SUM).unwrap().count.total, singles);
        let table = audit.to_table();
        assert_eq!(table.lines().count(), audit.rows.len() + 1);
        assert!(table
            .lines()
            .any(|l| l.starts_with("mtan") && l.ends_with("1.000")));
        assert!(audit.ratio("nope").is_err());
    }

    #[test]
    fn loss_plot_is_svg() {
        let rec = |epoch: usize, total: f64| EpochRecord {
            epoch,
            lr: 1e-3,
            distillation_active: false,
            lambda: PerTask([1.0, 1.0, 0.0]),
            train_loss: PerTask([total, total / 2.0, 0.0]),
            total_loss: total,
            grad_norm_max: BTreeMap::new(),
            val: None,
            wall_seconds: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(LOSS_PLOT);
        assert!(write_loss_plot(&RunLog::default(), &path).is_err());
        let log = RunLog {
            records: vec![rec(1, 2.0), rec(2, 1.0), rec(3, -0.5)],
        };
        write_loss_plot(&log, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("depth") && !svg.contains("normals"));
    }
}

//! Controlled ablation runs: every arm shares data, seed and optimizer
//! settings and differs from the base configuration in architecture only.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::pagf::PagfMode;
use crate::train::{train, Metrics, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationTable {
    Overall,
    Man,
    Pagf,
}

impl AblationTable {
    pub const ALL: [AblationTable; 3] = [AblationTable::Overall, AblationTable::Man, AblationTable::Pagf];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationTable::Overall => "overall",
            AblationTable::Man => "man",
            AblationTable::Pagf => "pagf",
        }
    }
}

impl FromStr for AblationTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation table `{s}` (expected overall, man or pagf)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub label: String,
    pub config: RunConfig,
}

fn arm(label: &str, base: &RunConfig, edit: impl FnOnce(&mut RunConfig)) -> AblationArm {
    let mut config = base.clone();
    edit(&mut config);
    AblationArm {
        label: label.to_string(),
        config,
    }
}

/// The row configurations of `table`, in table order.
pub fn arms(table: AblationTable, base: &RunConfig) -> Vec<AblationArm> {
    let full = |c: &mut RunConfig| {
        c.network.use_msab = true;
        c.network.pagf_mode = PagfMode::Full;
    };
    match table {
        AblationTable::Overall => vec![
            arm("U-KAN (Baseline)", base, |c| {
                c.network.use_msab = false;
                c.network.pagf_mode = PagfMode::SimpleSkip;
            }),
            arm("U-MAN (Full)", base, full),
            arm("w/o MAN Module", base, |c| {
                full(c);
                c.network.use_msab = false;
            }),
            arm("w/o PAGF Module", base, |c| {
                full(c);
                c.network.pagf_mode = PagfMode::SimpleSkip;
            }),
        ],
        AblationTable::Man => {
            let depth = |k: usize| {
                move |c: &mut RunConfig| {
                    c.network.use_msab = true;
                    c.network.man_depths = [k; 3];
                }
            };
            vec![
                arm("w/o MSAB (KAN only)", base, |c| c.network.use_msab = false),
                arm("Single-scale (3×3)", base, |c| {
                    c.network.use_msab = true;
                    c.network.msab_kernels = vec![3];
                }),
                arm("Multi-scale (1×1,3×3,5×5)", base, |c| {
                    c.network.use_msab = true;
                    c.network.msab_kernels = vec![1, 3, 5];
                }),
                arm("1-layer KAN", base, depth(1)),
                arm("3-layer KAN", base, depth(3)),
                arm("5-layer KAN", base, depth(5)),
            ]
        }
        AblationTable::Pagf => PagfMode::ALL
            .into_iter()
            .map(|m| arm(m.label(), base, |c| c.network.pagf_mode = m))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// Validation metrics of the arm's best epoch.
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub parameters: usize,
    /// Label of an earlier row with the identical configuration, if any.
    pub same_as: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub table: AblationTable,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("configuration\tiou\tf1\tval_loss\tbest_epoch\tparameters\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.label, r.metrics.iou, r.metrics.f1, r.metrics.loss, r.best_epoch, r.parameters
            ));
        }
        s
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(13);
        writeln!(f, "{:<w$}  {:>7}  {:>7}  {:>10}  {:>10}", "Configuration", "IoU (%)", "F1 (%)", "best epoch", "parameters")?;
        for r in &self.rows {
            // width counts chars, so pad by hand for labels like "3×3"
            let pad = w - r.label.chars().count();
            writeln!(
                f,
                "{}{}  {:>7.2}  {:>7.2}  {:>10}  {:>10}",
                r.label,
                " ".repeat(pad),
                100.0 * r.metrics.iou,
                100.0 * r.metrics.f1,
                r.best_epoch,
                r.parameters
            )?;
        }
        Ok(())
    }
}

fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_string()
}

/// Trains and evaluates every arm of `table`. Arms with a configuration
/// identical to an earlier row reuse its result. `on_row` sees each row as
/// soon as it is done.
pub fn ablate(
    table: AblationTable,
    base: &RunConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    base.validate()?;
    let arms = arms(table, base);
    let mut rows: Vec<AblationRow> = Vec::with_capacity(arms.len());
    for (i, a) in arms.iter().enumerate() {
        let row = match arms[..i].iter().position(|b| b.config == a.config) {
            Some(j) => AblationRow {
                label: a.label.clone(),
                same_as: Some(rows[j].label.clone()),
                ..rows[j].clone()
            },
            None => {
                let dir = out_dir.map(|d| d.join(slug(&a.label)));
                let out = train(&a.config, train_set, val_set, dir.as_deref())?;
                AblationRow {
                    label: a.label.clone(),
                    metrics: out.report.best,
                    best_epoch: out.report.best_epoch,
                    parameters: out.report.parameters,
                    same_as: None,
                }
            }
        };
        on_row(&row);
        rows.push(row);
    }
    let report = AblationReport { table, rows };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.tsv"), report.to_tsv())?;
        fs::write(dir.join("report.txt"), report.to_string())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::network::NetworkConfig;

    #[test]
    fn pagf_table_has_six_rows_in_order() {
        let labels: Vec<String> = arms(AblationTable::Pagf, &RunConfig::default())
            .into_iter()
            .map(|a| a.label)
            .collect();
        assert_eq!(
            labels,
            [
                "Simple Skip Connection",
                "w/o Channel Attention",
                "w/o Spatial Attention",
                "w/o Gating Mechanism",
                "Element-wise Addition",
                "Full PAGF"
            ]
        );
    }

    #[test]
    fn man_table_covers_kernels_and_depths() {
        let a = arms(AblationTable::Man, &RunConfig::default());
        assert_eq!(a.len(), 6);
        assert!(!a[0].config.network.use_msab);
        assert_eq!(a[1].config.network.msab_kernels, vec![3]);
        assert_eq!(a[2].config.network.msab_kernels, vec![1, 3, 5]);
        let depths: Vec<[usize; 3]> = a[3..].iter().map(|x| x.config.network.man_depths).collect();
        assert_eq!(depths, [[1; 3], [3; 3], [5; 3]]);
        // with the default base, multi-scale and 3-layer rows are the same model
        assert_eq!(a[2].config, a[4].config);
    }

    #[test]
    fn overall_arms_differ_only_in_architecture() {
        let base = RunConfig::default();
        let a = arms(AblationTable::Overall, &base);
        let labels: Vec<&str> = a.iter().map(|x| x.label.as_str()).collect();
        assert_eq!(labels, ["U-KAN (Baseline)", "U-MAN (Full)", "w/o MAN Module", "w/o PAGF Module"]);
        assert_eq!(a[1].config, base);
        assert_eq!(a[0].config.network.pagf_mode, PagfMode::SimpleSkip);
        assert!(!a[0].config.network.use_msab);
        for x in &a {
            assert_eq!(x.config.optim, base.optim);
            assert_eq!(x.config.loss, base.loss);
        }
    }

    #[test]
    fn unknown_table_is_rejected() {
        assert!("tables".parse::<AblationTable>().is_err());
        assert_eq!("man".parse::<AblationTable>().unwrap(), AblationTable::Man);
    }

    #[test]
    fn duplicate_configs_are_trained_once_and_written() {
        let mut base = RunConfig::default();
        base.network = NetworkConfig {
            embed_dims: [2, 3, 4, 5, 6],
            man_depths: [1, 1, 1],
            ..NetworkConfig::desk()
        };
        base.optim.epochs = 1;
        base.optim.batch_size = 4;
        let all = generate_dataset(&DatasetSpec {
            n_samples: 5,
            size: 32,
            ..DatasetSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut seen = 0;
        let r = ablate(AblationTable::Man, &base, &all[..4], &all[4..], Some(dir.path()), |_| seen += 1).unwrap();
        assert_eq!(seen, 6);
        // with depth-1 stages the 1-layer row is the multi-scale row
        assert_eq!(r.rows[3].same_as.as_deref(), Some("Multi-scale (1×1,3×3,5×5)"));
        assert_eq!(r.rows[3].metrics, r.rows[2].metrics);
        assert_eq!(r.rows.iter().filter(|x| x.same_as.is_some()).count(), 1);
        let tsv = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 7);
        let text = r.to_string();
        assert_eq!(text.lines().count(), 7);
        let widths: Vec<usize> = text.lines().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{text}");
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("w/o MSAB (KAN only)"), "w_o_msab_kan_only");
        assert_eq!(slug("Single-scale (3×3)"), "single_scale_3_3");
    }
}

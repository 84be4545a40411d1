//! Multi-run studies: k-fold cross-validation and the cumulative ablation ladder.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::Recipe;
use crate::autodiff::Activation;
use crate::config::{BlockDropout, RunConfig};
use crate::data::fold_plan;
use crate::error::{Error, Result};
use crate::layers::DropoutPosition;
use crate::metrics::MetricsReport;
use crate::model::BlockKind;
use crate::optim::OptimizerKind;
use crate::train::{load_manifest, load_splits, write_text, Dataset, EvalSplit, RunOptions, Trainer};

pub const STUDY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub schema_version: u32,
    pub k: usize,
    pub run_config: RunConfig,
    /// Fold index of every manifest row.
    pub assignment: Vec<usize>,
    pub folds: Vec<FoldOutcome>,
    /// Over the folds where each metric is defined.
    pub aggregate: BTreeMap<String, MeanStd>,
}

impl CrossvalReport {
    pub fn failed_folds(&self) -> Vec<usize> {
        self.folds.iter().filter(|f| f.error.is_some()).map(|f| f.fold).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}-fold cross-validation\n", self.k);
        for f in &self.folds {
            match (&f.report, &f.error) {
                (Some(r), _) => s.push_str(&format!(
                    "fold {}: acc {:.4} auc {} kappa {} (train {}, test {})\n",
                    f.fold,
                    r.acc,
                    r.auc,
                    r.kappa_quadratic.as_ref().map_or("-".into(), |k| k.to_string()),
                    f.train_size,
                    f.test_size
                )),
                (None, Some(e)) => s.push_str(&format!("fold {}: FAILED: {e}\n", f.fold)),
                (None, None) => s.push_str(&format!("fold {}: no report\n", f.fold)),
            }
        }
        for (name, m) in &self.aggregate {
            let sd = m.std.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!("{name}: {:.4} ± {sd} (n = {})\n", m.mean, m.n));
        }
        s
    }
}

/// Named metrics of a report that are aggregated across runs.
pub fn report_metrics(r: &MetricsReport) -> Vec<(&'static str, Option<f64>)> {
    let mut v = vec![
        ("acc", Some(r.acc)),
        ("auc", r.auc.value()),
        ("f1_macro", Some(r.f1_macro)),
        ("f1_weighted", Some(r.f1_weighted)),
    ];
    if let Some(k) = &r.kappa_quadratic {
        v.push(("kappa_quadratic", k.value()));
    }
    v
}

pub fn aggregate(reports: &[&MetricsReport]) -> BTreeMap<String, MeanStd> {
    let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (name, v) in report_metrics(r) {
            let e = by_name.entry(name.to_string()).or_default();
            if let Some(v) = v {
                e.push(v);
            }
        }
    }
    by_name
        .into_iter()
        .filter_map(|(k, v)| MeanStd::of(&v).map(|m| (k, m)))
        .collect()
}

/// Train one model per fold of the training manifest and score it on the
/// held-out fold. Fold `f` trains with seed `seed + f`. A failing fold is
/// recorded and the remaining folds still run.
pub fn crossval(cfg: &RunConfig, k: usize, output_dir: Option<&Path>) -> Result<CrossvalReport> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs k ≥ 2, got {k}")));
    }
    cfg.validate()?;
    let manifest = load_manifest(cfg, &cfg.data.manifest, &cfg.data.root())?;
    let plan = fold_plan(&manifest, k, cfg.seed)?;
    let all = Dataset::load(&manifest, cfg.aug.resize)?;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let (tr, te) = plan.split(f);
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed.wrapping_add(f as u64);
        let (train, test) = (all.subset(&tr), all.subset(&te));
        let opts = RunOptions {
            output_dir: output_dir.map(|d| d.join(format!("fold{f}"))),
            stop_after: None,
        };
        log::info!("fold {f}: {} train / {} test", train.len(), test.len());
        let outcome = run_fold(&fold_cfg, &train, &test, &opts);
        let (report, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => {
                log::warn!("fold {f} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        folds.push(FoldOutcome {
            fold: f,
            seed: fold_cfg.seed,
            train_size: tr.len(),
            test_size: te.len(),
            report,
            error,
        });
    }
    let reports: Vec<&MetricsReport> = folds.iter().filter_map(|f| f.report.as_ref()).collect();
    let report = CrossvalReport {
        schema_version: STUDY_SCHEMA_VERSION,
        k,
        run_config: cfg.clone(),
        assignment: plan.assignment.clone(),
        aggregate: aggregate(&reports),
        folds,
    };
    if let Some(dir) = output_dir {
        write_text(&dir.join("crossval.json"), &report.to_json())?;
    }
    Ok(report)
}

fn run_fold(cfg: &RunConfig, train: &Dataset, test: &Dataset, opts: &RunOptions) -> Result<MetricsReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Manifest("fold has an empty train or test side".into()));
    }
    let mut t = Trainer::new(cfg, train, test, EvalSplit::Holdout)?;
    t.run(train, test, opts)?;
    t.log
        .final_report
        .clone()
        .ok_or_else(|| Error::Contract("run finished without a final report".into()))
}

/// One component switched between its baseline and full setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Toggle {
    /// Plain residual blocks → inverted linear residual blocks.
    Ilrb,
    /// Recipe I → recipe III augmentation.
    Da,
    /// No block dropout → spatial dropout after the projection.
    D,
    /// AdamW → AdamP.
    O,
    /// SiLU → ReLU6.
    Af,
}

impl Toggle {
    pub const ALL: [Toggle; 5] = [Toggle::Ilrb, Toggle::Da, Toggle::D, Toggle::O, Toggle::Af];

    pub fn header(self) -> &'static str {
        match self {
            Toggle::Ilrb => "ILRB",
            Toggle::Da => "DA",
            Toggle::D => "D",
            Toggle::O => "O",
            Toggle::Af => "AF",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, on: bool) {
        match self {
            Toggle::Ilrb => {
                cfg.model.block_kind = Some(if on { BlockKind::Ilrb } else { BlockKind::PlainResidual })
            }
            Toggle::Da => cfg.aug.recipe = if on { Recipe::III } else { Recipe::I },
            Toggle::D => {
                if on {
                    cfg.model.dropout = Some(BlockDropout::Spatial);
                    cfg.model.dropout_position = Some(DropoutPosition::AfterProject);
                } else {
                    cfg.model.dropout = Some(BlockDropout::None);
                    cfg.model.dropout_position = None;
                }
            }
            Toggle::O => {
                cfg.optimizer.name = if on { OptimizerKind::AdamP } else { OptimizerKind::AdamW }
            }
            Toggle::Af => {
                cfg.model.activation = Some(if on { Activation::Relu6 } else { Activation::Silu })
            }
        }
    }
}

impl std::str::FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ilrb" | "block_kind" => Ok(Toggle::Ilrb),
            "da" | "aug" | "recipe" => Ok(Toggle::Da),
            "d" | "dropout" => Ok(Toggle::D),
            "o" | "optimizer" => Ok(Toggle::O),
            "af" | "activation" => Ok(Toggle::Af),
            other => Err(Error::Config(format!(
                "unknown ablation toggle `{other}` (expected ilrb, da, d, o or af)"
            ))),
        }
    }
}

/// Toggle order of a named grid or a comma-separated toggle list.
pub fn parse_grid(grid: &str) -> Result<Vec<Toggle>> {
    if grid.trim().eq_ignore_ascii_case("table1") {
        return Ok(Toggle::ALL.to_vec());
    }
    let mut out: Vec<Toggle> = Vec::new();
    for part in grid.split(',').filter(|p| !p.trim().is_empty()) {
        let t: Toggle = part.parse()?;
        if out.contains(&t) {
            return Err(Error::Config(format!("toggle `{}` listed twice", t.header())));
        }
        out.push(t);
    }
    Ok(out)
}

/// Configs of the cumulative ladder: row `r` switches on the first `r`
/// toggles and keeps the rest at their baseline. Components outside the grid
/// keep the base config's setting.
pub fn ladder(base: &RunConfig, toggles: &[Toggle]) -> Vec<(Vec<(Toggle, bool)>, RunConfig)> {
    (0..=toggles.len())
        .map(|r| {
            let mut cfg = base.clone();
            let marks: Vec<(Toggle, bool)> =
                toggles.iter().enumerate().map(|(i, &t)| (t, i < r)).collect();
            for &(t, on) in &marks {
                t.apply(&mut cfg, on);
            }
            (marks, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub marks: Vec<(Toggle, bool)>,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AblationRow {
    pub fn auc(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.auc.value())
    }

    pub fn kappa(&self) -> Option<f64> {
        self.report
            .as_ref()
            .and_then(|r| r.kappa_quadratic.as_ref())
            .and_then(|k| k.value())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub toggles: Vec<Toggle>,
    pub eval_split: EvalSplit,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Mark columns for every component, then AUC and Kappa in percent.
    /// Components outside the grid show `-`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let heads: Vec<String> = Toggle::ALL.iter().map(|t| format!("{:^6}", t.header())).collect();
        s.push_str(&format!("{}| {:>7} {:>7}\n", heads.join(""), "AUC", "Kappa"));
        s.push_str(&format!("{}+{}\n", "-".repeat(30), "-".repeat(17)));
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        for row in &self.rows {
            let cells: Vec<String> = Toggle::ALL
                .iter()
                .map(|t| {
                    let m = match row.marks.iter().find(|(u, _)| u == t) {
                        Some((_, true)) => "✓",
                        Some((_, false)) => "✗",
                        None => "-",
                    };
                    format!("{m:^6}")
                })
                .collect();
            match &row.error {
                Some(e) => s.push_str(&format!("{}| failed: {e}\n", cells.join(""))),
                None => s.push_str(&format!(
                    "{}| {:>7} {:>7}\n",
                    cells.join(""),
                    pct(row.auc()),
                    pct(row.kappa())
                )),
            }
        }
        s
    }
}

/// Run every ladder row on the base config's data splits.
pub fn ablate(base: &RunConfig, grid: &str, output_dir: Option<&Path>) -> Result<AblationTable> {
    let toggles = parse_grid(grid)?;
    let rows_cfg = ladder(base, &toggles);
    for (_, c) in &rows_cfg {
        c.validate()?;
    }
    let splits = load_splits(base)?;
    let mut rows = Vec::with_capacity(rows_cfg.len());
    for (r, (marks, cfg)) in rows_cfg.into_iter().enumerate() {
        let opts = RunOptions {
            output_dir: output_dir.map(|d| d.join(format!("row{r}"))),
            stop_after: None,
        };
        log::info!("ablation row {r}: {marks:?}");
        let result = (|| {
            let mut t = Trainer::new(&cfg, &splits.train, &splits.eval, splits.eval_split)?;
            t.run(&splits.train, &splits.eval, &opts)?;
            Ok::<_, Error>(t.log.final_report.clone())
        })();
        let (report, error) = match result {
            Ok(r) => (r, None),
            Err(e) => {
                log::warn!("ablation row {r} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        rows.push(AblationRow {
            marks,
            config_hash: cfg.hash(),
            report,
            error,
        });
    }
    let table = AblationTable {
        schema_version: STUDY_SCHEMA_VERSION,
        toggles,
        eval_split: splits.eval_split,
        rows,
    };
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("ablation.json"), &table.to_json())?;
        write_text(&dir.join("ablation.txt"), &table.to_text())?;
    }
    Ok(table)
}

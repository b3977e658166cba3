use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Toggles};
use super::stages::{prepare_target, run_from, sample_support, starting_model, TargetSplit};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::IOU_THRESHOLDS;
use crate::rng::derive_seed;

/// First line of `results.csv`; bump when the columns change.
pub const RESULTS_HEADER: &str = "# fsodlab ablation results v1";

/// The five rows, in table order: baseline, then UP, PSS, EN and DA
/// switched on cumulatively.
pub fn ablation_rows() -> [Toggles; 5] {
    let mut rows = [Toggles::all_off(); 5];
    for (i, row) in rows.iter_mut().enumerate() {
        row.unfrozen = i >= 1;
        row.pss = i >= 2;
        row.embedding_norm = i >= 3;
        row.domain_adapt = i >= 4;
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// 1-based row of the grid.
    pub row: usize,
    pub toggles: Toggles,
    pub shots: usize,
    /// Seed as listed in the grid; the run itself uses it mixed with the
    /// master seed.
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub map_coco: f64,
    /// mAP at each IoU threshold; `None` where no class was scorable.
    pub per_threshold: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub master_seed: u64,
    pub cells: Vec<CellResult>,
}

fn run_seed(master: u64, listed: u64) -> u64 {
    derive_seed(master, listed)
}

/// Runs rows × shots × seeds. Base models and target splits are shared
/// across the cells that need them. A failing cell is recorded and the grid
/// goes on. `progress` sees each cell as it finishes.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    master_seed: u64,
    rows: &[Toggles],
    progress: &(dyn Fn(&CellResult) + Sync),
) -> Result<AblationOutcome> {
    cfg.validate()?;
    let settings = &cfg.ablation;
    let row_cfg = |t: &Toggles| ExperimentConfig {
        toggles: *t,
        ..cfg.clone()
    };

    // Per seed: the target split and, for each classifier kind a DA row
    // needs, the base-trained model.
    type SeedPrep = (std::result::Result<TargetSplit, String>, HashMap<bool, std::result::Result<Detector, String>>);
    let prep_seed = |listed: &u64| -> SeedPrep {
        let seed = run_seed(master_seed, *listed);
        let split = prepare_target(cfg, seed).map_err(|e| e.to_string());
        let mut bases = HashMap::new();
        for t in rows.iter().filter(|t| t.domain_adapt) {
            bases.entry(t.embedding_norm).or_insert_with(|| {
                let c = row_cfg(t);
                starting_model(&c, seed, 0).map(|(d, _)| d).map_err(|e| e.to_string())
            });
        }
        (split, bases)
    };
    let preps: Vec<SeedPrep> = if settings.parallel {
        settings.seeds.par_iter().map(prep_seed).collect()
    } else {
        settings.seeds.iter().map(prep_seed).collect()
    };

    let mut jobs = Vec::new();
    for (r, t) in rows.iter().enumerate() {
        for &k in &settings.shots {
            for (si, &listed) in settings.seeds.iter().enumerate() {
                jobs.push((r, *t, k, si, listed));
            }
        }
    }
    let run_cell = |&(r, t, k, si, listed): &(usize, Toggles, usize, usize, u64)| -> CellResult {
        let seed = run_seed(master_seed, listed);
        let c = row_cfg(&t);
        let (split, bases) = &preps[si];
        let outcome = (|| -> std::result::Result<CellMetrics, String> {
            let split = split.as_ref().map_err(Clone::clone)?;
            let support = sample_support(&c, split, k, seed).map_err(|e| e.to_string())?;
            let start = if t.domain_adapt {
                bases[&t.embedding_norm].as_ref().map_err(Clone::clone)?.clone()
            } else {
                starting_model(&c, seed, support.categories.len())
                    .map_err(|e| e.to_string())?
                    .0
            };
            let res = run_from(&c, seed, k, split, &support, start, None).map_err(|e| e.to_string())?;
            Ok(CellMetrics {
                map_coco: res.report.map_coco,
                per_threshold: res.report.per_threshold_map.values().copied().collect(),
            })
        })();
        let cell = CellResult {
            row: r + 1,
            toggles: t,
            shots: k,
            seed: listed,
            outcome,
        };
        progress(&cell);
        cell
    };
    let cells = if settings.parallel {
        jobs.par_iter().map(run_cell).collect()
    } else {
        jobs.iter().map(run_cell).collect()
    };
    Ok(AblationOutcome { master_seed, cells })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl AblationOutcome {
    /// Versioned header comment, column names, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{RESULTS_HEADER}");
        s.push_str("row,label,unfrozen,pss,embedding_norm,domain_adapt,shots,seed,status,map_coco");
        for t in IOU_THRESHOLDS {
            let _ = write!(s, ",map_{:02}", (t * 100.0).round() as u32);
        }
        s.push('\n');
        for c in &self.cells {
            let t = c.toggles;
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.row,
                t.label(),
                t.unfrozen,
                t.pss,
                t.embedding_norm,
                t.domain_adapt,
                c.shots,
                c.seed
            );
            match &c.outcome {
                Ok(m) => {
                    let _ = write!(s, ",ok,{:.6}", m.map_coco);
                    for v in &m.per_threshold {
                        let _ = write!(s, ",{}", fmt_opt(*v));
                    }
                }
                Err(e) => {
                    let msg = e.replace(['"', '\n'], " ");
                    let _ = write!(s, ",\"error: {msg}\",");
                    s.push_str(&",".repeat(IOU_THRESHOLDS.len()));
                }
            }
            s.push('\n');
        }
        s
    }

    /// Median over seeds of each (row, shots) cell's mAP; `None` when every
    /// seed failed.
    pub fn median_table(&self) -> Vec<(usize, Toggles, Vec<(usize, Option<f64>, usize)>)> {
        let mut rows: Vec<(usize, Toggles)> = Vec::new();
        let mut shots: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !rows.iter().any(|(r, _)| *r == c.row) {
                rows.push((c.row, c.toggles));
            }
            if !shots.contains(&c.shots) {
                shots.push(c.shots);
            }
        }
        rows.into_iter()
            .map(|(r, t)| {
                let per_shot = shots
                    .iter()
                    .map(|&k| {
                        let vals: Vec<f64> = self
                            .cells
                            .iter()
                            .filter(|c| c.row == r && c.shots == k)
                            .filter_map(|c| c.outcome.as_ref().ok().map(|m| m.map_coco))
                            .collect();
                        (k, median(&vals), vals.len())
                    })
                    .collect();
                (r, t, per_shot)
            })
            .collect()
    }

    /// Markdown ablation table: one row per toggle set, mAP (in percent) per
    /// shot count, then the change against row 1.
    pub fn summary_markdown(&self) -> String {
        let table = self.median_table();
        let mark = |b: bool| if b { "✓" } else { "×" };
        let mut s = String::from("# Ablation summary\n\n");
        let _ = writeln!(
            s,
            "Median mAP@[0.50:0.95] over seeds, in percent. Row 1 is the frozen baseline: \
             backbone and RPN frozen, linear classifier, raw support, no base-domain training. \
             Master seed {}.\n",
            self.master_seed
        );
        let shots: Vec<usize> = table.first().map(|r| r.2.iter().map(|c| c.0).collect()).unwrap_or_default();
        s.push_str("| # | UP | PSS | EN | DA |");
        for k in &shots {
            let _ = write!(s, " {k}-shot |");
        }
        for k in &shots {
            let _ = write!(s, " Δ {k}-shot |");
        }
        s.push('\n');
        s.push_str("|---|---|---|---|---|");
        s.push_str(&"---|".repeat(2 * shots.len()));
        s.push('\n');
        let base: Vec<Option<f64>> = table.first().map(|r| r.2.iter().map(|c| c.1).collect()).unwrap_or_default();
        for (i, (r, t, cells)) in table.iter().enumerate() {
            let _ = write!(
                s,
                "| {r} | {} | {} | {} | {} |",
                mark(t.unfrozen),
                mark(t.pss),
                mark(t.embedding_norm),
                mark(t.domain_adapt)
            );
            for (_, v, _) in cells {
                let _ = write!(s, " {} |", v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "n/a".into()));
            }
            for (j, (_, v, _)) in cells.iter().enumerate() {
                let d = match (i, v, base.get(j).copied().flatten()) {
                    (0, _, _) => String::new(),
                    (_, Some(v), Some(b)) => format!("{:+.1}", 100.0 * (v - b)),
                    _ => "n/a".into(),
                };
                let _ = write!(s, " {d} |");
            }
            s.push('\n');
        }
        let failed = self.cells.iter().filter(|c| c.outcome.is_err()).count();
        if failed > 0 {
            let _ = writeln!(s, "\n{failed} run(s) failed; see results.csv.");
        }
        s
    }

    /// Writes `results.csv`, `summary.md`, and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("results.csv", self.to_csv())?;
        put("summary.md", self.summary_markdown())?;
        let json = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: dir.join("report.json"),
            source,
        })?;
        put("report.json", json + "\n")
    }
}

pub fn median(vals: &[f64]) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

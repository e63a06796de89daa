use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model_eval::evaluate_retrieval;
use super::retrieval::Direction;
use crate::config::RunConfig;
use crate::data::{desk_ladder, stratified_split, PairDataset};
use crate::error::{Error, Result};
use crate::train::{Trainer, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    Modalities,
    DataScale,
    Objectives,
    ModelScale,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Modalities,
        AblationAxis::DataScale,
        AblationAxis::Objectives,
        AblationAxis::ModelScale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Modalities => "modalities",
            AblationAxis::DataScale => "data_scale",
            AblationAxis::Objectives => "objectives",
            AblationAxis::ModelScale => "model_scale",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown ablation axis `{s}` (expected modalities, data_scale, objectives or model_scale)"
            ))
        })
    }
}

/// One grid cell: a row label and the config keys it overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    /// `(section, key, value)` overrides applied to the base config.
    pub overrides: Vec<(String, String, String)>,
    /// Records kept per training set, by stratified split.
    pub train_size: Option<usize>,
}

impl AblationCell {
    fn new(label: &str, overrides: &[(&str, &str, String)]) -> Self {
        Self {
            label: label.to_string(),
            overrides: overrides
                .iter()
                .map(|(s, k, v)| (s.to_string(), k.to_string(), v.clone()))
                .collect(),
            train_size: None,
        }
    }

    /// Human-readable config delta, free of commas.
    pub fn delta(&self) -> String {
        let mut parts: Vec<String> = self
            .overrides
            .iter()
            .map(|(s, k, v)| format!("{s}.{k}={}", v.replace(',', "+")))
            .collect();
        if let Some(n) = self.train_size {
            parts.push(format!("train_size={n}"));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(" ")
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (s, k, v) in &self.overrides {
            cfg.set(s, k, v).map_err(|reason| Error::Config {
                line: 0,
                key: format!("{s}.{k}"),
                reason,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// The standard cells of an axis, labeled like the rows of the reference table.
    pub fn standard(axis: AblationAxis, base: &RunConfig, seeds: Vec<u64>) -> Self {
        let m = |label: &str, list: &str| AblationCell::new(label, &[("context", "modalities", list.to_string())]);
        let o = |label: &str, list: &str| AblationCell::new(label, &[("objectives", "enabled", list.to_string())]);
        let cells = match axis {
            AblationAxis::Modalities => vec![
                m("a", "I"),
                m("b", "I,D"),
                m("c", "I,A"),
                m("d", "I,V"),
                m("e", "I,A,V"),
                m("f", "I,A,V,D"),
            ],
            AblationAxis::DataScale => ["h", "i", "j", "k"]
                .iter()
                .zip(desk_ladder(1e-4))
                .map(|(label, size)| AblationCell {
                    train_size: Some(size),
                    ..AblationCell::new(label, &[])
                })
                .collect(),
            AblationAxis::Objectives => vec![o("l", "con"), o("m", "con+match"), o("n", "con+match+gen")],
            AblationAxis::ModelScale => ["o", "p", "q"]
                .iter()
                .zip([1, 2, 4])
                .map(|(label, f)| AblationCell::new(label, &[("model", "width", (base.model.width * f).to_string())]))
                .collect(),
        };
        Self { axis, cells, seeds }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub axis: AblationAxis,
    pub delta: String,
    pub seeds: Vec<u64>,
    /// Per evaluation set, text-to-knowledge R@1 averaged over seeds.
    pub per_dataset: Vec<(String, f64)>,
    /// Mean over evaluation sets, one value per seed.
    pub per_seed: Vec<f64>,
    pub mean_r1: f64,
}

/// Trains one cell from scratch for one seed and returns the text-to-knowledge
/// R@1 per evaluation set. The rerank is used when matching is trained.
pub fn train_and_score(cfg: &RunConfig, train: &[&PairDataset], eval: &[&PairDataset]) -> Result<Vec<f64>> {
    let set = TrainingSet::new(train, cfg)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run(&set, None, |_| {})?;
    let mut out = Vec::with_capacity(eval.len());
    for ds in eval {
        let reports = evaluate_retrieval(&trainer.model, ds, cfg.context.mode, cfg.eval.rerank_k, cfg.objectives.matching)?;
        let r = reports
            .iter()
            .find(|r| r.direction == Direction::TextToKnowledge)
            .expect("text-to-knowledge report");
        out.push(if r.reranked { r.post.r1 } else { r.pre.r1 });
    }
    Ok(out)
}

/// Runs every cell for every seed. `progress` sees `(cell label, seed, scores)`.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &RunConfig,
    train: &[&PairDataset],
    eval: &[&PairDataset],
    mut progress: impl FnMut(&str, u64, &[f64]),
) -> Result<Vec<AblationRow>> {
    if grid.seeds.is_empty() || grid.cells.is_empty() || eval.is_empty() {
        return Err(Error::Invalid("an ablation needs cells, seeds and evaluation sets".into()));
    }
    let mut rows = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let cfg = cell.apply(base)?;
        let subsets: Vec<PairDataset>;
        let train_sets: Vec<&PairDataset> = match cell.train_size {
            Some(n) => {
                subsets = train
                    .iter()
                    .map(|d| stratified_split(d, n.min(d.len()), cfg.train.seed))
                    .collect::<Result<_>>()?;
                subsets.iter().collect()
            }
            None => train.to_vec(),
        };
        let mut sums = vec![0.0; eval.len()];
        let mut per_seed = Vec::with_capacity(grid.seeds.len());
        for &seed in &grid.seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let scores = train_and_score(&c, &train_sets, eval)?;
            progress(&cell.label, seed, &scores);
            for (s, v) in sums.iter_mut().zip(&scores) {
                *s += v;
            }
            per_seed.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
        let n = grid.seeds.len() as f64;
        rows.push(AblationRow {
            label: cell.label.clone(),
            axis: grid.axis,
            delta: cell.delta(),
            seeds: grid.seeds.clone(),
            per_dataset: eval.iter().zip(&sums).map(|(d, s)| (d.id.clone(), s / n)).collect(),
            mean_r1: per_seed.iter().sum::<f64>() / n,
            per_seed,
        });
    }
    Ok(rows)
}

/// CSV with one row per cell. Seed lists and per-seed means are `;`-separated.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,axis,delta,seeds");
    if let Some(first) = rows.first() {
        for (id, _) in &first.per_dataset {
            out.push_str(&format!(",r1_{id}"));
        }
    }
    out.push_str(",mean_r1,per_seed\n");
    let join = |v: Vec<String>| v.join(";");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}",
            r.label,
            r.axis,
            r.delta,
            join(r.seeds.iter().map(u64::to_string).collect())
        ));
        for (_, v) in &r.per_dataset {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push_str(&format!(
            ",{:.6},{}\n",
            r.mean_r1,
            join(r.per_seed.iter().map(|v| format!("{v:.6}")).collect())
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_labels() {
        let base = RunConfig::default();
        let labels = |a| {
            AblationGrid::standard(a, &base, vec![0])
                .cells
                .into_iter()
                .map(|c| c.label)
                .collect::<Vec<_>>()
                .join("")
        };
        assert_eq!(labels(AblationAxis::Modalities), "abcdef");
        assert_eq!(labels(AblationAxis::DataScale), "hijk");
        assert_eq!(labels(AblationAxis::Objectives), "lmn");
        assert_eq!(labels(AblationAxis::ModelScale), "opq");
        assert!("bogus".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn deltas_have_no_commas() {
        let g = AblationGrid::standard(AblationAxis::Modalities, &RunConfig::default(), vec![0]);
        assert_eq!(g.cells[5].delta(), "context.modalities=I+A+V+D");
        for c in &g.cells {
            c.apply(&RunConfig::default()).unwrap();
        }
    }
}

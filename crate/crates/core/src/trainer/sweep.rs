use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{train_lora, PairSet, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_retrieval, evaluate_zero_shot, select_best, Candidate, EvalSet, RetrievalReport, ZeroShotReport,
};
use crate::lora::{LoraConfig, Placement, RANK_GRID};
use crate::model::DualEncoder;
use crate::scalar::Scalar;

/// Train-config fields replaced for the cells it matches; `None` matches any.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellOverride {
    pub rank: Option<usize>,
    pub placement: Option<Placement>,
    pub train: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub ranks: Vec<usize>,
    pub placements: Vec<Placement>,
    pub train: TrainConfig,
    /// Rank and placement are set per cell.
    pub lora: LoraConfig,
    pub overrides: Vec<CellOverride>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            ranks: RANK_GRID.to_vec(),
            placements: Placement::ALL.to_vec(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            overrides: Vec::new(),
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.placements.is_empty() {
            return Err(Error::Config("sweep grid has no cells".into()));
        }
        if self.ranks.iter().collect::<BTreeSet<_>>().len() != self.ranks.len() {
            return Err(Error::Config(format!("duplicate ranks in {:?}", self.ranks)));
        }
        if self.placements.iter().collect::<BTreeSet<_>>().len() != self.placements.len() {
            return Err(Error::Config(format!("duplicate placements in {:?}", self.placements)));
        }
        self.train.validate()?;
        for &(r, p) in &self.cells() {
            self.cell_config(r, p)?;
        }
        Ok(())
    }

    /// Rank-major cell order.
    pub fn cells(&self) -> Vec<(usize, Placement)> {
        self.ranks
            .iter()
            .flat_map(|&r| self.placements.iter().map(move |&p| (r, p)))
            .collect()
    }

    pub fn cell_config(&self, rank: usize, placement: Placement) -> Result<(TrainConfig, LoraConfig)> {
        let mut train = serde_json::to_value(&self.train)?;
        for o in &self.overrides {
            if o.rank.is_some_and(|r| r != rank) || o.placement.is_some_and(|p| p != placement) {
                continue;
            }
            let obj = train.as_object_mut().expect("TrainConfig serialises to an object");
            for (k, v) in &o.train {
                if !obj.contains_key(k) {
                    return Err(Error::Config(format!("override names unknown train field {k:?}")));
                }
                obj.insert(k.clone(), v.clone());
            }
        }
        let train: TrainConfig = serde_json::from_value(train)?;
        train.validate()?;
        let lora = LoraConfig {
            rank,
            placement,
            dropout: train.lora_dropout,
            ..self.lora.clone()
        };
        lora.validate()?;
        Ok((train, lora))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub rank: usize,
    pub placement: Placement,
    pub error: Option<String>,
    pub trainable_params: Option<usize>,
    pub final_loss: Option<f64>,
    pub retrieval: Option<RetrievalReport>,
    pub zero_shot: Option<ZeroShotReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellReport>,
    /// Cell index chosen by mean Hits@1/2/3.
    pub best_retrieval: Option<usize>,
    /// Cell index chosen by mean Top-1/2/3.
    pub best_zero_shot: Option<usize>,
}

fn run_cell<T: Scalar>(
    grid: &SweepGrid,
    rank: usize,
    placement: Placement,
    base: &DualEncoder<T>,
    data: &PairSet,
    eval: &EvalSet,
) -> Result<CellReport> {
    let (train, lora) = grid.cell_config(rank, placement)?;
    let mut model = base.clone();
    let history = train_lora(&mut model, data, &train, &lora)?;
    let trainable = model.trainable_view().total;
    let videos = model.encode_videos(&eval.clips)?;
    let retrieval = evaluate_retrieval(&model, eval, &videos)?;
    let zero_shot = if eval.class_queries.is_empty() {
        None
    } else {
        Some(evaluate_zero_shot(&model, eval, &videos)?)
    };
    Ok(CellReport {
        rank,
        placement,
        error: None,
        trainable_params: Some(trainable),
        final_loss: history.last().map(|h| h.loss),
        retrieval: Some(retrieval),
        zero_shot,
    })
}

/// Trains every cell from the same base and seed, then evaluates it. A cell
/// that fails is reported with its error and the sweep carries on.
pub fn run_sweep<T: Scalar>(
    grid: &SweepGrid,
    base: &DualEncoder<T>,
    data: &PairSet,
    eval: &EvalSet,
) -> Result<SweepReport> {
    grid.validate()?;
    if base.has_adapters() {
        return Err(Error::Config("sweep base model must not carry adapters".into()));
    }
    let cells: Vec<CellReport> = grid
        .cells()
        .into_par_iter()
        .map(|(rank, placement)| {
            run_cell(grid, rank, placement, base, data, eval).unwrap_or_else(|e| {
                log::warn!("sweep cell rank {rank} {placement} failed: {e}");
                CellReport {
                    rank,
                    placement,
                    error: Some(e.to_string()),
                    trainable_params: None,
                    final_loss: None,
                    retrieval: None,
                    zero_shot: None,
                }
            })
        })
        .collect();
    let pick = |top: &dyn Fn(&CellReport) -> Option<[f64; 3]>| -> Result<Option<usize>> {
        let (idx, cands): (Vec<usize>, Vec<Candidate>) = cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                top(c).map(|top| {
                    (
                        i,
                        Candidate {
                            id: format!("r{}-{}", c.rank, c.placement),
                            rank: c.rank,
                            placement: c.placement,
                            top,
                        },
                    )
                })
            })
            .unzip();
        if cands.is_empty() {
            return Ok(None);
        }
        Ok(Some(idx[select_best(&cands)?]))
    };
    let best_retrieval = pick(&|c| c.retrieval.as_ref().map(|r| [r.hits_at(1), r.hits_at(2), r.hits_at(3)]))?;
    let best_zero_shot = pick(&|c| c.zero_shot.as_ref().map(|z| [z.top1, z.top2, z.top3]))?;
    Ok(SweepReport {
        cells,
        best_retrieval,
        best_zero_shot,
    })
}

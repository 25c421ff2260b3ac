//! Ranking metrics over concept score matrices.
//!
//! Scores are row-major `n_verbs × n_objects` slices. Every ranking sorts by
//! score descending and breaks ties by row-major cell index ascending, i.e.
//! by `(verb_id, object_id)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use ndarray::{s, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::concepts::{ConceptSpace, ConceptStatus, Target};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::scorer::{forward, ScorerParams};

/// Indices of `scores` in rank order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx
}

fn check_finite(scores: &[f64]) -> Result<()> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("score at index {i}"))),
        None => Ok(()),
    }
}

/// Non-interpolated average precision: the mean, over positives, of the
/// precision at each positive's rank.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    check_finite(scores)?;
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in rank_order(scores).iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

fn check_grid(scores: &[f64], space: &ConceptSpace) -> Result<()> {
    if scores.len() != space.n_cells() {
        return Err(Error::Shape(format!(
            "{} scores for a {}x{} concept grid",
            scores.len(),
            space.n_verbs(),
            space.n_objects()
        )));
    }
    check_finite(scores)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedCell {
    pub verb: usize,
    pub object: usize,
    pub score: f64,
}

/// Cells ranked by score, skipping any whose status is `exclude`.
pub fn rank_cells(scores: &[f64], space: &ConceptSpace, exclude: Option<ConceptStatus>) -> Result<Vec<RankedCell>> {
    check_grid(scores, space)?;
    let no = space.n_objects();
    Ok(rank_order(scores)
        .into_iter()
        .filter(|&i| Some(space.statuses()[i]) != exclude)
        .map(|i| RankedCell {
            verb: i / no,
            object: i % no,
            score: scores[i],
        })
        .collect())
}

/// AP of the target set against Invalid cells; the other non-Invalid set is
/// removed from the pool.
pub fn concept_ap(scores: &[f64], space: &ConceptSpace, target: Target) -> Result<f64> {
    check_grid(scores, space)?;
    let (pool_scores, pool_pos): (Vec<f64>, Vec<bool>) = scores
        .iter()
        .zip(space.statuses())
        .filter(|(_, &s)| s != target.masked())
        .map(|(&x, &s)| (x, s == target.status()))
        .unzip();
    average_precision(&pool_scores, &pool_pos)
}

/// Fraction of Unknown cells among the top `k` non-Known cells. Returns 0
/// when the grid has no Unknown cells.
pub fn recall_at_k(scores: &[f64], space: &ConceptSpace, k: usize) -> Result<f64> {
    let ranked = rank_cells(scores, space, Some(ConceptStatus::Known))?;
    let total = space.count(ConceptStatus::Unknown);
    if total == 0 {
        return Ok(0.0);
    }
    let found = ranked
        .iter()
        .take(k)
        .filter(|c| space.status(c.verb, c.object) == ConceptStatus::Unknown)
        .count();
    Ok(found as f64 / total as f64)
}

/// I.i.d. uniform `[0, 1)` scores, one per cell.
pub fn random_matrix(space: &ConceptSpace, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..space.n_cells()).map(|_| rng.random::<f64>()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffordanceTarget {
    All,
    Known,
    Unknown,
}

impl AffordanceTarget {
    fn accepts(self, status: ConceptStatus) -> bool {
        match self {
            AffordanceTarget::All => status != ConceptStatus::Invalid,
            AffordanceTarget::Known => status == ConceptStatus::Known,
            AffordanceTarget::Unknown => status == ConceptStatus::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AffordanceTarget::All => "all",
            AffordanceTarget::Known => "known",
            AffordanceTarget::Unknown => "unknown",
        }
    }
}

/// Mean verb feature over training instances labeled with each verb.
pub fn verb_prototypes(train: &Dataset) -> Vec<Option<Vec<f64>>> {
    let nv = train.space().n_verbs();
    let mut sums = vec![vec![0.0; train.d_v()]; nv];
    let mut counts = vec![0usize; nv];
    for inst in train.instances() {
        for &v in inst.verb_labels() {
            counts[v] += 1;
            for (s, x) in sums[v].iter_mut().zip(inst.verb_feature()) {
                *s += x;
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
        .collect()
}

/// Object affordance mAP: each verb's training prototype is composed with
/// every held-out object feature and the held-out instances are ranked by
/// the verb's probability; an instance is positive when its object's cell
/// for that verb is in `target`. Verbs without training instances or without
/// positives are left out of the mean.
pub fn affordance_map(
    params: &ScorerParams,
    train: &Dataset,
    heldout: &Dataset,
    space: &ConceptSpace,
    target: AffordanceTarget,
) -> Result<f64> {
    if params.n_verbs() != space.n_verbs() || params.d_v() != heldout.d_v() || params.d_o() != heldout.d_o() {
        return Err(Error::Shape("scorer, held-out split and concept grid disagree".into()));
    }
    let (d_v, d_o) = (params.d_v(), params.d_o());
    let n = heldout.len();
    let mut x = Array2::zeros((n, d_v + d_o));
    for (j, inst) in heldout.instances().iter().enumerate() {
        x.row_mut(j)
            .slice_mut(s![d_v..])
            .assign(&ArrayView1::from(inst.object_feature()));
    }
    let mut aps = Vec::new();
    for (v, proto) in verb_prototypes(train).into_iter().enumerate() {
        let Some(proto) = proto else {
            warn!("verb {v} has no training instances; left out of affordance mAP");
            continue;
        };
        let positives: Vec<bool> = heldout
            .instances()
            .iter()
            .map(|i| target.accepts(space.status(v, i.object_label())))
            .collect();
        if !positives.iter().any(|&p| p) {
            continue;
        }
        for j in 0..n {
            x.row_mut(j).slice_mut(s![..d_v]).assign(&ArrayView1::from(&proto[..]));
        }
        let (logits, _) = forward(params, x.view())?;
        let scores: Vec<f64> = logits.column(v).iter().map(|&z| sigmoid(z)).collect();
        aps.push(average_precision(&scores, &positives)?);
    }
    if aps.is_empty() {
        return Err(Error::UndefinedAp);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub unknown_ap: Option<f64>,
    pub known_ap: Option<f64>,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub affordance_map: Option<(AffordanceTarget, f64)>,
}

impl MetricReport {
    /// Unknown / Known AP plus recall at 25%, 50%, 75% and 100% of the
    /// non-Known pool. An AP with no positives is reported as absent.
    pub fn for_matrix(scores: &[f64], space: &ConceptSpace) -> Result<Self> {
        check_grid(scores, space)?;
        let optional = |r: Result<f64>| match r {
            Ok(x) => Ok(Some(x)),
            Err(Error::UndefinedAp) => Ok(None),
            Err(e) => Err(e),
        };
        let pool = space.n_cells() - space.count(ConceptStatus::Known);
        let mut recall = BTreeMap::new();
        for quarter in 1..=4 {
            let k = (pool * quarter).div_ceil(4);
            recall.insert(k, recall_at_k(scores, space, k)?);
        }
        Ok(Self {
            unknown_ap: optional(concept_ap(scores, space, Target::Unknown))?,
            known_ap: optional(concept_ap(scores, space, Target::Known))?,
            recall_at_k: recall,
            affordance_map: None,
        })
    }

    /// `metric,target,k,value` rows; undefined metrics are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::from("metric,target,k,value\n");
        if let Some(ap) = self.unknown_ap {
            let _ = writeln!(out, "ap,unknown,,{ap:.16e}");
        }
        if let Some(ap) = self.known_ap {
            let _ = writeln!(out, "ap,known,,{ap:.16e}");
        }
        for (k, r) in &self.recall_at_k {
            let _ = writeln!(out, "recall,unknown,{k},{r:.16e}");
        }
        if let Some((target, m)) = self.affordance_map {
            let _ = writeln!(out, "affordance_map,{},,{m:.16e}", target.as_str());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

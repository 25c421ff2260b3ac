//! Self-compositional training.
//!
//! Each iteration composes a minibatch into `N²` verb/object composites,
//! scores them, folds the probabilities into the confidence tracker and
//! optimizes
//!
//! ```text
//! L = λ1·L_h + λ2·L_c + λ3·L_d
//! ```
//!
//! where `L_h` is multi-label BCE on the real instances, `L_c` is BCE on the
//! composites whose cells are Known, and `L_d` is BCE against pseudo labels
//! built from the normalized confidence matrix, with logits divided by the
//! temperature.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};

use crate::composer::{compose, known_filter, outer_labels, CompositeBatch, KnownMask, OuterLabels};
use crate::concepts::{ConceptSpace, Target};
use crate::dataset::{BatchSampler, Dataset, Instance};
use crate::error::{Error, Result};
use crate::evaluator::concept_ap;
use crate::numeric::{bce_with_logit, sigmoid, CompensatedSum};
use crate::scorer::{backward, forward, sgd_step, Gradients, OptimState, ScorerParams, DEFAULT_HIDDEN};
use crate::tracker::ConfidenceTracker;

const SAMPLER_SEED_MIX: u64 = 0xa076_1d64_78bd_642f;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Hico,
    Vcoco,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Hico => "hico",
            Profile::Vcoco => "vcoco",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "hico" => Some(Profile::Hico),
            "vcoco" => Some(Profile::Vcoco),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub self_training: bool,
    /// Pseudo labels come from this matrix instead of the live tracker.
    pub frozen_matrix: Option<PathBuf>,
    /// History is recorded every `eval_every` iterations and after the last
    /// one; 0 records only the last.
    pub eval_every: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Divide pseudo labels by the largest confidence.
    pub pseudo_normalization: bool,
    /// Weight of an extra verb-only BCE on instances whose object half is
    /// zeroed. 0 disables it.
    pub verb_aux_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Hico)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let lambda1 = match profile {
            Profile::Hico => 2.0,
            Profile::Vcoco => 0.5,
        };
        Self {
            lambda1,
            lambda2: 0.5,
            lambda3: 0.5,
            temperature: 1.0,
            batch_size: 8,
            iterations: 20_000,
            seed: 0,
            self_training: true,
            frozen_matrix: None,
            eval_every: 1_000,
            hidden: DEFAULT_HIDDEN,
            learning_rate: 0.01,
            momentum: 0.9,
            pseudo_normalization: true,
            verb_aux_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("verb_aux_weight", self.verb_aux_weight),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a nonnegative number, got {w}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: if self.self_training { self.lambda3 } else { 0.0 },
            temperature: self.temperature,
            verb_aux: self.verb_aux_weight,
        }
    }
}

/// Soft targets for the self-training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    targets: Array2<f64>,
    active: Vec<bool>,
    included: Array2<bool>,
}

impl PseudoLabels {
    /// `N² × N_v` targets; zero outside each composite's labeled verbs.
    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn target(&self, i: usize, verb: usize) -> f64 {
        self.targets[[i, verb]]
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    /// Entries entering the loss: all verbs of an active composite except
    /// labeled verbs whose cell was never observed.
    pub fn included(&self) -> &Array2<bool> {
        &self.included
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Exact bit patterns of all targets, for identity comparisons.
    pub fn target_bits(&self) -> Vec<u64> {
        self.targets.iter().map(|x| x.to_bits()).collect()
    }
}

/// Pseudo labels from the confidence matrix. With normalization the
/// target for labeled verb `v` of a composite with object `o` is
/// `M(v, o) / max(M)`, rounded to single precision so that rescaling `M`
/// reproduces the same targets bit for bit.
pub fn make_pseudo_labels(tracker: &ConfidenceTracker, labels: &OuterLabels, normalize: bool) -> Result<PseudoLabels> {
    let (nv, no) = (tracker.n_verbs(), tracker.n_objects());
    if labels.n_verbs() != nv || labels.n_objects() != no {
        return Err(Error::Shape(format!(
            "labels over a {}x{} grid, tracker is {nv}x{no}",
            labels.n_verbs(),
            labels.n_objects()
        )));
    }
    let n = labels.len();
    let m_star = tracker.max_confidence();
    let mut targets = Array2::zeros((n, nv));
    let mut active = vec![false; n];
    let mut included = Array2::from_elem((n, nv), false);
    if normalize && m_star <= 0.0 {
        return Ok(PseudoLabels {
            targets,
            active,
            included,
        });
    }
    for i in 0..n {
        let o = labels.object(i);
        let observed: Vec<usize> = labels
            .verbs(i)
            .iter()
            .copied()
            .filter(|&v| tracker.count(v, o) > 0.0)
            .collect();
        if observed.is_empty() {
            continue;
        }
        active[i] = true;
        included.row_mut(i).fill(true);
        for &v in labels.verbs(i) {
            included[[i, v]] = false;
        }
        for &v in &observed {
            let m = tracker.confidence(v, o);
            targets[[i, v]] = if normalize { (m / m_star) as f32 as f64 } else { m };
            included[[i, v]] = true;
        }
    }
    Ok(PseudoLabels {
        targets,
        active,
        included,
    })
}

fn check_dim(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: got {got:?}, expected {want:?}")));
    }
    Ok(())
}

/// Mean over active composites of the mean over included entries of
/// `BCE(sigmoid(z / T), target)`, with its gradient w.r.t. the logits.
pub fn self_training_loss(
    logits: ArrayView2<'_, f64>,
    pl: &PseudoLabels,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_dim("self-training logits", logits.dim(), pl.targets.dim())?;
    let mut grad = Array2::zeros(logits.dim());
    let n_active = pl.active.iter().filter(|&&a| a).count();
    if n_active == 0 {
        return Ok((0.0, grad));
    }
    let mut total = CompensatedSum::default();
    for i in (0..pl.len()).filter(|&i| pl.active[i]) {
        let entries: Vec<usize> = (0..logits.ncols()).filter(|&v| pl.included[[i, v]]).collect();
        let scale = 1.0 / (n_active * entries.len()) as f64;
        let mut row = CompensatedSum::default();
        for v in entries {
            let z = logits[[i, v]] / temperature;
            let y = pl.targets[[i, v]];
            row.add(bce_with_logit(z, y));
            grad[[i, v]] = (sigmoid(z) - y) * scale / temperature;
        }
        total.add(row.value() * scale);
    }
    Ok((total.value(), grad))
}

/// Mean multi-hot BCE over the real instances (diagonal composites) and all
/// verbs.
pub fn hoi_loss(logits: ArrayView2<'_, f64>, verb_labels: &[&[usize]]) -> Result<(f64, Array2<f64>)> {
    let (n, nv) = logits.dim();
    if verb_labels.len() != n {
        return Err(Error::Shape(format!("{} label rows for {n} logit rows", verb_labels.len())));
    }
    let mut grad = Array2::zeros((n, nv));
    if n == 0 || nv == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / (n * nv) as f64;
    let mut total = CompensatedSum::default();
    for (i, labels) in verb_labels.iter().enumerate() {
        for v in 0..nv {
            let y = if labels.contains(&v) { 1.0 } else { 0.0 };
            let z = logits[[i, v]];
            total.add(bce_with_logit(z, y));
            grad[[i, v]] = (sigmoid(z) - y) * scale;
        }
    }
    Ok((total.value() * scale, grad))
}

/// BCE over composites that keep at least one Known labeled verb. Labeled
/// verbs whose cell is not Known are left out; unlabeled verbs are
/// negatives. Each retained composite weighs equally.
pub fn compositional_loss(
    logits: ArrayView2<'_, f64>,
    mask: &KnownMask,
    labels: &OuterLabels,
) -> Result<(f64, Array2<f64>)> {
    let nv = mask.n_verbs();
    check_dim("compositional logits", logits.dim(), (mask.len(), nv))?;
    if labels.len() != mask.len() {
        return Err(Error::Shape(format!("{} label rows for {} mask rows", labels.len(), mask.len())));
    }
    let mut grad = Array2::zeros(logits.dim());
    let retained: Vec<usize> = (0..mask.len()).filter(|&i| !mask.is_droppable(i)).collect();
    if retained.is_empty() {
        return Ok((0.0, grad));
    }
    let mut total = CompensatedSum::default();
    for &i in &retained {
        let labeled = labels.verbs(i);
        let entries: Vec<(usize, f64)> = (0..nv)
            .filter_map(|v| match (labeled.contains(&v), mask.get(i, v)) {
                (_, true) => Some((v, 1.0)),
                (false, false) => Some((v, 0.0)),
                (true, false) => None,
            })
            .collect();
        let scale = 1.0 / (retained.len() * entries.len()) as f64;
        let mut row = CompensatedSum::default();
        for (v, y) in entries {
            let z = logits[[i, v]];
            row.add(bce_with_logit(z, y));
            grad[[i, v]] = (sigmoid(z) - y) * scale;
        }
        total.add(row.value() * scale);
    }
    Ok((total.value(), grad))
}

/// `min(y + M(:, o), 1)` elementwise.
pub fn entangled_label_update(verb_label: &[f64], object: usize, tracker: &ConfidenceTracker) -> Result<Vec<f64>> {
    if object >= tracker.n_objects() {
        return Err(Error::OutOfRange {
            what: "object id",
            id: object,
            limit: tracker.n_objects(),
        });
    }
    if verb_label.len() != tracker.n_verbs() {
        return Err(Error::Shape(format!(
            "verb label of length {} for {} verbs",
            verb_label.len(),
            tracker.n_verbs()
        )));
    }
    Ok(verb_label
        .iter()
        .enumerate()
        .map(|(v, &y)| (y + tracker.confidence(v, object)).min(1.0))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Zero when self-training is off.
    pub lambda3: f64,
    pub temperature: f64,
    pub verb_aux: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub hoi: f64,
    pub compositional: f64,
    pub self_training: f64,
    pub verb_aux: f64,
    pub total: f64,
}

impl LossTerms {
    fn is_finite(&self) -> bool {
        [self.hoi, self.compositional, self.self_training, self.verb_aux, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// The combined loss for one composed batch with fixed pseudo labels.
#[derive(Debug, Clone)]
pub struct Objective {
    batch: CompositeBatch,
    labels: OuterLabels,
    mask: KnownMask,
    pseudo: Option<PseudoLabels>,
    weights: LossWeights,
}

impl Objective {
    pub fn new(
        batch: CompositeBatch,
        space: &ConceptSpace,
        pseudo: Option<PseudoLabels>,
        weights: LossWeights,
    ) -> Result<Self> {
        let labels = outer_labels(&batch, space);
        let mask = known_filter(&batch, space);
        if let Some(pl) = &pseudo {
            check_dim("pseudo labels", pl.targets.dim(), (batch.len(), space.n_verbs()))?;
        }
        Ok(Self {
            batch,
            labels,
            mask,
            pseudo,
            weights,
        })
    }

    pub fn batch(&self) -> &CompositeBatch {
        &self.batch
    }

    /// Loss terms and the gradient of the total w.r.t. the composite logits.
    pub fn logit_losses(&self, logits: ArrayView2<'_, f64>) -> Result<(LossTerms, Array2<f64>)> {
        let w = self.weights;
        let diag: Vec<usize> = self.batch.diagonal().collect();
        let diag_logits = logits.select(ndarray::Axis(0), &diag);
        let diag_labels: Vec<&[usize]> = diag.iter().map(|&i| self.batch.verb_labels(i)).collect();
        let (hoi, g_h) = hoi_loss(diag_logits.view(), &diag_labels)?;
        let (comp, g_c) = compositional_loss(logits, &self.mask, &self.labels)?;
        let mut grad = g_c * w.lambda2;
        for (k, &i) in diag.iter().enumerate() {
            grad.row_mut(i).scaled_add(w.lambda1, &g_h.row(k));
        }
        let mut st = 0.0;
        if let Some(pl) = &self.pseudo {
            if w.lambda3 > 0.0 {
                let (l, g) = self_training_loss(logits, pl, w.temperature)?;
                st = l;
                grad.scaled_add(w.lambda3, &g);
            }
        }
        let terms = LossTerms {
            hoi,
            compositional: comp,
            self_training: st,
            verb_aux: 0.0,
            total: w.lambda1 * hoi + w.lambda2 * comp + w.lambda3 * st,
        };
        Ok((terms, grad))
    }

    fn verb_aux(&self, params: &ScorerParams) -> Result<(f64, Gradients)> {
        let d_v = self.batch.d_v();
        let diag: Vec<usize> = self.batch.diagonal().collect();
        let mut x = self.batch.features().select(ndarray::Axis(0), &diag);
        x.slice_mut(s![.., d_v..]).fill(0.0);
        let (logits, tape) = forward(params, x.view())?;
        let labels: Vec<&[usize]> = diag.iter().map(|&i| self.batch.verb_labels(i)).collect();
        let (loss, g) = hoi_loss(logits.view(), &labels)?;
        Ok((loss, backward(params, &tape, g.view())?))
    }

    /// Total loss and parameter gradients.
    pub fn evaluate(&self, params: &ScorerParams) -> Result<(LossTerms, Gradients)> {
        let (logits, tape) = forward(params, self.batch.features().view())?;
        self.finish(params, logits.view(), &tape)
    }

    fn finish(
        &self,
        params: &ScorerParams,
        logits: ArrayView2<'_, f64>,
        tape: &crate::scorer::ForwardTape,
    ) -> Result<(LossTerms, Gradients)> {
        let (mut terms, g) = self.logit_losses(logits)?;
        let mut grads = backward(params, tape, g.view())?;
        if self.weights.verb_aux > 0.0 {
            let (aux, g_aux) = self.verb_aux(params)?;
            terms.verb_aux = aux;
            terms.total += self.weights.verb_aux * aux;
            grads.add_scaled(&g_aux, self.weights.verb_aux);
        }
        Ok((terms, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based index of the iteration just run.
    pub iteration: usize,
    pub losses: LossTerms,
    /// Present when self-training is on.
    pub pseudo: Option<PseudoLabels>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub losses: LossTerms,
    pub unknown_ap: Option<f64>,
    pub known_ap: Option<f64>,
}

pub const HISTORY_HEADER: &str =
    "iteration,hoi_loss,compositional_loss,self_training_loss,total_loss,unknown_ap,known_ap";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_text(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        let ap = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{v:.16e}"));
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                r.iteration,
                l.hoi,
                l.compositional,
                l.self_training,
                l.total,
                ap(r.unknown_ap),
                ap(r.known_ap)
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    pub opt: OptimState,
    pub tracker: ConfidenceTracker,
    pub history: History,
}

/// Training loop state. Owns the scorer, optimizer and tracker.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    space: &'a ConceptSpace,
    config: TrainConfig,
    params: ScorerParams,
    opt: OptimState,
    tracker: ConfidenceTracker,
    frozen: Option<ConfidenceTracker>,
    sampler: BatchSampler,
    iteration: usize,
    history: History,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, space: &'a ConceptSpace, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ds = dataset.space();
        if (ds.n_verbs(), ds.n_objects()) != (space.n_verbs(), space.n_objects()) {
            return Err(Error::Shape("dataset and concept space disagree on grid size".into()));
        }
        if dataset.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let frozen = match &config.frozen_matrix {
            Some(path) => {
                let t = ConfidenceTracker::load(path)?;
                if (t.n_verbs(), t.n_objects()) != (space.n_verbs(), space.n_objects()) {
                    return Err(Error::Shape(format!(
                        "frozen matrix {} is {}x{}, grid is {}x{}",
                        path.display(),
                        t.n_verbs(),
                        t.n_objects(),
                        space.n_verbs(),
                        space.n_objects()
                    )));
                }
                Some(t)
            }
            None => None,
        };
        let params = ScorerParams::init(
            dataset.d_v(),
            dataset.d_o(),
            config.hidden,
            space.n_verbs(),
            config.seed,
        )?;
        let opt = OptimState::new(&params, config.learning_rate, config.momentum)?;
        Ok(Self {
            dataset,
            space,
            params,
            opt,
            tracker: ConfidenceTracker::new(space.n_verbs(), space.n_objects()),
            frozen,
            sampler: BatchSampler::new(config.seed ^ SAMPLER_SEED_MIX),
            iteration: 0,
            history: History::default(),
            config,
        })
    }

    /// Replaces the pseudo-label source with a fixed matrix.
    pub fn set_frozen_tracker(&mut self, tracker: ConfidenceTracker) -> Result<()> {
        if (tracker.n_verbs(), tracker.n_objects()) != (self.space.n_verbs(), self.space.n_objects()) {
            return Err(Error::Shape("frozen matrix does not match the grid".into()));
        }
        self.frozen = Some(tracker);
        Ok(())
    }

    pub fn params(&self) -> &ScorerParams {
        &self.params
    }

    pub fn set_params(&mut self, params: ScorerParams) -> Result<()> {
        if !params.same_shape(&self.params) {
            return Err(Error::Shape("replacement scorer has a different shape".into()));
        }
        self.opt.velocity = params.zeros_like();
        self.params = params;
        Ok(())
    }

    pub fn tracker(&self) -> &ConfidenceTracker {
        &self.tracker
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// One full iteration including the parameter update.
    pub fn step(&mut self) -> Result<StepReport> {
        self.run_iteration(true)
    }

    /// One iteration with the scorer held fixed: the tracker and pseudo
    /// labels advance, parameters and optimizer state do not.
    pub fn observe(&mut self) -> Result<StepReport> {
        self.run_iteration(false)
    }

    fn run_iteration(&mut self, update: bool) -> Result<StepReport> {
        let batch: Vec<&Instance> = self.sampler.sample(self.dataset, self.config.batch_size)?;
        let cb = compose(&batch)?;
        let (logits, tape) = forward(&self.params, cb.features().view())?;
        let labels = outer_labels(&cb, self.space);
        self.tracker.update(logits.mapv(sigmoid).view(), &labels)?;
        let pseudo = if self.config.self_training {
            let source = self.frozen.as_ref().unwrap_or(&self.tracker);
            Some(make_pseudo_labels(source, &labels, self.config.pseudo_normalization)?)
        } else {
            None
        };
        self.iteration += 1;
        let objective = Objective::new(cb, self.space, pseudo, self.config.weights())?;
        let (losses, grads) = objective.finish(&self.params, logits.view(), &tape)?;
        if !losses.is_finite() {
            return Err(Error::NumericalAbort {
                iteration: self.iteration,
                hoi_loss: losses.hoi,
                compositional_loss: losses.compositional,
                self_training_loss: losses.self_training,
            });
        }
        if update {
            sgd_step(&mut self.params, &grads, &mut self.opt)?;
        }
        let every = self.config.eval_every;
        if (every > 0 && self.iteration % every == 0) || self.iteration == self.config.iterations {
            self.record(losses);
        }
        Ok(StepReport {
            iteration: self.iteration,
            losses,
            pseudo: objective.pseudo,
        })
    }

    fn record(&mut self, losses: LossTerms) {
        let m = self.tracker.confidences();
        let ap = |t| concept_ap(m, self.space, t).ok();
        let row = HistoryRow {
            iteration: self.iteration,
            losses,
            unknown_ap: ap(Target::Unknown),
            known_ap: ap(Target::Known),
        };
        if self.history.rows.last().map(|r| r.iteration) != Some(row.iteration) {
            self.history.rows.push(row);
        }
    }

    /// Runs the remaining iterations and hands back the final state.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.iteration < self.config.iterations {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            opt: self.opt,
            tracker: self.tracker,
            history: self.history,
        }
    }
}

/// Trains a scorer from scratch on `dataset`, using `space` for the Known
/// filter and for the history metrics.
pub fn train(dataset: &Dataset, space: &ConceptSpace, config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(dataset, space, config)?.run()
}

//! Running-mean concept confidence.
//!
//! `M(v, o)` is the mean of every verb probability ever observed for a
//! composite whose labeled verb is `v` and whose object is `o`; `C(v, o)` is
//! the number of such observations. Both start at zero and a cell that has
//! never been observed keeps `M = 0`.
//!
//! Matrix files are CSV with a dimension line followed by one row per
//! observed cell:
//!
//! ```text
//! dims,12,10
//! verb_id,object_id,confidence,count
//! 0,3,8.1250000000000000e-1,16
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::composer::OuterLabels;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::scorer::{forward, ScorerParams};

pub const MATRIX_HEADER: &str = "verb_id,object_id,confidence,count";

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTracker {
    n_verbs: usize,
    n_objects: usize,
    m: Vec<f64>,
    c: Vec<f64>,
}

impl ConfidenceTracker {
    pub fn new(n_verbs: usize, n_objects: usize) -> Self {
        Self {
            n_verbs,
            n_objects,
            m: vec![0.0; n_verbs * n_objects],
            c: vec![0.0; n_verbs * n_objects],
        }
    }

    pub fn n_verbs(&self) -> usize {
        self.n_verbs
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn confidence(&self, verb: usize, object: usize) -> f64 {
        self.m[verb * self.n_objects + object]
    }

    pub fn count(&self, verb: usize, object: usize) -> f64 {
        self.c[verb * self.n_objects + object]
    }

    /// Row-major `M`.
    pub fn confidences(&self) -> &[f64] {
        &self.m
    }

    /// Row-major `C`.
    pub fn counts(&self) -> &[f64] {
        &self.c
    }

    pub fn max_confidence(&self) -> f64 {
        self.m.iter().copied().fold(0.0, f64::max)
    }

    /// Folds one batch of composite probabilities into the running mean.
    ///
    /// Contributions are summed per cell in a canonical order (sorted by
    /// value) before the single division, so the result does not depend on
    /// the order of composites within the call.
    pub fn update(&mut self, probs: ArrayView2<'_, f64>, labels: &OuterLabels) -> Result<()> {
        if labels.n_verbs() != self.n_verbs || labels.n_objects() != self.n_objects {
            return Err(Error::Shape(format!(
                "labels over a {}x{} grid, tracker is {}x{}",
                labels.n_verbs(),
                labels.n_objects(),
                self.n_verbs,
                self.n_objects
            )));
        }
        if probs.dim() != (labels.len(), self.n_verbs) {
            return Err(Error::Shape(format!(
                "probabilities {:?} for {} composites and {} verbs",
                probs.dim(),
                labels.len(),
                self.n_verbs
            )));
        }
        for ((row, verb), &p) in probs.indexed_iter() {
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("probability at row {row}, verb {verb}")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::ProbabilityRange { row, verb, value: p });
            }
        }
        let mut contributions: Vec<(usize, f64)> = Vec::new();
        for i in 0..labels.len() {
            let o = labels.object(i);
            for &v in labels.verbs(i) {
                contributions.push((v * self.n_objects + o, probs[[i, v]]));
            }
        }
        contributions.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut k = 0;
        while k < contributions.len() {
            let cell = contributions[k].0;
            let (mut sum, mut n) = (0.0, 0.0);
            while k < contributions.len() && contributions[k].0 == cell {
                sum += contributions[k].1;
                n += 1.0;
                k += 1;
            }
            self.absorb(cell, sum, n);
        }
        Ok(())
    }

    fn absorb(&mut self, cell: usize, sum: f64, n: f64) {
        let (m, c) = (self.m[cell], self.c[cell]);
        self.m[cell] = (m * c + sum) / (c + n);
        self.c[cell] = c + n;
    }

    /// Copies of `(M, C)`, row-major.
    pub fn snapshot(&self) -> (Vec<f64>, Vec<f64>) {
        (self.m.clone(), self.c.clone())
    }

    /// Rebuilds a tracker from `(M, C)`. Counts must be non-negative
    /// integers, confidences finite and non-negative, and an unobserved cell
    /// must have zero confidence.
    pub fn load_snapshot(n_verbs: usize, n_objects: usize, m: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let cells = n_verbs * n_objects;
        if m.len() != cells || c.len() != cells {
            return Err(Error::Shape(format!(
                "snapshot of {} / {} cells for a {n_verbs}x{n_objects} grid",
                m.len(),
                c.len()
            )));
        }
        for (idx, (&mi, &ci)) in m.iter().zip(&c).enumerate() {
            let (v, o) = (idx / n_objects, idx % n_objects);
            if !(mi.is_finite() && mi >= 0.0) {
                return Err(Error::Invariant(format!("confidence {mi} at ({v}, {o})")));
            }
            if !(ci.is_finite() && ci >= 0.0 && ci.fract() == 0.0) {
                return Err(Error::Invariant(format!("count {ci} at ({v}, {o}) is not a whole number")));
            }
            if ci == 0.0 && mi != 0.0 {
                return Err(Error::Invariant(format!(
                    "cell ({v}, {o}) has confidence {mi} but was never observed"
                )));
            }
        }
        Ok(Self {
            n_verbs,
            n_objects,
            m,
            c,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dims,{},{}\n{MATRIX_HEADER}\n", self.n_verbs, self.n_objects);
        for (idx, (&m, &c)) in self.m.iter().zip(&self.c).enumerate() {
            if c > 0.0 {
                let (v, o) = (idx / self.n_objects, idx % self.n_objects);
                out.push_str(&format!("{v},{o},{m:.16e},{c}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, dims) = lines
            .next()
            .ok_or_else(|| Error::parse(source, 1, "empty matrix file"))?;
        let parts: Vec<&str> = dims.trim().split(',').collect();
        let (n_verbs, n_objects) = match parts.as_slice() {
            ["dims", nv, no] => (
                nv.parse::<usize>()
                    .map_err(|_| Error::parse(source, 1, "bad verb count"))?,
                no.parse::<usize>()
                    .map_err(|_| Error::parse(source, 1, "bad object count"))?,
            ),
            _ => return Err(Error::parse(source, 1, "expected dims,<n_verbs>,<n_objects>")),
        };
        if n_verbs == 0 || n_objects == 0 {
            return Err(Error::parse(source, 1, "zero-sized grid"));
        }
        match lines.next() {
            Some((_, h)) if h.trim() == MATRIX_HEADER => {}
            _ => return Err(Error::parse(source, 2, format!("expected header {MATRIX_HEADER}"))),
        }
        let mut m = vec![0.0; n_verbs * n_objects];
        let mut c = vec![0.0; n_verbs * n_objects];
        for (i, raw) in lines {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::parse(source, line_no, "expected 4 fields"));
            }
            let bad = |what: &str| Error::parse(source, line_no, format!("bad {what}"));
            let v: usize = f[0].parse().map_err(|_| bad("verb id"))?;
            let o: usize = f[1].parse().map_err(|_| bad("object id"))?;
            let conf: f64 = f[2].parse().map_err(|_| bad("confidence"))?;
            let count: f64 = f[3].parse().map_err(|_| bad("count"))?;
            if v >= n_verbs || o >= n_objects {
                return Err(Error::parse(source, line_no, "cell outside the declared grid"));
            }
            let idx = v * n_objects + o;
            if c[idx] != 0.0 {
                return Err(Error::parse(source, line_no, "duplicate cell"));
            }
            if count <= 0.0 {
                return Err(Error::parse(source, line_no, "listed cells must have count > 0"));
            }
            m[idx] = conf;
            c[idx] = count;
        }
        Self::load_snapshot(n_verbs, n_objects, m, c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Rows of verb sources scored per parallel chunk.
const OFFLINE_CHUNK: usize = 32;

/// Offline affordance baseline: scores every ordered pair `(i, j)` of
/// training instances as the composite (verb feature of `i`, object feature
/// of `j`) and averages the probabilities of `i`'s verbs into cells
/// `(v, object(j))`. Costs `N²` scorer evaluations.
pub fn offline_affordance_matrix(dataset: &Dataset, params: &ScorerParams) -> Result<ConfidenceTracker> {
    let space = dataset.space();
    let (nv, no) = (space.n_verbs(), space.n_objects());
    if params.n_verbs() != nv {
        return Err(Error::Shape(format!(
            "scorer predicts {} verbs, concept grid has {nv}",
            params.n_verbs()
        )));
    }
    let insts = dataset.instances();
    let n = insts.len();
    let (d_v, d_o) = (dataset.d_v(), dataset.d_o());
    let mut objects = Array2::zeros((n, d_o));
    for (j, inst) in insts.iter().enumerate() {
        objects.row_mut(j).assign(&ndarray::ArrayView1::from(inst.object_feature()));
    }

    let mut sums = vec![0.0; nv * no];
    let mut counts = vec![0.0; nv * no];
    for start in (0..n).step_by(OFFLINE_CHUNK) {
        let end = (start + OFFLINE_CHUNK).min(n);
        let rows: Vec<Array2<f64>> = (start..end)
            .into_par_iter()
            .map(|i| -> Result<Array2<f64>> {
                let mut x = Array2::zeros((n, d_v + d_o));
                for j in 0..n {
                    let mut row = x.row_mut(j);
                    row.slice_mut(ndarray::s![..d_v])
                        .assign(&ndarray::ArrayView1::from(insts[i].verb_feature()));
                    row.slice_mut(ndarray::s![d_v..]).assign(&objects.row(j));
                }
                let (logits, _) = forward(params, x.view())?;
                Ok(logits.mapv(sigmoid))
            })
            .collect::<Result<_>>()?;
        for (i, probs) in (start..end).zip(rows) {
            for &v in insts[i].verb_labels() {
                for (j, target) in insts.iter().enumerate() {
                    let cell = v * no + target.object_label();
                    sums[cell] += probs[[j, v]];
                    counts[cell] += 1.0;
                }
            }
        }
    }
    let mut tracker = ConfidenceTracker::new(nv, no);
    for cell in 0..nv * no {
        if counts[cell] > 0.0 {
            tracker.absorb(cell, sums[cell], counts[cell]);
        }
    }
    Ok(tracker)
}

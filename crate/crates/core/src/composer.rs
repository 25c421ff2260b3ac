//! Pairwise recombination of a minibatch: every verb feature is joined with
//! every object feature, giving `N²` composites in row-major
//! `(verb_source, object_source)` order. Diagonal entries are the real
//! instances.

use ndarray::{s, Array2, ArrayView1};

use crate::concepts::{ConceptSpace, ConceptStatus};
use crate::dataset::Instance;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CompositeBatch {
    n_sources: usize,
    d_v: usize,
    verb_labels: Vec<Vec<usize>>,
    object_labels: Vec<usize>,
    features: Array2<f64>,
}

/// A view of one composite.
#[derive(Debug, Clone, Copy)]
pub struct Composite<'a> {
    pub verb_source: usize,
    pub object_source: usize,
    pub verb_labels: &'a [usize],
    pub object_label: usize,
    pub feature: ArrayView1<'a, f64>,
}

impl CompositeBatch {
    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn len(&self) -> usize {
        self.n_sources * self.n_sources
    }

    pub fn is_empty(&self) -> bool {
        self.n_sources == 0
    }

    /// `N² × (d_v + d_o)` feature matrix, one row per composite.
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn verb_source(&self, i: usize) -> usize {
        i / self.n_sources
    }

    pub fn object_source(&self, i: usize) -> usize {
        i % self.n_sources
    }

    pub fn is_diagonal(&self, i: usize) -> bool {
        self.verb_source(i) == self.object_source(i)
    }

    /// Indices of the diagonal composites, in source order.
    pub fn diagonal(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_sources).map(move |k| k * self.n_sources + k)
    }

    pub fn verb_labels(&self, i: usize) -> &[usize] {
        &self.verb_labels[self.verb_source(i)]
    }

    pub fn object_label(&self, i: usize) -> usize {
        self.object_labels[self.object_source(i)]
    }

    pub fn get(&self, i: usize) -> Composite<'_> {
        Composite {
            verb_source: self.verb_source(i),
            object_source: self.object_source(i),
            verb_labels: self.verb_labels(i),
            object_label: self.object_label(i),
            feature: self.features.row(i),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Composite<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }
}

pub fn compose(batch: &[&Instance]) -> Result<CompositeBatch> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot compose an empty batch".into()))?;
    let (d_v, d_o) = (first.verb_feature().len(), first.object_feature().len());
    if let Some(k) = batch
        .iter()
        .position(|i| i.verb_feature().len() != d_v || i.object_feature().len() != d_o)
    {
        return Err(Error::Shape(format!(
            "batch member {k} has feature widths differing from ({d_v}, {d_o})"
        )));
    }
    let n = batch.len();
    let mut features = Array2::zeros((n * n, d_v + d_o));
    for (a, va) in batch.iter().enumerate() {
        for (b, ob) in batch.iter().enumerate() {
            let mut row = features.row_mut(a * n + b);
            row.slice_mut(s![..d_v])
                .assign(&ArrayView1::from(va.verb_feature()));
            row.slice_mut(s![d_v..])
                .assign(&ArrayView1::from(ob.object_feature()));
        }
    }
    Ok(CompositeBatch {
        n_sources: n,
        d_v,
        verb_labels: batch.iter().map(|i| i.verb_labels().to_vec()).collect(),
        object_labels: batch.iter().map(|i| i.object_label()).collect(),
        features,
    })
}

/// The outer-product label tensor `Y_h(i, v, o) = Y_v(verb_source) ⊗ Y_o(object_source)`,
/// stored implicitly.
#[derive(Debug, Clone)]
pub struct OuterLabels {
    n_verbs: usize,
    n_objects: usize,
    verbs: Vec<Vec<usize>>,
    objects: Vec<usize>,
}

impl OuterLabels {
    /// Labels given directly as `(verbs, object)` per composite. Verb lists
    /// are sorted and deduplicated.
    pub fn from_rows(n_verbs: usize, n_objects: usize, rows: Vec<(Vec<usize>, usize)>) -> Self {
        let (verbs, objects) = rows
            .into_iter()
            .map(|(mut vs, o)| {
                vs.sort_unstable();
                vs.dedup();
                (vs, o)
            })
            .unzip();
        Self {
            n_verbs,
            n_objects,
            verbs,
            objects,
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn n_verbs(&self) -> usize {
        self.n_verbs
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn get(&self, i: usize, verb: usize, object: usize) -> bool {
        self.objects[i] == object && self.verbs[i].binary_search(&verb).is_ok()
    }

    /// Verbs with a nonzero entry for composite `i`.
    pub fn verbs(&self, i: usize) -> &[usize] {
        &self.verbs[i]
    }

    /// The single object column holding composite `i`'s nonzero entries.
    pub fn object(&self, i: usize) -> usize {
        self.objects[i]
    }
}

pub fn outer_labels(cb: &CompositeBatch, space: &ConceptSpace) -> OuterLabels {
    OuterLabels {
        n_verbs: space.n_verbs(),
        n_objects: space.n_objects(),
        verbs: (0..cb.len()).map(|i| cb.verb_labels(i).to_vec()).collect(),
        objects: (0..cb.len()).map(|i| cb.object_label(i)).collect(),
    }
}

/// Per-composite verb mask selecting labeled verbs whose cell with the
/// composite's object is Known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownMask {
    n_verbs: usize,
    mask: Vec<bool>,
    droppable: Vec<bool>,
}

impl KnownMask {
    pub fn get(&self, i: usize, verb: usize) -> bool {
        self.mask[i * self.n_verbs + verb]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.n_verbs..(i + 1) * self.n_verbs]
    }

    /// True when no verb of composite `i` survives the filter.
    pub fn is_droppable(&self, i: usize) -> bool {
        self.droppable[i]
    }

    pub fn retained_pairs(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.droppable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.droppable.is_empty()
    }

    pub fn n_verbs(&self) -> usize {
        self.n_verbs
    }
}

pub fn known_filter(cb: &CompositeBatch, space: &ConceptSpace) -> KnownMask {
    let nv = space.n_verbs();
    let mut mask = vec![false; cb.len() * nv];
    let mut droppable = vec![true; cb.len()];
    for i in 0..cb.len() {
        let o = cb.object_label(i);
        for &v in cb.verb_labels(i) {
            if space.status(v, o) == ConceptStatus::Known {
                mask[i * nv + v] = true;
                droppable[i] = false;
            }
        }
    }
    KnownMask {
        n_verbs: nv,
        mask,
        droppable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SynthConfig, SynthWorld};
    use proptest::prelude::*;

    fn instance(verbs: &[usize], object: usize, tag: f64) -> Instance {
        Instance::new(verbs.to_vec(), object, vec![tag, tag + 0.5], vec![-tag])
    }

    #[test]
    fn single_source_is_the_instance() {
        let a = instance(&[1], 0, 3.0);
        let cb = compose(&[&a]).unwrap();
        assert_eq!(cb.len(), 1);
        let c = cb.get(0);
        assert_eq!(c.verb_labels, &[1]);
        assert_eq!(c.object_label, 0);
        assert_eq!(c.feature.to_vec(), vec![3.0, 3.5, -3.0]);
    }

    #[test]
    fn two_sources_enumerate_row_major() {
        let (a, b) = (instance(&[0], 2, 1.0), instance(&[1], 3, 2.0));
        let cb = compose(&[&a, &b]).unwrap();
        let pairs: Vec<_> = cb.iter().map(|c| (c.verb_labels[0], c.object_label)).collect();
        assert_eq!(pairs, vec![(0, 2), (0, 3), (1, 2), (1, 3)]);
        assert_eq!(cb.get(1).feature.to_vec(), vec![1.0, 1.5, -2.0]);
        assert_eq!(cb.diagonal().collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn eight_sources_pair_exhaustively() {
        let insts: Vec<_> = (0..8).map(|k| instance(&[k % 3], k % 2, k as f64)).collect();
        let refs: Vec<_> = insts.iter().collect();
        let cb = compose(&refs).unwrap();
        assert_eq!(cb.len(), 64);
        let mut seen = [[0usize; 8]; 8];
        for c in cb.iter() {
            seen[c.verb_source][c.object_source] += 1;
            assert_eq!(c.feature[0], c.verb_source as f64);
            assert_eq!(c.feature[2], -(c.object_source as f64));
        }
        assert!(seen.iter().flatten().all(|&n| n == 1));
        assert_eq!((0..64).filter(|&i| cb.is_diagonal(i)).count(), 8);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = instance(&[0], 0, 1.0);
        let b = Instance::new(vec![0], 0, vec![1.0], vec![1.0]);
        assert!(matches!(compose(&[&a, &b]), Err(Error::Shape(_))));
        assert!(compose(&[]).is_err());
    }

    #[test]
    fn outer_labels_single_and_multi_hot() {
        let space = ConceptSpace::new(6, 7).unwrap();
        let a = instance(&[3], 5, 0.0);
        let b = instance(&[1, 4], 2, 0.0);
        let cb = compose(&[&a, &b]).unwrap();
        let y = outer_labels(&cb, &space);
        let nonzero = |i: usize| {
            let mut out = vec![];
            for v in 0..6 {
                for o in 0..7 {
                    if y.get(i, v, o) {
                        out.push((v, o));
                    }
                }
            }
            out
        };
        assert_eq!(nonzero(0), vec![(3, 5)]);
        assert_eq!(nonzero(3), vec![(1, 2), (4, 2)]);
        // Composite 2: verbs of b, object of a.
        assert_eq!(nonzero(2), vec![(1, 5), (4, 5)]);
    }

    #[test]
    fn known_filter_masks_unknown_cells() {
        let mut space = ConceptSpace::new(3, 2).unwrap();
        space.set(0, 0, ConceptStatus::Known).unwrap(); // "ride horse"
        space.set(1, 1, ConceptStatus::Known).unwrap(); // "feed zebra"
        space.set(0, 1, ConceptStatus::Unknown).unwrap(); // "ride zebra"
        let ride_horse = instance(&[0], 0, 0.0);
        let feed_zebra = instance(&[1], 1, 1.0);
        let cb = compose(&[&ride_horse, &feed_zebra]).unwrap();
        let m = known_filter(&cb, &space);
        assert_eq!(m.row(0), &[true, false, false]);
        assert_eq!(m.row(3), &[false, true, false]);
        // ride + zebra: Unknown, masked out and droppable.
        assert_eq!(m.row(1), &[false, false, false]);
        assert!(m.is_droppable(1));
        // feed + horse: Invalid.
        assert!(m.is_droppable(2));
        assert_eq!(m.retained_pairs(), 2);
    }

    #[test]
    fn known_filter_matches_grid_count_on_synthetic_batch() {
        let mut world = SynthWorld::new(SynthConfig { seed: 12, ..SynthConfig::default() }).unwrap();
        let train = world.training_set().unwrap();
        let space = world.space().clone();
        let refs: Vec<_> = train.instances().iter().step_by(7).take(10).collect();
        let cb = compose(&refs).unwrap();
        let m = known_filter(&cb, &space);
        let mut expected = 0;
        for a in &refs {
            for b in &refs {
                for &v in a.verb_labels() {
                    if space.status(v, b.object_label()) == ConceptStatus::Known {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(m.retained_pairs(), expected);
        for k in cb.diagonal() {
            assert_eq!(m.row(k).iter().filter(|&&b| b).count(), cb.verb_labels(k).len());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn label_tensor_confined_to_one_column(
            rows in proptest::collection::vec((proptest::collection::btree_set(0usize..5, 1..4), 0usize..4), 1..6)
        ) {
            let space = ConceptSpace::new(5, 4).unwrap();
            let insts: Vec<_> = rows
                .iter()
                .map(|(vs, o)| instance(&vs.iter().copied().collect::<Vec<_>>(), *o, 0.0))
                .collect();
            let refs: Vec<_> = insts.iter().collect();
            let cb = compose(&refs).unwrap();
            let y = outer_labels(&cb, &space);
            for i in 0..cb.len() {
                let mut count = 0;
                let mut cols = std::collections::BTreeSet::new();
                for v in 0..5 {
                    for o in 0..4 {
                        if y.get(i, v, o) {
                            count += 1;
                            cols.insert(o);
                        }
                    }
                }
                prop_assert_eq!(count, cb.verb_labels(i).len());
                prop_assert_eq!(cols.len(), 1);
            }
        }

        #[test]
        fn permuting_sources_permutes_composites(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let insts: Vec<_> = (0..5).map(|k| instance(&[k], k, k as f64 * 1.5)).collect();
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = compose(&insts.iter().collect::<Vec<_>>()).unwrap();
            let b = compose(&perm.iter().map(|&p| &insts[p]).collect::<Vec<_>>()).unwrap();
            for r in 0..5 {
                for c in 0..5 {
                    prop_assert_eq!(b.features().row(r * 5 + c), a.features().row(perm[r] * 5 + perm[c]));
                }
            }
        }
    }
}

//! Labeled interaction instances stored as pre-extracted feature vectors.
//!
//! A dataset directory holds three files:
//!
//! * `meta.txt`: `key=value` lines (`format_version`, `n_verbs`, `n_objects`,
//!   `d_v`, `d_o`, `n_instances`, `split`).
//! * `concepts.csv`: the companion concept table (see [`crate::concepts`]).
//! * `instances.bin`: little-endian records, concatenated without padding:
//!   `u32 k`, `k × u32` strictly increasing verb ids, `u32` object id,
//!   `d_v × f64` verb feature, `d_o × f64` object feature.

use std::fmt;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::concepts::{ConceptSpace, ConceptStatus};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.txt";
pub const CONCEPTS_FILE: &str = "concepts.csv";
pub const INSTANCES_FILE: &str = "instances.bin";

/// One labeled sample: a verb-label set, an object category and the two
/// feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    verb_labels: Vec<usize>,
    object_label: usize,
    verb_feature: Vec<f64>,
    object_feature: Vec<f64>,
}

impl Instance {
    /// Verb labels are sorted and deduplicated.
    pub fn new(
        mut verb_labels: Vec<usize>,
        object_label: usize,
        verb_feature: Vec<f64>,
        object_feature: Vec<f64>,
    ) -> Self {
        verb_labels.sort_unstable();
        verb_labels.dedup();
        Self {
            verb_labels,
            object_label,
            verb_feature,
            object_feature,
        }
    }

    pub fn verb_labels(&self) -> &[usize] {
        &self.verb_labels
    }

    pub fn object_label(&self) -> usize {
        self.object_label
    }

    pub fn verb_feature(&self) -> &[f64] {
        &self.verb_feature
    }

    pub fn object_feature(&self) -> &[f64] {
        &self.object_feature
    }

    pub fn has_verb(&self, verb: usize) -> bool {
        self.verb_labels.binary_search(&verb).is_ok()
    }

    fn record_len(&self) -> usize {
        4 * (2 + self.verb_labels.len()) + 8 * (self.verb_feature.len() + self.object_feature.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    d_v: usize,
    d_o: usize,
    split: Split,
    space: ConceptSpace,
}

impl Dataset {
    /// Validates dimensions, label ranges and finiteness. Training splits must
    /// only contain instances whose every (verb, object) cell is Known.
    pub fn new(
        space: ConceptSpace,
        d_v: usize,
        d_o: usize,
        split: Split,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        if d_v == 0 || d_o == 0 {
            return Err(Error::InvalidConfig(format!(
                "feature dimensions must be positive (d_v={d_v}, d_o={d_o})"
            )));
        }
        for (index, inst) in instances.iter().enumerate() {
            if inst.verb_labels.is_empty() {
                return Err(Error::Corrupt(format!("instance {index} has no verb labels")));
            }
            if inst.verb_feature.len() != d_v || inst.object_feature.len() != d_o {
                return Err(Error::Shape(format!(
                    "instance {index} has features of width ({}, {}), expected ({d_v}, {d_o})",
                    inst.verb_feature.len(),
                    inst.object_feature.len()
                )));
            }
            if inst.object_label >= space.n_objects() {
                return Err(Error::OutOfRange {
                    what: "object",
                    id: inst.object_label,
                    limit: space.n_objects(),
                });
            }
            if let Some(&v) = inst.verb_labels.iter().find(|&&v| v >= space.n_verbs()) {
                return Err(Error::OutOfRange {
                    what: "verb",
                    id: v,
                    limit: space.n_verbs(),
                });
            }
            if inst
                .verb_feature
                .iter()
                .chain(&inst.object_feature)
                .any(|x| !x.is_finite())
            {
                return Err(Error::NonFinite(format!("features of instance {index}")));
            }
            if split == Split::Train {
                for &v in &inst.verb_labels {
                    if space.status(v, inst.object_label) != ConceptStatus::Known {
                        return Err(Error::IllegalInstance {
                            index,
                            verb: v,
                            object: inst.object_label,
                        });
                    }
                }
            }
        }
        Ok(Self {
            instances,
            d_v,
            d_o,
            split,
            space,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn d_o(&self) -> usize {
        self.d_o
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn space(&self) -> &ConceptSpace {
        &self.space
    }

    /// The serialized `instances.bin` payload.
    pub fn encode_instances(&self) -> Vec<u8> {
        let total: usize = self.instances.iter().map(Instance::record_len).sum();
        let mut buf = Vec::with_capacity(total);
        for inst in &self.instances {
            buf.extend_from_slice(&(inst.verb_labels.len() as u32).to_le_bytes());
            for &v in &inst.verb_labels {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
            buf.extend_from_slice(&(inst.object_label as u32).to_le_bytes());
            for &x in inst.verb_feature.iter().chain(&inst.object_feature) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    fn meta_text(&self) -> String {
        format!(
            "format_version={FORMAT_VERSION}\nn_verbs={}\nn_objects={}\nd_v={}\nd_o={}\nn_instances={}\nsplit={}\n",
            self.space.n_verbs(),
            self.space.n_objects(),
            self.d_v,
            self.d_o,
            self.instances.len(),
            self.split
        )
    }
}

/// Writes `meta.txt`, `concepts.csv` and `instances.bin` into `dir`,
/// creating it if needed.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = dir.join(META_FILE);
    fs::write(&meta, dataset.meta_text()).map_err(|e| Error::io(&meta, e))?;
    dataset.space.save(&dir.join(CONCEPTS_FILE))?;
    let bin = dir.join(INSTANCES_FILE);
    fs::write(&bin, dataset.encode_instances()).map_err(|e| Error::io(&bin, e))
}

struct Meta {
    n_verbs: usize,
    n_objects: usize,
    d_v: usize,
    d_o: usize,
    n_instances: usize,
    split: Split,
}

fn parse_meta(text: &str, source: &str) -> Result<Meta> {
    let mut fields = std::collections::BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(source, i + 1, "expected key=value"))?;
        fields.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
    }
    let get = |key: &str| -> Result<&(usize, String)> {
        fields
            .get(key)
            .ok_or_else(|| Error::Corrupt(format!("{source}: missing key {key}")))
    };
    let num = |key: &str| -> Result<usize> {
        let (line, v) = get(key)?;
        v.parse()
            .map_err(|_| Error::parse(source, *line, format!("{key} is not a count: {v:?}")))
    };
    let version = num("format_version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Corrupt(format!(
            "{source}: unsupported format_version {version}"
        )));
    }
    let (line, split) = get("split")?;
    let split = match split.as_str() {
        "train" => Split::Train,
        "eval" => Split::Eval,
        other => return Err(Error::parse(source, *line, format!("bad split {other:?}"))),
    };
    Ok(Meta {
        n_verbs: num("n_verbs")?,
        n_objects: num("n_objects")?,
        d_v: num("d_v")?,
        d_o: num("d_o")?,
        n_instances: num("n_instances")?,
        split,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, record: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "{INSTANCES_FILE} truncated inside record {record} (offset {})",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, record: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().unwrap()))
    }

    fn f64(&mut self, record: usize) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, record)?.try_into().unwrap()))
    }
}

fn decode_instances(buf: &[u8], meta: &Meta) -> Result<Vec<Instance>> {
    let mut r = Reader { buf, pos: 0 };
    let mut out = Vec::with_capacity(meta.n_instances);
    for rec in 0..meta.n_instances {
        let k = r.u32(rec)? as usize;
        if k == 0 || k > meta.n_verbs {
            return Err(Error::Corrupt(format!("record {rec} declares {k} verb labels")));
        }
        let mut verbs = Vec::with_capacity(k);
        for _ in 0..k {
            let v = r.u32(rec)? as usize;
            if verbs.last().is_some_and(|&last| v <= last) {
                return Err(Error::Corrupt(format!(
                    "record {rec}: verb ids not strictly increasing"
                )));
            }
            verbs.push(v);
        }
        let object = r.u32(rec)? as usize;
        let verb_feature = (0..meta.d_v).map(|_| r.f64(rec)).collect::<Result<Vec<_>>>()?;
        let object_feature = (0..meta.d_o).map(|_| r.f64(rec)).collect::<Result<Vec<_>>>()?;
        out.push(Instance {
            verb_labels: verbs,
            object_label: object,
            verb_feature,
            object_feature,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after {} records",
            buf.len() - r.pos,
            meta.n_instances
        )));
    }
    Ok(out)
}

/// Reads a directory written by [`write_dataset`]. Training splits are
/// checked against the embedded concept table.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = parse_meta(&text, &meta_path.display().to_string())?;
    let space = ConceptSpace::load(&dir.join(CONCEPTS_FILE), meta.n_verbs, meta.n_objects)?;
    let bin_path = dir.join(INSTANCES_FILE);
    let buf = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let instances = decode_instances(&buf, &meta)?;
    Dataset::new(space, meta.d_v, meta.d_o, meta.split, instances)
}

/// Draws `batch_size` instances: without replacement when the dataset is
/// large enough, with replacement otherwise.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a Instance>> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("cannot sample from an empty dataset".into()));
    }
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let n = dataset.len();
    let picks: Vec<usize> = if batch_size <= n {
        index::sample(rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..n)).collect()
    };
    Ok(picks.into_iter().map(|i| &dataset.instances[i]).collect())
}

/// Owns a seeded generator and draws minibatches from one dataset.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample<'a>(&mut self, dataset: &'a Dataset, batch_size: usize) -> Result<Vec<&'a Instance>> {
        sample_batch(dataset, batch_size, &mut self.rng)
    }
}

/// Parameters of a synthetic world with group-structured affordances.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_verbs: usize,
    pub n_objects: usize,
    pub n_groups: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub instances_per_known_concept: usize,
    pub noise_sigma: f64,
    pub known_fraction: f64,
    /// Scale of the per-object offset added to its group prototype.
    pub object_offset_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_verbs: 12,
            n_objects: 10,
            n_groups: 4,
            d_v: 32,
            d_o: 32,
            instances_per_known_concept: 20,
            noise_sigma: 0.3,
            known_fraction: 0.5,
            object_offset_scale: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_verbs == 0 || self.n_objects == 0 {
            return bad("n_verbs and n_objects must be positive".into());
        }
        if self.n_groups == 0 || self.n_groups > self.n_objects {
            return bad(format!(
                "n_groups must be in 1..={} (got {})",
                self.n_objects, self.n_groups
            ));
        }
        if self.d_v == 0 || self.d_o == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if !(self.known_fraction > 0.0 && self.known_fraction < 1.0) {
            return bad(format!(
                "known_fraction must lie strictly between 0 and 1 (got {})",
                self.known_fraction
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0 (got {})", self.noise_sigma));
        }
        if !(self.object_offset_scale >= 0.0 && self.object_offset_scale.is_finite()) {
            return bad(format!(
                "object_offset_scale must be finite and >= 0 (got {})",
                self.object_offset_scale
            ));
        }
        Ok(())
    }
}

const MAX_COMPAT_RESAMPLES: usize = 64;
/// Probability that a given group is compatible with a given verb.
const GROUP_COMPAT_PROB: f64 = 0.5;
const HELDOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// A sampled world: group structure, concept partition and feature
/// prototypes. Training and held-out instances are drawn from it.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    config: SynthConfig,
    object_group: Vec<usize>,
    verb_groups: Vec<Vec<bool>>,
    space: ConceptSpace,
    verb_prototypes: Vec<Vec<f64>>,
    group_prototypes: Vec<Vec<f64>>,
    object_offsets: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl SynthWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (nv, no, ng) = (config.n_verbs, config.n_objects, config.n_groups);

        let mut object_group: Vec<usize> = (0..no).map(|o| o % ng).collect();
        object_group.shuffle(&mut rng);

        let mut verb_groups = Vec::with_capacity(nv);
        for v in 0..nv {
            let mut attempt = 0;
            let groups = loop {
                let g: Vec<bool> = (0..ng).map(|_| rng.random_bool(GROUP_COMPAT_PROB)).collect();
                if g.iter().any(|&b| b) {
                    break g;
                }
                attempt += 1;
                if attempt >= MAX_COMPAT_RESAMPLES {
                    return Err(Error::InvalidConfig(format!(
                        "verb {v} drew no compatible group in {MAX_COMPAT_RESAMPLES} attempts"
                    )));
                }
            };
            verb_groups.push(groups);
        }

        let is_concept = |v: usize, o: usize| verb_groups[v][object_group[o]];
        let mut concepts: Vec<(usize, usize)> = (0..nv)
            .flat_map(|v| (0..no).map(move |o| (v, o)))
            .filter(|&(v, o)| is_concept(v, o))
            .collect();
        let target = (config.known_fraction * concepts.len() as f64).ceil() as usize;
        concepts.shuffle(&mut rng);

        let mut space = ConceptSpace::new(nv, no)?;
        for &(v, o) in &concepts {
            space.set(v, o, ConceptStatus::Unknown)?;
        }
        let mut known = 0usize;
        // Coverage first: every verb and every object with a concept gets
        // one Known cell, taken from a random position in the shuffled list.
        for v in 0..nv {
            if let Some(&(_, o)) = concepts.iter().find(|&&(cv, _)| cv == v) {
                space.set(v, o, ConceptStatus::Known)?;
                known += 1;
            }
        }
        for o in 0..no {
            let covered = (0..nv).any(|v| space.status(v, o) == ConceptStatus::Known);
            if !covered {
                if let Some(&(v, _)) = concepts.iter().find(|&&(_, co)| co == o) {
                    space.set(v, o, ConceptStatus::Known)?;
                    known += 1;
                }
            }
        }
        for &(v, o) in &concepts {
            if known >= target {
                break;
            }
            if space.status(v, o) == ConceptStatus::Unknown {
                space.set(v, o, ConceptStatus::Known)?;
                known += 1;
            }
        }

        let verb_prototypes = (0..nv).map(|_| gaussian_vec(&mut rng, config.d_v, 1.0)).collect();
        let group_prototypes = (0..ng).map(|_| gaussian_vec(&mut rng, config.d_o, 1.0)).collect();
        let object_offsets = (0..no)
            .map(|_| gaussian_vec(&mut rng, config.d_o, config.object_offset_scale))
            .collect();

        let world = Self {
            config,
            object_group,
            verb_groups,
            space,
            verb_prototypes,
            group_prototypes,
            object_offsets,
            rng,
        };
        if let Some((v, o)) = world.unreachable_unknown() {
            warn!("unknown concept ({v}, {o}) shares neither verb-group nor object evidence with a known cell");
        }
        Ok(world)
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn space(&self) -> &ConceptSpace {
        &self.space
    }

    pub fn object_group(&self, object: usize) -> usize {
        self.object_group[object]
    }

    pub fn verb_compatible(&self, verb: usize, group: usize) -> bool {
        self.verb_groups[verb][group]
    }

    /// First Unknown cell with no Known cell on the same verb in the same
    /// object group and no Known cell on the same object.
    pub fn unreachable_unknown(&self) -> Option<(usize, usize)> {
        let (nv, no) = (self.space.n_verbs(), self.space.n_objects());
        self.space.cells().find_map(|(v, o, s)| {
            if s != ConceptStatus::Unknown {
                return None;
            }
            let via_group = (0..no).any(|o2| {
                self.object_group[o2] == self.object_group[o]
                    && self.space.status(v, o2) == ConceptStatus::Known
            });
            let via_object = (0..nv).any(|v2| self.space.status(v2, o) == ConceptStatus::Known);
            (!via_group && !via_object).then_some((v, o))
        })
    }

    fn draw_instance(&self, rng: &mut ChaCha8Rng, verbs: Vec<usize>, object: usize) -> Instance {
        let sigma = self.config.noise_sigma;
        let proto_v = &self.verb_prototypes[verbs[0]];
        let verb_feature = proto_v
            .iter()
            .map(|&p| p + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let group = &self.group_prototypes[self.object_group[object]];
        let offset = &self.object_offsets[object];
        let object_feature = group
            .iter()
            .zip(offset)
            .map(|(&g, &u)| g + u + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Instance::new(verbs, object, verb_feature, object_feature)
    }

    /// Training split: `instances_per_known_concept` single-label instances
    /// per Known cell, row-major.
    pub fn training_set(&mut self) -> Result<Dataset> {
        let mut rng = self.rng.clone();
        let mut instances = Vec::new();
        for (v, o, s) in self.space.cells() {
            if s == ConceptStatus::Known {
                for _ in 0..self.config.instances_per_known_concept {
                    instances.push(self.draw_instance(&mut rng, vec![v], o));
                }
            }
        }
        self.rng = rng;
        Dataset::new(
            self.space.clone(),
            self.config.d_v,
            self.config.d_o,
            Split::Train,
            instances,
        )
    }

    /// Held-out evaluation split: `per_object` fresh instances for every
    /// object that has at least one concept, each labeled with all of the
    /// object's concept verbs. Drawn from an independent stream so it does
    /// not perturb the training set.
    pub fn heldout_set(&self, per_object: usize) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ HELDOUT_STREAM);
        let mut instances = Vec::new();
        for o in 0..self.space.n_objects() {
            let verbs: Vec<usize> = (0..self.space.n_verbs())
                .filter(|&v| self.space.status(v, o) != ConceptStatus::Invalid)
                .collect();
            if verbs.is_empty() {
                continue;
            }
            for _ in 0..per_object {
                instances.push(self.draw_instance(&mut rng, verbs.clone(), o));
            }
        }
        Dataset::new(
            self.space.clone(),
            self.config.d_v,
            self.config.d_o,
            Split::Eval,
            instances,
        )
    }
}

/// Samples a world and its training split.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(Dataset, ConceptSpace)> {
    let mut world = SynthWorld::new(config.clone())?;
    let train = world.training_set()?;
    Ok((train, world.space.clone()))
}

//! Prototype-based heterogeneous federated learning with two-level
//! structural alignment.
//!
//! Each round the server broadcasts its global prototypes, every
//! participating client trains locally on
//! `L_sup + λ·L_proto + γ·L_inst` and uploads full-shard class means, and the
//! server aggregates them with per-class sample-count weights. Only
//! [`PrototypeSet`]s ever cross the client/server boundary.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{effective_dimensionality_with, LossTerms, RoundReport};
use crate::data::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{loss_contrastive, loss_cosine, loss_gcsa, loss_mse, loss_rcsa, AlignmentKind, LossValueWithGrad};
use crate::model::{build_model, loss_supervised, ArchitectureSpec, ClientModel, ModelGradients};
use crate::rng::{derive_seed, rng_from, tag};
use crate::tensor::{dot, norm, FeatureMatrix};

/// Structural losses need at least this many rows to be informative.
pub const MIN_STRUCTURAL_ROWS: usize = 3;

/// Repulsion steps used to spread fixed prototypes over the sphere.
pub const HYPERSPHERE_STEPS: usize = 1000;

/// One class prototype and the number of samples behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub vector: Vec<f64>,
    pub count: usize,
}

/// Class id → prototype. Iteration is in ascending class order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrototypeSet {
    entries: BTreeMap<usize, PrototypeEntry>,
}

impl PrototypeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a class prototype.
    pub fn insert(&mut self, class: usize, vector: Vec<f64>, count: usize) -> Result<()> {
        if count == 0 {
            return Err(Error::contract("PrototypeSet::insert", format!("class {class} has zero count")));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("PrototypeSet::insert", format!("class {class} prototype is not finite")));
        }
        if let Some(d) = self.dim() {
            if d != vector.len() && !(self.entries.len() == 1 && self.entries.contains_key(&class)) {
                return Err(Error::contract(
                    "PrototypeSet::insert",
                    format!("class {class} prototype has {} values, set has {d}", vector.len()),
                ));
            }
        }
        self.entries.insert(class, PrototypeEntry { vector, count });
        Ok(())
    }

    pub fn get(&self, class: usize) -> Option<&PrototypeEntry> {
        self.entries.get(&class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.vector.len())
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &PrototypeEntry)> {
        self.entries.iter().map(|(&c, e)| (c, e))
    }

    /// Stack the prototypes of `classes`, in that order.
    pub fn matrix_for(&self, classes: &[usize]) -> Result<FeatureMatrix> {
        let rows = classes
            .iter()
            .map(|c| {
                self.get(*c)
                    .map(|e| e.vector.as_slice())
                    .ok_or_else(|| Error::contract("PrototypeSet::matrix_for", format!("class {c} missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureMatrix::from_rows(&rows)
    }

    /// All prototypes stacked in class order.
    pub fn to_matrix(&self) -> Result<FeatureMatrix> {
        self.matrix_for(&self.classes())
    }

    /// Number of `f64` values carried by this set on the wire (vector plus
    /// count per class).
    pub fn payload_len(&self) -> usize {
        self.entries.values().map(|e| e.vector.len() + 1).sum()
    }
}

/// Per-class mean of embedding rows; `count` is the number of rows.
pub fn batch_prototypes(embeddings: &FeatureMatrix, labels: &[usize]) -> Result<PrototypeSet> {
    if labels.len() != embeddings.rows() {
        return Err(Error::contract(
            "batch_prototypes",
            format!("{} labels for {} rows", labels.len(), embeddings.rows()),
        ));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &y) in embeddings.iter_rows().zip(labels) {
        let (sum, count) = sums.entry(y).or_insert_with(|| (vec![0.0; embeddings.cols()], 0));
        sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        *count += 1;
    }
    let mut set = PrototypeSet::new();
    for (class, (mut sum, count)) in sums {
        sum.iter_mut().for_each(|s| *s /= count as f64);
        set.insert(class, sum, count)?;
    }
    Ok(set)
}

/// Server-side aggregation: for every class, the count-weighted mean of the
/// uploads that contain it. Classes nobody uploaded keep their entry from
/// `previous`.
pub fn aggregate_prototypes(uploads: &[PrototypeSet], previous: Option<&PrototypeSet>) -> Result<PrototypeSet> {
    if uploads.is_empty() {
        return Err(Error::contract("aggregate_prototypes", "no uploads"));
    }
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for upload in uploads {
        for (class, entry) in upload.iter() {
            let (sum, weight) = acc.entry(class).or_insert_with(|| (vec![0.0; entry.vector.len()], 0));
            if sum.len() != entry.vector.len() {
                return Err(Error::contract("aggregate_prototypes", format!("class {class}: mixed dimensions")));
            }
            let w = entry.count as f64;
            sum.iter_mut().zip(&entry.vector).for_each(|(s, v)| *s += w * v);
            *weight += entry.count;
        }
    }
    let mut out = previous.cloned().unwrap_or_default();
    for (class, (mut sum, weight)) in acc {
        sum.iter_mut().for_each(|s| *s /= weight as f64);
        out.insert(class, sum, weight)?;
    }
    Ok(out)
}

/// `C` unit vectors in `ℝ^d` spread by Coulomb repulsion on the sphere;
/// seeded start, fixed [`HYPERSPHERE_STEPS`] iterations.
pub fn fixed_hypersphere_prototypes(num_classes: usize, dim: usize, seed: u64) -> Result<PrototypeSet> {
    if num_classes < 2 || dim < 2 {
        return Err(Error::contract(
            "fixed_hypersphere_prototypes",
            format!("needs C ≥ 2 and d ≥ 2, got C = {num_classes}, d = {dim}"),
        ));
    }
    let mut rng = rng_from(seed, &[tag::HYPERSPHERE]);
    let mut points: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let len = norm(&v);
            v.into_iter().map(|x| x / len).collect()
        })
        .collect();
    for step in 0..HYPERSPHERE_STEPS {
        let rate = 0.5 / (num_classes as f64) * (1.0 - step as f64 / HYPERSPHERE_STEPS as f64) + 1e-3;
        let forces: Vec<Vec<f64>> = (0..num_classes)
            .map(|i| {
                let mut f = vec![0.0; dim];
                for j in (0..num_classes).filter(|&j| j != i) {
                    let diff: Vec<f64> = points[i].iter().zip(&points[j]).map(|(a, b)| a - b).collect();
                    let dist = norm(&diff).max(1e-9);
                    let scale = 1.0 / (dist * dist * dist);
                    f.iter_mut().zip(&diff).for_each(|(fk, dk)| *fk += scale * dk);
                }
                f
            })
            .collect();
        for (p, f) in points.iter_mut().zip(&forces) {
            // Only the tangential part moves a point along the sphere.
            let radial = dot(f, p);
            p.iter_mut().zip(f).for_each(|(x, fk)| *x += rate * (fk - radial * *x));
            let len = norm(p);
            p.iter_mut().for_each(|x| *x /= len);
        }
    }
    let mut set = PrototypeSet::new();
    for (c, p) in points.into_iter().enumerate() {
        set.insert(c, p, 1)?;
    }
    Ok(set)
}

/// How the server builds global prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    /// Count-weighted aggregation of client uploads.
    Aggregate,
    /// Fixed, well-spread unit vectors chosen before training.
    FixedHypersphere,
}

/// Local-training and participation hyperparameters for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Weight of the prototype-level alignment term.
    pub lambda: f64,
    /// Weight of the instance-level alignment term.
    pub gamma: f64,
    pub alignment: AlignmentKind,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub participation_fraction: f64,
    pub prototype_mode: PrototypeMode,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 1.0,
            alignment: AlignmentKind::Gcsa,
            local_epochs: 2,
            batch_size: 32,
            learning_rate: 0.05,
            participation_fraction: 1.0,
            prototype_mode: PrototypeMode::Aggregate,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Err(Error::contract("RoundConfig", detail));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be ≥ 0, got {}", self.gamma));
        }
        if self.local_epochs < 1 {
            return bad("local_epochs must be ≥ 1".to_owned());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return bad(format!("participation_fraction must be in (0, 1], got {}", self.participation_fraction));
        }
        self.alignment.validate()
    }
}

/// Values of the local objective for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    /// Unweighted prototype-level alignment loss (0 when skipped or λ = 0).
    pub proto: f64,
    /// Unweighted instance-level alignment loss (0 when skipped or γ = 0).
    pub inst: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// `sup + λ·proto + γ·inst`.
    pub total: f64,
    pub proto_skipped: bool,
    pub inst_skipped: bool,
    /// Batch rows left out of alignment because their class has no global
    /// prototype.
    pub rows_without_prototype: usize,
}

enum Term {
    Active(LossValueWithGrad),
    Skipped,
}

/// One alignment term between `local` rows and their targets. `target_labels`
/// indexes `all_targets` (used by the contrastive kind only).
fn alignment_term(
    kind: AlignmentKind,
    level: &'static str,
    local: &FeatureMatrix,
    targets: &FeatureMatrix,
    all_targets: &FeatureMatrix,
    target_labels: &[usize],
) -> Result<Term> {
    if kind.is_structural() && local.rows() < MIN_STRUCTURAL_ROWS {
        log::debug!("{level}: {kind} skipped, {} rows < {MIN_STRUCTURAL_ROWS}", local.rows());
        return Ok(Term::Skipped);
    }
    let result = match kind {
        AlignmentKind::Mse => loss_mse(local, targets),
        AlignmentKind::Cosine => loss_cosine(local, targets),
        AlignmentKind::Gcsa => loss_gcsa(local, targets),
        AlignmentKind::Rcsa => loss_rcsa(local, targets),
        AlignmentKind::Contrastive { temperature } => {
            loss_contrastive(local, all_targets, target_labels, temperature).map(|c| c.total)
        }
    };
    match result {
        Ok(l) => Ok(Term::Active(l)),
        Err(e) if e.is_degenerate() => {
            log::debug!("{level}: {kind} skipped: {e}");
            Ok(Term::Skipped)
        }
        Err(e) => Err(e),
    }
}

/// Local objective and its parameter gradients, without updating the model.
pub fn local_objective(
    model: &ClientModel,
    batch: &FeatureMatrix,
    labels: &[usize],
    global: &PrototypeSet,
    cfg: &RoundConfig,
) -> Result<(LossBreakdown, ModelGradients)> {
    if batch.rows() < 2 {
        return Err(Error::contract("local_train_step", "batch needs at least 2 samples"));
    }
    let out = model.forward(batch)?;
    let (sup, grad_logits) = loss_supervised(&out.logits, labels)?;
    let z = &out.embeddings;

    let included: Vec<usize> = (0..labels.len()).filter(|&i| global.contains(labels[i])).collect();
    let mut breakdown = LossBreakdown {
        sup,
        proto: 0.0,
        inst: 0.0,
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        total: sup,
        proto_skipped: false,
        inst_skipped: false,
        rows_without_prototype: labels.len() - included.len(),
    };
    if breakdown.rows_without_prototype > 0 && (cfg.lambda > 0.0 || cfg.gamma > 0.0) {
        log::debug!("{} batch rows have no global prototype", breakdown.rows_without_prototype);
    }

    let mut grad_z: Option<FeatureMatrix> = None;
    let wants_alignment = (cfg.lambda > 0.0 || cfg.gamma > 0.0) && !included.is_empty();
    if wants_alignment {
        let global_classes = global.classes();
        let all_targets = global.to_matrix()?;
        let class_index = |c: usize| global_classes.binary_search(&c).expect("class has a prototype");
        let mut gz = FeatureMatrix::zeros(z.rows(), z.cols());

        if cfg.lambda > 0.0 {
            let inc_labels: Vec<usize> = included.iter().map(|&i| labels[i]).collect();
            let local = batch_prototypes(&z.select_rows(&included)?, &inc_labels)?;
            let present = local.classes();
            let local_m = local.to_matrix()?;
            let targets = global.matrix_for(&present)?;
            let target_labels: Vec<usize> = present.iter().map(|&c| class_index(c)).collect();
            match alignment_term(cfg.alignment, "prototype", &local_m, &targets, &all_targets, &target_labels)? {
                Term::Active(l) => {
                    breakdown.proto = l.value;
                    // Each row receives its class-mean gradient divided by the
                    // class count.
                    for &i in &included {
                        let k = present.binary_search(&labels[i]).expect("present class");
                        let count = local.get(labels[i]).expect("present class").count as f64;
                        for (g, gp) in gz.row_mut(i).iter_mut().zip(l.grad.row(k)) {
                            *g += cfg.lambda * gp / count;
                        }
                    }
                }
                Term::Skipped => breakdown.proto_skipped = true,
            }
        }

        if cfg.gamma > 0.0 {
            let z_inc = z.select_rows(&included)?;
            let target_labels: Vec<usize> = included.iter().map(|&i| class_index(labels[i])).collect();
            let z_tilde = all_targets.select_rows(&target_labels)?;
            match alignment_term(cfg.alignment, "instance", &z_inc, &z_tilde, &all_targets, &target_labels)? {
                Term::Active(l) => {
                    breakdown.inst = l.value;
                    for (k, &i) in included.iter().enumerate() {
                        for (g, gi) in gz.row_mut(i).iter_mut().zip(l.grad.row(k)) {
                            *g += cfg.gamma * gi;
                        }
                    }
                }
                Term::Skipped => breakdown.inst_skipped = true,
            }
        }
        grad_z = Some(gz);
    }

    breakdown.total = breakdown.sup + cfg.lambda * breakdown.proto + cfg.gamma * breakdown.inst;
    if !breakdown.total.is_finite() {
        return Err(Error::numeric("local_train_step", "non-finite local loss"));
    }
    let grads = model.backward(&out.cache, &grad_logits, grad_z.as_ref())?;
    Ok((breakdown, grads))
}

/// One SGD step on `L_sup + λ·L_proto + γ·L_inst`.
pub fn local_train_step(
    model: &mut ClientModel,
    batch: &FeatureMatrix,
    labels: &[usize],
    global: &PrototypeSet,
    cfg: &RoundConfig,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = local_objective(model, batch, labels, global, cfg)?;
    model.apply_gradients(&grads, cfg.learning_rate)?;
    Ok(breakdown)
}

/// Per-client summary of one round of local training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub steps: usize,
    pub mean_sup: f64,
    pub mean_proto: f64,
    pub mean_inst: f64,
    pub skipped_structural_steps: usize,
}

impl ClientMetrics {
    pub fn loss_terms(&self) -> LossTerms {
        LossTerms { sup: self.mean_sup, proto: self.mean_proto, inst: self.mean_inst }
    }
}

/// What a client sends to the server: prototypes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpload {
    pub client: usize,
    pub prototypes: PrototypeSet,
}

#[derive(Debug, Clone)]
pub struct ClientRoundOutput {
    pub model: ClientModel,
    pub upload: ClientUpload,
    pub metrics: ClientMetrics,
}

/// Full-shard class means under the model's current extractor.
pub fn shard_prototypes(model: &ClientModel, data: &LabeledDataset) -> Result<PrototypeSet> {
    batch_prototypes(&model.embed(&data.features)?, &data.labels)
}

/// `local_epochs` passes of seeded-shuffled minibatches, then an upload of
/// full-shard class means computed with the trained extractor. Trailing
/// batches with fewer than two samples are dropped.
pub fn client_round(
    mut model: ClientModel,
    shard: &ClientShard,
    global: &PrototypeSet,
    cfg: &RoundConfig,
    seed: u64,
) -> Result<ClientRoundOutput> {
    let wrap = |e: Error| Error::Client { client: shard.client, source: Box::new(e) };
    let mut rng = rng_from(seed, &[tag::CLIENT_ROUND]);
    let mut metrics = ClientMetrics::default();
    let mut order: Vec<usize> = (0..shard.train.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = shard.train.subset(chunk).map_err(wrap)?;
            let b = local_train_step(&mut model, &batch.features, &batch.labels, global, cfg).map_err(wrap)?;
            metrics.steps += 1;
            metrics.mean_sup += b.sup;
            metrics.mean_proto += b.proto;
            metrics.mean_inst += b.inst;
            metrics.skipped_structural_steps += b.proto_skipped as usize + b.inst_skipped as usize;
        }
    }
    if metrics.steps > 0 {
        let n = metrics.steps as f64;
        metrics.mean_sup /= n;
        metrics.mean_proto /= n;
        metrics.mean_inst /= n;
    }
    let prototypes = shard_prototypes(&model, &shard.train).map_err(wrap)?;
    Ok(ClientRoundOutput { model, upload: ClientUpload { client: shard.client, prototypes }, metrics })
}

/// Fraction of `data` the model classifies correctly.
pub fn evaluate_accuracy(model: &ClientModel, data: &LabeledDataset) -> Result<f64> {
    let pred = model.predict(&data.features)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// The server: holds global prototypes and accepts [`ClientUpload`]s only.
#[derive(Debug, Clone)]
pub struct PrototypeServer {
    global: PrototypeSet,
    mode: PrototypeMode,
    num_classes: usize,
    feature_dim: usize,
}

impl PrototypeServer {
    pub fn new(mode: PrototypeMode, num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let global = match mode {
            PrototypeMode::Aggregate => PrototypeSet::new(),
            PrototypeMode::FixedHypersphere => fixed_hypersphere_prototypes(num_classes, feature_dim, seed)?,
        };
        Ok(Self { global, mode, num_classes, feature_dim })
    }

    pub fn broadcast(&self) -> &PrototypeSet {
        &self.global
    }

    /// Validates each payload (class range, dimension, counts, finiteness)
    /// and, in aggregate mode, folds the uploads into the global set.
    pub fn receive(&mut self, uploads: &[ClientUpload]) -> Result<()> {
        for u in uploads {
            for (class, entry) in u.prototypes.iter() {
                if class >= self.num_classes || entry.vector.len() != self.feature_dim || entry.count == 0 {
                    return Err(Error::contract(
                        "PrototypeServer::receive",
                        format!("client {} sent a malformed prototype for class {class}", u.client),
                    ));
                }
            }
        }
        if self.mode == PrototypeMode::Aggregate && !uploads.is_empty() {
            let sets: Vec<PrototypeSet> = uploads.iter().map(|u| u.prototypes.clone()).collect();
            self.global = aggregate_prototypes(&sets, Some(&self.global))?;
        }
        Ok(())
    }
}

/// The three model-sharing settings compared by the dimensionality
/// diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// One model, identical parameters for every client.
    HomoShared,
    /// One architecture and initialization, independently trained per client.
    HomoLocal,
    /// Client `i` gets architecture `i mod X` with its own initialization.
    Hetero,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::HomoShared => "homo-shared",
            Scenario::HomoLocal => "homo-local",
            Scenario::Hetero => "hetero",
        }
    }
}

impl core::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homo-shared" => Ok(Scenario::HomoShared),
            "homo-local" => Ok(Scenario::HomoLocal),
            "hetero" | "hetero-local" => Ok(Scenario::Hetero),
            other => Err(Error::contract("Scenario::from_str", format!("unknown scenario `{other}`"))),
        }
    }
}

/// A client's work for one round.
pub struct ClientJob<'a> {
    pub model: ClientModel,
    pub shard: &'a ClientShard,
    pub global: &'a PrototypeSet,
    pub cfg: &'a RoundConfig,
    pub seed: u64,
}

impl ClientJob<'_> {
    pub fn run(self) -> Result<ClientRoundOutput> {
        client_round(self.model, self.shard, self.global, self.cfg, self.seed)
    }
}

/// Runs the independent client jobs of one round. Outputs must be returned in
/// job order; per-client randomness is fixed by each job's seed, so any
/// execution order yields the same results.
pub trait ClientExecutor {
    fn execute(&self, jobs: Vec<ClientJob<'_>>) -> Vec<Result<ClientRoundOutput>>;
}

/// Runs jobs one after another on the calling thread.
pub struct Sequential;

impl ClientExecutor for Sequential {
    fn execute(&self, jobs: Vec<ClientJob<'_>>) -> Vec<Result<ClientRoundOutput>> {
        jobs.into_iter().map(ClientJob::run).collect()
    }
}

/// Everything that defines a run apart from the client data.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub round: RoundConfig,
    pub archs: Vec<ArchitectureSpec>,
    pub rounds: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub num_classes: usize,
    /// Scale stacked prototypes to unit rows before the dimensionality
    /// diagnostic.
    pub normalize_stacked: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub final_global: PrototypeSet,
    pub models: Vec<ClientModel>,
}

/// Sorted ids of this round's participants.
pub fn sample_participants(num_clients: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let k = (libm::ceil(fraction * num_clients as f64) as usize).clamp(1, num_clients);
    if k == num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = rng_from(seed, &[tag::PARTICIPATION, round as u64]);
    let all: Vec<usize> = (0..num_clients).collect();
    let mut chosen: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
    chosen.sort_unstable();
    chosen
}

fn build_clients(plan: &ExperimentPlan, shards: &[ClientShard]) -> Result<Vec<ClientModel>> {
    if plan.archs.is_empty() {
        return Err(Error::contract("run_experiment", "no architectures"));
    }
    let input_dim = shards[0].train.input_dim();
    shards
        .iter()
        .map(|s| {
            let (arch_id, init_seed) = match plan.scenario {
                Scenario::Hetero => {
                    (s.client % plan.archs.len(), derive_seed(plan.seed, &[tag::MODEL_INIT, s.client as u64]))
                }
                // Homogeneous settings reuse client 0's architecture and init.
                Scenario::HomoLocal | Scenario::HomoShared => (0, derive_seed(plan.seed, &[tag::MODEL_INIT, 0])),
            };
            let mut m = build_model(&plan.archs[arch_id], input_dim, plan.num_classes, init_seed)?;
            m.architecture_id = arch_id;
            Ok(m)
        })
        .collect()
}

/// [`run_experiment_with`] on the calling thread, without a round callback.
pub fn run_experiment(plan: &ExperimentPlan, shards: &[ClientShard]) -> Result<ExperimentOutcome> {
    run_experiment_with(plan, shards, &Sequential, |_, _| {})
}

/// Full federated run.
///
/// Round 0 starts from an empty global set, so its local training is purely
/// supervised; its uploads bootstrap the prototypes used from round 1 on.
/// Every client (participant or not) is evaluated on its own test split after
/// each round. `on_round` sees each report and the post-aggregation global
/// prototypes.
pub fn run_experiment_with<E, F>(
    plan: &ExperimentPlan,
    shards: &[ClientShard],
    executor: &E,
    mut on_round: F,
) -> Result<ExperimentOutcome>
where
    E: ClientExecutor + ?Sized,
    F: FnMut(&RoundReport, &PrototypeSet),
{
    plan.round.validate()?;
    if shards.is_empty() {
        return Err(Error::contract("run_experiment", "no client shards"));
    }
    if let Some((k, s)) = shards.iter().enumerate().find(|(k, s)| s.client != *k) {
        return Err(Error::contract("run_experiment", format!("shard {k} belongs to client {}", s.client)));
    }
    let feature_dim = plan.archs.first().map_or(0, |a| a.feature_dim);
    if plan.archs.iter().any(|a| a.feature_dim != feature_dim) {
        return Err(Error::contract("run_experiment", "all architectures must share feature_dim"));
    }
    let mut models = build_clients(plan, shards)?;
    let mut server = PrototypeServer::new(
        plan.round.prototype_mode,
        plan.num_classes,
        feature_dim,
        derive_seed(plan.seed, &[tag::HYPERSPHERE]),
    )?;
    let mut reports: Vec<RoundReport> = Vec::with_capacity(plan.rounds);
    let mut best = f64::NEG_INFINITY;
    let n = shards.len();

    for round in 0..plan.rounds {
        let wrap = |e: Error| Error::Round { round, source: Box::new(e) };
        let participants = sample_participants(n, plan.round.participation_fraction, plan.seed, round);
        let client_seed = |c: usize| derive_seed(plan.seed, &[tag::CLIENT_ROUND, c as u64, round as u64]);
        let mut loss_terms = vec![None; n];
        let mut skipped = 0;
        let mut uploads = Vec::with_capacity(participants.len());

        if plan.scenario == Scenario::HomoShared {
            // A single model visits the participants in turn.
            let mut shared = models[0].clone();
            for &c in &participants {
                let out = client_round(shared, &shards[c], server.broadcast(), &plan.round, client_seed(c)).map_err(wrap)?;
                loss_terms[c] = Some(out.metrics.loss_terms());
                skipped += out.metrics.skipped_structural_steps;
                shared = out.model;
            }
            for &c in &participants {
                let prototypes = shard_prototypes(&shared, &shards[c].train).map_err(wrap)?;
                uploads.push(ClientUpload { client: c, prototypes });
            }
            models.iter_mut().for_each(|m| *m = shared.clone());
        } else {
            let jobs = participants
                .iter()
                .map(|&c| ClientJob {
                    model: models[c].clone(),
                    shard: &shards[c],
                    global: server.broadcast(),
                    cfg: &plan.round,
                    seed: client_seed(c),
                })
                .collect();
            let outputs = executor.execute(jobs);
            if outputs.len() != participants.len() {
                return Err(wrap(Error::contract("ClientExecutor", "wrong number of outputs")));
            }
            for (&c, out) in participants.iter().zip(outputs) {
                let out = out.map_err(wrap)?;
                loss_terms[c] = Some(out.metrics.loss_terms());
                skipped += out.metrics.skipped_structural_steps;
                models[c] = out.model;
                uploads.push(out.upload);
            }
        }

        let stacked: Vec<&[f64]> =
            uploads.iter().flat_map(|u| u.prototypes.iter().map(|(_, e)| e.vector.as_slice())).collect();
        let effective = FeatureMatrix::from_rows(&stacked).ok().and_then(|m| effective_dimensionality_with(&m, plan.normalize_stacked).ok());
        server.receive(&uploads).map_err(wrap)?;

        let per_client_accuracy = models
            .iter()
            .zip(shards)
            .map(|(m, s)| evaluate_accuracy(m, &s.test))
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let mean_accuracy = per_client_accuracy.iter().sum::<f64>() / n as f64;
        best = best.max(mean_accuracy);
        let report = RoundReport {
            round,
            per_client_accuracy,
            mean_accuracy,
            best_mean_accuracy: best,
            loss_terms,
            skipped_structural_steps: skipped,
            participants,
            evaluated_test_samples: shards.iter().map(|s| s.test.len()).sum(),
            effective_dimensionality: effective,
        };
        on_round(&report, server.broadcast());
        reports.push(report);
    }
    Ok(ExperimentOutcome { reports, final_global: server.broadcast().clone(), models })
}

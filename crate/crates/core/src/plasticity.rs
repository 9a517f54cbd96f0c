//! Neuron targeting strategies, gradient masks and masked training.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, NdFloat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    accuracy, loss, Batch, EncodedFact, GradOutTrace, Gradients, LossMask, Model, ModelConfig,
    NeuronId, OptimizerConfig, ParamRole, ParamStore, Trace, TrackedMatrixKind,
};
use crate::tracking::{GradientSnapshot, HistoricalProfile, NeuronManifest, StepCapture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Lowest historical gradient.
    Plastic,
    /// Highest historical gradient.
    Stubborn,
    /// Highest gradient on the incoming facts.
    Candidate,
    /// Highest gradient on the incoming facts, stubborn neurons excluded.
    Specific,
    Random,
    /// Highest historical gradient of a donor run.
    LotteryTicket,
    /// Lowest historical gradient of a donor run.
    NonLottery,
    Full,
}

impl Strategy {
    pub const TARGETED: [Strategy; 5] = [
        Strategy::Plastic,
        Strategy::Stubborn,
        Strategy::Candidate,
        Strategy::Specific,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Plastic => "plastic",
            Strategy::Stubborn => "stubborn",
            Strategy::Candidate => "candidate",
            Strategy::Specific => "specific",
            Strategy::Random => "random",
            Strategy::LotteryTicket => "lottery",
            Strategy::NonLottery => "non_lottery",
            Strategy::Full => "full",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionProvenance {
    pub profile_fingerprint: Option<String>,
    pub snapshot_fingerprint: Option<String>,
    pub donor_fingerprint: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    pub strategy: Strategy,
    pub selection_n: usize,
    /// Sorted ascending.
    pub neurons: Vec<NeuronId>,
    pub provenance: SelectionProvenance,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn as_set(&self) -> BTreeSet<NeuronId> {
        self.neurons.iter().copied().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Everything a strategy may rank by.
#[derive(Debug, Clone, Copy)]
pub struct SelectionInputs<'a> {
    pub manifest: &'a NeuronManifest,
    pub profile: Option<&'a HistoricalProfile>,
    pub snapshot: Option<&'a GradientSnapshot>,
    pub donor: Option<&'a HistoricalProfile>,
    /// Size of the excluded stubborn set for [`Strategy::Specific`]; defaults to `selection_n`.
    pub n_stubborn: Option<usize>,
    pub seed: u64,
}

impl<'a> SelectionInputs<'a> {
    pub fn new(manifest: &'a NeuronManifest) -> Self {
        Self {
            manifest,
            profile: None,
            snapshot: None,
            donor: None,
            n_stubborn: None,
            seed: 0,
        }
    }
}

/// Indices of the `n` smallest values; ties go to the lower index.
pub fn lowest_n(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Indices of the `n` largest values: the tail of the same `(value, index)`
/// order [`lowest_n`] reads from the head, so ties go to the higher index and
/// the two never overlap while `2n` fits.
pub fn highest_n(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(b.cmp(&a)));
    idx.truncate(n);
    idx
}

fn check_values(manifest: &NeuronManifest, values: &[f64], what: &str) -> Result<()> {
    if values.len() != manifest.total() {
        return Err(Error::Shape(format!(
            "{what} covers {} neurons, model has {}",
            values.len(),
            manifest.total()
        )));
    }
    Ok(())
}

pub fn select_neurons(
    strategy: Strategy,
    selection_n: usize,
    inputs: &SelectionInputs<'_>,
) -> Result<TargetSet> {
    let m = inputs.manifest;
    let total = m.total();
    if strategy != Strategy::Full && selection_n > total {
        return Err(Error::SelectionTooLarge {
            requested: selection_n,
            total,
        });
    }
    let profile = || {
        let p = inputs.profile.ok_or(Error::MissingProfile)?;
        check_values(m, &p.hg, "profile")?;
        Ok::<_, Error>(p)
    };
    let snapshot = || {
        let s = inputs
            .snapshot
            .ok_or(Error::MissingSnapshot("candidate ranking"))?;
        check_values(m, &s.values, "snapshot")?;
        Ok::<_, Error>(s)
    };
    let donor = || {
        let d = inputs.donor.ok_or(Error::MissingDonor("lottery ranking"))?;
        check_values(m, &d.hg, "donor profile")?;
        Ok::<_, Error>(d)
    };
    let mut prov = SelectionProvenance {
        seed: inputs.seed,
        ..Default::default()
    };
    let indices: Vec<usize> = match strategy {
        Strategy::Full => (0..total).collect(),
        Strategy::Plastic => {
            let p = profile()?;
            prov.profile_fingerprint = Some(p.fingerprint());
            lowest_n(&p.hg, selection_n)
        }
        Strategy::Stubborn => {
            let p = profile()?;
            prov.profile_fingerprint = Some(p.fingerprint());
            highest_n(&p.hg, selection_n)
        }
        Strategy::Candidate => {
            let s = snapshot()?;
            prov.snapshot_fingerprint = Some(s.fingerprint());
            highest_n(&s.values, selection_n)
        }
        Strategy::Specific => {
            let s = snapshot()?;
            let p = profile()?;
            prov.snapshot_fingerprint = Some(s.fingerprint());
            prov.profile_fingerprint = Some(p.fingerprint());
            let n_stubborn = inputs.n_stubborn.unwrap_or(selection_n).min(total);
            let stubborn: BTreeSet<usize> = highest_n(&p.hg, n_stubborn).into_iter().collect();
            let eligible = total - stubborn.len();
            if selection_n > eligible {
                return Err(Error::SelectionTooLarge {
                    requested: selection_n,
                    total: eligible,
                });
            }
            let masked: Vec<f64> = s
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if stubborn.contains(&i) {
                        f64::NEG_INFINITY
                    } else {
                        v
                    }
                })
                .collect();
            highest_n(&masked, selection_n)
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed);
            rand::seq::index::sample(&mut rng, total, selection_n).into_vec()
        }
        Strategy::LotteryTicket | Strategy::NonLottery => {
            let d = donor()?;
            prov.donor_fingerprint = Some(d.fingerprint());
            let (lottery, non) = lottery_partition(d, selection_n)?;
            let chosen = if strategy == Strategy::LotteryTicket {
                lottery
            } else {
                non
            };
            return Ok(TargetSet {
                strategy,
                selection_n,
                neurons: chosen,
                provenance: prov,
            });
        }
    };
    let mut neurons: Vec<NeuronId> = indices.into_iter().map(|i| m.neuron_at(i)).collect();
    neurons.sort();
    Ok(TargetSet {
        strategy,
        selection_n: if strategy == Strategy::Full {
            total
        } else {
            selection_n
        },
        neurons,
        provenance: prov,
    })
}

/// `(top, bottom)` `selection_n` neurons by donor historical gradient, each sorted.
pub fn lottery_partition(
    donor: &HistoricalProfile,
    selection_n: usize,
) -> Result<(Vec<NeuronId>, Vec<NeuronId>)> {
    let total = donor.len();
    if selection_n > total {
        return Err(Error::SelectionTooLarge {
            requested: selection_n,
            total,
        });
    }
    let pick = |idx: Vec<usize>| {
        let mut v: Vec<NeuronId> = idx
            .into_iter()
            .map(|i| donor.manifest.neuron_at(i))
            .collect();
        v.sort();
        v
    };
    Ok((
        pick(highest_n(&donor.hg, selection_n)),
        pick(lowest_n(&donor.hg, selection_n)),
    ))
}

/// Treatment of embeddings, layer norms and the output head during targeted training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UntrackedPolicy {
    #[default]
    Frozen,
    Trainable,
}

/// Per-entry update permission for every parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientMask {
    pub selectors: Vec<Vec<bool>>,
    pub untracked: UntrackedPolicy,
}

impl GradientMask {
    pub fn check_layout<F>(&self, params: &ParamStore<F>) -> Result<()> {
        let ok = self.selectors.len() == params.tensors.len()
            && self
                .selectors
                .iter()
                .zip(&params.tensors)
                .all(|(s, t)| s.len() == t.data.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("mask layout does not match parameters".into()))
        }
    }

    pub fn count_selected(&self) -> usize {
        self.selectors
            .iter()
            .map(|s| s.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn all(params_like: &ParamStore<impl Sized>, value: bool) -> Self {
        Self {
            selectors: params_like
                .tensors
                .iter()
                .map(|t| vec![value; t.data.len()])
                .collect(),
            untracked: if value {
                UntrackedPolicy::Trainable
            } else {
                UntrackedPolicy::Frozen
            },
        }
    }
}

/// Entries owned by each selected neuron: its output row of the weight
/// matrix and its bias entry.
///
/// [`Strategy::Full`] opens every parameter, untracked groups included, so
/// that full-strategy training is plain fine-tuning.
pub fn compile_mask<F: NdFloat>(
    target: &TargetSet,
    model: &Model<F>,
    untracked: UntrackedPolicy,
) -> Result<GradientMask> {
    let params = &model.params;
    if target.strategy == Strategy::Full {
        return Ok(GradientMask::all(params, true));
    }
    let mut mask = GradientMask {
        selectors: params
            .tensors
            .iter()
            .map(|t| {
                vec![
                    t.role == ParamRole::Untracked && untracked == UntrackedPolicy::Trainable;
                    t.data.len()
                ]
            })
            .collect(),
        untracked,
    };
    for &n in &target.neurons {
        model.config.neuron_offset(n)?;
        let (wi, bi) = ParamStore::<F>::tracked_indices(n.layer, n.kind);
        let d_in = params.tensors[wi].shape[1];
        mask.selectors[wi][n.index * d_in..(n.index + 1) * d_in].fill(true);
        mask.selectors[bi][n.index] = true;
    }
    Ok(mask)
}

/// Zeroes gradient entries the mask does not select.
pub fn apply_mask<F: NdFloat>(grads: &Gradients<F>, mask: &GradientMask) -> Result<Gradients<F>> {
    mask.check_layout(grads)?;
    let mut out = grads.clone();
    for (t, sel) in out.tensors.iter_mut().zip(&mask.selectors) {
        for (g, &on) in t.data.iter_mut().zip(sel) {
            if !on {
                *g = F::zero();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Keep training past convergence until this many epochs have run.
    pub min_epochs: usize,
    pub convergence_threshold: f64,
    /// Train for exactly this many epochs, ignoring convergence.
    pub fixed_epochs: Option<usize>,
    pub loss_mask: LossMask,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            max_epochs: 100,
            min_epochs: 0,
            convergence_threshold: 0.99,
            fixed_epochs: None,
            loss_mask: LossMask::AllTokens,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_accuracy: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub epochs: usize,
    pub steps: u64,
    pub converged: bool,
    pub final_evals: BTreeMap<String, f64>,
}

impl TrainingReport {
    pub fn final_accuracy(&self) -> f64 {
        self.epoch_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Receives the traces of every training step before the update.
pub trait StepObserver {
    fn observe(&mut self, step: u64, trace: &Trace<f32>, grads: &GradOutTrace<f32>) -> Result<()>;
}

impl StepObserver for HistoricalProfile {
    fn observe(&mut self, _step: u64, trace: &Trace<f32>, grads: &GradOutTrace<f32>) -> Result<()> {
        self.accumulate_traces(trace, grads)
    }
}

impl StepObserver for Vec<StepCapture> {
    fn observe(&mut self, step: u64, trace: &Trace<f32>, grads: &GradOutTrace<f32>) -> Result<()> {
        self.push(StepCapture::from_traces(step, trace, grads));
        Ok(())
    }
}

/// Named fact sets scored after training.
pub type EvalHooks<'a> = [(&'a str, &'a [EncodedFact])];

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn batch_of(
    facts: &[EncodedFact],
    idx: &[usize],
    mode: LossMask,
) -> (Batch, crate::model::Supervision) {
    let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| facts[i].tokens.clone()).collect();
    let obj: Vec<usize> = idx.iter().map(|&i| facts[i].object_len).collect();
    let batch = Batch::from_sequences(&seqs);
    let sup = batch.supervision(mode, &obj);
    (batch, sup)
}

fn stop_after_epoch(hyper: &TrainHyper, epoch: usize, acc: f64) -> bool {
    match hyper.fixed_epochs {
        Some(n) => epoch + 1 >= n,
        None => {
            (acc >= hyper.convergence_threshold && epoch + 1 >= hyper.min_epochs)
                || epoch + 1 >= hyper.max_epochs
        }
    }
}

/// Trains on `facts` until train accuracy reaches the threshold.
///
/// With `mask = None` every parameter is trainable. Optimizer state is reset
/// on entry. Parameters the mask does not select are left bitwise untouched.
pub fn train_targeted(
    model: &mut Model<f32>,
    facts: &[EncodedFact],
    mask: Option<&GradientMask>,
    hyper: &TrainHyper,
    evals: &EvalHooks<'_>,
    mut observer: Option<&mut dyn StepObserver>,
) -> Result<TrainingReport> {
    if facts.is_empty() {
        return Err(Error::Empty("training on no facts"));
    }
    if let Some(m) = mask {
        m.check_layout(&model.params)?;
    }
    model.reset_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut report = TrainingReport {
        epoch_accuracy: Vec::new(),
        epoch_loss: Vec::new(),
        epochs: 0,
        steps: 0,
        converged: false,
        final_evals: BTreeMap::new(),
    };
    let max = hyper.fixed_epochs.unwrap_or(hyper.max_epochs);
    for epoch in 0..max {
        let order = epoch_order(facts.len(), &mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(hyper.batch_size.max(1)) {
            let (batch, sup) = batch_of(facts, idx, hyper.loss_mask);
            let (logits, trace) = model.forward(&batch)?;
            let l = loss(&logits, &sup)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: report.steps,
                });
            }
            loss_sum += f64::from(l) * idx.len() as f64;
            let (grads, grad_outs) = model.backward(&trace, &logits, &sup, 1.0)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs.observe(report.steps, &trace, &grad_outs)?;
            }
            model.optimizer_step(&grads, &hyper.optimizer, mask)?;
            report.steps += 1;
        }
        let acc = accuracy(model, facts)?;
        report.epoch_accuracy.push(acc);
        report.epoch_loss.push(loss_sum / facts.len() as f64);
        report.epochs = epoch + 1;
        report.converged = acc >= hyper.convergence_threshold;
        if stop_after_epoch(hyper, epoch, acc) {
            break;
        }
    }
    for (name, set) in evals {
        report
            .final_evals
            .insert((*name).to_string(), accuracy(model, set)?);
    }
    model.reset_optimizer();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub kinds: Vec<TrackedMatrixKind>,
    pub init_seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            kinds: vec![TrackedMatrixKind::AttnCAttn, TrackedMatrixKind::AttnCProj],
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraFactor {
    pub layer: usize,
    pub kind: TrackedMatrixKind,
    /// `d_out x r`, zero at initialization.
    pub b: Array2<f32>,
    /// `r x d_in`.
    pub a: Array2<f32>,
}

/// Low-rank additive update `W + (alpha / r) B A` on selected matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f32,
    pub factors: Vec<LoraFactor>,
}

impl LoraAdapter {
    pub fn new(config: &ModelConfig, lora: &LoraConfig) -> Result<Self> {
        if lora.rank == 0 {
            return Err(Error::InvalidConfig("LoRA rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(lora.init_seed);
        let normal = Normal::new(0.0f32, (1.0 / lora.rank as f32).sqrt()).expect("valid std");
        let mut factors = Vec::new();
        for layer in 0..config.n_layers {
            for &kind in &lora.kinds {
                let (d_out, d_in) = (config.out_dim(kind), config.in_dim(kind));
                factors.push(LoraFactor {
                    layer,
                    kind,
                    b: Array2::zeros((d_out, lora.rank)),
                    a: Array2::from_shape_simple_fn((lora.rank, d_in), || normal.sample(&mut rng)),
                });
            }
        }
        Ok(Self {
            rank: lora.rank,
            scale: (lora.alpha / lora.rank as f64) as f32,
            factors,
        })
    }

    /// A copy of `base` with every adapter folded into its weights.
    pub fn merged(&self, base: &Model<f32>) -> Model<f32> {
        let mut m = Model {
            config: base.config.clone(),
            params: base.params.clone(),
            adam: None,
        };
        for f in &self.factors {
            let (wi, _) = ParamStore::<f32>::tracked_indices(f.layer, f.kind);
            let delta = f.b.dot(&f.a) * self.scale;
            let mut w = m.params.mat_mut(wi);
            w += &delta;
        }
        m
    }

    fn num_params(&self) -> usize {
        self.factors.iter().map(|f| f.a.len() + f.b.len()).sum()
    }
}

struct FlatAdam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl FlatAdam {
    fn step(&mut self, w: &mut [f32], g: &[f32], offset: usize, h: &OptimizerConfig) {
        let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for (i, (w, &g)) in w.iter_mut().zip(g).enumerate() {
            let (m, v) = (&mut self.m[offset + i], &mut self.v[offset + i]);
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= h.lr as f32
                * ((*m / bc1) / ((*v / bc2).sqrt() + h.eps as f32) + h.weight_decay as f32 * *w);
        }
    }
}

/// Trains only the adapter factors; `base` is never modified.
pub fn train_lora(
    base: &Model<f32>,
    facts: &[EncodedFact],
    lora: &LoraConfig,
    hyper: &TrainHyper,
    evals: &EvalHooks<'_>,
) -> Result<(TrainingReport, LoraAdapter)> {
    if facts.is_empty() {
        return Err(Error::Empty("training on no facts"));
    }
    let mut adapter = LoraAdapter::new(&base.config, lora)?;
    let n = adapter.num_params();
    let mut adam = FlatAdam {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut report = TrainingReport {
        epoch_accuracy: Vec::new(),
        epoch_loss: Vec::new(),
        epochs: 0,
        steps: 0,
        converged: false,
        final_evals: BTreeMap::new(),
    };
    let max = hyper.fixed_epochs.unwrap_or(hyper.max_epochs);
    for epoch in 0..max {
        let order = epoch_order(facts.len(), &mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(hyper.batch_size.max(1)) {
            let merged = adapter.merged(base);
            let (batch, sup) = batch_of(facts, idx, hyper.loss_mask);
            let (logits, trace) = merged.forward(&batch)?;
            let l = loss(&logits, &sup)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: report.steps,
                });
            }
            loss_sum += f64::from(l) * idx.len() as f64;
            let (grads, _) = merged.backward(&trace, &logits, &sup, 1.0)?;
            adam.t += 1;
            let mut offset = 0;
            let scale = adapter.scale;
            for f in adapter.factors.iter_mut() {
                let (wi, _) = ParamStore::<f32>::tracked_indices(f.layer, f.kind);
                let dw = grads.mat(wi);
                let gb = dw.dot(&f.a.t()) * scale;
                let ga = f.b.t().dot(&dw) * scale;
                if gb.iter().chain(ga.iter()).any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!(
                        "lora h.{}.{}",
                        f.layer, f.kind
                    )));
                }
                let nb = f.b.len();
                adam.step(
                    f.b.as_slice_mut().expect("contiguous"),
                    gb.as_slice().expect("contiguous"),
                    offset,
                    &hyper.optimizer,
                );
                offset += nb;
                let na = f.a.len();
                adam.step(
                    f.a.as_slice_mut().expect("contiguous"),
                    ga.as_slice().expect("contiguous"),
                    offset,
                    &hyper.optimizer,
                );
                offset += na;
            }
            report.steps += 1;
        }
        let acc = accuracy(&adapter.merged(base), facts)?;
        report.epoch_accuracy.push(acc);
        report.epoch_loss.push(loss_sum / facts.len() as f64);
        report.epochs = epoch + 1;
        report.converged = acc >= hyper.convergence_threshold;
        if stop_after_epoch(hyper, epoch, acc) {
            break;
        }
    }
    let merged = adapter.merged(base);
    for (name, set) in evals {
        report
            .final_evals
            .insert((*name).to_string(), accuracy(&merged, set)?);
    }
    Ok((report, adapter))
}

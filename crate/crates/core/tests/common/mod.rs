#![allow(dead_code)]

use plab::model::{loss, Batch, LossMask, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A 2-layer, 16-wide model in 64-bit.
pub fn gradcheck_model(seed: u64) -> Model<f64> {
    let mut config = ModelConfig::new(2, 16, 2, 32, 13, 8, seed);
    config.init_std = 0.1;
    Model::<f64>::init(config).unwrap()
}

pub fn gradcheck_batch() -> Batch {
    Batch::from_sequences(&[
        vec![1, 5, 7, 9, 2],
        vec![1, 4, 12, 2],
        vec![1, 3, 3, 11, 10, 8, 2],
    ])
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-8)` between analytic
/// and central-difference gradients over `samples` parameter entries drawn
/// uniformly without replacement.
pub fn max_gradient_rel_error(seed: u64, samples: usize, h: f64) -> f64 {
    let mut model = gradcheck_model(seed);
    let batch = gradcheck_batch();
    let sup = batch.supervision(gradcheck_mask(), &[1, 1, 2]);
    let (_, grads, _, _) = model.loss_and_grads(&batch, &sup).unwrap();
    let sizes: Vec<usize> = model.params.tensors.iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for mut flat in rand::seq::index::sample(&mut rng, total, samples) {
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let i = flat;
        let orig = model.params.tensors[ti].data[i];
        model.params.tensors[ti].data[i] = orig + h;
        let (logits, _) = model.forward(&batch).unwrap();
        let up = loss(&logits, &sup).unwrap();
        model.params.tensors[ti].data[i] = orig - h;
        let (logits, _) = model.forward(&batch).unwrap();
        let down = loss(&logits, &sup).unwrap();
        model.params.tensors[ti].data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.tensors[ti].data[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

/// Supervision over the object tokens only.
pub fn gradcheck_mask() -> LossMask {
    LossMask::ObjectOnly
}

use std::collections::BTreeSet;

use plab::corpus::{generate_corpus, FactCorpus, GenerationConfig};
use plab::model::{EncodedFact, GradOutTrace, Trace};
use plab::plasticity::{
    compile_mask, select_neurons, train_targeted, SelectionInputs, StepObserver, Strategy,
    TargetSet, TrainHyper, UntrackedPolicy,
};
use plab::tracking::{
    representative_position, GradientSnapshot, HistoricalProfile, NeuronManifest, StepCapture,
};
use rand::Rng;

/// A 40-fact corpus and a 2-layer, 16-wide model sized for it.
pub fn small_setup(seed: u64) -> (FactCorpus, Vec<EncodedFact>, ModelConfig) {
    let generation = GenerationConfig {
        n_subjects: 60,
        ..GenerationConfig::default()
    };
    let corpus = generate_corpus(40, 10, seed, &generation).unwrap();
    let facts = EncodedFact::encode_all(&corpus, &corpus.split("base")).unwrap();
    let config = ModelConfig::new(2, 16, 2, 32, corpus.vocab_size(), 16, seed);
    (corpus, facts, config)
}

/// Feeds the same step to the live profile and the capture log.
pub struct Tee<'a> {
    pub profile: &'a mut HistoricalProfile,
    pub log: &'a mut Vec<StepCapture>,
}

impl StepObserver for Tee<'_> {
    fn observe(
        &mut self,
        step: u64,
        trace: &Trace<f32>,
        grads: &GradOutTrace<f32>,
    ) -> plab::Result<()> {
        self.profile.observe(step, trace, grads)?;
        self.log.observe(step, trace, grads)
    }
}

/// Population z-scores with a sequential sum in row-major order.
fn oracle_standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mut sum = 0.0;
    for &x in xs {
        sum += x;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for &x in xs {
        ss += (x - mean) * (x - mean);
    }
    let std = (ss / n).sqrt();
    if std < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|&x| (x - mean) / std).collect()
}

/// Recomputes HA and HG from a capture log with plain loops: standardize
/// each whole tensor, take |value| at each sequence's representative
/// position, sum over sequences then over steps.
pub fn brute_force_profile(log: &[StepCapture], manifest: &NeuronManifest) -> (Vec<f64>, Vec<f64>) {
    let mut ha = vec![0.0; manifest.total()];
    let mut hg = vec![0.0; manifest.total()];
    for cap in log {
        for l in 0..manifest.n_layers {
            for kind in plab::model::TrackedMatrixKind::ALL {
                let off = manifest.offset(l, kind);
                for (tensor, acc) in [
                    (&cap.activations[l][kind.position()], &mut ha),
                    (&cap.grad_outs[l][kind.position()], &mut hg),
                ] {
                    let (b, t, d) = tensor.dim();
                    let flat: Vec<f64> = tensor.iter().copied().collect();
                    let z = oracle_standardize(&flat);
                    let mut step = vec![0.0; d];
                    for s in 0..b {
                        let p = representative_position(cap.lengths[s]);
                        for (i, o) in step.iter_mut().enumerate() {
                            *o += z[(s * t + p) * d + i].abs();
                        }
                    }
                    for (i, v) in step.into_iter().enumerate() {
                        acc[off + i] += v;
                    }
                }
            }
        }
    }
    (ha, hg)
}

/// Trains a small model while logging every step, persists the log as
/// JSON, reloads it and compares the brute-force profile with the live one.
/// Returns `(steps logged, entries differing in bits)`.
pub fn tracking_replay(dir: &std::path::Path, epochs: usize) -> (usize, usize) {
    let (_, facts, config) = small_setup(3);
    let mut model = Model::<f32>::init(config.clone()).unwrap();
    let mut profile = HistoricalProfile::new(&config, Default::default());
    let mut log = Vec::new();
    let hyper = TrainHyper {
        fixed_epochs: Some(epochs),
        batch_size: 8,
        ..TrainHyper::default()
    };
    let mut tee = Tee {
        profile: &mut profile,
        log: &mut log,
    };
    train_targeted(&mut model, &facts, None, &hyper, &[], Some(&mut tee)).unwrap();
    let path = dir.join("captures.json");
    std::fs::write(&path, serde_json::to_vec(&log).unwrap()).unwrap();
    let reloaded: Vec<StepCapture> =
        serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(reloaded, log, "capture log must round-trip exactly");
    let (ha, hg) = brute_force_profile(&reloaded, &profile.manifest);
    let diff = ha
        .iter()
        .zip(&profile.ha)
        .chain(hg.iter().zip(&profile.hg))
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    assert_eq!(profile.steps_seen as usize, reloaded.len());
    (reloaded.len(), diff)
}

/// Outcome of the mask checks.
pub struct MaskOutcome {
    /// Parameter entries outside a mask that changed, over every strategy run.
    pub leaked: usize,
    /// Entries inside a mask that changed (the runs must actually train).
    pub moved: usize,
    /// Full-strategy masked training equals unmasked training bitwise.
    pub full_matches_plain: bool,
}

pub fn mask_exactness() -> MaskOutcome {
    let (_, facts, config) = small_setup(5);
    let start = Model::<f32>::init(config.clone()).unwrap();
    let manifest = NeuronManifest::of(&config);
    let mut profile = HistoricalProfile::new(&config, Default::default());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    profile.hg.iter_mut().for_each(|h| *h = rng.random());
    let snapshot = GradientSnapshot {
        manifest: manifest.clone(),
        values: (0..manifest.total()).map(|_| rng.random()).collect(),
    };
    let hyper = TrainHyper {
        fixed_epochs: Some(3),
        batch_size: 8,
        optimizer: plab::model::OptimizerConfig::adam(1e-2),
        ..TrainHyper::default()
    };
    let mut out = MaskOutcome {
        leaked: 0,
        moved: 0,
        full_matches_plain: false,
    };
    for strategy in [
        Strategy::Plastic,
        Strategy::Stubborn,
        Strategy::Candidate,
        Strategy::Specific,
        Strategy::Random,
    ] {
        for untracked in [UntrackedPolicy::Frozen, UntrackedPolicy::Trainable] {
            let inputs = SelectionInputs {
                profile: Some(&profile),
                snapshot: Some(&snapshot),
                seed: 9,
                ..SelectionInputs::new(&manifest)
            };
            let target = select_neurons(strategy, manifest.total() / 10, &inputs).unwrap();
            let mask = compile_mask(&target, &start, untracked).unwrap();
            let mut model = start.clone();
            train_targeted(&mut model, &facts, Some(&mask), &hyper, &[], None).unwrap();
            for ((after, before), sel) in model
                .params
                .tensors
                .iter()
                .zip(&start.params.tensors)
                .zip(&mask.selectors)
            {
                for ((a, b), &on) in after.data.iter().zip(&before.data).zip(sel) {
                    let changed = a.to_bits() != b.to_bits();
                    match (on, changed) {
                        (false, true) => out.leaked += 1,
                        (true, true) => out.moved += 1,
                        _ => {}
                    }
                }
            }
        }
    }
    let full = select_neurons(Strategy::Full, 0, &SelectionInputs::new(&manifest)).unwrap();
    let mask = compile_mask(&full, &start, UntrackedPolicy::Frozen).unwrap();
    let mut masked = start.clone();
    let r1 = train_targeted(&mut masked, &facts, Some(&mask), &hyper, &[], None).unwrap();
    let mut plain = start.clone();
    let r2 = train_targeted(&mut plain, &facts, None, &hyper, &[], None).unwrap();
    out.full_matches_plain = r1.epoch_loss == r2.epoch_loss
        && masked
            .params
            .tensors
            .iter()
            .zip(&plain.params.tensors)
            .all(|(a, b)| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
    out
}

/// Violations of the strategy set identities over `trials` random profiles.
#[derive(Debug, Default)]
pub struct AlgebraOutcome {
    pub trials: usize,
    pub specific_meets_stubborn: usize,
    pub plastic_meets_stubborn: usize,
    pub rescaling_changed: usize,
}

fn set_of(t: &TargetSet) -> BTreeSet<plab::model::NeuronId> {
    t.as_set()
}

pub fn strategy_algebra(trials: usize, seed: u64) -> AlgebraOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = AlgebraOutcome {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let n_layers = rng.random_range(1..=3);
        let d = rng.random_range(1..=4) * 4;
        let config = ModelConfig::new(n_layers, d, 2, rng.random_range(1..=3) * d, 10, 8, 0);
        let manifest = NeuronManifest::of(&config);
        let total = manifest.total();
        let mut profile = HistoricalProfile::new(&config, Default::default());
        // Coarse values force ties, the hard case for disjointness.
        let coarse = rng.random_bool(0.5);
        for h in profile.hg.iter_mut() {
            *h = if coarse {
                rng.random_range(0..4) as f64
            } else {
                rng.random::<f64>() * 100.0
            };
        }
        let snapshot = GradientSnapshot {
            manifest: manifest.clone(),
            values: (0..total).map(|_| rng.random::<f64>()).collect(),
        };
        let n = rng.random_range(1..=total / 2);
        let seed = rng.random();
        let select = |s: Strategy, p: &HistoricalProfile, snap: &GradientSnapshot| {
            let inputs = SelectionInputs {
                profile: Some(p),
                snapshot: Some(snap),
                seed,
                ..SelectionInputs::new(&manifest)
            };
            select_neurons(s, n, &inputs).unwrap()
        };
        let stubborn = set_of(&select(Strategy::Stubborn, &profile, &snapshot));
        let specific = set_of(&select(Strategy::Specific, &profile, &snapshot));
        let plastic = set_of(&select(Strategy::Plastic, &profile, &snapshot));
        if !specific.is_disjoint(&stubborn) {
            out.specific_meets_stubborn += 1;
        }
        if 2 * n <= total && !plastic.is_disjoint(&stubborn) {
            out.plastic_meets_stubborn += 1;
        }
        let scale = rng.random_range(0.01..100.0);
        let mut scaled = profile.clone();
        scaled.hg.iter_mut().for_each(|h| *h *= scale);
        let scaled_snap = GradientSnapshot {
            values: snapshot.values.iter().map(|v| v * scale).collect(),
            ..snapshot.clone()
        };
        for s in [
            Strategy::Plastic,
            Strategy::Stubborn,
            Strategy::Candidate,
            Strategy::Specific,
            Strategy::Random,
        ] {
            if set_of(&select(s, &profile, &snapshot)) != set_of(&select(s, &scaled, &scaled_snap))
            {
                out.rescaling_changed += 1;
            }
        }
    }
    out
}

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::config::count_of;
use super::{gate, ArmReport, ExperimentReport, FoldMetrics, FoldSets, Lab, Stage, PRETRAIN_SPLIT};
use crate::corpus::{generate_corpus, FactId};
use crate::dissonance::{
    build_classification_dataset, cross_validate, feature_importance, output_dims,
    train_classifier, ClassLabel, ClassificationDataset, CvReport, DatasetConfig, FeatureConfig,
    FeatureSource, Hyper, Normalization, OutputKind, Scenario, Tuning,
};
use crate::error::{Error, Result};
use crate::model::{recall_all, EncodedFact, Model, TrackedMatrixKind};
use crate::plasticity::{
    compile_mask, select_neurons, train_lora, train_targeted, SelectionInputs, Strategy,
    TrainHyper, TrainingReport,
};
use crate::tracking::{
    load_profile, save_profile, snapshot_gradients, GradientSnapshot, HistoricalProfile,
    NeuronManifest,
};

/// One arm of an update stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArmSpec {
    Full,
    Lora,
    Targeted {
        strategy: Strategy,
        selection_n: usize,
        fraction: f64,
    },
}

impl ArmSpec {
    pub fn name(&self) -> String {
        match self {
            ArmSpec::Full => "full".into(),
            ArmSpec::Lora => "lora".into(),
            ArmSpec::Targeted {
                strategy, fraction, ..
            } => format!("{}@{fraction}", strategy.name()),
        }
    }
}

pub struct BaselineArtifacts {
    pub model: Model<f32>,
    pub profile: HistoricalProfile,
    pub report: ExperimentReport,
}

impl BaselineArtifacts {
    /// Loads the baseline stage from `dir`, refusing artifacts whose
    /// fingerprints or config differ from the report.
    pub fn load(dir: &Path, config_hash: &str) -> Result<Self> {
        let stage = dir.join(Stage::Baseline.dir_name());
        let report = ExperimentReport::load(&stage.join("report.json"))?;
        if report.provenance.config_hash != config_hash {
            return Err(Error::StageGate(
                "baseline was produced under a different config".into(),
            ));
        }
        let model = Model::load(&stage.join("model.ckpt"))?;
        gate(&report, "baseline.model", &model.fingerprint())?;
        let profile = load_profile(&stage.join("profile.bin"), None)?.profile;
        gate(&report, "baseline.profile", &profile.fingerprint())?;
        Ok(Self {
            model,
            profile,
            report,
        })
    }
}

pub struct NonDissonantArtifacts {
    /// Full fine-tuning result of each fold, the start of the later rounds.
    pub fold_models: Vec<Model<f32>>,
    pub report: ExperimentReport,
}

impl NonDissonantArtifacts {
    pub fn load(dir: &Path, config_hash: &str) -> Result<Self> {
        let stage = dir.join(Stage::NonDissonantUpdate.dir_name());
        let report = ExperimentReport::load(&stage.join("report.json")).map_err(|e| match e {
            Error::Io { .. } => Error::StageGate("the non-dissonant stage has not been run".into()),
            e => e,
        })?;
        if report.provenance.config_hash != config_hash {
            return Err(Error::StageGate(
                "non-dissonant stage was produced under a different config".into(),
            ));
        }
        let mut fold_models = Vec::new();
        for fold in 0.. {
            let key = format!("nondissonant.fold{fold}.model");
            if !report.provenance.artifacts.contains_key(&key) {
                break;
            }
            let model = Model::load(&stage.join(format!("fold{fold}/model.ckpt")))?;
            gate(&report, &key, &model.fingerprint())?;
            fold_models.push(model);
        }
        if fold_models.is_empty() {
            return Err(Error::StageGate(
                "non-dissonant report lists no checkpoints".into(),
            ));
        }
        Ok(Self {
            fold_models,
            report,
        })
    }
}

struct ArmOutcome {
    metrics: FoldMetrics,
    model: Option<Model<f32>>,
}

struct ArmData<'a> {
    facts: &'a [EncodedFact],
    gen: &'a [EncodedFact],
    old: &'a [EncodedFact],
    profile: &'a HistoricalProfile,
    snapshot: Option<&'a GradientSnapshot>,
    seed: u64,
}

fn metrics_from(fold: usize, report: &TrainingReport, data: &ArmData<'_>) -> FoldMetrics {
    FoldMetrics::new(
        fold,
        report.final_evals["old"],
        report.final_accuracy(),
        report.final_evals["gen"],
        report.epochs,
        report.steps,
        report.converged,
        (data.old.len(), data.facts.len()),
    )
}

impl Lab {
    fn seeded(&self, hyper: &TrainHyper, offset: u64) -> TrainHyper {
        TrainHyper {
            seed: self
                .config
                .seed
                .wrapping_add(hyper.seed)
                .wrapping_add(offset),
            ..*hyper
        }
    }

    pub fn arm_specs(&self, total_neurons: usize) -> Vec<ArmSpec> {
        let sweep = &self.config.sweep;
        let mut out = Vec::new();
        if sweep.include_full {
            out.push(ArmSpec::Full);
        }
        if sweep.include_lora {
            out.push(ArmSpec::Lora);
        }
        for &fraction in &sweep.fractions {
            for &strategy in &sweep.strategies {
                out.push(ArmSpec::Targeted {
                    strategy,
                    selection_n: count_of(fraction, total_neurons),
                    fraction,
                });
            }
        }
        out
    }

    fn run_arm(
        &self,
        fold: usize,
        start: &Model<f32>,
        spec: &ArmSpec,
        data: &ArmData<'_>,
        keep: bool,
    ) -> Result<ArmOutcome> {
        let hyper = self.seeded(&self.config.update, fold as u64);
        let evals: [(&str, &[EncodedFact]); 2] = [("old", data.old), ("gen", data.gen)];
        match spec {
            ArmSpec::Full => {
                let mut model = start.clone();
                let report = train_targeted(&mut model, data.facts, None, &hyper, &evals, None)?;
                Ok(ArmOutcome {
                    metrics: metrics_from(fold, &report, data),
                    model: keep.then_some(model),
                })
            }
            ArmSpec::Lora => {
                let (report, _) =
                    train_lora(start, data.facts, &self.config.sweep.lora, &hyper, &evals)?;
                Ok(ArmOutcome {
                    metrics: metrics_from(fold, &report, data),
                    model: None,
                })
            }
            ArmSpec::Targeted {
                strategy,
                selection_n,
                ..
            } => {
                let manifest = NeuronManifest::of(&start.config);
                let inputs = SelectionInputs {
                    profile: Some(data.profile),
                    snapshot: data.snapshot,
                    seed: data.seed,
                    ..SelectionInputs::new(&manifest)
                };
                let target = select_neurons(*strategy, *selection_n, &inputs)?;
                let mask = compile_mask(&target, start, self.config.sweep.untracked)?;
                let mut model = start.clone();
                let report =
                    train_targeted(&mut model, data.facts, Some(&mask), &hyper, &evals, None)?;
                Ok(ArmOutcome {
                    metrics: metrics_from(fold, &report, data),
                    model: None,
                })
            }
        }
    }

    fn snapshot(&self, model: &Model<f32>, facts: &[EncodedFact]) -> Result<GradientSnapshot> {
        let h = &self.config.update;
        snapshot_gradients(
            model,
            facts,
            &self.config.tracking,
            h.batch_size,
            h.loss_mask,
        )
    }

    /// Trains the baseline on the `base` split, accumulating the historical profile.
    pub fn run_baseline(&self) -> Result<BaselineArtifacts> {
        let (started, clock) = (SystemTime::now(), Instant::now());
        let base_records = self.corpus.split("base");
        let base = self.encode(&base_records)?;
        let gen = self.paraphrases(&base_records)?;
        let mc = self.config.model_for(self.corpus.vocab_size());
        let mut model = Model::<f32>::init(mc.clone())?;
        let mut profile = HistoricalProfile::new(&mc, self.config.tracking);
        let hyper = self.seeded(&self.config.baseline, 0);
        let training = train_targeted(
            &mut model,
            &base,
            None,
            &hyper,
            &[("gen", &gen)],
            Some(&mut profile),
        )?;
        if !training.converged {
            return Err(Error::NonConvergence {
                accuracy: training.final_accuracy(),
                epochs: training.epochs,
            });
        }
        let acc = training.final_accuracy();
        let metrics = FoldMetrics::new(
            0,
            acc,
            acc,
            training.final_evals["gen"],
            training.epochs,
            training.steps,
            training.converged,
            (base.len(), base.len()),
        );
        let mut report = ExperimentReport::new(Stage::Baseline, self.provenance());
        report.arms.push(ArmReport::new("baseline", vec![metrics]));
        report
            .provenance
            .artifacts
            .insert("baseline.model".into(), model.fingerprint());
        report
            .provenance
            .artifacts
            .insert("baseline.profile".into(), profile.fingerprint());
        report.details = json!({
            "profile_steps": profile.steps_seen,
            "optimizer_steps": training.steps,
            "epoch_accuracy": training.epoch_accuracy,
            "epoch_loss": training.epoch_loss,
        });
        if let Some(dir) = self.path(Stage::Baseline.dir_name()) {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            model.save(&dir.join("model.ckpt"))?;
            save_profile(&profile, &dir.join("profile.bin"))?;
            self.write("baseline/profile.csv", profile.to_csv().as_bytes())?;
        }
        self.write_report(&report)?;
        self.write_metadata(Stage::Baseline, started, clock)?;
        Ok(BaselineArtifacts {
            model,
            profile,
            report,
        })
    }

    /// Learns each fold's new facts from the baseline under every sweep arm.
    pub fn run_nondissonant(&self, base: &BaselineArtifacts) -> Result<NonDissonantArtifacts> {
        let (started, clock) = (SystemTime::now(), Instant::now());
        let plan = self.base_folds()?;
        let specs = self.arm_specs(base.profile.len());
        let mut per_arm: BTreeMap<String, (ArmSpec, Vec<FoldMetrics>)> = BTreeMap::new();
        let mut report = ExperimentReport::new(Stage::NonDissonantUpdate, self.provenance());
        report
            .provenance
            .artifacts
            .insert("baseline.model".into(), base.model.fingerprint());
        report
            .provenance
            .artifacts
            .insert("baseline.profile".into(), base.profile.fingerprint());
        let mut fold_models = Vec::new();
        for fold in 0..self.config.folds {
            let sets = self.fold_sets(&plan, fold);
            let records = self.records(&sets.update)?;
            let facts = self.encode(&records)?;
            let gen = self.paraphrases(&records)?;
            let old = self.encode_ids(&sets.retention)?;
            let snapshot = self.snapshot(&base.model, &facts)?;
            let data = ArmData {
                facts: &facts,
                gen: &gen,
                old: &old,
                profile: &base.profile,
                snapshot: Some(&snapshot),
                seed: self.config.seed.wrapping_add(fold as u64),
            };
            let mut outcomes = specs
                .par_iter()
                .map(|spec| self.run_arm(fold, &base.model, spec, &data, *spec == ArmSpec::Full))
                .collect::<Result<Vec<_>>>()?;
            let full = match specs.iter().position(|s| *s == ArmSpec::Full) {
                Some(i) => outcomes[i].model.take().expect("kept"),
                None => {
                    let mut m = base.model.clone();
                    train_targeted(
                        &mut m,
                        &facts,
                        None,
                        &self.seeded(&self.config.update, fold as u64),
                        &[],
                        None,
                    )?;
                    m
                }
            };
            report
                .provenance
                .artifacts
                .insert(format!("nondissonant.fold{fold}.model"), full.fingerprint());
            if let Some(dir) = self.path(&format!("nondissonant/fold{fold}")) {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                full.save(&dir.join("model.ckpt"))?;
            }
            fold_models.push(full);
            for (spec, o) in specs.iter().zip(outcomes) {
                per_arm
                    .entry(spec.name())
                    .or_insert_with(|| (*spec, Vec::new()))
                    .1
                    .push(o.metrics);
            }
        }
        report.arms = assemble_arms(&specs, per_arm);
        report.details =
            json!({ "update_size": self.config.update_size(), "folds": self.config.folds });
        self.write_report(&report)?;
        self.write_metadata(Stage::NonDissonantUpdate, started, clock)?;
        Ok(NonDissonantArtifacts {
            fold_models,
            report,
        })
    }

    fn check_nd(&self, nd: &NonDissonantArtifacts) -> Result<()> {
        if nd.report.provenance.config_hash != self.config.hash() {
            return Err(Error::StageGate(
                "non-dissonant stage was produced under a different config".into(),
            ));
        }
        if nd.fold_models.len() != self.config.folds {
            return Err(Error::StageGate(format!(
                "{} non-dissonant checkpoints for {} folds",
                nd.fold_models.len(),
                self.config.folds
            )));
        }
        for (fold, m) in nd.fold_models.iter().enumerate() {
            gate(
                &nd.report,
                &format!("nondissonant.fold{fold}.model"),
                &m.fingerprint(),
            )?;
        }
        Ok(())
    }

    fn remembered(&self, model: &Model<f32>, ids: &[FactId]) -> Result<Vec<EncodedFact>> {
        let pool = self.encode_ids(ids)?;
        let flags = recall_all(model, &pool)?;
        let kept: Vec<EncodedFact> = pool
            .into_iter()
            .zip(flags)
            .filter_map(|(f, k)| k.then_some(f))
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyRememberedSet);
        }
        Ok(kept)
    }

    /// Learns counterfacts from each fold's non-dissonant checkpoint; retention
    /// is measured on the baseline facts that checkpoint still recalls.
    pub fn run_dissonant(
        &self,
        base: &BaselineArtifacts,
        nd: &NonDissonantArtifacts,
    ) -> Result<ExperimentReport> {
        self.check_nd(nd)?;
        let (started, clock) = (SystemTime::now(), Instant::now());
        let plan = self.base_folds()?;
        let specs = self.arm_specs(base.profile.len());
        let mut per_arm: BTreeMap<String, (ArmSpec, Vec<FoldMetrics>)> = BTreeMap::new();
        let mut control = Vec::new();
        let mut remembered_sizes = Vec::new();
        for fold in 0..self.config.folds {
            let start = &nd.fold_models[fold];
            let sets: FoldSets = self.fold_sets(&plan, fold);
            let old = self.remembered(start, &sets.retention)?;
            remembered_sizes.push(old.len());
            let counter = self
                .corpus
                .make_counterfacts(&sets.targets, self.config.seed.wrapping_add(fold as u64))?;
            let facts = self.encode(&counter)?;
            let gen = self.paraphrases(&counter)?;
            let snapshot = self.snapshot(start, &facts)?;
            let data = ArmData {
                facts: &facts,
                gen: &gen,
                old: &old,
                profile: &base.profile,
                snapshot: Some(&snapshot),
                seed: self.config.seed.wrapping_add(fold as u64),
            };
            let outcomes = specs
                .par_iter()
                .map(|spec| self.run_arm(fold, start, spec, &data, false))
                .collect::<Result<Vec<_>>>()?;
            for (spec, o) in specs.iter().zip(outcomes) {
                per_arm
                    .entry(spec.name())
                    .or_insert_with(|| (*spec, Vec::new()))
                    .1
                    .push(o.metrics);
            }
            if self.config.control_round {
                let records = self.records(&sets.control)?;
                let facts = self.encode(&records)?;
                let gen = self.paraphrases(&records)?;
                let data = ArmData {
                    facts: &facts,
                    gen: &gen,
                    ..data
                };
                control.push(
                    self.run_arm(fold, start, &ArmSpec::Full, &data, false)?
                        .metrics,
                );
            }
        }
        let mut report = ExperimentReport::new(Stage::DissonantUpdate, self.provenance());
        report.provenance.artifacts = nd.report.provenance.artifacts.clone();
        report.arms = assemble_arms(&specs, per_arm);
        if self.config.control_round {
            report.arms.push(ArmReport::new("control", control));
        }
        report.details = json!({
            "remembered": remembered_sizes,
            "target": self.config.dissonant_target,
            "update_size": self.config.update_size(),
        });
        self.write_report(&report)?;
        self.write_metadata(Stage::DissonantUpdate, started, clock)?;
        Ok(report)
    }

    /// Both update stages and a combined plot table.
    pub fn run_sweep(
        &self,
        base: &BaselineArtifacts,
    ) -> Result<(NonDissonantArtifacts, ExperimentReport)> {
        let nd = self.run_nondissonant(base)?;
        let dis = self.run_dissonant(base, &nd)?;
        let mut csv = nd.report.tidy_csv();
        csv.push_str(dis.tidy_csv().split_once('\n').map_or("", |(_, rest)| rest));
        self.write("sweep/plot.csv", csv.as_bytes())?;
        Ok((nd, dis))
    }

    /// Full fine-tuning on counterfact sets of increasing size.
    pub fn run_contradiction_scale(&self, nd: &NonDissonantArtifacts) -> Result<ExperimentReport> {
        self.check_nd(nd)?;
        let (started, clock) = (SystemTime::now(), Instant::now());
        let mut sizes = self.config.contradiction_sizes.clone();
        sizes.sort_unstable();
        let plan = self.base_folds()?;
        let base_ids = self.split_ids("base");
        let mut per_size: Vec<Vec<FoldMetrics>> = vec![Vec::new(); sizes.len()];
        let mut actual: Vec<usize> = Vec::new();
        for fold in 0..self.config.folds {
            let start = &nd.fold_models[fold];
            let sets = self.fold_sets(&plan, fold);
            let mut pool = match self.config.dissonant_target {
                super::DissonantTarget::Baseline => base_ids.clone(),
                super::DissonantTarget::Recent => sets.update.clone(),
            };
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(
                self.config.seed.wrapping_add(fold as u64),
            ));
            for (si, &size) in sizes.iter().enumerate() {
                let size = size.min(pool.len());
                if fold == 0 {
                    actual.push(size);
                }
                let targets = &pool[..size];
                let retention: Vec<FactId> = base_ids
                    .iter()
                    .copied()
                    .filter(|id| !targets.contains(id))
                    .collect();
                let old = self.remembered(start, &retention)?;
                let counter = self
                    .corpus
                    .make_counterfacts(targets, self.config.seed.wrapping_add(fold as u64))?;
                let facts = self.encode(&counter)?;
                let gen = self.paraphrases(&counter)?;
                let data = ArmData {
                    facts: &facts,
                    gen: &gen,
                    old: &old,
                    profile: &HistoricalProfile::new(&start.config, self.config.tracking),
                    snapshot: None,
                    seed: self.config.seed,
                };
                per_size[si].push(
                    self.run_arm(fold, start, &ArmSpec::Full, &data, false)?
                        .metrics,
                );
            }
        }
        let nd_full = nd.report.arm("full").map(|a| a.mean.old);
        let mut report = ExperimentReport::new(Stage::ContradictionScale, self.provenance());
        report.provenance.artifacts = nd.report.provenance.artifacts.clone();
        for (size, folds) in actual.iter().zip(per_size) {
            let mut arm = ArmReport::new(format!("size{size}"), folds);
            arm.extra.insert("size".into(), *size as f64);
            arm.extra
                .insert("retention_drop".into(), 1.0 - arm.mean.old);
            if let Some(r) = nd_full {
                arm.extra
                    .insert("drop_vs_nondissonant".into(), r - arm.mean.old);
            }
            report.arms.push(arm);
        }
        report.details = json!({ "requested_sizes": sizes, "actual_sizes": actual });
        self.write_report(&report)?;
        self.write_metadata(Stage::ContradictionScale, started, clock)?;
        Ok(report)
    }

    /// Donor-profile neuron selection on fresh models, one fold per seed.
    pub fn run_lottery(&self) -> Result<ExperimentReport> {
        let (started, clock) = (SystemTime::now(), Instant::now());
        let lp = &self.config.lottery;
        let gen_cfg = crate::corpus::GenerationConfig {
            disjoint_new_subjects: true,
            ..self.config.corpus.generation.clone()
        };
        let mut per_arm: BTreeMap<(usize, usize), Vec<FoldMetrics>> = BTreeMap::new();
        let strategies = [
            Strategy::LotteryTicket,
            Strategy::NonLottery,
            Strategy::Random,
        ];
        let mut report = ExperimentReport::new(Stage::Lottery, self.provenance());
        let mut counts = Vec::new();
        for (fold, &seed) in lp.seeds.iter().enumerate() {
            let corpus = generate_corpus(lp.n_donor, lp.n_facts, seed, &gen_cfg)?;
            let donor_facts = EncodedFact::encode_all(&corpus, &corpus.split("base"))?;
            let target_records = corpus.split("new");
            let facts = EncodedFact::encode_all(&corpus, &target_records)?;
            let mut gen = Vec::new();
            for r in &target_records {
                gen.extend(EncodedFact::encode_paraphrases(&corpus, r)?);
            }
            let mc = crate::model::ModelConfig {
                seed: self.config.model.seed.wrapping_add(seed),
                ..self.config.model_for(corpus.vocab_size())
            };
            let fresh = Model::<f32>::init(mc.clone())?;
            let mut donor_model = fresh.clone();
            let mut donor = HistoricalProfile::new(&mc, self.config.tracking);
            let dh = TrainHyper {
                seed: seed.wrapping_add(lp.donor_train.seed),
                ..lp.donor_train
            };
            train_targeted(
                &mut donor_model,
                &donor_facts,
                None,
                &dh,
                &[],
                Some(&mut donor),
            )?;
            report.provenance.artifacts.insert(
                format!("lottery.seed{seed}.donor_profile"),
                donor.fingerprint(),
            );
            report.provenance.artifacts.insert(
                format!("lottery.seed{seed}.fresh_model"),
                fresh.fingerprint(),
            );
            let manifest = NeuronManifest::of(&mc);
            counts = lp
                .fractions
                .iter()
                .map(|&f| count_of(f, manifest.total()))
                .collect();
            let jobs: Vec<(usize, usize)> = (0..lp.fractions.len())
                .flat_map(|fi| (0..strategies.len()).map(move |si| (fi, si)))
                .collect();
            let results = jobs
                .par_iter()
                .map(|&(fi, si)| {
                    let inputs = SelectionInputs {
                        donor: Some(&donor),
                        seed,
                        ..SelectionInputs::new(&manifest)
                    };
                    let target = select_neurons(strategies[si], counts[fi], &inputs)?;
                    let mask = compile_mask(&target, &fresh, lp.untracked)?;
                    let mut model = fresh.clone();
                    let h = TrainHyper {
                        seed: seed.wrapping_add(lp.train.seed),
                        ..lp.train
                    };
                    let r = train_targeted(
                        &mut model,
                        &facts,
                        Some(&mask),
                        &h,
                        &[("old", &donor_facts), ("gen", &gen)],
                        None,
                    )?;
                    Ok(FoldMetrics::new(
                        fold,
                        r.final_evals["old"],
                        r.final_accuracy(),
                        r.final_evals["gen"],
                        r.epochs,
                        r.steps,
                        r.converged,
                        (donor_facts.len(), facts.len()),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            for (job, m) in jobs.into_iter().zip(results) {
                per_arm.entry(job).or_default().push(m);
            }
        }
        for ((fi, si), folds) in per_arm {
            let fraction = lp.fractions[fi];
            let name = format!("{}@{fraction}", strategies[si].name());
            report.arms.push(ArmReport::new(name, folds).with_selection(
                strategies[si].name(),
                counts[fi],
                fraction,
            ));
        }
        report.details = json!({
            "seeds": lp.seeds,
            "selection_n": counts,
            "old_metric": "accuracy on the donor facts, which the fresh model never trains on",
        });
        self.write_report(&report)?;
        self.write_metadata(Stage::Lottery, started, clock)?;
        Ok(report)
    }

    /// Stubborn-neuron counts per block and matrix kind for each threshold.
    pub fn run_stubborn_histogram(&self, profile: &HistoricalProfile) -> Result<ExperimentReport> {
        let (started, clock) = (SystemTime::now(), Instant::now());
        let manifest = &profile.manifest;
        let mut csv = String::from("fraction,selection_n,layer,kind,count\n");
        let mut tables = Vec::new();
        for &fraction in &self.config.histogram_fractions {
            let n = count_of(fraction, manifest.total());
            let inputs = SelectionInputs {
                profile: Some(profile),
                ..SelectionInputs::new(manifest)
            };
            let target = select_neurons(Strategy::Stubborn, n, &inputs)?;
            let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for id in &target.neurons {
                *counts.entry((id.layer, id.kind.position())).or_default() += 1;
            }
            let mut rows = Vec::new();
            for layer in 0..manifest.n_layers {
                for kind in TrackedMatrixKind::ALL {
                    let c = counts.get(&(layer, kind.position())).copied().unwrap_or(0);
                    csv.push_str(&format!("{fraction},{n},{layer},{},{c}\n", kind.name()));
                    rows.push(json!({ "layer": layer, "kind": kind.name(), "count": c }));
                }
            }
            tables.push(json!({ "fraction": fraction, "selection_n": n, "counts": rows }));
        }
        let mut report = ExperimentReport::new(Stage::StubbornHistogram, self.provenance());
        report
            .provenance
            .artifacts
            .insert("profile".into(), profile.fingerprint());
        report.details = json!({ "tables": tables });
        self.write("histogram/stubborn.csv", csv.as_bytes())?;
        self.write_report(&report)?;
        self.write_metadata(Stage::StubbornHistogram, started, clock)?;
        Ok(report)
    }

    fn scenario_model(
        &self,
        scenario: Scenario,
        base: &BaselineArtifacts,
    ) -> Result<(Model<f32>, HistoricalProfile, String)> {
        match scenario {
            Scenario::Finetuned => Ok((base.model.clone(), base.profile.clone(), "base".into())),
            Scenario::PretrainedLike => {
                let facts = self.encode_ids(&self.split_ids(PRETRAIN_SPLIT))?;
                let mc = crate::model::ModelConfig {
                    seed: self
                        .config
                        .model
                        .seed
                        .wrapping_add(self.config.seed)
                        .wrapping_add(1),
                    ..self.config.model_for(self.corpus.vocab_size())
                };
                let mut model = Model::<f32>::init(mc.clone())?;
                let mut profile = HistoricalProfile::new(&mc, self.config.tracking);
                let h = self.seeded(&self.config.classification.pretrain, 1);
                train_targeted(&mut model, &facts, None, &h, &[], Some(&mut profile))?;
                Ok((model, profile, PRETRAIN_SPLIT.into()))
            }
        }
    }

    /// Builds each scenario's dataset and cross-validates every cell of the
    /// source x normalization x classifier grid.
    pub fn run_classification(&self, base: &BaselineArtifacts) -> Result<ExperimentReport> {
        let (started, clock) = (SystemTime::now(), Instant::now());
        let cp = &self.config.classification;
        let mut report = ExperimentReport::new(Stage::Classification, self.provenance());
        report
            .provenance
            .artifacts
            .insert("baseline.model".into(), base.model.fingerprint());
        let tuning = Tuning::Search(cp.search);
        let mut scenarios = Vec::new();
        for &scenario in &cp.scenarios {
            let (model, profile, split) = self.scenario_model(scenario, base)?;
            let tag = match scenario {
                Scenario::Finetuned => "finetuned",
                Scenario::PretrainedLike => "pretrained_like",
            };
            report
                .provenance
                .artifacts
                .insert(format!("classification.{tag}.model"), model.fingerprint());
            let dcfg = DatasetConfig {
                n_per_class: cp.n_per_class,
                known_split: split,
                k_folds: self.config.folds,
                seed: self.config.seed,
                features: FeatureConfig {
                    loss_mask: self.config.update.loss_mask,
                    output: cp.output,
                    ..FeatureConfig::default()
                },
            };
            let dataset = build_classification_dataset(
                scenario,
                &self.corpus,
                &model,
                &self.config.corpus.generation,
                &dcfg,
                Some(&profile),
            )?;
            let mut cells = Vec::new();
            let mut warnings = Vec::new();
            let mut shuffled = serde_json::Value::Null;
            for source in &cp.sources {
                for &normalization in &cp.normalizations {
                    let fc = FeatureConfig {
                        source: source.clone(),
                        normalization,
                        ..dcfg.features.clone()
                    };
                    let ds = dataset.with_features(&self.corpus, &model, &fc, Some(&profile))?;
                    for &kind in &cp.classifiers {
                        let cv =
                            cross_validate(&ds.vectors, &ds.plan, kind, &tuning, self.config.seed)?;
                        let name = format!(
                            "{}_{}_{:?}_{}",
                            tag,
                            source.label(),
                            normalization,
                            kind.name()
                        );
                        if kind == crate::dissonance::ClassifierKind::RandomForest {
                            let full =
                                train_classifier(&ds.vectors, &cv.hypers[0], self.config.seed)?;
                            warnings.extend(full.warnings.iter().cloned());
                            let imp = feature_importance(&full, &ds.schema)?;
                            self.write(
                                &format!("classification/importance_{name}.csv"),
                                imp.features_csv().as_bytes(),
                            )?;
                            self.write(
                                &format!("classification/importance_grouped_{name}.csv"),
                                imp.grouped_csv().as_bytes(),
                            )?;
                        }
                        self.write(
                            &format!("classification/confusion_{name}.csv"),
                            confusion_csv(&cv).as_bytes(),
                        )?;
                        cells.push(cell_json(
                            &source.label(),
                            &format!("{normalization:?}"),
                            &cv,
                        ));
                    }
                    if cp.shuffled_baseline
                        && shuffled.is_null()
                        && *source == FeatureSource::both()
                        && normalization == Normalization::Historical
                    {
                        shuffled = self.shuffled_baseline(&ds, &tuning)?;
                    }
                }
            }
            let mut output_cells = Vec::new();
            let mut dims = BTreeMap::new();
            if cp.output_features {
                for kind in [
                    OutputKind::Feat1,
                    OutputKind::Feat2,
                    OutputKind::Feat3,
                    OutputKind::Concat,
                ] {
                    let fc = FeatureConfig {
                        source: FeatureSource::Output { kind },
                        ..dcfg.features.clone()
                    };
                    dims.insert(format!("{kind:?}"), output_dims(kind, &cp.output));
                    let ds = dataset.with_features(&self.corpus, &model, &fc, None)?;
                    for &ck in &cp.classifiers {
                        let cv =
                            cross_validate(&ds.vectors, &ds.plan, ck, &tuning, self.config.seed)?;
                        output_cells.push(cell_json(&format!("{kind:?}"), "Raw", &cv));
                    }
                }
            }
            self.write(
                &format!("classification/dataset_{tag}.csv"),
                dataset.to_csv().as_bytes(),
            )?;
            scenarios.push(json!({
                "scenario": scenario,
                "n_per_class": cp.n_per_class,
                "dataset_size": dataset.vectors.len(),
                "cells": cells,
                "output_cells": output_cells,
                "output_dims": dims,
                "shuffled_baseline": shuffled,
                "warnings": warnings,
            }));
        }
        report.details = json!({
            "scenarios": scenarios,
            "std_convention": "population",
            "pretrained_stand_in": "a model trained on the new and control facts plays the pretrained role",
        });
        report
            .notes
            .push("accuracies are 5-fold means unless folds is configured otherwise".into());
        self.write_report(&report)?;
        self.write_metadata(Stage::Classification, started, clock)?;
        Ok(report)
    }

    fn shuffled_baseline(
        &self,
        ds: &ClassificationDataset,
        tuning: &Tuning,
    ) -> Result<serde_json::Value> {
        let kind = self.config.classification.classifiers[0];
        let mut accs = Vec::new();
        for i in 0..SHUFFLES {
            let mut labels: Vec<Option<ClassLabel>> = ds.vectors.iter().map(|v| v.label).collect();
            labels.shuffle(&mut ChaCha8Rng::seed_from_u64(
                self.config.seed.wrapping_add(7919 * (i + 1)),
            ));
            let vectors: Vec<_> = ds
                .vectors
                .iter()
                .zip(labels)
                .map(|(v, label)| crate::dissonance::FeatureVector { label, ..v.clone() })
                .collect();
            accs.push(
                cross_validate(&vectors, &ds.plan, kind, tuning, self.config.seed)?.accuracy_mean,
            );
        }
        let (mean, std) = crate::dissonance::mean_std(&accs);
        Ok(
            json!({ "classifier": kind.name(), "shuffles": SHUFFLES, "accuracy_mean": mean, "accuracy_std": std, "accuracies": accs }),
        )
    }
}

const SHUFFLES: u64 = 5;

fn cell_json(source: &str, normalization: &str, cv: &CvReport) -> serde_json::Value {
    json!({
        "source": source,
        "normalization": normalization,
        "classifier": cv.kind.name(),
        "accuracy_mean": cv.accuracy_mean,
        "accuracy_std": cv.accuracy_std,
        "macro_f1_mean": cv.macro_f1_mean,
        "macro_f1_std": cv.macro_f1_std,
        "fold_accuracy": cv.fold_accuracy,
        "hypers": cv.hypers.iter().map(hyper_json).collect::<Vec<_>>(),
    })
}

fn hyper_json(h: &Hyper) -> serde_json::Value {
    serde_json::to_value(h).unwrap_or(serde_json::Value::Null)
}

fn confusion_csv(cv: &CvReport) -> String {
    let mut out = String::from("fold,true,predicted,count\n");
    for (fold, c) in cv.confusion.iter().enumerate() {
        for t in ClassLabel::ALL {
            for p in ClassLabel::ALL {
                out.push_str(&format!(
                    "{fold},{},{},{}\n",
                    t.name(),
                    p.name(),
                    c[t.index()][p.index()]
                ));
            }
        }
    }
    out
}

fn assemble_arms(
    specs: &[ArmSpec],
    mut per_arm: BTreeMap<String, (ArmSpec, Vec<FoldMetrics>)>,
) -> Vec<ArmReport> {
    specs
        .iter()
        .filter_map(|spec| {
            let (spec, folds) = per_arm.remove(&spec.name())?;
            let arm = ArmReport::new(spec.name(), folds);
            Some(match spec {
                ArmSpec::Targeted {
                    strategy,
                    selection_n,
                    fraction,
                } => arm.with_selection(strategy.name(), selection_n, fraction),
                ArmSpec::Full => arm.with_selection("full", 0, 1.0),
                ArmSpec::Lora => arm,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::RunConfig;

    #[test]
    fn arm_names_and_counts() {
        let lab = Lab::new(RunConfig {
            corpus: crate::harness::CorpusParams {
                n_base: 50,
                n_new: 30,
                n_control: 30,
                ..Default::default()
            },
            ..RunConfig::default()
        })
        .unwrap();
        let specs = lab.arm_specs(1000);
        assert_eq!(specs.len(), 2 + 4 * 5);
        assert_eq!(specs[2].name(), "plastic@0.05");
        assert!(matches!(
            specs[2],
            ArmSpec::Targeted {
                selection_n: 50,
                ..
            }
        ));
    }
}

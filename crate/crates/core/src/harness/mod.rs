pub mod config;
pub mod report;
mod stages;

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    count_of, ClassificationParams, CorpusParams, DissonantTarget, LotteryParams, RunConfig,
    SweepParams,
};
pub use report::{
    harmonic_mean, ArmReport, ExperimentReport, FoldMetrics, Provenance, Stage, Summary,
};
pub use stages::{ArmSpec, BaselineArtifacts, NonDissonantArtifacts};

use crate::corpus::{generate_corpus, split_folds, FactCorpus, FactId, FactRecord, FoldPlan};
use crate::error::{Error, Result};
use crate::model::EncodedFact;

const CONTROL_SPLIT: &str = "control";
const PRETRAIN_SPLIT: &str = "pretrain";

/// Fact ids used by one fold of the update stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSets {
    pub fold: usize,
    /// Facts learned in the non-dissonant round.
    pub update: Vec<FactId>,
    /// Facts of the control third round.
    pub control: Vec<FactId>,
    /// Facts the counterfacts contradict.
    pub targets: Vec<FactId>,
    /// Baseline facts on which retention is measured.
    pub retention: Vec<FactId>,
}

/// A run configuration with its generated corpus and optional output directory.
pub struct Lab {
    pub config: RunConfig,
    pub corpus: FactCorpus,
    pub out_dir: Option<PathBuf>,
}

impl Lab {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let c = &config.corpus;
        let mut corpus = generate_corpus(
            c.n_base,
            c.n_new + c.n_control.max(1),
            c.seed,
            &c.generation,
        )?;
        let pool = corpus.splits.remove("new").unwrap_or_default();
        let (new, control) = pool.split_at(c.n_new);
        corpus.splits.insert(PRETRAIN_SPLIT.into(), pool.clone());
        corpus.splits.insert("new".into(), new.to_vec());
        corpus.splits.insert(CONTROL_SPLIT.into(), control.to_vec());
        Ok(Self {
            config,
            corpus,
            out_dir: None,
        })
    }

    /// Persists the corpus and config under `dir` and every later stage output.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.out_dir = Some(dir);
        self.write("corpus.json", self.corpus.to_json()?.as_bytes())?;
        self.write("config.toml", self.config.to_toml()?.as_bytes())?;
        Ok(self)
    }

    pub fn path(&self, rel: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(rel))
    }

    pub(crate) fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let Some(path) = self.path(rel) else {
            return Ok(());
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub(crate) fn write_report(&self, report: &ExperimentReport) -> Result<()> {
        report.check_consistency()?;
        let dir = report.stage.dir_name();
        self.write(&format!("{dir}/report.json"), report.to_json()?.as_bytes())?;
        self.write(&format!("{dir}/plot.csv"), report.tidy_csv().as_bytes())
    }

    /// Wall-clock data lives apart from reports so reports stay reproducible.
    pub(crate) fn write_metadata(
        &self,
        stage: Stage,
        started: SystemTime,
        clock: Instant,
    ) -> Result<()> {
        let secs = |t: SystemTime| {
            t.duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        };
        let meta = serde_json::json!({
            "stage": stage,
            "started_unix": secs(started),
            "finished_unix": secs(SystemTime::now()),
            "elapsed_secs": clock.elapsed().as_secs_f64(),
            "threads": rayon::current_num_threads(),
        });
        self.write(
            &format!("{}/metadata.json", stage.dir_name()),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config.hash(),
            corpus_fingerprint: self.corpus.fingerprint(),
            artifacts: Default::default(),
            crate_version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }

    pub fn records(&self, ids: &[FactId]) -> Result<Vec<FactRecord>> {
        ids.iter()
            .map(|&id| self.corpus.record(id).cloned())
            .collect()
    }

    pub fn encode_ids(&self, ids: &[FactId]) -> Result<Vec<EncodedFact>> {
        EncodedFact::encode_all(&self.corpus, &self.records(ids)?)
    }

    pub fn encode(&self, records: &[FactRecord]) -> Result<Vec<EncodedFact>> {
        EncodedFact::encode_all(&self.corpus, records)
    }

    /// Every paraphrase of every record, as separate facts.
    pub fn paraphrases(&self, records: &[FactRecord]) -> Result<Vec<EncodedFact>> {
        let mut out = Vec::new();
        for r in records {
            out.extend(EncodedFact::encode_paraphrases(&self.corpus, r)?);
        }
        Ok(out)
    }

    pub fn split_ids(&self, name: &str) -> Vec<FactId> {
        self.corpus.splits.get(name).cloned().unwrap_or_default()
    }

    pub fn base_folds(&self) -> Result<FoldPlan> {
        split_folds(&self.split_ids("base"), self.config.folds, self.config.seed)
    }

    fn draw(ids: &[FactId], m: usize, seed: u64) -> Vec<FactId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<FactId> = sample(&mut rng, ids.len(), m)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        out.sort_unstable();
        out
    }

    pub fn fold_sets(&self, plan: &FoldPlan, fold: usize) -> FoldSets {
        let m = self.config.update_size();
        let seed = self.config.seed.wrapping_add(1000 + fold as u64);
        let update = Self::draw(&self.split_ids("new"), m, seed);
        let control = if self.config.control_round {
            Self::draw(&self.split_ids(CONTROL_SPLIT), m, seed.wrapping_add(1))
        } else {
            Vec::new()
        };
        let base = self.split_ids("base");
        let (targets, retention) = match self.config.dissonant_target {
            DissonantTarget::Baseline => {
                let targets: Vec<FactId> =
                    Self::draw(&plan.test_ids(fold), m.min(plan.test_ids(fold).len()), seed);
                let retention = base
                    .into_iter()
                    .filter(|id| plan.fold_of(*id) != Some(fold))
                    .collect();
                (targets, retention)
            }
            DissonantTarget::Recent => (update.clone(), base),
        };
        FoldSets {
            fold,
            update,
            control,
            targets,
            retention,
        }
    }
}

/// Checks a recorded fingerprint against a loaded artifact.
pub(crate) fn gate(report: &ExperimentReport, key: &str, actual: &str) -> Result<()> {
    match report.provenance.artifacts.get(key) {
        Some(expected) if expected == actual => Ok(()),
        Some(_) => Err(Error::StageGate(format!(
            "{key} does not match the fingerprint in its report"
        ))),
        None => Err(Error::StageGate(format!(
            "report has no fingerprint for {key}"
        ))),
    }
}

pub mod features;
pub mod forest;
pub mod svm;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{
    extract_features, extract_internal_features, extract_output_features, internal_schema,
    layer_stats, output_dims, output_schema, schema_for, FeatureConfig, FeatureInfo, FeatureOrigin,
    FeatureSource, FeatureVector, Normalization, OutputBlock, OutputKind, OutputParams, Part,
    Schema, Stat,
};
pub use forest::{fit_forest, Forest, ForestHyper};
pub use svm::{fit_svm, LinearSvm, SvmHyper};

use crate::corpus::{
    make_novel_facts, split_folds, FactCorpus, FactId, FactRecord, FoldPlan, GenerationConfig,
};
use crate::error::{Error, Result};
use crate::model::{recall_all, EncodedFact, Model};
use crate::tracking::HistoricalProfile;

pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Novel,
    Known,
    Dissonant,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; N_CLASSES] =
        [ClassLabel::Novel, ClassLabel::Known, ClassLabel::Dissonant];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Novel => "novel",
            ClassLabel::Known => "known",
            ClassLabel::Dissonant => "dissonant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Stand-in for a pretrained model: trained on a partition disjoint
    /// from the facts that drive the later stages.
    PretrainedLike,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_per_class: usize,
    /// Split whose recalled facts form the Known class.
    pub known_split: String,
    pub k_folds: usize,
    pub seed: u64,
    pub features: FeatureConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            known_split: "base".into(),
            k_folds: 5,
            seed: 0,
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationDataset {
    pub scenario: Scenario,
    pub schema: Schema,
    pub vectors: Vec<FeatureVector>,
    pub plan: FoldPlan,
    pub records: Vec<FactRecord>,
}

impl ClassificationDataset {
    /// Header is the schema names plus `label`.
    pub fn to_csv(&self) -> String {
        dataset_csv(&self.vectors)
    }

    /// Same facts and folds, features re-extracted under another config.
    pub fn with_features(
        &self,
        corpus: &FactCorpus,
        model: &Model<f32>,
        config: &FeatureConfig,
        profile: Option<&HistoricalProfile>,
    ) -> Result<Self> {
        let labels: Vec<ClassLabel> = self
            .vectors
            .iter()
            .map(|v| v.label.expect("labeled dataset"))
            .collect();
        let (schema, vectors) =
            extract_labeled(corpus, model, &self.records, &labels, config, profile)?;
        Ok(Self {
            scenario: self.scenario,
            schema,
            vectors,
            plan: self.plan.clone(),
            records: self.records.clone(),
        })
    }
}

pub fn dataset_csv(vectors: &[FeatureVector]) -> String {
    let mut out = String::new();
    if let Some(first) = vectors.first() {
        for info in first.schema.iter() {
            out.push_str(&info.name);
            out.push(',');
        }
        out.push_str("label\n");
    }
    for v in vectors {
        for x in &v.values {
            let _ = write!(out, "{x},");
        }
        out.push_str(v.label.map_or("", ClassLabel::name));
        out.push('\n');
    }
    out
}

fn extract_labeled(
    corpus: &FactCorpus,
    model: &Model<f32>,
    records: &[FactRecord],
    labels: &[ClassLabel],
    config: &FeatureConfig,
    profile: Option<&HistoricalProfile>,
) -> Result<(Schema, Vec<FeatureVector>)> {
    let schema = schema_for(config, &model.config);
    let encoded = EncodedFact::encode_all(corpus, records)?;
    let vectors = encoded
        .par_iter()
        .zip(labels)
        .map(|(fact, &label)| {
            let mut v = extract_features(model, fact, config, profile, &schema)?;
            v.label = Some(label);
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((schema, vectors))
}

/// Balanced Known / Dissonant / Novel dataset extracted from `model`.
///
/// Known facts are drawn from the facts the model recalls; each Dissonant
/// fact is the counterfact of one Known fact. A Known fact, its counterfact
/// and one Novel fact always share a fold.
pub fn build_classification_dataset(
    scenario: Scenario,
    corpus: &FactCorpus,
    model: &Model<f32>,
    generation: &GenerationConfig,
    config: &DatasetConfig,
    profile: Option<&HistoricalProfile>,
) -> Result<ClassificationDataset> {
    let n = config.n_per_class;
    let candidates = corpus.split(&config.known_split);
    let encoded = EncodedFact::encode_all(corpus, &candidates)?;
    let recalled = recall_all(model, &encoded)?;
    let mut known: Vec<FactRecord> = candidates
        .into_iter()
        .zip(recalled)
        .filter_map(|(r, ok)| ok.then_some(r))
        .collect();
    if known.len() < n || n == 0 {
        return Err(Error::InsufficientKnownFacts {
            found: known.len(),
            needed: n.max(1),
        });
    }
    known.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    known.truncate(n);
    let known_ids: Vec<FactId> = known.iter().map(FactRecord::id).collect();
    let dissonant = corpus.make_counterfacts(&known_ids, config.seed)?;
    let novel = make_novel_facts(n, config.seed, generation)?;

    let group_plan = split_folds(&known_ids, config.k_folds, config.seed)?;
    let mut assignments = BTreeMap::new();
    for (i, id) in known_ids.iter().enumerate() {
        let fold = group_plan.assignments[id];
        assignments.insert(*id, fold);
        assignments.insert(dissonant[i].id(), fold);
        assignments.insert(novel[i].id(), fold);
    }
    let plan = FoldPlan {
        k: config.k_folds,
        assignments,
    };

    let mut records = known;
    records.extend(dissonant);
    records.extend(novel);
    let labels: Vec<ClassLabel> = [ClassLabel::Known, ClassLabel::Dissonant, ClassLabel::Novel]
        .into_iter()
        .flat_map(|l| std::iter::repeat_n(l, n))
        .collect();
    let (schema, vectors) =
        extract_labeled(corpus, model, &records, &labels, &config.features, profile)?;
    Ok(ClassificationDataset {
        scenario,
        schema,
        vectors,
        plan,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassifierKind {
    RandomForest,
    LinearSvm,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::RandomForest => "rf",
            ClassifierKind::LinearSvm => "svm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Hyper {
    Forest(ForestHyper),
    Svm(SvmHyper),
}

impl Hyper {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Hyper::Forest(_) => ClassifierKind::RandomForest,
            Hyper::Svm(_) => ClassifierKind::LinearSvm,
        }
    }

    pub fn default_for(kind: ClassifierKind) -> Self {
        match kind {
            ClassifierKind::RandomForest => Hyper::Forest(ForestHyper::default()),
            ClassifierKind::LinearSvm => Hyper::Svm(SvmHyper::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fitted {
    Forest(Forest),
    Svm(LinearSvm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub hyper: Hyper,
    pub class_order: Vec<ClassLabel>,
    pub n_features: usize,
    /// Input columns used by the fit; constant columns are dropped.
    pub kept: Vec<usize>,
    pub fitted: Fitted,
    pub warnings: Vec<String>,
}

impl ClassifierModel {
    pub fn kind(&self) -> ClassifierKind {
        self.hyper.kind()
    }

    pub fn scores(&self, values: &[f64]) -> [f64; N_CLASSES] {
        let x: Vec<f64> = self.kept.iter().map(|&j| values[j]).collect();
        match &self.fitted {
            Fitted::Forest(f) => f.predict_proba(&x),
            Fitted::Svm(s) => s.decision(&x),
        }
    }

    pub fn predict(&self, values: &[f64]) -> ClassLabel {
        let s = self.scores(values);
        let mut best = 0;
        for k in 1..N_CLASSES {
            if s[k] > s[best] {
                best = k;
            }
        }
        ClassLabel::from_index(best)
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint_json(self)
    }
}

fn labeled_matrix(data: &[FeatureVector]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let first = data
        .first()
        .ok_or(Error::DegenerateDataset("no training samples".into()))?;
    let mut x = Vec::with_capacity(data.len());
    let mut y = Vec::with_capacity(data.len());
    for v in data {
        if !Arc::ptr_eq(&v.schema, &first.schema) && v.schema != first.schema {
            return Err(Error::Shape(
                "feature vectors do not share one schema".into(),
            ));
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateDataset(format!(
                "non-finite feature for fact {}",
                v.fact_id
            )));
        }
        let label = v
            .label
            .ok_or_else(|| Error::DegenerateDataset(format!("fact {} is unlabeled", v.fact_id)))?;
        x.push(v.values.clone());
        y.push(label.index());
    }
    Ok((x, y))
}

pub fn train_classifier(
    train: &[FeatureVector],
    hyper: &Hyper,
    seed: u64,
) -> Result<ClassifierModel> {
    let (x, y) = labeled_matrix(train)?;
    let mut present = [false; N_CLASSES];
    for &c in &y {
        present[c] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateDataset(
            "fewer than two classes present".into(),
        ));
    }
    let d = x[0].len();
    let (kept, dropped): (Vec<usize>, Vec<usize>) =
        (0..d).partition(|&j| x.iter().any(|r| r[j] != x[0][j]));
    if kept.is_empty() {
        return Err(Error::DegenerateDataset("every feature is constant".into()));
    }
    let mut warnings = Vec::new();
    if !dropped.is_empty() {
        let names: Vec<&str> = dropped
            .iter()
            .take(5)
            .map(|&j| train[0].schema[j].name.as_str())
            .collect();
        warnings.push(format!(
            "dropped {} constant feature(s), e.g. {}",
            dropped.len(),
            names.join(", ")
        ));
    }
    let xk: Vec<Vec<f64>> = x
        .iter()
        .map(|r| kept.iter().map(|&j| r[j]).collect())
        .collect();
    let fitted = match hyper {
        Hyper::Forest(h) => Fitted::Forest(fit_forest(&xk, &y, h, seed)),
        Hyper::Svm(h) => Fitted::Svm(fit_svm(&xk, &y, h, seed)),
    };
    Ok(ClassifierModel {
        hyper: *hyper,
        class_order: ClassLabel::ALL.to_vec(),
        n_features: d,
        kept,
        fitted,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub draws: usize,
    pub holdout_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            draws: 32,
            holdout_fraction: 0.2,
        }
    }
}

pub fn forest_grid() -> Vec<Hyper> {
    let mut out = Vec::new();
    for n_trees in [50, 100, 200] {
        for max_depth in [Some(6), Some(12), None] {
            for min_samples_leaf in [1, 2, 4, 8] {
                out.push(Hyper::Forest(ForestHyper {
                    n_trees,
                    max_depth,
                    min_samples_leaf,
                    min_samples_split: 2,
                }));
            }
        }
    }
    out
}

pub fn svm_grid() -> Vec<Hyper> {
    (0..=10)
        .map(|i| {
            Hyper::Svm(SvmHyper {
                c: 10f64.powf(-3.0 + 0.5 * i as f64),
                ..SvmHyper::default()
            })
        })
        .collect()
}

pub fn grid_for(kind: ClassifierKind) -> Vec<Hyper> {
    match kind {
        ClassifierKind::RandomForest => forest_grid(),
        ClassifierKind::LinearSvm => svm_grid(),
    }
}

/// Seeded random search: up to `draws` distinct grid points, each scored by
/// accuracy on a holdout slice of `train`. Ties keep the earlier draw.
pub fn search_hyper(
    train: &[FeatureVector],
    kind: ClassifierKind,
    search: &SearchConfig,
    seed: u64,
) -> Result<Hyper> {
    let grid = grid_for(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<Hyper> = if grid.len() <= search.draws {
        grid
    } else {
        sample(&mut rng, grid.len(), search.draws)
            .into_iter()
            .map(|i| grid[i])
            .collect()
    };
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    let n_hold =
        ((train.len() as f64 * search.holdout_fraction).round() as usize).clamp(1, train.len() - 1);
    let (hold, fit): (Vec<&FeatureVector>, Vec<&FeatureVector>) = {
        let hold = idx[..n_hold].iter().map(|&i| &train[i]).collect();
        let fit = idx[n_hold..].iter().map(|&i| &train[i]).collect();
        (hold, fit)
    };
    let fit: Vec<FeatureVector> = fit.into_iter().cloned().collect();
    let scores = candidates
        .par_iter()
        .map(|h| {
            let m = train_classifier(&fit, h, seed)?;
            let hits = hold
                .iter()
                .filter(|v| Some(m.predict(&v.values)) == v.label)
                .count();
            Ok(hits)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(candidates[best])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Tuning {
    Fixed(Hyper),
    Search(SearchConfig),
}

pub type Confusion = [[usize; N_CLASSES]; N_CLASSES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub kind: ClassifierKind,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub fold_accuracy: Vec<f64>,
    pub fold_macro_f1: Vec<f64>,
    /// Rows are true classes, columns predictions, in `ClassLabel::ALL` order.
    pub confusion: Vec<Confusion>,
    pub hypers: Vec<Hyper>,
    pub std_convention: String,
}

pub fn macro_f1(c: &Confusion) -> f64 {
    let mut total = 0.0;
    for k in 0..N_CLASSES {
        let tp = c[k][k] as f64;
        let fp: f64 = (0..N_CLASSES)
            .filter(|&j| j != k)
            .map(|j| c[j][k] as f64)
            .sum();
        let fn_: f64 = (0..N_CLASSES)
            .filter(|&j| j != k)
            .map(|j| c[k][j] as f64)
            .sum();
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    total / N_CLASSES as f64
}

pub fn accuracy_of(c: &Confusion) -> f64 {
    let total: usize = c.iter().flatten().sum();
    let hits: usize = (0..N_CLASSES).map(|k| c[k][k]).sum();
    hits as f64 / total.max(1) as f64
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits on k-1 folds and scores the held-out fold, for every fold.
pub fn cross_validate(
    dataset: &[FeatureVector],
    plan: &FoldPlan,
    kind: ClassifierKind,
    tuning: &Tuning,
    seed: u64,
) -> Result<CvReport> {
    if let Tuning::Fixed(h) = tuning {
        if h.kind() != kind {
            return Err(Error::InvalidConfig(
                "fixed hyperparameters are for another classifier".into(),
            ));
        }
    }
    let folds: Vec<usize> = dataset
        .iter()
        .map(|v| {
            plan.fold_of(v.fact_id)
                .ok_or(Error::FoldCoverage(v.fact_id))
        })
        .collect::<Result<_>>()?;
    let results = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let (test, train): (Vec<_>, Vec<_>) =
                dataset.iter().zip(&folds).partition(|(_, &f)| f == fold);
            let train: Vec<FeatureVector> = train.into_iter().map(|(v, _)| v.clone()).collect();
            if test.is_empty() {
                return Err(Error::DegenerateDataset(format!("fold {fold} is empty")));
            }
            let fold_seed = seed.wrapping_add(fold as u64);
            let hyper = match tuning {
                Tuning::Fixed(h) => *h,
                Tuning::Search(s) => search_hyper(&train, kind, s, fold_seed)?,
            };
            let model = train_classifier(&train, &hyper, fold_seed)?;
            let mut c: Confusion = [[0; N_CLASSES]; N_CLASSES];
            for (v, _) in test {
                let truth = v
                    .label
                    .ok_or_else(|| Error::DegenerateDataset("unlabeled test sample".into()))?;
                c[truth.index()][model.predict(&v.values).index()] += 1;
            }
            Ok((c, hyper))
        })
        .collect::<Result<Vec<_>>>()?;
    let fold_accuracy: Vec<f64> = results.iter().map(|(c, _)| accuracy_of(c)).collect();
    let fold_macro_f1: Vec<f64> = results.iter().map(|(c, _)| macro_f1(c)).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&fold_accuracy);
    let (macro_f1_mean, macro_f1_std) = mean_std(&fold_macro_f1);
    Ok(CvReport {
        kind,
        accuracy_mean,
        accuracy_std,
        macro_f1_mean,
        macro_f1_std,
        fold_accuracy,
        fold_macro_f1,
        confusion: results.iter().map(|(c, _)| *c).collect(),
        hypers: results.iter().map(|(_, h)| *h).collect(),
        std_convention: "population".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub features: Vec<(String, f64)>,
    /// `A`, `G`, or `output`.
    pub by_part: BTreeMap<String, f64>,
    /// Transformer block index, or `output`.
    pub by_block: BTreeMap<String, f64>,
}

impl ImportanceReport {
    pub fn features_csv(&self) -> String {
        let mut out = String::from("feature,importance\n");
        for (name, v) in &self.features {
            let _ = writeln!(out, "{name},{v}");
        }
        out
    }

    pub fn grouped_csv(&self) -> String {
        let mut out = String::from("grouping,group,importance\n");
        for (g, v) in &self.by_part {
            let _ = writeln!(out, "part,{g},{v}");
        }
        for (g, v) in &self.by_block {
            let _ = writeln!(out, "block,{g},{v}");
        }
        out
    }
}

pub fn feature_importance(model: &ClassifierModel, schema: &Schema) -> Result<ImportanceReport> {
    let Fitted::Forest(forest) = &model.fitted else {
        return Err(Error::WrongClassifierKind);
    };
    if schema.len() != model.n_features {
        return Err(Error::Shape(format!(
            "schema has {} features, model {}",
            schema.len(),
            model.n_features
        )));
    }
    let mut full = vec![0.0; model.n_features];
    for (&j, &v) in model.kept.iter().zip(&forest.importances) {
        full[j] = v;
    }
    let mut by_part = BTreeMap::new();
    let mut by_block = BTreeMap::new();
    for (info, &v) in schema.iter().zip(&full) {
        let (part, block) = match info.origin {
            FeatureOrigin::Internal { layer, part, .. } => {
                (part.tag().to_owned(), layer.to_string())
            }
            FeatureOrigin::Output { .. } => ("output".to_owned(), "output".to_owned()),
        };
        *by_part.entry(part).or_insert(0.0) += v;
        *by_block.entry(block).or_insert(0.0) += v;
    }
    Ok(ImportanceReport {
        features: schema.iter().map(|i| i.name.clone()).zip(full).collect(),
        by_part,
        by_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schema(d: usize) -> Schema {
        Arc::new(
            (0..d)
                .map(|j| FeatureInfo {
                    name: format!("f{j}"),
                    origin: FeatureOrigin::Output {
                        block: OutputBlock::Feat1,
                        point: 0,
                        index: j,
                    },
                })
                .collect(),
        )
    }

    fn vectors(rows: &[(Vec<f64>, usize)]) -> Vec<FeatureVector> {
        let schema = toy_schema(rows[0].0.len());
        rows.iter()
            .enumerate()
            .map(|(i, (x, y))| FeatureVector {
                fact_id: i as u64,
                values: x.clone(),
                schema: schema.clone(),
                label: Some(ClassLabel::from_index(*y)),
            })
            .collect()
    }

    #[test]
    fn single_class_is_degenerate() {
        let data = vectors(&[(vec![0.0, 1.0], 1), (vec![1.0, 0.0], 1)]);
        for kind in [ClassifierKind::RandomForest, ClassifierKind::LinearSvm] {
            assert!(matches!(
                train_classifier(&data, &Hyper::default_for(kind), 0),
                Err(Error::DegenerateDataset(_))
            ));
        }
    }

    #[test]
    fn constant_columns_are_dropped_with_warning() {
        let data = vectors(&[
            (vec![0.0, 5.0], 0),
            (vec![1.0, 5.0], 1),
            (vec![2.0, 5.0], 2),
        ]);
        let m =
            train_classifier(&data, &Hyper::default_for(ClassifierKind::RandomForest), 0).unwrap();
        assert_eq!(m.kept, vec![0]);
        assert_eq!(m.warnings.len(), 1);
        let imp = feature_importance(&m, &data[0].schema).unwrap();
        assert_eq!(imp.features[1].1, 0.0);
    }

    #[test]
    fn importance_rejects_svm() {
        let data = vectors(&[(vec![0.0], 0), (vec![1.0], 1)]);
        let m = train_classifier(&data, &Hyper::default_for(ClassifierKind::LinearSvm), 0).unwrap();
        assert!(matches!(
            feature_importance(&m, &data[0].schema),
            Err(Error::WrongClassifierKind)
        ));
    }

    #[test]
    fn f1_of_perfect_and_inverted() {
        let perfect = [[3, 0, 0], [0, 3, 0], [0, 0, 3]];
        assert_eq!(macro_f1(&perfect), 1.0);
        assert_eq!(accuracy_of(&perfect), 1.0);
        let wrong = [[0, 3, 0], [0, 0, 3], [3, 0, 0]];
        assert_eq!(macro_f1(&wrong), 0.0);
    }

    #[test]
    fn uncovered_sample_is_a_fold_error() {
        let data = vectors(&[(vec![0.0], 0), (vec![1.0], 1), (vec![2.0], 2)]);
        let plan = FoldPlan {
            k: 2,
            assignments: [(0, 0), (1, 1)].into_iter().collect(),
        };
        let r = cross_validate(
            &data,
            &plan,
            ClassifierKind::LinearSvm,
            &Tuning::Fixed(Hyper::default_for(ClassifierKind::LinearSvm)),
            0,
        );
        assert!(matches!(r, Err(Error::FoldCoverage(2))));
    }
}

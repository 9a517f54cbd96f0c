use std::sync::Arc;

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::ClassLabel;
use crate::corpus::{FactId, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{
    softmax_rows, Batch, EncodedFact, LanguageModel, LossMask, Model, ModelConfig,
    TrackedMatrixKind,
};
use crate::tracking::{
    reduce, representative_position, standardize, HistoricalProfile, Magnitude, TokenMode,
};

const HISTORICAL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    Activations,
    Gradients,
}

impl Part {
    pub fn tag(self) -> &'static str {
        match self {
            Part::Activations => "A",
            Part::Gradients => "G",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stat {
    Mean,
    Std,
    Min,
    Max,
    Q25,
    Q50,
    Q75,
}

impl Stat {
    pub const ALL: [Stat; 7] = [
        Stat::Mean,
        Stat::Std,
        Stat::Min,
        Stat::Max,
        Stat::Q25,
        Stat::Q50,
        Stat::Q75,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stat::Mean => "mean",
            Stat::Std => "std",
            Stat::Min => "min",
            Stat::Max => "max",
            Stat::Q25 => "q25",
            Stat::Q50 => "q50",
            Stat::Q75 => "q75",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Normalization {
    Raw,
    /// Standardize each tensor over all of its entries first.
    Layer,
    /// Divide each neuron's value by its historical magnitude.
    Historical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputKind {
    Feat1,
    Feat2,
    Feat3,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Internal { parts: Vec<Part> },
    Output { kind: OutputKind },
}

impl FeatureSource {
    pub fn activations() -> Self {
        FeatureSource::Internal {
            parts: vec![Part::Activations],
        }
    }

    pub fn gradients() -> Self {
        FeatureSource::Internal {
            parts: vec![Part::Gradients],
        }
    }

    pub fn both() -> Self {
        FeatureSource::Internal {
            parts: vec![Part::Activations, Part::Gradients],
        }
    }

    pub fn label(&self) -> String {
        match self {
            FeatureSource::Internal { parts } => {
                parts.iter().map(|p| p.tag()).collect::<Vec<_>>().join("+")
            }
            FeatureSource::Output { kind } => format!("{kind:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputParams {
    pub n_last: usize,
    pub top_k: usize,
    pub n_bins: usize,
}

impl Default for OutputParams {
    fn default() -> Self {
        Self {
            n_last: 3,
            top_k: 100,
            n_bins: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub source: FeatureSource,
    pub normalization: Normalization,
    pub stats: Vec<Stat>,
    pub output: OutputParams,
    /// Supervision for the no-update backward pass.
    pub loss_mask: LossMask,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            source: FeatureSource::both(),
            normalization: Normalization::Raw,
            stats: Stat::ALL.to_vec(),
            output: OutputParams::default(),
            loss_mask: LossMask::AllTokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputBlock {
    Feat1,
    Feat2,
    Feat3,
    /// One-hot bin of the true token's probability, per truncation point.
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureOrigin {
    Internal {
        layer: usize,
        kind: TrackedMatrixKind,
        part: Part,
        stat: Stat,
    },
    Output {
        block: OutputBlock,
        point: usize,
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    pub origin: FeatureOrigin,
}

pub type Schema = Arc<Vec<FeatureInfo>>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub fact_id: FactId,
    pub values: Vec<f64>,
    pub schema: Schema,
    pub label: Option<ClassLabel>,
}

/// Statistics of `values` in `stats` order; quantiles interpolate linearly.
pub fn layer_stats(values: &[f64], stats: &[Stat]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return vec![0.0; stats.len()];
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    stats
        .iter()
        .map(|s| match s {
            Stat::Mean => mean,
            Stat::Std => {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
            }
            Stat::Min => sorted[0],
            Stat::Max => sorted[n - 1],
            Stat::Q25 => quantile(0.25),
            Stat::Q50 => quantile(0.5),
            Stat::Q75 => quantile(0.75),
        })
        .collect()
}

pub fn internal_schema(model: &ModelConfig, parts: &[Part], stats: &[Stat]) -> Schema {
    let mut out = Vec::new();
    for layer in 0..model.n_layers {
        for kind in TrackedMatrixKind::ALL {
            for &part in parts {
                for &stat in stats {
                    out.push(FeatureInfo {
                        name: format!("h{layer}.{}.{}.{}", kind.name(), part.tag(), stat.name()),
                        origin: FeatureOrigin::Internal {
                            layer,
                            kind,
                            part,
                            stat,
                        },
                    });
                }
            }
        }
    }
    Arc::new(out)
}

/// Blocks emitted for an output kind, in order.
pub fn output_blocks(kind: OutputKind) -> &'static [OutputBlock] {
    match kind {
        OutputKind::Feat1 => &[OutputBlock::Feat1],
        OutputKind::Feat2 => &[OutputBlock::Feat2],
        OutputKind::Feat3 => &[OutputBlock::Feat3, OutputBlock::Indicator],
        OutputKind::Concat => &[
            OutputBlock::Feat1,
            OutputBlock::Feat2,
            OutputBlock::Feat3,
            OutputBlock::Indicator,
        ],
    }
}

pub fn block_width(block: OutputBlock, p: &OutputParams) -> usize {
    let points = p.n_last + 1;
    match block {
        OutputBlock::Feat1 => points,
        OutputBlock::Feat2 => points * 2 * p.top_k,
        OutputBlock::Feat3 | OutputBlock::Indicator => points * p.n_bins,
    }
}

pub fn output_schema(kind: OutputKind, p: &OutputParams) -> Schema {
    let mut out = Vec::new();
    for &block in output_blocks(kind) {
        let per_point = block_width(block, p) / (p.n_last + 1);
        for point in 0..=p.n_last {
            for index in 0..per_point {
                let name = match block {
                    OutputBlock::Feat1 => format!("feat1.p{point}"),
                    OutputBlock::Feat2 if index < p.top_k => format!("feat2.p{point}.val{index}"),
                    OutputBlock::Feat2 => format!("feat2.p{point}.idx{}", index - p.top_k),
                    OutputBlock::Feat3 => format!("feat3.p{point}.bin{index}"),
                    OutputBlock::Indicator => format!("truth.p{point}.bin{index}"),
                };
                out.push(FeatureInfo {
                    name,
                    origin: FeatureOrigin::Output {
                        block,
                        point,
                        index,
                    },
                });
            }
        }
    }
    Arc::new(out)
}

/// Width of each emitted block, for reporting.
pub fn output_dims(kind: OutputKind, p: &OutputParams) -> Vec<(OutputBlock, usize)> {
    output_blocks(kind)
        .iter()
        .map(|&b| (b, block_width(b, p)))
        .collect()
}

pub fn schema_for(config: &FeatureConfig, model: &ModelConfig) -> Schema {
    match &config.source {
        FeatureSource::Internal { parts } => internal_schema(model, parts, &config.stats),
        FeatureSource::Output { kind } => output_schema(*kind, &config.output),
    }
}

fn reduced_signed(t: ArrayView3<f32>, lengths: &[usize], layer_norm: bool) -> Vec<f64> {
    let x = t.mapv(f64::from);
    let x = if layer_norm { standardize(x.view()) } else { x };
    reduce(
        x.view(),
        Some(lengths),
        TokenMode::LastToken,
        Magnitude::Signed,
    )
}

/// Per-layer statistics of activations and/or gradients at the fact's
/// representative token. The model is only read.
pub fn extract_internal_features(
    model: &Model<f32>,
    fact: &EncodedFact,
    config: &FeatureConfig,
    profile: Option<&HistoricalProfile>,
    schema: &Schema,
) -> Result<FeatureVector> {
    let FeatureSource::Internal { parts } = &config.source else {
        return Err(Error::InvalidConfig(
            "internal extraction needs an internal feature source".into(),
        ));
    };
    let historical = match config.normalization {
        Normalization::Historical => {
            let p = profile.ok_or(Error::MissingProfile)?;
            if p.manifest.total() != model.config.total_neurons() {
                return Err(Error::Shape("profile does not match the model".into()));
            }
            Some(p)
        }
        _ => None,
    };
    if fact.tokens.len() < 3 {
        return Err(Error::Shape(
            "fact too short for a representative token".into(),
        ));
    }
    let batch = Batch::from_sequences(std::slice::from_ref(&fact.tokens));
    let sup = batch.supervision(config.loss_mask, &[fact.object_len]);
    let (logits, trace) = model.forward(&batch)?;
    let grad_outs = if parts.contains(&Part::Gradients) {
        Some(model.backward(&trace, &logits, &sup, 1.0)?.1)
    } else {
        None
    };
    debug_assert_eq!(
        representative_position(fact.tokens.len()),
        fact.tokens.len() - 3
    );
    let layer_norm = config.normalization == Normalization::Layer;
    let manifest = crate::tracking::NeuronManifest::of(&model.config);
    let mut values = Vec::with_capacity(schema.len());
    for layer in 0..model.config.n_layers {
        for kind in TrackedMatrixKind::ALL {
            for &part in parts {
                let mut v = match part {
                    Part::Activations => {
                        reduced_signed(trace.activation(layer, kind), &batch.lengths, layer_norm)
                    }
                    Part::Gradients => reduced_signed(
                        grad_outs
                            .as_ref()
                            .expect("computed above")
                            .grad_out(layer, kind),
                        &batch.lengths,
                        layer_norm,
                    ),
                };
                if let Some(p) = historical {
                    let off = manifest.offset(layer, kind);
                    let hist = match part {
                        Part::Activations => &p.ha,
                        Part::Gradients => &p.hg,
                    };
                    for (i, x) in v.iter_mut().enumerate() {
                        *x /= hist[off + i].abs().max(HISTORICAL_EPS);
                    }
                }
                values.extend(layer_stats(&v, &config.stats));
            }
        }
    }
    check_width(&values, schema)?;
    Ok(FeatureVector {
        fact_id: fact.id,
        values,
        schema: schema.clone(),
        label: None,
    })
}

fn check_width(values: &[f64], schema: &Schema) -> Result<()> {
    if values.len() != schema.len() {
        return Err(Error::Shape(format!(
            "feature vector has {} values, schema {}",
            values.len(),
            schema.len()
        )));
    }
    Ok(())
}

/// One truncation point: the next-token distribution and the true token,
/// or `None` for a sentinel.
type Point = Option<(Vec<f64>, usize)>;

fn bin_of(p: f64, n_bins: usize) -> usize {
    ((p * n_bins as f64) as usize).min(n_bins - 1)
}

fn top_k(dist: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn truncation_points(probs: &Array2<f64>, fact: &EncodedFact, n_last: usize) -> Vec<Point> {
    let obj = fact.object_positions();
    let mut points = Vec::with_capacity(n_last + 1);
    for i in 0..n_last {
        let j = fact.object_len as isize - n_last as isize + i as isize;
        if j < 0 {
            points.push(None);
        } else {
            let pos = obj.start + j as usize;
            points.push(Some((
                probs.row(pos - 1).to_vec(),
                fact.tokens[pos] as usize,
            )));
        }
    }
    let last = fact.tokens.len() - 1;
    points.push(Some((
        probs.row(last - 1).to_vec(),
        fact.tokens[last] as usize,
    )));
    points
}

/// Output-distribution features at the last `n_last` object tokens plus the
/// full statement.
pub fn extract_output_features<M: LanguageModel + ?Sized>(
    model: &M,
    fact: &EncodedFact,
    config: &FeatureConfig,
    schema: &Schema,
) -> Result<FeatureVector> {
    let FeatureSource::Output { kind } = config.source else {
        return Err(Error::InvalidConfig(
            "output extraction needs an output feature source".into(),
        ));
    };
    let p = config.output;
    if p.n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be positive".into()));
    }
    if *fact.tokens.last().unwrap_or(&0) != EOS_ID || fact.tokens.len() < fact.object_len + 2 {
        return Err(Error::Shape(
            "fact must end with its object then EOS".into(),
        ));
    }
    let logits = model
        .sequence_logits(std::slice::from_ref(&fact.tokens))?
        .remove(0);
    let probs = softmax_rows(&logits.mapv(f64::from));
    let vocab = model.vocab_size();
    let points = truncation_points(&probs, fact, p.n_last);
    let full: f64 = (1..fact.tokens.len())
        .map(|pos| probs[[pos - 1, fact.tokens[pos] as usize]])
        .product();
    let mut values = Vec::with_capacity(schema.len());
    for &block in output_blocks(kind) {
        for (i, point) in points.iter().enumerate() {
            match block {
                OutputBlock::Feat1 => values.push(match point {
                    _ if i == p.n_last => full,
                    Some((d, t)) => d[*t],
                    None => 1.0,
                }),
                OutputBlock::Feat2 => {
                    let mut vals = vec![0.0; p.top_k];
                    let mut idxs = vec![0.0; p.top_k];
                    if let Some((d, _)) = point {
                        for (r, j) in top_k(d, p.top_k).into_iter().enumerate() {
                            vals[r] = d[j];
                            idxs[r] = j as f64 / vocab as f64;
                        }
                    }
                    values.extend(vals);
                    values.extend(idxs);
                }
                OutputBlock::Feat3 => {
                    let mut hist = vec![0.0; p.n_bins];
                    match point {
                        Some((d, _)) => {
                            for &x in d {
                                hist[bin_of(x, p.n_bins)] += 1.0;
                            }
                        }
                        None => {
                            hist[0] += (vocab - 1) as f64;
                            hist[p.n_bins - 1] += 1.0;
                        }
                    }
                    values.extend(hist.into_iter().map(|c| c / vocab as f64));
                }
                OutputBlock::Indicator => {
                    let mut one_hot = vec![0.0; p.n_bins];
                    let prob = point.as_ref().map_or(1.0, |(d, t)| d[*t]);
                    one_hot[bin_of(prob, p.n_bins)] = 1.0;
                    values.extend(one_hot);
                }
            }
        }
    }
    check_width(&values, schema)?;
    Ok(FeatureVector {
        fact_id: fact.id,
        values,
        schema: schema.clone(),
        label: None,
    })
}

/// Dispatches on the configured source.
pub fn extract_features(
    model: &Model<f32>,
    fact: &EncodedFact,
    config: &FeatureConfig,
    profile: Option<&HistoricalProfile>,
    schema: &Schema,
) -> Result<FeatureVector> {
    match config.source {
        FeatureSource::Internal { .. } => {
            extract_internal_features(model, fact, config, profile, schema)
        }
        FeatureSource::Output { .. } => extract_output_features(model, fact, config, schema),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Puts all mass on the true next token.
    struct Oracle {
        vocab: usize,
    }

    impl LanguageModel for Oracle {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn sequence_logits(&self, seqs: &[Vec<u32>]) -> Result<Vec<Array2<f32>>> {
            Ok(seqs
                .iter()
                .map(|s| {
                    let mut l = Array2::zeros((s.len(), self.vocab));
                    for i in 0..s.len() - 1 {
                        l[[i, s[i + 1] as usize]] = 60.0;
                    }
                    l
                })
                .collect())
        }
    }

    #[test]
    fn stats_worked_example() {
        let s = layer_stats(&[1.0, 2.0, 3.0, 4.0, 5.0], &Stat::ALL);
        let expect = [3.0, 2f64.sqrt(), 1.0, 5.0, 2.0, 3.0, 4.0];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let s = layer_stats(&[0.0, 10.0], &[Stat::Q25, Stat::Q50, Stat::Q75]);
        assert_eq!(s, vec![2.5, 5.0, 7.5]);
    }

    #[test]
    fn default_internal_width() {
        let cfg = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert_eq!(
            internal_schema(&cfg, &[Part::Activations, Part::Gradients], &Stat::ALL).len(),
            224
        );
    }

    #[test]
    fn output_dims_at_default_params() {
        let p = OutputParams::default();
        let w = |k| output_schema(k, &p).len();
        assert_eq!(w(OutputKind::Feat1), 4);
        assert_eq!(w(OutputKind::Feat2), 800);
        assert_eq!(w(OutputKind::Feat3), 400 + 400);
        assert_eq!(w(OutputKind::Concat), 1204 + 400);
        let core: usize = output_dims(OutputKind::Concat, &p)
            .iter()
            .filter(|(b, _)| *b != OutputBlock::Indicator)
            .map(|(_, w)| w)
            .sum();
        assert_eq!(core, 1204);
    }

    fn fact() -> EncodedFact {
        EncodedFact {
            id: 0,
            tokens: vec![1, 3, 4, 5, 2],
            object_len: 1,
        }
    }

    fn output_config(kind: OutputKind) -> FeatureConfig {
        FeatureConfig {
            source: FeatureSource::Output { kind },
            output: OutputParams {
                n_last: 3,
                top_k: 4,
                n_bins: 10,
            },
            ..FeatureConfig::default()
        }
    }

    #[test]
    fn certain_oracle_gives_unit_feat1() {
        let cfg = output_config(OutputKind::Feat1);
        let schema = schema_for(&cfg, &ModelConfig::default());
        let f = extract_output_features(&Oracle { vocab: 8 }, &fact(), &cfg, &schema).unwrap();
        assert_eq!(f.values, vec![1.0; 4]);
    }

    #[test]
    fn histograms_sum_to_one_and_indices_are_normalized() {
        let cfg = output_config(OutputKind::Concat);
        let schema = schema_for(&cfg, &ModelConfig::default());
        let f = extract_output_features(&Oracle { vocab: 8 }, &fact(), &cfg, &schema).unwrap();
        for point in 0..4 {
            let mass: f64 = schema
                .iter()
                .zip(&f.values)
                .filter(|(info, _)| {
                    matches!(info.origin, FeatureOrigin::Output { block: OutputBlock::Feat3, point: p, .. } if p == point)
                })
                .map(|(_, v)| v)
                .sum();
            assert!((mass - 1.0).abs() < 1e-9);
        }
        for (info, v) in schema.iter().zip(&f.values) {
            if info.name.contains(".idx") {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }
}

//! A small GPT-2 style decoder-only transformer with hand-written backward.
//!
//! Blocks are pre-layer-norm with GELU MLPs. Every linear weight is stored
//! `[d_out, d_in]`, so one output unit (a "neuron") owns exactly one weight
//! row plus one bias entry. The four tracked matrices per block are
//! `attn.c_attn`, `attn.c_proj`, `mlp.c_fc` and `mlp.c_proj`.

mod eval;
mod forward;
mod optim;

use std::fmt;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{
    accuracy, argmax, recall_all, recall_fact, softmax_row, EncodedFact, LanguageModel,
};
pub use forward::{loss, softmax_rows, Batch, GradOutTrace, LossMask, Supervision, Trace};
pub use optim::{AdamState, OptimizerConfig, UpdateRule};

pub(crate) fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("f64 converts to any float")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(4, 128, 4, 512, 0, 16, 0)
    }
}

impl ModelConfig {
    /// Config with `d_key = d_value = d_model / n_heads`.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq: usize,
        seed: u64,
    ) -> Self {
        let head = if n_heads == 0 { 0 } else { d_model / n_heads };
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            d_key: head,
            d_value: head,
            vocab_size,
            max_seq,
            seed,
            tie_embeddings: false,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("layer, width and head counts must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_key == 0 || self.d_value == 0 {
            return bad("d_key and d_value must be positive".into());
        }
        if self.vocab_size < 3 || self.max_seq < 2 {
            return bad("vocabulary needs the reserved tokens and max_seq >= 2".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    /// Output width of a tracked matrix.
    pub fn out_dim(&self, kind: TrackedMatrixKind) -> usize {
        match kind {
            TrackedMatrixKind::AttnCAttn => self.n_heads * (2 * self.d_key + self.d_value),
            TrackedMatrixKind::AttnCProj | TrackedMatrixKind::MlpCProj => self.d_model,
            TrackedMatrixKind::MlpCFc => self.d_ff,
        }
    }

    /// Input width of a tracked matrix.
    pub fn in_dim(&self, kind: TrackedMatrixKind) -> usize {
        match kind {
            TrackedMatrixKind::AttnCAttn | TrackedMatrixKind::MlpCFc => self.d_model,
            TrackedMatrixKind::AttnCProj => self.n_heads * self.d_value,
            TrackedMatrixKind::MlpCProj => self.d_ff,
        }
    }

    pub fn neurons_per_block(&self) -> usize {
        TrackedMatrixKind::ALL
            .iter()
            .map(|&k| self.out_dim(k))
            .sum()
    }

    pub fn total_neurons(&self) -> usize {
        self.n_layers * self.neurons_per_block()
    }

    /// Every neuron in canonical (layer, kind, index) order.
    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.n_layers).flat_map(move |layer| {
            TrackedMatrixKind::ALL.into_iter().flat_map(move |kind| {
                (0..self.out_dim(kind)).map(move |index| NeuronId { layer, kind, index })
            })
        })
    }

    /// Position of a neuron in [`ModelConfig::neurons`] order.
    pub fn neuron_offset(&self, n: NeuronId) -> Result<usize> {
        if n.layer >= self.n_layers || n.index >= self.out_dim(n.kind) {
            return Err(Error::InvalidNeuron(n.to_string()));
        }
        let before_kind: usize = TrackedMatrixKind::ALL
            .iter()
            .take_while(|&&k| k != n.kind)
            .map(|&k| self.out_dim(k))
            .sum();
        Ok(n.layer * self.neurons_per_block() + before_kind + n.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrackedMatrixKind {
    AttnCAttn,
    AttnCProj,
    MlpCFc,
    MlpCProj,
}

impl TrackedMatrixKind {
    pub const ALL: [TrackedMatrixKind; 4] = [
        TrackedMatrixKind::AttnCAttn,
        TrackedMatrixKind::AttnCProj,
        TrackedMatrixKind::MlpCFc,
        TrackedMatrixKind::MlpCProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrackedMatrixKind::AttnCAttn => "attn.c_attn",
            TrackedMatrixKind::AttnCProj => "attn.c_proj",
            TrackedMatrixKind::MlpCFc => "mlp.c_fc",
            TrackedMatrixKind::MlpCProj => "mlp.c_proj",
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TrackedMatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One output unit of a tracked matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub kind: TrackedMatrixKind,
    pub index: usize,
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h.{}.{}[{}]", self.layer, self.kind, self.index)
    }
}

/// What a parameter tensor is, for masking and bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Untracked,
    TrackedWeight {
        layer: usize,
        kind: TrackedMatrixKind,
    },
    TrackedBias {
        layer: usize,
        kind: TrackedMatrixKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    Ln1G,
    Ln1B,
    AttnW,
    AttnB,
    AprojW,
    AprojB,
    Ln2G,
    Ln2B,
    FcW,
    FcB,
    MprojW,
    MprojB,
}

const SLOTS_PER_BLOCK: usize = 12;
const WTE: usize = 0;
const WPE: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: NdFloat> Tensor<F> {
    fn zeros(name: String, role: ParamRole, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            role,
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat list of named tensors; gradients and optimizer moments reuse the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: NdFloat> ParamStore<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        use TrackedMatrixKind::*;
        let d = config.d_model;
        let mut t = vec![
            Tensor::zeros(
                "wte".into(),
                ParamRole::Untracked,
                vec![config.vocab_size, d],
            ),
            Tensor::zeros("wpe".into(), ParamRole::Untracked, vec![config.max_seq, d]),
        ];
        for l in 0..config.n_layers {
            let w = |kind| ParamRole::TrackedWeight { layer: l, kind };
            let b = |kind| ParamRole::TrackedBias { layer: l, kind };
            let mat = |kind: TrackedMatrixKind| vec![config.out_dim(kind), config.in_dim(kind)];
            let vecd = |kind: TrackedMatrixKind| vec![config.out_dim(kind)];
            let p = format!("h.{l}.");
            t.push(Tensor::zeros(
                p.clone() + "ln_1.g",
                ParamRole::Untracked,
                vec![d],
            ));
            t.push(Tensor::zeros(
                p.clone() + "ln_1.b",
                ParamRole::Untracked,
                vec![d],
            ));
            t.push(Tensor::zeros(
                p.clone() + "attn.c_attn.w",
                w(AttnCAttn),
                mat(AttnCAttn),
            ));
            t.push(Tensor::zeros(
                p.clone() + "attn.c_attn.b",
                b(AttnCAttn),
                vecd(AttnCAttn),
            ));
            t.push(Tensor::zeros(
                p.clone() + "attn.c_proj.w",
                w(AttnCProj),
                mat(AttnCProj),
            ));
            t.push(Tensor::zeros(
                p.clone() + "attn.c_proj.b",
                b(AttnCProj),
                vecd(AttnCProj),
            ));
            t.push(Tensor::zeros(
                p.clone() + "ln_2.g",
                ParamRole::Untracked,
                vec![d],
            ));
            t.push(Tensor::zeros(
                p.clone() + "ln_2.b",
                ParamRole::Untracked,
                vec![d],
            ));
            t.push(Tensor::zeros(
                p.clone() + "mlp.c_fc.w",
                w(MlpCFc),
                mat(MlpCFc),
            ));
            t.push(Tensor::zeros(
                p.clone() + "mlp.c_fc.b",
                b(MlpCFc),
                vecd(MlpCFc),
            ));
            t.push(Tensor::zeros(
                p.clone() + "mlp.c_proj.w",
                w(MlpCProj),
                mat(MlpCProj),
            ));
            t.push(Tensor::zeros(
                p + "mlp.c_proj.b",
                b(MlpCProj),
                vecd(MlpCProj),
            ));
        }
        t.push(Tensor::zeros(
            "ln_f.g".into(),
            ParamRole::Untracked,
            vec![d],
        ));
        t.push(Tensor::zeros(
            "ln_f.b".into(),
            ParamRole::Untracked,
            vec![d],
        ));
        if !config.tie_embeddings {
            t.push(Tensor::zeros(
                "lm_head.w".into(),
                ParamRole::Untracked,
                vec![config.vocab_size, d],
            ));
        }
        Self { tensors: t }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.role, t.shape.clone()))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Every entry multiplied by `factor`.
    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> F {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(F::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn block_index(layer: usize, slot: Slot) -> usize {
        2 + layer * SLOTS_PER_BLOCK + slot as usize
    }

    fn lnf_index(&self, config: &ModelConfig) -> usize {
        2 + config.n_layers * SLOTS_PER_BLOCK
    }

    pub(crate) fn head_index(&self, config: &ModelConfig) -> usize {
        if config.tie_embeddings {
            WTE
        } else {
            self.lnf_index(config) + 2
        }
    }

    pub(crate) fn mat(&self, idx: usize) -> ArrayView2<'_, F> {
        let t = &self.tensors[idx];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("matrix shape")
    }

    pub(crate) fn mat_mut(&mut self, idx: usize) -> ArrayViewMut2<'_, F> {
        let t = &mut self.tensors[idx];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("matrix shape")
    }

    pub(crate) fn vec(&self, idx: usize) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.tensors[idx].data[..])
    }

    pub(crate) fn vec_mut(&mut self, idx: usize) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.tensors[idx].data[..])
    }

    /// Tracked weight and bias tensors for `(layer, kind)`.
    pub fn tracked_indices(layer: usize, kind: TrackedMatrixKind) -> (usize, usize) {
        let (w, b) = match kind {
            TrackedMatrixKind::AttnCAttn => (Slot::AttnW, Slot::AttnB),
            TrackedMatrixKind::AttnCProj => (Slot::AprojW, Slot::AprojB),
            TrackedMatrixKind::MlpCFc => (Slot::FcW, Slot::FcB),
            TrackedMatrixKind::MlpCProj => (Slot::MprojW, Slot::MprojB),
        };
        (Self::block_index(layer, w), Self::block_index(layer, b))
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

pub type Gradients<F> = ParamStore<F>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub adam: Option<AdamState<F>>,
}

impl<F: NdFloat> Model<F> {
    /// Seeded init: N(0, std) weights, residual projections scaled by
    /// `1/sqrt(2 n_layers)`, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.init_std;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        for t in &mut params.tensors {
            let name = t.name.as_str();
            if name.ends_with(".g") {
                t.data.iter_mut().for_each(|x| *x = F::one());
            } else if name.ends_with(".b") {
                // zeros already
            } else {
                let s = if name.ends_with("c_proj.w") {
                    resid_std
                } else {
                    std
                };
                let normal = Normal::new(0.0, s).expect("positive std");
                t.data
                    .iter_mut()
                    .for_each(|x| *x = cast(normal.sample(&mut rng)));
            }
        }
        Ok(Self {
            config,
            params,
            adam: None,
        })
    }

    /// Drops optimizer moments, e.g. at the start of a new training stage.
    pub fn reset_optimizer(&mut self) {
        self.adam = None;
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}

impl Model<f32> {
    pub fn fingerprint(&self) -> String {
        crate::fingerprint_bytes(&self.checkpoint_bytes())
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"PLABCKPT1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    parameters: Vec<ManifestEntry>,
}

impl Model<f32> {
    /// `PLABCKPT1`, u64 LE header length, JSON header, then LE f32 payload.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let parameters = self
            .params
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.len() * 4;
                e
            })
            .collect();
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            parameters,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.params.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |r: &str| Error::format(path, r);
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| corrupt("missing PLABCKPT1 magic"))?;
        if rest.len() < 8 {
            return Err(corrupt("truncated header length"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
        let payload = &rest[hlen..];
        let mut model = Model::init(header.config)?;
        if header.parameters.len() != model.params.tensors.len() {
            return Err(corrupt("parameter manifest does not match config"));
        }
        for (t, e) in model.params.tensors.iter_mut().zip(&header.parameters) {
            if t.name != e.name || t.shape != e.shape {
                return Err(corrupt(&format!("unexpected tensor {}", e.name)));
            }
            let end = e.offset + t.len() * 4;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| corrupt("truncated payload"))?;
            for (x, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }

    /// Same weights in 64-bit precision.
    pub fn to_f64(&self) -> Model<f64> {
        Model {
            config: self.config.clone(),
            params: ParamStore {
                tensors: self
                    .params
                    .tensors
                    .iter()
                    .map(|t| Tensor {
                        name: t.name.clone(),
                        role: t.role,
                        shape: t.shape.clone(),
                        data: t.data.iter().map(|&x| x as f64).collect(),
                    })
                    .collect(),
            },
            adam: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 16, 2, 32, 11, 8, 3)
    }

    #[test]
    fn head_widths_follow_heads() {
        let c = ModelConfig::new(4, 128, 4, 512, 100, 16, 0);
        assert_eq!((c.d_key, c.d_value), (32, 32));
        assert_eq!(c.neurons_per_block(), 384 + 128 + 512 + 128);
        assert_eq!(c.total_neurons(), 4608);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = ModelConfig::new(2, 100, 3, 64, 50, 8, 0);
        assert!(matches!(
            Model::<f32>::init(c),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::<f32>::init(tiny()).unwrap();
        let b = Model::<f32>::init(tiny()).unwrap();
        assert_eq!(a.params, b.params);
        let mut other = tiny();
        other.seed = 4;
        assert_ne!(a.params, Model::<f32>::init(other).unwrap().params);
    }

    #[test]
    fn neuron_offsets_are_dense() {
        let c = tiny();
        for (i, n) in c.neurons().enumerate() {
            assert_eq!(c.neuron_offset(n).unwrap(), i);
        }
        assert_eq!(c.neurons().count(), c.total_neurons());
        let bad = NeuronId {
            layer: 2,
            kind: TrackedMatrixKind::MlpCFc,
            index: 0,
        };
        assert!(c.neuron_offset(bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::<f32>::init(tiny()).unwrap();
        let bytes = m.checkpoint_bytes();
        assert!(bytes.starts_with(b"PLABCKPT1"));
        let back = Model::from_checkpoint_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.params, m.params);
        assert!(Model::from_checkpoint_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        assert!(Model::from_checkpoint_bytes(b"nope", Path::new("mem")).is_err());
    }

    #[test]
    fn tied_embeddings_have_no_head() {
        let mut c = tiny();
        c.tie_embeddings = true;
        let m = Model::<f32>::init(c).unwrap();
        assert!(m.params.get("lm_head.w").is_none());
    }
}

//! Per-neuron historical activity profiles.
//!
//! At every training step the output `A` and grad-out `G` of each tracked
//! matrix are standardized over the whole `batch x tokens x d_out` tensor,
//! reduced to one value per output unit, and summed into 64-bit
//! accumulators `HA` and `HG`.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array, Array3, ArrayView, ArrayView3, Dimension, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, EncodedFact, LossMask, Model, ModelConfig, NeuronId, TrackedMatrixKind};
use crate::model::{GradOutTrace, Trace};

const SIGMA_FLOOR: f64 = 1e-12;
const PROFILE_MAGIC: &[u8] = b"PLABPROF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenMode {
    /// Only each sequence's representative position (see [`representative_position`]).
    LastToken,
    /// Every non-PAD position.
    SumTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Magnitude {
    Absolute,
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionSettings {
    pub standardize: bool,
    pub token_mode: TokenMode,
    pub magnitude: Magnitude,
}

impl Default for ReductionSettings {
    fn default() -> Self {
        Self {
            standardize: true,
            token_mode: TokenMode::LastToken,
            magnitude: Magnitude::Absolute,
        }
    }
}

/// Position whose output predicts the final object token.
///
/// Surfaces end `<object> EOS`; the EOS position feeds no loss term, so its
/// grad-out is identically zero and cannot represent the fact.
pub fn representative_position(len: usize) -> usize {
    len.saturating_sub(3)
}

/// `(x - mean) / std` over every entry, population std; all zeros when the
/// std is below `1e-12`.
pub fn standardize<D: Dimension>(tensor: ArrayView<f64, D>) -> Array<f64, D> {
    let n = tensor.len();
    if n == 0 {
        return tensor.to_owned();
    }
    let mut sum = 0.0;
    for &x in tensor.iter() {
        sum += x;
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for &x in tensor.iter() {
        ss += (x - mean) * (x - mean);
    }
    let std = (ss / n as f64).sqrt();
    if std < SIGMA_FLOOR {
        return Array::zeros(tensor.raw_dim());
    }
    tensor.mapv(|x| (x - mean) / std)
}

/// Collapses `batch x tokens x d_out` to one value per output unit.
///
/// `lengths[b]` is the unpadded length of sequence `b`; `None` treats every
/// position as real and takes the final position as representative.
pub fn reduce(
    tensor: ArrayView3<f64>,
    lengths: Option<&[usize]>,
    token_mode: TokenMode,
    magnitude: Magnitude,
) -> Vec<f64> {
    let (bsz, t, d) = tensor.dim();
    let mag = |x: f64| match magnitude {
        Magnitude::Absolute => x.abs(),
        Magnitude::Signed => x,
    };
    let mut out = vec![0.0; d];
    for b in 0..bsz {
        let len = lengths.map_or(t, |l| l[b]).min(t);
        if len == 0 {
            continue;
        }
        match token_mode {
            TokenMode::LastToken => {
                let p = match lengths {
                    Some(_) => representative_position(len),
                    None => t - 1,
                };
                for (i, o) in out.iter_mut().enumerate() {
                    *o += mag(tensor[[b, p, i]]);
                }
            }
            TokenMode::SumTokens => {
                for p in 0..len {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += mag(tensor[[b, p, i]]);
                    }
                }
            }
        }
    }
    out
}

fn to_f64<F: NdFloat>(v: ArrayView3<F>) -> Array3<f64> {
    v.mapv(|x| x.to_f64().expect("float to f64"))
}

/// Standardize (if enabled) then reduce.
pub fn reduce_tensor<F: NdFloat>(
    tensor: ArrayView3<F>,
    lengths: &[usize],
    settings: &ReductionSettings,
) -> Vec<f64> {
    let x = to_f64(tensor);
    let x = if settings.standardize {
        standardize(x.view())
    } else {
        x
    };
    reduce(
        x.view(),
        Some(lengths),
        settings.token_mode,
        settings.magnitude,
    )
}

/// The tensors of one training step for every `(layer, kind)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCapture {
    pub step: u64,
    pub lengths: Vec<usize>,
    /// `[layer][kind]` activation tensors.
    pub activations: Vec<Vec<Array3<f64>>>,
    /// `[layer][kind]` grad-out tensors.
    pub grad_outs: Vec<Vec<Array3<f64>>>,
}

impl StepCapture {
    pub fn from_traces<F: NdFloat>(step: u64, trace: &Trace<F>, grads: &GradOutTrace<F>) -> Self {
        let per_layer = |f: &dyn Fn(usize, TrackedMatrixKind) -> Array3<f64>| {
            (0..trace.n_layers())
                .map(|l| TrackedMatrixKind::ALL.iter().map(|&k| f(l, k)).collect())
                .collect()
        };
        Self {
            step,
            lengths: trace.lengths().to_vec(),
            activations: per_layer(&|l, k| to_f64(trace.activation(l, k))),
            grad_outs: per_layer(&|l, k| to_f64(grads.grad_out(l, k))),
        }
    }
}

/// Shape of the neuron space: per-kind widths and layer count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronManifest {
    pub n_layers: usize,
    /// Output widths in [`TrackedMatrixKind::ALL`] order.
    pub widths: [usize; 4],
}

impl NeuronManifest {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            n_layers: config.n_layers,
            widths: TrackedMatrixKind::ALL.map(|k| config.out_dim(k)),
        }
    }

    pub fn per_block(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.n_layers * self.per_block()
    }

    pub fn offset(&self, layer: usize, kind: TrackedMatrixKind) -> usize {
        layer * self.per_block() + self.widths[..kind.position()].iter().sum::<usize>()
    }

    pub fn index_of(&self, n: NeuronId) -> Result<usize> {
        if n.layer >= self.n_layers || n.index >= self.widths[n.kind.position()] {
            return Err(Error::InvalidNeuron(n.to_string()));
        }
        Ok(self.offset(n.layer, n.kind) + n.index)
    }

    pub fn neuron_at(&self, mut i: usize) -> NeuronId {
        let layer = i / self.per_block();
        i %= self.per_block();
        for kind in TrackedMatrixKind::ALL {
            let w = self.widths[kind.position()];
            if i < w {
                return NeuronId {
                    layer,
                    kind,
                    index: i,
                };
            }
            i -= w;
        }
        unreachable!("index within block")
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.total()).map(|i| self.neuron_at(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalProfile {
    pub settings: ReductionSettings,
    pub manifest: NeuronManifest,
    pub model_fingerprint: String,
    pub steps_seen: u64,
    /// Cumulative activation measure per neuron, canonical order.
    pub ha: Vec<f64>,
    /// Cumulative grad-out measure per neuron, canonical order.
    pub hg: Vec<f64>,
}

impl HistoricalProfile {
    pub fn new(config: &ModelConfig, settings: ReductionSettings) -> Self {
        let manifest = NeuronManifest::of(config);
        let n = manifest.total();
        Self {
            settings,
            manifest,
            model_fingerprint: crate::fingerprint_json(config),
            steps_seen: 0,
            ha: vec![0.0; n],
            hg: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.hg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hg.is_empty()
    }

    pub fn hg_of(&self, n: NeuronId) -> Result<f64> {
        Ok(self.hg[self.manifest.index_of(n)?])
    }

    pub fn ha_of(&self, n: NeuronId) -> Result<f64> {
        Ok(self.ha[self.manifest.index_of(n)?])
    }

    /// Adds one step's reduced (and optionally standardized) tensors.
    pub fn accumulate(&mut self, capture: &StepCapture) -> Result<()> {
        self.check_capture_shape(capture.activations.len(), |l, k| {
            (
                capture.activations[l][k.position()].dim().2,
                capture.grad_outs[l][k.position()].dim().2,
            )
        })?;
        for l in 0..self.manifest.n_layers {
            for kind in TrackedMatrixKind::ALL {
                let a = &capture.activations[l][kind.position()];
                let g = &capture.grad_outs[l][kind.position()];
                self.add_reduced(l, kind, a.view(), g.view(), &capture.lengths);
            }
        }
        self.steps_seen += 1;
        Ok(())
    }

    /// [`HistoricalProfile::accumulate`] straight from the model's traces.
    pub fn accumulate_traces<F: NdFloat>(
        &mut self,
        trace: &Trace<F>,
        grads: &GradOutTrace<F>,
    ) -> Result<()> {
        self.check_capture_shape(trace.n_layers(), |l, k| {
            (trace.activation(l, k).dim().2, grads.grad_out(l, k).dim().2)
        })?;
        for l in 0..self.manifest.n_layers {
            for kind in TrackedMatrixKind::ALL {
                let a = to_f64(trace.activation(l, kind));
                let g = to_f64(grads.grad_out(l, kind));
                self.add_reduced(l, kind, a.view(), g.view(), trace.lengths());
            }
        }
        self.steps_seen += 1;
        Ok(())
    }

    fn check_capture_shape(
        &self,
        layers: usize,
        dims: impl Fn(usize, TrackedMatrixKind) -> (usize, usize),
    ) -> Result<()> {
        if layers != self.manifest.n_layers {
            return Err(Error::Shape(format!(
                "capture has {layers} layers, profile {}",
                self.manifest.n_layers
            )));
        }
        for l in 0..layers {
            for kind in TrackedMatrixKind::ALL {
                let w = self.manifest.widths[kind.position()];
                if dims(l, kind) != (w, w) {
                    return Err(Error::Shape(format!(
                        "capture width mismatch at h.{l}.{kind}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn add_reduced(
        &mut self,
        layer: usize,
        kind: TrackedMatrixKind,
        a: ArrayView3<f64>,
        g: ArrayView3<f64>,
        lengths: &[usize],
    ) {
        let off = self.manifest.offset(layer, kind);
        let s = &self.settings;
        let std_a;
        let std_g;
        let (a, g) = if s.standardize {
            std_a = standardize(a);
            std_g = standardize(g);
            (std_a.view(), std_g.view())
        } else {
            (a, g)
        };
        let ra = reduce(a, Some(lengths), s.token_mode, s.magnitude);
        let rg = reduce(g, Some(lengths), s.token_mode, s.magnitude);
        for (i, (x, y)) in ra.into_iter().zip(rg).enumerate() {
            self.ha[off + i] += x;
            self.hg[off + i] += y;
        }
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint_bytes(&self.to_bytes())
    }

    /// `PLABPROF1`, u64 LE header length, JSON header, LE f64 `HA` then `HG`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&ProfileHeader {
            settings: self.settings,
            model_fingerprint: self.model_fingerprint.clone(),
            steps_seen: self.steps_seen,
            manifest: self.manifest.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(PROFILE_MAGIC.len() + 8 + header.len() + 16 * self.len());
        out.extend_from_slice(PROFILE_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for x in self.ha.iter().chain(&self.hg) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |r: &str| Error::format(path, r);
        let rest = bytes
            .strip_prefix(PROFILE_MAGIC)
            .ok_or_else(|| corrupt("missing PLABPROF1 magic"))?;
        if rest.len() < 8 {
            return Err(corrupt("truncated header length"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        let header: ProfileHeader = serde_json::from_slice(
            rest.get(..hlen)
                .ok_or_else(|| corrupt("truncated header"))?,
        )
        .map_err(|e| corrupt(&e.to_string()))?;
        let n = header.manifest.total();
        let payload = &rest[hlen..];
        if payload.len() != 16 * n {
            return Err(corrupt(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                16 * n
            )));
        }
        let vals: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            settings: header.settings,
            manifest: header.manifest,
            model_fingerprint: header.model_fingerprint,
            steps_seen: header.steps_seen,
            ha: vals[..n].to_vec(),
            hg: vals[n..].to_vec(),
        })
    }

    /// One row per neuron: `neuron_id,layer,kind,index,HA,HG`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("neuron_id,layer,kind,index,HA,HG\n");
        for (i, n) in self.manifest.neurons().enumerate() {
            s.push_str(&format!(
                "{i},{},{},{},{:e},{:e}\n",
                n.layer,
                n.kind.name(),
                n.index,
                self.ha[i],
                self.hg[i]
            ));
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileHeader {
    settings: ReductionSettings,
    model_fingerprint: String,
    steps_seen: u64,
    manifest: NeuronManifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProfile {
    pub profile: HistoricalProfile,
    /// Set when the stored settings differ from the expected ones.
    pub settings_mismatch: bool,
}

pub fn save_profile(profile: &HistoricalProfile, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&profile.to_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_profile(path: &Path, expected: Option<&ReductionSettings>) -> Result<LoadedProfile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let profile = HistoricalProfile::from_bytes(&bytes, path)?;
    let settings_mismatch = expected.is_some_and(|s| *s != profile.settings);
    Ok(LoadedProfile {
        profile,
        settings_mismatch,
    })
}

/// Reduced grad-out magnitudes from one no-update backward sweep over facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub manifest: NeuronManifest,
    pub values: Vec<f64>,
}

impl GradientSnapshot {
    pub fn value_of(&self, n: NeuronId) -> Result<f64> {
        Ok(self.values[self.manifest.index_of(n)?])
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint_json(&self.values)
    }
}

/// Sums absolute reduced grad-outs over `facts` in consecutive batches of
/// `batch_size`. The model is only read.
pub fn snapshot_gradients(
    model: &Model<f32>,
    facts: &[EncodedFact],
    settings: &ReductionSettings,
    batch_size: usize,
    loss_mask: LossMask,
) -> Result<GradientSnapshot> {
    let s = ReductionSettings {
        magnitude: Magnitude::Absolute,
        ..*settings
    };
    snapshot_gradients_with(model, facts, &s, batch_size, loss_mask)
}

/// As [`snapshot_gradients`], honoring `settings.magnitude`.
pub fn snapshot_gradients_with(
    model: &Model<f32>,
    facts: &[EncodedFact],
    settings: &ReductionSettings,
    batch_size: usize,
    loss_mask: LossMask,
) -> Result<GradientSnapshot> {
    if facts.is_empty() {
        return Err(Error::Empty("gradient snapshot over no facts"));
    }
    let manifest = NeuronManifest::of(&model.config);
    let mut values = vec![0.0; manifest.total()];
    for chunk in facts.chunks(batch_size.max(1)) {
        let seqs: Vec<Vec<u32>> = chunk.iter().map(|f| f.tokens.clone()).collect();
        let obj: Vec<usize> = chunk.iter().map(|f| f.object_len).collect();
        let batch = Batch::from_sequences(&seqs);
        let sup = batch.supervision(loss_mask, &obj);
        let (logits, trace) = model.forward(&batch)?;
        let (_, grad_outs) = model.backward(&trace, &logits, &sup, 1.0)?;
        for l in 0..manifest.n_layers {
            for kind in TrackedMatrixKind::ALL {
                let r = reduce_tensor(grad_outs.grad_out(l, kind), &batch.lengths, settings);
                let off = manifest.offset(l, kind);
                for (i, x) in r.into_iter().enumerate() {
                    values[off + i] += x;
                }
            }
        }
    }
    Ok(GradientSnapshot { manifest, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, arr3};

    #[test]
    fn standardize_worked_example() {
        let out = standardize(arr2(&[[1.0, 3.0], [5.0, 7.0]]).view());
        let expect = [[-1.3416, -0.4472], [0.4472, 1.3416]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((out[[i, j]] - expect[i][j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn constant_tensor_standardizes_to_zero() {
        assert_eq!(
            standardize(arr2(&[[2.0, 2.0], [2.0, 2.0]]).view()),
            arr2(&[[0.0, 0.0], [0.0, 0.0]])
        );
    }

    #[test]
    fn reduce_worked_examples() {
        let t = arr3(&[[[1.0, -2.0], [3.0, -4.0]]]);
        assert_eq!(
            reduce(t.view(), None, TokenMode::SumTokens, Magnitude::Absolute),
            vec![4.0, 6.0]
        );
        assert_eq!(
            reduce(t.view(), None, TokenMode::LastToken, Magnitude::Absolute),
            vec![3.0, 4.0]
        );
        assert_eq!(
            reduce(t.view(), None, TokenMode::SumTokens, Magnitude::Signed),
            vec![4.0, -6.0]
        );
    }

    #[test]
    fn reduce_skips_padding() {
        // Second sequence has length 1: only its first position counts.
        let t = arr3(&[[[1.0], [2.0]], [[5.0], [100.0]]]);
        assert_eq!(
            reduce(
                t.view(),
                Some(&[2, 1]),
                TokenMode::SumTokens,
                Magnitude::Signed
            ),
            vec![8.0]
        );
    }

    fn capture_of(vals: [[f64; 2]; 1]) -> StepCapture {
        // One layer where only c_attn grad-outs are non-zero, width 2.
        let g = Array3::from_shape_vec((1, 1, 2), vals[0].to_vec()).unwrap();
        let zeros = Array3::zeros((1, 1, 2));
        StepCapture {
            step: 0,
            lengths: vec![1],
            activations: vec![vec![zeros.clone(); 4]],
            grad_outs: vec![vec![g, zeros.clone(), zeros.clone(), zeros]],
        }
    }

    fn narrow_profile() -> HistoricalProfile {
        HistoricalProfile {
            settings: ReductionSettings {
                standardize: false,
                ..ReductionSettings::default()
            },
            manifest: NeuronManifest {
                n_layers: 1,
                widths: [2; 4],
            },
            model_fingerprint: String::new(),
            steps_seen: 0,
            ha: vec![0.0; 8],
            hg: vec![0.0; 8],
        }
    }

    #[test]
    fn accumulation_is_additive() {
        let mut p = narrow_profile();
        p.accumulate(&capture_of([[1.0, 2.0]])).unwrap();
        p.accumulate(&capture_of([[3.0, -1.0]])).unwrap();
        assert_eq!(&p.hg[..2], &[4.0, 3.0]);
        assert_eq!(p.steps_seen, 2);
    }

    #[test]
    fn zero_capture_only_counts_the_step() {
        let mut p = narrow_profile();
        p.settings.standardize = true;
        p.accumulate(&capture_of([[1.0, 2.0]])).unwrap();
        let before = p.clone();
        p.accumulate(&capture_of([[0.0, 0.0]])).unwrap();
        assert_eq!(p.hg, before.hg);
        assert_eq!(p.ha, before.ha);
        assert_eq!(p.steps_seen, 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = narrow_profile();
        let mut c = capture_of([[1.0, 2.0]]);
        c.grad_outs[0][1] = Array3::zeros((1, 1, 3));
        assert!(matches!(p.accumulate(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn manifest_round_trips_indices() {
        let m = NeuronManifest::of(&ModelConfig::new(2, 16, 2, 32, 11, 8, 0));
        for (i, n) in m.neurons().enumerate() {
            assert_eq!(m.index_of(n).unwrap(), i);
        }
    }

    #[test]
    fn profile_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.prof");
        let mut p = narrow_profile();
        p.accumulate(&capture_of([[0.1, 1.0 / 3.0]])).unwrap();
        save_profile(&p, &path).unwrap();
        let loaded = load_profile(&path, Some(&p.settings)).unwrap();
        assert_eq!(loaded.profile, p);
        assert!(!loaded.settings_mismatch);
        let other = ReductionSettings {
            token_mode: TokenMode::SumTokens,
            ..p.settings
        };
        assert!(load_profile(&path, Some(&other)).unwrap().settings_mismatch);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_profile(&path, None),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn csv_has_a_row_per_neuron() {
        let p = narrow_profile();
        assert_eq!(p.to_csv().lines().count(), 1 + 8);
    }
}

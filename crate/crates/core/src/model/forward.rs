use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3, Axis, NdFloat, Zip};

use super::{cast, Gradients, Model, ParamStore, Slot, TrackedMatrixKind, WPE, WTE};
use crate::corpus::PAD_ID;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Right-padded token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Array2<u32>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Array2::from_elem((seqs.len(), t), PAD_ID);
        for (b, s) in seqs.iter().enumerate() {
            for (i, &tok) in s.iter().enumerate() {
                tokens[[b, i]] = tok;
            }
        }
        Self {
            tokens,
            lengths: seqs.iter().map(Vec::len).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.ncols()
    }

    /// Index of the last non-PAD position of sequence `b`.
    pub fn last_position(&self, b: usize) -> usize {
        self.lengths[b].saturating_sub(1)
    }

    /// Next-token targets and the supervision mask for `mode`.
    ///
    /// `object_lens[b]` is the object span of sequence `b`, which ends just
    /// before its final EOS; it is only read in [`LossMask::ObjectOnly`] mode.
    pub fn supervision(&self, mode: LossMask, object_lens: &[usize]) -> Supervision {
        let (bsz, t) = self.tokens.dim();
        let mut targets = Array2::from_elem((bsz, t), PAD_ID);
        let mut mask = Array2::from_elem((bsz, t), false);
        for b in 0..bsz {
            let len = self.lengths[b];
            for p in 0..len.saturating_sub(1) {
                targets[[b, p]] = self.tokens[[b, p + 1]];
                mask[[b, p]] = match mode {
                    LossMask::AllTokens => true,
                    LossMask::ObjectOnly => {
                        let obj = object_lens.get(b).copied().unwrap_or(0);
                        // Positions predicting the object tokens.
                        p + 2 >= len - obj && p + 2 < len
                    }
                };
            }
        }
        Supervision { targets, mask }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum LossMask {
    /// Every non-PAD next-token position.
    #[default]
    AllTokens,
    /// Only positions whose target is an object token.
    ObjectOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    pub targets: Array2<u32>,
    pub mask: Array2<bool>,
}

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    h1: Array2<F>,
    qkv: Array2<F>,
    /// Row-major `[b][head]` attention probabilities, each `T x T`.
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    aproj: Array2<F>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    pre: Array2<F>,
    fc: Array2<F>,
    mproj: Array2<F>,
}

/// Everything the backward pass needs, plus the tracked activations.
pub struct Trace<F> {
    batch: usize,
    seq: usize,
    tokens: Array2<u32>,
    lengths: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    lnf: LnCache<F>,
    hf: Array2<F>,
}

impl<F: NdFloat> Trace<F> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Output of a tracked matrix, `batch x tokens x d_out`.
    pub fn activation(&self, layer: usize, kind: TrackedMatrixKind) -> ArrayView3<'_, F> {
        let b = &self.blocks[layer];
        let a = match kind {
            TrackedMatrixKind::AttnCAttn => &b.qkv,
            TrackedMatrixKind::AttnCProj => &b.aproj,
            TrackedMatrixKind::MlpCFc => &b.fc,
            TrackedMatrixKind::MlpCProj => &b.mproj,
        };
        a.view()
            .into_shape_with_order((self.batch, self.seq, a.ncols()))
            .expect("rows are batch-major")
    }
}

/// Gradient of the loss with respect to each tracked matrix output.
pub struct GradOutTrace<F> {
    batch: usize,
    seq: usize,
    lengths: Vec<usize>,
    blocks: Vec<[Array2<F>; 4]>,
}

impl<F: NdFloat> GradOutTrace<F> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn grad_out(&self, layer: usize, kind: TrackedMatrixKind) -> ArrayView3<'_, F> {
        let g = &self.blocks[layer][kind.position()];
        g.view()
            .into_shape_with_order((self.batch, self.seq, g.ncols()))
            .expect("rows are batch-major")
    }
}

fn layer_norm<F: NdFloat>(
    x: &Array2<F>,
    g: ndarray::ArrayView1<F>,
    b: ndarray::ArrayView1<F>,
) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let inv_d = F::one() / cast::<F>(d as f64);
    let eps = cast::<F>(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() * inv_d;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[[i, j]] = h;
            y[[i, j]] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates gain/offset grads.
fn layer_norm_backward<F: NdFloat>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: ndarray::ArrayView1<F>,
    dg: &mut ndarray::ArrayViewMut1<F>,
    db: &mut ndarray::ArrayViewMut1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let inv_d = F::one() / cast::<F>(d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            let dxhat = dy[[i, j]] * g[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * cache.xhat[[i, j]];
            dg[j] += dy[[i, j]] * cache.xhat[[i, j]];
            db[j] += dy[[i, j]];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            let dxhat = dy[[i, j]] * g[j];
            dx[[i, j]] = r * (dxhat - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu<F: NdFloat>(x: F) -> F {
    let c = cast::<F>((2.0 / std::f64::consts::PI).sqrt());
    let k = cast::<F>(0.044715);
    let half = cast::<F>(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: NdFloat>(x: F) -> F {
    let c = cast::<F>((2.0 / std::f64::consts::PI).sqrt());
    let k = cast::<F>(0.044715);
    let half = cast::<F>(0.5);
    let three = cast::<F>(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

/// `x W^T + b` for a `[d_out, d_in]` weight.
fn linear<F: NdFloat>(x: &Array2<F>, w: ArrayView2<F>, b: ndarray::ArrayView1<F>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    y += &b;
    y
}

/// Accumulates weight/bias grads of a linear layer and returns the input grad.
fn linear_backward<F: NdFloat>(
    dy: &Array2<F>,
    x: &Array2<F>,
    w: ArrayView2<F>,
    grads: &mut ParamStore<F>,
    w_idx: usize,
    b_idx: usize,
) -> Array2<F> {
    {
        let mut gw = grads.mat_mut(w_idx);
        gw += &dy.t().dot(x);
    }
    {
        let mut gb = grads.vec_mut(b_idx);
        gb += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w)
}

impl<F: NdFloat> Model<F> {
    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        if batch.seq_len() > c.max_seq {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_seq {}",
                batch.seq_len(),
                c.max_seq
            )));
        }
        if batch.batch_size() == 0 || batch.seq_len() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} >= vocab_size {}",
                c.vocab_size
            )));
        }
        Ok(())
    }

    /// Causal forward pass. Logits are `(batch * tokens) x vocab`, batch-major.
    pub fn forward(&self, batch: &Batch) -> Result<(Array2<F>, Trace<F>)> {
        self.check_batch(batch)?;
        let c = &self.config;
        let p = &self.params;
        let (bsz, t) = batch.tokens.dim();
        let d = c.d_model;
        let wte = p.mat(WTE);
        let wpe = p.mat(WPE);
        let mut x = Array2::<F>::zeros((bsz * t, d));
        for b in 0..bsz {
            for i in 0..t {
                let tok = batch.tokens[[b, i]] as usize;
                let mut row = x.row_mut(b * t + i);
                row.assign(&wte.row(tok));
                row += &wpe.row(i);
            }
        }

        let h = c.n_heads;
        let (dk, dv) = (c.d_key, c.d_value);
        let scale = F::one() / cast::<F>((dk as f64).sqrt());
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let idx = |s| ParamStore::<F>::block_index(l, s);
            let (h1, ln1) = layer_norm(&x, p.vec(idx(Slot::Ln1G)), p.vec(idx(Slot::Ln1B)));
            let qkv = linear(&h1, p.mat(idx(Slot::AttnW)), p.vec(idx(Slot::AttnB)));
            let mut ctx = Array2::<F>::zeros((bsz * t, h * dv));
            let mut probs = Vec::with_capacity(bsz * h);
            for b in 0..bsz {
                let r = b * t..(b + 1) * t;
                for hd in 0..h {
                    let q = qkv.slice(s![r.clone(), hd * dk..(hd + 1) * dk]);
                    let k = qkv.slice(s![r.clone(), h * dk + hd * dk..h * dk + (hd + 1) * dk]);
                    let v = qkv.slice(s![
                        r.clone(),
                        2 * h * dk + hd * dv..2 * h * dk + (hd + 1) * dv
                    ]);
                    let mut att = q.dot(&k.t());
                    for i in 0..t {
                        let mut row = att.row_mut(i);
                        let mut max = F::neg_infinity();
                        for j in 0..=i {
                            row[j] *= scale;
                            max = max.max(row[j]);
                        }
                        let mut sum = F::zero();
                        for j in 0..=i {
                            row[j] = (row[j] - max).exp();
                            sum += row[j];
                        }
                        for j in 0..t {
                            row[j] = if j <= i { row[j] / sum } else { F::zero() };
                        }
                    }
                    ctx.slice_mut(s![r.clone(), hd * dv..(hd + 1) * dv])
                        .assign(&att.dot(&v));
                    probs.push(att);
                }
            }
            let aproj = linear(&ctx, p.mat(idx(Slot::AprojW)), p.vec(idx(Slot::AprojB)));
            x += &aproj;
            let (h2, ln2) = layer_norm(&x, p.vec(idx(Slot::Ln2G)), p.vec(idx(Slot::Ln2B)));
            let pre = linear(&h2, p.mat(idx(Slot::FcW)), p.vec(idx(Slot::FcB)));
            let fc = pre.mapv(gelu);
            let mproj = linear(&fc, p.mat(idx(Slot::MprojW)), p.vec(idx(Slot::MprojB)));
            x += &mproj;
            blocks.push(BlockCache {
                ln1,
                h1,
                qkv,
                probs,
                ctx,
                aproj,
                ln2,
                h2,
                pre,
                fc,
                mproj,
            });
        }
        let lnf_idx = p.lnf_index(c);
        let (hf, lnf) = layer_norm(&x, p.vec(lnf_idx), p.vec(lnf_idx + 1));
        let logits = hf.dot(&p.mat(p.head_index(c)).t());
        Ok((
            logits,
            Trace {
                batch: bsz,
                seq: t,
                tokens: batch.tokens.clone(),
                lengths: batch.lengths.clone(),
                blocks,
                lnf,
                hf,
            },
        ))
    }

    /// Gradients of `loss_scale * loss` for every parameter, plus grad-outs of
    /// the tracked matrices.
    pub fn backward(
        &self,
        trace: &Trace<F>,
        logits: &Array2<F>,
        sup: &Supervision,
        loss_scale: F,
    ) -> Result<(Gradients<F>, GradOutTrace<F>)> {
        let c = &self.config;
        let p = &self.params;
        let (bsz, t) = (trace.batch, trace.seq);
        if trace.blocks.len() != c.n_layers
            || logits.dim() != (bsz * t, c.vocab_size)
            || sup.targets.dim() != (bsz, t)
            || sup.mask.dim() != (bsz, t)
        {
            return Err(Error::Shape(
                "trace, logits and supervision disagree (stale trace?)".into(),
            ));
        }
        let dlogits = loss_grad(logits, sup, loss_scale)?;
        let mut grads = p.zeros_like();

        // Head.
        let head_idx = p.head_index(c);
        {
            let mut gh = grads.mat_mut(head_idx);
            gh += &dlogits.t().dot(&trace.hf);
        }
        let dhf = dlogits.dot(&p.mat(head_idx));
        let lnf_idx = p.lnf_index(c);
        let mut dx = {
            let (gslice, rest) = grads.tensors.split_at_mut(lnf_idx + 1);
            let mut dg = ndarray::ArrayViewMut1::from(&mut gslice[lnf_idx].data[..]);
            let mut db = ndarray::ArrayViewMut1::from(&mut rest[0].data[..]);
            layer_norm_backward(&dhf, &trace.lnf, p.vec(lnf_idx), &mut dg, &mut db)
        };

        let h = c.n_heads;
        let (dk, dv) = (c.d_key, c.d_value);
        let scale = F::one() / cast::<F>((dk as f64).sqrt());
        let mut grad_outs: Vec<[Array2<F>; 4]> = Vec::with_capacity(c.n_layers);
        for l in (0..c.n_layers).rev() {
            let idx = |s| ParamStore::<F>::block_index(l, s);
            let bc = &trace.blocks[l];

            // MLP.
            let dmproj = dx.clone();
            let dfc = linear_backward(
                &dmproj,
                &bc.fc,
                p.mat(idx(Slot::MprojW)),
                &mut grads,
                idx(Slot::MprojW),
                idx(Slot::MprojB),
            );
            let mut dpre = dfc.clone();
            Zip::from(&mut dpre)
                .and(&bc.pre)
                .for_each(|g, &x| *g *= gelu_grad(x));
            let dh2 = linear_backward(
                &dpre,
                &bc.h2,
                p.mat(idx(Slot::FcW)),
                &mut grads,
                idx(Slot::FcW),
                idx(Slot::FcB),
            );
            let dln2 = {
                let (a, b) = grads.tensors.split_at_mut(idx(Slot::Ln2B));
                let mut dg = ndarray::ArrayViewMut1::from(&mut a[idx(Slot::Ln2G)].data[..]);
                let mut db = ndarray::ArrayViewMut1::from(&mut b[0].data[..]);
                layer_norm_backward(&dh2, &bc.ln2, p.vec(idx(Slot::Ln2G)), &mut dg, &mut db)
            };
            dx += &dln2;

            // Attention.
            let daproj = dx.clone();
            let dctx = linear_backward(
                &daproj,
                &bc.ctx,
                p.mat(idx(Slot::AprojW)),
                &mut grads,
                idx(Slot::AprojW),
                idx(Slot::AprojB),
            );
            let mut dqkv = Array2::<F>::zeros(bc.qkv.dim());
            for b in 0..bsz {
                let r = b * t..(b + 1) * t;
                for hd in 0..h {
                    let qs = hd * dk..(hd + 1) * dk;
                    let ks = h * dk + hd * dk..h * dk + (hd + 1) * dk;
                    let vs = 2 * h * dk + hd * dv..2 * h * dk + (hd + 1) * dv;
                    let q = bc.qkv.slice(s![r.clone(), qs.clone()]);
                    let k = bc.qkv.slice(s![r.clone(), ks.clone()]);
                    let v = bc.qkv.slice(s![r.clone(), vs.clone()]);
                    let att = &bc.probs[b * h + hd];
                    let dctx_h = dctx.slice(s![r.clone(), hd * dv..(hd + 1) * dv]);
                    let datt = dctx_h.dot(&v.t());
                    dqkv.slice_mut(s![r.clone(), vs])
                        .assign(&att.t().dot(&dctx_h));
                    let mut dscores = Array2::<F>::zeros((t, t));
                    for i in 0..t {
                        let mut dot = F::zero();
                        for j in 0..=i {
                            dot += datt[[i, j]] * att[[i, j]];
                        }
                        for j in 0..=i {
                            dscores[[i, j]] = att[[i, j]] * (datt[[i, j]] - dot) * scale;
                        }
                    }
                    dqkv.slice_mut(s![r.clone(), qs]).assign(&dscores.dot(&k));
                    dqkv.slice_mut(s![r.clone(), ks])
                        .assign(&dscores.t().dot(&q));
                }
            }
            let dh1 = linear_backward(
                &dqkv,
                &bc.h1,
                p.mat(idx(Slot::AttnW)),
                &mut grads,
                idx(Slot::AttnW),
                idx(Slot::AttnB),
            );
            let dln1 = {
                let (a, b) = grads.tensors.split_at_mut(idx(Slot::Ln1B));
                let mut dg = ndarray::ArrayViewMut1::from(&mut a[idx(Slot::Ln1G)].data[..]);
                let mut db = ndarray::ArrayViewMut1::from(&mut b[0].data[..]);
                layer_norm_backward(&dh1, &bc.ln1, p.vec(idx(Slot::Ln1G)), &mut dg, &mut db)
            };
            dx += &dln1;
            grad_outs.push([dqkv, daproj, dfc, dmproj]);
        }
        grad_outs.reverse();

        // Embeddings.
        {
            let mut gte = grads.mat_mut(WTE);
            for b in 0..bsz {
                for i in 0..t {
                    let tok = trace.tokens[[b, i]] as usize;
                    let mut row = gte.row_mut(tok);
                    row += &dx.row(b * t + i);
                }
            }
        }
        {
            let mut gpe = grads.mat_mut(WPE);
            for b in 0..bsz {
                for i in 0..t {
                    let mut row = gpe.row_mut(i);
                    row += &dx.row(b * t + i);
                }
            }
        }
        Ok((
            grads,
            GradOutTrace {
                batch: bsz,
                seq: t,
                lengths: trace.lengths.clone(),
                blocks: grad_outs,
            },
        ))
    }

    /// Forward, loss and backward in one go.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        sup: &Supervision,
    ) -> Result<(F, Gradients<F>, Trace<F>, GradOutTrace<F>)> {
        let (logits, trace) = self.forward(batch)?;
        let l = loss(&logits, sup)?;
        let (g, go) = self.backward(&trace, &logits, sup, F::one())?;
        Ok((l, g, trace, go))
    }

    /// Cross-entropy loss of the current parameters on a batch.
    pub fn batch_loss(&self, batch: &Batch, sup: &Supervision) -> Result<F> {
        let (logits, _) = self.forward(batch)?;
        loss(&logits, sup)
    }
}

fn masked_rows(sup: &Supervision) -> usize {
    sup.mask.iter().filter(|&&m| m).count()
}

/// Mean next-token negative log-likelihood over masked positions.
pub fn loss<F: NdFloat>(logits: &Array2<F>, sup: &Supervision) -> Result<F> {
    let m = masked_rows(sup);
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let t = sup.targets.ncols();
    let mut total = F::zero();
    for ((b, i), &on) in sup.mask.indexed_iter() {
        if !on {
            continue;
        }
        let row = logits.row(b * t + i);
        let max = row.fold(F::neg_infinity(), |a, &v| a.max(v));
        let lse = row.fold(F::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        total += lse - row[sup.targets[[b, i]] as usize];
    }
    Ok(total / cast::<F>(m as f64))
}

fn loss_grad<F: NdFloat>(
    logits: &Array2<F>,
    sup: &Supervision,
    loss_scale: F,
) -> Result<Array2<F>> {
    let m = masked_rows(sup);
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let coef = loss_scale / cast::<F>(m as f64);
    let t = sup.targets.ncols();
    let mut d = Array2::zeros(logits.dim());
    for ((b, i), &on) in sup.mask.indexed_iter() {
        if !on {
            continue;
        }
        let r = b * t + i;
        let row = logits.row(r);
        let max = row.fold(F::neg_infinity(), |a, &v| a.max(v));
        let sum = row.fold(F::zero(), |a, &v| a + (v - max).exp());
        let mut drow = d.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            drow[j] = (v - max).exp() / sum * coef;
        }
        drow[sup.targets[[b, i]] as usize] -= coef;
    }
    Ok(d)
}

/// Softmax probabilities of every logits row.
pub fn softmax_rows<F: NdFloat>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> Model<f64> {
        Model::init(ModelConfig::new(2, 16, 2, 32, 11, 8, 5)).unwrap()
    }

    #[test]
    fn pad_only_sequence_gives_finite_logits() {
        let m = tiny_model();
        let (logits, _) = m.forward(&Batch::from_sequences(&[vec![0, 0, 0]])).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_rows_identical_logits() {
        let m = tiny_model();
        let seq = vec![1, 4, 5, 6, 2];
        let (logits, _) = m
            .forward(&Batch::from_sequences(&[seq.clone(), seq]))
            .unwrap();
        let t = 5;
        for i in 0..t {
            assert_eq!(logits.row(i), logits.row(t + i));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = tiny_model();
        let (logits, _) = m
            .forward(&Batch::from_sequences(&[vec![1, 3, 7, 2]]))
            .unwrap();
        for row in softmax_rows(&logits).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_masking() {
        let m = tiny_model();
        let (a, _) = m
            .forward(&Batch::from_sequences(&[vec![1, 3, 7, 2, 9]]))
            .unwrap();
        let (b, _) = m
            .forward(&Batch::from_sequences(&[vec![1, 3, 7, 8, 4]]))
            .unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let batch = Batch::from_sequences(&[vec![1, 3, 4, 2]]);
        let sup = batch.supervision(LossMask::AllTokens, &[1]);
        let logits = Array2::<f64>::zeros((4, 11));
        assert!((loss(&logits, &sup).unwrap() - (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let batch = Batch::from_sequences(&[vec![1, 3, 4, 2]]);
        let sup = batch.supervision(LossMask::AllTokens, &[1]);
        let mut logits = Array2::<f64>::zeros((4, 11));
        for (i, &tgt) in [3usize, 4, 2].iter().enumerate() {
            logits[[i, tgt]] = 50.0;
        }
        assert!(loss(&logits, &sup).unwrap() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let batch = Batch::from_sequences(&[vec![1]]);
        let sup = batch.supervision(LossMask::AllTokens, &[1]);
        assert!(matches!(
            loss(&Array2::<f64>::zeros((1, 11)), &sup),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn object_only_mask_marks_object_predictions() {
        // BOS a b OBJ1 OBJ2 EOS
        let batch = Batch::from_sequences(&[vec![1, 3, 4, 5, 6, 2]]);
        let sup = batch.supervision(LossMask::ObjectOnly, &[2]);
        let marked: Vec<usize> = (0..6).filter(|&i| sup.mask[[0, i]]).collect();
        assert_eq!(marked, vec![2, 3]);
        assert_eq!((sup.targets[[0, 2]], sup.targets[[0, 3]]), (5, 6));
    }

    #[test]
    fn loss_scale_is_linear() {
        let m = tiny_model();
        let batch = Batch::from_sequences(&[vec![1, 3, 7, 2], vec![1, 5, 2]]);
        let sup = batch.supervision(LossMask::AllTokens, &[1, 1]);
        let (logits, trace) = m.forward(&batch).unwrap();
        let (g1, _) = m.backward(&trace, &logits, &sup, 1.0).unwrap();
        let (g2, _) = m.backward(&trace, &logits, &sup, 2.0).unwrap();
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn saturated_correct_logits_give_no_signal() {
        let mut m = tiny_model();
        let batch = Batch::from_sequences(&[vec![1, 3, 7, 2]]);
        let (logits, _) = m.forward(&batch).unwrap();
        // Targets = current argmax, then sharpen the head until softmax saturates.
        let mut sup = batch.supervision(LossMask::AllTokens, &[1]);
        for i in 0..3 {
            sup.targets[[0, i]] = crate::model::argmax(logits.row(i)) as u32;
        }
        let head = m.params.head_index(&m.config);
        m.params.tensors[head]
            .data
            .iter_mut()
            .for_each(|w| *w *= 1e5);
        let (logits, trace) = m.forward(&batch).unwrap();
        let (g, _) = m.backward(&trace, &logits, &sup, 1.0).unwrap();
        assert!(g.l2_norm() < 1e-6, "norm {}", g.l2_norm());
    }

    #[test]
    fn trace_covers_every_tracked_kind() {
        let m = tiny_model();
        let batch = Batch::from_sequences(&[vec![1, 3, 7, 2], vec![1, 5, 2]]);
        let sup = batch.supervision(LossMask::AllTokens, &[1, 1]);
        let (_, _, trace, go) = m.loss_and_grads(&batch, &sup).unwrap();
        for l in 0..2 {
            for kind in TrackedMatrixKind::ALL {
                let d = m.config.out_dim(kind);
                assert_eq!(trace.activation(l, kind).dim(), (2, 4, d));
                assert_eq!(go.grad_out(l, kind).dim(), (2, 4, d));
            }
        }
    }

    #[test]
    fn oversized_inputs_rejected() {
        let m = tiny_model();
        assert!(m.forward(&Batch::from_sequences(&[vec![1; 9]])).is_err());
        assert!(m.forward(&Batch::from_sequences(&[vec![1, 11]])).is_err());
    }
}

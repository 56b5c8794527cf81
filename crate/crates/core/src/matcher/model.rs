//! Forward and backward passes of the matching network.
//!
//! Inside a pass every segment and the response are compacted to their valid
//! tokens, and only the valid segment slots are visited, so padding never
//! enters the arithmetic.

use super::params::{AttentiveParams, WordWeightParams};
use super::{EncodedContext, Fuse, MatchSide, MatcherConfig, MatcherParams, Pool};
use crate::error::{Error, Result};
use crate::numerics::{
    gru_sequence, gru_sequence_backward, layer_norm, layer_norm_backward, matmul, matmul_backward, max_pool,
    max_pool_backward, mean_pool, mean_pool_backward, relu, relu_backward, softmax, softmax_backward, Axis, GruCache,
    LayerNormCache, Parameter, Tensor, LAYER_NORM_EPS,
};

/// Probabilities are clamped here before taking logs.
pub const LOSS_CLAMP: f64 = 1e-12;

fn add_bias(t: &mut Tensor, b: &Tensor) {
    let cols = t.cols();
    for r in 0..t.rows() {
        for (x, &bv) in t.row_mut(r).iter_mut().zip(b.data()) {
            *x += bv;
        }
    }
    debug_assert_eq!(cols, b.len());
}

fn add_col_sums(grad: &mut Tensor, t: &Tensor) {
    for r in 0..t.rows() {
        for (g, &v) in grad.data_mut().iter_mut().zip(t.row(r)) {
            *g += v;
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    dst.add_assign(src).expect("gradient shapes agree by construction");
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn gather_rows(t: &Tensor, slot: usize, positions: &[usize]) -> Tensor {
    let (l, d) = (t.shape()[t.rank() - 2], t.cols());
    let base = slot * l;
    let data = positions
        .iter()
        .flat_map(|&p| t.row(base + p).iter().copied())
        .collect();
    Tensor::matrix(positions.len(), d, data).expect("non-empty by validation")
}

// ---------------------------------------------------------------------------
// Attentive module

#[derive(Debug, Clone)]
struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    vatt: Tensor,
    ln: LayerNormCache,
    normed: Tensor,
    pre: Tensor,
    hidden: Tensor,
    out: Tensor,
}

fn attentive_forward(
    p: &AttentiveParams,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: Option<&[bool]>,
) -> Result<AttentionCache> {
    let d = q.cols();
    if k.cols() != d || v.shape() != k.shape() {
        return Err(Error::Shape(format!(
            "attentive module: query {:?}, key {:?}, value {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let logits = matmul(q, &k.transpose()?)?.scale(scale);
    let attn = softmax(&logits, key_mask)?;
    let vatt = matmul(&attn, v)?;
    let (normed, ln) = layer_norm(&vatt, &p.ln_gain.value, &p.ln_bias.value, LAYER_NORM_EPS)?;
    let mut pre = matmul(&normed, &p.w1.value)?;
    add_bias(&mut pre, &p.b1.value);
    let hidden = relu(&pre);
    let mut out = matmul(&hidden, &p.w2.value)?;
    add_bias(&mut out, &p.b2.value);
    Ok(AttentionCache {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        attn,
        vatt,
        ln,
        normed,
        pre,
        hidden,
        out,
    })
}

/// Accumulates parameter gradients and returns `(dq, dk, dv)`.
fn attentive_backward(p: &mut AttentiveParams, c: &AttentionCache, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (dhidden, dw2) = matmul_backward(&c.hidden, &p.w2.value, dout)?;
    add_into(&mut p.w2.grad, &dw2);
    add_col_sums(&mut p.b2.grad, dout);
    let dpre = relu_backward(&c.pre, &dhidden)?;
    let (dnormed, dw1) = matmul_backward(&c.normed, &p.w1.value, &dpre)?;
    add_into(&mut p.w1.grad, &dw1);
    add_col_sums(&mut p.b1.grad, &dpre);
    let (dvatt, dgain, dbias) = layer_norm_backward(&c.ln, &p.ln_gain.value, &dnormed)?;
    add_into(&mut p.ln_gain.grad, &dgain);
    add_into(&mut p.ln_bias.grad, &dbias);
    debug_assert_eq!(c.vatt.shape(), dvatt.shape());
    let (dattn, dv) = matmul_backward(&c.attn, &c.v, &dvatt)?;
    let scale = 1.0 / (c.q.cols() as f64).sqrt();
    let dlogits = softmax_backward(&c.attn, &dattn)?.scale(scale);
    let kt = c.k.transpose()?;
    let (dq, dkt) = matmul_backward(&c.q, &kt, &dlogits)?;
    Ok((dq, dkt.transpose()?, dv))
}

/// `FFN(LayerNorm(softmax(Q·Kᵀ/√d)·V))` with a ReLU feed-forward layer and no residuals.
pub fn attentive_module(
    params: &AttentiveParams,
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    key_mask: Option<&[bool]>,
) -> Result<Tensor> {
    Ok(attentive_forward(params, query, key, value, key_mask)?.out)
}

/// Backward of [`attentive_module`], recomputing the forward pass.
pub fn attentive_module_backward(
    params: &mut AttentiveParams,
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    key_mask: Option<&[bool]>,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let cache = attentive_forward(params, query, key, value, key_mask)?;
    attentive_backward(params, &cache, dout)
}

// ---------------------------------------------------------------------------
// Word-level weights

#[derive(Debug, Clone)]
struct WordSegment {
    /// `tanh(M¹)` per channel, each `[ls, lr]`.
    maps: Vec<Tensor>,
    row_arg: Vec<usize>,
    col_arg: Vec<usize>,
    pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
struct WordForward {
    segments: Vec<WordSegment>,
    s1: Tensor,
}

fn word_forward(p: &WordWeightParams, segs: &[Tensor], resp: &Tensor, max_len: usize) -> Result<WordForward> {
    let (d, h) = (p.w.value.shape()[0], p.w.value.shape()[1]);
    if resp.cols() != d || p.w_pool.value.len() != 2 * max_len {
        return Err(Error::Parameter {
            name: p.w.name.clone(),
            message: format!(
                "shape {:?} does not fit inputs of width {}",
                p.w.value.shape(),
                resp.cols()
            ),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let rt = resp.transpose()?;
    let mut segments = Vec::with_capacity(segs.len());
    let mut logits = Vec::with_capacity(segs.len());
    for s in segs {
        let (ls, lr) = (s.rows(), resp.rows());
        let mut maps = Vec::with_capacity(h);
        let mut m = Tensor::zeros(&[ls, lr]);
        for ch in 0..h {
            let mut scaled = s.clone();
            for y in 0..ls {
                for (k, x) in scaled.row_mut(y).iter_mut().enumerate() {
                    *x *= p.w.value.data()[k * h + ch];
                }
            }
            let t = matmul(&scaled, &rt)?.map(f64::tanh);
            let vc = p.v.value.data()[ch] * scale;
            for (mv, tv) in m.data_mut().iter_mut().zip(t.data()) {
                *mv += vc * tv;
            }
            maps.push(t);
        }
        let (row_max, row_arg) = max_pool(&m, Axis::Cols, None)?;
        let (col_max, col_arg) = max_pool(&m, Axis::Rows, None)?;
        let mut pooled = vec![0.0; 2 * max_len];
        pooled[..ls].copy_from_slice(row_max.data());
        pooled[max_len..max_len + lr].copy_from_slice(col_max.data());
        logits.push(dot(&pooled, p.w_pool.value.data()) + p.b.value.data()[0]);
        segments.push(WordSegment {
            maps,
            row_arg,
            col_arg,
            pooled,
        });
    }
    let s1 = softmax(&Tensor::vector(logits)?, None)?;
    Ok(WordForward { segments, s1 })
}

fn word_backward(
    p: &mut WordWeightParams,
    f: &WordForward,
    segs: &[Tensor],
    resp: &Tensor,
    ds1: &[f64],
    dsegs: &mut [Tensor],
    dresp: &mut Tensor,
) -> Result<()> {
    let (d, h) = (p.w.value.shape()[0], p.w.value.shape()[1]);
    let max_len = p.w_pool.value.len() / 2;
    let scale = 1.0 / (d as f64).sqrt();
    let dlogits = softmax_backward(&f.s1, &Tensor::vector(ds1.to_vec())?)?;
    for (i, (ws, s)) in f.segments.iter().zip(segs).enumerate() {
        let g = dlogits.data()[i];
        let (ls, lr) = (s.rows(), resp.rows());
        p.b.grad.data_mut()[0] += g;
        for (dw, &x) in p.w_pool.grad.data_mut().iter_mut().zip(&ws.pooled) {
            *dw += g * x;
        }
        let wp = p.w_pool.value.data();
        let drow = Tensor::vector(wp[..ls].iter().map(|w| g * w).collect())?;
        let dcol = Tensor::vector(wp[max_len..max_len + lr].iter().map(|w| g * w).collect())?;
        let mut dm = max_pool_backward(&[ls, lr], Axis::Cols, &ws.row_arg, &drow)?;
        add_into(&mut dm, &max_pool_backward(&[ls, lr], Axis::Rows, &ws.col_arg, &dcol)?);
        for (ch, t) in ws.maps.iter().enumerate() {
            p.v.grad.data_mut()[ch] += dm.dot(t)? * scale;
            let vc = p.v.value.data()[ch] * scale;
            let dm1 = Tensor::new(
                vec![ls, lr],
                dm.data()
                    .iter()
                    .zip(t.data())
                    .map(|(g, t)| g * vc * (1.0 - t * t))
                    .collect(),
            )?;
            // M¹ = (S ⊙ w)·Rᵀ with w the channel's diagonal.
            let q = matmul(&dm1, resp)?;
            let mut scaled = s.clone();
            for y in 0..ls {
                for (k, x) in scaled.row_mut(y).iter_mut().enumerate() {
                    *x *= p.w.value.data()[k * h + ch];
                }
            }
            add_into(dresp, &matmul(&dm1.transpose()?, &scaled)?);
            for y in 0..ls {
                for k in 0..d {
                    let qv = q.data()[y * d + k];
                    p.w.grad.data_mut()[k * h + ch] += qv * s.data()[y * d + k];
                    dsegs[i].data_mut()[y * d + k] += qv * p.w.value.data()[k * h + ch];
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Segment-level weights

#[derive(Debug, Clone)]
struct SegmentForward {
    means: Vec<Vec<f64>>,
    resp_mean: Vec<f64>,
    s2: Vec<f64>,
}

fn segment_forward(segs: &[Tensor], resp: &Tensor) -> Result<SegmentForward> {
    let resp_mean = mean_pool(resp, Axis::Rows, None)?.into_data();
    let rn = norm(&resp_mean);
    let mut means = Vec::with_capacity(segs.len());
    let mut s2 = Vec::with_capacity(segs.len());
    for s in segs {
        let m = mean_pool(s, Axis::Rows, None)?.into_data();
        let sn = norm(&m);
        s2.push(if sn == 0.0 || rn == 0.0 {
            0.0
        } else {
            (dot(&m, &resp_mean) / (sn * rn)).clamp(-1.0, 1.0)
        });
        means.push(m);
    }
    Ok(SegmentForward { means, resp_mean, s2 })
}

fn segment_backward(f: &SegmentForward, ds2: &[f64], dsegs: &mut [Tensor], dresp: &mut Tensor) -> Result<()> {
    let r = &f.resp_mean;
    let rn = norm(r);
    let mut dr = vec![0.0; r.len()];
    for (i, m) in f.means.iter().enumerate() {
        let mn = norm(m);
        if mn == 0.0 || rn == 0.0 || ds2[i] == 0.0 {
            continue;
        }
        let cos = dot(m, r) / (mn * rn);
        let dm: Vec<f64> = (0..m.len())
            .map(|k| ds2[i] * (r[k] / (mn * rn) - cos * m[k] / (mn * mn)))
            .collect();
        for k in 0..r.len() {
            dr[k] += ds2[i] * (m[k] / (mn * rn) - cos * r[k] / (rn * rn));
        }
        let grad = mean_pool_backward(dsegs[i].shape(), Axis::Rows, None, &Tensor::vector(dm)?)?;
        add_into(&mut dsegs[i], &grad);
    }
    let grad = mean_pool_backward(dresp.shape(), Axis::Rows, None, &Tensor::vector(dr)?)?;
    add_into(dresp, &grad);
    Ok(())
}

/// Mixed segment weights; `None` means no weighting at all.
fn combine(config: &MatcherConfig, s1: Option<&[f64]>, s2: Option<&[f64]>) -> Option<Vec<f64>> {
    match (s1, s2) {
        (Some(a), Some(b)) => {
            let alpha = config.alpha;
            Some(a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect())
        }
        (Some(a), None) => Some(a.to_vec()),
        (None, Some(b)) => Some(b.to_vec()),
        (None, None) => None,
    }
}

// ---------------------------------------------------------------------------
// Dual cross-attention matching

#[derive(Debug, Clone)]
struct CrossSegment {
    seg_side: Option<(AttentionCache, Vec<usize>)>,
    resp_side: Option<(AttentionCache, Vec<usize>)>,
}

fn pool_rows(x: &Tensor, pool: Pool) -> Result<(Vec<f64>, Vec<usize>)> {
    match pool {
        Pool::Mean => Ok((mean_pool(x, Axis::Rows, None)?.into_data(), Vec::new())),
        Pool::Max => {
            let (v, arg) = max_pool(x, Axis::Rows, None)?;
            Ok((v.into_data(), arg))
        }
    }
}

fn pool_rows_backward(shape: &[usize], pool: Pool, arg: &[usize], dy: &[f64]) -> Result<Tensor> {
    let dy = Tensor::vector(dy.to_vec())?;
    match pool {
        Pool::Mean => mean_pool_backward(shape, Axis::Rows, None, &dy),
        Pool::Max => max_pool_backward(shape, Axis::Rows, arg, &dy),
    }
}

fn cross_forward(
    p: &AttentiveParams,
    config: &MatcherConfig,
    weighted: &[Tensor],
    resp: &Tensor,
) -> Result<(Vec<CrossSegment>, Tensor)> {
    let d = resp.cols();
    let width = config.match_width();
    let mut rows = Vec::with_capacity(weighted.len() * width);
    let mut caches = Vec::with_capacity(weighted.len());
    for s in weighted {
        let seg_side = match config.match_side {
            MatchSide::Dual | MatchSide::SegmentOnly => {
                let c = attentive_forward(p, s, resp, resp, None)?;
                let pooled = pool_rows(&c.out, config.match_pool)?;
                Some((c, pooled))
            }
            MatchSide::ResponseOnly => None,
        };
        let resp_side = match config.match_side {
            MatchSide::Dual | MatchSide::ResponseOnly => {
                let c = attentive_forward(p, resp, s, s, None)?;
                let pooled = pool_rows(&c.out, config.match_pool)?;
                Some((c, pooled))
            }
            MatchSide::SegmentOnly => None,
        };
        match (&seg_side, &resp_side, config.match_fuse) {
            (Some((_, (a, _))), Some((_, (b, _))), Fuse::Concat) => {
                rows.extend_from_slice(a);
                rows.extend_from_slice(b);
            }
            (Some((_, (a, _))), Some((_, (b, _))), Fuse::Sum) => rows.extend(a.iter().zip(b).map(|(x, y)| x + y)),
            (Some((_, (a, _))), None, _) | (None, Some((_, (a, _))), _) => rows.extend_from_slice(a),
            (None, None, _) => unreachable!("at least one side is matched"),
        }
        debug_assert_eq!(rows.len() % width, 0);
        caches.push(CrossSegment {
            seg_side: seg_side.map(|(c, (_, arg))| (c, arg)),
            resp_side: resp_side.map(|(c, (_, arg))| (c, arg)),
        });
    }
    debug_assert!(width == d || width == 2 * d);
    Ok((caches, Tensor::matrix(weighted.len(), width, rows)?))
}

fn cross_backward(
    p: &mut AttentiveParams,
    config: &MatcherConfig,
    caches: &[CrossSegment],
    dcross: &Tensor,
    dweighted: &mut [Tensor],
    dresp: &mut Tensor,
) -> Result<()> {
    let d = dresp.cols();
    for (i, c) in caches.iter().enumerate() {
        let row = dcross.row(i);
        let (dseg_side, dresp_side): (&[f64], &[f64]) = match (config.match_side, config.match_fuse) {
            (MatchSide::Dual, Fuse::Concat) => (&row[..d], &row[d..]),
            _ => (row, row),
        };
        if let Some((cache, arg)) = &c.seg_side {
            let dout = pool_rows_backward(cache.out.shape(), config.match_pool, arg, dseg_side)?;
            let (dq, dk, dv) = attentive_backward(p, cache, &dout)?;
            add_into(&mut dweighted[i], &dq);
            add_into(dresp, &dk);
            add_into(dresp, &dv);
        }
        if let Some((cache, arg)) = &c.resp_side {
            let dout = pool_rows_backward(cache.out.shape(), config.match_pool, arg, dresp_side)?;
            let (dq, dk, dv) = attentive_backward(p, cache, &dout)?;
            add_into(dresp, &dq);
            add_into(&mut dweighted[i], &dk);
            add_into(&mut dweighted[i], &dv);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Debug, Clone)]
struct AggregateForward {
    gru: Option<(GruCache, Vec<f64>)>,
    last: Option<Vec<f64>>,
    x: Vec<f64>,
    logit: f64,
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (i, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w.data()[i * cols..(i + 1) * cols]) {
            *o += xv * wv;
        }
    }
    out
}

fn require<'a>(p: &'a Option<Parameter>, name: &str) -> Result<&'a Parameter> {
    p.as_ref().ok_or_else(|| Error::Parameter {
        name: name.into(),
        message: "required by the config but missing".into(),
    })
}

fn aggregate_forward(params: &MatcherParams, config: &MatcherConfig, cross: &Tensor) -> Result<AggregateForward> {
    let n = cross.rows();
    let gru = if config.use_multi_turn_match {
        let g = params.gru.as_ref().ok_or_else(|| Error::Parameter {
            name: "gru".into(),
            message: "required by the config but missing".into(),
        })?;
        let (h, cache) = gru_sequence(g, cross, None)?;
        Some((cache, h))
    } else {
        None
    };
    let last = if config.use_last_segment_match {
        let w3 = require(&params.w3, "last.w3")?;
        let b3 = require(&params.b3, "last.b3")?;
        if w3.value.shape() != [cross.cols(), cross.cols()] {
            return Err(Error::Parameter {
                name: w3.name.clone(),
                message: format!("shape {:?} for match width {}", w3.value.shape(), cross.cols()),
            });
        }
        let mut c = vec_mat(cross.row(n - 1), &w3.value);
        c.iter_mut().zip(b3.value.data()).for_each(|(x, b)| *x += b);
        Some(c)
    } else {
        None
    };
    let x = match (&gru, &last, config.aggregate_fuse) {
        (Some((_, h)), Some(c), Fuse::Concat) => [h.as_slice(), c.as_slice()].concat(),
        (Some((_, h)), Some(c), Fuse::Sum) => h.iter().zip(c).map(|(a, b)| a + b).collect(),
        (Some((_, h)), None, _) => h.clone(),
        (None, Some(c), _) => c.clone(),
        (None, None, _) => unreachable!("validated config"),
    };
    if x.len() != params.w4.value.len() {
        return Err(Error::Parameter {
            name: params.w4.name.clone(),
            message: format!("length {} for an aggregate of width {}", params.w4.value.len(), x.len()),
        });
    }
    let logit = dot(&x, params.w4.value.data()) + params.b4.value.data()[0];
    Ok(AggregateForward { gru, last, x, logit })
}

fn aggregate_backward(
    params: &mut MatcherParams,
    config: &MatcherConfig,
    f: &AggregateForward,
    cross: &Tensor,
    dlogit: f64,
) -> Result<Tensor> {
    params.b4.grad.data_mut()[0] += dlogit;
    for (g, &x) in params.w4.grad.data_mut().iter_mut().zip(&f.x) {
        *g += dlogit * x;
    }
    let dx: Vec<f64> = params.w4.value.data().iter().map(|w| dlogit * w).collect();
    let w = cross.cols();
    let (dh, dc): (Option<&[f64]>, Option<&[f64]>) = match (f.gru.is_some(), f.last.is_some(), config.aggregate_fuse) {
        (true, true, Fuse::Concat) => (Some(&dx[..w]), Some(&dx[w..])),
        (true, true, Fuse::Sum) => (Some(&dx), Some(&dx)),
        (true, false, _) => (Some(&dx), None),
        (false, true, _) => (None, Some(&dx)),
        (false, false, _) => unreachable!("validated config"),
    };
    let mut dcross = Tensor::zeros(cross.shape());
    if let (Some(dh), Some((cache, _))) = (dh, &f.gru) {
        let g = params.gru.as_mut().expect("present in forward");
        dcross = gru_sequence_backward(g, cache, dh)?;
    }
    if let Some(dc) = dc {
        let n = cross.rows();
        let last = cross.row(n - 1).to_vec();
        let w3 = params.w3.as_mut().expect("present in forward");
        for (i, &xv) in last.iter().enumerate() {
            for (j, &g) in dc.iter().enumerate() {
                w3.grad.data_mut()[i * w + j] += xv * g;
            }
        }
        let b3 = params.b3.as_mut().expect("present in forward");
        b3.grad.data_mut().iter_mut().zip(dc).for_each(|(g, v)| *g += v);
        let w3 = params.w3.as_ref().expect("present in forward");
        for (i, d) in dcross.row_mut(n - 1).iter_mut().enumerate() {
            *d += dot(&w3.value.data()[i * w..(i + 1) * w], dc);
        }
    }
    Ok(dcross)
}

// ---------------------------------------------------------------------------
// Full pass

/// Everything the backward pass needs, plus the intermediate weights for inspection.
#[derive(Debug, Clone)]
pub struct Forward {
    seg_positions: Vec<Vec<usize>>,
    resp_positions: Vec<usize>,
    segs: Vec<Tensor>,
    resp: Tensor,
    word: Option<WordForward>,
    seg: Option<SegmentForward>,
    weights: Option<Vec<f64>>,
    cross_caches: Vec<CrossSegment>,
    cross: Tensor,
    aggregate: AggregateForward,
    pub logit: f64,
    pub score: f64,
}

impl Forward {
    /// Word-level weights over the valid segments.
    pub fn s1(&self) -> Option<&[f64]> {
        self.word.as_ref().map(|w| w.s1.data())
    }

    /// Segment-level weights over the valid segments.
    pub fn s2(&self) -> Option<&[f64]> {
        self.seg.as_ref().map(|s| s.s2.as_slice())
    }

    /// Combined weights; `None` when both weightings are off.
    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Per-segment matching vectors, one row per valid segment.
    pub fn cross(&self) -> &Tensor {
        &self.cross
    }

    /// Final GRU state, when the multi-turn path is on.
    pub fn gru_state(&self) -> Option<&[f64]> {
        self.aggregate.gru.as_ref().map(|(_, h)| h.as_slice())
    }
}

pub fn forward(params: &MatcherParams, config: &MatcherConfig, ctx: &EncodedContext) -> Result<Forward> {
    ctx.validate()?;
    if ctx.dim() != config.dim || ctx.max_len() != config.max_seg_len {
        return Err(Error::Shape(format!(
            "context encoded with d={}, L={}; config has d={}, L={}",
            ctx.dim(),
            ctx.max_len(),
            config.dim,
            config.max_seg_len
        )));
    }
    let n = ctx.n_valid();
    let seg_positions: Vec<Vec<usize>> = (0..n).map(|i| ctx.segment_positions(i)).collect();
    let resp_positions = ctx.response_positions();
    let segs: Vec<Tensor> = seg_positions
        .iter()
        .enumerate()
        .map(|(i, pos)| gather_rows(&ctx.segments, i, pos))
        .collect();
    let resp = gather_rows(&ctx.response, 0, &resp_positions);

    let word = if config.use_word_weights {
        let p = params.word.as_ref().ok_or_else(|| Error::Parameter {
            name: "word".into(),
            message: "required by the config but missing".into(),
        })?;
        Some(word_forward(p, &segs, &resp, config.max_seg_len)?)
    } else {
        None
    };
    let seg = if config.use_segment_weights {
        Some(segment_forward(&segs, &resp)?)
    } else {
        None
    };
    let weights = combine(
        config,
        word.as_ref().map(|w| w.s1.data()),
        seg.as_ref().map(|s| s.s2.as_slice()),
    );
    let weighted: Vec<Tensor> = match &weights {
        Some(w) => segs.iter().zip(w).map(|(s, &k)| s.scale(k)).collect(),
        None => segs.clone(),
    };
    let (cross_caches, cross) = cross_forward(&params.attentive, config, &weighted, &resp)?;
    let aggregate = aggregate_forward(params, config, &cross)?;
    let logit = aggregate.logit;
    let score = crate::numerics::sigmoid(&Tensor::vector(vec![logit])?).data()[0];
    Ok(Forward {
        seg_positions,
        resp_positions,
        segs,
        resp,
        word,
        seg,
        weights,
        cross_caches,
        cross,
        aggregate,
        logit,
        score,
    })
}

pub fn score(params: &MatcherParams, config: &MatcherConfig, ctx: &EncodedContext) -> Result<f64> {
    Ok(forward(params, config, ctx)?.score)
}

/// Binary cross-entropy with both probabilities clamped at [`LOSS_CLAMP`].
pub fn loss(score: f64, label: u8) -> f64 {
    let p = if label == 1 { score } else { 1.0 - score };
    // subtracting from zero keeps a perfect prediction at +0
    0.0 - p.max(LOSS_CLAMP).ln()
}

/// `d loss / d logit`; zero where the clamp is active.
fn loss_grad_logit(score: f64, label: u8) -> f64 {
    if label == 1 {
        if score > LOSS_CLAMP {
            score - 1.0
        } else {
            0.0
        }
    } else if 1.0 - score > LOSS_CLAMP {
        score
    } else {
        0.0
    }
}

/// Backpropagates `d(scale · loss)` into the gradients of `params`; returns the loss.
pub fn backward(
    params: &mut MatcherParams,
    config: &MatcherConfig,
    ctx: &EncodedContext,
    f: &Forward,
    label: u8,
    scale: f64,
) -> Result<f64> {
    let l = loss(f.score, label);
    let dlogit = scale * loss_grad_logit(f.score, label);
    let dcross = aggregate_backward(params, config, &f.aggregate, &f.cross, dlogit)?;

    let mut dweighted: Vec<Tensor> = f.segs.iter().map(|s| Tensor::zeros(s.shape())).collect();
    let mut dresp = Tensor::zeros(f.resp.shape());
    cross_backward(
        &mut params.attentive,
        config,
        &f.cross_caches,
        &dcross,
        &mut dweighted,
        &mut dresp,
    )?;

    let mut dsegs: Vec<Tensor>;
    match &f.weights {
        Some(w) => {
            dsegs = dweighted.iter().zip(w).map(|(g, &k)| g.scale(k)).collect();
            let dw: Vec<f64> = dweighted
                .iter()
                .zip(&f.segs)
                .map(|(g, s)| g.dot(s))
                .collect::<Result<_>>()?;
            let (ds1, ds2): (Vec<f64>, Vec<f64>) = match (&f.word, &f.seg) {
                (Some(_), Some(_)) => (
                    dw.iter().map(|g| config.alpha * g).collect(),
                    dw.iter().map(|g| (1.0 - config.alpha) * g).collect(),
                ),
                (Some(_), None) => (dw, Vec::new()),
                (None, Some(_)) => (Vec::new(), dw),
                (None, None) => unreachable!("weights imply a weighting"),
            };
            if let Some(wf) = &f.word {
                let p = params.word.as_mut().expect("present in forward");
                word_backward(p, wf, &f.segs, &f.resp, &ds1, &mut dsegs, &mut dresp)?;
            }
            if let Some(sf) = &f.seg {
                segment_backward(sf, &ds2, &mut dsegs, &mut dresp)?;
            }
        }
        None => dsegs = dweighted,
    }

    if let (Some(ids), Some(table)) = (&ctx.token_ids, params.embedding.as_mut()) {
        let d = table.value.cols();
        for (i, pos) in f.seg_positions.iter().enumerate() {
            for (j, &p) in pos.iter().enumerate() {
                let id = ids.segments[i][p];
                for (g, v) in table.grad.data_mut()[id * d..(id + 1) * d]
                    .iter_mut()
                    .zip(dsegs[i].row(j))
                {
                    *g += v;
                }
            }
        }
        for (j, &p) in f.resp_positions.iter().enumerate() {
            let id = ids.response[p];
            for (g, v) in table.grad.data_mut()[id * d..(id + 1) * d].iter_mut().zip(dresp.row(j)) {
                *g += v;
            }
        }
    }
    Ok(l)
}

/// Forward plus backward for one example; gradients accumulate into `params`.
pub fn loss_and_grad(
    params: &mut MatcherParams,
    config: &MatcherConfig,
    ctx: &EncodedContext,
    label: u8,
) -> Result<f64> {
    let f = forward(params, config, ctx)?;
    backward(params, config, ctx, &f, label, 1.0)
}

// ---------------------------------------------------------------------------
// Stage-level entry points

/// Word-level weights `s1` over all `T` slots; padded slots get 0.
pub fn word_level_weights(params: &MatcherParams, config: &MatcherConfig, ctx: &EncodedContext) -> Result<Vec<f64>> {
    let cfg = MatcherConfig {
        use_word_weights: true,
        ..config.clone()
    };
    let f = forward(params, &cfg, ctx)?;
    Ok(pad(f.s1().expect("enabled"), ctx.slots()))
}

/// Segment-level weights `s2` over all `T` slots; padded slots get 0.
pub fn segment_level_weights(ctx: &EncodedContext) -> Result<Vec<f64>> {
    ctx.validate()?;
    let n = ctx.n_valid();
    let segs: Vec<Tensor> = (0..n)
        .map(|i| gather_rows(&ctx.segments, i, &ctx.segment_positions(i)))
        .collect();
    let resp = gather_rows(&ctx.response, 0, &ctx.response_positions());
    Ok(pad(&segment_forward(&segs, &resp)?.s2, ctx.slots()))
}

/// `α·s1 + (1 − α)·s2`, or whichever side the config keeps; `None` means no weighting.
pub fn combine_weights(config: &MatcherConfig, s1: &[f64], s2: &[f64]) -> Option<Vec<f64>> {
    combine(
        config,
        config.use_word_weights.then_some(s1),
        config.use_segment_weights.then_some(s2),
    )
}

/// Scales each segment slot of the context by its weight.
pub fn weight_context(ctx: &EncodedContext, weights: Option<&[f64]>) -> EncodedContext {
    let mut out = ctx.clone();
    if let Some(w) = weights {
        let per_slot = ctx.segments.len() / ctx.slots();
        for (slot, chunk) in out.segments.data_mut().chunks_mut(per_slot).enumerate() {
            let k = w.get(slot).copied().unwrap_or(0.0);
            chunk.iter_mut().for_each(|x| *x *= k);
        }
    }
    out
}

/// Per-segment matching vectors for every slot; padded rows are zero.
pub fn dual_cross_match(params: &MatcherParams, config: &MatcherConfig, weighted: &EncodedContext) -> Result<Tensor> {
    weighted.validate()?;
    let n = weighted.n_valid();
    let segs: Vec<Tensor> = (0..n)
        .map(|i| gather_rows(&weighted.segments, i, &weighted.segment_positions(i)))
        .collect();
    let resp = gather_rows(&weighted.response, 0, &weighted.response_positions());
    let (_, cross) = cross_forward(&params.attentive, config, &segs, &resp)?;
    let mut out = Tensor::zeros(&[weighted.slots(), cross.cols()]);
    out.data_mut()[..cross.len()].copy_from_slice(cross.data());
    Ok(out)
}

/// Score from the matching vectors of the first `n_valid` rows.
pub fn aggregate_and_score(
    params: &MatcherParams,
    config: &MatcherConfig,
    cross: &Tensor,
    n_valid: usize,
) -> Result<f64> {
    if n_valid == 0 || n_valid > cross.rows() {
        return Err(Error::InvalidArgument(format!(
            "n_valid {n_valid} for {} rows",
            cross.rows()
        )));
    }
    let rows = Tensor::matrix(n_valid, cross.cols(), cross.data()[..n_valid * cross.cols()].to_vec())?;
    let f = aggregate_forward(params, config, &rows)?;
    Ok(crate::numerics::sigmoid(&Tensor::vector(vec![f.logit])?).data()[0])
}

fn pad(values: &[f64], slots: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    out.resize(slots, 0.0);
    out
}

//! Interval bounds over network activations.
//!
//! The first affine block is bounded by evaluating every simplex vertex
//! (min/max per component); the remaining layers propagate intervals in
//! closed form: affine layers in center/radius form, relu and avg-pool as
//! monotone maps. Center terms go through the same kernels as the plain
//! forward pass, so a zero-width interval stays equal to the forward
//! activations bit for bit.

use crate::backprop::{LayerGrads, ParamGrads};
use crate::error::{Error, Result};
use crate::nn::{
    avgpool_apply, conv1d_apply, conv1d_apply_abs, conv1d_cell, linear_apply, linear_apply_abs,
    relu_apply, Layer, Network,
};
use crate::perturb::{PerturbationSet, SimplexVertices};
use crate::tensor::{Scalar, Tensor};

/// Elementwise lower/upper bounds on one activation tensor.
#[derive(Clone, Debug)]
pub struct IntervalTensor<F> {
    pub lower: Tensor<F>,
    pub upper: Tensor<F>,
}

impl<F: Scalar> IntervalTensor<F> {
    pub fn new(lower: Tensor<F>, upper: Tensor<F>) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::shape("IntervalTensor::new", "lower/upper shapes differ"));
        }
        lower.check_finite("interval lower bound")?;
        upper.check_finite("interval upper bound")?;
        if lower.data().iter().zip(upper.data()).any(|(&l, &u)| l > u) {
            return Err(Error::shape("IntervalTensor::new", "lower exceeds upper"));
        }
        Ok(IntervalTensor { lower, upper })
    }

    /// Zero-width interval around a point.
    pub fn point(t: &Tensor<F>) -> Self {
        IntervalTensor {
            lower: t.clone(),
            upper: t.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    /// True when `x` lies inside the box, allowing `slack` per component.
    pub fn contains(&self, x: &Tensor<F>, slack: f64) -> bool {
        x.shape() == self.shape()
            && x.data().iter().enumerate().all(|(i, &v)| {
                let v = v.as_f64();
                v >= self.lower.at1(i).as_f64() - slack && v <= self.upper.at1(i).as_f64() + slack
            })
    }

    /// True when `inner` is contained in `self`, allowing `slack`.
    pub fn contains_interval(&self, inner: &Self, slack: f64) -> bool {
        inner.shape() == self.shape()
            && (0..self.lower.len()).all(|i| {
                inner.lower.at1(i).as_f64() >= self.lower.at1(i).as_f64() - slack
                    && inner.upper.at1(i).as_f64() <= self.upper.at1(i).as_f64() + slack
            })
    }

    pub fn max_width(&self) -> f64 {
        (0..self.lower.len())
            .map(|i| self.upper.at1(i).as_f64() - self.lower.at1(i).as_f64())
            .fold(0.0, f64::max)
    }
}

/// Center/radius interval transport through an affine layer:
/// out_center = affine(center), out_radius = |W| * radius.
pub fn interval_affine<F: Scalar>(layer: &Layer<F>, b: &IntervalTensor<F>) -> Result<IntervalTensor<F>> {
    layer.out_shape(b.shape())?;
    let half = F::from_f64(0.5);
    let center = b.lower.zip_map(&b.upper, |l, u| (l + u) * half)?;
    let radius = b.lower.zip_map(&b.upper, |l, u| (u - l) * half)?;
    let (oc, or) = match layer {
        Layer::Conv1d { weight, bias } => (
            conv1d_apply(weight, bias, &center),
            conv1d_apply_abs(weight, &radius),
        ),
        Layer::Linear { weight, bias } => (
            linear_apply(weight, bias, &center),
            linear_apply_abs(weight, &radius),
        ),
        other => {
            return Err(Error::shape(
                "interval_affine",
                format!("layer {} is not affine", other.kind()),
            ))
        }
    };
    IntervalTensor::new(
        oc.zip_map(&or, |c, r| c - r)?,
        oc.zip_map(&or, |c, r| c + r)?,
    )
}

/// Interval transport through an elementwise/monotone layer: apply the layer
/// to both bounds.
pub fn interval_monotone<F: Scalar>(layer: &Layer<F>, b: &IntervalTensor<F>) -> Result<IntervalTensor<F>> {
    layer.out_shape(b.shape())?;
    match layer {
        Layer::Relu => IntervalTensor::new(relu_apply(&b.lower), relu_apply(&b.upper)),
        Layer::AvgPool => IntervalTensor::new(avgpool_apply(&b.lower), avgpool_apply(&b.upper)),
        other => Err(Error::shape(
            "interval_monotone",
            format!("layer {} is not monotone transport", other.kind()),
        )),
    }
}

/// Bounds on the first block's output, with the bookkeeping needed to
/// backpropagate through the vertex min/max and to audit evaluation cost.
#[derive(Clone, Debug)]
pub struct FirstLayerBounds<F> {
    /// Componentwise min/max of the pre-activation over all vertices.
    pub pre: IntervalTensor<F>,
    /// After the block's activation (equals `pre` when the block has none).
    pub post: IntervalTensor<F>,
    /// Vertex index attaining each component's min / max (first on ties).
    pub argmin: Vec<u32>,
    pub argmax: Vec<u32>,
    pub has_relu: bool,
    /// Layers consumed by the block (1 = affine only, 2 = affine + relu).
    pub block_len: usize,
    pub vertex_evals: usize,
    /// Multiply-adds spent on convolution cells.
    pub madds: u64,
}

fn first_conv<F: Scalar>(net: &Network<F>) -> Result<(&Tensor<F>, &Tensor<F>, bool)> {
    match net.layers.first() {
        Some(Layer::Conv1d { weight, bias }) => {
            let has_relu = matches!(net.layers.get(1), Some(Layer::Relu));
            Ok((weight, bias, has_relu))
        }
        _ => Err(Error::shape(
            "first_layer_bounds",
            "first layer must be a convolution",
        )),
    }
}

fn fold_min_max<F: Scalar>(
    min: &mut Tensor<F>,
    max: &mut Tensor<F>,
    argmin: &mut [u32],
    argmax: &mut [u32],
    idx: usize,
    value: F,
    m: u32,
) {
    if value < min.at1(idx) {
        min.data_mut()[idx] = value;
        argmin[idx] = m;
    }
    if value > max.at1(idx) {
        max.data_mut()[idx] = value;
        argmax[idx] = m;
    }
}

fn finish_first_layer<F: Scalar>(
    min: Tensor<F>,
    max: Tensor<F>,
    argmin: Vec<u32>,
    argmax: Vec<u32>,
    has_relu: bool,
    vertex_evals: usize,
    madds: u64,
) -> Result<FirstLayerBounds<F>> {
    let pre = IntervalTensor::new(min, max)?;
    // min and relu commute exactly for monotone relu, so the block output
    // bounds are relu of the pre-activation bounds.
    let post = if has_relu {
        IntervalTensor::new(relu_apply(&pre.lower), relu_apply(&pre.upper))?
    } else {
        pre.clone()
    };
    Ok(FirstLayerBounds {
        pre,
        post,
        argmin,
        argmax,
        has_relu,
        block_len: if has_relu { 2 } else { 1 },
        vertex_evals,
        madds,
    })
}

/// Reference implementation: one full convolution per vertex.
pub fn first_layer_bounds_naive<F: Scalar>(
    net: &Network<F>,
    sv: &SimplexVertices<F>,
) -> Result<FirstLayerBounds<F>> {
    let (weight, bias, has_relu) = first_conv(net)?;
    let (c_out, width, dim) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    net.layers[0].out_shape(sv.base.shape())?;
    let t_out = sv.base.rows() + 1 - width;

    let z0 = conv1d_apply(weight, bias, &sv.base);
    let mut min = z0.clone();
    let mut max = z0;
    let n = t_out * c_out;
    let mut argmin = vec![0u32; n];
    let mut argmax = vec![0u32; n];
    let cell = (c_out * width * dim) as u64;
    let mut madds = (t_out as u64) * cell;

    for m in 1..sv.count() {
        let v = sv.materialize(m);
        let z = conv1d_apply(weight, bias, &v);
        madds += (t_out as u64) * cell;
        for idx in 0..n {
            fold_min_max(&mut min, &mut max, &mut argmin, &mut argmax, idx, z.at1(idx), m as u32);
        }
    }
    finish_first_layer(min, max, argmin, argmax, has_relu, sv.count(), madds)
}

/// Incremental implementation: the base is evaluated once; each vertex
/// recomputes only the conv output rows its single changed position
/// touches. Recomputed cells run the same kernel in the same order as the
/// naive path, so results agree bitwise.
pub fn first_layer_bounds_incremental<F: Scalar>(
    net: &Network<F>,
    sv: &SimplexVertices<F>,
) -> Result<FirstLayerBounds<F>> {
    let (weight, bias, has_relu) = first_conv(net)?;
    let (c_out, width, dim) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    net.layers[0].out_shape(sv.base.shape())?;
    let seq_len = sv.base.rows();
    let t_out = seq_len + 1 - width;

    let z0 = conv1d_apply(weight, bias, &sv.base);
    let mut min = z0.clone();
    let mut max = z0;
    let n = t_out * c_out;
    let mut argmin = vec![0u32; n];
    let mut argmax = vec![0u32; n];
    let mut madds = (t_out as u64) * (c_out * width * dim) as u64;

    for (vi, (pos, row)) in sv.deltas.iter().enumerate() {
        let m = (vi + 1) as u32;
        if *pos >= seq_len {
            return Err(Error::shape(
                "first_layer_bounds_incremental",
                "vertex position outside sequence",
            ));
        }
        let row_at = |i: usize| {
            if i == *pos {
                row.as_slice()
            } else {
                sv.base.row(i)
            }
        };
        let t_lo = pos.saturating_sub(width - 1);
        let t_hi = (t_out - 1).min(*pos);
        for t in t_lo..=t_hi {
            for c in 0..c_out {
                let value = conv1d_cell(weight, bias.at1(c), c, t, width, dim, &row_at);
                fold_min_max(&mut min, &mut max, &mut argmin, &mut argmax, t * c_out + c, value, m);
            }
        }
        madds += ((t_hi - t_lo + 1) * c_out * width * dim) as u64;
    }
    finish_first_layer(min, max, argmin, argmax, has_relu, sv.count(), madds)
}

/// Count of interval value computations while propagating layers 2..K.
/// Every layer costs exactly 2 (center+radius for affine, lower+upper for
/// monotone): one lower and one upper pass through the stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PropStats {
    pub layers: usize,
    pub applications: u64,
}

fn step_layer<F: Scalar>(layer: &Layer<F>, b: &IntervalTensor<F>) -> Result<IntervalTensor<F>> {
    match layer {
        Layer::Conv1d { .. } | Layer::Linear { .. } => interval_affine(layer, b),
        Layer::Relu | Layer::AvgPool => interval_monotone(layer, b),
    }
}

/// Propagates interval bounds through `net.layers[start..]`.
pub fn propagate<F: Scalar>(
    net: &Network<F>,
    input: &IntervalTensor<F>,
    start: usize,
) -> Result<(IntervalTensor<F>, PropStats)> {
    let mut stats = PropStats::default();
    let mut cur = input.clone();
    for layer in &net.layers[start..] {
        cur = step_layer(layer, &cur)?;
        stats.layers += 1;
        stats.applications += 2;
    }
    Ok((cur, stats))
}

/// Interval bounds entering each propagated layer, kept for backprop.
/// `intervals[0]` is the block output; `intervals[i + 1]` is the output of
/// `net.layers[start + i]`; the last entry bounds the logits.
#[derive(Clone, Debug)]
pub struct BoundsTrace<F> {
    pub start: usize,
    pub intervals: Vec<IntervalTensor<F>>,
}

impl<F: Scalar> BoundsTrace<F> {
    pub fn logit_bounds(&self) -> &IntervalTensor<F> {
        self.intervals.last().expect("trace is never empty")
    }
}

pub fn propagate_trace<F: Scalar>(
    net: &Network<F>,
    input: &IntervalTensor<F>,
    start: usize,
) -> Result<(BoundsTrace<F>, PropStats)> {
    let mut stats = PropStats::default();
    let mut intervals = Vec::with_capacity(net.layers.len() - start + 1);
    intervals.push(input.clone());
    for layer in &net.layers[start..] {
        let next = step_layer(layer, intervals.last().unwrap())?;
        intervals.push(next);
        stats.layers += 1;
        stats.applications += 2;
    }
    Ok((BoundsTrace { start, intervals }, stats))
}

/// One full certified-bound computation for a vertex set.
#[derive(Clone, Debug)]
pub struct IbpRun<F> {
    pub first: FirstLayerBounds<F>,
    pub trace: BoundsTrace<F>,
    pub stats: PropStats,
}

impl<F: Scalar> IbpRun<F> {
    pub fn logit_bounds(&self) -> &IntervalTensor<F> {
        self.trace.logit_bounds()
    }
}

pub fn ibp_forward<F: Scalar>(
    net: &Network<F>,
    sv: &SimplexVertices<F>,
    incremental: bool,
) -> Result<IbpRun<F>> {
    let first = if incremental {
        first_layer_bounds_incremental(net, sv)?
    } else {
        first_layer_bounds_naive(net, sv)?
    };
    let (trace, stats) = propagate_trace(net, &first.post, first.block_len)?;
    Ok(IbpRun { first, trace, stats })
}

/// Half-space constraints saying "logit of y beats the true class":
/// c[y] = 1, c[true_class] = -1, zeros elsewhere, one constraint per
/// competing class.
#[derive(Clone, Debug)]
pub struct WorstCaseSpec {
    pub class_count: usize,
    pub true_class: usize,
}

impl WorstCaseSpec {
    pub fn new(class_count: usize, true_class: usize) -> Result<Self> {
        if true_class >= class_count {
            return Err(Error::shape("WorstCaseSpec::new", "true class out of range"));
        }
        Ok(WorstCaseSpec {
            class_count,
            true_class,
        })
    }

    pub fn competitors(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.class_count).filter(move |&y| y != self.true_class)
    }

    pub fn constraint(&self, y: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.class_count];
        c[y] = 1.0;
        c[self.true_class] = -1.0;
        c
    }
}

/// Worst-case logits: the true class at its lower bound, every other class
/// at its upper bound.
pub fn worst_case_logits<F: Scalar>(bounds: &IntervalTensor<F>, true_class: usize) -> Result<Tensor<F>> {
    let k = bounds.lower.len();
    if true_class >= k {
        return Err(Error::shape("worst_case_logits", "true class out of range"));
    }
    let mut out = bounds.upper.clone();
    out.data_mut()[true_class] = bounds.lower.at1(true_class);
    Ok(out)
}

/// Certification margin: max over competing classes of
/// upper(y) - lower(true). Verified iff strictly negative; a margin of
/// exactly zero counts as not verified.
pub fn verified_margin<F: Scalar>(bounds: &IntervalTensor<F>, true_class: usize) -> Result<(F, bool)> {
    let k = bounds.lower.len();
    if true_class >= k {
        return Err(Error::shape("verified_margin", "true class out of range"));
    }
    let lt = bounds.lower.at1(true_class);
    let mut margin = F::neg_infinity();
    for y in 0..k {
        if y != true_class {
            margin = margin.max(bounds.upper.at1(y) - lt);
        }
    }
    Ok((margin, margin < F::zero()))
}

/// Upstream gradients with respect to a bounds pair.
#[derive(Clone, Debug)]
pub struct IntervalGrad<F> {
    pub lower: Tensor<F>,
    pub upper: Tensor<F>,
}

impl<F: Scalar> IntervalGrad<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        IntervalGrad {
            lower: Tensor::zeros(shape.to_vec()),
            upper: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Splits a worst-case-logits gradient onto the bounds it was read from:
/// the true class entry came from the lower bound, the rest from uppers.
pub fn worst_case_grad_split<F: Scalar>(g: &Tensor<F>, true_class: usize) -> IntervalGrad<F> {
    let mut out = IntervalGrad::zeros(g.shape());
    for i in 0..g.len() {
        if i == true_class {
            out.lower.data_mut()[i] = g.at1(i);
        } else {
            out.upper.data_mut()[i] = g.at1(i);
        }
    }
    out
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Backpropagates interval gradients through `net.layers[trace.start..]`,
/// accumulating parameter gradients. Returns the gradient at the block
/// output (the trace's first interval).
pub fn propagate_backward<F: Scalar>(
    net: &Network<F>,
    trace: &BoundsTrace<F>,
    g_logits: IntervalGrad<F>,
    grads: &mut ParamGrads<F>,
) -> Result<IntervalGrad<F>> {
    let half = F::from_f64(0.5);
    let mut g = g_logits;
    let span = net.layers.len() - trace.start;
    if trace.intervals.len() != span + 1 {
        return Err(Error::shape("propagate_backward", "trace length mismatch"));
    }
    for idx in (0..span).rev() {
        let layer_index = trace.start + idx;
        let b_in = &trace.intervals[idx];
        let layer = &net.layers[layer_index];
        g = match layer {
            Layer::Relu => IntervalGrad {
                lower: b_in.lower.zip_map(&g.lower, |x, gi| {
                    if x > F::zero() {
                        gi
                    } else {
                        F::zero()
                    }
                })?,
                upper: b_in.upper.zip_map(&g.upper, |x, gi| {
                    if x > F::zero() {
                        gi
                    } else {
                        F::zero()
                    }
                })?,
            },
            Layer::AvgPool => {
                let (t_len, c_len) = (b_in.lower.rows(), b_in.lower.cols());
                let inv = F::one() / F::from_f64(t_len as f64);
                let mut gl = Tensor::zeros(vec![t_len, c_len]);
                let mut gu = Tensor::zeros(vec![t_len, c_len]);
                for t in 0..t_len {
                    for c in 0..c_len {
                        gl.set2(t, c, g.lower.at1(c) * inv);
                        gu.set2(t, c, g.upper.at1(c) * inv);
                    }
                }
                IntervalGrad { lower: gl, upper: gu }
            }
            Layer::Linear { weight, .. } => {
                let LayerGrads::Linear { weight: gw, bias: gb } = &mut grads.layers[layer_index]
                else {
                    return Err(Error::shape("propagate_backward", "grads mismatch at linear"));
                };
                let (o_len, i_len) = (weight.rows(), weight.cols());
                let mut gmu = vec![F::zero(); i_len];
                let mut grad_r = vec![F::zero(); i_len];
                for o in 0..o_len {
                    let gc = g.lower.at1(o) + g.upper.at1(o);
                    let gr = g.upper.at1(o) - g.lower.at1(o);
                    gb.data_mut()[o] = gb.at1(o) + gc;
                    for i in 0..i_len {
                        let w = weight.at2(o, i);
                        let l = b_in.lower.at1(i);
                        let u = b_in.upper.at1(i);
                        let mu = (l + u) * half;
                        let r = (u - l) * half;
                        gw.data_mut()[o * i_len + i] =
                            gw.at1(o * i_len + i) + gc * mu + gr * r * sign(w);
                        gmu[i] = gmu[i] + w * gc;
                        grad_r[i] = grad_r[i] + w.abs() * gr;
                    }
                }
                let mut gl = Tensor::zeros(vec![i_len]);
                let mut gu = Tensor::zeros(vec![i_len]);
                for i in 0..i_len {
                    gl.data_mut()[i] = (gmu[i] - grad_r[i]) * half;
                    gu.data_mut()[i] = (gmu[i] + grad_r[i]) * half;
                }
                IntervalGrad { lower: gl, upper: gu }
            }
            Layer::Conv1d { weight, .. } => {
                let LayerGrads::Conv1d { weight: gw, bias: gb } = &mut grads.layers[layer_index]
                else {
                    return Err(Error::shape("propagate_backward", "grads mismatch at conv"));
                };
                let (c_out, width, dim) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                let in_rows = b_in.lower.rows();
                let t_out = in_rows + 1 - width;
                let mut gmu: Tensor<F> = Tensor::zeros(vec![in_rows, dim]);
                let mut grad_r: Tensor<F> = Tensor::zeros(vec![in_rows, dim]);
                for t in 0..t_out {
                    for c in 0..c_out {
                        let gc = g.lower.at2(t, c) + g.upper.at2(t, c);
                        let gr = g.upper.at2(t, c) - g.lower.at2(t, c);
                        if gc == F::zero() && gr == F::zero() {
                            continue;
                        }
                        gb.data_mut()[c] = gb.at1(c) + gc;
                        let wbase = c * width * dim;
                        for j in 0..width {
                            let lrow = b_in.lower.row(t + j);
                            let urow = b_in.upper.row(t + j);
                            for k in 0..dim {
                                let w = weight.at1(wbase + j * dim + k);
                                let mu = (lrow[k] + urow[k]) * half;
                                let r = (urow[k] - lrow[k]) * half;
                                let gwi = wbase + j * dim + k;
                                gw.data_mut()[gwi] =
                                    gw.at1(gwi) + gc * mu + gr * r * sign(w);
                                let gi = (t + j) * dim + k;
                                gmu.data_mut()[gi] = gmu.at1(gi) + w * gc;
                                grad_r.data_mut()[gi] = grad_r.at1(gi) + w.abs() * gr;
                            }
                        }
                    }
                }
                let mut gl = Tensor::zeros(vec![in_rows, dim]);
                let mut gu = Tensor::zeros(vec![in_rows, dim]);
                for i in 0..in_rows * dim {
                    gl.data_mut()[i] = (gmu.at1(i) - grad_r.at1(i)) * half;
                    gu.data_mut()[i] = (gmu.at1(i) + grad_r.at1(i)) * half;
                }
                IntervalGrad { lower: gl, upper: gu }
            }
        };
    }
    Ok(g)
}

/// Backpropagates block-output interval gradients through the vertex
/// min/max into conv parameters and (when trainable) embedding rows. The
/// gradient of each component routes to its argmin/argmax vertex; within a
/// dilated vertex row, the chain rule splits between the original and the
/// replacement embedding as (1 - delta) and delta.
pub fn first_layer_backward<F: Scalar>(
    net: &Network<F>,
    pset: &PerturbationSet,
    sv: &SimplexVertices<F>,
    first: &FirstLayerBounds<F>,
    g_post: &IntervalGrad<F>,
    grads: &mut ParamGrads<F>,
) -> Result<()> {
    let (weight, _, _) = first_conv(net)?;
    let (c_out, width, dim) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if pset.elems.len() != sv.deltas.len() || pset.tokens.len() != sv.base.rows() {
        return Err(Error::shape(
            "first_layer_backward",
            "perturbation set does not match vertex set",
        ));
    }
    // Relu gate at the block activation, on the min/max pre-activations.
    let gl = if first.has_relu {
        first.pre.lower.zip_map(&g_post.lower, |x, gi| {
            if x > F::zero() {
                gi
            } else {
                F::zero()
            }
        })?
    } else {
        g_post.lower.clone()
    };
    let gu = if first.has_relu {
        first.pre.upper.zip_map(&g_post.upper, |x, gi| {
            if x > F::zero() {
                gi
            } else {
                F::zero()
            }
        })?
    } else {
        g_post.upper.clone()
    };

    // Route each component's bound gradients to the attaining vertex.
    let n = gl.len();
    let mut per_vertex: Vec<Vec<(usize, F)>> = vec![Vec::new(); sv.count()];
    for i in 0..n {
        let gli = gl.at1(i);
        if gli != F::zero() {
            per_vertex[first.argmin[i] as usize].push((i, gli));
        }
        let gui = gu.at1(i);
        if gui != F::zero() {
            per_vertex[first.argmax[i] as usize].push((i, gui));
        }
    }

    let LayerGrads::Conv1d { weight: gw, bias: gb } = &mut grads.layers[0] else {
        return Err(Error::shape("first_layer_backward", "grads mismatch at conv"));
    };
    let d_factor = F::from_f64(pset.budget as f64);
    let one_minus_d = F::one() - d_factor;
    let train_emb = grads.embedding.is_some();

    for (m, entries) in per_vertex.iter().enumerate() {
        let (pos, vrow): (usize, &[F]) = if m == 0 {
            (usize::MAX, &[])
        } else {
            let (p, r) = &sv.deltas[m - 1];
            (*p, r.as_slice())
        };
        for &(comp, gval) in entries {
            let (t, c) = (comp / c_out, comp % c_out);
            gb.data_mut()[c] = gb.at1(c) + gval;
            let wbase = c * width * dim;
            for j in 0..width {
                let ridx = t + j;
                let patched = ridx == pos;
                let xrow: &[F] = if patched { vrow } else { sv.base.row(ridx) };
                let wrow = &weight.data()[wbase + j * dim..wbase + (j + 1) * dim];
                let gwrow = &mut gw.data_mut()[wbase + j * dim..wbase + (j + 1) * dim];
                for k in 0..dim {
                    gwrow[k] = gwrow[k] + gval * xrow[k];
                }
                if train_emb {
                    let emb = grads.embedding.as_mut().unwrap();
                    if patched {
                        let orig_tok = pset.tokens[pos];
                        let repl_tok = pset.elems[m - 1].replacement;
                        for k in 0..dim {
                            let v = gval * wrow[k];
                            let ro = emb.row_mut(orig_tok);
                            ro[k] = ro[k] + one_minus_d * v;
                            let rr = emb.row_mut(repl_tok);
                            rr[k] = rr[k] + d_factor * v;
                        }
                    } else {
                        let tok = pset.tokens[ridx];
                        let erow = emb.row_mut(tok);
                        for k in 0..dim {
                            erow[k] = erow[k] + gval * wrow[k];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

//! Define-by-run reverse-mode engine over dense fields.
//!
//! A [`Tape`] records every primitive executed during one forward build; a
//! single reverse sweep over the record produces adjoints for all parameter
//! leaves. Tapes are cheap, per-evaluation, and never shared across threads.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::grid::field::{Field, FieldShape};
use crate::grid::params::{GradMap, ParamId, ParamSet};
use crate::real::Real;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        dilation: usize,
        groups: usize,
    },
    /// One output frame of a pixel-wise temporal convolution. `taps[j]` is
    /// the kernel tap applied to `inputs[j]`; out-of-range taps are dropped
    /// (zero padding in time).
    TemporalMix {
        inputs: Vec<Var>,
        kernel: Var,
        taps: Vec<usize>,
    },
    /// S[i, j] = scale * sum_c Q[c, i] K[c, j] over flattened tokens.
    AttnScores { q: Var, k: Var, scale: T },
    SoftmaxRows { input: Var },
    /// out[c, i] = sum_j P[i, j] V[c, j], reshaped to the query grid.
    AttnApply { probs: Var, v: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
    BroadcastAdd { input: Var, bias: Var },
    Silu { input: Var },
    Sigmoid { input: Var },
    /// Value-preserving mask: keep where input >= theta, zero elsewhere.
    ThresholdGate { input: Var, theta: T },
    AvgPool2 { input: Var },
    UpsampleNearest2 { input: Var },
    ConcatChannels { inputs: Vec<Var> },
    SliceChannels { input: Var, start: usize },
    SumAll { input: Var },
    /// Mean squared error against a constant target.
    MseVs { input: Var, target: Vec<T> },
}

struct Node<T> {
    dims: Vec<usize>,
    values: Vec<T>,
    op: Op<T>,
}

impl<T> Node<T> {
    fn len(&self) -> usize {
        self.values.len()
    }
}

/// Ordered record of executed primitives with enough context to replay
/// adjoints in reverse.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn field_dims(shape: FieldShape) -> Vec<usize> {
    vec![shape.channels, shape.height, shape.width]
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, dims: Vec<usize>, values: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { dims, values, op });
        Var(nodes.len() - 1)
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].dims.clone()
    }

    pub fn value_raw(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.0].values.clone()
    }

    pub fn value_scalar(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.0].len(), 1);
        nodes[v.0].values[0]
    }

    /// Extracts a rank-3 value as a [`Field`].
    pub fn value_field(&self, v: Var) -> Result<Field<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        if node.dims.len() != 3 {
            return Err(Error::contract(format!(
                "value has rank {} dims, expected a channels x height x width field",
                node.dims.len()
            )));
        }
        Field::from_vec(node.dims[0], node.dims[1], node.dims[2], node.values.clone())
    }

    fn field_shape(&self, v: Var) -> Result<FieldShape> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        if node.dims.len() != 3 {
            return Err(Error::contract(format!(
                "expected a rank-3 field value, got rank {}",
                node.dims.len()
            )));
        }
        Ok(FieldShape::new(node.dims[0], node.dims[1], node.dims[2]))
    }

    // ---- leaves ----

    pub fn constant(&self, f: &Field<T>) -> Var {
        self.push(field_dims(f.shape()), f.data().to_vec(), Op::Const)
    }

    pub fn constant_raw(&self, dims: Vec<usize>, values: Vec<T>) -> Var {
        self.push(dims, values, Op::Const)
    }

    /// Parameter leaf; its adjoint is routed to `id` during backward.
    pub fn param(&self, ps: &ParamSet<T>, id: ParamId) -> Var {
        let t = ps.get(id);
        self.push(t.dims.clone(), t.values.clone(), Op::Param(id))
    }

    // ---- convolutions ----

    /// Zero-padded same-size 2-D convolution with odd kernel extents.
    ///
    /// Kernel dims are (out_channels, in_channels/groups, kh, kw); `groups ==
    /// in_channels` with a channel multiplier realizes depth-wise kernels.
    pub fn conv2d(&self, input: Var, kernel: Var, dilation: usize, groups: usize) -> Result<Var> {
        let in_shape = self.field_shape(input)?;
        let kdims = self.dims(kernel);
        if kdims.len() != 4 {
            return Err(Error::contract(format!(
                "conv2d kernel must be rank 4 (out, in/groups, kh, kw), got rank {}",
                kdims.len()
            )));
        }
        let (out_c, k_icg, kh, kw) = (kdims[0], kdims[1], kdims[2], kdims[3]);
        if dilation == 0 {
            return Err(Error::contract("conv2d dilation must be >= 1"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!(
                "conv2d kernel spatial extent must be odd, got {kh}x{kw}"
            )));
        }
        if groups == 0 || in_shape.channels % groups != 0 || out_c % groups != 0 {
            return Err(Error::contract(format!(
                "conv2d groups={groups} must divide input channels={} and output channels={out_c}",
                in_shape.channels
            )));
        }
        let icg = in_shape.channels / groups;
        if k_icg != icg {
            return Err(Error::contract(format!(
                "conv2d kernel input-channel dimension is {k_icg}, input provides {} channels / {groups} groups = {icg}",
                in_shape.channels
            )));
        }

        let (h, w) = (in_shape.height, in_shape.width);
        let ry = (kh as isize - 1) / 2;
        let rx = (kw as isize - 1) / 2;
        let nodes = self.nodes.borrow();
        let x = &nodes[input.0].values;
        let k = &nodes[kernel.0].values;
        let ocg = out_c / groups;
        let mut out = vec![T::zero(); out_c * h * w];
        for oc in 0..out_c {
            let g = oc / ocg;
            for ic in 0..icg {
                let in_c = g * icg + ic;
                for ky in 0..kh {
                    let dy = (ky as isize - ry) * dilation as isize;
                    for kx in 0..kw {
                        let dx = (kx as isize - rx) * dilation as isize;
                        let kv = k[((oc * icg + ic) * kh + ky) * kw + kx];
                        if kv == T::zero() {
                            continue;
                        }
                        // contiguous row segments keep the inner loop tight
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize).min(w as isize - dx).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize).min(h as isize - dy).max(0) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let o_base = (oc * h + y) * w;
                            let i_base = (in_c * h + sy) * w;
                            let src = &x[i_base + (x0 as isize + dx) as usize
                                ..i_base + (x1 as isize + dx) as usize];
                            let dst = &mut out[o_base + x0..o_base + x1];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += kv * v;
                            }
                        }
                    }
                }
            }
        }
        drop(nodes);
        Ok(self.push(
            vec![out_c, h, w],
            out,
            Op::Conv2d {
                input,
                kernel,
                dilation,
                groups,
            },
        ))
    }

    /// Pixel-wise convolution across time. Kernel dims are (channels, taps)
    /// with odd tap count; frames keep their shape, time is zero padded.
    pub fn conv_temporal(&self, frames: &[Var], kernel: Var) -> Result<Vec<Var>> {
        if frames.is_empty() {
            return Err(Error::contract("conv_temporal needs at least one frame"));
        }
        let shape = self.field_shape(frames[0])?;
        for &f in frames {
            if self.field_shape(f)? != shape {
                return Err(Error::contract("conv_temporal frames must share one shape"));
            }
        }
        let kdims = self.dims(kernel);
        if kdims.len() != 2 || kdims[0] != shape.channels {
            return Err(Error::contract(format!(
                "conv_temporal kernel must be (channels={}, taps), got {:?}",
                shape.channels, kdims
            )));
        }
        let taps = kdims[1];
        if taps % 2 == 0 {
            return Err(Error::contract("conv_temporal tap count must be odd"));
        }
        if taps > frames.len() {
            return Err(Error::contract(format!(
                "conv_temporal kernel extent {taps} exceeds sequence length {}",
                frames.len()
            )));
        }
        let r = (taps - 1) / 2;
        let s = frames.len();
        let mut out = Vec::with_capacity(s);
        for m in 0..s {
            let mut inputs = Vec::new();
            let mut used_taps = Vec::new();
            for tap in 0..taps {
                let fi = m as isize + tap as isize - r as isize;
                if fi < 0 || fi >= s as isize {
                    continue;
                }
                inputs.push(frames[fi as usize]);
                used_taps.push(tap);
            }
            let nodes = self.nodes.borrow();
            let k = &nodes[kernel.0].values;
            let per_frame = shape.height * shape.width;
            let mut values = vec![T::zero(); shape.len()];
            for (j, &inp) in inputs.iter().enumerate() {
                let kv_base = used_taps[j];
                let xv = &nodes[inp.0].values;
                for c in 0..shape.channels {
                    let kv = k[c * taps + kv_base];
                    if kv == T::zero() {
                        continue;
                    }
                    let off = c * per_frame;
                    for i in 0..per_frame {
                        values[off + i] += kv * xv[off + i];
                    }
                }
            }
            drop(nodes);
            out.push(self.push(
                field_dims(shape),
                values,
                Op::TemporalMix {
                    inputs,
                    kernel,
                    taps: used_taps,
                },
            ));
        }
        Ok(out)
    }

    // ---- attention primitives ----

    /// Scaled token-similarity scores between projected fields. Tokens are
    /// spatial positions; channels are the embedding dimension.
    pub fn attn_scores(&self, q: Var, k: Var) -> Result<Var> {
        let qs = self.field_shape(q)?;
        let ks = self.field_shape(k)?;
        if qs.channels != ks.channels {
            return Err(Error::contract(format!(
                "attention channel mismatch: projected query has {} channels, key has {} (channel dimension)",
                qs.channels, ks.channels
            )));
        }
        let n = qs.height * qs.width;
        let m = ks.height * ks.width;
        let d = qs.channels;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let nodes = self.nodes.borrow();
        let qv = &nodes[q.0].values;
        let kv = &nodes[k.0].values;
        let mut out = vec![T::zero(); n * m];
        for c in 0..d {
            let qo = c * n;
            let ko = c * m;
            for i in 0..n {
                let qi = qv[qo + i];
                if qi == T::zero() {
                    continue;
                }
                let row = i * m;
                for j in 0..m {
                    out[row + j] += qi * kv[ko + j];
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        drop(nodes);
        Ok(self.push(vec![n, m], out, Op::AttnScores { q, k, scale }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, input: Var) -> Result<Var> {
        let dims = self.dims(input);
        if dims.len() != 2 {
            return Err(Error::contract("softmax_rows expects a rank-2 value"));
        }
        let (n, m) = (dims[0], dims[1]);
        let nodes = self.nodes.borrow();
        let x = &nodes[input.0].values;
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                out[i * m + j] /= sum;
            }
        }
        drop(nodes);
        Ok(self.push(vec![n, m], out, Op::SoftmaxRows { input }))
    }

    /// Applies attention weights to values and reshapes tokens back to the
    /// query's spatial grid.
    pub fn attn_apply(&self, probs: Var, v: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let pdims = self.dims(probs);
        let vs = self.field_shape(v)?;
        if pdims.len() != 2 {
            return Err(Error::contract("attn_apply expects rank-2 weights"));
        }
        let (n, m) = (pdims[0], pdims[1]);
        if out_h * out_w != n {
            return Err(Error::contract(format!(
                "attn_apply output grid {out_h}x{out_w} does not hold {n} query tokens"
            )));
        }
        if vs.height * vs.width != m {
            return Err(Error::contract(format!(
                "attn_apply value tokens {} do not match weight columns {m}",
                vs.height * vs.width
            )));
        }
        let c = vs.channels;
        let nodes = self.nodes.borrow();
        let pv = &nodes[probs.0].values;
        let vv = &nodes[v.0].values;
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let vo = ch * m;
            let oo = ch * n;
            for i in 0..n {
                let mut acc = T::zero();
                let row = i * m;
                for j in 0..m {
                    acc += pv[row + j] * vv[vo + j];
                }
                out[oo + i] = acc;
            }
        }
        drop(nodes);
        Ok(self.push(vec![c, out_h, out_w], out, Op::AttnApply { probs, v }))
    }

    // ---- pointwise and structural ops ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::contract(format!(
                "add shape mismatch: {da:?} vs {db:?}"
            )));
        }
        let nodes = self.nodes.borrow();
        let values = nodes[a.0]
            .values
            .iter()
            .zip(&nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        drop(nodes);
        Ok(self.push(da, values, Op::Add { a, b }))
    }

    pub fn scale(&self, input: Var, factor: T) -> Var {
        let nodes = self.nodes.borrow();
        let node = &nodes[input.0];
        let dims = node.dims.clone();
        let values = node.values.iter().map(|&v| v * factor).collect();
        drop(nodes);
        self.push(dims, values, Op::Scale { input, factor })
    }

    /// Adds a per-channel bias (length == channels) to a field.
    pub fn broadcast_add(&self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.field_shape(input)?;
        let bdims = self.dims(bias);
        let blen: usize = bdims.iter().product();
        if blen != shape.channels {
            return Err(Error::contract(format!(
                "bias length {blen} does not match {} channels",
                shape.channels
            )));
        }
        let nodes = self.nodes.borrow();
        let x = &nodes[input.0].values;
        let b = &nodes[bias.0].values;
        let per = shape.height * shape.width;
        let mut values = x.clone();
        for c in 0..shape.channels {
            let bv = b[c];
            for v in &mut values[c * per..(c + 1) * per] {
                *v += bv;
            }
        }
        drop(nodes);
        Ok(self.push(field_dims(shape), values, Op::BroadcastAdd { input, bias }))
    }

    pub fn silu(&self, input: Var) -> Var {
        let nodes = self.nodes.borrow();
        let node = &nodes[input.0];
        let dims = node.dims.clone();
        let values = node
            .values
            .iter()
            .map(|&v| v * sigmoid_scalar(v))
            .collect();
        drop(nodes);
        self.push(dims, values, Op::Silu { input })
    }

    pub fn sigmoid(&self, input: Var) -> Var {
        let nodes = self.nodes.borrow();
        let node = &nodes[input.0];
        let dims = node.dims.clone();
        let values = node.values.iter().map(|&v| sigmoid_scalar(v)).collect();
        drop(nodes);
        self.push(dims, values, Op::Sigmoid { input })
    }

    /// Keeps values >= theta, zeroes the rest. Subgradient passes through
    /// the kept positions only.
    pub fn threshold_gate(&self, input: Var, theta: T) -> Var {
        let nodes = self.nodes.borrow();
        let node = &nodes[input.0];
        let dims = node.dims.clone();
        let values = node
            .values
            .iter()
            .map(|&v| if v >= theta { v } else { T::zero() })
            .collect();
        drop(nodes);
        self.push(dims, values, Op::ThresholdGate { input, theta })
    }

    pub fn avg_pool2(&self, input: Var) -> Result<Var> {
        let shape = self.field_shape(input)?;
        if shape.height % 2 != 0 || shape.width % 2 != 0 {
            return Err(Error::contract(format!(
                "avg_pool2 needs even spatial dims, got {}x{}",
                shape.height, shape.width
            )));
        }
        let (h2, w2) = (shape.height / 2, shape.width / 2);
        let nodes = self.nodes.borrow();
        let x = &nodes[input.0].values;
        let quarter = T::of(0.25);
        let mut values = vec![T::zero(); shape.channels * h2 * w2];
        for c in 0..shape.channels {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let base = (c * shape.height + 2 * y) * shape.width + 2 * xx;
                    let sum = x[base]
                        + x[base + 1]
                        + x[base + shape.width]
                        + x[base + shape.width + 1];
                    values[(c * h2 + y) * w2 + xx] = sum * quarter;
                }
            }
        }
        drop(nodes);
        Ok(self.push(
            vec![shape.channels, h2, w2],
            values,
            Op::AvgPool2 { input },
        ))
    }

    pub fn upsample_nearest2(&self, input: Var) -> Result<Var> {
        let shape = self.field_shape(input)?;
        let (h2, w2) = (shape.height * 2, shape.width * 2);
        let nodes = self.nodes.borrow();
        let x = &nodes[input.0].values;
        let mut values = vec![T::zero(); shape.channels * h2 * w2];
        for c in 0..shape.channels {
            for y in 0..h2 {
                for xx in 0..w2 {
                    values[(c * h2 + y) * w2 + xx] =
                        x[(c * shape.height + y / 2) * shape.width + xx / 2];
                }
            }
        }
        drop(nodes);
        Ok(self.push(
            vec![shape.channels, h2, w2],
            values,
            Op::UpsampleNearest2 { input },
        ))
    }

    pub fn concat_channels(&self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::contract("concat_channels needs at least one input"));
        }
        let first = self.field_shape(inputs[0])?;
        let mut channels = 0;
        for &v in inputs {
            let s = self.field_shape(v)?;
            if (s.height, s.width) != (first.height, first.width) {
                return Err(Error::contract(format!(
                    "concat_channels spatial mismatch: {}x{} vs {}x{}",
                    s.height, s.width, first.height, first.width
                )));
            }
            channels += s.channels;
        }
        let nodes = self.nodes.borrow();
        let mut values = Vec::with_capacity(channels * first.height * first.width);
        for &v in inputs {
            values.extend_from_slice(&nodes[v.0].values);
        }
        drop(nodes);
        Ok(self.push(
            vec![channels, first.height, first.width],
            values,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Contiguous channel slice of a field value.
    pub fn slice_channels(&self, input: Var, start: usize, count: usize) -> Result<Var> {
        let shape = self.field_shape(input)?;
        if start + count > shape.channels || count == 0 {
            return Err(Error::contract(format!(
                "channel slice {start}..{} out of {} channels",
                start + count,
                shape.channels
            )));
        }
        let per = shape.height * shape.width;
        let nodes = self.nodes.borrow();
        let values = nodes[input.0].values[start * per..(start + count) * per].to_vec();
        drop(nodes);
        Ok(self.push(
            vec![count, shape.height, shape.width],
            values,
            Op::SliceChannels { input, start },
        ))
    }

    pub fn sum_all(&self, input: Var) -> Var {
        let nodes = self.nodes.borrow();
        let total = nodes[input.0].values.iter().copied().sum();
        drop(nodes);
        self.push(vec![1], vec![total], Op::SumAll { input })
    }

    /// Mean squared error against a fixed target.
    pub fn mse_vs(&self, input: Var, target: &[T]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let x = &nodes[input.0].values;
        if x.len() != target.len() {
            return Err(Error::contract(format!(
                "mse_vs length mismatch: {} vs {}",
                x.len(),
                target.len()
            )));
        }
        let n = T::of_usize(x.len());
        let mut acc = T::zero();
        for (&a, &b) in x.iter().zip(target) {
            let d = a - b;
            acc += d * d;
        }
        let loss = acc / n;
        drop(nodes);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MseVs {
                input,
                target: target.to_vec(),
            },
        ))
    }

    // ---- backward ----

    /// Single reverse sweep from a finite scalar loss; returns parameter
    /// adjoints. Each recorded node is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].len() != 1 {
            return Err(Error::contract("backward expects a scalar loss"));
        }
        if !nodes[loss.0].values[0].is_finite() {
            return Err(Error::numeric("backward on a non-finite loss"));
        }
        let mut adjoints: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(vec![T::one()]);
        let mut grads = GradMap::new();

        for id in (0..=loss.0).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => grads.add(*pid, &adj),
                Op::Conv2d {
                    input,
                    kernel,
                    dilation,
                    groups,
                } => {
                    backward_conv2d(
                        &nodes,
                        &mut adjoints,
                        &adj,
                        node,
                        *input,
                        *kernel,
                        *dilation,
                        *groups,
                    );
                }
                Op::TemporalMix {
                    inputs,
                    kernel,
                    taps,
                } => {
                    let kdims = &nodes[kernel.0].dims;
                    let n_taps = kdims[1];
                    let channels = kdims[0];
                    let per = node.len() / channels;
                    {
                        let k = &nodes[kernel.0].values;
                        for (j, inp) in inputs.iter().enumerate() {
                            let slot = ensure(&mut adjoints, inp.0, nodes[inp.0].len());
                            for c in 0..channels {
                                let kv = k[c * n_taps + taps[j]];
                                for i in 0..per {
                                    slot[c * per + i] += kv * adj[c * per + i];
                                }
                            }
                        }
                    }
                    let mut kadj = vec![T::zero(); nodes[kernel.0].len()];
                    for (j, inp) in inputs.iter().enumerate() {
                        let xv = &nodes[inp.0].values;
                        for c in 0..channels {
                            let mut acc = T::zero();
                            for i in 0..per {
                                acc += xv[c * per + i] * adj[c * per + i];
                            }
                            kadj[c * n_taps + taps[j]] += acc;
                        }
                    }
                    add_into(ensure(&mut adjoints, kernel.0, kadj.len()), &kadj);
                }
                Op::AttnScores { q, k, scale } => {
                    let qd = &nodes[q.0].dims;
                    let kd = &nodes[k.0].dims;
                    let d = qd[0];
                    let n = qd[1] * qd[2];
                    let m = kd[1] * kd[2];
                    let qv = &nodes[q.0].values;
                    let kv = &nodes[k.0].values;
                    let mut qadj = vec![T::zero(); qv.len()];
                    let mut kadj = vec![T::zero(); kv.len()];
                    for c in 0..d {
                        for i in 0..n {
                            let mut acc = T::zero();
                            let row = i * m;
                            for j in 0..m {
                                let a = adj[row + j] * *scale;
                                acc += a * kv[c * m + j];
                                kadj[c * m + j] += a * qv[c * n + i];
                            }
                            qadj[c * n + i] += acc;
                        }
                    }
                    add_into(ensure(&mut adjoints, q.0, qadj.len()), &qadj);
                    add_into(ensure(&mut adjoints, k.0, kadj.len()), &kadj);
                }
                Op::SoftmaxRows { input } => {
                    let (n, m) = (node.dims[0], node.dims[1]);
                    let p = &node.values;
                    let mut iadj = vec![T::zero(); p.len()];
                    for i in 0..n {
                        let row = i * m;
                        let mut dot = T::zero();
                        for j in 0..m {
                            dot += adj[row + j] * p[row + j];
                        }
                        for j in 0..m {
                            iadj[row + j] = p[row + j] * (adj[row + j] - dot);
                        }
                    }
                    add_into(ensure(&mut adjoints, input.0, iadj.len()), &iadj);
                }
                Op::AttnApply { probs, v } => {
                    let pd = &nodes[probs.0].dims;
                    let (n, m) = (pd[0], pd[1]);
                    let c = nodes[v.0].dims[0];
                    let pv = &nodes[probs.0].values;
                    let vv = &nodes[v.0].values;
                    let mut padj = vec![T::zero(); pv.len()];
                    let mut vadj = vec![T::zero(); vv.len()];
                    for ch in 0..c {
                        let vo = ch * m;
                        let oo = ch * n;
                        for i in 0..n {
                            let a = adj[oo + i];
                            if a == T::zero() {
                                continue;
                            }
                            let row = i * m;
                            for j in 0..m {
                                padj[row + j] += a * vv[vo + j];
                                vadj[vo + j] += a * pv[row + j];
                            }
                        }
                    }
                    add_into(ensure(&mut adjoints, probs.0, padj.len()), &padj);
                    add_into(ensure(&mut adjoints, v.0, vadj.len()), &vadj);
                }
                Op::Add { a, b } => {
                    add_into(ensure(&mut adjoints, a.0, adj.len()), &adj);
                    add_into(ensure(&mut adjoints, b.0, adj.len()), &adj);
                }
                Op::Scale { input, factor } => {
                    let slot = ensure(&mut adjoints, input.0, adj.len());
                    for (s, &a) in slot.iter_mut().zip(&adj) {
                        *s += a * *factor;
                    }
                }
                Op::BroadcastAdd { input, bias } => {
                    add_into(ensure(&mut adjoints, input.0, adj.len()), &adj);
                    let channels = node.dims[0];
                    let per = node.dims[1] * node.dims[2];
                    let mut badj = vec![T::zero(); channels];
                    for c in 0..channels {
                        let mut acc = T::zero();
                        for i in 0..per {
                            acc += adj[c * per + i];
                        }
                        badj[c] = acc;
                    }
                    add_into(ensure(&mut adjoints, bias.0, channels), &badj);
                }
                Op::Silu { input } => {
                    let x = &nodes[input.0].values;
                    let slot = ensure(&mut adjoints, input.0, adj.len());
                    for i in 0..adj.len() {
                        let s = sigmoid_scalar(x[i]);
                        slot[i] += adj[i] * s * (T::one() + x[i] * (T::one() - s));
                    }
                }
                Op::Sigmoid { input } => {
                    let y = &node.values;
                    let slot = ensure(&mut adjoints, input.0, adj.len());
                    for i in 0..adj.len() {
                        slot[i] += adj[i] * y[i] * (T::one() - y[i]);
                    }
                }
                Op::ThresholdGate { input, theta } => {
                    let x = &nodes[input.0].values;
                    let slot = ensure(&mut adjoints, input.0, adj.len());
                    for i in 0..adj.len() {
                        if x[i] >= *theta {
                            slot[i] += adj[i];
                        }
                    }
                }
                Op::AvgPool2 { input } => {
                    let ishape = &nodes[input.0].dims;
                    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (h2, w2) = (h / 2, w / 2);
                    let quarter = T::of(0.25);
                    let slot = ensure(&mut adjoints, input.0, c * h * w);
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let a = adj[(ch * h2 + y) * w2 + xx] * quarter;
                                let base = (ch * h + 2 * y) * w + 2 * xx;
                                slot[base] += a;
                                slot[base + 1] += a;
                                slot[base + w] += a;
                                slot[base + w + 1] += a;
                            }
                        }
                    }
                }
                Op::UpsampleNearest2 { input } => {
                    let ishape = &nodes[input.0].dims;
                    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (h2, w2) = (h * 2, w * 2);
                    let slot = ensure(&mut adjoints, input.0, c * h * w);
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                slot[(ch * h + y / 2) * w + xx / 2] +=
                                    adj[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                }
                Op::ConcatChannels { inputs } => {
                    let mut offset = 0;
                    for inp in inputs {
                        let len = nodes[inp.0].len();
                        add_into(
                            ensure(&mut adjoints, inp.0, len),
                            &adj[offset..offset + len],
                        );
                        offset += len;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let per = node.dims[1] * node.dims[2];
                    let slot = ensure(&mut adjoints, input.0, nodes[input.0].len());
                    add_into(&mut slot[start * per..start * per + adj.len()], &adj);
                }
                Op::SumAll { input } => {
                    let a = adj[0];
                    let slot = ensure(&mut adjoints, input.0, nodes[input.0].len());
                    for s in slot {
                        *s += a;
                    }
                }
                Op::MseVs { input, target } => {
                    let x = &nodes[input.0].values;
                    let n = T::of_usize(x.len());
                    let two = T::of(2.0);
                    let a = adj[0];
                    let slot = ensure(&mut adjoints, input.0, x.len());
                    for i in 0..x.len() {
                        slot[i] += a * two * (x[i] - target[i]) / n;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn ensure<T: Real>(adjoints: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    let slot = &mut adjoints[idx];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); len]);
    }
    slot.as_mut().unwrap()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_conv2d<T: Real>(
    nodes: &[Node<T>],
    adjoints: &mut [Option<Vec<T>>],
    adj: &[T],
    out_node: &Node<T>,
    input: Var,
    kernel: Var,
    dilation: usize,
    groups: usize,
) {
    let ishape = &nodes[input.0].dims;
    let (in_c, h, w) = (ishape[0], ishape[1], ishape[2]);
    let kdims = &nodes[kernel.0].dims;
    let (out_c, icg, kh, kw) = (kdims[0], kdims[1], kdims[2], kdims[3]);
    let ocg = out_c / groups;
    let ry = (kh as isize - 1) / 2;
    let rx = (kw as isize - 1) / 2;
    debug_assert_eq!(out_node.dims[0], out_c);

    let x = &nodes[input.0].values;
    let k = &nodes[kernel.0].values;
    let mut iadj = vec![T::zero(); in_c * h * w];
    let mut kadj = vec![T::zero(); k.len()];
    for oc in 0..out_c {
        let g = oc / ocg;
        for ic in 0..icg {
            let in_ch = g * icg + ic;
            for ky in 0..kh {
                let dy = (ky as isize - ry) * dilation as isize;
                for kx in 0..kw {
                    let dx = (kx as isize - rx) * dilation as isize;
                    let kidx = ((oc * icg + ic) * kh + ky) * kw + kx;
                    let kv = k[kidx];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize).min(w as isize - dx).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize).min(h as isize - dy).max(0) as usize;
                    let mut kacc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let a_base = (oc * h + y) * w;
                        let s_base = (in_ch * h + sy) * w;
                        let a_row = &adj[a_base + x0..a_base + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let sx1 = (x1 as isize + dx) as usize;
                        let x_row = &x[s_base + sx0..s_base + sx1];
                        let i_row = &mut iadj[s_base + sx0..s_base + sx1];
                        for ((ia, &xv), &a) in i_row.iter_mut().zip(x_row).zip(a_row) {
                            *ia += kv * a;
                            kacc += xv * a;
                        }
                    }
                    kadj[kidx] += kacc;
                }
            }
        }
    }
    add_into(ensure(adjoints, input.0, iadj.len()), &iadj);
    add_into(ensure(adjoints, kernel.0, kadj.len()), &kadj);
}

/// Output of depth-wise projected attention: the attended field plus the
/// row-stochastic weight matrix (exposed for normalization checks).
pub struct AttentionOut {
    pub output: Var,
    pub weights: Var,
}

/// Attention with convolutional Q/K/V projections. Query tokens come from
/// `query_src`, key/value tokens from `kv_src`; projected query and key
/// channel counts must match.
pub fn cross_attention<T: Real>(
    tape: &Tape<T>,
    query_src: Var,
    kv_src: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<AttentionOut> {
    let q_channels = tape.dims(query_src)[0];
    let kv_channels = tape.dims(kv_src)[0];
    let q = tape.conv2d(query_src, wq, 1, q_channels)?;
    let k = tape.conv2d(kv_src, wk, 1, kv_channels)?;
    let v = tape.conv2d(kv_src, wv, 1, kv_channels)?;
    let qd = tape.dims(query_src);
    let scores = tape.attn_scores(q, k)?;
    let weights = tape.softmax_rows(scores)?;
    let output = tape.attn_apply(weights, v, qd[1], qd[2])?;
    Ok(AttentionOut { output, weights })
}

pub fn self_attention<T: Real>(
    tape: &Tape<T>,
    input: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<AttentionOut> {
    cross_attention(tape, input, input, wq, wk, wv)
}

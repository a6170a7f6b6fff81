//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns an arena of value buffers and a linear record of the ops
//! that produced them. Forward ops execute eagerly, allocate their output in
//! the arena, and push a node; [`Tape::backward`] replays the nodes in
//! reverse. The arena doubles as the live-memory instrument: every buffer
//! allocation bumps `live_elements`, and `peak_live_elements` keeps the
//! high-water mark until the tape is cleared.
//!
//! A tape is confined to one thread for the duration of a forward/backward
//! pass. Heavy kernels (convolution) parallelize internally over disjoint
//! output regions with fixed per-element accumulation order, so results are
//! bit-identical regardless of thread count.

mod adam;
mod finite_diff;

pub use adam::{adam_update, AdamState};
pub use finite_diff::{finite_difference_gradient, max_rel_error};

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("no labeled cells: every row is masked out")]
    NoLabeledCells,
    #[error("parameter has no gradient")]
    MissingGrad,
}

/// Handle to a buffer on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Loss reduction over masked-in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Node {
    Relu {
        x: Var,
        out: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: Var,
        out: Var,
        argmax: Vec<u32>,
    },
    NearestUpsample {
        x: Var,
        out: Var,
        factor: usize,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        out: Var,
    },
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
    },
    MaskedCrossEntropy {
        logits: Var,
        out: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        scale: f64,
    },
    ScatterToMap {
        rows: Var,
        out: Var,
        cells: Vec<(usize, usize)>,
    },
    RowsFromChw {
        x: Var,
        out: Var,
    },
    GatherRows {
        x: Var,
        out: Var,
        indices: Vec<usize>,
    },
    Reshape {
        x: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Scale {
        x: Var,
        out: Var,
        factor: f64,
    },
    Sum {
        x: Var,
        out: Var,
    },
    DotConst {
        x: Var,
        out: Var,
        coeffs: Vec<f64>,
    },
}

/// Recording tape. See module docs.
#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    live_elements: usize,
    peak_live_elements: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register a non-differentiable leaf (inputs, constants).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.alloc(t.data().to_vec(), t.shape().to_vec(), false)
    }

    /// Register a differentiable leaf. The data is snapshotted: later
    /// mutation of the source tensor does not affect the tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.alloc(t.data().to_vec(), t.shape().to_vec(), true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.bufs[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.bufs[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.bufs[v.0].shape.clone(), self.bufs[v.0].data.clone())
            .expect("tape buffer is consistent")
    }

    /// Gradient of the most recent backward pass, if one flowed to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.bufs[v.0].shape.clone(), g.to_vec()).expect("grad shape matches buf")
        })
    }

    pub fn live_elements(&self) -> usize {
        self.live_elements
    }

    pub fn peak_live_elements(&self) -> usize {
        self.peak_live_elements
    }

    /// Drop every buffer and node; resets the memory instrument.
    pub fn clear(&mut self) {
        self.bufs.clear();
        self.nodes.clear();
        self.grads.clear();
        self.live_elements = 0;
        self.peak_live_elements = 0;
    }

    fn alloc(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite values entered the tape"
        );
        self.live_elements += data.len();
        self.peak_live_elements = self.peak_live_elements.max(self.live_elements);
        self.bufs.push(Buf {
            data,
            shape,
            needs_grad,
        });
        Var(self.bufs.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.bufs[v.0].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.bufs[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.bufs[x.0].shape.clone();
        let ng = self.needs_grad(x);
        let out = self.alloc(out, shape, ng);
        self.nodes.push(Node::Relu { x, out });
        out
    }

    /// 2-D cross-correlation. `x` is `[C,H,W]` or `[B,C,H,W]`, `w` is
    /// `[Co,Ci,kH,kW]`, `b` is `[Co]`. Accumulation order per output element
    /// is fixed: input channels outer, kernel rows then columns inner.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        assert!(stride >= 1, "stride must be >= 1");
        let (batched, bsz, ci, h, wd) = unpack_spatial(&self.bufs[x.0].shape);
        let ws = &self.bufs[w.0].shape;
        if ws.len() != 4 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d weight must be rank 4, got {ws:?}"
            )));
        }
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d input has {ci} channels but weight expects {wci}"
            )));
        }
        if self.bufs[b.0].shape != [co] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d bias must be [{co}], got {:?}",
                self.bufs[b.0].shape
            )));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(AutodiffError::ShapeMismatch(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;

        let mut out = vec![0.0; bsz * co * oh * ow];
        {
            let xd = &self.bufs[x.0].data;
            let wdta = &self.bufs[w.0].data;
            let bd = &self.bufs[b.0].data;
            // one chunk per (batch, out-channel) plane; disjoint writes
            out.par_chunks_mut(oh * ow).enumerate().for_each(|(idx, plane)| {
                let bt = idx / co;
                let c_out = idx % co;
                let bias = bd[c_out];
                for r in 0..oh {
                    let ih0 = (r * stride) as isize - padding as isize;
                    for c in 0..ow {
                        let iw0 = (c * stride) as isize - padding as isize;
                        let mut acc = bias;
                        for c_in in 0..ci {
                            let xplane = &xd[(bt * ci + c_in) * h * wd..][..h * wd];
                            let wker = &wdta[(c_out * ci + c_in) * kh * kw..][..kh * kw];
                            for r_k in 0..kh {
                                let ih = ih0 + r_k as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[ih as usize * wd..][..wd];
                                let wrow = &wker[r_k * kw..][..kw];
                                let lo = (-iw0).max(0) as usize;
                                let hi = kw.min((wd as isize - iw0).max(0) as usize);
                                for c_k in lo..hi {
                                    acc += xrow[(iw0 + c_k as isize) as usize] * wrow[c_k];
                                }
                            }
                        }
                        plane[r * ow + c] = acc;
                    }
                }
            });
        }
        let mut oshape = if batched { vec![bsz] } else { vec![] };
        oshape.extend([co, oh, ow]);
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let out = self.alloc(out, oshape, ng);
        self.nodes.push(Node::Conv2d {
            x,
            w,
            b,
            out,
            stride,
            padding,
        });
        Ok(out)
    }

    /// Windowed maximum with floor semantics for partial edges. Ties go to
    /// the first index in scan order so the backward route is deterministic.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Var {
        assert!(k >= 1 && stride >= 1);
        let (batched, bsz, ch, h, wd) = unpack_spatial(&self.bufs[x.0].shape);
        assert!(k <= h && k <= wd, "pool window exceeds input extents");
        let oh = (h - k) / stride + 1;
        let ow = (wd - k) / stride + 1;
        let xd = &self.bufs[x.0].data;
        let mut out = vec![0.0; bsz * ch * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..bsz * ch {
            let xplane = &xd[p * h * wd..][..h * wd];
            for r in 0..oh {
                for c in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for r_k in 0..k {
                        for c_k in 0..k {
                            let idx = (r * stride + r_k) * wd + (c * stride + c_k);
                            if xplane[idx] > best {
                                best = xplane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[p * oh * ow + r * ow + c] = best;
                    argmax[p * oh * ow + r * ow + c] = (p * h * wd + best_idx) as u32;
                }
            }
        }
        let mut oshape = if batched { vec![bsz] } else { vec![] };
        oshape.extend([ch, oh, ow]);
        let ng = self.needs_grad(x);
        let out = self.alloc(out, oshape, ng);
        self.nodes.push(Node::MaxPool2d { x, out, argmax });
        out
    }

    /// Replicate each cell `factor`×`factor`.
    pub fn nearest_upsample(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let (batched, bsz, ch, h, wd) = unpack_spatial(&self.bufs[x.0].shape);
        let (oh, ow) = (h * factor, wd * factor);
        let xd = &self.bufs[x.0].data;
        let mut out = vec![0.0; bsz * ch * oh * ow];
        for p in 0..bsz * ch {
            for r in 0..oh {
                for c in 0..ow {
                    out[p * oh * ow + r * ow + c] = xd[p * h * wd + (r / factor) * wd + c / factor];
                }
            }
        }
        let mut oshape = if batched { vec![bsz] } else { vec![] };
        oshape.extend([ch, oh, ow]);
        let ng = self.needs_grad(x);
        let out = self.alloc(out, oshape, ng);
        self.nodes.push(Node::NearestUpsample { x, out, factor });
        out
    }

    /// Channel-wise concatenation of tensors with equal batch/spatial extents.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.bufs[a.0].shape.clone();
        let sb = self.bufs[b.0].shape.clone();
        if sa.len() != sb.len() || sa.len() < 3 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "concat_channels wants equal-rank >=3 tensors, got {sa:?} and {sb:?}"
            )));
        }
        let caxis = sa.len() - 3;
        if sa[..caxis] != sb[..caxis] || sa[caxis + 1..] != sb[caxis + 1..] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "concat_channels extents differ: {sa:?} vs {sb:?}"
            )));
        }
        let (batched, bsz, ca, h, wd) = unpack_spatial(&sa);
        let cb = sb[caxis];
        let plane = h * wd;
        let ad = &self.bufs[a.0].data;
        let bd = &self.bufs[b.0].data;
        let mut out = Vec::with_capacity(bsz * (ca + cb) * plane);
        for bt in 0..bsz {
            out.extend_from_slice(&ad[bt * ca * plane..][..ca * plane]);
            out.extend_from_slice(&bd[bt * cb * plane..][..cb * plane]);
        }
        let mut oshape = if batched { vec![bsz] } else { vec![] };
        oshape.extend([ca + cb, h, wd]);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.alloc(out, oshape, ng);
        self.nodes.push(Node::ConcatChannels { a, b, out });
        Ok(out)
    }

    /// `out = x·W + b` with `x` `[K]` or `[B,K]`, `W` `[K,O]`, `b` `[O]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let xs = self.bufs[x.0].shape.clone();
        let ws = self.bufs[w.0].shape.clone();
        if ws.len() != 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "fully_connected weight must be rank 2, got {ws:?}"
            )));
        }
        let (batched, bsz, k) = match xs.len() {
            1 => (false, 1, xs[0]),
            2 => (true, xs[0], xs[1]),
            _ => {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "fully_connected input must be rank 1 or 2, got {xs:?}"
                )))
            }
        };
        if ws[0] != k {
            return Err(AutodiffError::ShapeMismatch(format!(
                "fully_connected inner dims disagree: input {k} vs weight {}",
                ws[0]
            )));
        }
        let o = ws[1];
        if self.bufs[b.0].shape != [o] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "fully_connected bias must be [{o}], got {:?}",
                self.bufs[b.0].shape
            )));
        }
        let xd = &self.bufs[x.0].data;
        let wd = &self.bufs[w.0].data;
        let bd = &self.bufs[b.0].data;
        let mut out = vec![0.0; bsz * o];
        for bt in 0..bsz {
            let xrow = &xd[bt * k..][..k];
            let orow = &mut out[bt * o..][..o];
            orow.copy_from_slice(bd);
            for (ki, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[ki * o..][..o];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
        let oshape = if batched { vec![bsz, o] } else { vec![o] };
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let out = self.alloc(out, oshape, ng);
        self.nodes.push(Node::FullyConnected { x, w, b, out });
        Ok(out)
    }

    /// Cross entropy of per-row softmax against integer labels, averaged (or
    /// summed) over masked-in rows. Masked-out rows contribute nothing and
    /// receive exactly zero gradient.
    pub fn masked_softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var, AutodiffError> {
        let ls = self.bufs[logits.0].shape.clone();
        if ls.len() != 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "logits must be [rows, classes], got {ls:?}"
            )));
        }
        let (n, c) = (ls[0], ls[1]);
        if labels.len() != n || mask.len() != n {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{n} logit rows but {} labels / {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::NoLabeledCells);
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let ld = &self.bufs[logits.0].data;
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            debug_assert!(labels[i] < c, "label {} out of range", labels[i]);
            let row = &ld[i * c..][..c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += z.ln() - (row[labels[i]] - m);
        }
        loss *= scale;
        let ng = self.needs_grad(logits);
        let out = self.alloc(vec![loss], vec![], ng);
        self.nodes.push(Node::MaskedCrossEntropy {
            logits,
            out,
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            probs,
            scale,
        });
        Ok(out)
    }

    /// Place row `i` of `rows` (`[N,D]`) at `cells[i]` of a zero-filled
    /// `[D,H,W]` map. Cells must be distinct and in bounds.
    pub fn scatter_to_map(
        &mut self,
        rows: Var,
        cells: &[(usize, usize)],
        h: usize,
        w: usize,
    ) -> Var {
        let rs = self.bufs[rows.0].shape.clone();
        assert_eq!(rs.len(), 2, "scatter_to_map wants [N,D] rows");
        let (n, d) = (rs[0], rs[1]);
        assert_eq!(cells.len(), n);
        let rd = &self.bufs[rows.0].data;
        let mut out = vec![0.0; d * h * w];
        let mut seen = vec![false; h * w];
        for (i, &(r, c)) in cells.iter().enumerate() {
            assert!(r < h && c < w, "cell ({r},{c}) outside {h}x{w} map");
            assert!(!seen[r * w + c], "duplicate cell ({r},{c})");
            seen[r * w + c] = true;
            for j in 0..d {
                out[j * h * w + r * w + c] = rd[i * d + j];
            }
        }
        let ng = self.needs_grad(rows);
        let out = self.alloc(out, vec![d, h, w], ng);
        self.nodes.push(Node::ScatterToMap {
            rows,
            out,
            cells: cells.to_vec(),
        });
        out
    }

    /// Transpose `[C,H,W]` into `[H·W, C]` rows (row-major cell order).
    pub fn rows_from_chw(&mut self, x: Var) -> Var {
        let xs = self.bufs[x.0].shape.clone();
        assert_eq!(xs.len(), 3, "rows_from_chw wants [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = &self.bufs[x.0].data;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for cell in 0..h * w {
                out[cell * c + ch] = xd[ch * h * w + cell];
            }
        }
        let ng = self.needs_grad(x);
        let out = self.alloc(out, vec![h * w, c], ng);
        self.nodes.push(Node::RowsFromChw { x, out });
        out
    }

    /// Select rows of an `[N,D]` tensor by index. Duplicate indices are
    /// allowed; their gradients sum.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let xs = self.bufs[x.0].shape.clone();
        assert_eq!(xs.len(), 2, "gather_rows wants [N,D]");
        let (n, d) = (xs[0], xs[1]);
        let xd = &self.bufs[x.0].data;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < n, "row {i} out of range");
            out.extend_from_slice(&xd[i * d..][..d]);
        }
        let ng = self.needs_grad(x);
        let out = self.alloc(out, vec![indices.len(), d], ng);
        self.nodes.push(Node::GatherRows {
            x,
            out,
            indices: indices.to_vec(),
        });
        out
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.bufs[x.0].data.len(), "reshape must preserve numel");
        let data = self.bufs[x.0].data.clone();
        let ng = self.needs_grad(x);
        let out = self.alloc(data, shape, ng);
        self.nodes.push(Node::Reshape { x, out });
        out
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.bufs[a.0].shape, self.bufs[b.0].shape);
        let out: Vec<f64> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.alloc(out, shape, ng);
        self.nodes.push(Node::Mul { a, b, out });
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.bufs[a.0].shape, self.bufs[b.0].shape);
        let out: Vec<f64> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.alloc(out, shape, ng);
        self.nodes.push(Node::Add { a, b, out });
        out
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.bufs[x.0].data.iter().map(|&v| v * factor).collect();
        let shape = self.bufs[x.0].shape.clone();
        let ng = self.needs_grad(x);
        let out = self.alloc(out, shape, ng);
        self.nodes.push(Node::Scale { x, out, factor });
        out
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.bufs[x.0].data.iter().sum();
        let ng = self.needs_grad(x);
        let out = self.alloc(vec![s], vec![], ng);
        self.nodes.push(Node::Sum { x, out });
        out
    }

    /// Inner product with a constant coefficient tensor of the same shape.
    /// Linear in `x`: the gradient is exactly `coeffs`.
    pub fn dot_const(&mut self, x: Var, coeffs: &Tensor) -> Var {
        assert_eq!(self.bufs[x.0].shape, coeffs.shape());
        let s: f64 = self.bufs[x.0]
            .data
            .iter()
            .zip(coeffs.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let ng = self.needs_grad(x);
        let out = self.alloc(vec![s], vec![], ng);
        self.nodes.push(Node::DotConst {
            x,
            out,
            coeffs: coeffs.data().to_vec(),
        });
        out
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients from any previous backward
    /// call are overwritten, never accumulated; micro-batch accumulation is
    /// the caller's job (see [`accumulate_grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let numel = self.bufs[loss.0].data.len();
        if numel != 1 {
            return Err(AutodiffError::NonScalarLoss { numel });
        }
        self.grads = (0..self.bufs.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            self.backward_node(node);
        }
        self.nodes = nodes;
        Ok(())
    }

    fn out_grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        if !self.bufs[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.grads[v.0] = Some(contrib.to_vec()),
        }
    }

    fn backward_node(&mut self, node: &Node) {
        match node {
            Node::Relu { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let xd = &self.bufs[x.0].data;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_grad(*x, &gx);
            }
            Node::Conv2d {
                x,
                w,
                b,
                out,
                stride,
                padding,
            } => self.backward_conv2d(*x, *w, *b, *out, *stride, *padding),
            Node::MaxPool2d { x, out, argmax } => {
                let Some(g) = self.out_grad(*out) else { return };
                let mut gx = vec![0.0; self.bufs[x.0].data.len()];
                for (gi, &ai) in g.iter().zip(argmax) {
                    gx[ai as usize] += gi;
                }
                self.add_grad(*x, &gx);
            }
            Node::NearestUpsample { x, out, factor } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (_, bsz, ch, h, wd) = unpack_spatial(&self.bufs[x.0].shape);
                let f = *factor;
                let (oh, ow) = (h * f, wd * f);
                let mut gx = vec![0.0; self.bufs[x.0].data.len()];
                for p in 0..bsz * ch {
                    for r in 0..oh {
                        for c in 0..ow {
                            gx[p * h * wd + (r / f) * wd + c / f] += g[p * oh * ow + r * ow + c];
                        }
                    }
                }
                self.add_grad(*x, &gx);
            }
            Node::ConcatChannels { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let g = g.to_vec();
                let (_, bsz, ca, h, wd) = unpack_spatial(&self.bufs[a.0].shape);
                let cb = {
                    let sb = &self.bufs[b.0].shape;
                    sb[sb.len() - 3]
                };
                let plane = h * wd;
                let mut ga = vec![0.0; bsz * ca * plane];
                let mut gb = vec![0.0; bsz * cb * plane];
                for bt in 0..bsz {
                    let src = &g[bt * (ca + cb) * plane..][..(ca + cb) * plane];
                    ga[bt * ca * plane..][..ca * plane].copy_from_slice(&src[..ca * plane]);
                    gb[bt * cb * plane..][..cb * plane].copy_from_slice(&src[ca * plane..]);
                }
                self.add_grad(*a, &ga);
                self.add_grad(*b, &gb);
            }
            Node::FullyConnected { x, w, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let g = g.to_vec();
                let xs = &self.bufs[x.0].shape;
                let (bsz, k) = match xs.len() {
                    1 => (1, xs[0]),
                    _ => (xs[0], xs[1]),
                };
                let o = self.bufs[w.0].shape[1];
                let xd = &self.bufs[x.0].data;
                let wd = &self.bufs[w.0].data;
                let mut gx = vec![0.0; bsz * k];
                let mut gw = vec![0.0; k * o];
                let mut gb = vec![0.0; o];
                for bt in 0..bsz {
                    let grow = &g[bt * o..][..o];
                    let xrow = &xd[bt * k..][..k];
                    for ki in 0..k {
                        let wrow = &wd[ki * o..][..o];
                        let mut acc = 0.0;
                        for (gi, wi) in grow.iter().zip(wrow) {
                            acc += gi * wi;
                        }
                        gx[bt * k + ki] = acc;
                        let gwrow = &mut gw[ki * o..][..o];
                        for (gwv, gv) in gwrow.iter_mut().zip(grow) {
                            *gwv += xrow[ki] * gv;
                        }
                    }
                    for (gbv, gv) in gb.iter_mut().zip(grow) {
                        *gbv += gv;
                    }
                }
                self.add_grad(*x, &gx);
                self.add_grad(*w, &gw);
                self.add_grad(*b, &gb);
            }
            Node::MaskedCrossEntropy {
                logits,
                out,
                labels,
                mask,
                probs,
                scale,
            } => {
                let Some(g) = self.out_grad(*out) else { return };
                let gscale = g[0] * scale;
                let n = labels.len();
                let c = self.bufs[logits.0].shape[1];
                let mut gl = vec![0.0; n * c];
                for i in 0..n {
                    if !mask[i] {
                        continue; // stays exactly zero
                    }
                    for j in 0..c {
                        let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                        gl[i * c + j] = gscale * (probs[i * c + j] - indicator);
                    }
                }
                self.add_grad(*logits, &gl);
            }
            Node::ScatterToMap { rows, out, cells } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (n, d) = {
                    let s = &self.bufs[rows.0].shape;
                    (s[0], s[1])
                };
                let (h, w) = {
                    let s = &self.bufs[out.0].shape;
                    (s[1], s[2])
                };
                let mut gr = vec![0.0; n * d];
                for (i, &(r, c)) in cells.iter().enumerate() {
                    for j in 0..d {
                        gr[i * d + j] = g[j * h * w + r * w + c];
                    }
                }
                self.add_grad(*rows, &gr);
            }
            Node::RowsFromChw { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (c, h, w) = {
                    let s = &self.bufs[x.0].shape;
                    (s[0], s[1], s[2])
                };
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for cell in 0..h * w {
                        gx[ch * h * w + cell] = g[cell * c + ch];
                    }
                }
                self.add_grad(*x, &gx);
            }
            Node::GatherRows { x, out, indices } => {
                let Some(g) = self.out_grad(*out) else { return };
                let d = self.bufs[out.0].shape[1];
                let mut gx = vec![0.0; self.bufs[x.0].data.len()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[row * d + j];
                    }
                }
                self.add_grad(*x, &gx);
            }
            Node::Reshape { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let g = g.to_vec();
                self.add_grad(*x, &g);
            }
            Node::Mul { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.bufs[b.0].data)
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(&self.bufs[a.0].data)
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.add_grad(*a, &ga);
                self.add_grad(*b, &gb);
            }
            Node::Add { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let g = g.to_vec();
                self.add_grad(*a, &g);
                self.add_grad(*b, &g);
            }
            Node::Scale { x, out, factor } => {
                let Some(g) = self.out_grad(*out) else { return };
                let gx: Vec<f64> = g.iter().map(|&gv| gv * factor).collect();
                self.add_grad(*x, &gx);
            }
            Node::Sum { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let gx = vec![g[0]; self.bufs[x.0].data.len()];
                self.add_grad(*x, &gx);
            }
            Node::DotConst { x, out, coeffs } => {
                let Some(g) = self.out_grad(*out) else { return };
                let gx: Vec<f64> = coeffs.iter().map(|&cv| g[0] * cv).collect();
                self.add_grad(*x, &gx);
            }
        }
    }

    fn backward_conv2d(&mut self, x: Var, w: Var, b: Var, out: Var, stride: usize, padding: usize) {
        let Some(g) = self.out_grad(out) else { return };
        let g = g.to_vec();
        let (_, bsz, ci, h, wd) = unpack_spatial(&self.bufs[x.0].shape);
        let ws = &self.bufs[w.0].shape;
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = {
            let os = &self.bufs[out.0].shape;
            (os[os.len() - 2], os[os.len() - 1])
        };
        let xd = &self.bufs[x.0].data;
        let wdta = &self.bufs[w.0].data;

        // bias: one sum per out-channel
        let mut gb = vec![0.0; co];
        gb.par_iter_mut().enumerate().for_each(|(c_out, gbv)| {
            let mut acc = 0.0;
            for bt in 0..bsz {
                let plane = &g[(bt * co + c_out) * oh * ow..][..oh * ow];
                for &gv in plane {
                    acc += gv;
                }
            }
            *gbv = acc;
        });

        // weights: rows per out-channel are disjoint
        let mut gw = vec![0.0; co * ci * kh * kw];
        gw.par_chunks_mut(ci * kh * kw)
            .enumerate()
            .for_each(|(c_out, gwc)| {
                for bt in 0..bsz {
                    let gplane = &g[(bt * co + c_out) * oh * ow..][..oh * ow];
                    for r in 0..oh {
                        let ih0 = (r * stride) as isize - padding as isize;
                        for c in 0..ow {
                            let gv = gplane[r * ow + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let iw0 = (c * stride) as isize - padding as isize;
                            for c_in in 0..ci {
                                let xplane = &xd[(bt * ci + c_in) * h * wd..][..h * wd];
                                for r_k in 0..kh {
                                    let ih = ih0 + r_k as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let xrow = &xplane[ih as usize * wd..][..wd];
                                    let grow = &mut gwc[(c_in * kh + r_k) * kw..][..kw];
                                    let lo = (-iw0).max(0) as usize;
                                    let hi = kw.min((wd as isize - iw0).max(0) as usize);
                                    for c_k in lo..hi {
                                        grow[c_k] += gv * xrow[(iw0 + c_k as isize) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            });

        // input: planes per (batch, in-channel) are disjoint
        let mut gx = vec![0.0; xd.len()];
        gx.par_chunks_mut(h * wd).enumerate().for_each(|(idx, gxp)| {
            let bt = idx / ci;
            let c_in = idx % ci;
            for c_out in 0..co {
                let gplane = &g[(bt * co + c_out) * oh * ow..][..oh * ow];
                let wker = &wdta[(c_out * ci + c_in) * kh * kw..][..kh * kw];
                for r in 0..oh {
                    let ih0 = (r * stride) as isize - padding as isize;
                    for c in 0..ow {
                        let gv = gplane[r * ow + c];
                        if gv == 0.0 {
                            continue;
                        }
                        let iw0 = (c * stride) as isize - padding as isize;
                        for r_k in 0..kh {
                            let ih = ih0 + r_k as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let gxrow = &mut gxp[ih as usize * wd..][..wd];
                            let wrow = &wker[r_k * kw..][..kw];
                            let lo = (-iw0).max(0) as usize;
                            let hi = kw.min((wd as isize - iw0).max(0) as usize);
                            for c_k in lo..hi {
                                gxrow[(iw0 + c_k as isize) as usize] += gv * wrow[c_k];
                            }
                        }
                    }
                }
            }
        });

        self.add_grad(x, &gx);
        self.add_grad(w, &gw);
        self.add_grad(b, &gb);
    }
}

/// Sum `src` into `dst` elementwise. The explicit accumulation entry point
/// for micro-batch gradient summation.
pub fn accumulate_grad(dst: &mut Tensor, src: &Tensor) {
    assert_eq!(dst.shape(), src.shape(), "accumulate_grad shape mismatch");
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Row-wise softmax of a `[rows, classes]` tensor. Forward-only helper for
/// turning logits into probabilities at prediction time.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    assert_eq!(logits.shape().len(), 2);
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &logits.data()[i * c..][..c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= z;
        }
    }
    Tensor::new(vec![n, c], out).expect("shape consistent")
}

/// Interpret a shape as `[B,C,H,W]` or `[C,H,W]` (batch of 1).
/// Returns (batched, batch, channels, height, width).
fn unpack_spatial(shape: &[usize]) -> (bool, usize, usize, usize, usize) {
    match shape.len() {
        3 => (false, 1, shape[0], shape[1], shape[2]),
        4 => (true, shape[0], shape[1], shape[2], shape[3]),
        _ => panic!("expected [C,H,W] or [B,C,H,W], got {shape:?}"),
    }
}

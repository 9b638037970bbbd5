//! Define-by-run reverse-mode autodiff. Ops append nodes to a tape as they
//! execute; `backward` replays the tape in reverse. Append order is already a
//! topological order, so no explicit sort is needed.

use crate::error::{Error, Result};
use crate::kernels::{self, BnStats};
use crate::losses;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-channel running statistics owned by a batch-norm layer. Training-mode
/// forward updates them in place at record time.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = conv(x, w) + b; k in {1, 3}, stride 1, shape-preserving padding.
    Conv2d { x: usize, w: usize, b: usize, k: usize },
    MaxPool2x2 { x: usize, arg: Vec<u32> },
    Upsample2x { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddN { xs: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    /// Batch norm; stats are the values used for normalization (batch stats in
    /// training, running stats in eval). `train` selects the backward formula.
    BatchNorm { x: usize, gamma: usize, beta: usize, stats: BnStats, train: bool },
    /// Mirror-pad bottom/right on H and W (edge pixel not repeated).
    ReflectPad { x: usize, pad_h: usize, pad_w: usize },
    /// View of image `n`, channels intact, spatial window (top, left, h, w).
    Crop { x: usize, n: usize, top: usize, left: usize, h: usize, w: usize },
    /// Single pixel of image `n` across channels, shaped (1, C, 1, 1).
    PixelGather { x: usize, n: usize, row: usize, col: usize },
    /// Replicate a (1, C, 1, 1) vector over an h x w plane.
    BroadcastHw { x: usize, h: usize, w: usize },
    /// Channel concatenation of two maps with equal N, H, W.
    ConcatC { a: usize, b: usize },
    /// Loss primitives store d(loss)/d(input) computed at record time.
    LossPrim { x: usize, grad: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Gradient tape. One tape per forward pass; `backward` may run once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_ran: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by all node values on the tape; gradients excluded.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel() * std::mem::size_of::<f64>()).sum()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss with respect to `v`; present only after
    /// `backward` for nodes that required grad and were reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    // -- elementwise -------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(Op::Relu { x: x.0 }, v, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid { x: x.0 }, v, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(Op::Abs { x: x.0 }, v, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(Op::Scale { x: x.0, c }, v, rg)
    }

    fn binary_values(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, bool)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok((sa.to_vec(), self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_values("add", a, b)?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, Tensor::new(shape, data)?, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_values("sub", a, b)?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, Tensor::new(shape, data)?, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_values("mul", a, b)?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, Tensor::new(shape, data)?, rg))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("add_n", "empty input list"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = vec![0.0; self.value(*first).numel()];
        let mut rg = false;
        for &x in xs {
            if self.value(x).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            for (d, &v) in data.iter_mut().zip(self.value(x).data()) {
                *d += v;
            }
            rg |= self.rg(x);
        }
        let ids = xs.iter().map(|v| v.0).collect();
        Ok(self.push(Op::AddN { xs: ids }, Tensor::new(shape, data)?, rg))
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Mean { x: x.0 }, Tensor::scalar(s / n), rg)
    }

    // -- structured ops ----------------------------------------------------

    fn nchw(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(Error::invalid(op, format!("expected 4-d input, got shape {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Convolution with square kernel 1 or 3, stride 1, shape-preserving
    /// padding. Weight is (OC, IC, k, k), bias (OC). The input gradient is
    /// computed only when the input itself requires grad.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims = self.nchw("conv2d", x)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] || !(ws[2] == 1 || ws[2] == 3) {
            return Err(Error::invalid(
                "conv2d",
                format!("weight must be (oc, ic, k, k) with k in {{1, 3}}, got {ws:?}"),
            ));
        }
        if ws[1] != dims.1 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.value(x).shape().to_vec(),
                rhs: ws,
            });
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.value(b).shape().to_vec(),
                rhs: vec![ws[0]],
            });
        }
        let (oc, ic, k) = (ws[0], ws[1], ws[2]);
        let out = kernels::conv2d_fwd(
            self.value(x).data(),
            dims,
            self.value(w).data(),
            (oc, ic, k),
            self.value(b).data(),
        );
        let shape = vec![dims.0, oc, dims.2, dims.3];
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Conv2d { x: x.0, w: w.0, b: b.0, k }, Tensor::new(shape, out)?, rg))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw("maxpool2x2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("maxpool2x2", format!("odd spatial size {h}x{w}")));
        }
        let (out, arg) = kernels::maxpool2x2_fwd(self.value(x).data(), (n, c, h, w));
        let rg = self.rg(x);
        Ok(self.push(
            Op::MaxPool2x2 { x: x.0, arg },
            Tensor::new(vec![n, c, h / 2, w / 2], out)?,
            rg,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.nchw("upsample2x", x)?;
        let out = kernels::upsample2x_fwd(self.value(x).data(), (n, c, h, w));
        let rg = self.rg(x);
        Ok(self.push(Op::Upsample2x { x: x.0 }, Tensor::new(vec![n, c, 2 * h, 2 * w], out)?, rg))
    }

    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnRunning,
    ) -> Result<Var> {
        let dims = self.nchw("batchnorm", x)?;
        if self.value(gamma).numel() != dims.1 || self.value(beta).numel() != dims.1 {
            return Err(Error::invalid(
                "batchnorm",
                format!("{} channels, gamma numel {}", dims.1, self.value(gamma).numel()),
            ));
        }
        let (out, stats) = kernels::batchnorm_train_fwd(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mut running.mean,
            &mut running.var,
        );
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, stats, train: true },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnRunning,
    ) -> Result<Var> {
        let dims = self.nchw("batchnorm", x)?;
        let (out, stats) = kernels::batchnorm_eval_fwd(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            &running.mean,
            &running.var,
        );
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, stats, train: false },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    pub fn reflect_pad(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.nchw("reflect_pad", x)?;
        let (oh, ow) = (h + pad_h, w + pad_w);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                let iy = reflect_index(oy, h);
                for ox in 0..ow {
                    let ix = reflect_index(ox, w);
                    out[p * oh * ow + oy * ow + ox] = src[p * h * w + iy * w + ix];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::ReflectPad { x: x.0, pad_h, pad_w }, Tensor::new(vec![n, c, oh, ow], out)?, rg))
    }

    pub fn crop(
        &mut self,
        x: Var,
        n: usize,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (nn, c, ih, iw) = self.nchw("crop", x)?;
        if n >= nn || top + h > ih || left + w > iw || h == 0 || w == 0 {
            return Err(Error::invalid(
                "crop",
                format!("window n={n} ({top}, {left}) {h}x{w} outside ({nn}, {c}, {ih}, {iw})"),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                let s = (n * c + ci) * ih * iw + (top + y) * iw + left;
                out[ci * h * w + y * w..][..w].copy_from_slice(&src[s..s + w]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Crop { x: x.0, n, top, left, h, w }, Tensor::new(vec![1, c, h, w], out)?, rg))
    }

    pub fn pixel_gather(&mut self, x: Var, n: usize, row: usize, col: usize) -> Result<Var> {
        let (nn, c, h, w) = self.nchw("pixel_gather", x)?;
        if n >= nn || row >= h || col >= w {
            return Err(Error::invalid(
                "pixel_gather",
                format!("pixel n={n} ({row}, {col}) outside ({nn}, {c}, {h}, {w})"),
            ));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = (0..c).map(|ci| src[(n * c + ci) * h * w + row * w + col]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Op::PixelGather { x: x.0, n, row, col },
            Tensor::new(vec![1, c, 1, 1], out)?,
            rg,
        ))
    }

    pub fn broadcast_hw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 || s[0] != 1 || s[2] != 1 || s[3] != 1 {
            return Err(Error::invalid(
                "broadcast_hw",
                format!("expected (1, c, 1, 1), got {s:?}"),
            ));
        }
        let c = s[1];
        let src = self.value(x).data().to_vec();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            out[ci * h * w..][..h * w].fill(src[ci]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::BroadcastHw { x: x.0, h, w }, Tensor::new(vec![1, c, h, w], out)?, rg))
    }

    pub fn concat_c(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.nchw("concat_c", a)?;
        let (nb, cb, hb, wb) = self.nchw("concat_c", b)?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch {
                op: "concat_c",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let plane = ha * wa;
        let (sa, sb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; na * (ca + cb) * plane];
        for n in 0..na {
            let dst = &mut out[n * (ca + cb) * plane..][..(ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&sa[n * ca * plane..][..ca * plane]);
            dst[ca * plane..].copy_from_slice(&sb[n * cb * plane..][..cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::ConcatC { a: a.0, b: b.0 },
            Tensor::new(vec![na, ca + cb, ha, wa], out)?,
            rg,
        ))
    }

    // -- loss primitives ---------------------------------------------------

    /// Lovász hinge over the flattened input; labels are +-1 per element.
    pub fn lovasz_hinge(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        if self.value(logits).numel() != labels.len() {
            return Err(Error::invalid(
                "lovasz_hinge",
                format!("{} logits vs {} labels", self.value(logits).numel(), labels.len()),
            ));
        }
        let (loss, grad) = losses::lovasz_hinge_with_grad(self.value(logits).data(), labels);
        let rg = self.rg(logits);
        Ok(self.push(Op::LossPrim { x: logits.0, grad }, Tensor::scalar(loss), rg))
    }

    /// Mean binary cross entropy; `pred` holds probabilities.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if self.value(pred).numel() != target.len() {
            return Err(Error::invalid(
                "bce",
                format!("{} predictions vs {} targets", self.value(pred).numel(), target.len()),
            ));
        }
        let (loss, grad) = losses::bce_with_grad(self.value(pred).data(), target);
        let rg = self.rg(pred);
        Ok(self.push(Op::LossPrim { x: pred.0, grad }, Tensor::scalar(loss), rg))
    }

    /// Scalar loss term computed outside the tape. The caller supplies the
    /// value and d(value)/d(input); backward chains it like any other op.
    pub fn external_loss(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if self.value(x).numel() != grad.len() {
            return Err(Error::invalid(
                "external_loss",
                format!("{} inputs vs {} gradient entries", self.value(x).numel(), grad.len()),
            ));
        }
        let rg = self.rg(x);
        Ok(self.push(Op::LossPrim { x: x.0, grad }, Tensor::scalar(value), rg))
    }

    /// Soft Dice loss; `pred` holds probabilities.
    pub fn dice(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if self.value(pred).numel() != target.len() {
            return Err(Error::invalid(
                "dice",
                format!("{} predictions vs {} targets", self.value(pred).numel(), target.len()),
            ));
        }
        let (loss, grad) = losses::dice_with_grad(self.value(pred).data(), target);
        let rg = self.rg(pred);
        Ok(self.push(Op::LossPrim { x: pred.0, grad }, Tensor::scalar(loss), rg))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Errors if the loss is not a scalar or
    /// if backward already ran on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(Error::BackwardAlreadyRan);
        }
        self.backward_ran = true;
        let ls = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape: ls });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.accumulate(id, &dy, &mut grads);
            let shape = self.nodes[id].value.shape().to_vec();
            self.nodes[id].grad = Some(Tensor::new(shape, dy)?);
        }
        Ok(())
    }

    /// Routes `dy` (gradient at node `id`) into the node's inputs.
    fn accumulate(&mut self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |target: usize,
                          nodes: &[Node],
                          grads: &mut [Option<Vec<f64>>],
                          contrib: &[f64]| {
            if !nodes[target].requires_grad {
                return;
            }
            let slot =
                grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
            for (g, &c) in slot.iter_mut().zip(contrib) {
                *g += c;
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let contrib: Vec<f64> = self.nodes[*x]
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                add_to(*x, &self.nodes, grads, &contrib);
            }
            Op::Sigmoid { x } => {
                let contrib: Vec<f64> = self.nodes[id]
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                add_to(*x, &self.nodes, grads, &contrib);
            }
            Op::Abs { x } => {
                let contrib: Vec<f64> = self.nodes[*x]
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_to(*x, &self.nodes, grads, &contrib);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                add_to(a, &self.nodes, grads, dy);
                add_to(b, &self.nodes, grads, dy);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                add_to(a, &self.nodes, grads, dy);
                let neg: Vec<f64> = dy.iter().map(|&g| -g).collect();
                add_to(b, &self.nodes, grads, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> =
                    self.nodes[b].value.data().iter().zip(dy).map(|(&v, &g)| v * g).collect();
                let db: Vec<f64> =
                    self.nodes[a].value.data().iter().zip(dy).map(|(&v, &g)| v * g).collect();
                add_to(a, &self.nodes, grads, &da);
                add_to(b, &self.nodes, grads, &db);
            }
            Op::Scale { x, c } => {
                let contrib: Vec<f64> = dy.iter().map(|&g| g * c).collect();
                add_to(*x, &self.nodes, grads, &contrib);
            }
            Op::AddN { xs } => {
                for x in xs.clone() {
                    add_to(x, &self.nodes, grads, dy);
                }
            }
            Op::Sum { x } => {
                let contrib = vec![dy[0]; self.nodes[*x].value.numel()];
                add_to(*x, &self.nodes, grads, &contrib);
            }
            Op::Mean { x } => {
                let n = self.nodes[*x].value.numel();
                let contrib = vec![dy[0] / n as f64; n];
                add_to(*x, &self.nodes, grads, &contrib);
            }
            Op::Conv2d { x, w, b, k } => {
                let (x, w, b, k) = (*x, *w, *b, *k);
                let xs = self.nodes[x].value.shape();
                let dims = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.nodes[w].value.shape();
                let need_dx = self.nodes[x].requires_grad;
                let (dx, dw, db) = kernels::conv2d_bwd(
                    self.nodes[x].value.data(),
                    dims,
                    self.nodes[w].value.data(),
                    (ws[0], ws[1], k),
                    dy,
                    need_dx,
                );
                if let Some(dx) = dx {
                    add_to(x, &self.nodes, grads, &dx);
                }
                add_to(w, &self.nodes, grads, &dw);
                add_to(b, &self.nodes, grads, &db);
            }
            Op::MaxPool2x2 { x, arg } => {
                let xs = self.nodes[*x].value.shape();
                let dx = kernels::maxpool2x2_bwd(dy, arg, (xs[0], xs[1], xs[2], xs[3]));
                add_to(*x, &self.nodes, grads, &dx);
            }
            Op::Upsample2x { x } => {
                let xs = self.nodes[*x].value.shape();
                let dx = kernels::upsample2x_bwd(dy, (xs[0], xs[1], xs[2], xs[3]));
                add_to(*x, &self.nodes, grads, &dx);
            }
            Op::BatchNorm { x, gamma, beta, stats, train } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let xs = self.nodes[x].value.shape();
                let dims = (xs[0], xs[1], xs[2], xs[3]);
                let stats = stats.clone();
                let (dx, dgamma, dbeta) = kernels::batchnorm_bwd(
                    self.nodes[x].value.data(),
                    dims,
                    self.nodes[gamma].value.data(),
                    &stats,
                    dy,
                    train,
                );
                add_to(x, &self.nodes, grads, &dx);
                add_to(gamma, &self.nodes, grads, &dgamma);
                add_to(beta, &self.nodes, grads, &dbeta);
            }
            Op::ReflectPad { x, pad_h, pad_w } => {
                let xs = self.nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h + pad_h, w + pad_w);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..oh {
                        let iy = reflect_index(oy, h);
                        for ox in 0..ow {
                            let ix = reflect_index(ox, w);
                            dx[p * h * w + iy * w + ix] += dy[p * oh * ow + oy * ow + ox];
                        }
                    }
                }
                add_to(*x, &self.nodes, grads, &dx);
            }
            Op::Crop { x, n, top, left, h, w } => {
                let (x, n, top, left, h, w) = (*x, *n, *top, *left, *h, *w);
                let xs = self.nodes[x].value.shape();
                let (c, ih, iw) = (xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; self.nodes[x].value.numel()];
                for ci in 0..c {
                    for y in 0..h {
                        let d = (n * c + ci) * ih * iw + (top + y) * iw + left;
                        for xx in 0..w {
                            dx[d + xx] += dy[ci * h * w + y * w + xx];
                        }
                    }
                }
                add_to(x, &self.nodes, grads, &dx);
            }
            Op::PixelGather { x, n, row, col } => {
                let (x, n, row, col) = (*x, *n, *row, *col);
                let xs = self.nodes[x].value.shape();
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; self.nodes[x].value.numel()];
                for ci in 0..c {
                    dx[(n * c + ci) * h * w + row * w + col] = dy[ci];
                }
                add_to(x, &self.nodes, grads, &dx);
            }
            Op::BroadcastHw { x, h, w } => {
                let (x, h, w) = (*x, *h, *w);
                let c = self.nodes[x].value.numel();
                let mut dx = vec![0.0; c];
                for ci in 0..c {
                    dx[ci] = dy[ci * h * w..][..h * w].iter().sum();
                }
                add_to(x, &self.nodes, grads, &dx);
            }
            Op::ConcatC { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = vec![0.0; self.nodes[a].value.numel()];
                let mut db = vec![0.0; self.nodes[b].value.numel()];
                for n in 0..sa[0] {
                    let src = &dy[n * (ca + cb) * plane..][..(ca + cb) * plane];
                    da[n * ca * plane..][..ca * plane].copy_from_slice(&src[..ca * plane]);
                    db[n * cb * plane..][..cb * plane].copy_from_slice(&src[ca * plane..]);
                }
                add_to(a, &self.nodes, grads, &da);
                add_to(b, &self.nodes, grads, &db);
            }
            Op::LossPrim { x, grad } => {
                let contrib: Vec<f64> = grad.iter().map(|&g| g * dy[0]).collect();
                add_to(*x, &self.nodes, grads, &contrib);
            }
        }
    }
}

/// Mirror index without repeating the edge: for size 4, indices map
/// 0 1 2 3 | 2 1 0 1 2 ...
fn reflect_index(i: usize, size: usize) -> usize {
    if i < size {
        return i;
    }
    let period = 2 * (size - 1).max(1);
    let m = i % period;
    if m < size {
        m
    } else {
        period - m
    }
}

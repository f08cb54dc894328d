//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates gradients into the
//! [`ParamStore`] for every parameter leaf reachable from the loss.

use std::collections::HashMap;

use crate::autodiff::kernels::{self, ConvGeom, Window};
use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Upsample {
        input: Var,
        in_win: Window,
        out_win: Window,
    },
    Crop {
        input: Var,
        from: Window,
        to: Window,
    },
    Concat {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Pick {
        x: Var,
        index: usize,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Bce {
        p: Var,
        label: f64,
        clamp: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape. Build one per forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A tape that keeps forward values only; `backward` is rejected.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// Windowed convolution. `x` holds `[C_in, in_win]`; the result holds
    /// `[C_out, out_win]` where `out_win` lives in the output frame.
    pub fn conv2d_window(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        in_win: Window,
        out_win: Window,
    ) -> Result<Var> {
        let (c_in, rows, cols) = self.value(x).dims3()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [c_out, k_in, kh, kw] = kshape[..] else {
            return shape_err(format!("kernel must be [C_out, C_in, k, k], got {kshape:?}"));
        };
        if k_in != c_in {
            return shape_err(format!(
                "input has {c_in} channels but kernel expects {k_in}"
            ));
        }
        if kh != kw {
            return shape_err(format!("non-square kernel {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("stride must be positive");
        }
        if (rows, cols) != (in_win.rows, in_win.cols) {
            return shape_err(format!(
                "input spatial size {rows}x{cols} does not match its window {in_win:?}"
            ));
        }
        if in_win.height + 2 * padding < kh || in_win.width + 2 * padding < kw {
            return shape_err(format!(
                "kernel {kh} larger than padded input {}x{}",
                in_win.height + 2 * padding,
                in_win.width + 2 * padding
            ));
        }
        let out_h = kernels::conv_output_size(in_win.height, kh, stride, padding);
        let out_w = kernels::conv_output_size(in_win.width, kw, stride, padding);
        if (out_win.height, out_win.width) != (out_h, out_w) {
            return shape_err(format!(
                "output window frame {}x{} does not match conv output {out_h}x{out_w}",
                out_win.height, out_win.width
            ));
        }
        let needed = kernels::conv_input_window(&out_win, in_win.height, in_win.width, kh, stride, padding);
        if needed.area() > 0 && !in_win.contains(&needed) {
            return shape_err(format!(
                "input window {in_win:?} does not cover required {needed:?}"
            ));
        }
        let geom = ConvGeom {
            in_channels: c_in,
            out_channels: c_out,
            kernel: kh,
            stride,
            padding,
            in_win,
            out_win,
        };
        let (out, cols) =
            kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(vec![c_out, out_win.rows, out_win.cols], out)?;
        let cols = self.record.then_some(cols);
        Ok(self.push(
            value,
            Op::Conv {
                input: x,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Full-map convolution.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        let k = *self.value(kernel).shape().last().unwrap_or(&0);
        if h + 2 * padding < k || w + 2 * padding < k || stride == 0 {
            return shape_err(format!(
                "invalid convolution of {h}x{w} input with kernel {k}, stride {stride}, padding {padding}"
            ));
        }
        let out = Window::full(
            kernels::conv_output_size(h, k, stride, padding),
            kernels::conv_output_size(w, k, stride, padding),
        );
        self.conv2d_window(x, kernel, stride, padding, Window::full(h, w), out)
    }

    pub fn upsample2x_window(&mut self, x: Var, in_win: Window, out_win: Window) -> Result<Var> {
        let (c, rows, cols) = self.value(x).dims3()?;
        if (rows, cols) != (in_win.rows, in_win.cols) {
            return shape_err("upsample input does not match its window");
        }
        if in_win.height == 0 || in_win.width == 0 {
            return shape_err("upsample of an empty map");
        }
        if (out_win.height, out_win.width) != (2 * in_win.height, 2 * in_win.width) {
            return shape_err("upsample output frame must be twice the input frame");
        }
        let needed = kernels::upsample_input_window(&out_win, in_win.height, in_win.width);
        if out_win.area() > 0 && !in_win.contains(&needed) {
            return shape_err(format!(
                "upsample input window {in_win:?} does not cover required {needed:?}"
            ));
        }
        let out = kernels::upsample2x_forward(self.value(x).data(), c, &in_win, &out_win);
        let value = Tensor::new(vec![c, out_win.rows, out_win.cols], out)?;
        Ok(self.push(
            value,
            Op::Upsample {
                input: x,
                in_win,
                out_win,
            },
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        self.upsample2x_window(x, Window::full(h, w), Window::full(2 * h, 2 * w))
    }

    /// Restricts a windowed map to a sub-window.
    pub fn crop(&mut self, x: Var, from: Window, to: Window) -> Result<Var> {
        let (c, rows, cols) = self.value(x).dims3()?;
        if (rows, cols) != (from.rows, from.cols) || !from.contains(&to) {
            return shape_err(format!("cannot crop {from:?} to {to:?}"));
        }
        if from == to {
            return Ok(x);
        }
        let out = kernels::crop_forward(self.value(x).data(), c, &from, &to);
        let value = Tensor::new(vec![c, to.rows, to.cols], out)?;
        Ok(self.push(value, Op::Crop { input: x, from, to }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (ha, wa) != (hb, wb) {
            return shape_err(format!(
                "cannot concatenate {ha}x{wa} with {hb}x{wb} along channels"
            ));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Adds `bias[c]` to every cell of channel `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(bias).len() != c {
            return shape_err(format!(
                "bias of length {} for {c} channels",
                self.value(bias).len()
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (ch, plane) in out.chunks_mut((h * w).max(1)).enumerate().take(c) {
            plane.iter_mut().for_each(|v| *v += b[ch]);
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| sigmoid(t.data()[i]));
        self.push(value, Op::Sigmoid { x })
    }

    /// Selects one element (by flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return shape_err(format!("index {index} outside tensor of {} values", t.len()));
        }
        let value = Tensor::scalar(t.data()[index]);
        Ok(self.push(value, Op::Pick { x, index }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i] * factor);
        self.push(value, Op::Scale { x, factor })
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or(Error::EmptyInput)?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Binary cross-entropy of a scalar probability against a 0/1 label,
    /// with the probability clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, p: Var, label: f64, clamp: f64) -> Result<Var> {
        if !self.value(p).is_scalar() {
            return shape_err("bce expects a scalar probability");
        }
        let q = self.value(p).item().clamp(clamp, 1.0 - clamp);
        let loss = -label * q.ln() - (1.0 - label) * (1.0 - q).ln();
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, label, clamp }))
    }

    /// Activation pattern of every ReLU on the tape.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(self.value(x).data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Back-propagates from a scalar `loss`, accumulating into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        assert!(self.record, "backward on an inference-only tape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                Op::Conv {
                    input,
                    kernel,
                    geom,
                    cols,
                } => {
                    let cols = cols.as_ref().expect("recorded tape keeps patches");
                    let mut dk = Tensor::zeros(self.value(*kernel).shape());
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    kernels::conv2d_backward(
                        g.data(),
                        self.value(*kernel).data(),
                        cols,
                        geom,
                        Some(dk.data_mut()),
                        Some(dx.data_mut()),
                    );
                    accumulate(&mut grads, *kernel, dk);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Upsample {
                    input,
                    in_win,
                    out_win,
                } => {
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    let c = dx.shape()[0];
                    kernels::upsample2x_backward(g.data(), c, in_win, out_win, dx.data_mut());
                    accumulate(&mut grads, *input, dx);
                }
                Op::Crop { input, from, to } => {
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    let c = dx.shape()[0];
                    kernels::crop_backward(g.data(), c, from, to, dx.data_mut());
                    accumulate(&mut grads, *input, dx);
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).len();
                    let data = g.into_data();
                    let ga = Tensor::new(self.value(*a).shape().to_vec(), data[..na].to_vec())?;
                    let gb = Tensor::new(self.value(*b).shape().to_vec(), data[na..].to_vec())?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias { x, bias } => {
                    let c = self.value(*bias).len();
                    let plane = g.len() / c.max(1);
                    let gb_data: Vec<f64> = if plane == 0 {
                        vec![0.0; c]
                    } else {
                        g.data().chunks(plane).map(|ch| ch.iter().sum()).collect()
                    };
                    let gb = Tensor::new(self.value(*bias).shape().to_vec(), gb_data)?;
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let ga = Tensor::from_fn(va.shape(), |i| g.data()[i] * vb.data()[i]);
                    let gb = Tensor::from_fn(vb.shape(), |i| g.data()[i] * va.data()[i]);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu { x } => {
                    let vx = self.value(*x);
                    let gx = Tensor::from_fn(vx.shape(), |i| {
                        if vx.data()[i] > 0.0 {
                            g.data()[i]
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let y = &node.value;
                    let gx = Tensor::from_fn(y.shape(), |i| {
                        let s = y.data()[i];
                        g.data()[i] * s * (1.0 - s)
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Pick { x, index } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    gx.data_mut()[*index] = g.item();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum { x } => {
                    let gx = Tensor::full(self.value(*x).shape(), g.item());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale { x, factor } => {
                    let gx = Tensor::from_fn(g.shape(), |i| g.data()[i] * factor);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Bce { p, label, clamp } => {
                    let raw = self.value(*p).item();
                    let d = if raw < *clamp || raw > 1.0 - *clamp {
                        0.0
                    } else {
                        -label / raw + (1.0 - label) / (1.0 - raw)
                    };
                    let gp = Tensor::full(self.value(*p).shape(), g.item() * d);
                    accumulate(&mut grads, *p, gp);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Logistic function, kept strictly inside (0, 1) even where `f64` saturates.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

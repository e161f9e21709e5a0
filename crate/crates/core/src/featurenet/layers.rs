//! Differentiable layers with hand-written backward passes.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, Array3, Grads, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ChannelAffine {
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
#[derive(Clone, Debug)]
pub(crate) struct BasicBlock {
    pub main: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv(Conv2d),
    /// Per-channel `x * scale + shift` (batch norm with frozen statistics).
    Affine(ChannelAffine),
    Relu,
    MaxPool(MaxPool2d),
    Block(Box<BasicBlock>),
}

pub(crate) enum Cache {
    Conv { cols: Vec<f64>, in_shape: (usize, usize, usize) },
    Affine { input: Array3 },
    Relu { output: Array3 },
    MaxPool { argmax: Vec<usize>, in_shape: (usize, usize, usize) },
    Block { main: Vec<Cache>, shortcut: Vec<Cache>, output: Array3 },
}

#[inline]
fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    if size + 2 * padding < kernel {
        0
    } else {
        (size + 2 * padding - kernel) / stride + 1
    }
}

impl Conv2d {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            window_out(h, self.kernel, self.stride, self.padding),
            window_out(w, self.kernel, self.stride, self.padding),
        )
    }

    /// Unfolds `x` into a `(in·k·k) × (oh·ow)` row-major matrix.
    fn im2col(&self, x: &Array3, oh: usize, ow: usize) -> Vec<f64> {
        let (c, h, w) = x.shape();
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0; c * k * k * n];
        let data = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &data[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], in_shape: (usize, usize, usize), oh: usize, ow: usize) -> Array3 {
        let (c, h, w) = in_shape;
        let k = self.kernel;
        let n = oh * ow;
        let mut out = Array3::zeros(c, h, w);
        let data = out.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                data[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn forward(&self, x: &Array3, params: &ParamStore) -> (Array3, Vec<f64>) {
        let (_, h, w) = x.shape();
        let (oh, ow) = self.out_size(h, w);
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(x, oh, ow);
        let mut out = Array3::zeros(self.out_channels, oh, ow);
        if let Some(b) = self.bias {
            let bias = params.values(b);
            for (o, plane) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
                plane.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            self.out_channels,
            kk,
            n,
            params.values(self.weight),
            false,
            &cols,
            false,
            beta,
            out.data_mut(),
        );
        (out, cols)
    }

    fn backward(
        &self,
        cols: &[f64],
        in_shape: (usize, usize, usize),
        grad_out: &Array3,
        params: &ParamStore,
        grads: &mut Grads,
        need_input: bool,
    ) -> Option<Array3> {
        let (_, oh, ow) = grad_out.shape();
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let g = grad_out.data();
        gemm(self.out_channels, n, kk, g, false, cols, true, 1.0, grads.buf_mut(self.weight));
        if let Some(b) = self.bias {
            let gb = grads.buf_mut(b);
            for (o, plane) in g.chunks(n.max(1)).enumerate() {
                gb[o] += plane.iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.out_channels, n, params.values(self.weight), true, g, false, 0.0, &mut dcols);
        Some(self.col2im(&dcols, in_shape, oh, ow))
    }
}

impl MaxPool2d {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            window_out(h, self.kernel, self.stride, self.padding),
            window_out(w, self.kernel, self.stride, self.padding),
        )
    }

    fn forward(&self, x: &Array3) -> (Array3, Vec<usize>) {
        let (c, h, w) = x.shape();
        let (oh, ow) = self.out_size(h, w);
        let mut out = Array3::zeros(c, oh, ow);
        let mut argmax = vec![0usize; c * oh * ow];
        let data = x.data();
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ci * h + iy as usize) * w + ix as usize;
                            // strict comparison keeps the first maximum
                            if data[idx] > best || best_idx == usize::MAX {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (out, argmax)
    }
}

fn relu(mut x: Array3) -> Array3 {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
    x
}

fn relu_backward(output: &Array3, grad: &Array3) -> Array3 {
    let mut g = grad.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

fn affine_forward(a: &ChannelAffine, x: &Array3, params: &ParamStore) -> Array3 {
    let scale = params.values(a.scale);
    let shift = params.values(a.shift);
    let mut out = x.clone();
    for c in 0..x.channels() {
        let (s, t) = (scale[c], shift[c]);
        out.plane_mut(c).iter_mut().for_each(|v| *v = *v * s + t);
    }
    out
}

fn affine_backward(a: &ChannelAffine, input: &Array3, grad: &Array3, params: &ParamStore, grads: &mut Grads) -> Array3 {
    let scale = params.values(a.scale);
    let mut gin = grad.clone();
    for c in 0..input.channels() {
        let gp = grad.plane(c);
        let xp = input.plane(c);
        let gs: f64 = gp.iter().zip(xp).map(|(g, x)| g * x).sum();
        let gt: f64 = gp.iter().sum();
        grads.buf_mut(a.scale)[c] += gs;
        grads.buf_mut(a.shift)[c] += gt;
        gin.plane_mut(c).iter_mut().for_each(|v| *v *= scale[c]);
    }
    gin
}

/// Runs `layers` on `x`. When `caches` is given, every layer pushes the state
/// its backward pass needs.
pub(crate) fn forward_seq(
    layers: &[Layer],
    x: &Array3,
    params: &ParamStore,
    mut caches: Option<&mut Vec<Cache>>,
) -> Array3 {
    let mut cur: Option<Array3> = None;
    for layer in layers {
        let input = cur.as_ref().unwrap_or(x);
        let (out, cache) = match layer {
            Layer::Conv(conv) => {
                let (out, cols) = conv.forward(input, params);
                (out, caches.is_some().then(|| Cache::Conv { cols, in_shape: input.shape() }))
            }
            Layer::Affine(a) => {
                let out = affine_forward(a, input, params);
                (out, caches.is_some().then(|| Cache::Affine { input: input.clone() }))
            }
            Layer::Relu => {
                let out = relu(input.clone());
                let cache = caches.is_some().then(|| Cache::Relu { output: out.clone() });
                (out, cache)
            }
            Layer::MaxPool(p) => {
                let (out, argmax) = p.forward(input);
                (out, caches.is_some().then(|| Cache::MaxPool { argmax, in_shape: input.shape() }))
            }
            Layer::Block(block) => {
                let mut main_c = Vec::new();
                let mut short_c = Vec::new();
                let track = caches.is_some();
                let main = forward_seq(&block.main, input, params, track.then_some(&mut main_c));
                let mut sum = if block.shortcut.is_empty() {
                    input.clone()
                } else {
                    forward_seq(&block.shortcut, input, params, track.then_some(&mut short_c))
                };
                for (s, m) in sum.data_mut().iter_mut().zip(main.data()) {
                    *s += *m;
                }
                let out = relu(sum);
                let cache = track.then(|| Cache::Block { main: main_c, shortcut: short_c, output: out.clone() });
                (out, cache)
            }
        };
        if let (Some(cs), Some(c)) = (caches.as_deref_mut(), cache) {
            cs.push(c);
        }
        cur = Some(out);
    }
    cur.unwrap_or_else(|| x.clone())
}

/// Backpropagates `grad` through `layers`, accumulating parameter gradients.
/// Returns the gradient with respect to the sequence input when requested.
pub(crate) fn backward_seq(
    layers: &[Layer],
    caches: &[Cache],
    grad: Array3,
    params: &ParamStore,
    grads: &mut Grads,
    need_input: bool,
) -> Option<Array3> {
    debug_assert_eq!(layers.len(), caches.len());
    let mut g = grad;
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let want = need_input || i > 0;
        let next = match (layer, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => {
                conv.backward(cols, *in_shape, &g, params, grads, want)
            }
            (Layer::Affine(a), Cache::Affine { input }) => Some(affine_backward(a, input, &g, params, grads)),
            (Layer::Relu, Cache::Relu { output }) => Some(relu_backward(output, &g)),
            (Layer::MaxPool(_), Cache::MaxPool { argmax, in_shape }) => {
                let (c, h, w) = *in_shape;
                let mut gin = Array3::zeros(c, h, w);
                let d = gin.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g.data()[o];
                }
                Some(gin)
            }
            (Layer::Block(block), Cache::Block { main, shortcut, output }) => {
                let pre = relu_backward(output, &g);
                let mut gin = backward_seq(&block.main, main, pre.clone(), params, grads, true)
                    .expect("input gradient requested");
                let short = if block.shortcut.is_empty() {
                    pre
                } else {
                    backward_seq(&block.shortcut, shortcut, pre, params, grads, true)
                        .expect("input gradient requested")
                };
                for (a, b) in gin.data_mut().iter_mut().zip(short.data()) {
                    *a += *b;
                }
                Some(gin)
            }
            _ => unreachable!("cache does not match layer"),
        };
        {
            let n = next?;
            g = n
        }
    }
    Some(g)
}

pub(crate) fn out_size_seq(layers: &[Layer], h: usize, w: usize) -> (usize, usize) {
    let mut hw = (h, w);
    for layer in layers {
        hw = match layer {
            Layer::Conv(c) => c.out_size(hw.0, hw.1),
            Layer::MaxPool(p) => p.out_size(hw.0, hw.1),
            Layer::Affine(_) | Layer::Relu => hw,
            Layer::Block(b) => out_size_seq(&b.main, hw.0, hw.1),
        };
    }
    hw
}

use super::{gemm, ParamAllocator, ParamGroup, Real, Slot, Tensor};

/// 2-D convolution with square kernel and "same"-style zero padding,
/// computed as im2col followed by one GEMM.
///
/// Weight layout is `[kernel·kernel·in_c, out_c]`, rows ordered
/// `(ky, kx, c)` to match the im2col rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv2d {
    pub fn new(
        alloc: &mut ParamAllocator,
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = kernel * kernel * in_c;
        let weight = alloc.alloc(format!("{name}.weight"), vec![kernel, kernel, in_c, out_c], group, Some(fan_in));
        let bias = alloc.alloc(format!("{name}.bias"), vec![out_c], group, None);
        Self { name: name.to_string(), in_c, out_c, kernel, stride, pad: kernel / 2, weight, bias }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid `kx` range and first input column for output column `ox`.
    fn kx_span(&self, ox: usize, w: usize) -> (usize, usize, usize) {
        let start = (ox * self.stride) as isize - self.pad as isize;
        let lo = (-start).max(0) as usize;
        let hi = (w as isize - start).clamp(0, self.kernel as isize) as usize;
        (lo, hi.max(lo), (start + lo as isize) as usize)
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>) -> Vec<T> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let (ho, wo) = self.out_hw(x.h, x.w);
        let c = x.c;
        let row_len = self.kernel * self.kernel * c;
        let mut col = vec![T::zero(); x.n * ho * wo * row_len];
        let mut row = 0;
        for b in 0..x.n {
            let img = x.item(b);
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = &mut col[row * row_len..(row + 1) * row_len];
                    let (lo, hi, ix0) = self.kx_span(ox, x.w);
                    let run = (hi - lo) * c;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize || run == 0 {
                            continue;
                        }
                        // Valid kernel columns are contiguous in both buffers.
                        let src = (iy as usize * x.w + ix0) * c;
                        let d = (ky * self.kernel + lo) * c;
                        dst[d..d + run].copy_from_slice(&img[src..src + run]);
                    }
                    row += 1;
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, dcol: &[T], shape: (usize, usize, usize, usize)) -> Tensor<T> {
        let (n, h, w, c) = shape;
        if self.is_pointwise() {
            return Tensor::from_vec(n, h, w, c, dcol.to_vec());
        }
        let (ho, wo) = self.out_hw(h, w);
        let row_len = self.kernel * self.kernel * c;
        let mut dx = Tensor::zeros(n, h, w, c);
        let item_len = h * w * c;
        let mut row = 0;
        for b in 0..n {
            let img = &mut dx.data[b * item_len..(b + 1) * item_len];
            for oy in 0..ho {
                for ox in 0..wo {
                    let src = &dcol[row * row_len..(row + 1) * row_len];
                    let (lo, hi, ix0) = self.kx_span(ox, w);
                    let run = (hi - lo) * c;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize || run == 0 {
                            continue;
                        }
                        let dst = (iy as usize * w + ix0) * c;
                        let s = (ky * self.kernel + lo) * c;
                        for (d, v) in img[dst..dst + run].iter_mut().zip(&src[s..s + run]) {
                            *d += *v;
                        }
                    }
                    row += 1;
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        assert_eq!(x.c, self.in_c, "{}: input channels", self.name);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let rows = x.n * ho * wo;
        let col = self.im2col(x);
        let bias = &params[self.bias.range()];
        let mut out = Vec::with_capacity(rows * self.out_c);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        let k = self.kernel * self.kernel * self.in_c;
        gemm(false, false, rows, self.out_c, k, &col, &params[self.weight.range()], T::one(), &mut out);
        (Tensor::from_vec(x.n, ho, wo, self.out_c, out), col)
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        col: &[T],
        in_shape: (usize, usize, usize, usize),
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let rows = dy.n * dy.h * dy.w;
        let k = self.kernel * self.kernel * self.in_c;
        gemm(true, false, k, self.out_c, rows, col, &dy.data, T::one(), &mut grads[self.weight.range()]);
        let db = &mut grads[self.bias.range()];
        for r in dy.data.chunks_exact(self.out_c) {
            for (g, v) in db.iter_mut().zip(r) {
                *g += *v;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcol = vec![T::zero(); rows * k];
        gemm(false, true, rows, k, self.out_c, &dy.data, &params[self.weight.range()], T::zero(), &mut dcol);
        Some(self.col2im(&dcol, in_shape))
    }
}

/// Fully connected layer, weight layout `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Dense {
    pub fn new(alloc: &mut ParamAllocator, name: &str, group: ParamGroup, inputs: usize, outputs: usize) -> Self {
        let weight = alloc.alloc(format!("{name}.weight"), vec![inputs, outputs], group, Some(inputs));
        let bias = alloc.alloc(format!("{name}.bias"), vec![outputs], group, None);
        Self { name: name.to_string(), inputs, outputs, weight, bias }
    }

    /// `x` is `[batch, inputs]`.
    pub fn forward<T: Real>(&self, params: &[T], x: &[T], batch: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * self.inputs, "{}: input width", self.name);
        let bias = &params[self.bias.range()];
        let mut out = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm(false, false, batch, self.outputs, self.inputs, x, &params[self.weight.range()], T::one(), &mut out);
        out
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        x: &[T],
        dy: &[T],
        batch: usize,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        gemm(true, false, self.inputs, self.outputs, batch, x, dy, T::one(), &mut grads[self.weight.range()]);
        let db = &mut grads[self.bias.range()];
        for r in dy.chunks_exact(self.outputs) {
            for (g, v) in db.iter_mut().zip(r) {
                *g += *v;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); batch * self.inputs];
        gemm(false, true, batch, self.inputs, self.outputs, dy, &params[self.weight.range()], T::zero(), &mut dx);
        Some(dx)
    }
}

/// `y = relu(x + conv2(relu(conv1(x))))` with channel count preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

/// One element of a sequential feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv(Conv2d),
    Relu,
    /// 2×2 max pooling, stride 2, odd trailing rows/columns dropped.
    MaxPool,
    GlobalAvgPool,
    Residual(ResidualBlock),
}

type Shape4 = (usize, usize, usize, usize);

/// Forward-pass state needed by the backward pass.
#[derive(Debug)]
pub enum Cache<T> {
    Conv { col: Vec<T>, in_shape: Shape4 },
    Relu { mask: Vec<bool> },
    Pool { argmax: Vec<u32>, in_shape: Shape4 },
    Gap { in_shape: Shape4 },
    Residual { col1: Vec<T>, mask1: Vec<bool>, col2: Vec<T>, mask_out: Vec<bool>, in_shape: Shape4, mid_shape: Shape4 },
}

fn shape_of<T>(t: &Tensor<T>) -> Shape4 {
    (t.n, t.h, t.w, t.c)
}

fn relu_in_place<T: Real>(data: &mut [T]) -> Vec<bool> {
    data.iter_mut()
        .map(|v| {
            if *v > T::zero() {
                true
            } else {
                *v = T::zero();
                false
            }
        })
        .collect()
}

fn relu_grad<T: Real>(dy: &mut [T], mask: &[bool]) {
    for (d, &m) in dy.iter_mut().zip(mask) {
        if !m {
            *d = T::zero();
        }
    }
}

fn max_pool<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, ho, wo, x.c);
    let mut argmax = vec![0u32; out.data.len()];
    let mut o = 0;
    for b in 0..x.n {
        let base = b * x.item_len();
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..x.c {
                    let mut best_i = base + ((2 * oy) * x.w + 2 * ox) * x.c + ch;
                    let mut best = x.data[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + ((2 * oy + dy) * x.w + 2 * ox + dx) * x.c + ch;
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                    out.data[o] = best;
                    argmax[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.n, 1, 1, x.c);
    let scale = T::one() / T::from_usize(x.h * x.w).unwrap();
    for b in 0..x.n {
        let acc = &mut out.data[b * x.c..(b + 1) * x.c];
        for px in x.item(b).chunks_exact(x.c) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += *v;
            }
        }
        for a in acc.iter_mut() {
            *a *= scale;
        }
    }
    out
}

impl Op {
    pub fn forward<T: Real>(&self, params: &[T], x: Tensor<T>, caches: Option<&mut Vec<Cache<T>>>) -> Tensor<T> {
        match self {
            Op::Conv(conv) => {
                let in_shape = shape_of(&x);
                let (y, col) = conv.forward(params, &x);
                if let Some(c) = caches {
                    c.push(Cache::Conv { col, in_shape });
                }
                y
            }
            Op::Relu => {
                let mut x = x;
                let mask = relu_in_place(&mut x.data);
                if let Some(c) = caches {
                    c.push(Cache::Relu { mask });
                }
                x
            }
            Op::MaxPool => {
                let (y, argmax) = max_pool(&x);
                if let Some(c) = caches {
                    c.push(Cache::Pool { argmax, in_shape: shape_of(&x) });
                }
                y
            }
            Op::GlobalAvgPool => {
                let y = global_avg_pool(&x);
                if let Some(c) = caches {
                    c.push(Cache::Gap { in_shape: shape_of(&x) });
                }
                y
            }
            Op::Residual(block) => {
                let in_shape = shape_of(&x);
                let (mut h, col1) = block.conv1.forward(params, &x);
                let mask1 = relu_in_place(&mut h.data);
                let mid_shape = shape_of(&h);
                let (mut y, col2) = block.conv2.forward(params, &h);
                for (a, b) in y.data.iter_mut().zip(&x.data) {
                    *a += *b;
                }
                let mask_out = relu_in_place(&mut y.data);
                if let Some(c) = caches {
                    c.push(Cache::Residual { col1, mask1, col2, mask_out, in_shape, mid_shape });
                }
                y
            }
        }
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: Cache<T>,
        mut dy: Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        match (self, cache) {
            (Op::Conv(conv), Cache::Conv { col, in_shape }) => conv.backward(params, grads, &col, in_shape, &dy, need_dx),
            (Op::Relu, Cache::Relu { mask }) => {
                relu_grad(&mut dy.data, &mask);
                Some(dy)
            }
            (Op::MaxPool, Cache::Pool { argmax, in_shape }) => {
                let (n, h, w, c) = in_shape;
                let mut dx = Tensor::zeros(n, h, w, c);
                for (g, &i) in dy.data.iter().zip(&argmax) {
                    dx.data[i as usize] += *g;
                }
                Some(dx)
            }
            (Op::GlobalAvgPool, Cache::Gap { in_shape }) => {
                let (n, h, w, c) = in_shape;
                let scale = T::one() / T::from_usize(h * w).unwrap();
                let mut dx = Tensor::zeros(n, h, w, c);
                for b in 0..n {
                    let g = &dy.data[b * c..(b + 1) * c];
                    let item = &mut dx.data[b * h * w * c..(b + 1) * h * w * c];
                    for px in item.chunks_exact_mut(c) {
                        for (d, v) in px.iter_mut().zip(g) {
                            *d = *v * scale;
                        }
                    }
                }
                Some(dx)
            }
            (Op::Residual(block), Cache::Residual { col1, mask1, col2, mask_out, in_shape, mid_shape }) => {
                relu_grad(&mut dy.data, &mask_out);
                let mut dh = block
                    .conv2
                    .backward(params, grads, &col2, mid_shape, &dy, true)
                    .expect("inner gradient requested");
                relu_grad(&mut dh.data, &mask1);
                let dx_branch = block.conv1.backward(params, grads, &col1, in_shape, &dh, need_dx);
                dx_branch.map(|mut dx| {
                    for (a, b) in dx.data.iter_mut().zip(&dy.data) {
                        *a += *b;
                    }
                    dx
                })
            }
            (op, _) => panic!("cache does not belong to {op:?}"),
        }
    }
}

/// Ordered stack of [`Op`]s.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequential {
    pub ops: Vec<Op>,
}

impl Sequential {
    pub fn forward<T: Real>(&self, params: &[T], x: Tensor<T>, mut caches: Option<&mut Vec<Cache<T>>>) -> Tensor<T> {
        self.ops
            .iter()
            .fold(x, |acc, op| op.forward(params, acc, caches.as_deref_mut()))
    }

    /// Consumes the caches produced by a matching [`Sequential::forward`].
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        mut caches: Vec<Cache<T>>,
        dy: Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(caches.len(), self.ops.len(), "cache count");
        let mut grad = Some(dy);
        for (i, op) in self.ops.iter().enumerate().rev() {
            let cache = caches.pop().expect("cache per op");
            let need = i > 0 || need_input_grad;
            grad = op.backward(params, grads, cache, grad.expect("upstream gradient"), need);
            if !need {
                return None;
            }
        }
        grad
    }

    /// Output `(h, w, c)` for an input of the given geometry.
    pub fn output_shape(&self, mut h: usize, mut w: usize, mut c: usize) -> (usize, usize, usize) {
        for op in &self.ops {
            match op {
                Op::Conv(conv) => {
                    (h, w) = conv.out_hw(h, w);
                    c = conv.out_c;
                }
                Op::Relu | Op::Residual(_) => {}
                Op::MaxPool => {
                    h /= 2;
                    w /= 2;
                }
                Op::GlobalAvgPool => {
                    h = 1;
                    w = 1;
                }
            }
        }
        (h, w, c)
    }
}

//! Forward and reverse passes for the three supported architectures.
//!
//! Activations live in a per-call workspace so a pass allocates nothing after
//! the workspace is built. Convolutions use an im2col layout with activations
//! stored position-major (`[position][channel]`).

use super::Architecture;

/// Scratch buffers for one forward/backward evaluation.
#[derive(Debug, Clone)]
pub(crate) enum Workspace {
    Logistic {
        logits: Vec<f64>,
    },
    Mlp {
        /// `acts[0]` is the input copy, `acts[l]` the post-tanh output of layer `l`,
        /// the last entry holds logits.
        acts: Vec<Vec<f64>>,
        deltas: Vec<Vec<f64>>,
    },
    Cnn(Box<CnnWorkspace>),
}

#[derive(Debug, Clone)]
pub(crate) struct CnnWorkspace {
    cols1: Vec<f64>,
    act1: Vec<f64>,
    cols2: Vec<f64>,
    act2: Vec<f64>,
    logits: Vec<f64>,
    d_act2: Vec<f64>,
    d_cols2: Vec<f64>,
    d_act1: Vec<f64>,
}

/// Static shape information for the convolutional network.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CnnShape {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c1: usize,
    pub c2: usize,
    pub k: usize,
    pub stride: usize,
    pub h1: usize,
    pub w1: usize,
    pub h2: usize,
    pub w2: usize,
    pub classes: usize,
}

impl CnnShape {
    pub fn k1(&self) -> usize {
        self.in_c * self.k * self.k
    }
    pub fn k2(&self) -> usize {
        self.c1 * self.k * self.k
    }
    pub fn p1(&self) -> usize {
        self.h1 * self.w1
    }
    pub fn p2(&self) -> usize {
        self.h2 * self.w2
    }
    pub fn flat(&self) -> usize {
        self.p2() * self.c2
    }
    // parameter offsets: W1, b1, W2, b2, Wfc, bfc
    pub fn offsets(&self) -> [usize; 7] {
        let w1 = 0;
        let b1 = w1 + self.c1 * self.k1();
        let w2 = b1 + self.c1;
        let b2 = w2 + self.c2 * self.k2();
        let wf = b2 + self.c2;
        let bf = wf + self.classes * self.flat();
        let end = bf + self.classes;
        [w1, b1, w2, b2, wf, bf, end]
    }
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    if size < k {
        0
    } else {
        (size - k) / stride + 1
    }
}

impl Workspace {
    pub fn new(arch: &Architecture) -> Workspace {
        match arch {
            Architecture::Logistic { outputs, .. } => Workspace::Logistic {
                logits: vec![0.0; *outputs],
            },
            Architecture::Mlp { .. } => {
                let sizes = arch.layer_sizes();
                Workspace::Mlp {
                    acts: sizes.iter().map(|&s| vec![0.0; s]).collect(),
                    deltas: sizes.iter().map(|&s| vec![0.0; s]).collect(),
                }
            }
            Architecture::Cnn { .. } => {
                let s = arch.cnn_shape().expect("cnn shape");
                Workspace::Cnn(Box::new(CnnWorkspace {
                    cols1: vec![0.0; s.p1() * s.k1()],
                    act1: vec![0.0; s.p1() * s.c1],
                    cols2: vec![0.0; s.p2() * s.k2()],
                    act2: vec![0.0; s.flat()],
                    logits: vec![0.0; s.classes],
                    d_act2: vec![0.0; s.flat()],
                    d_cols2: vec![0.0; s.p2() * s.k2()],
                    d_act1: vec![0.0; s.p1() * s.c1],
                }))
            }
        }
    }

    pub fn logits(&self) -> &[f64] {
        match self {
            Workspace::Logistic { logits } => logits,
            Workspace::Mlp { acts, .. } => acts.last().expect("mlp has layers"),
            Workspace::Cnn(ws) => &ws.logits,
        }
    }
}

pub(crate) fn forward(arch: &Architecture, params: &[f64], x: &[f64], ws: &mut Workspace) {
    match (arch, ws) {
        (Architecture::Logistic { inputs, outputs }, Workspace::Logistic { logits }) => {
            let (w, b) = params.split_at(inputs * outputs);
            for o in 0..*outputs {
                let row = &w[o * inputs..(o + 1) * inputs];
                logits[o] = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        (Architecture::Mlp { .. }, Workspace::Mlp { acts, .. }) => {
            let sizes = arch.layer_sizes();
            acts[0].copy_from_slice(x);
            let mut offset = 0;
            let layers = sizes.len() - 1;
            for l in 0..layers {
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let w = &params[offset..offset + n_in * n_out];
                let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
                offset += n_in * n_out + n_out;
                let (prev, next) = acts.split_at_mut(l + 1);
                let input = &prev[l];
                let out = &mut next[0];
                for o in 0..n_out {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = b[o]
                        + row
                            .iter()
                            .zip(input.iter())
                            .map(|(a, c)| a * c)
                            .sum::<f64>();
                    out[o] = if l + 1 < layers { z.tanh() } else { z };
                }
            }
        }
        (Architecture::Cnn { .. }, Workspace::Cnn(ws)) => {
            let s = arch.cnn_shape().expect("cnn shape");
            cnn_forward(&s, params, x, ws);
        }
        _ => unreachable!("workspace does not match architecture"),
    }
}

/// Reverse pass given `d loss / d logits`; overwrites `grad`.
pub(crate) fn backward(
    arch: &Architecture,
    params: &[f64],
    x: &[f64],
    ws: &mut Workspace,
    d_logits: &[f64],
    grad: &mut [f64],
) {
    match (arch, ws) {
        (Architecture::Logistic { inputs, outputs }, Workspace::Logistic { .. }) => {
            let (gw, gb) = grad.split_at_mut(inputs * outputs);
            for o in 0..*outputs {
                let d = d_logits[o];
                for (g, xi) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
                    *g = d * xi;
                }
                gb[o] = d;
            }
        }
        (Architecture::Mlp { .. }, Workspace::Mlp { acts, deltas }) => {
            let sizes = arch.layer_sizes();
            let layers = sizes.len() - 1;
            let mut offsets = Vec::with_capacity(layers);
            let mut offset = 0;
            for l in 0..layers {
                offsets.push(offset);
                offset += sizes[l] * sizes[l + 1] + sizes[l + 1];
            }
            deltas[layers].copy_from_slice(d_logits);
            for l in (0..layers).rev() {
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let off = offsets[l];
                let (dprev, dnext) = deltas.split_at_mut(l + 1);
                let delta = &dnext[0];
                let input = &acts[l];
                {
                    let (gw, rest) =
                        grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                    for o in 0..n_out {
                        let d = delta[o];
                        for (g, a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input.iter()) {
                            *g = d * a;
                        }
                        rest[o] = d;
                    }
                }
                if l > 0 {
                    let w = &params[off..off + n_in * n_out];
                    let dp = &mut dprev[l];
                    dp.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..n_out {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        for (acc, wv) in dp.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *acc += d * wv;
                        }
                    }
                    for (acc, a) in dp.iter_mut().zip(input.iter()) {
                        *acc *= 1.0 - a * a;
                    }
                }
            }
        }
        (Architecture::Cnn { .. }, Workspace::Cnn(ws)) => {
            let s = arch.cnn_shape().expect("cnn shape");
            cnn_backward(&s, params, ws, d_logits, grad);
        }
        _ => unreachable!("workspace does not match architecture"),
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover the strided m x k, k x n
    // and m x n views; all indices stay inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// im2col for an HWC input: row `p` holds the `k*k*c` patch in `(ky, kx, c)` order.
fn im2col(
    input: &[f64],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let _ = h;
    let kk = k * k * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
            for ky in 0..k {
                let iy = oy * stride + ky;
                let src = (iy * w + ox * stride) * c;
                let dst = ky * k * c;
                row[dst..dst + k * c].copy_from_slice(&input[src..src + k * c]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let kk = k * k * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
            for ky in 0..k {
                let iy = oy * stride + ky;
                let dst = (iy * w + ox * stride) * c;
                let src = ky * k * c;
                for (o, v) in out[dst..dst + k * c].iter_mut().zip(&row[src..src + k * c]) {
                    *o += v;
                }
            }
        }
    }
}

fn cnn_forward(s: &CnnShape, params: &[f64], x: &[f64], ws: &mut CnnWorkspace) {
    let [w1, b1, w2, b2, wf, bf, _] = s.offsets();
    let (k1, k2) = (s.k1(), s.k2());

    im2col(
        x,
        s.in_h,
        s.in_w,
        s.in_c,
        s.k,
        s.stride,
        s.h1,
        s.w1,
        &mut ws.cols1,
    );
    // act1 (p1 x c1) = cols1 (p1 x k1) * W1^T, W1 stored c1 x k1
    for p in 0..s.p1() {
        ws.act1[p * s.c1..(p + 1) * s.c1].copy_from_slice(&params[b1..b1 + s.c1]);
    }
    gemm(
        s.p1(),
        k1,
        s.c1,
        &ws.cols1,
        k1 as isize,
        1,
        &params[w1..b1],
        1,
        k1 as isize,
        1.0,
        &mut ws.act1,
        s.c1 as isize,
        1,
    );
    ws.act1.iter_mut().for_each(|v| *v = v.tanh());

    im2col(
        &ws.act1,
        s.h1,
        s.w1,
        s.c1,
        s.k,
        s.stride,
        s.h2,
        s.w2,
        &mut ws.cols2,
    );
    for p in 0..s.p2() {
        ws.act2[p * s.c2..(p + 1) * s.c2].copy_from_slice(&params[b2..b2 + s.c2]);
    }
    gemm(
        s.p2(),
        k2,
        s.c2,
        &ws.cols2,
        k2 as isize,
        1,
        &params[w2..b2],
        1,
        k2 as isize,
        1.0,
        &mut ws.act2,
        s.c2 as isize,
        1,
    );
    ws.act2.iter_mut().for_each(|v| *v = v.tanh());

    let flat = s.flat();
    for o in 0..s.classes {
        let row = &params[wf + o * flat..wf + (o + 1) * flat];
        ws.logits[o] = params[bf + o] + row.iter().zip(&ws.act2).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn cnn_backward(
    s: &CnnShape,
    params: &[f64],
    ws: &mut CnnWorkspace,
    d_logits: &[f64],
    grad: &mut [f64],
) {
    let [w1, b1, w2, b2, wf, bf, _] = s.offsets();
    let (k1, k2) = (s.k1(), s.k2());
    let flat = s.flat();

    // dense head
    ws.d_act2.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..s.classes {
        let d = d_logits[o];
        grad[bf + o] = d;
        let gw = &mut grad[wf + o * flat..wf + (o + 1) * flat];
        for (g, a) in gw.iter_mut().zip(&ws.act2) {
            *g = d * a;
        }
        for (acc, wv) in ws
            .d_act2
            .iter_mut()
            .zip(&params[wf + o * flat..wf + (o + 1) * flat])
        {
            *acc += d * wv;
        }
    }
    // through tanh of layer 2: dz2 stored in d_act2
    for (d, a) in ws.d_act2.iter_mut().zip(&ws.act2) {
        *d *= 1.0 - a * a;
    }
    // db2
    for c in 0..s.c2 {
        grad[b2 + c] = (0..s.p2()).map(|p| ws.d_act2[p * s.c2 + c]).sum();
    }
    // dW2 (c2 x k2) = dz2^T (c2 x p2) * cols2 (p2 x k2)
    gemm(
        s.c2,
        s.p2(),
        k2,
        &ws.d_act2,
        1,
        s.c2 as isize,
        &ws.cols2,
        k2 as isize,
        1,
        0.0,
        &mut grad[w2..b2],
        k2 as isize,
        1,
    );
    // dcols2 (p2 x k2) = dz2 (p2 x c2) * W2 (c2 x k2)
    gemm(
        s.p2(),
        s.c2,
        k2,
        &ws.d_act2,
        s.c2 as isize,
        1,
        &params[w2..b2],
        k2 as isize,
        1,
        0.0,
        &mut ws.d_cols2,
        k2 as isize,
        1,
    );
    ws.d_act1.iter_mut().for_each(|v| *v = 0.0);
    col2im_add(
        &ws.d_cols2,
        s.w1,
        s.c1,
        s.k,
        s.stride,
        s.h2,
        s.w2,
        &mut ws.d_act1,
    );
    for (d, a) in ws.d_act1.iter_mut().zip(&ws.act1) {
        *d *= 1.0 - a * a;
    }
    for c in 0..s.c1 {
        grad[b1 + c] = (0..s.p1()).map(|p| ws.d_act1[p * s.c1 + c]).sum();
    }
    gemm(
        s.c1,
        s.p1(),
        k1,
        &ws.d_act1,
        1,
        s.c1 as isize,
        &ws.cols1,
        k1 as isize,
        1,
        0.0,
        &mut grad[w1..b1],
        k1 as isize,
        1,
    );
}

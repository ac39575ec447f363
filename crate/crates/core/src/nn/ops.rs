//! Channels-last building blocks with hand-written backward passes.
//!
//! Activations are `[images, height, width, channels]` in standard layout, so
//! a whole activation can be viewed as a `[pixels, channels]` matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis, Ix2};
use rand::Rng;

use super::params::{Grads, Init, ParamId, ParamStore};
use super::real::{lit, Real};

pub(crate) fn as_matrix<T: Real>(x: &Array4<T>) -> ArrayView2<'_, T> {
    let c = x.shape()[3];
    let rows = x.len() / c;
    ArrayView2::from_shape((rows, c), x.as_slice().expect("standard layout")).unwrap()
}

pub(crate) fn as_matrix_mut<T: Real>(x: &mut Array4<T>) -> ArrayViewMut2<'_, T> {
    let c = x.shape()[3];
    let rows = x.len() / c;
    ArrayViewMut2::from_shape((rows, c), x.as_slice_mut().expect("standard layout")).unwrap()
}

pub(crate) fn weight2<T: Real>(store: &ParamStore<T>, id: ParamId) -> ArrayView2<'_, T> {
    store.get(id).view().into_dimensionality::<Ix2>().unwrap()
}

/// `c = beta * c + a · b`
pub(crate) fn gemm<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>, beta: T, c: &mut ArrayViewMut2<T>) {
    general_mat_mul(T::one(), &a, &b, beta, c);
}

/// Accumulates `a · b` into the gradient slot of `id`, if it has one.
pub(crate) fn accumulate_gemm<T: Real>(
    grads: &mut Grads<T>,
    id: ParamId,
    a: ArrayView2<T>,
    b: ArrayView2<T>,
) {
    if let Some(g) = grads.slot(id) {
        let mut g2 = g.view_mut().into_dimensionality::<Ix2>().unwrap();
        gemm(a, b, T::one(), &mut g2);
    }
}

fn accumulate_column_sums<T: Real>(grads: &mut Grads<T>, id: ParamId, dy: ArrayView2<T>) {
    if let Some(g) = grads.slot(id) {
        let mut g = g.view_mut();
        for row in dy.rows() {
            for (gv, &d) in g.iter_mut().zip(row.iter()) {
                *gv += d;
            }
        }
    }
}

/// 2D convolution with square kernel, zero padding `k / 2`, and bias.
/// The weight is stored as a `[k * k * c_in, c_out]` matrix whose rows are
/// ordered `(ky, kx, c_in)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (kernel * kernel * c_in) as f64;
        let weight = store.add(
            &format!("{name}.weight"),
            &[kernel * kernel * c_in, c_out],
            Init::Normal(1.0 / fan_in.sqrt()),
            rng,
        );
        let bias = store.add(&format!("{name}.bias"), &[c_out], Init::Zeros, rng);
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Narrow outputs are cheaper to compute per kernel tap than through an
    /// im2col buffer that is `k * k` times wider than the input.
    fn uses_taps(&self) -> bool {
        self.stride == 1 && self.kernel > 1 && self.c_out < self.c_in
    }

    /// Weight rearranged as `[c_in, k * k * c_out]`, columns ordered `(tap, c_out)`.
    fn tap_weight<T: Real>(&self, store: &ParamStore<T>) -> Array2<T> {
        let w = weight2(store, self.weight);
        let taps = self.kernel * self.kernel;
        Array2::from_shape_fn((self.c_in, taps * self.c_out), |(ci, col)| {
            let (tap, co) = (col / self.c_out, col % self.c_out);
            w[[tap * self.c_in + ci, co]]
        })
    }

    /// Visits every `(input pixel, output pixel, tap)` triple of a stride-1
    /// convolution; pixel indices are flat over `[n, h, w]`.
    fn for_each_tap(&self, n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        let p = self.pad() as isize;
        for img in 0..n {
            for oy in 0..h {
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let out = (img * h + oy) * w + ox;
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let inp = (img * h + iy as usize) * w + ix as usize;
                            f(inp, out, ky * k + kx);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &Array4<T>) -> Array2<T> {
        let (n, h, w, c) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let p = self.pad() as isize;
        let row_len = k * k * c;
        let mut cols = Array2::<T>::zeros((n * ho * wo, row_len));
        let src = x.as_slice().unwrap();
        let dst = cols.as_slice_mut().unwrap();
        for img in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((img * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s = ((img * h + iy as usize) * w + ix as usize) * c;
                            let d = row + (ky * k + kx) * c;
                            dst[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &Array2<T>, shape: (usize, usize, usize, usize)) -> Array4<T> {
        let (n, h, w, c) = shape;
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let p = self.pad() as isize;
        let row_len = k * k * c;
        let mut x = Array4::<T>::zeros(shape);
        let src = cols.as_slice().unwrap();
        let dst = x.as_slice_mut().unwrap();
        for img in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((img * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = ((img * h + iy as usize) * w + ix as usize) * c;
                            let s = row + (ky * k + kx) * c;
                            for (a, &b) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (n, h, w, c) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let (ho, wo) = self.out_hw(h, w);
        let mut y = Array4::<T>::zeros((n, ho, wo, self.c_out));
        {
            let bias = store.get(self.bias);
            let mut ym = as_matrix_mut(&mut y);
            for mut row in ym.rows_mut() {
                row.assign(&bias.view().into_dimensionality::<ndarray::Ix1>().unwrap());
            }
            let wmat = weight2(store, self.weight);
            if self.is_pointwise() {
                gemm(as_matrix(x), wmat, T::one(), &mut ym);
            } else if self.uses_taps() {
                let co = self.c_out;
                let wt = self.tap_weight(store);
                let mut z = Array2::<T>::zeros((n * h * w, wt.ncols()));
                gemm(as_matrix(x), wt.view(), T::zero(), &mut z.view_mut());
                let zs = z.as_slice().unwrap();
                let row = wt.ncols();
                let ys = ym.as_slice_mut().unwrap();
                self.for_each_tap(n, h, w, |inp, out, tap| {
                    let src = &zs[inp * row + tap * co..inp * row + (tap + 1) * co];
                    for (a, &b) in ys[out * co..(out + 1) * co].iter_mut().zip(src) {
                        *a += b;
                    }
                });
            } else {
                let cols = self.im2col(x);
                gemm(cols.view(), wmat, T::one(), &mut ym);
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        dy: &Array4<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let dym = as_matrix(dy);
        accumulate_column_sums(grads, self.bias, dym);
        let wmat = weight2(store, self.weight);
        if self.is_pointwise() {
            accumulate_gemm(grads, self.weight, as_matrix(x).t(), dym);
            return need_dx.then(|| {
                let mut dx = Array4::<T>::zeros(x.raw_dim());
                gemm(dym, wmat.t(), T::zero(), &mut as_matrix_mut(&mut dx));
                dx
            });
        }
        if self.uses_taps() {
            let (n, h, w, _) = x.dim();
            let (co, ci) = (self.c_out, self.c_in);
            let taps = self.kernel * self.kernel;
            let row = taps * co;
            // g[input pixel, (tap, c_out)] = dy[output pixel reached through tap]
            let mut g = Array2::<T>::zeros((n * h * w, row));
            {
                let gs = g.as_slice_mut().unwrap();
                let ds = dym.as_slice().unwrap();
                self.for_each_tap(n, h, w, |inp, out, tap| {
                    gs[inp * row + tap * co..inp * row + (tap + 1) * co]
                        .copy_from_slice(&ds[out * co..(out + 1) * co]);
                });
            }
            if let Some(slot) = grads.slot(self.weight) {
                let mut dwt = Array2::<T>::zeros((ci, row));
                gemm(as_matrix(x).t(), g.view(), T::zero(), &mut dwt.view_mut());
                let mut slot = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
                for c_in in 0..ci {
                    for tap in 0..taps {
                        for c_out in 0..co {
                            slot[[tap * ci + c_in, c_out]] += dwt[[c_in, tap * co + c_out]];
                        }
                    }
                }
            }
            return need_dx.then(|| {
                let wt = self.tap_weight(store);
                let mut dx = Array4::<T>::zeros(x.raw_dim());
                gemm(g.view(), wt.t(), T::zero(), &mut as_matrix_mut(&mut dx));
                dx
            });
        }
        if grads.wants(self.weight) {
            let cols = self.im2col(x);
            accumulate_gemm(grads, self.weight, cols.t(), dym);
        }
        need_dx.then(|| {
            let mut dcols = Array2::<T>::zeros((dym.nrows(), wmat.nrows()));
            gemm(dym, wmat.t(), T::zero(), &mut dcols.view_mut());
            self.col2im(&dcols, x.dim())
        })
    }
}

/// Normalization over channel groups. With `groups = C` and one pixel per
/// "image" it degenerates into per-token layer normalization.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub per_token: bool,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Array4<T>,
    rstd: Vec<T>,
}

impl Norm {
    pub fn group<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert!(channels % groups == 0, "{channels} channels into {groups} groups");
        Self {
            gamma: store.add(&format!("{name}.weight"), &[channels], Init::Ones, rng),
            beta: store.add(&format!("{name}.bias"), &[channels], Init::Zeros, rng),
            channels,
            groups,
            per_token: false,
            eps: 1e-5,
        }
    }

    /// Layer normalization over the channels of each pixel.
    pub fn layer<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            per_token: true,
            groups: 1,
            ..Self::group(store, rng, name, channels, 1)
        }
    }

    /// (number of independent normalization units, pixels per unit)
    fn layout<T: Real>(&self, x: &Array4<T>) -> (usize, usize) {
        let (n, h, w, _) = x.dim();
        if self.per_token {
            (n * h * w, 1)
        } else {
            (n, h * w)
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Array4<T>) -> (Array4<T>, NormCache<T>) {
        let (units, pixels) = self.layout(x);
        let c = self.channels;
        let cg = c / self.groups;
        let count = lit::<T>((pixels * cg) as f64);
        let eps = lit::<T>(self.eps);
        let gamma = store.get(self.gamma).as_slice().unwrap().to_vec();
        let beta = store.get(self.beta).as_slice().unwrap().to_vec();
        let src = x.as_slice().unwrap();
        let mut xhat = Array4::<T>::zeros(x.raw_dim());
        let mut y = Array4::<T>::zeros(x.raw_dim());
        let mut rstd = Vec::with_capacity(units * self.groups);
        let xh = xhat.as_slice_mut().unwrap();
        let ys = y.as_slice_mut().unwrap();
        // per-channel accumulators keep the inner loops contiguous
        let mut acc = vec![T::zero(); c];
        let mut mean_c = vec![T::zero(); c];
        let mut scale_c = vec![T::zero(); c];
        let mut shift_c = vec![T::zero(); c];
        for u in 0..units {
            let block = &src[u * pixels * c..(u + 1) * pixels * c];
            acc.iter_mut().for_each(|a| *a = T::zero());
            for row in block.chunks_exact(c) {
                for j in 0..c {
                    acc[j] += row[j];
                }
            }
            for g in 0..self.groups {
                let m = acc[g * cg..(g + 1) * cg].iter().copied().sum::<T>() / count;
                mean_c[g * cg..(g + 1) * cg].iter_mut().for_each(|v| *v = m);
            }
            acc.iter_mut().for_each(|a| *a = T::zero());
            for row in block.chunks_exact(c) {
                for j in 0..c {
                    let d = row[j] - mean_c[j];
                    acc[j] += d * d;
                }
            }
            for g in 0..self.groups {
                let var = acc[g * cg..(g + 1) * cg].iter().copied().sum::<T>() / count;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for j in g * cg..(g + 1) * cg {
                    scale_c[j] = r;
                    shift_c[j] = -mean_c[j] * r;
                }
            }
            let range = u * pixels * c..(u + 1) * pixels * c;
            for ((row, xo), yo) in block
                .chunks_exact(c)
                .zip(xh[range.clone()].chunks_exact_mut(c))
                .zip(ys[range].chunks_exact_mut(c))
            {
                for j in 0..c {
                    let nv = row[j] * scale_c[j] + shift_c[j];
                    xo[j] = nv;
                    yo[j] = nv * gamma[j] + beta[j];
                }
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Array4<T>,
        grads: &mut Grads<T>,
    ) -> Array4<T> {
        let (units, pixels) = self.layout(dy);
        let c = self.channels;
        let cg = c / self.groups;
        let count = lit::<T>((pixels * cg) as f64);
        let gamma = store.get(self.gamma).as_slice().unwrap().to_vec();
        let xh = cache.xhat.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();

        if grads.wants(self.gamma) || grads.wants(self.beta) {
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (drow, xrow) in dys.chunks_exact(c).zip(xh.chunks_exact(c)) {
                for j in 0..c {
                    dg[j] += drow[j] * xrow[j];
                    db[j] += drow[j];
                }
            }
            if let Some(g) = grads.slot(self.gamma) {
                for (a, b) in g.iter_mut().zip(dg) {
                    *a += b;
                }
            }
            if let Some(g) = grads.slot(self.beta) {
                for (a, b) in g.iter_mut().zip(db) {
                    *a += b;
                }
            }
        }

        let mut dx = Array4::<T>::zeros(dy.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        let mut a1 = vec![T::zero(); c];
        let mut a2 = vec![T::zero(); c];
        let mut m1_c = vec![T::zero(); c];
        let mut m2_c = vec![T::zero(); c];
        let mut r_c = vec![T::zero(); c];
        for u in 0..units {
            let range = u * pixels * c..(u + 1) * pixels * c;
            let (d, x) = (&dys[range.clone()], &xh[range.clone()]);
            a1.iter_mut().for_each(|a| *a = T::zero());
            a2.iter_mut().for_each(|a| *a = T::zero());
            for (drow, xrow) in d.chunks_exact(c).zip(x.chunks_exact(c)) {
                for j in 0..c {
                    let dxh = drow[j] * gamma[j];
                    a1[j] += dxh;
                    a2[j] += dxh * xrow[j];
                }
            }
            for g in 0..self.groups {
                let gr = g * cg..(g + 1) * cg;
                let m1 = a1[gr.clone()].iter().copied().sum::<T>() / count;
                let m2 = a2[gr.clone()].iter().copied().sum::<T>() / count;
                let r = cache.rstd[u * self.groups + g];
                for j in gr {
                    m1_c[j] = m1;
                    m2_c[j] = m2;
                    r_c[j] = r;
                }
            }
            for ((drow, xrow), out) in d
                .chunks_exact(c)
                .zip(x.chunks_exact(c))
                .zip(dxs[range].chunks_exact_mut(c))
            {
                for j in 0..c {
                    out[j] = r_c[j] * (drow[j] * gamma[j] - m1_c[j] - xrow[j] * m2_c[j]);
                }
            }
        }
        dx
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Real>(x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s * (T::one() + v * (T::one() - s));
    });
    dx
}

pub fn silu_vec<T: Real>(x: &Array1<T>) -> Array1<T> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_vec_backward<T: Real>(x: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s * (T::one() + v * (T::one() - s));
    });
    dx
}

/// Dense layer on a single vector: `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self {
            weight: store.add(
                &format!("{name}.weight"),
                &[d_out, d_in],
                Init::Normal(1.0 / (d_in as f64).sqrt()),
                rng,
            ),
            bias: store.add(&format!("{name}.bias"), &[d_out], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Array1<T>) -> Array1<T> {
        let w = weight2(store, self.weight);
        let b = store.get(self.bias).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        w.dot(x) + b
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array1<T>,
        dy: &Array1<T>,
        grads: &mut Grads<T>,
    ) -> Array1<T> {
        if let Some(g) = grads.slot(self.weight) {
            let mut g = g.view_mut().into_dimensionality::<Ix2>().unwrap();
            for (i, &d) in dy.iter().enumerate() {
                g.row_mut(i).scaled_add(d, x);
            }
        }
        if let Some(g) = grads.slot(self.bias) {
            for (a, &d) in g.iter_mut().zip(dy) {
                *a += d;
            }
        }
        weight2(store, self.weight).t().dot(dy)
    }
}

pub fn upsample2x<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (n, h, w, c) = x.dim();
    let mut y = Array4::<T>::zeros((n, 2 * h, 2 * w, c));
    for img in 0..n {
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                y.slice_mut(ndarray::s![img, yy, xx, ..])
                    .assign(&x.slice(ndarray::s![img, yy / 2, xx / 2, ..]));
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(dy: &Array4<T>) -> Array4<T> {
    let (n, h2, w2, c) = dy.dim();
    let mut dx = Array4::<T>::zeros((n, h2 / 2, w2 / 2, c));
    for img in 0..n {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let src = dy.slice(ndarray::s![img, yy, xx, ..]);
                let mut dst = dx.slice_mut(ndarray::s![img, yy / 2, xx / 2, ..]);
                dst += &src;
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(3), &[a.view(), b.view()])
        .unwrap()
        .as_standard_layout()
        .into_owned()
}

pub fn split_channels<T: Real>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    let (a, b) = d.view().split_at(Axis(3), first);
    (
        a.as_standard_layout().into_owned(),
        b.as_standard_layout().into_owned(),
    )
}

/// Adds a per-channel vector to every pixel.
pub fn add_channel_bias<T: Real>(x: &mut Array4<T>, e: &Array1<T>) {
    let mut m = as_matrix_mut(x);
    for mut row in m.rows_mut() {
        row += e;
    }
}

pub fn channel_sums<T: Real>(dy: &Array4<T>) -> Array1<T> {
    as_matrix(dy).sum_axis(Axis(0))
}

/// Sinusoidal embedding of a scalar position, `[cos(p f_i), sin(p f_i)]`.
pub fn sinusoidal_embedding<T: Real>(position: f64, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let mut e = Array1::<T>::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        e[i] = lit((position * freq).cos());
        e[half + i] = lit((position * freq).sin());
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-sum convolution used as the reference.
    fn naive_conv(conv: &Conv2d, store: &ParamStore<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, h, w, ci) = x.dim();
        let (ho, wo) = conv.out_hw(h, w);
        let k = conv.kernel;
        let p = conv.pad() as isize;
        let wm = weight2(store, conv.weight);
        let b = store.get(conv.bias);
        Array4::from_shape_fn((n, ho, wo, conv.c_out), |(img, oy, ox, co)| {
            let mut acc = b[[co]];
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * conv.stride + ky) as isize - p;
                    let ix = (ox * conv.stride + kx) as isize - p;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for c in 0..ci {
                        acc += x[[img, iy as usize, ix as usize, c]] * wm[[(ky * k + kx) * ci + c, co]];
                    }
                }
            }
            acc
        })
    }

    fn check_conv(c_in: usize, c_out: usize, stride: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", c_in, c_out, 3, stride);
        let bias = store.get_mut(conv.bias);
        bias.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        let x = Array4::from_shape_fn((2, 4, 6, c_in), |(a, b, c, d)| ((a * 31 + b * 7 + c * 3 + d) as f64 * 0.37).sin());
        let y = conv.forward(&store, &x);
        let reference = naive_conv(&conv, &store, &x);
        for (a, b) in y.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // backward of L = sum(y * r), against the naive forward
        let r = y.mapv(|v| (v * 3.1).cos());
        let mut grads = Grads::for_store(&store);
        let dx = conv.backward(&store, &x, &r, &mut grads, true).unwrap();
        let loss = |store: &ParamStore<f64>, x: &Array4<f64>| (naive_conv(&conv, store, x) * &r).sum();
        let h = 1e-6;
        for i in [0, 5, x.len() - 1] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[i]).abs() < 1e-6);
        }
        let dw = grads.get(conv.weight).unwrap().clone();
        for i in [0, 3, dw.len() - 1] {
            let mut sp = store.clone();
            sp.get_mut(conv.weight).as_slice_mut().unwrap()[i] += h;
            let mut sm = store.clone();
            sm.get_mut(conv.weight).as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
            assert!((fd - dw.as_slice().unwrap()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn narrow_output_conv_matches_reference() {
        check_conv(5, 2, 1);
    }

    #[test]
    fn wide_output_conv_matches_reference() {
        check_conv(2, 5, 1);
        check_conv(3, 4, 2);
    }
}

//! Single-head temporal self-attention over the frame axis, one independent
//! attention problem per spatial site.
//!
//! The layer computes `A = Q K^T` per site (the logits that can be extracted),
//! or takes an injected `A` in place of the query/key path, then applies
//! `softmax(A / sqrt(d)) V` followed by the output projection and a residual
//! connection.

use ndarray::{Array2, Array3, Array4, ArrayView2};
use rand::Rng;

use super::ops::{as_matrix, as_matrix_mut, gemm, weight2, Norm, NormCache};
use super::params::{Grads, Init, ParamId, ParamStore};
use super::real::{lit, Real};
use crate::error::{Error, Result};

/// How a single attention layer treats its attention logits.
#[derive(Debug, Clone, Copy)]
pub enum AttnMode<'a, T> {
    /// Compute `Q K^T` and discard it.
    Compute,
    /// Compute `Q K^T` and hand it back to the caller.
    Extract,
    /// Use the given `[sites, N, N]` logits; the query/key path is skipped.
    Inject(&'a Array3<T>),
}

#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub norm: Norm,
    pub pos: ParamId,
    pub to_q: ParamId,
    pub to_k: ParamId,
    pub to_v: ParamId,
    pub to_out: ParamId,
    pub channels: usize,
    pub head_dim: usize,
    pub max_frames: usize,
}

pub struct AttentionCache<T> {
    norm: NormCache<T>,
    h: Array2<T>,
    q: Option<Array2<T>>,
    k: Option<Array2<T>>,
    v: Array2<T>,
    /// softmax weights `[sites, N, N]`
    p: Array3<T>,
    y: Array2<T>,
    frames: usize,
    sites: usize,
}

impl<T: Real> AttentionCache<T> {
    pub fn weights(&self) -> &Array3<T> {
        &self.p
    }

    /// Attention output before the output projection, `[N * sites, d]`.
    pub fn pre_projection(&self) -> &Array2<T> {
        &self.y
    }

    pub fn values(&self) -> &Array2<T> {
        &self.v
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn sites(&self) -> usize {
        self.sites
    }
}

impl TemporalAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        head_dim: usize,
        max_frames: usize,
    ) -> Self {
        let norm = Norm::layer(store, rng, &format!("{name}.norm"), channels);
        let pos = store.add(&format!("{name}.pos"), &[max_frames, channels], Init::Normal(0.5), rng);
        let s_in = 1.0 / (channels as f64).sqrt();
        let s_out = 1.0 / (head_dim as f64).sqrt();
        let to_q = store.add(&format!("{name}.to_q"), &[head_dim, channels], Init::Normal(s_in), rng);
        let to_k = store.add(&format!("{name}.to_k"), &[head_dim, channels], Init::Normal(s_in), rng);
        let to_v = store.add(&format!("{name}.to_v"), &[head_dim, channels], Init::Normal(s_in), rng);
        let to_out = store.add(
            &format!("{name}.to_out"),
            &[channels, head_dim],
            Init::Normal(0.5 * s_out),
            rng,
        );
        Self {
            norm,
            pos,
            to_q,
            to_k,
            to_v,
            to_out,
            channels,
            head_dim,
            max_frames,
        }
    }

    fn project<T: Real>(store: &ParamStore<T>, h: ArrayView2<T>, w: ParamId) -> Array2<T> {
        let w = weight2(store, w);
        let mut out = Array2::<T>::zeros((h.nrows(), w.nrows()));
        gemm(h, w.t(), T::zero(), &mut out.view_mut());
        out
    }

    /// `x` is one clip, `[N, H, W, C]`. Rows of the token matrix are ordered
    /// frame-major, so token `(n, s)` lives in row `n * sites + s`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        mode: AttnMode<'_, T>,
    ) -> Result<(Array4<T>, Option<Array3<T>>, AttentionCache<T>)> {
        let (frames, hh, ww, _) = x.dim();
        let sites = hh * ww;
        let d = self.head_dim;
        if frames > self.max_frames {
            return Err(Error::Argument(format!(
                "{frames} frames exceed the layer's {} positional slots",
                self.max_frames
            )));
        }
        if let AttnMode::Inject(map) = mode {
            if map.dim() != (sites, frames, frames) {
                return Err(Error::shape(&[sites, frames, frames], map.shape()));
            }
        }

        let (hn, norm_cache) = self.norm.forward(store, x);
        let mut h = as_matrix(&hn).to_owned();
        let pos = weight2(store, self.pos);
        for n in 0..frames {
            let pr = pos.row(n);
            for s in 0..sites {
                let mut row = h.row_mut(n * sites + s);
                row += &pr;
            }
        }

        let v = Self::project(store, h.view(), self.to_v);
        let (logits, q, k) = match mode {
            AttnMode::Inject(map) => (map.clone(), None, None),
            _ => {
                let q = Self::project(store, h.view(), self.to_q);
                let k = Self::project(store, h.view(), self.to_k);
                let mut a = Array3::<T>::zeros((sites, frames, frames));
                for s in 0..sites {
                    for j in 0..frames {
                        let qr = q.row(j * sites + s);
                        for kk in 0..frames {
                            a[[s, j, kk]] = qr.dot(&k.row(kk * sites + s));
                        }
                    }
                }
                (a, Some(q), Some(k))
            }
        };

        let scale = lit::<T>(1.0 / (d as f64).sqrt());
        let mut p = logits.mapv(|v| v * scale);
        for mut row in p.rows_mut() {
            let m = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }

        let mut y = Array2::<T>::zeros((frames * sites, d));
        for s in 0..sites {
            for j in 0..frames {
                let mut yr = y.row_mut(j * sites + s);
                for kk in 0..frames {
                    yr.scaled_add(p[[s, j, kk]], &v.row(kk * sites + s));
                }
            }
        }

        let mut out = x.clone();
        gemm(
            y.view(),
            weight2(store, self.to_out).t(),
            T::one(),
            &mut as_matrix_mut(&mut out),
        );

        let extracted = match mode {
            AttnMode::Extract => Some(logits),
            _ => None,
        };
        let cache = AttentionCache {
            norm: norm_cache,
            h,
            q,
            k,
            v,
            p,
            y,
            frames,
            sites,
        };
        Ok((out, extracted, cache))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &AttentionCache<T>,
        dout: &Array4<T>,
        grads: &mut Grads<T>,
    ) -> Array4<T> {
        let (frames, sites, d) = (cache.frames, cache.sites, self.head_dim);
        let dom = as_matrix(dout);

        if let Some(g) = grads.slot(self.to_out) {
            let mut g = g.view_mut().into_dimensionality().unwrap();
            gemm(dom.t(), cache.y.view(), T::one(), &mut g);
        }
        let mut dy = Array2::<T>::zeros((frames * sites, d));
        gemm(dom, weight2(store, self.to_out), T::zero(), &mut dy.view_mut());

        let mut dp = Array3::<T>::zeros((sites, frames, frames));
        let mut dv = Array2::<T>::zeros((frames * sites, d));
        for s in 0..sites {
            for j in 0..frames {
                let dyr = dy.row(j * sites + s);
                for kk in 0..frames {
                    dp[[s, j, kk]] = dyr.dot(&cache.v.row(kk * sites + s));
                    dv.row_mut(kk * sites + s).scaled_add(cache.p[[s, j, kk]], &dyr);
                }
            }
        }

        let mut dh = Array2::<T>::zeros((frames * sites, self.channels));
        gemm(dv.view(), weight2(store, self.to_v), T::zero(), &mut dh.view_mut());
        if let Some(g) = grads.slot(self.to_v) {
            let mut g = g.view_mut().into_dimensionality().unwrap();
            gemm(dv.t(), cache.h.view(), T::one(), &mut g);
        }

        if let (Some(q), Some(k)) = (&cache.q, &cache.k) {
            let scale = lit::<T>(1.0 / (d as f64).sqrt());
            let mut dq = Array2::<T>::zeros((frames * sites, d));
            let mut dk = Array2::<T>::zeros((frames * sites, d));
            for s in 0..sites {
                for j in 0..frames {
                    let mut dot = T::zero();
                    for kk in 0..frames {
                        dot += cache.p[[s, j, kk]] * dp[[s, j, kk]];
                    }
                    for kk in 0..frames {
                        let da = cache.p[[s, j, kk]] * (dp[[s, j, kk]] - dot) * scale;
                        dq.row_mut(j * sites + s).scaled_add(da, &k.row(kk * sites + s));
                        dk.row_mut(kk * sites + s).scaled_add(da, &q.row(j * sites + s));
                    }
                }
            }
            gemm(dq.view(), weight2(store, self.to_q), T::one(), &mut dh.view_mut());
            gemm(dk.view(), weight2(store, self.to_k), T::one(), &mut dh.view_mut());
            if let Some(g) = grads.slot(self.to_q) {
                let mut g = g.view_mut().into_dimensionality().unwrap();
                gemm(dq.t(), cache.h.view(), T::one(), &mut g);
            }
            if let Some(g) = grads.slot(self.to_k) {
                let mut g = g.view_mut().into_dimensionality().unwrap();
                gemm(dk.t(), cache.h.view(), T::one(), &mut g);
            }
        }

        if let Some(g) = grads.slot(self.pos) {
            for n in 0..frames {
                for s in 0..sites {
                    let mut gr = g.index_axis_mut(ndarray::Axis(0), n);
                    gr += &dh.row(n * sites + s);
                }
            }
        }

        let dh4 = dh
            .into_shape_with_order(dout.raw_dim())
            .expect("token matrix matches activation");
        let mut dx = self.norm.backward(store, &cache.norm, &dh4, grads);
        dx += dout;
        dx
    }
}

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LrmConfig, CHANNELS, INPUT_CHANNELS};
use crate::Real;

const LN_EPS: f64 = 1e-5;

/// A `rows × cols` block of the flat parameter vector, column-major.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<T: Real>(&self, p: &[T]) -> DMatrix<T> {
        DMatrix::from_column_slice(self.rows, self.cols, &p[self.range()])
    }

    pub fn add_to<T: Real>(&self, grads: &mut [T], m: &DMatrix<T>) {
        debug_assert_eq!((m.nrows(), m.ncols()), (self.rows, self.cols));
        for (g, v) in grads[self.range()].iter_mut().zip(m.as_slice()) {
            *g += *v;
        }
    }

    pub fn add_row_to<T: Real>(&self, grads: &mut [T], v: &[T]) {
        for (g, x) in grads[self.range()].iter_mut().zip(v) {
            *g += *x;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed_w: Slot,
    pub embed_b: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &LrmConfig) -> Self {
        let mut at = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot {
                offset: at,
                rows,
                cols,
            };
            at += rows * cols;
            s
        };
        let d = c.dim;
        let p2 = c.patch * c.patch;
        let embed_w = slot(INPUT_CHANNELS * p2, d);
        let embed_b = slot(1, d);
        let layers = (0..c.layers)
            .map(|_| LayerSlots {
                ln1_g: slot(1, d),
                ln1_b: slot(1, d),
                wq: slot(d, d),
                bq: slot(1, d),
                wk: slot(d, d),
                bk: slot(1, d),
                wv: slot(d, d),
                bv: slot(1, d),
                wo: slot(d, d),
                bo: slot(1, d),
                ln2_g: slot(1, d),
                ln2_b: slot(1, d),
                w1: slot(d, 4 * d),
                b1: slot(1, 4 * d),
                w2: slot(4 * d, d),
                b2: slot(1, d),
            })
            .collect();
        let lnf_g = slot(1, d);
        let lnf_b = slot(1, d);
        let head_w = slot(d, CHANNELS * p2);
        let head_b = slot(1, CHANNELS * p2);
        Self {
            embed_w,
            embed_b,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: at,
        }
    }
}

/// Initial parameters: scaled normal weights, unit LayerNorm gains, and a
/// head whose bias alone decodes to a sensible starting scene.
pub(crate) fn init_params(c: &LrmConfig, layout: &Layout, head_bias: &[f64]) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut p = vec![0f32; layout.total];
    let mut normal = |p: &mut [f32], s: &Slot, std: f64| {
        let n = Normal::new(0.0, std).expect("positive std");
        for v in &mut p[s.range()] {
            *v = n.sample(&mut rng) as f32;
        }
    };
    let fan = |s: &Slot| 1.0 / (s.rows as f64).sqrt();
    let depth = 1.0 / (2.0 * c.layers.max(1) as f64).sqrt();
    normal(&mut p, &layout.embed_w, fan(&layout.embed_w));
    for l in &layout.layers {
        p[l.ln1_g.range()].fill(1.0);
        p[l.ln2_g.range()].fill(1.0);
        normal(&mut p, &l.wq, fan(&l.wq));
        normal(&mut p, &l.wk, fan(&l.wk));
        normal(&mut p, &l.wv, fan(&l.wv));
        normal(&mut p, &l.wo, fan(&l.wo) * depth);
        normal(&mut p, &l.w1, fan(&l.w1));
        normal(&mut p, &l.w2, fan(&l.w2) * depth);
    }
    p[layout.lnf_g.range()].fill(1.0);
    normal(&mut p, &layout.head_w, 0.1 * fan(&layout.head_w));
    for (v, b) in p[layout.head_b.range()].iter_mut().zip(head_bias) {
        *v = *b as f32;
    }
    p
}

fn add_row_bias<T: Real>(m: &mut DMatrix<T>, b: &[T]) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
}

fn column_sums<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    m.column_iter().map(|c| c.sum()).collect()
}

fn linear<T: Real>(x: &DMatrix<T>, w: &DMatrix<T>, b: &[T]) -> DMatrix<T> {
    let mut y = x * w;
    add_row_bias(&mut y, b);
    y
}

struct LnCache<T: Real> {
    xhat: DMatrix<T>,
    inv_std: Vec<T>,
}

fn layer_norm<T: Real>(x: &DMatrix<T>, g: &[T], b: &[T]) -> (DMatrix<T>, LnCache<T>) {
    let (n, d) = (x.nrows(), x.ncols());
    let dn = T::lit(d as f64);
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = xhat.row_mut(i);
        let mean = row.sum() / dn;
        row.add_scalar_mut(-mean);
        let var = row.norm_squared() / dn;
        let inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
        row *= inv;
        inv_std.push(inv);
    }
    let mut y = xhat.clone();
    for (j, mut col) in y.column_iter_mut().enumerate() {
        col *= g[j];
        col.add_scalar_mut(b[j]);
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dγ`, `dβ`.
fn layer_norm_backward<T: Real>(
    dy: &DMatrix<T>,
    c: &LnCache<T>,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> DMatrix<T> {
    let (n, d) = (dy.nrows(), dy.ncols());
    let dn = T::lit(d as f64);
    for j in 0..d {
        let (cy, cx) = (dy.column(j), c.xhat.column(j));
        dg[j] += cy.dot(&cx);
        db[j] += cy.sum();
    }
    let mut dxhat = dy.clone();
    for (j, mut col) in dxhat.column_iter_mut().enumerate() {
        col *= g[j];
    }
    let mut dx = DMatrix::zeros(n, d);
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = c.xhat.row(i);
        let s1 = dh.sum();
        let s2 = dh.dot(&xh);
        let k = c.inv_std[i] / dn;
        for j in 0..d {
            dx[(i, j)] = k * (dn * dh[j] - s1 - xh[j] * s2);
        }
    }
    dx
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let th = (c * (x + k * x * x * x)).tanh();
    T::lit(0.5) * (T::one() + th)
        + T::lit(0.5) * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x)
}

struct LayerCache<T: Real> {
    ln1: LnCache<T>,
    h1: DMatrix<T>,
    q: DMatrix<T>,
    k: DMatrix<T>,
    v: DMatrix<T>,
    probs: Vec<DMatrix<T>>,
    o: DMatrix<T>,
    ln2: LnCache<T>,
    h2: DMatrix<T>,
    u: DMatrix<T>,
    act: DMatrix<T>,
}

pub(crate) struct Cache<T: Real> {
    patches: DMatrix<T>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    hf: DMatrix<T>,
}

/// Patch embedding: `N × (9·p²)` patches to `N × d` tokens.
pub(crate) fn embed<T: Real>(layout: &Layout, p: &[T], patches: &DMatrix<T>) -> DMatrix<T> {
    linear(patches, &layout.embed_w.mat(p), &p[layout.embed_b.range()])
}

fn softmax_rows<T: Real>(s: &mut DMatrix<T>) {
    for i in 0..s.nrows() {
        let mut row = s.row_mut(i);
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Transformer trunk and head from embedded tokens to per-token head outputs
/// (`N × 12·p²`).
pub(crate) fn trunk<T: Real>(
    c: &LrmConfig,
    layout: &Layout,
    p: &[T],
    patches: DMatrix<T>,
    tokens: DMatrix<T>,
) -> (DMatrix<T>, Cache<T>) {
    let heads = c.heads;
    let dh = c.dim / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut x = tokens;
    let mut caches = Vec::with_capacity(layout.layers.len());
    for l in &layout.layers {
        let (h1, ln1) = layer_norm(&x, &p[l.ln1_g.range()], &p[l.ln1_b.range()]);
        let q = linear(&h1, &l.wq.mat(p), &p[l.bq.range()]);
        let k = linear(&h1, &l.wk.mat(p), &p[l.bk.range()]);
        let v = linear(&h1, &l.wv.mat(p), &p[l.bv.range()]);
        let mut o = DMatrix::zeros(x.nrows(), c.dim);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.columns(h * dh, dh);
            let kh = k.columns(h * dh, dh);
            let mut s = qh * kh.transpose() * scale;
            softmax_rows(&mut s);
            o.columns_mut(h * dh, dh)
                .copy_from(&(&s * v.columns(h * dh, dh)));
            probs.push(s);
        }
        x += linear(&o, &l.wo.mat(p), &p[l.bo.range()]);
        let (h2, ln2) = layer_norm(&x, &p[l.ln2_g.range()], &p[l.ln2_b.range()]);
        let u = linear(&h2, &l.w1.mat(p), &p[l.b1.range()]);
        let act = u.map(gelu);
        x += linear(&act, &l.w2.mat(p), &p[l.b2.range()]);
        caches.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            h2,
            u,
            act,
        });
    }
    let (hf, lnf) = layer_norm(&x, &p[layout.lnf_g.range()], &p[layout.lnf_b.range()]);
    let out = linear(&hf, &layout.head_w.mat(p), &p[layout.head_b.range()]);
    (
        out,
        Cache {
            patches,
            layers: caches,
            lnf,
            hf,
        },
    )
}

/// Accumulates parameter gradients for an upstream gradient on the head output.
pub(crate) fn backward<T: Real>(
    c: &LrmConfig,
    layout: &Layout,
    p: &[T],
    cache: &Cache<T>,
    d_out: &DMatrix<T>,
    grads: &mut [T],
) {
    let heads = c.heads;
    let dh = c.dim / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    layout.head_w.add_to(grads, &(cache.hf.transpose() * d_out));
    layout.head_b.add_row_to(grads, &column_sums(d_out));
    let d_hf = d_out * layout.head_w.mat(p).transpose();
    let (mut dg, mut db) = (vec![T::zero(); c.dim], vec![T::zero(); c.dim]);
    let mut dx = layer_norm_backward(
        &d_hf,
        &cache.lnf,
        &p[layout.lnf_g.range()],
        &mut dg,
        &mut db,
    );
    layout.lnf_g.add_row_to(grads, &dg);
    layout.lnf_b.add_row_to(grads, &db);

    for (l, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        // MLP branch
        l.w2.add_to(grads, &(lc.act.transpose() * &dx));
        l.b2.add_row_to(grads, &column_sums(&dx));
        let mut du = &dx * l.w2.mat(p).transpose();
        du.zip_apply(&lc.u, |g, u| *g *= gelu_grad(u));
        l.w1.add_to(grads, &(lc.h2.transpose() * &du));
        l.b1.add_row_to(grads, &column_sums(&du));
        let dh2 = du * l.w1.mat(p).transpose();
        let (mut dg, mut db) = (vec![T::zero(); c.dim], vec![T::zero(); c.dim]);
        dx += layer_norm_backward(&dh2, &lc.ln2, &p[l.ln2_g.range()], &mut dg, &mut db);
        l.ln2_g.add_row_to(grads, &dg);
        l.ln2_b.add_row_to(grads, &db);

        // attention branch
        l.wo.add_to(grads, &(lc.o.transpose() * &dx));
        l.bo.add_row_to(grads, &column_sums(&dx));
        let d_o = &dx * l.wo.mat(p).transpose();
        let n = dx.nrows();
        let mut dq = DMatrix::zeros(n, c.dim);
        let mut dk = DMatrix::zeros(n, c.dim);
        let mut dv = DMatrix::zeros(n, c.dim);
        for h in 0..heads {
            let pr = &lc.probs[h];
            let doh = d_o.columns(h * dh, dh);
            let vh = lc.v.columns(h * dh, dh);
            dv.columns_mut(h * dh, dh)
                .copy_from(&(pr.transpose() * doh));
            let mut ds = doh * vh.transpose();
            for i in 0..n {
                let dot = ds.row(i).dot(&pr.row(i));
                for j in 0..n {
                    ds[(i, j)] = pr[(i, j)] * (ds[(i, j)] - dot);
                }
            }
            ds *= scale;
            dq.columns_mut(h * dh, dh)
                .copy_from(&(&ds * lc.k.columns(h * dh, dh)));
            dk.columns_mut(h * dh, dh)
                .copy_from(&(ds.transpose() * lc.q.columns(h * dh, dh)));
        }
        let h1t = lc.h1.transpose();
        l.wq.add_to(grads, &(&h1t * &dq));
        l.bq.add_row_to(grads, &column_sums(&dq));
        l.wk.add_to(grads, &(&h1t * &dk));
        l.bk.add_row_to(grads, &column_sums(&dk));
        l.wv.add_to(grads, &(&h1t * &dv));
        l.bv.add_row_to(grads, &column_sums(&dv));
        let dh1 = dq * l.wq.mat(p).transpose()
            + dk * l.wk.mat(p).transpose()
            + dv * l.wv.mat(p).transpose();
        let (mut dg, mut db) = (vec![T::zero(); c.dim], vec![T::zero(); c.dim]);
        dx += layer_norm_backward(&dh1, &lc.ln1, &p[l.ln1_g.range()], &mut dg, &mut db);
        l.ln1_g.add_row_to(grads, &dg);
        l.ln1_b.add_row_to(grads, &db);
    }

    layout
        .embed_w
        .add_to(grads, &(cache.patches.transpose() * &dx));
    layout.embed_b.add_row_to(grads, &column_sums(&dx));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LrmConfig {
        LrmConfig {
            image_size: 8,
            patch: 4,
            dim: 8,
            layers: 2,
            heads: 2,
            views: 1,
            ..LrmConfig::default()
        }
    }

    fn objective(
        c: &LrmConfig,
        layout: &Layout,
        p: &[f64],
        patches: &DMatrix<f64>,
        w: &DMatrix<f64>,
    ) -> f64 {
        let tokens = embed(layout, p, patches);
        let (out, _) = trunk(c, layout, p, patches.clone(), tokens);
        out.component_mul(w).sum()
    }

    #[test]
    fn trunk_gradients_match_finite_differences() {
        let c = tiny();
        let layout = Layout::new(&c);
        let bias = vec![0.0; layout.head_b.len()];
        let p: Vec<f64> = init_params(&c, &layout, &bias)
            .iter()
            .map(|v| *v as f64)
            .collect();
        let n = 4;
        let patches = DMatrix::from_fn(n, layout.embed_w.rows, |i, j| {
            ((i * 31 + j * 17) % 23) as f64 / 23.0 - 0.4
        });
        let w = DMatrix::from_fn(n, layout.head_w.cols, |i, j| {
            ((i * 13 + j * 7) % 19) as f64 / 19.0 - 0.5
        });
        let tokens = embed(&layout, &p, &patches);
        let (_, cache) = trunk(&c, &layout, &p, patches.clone(), tokens);
        let mut g = vec![0.0; p.len()];
        backward(&c, &layout, &p, &cache, &w, &mut g);
        let h = 1e-6;
        // every tensor gets probed at a few positions
        let mut probes = vec![
            layout.embed_w.offset + 5,
            layout.embed_b.offset + 1,
            layout.head_w.offset + 3,
        ];
        probes.push(layout.head_b.offset + 2);
        probes.push(layout.lnf_g.offset + 4);
        for l in &layout.layers {
            for s in [
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b,
                l.w1, l.b1, l.w2, l.b2,
            ] {
                probes.push(s.offset + s.len() / 3);
            }
        }
        for &i in &probes {
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let fd = (objective(&c, &layout, &a, &patches, &w)
                - objective(&c, &layout, &b, &patches, &w))
                / (2.0 * h);
            // key biases get exactly zero gradient (softmax is shift invariant per row)
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(
                err < 1e-5 || (fd - g[i]).abs() < 1e-9,
                "param {i}: fd {fd} analytic {}",
                g[i]
            );
        }
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

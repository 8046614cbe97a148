//! Fused scan node.
//!
//! Layouts, with `M = batch · time`:
//! `alpha`, `beta`, `gamma` are `[M, H]`; `b`, `c` are `[M, H, R·N]`;
//! `x` and the output are `[M, H, R·P]`. Rank-1 heads run the recurrence
//! directly; wider heads go through the chunked widened kernel. The
//! backward pass recomputes the state trajectory per `(batch, head)` and
//! runs the reverse-time adjoint.

use crate::discretize::DiscreteCoeffs;
use crate::error::{dim_err, Result};
use crate::mimo::default_mimo_chunk;
use crate::ssd::chunked_widened;
use crate::tensor::Tensor;

use super::{Node, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub time: usize,
    pub heads: usize,
    pub state: usize,
    pub head_dim: usize,
    pub rank: usize,
}

impl ScanDims {
    fn rows(&self) -> usize {
        self.batch * self.time
    }
}

pub struct ScanInputs<'t> {
    pub alpha: Var<'t>,
    /// Lookback weight; `None` gives the two-term scan.
    pub beta: Option<Var<'t>>,
    pub gamma: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
    pub x: Var<'t>,
}

pub(super) struct ScanNode {
    dims: ScanDims,
    alpha: usize,
    beta: Option<usize>,
    gamma: usize,
    b: usize,
    c: usize,
    x: usize,
}

/// Chunk used for rank > 1 heads in the forward pass.
pub const SCAN_SISO_CHUNK: usize = 64;

struct Views<'a> {
    d: ScanDims,
    alpha: &'a [f64],
    beta: Option<&'a [f64]>,
    gamma: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    x: &'a [f64],
}

impl Views<'_> {
    #[inline]
    fn co(&self, row: usize, h: usize) -> DiscreteCoeffs {
        let k = row * self.d.heads + h;
        DiscreteCoeffs::new(self.alpha[k], self.beta.map_or(0.0, |b| b[k]), self.gamma[k])
    }

    #[inline]
    fn bn(&self, row: usize, h: usize) -> &[f64] {
        let w = self.d.rank * self.d.state;
        let k = (row * self.d.heads + h) * w;
        &self.b[k..k + w]
    }

    #[inline]
    fn cn(&self, row: usize, h: usize) -> &[f64] {
        let w = self.d.rank * self.d.state;
        let k = (row * self.d.heads + h) * w;
        &self.c[k..k + w]
    }

    #[inline]
    fn xp(&self, row: usize, h: usize) -> &[f64] {
        let w = self.d.rank * self.d.head_dim;
        let k = (row * self.d.heads + h) * w;
        &self.x[k..k + w]
    }

    /// Rank-1 update in one pass over `h`, optionally emitting `y = hᵀC`.
    fn advance_siso(&self, h: &mut [f64], row: usize, t: usize, head: usize, y: Option<&mut [f64]>) {
        let p = self.d.head_dim;
        let co = self.co(row, head);
        let (bn, xp) = (self.bn(row, head), self.xp(row, head));
        let (bprev, xprev) = if t > 0 {
            (self.bn(row - 1, head), self.xp(row - 1, head))
        } else {
            (bn, xp)
        };
        let beta = if t > 0 { co.beta } else { 0.0 };
        let mut out = y;
        let cn = self.cn(row, head);
        for (k, hrow) in h.chunks_exact_mut(p).enumerate() {
            let (sb, sg) = (beta * bprev[k], co.gamma * bn[k]);
            for q in 0..p {
                hrow[q] = co.alpha * hrow[q] + sb * xprev[q] + sg * xp[q];
            }
            if let Some(o) = out.as_deref_mut() {
                let ck = cn[k];
                for q in 0..p {
                    o[q] += ck * hrow[q];
                }
            }
        }
    }

    /// `h ← α h + β Σ_j B_{t-1}^j X_{t-1}^jᵀ + γ Σ_j B_t^j X_t^jᵀ`
    fn advance(&self, h: &mut [f64], row: usize, t: usize, head: usize) {
        let (n, p, r) = (self.d.state, self.d.head_dim, self.d.rank);
        let co = self.co(row, head);
        h.iter_mut().for_each(|v| *v *= co.alpha);
        let mut add = |w: f64, bb: &[f64], xx: &[f64]| {
            for j in 0..r {
                let (bj, xj) = (&bb[j * n..(j + 1) * n], &xx[j * p..(j + 1) * p]);
                for k in 0..n {
                    let s = w * bj[k];
                    for (hv, &xv) in h[k * p..(k + 1) * p].iter_mut().zip(xj) {
                        *hv += s * xv;
                    }
                }
            }
        };
        if t > 0 && co.beta != 0.0 {
            add(co.beta, self.bn(row - 1, head), self.xp(row - 1, head));
        }
        add(co.gamma, self.bn(row, head), self.xp(row, head));
    }
}

fn check(d: &ScanDims, a: &Tensor, beta: Option<&Tensor>, g: &Tensor, b: &Tensor, c: &Tensor, x: &Tensor) -> Result<()> {
    let rows = d.rows();
    let coeff = rows * d.heads;
    for t in [Some(a), beta, Some(g)].into_iter().flatten() {
        if t.numel() != coeff {
            return Err(dim_err("scan coefficients", t.shape(), &[rows, d.heads]));
        }
    }
    let bw = coeff * d.rank * d.state;
    if b.numel() != bw || c.numel() != bw {
        return Err(dim_err("scan B/C", b.shape(), &[rows, d.heads, d.rank * d.state]));
    }
    if x.numel() != coeff * d.rank * d.head_dim {
        return Err(dim_err("scan x", x.shape(), &[rows, d.heads, d.rank * d.head_dim]));
    }
    Ok(())
}

fn forward(v: &Views<'_>) -> Result<Tensor> {
    let d = v.d;
    let (n, p, r) = (d.state, d.head_dim, d.rank);
    let mut y = vec![0.0; d.rows() * d.heads * r * p];
    let mut h = vec![0.0; n * p];
    for bt in 0..d.batch {
        for head in 0..d.heads {
            if r > 1 {
                mimo_head(v, bt, head, &mut y)?;
                continue;
            }
            h.iter_mut().for_each(|x| *x = 0.0);
            for t in 0..d.time {
                let row = bt * d.time + t;
                let base = (row * d.heads + head) * p;
                v.advance_siso(&mut h, row, t, head, Some(&mut y[base..base + p]));
            }
        }
    }
    Tensor::new(vec![d.rows(), d.heads, r * p], y)
}

fn mimo_head(v: &Views<'_>, bt: usize, head: usize, y: &mut [f64]) -> Result<()> {
    let d = v.d;
    let (n, p, r, t_len) = (d.state, d.head_dim, d.rank, d.time);
    let rows = bt * t_len..(bt + 1) * t_len;
    let coeffs: Vec<DiscreteCoeffs> = rows.clone().map(|row| v.co(row, head)).collect();
    let gather = |f: &dyn Fn(usize) -> Vec<f64>, w: usize| -> Result<Tensor> {
        let data: Vec<f64> = rows.clone().flat_map(f).collect();
        Tensor::new(vec![t_len, r, w], data)
    };
    let b = gather(&|row| v.bn(row, head).to_vec(), n)?;
    let c = gather(&|row| v.cn(row, head).to_vec(), n)?;
    let x = gather(&|row| v.xp(row, head).to_vec(), p)?;
    let out = chunked_widened(&coeffs, &b, &c, &x, default_mimo_chunk(SCAN_SISO_CHUNK, r))?;
    for (t, row) in rows.enumerate() {
        let base = (row * d.heads + head) * r * p;
        y[base..base + r * p].copy_from_slice(out.y.row(t));
    }
    Ok(())
}

impl<'t> ScanInputs<'t> {
    /// Runs the scan and records it on the tape.
    pub fn apply(self, dims: ScanDims) -> Result<Var<'t>> {
        let value = {
            let (a, g, b, c, x) = (
                self.alpha.value(),
                self.gamma.value(),
                self.b.value(),
                self.c.value(),
                self.x.value(),
            );
            let beta = self.beta.map(|v| v.value());
            check(&dims, &a, beta.as_deref(), &g, &b, &c, &x)?;
            forward(&Views {
                d: dims,
                alpha: a.data(),
                beta: beta.as_ref().map(|t| t.data()),
                gamma: g.data(),
                b: b.data(),
                c: c.data(),
                x: x.data(),
            })?
        };
        let node = ScanNode {
            dims,
            alpha: self.alpha.id,
            beta: self.beta.map(|v| v.id),
            gamma: self.gamma.id,
            b: self.b.id,
            c: self.c.id,
            x: self.x.id,
        };
        Ok(self.alpha.push_scan(value, node))
    }
}

pub(super) fn backward(node: &ScanNode, nodes: &[Node], g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| &nodes[id].value;
    let v = Views {
        d: node.dims,
        alpha: val(node.alpha).data(),
        beta: node.beta.map(|b| val(b).data()),
        gamma: val(node.gamma).data(),
        b: val(node.b).data(),
        c: val(node.c).data(),
        x: val(node.x).data(),
    };
    let d = node.dims;
    let (n, p, r, t_len, heads) = (d.state, d.head_dim, d.rank, d.time, d.heads);
    let np = n * p;
    let mut da = vec![0.0; v.alpha.len()];
    let mut dbeta = vec![0.0; v.alpha.len()];
    let mut dgam = vec![0.0; v.alpha.len()];
    let mut db = vec![0.0; v.b.len()];
    let mut dc = vec![0.0; v.c.len()];
    let mut dx = vec![0.0; v.x.len()];
    let gy = g.data();

    let mut states = vec![0.0; t_len * np];
    let mut acc = vec![0.0; np];
    let mut next = vec![0.0; np];
    for bt in 0..d.batch {
        for head in 0..heads {
            let mut h = vec![0.0; np];
            for t in 0..t_len {
                if r == 1 {
                    v.advance_siso(&mut h, bt * t_len + t, t, head, None);
                } else {
                    v.advance(&mut h, bt * t_len + t, t, head);
                }
                states[t * np..(t + 1) * np].copy_from_slice(&h);
            }
            next.iter_mut().for_each(|x| *x = 0.0);
            for t in (0..t_len).rev() {
                let row = bt * t_len + t;
                let ci = row * heads + head;
                let co = v.co(row, head);
                let later = (t + 1 < t_len).then(|| v.co(row + 1, head));
                let (bn, cn, xp) = (v.bn(row, head), v.cn(row, head), v.xp(row, head));
                let gyt = &gy[ci * r * p..(ci + 1) * r * p];
                let hs = &states[t * np..(t + 1) * np];

                let a_next = later.map_or(0.0, |c| c.alpha);
                let beta_next = later.map_or(0.0, |c| c.beta);
                if r == 1 {
                    let prev = (t > 0).then(|| &states[(t - 1) * np..t * np]);
                    let dxp = &mut dx[ci * p..(ci + 1) * p];
                    let (mut dal, mut dga, mut dbe) = (0.0, 0.0, 0.0);
                    for k in 0..n {
                        let span = k * p..(k + 1) * p;
                        let (hrow, nrow, arow) = (&hs[span.clone()], &next[span.clone()], &mut acc[span.clone()]);
                        let (ck, bk) = (cn[k], bn[k]);
                        let (mut s, mut w, mut u) = (0.0, 0.0, 0.0);
                        for q in 0..p {
                            let a = a_next * nrow[q] + ck * gyt[q];
                            arow[q] = a;
                            s += hrow[q] * gyt[q];
                            w += a * xp[q];
                            u += nrow[q] * xp[q];
                            dxp[q] += (co.gamma * a + beta_next * nrow[q]) * bk;
                        }
                        if let Some(pr) = prev {
                            dal += arow.iter().zip(&pr[span]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dc[ci * n + k] += s;
                        dga += bk * w;
                        dbe += bk * u;
                        db[ci * n + k] += co.gamma * w + beta_next * u;
                    }
                    da[ci] += dal;
                    dgam[ci] += dga;
                    if t + 1 < t_len {
                        dbeta[(row + 1) * heads + head] += dbe;
                    }
                    std::mem::swap(&mut acc, &mut next);
                    continue;
                }

                // dh_t = α_{t+1} dh_{t+1} + Σ_i C_t^i ⊗ dY_t^i
                for (a, nx) in acc.iter_mut().zip(&next) {
                    *a = a_next * nx;
                }
                for i in 0..r {
                    let (ci_n, gi) = (&cn[i * n..(i + 1) * n], &gyt[i * p..(i + 1) * p]);
                    let dci = &mut dc[ci * r * n + i * n..ci * r * n + (i + 1) * n];
                    for k in 0..n {
                        let hrow = &hs[k * p..(k + 1) * p];
                        let arow = &mut acc[k * p..(k + 1) * p];
                        let mut s = 0.0;
                        for q in 0..p {
                            arow[q] += ci_n[k] * gi[q];
                            s += hrow[q] * gi[q];
                        }
                        dci[k] += s;
                    }
                }

                // dα_t = <dh_t, h_{t-1}>
                if t > 0 {
                    let prev = &states[(t - 1) * np..t * np];
                    da[ci] += acc.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
                }

                let dbn = &mut db[ci * r * n..(ci + 1) * r * n];
                let dxp = &mut dx[ci * r * p..(ci + 1) * r * p];
                for j in 0..r {
                    let (bj, xj) = (&bn[j * n..(j + 1) * n], &xp[j * p..(j + 1) * p]);
                    for k in 0..n {
                        let arow = &acc[k * p..(k + 1) * p];
                        let nrow = &next[k * p..(k + 1) * p];
                        // w = Σ_q dh_t X_t, u = Σ_q dh_{t+1} X_t
                        let mut w = 0.0;
                        let mut u = 0.0;
                        for q in 0..p {
                            w += arow[q] * xj[q];
                            u += nrow[q] * xj[q];
                            dxp[j * p + q] += co.gamma * arow[q] * bj[k] + beta_next * nrow[q] * bj[k];
                        }
                        dgam[ci] += bj[k] * w;
                        dbn[j * n + k] += co.gamma * w + beta_next * u;
                        if t + 1 < t_len {
                            dbeta[(row + 1) * heads + head] += bj[k] * u;
                        }
                    }
                }
                std::mem::swap(&mut acc, &mut next);
            }
        }
    }
    let mut out = vec![
        (node.alpha, Tensor::new(val(node.alpha).shape().to_vec(), da)?),
        (node.gamma, Tensor::new(val(node.gamma).shape().to_vec(), dgam)?),
        (node.b, Tensor::new(val(node.b).shape().to_vec(), db)?),
        (node.c, Tensor::new(val(node.c).shape().to_vec(), dc)?),
        (node.x, Tensor::new(val(node.x).shape().to_vec(), dx)?),
    ];
    if let Some(b) = node.beta {
        out.push((b, Tensor::new(val(b).shape().to_vec(), dbeta)?));
    }
    Ok(out)
}

use crate::error::{dim_err, Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, sigmoid, silu, softplus, Tensor};

use super::scan::{self, ScanNode};
use super::{Node, Var};

pub(super) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a·x + c`
    Affine(usize, f64),
    Exp(usize),
    Sigmoid(usize),
    Silu(usize),
    Softplus(usize),
    MatMul(usize, usize),
    /// `x + b` with `b.shape` a suffix of `x.shape`.
    AddSuffix(usize, usize),
    MulSuffix(usize, usize),
    Reshape(usize),
    Sum(usize),
    RmsNorm { x: usize, width: usize, eps: f64 },
    Gather { table: usize, ids: Vec<usize> },
    HeadBroadcast { x: usize, heads: usize },
    HeadOuter { delta: usize, theta: usize },
    CumsumTime { x: usize, batch: usize },
    Rope { v: usize, angles: usize, sign: f64 },
    RankExpand { x: usize, w: usize },
    RankContract { y: usize, w: usize },
    CausalConv { x: usize, w: usize, b: usize, batch: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Tensor },
    Scan(Box<ScanNode>),
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn suffix_check(op: &'static str, x: &Tensor, b: &Tensor) -> Result<usize> {
    let (xs, bs) = (x.shape(), b.shape());
    if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs || b.numel() == 0 {
        return Err(dim_err(op, xs, bs));
    }
    Ok(b.numel())
}

impl<'t> Var<'t> {
    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.push(value, op)
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape(name, &a, &b)?;
            a.zip_with(&b, f)?
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// `a·x + c`
    pub fn affine(self, a: f64, c: f64) -> Var<'t> {
        self.unary(|x| a * x + c, Op::Affine(self.id, a))
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(silu, Op::Silu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    /// `[M, K] · [K, L]`
    pub fn matmul(self, w: Var<'t>) -> Result<Var<'t>> {
        let value = matmul(&self.value(), &w.value())?;
        Ok(self.tape.push(value, Op::MatMul(self.id, w.id)))
    }

    /// Adds `b` broadcast over the leading axes of `self`.
    pub fn add_suffix(self, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (x, bv) = (self.value(), b.value());
            let k = suffix_check("add_suffix", &x, &bv)?;
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bv.data()[i % k];
            }
            out
        };
        Ok(self.tape.push(value, Op::AddSuffix(self.id, b.id)))
    }

    /// Multiplies by `s` broadcast over the leading axes of `self`.
    pub fn mul_suffix(self, s: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (x, sv) = (self.value(), s.value());
            let k = suffix_check("mul_suffix", &x, &sv)?;
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= sv.data()[i % k];
            }
            out
        };
        Ok(self.tape.push(value, Op::MulSuffix(self.id, s.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().affine(1.0 / n, 0.0)
    }

    /// RMS-normalizes consecutive groups of `width` elements:
    /// `v / sqrt(mean(v²) + eps)`.
    pub fn rms_norm(self, width: usize, eps: f64) -> Result<Var<'t>> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("rms_norm eps must be > 0, got {eps}")));
        }
        let value = {
            let x = self.value();
            if width == 0 || x.numel() % width != 0 {
                return Err(dim_err("rms_norm", x.shape(), &[width]));
            }
            let mut out = x.clone();
            for g in out.data_mut().chunks_mut(width) {
                let r = 1.0 / (g.iter().map(|v| v * v).sum::<f64>() / width as f64 + eps).sqrt();
                g.iter_mut().for_each(|v| *v *= r);
            }
            out
        };
        Ok(self.tape.push(value, Op::RmsNorm { x: self.id, width, eps }))
    }

    /// Rows `ids` of a `[V, D]` table, `[ids.len(), D]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let table = self.value();
            if table.rank() != 2 {
                return Err(dim_err("gather_rows", table.shape(), &[0, 0]));
            }
            let (v, d) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= v {
                    return Err(Error::Parameter(format!("row {i} out of range for table of {v}")));
                }
                data.extend_from_slice(table.row(i));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        Ok(self.tape.push(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `[M, G] → [M, H, G]` by copying each row to every head.
    pub fn head_broadcast(self, heads: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if x.rank() != 2 || heads == 0 {
                return Err(dim_err("head_broadcast", x.shape(), &[heads]));
            }
            let (m, g) = (x.shape()[0], x.shape()[1]);
            let mut data = Vec::with_capacity(m * heads * g);
            for i in 0..m {
                for _ in 0..heads {
                    data.extend_from_slice(x.row(i));
                }
            }
            Tensor::new(vec![m, heads, g], data)?
        };
        Ok(self.tape.push(value, Op::HeadBroadcast { x: self.id, heads }))
    }

    /// `delta [M, H] ⊗ theta [M, K] → [M, H, K]`, per row.
    pub fn head_outer(self, theta: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (d, th) = (self.value(), theta.value());
            if d.rank() != 2 || th.rank() != 2 || d.shape()[0] != th.shape()[0] {
                return Err(dim_err("head_outer", d.shape(), th.shape()));
            }
            let (m, h, k) = (d.shape()[0], d.shape()[1], th.shape()[1]);
            Tensor::from_fn(&[m, h, k], |i| {
                let (r, hh, kk) = (i / (h * k), (i / k) % h, i % k);
                d.at(r, hh) * th.at(r, kk)
            })
        };
        Ok(self.tape.push(
            value,
            Op::HeadOuter {
                delta: self.id,
                theta: theta.id,
            },
        ))
    }

    /// Inclusive prefix sum over time; axis 0 is `batch · time`.
    pub fn cumsum_time(self, batch: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let rows = x.shape().first().copied().unwrap_or(0);
            if batch == 0 || rows % batch != 0 {
                return Err(dim_err("cumsum_time", x.shape(), &[batch]));
            }
            let (time, width) = (rows / batch, x.numel() / rows.max(1));
            let mut out = x.clone();
            let d = out.data_mut();
            for b in 0..batch {
                for t in 1..time {
                    let (prev, cur) = ((b * time + t - 1) * width, (b * time + t) * width);
                    for k in 0..width {
                        d[cur + k] += d[prev + k];
                    }
                }
            }
            out
        };
        Ok(self.tape.push(value, Op::CumsumTime { x: self.id, batch }))
    }

    /// Rotates pairs of `v [M, H, G]` by `sign · angles [M, H, N/2]`; `G` is
    /// a multiple of `N` and every length-`N` block uses the same angles.
    pub fn rope(self, angles: Var<'t>, sign: f64) -> Result<Var<'t>> {
        let value = {
            let (v, a) = (self.value(), angles.value());
            rope_forward(&v, &a, sign)?
        };
        Ok(self.tape.push(
            value,
            Op::Rope {
                v: self.id,
                angles: angles.id,
                sign,
            },
        ))
    }

    /// `x [M, H·P]` scaled per rank by `w [H, R, P]` → `[M, H, R, P]`.
    pub fn rank_expand(self, w: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (x, wv) = (self.value(), w.value());
            let (h, r, p) = rank_dims("rank_expand", &wv)?;
            let m = x.shape()[0];
            if x.numel() != m * h * p {
                return Err(dim_err("rank_expand", x.shape(), wv.shape()));
            }
            Tensor::from_fn(&[m, h, r, p], |i| {
                let (row, hh, rr, pp) = (i / (h * r * p), (i / (r * p)) % h, (i / p) % r, i % p);
                wv.data()[(hh * r + rr) * p + pp] * x.data()[(row * h + hh) * p + pp]
            })
        };
        Ok(self.tape.push(value, Op::RankExpand { x: self.id, w: w.id }))
    }

    /// `y [M, H, R, P]` contracted over `R` with `w [H, R, P]` → `[M, H, P]`.
    pub fn rank_contract(self, w: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (y, wv) = (self.value(), w.value());
            let (h, r, p) = rank_dims("rank_contract", &wv)?;
            let m = y.shape()[0];
            if y.numel() != m * h * r * p {
                return Err(dim_err("rank_contract", y.shape(), wv.shape()));
            }
            Tensor::from_fn(&[m, h, p], |i| {
                let (row, hh, pp) = (i / (h * p), (i / p) % h, i % p);
                (0..r)
                    .map(|rr| wv.data()[(hh * r + rr) * p + pp] * y.data()[((row * h + hh) * r + rr) * p + pp])
                    .sum()
            })
        };
        Ok(self.tape.push(value, Op::RankContract { y: self.id, w: w.id }))
    }

    /// Depthwise causal convolution over time: `x [batch·T, K]`,
    /// `w [K, W]`, `b [K]`; tap `W-1` multiplies the current step.
    pub fn causal_conv(self, w: Var<'t>, b: Var<'t>, batch: usize) -> Result<Var<'t>> {
        let value = {
            let (x, wv, bv) = (self.value(), w.value(), b.value());
            let (rows, k) = (x.shape()[0], x.numel() / x.shape()[0].max(1));
            if x.rank() != 2 || wv.rank() != 2 || wv.shape()[0] != k || bv.shape() != [k] || batch == 0 || rows % batch != 0 {
                return Err(dim_err("causal_conv", x.shape(), wv.shape()));
            }
            let (time, width) = (rows / batch, wv.shape()[1]);
            let mut out = Tensor::zeros(x.shape());
            for bt in 0..batch {
                for t in 0..time {
                    let o = out.row_mut(bt * time + t);
                    o.copy_from_slice(bv.data());
                    for j in 0..width {
                        let Some(src) = (t + j + 1).checked_sub(width) else { continue };
                        let xr = x.row(bt * time + src);
                        for (c, ov) in o.iter_mut().enumerate() {
                            *ov += wv.at(c, j) * xr[c];
                        }
                    }
                }
            }
            out
        };
        Ok(self.tape.push(
            value,
            Op::CausalConv {
                x: self.id,
                w: w.id,
                b: b.id,
                batch,
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits [M, V]` against `targets`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let (value, probs) = {
            let l = self.value();
            if l.rank() != 2 || l.shape()[0] != targets.len() || targets.is_empty() {
                return Err(dim_err("cross_entropy", l.shape(), &[targets.len()]));
            }
            let v = l.shape()[1];
            let mut probs = l.clone();
            let mut loss = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(Error::Parameter(format!("target {t} out of range for {v} classes")));
                }
                let row = probs.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                loss += z.ln() + max - row[t];
                row.iter_mut().for_each(|x| *x = (*x - max).exp() / z);
            }
            (Tensor::scalar(loss / targets.len() as f64), probs)
        };
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub(super) fn push_scan(self, value: Tensor, node: ScanNode) -> Var<'t> {
        self.tape.push(value, Op::Scan(Box::new(node)))
    }
}

fn rank_dims(op: &'static str, w: &Tensor) -> Result<(usize, usize, usize)> {
    if w.rank() != 3 {
        return Err(dim_err(op, w.shape(), &[0, 0, 0]));
    }
    Ok((w.shape()[0], w.shape()[1], w.shape()[2]))
}

fn rope_dims(v: &Tensor, a: &Tensor) -> Result<(usize, usize)> {
    let pairs = a.shape().last().copied().unwrap_or(0);
    let rows = a.numel() / pairs.max(1);
    if pairs == 0 || v.numel() % (rows * 2 * pairs) != 0 || v.numel() < rows * 2 * pairs {
        return Err(dim_err("rope", v.shape(), a.shape()));
    }
    Ok((rows, v.numel() / rows))
}

fn rope_forward(v: &Tensor, a: &Tensor, sign: f64) -> Result<Tensor> {
    let (rows, g) = rope_dims(v, a)?;
    let pairs = a.shape()[a.rank() - 1];
    let mut out = v.clone();
    let d = out.data_mut();
    for r in 0..rows {
        let ang = &a.data()[r * pairs..(r + 1) * pairs];
        for blk in d[r * g..(r + 1) * g].chunks_mut(2 * pairs) {
            for (i, &th) in ang.iter().enumerate() {
                let (s, c) = (sign * th).sin_cos();
                let (x0, x1) = (blk[2 * i], blk[2 * i + 1]);
                blk[2 * i] = c * x0 - s * x1;
                blk[2 * i + 1] = s * x0 + c * x1;
            }
        }
    }
    Ok(out)
}

fn like(t: &Tensor, f: impl FnMut(usize) -> f64) -> Tensor {
    Tensor::from_fn(t.shape(), f)
}

/// Parent gradients of one node given its upstream gradient `g`.
pub(super) fn backward(op: &Op, nodes: &[Node], out: &Tensor, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| &nodes[id].value;
    let gd = g.data();
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_with(val(*b), |x, y| x * y)?),
            (*b, g.zip_with(val(*a), |x, y| x * y)?),
        ],
        Op::Affine(x, a) => vec![(*x, g.scale(*a))],
        Op::Exp(x) => vec![(*x, g.zip_with(out, |x, y| x * y)?)],
        Op::Sigmoid(x) => vec![(*x, g.zip_with(out, |x, s| x * s * (1.0 - s))?)],
        Op::Silu(x) => vec![(
            *x,
            g.zip_with(val(*x), |gv, xv| {
                let s = sigmoid(xv);
                gv * s * (1.0 + xv * (1.0 - s))
            })?,
        )],
        Op::Softplus(x) => vec![(*x, g.zip_with(val(*x), |gv, xv| gv * sigmoid(xv))?)],
        Op::MatMul(a, b) => vec![
            (*a, matmul_nt(g, val(*b))?),
            (*b, matmul_tn(val(*a), g)?),
        ],
        Op::AddSuffix(x, b) => {
            let k = val(*b).numel();
            let mut db = vec![0.0; k];
            for (i, v) in gd.iter().enumerate() {
                db[i % k] += v;
            }
            vec![(*x, g.clone()), (*b, Tensor::new(val(*b).shape().to_vec(), db)?)]
        }
        Op::MulSuffix(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let k = sv.numel();
            let mut ds = vec![0.0; k];
            for (i, v) in gd.iter().enumerate() {
                ds[i % k] += v * xv.data()[i];
            }
            vec![
                (*x, like(xv, |i| gd[i] * sv.data()[i % k])),
                (*s, Tensor::new(sv.shape().to_vec(), ds)?),
            ]
        }
        Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
        Op::RmsNorm { x, width, eps } => {
            let xv = val(*x);
            let mut dx = xv.clone();
            for ((dg, xg), gg) in dx
                .data_mut()
                .chunks_mut(*width)
                .zip(xv.data().chunks(*width))
                .zip(gd.chunks(*width))
            {
                let n = *width as f64;
                let r = 1.0 / (xg.iter().map(|v| v * v).sum::<f64>() / n + eps).sqrt();
                let dot: f64 = gg.iter().zip(xg).map(|(a, b)| a * b).sum();
                for ((d, &xi), &gi) in dg.iter_mut().zip(xg).zip(gg) {
                    *d = r * gi - r * r * r * xi * dot / n;
                }
            }
            vec![(*x, dx)]
        }
        Op::Gather { table, ids } => {
            let tv = val(*table);
            let d = tv.shape()[1];
            let mut dt = Tensor::zeros(tv.shape());
            for (k, &i) in ids.iter().enumerate() {
                for (a, v) in dt.row_mut(i).iter_mut().zip(&gd[k * d..(k + 1) * d]) {
                    *a += v;
                }
            }
            vec![(*table, dt)]
        }
        Op::HeadBroadcast { x, heads } => {
            let xv = val(*x);
            let (m, w) = (xv.shape()[0], xv.shape()[1]);
            let dx = Tensor::from_fn(xv.shape(), |i| {
                let (r, k) = (i / w, i % w);
                (0..*heads).map(|h| gd[(r * heads + h) * w + k]).sum()
            });
            debug_assert_eq!(dx.numel(), m * w);
            vec![(*x, dx)]
        }
        Op::HeadOuter { delta, theta } => {
            let (dv, tv) = (val(*delta), val(*theta));
            let (h, k) = (dv.shape()[1], tv.shape()[1]);
            let dd = like(dv, |i| {
                let (r, hh) = (i / h, i % h);
                (0..k).map(|kk| gd[(r * h + hh) * k + kk] * tv.at(r, kk)).sum()
            });
            let dt = like(tv, |i| {
                let (r, kk) = (i / k, i % k);
                (0..h).map(|hh| gd[(r * h + hh) * k + kk] * dv.at(r, hh)).sum()
            });
            vec![(*delta, dd), (*theta, dt)]
        }
        Op::CumsumTime { x, batch } => {
            let xv = val(*x);
            let rows = xv.shape()[0];
            let (time, width) = (rows / batch, xv.numel() / rows.max(1));
            let mut dx = g.clone();
            let d = dx.data_mut();
            for b in 0..*batch {
                for t in (0..time.saturating_sub(1)).rev() {
                    let (cur, next) = ((b * time + t) * width, (b * time + t + 1) * width);
                    for k in 0..width {
                        d[cur + k] += d[next + k];
                    }
                }
            }
            vec![(*x, dx)]
        }
        Op::Rope { v, angles, sign } => {
            let av = val(*angles);
            let dv = rope_forward(g, av, -sign)?;
            let (rows, gw) = rope_dims(out, av)?;
            let pairs = av.shape()[av.rank() - 1];
            let mut da = Tensor::zeros(av.shape());
            for r in 0..rows {
                for (blk_o, blk_g) in out.data()[r * gw..(r + 1) * gw]
                    .chunks(2 * pairs)
                    .zip(gd[r * gw..(r + 1) * gw].chunks(2 * pairs))
                {
                    for i in 0..pairs {
                        let dphi = -blk_g[2 * i] * blk_o[2 * i + 1] + blk_g[2 * i + 1] * blk_o[2 * i];
                        da.data_mut()[r * pairs + i] += sign * dphi;
                    }
                }
            }
            vec![(*v, dv), (*angles, da)]
        }
        Op::RankExpand { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let (h, r, p) = rank_dims("rank_expand", wv)?;
            let m = xv.shape()[0];
            let dx = like(xv, |i| {
                let (row, hh, pp) = (i / (h * p), (i / p) % h, i % p);
                (0..r)
                    .map(|rr| gd[((row * h + hh) * r + rr) * p + pp] * wv.data()[(hh * r + rr) * p + pp])
                    .sum()
            });
            let dw = like(wv, |i| {
                let (hh, rr, pp) = (i / (r * p), (i / p) % r, i % p);
                (0..m)
                    .map(|row| gd[((row * h + hh) * r + rr) * p + pp] * xv.data()[(row * h + hh) * p + pp])
                    .sum()
            });
            vec![(*x, dx), (*w, dw)]
        }
        Op::RankContract { y, w } => {
            let (yv, wv) = (val(*y), val(*w));
            let (h, r, p) = rank_dims("rank_contract", wv)?;
            let m = yv.shape()[0];
            let dy = like(yv, |i| {
                let (row, hh, rr, pp) = (i / (h * r * p), (i / (r * p)) % h, (i / p) % r, i % p);
                gd[(row * h + hh) * p + pp] * wv.data()[(hh * r + rr) * p + pp]
            });
            let dw = like(wv, |i| {
                let (hh, rr, pp) = (i / (r * p), (i / p) % r, i % p);
                (0..m)
                    .map(|row| gd[(row * h + hh) * p + pp] * yv.data()[((row * h + hh) * r + rr) * p + pp])
                    .sum()
            });
            vec![(*y, dy), (*w, dw)]
        }
        Op::CausalConv { x, w, b, batch } => {
            let (xv, wv) = (val(*x), val(*w));
            let (rows, k) = (xv.shape()[0], xv.shape()[1]);
            let (time, width) = (rows / batch, wv.shape()[1]);
            let mut dx = Tensor::zeros(xv.shape());
            let mut dw = Tensor::zeros(wv.shape());
            let mut db = vec![0.0; k];
            for bt in 0..*batch {
                for t in 0..time {
                    let gr = &gd[(bt * time + t) * k..(bt * time + t + 1) * k];
                    for (c, v) in gr.iter().enumerate() {
                        db[c] += v;
                    }
                    for j in 0..width {
                        let Some(src) = (t + j + 1).checked_sub(width) else { continue };
                        let row = bt * time + src;
                        for c in 0..k {
                            *dw.at_mut(c, j) += gr[c] * xv.at(row, c);
                            *dx.at_mut(row, c) += gr[c] * wv.at(c, j);
                        }
                    }
                }
            }
            vec![(*x, dx), (*w, dw), (*b, Tensor::from_vec(db))]
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let scale = gd[0] / targets.len() as f64;
            let mut dl = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                *dl.at_mut(i, t) -= 1.0;
            }
            vec![(*logits, dl.scale(scale))]
        }
        Op::Scan(node) => scan::backward(node, nodes, g)?,
    })
}

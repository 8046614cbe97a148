//! Masked-parallel (quadratic) and chunked forms of the scans.
//!
//! The chunked kernel works on "widened" positions: each step carries `R`
//! input columns `B_t^{(j)}, X_t^{(j)}` and `R` output columns `C_t^{(i)}`.
//! SISO is the `R = 1` case, so one kernel serves both.

use serde::{Deserialize, Serialize};

use crate::discretize::DiscreteCoeffs;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Largest sequence for which a dense `T × T` mask is materialized.
pub const MAX_DENSE_MASK: usize = 4096;

/// Factorization self-check tolerance for [`build_mamba3_mask`].
pub const MASK_FACTOR_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct StructuredMask {
    /// Lower-triangular `T × T` mask.
    pub dense: Tensor,
    /// 1-semiseparable decay factor `L[t][s] = Π_{s<i≤t} α_i`.
    pub semiseparable: Tensor,
    /// Band factor: `γ` on the diagonal, `β_{s+1}` at `[s+1][s]`. Identity
    /// scaled by `γ` for the two-term mask.
    pub band: Tensor,
}

fn guard_len(op: &'static str, t: usize) -> Result<()> {
    if t > MAX_DENSE_MASK {
        return Err(Error::Parameter(format!(
            "{op}: dense mask for T = {t} exceeds the {MAX_DENSE_MASK} limit"
        )));
    }
    Ok(())
}

fn semiseparable(alpha: &[f64]) -> Tensor {
    let t = alpha.len();
    let mut l = Tensor::zeros(&[t, t]);
    for s in 0..t {
        let mut v = 1.0;
        *l.at_mut(s, s) = 1.0;
        for r in s + 1..t {
            v *= alpha[r];
            *l.at_mut(r, s) = v;
        }
    }
    l
}

/// Two-term mask `L[t][s] = (Π_{s<i≤t} α_i) γ_s`.
pub fn build_mamba2_mask(alpha: &[f64], gamma: &[f64]) -> Result<StructuredMask> {
    if alpha.len() != gamma.len() {
        return Err(dim_err("build_mamba2_mask", &[alpha.len()], &[gamma.len()]));
    }
    guard_len("build_mamba2_mask", alpha.len())?;
    let t = alpha.len();
    let semi = semiseparable(alpha);
    let mut band = Tensor::zeros(&[t, t]);
    for s in 0..t {
        *band.at_mut(s, s) = gamma[s];
    }
    let dense = Tensor::from_fn(&[t, t], |k| semi.data()[k] * gamma[k % t.max(1)]);
    Ok(StructuredMask {
        dense,
        semiseparable: semi,
        band,
    })
}

/// `γ_s L[t][s] + β_{s+1} L[t][s+1]`, with `L` the decay products; at
/// `β = 0` this is the two-term mask bit for bit.
fn dense_mamba3(coeffs: &[DiscreteCoeffs], semi: &Tensor) -> Tensor {
    let t = coeffs.len();
    let mut m = Tensor::zeros(&[t, t]);
    for s in 0..t {
        for r in s..t {
            let mut v = semi.at(r, s) * coeffs[s].gamma;
            if r > s {
                v += semi.at(r, s + 1) * coeffs[s + 1].beta;
            }
            *m.at_mut(r, s) = v;
        }
    }
    m
}

/// Three-term mask: `γ_s` on the diagonal and
/// `(Π_{s+1<i≤t} α_i)(γ_s α_{s+1} + β_{s+1})` below it. The result is
/// checked against the product of its semiseparable and band factors.
pub fn build_mamba3_mask(coeffs: &[DiscreteCoeffs]) -> Result<StructuredMask> {
    guard_len("build_mamba3_mask", coeffs.len())?;
    let t = coeffs.len();
    let alpha: Vec<f64> = coeffs.iter().map(|c| c.alpha).collect();
    let semi = semiseparable(&alpha);
    let mut band = Tensor::zeros(&[t, t]);
    for s in 0..t {
        *band.at_mut(s, s) = coeffs[s].gamma;
        if s + 1 < t {
            *band.at_mut(s + 1, s) = coeffs[s + 1].beta;
        }
    }
    let dense = dense_mamba3(coeffs, &semi);
    let product = crate::tensor::matmul(&semi, &band)?;
    let scale = dense.max_abs().max(1.0);
    let deviation = product.max_abs_diff(&dense)? / scale;
    if deviation > MASK_FACTOR_TOL {
        return Err(Error::Consistency {
            op: "build_mamba3_mask",
            deviation,
        });
    }
    Ok(StructuredMask {
        dense,
        semiseparable: semi,
        band,
    })
}

fn check_bcx(op: &'static str, b: &Tensor, c: &Tensor, x: &Tensor) -> Result<(usize, usize, usize)> {
    if b.rank() != 2 || c.shape() != b.shape() || x.rank() != 2 || x.shape()[0] != b.shape()[0] {
        return Err(dim_err(op, b.shape(), x.shape()));
    }
    Ok((b.shape()[0], b.shape()[1], x.shape()[1]))
}

/// `Y = (M ⊙ C Bᵀ) X`.
pub fn quadratic_forward(mask: &Tensor, b: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (t, n, p) = check_bcx("quadratic_forward", b, c, x)?;
    if mask.shape() != [t, t] {
        return Err(dim_err("quadratic_forward", mask.shape(), &[t, t]));
    }
    let mut y = Tensor::zeros(&[t, p]);
    for r in 0..t {
        let cr = c.row(r);
        for s in 0..=r {
            let m = mask.at(r, s);
            if m == 0.0 {
                continue;
            }
            let bs = b.row(s);
            let g: f64 = (0..n).map(|i| cr[i] * bs[i]).sum::<f64>() * m;
            let (xs, yr) = (x.row(s).to_vec(), y.row_mut(r));
            for (yv, xv) in yr.iter_mut().zip(xs) {
                *yv += g * xv;
            }
        }
    }
    Ok(y)
}

/// Evaluates the masked form as four contractions against the factors:
/// `Z_s = B_s x_sᵀ`, `Z' = band · Z`, `H = semiseparable · Z'`,
/// `y_t = Hᵀ_t C_t`.
pub fn factored_forward(mask: &StructuredMask, b: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (t, n, p) = check_bcx("factored_forward", b, c, x)?;
    if mask.band.shape() != [t, t] {
        return Err(dim_err("factored_forward", mask.band.shape(), &[t, t]));
    }
    let z: Vec<f64> = (0..t)
        .flat_map(|s| {
            let (bs, xs) = (b.row(s), x.row(s));
            (0..n).flat_map(move |i| xs.iter().map(move |xv| bs[i] * xv))
        })
        .collect();
    let contract = |l: &Tensor, z: &[f64]| {
        let mut out = vec![0.0; t * n * p];
        for r in 0..t {
            for s in 0..t {
                let w = l.at(r, s);
                if w != 0.0 {
                    for k in 0..n * p {
                        out[r * n * p + k] += w * z[s * n * p + k];
                    }
                }
            }
        }
        out
    };
    let z2 = contract(&mask.band, &z);
    let h = contract(&mask.semiseparable, &z2);
    let mut y = Tensor::zeros(&[t, p]);
    for r in 0..t {
        let cr = c.row(r).to_vec();
        let yr = y.row_mut(r);
        for i in 0..n {
            for q in 0..p {
                yr[q] += cr[i] * h[r * n * p + i * p + q];
            }
        }
    }
    Ok(y)
}

/// FLOPs spent by the chunked kernel, one multiply-add counted as 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    /// Intra-chunk `C Bᵀ` products.
    pub gram: u64,
    /// Intra-chunk `(M ⊙ G) X`.
    pub masked_apply: u64,
    /// Chunk-end state built from the chunk's inputs.
    pub state_projection: u64,
    /// Outputs read from the carried state.
    pub emission: u64,
    /// Decay of the carried state into the next chunk.
    pub decay: u64,
    /// Mask construction, Hadamard products and the lookback correction.
    pub negligible: u64,
}

impl FlopCounter {
    pub fn intra(&self) -> u64 {
        self.gram + self.masked_apply
    }

    pub fn inter(&self) -> u64 {
        self.state_projection + self.emission + self.decay
    }

    pub fn total(&self) -> u64 {
        self.intra() + self.inter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    #[serde(rename = "T")]
    pub t: u64,
    #[serde(rename = "C")]
    pub c: u64,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "P")]
    pub p: u64,
    #[serde(rename = "R")]
    pub r: u64,
    pub intra: u64,
    pub inter: u64,
    pub total: u64,
    /// `intra + 4·T·N·P·R`: the total without the per-chunk state decay.
    pub leading_order: u64,
}

fn chunk_lengths(t: u64, c: u64) -> impl Iterator<Item = u64> {
    let full = t / c;
    let tail = t % c;
    std::iter::repeat(c)
        .take(full as usize)
        .chain((tail > 0).then_some(tail))
}

/// Analytic FLOPs of the chunked MIMO kernel with chunk `c` steps and rank
/// `r`; a short final chunk is counted at its true length.
pub fn flop_count_mimo(t: u64, c: u64, n: u64, p: u64, r: u64) -> Result<FlopReport> {
    if c == 0 || r == 0 || n == 0 || p == 0 {
        return Err(Error::Parameter("chunk, rank and sizes must be positive".into()));
    }
    let (mut intra, mut inter) = (0u64, 0u64);
    for l in chunk_lengths(t, c) {
        let w = l * r;
        intra += 2 * w * w * (n + p);
        inter += 4 * n * p * w + 2 * n * p;
    }
    Ok(FlopReport {
        t,
        c,
        n,
        p,
        r,
        intra,
        inter,
        total: intra + inter,
        leading_order: intra + 4 * t * n * p * r,
    })
}

pub fn flop_count_siso(t: u64, c: u64, n: u64, p: u64) -> Result<FlopReport> {
    flop_count_mimo(t, c, n, p, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedOutput {
    /// `[T, R, P]` (SISO callers see `[T, P]`).
    pub y: Tensor,
    pub flops: FlopCounter,
    /// State after the last step, `[N, P]`.
    pub final_state: Tensor,
}

/// Chunked kernel on widened positions.
///
/// Layouts: `b`, `c` are `[T, R, N]`, `x` is `[T, R, P]`. The state is
/// `h_t = α_t h_{t-1} + β_t Σ_j B_{t-1}^{(j)} X_{t-1}^{(j)ᵀ} + γ_t Σ_j B_t^{(j)} X_t^{(j)ᵀ}`
/// and `Y_t^{(i)} = hᵀ_t C_t^{(i)}`.
pub fn chunked_widened(
    coeffs: &[DiscreteCoeffs],
    b: &Tensor,
    c: &Tensor,
    x: &Tensor,
    chunk: usize,
) -> Result<ChunkedOutput> {
    if b.rank() != 3 || c.shape() != b.shape() || x.rank() != 3 {
        return Err(dim_err("chunked_forward", b.shape(), x.shape()));
    }
    let (t_len, r, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    let p = x.shape()[2];
    if x.shape()[..2] != [t_len, r] || coeffs.len() != t_len {
        return Err(dim_err("chunked_forward", x.shape(), &[t_len, r, p]));
    }
    if chunk == 0 {
        return Err(Error::Parameter("chunk size must be positive".into()));
    }
    let (n64, p64, r64) = (n as u64, p as u64, r as u64);
    let mut flops = FlopCounter::default();
    let mut y = Tensor::zeros(&[t_len, r, p]);
    let mut h = vec![0.0; n * p];
    let mut g = vec![0.0; n * p];
    let mut t0 = 0;
    while t0 < t_len {
        let t1 = (t0 + chunk).min(t_len);
        let l = t1 - t0;
        let w = l * r;
        let local = &coeffs[t0..t1];
        let alpha: Vec<f64> = local.iter().map(|c| c.alpha).collect();
        let mask = dense_mamba3(local, &semiseparable(&alpha));
        flops.negligible += 3 * (l * l) as u64;

        // Boundary state seen by the chunk: α_{t0} h + β_{t0} v_{t0-1}.
        for (gv, hv) in g.iter_mut().zip(&h) {
            *gv = local[0].alpha * hv;
        }
        if t0 > 0 && local[0].beta != 0.0 {
            let beta = local[0].beta;
            for j in 0..r {
                let (bp, xp) = (&b.row(t0 - 1)[j * n..(j + 1) * n], &x.row(t0 - 1)[j * p..(j + 1) * p]);
                for i in 0..n {
                    let wb = beta * bp[i];
                    for q in 0..p {
                        g[i * p + q] += wb * xp[q];
                    }
                }
            }
            flops.negligible += 2 * n64 * p64 * r64;
        }
        flops.negligible += n64 * p64;

        // Intra-chunk: full gram on widened positions, then masked apply.
        let cw = &c.data()[t0 * r * n..t1 * r * n];
        let bw = &b.data()[t0 * r * n..t1 * r * n];
        let xw = &x.data()[t0 * r * p..t1 * r * p];
        let mut gram = vec![0.0; w * w];
        for a in 0..w {
            let ca = &cw[a * n..(a + 1) * n];
            for s in 0..w {
                let bs = &bw[s * n..(s + 1) * n];
                gram[a * w + s] = ca.iter().zip(bs).map(|(u, v)| u * v).sum();
            }
        }
        flops.gram += 2 * (w * w) as u64 * n64;
        for a in 0..w {
            let ta = a / r;
            for s in 0..w {
                gram[a * w + s] *= mask.at(ta, s / r);
            }
        }
        flops.negligible += (w * w) as u64;
        let yw = &mut y.data_mut()[t0 * r * p..t1 * r * p];
        for a in 0..w {
            let ya = &mut yw[a * p..(a + 1) * p];
            for s in 0..w {
                let m = gram[a * w + s];
                for (yv, xv) in ya.iter_mut().zip(&xw[s * p..(s + 1) * p]) {
                    *yv += m * xv;
                }
            }
        }
        flops.masked_apply += 2 * (w * w) as u64 * p64;

        // Inter-chunk emission: y_t += (Π_{t0<i≤t} α_i) gᵀ C_t.
        let mut decay = 1.0;
        for k in 0..l {
            if k > 0 {
                decay *= local[k].alpha;
            }
            for i in 0..r {
                let a = k * r + i;
                let ca = &cw[a * n..(a + 1) * n];
                let ya = &mut yw[a * p..(a + 1) * p];
                let mut acc = vec![0.0; p];
                for (ni, &cv) in ca.iter().enumerate() {
                    for (av, gv) in acc.iter_mut().zip(&g[ni * p..(ni + 1) * p]) {
                        *av += cv * gv;
                    }
                }
                for (yv, av) in ya.iter_mut().zip(acc) {
                    *yv += decay * av;
                }
            }
        }
        flops.emission += 2 * n64 * p64 * w as u64;
        flops.negligible += (w * p) as u64;

        // Chunk-end state: decay·g + Σ_s M[last][s] B_s X_sᵀ.
        for (hv, gv) in h.iter_mut().zip(&g) {
            *hv = decay * gv;
        }
        flops.decay += 2 * n64 * p64;
        for s in 0..w {
            let ws = mask.at(l - 1, s / r);
            let bs = &bw[s * n..(s + 1) * n];
            let xs = &xw[s * p..(s + 1) * p];
            for i in 0..n {
                let wb = ws * bs[i];
                for q in 0..p {
                    h[i * p + q] += wb * xs[q];
                }
            }
        }
        flops.state_projection += 2 * n64 * p64 * w as u64;
        flops.negligible += (w * n) as u64;
        t0 = t1;
    }
    Ok(ChunkedOutput {
        y,
        flops,
        final_state: Tensor::new(vec![n, p], h)?,
    })
}

/// SISO chunked forward; `b`, `c` are `[T, N]`, `x` is `[T, P]`, output
/// `y` is `[T, P]`. With `chunk ≥ T` it is the quadratic form; with
/// `chunk = 1` it is the recurrence.
pub fn chunked_forward(
    coeffs: &[DiscreteCoeffs],
    b: &Tensor,
    c: &Tensor,
    x: &Tensor,
    chunk: usize,
) -> Result<ChunkedOutput> {
    let (t, n, p) = check_bcx("chunked_forward", b, c, x)?;
    let mut out = chunked_widened(
        coeffs,
        &b.reshape(&[t, 1, n])?,
        &c.reshape(&[t, 1, n])?,
        &x.reshape(&[t, 1, p])?,
        chunk,
    )?;
    out.y = out.y.into_reshape(&[t, p])?;
    Ok(out)
}

//! Matrix-state (rank `R`) heads.
//!
//! Per-step layouts store the `R` columns contiguously: `b`, `c` are
//! `[T, R, N]` (column `j` of `B_t` is `b[t, j, :]`), `x` is `[T, R, P]` and
//! outputs are `[T, R, P]`, i.e. `Y_tᵀ`.

use serde::{Deserialize, Serialize};

use crate::discretize::DiscreteCoeffs;
use crate::error::{dim_err, Error, Result};
use crate::rng::{rand_normal, Rng};
use crate::ssd::{chunked_widened, ChunkedOutput};
use crate::ssm::scan_three_term;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MimoHeadParams {
    pub coeffs: Vec<DiscreteCoeffs>,
    /// `[T, R, N]`
    pub b: Tensor,
    /// `[T, R, N]`
    pub c: Tensor,
    /// `[T, R, P]`
    pub x: Tensor,
}

impl MimoHeadParams {
    /// Two-term head `H_t = a_t H_{t-1} + Δ_t B_t X_tᵀ`.
    pub fn two_term(a: &[f64], delta: &[f64], b: Tensor, c: Tensor, x: Tensor) -> Result<Self> {
        if a.len() != delta.len() {
            return Err(dim_err("MimoHeadParams", &[a.len()], &[delta.len()]));
        }
        let coeffs = a
            .iter()
            .zip(delta)
            .map(|(&a, &d)| DiscreteCoeffs::new(a, 0.0, d))
            .collect();
        let p = Self { coeffs, b, c, x };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn state_size(&self) -> usize {
        self.b.shape()[2]
    }

    pub fn head_dim(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.b.rank() != 3 || self.b.shape()[0] != t || self.b.shape()[1] == 0 {
            return Err(dim_err("MimoHeadParams", self.b.shape(), &[t]));
        }
        if self.c.shape() != self.b.shape() {
            return Err(dim_err("MimoHeadParams", self.b.shape(), self.c.shape()));
        }
        if self.x.rank() != 3 || self.x.shape()[..2] != self.b.shape()[..2] {
            return Err(dim_err("MimoHeadParams", self.b.shape(), self.x.shape()));
        }
        Ok(())
    }

    /// Random head with `α ∈ [0.5, 1)`, `β ∈ [0, 0.3)`, `γ ∈ [0.05, 0.5)`.
    pub fn random(rng: &mut Rng, t: usize, n: usize, p: usize, r: usize, three_term: bool) -> Result<Self> {
        let coeffs = (0..t)
            .map(|_| {
                let beta = if three_term { rng.uniform(0.0, 0.3) } else { 0.0 };
                DiscreteCoeffs::new(rng.uniform(0.5, 1.0), beta, rng.uniform(0.05, 0.5))
            })
            .collect();
        Ok(Self {
            coeffs,
            b: rand_normal(rng, &[t, r, n], 0.0, 1.0)?,
            c: rand_normal(rng, &[t, r, n], 0.0, 1.0)?,
            x: rand_normal(rng, &[t, r, p], 0.0, 1.0)?,
        })
    }

    fn column(t: &Tensor, j: usize) -> Tensor {
        let (len, width) = (t.shape()[0], t.shape()[2]);
        let r = t.shape()[1];
        Tensor::from_fn(&[len, width], |k| {
            let (s, i) = (k / width, k % width);
            t.data()[(s * r + j) * width + i]
        })
    }
}

/// Rank-`R` state `[N, P]` advanced one step at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct MimoDecodeState {
    pub h: Tensor,
    prev: Option<(Tensor, Tensor)>,
}

impl MimoDecodeState {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            h: Tensor::zeros(&[n, p]),
            prev: None,
        }
    }

    /// `H ← α H + β B_{t-1} X_{t-1}ᵀ + γ B Xᵀ`, returns `Yᵀ = Cᵀ H` as `[R, P]`.
    /// `b`, `c` are `[R, N]`, `x` is `[R, P]`.
    pub fn step(&mut self, co: DiscreteCoeffs, b: &Tensor, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let (n, p) = (self.h.shape()[0], self.h.shape()[1]);
        check_step(n, p, b, x, c)?;
        for v in self.h.data_mut() {
            *v *= co.alpha;
        }
        if let Some((pb, px)) = &self.prev {
            if co.beta != 0.0 {
                add_outer(&mut self.h, co.beta, pb, px);
            }
        }
        add_outer(&mut self.h, co.gamma, b, x);
        self.prev = Some((b.clone(), x.clone()));
        emit(&self.h, c)
    }
}

fn check_step(n: usize, p: usize, b: &Tensor, x: &Tensor, c: &Tensor) -> Result<()> {
    if b.rank() != 2 || b.shape()[1] != n {
        return Err(dim_err("mimo_decode_step", b.shape(), &[n, p]));
    }
    let r = b.shape()[0];
    if x.shape() != [r, p] {
        return Err(dim_err("mimo_decode_step", x.shape(), &[r, p]));
    }
    if c.shape() != [r, n] {
        return Err(dim_err("mimo_decode_step", c.shape(), &[r, n]));
    }
    Ok(())
}

/// `H += w Σ_j b_j x_jᵀ` with `b` `[R, N]`, `x` `[R, P]`.
fn add_outer(h: &mut Tensor, w: f64, b: &Tensor, x: &Tensor) {
    let (n, p) = (h.shape()[0], h.shape()[1]);
    let hd = h.data_mut();
    for j in 0..b.shape()[0] {
        let (bj, xj) = (b.row(j), x.row(j));
        for i in 0..n {
            let wb = w * bj[i];
            for q in 0..p {
                hd[i * p + q] += wb * xj[q];
            }
        }
    }
}

fn emit(h: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (n, p) = (h.shape()[0], h.shape()[1]);
    let r = c.shape()[0];
    let mut y = Tensor::zeros(&[r, p]);
    for i in 0..r {
        let ci = c.row(i).to_vec();
        let yi = y.row_mut(i);
        for k in 0..n {
            for q in 0..p {
                yi[q] += ci[k] * h.data()[k * p + q];
            }
        }
    }
    Ok(y)
}

/// Pure two-term step: `H' = a H + B Xᵀ`, `Yᵀ = Cᵀ H'`.
pub fn mimo_decode_step(h: &Tensor, a: f64, b: &Tensor, x: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
    if h.rank() != 2 {
        return Err(dim_err("mimo_decode_step", h.shape(), &[0, 0]));
    }
    let mut state = MimoDecodeState {
        h: h.clone(),
        prev: None,
    };
    let y = state.step(DiscreteCoeffs::new(a, 0.0, 1.0), b, x, c)?;
    Ok((state.h, y))
}

/// Sequential decode over the whole sequence; `[T, R, P]`.
pub fn mimo_trajectory(params: &MimoHeadParams) -> Result<Tensor> {
    params.validate()?;
    let (t, r, n, p) = (params.len(), params.rank(), params.state_size(), params.head_dim());
    let mut state = MimoDecodeState::zeros(n, p);
    let mut y = Tensor::zeros(&[t, r, p]);
    for s in 0..t {
        let b = Tensor::new(vec![r, n], params.b.row(s).to_vec())?;
        let c = Tensor::new(vec![r, n], params.c.row(s).to_vec())?;
        let x = Tensor::new(vec![r, p], params.x.row(s).to_vec())?;
        let ys = state.step(params.coeffs[s], &b, &x, &c)?;
        y.row_mut(s).copy_from_slice(ys.data());
    }
    Ok(y)
}

/// `R²` black-box SISO scans: `y^{(i)} = Σ_j scan(B^{(j)}, C^{(i)}, x^{(j)})`.
pub fn mimo_via_siso(params: &MimoHeadParams) -> Result<Tensor> {
    params.validate()?;
    let (t, r, p) = (params.len(), params.rank(), params.head_dim());
    let bs: Vec<Tensor> = (0..r).map(|j| MimoHeadParams::column(&params.b, j)).collect();
    let cs: Vec<Tensor> = (0..r).map(|j| MimoHeadParams::column(&params.c, j)).collect();
    let xs: Vec<Tensor> = (0..r).map(|j| MimoHeadParams::column(&params.x, j)).collect();
    let mut y = Tensor::zeros(&[t, r, p]);
    for (i, ci) in cs.iter().enumerate() {
        for (bj, xj) in bs.iter().zip(&xs) {
            let part = scan_three_term(&params.coeffs, bj, ci, xj, None)?.y;
            for s in 0..t {
                let dst = &mut y.row_mut(s)[i * p..(i + 1) * p];
                for (d, v) in dst.iter_mut().zip(part.row(s)) {
                    *d += v;
                }
            }
        }
    }
    Ok(y)
}

/// Default chunk for rank `r` given the SISO chunk: `max(1, c_siso / r)`,
/// which keeps the widened chunk width near `c_siso`.
pub fn default_mimo_chunk(c_siso: usize, r: usize) -> usize {
    (c_siso / r.max(1)).max(1)
}

/// Chunked MIMO forward; `chunk = None` uses [`default_mimo_chunk`] of 64.
pub fn mimo_chunked_forward(params: &MimoHeadParams, chunk: Option<usize>) -> Result<ChunkedOutput> {
    params.validate()?;
    let chunk = chunk.unwrap_or_else(|| default_mimo_chunk(64, params.rank()));
    chunked_widened(&params.coeffs, &params.b, &params.c, &params.x, chunk)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityReport {
    pub n: u64,
    pub p: u64,
    pub r: u64,
    pub dtype_bytes: u64,
    pub flops: u64,
    pub bytes: u64,
    pub intensity: f64,
    pub regime: String,
}

impl IntensityReport {
    pub const CSV_HEADER: &'static str = "N,P,R,dtype_bytes,flops,bytes,intensity";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n, self.p, self.r, self.dtype_bytes, self.flops, self.bytes, self.intensity
        )
    }
}

fn check_dtype(dtype_bytes: u64) -> Result<()> {
    if dtype_bytes != 2 && dtype_bytes != 4 {
        return Err(Error::Parameter(format!("dtype_bytes must be 2 or 4, got {dtype_bytes}")));
    }
    Ok(())
}

/// Decode-step intensity of a SISO head: `(5NP − P) / (d(1 + 2N + P + NP))`.
pub fn arithmetic_intensity_siso(n: u64, p: u64, dtype_bytes: u64) -> Result<IntensityReport> {
    check_dtype(dtype_bytes)?;
    let flops = 5 * n * p - p;
    let bytes = dtype_bytes * (1 + 2 * n + p + n * p);
    Ok(IntensityReport {
        n,
        p,
        r: 1,
        dtype_bytes,
        flops,
        bytes,
        intensity: flops as f64 / bytes as f64,
        regime: "Theta(1)".into(),
    })
}

/// Decode-step intensity of a rank-`R` head:
/// `(4NPR + NP − PR) / (d(1 + 2NR + PR + NP))`.
pub fn arithmetic_intensity_mimo(n: u64, p: u64, r: u64, dtype_bytes: u64) -> Result<IntensityReport> {
    check_dtype(dtype_bytes)?;
    if r == 0 {
        return Err(Error::Parameter("rank must be positive".into()));
    }
    let flops = 4 * n * p * r + n * p - p * r;
    let bytes = dtype_bytes * (1 + 2 * n * r + p * r + n * p);
    let regime = if r <= n && r <= p {
        "Theta(R)"
    } else if n <= p {
        "Theta(N)"
    } else {
        "Theta(P)"
    };
    Ok(IntensityReport {
        n,
        p,
        r,
        dtype_bytes,
        flops,
        bytes,
        intensity: flops as f64 / bytes as f64,
        regime: regime.into(),
    })
}

/// Large-`R` limit of [`arithmetic_intensity_mimo`]:
/// `(4NP − P) / (d(2N + P))`.
pub fn intensity_asymptote(n: u64, p: u64, dtype_bytes: u64) -> Result<f64> {
    check_dtype(dtype_bytes)?;
    Ok((4 * n * p - p) as f64 / (dtype_bytes * (2 * n + p)) as f64)
}

/// Per-head projection weights for a rank-`R` head.
#[derive(Clone, Debug, PartialEq)]
pub struct MimoProjectionWeights {
    /// `[D, R·N]`, column `j·N + k` produces `B[:, j][k]`.
    pub w_b: Tensor,
    pub w_c: Tensor,
    /// `[D, P]`
    pub w_x_prime: Tensor,
    /// `[R, P]` data-independent per-dimension scale to rank `R`.
    pub w_x: Tensor,
    pub w_z_prime: Tensor,
    pub w_z: Tensor,
    /// `[R, P]` contraction weights back to `P`.
    pub w_o_prime: Tensor,
    /// `[P, D]`
    pub w_o: Tensor,
}

impl MimoProjectionWeights {
    pub fn random(rng: &mut Rng, d: usize, n: usize, p: usize, r: usize) -> Result<Self> {
        let s = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_b: rand_normal(rng, &[d, r * n], 0.0, s)?,
            w_c: rand_normal(rng, &[d, r * n], 0.0, s)?,
            w_x_prime: rand_normal(rng, &[d, p], 0.0, s)?,
            w_x: Tensor::ones(&[r, p]),
            w_z_prime: rand_normal(rng, &[d, p], 0.0, s)?,
            w_z: Tensor::ones(&[r, p]),
            w_o_prime: Tensor::full(&[r, p], 1.0 / r as f64),
            w_o: rand_normal(rng, &[p, d], 0.0, 1.0 / (p as f64).sqrt())?,
        })
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let (d, p) = (self.w_x_prime.shape()[0], self.w_x_prime.shape()[1]);
        let r = self.w_x.shape()[0];
        (d, self.w_b.shape()[1] / r.max(1), p, r)
    }

    /// Parameters on the `X` path: `DP + PR`.
    pub fn x_path_params(&self) -> usize {
        self.w_x_prime.numel() + self.w_x.numel()
    }

    /// Parameters on the `B` and `C` paths: `DNR` each.
    pub fn bc_path_params(&self) -> usize {
        self.w_b.numel() + self.w_c.numel()
    }

    fn validate(&self) -> Result<()> {
        let (d, n, p, r) = self.dims();
        let checks: [(&Tensor, [usize; 2]); 8] = [
            (&self.w_b, [d, r * n]),
            (&self.w_c, [d, r * n]),
            (&self.w_x_prime, [d, p]),
            (&self.w_x, [r, p]),
            (&self.w_z_prime, [d, p]),
            (&self.w_z, [r, p]),
            (&self.w_o_prime, [r, p]),
            (&self.w_o, [p, d]),
        ];
        for (t, want) in checks {
            if t.shape() != want {
                return Err(dim_err("mimo projection weights", t.shape(), &want));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MimoProjections {
    /// `[T, R, N]`
    pub b: Tensor,
    pub c: Tensor,
    /// `[T, R, P]`
    pub x: Tensor,
    pub z: Tensor,
}

fn expand_rank(base: &Tensor, scale: &Tensor) -> Tensor {
    let (t, p) = (base.shape()[0], base.shape()[1]);
    let r = scale.shape()[0];
    Tensor::from_fn(&[t, r, p], |k| {
        let (s, j, q) = (k / (r * p), (k / p) % r, k % p);
        base.at(s, q) * scale.at(j, q)
    })
}

/// Token-level projections `U [T, D]` into the rank-`R` head inputs.
pub fn mimo_head_projections(u: &Tensor, w: &MimoProjectionWeights) -> Result<MimoProjections> {
    w.validate()?;
    let (d, n, _, r) = w.dims();
    if u.rank() != 2 || u.shape()[1] != d {
        return Err(dim_err("mimo_head_projections", u.shape(), &[0, d]));
    }
    let t = u.shape()[0];
    let mm = crate::tensor::matmul;
    Ok(MimoProjections {
        b: mm(u, &w.w_b)?.into_reshape(&[t, r, n])?,
        c: mm(u, &w.w_c)?.into_reshape(&[t, r, n])?,
        x: expand_rank(&mm(u, &w.w_x_prime)?, &w.w_x),
        z: expand_rank(&mm(u, &w.w_z_prime)?, &w.w_z),
    })
}

/// Gate on the rank-`R` output, contract to `P`, then project to `D`:
/// `y` and `z` are `[T, R, P]`, the result is `[T, D]`.
pub fn mimo_head_output(y: &Tensor, z: &Tensor, w: &MimoProjectionWeights) -> Result<Tensor> {
    w.validate()?;
    let (_, _, p, r) = w.dims();
    if y.shape() != z.shape() || y.rank() != 3 || y.shape()[1..] != [r, p] {
        return Err(dim_err("mimo_head_output", y.shape(), z.shape()));
    }
    let t = y.shape()[0];
    let gated = y.zip_with(z, |a, b| a * crate::tensor::silu(b))?;
    let contracted = Tensor::from_fn(&[t, p], |k| {
        let (s, q) = (k / p, k % p);
        (0..r).map(|j| w.w_o_prime.at(j, q) * gated.data()[(s * r + j) * p + q]).sum()
    });
    crate::tensor::matmul(&contracted, &w.w_o)
}

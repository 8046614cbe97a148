//! Recurrent SISO scans.
//!
//! Layouts: `b`, `c` are `[T, N]`, `x` is `[T, P]`, states are `[N, P]` and
//! the returned trajectory is `[T, N, P]`. Every head channel `p` shares the
//! same `B`, `C` and coefficients.

use num_complex::Complex64;

use crate::discretize::{ContinuousStep, DiscreteCoeffs, Rule};
use crate::error::{dim_err, Error, Result};
use crate::rng::{rand_normal, rand_uniform, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput<T: Scalar = f64> {
    /// `[T, N, P]`
    pub h: Tensor<T>,
    /// `[T, P]`
    pub y: Tensor<T>,
}

/// State carried between calls of the three-term scan: the hidden state plus
/// the previous step's `(B, x)` needed by the lookback term.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T: Scalar = f64> {
    pub h: Tensor<T>,
    pub prev: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> ScanState<T> {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            h: Tensor::zeros(&[n, p]),
            prev: None,
        }
    }
}

fn scan_dims<T: Scalar>(
    op: &'static str,
    coeffs: &[DiscreteCoeffs],
    b: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if b.rank() != 2 || c.rank() != 2 || x.rank() != 2 {
        return Err(dim_err(op, b.shape(), x.shape()));
    }
    let (t, n, p) = (b.shape()[0], b.shape()[1], x.shape()[1]);
    if c.shape() != b.shape() {
        return Err(dim_err(op, b.shape(), c.shape()));
    }
    if x.shape()[0] != t || coeffs.len() != t {
        return Err(dim_err(op, &[t, coeffs.len()], x.shape()));
    }
    Ok((t, n, p))
}

/// `h_t = α_t h_{t-1} + γ_t B_t x_tᵀ`, `y_t = hᵀ_t C_t`, from `h_{-1} = h0`
/// (zero when absent). `β` is ignored.
pub fn scan_two_term<T: Scalar>(
    coeffs: &[DiscreteCoeffs],
    b: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    h0: Option<&Tensor<T>>,
) -> Result<ScanOutput<T>> {
    let (t_len, n, p) = scan_dims("scan_two_term", coeffs, b, c, x)?;
    let mut h = init_state(h0, n, p)?;
    let mut hs = Vec::with_capacity(t_len * n * p);
    let mut y = Tensor::zeros(&[t_len, p]);
    for t in 0..t_len {
        let alpha = T::of_f64(coeffs[t].alpha);
        let gamma = T::of_f64(coeffs[t].gamma);
        let (bt, xt) = (b.row(t), x.row(t));
        for i in 0..n {
            let w = gamma * bt[i];
            let row = &mut h[i * p..(i + 1) * p];
            for (hv, &xv) in row.iter_mut().zip(xt) {
                *hv = alpha * *hv + w * xv;
            }
        }
        emit(&h, c.row(t), y.row_mut(t), p);
        hs.extend_from_slice(&h);
    }
    Ok(ScanOutput {
        h: Tensor::new(vec![t_len, n, p], hs)?,
        y,
    })
}

/// `h_t = α_t h_{t-1} + β_t B_{t-1} x_{t-1}ᵀ + γ_t B_t x_tᵀ` with
/// `x_{-1} = 0`. With `β ≡ 0` it reproduces [`scan_two_term`] bit for bit.
pub fn scan_three_term<T: Scalar>(
    coeffs: &[DiscreteCoeffs],
    b: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    h0: Option<&Tensor<T>>,
) -> Result<ScanOutput<T>> {
    let (_, n, p) = scan_dims("scan_three_term", coeffs, b, c, x)?;
    let mut state = ScanState {
        h: match h0 {
            Some(h) => h.clone(),
            None => Tensor::zeros(&[n, p]),
        },
        prev: None,
    };
    scan_three_term_from(coeffs, b, c, x, &mut state)
}

/// Three-term scan continuing from `state`, which is advanced in place.
pub fn scan_three_term_from<T: Scalar>(
    coeffs: &[DiscreteCoeffs],
    b: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    state: &mut ScanState<T>,
) -> Result<ScanOutput<T>> {
    let (t_len, n, p) = scan_dims("scan_three_term", coeffs, b, c, x)?;
    if state.h.shape() != [n, p] {
        return Err(dim_err("scan_three_term", state.h.shape(), &[n, p]));
    }
    let zero_b = vec![T::zero(); n];
    let zero_x = vec![T::zero(); p];
    let mut hs = Vec::with_capacity(t_len * n * p);
    let mut y = Tensor::zeros(&[t_len, p]);
    for t in 0..t_len {
        let co = coeffs[t];
        let (alpha, beta, gamma) = (T::of_f64(co.alpha), T::of_f64(co.beta), T::of_f64(co.gamma));
        let (bt, xt) = (b.row(t), x.row(t));
        let (bp, xp): (&[T], &[T]) = match (t, &state.prev) {
            (0, Some((pb, px))) => (pb, px),
            (0, None) => (&zero_b, &zero_x),
            _ => (b.row(t - 1), x.row(t - 1)),
        };
        let h = state.h.data_mut();
        for i in 0..n {
            let (wp, wc) = (beta * bp[i], gamma * bt[i]);
            let row = &mut h[i * p..(i + 1) * p];
            for ((hv, &xpv), &xv) in row.iter_mut().zip(xp).zip(xt) {
                *hv = alpha * *hv + wp * xpv + wc * xv;
            }
        }
        emit(state.h.data(), c.row(t), y.row_mut(t), p);
        hs.extend_from_slice(state.h.data());
    }
    if t_len > 0 {
        state.prev = Some((b.row(t_len - 1).to_vec(), x.row(t_len - 1).to_vec()));
    }
    Ok(ScanOutput {
        h: Tensor::new(vec![t_len, n, p], hs)?,
        y,
    })
}

fn init_state<T: Scalar>(h0: Option<&Tensor<T>>, n: usize, p: usize) -> Result<Vec<T>> {
    match h0 {
        None => Ok(vec![T::zero(); n * p]),
        Some(h) if h.shape() == [n, p] => Ok(h.data().to_vec()),
        Some(h) => Err(dim_err("scan initial state", h.shape(), &[n, p])),
    }
}

#[inline]
fn emit<T: Scalar>(h: &[T], c: &[T], y: &mut [T], p: usize) {
    for (i, &ci) in c.iter().enumerate() {
        let row = &h[i * p..(i + 1) * p];
        for (yv, &hv) in y.iter_mut().zip(row) {
            *yv = *yv + ci * hv;
        }
    }
}

/// `[[cos, -sin], [sin, cos]]`
pub fn rotation_matrix(angle: f64) -> Tensor {
    let (s, c) = angle.sin_cos();
    Tensor::new(vec![2, 2], vec![c, -s, s, c]).expect("2x2")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationSchedule {
    /// Per-step angles `Δ_t θ_t`, `[T, N/2]`.
    pub angles: Tensor,
    /// Inclusive prefix sums of `angles` over time.
    pub cumulative: Tensor,
}

/// Angles `Δ_t θ_{t,i}` and their running sums; `theta` is `[T, N/2]`.
pub fn build_rotation_schedule(delta: &[f64], theta: &Tensor) -> Result<RotationSchedule> {
    if theta.rank() != 2 || theta.shape()[0] != delta.len() {
        return Err(dim_err("build_rotation_schedule", &[delta.len()], theta.shape()));
    }
    let pairs = theta.shape()[1];
    let mut angles = theta.clone();
    let mut cumulative = theta.clone();
    let mut running = vec![0.0; pairs];
    for (t, &d) in delta.iter().enumerate() {
        let row = angles.row_mut(t);
        for v in row.iter_mut() {
            *v *= d;
        }
        for (r, &v) in running.iter_mut().zip(row.iter()) {
            *r += v;
        }
        cumulative.row_mut(t).copy_from_slice(&running);
    }
    Ok(RotationSchedule { angles, cumulative })
}

/// Rotates consecutive pairs `(v[2i], v[2i+1])` by `sign · angles[i]`.
pub fn apply_rope<T: Scalar>(v: &[T], angles: &[T], sign: f64) -> Result<Vec<T>> {
    if v.len() % 2 != 0 || angles.len() * 2 != v.len() {
        return Err(dim_err("apply_rope", &[v.len()], &[angles.len() * 2]));
    }
    let sign = T::of_f64(sign);
    let mut out = Vec::with_capacity(v.len());
    for (pair, &a) in v.chunks_exact(2).zip(angles) {
        let (s, c) = (sign * a).sin_cos();
        out.push(c * pair[0] - s * pair[1]);
        out.push(s * pair[0] + c * pair[1]);
    }
    Ok(out)
}

/// Inputs of one complex-valued (rotating) SSM head.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmSequenceParams {
    pub delta: Vec<f64>,
    /// Real part of the eigenvalue per step (`A_t < 0`).
    pub a: Vec<f64>,
    /// Trapezoidal gate per step; ignored under the exponential-Euler rule.
    pub lambda: Vec<f64>,
    /// Rotation frequencies, `[T, N/2]`.
    pub theta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub x: Tensor,
    pub rule: Rule,
    /// Initial real state `[N, P]`.
    pub h0: Option<Tensor>,
}

impl SsmSequenceParams {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn state_size(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if !matches!(self.rule, Rule::ExpEuler | Rule::ExpTrapezoidal) {
            return Err(Error::Parameter(format!(
                "rotating scans use exponential rules, got {}",
                self.rule
            )));
        }
        if self.a.len() != t || self.lambda.len() != t {
            return Err(dim_err("ssm params", &[t], &[self.a.len(), self.lambda.len()]));
        }
        if self.b.rank() != 2 || self.b.shape()[0] != t || self.c.shape() != self.b.shape() {
            return Err(dim_err("ssm params", self.b.shape(), self.c.shape()));
        }
        let n = self.state_size();
        if n % 2 != 0 {
            return Err(dim_err("ssm params (state size must be even)", &[n], &[n + 1]));
        }
        if self.theta.shape() != [t, n / 2] {
            return Err(dim_err("ssm params", self.theta.shape(), &[t, n / 2]));
        }
        if self.x.rank() != 2 || self.x.shape()[0] != t {
            return Err(dim_err("ssm params", self.x.shape(), &[t]));
        }
        if let Some(h0) = &self.h0 {
            if h0.shape() != [n, self.channels()] {
                return Err(dim_err("ssm params", h0.shape(), &[n, self.channels()]));
            }
        }
        Ok(())
    }

    pub fn coeffs(&self) -> Result<Vec<DiscreteCoeffs>> {
        (0..self.len())
            .map(|t| {
                let lambda = if self.rule == Rule::ExpEuler { 1.0 } else { self.lambda[t] };
                self.rule.discretize(ContinuousStep::new(self.delta[t], self.a[t], lambda)?)
            })
            .collect()
    }

    /// Random well-conditioned head: `Δ ∈ [0.01, 0.5]`, `A ∈ [-2, -0.1]`,
    /// `θ ∈ [-π, π]`, `λ ∈ [0, 1]`, Gaussian `B, C, x`.
    pub fn random(rng: &mut Rng, t: usize, n: usize, p: usize, rule: Rule) -> Result<Self> {
        let delta = (0..t).map(|_| rng.uniform(0.01, 0.5)).collect();
        let a = (0..t).map(|_| rng.uniform(-2.0, -0.1)).collect();
        let lambda = (0..t).map(|_| rng.next_f64()).collect();
        let pi = std::f64::consts::PI;
        Ok(Self {
            delta,
            a,
            lambda,
            theta: rand_uniform(rng, &[t, n / 2], -pi, pi)?,
            b: rand_normal(rng, &[t, n], 0.0, 1.0)?,
            c: rand_normal(rng, &[t, n], 0.0, 1.0)?,
            x: rand_normal(rng, &[t, p], 0.0, 1.0)?,
            rule,
            h0: None,
        })
    }
}

/// Reference in complex arithmetic: pair `i` of the state is one complex
/// number per channel, with transition `exp(Δ(A + iθ))`.
pub fn scan_complex_reference(params: &SsmSequenceParams) -> Result<Tensor> {
    params.validate()?;
    let (t_len, n, p) = (params.len(), params.state_size(), params.channels());
    let pairs = n / 2;
    let coeffs = params.coeffs()?;
    let mut h = vec![Complex64::new(0.0, 0.0); pairs * p];
    if let Some(h0) = &params.h0 {
        for i in 0..pairs {
            for q in 0..p {
                h[i * p + q] = Complex64::new(h0.at(2 * i, q), h0.at(2 * i + 1, q));
            }
        }
    }
    let mut y = Tensor::zeros(&[t_len, p]);
    for t in 0..t_len {
        let co = coeffs[t];
        let (bt, ct, xt) = (params.b.row(t), params.c.row(t), params.x.row(t));
        for i in 0..pairs {
            let phase = params.delta[t] * params.theta.at(t, i);
            let transition = Complex64::new(params.delta[t] * params.a[t], phase).exp();
            let bc = Complex64::new(bt[2 * i], bt[2 * i + 1]);
            let cc = Complex64::new(ct[2 * i], -ct[2 * i + 1]);
            let prev_in = if t > 0 {
                let bp = params.b.row(t - 1);
                Some((
                    co.beta * Complex64::from_polar(1.0, phase) * Complex64::new(bp[2 * i], bp[2 * i + 1]),
                    params.x.row(t - 1),
                ))
            } else {
                None
            };
            for q in 0..p {
                let mut hv = transition * h[i * p + q] + co.gamma * bc * xt[q];
                if let Some((wp, xp)) = &prev_in {
                    hv += wp * xp[q];
                }
                h[i * p + q] = hv;
                *y.at_mut(t, q) += (cc * hv).re;
            }
        }
    }
    Ok(y)
}

/// Real-coordinate reference that rotates the state inside the transition:
/// `h_t = α R_t h_{t-1} + β R_t B_{t-1} x_{t-1} + γ B_t x_t`.
pub fn scan_rotated_state(params: &SsmSequenceParams) -> Result<Tensor> {
    params.validate()?;
    let (t_len, n, p) = (params.len(), params.state_size(), params.channels());
    let coeffs = params.coeffs()?;
    let mut h = match &params.h0 {
        Some(h0) => h0.data().to_vec(),
        None => vec![0.0; n * p],
    };
    let mut y = Tensor::zeros(&[t_len, p]);
    for t in 0..t_len {
        let co = coeffs[t];
        let bt = params.b.row(t);
        let bp_rot = if t > 0 {
            let ang: Vec<f64> = (0..n / 2)
                .map(|i| params.delta[t] * params.theta.at(t, i))
                .collect();
            Some(apply_rope(params.b.row(t - 1), &ang, 1.0)?)
        } else {
            None
        };
        for i in 0..n / 2 {
            let (s, c) = (params.delta[t] * params.theta.at(t, i)).sin_cos();
            for q in 0..p {
                let (h0, h1) = (h[2 * i * p + q], h[(2 * i + 1) * p + q]);
                let mut r0 = co.alpha * (c * h0 - s * h1) + co.gamma * bt[2 * i] * params.x.at(t, q);
                let mut r1 = co.alpha * (s * h0 + c * h1) + co.gamma * bt[2 * i + 1] * params.x.at(t, q);
                if let Some(bp) = &bp_rot {
                    let xp = params.x.at(t - 1, q);
                    r0 += co.beta * bp[2 * i] * xp;
                    r1 += co.beta * bp[2 * i + 1] * xp;
                }
                h[2 * i * p + q] = r0;
                h[(2 * i + 1) * p + q] = r1;
            }
        }
        emit(&h, params.c.row(t), y.row_mut(t), p);
    }
    Ok(y)
}

/// Rotation folded into the projections: `B̄_t = R(-Σθ)B_t`,
/// `C̄_t = R(-Σθ)C_t`, then a plain real three-term scan.
pub fn scan_with_rope(params: &SsmSequenceParams) -> Result<Tensor> {
    params.validate()?;
    let (b, c) = rope_projections(params)?;
    let coeffs = params.coeffs()?;
    Ok(scan_three_term(&coeffs, &b, &c, &params.x, params.h0.as_ref())?.y)
}

/// `(B̄, C̄)` with the cumulative rotation applied, each `[T, N]`.
pub fn rope_projections(params: &SsmSequenceParams) -> Result<(Tensor, Tensor)> {
    let schedule = build_rotation_schedule(&params.delta, &params.theta)?;
    let mut b = params.b.clone();
    let mut c = params.c.clone();
    for t in 0..params.len() {
        let cum = schedule.cumulative.row(t);
        let rb = apply_rope(params.b.row(t), cum, -1.0)?;
        let rc = apply_rope(params.c.row(t), cum, -1.0)?;
        b.row_mut(t).copy_from_slice(&rb);
        c.row_mut(t).copy_from_slice(&rc);
    }
    Ok((b, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use std::f64::consts::PI;

    fn coeffs(alpha: &[f64], beta: &[f64], gamma: &[f64]) -> Vec<DiscreteCoeffs> {
        alpha
            .iter()
            .zip(beta)
            .zip(gamma)
            .map(|((&a, &b), &g)| DiscreteCoeffs::new(a, b, g))
            .collect()
    }

    #[test]
    fn scalar_two_term_hand_example() {
        // α = 0.5, γ = 1, B = C = 1, x = [1, 0, 0] → y = [1, 0.5, 0.25]
        let co = coeffs(&[0.5; 3], &[0.0; 3], &[1.0; 3]);
        let one: Tensor = Tensor::ones(&[3, 1]);
        let x = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let out = scan_two_term(&co, &one, &one, &x, None).unwrap();
        assert_eq!(out.y.data(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn scalar_three_term_hand_example() {
        // α = 1, β = 0.5, γ = 0.5, x = [1, 1]: h0 = 0.5, h1 = 0.5 + 0.5 + 0.5
        let co = coeffs(&[1.0; 2], &[0.5; 2], &[0.5; 2]);
        let one: Tensor = Tensor::ones(&[2, 1]);
        let out = scan_three_term(&co, &one, &one, &one, None).unwrap();
        assert_eq!(out.y.data(), &[0.5, 1.5]);
    }

    #[test]
    fn zero_beta_matches_two_term_bitwise() {
        let mut rng = Rng::new(3);
        let t = 17;
        let b = rand_normal(&mut rng, &[t, 4], 0.0, 1.0).unwrap();
        let c = rand_normal(&mut rng, &[t, 4], 0.0, 1.0).unwrap();
        let x = rand_normal(&mut rng, &[t, 3], 0.0, 1.0).unwrap();
        let co: Vec<_> = (0..t)
            .map(|_| DiscreteCoeffs::new(rng.uniform(0.1, 1.0), 0.0, rng.uniform(0.0, 1.0)))
            .collect();
        let two = scan_two_term(&co, &b, &c, &x, None).unwrap();
        let three = scan_three_term(&co, &b, &c, &x, None).unwrap();
        assert_eq!(two, three);
    }

    #[test]
    fn empty_sequence() {
        let z: Tensor = Tensor::zeros(&[0, 2]);
        let out = scan_three_term(&[], &z, &z, &Tensor::zeros(&[0, 1]), None).unwrap();
        assert_eq!(out.y.shape(), &[0, 1]);
    }

    #[test]
    fn split_scan_equals_whole() {
        let mut rng = Rng::new(8);
        let t = 10;
        let b = rand_normal(&mut rng, &[t, 2], 0.0, 1.0).unwrap();
        let c = rand_normal(&mut rng, &[t, 2], 0.0, 1.0).unwrap();
        let x = rand_normal(&mut rng, &[t, 2], 0.0, 1.0).unwrap();
        let co: Vec<_> = (0..t)
            .map(|_| DiscreteCoeffs::new(0.9, rng.uniform(0.0, 0.5), 0.5))
            .collect();
        let whole = scan_three_term(&co, &b, &c, &x, None).unwrap();
        let split = |m: &Tensor, lo: usize, hi: usize| {
            let w = m.shape()[1];
            Tensor::new(vec![hi - lo, w], m.data()[lo * w..hi * w].to_vec()).unwrap()
        };
        let mut st = ScanState::zeros(2, 2);
        let first = scan_three_term_from(&co[..4], &split(&b, 0, 4), &split(&c, 0, 4), &split(&x, 0, 4), &mut st).unwrap();
        let second = scan_three_term_from(&co[4..], &split(&b, 4, t), &split(&c, 4, t), &split(&x, 4, t), &mut st).unwrap();
        let mut joined = first.y.data().to_vec();
        joined.extend_from_slice(second.y.data());
        assert_eq!(joined, whole.y.data());
    }

    #[test]
    fn rotation_composes_and_wraps() {
        let ab = matmul(&rotation_matrix(0.3), &rotation_matrix(1.1)).unwrap();
        assert!(ab.max_abs_diff(&rotation_matrix(1.4)).unwrap() < 1e-15);
        let full = rotation_matrix(2.0 * PI);
        assert!(full.max_abs_diff(&Tensor::identity(2)).unwrap() < 1e-12);
    }

    #[test]
    fn schedule_prefix_sums() {
        let theta = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = build_rotation_schedule(&[0.5, 1.0, 2.0], &theta).unwrap();
        assert_eq!(s.angles.data(), &[0.5, 2.0, 6.0]);
        assert_eq!(s.cumulative.data(), &[0.5, 2.5, 8.5]);
    }

    #[test]
    fn rope_odd_length_rejected() {
        assert!(matches!(
            apply_rope(&[1.0, 2.0, 3.0], &[0.1], 1.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rope_round_trip() {
        let v: [f64; 4] = [0.3, -1.2, 2.0, 0.5];
        let ang = [0.7, -2.1];
        let back = apply_rope(&apply_rope(&v, &ang, 1.0).unwrap(), &ang, -1.0).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn parity_by_rotation() {
        // One pair, A = 0, Δθ_t = π x_t, h0 = (1, 0), read the first
        // coordinate: y_t = cos(π Σ x) = ±1 tracks the running parity.
        let bits = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let t = bits.len();
        let params = SsmSequenceParams {
            delta: vec![1.0; t],
            a: vec![0.0; t],
            lambda: vec![1.0; t],
            theta: Tensor::new(vec![t, 1], bits.iter().map(|b| PI * b).collect()).unwrap(),
            b: Tensor::zeros(&[t, 2]),
            c: Tensor::from_fn(&[t, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 }),
            x: Tensor::zeros(&[t, 1]),
            rule: Rule::ExpEuler,
            h0: Some(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap()),
        };
        let mut parity = 0.0;
        let want: Vec<f64> = bits
            .iter()
            .map(|b| {
                parity = (parity + b) % 2.0;
                if parity == 0.0 { 1.0 } else { -1.0 }
            })
            .collect();
        for y in [
            scan_rotated_state(&params).unwrap(),
            scan_with_rope(&params).unwrap(),
            scan_complex_reference(&params).unwrap(),
        ] {
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{:?} vs {want:?}", y.data());
            }
        }
    }

    #[test]
    fn three_views_agree_on_random_heads() {
        let mut rng = Rng::new(21);
        for rule in [Rule::ExpEuler, Rule::ExpTrapezoidal] {
            let params = SsmSequenceParams::random(&mut rng, 40, 8, 3, rule).unwrap();
            let reference = scan_complex_reference(&params).unwrap();
            let rotated = scan_rotated_state(&params).unwrap();
            let rope = scan_with_rope(&params).unwrap();
            assert!(reference.max_abs_diff(&rotated).unwrap() < 1e-10);
            assert!(reference.max_abs_diff(&rope).unwrap() < 1e-10);
        }
    }

    #[test]
    fn non_exponential_rule_rejected() {
        let mut rng = Rng::new(1);
        let params = SsmSequenceParams::random(&mut rng, 4, 2, 1, Rule::ZeroOrderHold).unwrap();
        assert!(scan_with_rope(&params).is_err());
    }
}

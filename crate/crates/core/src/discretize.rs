//! Discretization rules mapping continuous `(Δ, A, λ)` to the coefficients
//! of the recurrence `h_t = α h_{t-1} + β B_{t-1} x_{t-1} + γ B_t x_t`, and an
//! empirical convergence-order study.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One step of the continuous system, scalar-identity `A`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousStep {
    pub delta: f64,
    pub a: f64,
    pub lambda: f64,
}

impl ContinuousStep {
    pub fn new(delta: f64, a: f64, lambda: f64) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::Parameter(format!("step size must be >= 0, got {delta}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        Ok(Self { delta, a, lambda })
    }

    /// Step with the gate fixed at 1 (two-term rules ignore it).
    pub fn euler(delta: f64, a: f64) -> Self {
        Self { delta, a, lambda: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl DiscreteCoeffs {
    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    ForwardEuler,
    BackwardEuler,
    Trapezoidal,
    ZeroOrderHold,
    ExpEuler,
    ExpTrapezoidal,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::ForwardEuler,
        Rule::BackwardEuler,
        Rule::Trapezoidal,
        Rule::ZeroOrderHold,
        Rule::ExpEuler,
        Rule::ExpTrapezoidal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::ForwardEuler => "forward-euler",
            Rule::BackwardEuler => "backward-euler",
            Rule::Trapezoidal => "trapezoidal",
            Rule::ZeroOrderHold => "zoh",
            Rule::ExpEuler => "exp-euler",
            Rule::ExpTrapezoidal => "exp-trapezoidal",
        }
    }

    /// Rules whose transition is `exp(ΔA)`.
    pub fn is_exponential(self) -> bool {
        matches!(
            self,
            Rule::ZeroOrderHold | Rule::ExpEuler | Rule::ExpTrapezoidal
        )
    }

    pub fn discretize(self, step: ContinuousStep) -> Result<DiscreteCoeffs> {
        match self {
            Rule::ForwardEuler => Ok(forward_euler(step)),
            Rule::BackwardEuler => backward_euler(step),
            Rule::Trapezoidal => classical_trapezoidal(step),
            Rule::ZeroOrderHold => Ok(zoh(step)),
            Rule::ExpEuler => Ok(exp_euler(step)),
            Rule::ExpTrapezoidal => Ok(exp_trapezoidal(step)),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == norm)
            .or(match norm.as_str() {
                "zero-order-hold" => Some(Rule::ZeroOrderHold),
                "classical-trapezoidal" => Some(Rule::Trapezoidal),
                "exp-trap" => Some(Rule::ExpTrapezoidal),
                _ => None,
            })
            .ok_or_else(|| Error::Parameter(format!("unknown discretization rule `{s}`")))
    }
}

/// Below this |ΔA| the ZOH input weight falls back to `Δ`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

pub fn forward_euler(step: ContinuousStep) -> DiscreteCoeffs {
    DiscreteCoeffs::new(1.0 + step.delta * step.a, 0.0, step.delta)
}

fn nonsingular(op: &'static str, denom: f64) -> Result<f64> {
    if denom.abs() <= f64::EPSILON {
        return Err(Error::NumericalDomain {
            op,
            detail: format!("singular denominator {denom:e}"),
        });
    }
    Ok(denom)
}

pub fn backward_euler(step: ContinuousStep) -> Result<DiscreteCoeffs> {
    let d = nonsingular("backward_euler", 1.0 - step.delta * step.a)?;
    Ok(DiscreteCoeffs::new(1.0 / d, 0.0, step.delta / d))
}

/// Bilinear transform with the input weight placed on the current step only,
/// as in the classical LTI table row.
pub fn classical_trapezoidal(step: ContinuousStep) -> Result<DiscreteCoeffs> {
    let half = 0.5 * step.delta * step.a;
    let d = nonsingular("classical_trapezoidal", 1.0 - half)?;
    Ok(DiscreteCoeffs::new((1.0 + half) / d, 0.0, step.delta / d))
}

pub fn zoh(step: ContinuousStep) -> DiscreteCoeffs {
    let da = step.delta * step.a;
    let gamma = if da.abs() < ZOH_SERIES_THRESHOLD {
        step.delta
    } else {
        da.exp_m1() / step.a
    };
    DiscreteCoeffs::new(da.exp(), 0.0, gamma)
}

pub fn exp_euler(step: ContinuousStep) -> DiscreteCoeffs {
    DiscreteCoeffs::new((step.delta * step.a).exp(), 0.0, step.delta)
}

pub fn exp_trapezoidal(step: ContinuousStep) -> DiscreteCoeffs {
    let alpha = (step.delta * step.a).exp();
    DiscreteCoeffs::new(
        alpha,
        (1.0 - step.lambda) * step.delta * alpha,
        step.lambda * step.delta,
    )
}

/// Scalar test system `h' = A(t) h + u(t)` where `u = B(t) x(t)`.
#[derive(Clone)]
pub struct TestSystem {
    pub name: String,
    pub a: fn(f64) -> f64,
    /// Closed form of `∫_s^t A`; Gauss–Legendre quadrature is used when absent.
    pub a_integral: Option<fn(f64, f64) -> f64>,
    pub input: fn(f64) -> f64,
    pub h0: f64,
    pub t_end: f64,
}

impl fmt::Debug for TestSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestSystem")
            .field("name", &self.name)
            .field("h0", &self.h0)
            .field("t_end", &self.t_end)
            .finish()
    }
}

impl TestSystem {
    /// `A = -1`, `u(t) = sin t`, `h(0) = 0` on `[0, 4]`.
    pub fn smooth() -> Self {
        Self {
            name: "A=-1,u=sin(t)".into(),
            a: |_| -1.0,
            a_integral: Some(|s, t| -(t - s)),
            input: f64::sin,
            h0: 0.0,
            t_end: 4.0,
        }
    }

    /// `A = -0.5`, `u(t) = 1.5`, `h(0) = 0.25` on `[0, 4]`.
    pub fn constant_input() -> Self {
        Self {
            name: "A=-0.5,u=1.5".into(),
            a: |_| -0.5,
            a_integral: Some(|s, t| -0.5 * (t - s)),
            input: |_| 1.5,
            h0: 0.25,
            t_end: 4.0,
        }
    }

    fn integral_of_a(&self, s: f64, t: f64) -> f64 {
        if let Some(f) = self.a_integral {
            return f(s, t);
        }
        // 5-point Gauss–Legendre on [s, t]
        const NODES: [f64; 5] = [
            0.0,
            -0.538_469_310_105_683_1,
            0.538_469_310_105_683_1,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        const WEIGHTS: [f64; 5] = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
            0.236_926_885_056_189_1,
        ];
        let (mid, half) = (0.5 * (s + t), 0.5 * (t - s));
        half * NODES
            .iter()
            .zip(WEIGHTS)
            .map(|(x, w)| w * (self.a)(mid + half * x))
            .sum::<f64>()
    }
}

/// Integrates the test system to `t_end` with `rule` at step `delta`,
/// returning the terminal state. With `exact_transition`, exponential rules
/// see the step-average of `A` so that `α = exp(∫A)` exactly.
pub fn integrate(
    rule: Rule,
    system: &TestSystem,
    delta: f64,
    lambda: f64,
    exact_transition: bool,
) -> Result<f64> {
    let steps_f = system.t_end / delta;
    let steps = steps_f.round();
    if !(delta > 0.0) || (steps_f - steps).abs() > 1e-6 * steps_f.max(1.0) {
        return Err(Error::Parameter(format!(
            "step {delta} does not divide the horizon {}",
            system.t_end
        )));
    }
    let steps = steps as usize;
    let mut h = system.h0;
    let mut prev_t = 0.0;
    let mut prev_u = (system.input)(0.0);
    for k in 1..=steps {
        let t = k as f64 * delta;
        let a = if exact_transition && rule.is_exponential() {
            system.integral_of_a(prev_t, t) / delta
        } else {
            (system.a)(t)
        };
        let co = rule.discretize(ContinuousStep { delta, a, lambda })?;
        let u = (system.input)(t);
        h = co.alpha * h + co.beta * prev_u + co.gamma * u;
        prev_t = t;
        prev_u = u;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub delta: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub rule: Rule,
    pub lambda: f64,
    pub reference_delta: f64,
    pub points: Vec<ConvergencePoint>,
    /// Log–log least-squares slope of error against step size; NaN when
    /// fewer than two errors are strictly positive.
    pub slope: f64,
    pub monotone: bool,
}

impl ConvergenceStudy {
    pub const CSV_HEADER: &'static str = "rule,delta,error,fitted_slope";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!(
                "{},{:e},{:e},{}\n",
                self.rule, p.delta, p.error, self.slope
            ));
        }
        out
    }

    pub fn max_error(&self) -> f64 {
        self.points.iter().map(|p| p.error).fold(0.0, f64::max)
    }
}

/// Standard halving ladder used by the studies: 0.2 down to 0.0125.
pub fn default_deltas() -> Vec<f64> {
    (0..5).map(|k| 0.2 / f64::powi(2.0, k)).collect()
}

/// Least-squares slope of `ln(error)` against `ln(delta)`.
pub fn loglog_slope(points: &[ConvergencePoint]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.error > 0.0)
        .map(|p| (p.delta.ln(), p.error.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Global-error convergence order of `rule` on `system`.
///
/// The reference is the same rule run at `min(deltas) / 64` with the exact
/// transition; `lambda` only matters for the exponential-trapezoidal rule.
pub fn convergence_order(
    rule: Rule,
    system: &TestSystem,
    deltas: &[f64],
    lambda: f64,
) -> Result<ConvergenceStudy> {
    if deltas.len() < 5 {
        return Err(Error::Parameter(format!(
            "convergence study needs at least 5 step sizes, got {}",
            deltas.len()
        )));
    }
    if deltas.windows(2).any(|w| !(w[1] < w[0])) || deltas.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Parameter(
            "step sizes must be positive and strictly decreasing".into(),
        ));
    }
    let reference_delta = deltas.iter().cloned().fold(f64::INFINITY, f64::min) / 64.0;
    let reference = integrate(rule, system, reference_delta, lambda, true)?;
    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let h = integrate(rule, system, delta, lambda, false)?;
        points.push(ConvergencePoint {
            delta,
            error: (h - reference).abs(),
        });
    }
    let monotone = points.windows(2).all(|w| w[1].error < w[0].error);
    if !monotone {
        log::warn!(
            "{rule}: global error does not decrease monotonically with the step size on {}",
            system.name
        );
    }
    Ok(ConvergenceStudy {
        rule,
        lambda,
        reference_delta,
        slope: loglog_slope(&points),
        points,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(c: DiscreteCoeffs, want: (f64, f64, f64), tol: f64) {
        assert!(
            (c.alpha - want.0).abs() <= tol
                && (c.beta - want.1).abs() <= tol
                && (c.gamma - want.2).abs() <= tol,
            "{c:?} vs {want:?}"
        );
    }

    #[test]
    fn forward_euler_cases() {
        close(forward_euler(ContinuousStep::euler(0.0, -1.0)), (1.0, 0.0, 0.0), 0.0);
        close(forward_euler(ContinuousStep::euler(0.1, -2.0)), (0.8, 0.0, 0.1), 1e-15);
        close(forward_euler(ContinuousStep::euler(1.0, 0.0)), (1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn backward_euler_cases() {
        close(backward_euler(ContinuousStep::euler(0.0, -1.0)).unwrap(), (1.0, 0.0, 0.0), 0.0);
        close(backward_euler(ContinuousStep::euler(0.5, -2.0)).unwrap(), (0.5, 0.0, 0.25), 1e-15);
        assert!(matches!(
            backward_euler(ContinuousStep::euler(1.0, 1.0)),
            Err(Error::NumericalDomain { .. })
        ));
    }

    #[test]
    fn classical_trapezoidal_cases() {
        close(
            classical_trapezoidal(ContinuousStep::euler(0.0, -1.0)).unwrap(),
            (1.0, 0.0, 0.0),
            0.0,
        );
        close(
            classical_trapezoidal(ContinuousStep::euler(1.0, -2.0)).unwrap(),
            (0.0, 0.0, 0.5),
            1e-15,
        );
        let far = classical_trapezoidal(ContinuousStep::euler(1.0, -1e9)).unwrap();
        assert!((far.alpha + 1.0).abs() < 1e-8);
        assert!(classical_trapezoidal(ContinuousStep::euler(1.0, 2.0)).is_err());
    }

    #[test]
    fn zoh_cases() {
        close(zoh(ContinuousStep::euler(1.0, 0.0)), (1.0, 0.0, 1.0), 0.0);
        close(zoh(ContinuousStep::euler(1.0, 1e-12)), (1.0, 0.0, 1.0), 1e-11);
        // e^{-1} = 0.36787944117144233, 1 - e^{-1} = 0.6321205588285577
        close(
            zoh(ContinuousStep::euler(1.0, -1.0)),
            (0.367_879_441_171_442_33, 0.0, 0.632_120_558_828_557_7),
            1e-15,
        );
        close(zoh(ContinuousStep::euler(0.0, -7.0)), (1.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn exponential_euler_and_trapezoidal_cases() {
        let e1 = 0.367_879_441_171_442_33;
        close(exp_euler(ContinuousStep::euler(0.5, -2.0)), (e1, 0.0, 0.5), 1e-15);
        close(exp_euler(ContinuousStep::euler(0.0, -2.0)), (1.0, 0.0, 0.0), 0.0);
        let step = ContinuousStep::new(0.5, -2.0, 0.5).unwrap();
        // beta = 0.5 * 0.5 * e^{-1} = 0.09196986029286058
        close(exp_trapezoidal(step), (e1, 0.091_969_860_292_860_58, 0.25), 1e-15);
        close(
            exp_trapezoidal(ContinuousStep::new(0.0, -2.0, 0.3).unwrap()),
            (1.0, 0.0, 0.0),
            0.0,
        );
    }

    #[test]
    fn gate_at_one_is_exponential_euler() {
        for &(d, a) in &[(0.3, -1.7), (2.0, -0.01), (0.0, 5.0), (1e-3, -40.0)] {
            let trap = exp_trapezoidal(ContinuousStep::new(d, a, 1.0).unwrap());
            let euler = exp_euler(ContinuousStep::euler(d, a));
            assert_eq!(trap, euler);
        }
    }

    #[test]
    fn gate_at_half_averages_endpoints() {
        // λ = 1/2: the previous-input weight is the current one carried
        // through one step of decay, i.e. β = γ·α.
        let step = ContinuousStep::new(0.4, -1.3, 0.5).unwrap();
        let c = exp_trapezoidal(step);
        assert!((c.beta - c.gamma * c.alpha).abs() < 1e-16);
        assert!((c.gamma - 0.2).abs() < 1e-16);
    }

    #[test]
    fn invalid_gate_rejected() {
        assert!(ContinuousStep::new(0.1, -1.0, 1.5).is_err());
        assert!(ContinuousStep::new(-0.1, -1.0, 0.5).is_err());
    }

    #[test]
    fn rule_names_round_trip() {
        for r in Rule::ALL {
            assert_eq!(r.name().parse::<Rule>().unwrap(), r);
        }
        assert!("simpson".parse::<Rule>().is_err());
    }

    #[test]
    fn too_few_deltas_rejected() {
        let err = convergence_order(Rule::ExpEuler, &TestSystem::smooth(), &[0.1, 0.05], 0.5);
        assert!(err.is_err());
    }

    #[test]
    fn quadrature_matches_closed_form_integral() {
        let mut sys = TestSystem::smooth();
        sys.a = |t| -1.0 - 0.5 * t.cos();
        sys.a_integral = None;
        let q = sys.integral_of_a(0.3, 0.7);
        let exact = -(0.7 - 0.3) - 0.5 * (0.7f64.sin() - 0.3f64.sin());
        assert!((q - exact).abs() < 1e-12);
    }

    #[test]
    fn fine_reference_tracks_closed_form() {
        // h' = -h + sin t, h(0) = 0  =>  h(t) = (sin t - cos t + e^{-t}) / 2
        let sys = TestSystem::smooth();
        let t: f64 = sys.t_end;
        let exact = 0.5 * (t.sin() - t.cos() + (-t).exp());
        let h = integrate(Rule::ExpTrapezoidal, &sys, 0.0125 / 64.0, 0.5, true).unwrap();
        assert!((h - exact).abs() < 1e-8, "{h} vs {exact}");
    }
}

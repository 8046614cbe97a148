//! The Mamba-3 mixer block with per-feature toggles.
//!
//! `B` and `C` are projected once and shared by every head. Heads differ
//! through their own `Δ`, `A`, `λ` and (optionally) biases. With every
//! toggle off the block is a Mamba-2-style selective SSM.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ScanDims, ScanInputs, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{rand_normal, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mamba3BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub state: usize,
    /// 1 is SISO.
    pub rank: usize,
    pub expand: usize,
    pub use_rope: bool,
    pub use_trapezoidal: bool,
    pub use_bc_bias: bool,
    pub use_bc_norm: bool,
    pub use_short_conv: bool,
    pub use_pre_gate_norm: bool,
    /// Add the B/C biases before the rotation (so they rotate with the
    /// projections); when false they are added to the rotated vectors.
    pub rotate_biases: bool,
    pub bias_init: f64,
    /// Init std of the angle projection output. Δ starts near 1e-2, so the
    /// default of 100 puts the per-step rotation Δ·θ around one radian;
    /// small angles leave parity with almost no gradient.
    pub theta_init_std: f64,
    pub conv_width: usize,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Mamba3BlockConfig {
    /// All Mamba-3 features on, no conv, no gate norm; `head_dim` is chosen
    /// so that `n_heads · head_dim = expand · d_model`.
    pub fn mamba3(d_model: usize, state: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_heads,
            head_dim: 2 * d_model / n_heads.max(1),
            state,
            rank: 1,
            expand: 2,
            use_rope: true,
            use_trapezoidal: true,
            use_bc_bias: true,
            use_bc_norm: true,
            use_short_conv: false,
            use_pre_gate_norm: false,
            rotate_biases: true,
            bias_init: 1.0,
            theta_init_std: 100.0,
            conv_width: 4,
            norm_eps: 1e-5,
            seed: 0,
        }
    }

    /// Rope, trapezoid, B/C bias and B/C norm all off.
    pub fn mamba2_style(d_model: usize, state: usize, n_heads: usize) -> Self {
        Self {
            use_rope: false,
            use_trapezoidal: false,
            use_bc_bias: false,
            use_bc_norm: false,
            ..Self::mamba3(d_model, state, n_heads)
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.d_model == 0 || self.n_heads == 0 || self.head_dim == 0 || self.state == 0 || self.rank == 0 {
            return bad("block dimensions must be positive".into());
        }
        if self.inner_dim() != self.expand * self.d_model {
            return bad(format!(
                "n_heads·head_dim = {} must equal expand·d_model = {}",
                self.inner_dim(),
                self.expand * self.d_model
            ));
        }
        if self.use_rope && self.state % 2 != 0 {
            return bad(format!("rotary state size must be even, got {}", self.state));
        }
        if !(self.theta_init_std >= 0.0) {
            return bad(format!("theta_init_std must be ≥ 0, got {}", self.theta_init_std));
        }
        if self.use_short_conv && self.conv_width == 0 {
            return bad("conv width must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm eps must be positive".into());
        }
        Ok(())
    }
}

/// Named parameter slots of a block; absent slots are disabled by config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    InX,
    InZ,
    InB,
    InC,
    InDt,
    DtBias,
    InA,
    ALog,
    InTheta,
    InLambda,
    BNorm,
    CNorm,
    BBias,
    CBias,
    XRank,
    ZRank,
    OutRank,
    ConvXW,
    ConvXB,
    ConvBW,
    ConvBB,
    ConvCW,
    ConvCB,
    GateNorm,
    OutProj,
}

impl Slot {
    pub const ALL: [Slot; 25] = [
        Slot::InX,
        Slot::InZ,
        Slot::InB,
        Slot::InC,
        Slot::InDt,
        Slot::DtBias,
        Slot::InA,
        Slot::ALog,
        Slot::InTheta,
        Slot::InLambda,
        Slot::BNorm,
        Slot::CNorm,
        Slot::BBias,
        Slot::CBias,
        Slot::XRank,
        Slot::ZRank,
        Slot::OutRank,
        Slot::ConvXW,
        Slot::ConvXB,
        Slot::ConvBW,
        Slot::ConvBB,
        Slot::ConvCW,
        Slot::ConvCB,
        Slot::GateNorm,
        Slot::OutProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::InX => "in_x",
            Slot::InZ => "in_z",
            Slot::InB => "in_b",
            Slot::InC => "in_c",
            Slot::InDt => "in_dt",
            Slot::DtBias => "dt_bias",
            Slot::InA => "in_a",
            Slot::ALog => "a_log",
            Slot::InTheta => "in_theta",
            Slot::InLambda => "in_lambda",
            Slot::BNorm => "b_norm",
            Slot::CNorm => "c_norm",
            Slot::BBias => "b_bias",
            Slot::CBias => "c_bias",
            Slot::XRank => "x_rank",
            Slot::ZRank => "z_rank",
            Slot::OutRank => "out_rank",
            Slot::ConvXW => "conv_x_w",
            Slot::ConvXB => "conv_x_b",
            Slot::ConvBW => "conv_b_w",
            Slot::ConvBB => "conv_b_b",
            Slot::ConvCW => "conv_c_w",
            Slot::ConvCB => "conv_c_b",
            Slot::GateNorm => "gate_norm",
            Slot::OutProj => "out_proj",
        }
    }

    fn index(self) -> usize {
        Slot::ALL.iter().position(|&s| s == self).expect("slot listed")
    }
}

/// Shape of `slot` under `cfg`, `None` when the slot is disabled.
pub fn slot_shape(cfg: &Mamba3BlockConfig, slot: Slot) -> Option<Vec<usize>> {
    let (d, h, p, n, r) = (cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.state, cfg.rank);
    let hp = h * p;
    let conv = cfg.use_short_conv;
    let mimo = r > 1;
    Some(match slot {
        Slot::InX | Slot::InZ => vec![d, hp],
        Slot::InB | Slot::InC => vec![d, r * n],
        Slot::InDt | Slot::InA => vec![d, h],
        Slot::DtBias | Slot::ALog => vec![h],
        Slot::InTheta if cfg.use_rope => vec![d, n / 2],
        Slot::InLambda if cfg.use_trapezoidal => vec![d, h],
        Slot::BNorm | Slot::CNorm if cfg.use_bc_norm => vec![n],
        Slot::BBias | Slot::CBias if cfg.use_bc_bias => vec![h, r * n],
        Slot::XRank | Slot::ZRank | Slot::OutRank if mimo => vec![h, r, p],
        Slot::ConvXW if conv => vec![hp, cfg.conv_width],
        Slot::ConvXB if conv => vec![hp],
        Slot::ConvBW | Slot::ConvCW if conv => vec![r * n, cfg.conv_width],
        Slot::ConvBB | Slot::ConvCB if conv => vec![r * n],
        Slot::GateNorm if cfg.use_pre_gate_norm => vec![p],
        Slot::OutProj => vec![hp, d],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    slots: Vec<Option<Tensor>>,
}

/// `softplus⁻¹(y) = y + ln(1 − e^{−y})`
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl BlockParams {
    pub fn init(cfg: &Mamba3BlockConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut slots = Vec::with_capacity(Slot::ALL.len());
        for slot in Slot::ALL {
            let Some(shape) = slot_shape(cfg, slot) else {
                slots.push(None);
                continue;
            };
            let fan_in = shape[0] as f64;
            let t = match slot {
                Slot::InTheta => rand_normal(rng, &shape, 0.0, cfg.theta_init_std / fan_in.sqrt())?,
                Slot::InX | Slot::InZ | Slot::InB | Slot::InC | Slot::InLambda | Slot::OutProj => {
                    rand_normal(rng, &shape, 0.0, 1.0 / fan_in.sqrt())?
                }
                Slot::InDt | Slot::InA => rand_normal(rng, &shape, 0.0, 0.1 / fan_in.sqrt())?,
                // Δ log-uniform on [1e-3, 1e-1] at zero input
                Slot::DtBias => Tensor::from_fn(&shape, |_| {
                    inverse_softplus((rng.uniform(1e-3f64.ln(), 1e-1f64.ln())).exp())
                }),
                // decay rate -A log-uniform on [1, 16]
                Slot::ALog => Tensor::from_fn(&shape, |_| rng.uniform(0.0, 16f64.ln())),
                Slot::BNorm | Slot::CNorm | Slot::GateNorm | Slot::XRank | Slot::ZRank => Tensor::ones(&shape),
                Slot::OutRank => Tensor::full(&shape, 1.0 / cfg.rank as f64),
                Slot::BBias | Slot::CBias => Tensor::full(&shape, cfg.bias_init),
                Slot::ConvXW | Slot::ConvBW | Slot::ConvCW => {
                    rand_normal(rng, &shape, 0.0, 1.0 / (cfg.conv_width as f64).sqrt())?
                }
                Slot::ConvXB | Slot::ConvBB | Slot::ConvCB => Tensor::zeros(&shape),
            };
            slots.push(Some(t));
        }
        Ok(Self { slots })
    }

    pub fn get(&self, slot: Slot) -> Option<&Tensor> {
        self.slots[slot.index()].as_ref()
    }

    pub fn get_mut(&mut self, slot: Slot) -> Option<&mut Tensor> {
        self.slots[slot.index()].as_mut()
    }

    /// Present slots in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (Slot, &Tensor)> {
        Slot::ALL.iter().zip(&self.slots).filter_map(|(&s, t)| t.as_ref().map(|t| (s, t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Slot, &mut Tensor)> {
        Slot::ALL.iter().zip(&mut self.slots).filter_map(|(&s, t)| t.as_mut().map(|t| (s, t)))
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Uses `vars` (one per present slot, in [`BlockParams::iter`] order)
    /// as this block's parameters.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<BoundBlock<'t>> {
        let mut it = vars.iter();
        let slots = self.slots.iter().map(|t| t.as_ref().and_then(|_| it.next().copied())).collect::<Vec<_>>();
        if slots.iter().zip(&self.slots).any(|(v, t)| v.is_some() != t.is_some()) || it.next().is_some() {
            return Err(Error::Contract(format!("expected {} block variables, got {}", self.iter().count(), vars.len())));
        }
        Ok(BoundBlock { slots })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundBlock<'t> {
        BoundBlock {
            slots: self.slots.iter().map(|t| t.as_ref().map(|t| tape.leaf(t.clone()))).collect(),
        }
    }
}

/// Block parameters recorded as leaves on a tape.
pub struct BoundBlock<'t> {
    slots: Vec<Option<Var<'t>>>,
}

impl<'t> BoundBlock<'t> {
    pub fn get(&self, slot: Slot) -> Option<Var<'t>> {
        self.slots[slot.index()]
    }

    fn req(&self, slot: Slot) -> Result<Var<'t>> {
        self.get(slot)
            .ok_or_else(|| Error::Contract(format!("block parameter `{}` is not enabled", slot.name())))
    }

    /// Leaves in the same order as [`BlockParams::iter`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        self.slots.iter().flatten().copied().collect()
    }
}

fn finite<'t>(stage: &str, v: Var<'t>) -> Result<Var<'t>> {
    let val = v.value();
    if let Some(bad) = val.data().iter().find(|x| !x.is_finite()) {
        return Err(Error::NumericalFault {
            stage: stage.to_string(),
            detail: format!("non-finite value {bad} in tensor of shape {:?}", val.shape()),
        });
    }
    Ok(v)
}

/// Intermediates exposed for inspection and tests.
pub struct BlockTrace<'t> {
    pub alpha: Var<'t>,
    pub beta: Option<Var<'t>>,
    pub gamma: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
    pub x: Var<'t>,
    pub y: Var<'t>,
    pub out: Var<'t>,
}

/// Block on `u [batch·time, D]`.
pub fn block_forward_tape<'t>(
    cfg: &Mamba3BlockConfig,
    p: &BoundBlock<'t>,
    u: Var<'t>,
    batch: usize,
) -> Result<BlockTrace<'t>> {
    cfg.validate()?;
    let (h, hp, n, r, pd) = (cfg.n_heads, cfg.inner_dim(), cfg.state, cfg.rank, cfg.head_dim);
    let rows = u.shape()[0];
    if batch == 0 || rows % batch != 0 || u.shape().get(1) != Some(&cfg.d_model) {
        return Err(crate::error::dim_err("block_forward", &u.shape(), &[batch, cfg.d_model]));
    }
    let time = rows / batch;

    let mut x = u.matmul(p.req(Slot::InX)?)?;
    let z = u.matmul(p.req(Slot::InZ)?)?;
    let mut b = u.matmul(p.req(Slot::InB)?)?;
    let mut c = u.matmul(p.req(Slot::InC)?)?;
    finite("in_proj", x)?;
    if cfg.use_short_conv {
        x = x.causal_conv(p.req(Slot::ConvXW)?, p.req(Slot::ConvXB)?, batch)?.silu();
        b = b.causal_conv(p.req(Slot::ConvBW)?, p.req(Slot::ConvBB)?, batch)?.silu();
        c = c.causal_conv(p.req(Slot::ConvCW)?, p.req(Slot::ConvCB)?, batch)?.silu();
        finite("short_conv", x)?;
    }

    let delta = finite("dt", u.matmul(p.req(Slot::InDt)?)?.add_suffix(p.req(Slot::DtBias)?)?.softplus())?;
    let a = u.matmul(p.req(Slot::InA)?)?.add_suffix(p.req(Slot::ALog)?)?.exp().neg();
    let alpha = finite("decay", delta.mul(a)?.exp())?;
    let (beta, gamma) = if cfg.use_trapezoidal {
        let lambda = u.matmul(p.req(Slot::InLambda)?)?.sigmoid();
        let gamma = lambda.mul(delta)?;
        let beta = lambda.affine(-1.0, 1.0).mul(delta)?.mul(alpha)?;
        (Some(finite("trapezoid", beta)?), gamma)
    } else {
        (None, delta)
    };

    let norm = |v: Var<'t>, scale: Slot| -> Result<Var<'t>> {
        v.rms_norm(n, cfg.norm_eps)?
            .reshape(&[rows, r, n])?
            .mul_suffix(p.req(scale)?)?
            .reshape(&[rows, r * n])
    };
    if cfg.use_bc_norm {
        b = finite("bc_norm", norm(b, Slot::BNorm)?)?;
        c = norm(c, Slot::CNorm)?;
    }
    let mut bh = b.head_broadcast(h)?;
    let mut ch = c.head_broadcast(h)?;
    let bias_first = cfg.use_bc_bias && (cfg.rotate_biases || !cfg.use_rope);
    if bias_first {
        bh = bh.add_suffix(p.req(Slot::BBias)?)?;
        ch = ch.add_suffix(p.req(Slot::CBias)?)?;
    }
    if cfg.use_rope {
        let theta = u.matmul(p.req(Slot::InTheta)?)?;
        let angles = delta.head_outer(theta)?.cumsum_time(batch)?;
        bh = finite("rope", bh.rope(angles, -1.0)?)?;
        ch = ch.rope(angles, -1.0)?;
        if cfg.use_bc_bias && !bias_first {
            bh = bh.add_suffix(p.req(Slot::BBias)?)?;
            ch = ch.add_suffix(p.req(Slot::CBias)?)?;
        }
    }

    let xs = if r > 1 {
        x.rank_expand(p.req(Slot::XRank)?)?.reshape(&[rows, h, r * pd])?
    } else {
        x.reshape(&[rows, h, pd])?
    };
    let dims = ScanDims {
        batch,
        time,
        heads: h,
        state: n,
        head_dim: pd,
        rank: r,
    };
    let y = finite(
        "scan",
        ScanInputs {
            alpha,
            beta,
            gamma,
            b: bh,
            c: ch,
            x: xs,
        }
        .apply(dims)?,
    )?;

    let mut yg = y.reshape(&[rows, h, r, pd])?;
    if cfg.use_pre_gate_norm {
        yg = yg.rms_norm(pd, cfg.norm_eps)?.mul_suffix(p.req(Slot::GateNorm)?)?;
    }
    let zs = if r > 1 {
        z.rank_expand(p.req(Slot::ZRank)?)?
    } else {
        z.reshape(&[rows, h, 1, pd])?
    };
    let gated = finite("gate", yg.mul(zs.silu())?)?;
    let merged = if r > 1 {
        gated.rank_contract(p.req(Slot::OutRank)?)?
    } else {
        gated
    };
    let out = finite("out_proj", merged.reshape(&[rows, hp])?.matmul(p.req(Slot::OutProj)?)?)?;
    Ok(BlockTrace {
        alpha,
        beta,
        gamma,
        b: bh,
        c: ch,
        x: xs,
        y,
        out,
    })
}

/// Block forward on `u [T, D]` (or `[batch·T, D]`), returning `[·, D]`.
pub fn block_forward(u: &Tensor, params: &BlockParams, cfg: &Mamba3BlockConfig, batch: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let uv = tape.leaf(u.clone());
    let trace = block_forward_tape(cfg, &bound, uv, batch)?;
    let out = trace.out.value().clone();
    Ok(out)
}

/// `v · scale / sqrt(mean(v²) + eps)`
pub fn bc_norm(v: &[f64], scale: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.len() != scale.len() {
        return Err(crate::error::dim_err("bc_norm", &[v.len()], &[scale.len()]));
    }
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }
    let r = 1.0 / (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64 + eps).sqrt();
    Ok(v.iter().zip(scale).map(|(x, s)| x * s * r).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterCensus {
    /// `(slot name, count)` for every enabled slot.
    pub components: Vec<(String, usize)>,
    pub block_total: usize,
    /// SwiGLU MLP of inner dim `F` counted as `3·D·F`.
    pub mlp_dim: usize,
    pub mlp_total: usize,
    pub total: usize,
}

/// Exact census of one block plus an optional SwiGLU MLP of inner dim `mlp_dim`.
pub fn count_parameters(cfg: &Mamba3BlockConfig, mlp_dim: usize) -> ParameterCensus {
    let components: Vec<(String, usize)> = Slot::ALL
        .iter()
        .filter_map(|&s| slot_shape(cfg, s).map(|sh| (s.name().to_string(), sh.iter().product())))
        .collect();
    let block_total = components.iter().map(|c| c.1).sum();
    let mlp_total = 3 * cfg.d_model * mlp_dim;
    ParameterCensus {
        components,
        block_total,
        mlp_dim,
        mlp_total,
        total: block_total + mlp_total,
    }
}

/// MLP inner dim that brings `mimo` (block + MLP) closest to the total of
/// `siso` with an MLP of `siso_mlp_dim`.
pub fn matched_mlp_dim(mimo: &Mamba3BlockConfig, siso: &Mamba3BlockConfig, siso_mlp_dim: usize) -> usize {
    let target = count_parameters(siso, siso_mlp_dim).total as f64;
    let block = count_parameters(mimo, 0).block_total as f64;
    let per = 3.0 * mimo.d_model as f64;
    ((target - block) / per).round().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::discretize::DiscreteCoeffs;
    use crate::ssm::scan_two_term;

    fn small(cfg: Mamba3BlockConfig) -> Mamba3BlockConfig {
        Mamba3BlockConfig { seed: 3, ..cfg }
    }

    #[test]
    fn output_shape_for_each_toggle_set() {
        let mut rng = Rng::new(1);
        let base = Mamba3BlockConfig::mamba3(8, 4, 2);
        let variants = [
            base.clone(),
            Mamba3BlockConfig::mamba2_style(8, 4, 2),
            Mamba3BlockConfig { use_short_conv: true, use_pre_gate_norm: true, ..base.clone() },
            Mamba3BlockConfig { rank: 2, ..base.clone() },
            Mamba3BlockConfig { rotate_biases: false, ..base },
        ];
        let u = rand_normal(&mut rng, &[2 * 5, 8], 0.0, 1.0).unwrap();
        for cfg in variants {
            let p = BlockParams::init(&cfg, &mut rng).unwrap();
            let out = block_forward(&u, &p, &cfg, 2).unwrap();
            assert_eq!(out.shape(), &[10, 8]);
            assert!(out.all_finite());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = Mamba3BlockConfig::mamba3(8, 5, 2);
        assert!(cfg.validate().is_err());
        cfg.state = 4;
        cfg.head_dim = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn degenerate_config_matches_two_term_scan() {
        let mut rng = Rng::new(7);
        let cfg = small(Mamba3BlockConfig::mamba2_style(6, 4, 2));
        let p = BlockParams::init(&cfg, &mut rng).unwrap();
        let (t, h, pd) = (11, cfg.n_heads, cfg.head_dim);
        let u = rand_normal(&mut rng, &[t, 6], 0.0, 1.0).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let tr = block_forward_tape(&cfg, &bound, tape.leaf(u), 1).unwrap();
        assert!(tr.beta.is_none());
        let (alpha, gamma, b, c, x, y) = (
            tr.alpha.value().clone(),
            tr.gamma.value().clone(),
            tr.b.value().clone(),
            tr.c.value().clone(),
            tr.x.value().clone(),
            tr.y.value().clone(),
        );
        let n = cfg.state;
        for head in 0..h {
            let co: Vec<_> = (0..t)
                .map(|s| DiscreteCoeffs::new(alpha.at(s, head), 0.0, gamma.at(s, head)))
                .collect();
            let pick = |v: &Tensor, w: usize| {
                Tensor::from_fn(&[t, w], |k| v.data()[((k / w) * h + head) * w + k % w])
            };
            let want = scan_two_term(&co, &pick(&b, n), &pick(&c, n), &pick(&x, pd), None).unwrap();
            assert!(pick(&y, pd).max_abs_diff(&want.y).unwrap() < 1e-10);
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_output() {
        let mut rng = Rng::new(2);
        let cfg = Mamba3BlockConfig { bias_init: 0.0, ..Mamba3BlockConfig::mamba3(8, 4, 2) };
        let p = BlockParams::init(&cfg, &mut rng).unwrap();
        let out = block_forward(&Tensor::zeros(&[6, 8]), &p, &cfg, 1).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn bc_norm_contract() {
        let v = [3.0, -4.0, 0.5, 2.0];
        let one = [1.0; 4];
        let y = bc_norm(&v, &one, 1e-30).unwrap();
        let rms = (y.iter().map(|x| x * x).sum::<f64>() / 4.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = v.iter().map(|x| 7.0 * x).collect();
        let y7 = bc_norm(&scaled, &one, 1e-30).unwrap();
        assert!(y.iter().zip(&y7).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(bc_norm(&[0.0; 4], &one, 1e-5).unwrap(), vec![0.0; 4]);
        assert!(bc_norm(&v, &one, 0.0).is_err());
    }

    #[test]
    fn census_rules() {
        let (d, n, h) = (32, 16, 4);
        let siso = Mamba3BlockConfig::mamba3(d, n, h);
        let r1 = Mamba3BlockConfig { rank: 1, ..siso.clone() };
        assert_eq!(count_parameters(&siso, 64), count_parameters(&r1, 64));
        let mimo = Mamba3BlockConfig { rank: 4, ..siso.clone() };
        let c = count_parameters(&mimo, 0);
        let get = |name: &str| c.components.iter().find(|x| x.0 == name).unwrap().1;
        assert_eq!(get("in_b"), d * n * 4);
        // X path per head: D·P from the shared projection plus P·R scale
        let pd = mimo.head_dim;
        assert_eq!(get("in_x") / h + get("x_rank") / h, d * pd + pd * 4);
        let f = matched_mlp_dim(&mimo, &siso, 4 * d);
        let a = count_parameters(&siso, 4 * d).total as f64;
        let b = count_parameters(&mimo, f).total as f64;
        assert!((a - b).abs() / a < 0.01, "{a} vs {b}");
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = Mamba3BlockConfig {
            use_short_conv: true,
            use_pre_gate_norm: true,
            ..Mamba3BlockConfig::mamba3(4, 4, 2)
        };
        let mut rng = Rng::new(5);
        let p = BlockParams::init(&cfg, &mut rng).unwrap();
        let u = rand_normal(&mut rng, &[2 * 4, 4], 0.0, 1.0).unwrap();
        let w = rand_normal(&mut rng, &[8, 4], 0.0, 1.0).unwrap();
        let params: Vec<Tensor> = p.iter().map(|(_, t)| t.clone()).collect();
        let report = check_gradients(
            &params,
            |tape, vars| {
                let bound = p.bind_vars(vars)?;
                let tr = block_forward_tape(&cfg, &bound, tape.leaf(u.clone()), 2)?;
                Ok(tr.out.mul(tape.leaf(w.clone()))?.sum())
            },
            200,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}

//! Smooth strongly convex loss functions and their first three derivatives.
//!
//! Every loss carries certified curvature constants `K0 <= psi' <= K1` and
//! `|psi''| <= K2 * sqrt(psi')`. Losses whose natural score derivative can
//! reach zero (Huber, pseudo-L1) are convexified by an additive
//! `eps * x^2 / 2` term so that `K0 = eps > 0`.
//!
//! The exact (non-smooth) Huber loss is available as a reference evaluator;
//! the solver and all sensitivity formulas require a C2 loss, for which the
//! smoothed variant blends the Huber score derivative across
//! `[k - delta, k + delta]` with a C1 smoothstep. The choice of smoothing is
//! ours; any C2 approximation of the kink would do.

use serde::{Deserialize, Serialize};

use crate::error::MestError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    /// rho(x) = x^2 / 2.
    Square,
    /// C2 blend of the Huber loss plus eps-convexification.
    SmoothedHuber,
    /// rho(x) = sqrt(x^2 + delta^2) - delta plus eps-convexification.
    PseudoL1,
    /// Piecewise Huber with the kink at +-k. Reference evaluator only;
    /// rejected by the solver (psi'' is undefined at the kink).
    HuberExact,
}

/// A loss family member with certified curvature constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Huber transition parameter.
    pub k: f64,
    /// Smoothing radius (blend half-width for Huber, scale for pseudo-L1).
    pub delta: f64,
    /// Convexification weight added as eps * x^2 / 2.
    pub eps: f64,
    /// Global lower bound on psi'.
    pub k0: f64,
    /// Global upper bound on psi'.
    pub k1: f64,
    /// Global upper bound on |psi''| / sqrt(psi').
    pub k2: f64,
}

impl LossSpec {
    pub fn square() -> Self {
        LossSpec {
            kind: LossKind::Square,
            k: 0.0,
            delta: 0.0,
            eps: 0.0,
            k0: 1.0,
            k1: 1.0,
            k2: 0.0,
        }
    }

    pub fn huber_exact(k: f64) -> Result<Self, MestError> {
        if k <= 0.0 {
            return Err(MestError::InvalidLoss(format!("huber k must be positive, got {k}")));
        }
        Ok(LossSpec {
            kind: LossKind::HuberExact,
            k,
            delta: 0.0,
            eps: 0.0,
            k0: 0.0,
            k1: 1.0,
            k2: f64::INFINITY,
            })
    }

    /// `K3 = 2 sqrt(K1) K2`, the Lipschitz constant of psi'.
    pub fn k3(&self) -> f64 {
        2.0 * self.k1.sqrt() * self.k2
    }

    /// Whether the loss has a continuous second score derivative, as the
    /// solver and the sensitivity formulas require.
    pub fn is_c2(&self) -> bool {
        !matches!(self.kind, LossKind::HuberExact)
    }

    pub fn rho(&self, x: f64) -> f64 {
        match self.kind {
            LossKind::Square => 0.5 * x * x,
            LossKind::HuberExact => {
                let a = x.abs();
                if a <= self.k {
                    0.5 * x * x
                } else {
                    self.k * (a - 0.5 * self.k)
                }
            }
            LossKind::SmoothedHuber => huber_blend_rho(self.k, self.delta, x) + 0.5 * self.eps * x * x,
            LossKind::PseudoL1 => {
                let d = self.delta;
                (x * x + d * d).sqrt() - d + 0.5 * self.eps * x * x
            }
        }
    }

    pub fn psi(&self, x: f64) -> f64 {
        match self.kind {
            LossKind::Square => x,
            LossKind::HuberExact => x.abs().min(self.k) * x.signum(),
            LossKind::SmoothedHuber => huber_blend_psi(self.k, self.delta, x) + self.eps * x,
            LossKind::PseudoL1 => {
                let d = self.delta;
                x / (x * x + d * d).sqrt() + self.eps * x
            }
        }
    }

    pub fn psi1(&self, x: f64) -> f64 {
        match self.kind {
            LossKind::Square => 1.0,
            LossKind::HuberExact => {
                if x.abs() <= self.k {
                    1.0
                } else {
                    0.0
                }
            }
            LossKind::SmoothedHuber => huber_blend_psi1(self.k, self.delta, x) + self.eps,
            LossKind::PseudoL1 => {
                let d = self.delta;
                let s = x * x + d * d;
                d * d / (s * s.sqrt()) + self.eps
            }
        }
    }

    pub fn psi2(&self, x: f64) -> f64 {
        match self.kind {
            LossKind::Square => 0.0,
            LossKind::HuberExact => 0.0,
            LossKind::SmoothedHuber => huber_blend_psi2(self.k, self.delta, x),
            LossKind::PseudoL1 => {
                let d = self.delta;
                let s = x * x + d * d;
                -3.0 * d * d * x / (s * s * s.sqrt())
            }
        }
    }
}

// Smoothed Huber pieces, before eps-convexification. The score derivative is
// 1 on [0, a], the smoothstep descent 1 - (3t^2 - 2t^3) on [a, b] with
// t = (x - a) / (b - a), and 0 beyond b, where a = k - delta, b = k + delta.
// psi and rho are its exact antiderivatives, extended by oddness/evenness.

fn huber_blend_psi1(k: f64, delta: f64, x: f64) -> f64 {
    let a = k - delta;
    let b = k + delta;
    let ax = x.abs();
    if ax <= a {
        1.0
    } else if ax >= b {
        0.0
    } else {
        let t = (ax - a) / (b - a);
        1.0 - t * t * (3.0 - 2.0 * t)
    }
}

fn huber_blend_psi2(k: f64, delta: f64, x: f64) -> f64 {
    let a = k - delta;
    let b = k + delta;
    let ax = x.abs();
    if ax <= a || ax >= b {
        0.0
    } else {
        let w = b - a;
        let t = (ax - a) / w;
        -6.0 * t * (1.0 - t) / w * x.signum()
    }
}

fn huber_blend_psi(k: f64, delta: f64, x: f64) -> f64 {
    let a = k - delta;
    let b = k + delta;
    let ax = x.abs();
    let v = if ax <= a {
        ax
    } else if ax >= b {
        // integral of psi1 over [0, b] equals a + w/2 = k
        k
    } else {
        let w = b - a;
        let t = (ax - a) / w;
        a + w * (t - t * t * t + 0.5 * t * t * t * t)
    };
    v * x.signum()
}

fn huber_blend_rho(k: f64, delta: f64, x: f64) -> f64 {
    let a = k - delta;
    let b = k + delta;
    let ax = x.abs();
    if ax <= a {
        0.5 * ax * ax
    } else if ax >= b {
        rho_at_b(a, b) + k * (ax - b)
    } else {
        let w = b - a;
        let t = (ax - a) / w;
        0.5 * a * a + a * w * t + w * w * (0.5 * t * t - 0.25 * t * t * t * t + 0.1 * t * t * t * t * t)
    }
}

fn rho_at_b(a: f64, b: f64) -> f64 {
    let w = b - a;
    0.5 * a * a + a * w + 0.35 * w * w
}

/// C2 smoothed Huber with eps-convexification. `K2` is certified by grid
/// maximization of `|psi''| / sqrt(psi')`; blend polynomials make closed
/// forms brittle.
pub fn make_smoothed_huber(k: f64, eps: f64, delta: f64) -> Result<LossSpec, MestError> {
    if k <= 0.0 {
        return Err(MestError::InvalidLoss(format!("huber k must be positive, got {k}")));
    }
    if !(0.0 < eps && eps < 1.0) {
        return Err(MestError::InvalidLoss(format!("eps must lie in (0, 1), got {eps}")));
    }
    if delta <= 0.0 || delta >= k {
        return Err(MestError::InvalidLoss(format!(
            "delta must lie in (0, k) = (0, {k}), got {delta}"
        )));
    }
    let mut loss = LossSpec {
        kind: LossKind::SmoothedHuber,
        k,
        delta,
        eps,
        k0: eps,
        k1: 1.0 + eps,
        k2: 0.0,
    };
    loss.k2 = certify_k2(&loss);
    Ok(loss)
}

/// Smoothed L1 with eps-convexification. `delta` is the smoothing scale of
/// `sqrt(x^2 + delta^2) - delta`.
pub fn make_pseudo_l1(delta: f64, eps: f64) -> Result<LossSpec, MestError> {
    if delta <= 0.0 {
        return Err(MestError::InvalidLoss(format!("delta must be positive, got {delta}")));
    }
    if !(0.0 < eps && eps < 1.0) {
        return Err(MestError::InvalidLoss(format!("eps must lie in (0, 1), got {eps}")));
    }
    let mut loss = LossSpec {
        kind: LossKind::PseudoL1,
        k: 0.0,
        delta,
        eps,
        k0: eps,
        k1: 1.0 / delta + eps,
        k2: 0.0,
    };
    loss.k2 = certify_k2(&loss);
    Ok(loss)
}

/// Grid maximum of `|psi''| / sqrt(psi')` over [-100, 100] with 10^6 points,
/// inflated by 2% to cover off-grid values.
fn certify_k2(loss: &LossSpec) -> f64 {
    let n = 1_000_000usize;
    let mut max = 0.0f64;
    for i in 0..=n {
        let x = -100.0 + 200.0 * (i as f64) / (n as f64);
        let p1 = loss.psi1(x);
        let r = loss.psi2(x).abs() / p1.sqrt();
        if r > max {
            max = r;
        }
    }
    max * 1.02
}

/// Parse a loss description such as `square`,
/// `huber(k=1.345, eps=0.05, delta=0.1)`, `huber_exact(k=1.345)` or
/// `pseudo_l1(delta=0.3, eps=0.05)`. Omitted parameters take the defaults
/// k=1.345, eps=0.05, delta=0.1 (huber) / 0.3 (pseudo_l1).
pub fn parse_loss(text: &str) -> Result<LossSpec, MestError> {
    let text = text.trim();
    let (name, args) = match text.find('(') {
        Some(open) => {
            let close = text
                .rfind(')')
                .ok_or_else(|| MestError::InvalidLoss(format!("unbalanced parentheses in {text:?}")))?;
            (text[..open].trim(), text[open + 1..close].trim())
        }
        None => (text, ""),
    };
    let mut k = 1.345;
    let mut eps = 0.05;
    let mut delta = f64::NAN;
    for part in args.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| MestError::InvalidLoss(format!("expected key=value, got {part:?}")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| MestError::InvalidLoss(format!("bad numeric value in {part:?}")))?;
        match key.trim() {
            "k" => k = value,
            "eps" => eps = value,
            "delta" => delta = value,
            other => {
                return Err(MestError::InvalidLoss(format!("unknown loss parameter {other:?}")))
            }
        }
    }
    match name {
        "square" => Ok(LossSpec::square()),
        "huber" => make_smoothed_huber(k, eps, if delta.is_nan() { 0.1 } else { delta }),
        "huber_exact" => LossSpec::huber_exact(k),
        "pseudo_l1" | "l1" => make_pseudo_l1(if delta.is_nan() { 0.3 } else { delta }, eps),
        other => Err(MestError::InvalidLoss(format!("unknown loss family {other:?}"))),
    }
}

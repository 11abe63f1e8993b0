//! Look-back gradient recycling.
//!
//! A worker keeps the last gradient it transmitted in full (its look-back
//! gradient, LBG). Each round it measures how far its new accumulated gradient
//! `g` is from the span of the LBG, `sin²α = 1 − cos²(g, lbg)`. If that error
//! is within `δ` it sends only the scalar projection coefficient
//! `ρ = ⟨g, lbg⟩ / ‖lbg‖²` and the server rebuilds `ρ · lbg` from its own copy.
//! Otherwise it sends `g` and both sides replace their LBG with it.

use crate::compress::Payload;
use crate::error::{check_dim, Error, Result};
use crate::fl::ServerState;
use crate::harness::{self, ExperimentConfig, RunOutput};
use crate::numerics::ParamVector;

/// Wire width of one float in the bit ledger.
pub const FLOAT_BITS: u64 = 32;

/// Transmission cost of one uplink message.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cost {
    /// Float-equivalents; fractional only for sign payloads.
    pub floats: f64,
    pub bits: u64,
}

impl Cost {
    pub fn floats(n: usize) -> Self {
        Cost {
            floats: n as f64,
            bits: n as u64 * FLOAT_BITS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    ScalarLbc,
    FullGradient,
    CompressedFull,
}

impl MessageKind {
    pub fn is_scalar(self) -> bool {
        self == MessageKind::ScalarLbc
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    ScalarLbc(f64),
    FullGradient(ParamVector),
    CompressedFull(Payload),
}

/// What a worker sends to the server in one round. The cost is fixed when the
/// message is built.
#[derive(Clone, Debug, PartialEq)]
pub struct UplinkMessage {
    body: Body,
    cost: Cost,
}

impl UplinkMessage {
    pub fn scalar(rho: f64) -> Self {
        Self {
            body: Body::ScalarLbc(rho),
            cost: Cost::floats(1),
        }
    }

    pub fn full(gradient: ParamVector) -> Self {
        let cost = Cost::floats(gradient.dim());
        Self {
            body: Body::FullGradient(gradient),
            cost,
        }
    }

    /// A dense payload becomes a plain [`MessageKind::FullGradient`].
    pub fn from_payload(payload: Payload) -> Self {
        match payload {
            Payload::Dense(g) => Self::full(g),
            other => {
                let cost = other.cost();
                Self {
                    body: Body::CompressedFull(other),
                    cost,
                }
            }
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self.body {
            Body::ScalarLbc(_) => MessageKind::ScalarLbc,
            Body::FullGradient(_) => MessageKind::FullGradient,
            Body::CompressedFull(_) => MessageKind::CompressedFull,
        }
    }

    pub fn cost(&self) -> Cost {
        self.cost
    }

    pub fn rho(&self) -> Option<f64> {
        match self.body {
            Body::ScalarLbc(rho) => Some(rho),
            _ => None,
        }
    }

    /// Dense vector carried by a full message.
    pub fn dense(&self) -> Option<ParamVector> {
        match &self.body {
            Body::ScalarLbc(_) => None,
            Body::FullGradient(g) => Some(g.clone()),
            Body::CompressedFull(p) => Some(p.densify()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbgmConfig {
    pub delta_threshold: f64,
    /// Log `max_k ‖d_k‖² sin²α_k` each round.
    pub monitor_delta_sq: bool,
}

impl LbgmConfig {
    pub fn new(delta_threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta_threshold) {
            return Err(Error::invalid(format!(
                "delta must be in [0, 1], got {delta_threshold}"
            )));
        }
        Ok(Self {
            delta_threshold,
            monitor_delta_sq: false,
        })
    }
}

impl Default for LbgmConfig {
    fn default() -> Self {
        Self {
            delta_threshold: 0.2,
            monitor_delta_sq: false,
        }
    }
}

/// LBP error `sin²α` between `g` and `lbg`, in `[0, 1]`.
///
/// A zero `g` has error 0; a zero `lbg` with nonzero `g` has error 1.
pub fn lbp_error(g: &ParamVector, lbg: &ParamVector) -> Result<f64> {
    check_dim(lbg.dim(), g.dim())?;
    let gg = g.norm_sq();
    if gg == 0.0 {
        return Ok(0.0);
    }
    let ll = lbg.norm_sq();
    if ll == 0.0 {
        return Ok(1.0);
    }
    let cos = g.dot(lbg)? / (gg.sqrt() * ll.sqrt());
    Ok((1.0 - cos * cos).clamp(0.0, 1.0))
}

/// Look-back coefficient `ρ = ⟨g, lbg⟩ / ‖lbg‖²`.
pub fn lbc(g: &ParamVector, lbg: &ParamVector) -> Result<f64> {
    check_dim(lbg.dim(), g.dim())?;
    let ll = lbg.norm_sq();
    if ll == 0.0 {
        return Err(Error::ZeroNorm("lbc"));
    }
    Ok(g.dot(lbg)? / ll)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateDecision {
    Scalar {
        rho: f64,
        lbp_error: f64,
    },
    /// `lbp_error` is `None` when the worker had no LBG yet.
    Full {
        lbp_error: Option<f64>,
    },
}

impl GateDecision {
    pub fn lbp_error(&self) -> Option<f64> {
        match *self {
            GateDecision::Scalar { lbp_error, .. } => Some(lbp_error),
            GateDecision::Full { lbp_error } => lbp_error,
        }
    }
}

/// The transmission gate of a single worker.
pub fn gate(g: &ParamVector, lbg: Option<&ParamVector>, cfg: &LbgmConfig) -> Result<GateDecision> {
    let Some(lbg) = lbg else {
        return Ok(GateDecision::Full { lbp_error: None });
    };
    check_dim(lbg.dim(), g.dim())?;
    if g.is_zero() {
        return Ok(GateDecision::Scalar {
            rho: 0.0,
            lbp_error: 0.0,
        });
    }
    if lbg.is_zero() {
        return Ok(GateDecision::Full {
            lbp_error: Some(1.0),
        });
    }
    let err = lbp_error(g, lbg)?;
    if err <= cfg.delta_threshold {
        Ok(GateDecision::Scalar {
            rho: lbc(g, lbg)?,
            lbp_error: err,
        })
    } else {
        Ok(GateDecision::Full {
            lbp_error: Some(err),
        })
    }
}

/// Chooses between a scalar LBC and the full gradient. The caller replaces its
/// LBG with `g` whenever the returned message is full.
pub fn decide_message(
    g: &ParamVector,
    lbg: Option<&ParamVector>,
    cfg: &LbgmConfig,
) -> Result<UplinkMessage> {
    Ok(match gate(g, lbg, cfg)? {
        GateDecision::Scalar { rho, .. } => UplinkMessage::scalar(rho),
        GateDecision::Full { .. } => UplinkMessage::full(g.clone()),
    })
}

/// Rebuilds a worker's gradient on the server, refreshing the server-side LBG
/// copy when a full message arrives.
pub fn reconstruct(
    server: &mut ServerState,
    worker_id: usize,
    msg: &UplinkMessage,
) -> Result<ParamVector> {
    match msg.rho() {
        Some(rho) => {
            let lbg = server.lbg_copies.get(&worker_id).ok_or_else(|| {
                Error::Protocol(format!(
                    "scalar LBC from worker {worker_id} with no stored LBG"
                ))
            })?;
            Ok(lbg.scaled(rho))
        }
        None => {
            let dense = msg.dense().expect("full message carries a vector");
            server.lbg_copies.insert(worker_id, dense.clone());
            Ok(dense)
        }
    }
}

/// Full-participation LBGM run.
pub fn run_lbgm(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.algorithm = harness::Algorithm::Lbgm;
    harness::run_experiment(&cfg)
}

/// LBGM with a `fraction` of workers sampled each round.
pub fn run_lbgm_sampled(cfg: &ExperimentConfig, fraction: f64) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.algorithm = harness::Algorithm::LbgmSampled;
    cfg.sample_fraction = fraction;
    harness::run_experiment(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn lbp_error_examples() {
        let lbg = pv(&[1.0, -2.0, 0.5]);
        assert_eq!(lbp_error(&lbg.scaled(3.0), &lbg).unwrap(), 0.0);
        assert_eq!(lbp_error(&pv(&[0.0, 1.0]), &pv(&[2.0, 0.0])).unwrap(), 1.0);
        let e = lbp_error(&pv(&[1.0, 2.0]), &pv(&[1.0, 0.0])).unwrap();
        assert!((e - 0.8).abs() < 1e-15);
        assert_eq!(lbp_error(&pv(&[0.0, 0.0]), &pv(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(lbp_error(&pv(&[1.0, 0.0]), &pv(&[0.0, 0.0])).unwrap(), 1.0);
        assert!(lbp_error(&pv(&[1.0]), &pv(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn lbc_examples() {
        let lbg = pv(&[1.0, -2.0, 0.5]);
        assert_eq!(lbc(&lbg, &lbg).unwrap(), 1.0);
        assert_eq!(lbc(&lbg.scaled(2.0), &lbg).unwrap(), 2.0);
        assert_eq!(lbc(&pv(&[1.0, 2.0]), &pv(&[1.0, 0.0])).unwrap(), 1.0);
        assert!(matches!(
            lbc(&lbg, &pv(&[0.0, 0.0, 0.0])),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn decide_examples() {
        let g = pv(&[1.0, 2.0, 3.0]);
        let cfg = LbgmConfig::new(0.2).unwrap();
        let first = decide_message(&g, None, &cfg).unwrap();
        assert_eq!(first.kind(), MessageKind::FullGradient);
        assert_eq!(first.cost().floats, 3.0);

        let always = LbgmConfig::new(1.0).unwrap();
        let msg = decide_message(&g, Some(&pv(&[-3.0, 0.0, 1.0])), &always).unwrap();
        assert_eq!(msg.kind(), MessageKind::ScalarLbc);
        assert_eq!(
            msg.cost(),
            Cost {
                floats: 1.0,
                bits: 32
            }
        );

        let never = LbgmConfig::new(0.0).unwrap();
        let msg = decide_message(&g, Some(&pv(&[1.0, 2.0, 3.5])), &never).unwrap();
        assert_eq!(msg.kind(), MessageKind::FullGradient);

        // A zero LBG forces a full send even at δ = 1.
        let msg = decide_message(&g, Some(&pv(&[0.0, 0.0, 0.0])), &always).unwrap();
        assert_eq!(msg.kind(), MessageKind::FullGradient);

        let msg = decide_message(&pv(&[0.0, 0.0, 0.0]), Some(&g), &never).unwrap();
        assert_eq!(msg.rho(), Some(0.0));

        assert!(LbgmConfig::new(1.5).is_err());
        assert!(LbgmConfig::new(-0.1).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let mut server = ServerState::new(pv(&[0.0, 0.0]));
        assert!(matches!(
            reconstruct(&mut server, 0, &UplinkMessage::scalar(1.0)),
            Err(Error::Protocol(_))
        ));
        let g = pv(&[2.0, 4.0]);
        let out = reconstruct(&mut server, 0, &UplinkMessage::full(g.clone())).unwrap();
        assert_eq!(out, g);
        assert_eq!(server.lbg_copies[&0], g);
        assert_eq!(
            reconstruct(&mut server, 0, &UplinkMessage::scalar(0.5)).unwrap(),
            pv(&[1.0, 2.0])
        );
        assert!(reconstruct(&mut server, 0, &UplinkMessage::scalar(0.0))
            .unwrap()
            .is_zero());
        assert_eq!(server.lbg_copies[&0], g);
    }

    fn vec_pair(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-10.0f64..10.0, dim),
            proptest::collection::vec(-10.0f64..10.0, dim),
        )
    }

    proptest! {
        #[test]
        fn projection_geometry((g, l) in vec_pair(7)) {
            let (g, l) = (pv(&g), pv(&l));
            prop_assume!(l.norm_sq() > 1e-6 && g.norm_sq() > 1e-6);
            let rho = lbc(&g, &l).unwrap();
            let resid = g.axpy(-rho, &l).unwrap();
            let scale = g.norm_sq();
            prop_assert!((resid.norm_sq() - scale * lbp_error(&g, &l).unwrap()).abs() <= 1e-9 * scale);
            prop_assert!(resid.dot(&l).unwrap().abs() <= 1e-9 * g.norm() * l.norm());
            // ‖ρ·lbg‖ = ‖g‖·|cos α|
            let cos = g.cosine_sim(&l).unwrap();
            prop_assert!((l.scaled(rho).norm() - g.norm() * cos.abs()).abs() <= 1e-9 * g.norm());
        }

        #[test]
        fn gate_is_scale_invariant((g, l) in vec_pair(5), c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let (g, l) = (pv(&g), pv(&l));
            prop_assume!(l.norm_sq() > 1e-6 && g.norm_sq() > 1e-6);
            let e1 = lbp_error(&g, &l).unwrap();
            let e2 = lbp_error(&g.scaled(c), &l).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-12);
            let r1 = lbc(&g, &l).unwrap();
            let r2 = lbc(&g.scaled(c), &l).unwrap();
            prop_assert!((c * r1 - r2).abs() <= 1e-12 * (c * r1).abs().max(1e-12));
        }
    }

    #[test]
    fn worker_and_server_copies_agree() {
        let mut rng = RngStream::new(9, 0);
        let cfg = LbgmConfig::new(0.3).unwrap();
        let mut server = ServerState::new(ParamVector::zeros(6));
        let mut worker_lbg: Option<ParamVector> = None;
        let base: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..50 {
            let g = pv(&base
                .iter()
                .map(|b| b + 0.4 * rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>());
            let msg = decide_message(&g, worker_lbg.as_ref(), &cfg).unwrap();
            if !msg.kind().is_scalar() {
                worker_lbg = Some(g.clone());
            }
            reconstruct(&mut server, 0, &msg).unwrap();
            assert!(server.lbg_copies[&0].bit_eq(worker_lbg.as_ref().unwrap()));
        }
    }
}

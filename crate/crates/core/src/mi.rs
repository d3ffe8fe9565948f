//! Contrastive mutual-information estimator between views: a one-layer GCN
//! encoder per view, a projection MLP shared by all views, and the symmetric
//! cross-view InfoNCE loss.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::ndiff::{glorot_with, GcnPlan, Group, ParamSet, Tape, Tensor, Var};

/// Which view an encoder belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewId {
    Fused,
    First,
    Second,
}

impl ViewId {
    pub const ALL: [ViewId; 3] = [ViewId::Fused, ViewId::First, ViewId::Second];

    fn tag(self) -> &'static str {
        match self {
            ViewId::Fused => "star",
            ViewId::First => "v1",
            ViewId::Second => "v2",
        }
    }
}

/// Parameter names of the estimator (group Φ).
#[derive(Debug, Clone)]
pub struct MiParams {
    pub tau: f64,
}

impl MiParams {
    pub fn encoder(&self, which: ViewId) -> String {
        format!("mi.enc.{}", which.tag())
    }

    pub fn slope(&self, which: ViewId) -> String {
        format!("mi.prelu.{}", which.tag())
    }

    pub const PROJ_W0: &'static str = "mi.proj.w0";
    pub const PROJ_B0: &'static str = "mi.proj.b0";
    pub const PROJ_W1: &'static str = "mi.proj.w1";
    pub const PROJ_B1: &'static str = "mi.proj.b1";

    pub fn init<R: Rng>(&self, params: &mut ParamSet, d_in: usize, d_mi: usize, rng: &mut R) -> Result<()> {
        for which in ViewId::ALL {
            params.insert(self.encoder(which), Group::Phi, glorot_with(d_in, d_mi, rng))?;
            params.insert(self.slope(which), Group::Phi, Tensor::scalar(0.25))?;
        }
        params.insert(Self::PROJ_W0, Group::Phi, glorot_with(d_mi, d_mi, rng))?;
        params.insert(Self::PROJ_B0, Group::Phi, Tensor::zeros(1, d_mi))?;
        params.insert(Self::PROJ_W1, Group::Phi, glorot_with(d_mi, d_mi, rng))?;
        params.insert(Self::PROJ_B1, Group::Phi, Tensor::zeros(1, d_mi))?;
        Ok(())
    }
}

/// `H = PReLU(GCN(V, X))`.
pub fn mi_embed(tape: &mut Tape, plan: &GcnPlan, view_values: Var, x: Var, weight: Var, slope: Var) -> Result<Var> {
    let h = tape.gcn_layer(plan, view_values, x, weight)?;
    tape.prelu(h, slope)
}

/// Shared projection `elu(H W0 + b0) W1 + b1`.
pub fn project(tape: &mut Tape, h: Var, w0: Var, b0: Var, w1: Var, b1: Var) -> Result<Var> {
    let a = tape.matmul(h, w0)?;
    let a = tape.add_row(a, b0)?;
    let a = tape.elu(a);
    let a = tape.matmul(a, w1)?;
    tape.add_row(a, b1)
}

pub fn infonce(tape: &mut Tape, a: Var, b: Var, batch: &Arc<Vec<usize>>, tau: f64) -> Result<Var> {
    tape.infonce(a, b, batch.clone(), tau)
}

/// The three pairwise losses `(star, v1)`, `(star, v2)`, `(v1, v2)` and their sum.
pub fn mi_total(tape: &mut Tape, star: Var, first: Var, second: Var, batch: &Arc<Vec<usize>>, tau: f64) -> Result<(Var, [Var; 3])> {
    let a = infonce(tape, star, first, batch, tau)?;
    let b = infonce(tape, star, second, batch, tau)?;
    let c = infonce(tape, first, second, batch, tau)?;
    let ab = tape.add(a, b)?;
    Ok((tape.add(ab, c)?, [a, b, c]))
}

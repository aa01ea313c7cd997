//! Architecture-agnostic model configuration and realized models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::lipschitz_net::LayerVars;
use crate::lti_param::ExplicitLti;
use crate::model::StateSpaceModel;
use crate::params::{DirectParams, Leaves, ParamLayout};
use crate::r2dn::{self, ExplicitR2dn, LtiStepVars, R2dnConfig};
use crate::ren::{self, ExplicitRen, RenConfig, RenVars};
use crate::scalar::Scalar;

/// Either architecture, tagged by `arch` in serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    R2dn(R2dnConfig),
    Ren(RenConfig),
}

impl From<R2dnConfig> for ModelConfig {
    fn from(c: R2dnConfig) -> Self {
        Self::R2dn(c)
    }
}

impl From<RenConfig> for ModelConfig {
    fn from(c: RenConfig) -> Self {
        Self::Ren(c)
    }
}

impl ModelConfig {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::R2dn(_) => "r2dn",
            Self::Ren(_) => "ren",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::R2dn(c) => c.validate(),
            Self::Ren(c) => c.validate(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        match self {
            Self::R2dn(c) => c.layout(),
            Self::Ren(c) => c.layout(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::R2dn(c) => c.n,
            Self::Ren(c) => c.n,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::R2dn(c) => c.m,
            Self::Ren(c) => c.m,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::R2dn(c) => c.p,
            Self::Ren(c) => c.p,
        }
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> DirectParams<T> {
        DirectParams::init(self.layout(), rng)
    }

    pub fn realize<T: Scalar>(&self, params: &DirectParams<T>) -> Result<AnyModel<T>> {
        Ok(match self {
            Self::R2dn(c) => AnyModel::R2dn(r2dn::realize(params, c)?),
            Self::Ren(c) => AnyModel::Ren(ren::ren_realize(params, c)?),
        })
    }

    pub(crate) fn build_on_graph<T: Scalar>(&self, g: &mut Graph<T>, leaves: &Leaves) -> Result<GraphModel> {
        Ok(match self {
            Self::R2dn(c) => {
                let v = r2dn::realize_on_graph(g, leaves, c)?;
                GraphModel {
                    step: LtiStepVars::new(g, &v.lti),
                    kind: GraphKind::R2dn(v.phi),
                }
            }
            Self::Ren(c) => {
                let v = ren::realize_on_graph(g, leaves, c)?;
                GraphModel {
                    step: LtiStepVars::new(g, &v.lti),
                    kind: GraphKind::Ren(v),
                }
            }
        })
    }
}

pub(crate) enum GraphKind {
    R2dn(Vec<LayerVars>),
    Ren(RenVars),
}

/// A model realized on a [`Graph`], ready for batched steps.
pub(crate) struct GraphModel {
    step: LtiStepVars,
    kind: GraphKind,
}

impl GraphModel {
    pub(crate) fn step<T: Scalar>(&self, g: &mut Graph<T>, x: Var, u: Var) -> (Var, Var) {
        match &self.kind {
            GraphKind::R2dn(phi) => r2dn::step_on_graph(g, &self.step, phi, x, u),
            GraphKind::Ren(v) => ren::step_on_graph(g, &self.step, v, x, u),
        }
    }
}

/// A realized model of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel<T> {
    R2dn(ExplicitR2dn<T>),
    Ren(ExplicitRen<T>),
}

impl<T: Scalar> StateSpaceModel<T> for AnyModel<T> {
    fn state_dim(&self) -> usize {
        match self {
            Self::R2dn(m) => m.state_dim(),
            Self::Ren(m) => m.state_dim(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            Self::R2dn(m) => m.input_dim(),
            Self::Ren(m) => m.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Self::R2dn(m) => m.output_dim(),
            Self::Ren(m) => m.output_dim(),
        }
    }

    fn step_unchecked(&self, x: &Matrix<T>, u: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        match self {
            Self::R2dn(m) => m.step_unchecked(x, u),
            Self::Ren(m) => m.step_unchecked(x, u),
        }
    }

    fn lti(&self) -> &ExplicitLti<T> {
        match self {
            Self::R2dn(m) => &m.lti,
            Self::Ren(m) => &m.lti,
        }
    }
}

//! Training objectives as graph builders.
//!
//! Every loss is a sum over examples and output dimensions. The faithful
//! objectives combine a squared-error term on the live mean with a likelihood
//! term whose mean is `stop_gradient(mu)` and whose scale heads read
//! `stop_gradient(z)`, so trunk and mean-head gradients are exactly those of
//! the squared-error loss.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Partition, PartitionedModel, Wiring};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Normal,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossSpec {
    Sse,
    GaussianNll,
    Faithful,
    BetaNll { beta: f64 },
    StudentNll,
    FaithfulStudent,
    /// Residual mean gradient, scale heads still read the live trunk.
    NewtonMean { likelihood: Likelihood },
    /// Likelihood mean gradient, scale heads read `stop_gradient(z)`.
    ShieldedTrunk { likelihood: Likelihood },
}

impl LossSpec {
    pub fn beta_nll(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1]")));
        }
        Ok(Self::BetaNll { beta })
    }

    /// Likelihood family whose heads the loss needs, `None` for squared error.
    pub fn likelihood(&self) -> Option<Likelihood> {
        match *self {
            LossSpec::Sse => None,
            LossSpec::GaussianNll | LossSpec::Faithful | LossSpec::BetaNll { .. } => Some(Likelihood::Normal),
            LossSpec::StudentNll | LossSpec::FaithfulStudent => Some(Likelihood::Student),
            LossSpec::NewtonMean { likelihood } | LossSpec::ShieldedTrunk { likelihood } => Some(likelihood),
        }
    }

    /// Whether scale heads consume `stop_gradient(z)`.
    pub fn shields_trunk(&self) -> bool {
        matches!(
            self,
            LossSpec::Faithful | LossSpec::FaithfulStudent | LossSpec::ShieldedTrunk { .. }
        )
    }

    /// Whether the likelihood term sees `stop_gradient(mu)` next to a squared-error term.
    pub fn newton_mean(&self) -> bool {
        matches!(
            self,
            LossSpec::Faithful | LossSpec::FaithfulStudent | LossSpec::NewtonMean { .. }
        )
    }

    pub fn check_compatible(&self, model: &PartitionedModel) -> Result<()> {
        let ok = match self.likelihood() {
            None => true,
            Some(Likelihood::Normal) => model.has(Partition::Scale) && !model.has(Partition::Dof),
            Some(Likelihood::Student) => model.has(Partition::Scale) && model.has(Partition::Dof),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("loss {self} does not match the model's heads")))
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lik = |l: &Likelihood| match l {
            Likelihood::Normal => "",
            Likelihood::Student => "-student",
        };
        match self {
            LossSpec::Sse => write!(f, "sse"),
            LossSpec::GaussianNll => write!(f, "gaussian-nll"),
            LossSpec::Faithful => write!(f, "faithful"),
            LossSpec::BetaNll { beta } => write!(f, "beta-nll({beta})"),
            LossSpec::StudentNll => write!(f, "student-nll"),
            LossSpec::FaithfulStudent => write!(f, "faithful-student"),
            LossSpec::NewtonMean { likelihood } => write!(f, "newton-mean{}", lik(likelihood)),
            LossSpec::ShieldedTrunk { likelihood } => write!(f, "shielded-trunk{}", lik(likelihood)),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("beta-nll(").and_then(|r| r.strip_suffix(')')) {
            let beta: f64 = inner
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad beta in `{s}`")))?;
            return LossSpec::beta_nll(beta);
        }
        Ok(match s {
            "sse" => LossSpec::Sse,
            "gaussian-nll" => LossSpec::GaussianNll,
            "faithful" => LossSpec::Faithful,
            "student-nll" => LossSpec::StudentNll,
            "faithful-student" => LossSpec::FaithfulStudent,
            "newton-mean" => LossSpec::NewtonMean {
                likelihood: Likelihood::Normal,
            },
            "newton-mean-student" => LossSpec::NewtonMean {
                likelihood: Likelihood::Student,
            },
            "shielded-trunk" => LossSpec::ShieldedTrunk {
                likelihood: Likelihood::Normal,
            },
            "shielded-trunk-student" => LossSpec::ShieldedTrunk {
                likelihood: Likelihood::Student,
            },
            other => return Err(Error::Config(format!("unknown loss `{other}`"))),
        })
    }
}

fn same_shape(g: &Graph, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
    let (sa, sb) = (g.shape(a)?, g.shape(b)?);
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// `1/2 * sum (y - mu)^2`.
pub fn sse_loss(g: &mut Graph, y: NodeId, mu: NodeId) -> Result<NodeId> {
    same_shape(g, "sse", y, mu)?;
    let r = g.sub(mu, y)?;
    let sq = g.square(r)?;
    let total = g.reduce_sum(sq)?;
    g.mul_scalar(total, 0.5)
}

/// `sum 1/2 [log(2 pi var) + (y - mu)^2 / var]`.
pub fn gaussian_nll(g: &mut Graph, y: NodeId, mu: NodeId, var: NodeId) -> Result<NodeId> {
    same_shape(g, "gaussian-nll", y, mu)?;
    same_shape(g, "gaussian-nll", y, var)?;
    let r = g.sub(y, mu)?;
    let sq = g.square(r)?;
    let maha = g.div(sq, var)?;
    let logv = g.log(var)?;
    let logdet = g.add_scalar(logv, LN_2PI)?;
    let per = g.add(logdet, maha)?;
    let total = g.reduce_sum(per)?;
    g.mul_scalar(total, 0.5)
}

/// `sum stop(var^beta) * [1/2 log var + (y - mu)^2 / (2 var)]`, without the `log 2 pi` constant.
pub fn beta_nll(g: &mut Graph, y: NodeId, mu: NodeId, var: NodeId, beta: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1]")));
    }
    same_shape(g, "beta-nll", y, mu)?;
    same_shape(g, "beta-nll", y, var)?;
    let logv = g.log(var)?;
    let scaled = g.mul_scalar(logv, beta)?;
    let power = g.exp(scaled)?;
    let weight = g.stop_gradient(power)?;
    let r = g.sub(y, mu)?;
    let sq = g.square(r)?;
    let twice_var = g.mul_scalar(var, 2.0)?;
    let maha = g.div(sq, twice_var)?;
    let half_logv = g.mul_scalar(logv, 0.5)?;
    let per = g.add(half_logv, maha)?;
    let weighted = g.mul(weight, per)?;
    g.reduce_sum(weighted)
}

/// Negative log Student-t density with location `mu`, scale `scale`, dof `dof`, summed.
pub fn student_nll(g: &mut Graph, y: NodeId, mu: NodeId, scale: NodeId, dof: NodeId) -> Result<NodeId> {
    same_shape(g, "student-nll", y, mu)?;
    same_shape(g, "student-nll", y, scale)?;
    same_shape(g, "student-nll", y, dof)?;
    let dof_plus = g.add_scalar(dof, 1.0)?;
    let half_dof_plus = g.mul_scalar(dof_plus, 0.5)?;
    let half_dof = g.mul_scalar(dof, 0.5)?;
    let lg_num = g.lgamma(half_dof_plus)?;
    let lg_den = g.lgamma(half_dof)?;
    let log_dof = g.log(dof)?;
    let log_dof_pi = g.add_scalar(log_dof, PI.ln())?;
    let half_log_dof_pi = g.mul_scalar(log_dof_pi, 0.5)?;
    let log_scale = g.log(scale)?;
    let r = g.sub(y, mu)?;
    let t = g.div(r, scale)?;
    let t2 = g.square(t)?;
    let ratio = g.div(t2, dof)?;
    let one_plus = g.add_scalar(ratio, 1.0)?;
    let log_kernel = g.log(one_plus)?;
    let tail = g.mul(half_dof_plus, log_kernel)?;

    let a = g.sub(lg_den, lg_num)?;
    let b = g.add(a, half_log_dof_pi)?;
    let c = g.add(b, log_scale)?;
    let per = g.add(c, tail)?;
    g.reduce_sum(per)
}

/// Fails when any `shielded` node can receive gradient from any of `heads`.
pub fn audit_shielded(g: &Graph, heads: &[NodeId], shielded: &[NodeId]) -> Result<()> {
    for &h in heads {
        let live = g.live_ancestors(h)?;
        if let Some(&p) = shielded.iter().find(|&&p| live[p]) {
            return Err(Error::Wiring(format!(
                "scale-branch node {h} has a gradient path to shielded node {p}"
            )));
        }
    }
    Ok(())
}

/// Fails when the likelihood term can send gradient into the live mean.
pub fn audit_mean_stopped(g: &Graph, live_mean: NodeId, likelihood_term: NodeId) -> Result<()> {
    if g.has_live_path(live_mean, likelihood_term)? {
        return Err(Error::Wiring(format!(
            "likelihood term {likelihood_term} has a gradient path to the live mean {live_mean}"
        )));
    }
    Ok(())
}

/// `1/2 |y - mu|^2 + NLL(y; stop(mu), var)`. `var` must be computed from a
/// stopped trunk: no node in `shielded` may be a gradient ancestor of it.
pub fn faithful_loss(g: &mut Graph, y: NodeId, mu: NodeId, var: NodeId, shielded: &[NodeId]) -> Result<NodeId> {
    audit_shielded(g, &[var], shielded)?;
    let frozen = g.stop_gradient(mu)?;
    let nll = gaussian_nll(g, y, frozen, var)?;
    audit_mean_stopped(g, mu, nll)?;
    let sse = sse_loss(g, y, mu)?;
    g.add(sse, nll)
}

/// Student analogue of [`faithful_loss`]: both scale and dof must be shielded.
pub fn faithful_student_loss(
    g: &mut Graph,
    y: NodeId,
    mu: NodeId,
    scale: NodeId,
    dof: NodeId,
    shielded: &[NodeId],
) -> Result<NodeId> {
    audit_shielded(g, &[scale, dof], shielded)?;
    let frozen = g.stop_gradient(mu)?;
    let nll = student_nll(g, y, frozen, scale, dof)?;
    audit_mean_stopped(g, mu, nll)?;
    let sse = sse_loss(g, y, mu)?;
    g.add(sse, nll)
}

/// Gradients per partition, aligned with the model's parameter layout.
/// `None` marks a parameter the loss sends no gradient to.
pub type ParamGrads = BTreeMap<Partition, Vec<Option<Tensor>>>;

/// A model's training graph for a fixed batch size, reusable across steps.
#[derive(Debug, Clone)]
pub struct Objective {
    graph: Graph,
    wiring: Wiring,
    y: NodeId,
    loss: NodeId,
    spec: LossSpec,
}

impl Objective {
    pub fn build(model: &PartitionedModel, rows: usize, spec: LossSpec, dropout: bool) -> Result<Self> {
        spec.check_compatible(model)?;
        let mut g = Graph::new();
        let wiring = model.build_forward(
            &mut g,
            rows,
            ForwardOptions {
                dropout,
                shield_trunk: spec.shields_trunk(),
                heads: spec.likelihood().is_some(),
            },
        )?;
        let y = g.input(&[rows, model.spec().output_dim]);
        let mu = wiring.mean;
        let trunk: Vec<NodeId> = wiring.param_nodes(Partition::Trunk).collect();
        let head = |n: Option<NodeId>| n.ok_or_else(|| Error::InvalidArgument("missing head".into()));

        let loss = match spec {
            LossSpec::Sse => sse_loss(&mut g, y, mu)?,
            LossSpec::GaussianNll => gaussian_nll(&mut g, y, mu, head(wiring.variance)?)?,
            LossSpec::BetaNll { beta } => beta_nll(&mut g, y, mu, head(wiring.variance)?, beta)?,
            LossSpec::StudentNll => student_nll(&mut g, y, mu, head(wiring.scale)?, head(wiring.dof)?)?,
            LossSpec::Faithful => faithful_loss(&mut g, y, mu, head(wiring.variance)?, &trunk)?,
            LossSpec::FaithfulStudent => {
                faithful_student_loss(&mut g, y, mu, head(wiring.scale)?, head(wiring.dof)?, &trunk)?
            }
            LossSpec::NewtonMean { likelihood } => {
                let frozen = g.stop_gradient(mu)?;
                let nll = match likelihood {
                    Likelihood::Normal => gaussian_nll(&mut g, y, frozen, head(wiring.variance)?)?,
                    Likelihood::Student => student_nll(&mut g, y, frozen, head(wiring.scale)?, head(wiring.dof)?)?,
                };
                audit_mean_stopped(&g, mu, nll)?;
                let sse = sse_loss(&mut g, y, mu)?;
                g.add(sse, nll)?
            }
            LossSpec::ShieldedTrunk { likelihood } => {
                let heads: Vec<NodeId> = [wiring.scale, wiring.dof].into_iter().flatten().collect();
                audit_shielded(&g, &heads, &trunk)?;
                match likelihood {
                    Likelihood::Normal => gaussian_nll(&mut g, y, mu, head(wiring.variance)?)?,
                    Likelihood::Student => student_nll(&mut g, y, mu, head(wiring.scale)?, head(wiring.dof)?)?,
                }
            }
        };
        Ok(Self {
            graph: g,
            wiring,
            y,
            loss,
            spec,
        })
    }

    pub fn spec(&self) -> LossSpec {
        self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn wiring(&self) -> &Wiring {
        &self.wiring
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn target_node(&self) -> NodeId {
        self.y
    }

    /// Binds a batch and runs the forward pass, returning the loss value.
    pub fn evaluate(&mut self, model: &PartitionedModel, x: &Tensor, y: &Tensor, masks: &[Tensor]) -> Result<f64> {
        self.wiring.bind(&mut self.graph, model, x.clone(), masks)?;
        self.graph.bind(self.y, y.clone())?;
        match self.graph.forward() {
            Ok(()) => Ok(self.graph.value(self.loss)?.item()),
            Err(Error::NonFinite { node, op }) if matches!(op, "log" | "lgamma" | "div") => Err(Error::Domain(
                format!("loss term at node {node} ({op}) left its domain"),
            )),
            Err(e) => Err(e),
        }
    }

    /// Gradients of the last evaluated loss with respect to every parameter.
    pub fn param_gradients(&self) -> Result<ParamGrads> {
        let mut map = self.graph.backward(self.loss)?;
        let mut out = ParamGrads::new();
        for &(p, i, id) in &self.wiring.params {
            let slot = out.entry(p).or_default();
            if slot.len() <= i {
                slot.resize(i + 1, None);
            }
            slot[i] = map.take(id);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_inputs(g: &mut Graph, n: usize) -> Vec<NodeId> {
        (0..n).map(|_| g.parameter(&[1, 1])).collect()
    }

    fn eval(g: &mut Graph, binds: &[(NodeId, f64)], out: NodeId) -> f64 {
        for &(id, v) in binds {
            g.bind(id, Tensor::new(vec![1, 1], vec![v]).unwrap()).unwrap();
        }
        g.forward().unwrap();
        g.value(out).unwrap().item()
    }

    #[test]
    fn sse_values() {
        let mut g = Graph::new();
        let v = scalar_inputs(&mut g, 2);
        let l = sse_loss(&mut g, v[0], v[1]).unwrap();
        assert_eq!(eval(&mut g, &[(v[0], 3.0), (v[1], 3.0)], l), 0.0);
        assert_eq!(eval(&mut g, &[(v[0], 2.0), (v[1], 5.0)], l), 4.5);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(v[1]).unwrap().item(), 3.0);
    }

    #[test]
    fn gaussian_nll_values() {
        let mut g = Graph::new();
        let v = scalar_inputs(&mut g, 3);
        let l = gaussian_nll(&mut g, v[0], v[1], v[2]).unwrap();
        let at_mean = eval(&mut g, &[(v[0], 0.0), (v[1], 0.0), (v[2], 1.0)], l);
        assert!((at_mean - 0.918_938_533_204_672_7).abs() < 1e-15);
        let off = eval(&mut g, &[(v[0], 1.0), (v[1], 0.0), (v[2], 1.0)], l);
        assert!((off - 1.418_938_533_204_672_7).abs() < 1e-15);
        // stationary in the variance when var equals the squared residual
        eval(&mut g, &[(v[0], 2.5), (v[1], 0.5), (v[2], 4.0)], l);
        assert_eq!(g.backward(l).unwrap().get(v[2]).unwrap().item(), 0.0);
    }

    #[test]
    fn nonpositive_variance_fails_forward() {
        let mut g = Graph::new();
        let v = scalar_inputs(&mut g, 3);
        let l = gaussian_nll(&mut g, v[0], v[1], v[2]).unwrap();
        for &(id, x) in &[(v[0], 0.0), (v[1], 0.0), (v[2], 0.0)] {
            g.bind(id, Tensor::new(vec![1, 1], vec![x]).unwrap()).unwrap();
        }
        assert!(g.forward().is_err());
        let _ = l;
    }

    #[test]
    fn faithful_value_decomposes() {
        let mut g = Graph::new();
        let v = scalar_inputs(&mut g, 3);
        let l = faithful_loss(&mut g, v[0], v[1], v[2], &[]).unwrap();
        let val = eval(&mut g, &[(v[0], 0.0), (v[1], 0.0), (v[2], 1.0)], l);
        assert!((val - 0.918939).abs() < 1e-6);
        let val = eval(&mut g, &[(v[0], 1.0), (v[1], 3.0), (v[2], 2.0)], l);
        let want = 2.0 + 0.5 * ((2.0 * PI * 2.0f64).ln() + 4.0 / 2.0);
        assert!((val - want).abs() < 1e-14);
    }

    #[test]
    fn faithful_loss_rejects_live_trunk() {
        let mut g = Graph::new();
        let y = g.input(&[1, 1]);
        let theta = g.parameter(&[1, 1]);
        let mu = g.exp(theta).unwrap();
        let sp = g.softplus(theta).unwrap();
        assert!(matches!(faithful_loss(&mut g, y, mu, sp, &[theta]), Err(Error::Wiring(_))));
        let stopped = g.stop_gradient(theta).unwrap();
        let sp = g.softplus(stopped).unwrap();
        assert!(faithful_loss(&mut g, y, mu, sp, &[theta]).is_ok());
    }

    #[test]
    fn beta_nll_stationary_at_unit_variance() {
        for beta in [0.0, 0.5, 1.0] {
            let mut g = Graph::new();
            let v = scalar_inputs(&mut g, 3);
            let l = beta_nll(&mut g, v[0], v[1], v[2], beta).unwrap();
            eval(&mut g, &[(v[0], 1.0), (v[1], 0.0), (v[2], 1.0)], l);
            assert_eq!(g.backward(l).unwrap().get(v[2]).unwrap().item(), 0.0, "beta {beta}");
        }
        let mut g = Graph::new();
        let v = scalar_inputs(&mut g, 3);
        assert!(beta_nll(&mut g, v[0], v[1], v[2], 1.5).is_err());
    }

    #[test]
    fn student_near_normal_at_large_dof() {
        let mut g = Graph::new();
        let v = scalar_inputs(&mut g, 4);
        let l = student_nll(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        let val = eval(&mut g, &[(v[0], 0.0), (v[1], 0.0), (v[2], 0.98f64.sqrt()), (v[3], 100.0)], l);
        assert!((val - 0.918939).abs() < 1e-2);
    }

    #[test]
    fn loss_spec_parses_and_prints() {
        for s in [
            "sse",
            "gaussian-nll",
            "faithful",
            "beta-nll(0.5)",
            "student-nll",
            "faithful-student",
            "newton-mean",
            "shielded-trunk-student",
        ] {
            let spec: LossSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("beta-nll(2)".parse::<LossSpec>().is_err());
        assert!("mystery".parse::<LossSpec>().is_err());
    }
}
